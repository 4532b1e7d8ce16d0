use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use vitae::analysis::{attention_distance, count_macs, count_params, export_attn_csv, export_cost_csv, export_pgm, grad_cam, CostReport};
use vitae::data::{gen_synthetic, load_idx, Dataset};
use vitae::model::{build_model, run_model, ForwardOptions};
use vitae::tensor::gradcheck::{gradcheck_model, MAX_EPS, MIN_EPS};
use vitae::tensor::{DType, Float};
use vitae::train::{argmax, evaluate, run_ablation, train_with, AblationMatrix, Checkpoint, TrainConfig};
use vitae::{ModelConfig, ParamStore, Tensor};

use crate::config::{load_model, parse_value, CliConfig, DataSource, SyntheticData};
use crate::{
    AblateArgs, CamArgs, Command, GradcheckArgs, InspectArgs, MacsArgs, ModelArgs, TrainArgs, EXIT_OK, EXIT_VERIFY,
};

/// Runs one command and returns its exit code.
pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Params(a) => params_cmd(a),
        Command::Macs(a) => macs_cmd(a),
        Command::AttnDist(a) => attn_dist_cmd(a),
        Command::Cam(a) => cam_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Config { config } => {
            println!("{}", CliConfig::load(&config)?.to_json());
            Ok(EXIT_OK)
        }
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train_cmd(a: TrainArgs) -> Result<u8> {
    let mut cfg = CliConfig::load(&a.config)?;
    if let Some(f) = a.data_fraction {
        cfg.train.data_fraction = f;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    cfg.validate()?;
    let (train_ds, val_ds) = cfg.data.load(&cfg.model, &config_dir(&a.config))?;
    create_dir(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.json"), cfg.to_json())
        .with_context(|| format!("writing config.json in {}", cfg.output_dir.display()))?;

    println!(
        "training {} samples ({} classes) for {} epochs, effective lr {:.3e}",
        train_ds.len(),
        train_ds.num_classes(),
        cfg.train.epochs,
        cfg.train.effective_lr()
    );
    let report = |m: &vitae::train::EpochMetrics| {
        let val = match (m.val_loss, m.val_top1) {
            (Some(l), Some(t)) => format!("  val_loss {l:.4}  val_top1 {t:.4}"),
            _ => String::new(),
        };
        println!("epoch {:>3}  step {:>6}  lr {:.3e}  train_loss {:.4}{val}", m.epoch, m.step, m.lr, m.train_loss);
    };
    let out = Some(cfg.output_dir.as_path());
    match cfg.train.dtype {
        DType::Float32 => drop(train_with::<f32>(&cfg.model, &cfg.train, &train_ds, val_ds.as_ref(), out, report)?),
        DType::Float64 => drop(train_with::<f64>(&cfg.model, &cfg.train, &train_ds, val_ds.as_ref(), out, report)?),
    }
    println!("wrote {}", cfg.output_dir.join("metrics.csv").display());
    Ok(EXIT_OK)
}

fn model_from(preset: &str, config: &Option<PathBuf>) -> Result<ModelConfig> {
    match config {
        Some(p) => load_model(p),
        None => Ok(ModelConfig::preset(preset)?),
    }
}

fn print_cost(report: &CostReport, macs: bool, csv: bool) {
    if csv {
        println!("module,params,macs");
        for r in &report.rows {
            println!("{},{},{}", r.name, r.params, r.macs);
        }
        println!("total,{},{}", report.total_params(), report.total_macs());
        return;
    }
    let width = report.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    if macs {
        println!("{:<width$} {:>12} {:>16}", "module", "params", "macs");
        for r in &report.rows {
            println!("{:<width$} {:>12} {:>16}", r.name, r.params, r.macs);
        }
        println!(
            "{:<width$} {:>12} {:>16}  ({:.3}M params, {:.3}G MACs)",
            "total",
            report.total_params(),
            report.total_macs(),
            report.total_params() as f64 / 1e6,
            report.total_macs() as f64 / 1e9
        );
    } else {
        println!("{:<width$} {:>12}", "module", "params");
        for r in &report.rows {
            println!("{:<width$} {:>12}", r.name, r.params);
        }
        println!(
            "{:<width$} {:>12}  ({:.3}M)",
            "total",
            report.total_params(),
            report.total_params() as f64 / 1e6
        );
    }
}

fn write_cost(report: &CostReport, dir: &Option<PathBuf>, name: &str) -> Result<()> {
    if let Some(d) = dir {
        create_dir(d)?;
        export_cost_csv(report, d.join(name))?;
    }
    Ok(())
}

fn params_cmd(a: ModelArgs) -> Result<u8> {
    let cfg = model_from(&a.preset, &a.config)?;
    let (params, _) = build_model::<f32>(&cfg)?;
    let report = count_params(&params);
    print_cost(&report, false, a.csv);
    write_cost(&report, &a.output_dir, "params.csv")?;
    Ok(EXIT_OK)
}

fn macs_cmd(a: MacsArgs) -> Result<u8> {
    let cfg = model_from(&a.model.preset, &a.model.config)?;
    let side = a.input.unwrap_or(cfg.input_size.0);
    let report = count_macs(&cfg, (side, side))?;
    if !a.model.csv {
        println!("input {side}x{side}");
    }
    print_cost(&report, true, a.model.csv);
    write_cost(&report, &a.model.output_dir, "macs.csv")?;
    Ok(EXIT_OK)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<u8> {
    if !(MIN_EPS..=MAX_EPS).contains(&a.eps) {
        bail!("--eps {} is outside the accepted range [{MIN_EPS:e}, {MAX_EPS:e}]", a.eps);
    }
    let cfg = model_from(&a.preset, &a.config)?;
    let report = gradcheck_model(&cfg, a.eps, a.corrupt_backward)?;
    println!("{:<12} {:>14}", "module", "max_rel_err");
    for (module, err) in report.by_module() {
        println!("{module:<12} {err:>14.3e}");
    }
    let failures: Vec<_> = report.failures(a.tolerance).collect();
    if failures.is_empty() {
        println!(
            "all {} parameter tensors pass (worst {:.3e} < {:e})",
            report.entries.len(),
            report.worst(),
            a.tolerance
        );
        Ok(EXIT_OK)
    } else {
        println!("{} parameter tensors exceed {:e}:", failures.len(), a.tolerance);
        for f in failures {
            match &f.failure {
                Some(msg) => println!("  {}: {msg}", f.name),
                None => println!("  {}: relative error {:.3e}", f.name, f.max_rel_err),
            }
        }
        Ok(EXIT_VERIFY)
    }
}

/// A checkpoint with its config, parameters in float64 and the
/// normalization to apply to raw images.
struct Loaded {
    config: ModelConfig,
    params: ParamStore<f64>,
    ckpt_norm: Option<vitae::data::Normalization>,
}

fn load_checkpoint(a: &InspectArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::<f64>::load(&a.checkpoint)?;
    if let Some(p) = &a.config {
        let expected = load_model(p)?;
        ckpt.check_against(&expected)
            .with_context(|| format!("{} does not match {}", a.checkpoint.display(), p.display()))?;
    }
    Ok(Loaded {
        config: ckpt.config,
        params: ckpt.params,
        ckpt_norm: ckpt.normalization,
    })
}

fn inspect_data(a: &InspectArgs, cfg: &ModelConfig) -> Result<Dataset> {
    let ds = if a.data == "synthetic" {
        if a.labels.is_some() {
            bail!("--labels only applies to IDX data");
        }
        let spec = SyntheticData {
            canvas: None,
            train_per_class: a.per_class,
            val_per_class: 0,
            seed: a.data_seed,
            val_seed: None,
            scale_range: None,
            noise_std: None,
        };
        gen_synthetic(&spec.spec(cfg, a.per_class, a.data_seed))?
    } else {
        let labels = a.labels.as_ref().context("--labels is required with an IDX image file")?;
        load_idx(&a.data, labels)?
    };
    match a.limit {
        Some(0) => bail!("--limit must be at least 1"),
        Some(n) if n < ds.len() => {
            let (c, h, w) = ds.sample_shape();
            let images = Tensor::new(&[n, c, h, w], ds.images.data()[..n * c * h * w].to_vec())?;
            Ok(Dataset::new(images, ds.labels[..n].to_vec(), ds.class_names.clone())?)
        }
        _ => Ok(ds),
    }
}

fn evaluate_cmd(a: InspectArgs) -> Result<u8> {
    let m = load_checkpoint(&a)?;
    let ds = inspect_data(&a, &m.config)?;
    let norm = m.ckpt_norm.clone().unwrap_or_else(|| ds.normalization.clone());
    let e = evaluate(&m.config, &m.params, &ds, &norm, 64)?;
    println!("samples {}  top1 {:.4}  loss {:.4}", ds.len(), e.top1, e.loss);
    Ok(EXIT_OK)
}

fn batch<T: Float>(ds: &Dataset, indices: &[usize], m: &Loaded) -> Result<Tensor<T>> {
    let norm = m.ckpt_norm.clone().unwrap_or_else(|| ds.normalization.clone());
    Ok(ds.gather::<T>(indices, &norm)?.0)
}

fn attn_dist_cmd(a: InspectArgs) -> Result<u8> {
    let m = load_checkpoint(&a)?;
    let ds = inspect_data(&a, &m.config)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let images = batch::<f64>(&ds, &all, &m)?;
    let report = attention_distance(&m.config, &m.params, &images, None)?;
    println!("{:<8} {:>7} {:>14}", "layer", "grid", "mean_distance");
    for l in &report.layers {
        println!("{:<8} {:>7} {:>14.4}", l.layer, format!("{}x{}", l.grid.0, l.grid.1), l.mean);
    }
    create_dir(&a.output_dir)?;
    let path = a.output_dir.join("attn_dist.csv");
    export_attn_csv(&report, &path)?;
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn cam_cmd(a: CamArgs) -> Result<u8> {
    let m = load_checkpoint(&a.inspect)?;
    let k = m.config.num_classes;
    if let Some(c) = a.class {
        if c >= k {
            bail!("--class {c} is out of range for a {k}-class model");
        }
    }
    let ds = inspect_data(&a.inspect, &m.config)?;
    if let Some(&bad) = a.index.iter().find(|&&i| i >= ds.len()) {
        bail!("--index {bad} is out of range for {} samples", ds.len());
    }
    create_dir(&a.inspect.output_dir)?;
    for &i in &a.index {
        let image = batch::<f64>(&ds, &[i], &m)?;
        let target = match a.class {
            Some(c) => c,
            None => {
                let (fw, logits) = run_model(&m.config, &m.params, &image, ForwardOptions::eval())?;
                argmax(fw.graph.value(logits).data())
            }
        };
        let grid = grad_cam(&m.config, &m.params, &image, target, i)?;
        let path = a.inspect.output_dir.join(format!("cam_{i}.pgm"));
        export_pgm(&grid, &path)?;
        println!(
            "sample {i} (label {}) class {target}: {}x{} map, wrote {}",
            ds.labels[i],
            grid.h,
            grid.w,
            path.display()
        );
    }
    Ok(EXIT_OK)
}

fn default_ablation_base() -> CliConfig {
    CliConfig {
        model: ModelConfig::vitae_micro_64(),
        train: TrainConfig {
            epochs: 2,
            batch_size: 32,
            base_lr: 0.05,
            ..TrainConfig::default()
        },
        data: DataSource::Synthetic(SyntheticData {
            canvas: None,
            train_per_class: 200,
            val_per_class: 50,
            seed: 0,
            val_seed: Some(1),
            scale_range: None,
            noise_std: None,
        }),
        output_dir: PathBuf::from("ablation"),
    }
}

fn ablate_cmd(a: AblateArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.matrix).with_context(|| format!("reading {}", a.matrix.display()))?;
    let value = serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", a.matrix.display()))?;
    let matrix: AblationMatrix = parse_value(value, "matrix")?;
    matrix.validate()?;
    let (mut base, dir) = match &a.config {
        Some(p) => (CliConfig::load(p)?, config_dir(p)),
        None => (default_ablation_base(), PathBuf::new()),
    };
    if let Some(e) = a.epochs {
        base.train.epochs = e;
    }
    if let Some(d) = a.output_dir {
        base.output_dir = d;
    }
    base.validate()?;
    // Fail on a bad variant before generating data or training anything.
    for v in &matrix.variants {
        v.apply(&base.model)?;
    }
    let (train_ds, val_ds) = base.data.load(&base.model, &dir)?;
    create_dir(&base.output_dir)?;
    let rows = run_ablation(
        &base.model,
        &matrix,
        &base.train,
        &train_ds,
        val_ds.as_ref(),
        Some(&base.output_dir),
        |r| {
            let top1 = r.val_top1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            println!(
                "{:<16} params {:>8}  final_train_loss {:.4}  val_top1 {top1}",
                r.variant.id, r.params, r.final_train_loss
            );
        },
    )?;
    println!("{} variants, wrote {}", rows.len(), base.output_dir.join("ablation.csv").display());
    Ok(EXIT_OK)
}
