use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, ParallelBranch, RcConfig};
use super::params::{ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

const INIT_STD: f64 = 0.02;

/// Conv weight std, `1 / sqrt(3 · fan_in)`; a fixed 0.02 shrinks activations
/// and gradients through stacked convolutions.
fn conv_init_std(fan_in: usize) -> f64 {
    1.0 / ((3 * fan_in) as f64).sqrt()
}

/// Validated, executable description of a model's layer sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPlan {
    pub config: ModelConfig,
}

/// Spatial and token sizes of one reduction cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RcShape {
    pub input: (usize, usize),
    pub output: (usize, usize),
    pub channels: usize,
}

impl ModelPlan {
    /// Per-cell sizes for an `h×w` input.
    pub fn rc_shapes(&self, h: usize, w: usize) -> Result<Vec<RcShape>> {
        self.config.grid_for(h, w)?;
        let mut shapes = Vec::with_capacity(self.config.rcs.len());
        let (mut ch, mut cw) = (h, w);
        for rc in &self.config.rcs {
            let out = (ch / rc.stride, cw / rc.stride);
            shapes.push(RcShape {
                input: (ch, cw),
                output: out,
                channels: rc.out_channels,
            });
            (ch, cw) = out;
        }
        Ok(shapes)
    }

    /// Tokens entering the normal cells (spatial tokens plus the class token).
    pub fn num_tokens(&self, h: usize, w: usize) -> Result<usize> {
        let (gh, gw) = self.config.grid_for(h, w)?;
        Ok(gh * gw + 1)
    }
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    /// Normal(0, std) truncated to ±2 std by rejection.
    fn trunc_normal<T: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z = self.normal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
    }

    fn normal<T: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.normal.sample(&mut self.rng) * std))
    }
}

struct Builder<T> {
    store: ParamStore<T>,
    init: Init,
}

impl<T: Float> Builder<T> {
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = self.init.trunc_normal(&[fan_in, fan_out], INIT_STD);
        self.store.insert(format!("{prefix}.weight"), w, ParamKind::Weight)?;
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), ParamKind::NoDecay)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, groups: usize) -> Result<()> {
        let w = self.init.trunc_normal(&[cout, cin / groups, k, k], conv_init_std(cin / groups * k * k));
        self.store.insert(format!("{prefix}.weight"), w, ParamKind::Weight)?;
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::NoDecay)
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.store
            .insert(format!("{prefix}.gamma"), Tensor::ones(&[d]), ParamKind::NoDecay)?;
        self.store
            .insert(format!("{prefix}.beta"), Tensor::zeros(&[d]), ParamKind::NoDecay)
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.layer_norm(prefix, c)?;
        self.store.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros(&[c]),
            ParamKind::Buffer,
        )?;
        self.store
            .insert(format!("{prefix}.running_var"), Tensor::ones(&[c]), ParamKind::Buffer)
    }

    fn mhsa(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        for proj in ["q", "k", "v"] {
            let w = self.init.trunc_normal(&[d_in, d_in], INIT_STD);
            self.store.insert(format!("{prefix}.w{proj}"), w, ParamKind::Weight)?;
            self.store
                .insert(format!("{prefix}.b{proj}"), Tensor::zeros(&[d_in]), ParamKind::NoDecay)?;
        }
        let w = self.init.trunc_normal(&[d_in, d_out], INIT_STD);
        self.store.insert(format!("{prefix}.wo"), w, ParamKind::Weight)?;
        self.store
            .insert(format!("{prefix}.bo"), Tensor::zeros(&[d_out]), ParamKind::NoDecay)
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), d, hidden)?;
        self.linear(&format!("{prefix}.fc2"), hidden, d)
    }

    #[allow(clippy::too_many_arguments)]
    fn pcm(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        first_groups: usize,
        groups: usize,
        bn: bool,
        extra_bn: bool,
    ) -> Result<()> {
        self.conv(&format!("{prefix}.conv0"), cin, cout, 3, first_groups)?;
        if bn {
            self.batch_norm(&format!("{prefix}.bn0"), cout)?;
        }
        self.conv(&format!("{prefix}.conv1"), cout, cout, 3, groups)?;
        if extra_bn {
            self.batch_norm(&format!("{prefix}.bn1"), cout)?;
        }
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3, groups)
    }

    fn prm(&mut self, prefix: &str, rc: &RcConfig, branch_channels: usize) -> Result<()> {
        for j in 0..rc.dilation_set.len() {
            self.conv(
                &format!("{prefix}.branch{j}"),
                rc.in_channels,
                branch_channels,
                rc.kernel,
                1,
            )?;
        }
        Ok(())
    }

    fn rc(&mut self, idx: usize, rc: &RcConfig) -> Result<()> {
        let p = format!("rc{}", idx + 1);
        let d = rc.cell_dim();
        self.prm(&format!("{p}.prm"), rc, rc.branch_channels)?;
        self.layer_norm(&format!("{p}.norm1"), d)?;
        self.mhsa(&format!("{p}.mhsa"), d, rc.out_channels)?;
        if rc.pcm_enabled {
            match rc.parallel_branch {
                ParallelBranch::Pcm => self.pcm(
                    &format!("{p}.pcm"),
                    rc.in_channels,
                    rc.out_channels,
                    1,
                    rc.pcm_groups,
                    rc.pcm_bn,
                    rc.pcm_extra_bn,
                )?,
                ParallelBranch::Prm => self.prm(
                    &format!("{p}.pprm"),
                    rc,
                    rc.out_channels / rc.dilation_set.len(),
                )?,
            }
        }
        self.layer_norm(&format!("{p}.norm2"), rc.out_channels)?;
        self.ffn(&format!("{p}.ffn"), rc.out_channels, rc.ffn_hidden())
    }
}

/// Allocates and initializes every parameter of `cfg`.
///
/// Linear weights are truncated normal with std 0.02, conv weights truncated
/// normal with std `1 / sqrt(3 · fan_in)`, biases zero, norm scales one, and
/// the class token normal with std 0.02. The same seed always produces the
/// same store.
pub fn build_model<T: Float>(cfg: &ModelConfig) -> Result<(ParamStore<T>, ModelPlan)> {
    cfg.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        init: Init::new(cfg.seed),
    };
    for (i, rc) in cfg.rcs.iter().enumerate() {
        b.rc(i, rc)?;
    }
    let d = cfg.embed_dim();
    let cls = b.init.normal(&[1, 1, d], INIT_STD);
    b.store.insert("cls_token", cls, ParamKind::NoDecay)?;
    for (i, nc) in cfg.ncs.iter().enumerate() {
        let p = format!("nc{}", i + 1);
        b.layer_norm(&format!("{p}.norm1"), d)?;
        b.mhsa(&format!("{p}.mhsa"), d, d)?;
        if nc.pcm_enabled {
            b.pcm(
                &format!("{p}.pcm"),
                d,
                d,
                nc.pcm_groups,
                nc.pcm_groups,
                nc.pcm_bn,
                nc.pcm_extra_bn,
            )?;
        }
        b.layer_norm(&format!("{p}.norm2"), d)?;
        b.ffn(&format!("{p}.ffn"), d, nc.ffn_hidden())?;
    }
    b.layer_norm("norm", d)?;
    b.linear("head", d, cfg.num_classes)?;
    Ok((
        b.store,
        ModelPlan {
            config: cfg.clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_store() {
        let cfg = ModelConfig::vitae_micro();
        let (a, _) = build_model::<f32>(&cfg).unwrap();
        let (b, _) = build_model::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 1;
        let (c, _) = build_model::<f32>(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn names_follow_module_paths() {
        let (p, _) = build_model::<f32>(&ModelConfig::vitae_micro()).unwrap();
        for name in [
            "rc1.prm.branch0.weight",
            "rc1.prm.branch1.bias",
            "rc1.mhsa.wq",
            "rc1.pcm.conv2.weight",
            "rc1.pcm.bn0.running_var",
            "cls_token",
            "nc1.mhsa.wo",
            "nc1.pcm.conv0.weight",
            "head.weight",
        ] {
            assert!(p.contains(name), "{name}");
        }
        assert_eq!(p.get("rc1.pcm.bn0.running_mean").unwrap().kind, ParamKind::Buffer);
        assert_eq!(p.get("cls_token").unwrap().kind, ParamKind::NoDecay);
    }

    #[test]
    fn disabled_pcm_allocates_nothing() {
        let mut cfg = ModelConfig::vitae_micro();
        cfg.rcs[0].pcm_enabled = false;
        cfg.ncs[0].pcm_enabled = false;
        let (p, _) = build_model::<f32>(&cfg).unwrap();
        assert!(p.names().all(|n| !n.contains("pcm")));
    }

    #[test]
    fn init_is_truncated() {
        let (p, _) = build_model::<f64>(&ModelConfig::vitae_micro()).unwrap();
        let w = p.tensor("nc1.mhsa.wq").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let c = p.tensor("rc1.prm.branch0.weight").unwrap();
        let bound = 2.0 * conv_init_std(49);
        assert!(c.data().iter().all(|v| v.abs() <= bound));
        assert!(c.data().iter().any(|v| v.abs() > INIT_STD));
    }

    #[test]
    fn shape_chain_for_vitae_t() {
        let (_, plan) = build_model::<f32>(&ModelConfig::vitae_micro()).unwrap();
        assert_eq!(plan.num_tokens(16, 16).unwrap(), 17);
        let plan = ModelPlan {
            config: ModelConfig::vitae_t(),
        };
        let outs: Vec<_> = plan.rc_shapes(224, 224).unwrap().iter().map(|s| s.output).collect();
        assert_eq!(outs, vec![(56, 56), (28, 28), (14, 14)]);
        assert_eq!(plan.num_tokens(224, 224).unwrap(), 197);
    }
}
