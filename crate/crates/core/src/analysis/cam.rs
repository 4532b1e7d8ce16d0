use crate::error::{Error, Result};
use crate::model::{run_model, ForwardOptions, ModelConfig, ParamStore};
use crate::tensor::{Float, Tensor};

/// Class activation map on the token grid, normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamGrid {
    pub h: usize,
    pub w: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub image_id: usize,
    pub target_class: usize,
}

impl CamGrid {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }
}

/// Unnormalized map and its inputs: activations `A`, gradients `G` (both
/// `[h·w, D]`) and the channel weights.
#[derive(Clone, Debug)]
pub struct CamParts {
    pub grid: (usize, usize),
    pub activations: Vec<f64>,
    pub gradients: Vec<f64>,
    pub weights: Vec<f64>,
    /// `Σ_c w_c · A[:, c]` before the ReLU.
    pub raw: Vec<f64>,
}

/// Target logit of a single image, optionally with `delta` added to the
/// tokens entering the last normal cell's attention.
pub fn target_logit<T: Float>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    target: usize,
    delta: Option<Tensor<T>>,
) -> Result<f64> {
    let opts = ForwardOptions {
        cam_delta: delta,
        ..ForwardOptions::eval()
    };
    let (fw, logits) = run_model(cfg, params, image, opts)?;
    Ok(fw.graph.value(logits).data()[target].as_f64())
}

fn check_inputs(cfg: &ModelConfig, image: &Tensor<impl Float>, target: usize) -> Result<()> {
    if target >= cfg.num_classes {
        return Err(Error::Usage(format!(
            "target class {target} out of range for {} classes",
            cfg.num_classes
        )));
    }
    if image.ndim() != 4 || image.shape()[0] != 1 {
        return Err(Error::Usage(format!(
            "Grad-CAM takes one image as [1, C, H, W], got {:?}",
            image.shape()
        )));
    }
    if cfg.ncs.is_empty() {
        return Err(Error::Usage("Grad-CAM needs at least one normal cell".into()));
    }
    Ok(())
}

/// Activations and gradients of the tokens entering the last normal cell's
/// attention with respect to `logit[target]`, restricted to the spatial tokens.
///
/// The attention *output* of the last cell cannot be used: its spatial rows
/// never reach the class token, so their gradient is identically zero.
pub fn cam_parts<T: Float>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    target: usize,
) -> Result<CamParts> {
    check_inputs(cfg, image, target)?;
    let (mut fw, logits) = run_model(cfg, params, image, ForwardOptions::eval())?;
    let k = cfg.num_classes;
    let pick = fw
        .graph
        .constant(Tensor::from_fn(&[1, k], |i| if i == target { T::one() } else { T::zero() }));
    let sel = fw.graph.mul(logits, pick)?;
    let root = fw.graph.sum(sel);
    fw.graph.backward(root)?;

    let a_var = fw.cam_tokens.expect("last normal cell records its attention input");
    let d = fw.graph.shape(a_var)[2];
    let grid = cfg.grid_for(image.shape()[2], image.shape()[3])?;
    let hw = grid.0 * grid.1;
    let a = fw.graph.value(a_var).to_f64_vec()[d..].to_vec();
    let g = match fw.graph.grad(a_var) {
        Some(g) => g.to_f64_vec()[d..].to_vec(),
        None => vec![0.0; hw * d],
    };
    let mut weights = vec![0.0; d];
    for row in g.chunks(d) {
        weights.iter_mut().zip(row).for_each(|(w, v)| *w += v);
    }
    weights.iter_mut().for_each(|w| *w /= hw as f64);
    let raw = a
        .chunks(d)
        .map(|row| row.iter().zip(&weights).map(|(x, w)| x * w).sum())
        .collect();
    Ok(CamParts {
        grid,
        activations: a,
        gradients: g,
        weights,
        raw,
    })
}

/// Grad-CAM on the attention of the last normal cell:
/// `relu(Σ_c mean_hw(∂logit/∂A_c) · A_c)`, divided by its maximum, where `A`
/// are the spatial tokens the attention consumes.
/// A map that is zero everywhere stays zero.
pub fn grad_cam<T: Float>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    target: usize,
    image_id: usize,
) -> Result<CamGrid> {
    let parts = cam_parts(cfg, params, image, target)?;
    let mut values: Vec<f64> = parts.raw.iter().map(|&v| v.max(0.0)).collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(CamGrid {
        h: parts.grid.0,
        w: parts.grid.1,
        values,
        image_id,
        target_class: target,
    })
}
