use crate::error::{Error, Result};
use crate::model::{run_model, AttentionOverride, ForwardOptions, ModelConfig, ParamStore};
use crate::tensor::{Float, Tensor};

/// Mean attention distance of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDistance {
    /// Module path, e.g. `rc2` or `nc5`.
    pub layer: String,
    /// Token grid the distances are measured on.
    pub grid: (usize, usize),
    /// Average over heads and images, in patch units.
    pub mean: f64,
    /// Average over images, one entry per head.
    pub per_head: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnDistanceReport {
    pub layers: Vec<LayerDistance>,
}

/// Euclidean distances between all pairs of cells of an `h×w` grid,
/// row-major by `(query, key)`.
pub fn grid_distances((h, w): (usize, usize)) -> Vec<f64> {
    let n = h * w;
    let mut out = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            let dy = (q / w) as f64 - (k / w) as f64;
            let dx = (q % w) as f64 - (k % w) as f64;
            out.push((dx * dx + dy * dy).sqrt());
        }
    }
    out
}

/// `Σ_q Σ_k A[q,k]·‖pos(q) − pos(k)‖ / #queries` for one `[L, L]` attention
/// matrix, skipping the first `prefix` (non-spatial) rows and columns. The
/// remaining weights are not renormalized.
pub fn mean_attention_distance(attn: &[f64], grid: (usize, usize), prefix: usize, dist: &[f64]) -> f64 {
    let spatial = grid.0 * grid.1;
    let l = spatial + prefix;
    debug_assert_eq!(attn.len(), l * l);
    let mut total = 0.0;
    for q in 0..spatial {
        let row = &attn[(q + prefix) * l + prefix..(q + prefix + 1) * l];
        total += row.iter().zip(&dist[q * spatial..(q + 1) * spatial]).map(|(a, d)| a * d).sum::<f64>();
    }
    total / spatial as f64
}

/// Runs `images` through the model in eval mode and measures every attention
/// layer (reduction cells first, then normal cells). `force` replaces the
/// attention weights, which is how the measurement itself is tested.
pub fn attention_distance<T: Float>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    force: Option<AttentionOverride>,
) -> Result<AttnDistanceReport> {
    let n = images.shape().first().copied().unwrap_or(0);
    if images.ndim() != 4 || n == 0 {
        return Err(Error::Usage(format!(
            "attention distance needs a non-empty [N, C, H, W] batch, got {:?}",
            images.shape()
        )));
    }
    let opts = ForwardOptions {
        capture_attention: true,
        attention_override: force,
        ..ForwardOptions::eval()
    };
    let (fw, _) = run_model(cfg, params, images, opts)?;
    let mut layers = Vec::with_capacity(fw.attention.len());
    for cap in &fw.attention {
        let l = cap.grid.0 * cap.grid.1 + cap.prefix_tokens;
        let dist = grid_distances(cap.grid);
        let a = fw.graph.value(cap.attn).to_f64_vec();
        let mut per_head = vec![0.0; cap.heads];
        for (m, mat) in a.chunks(l * l).enumerate() {
            per_head[m % cap.heads] += mean_attention_distance(mat, cap.grid, cap.prefix_tokens, &dist);
        }
        per_head.iter_mut().for_each(|v| *v /= n as f64);
        layers.push(LayerDistance {
            layer: cap.layer.clone(),
            grid: cap.grid,
            mean: per_head.iter().sum::<f64>() / cap.heads as f64,
            per_head,
        });
    }
    Ok(AttnDistanceReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_attention_is_zero() {
        let grid = (3, 2);
        let l = 7;
        let a: Vec<f64> = (0..l * l).map(|i| ((i / l) == (i % l)) as u8 as f64).collect();
        assert_eq!(mean_attention_distance(&a, grid, 1, &grid_distances(grid)), 0.0);
    }

    #[test]
    fn one_hot_row_picks_distance() {
        // Query (0,0) attends only to key (1,1) of a 2x2 grid.
        let grid = (2, 2);
        let mut a = vec![0.0; 16];
        a[3] = 1.0;
        let d = mean_attention_distance(&a, grid, 0, &grid_distances(grid));
        assert!((d - 2f64.sqrt() / 4.0).abs() < 1e-15);
    }
}
