//! Reduction cells, normal cells and the full classification pipeline.

use super::config::{Fusion, ModelConfig, NcConfig, ParallelBranch, RcConfig};
use super::forward::Forward;
use super::layers::{ffn_forward, layer_norm, mhsa_forward, pcm_forward, prm_forward, PcmSpec};
use super::pos::sinusoid_pos_encoding;
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Float, Tensor, Var};

/// Reduction cell `index` (0-based) applied to an NCHW map.
///
/// Pre-fusion: `f_lg = MHSA(LN(tokens(PRM(f)))) + tokens(PCM(f))`, then
/// `FFN(LN(f_lg)) + f_lg` reshaped back to a map. Post-fusion adds the PCM
/// tokens after the FFN residual instead.
pub fn rc_forward<T: Float>(
    fw: &mut Forward<'_, T>,
    f: Var,
    rc: &RcConfig,
    index: usize,
) -> Result<Var> {
    let p = format!("rc{}", index + 1);
    let s = fw.graph.shape(f).to_vec();
    if s.len() != 4 || s[2] % rc.stride != 0 || s[3] % rc.stride != 0 {
        return Err(dim_err!(
            "{p}: input {:?} is not divisible by stride {}",
            s,
            rc.stride
        ));
    }
    let grid = (s[2] / rc.stride, s[3] / rc.stride);

    let ms = prm_forward(fw, f, rc, &format!("{p}.prm"))?;
    let tokens = fw.graph.img2seq(ms)?;
    let normed = layer_norm(fw, tokens, &format!("{p}.norm1"))?;
    let global = mhsa_forward(fw, normed, &format!("{p}.mhsa"), rc.heads, grid, 0)?;

    let local = if rc.pcm_enabled {
        let map = match rc.parallel_branch {
            ParallelBranch::Pcm => {
                let spec = PcmSpec {
                    strides: rc.pcm_strides,
                    first_groups: 1,
                    groups: rc.pcm_groups,
                    bn: rc.pcm_bn,
                    extra_bn: rc.pcm_extra_bn,
                    activation: rc.pcm_activation,
                };
                pcm_forward(fw, f, &spec, &format!("{p}.pcm"))?
            }
            ParallelBranch::Prm => prm_forward(fw, f, rc, &format!("{p}.pprm"))?,
        };
        let seq = fw.graph.img2seq(map)?;
        if fw.graph.shape(seq) != fw.graph.shape(global) {
            return Err(config_err!(
                "{p}: parallel branch produces {:?}, attention branch {:?}",
                fw.graph.shape(seq),
                fw.graph.shape(global)
            ));
        }
        Some(seq)
    } else {
        None
    };

    let out = fuse_and_ffn(fw, global, local, rc.fusion, &p)?;
    let out = fw.graph.seq2img(out, grid.0, grid.1)?;
    fw.rc_outputs.push(out);
    Ok(out)
}

/// `FFN(LN(u)) + u` with the local term joined before (pre) or after (post).
fn fuse_and_ffn<T: Float>(
    fw: &mut Forward<'_, T>,
    base: Var,
    local: Option<Var>,
    fusion: Fusion,
    p: &str,
) -> Result<Var> {
    let u = match (local, fusion) {
        (Some(l), Fusion::Pre) => fw.graph.add(base, l)?,
        _ => base,
    };
    let normed = layer_norm(fw, u, &format!("{p}.norm2"))?;
    let h = ffn_forward(fw, normed, &format!("{p}.ffn"))?;
    let out = fw.graph.add(h, u)?;
    match (local, fusion) {
        (Some(l), Fusion::Post) => fw.graph.add(out, l),
        _ => Ok(out),
    }
}

/// Normal cell `index` over `[N, 1 + h·w, D]` tokens (class token first).
///
/// The class token takes part in attention only; the PCM sees the spatial
/// tokens reshaped to the `h×w` grid and its output is added to the spatial
/// rows alone.
pub fn nc_forward<T: Float>(
    fw: &mut Forward<'_, T>,
    t: Var,
    nc: &NcConfig,
    index: usize,
    grid: (usize, usize),
    is_last: bool,
) -> Result<Var> {
    let p = format!("nc{}", index + 1);
    let s = fw.graph.shape(t).to_vec();
    let spatial = grid.0 * grid.1;
    if s.len() != 3 || s[1] != spatial + 1 {
        return Err(dim_err!(
            "{p}: {:?} tokens do not match a {}x{} grid plus class token",
            s,
            grid.0,
            grid.1
        ));
    }
    let (n, d) = (s[0], s[2]);

    let mut normed = layer_norm(fw, t, &format!("{p}.norm1"))?;
    if is_last {
        if let Some(delta) = fw.opts.cam_delta.clone() {
            let delta = fw.graph.constant(delta);
            normed = fw.graph.add(normed, delta)?;
        }
        fw.graph.retain_grad(normed);
        fw.cam_tokens = Some(normed);
    }
    let global = mhsa_forward(fw, normed, &format!("{p}.mhsa"), nc.heads, grid, 1)?;

    let local = if nc.pcm_enabled {
        let sp = fw.graph.slice_tokens(t, 1, spatial)?;
        let map = fw.graph.seq2img(sp, grid.0, grid.1)?;
        let spec = PcmSpec {
            strides: [1, 1, 1],
            first_groups: nc.pcm_groups,
            groups: nc.pcm_groups,
            bn: nc.pcm_bn,
            extra_bn: nc.pcm_extra_bn,
            activation: nc.pcm_activation,
        };
        let map = pcm_forward(fw, map, &spec, &format!("{p}.pcm"))?;
        let seq = fw.graph.img2seq(map)?;
        let zeros = fw.graph.constant(Tensor::zeros(&[n, 1, d]));
        Some(fw.graph.concat(&[zeros, seq], 1)?)
    } else {
        None
    };

    let base = fw.graph.add(t, global)?;
    fuse_and_ffn(fw, base, local, nc.fusion, &p)
}

/// Full classifier: reduction cells, flatten, class token, optional sinusoid
/// encoding, normal cells, layer norm on the class token and a linear head.
pub fn model_forward<T: Float>(fw: &mut Forward<'_, T>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let s = fw.graph.shape(x).to_vec();
    if s.len() != 4 || s[1] != cfg.input_size.2 {
        return Err(dim_err!(
            "model expects [N, {}, H, W] input, got {:?}",
            cfg.input_size.2,
            s
        ));
    }
    let n = s[0];
    let grid = cfg.grid_for(s[2], s[3])?;

    let mut f = x;
    for (i, rc) in cfg.rcs.iter().enumerate() {
        f = rc_forward(fw, f, rc, i)?;
    }
    let tokens = fw.graph.img2seq(f)?;
    let cls = fw.param("cls_token")?;
    let cls = fw.graph.tile0(cls, n)?;
    let mut t = fw.graph.concat(&[cls, tokens], 1)?;
    if cfg.use_pos_embedding {
        let d = cfg.embed_dim();
        let pe = fw
            .graph
            .constant(sinusoid_pos_encoding(grid.0 * grid.1 + 1, d)?);
        t = fw.graph.add_broadcast(t, pe)?;
    }
    fw.nc_input = Some(t);
    let last = cfg.ncs.len().saturating_sub(1);
    for (i, nc) in cfg.ncs.iter().enumerate() {
        t = nc_forward(fw, t, nc, i, grid, i == last)?;
    }
    let d = fw.graph.shape(t)[2];
    let cls_out = fw.graph.slice_tokens(t, 0, 1)?;
    let cls_out = fw.graph.reshape(cls_out, &[n, d])?;
    let cls_out = layer_norm(fw, cls_out, "norm")?;
    super::layers::linear(fw, cls_out, "head")
}
