//! Building blocks shared by reduction and normal cells.

use super::config::RcConfig;
use super::forward::{AttentionCapture, AttentionOverride, BnUpdate, Forward, Mode};
use super::{BN_EPS, LN_EPS};
use crate::error::{dim_err, Result};
use crate::tensor::{c, ActivationKind, BatchNormMode, ConvSpec, Float, Tensor, Var};

pub(crate) fn linear<T: Float>(fw: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = fw.param(&format!("{prefix}.weight"))?;
    let b = fw.param(&format!("{prefix}.bias"))?;
    fw.graph.linear(x, w, Some(b))
}

pub(crate) fn layer_norm<T: Float>(fw: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let g = fw.param(&format!("{prefix}.gamma"))?;
    let b = fw.param(&format!("{prefix}.beta"))?;
    fw.graph.layernorm(x, g, b, c(LN_EPS))
}

pub(crate) fn conv<T: Float>(
    fw: &mut Forward<'_, T>,
    x: Var,
    prefix: &str,
    spec: ConvSpec,
) -> Result<Var> {
    let w = fw.param(&format!("{prefix}.weight"))?;
    let b = fw.param(&format!("{prefix}.bias"))?;
    fw.graph.conv2d(x, w, Some(b), spec)
}

pub(crate) fn batch_norm<T: Float>(fw: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let g = fw.param(&format!("{prefix}.gamma"))?;
    let b = fw.param(&format!("{prefix}.beta"))?;
    match fw.opts.mode {
        Mode::Train => {
            let (y, stats) = fw
                .graph
                .batchnorm2d(x, g, b, BatchNormMode::Train, c(BN_EPS))?;
            if let Some(stats) = stats {
                fw.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    stats,
                });
            }
            Ok(y)
        }
        Mode::Eval => {
            let mean = fw.buffer(&format!("{prefix}.running_mean"))?;
            let var = fw.buffer(&format!("{prefix}.running_var"))?;
            let mode = BatchNormMode::Eval {
                mean: mean.data(),
                var: var.data(),
            };
            Ok(fw.graph.batchnorm2d(x, g, b, mode, c(BN_EPS))?.0)
        }
    }
}

/// Multi-head scaled dot-product self-attention over `[N, L, D_in]` tokens.
///
/// Each head projects to `D_in / heads` channels and scales scores by the
/// square root of that width; head outputs are concatenated and mapped to
/// `D_out` by the output projection (`D_out` is the width of `{prefix}.wo`).
/// `grid` and `prefix_tokens` describe the token layout for attention capture.
pub fn mhsa_forward<T: Float>(
    fw: &mut Forward<'_, T>,
    x: Var,
    prefix: &str,
    heads: usize,
    grid: (usize, usize),
    prefix_tokens: usize,
) -> Result<Var> {
    let s = fw.graph.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(dim_err!("mhsa over {:?} with {heads} heads", s));
    }
    let (n, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let proj = |fw: &mut Forward<'_, T>, p: &str| -> Result<Var> {
        let w = fw.param(&format!("{prefix}.w{p}"))?;
        let b = fw.param(&format!("{prefix}.b{p}"))?;
        let y = fw.graph.linear(x, w, Some(b))?;
        fw.graph.split_heads(y, heads)
    };
    let q = proj(fw, "q")?;
    let k = proj(fw, "k")?;
    let v = proj(fw, "v")?;
    let scores = fw.graph.bmm(q, k, true)?;
    let scores = fw.graph.scale(scores, T::one() / c::<T>(dh as f64).sqrt());
    let mut attn = fw.graph.softmax_lastdim(scores)?;
    if let Some(kind) = fw.opts.attention_override {
        let fixed = match kind {
            AttentionOverride::Uniform => Tensor::full(&[n * heads, l, l], T::one() / c(l as f64)),
            AttentionOverride::Identity => Tensor::from_fn(&[n * heads, l, l], |i| {
                if (i / l) % l == i % l {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        };
        attn = fw.graph.constant(fixed);
    }
    if fw.opts.capture_attention {
        fw.attention.push(AttentionCapture {
            layer: prefix.trim_end_matches(".mhsa").to_string(),
            attn,
            heads,
            grid,
            prefix_tokens,
        });
    }
    let ctx = fw.graph.bmm(attn, v, false)?;
    let ctx = fw.graph.merge_heads(ctx, heads)?;
    let wo = fw.param(&format!("{prefix}.wo"))?;
    let bo = fw.param(&format!("{prefix}.bo"))?;
    fw.graph.linear(ctx, wo, Some(bo))
}

/// Token-wise two-layer perceptron with a GELU in between.
pub fn ffn_forward<T: Float>(fw: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(fw, x, &format!("{prefix}.fc1"))?;
    let h = fw.graph.activation(h, ActivationKind::Gelu);
    linear(fw, h, &format!("{prefix}.fc2"))
}

/// Pyramid reduction: one strided convolution per dilation rate, aligned by
/// padding `dilation·(k−1)/2`, concatenated along channels in dilation order
/// and passed through the cell's PRM activation.
pub fn prm_forward<T: Float>(
    fw: &mut Forward<'_, T>,
    f: Var,
    rc: &RcConfig,
    prefix: &str,
) -> Result<Var> {
    let s = fw.graph.shape(f).to_vec();
    if s.len() != 4 || s[2] % rc.stride != 0 || s[3] % rc.stride != 0 {
        return Err(dim_err!(
            "pyramid reduction with stride {} needs NCHW input divisible by it, got {:?}",
            rc.stride,
            s
        ));
    }
    let mut branches = Vec::with_capacity(rc.dilation_set.len());
    for (j, &dil) in rc.dilation_set.iter().enumerate() {
        let spec = ConvSpec::aligned(rc.kernel, rc.stride, dil);
        branches.push(conv(fw, f, &format!("{prefix}.branch{j}"), spec)?);
    }
    let cat = if branches.len() == 1 {
        branches[0]
    } else {
        fw.graph.concat_channels(&branches)?
    };
    Ok(fw.graph.activation(cat, rc.prm_activation))
}

/// Layout of a parallel convolutional module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcmSpec {
    pub strides: [usize; 3],
    pub first_groups: usize,
    pub groups: usize,
    pub bn: bool,
    pub extra_bn: bool,
    pub activation: ActivationKind,
}

/// Three stacked 3×3 convolutions:
/// `conv → [BN] → act → conv → [extra BN] → act → conv`.
pub fn pcm_forward<T: Float>(
    fw: &mut Forward<'_, T>,
    f: Var,
    spec: &PcmSpec,
    prefix: &str,
) -> Result<Var> {
    let conv_spec = |i: usize, groups: usize| {
        ConvSpec::square(3)
            .with_stride(spec.strides[i])
            .with_padding(1)
            .with_groups(groups)
    };
    let mut x = conv(fw, f, &format!("{prefix}.conv0"), conv_spec(0, spec.first_groups))?;
    if spec.bn {
        x = batch_norm(fw, x, &format!("{prefix}.bn0"))?;
    }
    x = fw.graph.activation(x, spec.activation);
    x = conv(fw, x, &format!("{prefix}.conv1"), conv_spec(1, spec.groups))?;
    if spec.extra_bn {
        x = batch_norm(fw, x, &format!("{prefix}.bn1"))?;
    }
    x = fw.graph.activation(x, spec.activation);
    conv(fw, x, &format!("{prefix}.conv2"), conv_spec(2, spec.groups))
}
