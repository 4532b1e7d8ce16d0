use indexmap::IndexMap;

use crate::error::Result;
use crate::model::{ModelConfig, ParallelBranch, ParamStore};
use crate::tensor::Float;

/// Parameters and multiply-accumulates of one module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// `(H, W)` the MACs refer to, if they were counted.
    pub input_size: Option<(usize, usize)>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }
}

/// Module path of a parameter name: `rc1.prm.branch0.weight` → `rc1.prm`,
/// `head.weight` → `head`.
pub fn module_of(name: &str) -> &str {
    let mut parts = name.match_indices('.');
    let first = parts.next().map(|(i, _)| i);
    let cell = name.starts_with("rc") || name.starts_with("nc");
    match (first, cell) {
        (Some(i), false) => &name[..i],
        (Some(i), true) => parts.next().map_or(&name[..i], |(j, _)| &name[..j]),
        (None, _) => name,
    }
}

/// Learnable element counts grouped by module path, in store order.
/// Batch-norm running statistics are buffers and are not counted.
pub fn count_params<T: Float>(params: &ParamStore<T>) -> CostReport {
    let mut groups: IndexMap<&str, u64> = IndexMap::new();
    for (name, t) in params.learnable() {
        *groups.entry(module_of(name)).or_default() += t.numel() as u64;
    }
    CostReport {
        rows: groups
            .into_iter()
            .map(|(name, params)| CostRow {
                name: name.to_string(),
                params,
                macs: 0,
            })
            .collect(),
        input_size: None,
    }
}

struct Acc {
    rows: IndexMap<String, (u64, u64)>,
}

impl Acc {
    fn add(&mut self, name: String, params: usize, macs: usize) {
        let e = self.rows.entry(name).or_default();
        e.0 += params as u64;
        e.1 += macs as u64;
    }

    /// `k×k` convolution producing an `hw`-pixel map.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, groups: usize, hw: usize) {
        let per = cin / groups * k * k;
        self.add(name, cout * per + cout, hw * cout * per);
    }

    /// Linear layer applied to `tokens` tokens.
    fn linear(&mut self, name: String, din: usize, dout: usize, tokens: usize) {
        self.add(name, din * dout + dout, tokens * din * dout);
    }

    fn norm(&mut self, name: String, d: usize) {
        self.add(name, 2 * d, 0);
    }

    /// Projections plus `L²·d` for the scores and `L²·d` for the weighted sum.
    fn mhsa(&mut self, name: String, d: usize, dout: usize, l: usize) {
        for _ in 0..3 {
            self.linear(name.clone(), d, d, l);
        }
        self.add(name.clone(), 0, 2 * l * l * d);
        self.linear(name, d, dout, l);
    }

    fn ffn(&mut self, name: String, d: usize, hidden: usize, l: usize) {
        self.linear(name.clone(), d, hidden, l);
        self.linear(name, hidden, d, l);
    }
}

/// Per-sample cost of `cfg` at an `h×w` input.
///
/// Convolutions count `Hout·Wout·Cout·Cin/groups·kh·kw`, linear layers
/// `in·out` per token, attention `L²·d` for the scores and again for the
/// weighted sum. Normalizations, activations, softmax and bias additions are
/// free. Parameter columns follow the same module grouping as
/// [`count_params`].
pub fn count_macs(cfg: &ModelConfig, input: (usize, usize)) -> Result<CostReport> {
    cfg.validate()?;
    let (gh, gw) = cfg.grid_for(input.0, input.1)?;
    let mut acc = Acc { rows: IndexMap::new() };
    let (mut h, mut w) = input;
    for (i, rc) in cfg.rcs.iter().enumerate() {
        let p = format!("rc{}", i + 1);
        let (ho, wo) = (h / rc.stride, w / rc.stride);
        let l = ho * wo;
        let d = rc.cell_dim();
        for _ in &rc.dilation_set {
            acc.conv(format!("{p}.prm"), rc.in_channels, rc.branch_channels, rc.kernel, 1, l);
        }
        acc.norm(format!("{p}.norm1"), d);
        acc.mhsa(format!("{p}.mhsa"), d, rc.out_channels, l);
        if rc.pcm_enabled {
            match rc.parallel_branch {
                ParallelBranch::Pcm => {
                    let name = format!("{p}.pcm");
                    let (mut ph, mut pw) = (h, w);
                    let mut cin = rc.in_channels;
                    for (j, &s) in rc.pcm_strides.iter().enumerate() {
                        (ph, pw) = (ph / s, pw / s);
                        let groups = if j == 0 { 1 } else { rc.pcm_groups };
                        acc.conv(name.clone(), cin, rc.out_channels, 3, groups, ph * pw);
                        cin = rc.out_channels;
                        if (j == 0 && rc.pcm_bn) || (j == 1 && rc.pcm_extra_bn) {
                            acc.norm(name.clone(), rc.out_channels);
                        }
                    }
                }
                ParallelBranch::Prm => {
                    let per = rc.out_channels / rc.dilation_set.len();
                    for _ in &rc.dilation_set {
                        acc.conv(format!("{p}.pprm"), rc.in_channels, per, rc.kernel, 1, l);
                    }
                }
            }
        }
        acc.norm(format!("{p}.norm2"), rc.out_channels);
        acc.ffn(format!("{p}.ffn"), rc.out_channels, rc.ffn_hidden(), l);
        (h, w) = (ho, wo);
    }

    let d = cfg.embed_dim();
    let spatial = gh * gw;
    let l = spatial + 1;
    acc.add("cls_token".into(), d, 0);
    for (i, nc) in cfg.ncs.iter().enumerate() {
        let p = format!("nc{}", i + 1);
        acc.norm(format!("{p}.norm1"), d);
        acc.mhsa(format!("{p}.mhsa"), d, d, l);
        if nc.pcm_enabled {
            let name = format!("{p}.pcm");
            for j in 0..3 {
                acc.conv(name.clone(), d, d, 3, nc.pcm_groups, spatial);
                if (j == 0 && nc.pcm_bn) || (j == 1 && nc.pcm_extra_bn) {
                    acc.norm(name.clone(), d);
                }
            }
        }
        acc.norm(format!("{p}.norm2"), d);
        acc.ffn(format!("{p}.ffn"), d, nc.ffn_hidden(), l);
    }
    acc.norm("norm".into(), d);
    acc.linear("head".into(), d, cfg.num_classes, 1);

    Ok(CostReport {
        rows: acc
            .rows
            .into_iter()
            .map(|(name, (params, macs))| CostRow { name, params, macs })
            .collect(),
        input_size: Some(input),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn module_paths() {
        assert_eq!(module_of("rc1.prm.branch0.weight"), "rc1.prm");
        assert_eq!(module_of("nc12.mhsa.wq"), "nc12.mhsa");
        assert_eq!(module_of("head.bias"), "head");
        assert_eq!(module_of("cls_token"), "cls_token");
    }

    #[test]
    fn structural_params_match_built_store() {
        for cfg in [ModelConfig::vitae_micro(), ModelConfig::vitae_micro_64(), ModelConfig::vitae_t()] {
            let (p, _) = build_model::<f32>(&cfg).unwrap();
            let counted = count_params(&p);
            let (h, w, _) = cfg.input_size;
            let structural = count_macs(&cfg, (h, w)).unwrap();
            let strip = |r: &CostReport| r.rows.iter().map(|r| (r.name.clone(), r.params)).collect::<Vec<_>>();
            assert_eq!(strip(&counted), strip(&structural));
        }
    }

    #[test]
    fn spatial_macs_scale_with_area() {
        let mut cfg = ModelConfig::vitae_micro();
        cfg.ncs.clear();
        cfg.rcs[0].pcm_enabled = false;
        let a = count_macs(&cfg, (16, 16)).unwrap();
        let b = count_macs(&cfg, (32, 32)).unwrap();
        let prm = |r: &CostReport| r.rows.iter().find(|r| r.name == "rc1.prm").unwrap().macs;
        assert_eq!(prm(&b), 4 * prm(&a));
    }
}
