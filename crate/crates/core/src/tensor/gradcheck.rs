//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::model::{build_model, run_model, ForwardOptions, ModelConfig, ParamGrads, ParamStore};
use crate::par;

/// Finite-difference comparison for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    /// `max_i |a_i - n_i| / max(max|a|, max|n|, SCALE_FLOOR)` over the tensor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Set when the objective or an analytic gradient was non-finite.
    pub failure: Option<String>,
}

impl GradCheckEntry {
    pub fn passes(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err < tol
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| if e.failure.is_some() { f64::INFINITY } else { e.max_rel_err })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.passes(tol))
    }

    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| !e.passes(tol))
    }

    /// Worst error per top-level module (`rc1`, `nc1`, `head`, ...), in first-seen order.
    pub fn by_module(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            let module = e.name.split('.').next().unwrap_or(&e.name).to_string();
            let err = if e.failure.is_some() { f64::INFINITY } else { e.max_rel_err };
            match out.iter_mut().find(|(m, _)| *m == module) {
                Some((_, w)) => *w = w.max(err),
                None => out.push((module, err)),
            }
        }
        out
    }
}

pub const MIN_EPS: f64 = 1e-7;
/// Smallest denominator of the relative error. Tensors whose gradient is
/// structurally zero (a key bias under softmax, a bias feeding batch norm)
/// would otherwise compare rounding noise against itself.
pub const SCALE_FLOOR: f64 = 1e-4;
pub const MAX_EPS: f64 = 1e-3;

/// Compares `analytic` against central differences `(f(θ+ε) − f(θ−ε)) / 2ε`
/// for every learnable scalar of `params`.
///
/// Parameter tensors are checked in parallel, each on its own copy of the store.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamStore<f64>,
    analytic: &ParamGrads<f64>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64> + Sync,
{
    if !(MIN_EPS..=MAX_EPS).contains(&eps) {
        return Err(Error::Usage(format!(
            "finite-difference step {eps} outside [{MIN_EPS}, {MAX_EPS}]"
        )));
    }
    let names: Vec<String> = params.learnable().map(|(n, _)| n.to_string()).collect();
    let entries = par::map_range(names.len(), true, |i| {
        check_one(&f, params, analytic, &names[i], eps)
    });
    Ok(GradCheckReport {
        entries: entries.into_iter().collect::<Result<_>>()?,
    })
}

fn check_one<F>(
    f: &F,
    params: &ParamStore<f64>,
    analytic: &ParamGrads<f64>,
    name: &str,
    eps: f64,
) -> Result<GradCheckEntry>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let numel = params.tensor(name)?.numel();
    let mut entry = GradCheckEntry {
        name: name.to_string(),
        numel,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        failure: None,
    };
    let Some(grad) = analytic.get(name) else {
        entry.failure = Some("no analytic gradient".into());
        return Ok(entry);
    };
    if grad.numel() != numel {
        entry.failure = Some(format!("gradient has {} entries, expected {numel}", grad.numel()));
        return Ok(entry);
    }
    let mut work = params.clone();
    let mut numeric = Vec::with_capacity(numel);
    for j in 0..numel {
        let orig = work.tensor(name)?.data()[j];
        work.tensor_mut(name)?.data_mut()[j] = orig + eps;
        let plus = f(&work)?;
        work.tensor_mut(name)?.data_mut()[j] = orig - eps;
        let minus = f(&work)?;
        work.tensor_mut(name)?.data_mut()[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            entry.failure = Some(format!("objective not finite at element {j}"));
            return Ok(entry);
        }
        numeric.push((plus - minus) / (2.0 * eps));
    }
    let a = grad.data();
    if a.iter().any(|v| !v.is_finite()) {
        entry.failure = Some("analytic gradient not finite".into());
        return Ok(entry);
    }
    let scale = a
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(SCALE_FLOOR);
    entry.max_abs_err = a
        .iter()
        .zip(&numeric)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    entry.max_rel_err = entry.max_abs_err / scale;
    Ok(entry)
}

/// Batch size of the probe input used by [`gradcheck_model`].
pub const MODEL_CHECK_BATCH: usize = 2;

/// Checks every learnable parameter of `cfg`, in float64, on the
/// cross-entropy of a fixed random batch with batch norm in training mode.
///
/// `corrupt_backward` perturbs one gradient on purpose; the report must then fail.
pub fn gradcheck_model(cfg: &ModelConfig, eps: f64, corrupt_backward: bool) -> Result<GradCheckReport> {
    let (params, _) = build_model::<f64>(cfg)?;
    let (h, w, c) = cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let images = Tensor::from_fn(&[MODEL_CHECK_BATCH, c, h, w], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..MODEL_CHECK_BATCH).map(|i| i % cfg.num_classes).collect();

    let objective = |p: &ParamStore<f64>| -> Result<f64> {
        let (mut fw, logits) = run_model(cfg, p, &images, ForwardOptions::train())?;
        let l = fw.graph.cross_entropy(logits, &labels)?;
        Ok(fw.graph.value(l).data()[0])
    };
    let opts = ForwardOptions {
        corrupt_backward,
        ..ForwardOptions::train()
    };
    let (mut fw, logits) = run_model(cfg, &params, &images, opts)?;
    let l = fw.graph.cross_entropy(logits, &labels)?;
    fw.graph.backward(l)?;
    let analytic = fw.gradients();
    drop(fw);
    finite_diff_check(objective, &params, &analytic, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;
    use crate::tensor::{Graph, Tensor};

    fn quadratic_store() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap(), ParamKind::Weight)
            .unwrap();
        p
    }

    fn sum_squares(p: &ParamStore<f64>) -> Result<f64> {
        Ok(p.tensor("theta")?.data().iter().map(|v| v * v).sum())
    }

    #[test]
    fn quadratic_is_exact() {
        let p = quadratic_store();
        let mut g = ParamGrads::new();
        g.insert(
            "theta".into(),
            Tensor::from_fn(&[4], |i| 2.0 * p.tensor("theta").unwrap().data()[i]),
        );
        let report = finite_diff_check(sum_squares, &p, &g, 1e-4).unwrap();
        assert!(report.worst() < 1e-9, "{report:?}");
    }

    #[test]
    fn graph_gradient_passes() {
        let p = quadratic_store();
        let mut graph = Graph::new();
        let x = graph.param(p.tensor("theta").unwrap().clone());
        let sq = graph.mul(x, x).unwrap();
        let s = graph.sum(sq);
        graph.backward(s).unwrap();
        let mut g = ParamGrads::new();
        g.insert("theta".into(), graph.grad(x).unwrap().clone());
        assert!(finite_diff_check(sum_squares, &p, &g, 1e-5).unwrap().passed(1e-9));
    }

    #[test]
    fn nan_objective_is_reported_not_raised() {
        let p = quadratic_store();
        let mut g = ParamGrads::new();
        g.insert("theta".into(), Tensor::zeros(&[4]));
        let report = finite_diff_check(|_| Ok(f64::NAN), &p, &g, 1e-4).unwrap();
        assert!(!report.passed(1e-5));
        assert!(report.entries[0].failure.is_some());
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let p = quadratic_store();
        let g = ParamGrads::new();
        assert!(matches!(
            finite_diff_check(sum_squares, &p, &g, 1.0),
            Err(Error::Usage(_))
        ));
        assert!(finite_diff_check(sum_squares, &p, &g, 1e-8).is_err());
    }

    #[test]
    fn wrong_gradient_fails() {
        let p = quadratic_store();
        let mut g = ParamGrads::new();
        g.insert("theta".into(), Tensor::from_fn(&[4], |_| 1.0));
        assert!(!finite_diff_check(sum_squares, &p, &g, 1e-4).unwrap().passed(1e-5));
    }
}
