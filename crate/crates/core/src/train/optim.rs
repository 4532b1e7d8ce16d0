use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGrads, ParamKind, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments and step count of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamWConfig,
    pub step: u64,
    /// Learning rate used by the most recent step.
    pub lr: f64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Float> OptimizerState<T> {
    /// Zero moments for every learnable tensor of `params`.
    pub fn new(params: &ParamStore<T>, hyper: AdamWConfig) -> Self {
        let zeros = || {
            params
                .learnable()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect::<IndexMap<_, _>>()
        };
        OptimizerState {
            hyper,
            step: 0,
            lr: 0.0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update of every learnable parameter.
///
/// Decay is decoupled: `θ ← θ − lr·wd·θ` precedes the bias-corrected Adam
/// step, and only [`ParamKind::Weight`] tensors decay.
pub fn adamw_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        if !p.kind.learnable() {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Usage(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::Usage(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
        if !state.m.contains_key(name) {
            return Err(Error::Usage(format!("optimizer state has no moments for {name}")));
        }
    }

    state.step += 1;
    state.lr = lr;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let (b1, b2): (T, T) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
    let (one, eps, lr_t) = (T::one(), T::from_f64(h.eps), T::from_f64(lr));
    let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
    let decay = T::from_f64(lr * h.weight_decay);

    for (name, p) in params.iter_mut() {
        if !p.kind.learnable() {
            continue;
        }
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        let decays = p.kind == ParamKind::Weight && h.weight_decay != 0.0;
        for (((theta, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            if decays {
                *theta -= decay * *theta;
            }
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi * inv_bc1;
            let vhat = *vi * inv_bc2;
            *theta -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::from_f64(&[1], &[v]).unwrap(), kind).unwrap();
        p
    }

    fn grads(v: f64) -> ParamGrads<f64> {
        let mut g = ParamGrads::new();
        g.insert("theta".into(), Tensor::from_f64(&[1], &[v]).unwrap());
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0, ParamKind::Weight);
        let mut s = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        adamw_step(&mut p, &grads(1.0), &mut s, 0.1).unwrap();
        assert!((p.tensor("theta").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = scalar_store(1.0, ParamKind::Weight);
        let mut s = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        adamw_step(&mut p, &grads(0.0), &mut s, 0.5).unwrap();
        assert_eq!(p.tensor("theta").unwrap().data()[0], 1.0 - 0.5 * 0.1);
    }

    #[test]
    fn no_decay_kind_is_exempt() {
        let mut p = scalar_store(1.0, ParamKind::NoDecay);
        let mut s = OptimizerState::new(&p, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        adamw_step(&mut p, &grads(0.0), &mut s, 0.5).unwrap();
        assert_eq!(p.tensor("theta").unwrap().data()[0], 1.0);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = scalar_store(1.0, ParamKind::Weight);
        let mut s = OptimizerState::new(&p, AdamWConfig::default());
        let err = adamw_step(&mut p, &ParamGrads::new(), &mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::Usage(m) if m.contains("theta")));
        assert_eq!(s.step, 0);
    }
}
