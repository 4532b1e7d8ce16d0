use std::collections::HashMap;

use super::cells::model_forward;
use super::config::ModelConfig;
use super::params::{ParamGrads, ParamStore};
use super::BN_MOMENTUM;
use crate::error::{Error, Result};
use crate::tensor::{c, BatchStats, Float, Graph, Tensor, Var};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Replaces every post-softmax attention matrix with a fixed pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionOverride {
    /// Every query attends equally to every key.
    Uniform,
    /// Every query attends only to itself.
    Identity,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<T> {
    pub mode: Mode,
    pub capture_attention: bool,
    pub attention_override: Option<AttentionOverride>,
    /// Added to the tokens entering the last normal cell's attention
    /// (after its layer norm), shape `[N, L+1, D]`.
    pub cam_delta: Option<Tensor<T>>,
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl<T> ForwardOptions<T> {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            capture_attention: false,
            attention_override: None,
            cam_delta: None,
            corrupt_backward: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            ..Self::train()
        }
    }
}

/// One recorded post-softmax attention tensor of shape `[N·heads, L, L]`.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub layer: String,
    pub attn: Var,
    pub heads: usize,
    pub grid: (usize, usize),
    /// Leading non-spatial tokens (1 for normal cells, 0 for reduction cells).
    pub prefix_tokens: usize,
}

/// Batch statistics of one batch-norm layer, to be folded into its running stats.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub stats: BatchStats<T>,
}

/// A forward pass in progress: the graph, lazily bound parameters and
/// whatever the options asked to record.
pub struct Forward<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    pub opts: ForwardOptions<T>,
    pub attention: Vec<AttentionCapture>,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Normalized tokens consumed by the last normal cell's attention.
    pub cam_tokens: Option<Var>,
    pub rc_outputs: Vec<Var>,
    /// Token sequence entering the first normal cell (after class token and PE).
    pub nc_input: Option<Var>,
}

impl<'p, T: Float> Forward<'p, T> {
    pub fn new(params: &'p ParamStore<T>, opts: ForwardOptions<T>) -> Self {
        let mut graph = Graph::new();
        graph.set_corrupt_backward(opts.corrupt_backward);
        Forward {
            graph,
            params,
            bound: HashMap::new(),
            order: Vec::new(),
            opts,
            attention: Vec::new(),
            bn_updates: Vec::new(),
            cam_tokens: None,
            rc_outputs: Vec::new(),
            nc_input: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Graph handle for a learnable parameter, binding it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self.params.tensor(name)?.clone();
        let v = self.graph.param(tensor);
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Stored tensor that is read but not differentiated (running statistics).
    pub fn buffer(&self, name: &str) -> Result<&'p Tensor<T>> {
        self.params.tensor(name)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Gradients of every parameter used by the pass, in binding order.
    /// Parameters that the loss does not depend on get zeros.
    pub fn gradients(&self) -> ParamGrads<T> {
        let mut out = ParamGrads::new();
        for name in &self.order {
            let v = self.bound[name];
            let g = self
                .graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Folds recorded batch statistics into the store's running statistics.
pub fn apply_bn_updates<T: Float>(params: &mut ParamStore<T>, updates: &[BnUpdate<T>]) -> Result<()> {
    let m: T = c(BN_MOMENTUM);
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
            let t = params.tensor_mut(&format!("{}.{suffix}", u.prefix))?;
            if t.numel() != batch.len() {
                return Err(Error::Usage(format!(
                    "{}.{suffix}: {} running entries for {} channels",
                    u.prefix,
                    t.numel(),
                    batch.len()
                )));
            }
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Builds a graph for `images` and runs the whole model, returning the pass
/// and its logits.
pub fn run_model<'p, T: Float>(
    cfg: &ModelConfig,
    params: &'p ParamStore<T>,
    images: &Tensor<T>,
    opts: ForwardOptions<T>,
) -> Result<(Forward<'p, T>, Var)> {
    let mut fw = Forward::new(params, opts);
    let x = fw.graph.constant(images.clone());
    let logits = model_forward(&mut fw, x, cfg)?;
    Ok((fw, logits))
}
