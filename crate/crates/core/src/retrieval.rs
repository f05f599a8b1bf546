//! Query modules and the memory-modulated forward pass.
//!
//! For each layer the pooled previous-layer output is mapped to a query,
//! the layer's memory is read with it, and the retrieved adapter is loaded
//! into that layer for the sample. Every sample in a batch gets its own
//! retrieval.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Head, HeadVars};
use crate::error::{MiraError, Result};
use crate::memory::{MemoryUnit, RetrievalWeights};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{gaussian_vec, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    #[default]
    Identity,
    Linear,
    /// Three affine maps with tanh after the first two.
    Mlp3,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [QueryKind::Identity, QueryKind::Linear, QueryKind::Mlp3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Linear => "linear",
            Self::Mlp3 => "mlp3",
        }
    }
}

/// Map `g_ℓ: R^{d_h} → R^{d_k}` from a layer input to a memory query.
///
/// Parameters are stored as `[W, b, ...]` with `W: [out × in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryModule {
    pub layer: usize,
    pub kind: QueryKind,
    input_dim: usize,
    key_dim: usize,
    params: Vec<Tensor>,
}

impl QueryModule {
    pub fn new(
        kind: QueryKind,
        layer: usize,
        input_dim: usize,
        key_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dense = |rng: &mut Rng, out: usize, inp: usize| {
            let std = (1.0 / inp as f64).sqrt();
            Tensor::matrix(out, inp, gaussian_vec(rng, out * inp, std)).expect("dims")
        };
        let params = match kind {
            QueryKind::Identity => {
                if input_dim != key_dim {
                    return Err(MiraError::Config(format!(
                        "identity query module needs d_h = d_k, got {input_dim} and {key_dim}"
                    )));
                }
                Vec::new()
            }
            QueryKind::Linear => vec![dense(rng, key_dim, input_dim), Tensor::zeros(&[key_dim])],
            QueryKind::Mlp3 => vec![
                dense(rng, input_dim, input_dim),
                Tensor::zeros(&[input_dim]),
                dense(rng, input_dim, input_dim),
                Tensor::zeros(&[input_dim]),
                dense(rng, key_dim, input_dim),
                Tensor::zeros(&[key_dim]),
            ],
        };
        Ok(Self {
            layer,
            kind,
            input_dim,
            key_dim,
            params,
        })
    }

    pub fn identity(layer: usize, dim: usize) -> Self {
        Self {
            layer,
            kind: QueryKind::Identity,
            input_dim: dim,
            key_dim: dim,
            params: Vec::new(),
        }
    }

    pub fn linear(layer: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        let (k, d) = (weight.rows(), weight.cols());
        weight.expect_shape(&[k, d], "query weight")?;
        bias.expect_shape(&[k], "query bias")?;
        Ok(Self {
            layer,
            kind: QueryKind::Linear,
            input_dim: d,
            key_dim: k,
            params: vec![weight, bias],
        })
    }

    /// Rebuilds a module from stored parameters, checking their shapes.
    pub fn from_params(
        kind: QueryKind,
        layer: usize,
        input_dim: usize,
        key_dim: usize,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let expected: Vec<Vec<usize>> = match kind {
            QueryKind::Identity => Vec::new(),
            QueryKind::Linear => vec![vec![key_dim, input_dim], vec![key_dim]],
            QueryKind::Mlp3 => vec![
                vec![input_dim, input_dim],
                vec![input_dim],
                vec![input_dim, input_dim],
                vec![input_dim],
                vec![key_dim, input_dim],
                vec![key_dim],
            ],
        };
        if kind == QueryKind::Identity && input_dim != key_dim {
            return Err(MiraError::Config(
                "identity query module needs d_h = d_k".into(),
            ));
        }
        if params.len() != expected.len()
            || params
                .iter()
                .zip(&expected)
                .any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(MiraError::Shape(format!(
                "{} query module parameters",
                kind.name()
            )));
        }
        Ok(Self {
            layer,
            kind,
            input_dim,
            key_dim,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Applies the module to rows `h: [B × d_h]`.
    pub fn on_tape(&self, tape: &mut Tape, h: Var, params: &[Var]) -> Result<Var> {
        if tape.value(h).cols() != self.input_dim {
            return Err(MiraError::Shape(format!(
                "query input {:?}, expected {} columns",
                tape.value(h).shape(),
                self.input_dim
            )));
        }
        if params.len() != self.params.len() {
            return Err(MiraError::Contract("query parameter count".into()));
        }
        let affine = |tape: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.matmul_nt(x, w)?;
            tape.add_rows(y, b)
        };
        match self.kind {
            QueryKind::Identity => Ok(h),
            QueryKind::Linear => affine(tape, h, params[0], params[1]),
            QueryKind::Mlp3 => {
                let z1 = affine(tape, h, params[0], params[1])?;
                let a1 = tape.tanh(z1);
                let z2 = affine(tape, a1, params[2], params[3])?;
                let a2 = tape.tanh(z2);
                affine(tape, a2, params[4], params[5])
            }
        }
    }

    /// Query for a single vector or a batch of rows, without recording.
    pub fn query(&self, h: &Tensor) -> Result<Tensor> {
        let single = h.shape().len() == 1;
        let rows = if single {
            h.clone().reshape(vec![1, h.len()])?
        } else {
            h.clone()
        };
        let mut tape = Tape::inference();
        let hv = tape.constant(rows);
        let pv = self.bind(&mut tape, false);
        let q = self.on_tape(&mut tape, hv, &pv)?;
        let out = tape.value(q).clone();
        if single {
            out.reshape(vec![self.key_dim])
        } else {
            Ok(out)
        }
    }

    /// All parameters concatenated in storage order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect()
    }
}

/// Which retrieval-side tensors receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub keys: bool,
    pub queries: bool,
    pub head: bool,
}

/// Tape bindings for one modulated forward.
pub struct BoundModel {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub query_params: Vec<Vec<Var>>,
    pub head: HeadVars,
}

pub struct LayerRead {
    pub h_prev: Var,
    pub query: Var,
    pub weights: Var,
    pub adapters: Var,
    pub degenerate: Vec<bool>,
}

pub struct ModulatedOutput {
    pub logits: Var,
    pub layers: Vec<LayerRead>,
}

impl ModulatedOutput {
    pub fn degenerate_samples(&self) -> usize {
        let n = self.layers.first().map_or(0, |l| l.degenerate.len());
        (0..n)
            .filter(|&i| self.layers.iter().any(|l| l.degenerate[i]))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub h_prev: Tensor,
    pub query: Tensor,
    pub weights: Vec<RetrievalWeights>,
    pub adapters: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulatedForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub logits: Tensor,
}

impl ModulatedForwardTrace {
    /// Re-runs the backbone with the recorded per-sample adapters.
    pub fn replay(&self, backbone: &Backbone, head: &Head, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let hv = head.bind(&mut tape, false);
        let rows: Vec<Var> = self
            .layers
            .iter()
            .map(|l| tape.constant(l.adapters.clone()))
            .collect();
        let out = backbone.forward_on_tape(&mut tape, xv, &hv, &mut |_, l, _| Ok(rows[l]))?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Borrowed view of everything the modulated forward needs.
#[derive(Clone, Copy)]
pub struct RetrievalModel<'a> {
    pub backbone: &'a Backbone,
    pub memories: &'a [MemoryUnit],
    pub queries: &'a [QueryModule],
    pub head: &'a Head,
}

impl<'a> RetrievalModel<'a> {
    pub fn validate(&self) -> Result<()> {
        let layers = self.backbone.config.num_layers;
        if self.memories.len() != layers || self.queries.len() != layers {
            return Err(MiraError::Contract(format!(
                "{} memories and {} query modules for {layers} layers",
                self.memories.len(),
                self.queries.len()
            )));
        }
        for (l, (m, g)) in self.memories.iter().zip(self.queries).enumerate() {
            if m.is_empty() {
                return Err(MiraError::Contract(format!("memory of layer {l} is empty")));
            }
            if g.key_dim() != m.key_dim() || g.input_dim() != self.backbone.config.model_dim {
                return Err(MiraError::Shape(format!(
                    "layer {l}: query module {}→{}, memory key dim {}, model dim {}",
                    g.input_dim(),
                    g.key_dim(),
                    m.key_dim(),
                    self.backbone.config.model_dim
                )));
            }
            if m.value_dim() != self.backbone.config.adapter_len() {
                return Err(MiraError::Shape(format!("layer {l}: memory value dim")));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Result<BoundModel> {
        self.validate()?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for m in self.memories {
            let k = m.key_rows()?;
            keys.push(if trainable.keys {
                tape.leaf(k)
            } else {
                tape.constant(k)
            });
            values.push(tape.constant(m.value_rows()?));
        }
        let query_params = self
            .queries
            .iter()
            .map(|g| g.bind(tape, trainable.queries))
            .collect();
        let head = self.head.bind(tape, trainable.head);
        Ok(BoundModel {
            keys,
            values,
            query_params,
            head,
        })
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
    ) -> Result<ModulatedOutput> {
        let mut layers = Vec::with_capacity(self.memories.len());
        let out = self
            .backbone
            .forward_on_tape(tape, x, &bound.head, &mut |tape, l, h_prev| {
                let query = self.queries[l].on_tape(tape, h_prev, &bound.query_params[l])?;
                let read =
                    self.memories[l].read_on_tape(tape, query, bound.keys[l], bound.values[l])?;
                layers.push(LayerRead {
                    h_prev,
                    query,
                    weights: read.weights,
                    adapters: read.adapters,
                    degenerate: read.degenerate,
                });
                Ok(read.adapters)
            })?;
        Ok(ModulatedOutput {
            logits: out.logits,
            layers,
        })
    }

    /// Modulated forward on a recording tape; returns logits and, if asked,
    /// the per-layer trace.
    pub fn modulated_forward(
        &self,
        x: &Tensor,
        trainable: Trainable,
        keep_trace: bool,
    ) -> Result<(Tensor, Option<ModulatedForwardTrace>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, trainable)?;
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &bound, xv)?;
        let logits = tape.value(out.logits).clone();
        let trace = keep_trace.then(|| self.trace(&tape, &out, &logits));
        Ok((logits, trace))
    }

    /// Gradient-free forward: nothing is recorded and nothing is mutated.
    pub fn inference_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape, Trainable::default())?;
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &bound, xv)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Inference that also returns the trace.
    pub fn inference_trace(&self, x: &Tensor) -> Result<ModulatedForwardTrace> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape, Trainable::default())?;
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &bound, xv)?;
        let logits = tape.value(out.logits).clone();
        Ok(self.trace(&tape, &out, &logits))
    }

    fn trace(&self, tape: &Tape, out: &ModulatedOutput, logits: &Tensor) -> ModulatedForwardTrace {
        let layers = out
            .layers
            .iter()
            .enumerate()
            .map(|(l, r)| {
                let w = tape.value(r.weights);
                let weights = (0..w.rows())
                    .map(|i| RetrievalWeights {
                        layer: l,
                        query_id: i,
                        weights: Tensor::vector(w.row(i).to_vec()),
                        degenerate: r.degenerate[i],
                    })
                    .collect();
                LayerTrace {
                    layer: l,
                    h_prev: tape.value(r.h_prev).clone(),
                    query: tape.value(r.query).clone(),
                    weights,
                    adapters: tape.value(r.adapters).clone(),
                }
            })
            .collect();
        ModulatedForwardTrace {
            layers,
            logits: logits.clone(),
        }
    }
}
