//! Universal Hopfield memory over adapter payloads.
//!
//! Retrieval is `Θ · sep(Kᵀ q)`: dot-product similarity between the query and
//! every stored key, a separation function turning similarities into weights
//! that sum to one, and a weighted sum of stored values. Keys are trainable;
//! values are append-only and never change once written.

use serde::{Deserialize, Serialize};

use crate::backbone::AdapterVector;
use crate::error::{MiraError, Result};
use crate::numerics::{checksum_of, Tape, Tensor, Var};
use crate::rng::{gaussian_vec, rng_for};

/// Threshold below which a sum-normalization denominator counts as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeparationKind {
    /// `s / Σs`; weights may be negative.
    Affine,
    /// `softmax(beta · s)`.
    Softmax { beta: f64 },
    /// `relu(s) / Σ relu(s)`.
    Relu,
    /// `tanh(s) / Σ tanh(s)`.
    Tanh,
}

impl Default for SeparationKind {
    fn default() -> Self {
        Self::Softmax { beta: 1.0 }
    }
}

impl SeparationKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Affine => "affine",
            Self::Softmax { .. } => "softmax",
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        }
    }

    pub fn all(beta: f64) -> [SeparationKind; 4] {
        [Self::Affine, Self::Softmax { beta }, Self::Relu, Self::Tanh]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Dot,
}

/// Separation on a single similarity vector. A degenerate denominator is
/// reported as an error; callers decide on the fallback.
pub fn separation(kind: SeparationKind, s: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = tape.constant(s.clone().reshape(vec![1, s.len()])?);
    let (w, degenerate) = separation_rows(&mut tape, kind, v);
    if degenerate[0] {
        let denom = match kind {
            SeparationKind::Affine => s.sum(),
            SeparationKind::Relu => s.data().iter().map(|x| x.max(0.0)).sum(),
            SeparationKind::Tanh => s.data().iter().map(|x| x.tanh()).sum(),
            SeparationKind::Softmax { .. } => unreachable!("softmax never degenerates"),
        };
        return Err(MiraError::DegenerateRetrieval {
            denominator: denom,
            threshold: DEGENERATE_EPS,
        });
    }
    tape.value(w).clone().reshape(vec![s.len()])
}

/// Row-wise separation on the tape. Degenerate rows become uniform.
pub fn separation_rows(tape: &mut Tape, kind: SeparationKind, scores: Var) -> (Var, Vec<bool>) {
    match kind {
        SeparationKind::Softmax { beta } => {
            let scaled = tape.scale(scores, beta);
            let rows = tape.value(scores).rows();
            (tape.softmax_rows(scaled), vec![false; rows])
        }
        SeparationKind::Affine => tape.sum_normalize_rows(scores, DEGENERATE_EPS),
        SeparationKind::Relu => {
            let r = tape.relu(scores);
            tape.sum_normalize_rows(r, DEGENERATE_EPS)
        }
        SeparationKind::Tanh => {
            let t = tape.tanh(scores);
            tape.sum_normalize_rows(t, DEGENERATE_EPS)
        }
    }
}

/// `k ~ N(0, σ² I)`, deterministic in `seed`.
pub fn sample_key(sigma2: f64, key_dim: usize, seed: u64) -> Result<Tensor> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(MiraError::Input(format!(
            "key variance {sigma2} must be ≥ 0"
        )));
    }
    let mut rng = rng_for(seed, "key", &[]);
    Ok(Tensor::vector(gaussian_vec(
        &mut rng,
        key_dim,
        sigma2.sqrt(),
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights {
    pub layer: usize,
    pub query_id: usize,
    pub weights: Tensor,
    pub degenerate: bool,
}

/// Output of a batched differentiable read.
pub struct ReadOutput {
    /// Retrieved adapter rows `[B × d_v]`.
    pub adapters: Var,
    /// Retrieval weights `[B × N]`.
    pub weights: Var,
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryUnit {
    pub layer: usize,
    key_dim: usize,
    lora_rank: usize,
    model_dim: usize,
    /// `N × d_k`, row `j` is key `j` (column `j` of `K`).
    keys: Vec<f64>,
    /// `N × d_v`, row `j` is value `j` (column `j` of `Θ`).
    values: Vec<f64>,
    count: usize,
    pub separation: SeparationKind,
    pub similarity: SimilarityKind,
}

impl MemoryUnit {
    pub fn new(
        layer: usize,
        key_dim: usize,
        lora_rank: usize,
        model_dim: usize,
        separation: SeparationKind,
    ) -> Self {
        Self {
            layer,
            key_dim,
            lora_rank,
            model_dim,
            keys: Vec::new(),
            values: Vec::new(),
            count: 0,
            separation,
            similarity: SimilarityKind::Dot,
        }
    }

    /// Rebuilds a memory from stored rows; `keys: [N × d_k]`, `values: [N × d_v]`.
    pub fn restore(
        layer: usize,
        lora_rank: usize,
        model_dim: usize,
        separation: SeparationKind,
        keys: &Tensor,
        values: &Tensor,
    ) -> Result<Self> {
        let n = keys.rows();
        let mut m = Self::new(layer, keys.cols(), lora_rank, model_dim, separation);
        keys.expect_shape(&[n, m.key_dim], "stored keys")?;
        values.expect_shape(&[n, m.value_dim()], "stored values")?;
        m.keys = keys.data().to_vec();
        m.values = values.data().to_vec();
        m.count = n;
        Ok(m)
    }

    pub fn lora_rank(&self) -> usize {
        self.lora_rank
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn value_dim(&self) -> usize {
        4 * self.lora_rank * self.model_dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn write(&mut self, key: &Tensor, theta: &AdapterVector) -> Result<()> {
        if theta.layer != self.layer {
            return Err(MiraError::Contract(format!(
                "adapter for layer {} written to memory of layer {}",
                theta.layer, self.layer
            )));
        }
        if key.len() != self.key_dim {
            return Err(MiraError::Shape(format!(
                "key has {} entries, memory expects {}",
                key.len(),
                self.key_dim
            )));
        }
        if theta.flat().len() != self.value_dim() {
            return Err(MiraError::Shape(format!(
                "value has {} entries, memory expects {}",
                theta.flat().len(),
                self.value_dim()
            )));
        }
        self.keys.extend_from_slice(key.data());
        self.values.extend_from_slice(theta.flat().data());
        self.count += 1;
        Ok(())
    }

    pub fn key(&self, j: usize) -> &[f64] {
        &self.keys[j * self.key_dim..(j + 1) * self.key_dim]
    }

    pub fn value(&self, j: usize) -> &[f64] {
        let dv = self.value_dim();
        &self.values[j * dv..(j + 1) * dv]
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(MiraError::Contract(format!(
                "memory of layer {} is empty",
                self.layer
            )));
        }
        Ok(())
    }

    /// Keys as rows, `[N × d_k]`.
    pub fn key_rows(&self) -> Result<Tensor> {
        self.require_nonempty()?;
        Tensor::matrix(self.count, self.key_dim, self.keys.clone())
    }

    /// The key matrix `K`, `[d_k × N]`.
    pub fn key_matrix(&self) -> Result<Tensor> {
        self.key_rows()?.transpose()
    }

    /// Values as rows, `[N × d_v]`.
    pub fn value_rows(&self) -> Result<Tensor> {
        self.require_nonempty()?;
        Tensor::matrix(self.count, self.value_dim(), self.values.clone())
    }

    /// The value matrix `Θ`, `[d_v × N]`.
    pub fn value_matrix(&self) -> Result<Tensor> {
        self.value_rows()?.transpose()
    }

    /// Replaces all keys; `rows` must be `[N × d_k]`.
    pub fn set_key_rows(&mut self, rows: &Tensor) -> Result<()> {
        rows.expect_shape(&[self.count, self.key_dim], "key rows")?;
        self.keys.copy_from_slice(rows.data());
        Ok(())
    }

    /// Keys flattened column-by-column of `K`, so appending a key only
    /// extends the vector.
    pub fn keys_flat(&self) -> &[f64] {
        &self.keys
    }

    pub fn values_checksum(&self) -> String {
        match self.value_rows() {
            Ok(t) => t.checksum(),
            Err(_) => checksum_of([]),
        }
    }

    pub fn keys_checksum(&self) -> String {
        match self.key_rows() {
            Ok(t) => t.checksum(),
            Err(_) => checksum_of([]),
        }
    }

    /// Single-query read without recording.
    pub fn read(&self, q: &Tensor) -> Result<(AdapterVector, RetrievalWeights)> {
        self.require_nonempty()?;
        if q.len() != self.key_dim {
            return Err(MiraError::Shape(format!(
                "query has {} entries, memory expects {}",
                q.len(),
                self.key_dim
            )));
        }
        let mut tape = Tape::inference();
        let qv = tape.constant(q.clone().reshape(vec![1, self.key_dim])?);
        let kv = tape.constant(self.key_rows()?);
        let vv = tape.constant(self.value_rows()?);
        let out = self.read_on_tape(&mut tape, qv, kv, vv)?;
        let flat = tape
            .value(out.adapters)
            .clone()
            .reshape(vec![self.value_dim()])?;
        let adapter = AdapterVector::new(self.layer, self.lora_rank, self.model_dim, flat)?;
        let weights = RetrievalWeights {
            layer: self.layer,
            query_id: 0,
            weights: tape.value(out.weights).clone().reshape(vec![self.count])?,
            degenerate: out.degenerate[0],
        };
        Ok((adapter, weights))
    }

    /// Batched read with keys and values supplied as tape variables so the
    /// caller controls which of them receive gradients.
    pub fn read_on_tape(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<ReadOutput> {
        self.require_nonempty()?;
        let q = tape.value(queries);
        if q.cols() != self.key_dim {
            return Err(MiraError::Shape(format!(
                "queries {:?}, memory key dim {}",
                q.shape(),
                self.key_dim
            )));
        }
        tape.value(keys)
            .expect_shape(&[self.count, self.key_dim], "keys")?;
        tape.value(values)
            .expect_shape(&[self.count, self.value_dim()], "values")?;
        let scores = tape.matmul_nt(queries, keys)?;
        let (weights, degenerate) = separation_rows(tape, self.separation, scores);
        let adapters = tape.matmul(weights, values)?;
        Ok(ReadOutput {
            adapters,
            weights,
            degenerate,
        })
    }
}
