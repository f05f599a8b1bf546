//! Frozen transformer classifier with LoRA injection on the attention query
//! and value projections.
//!
//! Projections follow the `y = W·x` convention with `W: [out×in]`; a batch of
//! row vectors is multiplied as `X·Wᵀ`. A LoRA pair `(A: [r×d], B: [d×r])`
//! contributes `(α/r)·B·A`, which the forward pass applies in factored form
//! `(α/r)·(X·Aᵀ)·Bᵀ` so that every sample in a batch may carry its own pair.

use serde::{Deserialize, Serialize};

use crate::error::{MiraError, Result};
use crate::numerics::{checksum_of, Tape, Tensor, Var};
use crate::rng::{gaussian_vec, rng_for, Rng};

const LN_EPS: f64 = 1e-5;
const LORA_INIT_STD: f64 = 0.02;
const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub lora_rank: usize,
    /// LoRA scale numerator; the update is multiplied by `alpha / rank`.
    /// `None` means `alpha = rank`.
    pub lora_alpha: Option<f64>,
    /// Tokens per sample. The input vector is split into `seq_len` equal chunks.
    pub seq_len: usize,
    pub mlp_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            input_dim: 16,
            num_classes: 8,
            lora_rank: 4,
            lora_alpha: None,
            seq_len: 1,
            mlp_dim: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("lora_rank", self.lora_rank),
            ("seq_len", self.seq_len),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MiraError::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(MiraError::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.lora_rank > self.model_dim {
            return Err(MiraError::Config(format!(
                "lora_rank {} exceeds model_dim {}",
                self.lora_rank, self.model_dim
            )));
        }
        if !self.input_dim.is_multiple_of(self.seq_len) {
            return Err(MiraError::Config(format!(
                "input_dim {} not divisible by seq_len {}",
                self.input_dim, self.seq_len
            )));
        }
        if self.lora_alpha.is_some_and(|a| !a.is_finite()) {
            return Err(MiraError::Config("lora_alpha must be finite".into()));
        }
        Ok(())
    }

    /// Length of a flattened per-layer adapter: `2 · r · 2 · d_h`.
    pub fn adapter_len(&self) -> usize {
        4 * self.lora_rank * self.model_dim
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64) / self.lora_rank as f64
    }

    pub fn token_dim(&self) -> usize {
        self.input_dim / self.seq_len
    }
}

/// Flattened LoRA parameters of one layer:
/// `concat(A_Q[r×d], B_Q[d×r], A_V[r×d], B_V[d×r])`, each row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterVector {
    pub layer: usize,
    rank: usize,
    model_dim: usize,
    flat: Tensor,
}

/// The four matrices of an [`AdapterVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParts {
    pub a_q: Tensor,
    pub b_q: Tensor,
    pub a_v: Tensor,
    pub b_v: Tensor,
}

impl AdapterVector {
    pub fn new(layer: usize, rank: usize, model_dim: usize, flat: Tensor) -> Result<Self> {
        let expected = 4 * rank * model_dim;
        if flat.len() != expected {
            return Err(MiraError::Shape(format!(
                "adapter payload has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let flat = flat.reshape(vec![expected])?;
        Ok(Self {
            layer,
            rank,
            model_dim,
            flat,
        })
    }

    pub fn zeros(config: &BackboneConfig, layer: usize) -> Self {
        Self {
            layer,
            rank: config.lora_rank,
            model_dim: config.model_dim,
            flat: Tensor::zeros(&[config.adapter_len()]),
        }
    }

    /// `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init(config: &BackboneConfig, layer: usize, rng: &mut Rng) -> Self {
        let (r, d) = (config.lora_rank, config.model_dim);
        let a_q = Tensor::matrix(r, d, gaussian_vec(rng, r * d, LORA_INIT_STD)).expect("dims");
        let a_v = Tensor::matrix(r, d, gaussian_vec(rng, r * d, LORA_INIT_STD)).expect("dims");
        let zero_b = Tensor::zeros(&[d, r]);
        Self::from_parts(
            layer,
            &AdapterParts {
                a_q,
                b_q: zero_b.clone(),
                a_v,
                b_v: zero_b,
            },
        )
        .expect("consistent parts")
    }

    pub fn from_parts(layer: usize, parts: &AdapterParts) -> Result<Self> {
        let (r, d) = (parts.a_q.rows(), parts.a_q.cols());
        parts.a_q.expect_shape(&[r, d], "A_Q")?;
        parts.b_q.expect_shape(&[d, r], "B_Q")?;
        parts.a_v.expect_shape(&[r, d], "A_V")?;
        parts.b_v.expect_shape(&[d, r], "B_V")?;
        let flat = [&parts.a_q, &parts.b_q, &parts.a_v, &parts.b_v]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        Self::new(layer, r, d, Tensor::vector(flat))
    }

    pub fn parts(&self) -> AdapterParts {
        let (r, d) = (self.rank, self.model_dim);
        let block = r * d;
        let piece = |i: usize, rows: usize, cols: usize| {
            let data = self.flat.data()[i * block..(i + 1) * block].to_vec();
            Tensor::matrix(rows, cols, data).expect("dims")
        };
        AdapterParts {
            a_q: piece(0, r, d),
            b_q: piece(1, d, r),
            a_v: piece(2, r, d),
            b_v: piece(3, d, r),
        }
    }

    pub fn flat(&self) -> &Tensor {
        &self.flat
    }

    pub fn into_flat(self) -> Tensor {
        self.flat
    }

    pub fn rank(&self) -> usize {
        self.rank
    }
}

/// `W + scaling · B·A`.
pub fn apply_adapter(frozen: &Tensor, a: &Tensor, b: &Tensor, scaling: f64) -> Result<Tensor> {
    let d = frozen.rows();
    frozen.expect_shape(&[d, d], "frozen weight")?;
    let r = a.rows();
    a.expect_shape(&[r, d], "LoRA A")?;
    b.expect_shape(&[d, r], "LoRA B")?;
    let ba = crate::numerics::matmul(b, a)?;
    let data = frozen
        .data()
        .iter()
        .zip(ba.data())
        .map(|(w, u)| w + scaling * u)
        .collect();
    Tensor::matrix(d, d, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenWeights {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub positional: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl FrozenWeights {
    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed_w, &self.embed_b];
        out.extend(self.positional.as_ref());
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.w_q,
                &l.w_k,
                &l.w_v,
                &l.w_o,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w_ff1,
                &l.b_ff1,
                &l.w_ff2,
                &l.b_ff2,
            ]);
        }
        out.extend([&self.final_gain, &self.final_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        out.extend(self.positional.as_mut());
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_ff1,
                &mut l.b_ff1,
                &mut l.w_ff2,
                &mut l.b_ff2,
            ]);
        }
        out.extend([&mut self.final_gain, &mut self.final_bias]);
        out
    }
}

/// Linear classifier on the pooled final representation: `logits = h·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn init(config: &BackboneConfig, rng: &mut Rng) -> Self {
        let (d, c) = (config.model_dim, config.num_classes);
        Self {
            weight: Tensor::matrix(d, c, gaussian_vec(rng, d * c, HEAD_INIT_STD)).expect("dims"),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let bind = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        HeadVars {
            weight: bind(tape, &self.weight),
            bias: bind(tape, &self.bias),
        }
    }

    pub fn checksum(&self) -> String {
        checksum_of([&self.weight, &self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Token-pooled layer outputs `h_0 … h_L`, each `[B × d_h]`.
    pub hidden: Vec<Var>,
}

/// Supplies per-layer adapter rows given the pooled input to that layer.
/// The returned tensor is `[1 × d_v]` (shared) or `[B × d_v]` (per sample).
pub type AdapterSource<'a> = dyn FnMut(&mut Tape, usize, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub weights: FrozenWeights,
}

struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w_ff1: Var,
    b_ff1: Var,
    w_ff2: Var,
    b_ff2: Var,
}

impl Backbone {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "backbone", &[]);
        let d = config.model_dim;
        let h = config.mlp_dim;
        let tok = config.token_dim();
        let dense = |rng: &mut Rng, out: usize, inp: usize| {
            let std = (1.0 / inp as f64).sqrt();
            Tensor::matrix(out, inp, gaussian_vec(rng, out * inp, std)).expect("dims")
        };
        let embed_w = dense(&mut rng, d, tok);
        let positional = (config.seq_len > 1).then(|| {
            Tensor::matrix(
                config.seq_len,
                d,
                gaussian_vec(&mut rng, config.seq_len * d, 0.5),
            )
            .expect("dims")
        });
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: dense(&mut rng, d, d),
                w_k: dense(&mut rng, d, d),
                w_v: dense(&mut rng, d, d),
                w_o: dense(&mut rng, d, d),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_ff1: dense(&mut rng, h, d),
                b_ff1: Tensor::zeros(&[h]),
                w_ff2: dense(&mut rng, d, h),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        let weights = FrozenWeights {
            embed_w,
            embed_b: Tensor::zeros(&[d]),
            positional,
            layers,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
        };
        Ok(Self { config, weights })
    }

    pub fn checksum(&self) -> String {
        checksum_of(self.weights.tensors())
    }

    /// Forward pass with one fixed adapter per layer, evaluated without
    /// recording.
    pub fn forward(&self, x: &Tensor, adapters: &[AdapterVector], head: &Head) -> Result<Tensor> {
        self.check_adapters(adapters)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let hv = head.bind(&mut tape, false);
        let thetas: Vec<Var> = adapters
            .iter()
            .map(|a| {
                let row = a.flat().clone().reshape(vec![1, a.flat().len()])?;
                Ok(tape.constant(row))
            })
            .collect::<Result<_>>()?;
        let out = self.forward_on_tape(&mut tape, xv, &hv, &mut |_, l, _| Ok(thetas[l]))?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn check_adapters(&self, adapters: &[AdapterVector]) -> Result<()> {
        if adapters.len() != self.config.num_layers {
            return Err(MiraError::Contract(format!(
                "{} adapters supplied for {} layers",
                adapters.len(),
                self.config.num_layers
            )));
        }
        for (l, a) in adapters.iter().enumerate() {
            if a.layer != l {
                return Err(MiraError::Contract(format!(
                    "adapter for layer {} supplied at position {l}",
                    a.layer
                )));
            }
            if a.flat().len() != self.config.adapter_len() {
                return Err(MiraError::Shape(format!(
                    "adapter {l} has {} entries, expected {}",
                    a.flat().len(),
                    self.config.adapter_len()
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Frozen weights enter as constants.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        head: &HeadVars,
        source: &mut AdapterSource<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let xt = tape.value(x);
        if xt.cols() != cfg.input_dim || xt.shape().len() != 2 {
            return Err(MiraError::Shape(format!(
                "input {:?}, expected [B × {}]",
                xt.shape(),
                cfg.input_dim
            )));
        }
        let batch = xt.rows();
        let seq = cfg.seq_len;
        let w = &self.weights;

        let tokens = if seq > 1 {
            tape.reshape(x, vec![batch * seq, cfg.token_dim()])?
        } else {
            x
        };
        let embed_w = tape.constant(w.embed_w.clone());
        let embed_b = tape.constant(w.embed_b.clone());
        let mut h = tape.matmul_nt(tokens, embed_w)?;
        h = tape.add_rows(h, embed_b)?;
        if let Some(pos) = &w.positional {
            let p = tape.constant(pos.clone());
            h = tape.add_rows(h, p)?;
        }

        let mut hidden = vec![self.pool(tape, h)?];
        for (l, lw) in w.layers.iter().enumerate() {
            let theta = source(tape, l, hidden[l])?;
            let tt = tape.value(theta);
            if tt.cols() != cfg.adapter_len() || !(tt.rows() == 1 || tt.rows() == batch) {
                return Err(MiraError::Shape(format!(
                    "layer {l} adapter rows {:?} for batch {batch}, d_v {}",
                    tt.shape(),
                    cfg.adapter_len()
                )));
            }
            let vars = bind_layer(tape, lw);
            h = self.block(tape, h, theta, &vars)?;
            hidden.push(self.pool(tape, h)?);
        }

        let fg = tape.constant(w.final_gain.clone());
        let fb = tape.constant(w.final_bias.clone());
        let mut z = tape.layer_norm(h, LN_EPS);
        z = tape.mul_rows(z, fg)?;
        z = tape.add_rows(z, fb)?;
        let pooled = self.pool(tape, z)?;
        let mut logits = tape.matmul(pooled, head.weight)?;
        logits = tape.add_rows(logits, head.bias)?;
        Ok(ForwardOutput { logits, hidden })
    }

    fn pool(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        if self.config.seq_len == 1 {
            Ok(h)
        } else {
            tape.mean_groups(h, self.config.seq_len)
        }
    }

    fn lora(&self, tape: &mut Tape, a: Var, theta: Var, which: usize) -> Result<Var> {
        let (r, d) = (self.config.lora_rank, self.config.model_dim);
        let block = r * d;
        let lora_a = tape.slice_cols(theta, which * 2 * block, block)?;
        let lora_b = tape.slice_cols(theta, (which * 2 + 1) * block, block)?;
        let u = tape.batched_matvec(a, lora_a, r, d)?;
        let y = tape.batched_matvec(u, lora_b, d, r)?;
        Ok(tape.scale(y, self.config.lora_scaling()))
    }

    fn block(&self, tape: &mut Tape, h: Var, theta: Var, w: &LayerVars) -> Result<Var> {
        let mut a = tape.layer_norm(h, LN_EPS);
        a = tape.mul_rows(a, w.ln1_gain)?;
        a = tape.add_rows(a, w.ln1_bias)?;

        let q0 = tape.matmul_nt(a, w.w_q)?;
        let dq = self.lora(tape, a, theta, 0)?;
        let q = tape.add(q0, dq)?;
        let k = tape.matmul_nt(a, w.w_k)?;
        let v0 = tape.matmul_nt(a, w.w_v)?;
        let dv = self.lora(tape, a, theta, 1)?;
        let v = tape.add(v0, dv)?;
        let o = tape.attention(q, k, v, self.config.seq_len, self.config.num_heads)?;
        let proj = tape.matmul_nt(o, w.w_o)?;
        let h = tape.add(h, proj)?;

        let mut m = tape.layer_norm(h, LN_EPS);
        m = tape.mul_rows(m, w.ln2_gain)?;
        m = tape.add_rows(m, w.ln2_bias)?;
        let mut f = tape.matmul_nt(m, w.w_ff1)?;
        f = tape.add_rows(f, w.b_ff1)?;
        f = tape.tanh(f);
        let mut f2 = tape.matmul_nt(f, w.w_ff2)?;
        f2 = tape.add_rows(f2, w.b_ff2)?;
        tape.add(h, f2)
    }
}

fn bind_layer(tape: &mut Tape, lw: &LayerWeights) -> LayerVars {
    let mut c = |t: &Tensor| tape.constant(t.clone());
    LayerVars {
        ln1_gain: c(&lw.ln1_gain),
        ln1_bias: c(&lw.ln1_bias),
        w_q: c(&lw.w_q),
        w_k: c(&lw.w_k),
        w_v: c(&lw.w_v),
        w_o: c(&lw.w_o),
        ln2_gain: c(&lw.ln2_gain),
        ln2_bias: c(&lw.ln2_bias),
        w_ff1: c(&lw.w_ff1),
        b_ff1: c(&lw.b_ff1),
        w_ff2: c(&lw.w_ff2),
        b_ff2: c(&lw.b_ff2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{
        central_difference, relative_error, DEFAULT_STEP, RELATIVE_FLOOR,
    };
    use crate::rng::rng_for;

    fn small_config(seq_len: usize) -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            input_dim: 8,
            num_classes: 3,
            lora_rank: 2,
            lora_alpha: None,
            seq_len,
            mlp_dim: 16,
        }
    }

    fn random_adapter(cfg: &BackboneConfig, layer: usize, seed: u64) -> AdapterVector {
        let mut rng = rng_for(seed, "test-adapter", &[layer as u64]);
        let flat = Tensor::vector(gaussian_vec(&mut rng, cfg.adapter_len(), 0.3));
        AdapterVector::new(layer, cfg.lora_rank, cfg.model_dim, flat).unwrap()
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "test-input", &[]);
        Tensor::matrix(rows, cols, gaussian_vec(&mut rng, rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(MiraError::Config(_))));
        let mut c = BackboneConfig::default();
        c.lora_rank = 17;
        assert!(c.validate().is_err());
        assert_eq!(BackboneConfig::default().adapter_len(), 256);
    }

    #[test]
    fn zero_b_leaves_weight_unchanged() {
        let w = random_input(4, 4, 1);
        let a = random_input(2, 4, 2);
        let out = apply_adapter(&w, &a, &Tensor::zeros(&[4, 2]), 1.0).unwrap();
        assert!(out.bitwise_eq(&w));
    }

    #[test]
    fn apply_adapter_hand_example() {
        let w = Tensor::zeros(&[2, 2]);
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        let out = apply_adapter(&w, &a, &b, 1.0).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0, 0.0]);
        assert!(apply_adapter(&w, &b, &a, 1.0).is_err());
    }

    #[test]
    fn flatten_round_trip_then_apply() {
        let cfg = small_config(1);
        let adapter = random_adapter(&cfg, 0, 3);
        let parts = adapter.parts();
        let again = AdapterVector::from_parts(0, &parts).unwrap();
        assert!(again.flat().bitwise_eq(adapter.flat()));
        let w = &Backbone::init(cfg, 0).unwrap().weights.layers[0].w_q;
        let direct = apply_adapter(w, &parts.a_q, &parts.b_q, 1.0).unwrap();
        let p2 = again.parts();
        let via = apply_adapter(w, &p2.a_q, &p2.b_q, 1.0).unwrap();
        assert!(direct.bitwise_eq(&via));
    }

    #[test]
    fn zero_adapters_match_frozen_forward() {
        let cfg = small_config(1);
        let bb = Backbone::init(cfg.clone(), 5).unwrap();
        let head = Head::init(&cfg, &mut rng_for(5, "head", &[]));
        let x = random_input(4, cfg.input_dim, 6);
        let zeros: Vec<_> = (0..2).map(|l| AdapterVector::zeros(&cfg, l)).collect();
        let with_zero = bb.forward(&x, &zeros, &head).unwrap();

        // Independent frozen forward with materialized weights.
        let frozen = reference_forward(&bb, &x, &head, &[None, None]);
        assert!(with_zero.max_abs_diff(&frozen) < 1e-12);
    }

    #[test]
    fn factored_lora_matches_materialized_weights() {
        let cfg = small_config(1);
        let bb = Backbone::init(cfg.clone(), 8).unwrap();
        let head = Head::init(&cfg, &mut rng_for(8, "head", &[]));
        let x = random_input(3, cfg.input_dim, 9);
        let adapters: Vec<_> = (0..2).map(|l| random_adapter(&cfg, l, 10)).collect();
        let got = bb.forward(&x, &adapters, &head).unwrap();
        let parts: Vec<_> = adapters.iter().map(|a| Some(a.parts())).collect();
        let expected = reference_forward(&bb, &x, &head, &parts);
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn different_adapters_give_different_logits() {
        let cfg = small_config(1);
        let bb = Backbone::init(cfg.clone(), 11).unwrap();
        let head = Head::init(&cfg, &mut rng_for(11, "head", &[]));
        let x = random_input(2, cfg.input_dim, 12);
        let mut a1 = vec![random_adapter(&cfg, 0, 1), AdapterVector::zeros(&cfg, 1)];
        let l1 = bb.forward(&x, &a1, &head).unwrap();
        a1[0] = random_adapter(&cfg, 0, 2);
        let l2 = bb.forward(&x, &a1, &head).unwrap();
        assert!(l1.max_abs_diff(&l2) > 1e-6);
    }

    #[test]
    fn batch_rows_are_independent() {
        for seq in [1, 2] {
            let cfg = small_config(seq);
            let bb = Backbone::init(cfg.clone(), 13).unwrap();
            let head = Head::init(&cfg, &mut rng_for(13, "head", &[]));
            let adapters: Vec<_> = (0..2).map(|l| random_adapter(&cfg, l, 14)).collect();
            let one = random_input(1, cfg.input_dim, 15);
            let two = Tensor::from_rows(&[one.row(0).to_vec(), one.row(0).to_vec()]).unwrap();
            let l1 = bb.forward(&one, &adapters, &head).unwrap();
            let l2 = bb.forward(&two, &adapters, &head).unwrap();
            assert_eq!(l1.row(0), l2.row(0));
            assert_eq!(l1.row(0), l2.row(1));
        }
    }

    #[test]
    fn missing_adapter_is_contract_error() {
        let cfg = small_config(1);
        let bb = Backbone::init(cfg.clone(), 0).unwrap();
        let head = Head::init(&cfg, &mut rng_for(0, "head", &[]));
        let x = random_input(1, cfg.input_dim, 0);
        let err = bb.forward(&x, &[AdapterVector::zeros(&cfg, 0)], &head);
        assert!(matches!(err, Err(MiraError::Contract(_))));
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        for seq in [1, 2] {
            let cfg = small_config(seq);
            let bb = Backbone::init(cfg.clone(), 21).unwrap();
            let head = Head::init(&cfg, &mut rng_for(21, "head", &[]));
            let x = random_input(3, cfg.input_dim, 22);
            let labels = [0, 2, 1];
            let adapters: Vec<_> = (0..2).map(|l| random_adapter(&cfg, l, 23)).collect();

            let loss_at = |flat0: &Tensor| {
                let mut ad = adapters.clone();
                ad[0] = AdapterVector::new(0, cfg.lora_rank, cfg.model_dim, flat0.clone()).unwrap();
                let logits = bb.forward(&x, &ad, &head).unwrap();
                crate::numerics::cross_entropy(&logits, &labels).unwrap()
            };

            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let hv = head.bind(&mut tape, false);
            let t0 = tape.leaf(
                adapters[0]
                    .flat()
                    .clone()
                    .reshape(vec![1, cfg.adapter_len()])
                    .unwrap(),
            );
            let t1 = tape.constant(
                adapters[1]
                    .flat()
                    .clone()
                    .reshape(vec![1, cfg.adapter_len()])
                    .unwrap(),
            );
            let out = bb
                .forward_on_tape(&mut tape, xv, &hv, &mut |_, l, _| {
                    Ok(if l == 0 { t0 } else { t1 })
                })
                .unwrap();
            let loss = tape.cross_entropy(out.logits, &labels).unwrap();
            let g = tape.backward(loss).unwrap();
            let analytic = g
                .wrt(t0)
                .unwrap()
                .clone()
                .reshape(vec![cfg.adapter_len()])
                .unwrap();
            let fd = central_difference(loss_at, adapters[0].flat(), DEFAULT_STEP);
            let err = relative_error(&analytic, &fd, RELATIVE_FLOOR);
            assert!(err < 1e-4, "seq {seq}: rel err {err}");
        }
    }

    /// Plain-loop forward with materialized effective weights, for `seq_len = 1`.
    fn reference_forward(
        bb: &Backbone,
        x: &Tensor,
        head: &Head,
        adapters: &[Option<AdapterParts>],
    ) -> Tensor {
        let cfg = &bb.config;
        assert_eq!(cfg.seq_len, 1);
        let w = &bb.weights;
        let matvec = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..m.rows())
                .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let ln = |v: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            v.iter()
                .enumerate()
                .map(|(i, x)| (x - mean) / (var + LN_EPS).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        };
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let mut rows = Vec::new();
        for i in 0..x.rows() {
            let mut h = add(&matvec(&w.embed_w, x.row(i)), w.embed_b.data());
            for (l, lw) in w.layers.iter().enumerate() {
                let w_v = match &adapters[l] {
                    Some(p) => apply_adapter(&lw.w_v, &p.a_v, &p.b_v, cfg.lora_scaling()).unwrap(),
                    None => lw.w_v.clone(),
                };
                let a = ln(&h, &lw.ln1_gain, &lw.ln1_bias);
                // one token: attention returns the value projection
                let v = matvec(&w_v, &a);
                h = add(&h, &matvec(&lw.w_o, &v));
                let m = ln(&h, &lw.ln2_gain, &lw.ln2_bias);
                let f: Vec<f64> = add(&matvec(&lw.w_ff1, &m), lw.b_ff1.data())
                    .iter()
                    .map(|x| x.tanh())
                    .collect();
                h = add(&h, &add(&matvec(&lw.w_ff2, &f), lw.b_ff2.data()));
            }
            let z = ln(&h, &w.final_gain, &w.final_bias);
            let wt = head.weight.transpose().unwrap();
            rows.push(add(&matvec(&wt, &z), head.bias.data()));
        }
        Tensor::from_rows(&rows).unwrap()
    }
}
