//! Two-stage training: adaptation writes freshly trained adapters into the
//! layer memories, consolidation trains only the retrieval side (keys and
//! query modules) so that each sample assembles the right adapter ensemble.

use std::collections::BTreeSet;
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterVector, Backbone, BackboneConfig, Head};
use crate::continual::{GradientSubspace, DEFAULT_ENERGY};
use crate::error::{MiraError, Result};
use crate::harness::metrics::EvalReport;
use crate::memory::{sample_key, MemoryUnit, SeparationKind};
use crate::numerics::{checksum_of, AdamW, OptimizerState, Tape, Tensor, Var};
use crate::retrieval::{QueryKind, QueryModule, RetrievalModel, Trainable};
use crate::rng::{derive_seed, rng_for};
use crate::tasks::{
    build_stream, make_domain_blobs, read_domains_csv, BlobSpec, Setting, SplitSpec, TaskDataset,
    TaskStream,
};

/// Additive logit offset for classes outside the active set.
const MASKED_LOGIT: f64 = -1e9;
/// Share of samples with a degenerate read above which an epoch is flagged.
const DEGENERATE_WARN_RATE: f64 = 0.1;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaMode {
    /// Replicas differ only by initialization.
    #[default]
    Init,
    /// Replica `r` trains on samples `i` with `i mod m = r`.
    Shard,
}

/// How the shared DIL/DG head is trained during adaptation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    TrainEveryTask,
    #[default]
    FirstTaskOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub mlp_dim: usize,
    /// Memory key dimension; defaults to `model_dim`.
    pub key_dim: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 32,
            num_heads: 2,
            seq_len: 1,
            mlp_dim: 64,
            key_dim: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub blobs: BlobSpec,
    pub split: SplitSpec,
    /// Domains from a CSV file instead of generated blobs.
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub setting: Setting,
    pub lora_rank: usize,
    pub lora_alpha: Option<f64>,
    pub adapt_epochs: usize,
    /// Defaults to 2 for continual settings and 10 for DG.
    pub consolidate_epochs: Option<usize>,
    pub lr_adapt: f64,
    pub lr_consolidate: f64,
    pub weight_decay: f64,
    /// Variance of freshly sampled keys.
    pub sigma2: f64,
    /// Divide `sigma2` by the key dimension so initial scores stay O(|q|/√d_k).
    pub scale_sigma2_by_key_dim: bool,
    pub adapters_per_task: usize,
    pub separation: SeparationKind,
    pub query_kind: QueryKind,
    pub dualgpm: bool,
    pub dualgpm_eps: f64,
    pub project_keys: bool,
    pub project_queries: bool,
    pub train_keys: bool,
    pub train_queries: bool,
    pub replica_mode: ReplicaMode,
    pub head_policy: HeadPolicy,
    pub dg_mixed_batches: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Dil,
            lora_rank: 4,
            lora_alpha: None,
            adapt_epochs: 5,
            consolidate_epochs: None,
            lr_adapt: 1e-2,
            lr_consolidate: 1e-2,
            weight_decay: 1e-3,
            sigma2: 1.0,
            scale_sigma2_by_key_dim: true,
            adapters_per_task: 5,
            separation: SeparationKind::default(),
            query_kind: QueryKind::Identity,
            dualgpm: true,
            dualgpm_eps: DEFAULT_ENERGY,
            project_keys: true,
            project_queries: true,
            train_keys: true,
            train_queries: true,
            replica_mode: ReplicaMode::Init,
            head_policy: HeadPolicy::default(),
            dg_mixed_batches: false,
            batch_size: 32,
            seed: 0,
            model: ModelSpec::default(),
            data: DataSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MiraError::Config(msg));
        for (name, v) in [
            ("lr_adapt", self.lr_adapt),
            ("lr_consolidate", self.lr_consolidate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be non-negative".into());
        }
        if self.adapt_epochs == 0 || self.consolidate_epochs() == 0 {
            return bad("epoch counts must be at least 1".into());
        }
        if self.adapters_per_task == 0 || self.batch_size == 0 || self.lora_rank == 0 {
            return bad("adapters_per_task, batch_size and lora_rank must be at least 1".into());
        }
        if !(self.dualgpm_eps > 0.0 && self.dualgpm_eps < 1.0) {
            return bad(format!("dualgpm_eps {} outside (0, 1)", self.dualgpm_eps));
        }
        if let SeparationKind::Softmax { beta } = self.separation {
            if !(beta > 0.0 && beta.is_finite()) {
                return bad("softmax beta must be positive".into());
            }
        }
        if self.query_kind == QueryKind::Identity && self.key_dim() != self.model.model_dim {
            return bad("identity query module needs key_dim = model_dim".into());
        }
        Ok(())
    }

    pub fn consolidate_epochs(&self) -> usize {
        self.consolidate_epochs
            .unwrap_or(if self.setting == Setting::Dg { 10 } else { 2 })
    }

    pub fn key_dim(&self) -> usize {
        self.model.key_dim.unwrap_or(self.model.model_dim)
    }

    pub fn key_variance(&self) -> f64 {
        if self.scale_sigma2_by_key_dim {
            self.sigma2 / self.key_dim() as f64
        } else {
            self.sigma2
        }
    }

    pub fn backbone_config(&self, input_dim: usize, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            num_layers: self.model.num_layers,
            model_dim: self.model.model_dim,
            num_heads: self.model.num_heads,
            input_dim,
            num_classes,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            seq_len: self.model.seq_len,
            mlp_dim: self.model.mlp_dim,
        }
    }

    /// The task stream described by `data`, a pure function of the config.
    pub fn load_stream(&self) -> Result<TaskStream> {
        let domains = match &self.data.csv {
            Some(path) => read_domains_csv(path)?,
            None => make_domain_blobs(&self.data.blobs, self.seed)?,
        };
        build_stream(self.setting, &domains, &self.data.split, self.seed)
    }
}

/// Everything a run trains or protects.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone,
    pub memories: Vec<MemoryUnit>,
    pub queries: Vec<QueryModule>,
    pub head: Head,
    /// Key groups `keys/ℓ` live in `R^{d_k}` and treat every key row of a
    /// gradient as one sample; parametric query modules add `query/ℓ`.
    pub subspaces: Vec<GradientSubspace>,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        let bc = cfg.backbone_config(input_dim, num_classes);
        let backbone = Backbone::init(bc.clone(), derive_seed(cfg.seed, "backbone", &[]))?;
        let head = Head::init(&bc, &mut rng_for(cfg.seed, "head", &[]));
        let memories = (0..bc.num_layers)
            .map(|l| MemoryUnit::new(l, cfg.key_dim(), bc.lora_rank, bc.model_dim, cfg.separation))
            .collect();
        let queries = (0..bc.num_layers)
            .map(|l| {
                let mut rng = rng_for(cfg.seed, "query", &[l as u64]);
                QueryModule::new(cfg.query_kind, l, bc.model_dim, cfg.key_dim(), &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            backbone,
            memories,
            queries,
            head,
            subspaces: Vec::new(),
        })
    }

    pub fn model(&self) -> RetrievalModel<'_> {
        RetrievalModel {
            backbone: &self.backbone,
            memories: &self.memories,
            queries: &self.queries,
            head: &self.head,
        }
    }

    pub fn theta_checksum(&self) -> String {
        let values: Vec<Tensor> = self
            .memories
            .iter()
            .filter_map(|m| m.value_rows().ok())
            .collect();
        checksum_of(&values)
    }

    pub fn keys_checksum(&self) -> String {
        let keys: Vec<Tensor> = self
            .memories
            .iter()
            .filter_map(|m| m.key_rows().ok())
            .collect();
        checksum_of(&keys)
    }

    pub fn queries_checksum(&self) -> String {
        checksum_of(self.queries.iter().flat_map(|q| q.params()))
    }

    pub fn memory_sizes(&self) -> Vec<usize> {
        self.memories.iter().map(MemoryUnit::len).collect()
    }

    fn subspace_mut(&mut self, group: &str) -> Option<&mut GradientSubspace> {
        self.subspaces.iter_mut().find(|s| s.group == group)
    }

    /// Creates missing groups.
    fn prepare_subspaces(&mut self, eps: f64) -> Result<()> {
        for l in 0..self.memories.len() {
            let key_dim = self.memories[l].key_dim();
            let group = format!("keys/{l}");
            if self.subspace_mut(&group).is_none() {
                self.subspaces
                    .push(GradientSubspace::new(group, key_dim, eps)?);
            }
            let q_len = self.queries[l].param_len();
            let group = format!("query/{l}");
            if q_len > 0 && self.subspace_mut(&group).is_none() {
                self.subspaces
                    .push(GradientSubspace::new(group, q_len, eps)?);
            }
        }
        Ok(())
    }
}

/// Per-layer logit mask row: zero for `allowed`, a large negative offset elsewhere.
fn logit_mask(num_classes: usize, allowed: &BTreeSet<usize>) -> Tensor {
    let data = (0..num_classes)
        .map(|c| {
            if allowed.contains(&c) {
                0.0
            } else {
                MASKED_LOGIT
            }
        })
        .collect();
    Tensor::matrix(1, num_classes, data).expect("non-empty class set")
}

/// Update masks for the head restricted to the classes in `cols`.
fn head_masks(head: &Head, cols: &BTreeSet<usize>) -> (Vec<bool>, Vec<bool>) {
    let c = head.bias.len();
    let bias: Vec<bool> = (0..c).map(|j| cols.contains(&j)).collect();
    let weight = (0..head.weight.len()).map(|i| bias[i % c]).collect();
    (weight, bias)
}

/// Which classes a stage may predict and which head columns it may train.
#[derive(Clone, Debug)]
struct ClassScope {
    logits: Option<Tensor>,
    head_cols: Option<(Vec<bool>, Vec<bool>)>,
}

impl ClassScope {
    fn open() -> Self {
        Self {
            logits: None,
            head_cols: None,
        }
    }

    fn apply(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        match &self.logits {
            Some(mask) => {
                let m = tape.constant(mask.clone());
                tape.add_rows(logits, m)
            }
            None => Ok(logits),
        }
    }
}

fn step_head(
    opt: &AdamW,
    head: &mut Head,
    grads: (Tensor, Tensor),
    states: &mut [OptimizerState; 2],
    scope: &ClassScope,
) -> Result<()> {
    let (mw, mb) = match &scope.head_cols {
        Some((w, b)) => (Some(w.as_slice()), Some(b.as_slice())),
        None => (None, None),
    };
    opt.step_masked(&mut head.weight, &grads.0, &mut states[0], mw)?;
    opt.step_masked(&mut head.bias, &grads.1, &mut states[1], mb)
}

fn take_grad(g: &mut crate::numerics::Gradients, v: Var, like: &Tensor) -> Tensor {
    g.take(v).unwrap_or_else(|| Tensor::zeros(like.shape()))
}

fn head_states(head: &Head) -> [OptimizerState; 2] {
    [
        OptimizerState::for_param(&head.weight),
        OptimizerState::for_param(&head.bias),
    ]
}

fn shuffled(mut idx: Vec<usize>, seed: u64, purpose: &str, indices: &[u64]) -> Vec<usize> {
    idx.shuffle(&mut rng_for(seed, purpose, indices));
    idx
}

/// Trains one adapter per layer (and optionally the head) directly on a
/// dataset. Returns the mean training loss of each epoch.
#[allow(clippy::too_many_arguments)]
fn train_adapters(
    backbone: &Backbone,
    head: &mut Head,
    adapters: &mut [Tensor],
    data: &TaskDataset,
    samples: Vec<usize>,
    cfg: &TrainConfig,
    train_head: bool,
    scope: &ClassScope,
    order_key: &[u64],
) -> Result<Vec<f64>> {
    let opt = AdamW::new(cfg.lr_adapt, cfg.weight_decay);
    let mut states: Vec<OptimizerState> = adapters.iter().map(OptimizerState::for_param).collect();
    let mut h_states = head_states(head);
    let mut losses = Vec::with_capacity(cfg.adapt_epochs);
    for epoch in 0..cfg.adapt_epochs {
        let mut key = order_key.to_vec();
        key.push(epoch as u64);
        let order = shuffled(samples.clone(), cfg.seed, "adapt-order", &key);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(batch);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let av: Vec<Var> = adapters.iter().map(|a| tape.leaf(a.clone())).collect();
            let hv = head.bind(&mut tape, train_head);
            let out = backbone.forward_on_tape(&mut tape, xv, &hv, &mut |_, l, _| Ok(av[l]))?;
            let logits = scope.apply(&mut tape, out.logits)?;
            let loss = tape.cross_entropy(logits, &y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(MiraError::Numeric(format!(
                    "non-finite adaptation loss at epoch {epoch} (keys {order_key:?})"
                )));
            }
            total += value * batch.len() as f64;
            let mut g = tape.backward(loss)?;
            for (l, a) in adapters.iter_mut().enumerate() {
                let ga = take_grad(&mut g, av[l], a);
                opt.step(a, &ga, &mut states[l])?;
            }
            if train_head {
                let gw = take_grad(&mut g, hv.weight, &head.weight);
                let gb = take_grad(&mut g, hv.bias, &head.bias);
                step_head(&opt, head, (gw, gb), &mut h_states, scope)?;
            }
        }
        losses.push(total / samples.len() as f64);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub task: usize,
    /// Per replica, mean training loss per epoch.
    pub epoch_losses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsolidateLog {
    pub task: Option<usize>,
    pub epoch_losses: Vec<f64>,
    /// Samples with at least one degenerate read, per epoch.
    pub degenerate: Vec<usize>,
    pub warnings: Vec<String>,
}

fn scope_for_adaptation(
    cfg: &TrainConfig,
    num_classes: usize,
    current: &BTreeSet<usize>,
) -> ClassScope {
    if cfg.setting != Setting::Cil {
        return ClassScope::open();
    }
    ClassScope {
        logits: Some(logit_mask(num_classes, current)),
        head_cols: None,
    }
}

fn head_trainable_in_adaptation(cfg: &TrainConfig, task: usize) -> bool {
    cfg.setting == Setting::Cil || cfg.head_policy == HeadPolicy::TrainEveryTask || task == 0
}

/// Trains `m` fresh adapter sets on `data` and writes each layer's adapter
/// under a freshly sampled key. The head is trained alongside and replaced
/// by the mean of the replica heads.
pub fn adaptation(
    state: &mut ModelState,
    data: &TaskDataset,
    cfg: &TrainConfig,
    task: usize,
) -> Result<AdaptLog> {
    if data.is_empty() {
        return Err(MiraError::Input(format!(
            "task {task} has no training data"
        )));
    }
    let bc = state.backbone.config.clone();
    let m = cfg.adapters_per_task;
    let train_head = head_trainable_in_adaptation(cfg, task);
    let mut scope = scope_for_adaptation(cfg, bc.num_classes, &data.label_set);
    if cfg.setting == Setting::Cil {
        scope.head_cols = Some(head_masks(&state.head, &data.label_set));
    }
    let dv = bc.adapter_len();
    let mut trained = Vec::with_capacity(m);
    let mut heads = Vec::with_capacity(m);
    let mut log = AdaptLog {
        task,
        epoch_losses: Vec::with_capacity(m),
    };
    for r in 0..m {
        let mut rng = rng_for(cfg.seed, "lora", &[task as u64, r as u64]);
        let mut adapters: Vec<Tensor> = (0..bc.num_layers)
            .map(|l| {
                AdapterVector::init(&bc, l, &mut rng)
                    .into_flat()
                    .reshape(vec![1, dv])
            })
            .collect::<Result<_>>()?;
        let samples: Vec<usize> = match cfg.replica_mode {
            ReplicaMode::Init => (0..data.len()).collect(),
            ReplicaMode::Shard => (r..data.len()).step_by(m).collect(),
        };
        if samples.is_empty() {
            return Err(MiraError::Config(format!(
                "replica {r} of task {task} has no samples"
            )));
        }
        let mut head = state.head.clone();
        let losses = train_adapters(
            &state.backbone,
            &mut head,
            &mut adapters,
            data,
            samples,
            cfg,
            train_head,
            &scope,
            &[task as u64, r as u64],
        )?;
        info!("task {task} replica {r}: adaptation losses {losses:?}");
        log.epoch_losses.push(losses);
        trained.push(adapters);
        heads.push(head);
    }
    for (r, adapters) in trained.into_iter().enumerate() {
        for (l, flat) in adapters.into_iter().enumerate() {
            let key = sample_key(
                cfg.key_variance(),
                cfg.key_dim(),
                derive_seed(cfg.seed, "key", &[task as u64, r as u64, l as u64]),
            )?;
            let theta = AdapterVector::new(l, bc.lora_rank, bc.model_dim, flat.reshape(vec![dv])?)?;
            state.memories[l].write(&key, &theta)?;
        }
    }
    if train_head {
        state.head = mean_head(&heads);
    }
    Ok(log)
}

fn mean_head(heads: &[Head]) -> Head {
    if heads.len() == 1 {
        return heads[0].clone();
    }
    let n = heads.len() as f64;
    let mut out = heads[0].clone();
    for h in &heads[1..] {
        out.weight.add_assign(&h.weight).expect("same shape");
        out.bias.add_assign(&h.bias).expect("same shape");
    }
    Head {
        weight: out.weight.map(|v| v / n),
        bias: out.bias.map(|v| v / n),
    }
}

fn gather_many(data: &[&TaskDataset], idx: &[(usize, usize)]) -> (Tensor, Vec<usize>) {
    let d = data[0].input_dim();
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len());
    for &(t, i) in idx {
        x.extend_from_slice(data[t].features.row(i));
        y.push(data[t].labels[i]);
    }
    (Tensor::matrix(idx.len(), d, x).expect("non-empty batch"), y)
}

/// Trains keys and query modules (and, for CIL, the head columns of the
/// current classes) through the memory-modulated forward. Values, the
/// backbone and the rest of the head stay fixed.
///
/// `seen` lists every class introduced so far; logits outside it are masked
/// in CIL.
pub fn consolidation(
    state: &mut ModelState,
    data: &[&TaskDataset],
    cfg: &TrainConfig,
    task: Option<usize>,
    seen: &BTreeSet<usize>,
) -> Result<ConsolidateLog> {
    if data.is_empty() || data.iter().any(|d| d.is_empty()) {
        return Err(MiraError::Input(
            "consolidation needs non-empty data".into(),
        ));
    }
    state.model().validate()?;
    let cil = cfg.setting == Setting::Cil;
    let trainable = Trainable {
        keys: cfg.train_keys,
        queries: cfg.train_queries,
        head: cil,
    };
    let scope = if cil {
        let current: BTreeSet<usize> = data
            .iter()
            .flat_map(|d| d.label_set.iter().copied())
            .collect();
        ClassScope {
            logits: Some(logit_mask(state.head.bias.len(), seen)),
            head_cols: Some(head_masks(&state.head, &current)),
        }
    } else {
        ClassScope::open()
    };
    if cfg.dualgpm {
        state.prepare_subspaces(cfg.dualgpm_eps)?;
    }

    let opt = AdamW::new(cfg.lr_consolidate, cfg.weight_decay);
    let mut key_states: Vec<OptimizerState> = state
        .memories
        .iter()
        .map(|m| m.key_rows().map(|k| OptimizerState::for_param(&k)))
        .collect::<Result<_>>()?;
    let mut query_states: Vec<Vec<OptimizerState>> = state
        .queries
        .iter()
        .map(|q| q.params().iter().map(OptimizerState::for_param).collect())
        .collect();
    let mut h_states = head_states(&state.head);

    let all: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(t, d)| (0..d.len()).map(move |i| (t, i)))
        .collect();
    let order_key = task.map_or(u64::MAX, |t| t as u64);
    let mut log = ConsolidateLog {
        task,
        epoch_losses: Vec::new(),
        degenerate: Vec::new(),
        warnings: Vec::new(),
    };
    for epoch in 0..cfg.consolidate_epochs() {
        let mut order = all.clone();
        order.shuffle(&mut rng_for(
            cfg.seed,
            "consolidate-order",
            &[order_key, epoch as u64],
        ));
        let mut total = 0.0;
        let mut degenerate = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = gather_many(data, batch);
            let step = consolidation_grads(state, x, &y, trainable, &scope)?;
            total += step.loss * batch.len() as f64;
            degenerate += step.degenerate;
            apply_consolidation_step(
                state,
                step,
                cfg,
                &opt,
                &mut key_states,
                &mut query_states,
                &mut h_states,
                &scope,
            )?;
        }
        let rate = degenerate as f64 / all.len() as f64;
        if rate > DEGENERATE_WARN_RATE {
            let msg = format!(
                "consolidation {}epoch {epoch}: {:.1}% of samples had a degenerate retrieval",
                task.map_or(String::new(), |t| format!("of task {t}, ")),
                100.0 * rate
            );
            warn!("{msg}");
            log.warnings.push(msg);
        }
        log.epoch_losses.push(total / all.len() as f64);
        log.degenerate.push(degenerate);
    }
    if cfg.dualgpm {
        for s in &mut state.subspaces {
            if s.current_count() > 0 {
                s.update_basis()?;
            }
        }
    }
    info!("consolidation {task:?}: losses {:?}", log.epoch_losses);
    Ok(log)
}

struct ConsolidationStep {
    loss: f64,
    degenerate: usize,
    keys: Vec<Option<Tensor>>,
    queries: Vec<Option<Vec<Tensor>>>,
    head: Option<(Tensor, Tensor)>,
}

fn consolidation_grads(
    state: &ModelState,
    x: Tensor,
    y: &[usize],
    trainable: Trainable,
    scope: &ClassScope,
) -> Result<ConsolidationStep> {
    let model = state.model();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable)?;
    let xv = tape.constant(x);
    let out = model.forward_on_tape(&mut tape, &bound, xv)?;
    let logits = scope.apply(&mut tape, out.logits)?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(MiraError::Numeric("non-finite consolidation loss".into()));
    }
    let degenerate = out.degenerate_samples();
    let mut g = tape.backward(loss)?;
    let keys = bound
        .keys
        .iter()
        .zip(&state.memories)
        .map(|(&k, m)| {
            trainable.keys.then(|| {
                g.take(k)
                    .unwrap_or_else(|| Tensor::zeros(&[m.len(), m.key_dim()]))
            })
        })
        .collect();
    let queries = bound
        .query_params
        .iter()
        .zip(&state.queries)
        .map(|(vars, q)| {
            (trainable.queries && !vars.is_empty()).then(|| {
                vars.iter()
                    .zip(q.params())
                    .map(|(&v, p)| take_grad(&mut g, v, p))
                    .collect()
            })
        })
        .collect();
    let head = trainable.head.then(|| {
        (
            take_grad(&mut g, bound.head.weight, &state.head.weight),
            take_grad(&mut g, bound.head.bias, &state.head.bias),
        )
    });
    Ok(ConsolidationStep {
        loss: value,
        degenerate,
        keys,
        queries,
        head,
    })
}

/// Records the raw gradient in the group's moment and, if the group already
/// protects a subspace, removes the protected component.
/// Records `samples` in the group's moment and returns them projected when enabled.
fn protect(
    state: &mut ModelState,
    group: &str,
    samples: Vec<Vec<f64>>,
    cfg: &TrainConfig,
    project: bool,
) -> Result<Vec<Vec<f64>>> {
    if !cfg.dualgpm {
        return Ok(samples);
    }
    let s = state
        .subspace_mut(group)
        .ok_or_else(|| MiraError::Contract(format!("missing gradient subspace {group}")))?;
    s.accumulate(&samples)?;
    if project && s.rank() > 0 {
        samples.iter().map(|g| s.project(g)).collect()
    } else {
        Ok(samples)
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_consolidation_step(
    state: &mut ModelState,
    step: ConsolidationStep,
    cfg: &TrainConfig,
    opt: &AdamW,
    key_states: &mut [OptimizerState],
    query_states: &mut [Vec<OptimizerState>],
    h_states: &mut [OptimizerState; 2],
    scope: &ClassScope,
) -> Result<()> {
    for (l, g) in step.keys.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let rows: Vec<Vec<f64>> = (0..g.rows()).map(|i| g.row(i).to_vec()).collect();
        let rows = protect(state, &format!("keys/{l}"), rows, cfg, cfg.project_keys)?;
        let g = Tensor::from_rows(&rows)?;
        let mut k = state.memories[l].key_rows()?;
        opt.step(&mut k, &g, &mut key_states[l])?;
        state.memories[l].set_key_rows(&k)?;
    }
    for (l, g) in step.queries.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let shapes: Vec<Vec<usize>> = g.iter().map(|t| t.shape().to_vec()).collect();
        let flat: Vec<f64> = g.into_iter().flat_map(Tensor::into_data).collect();
        let flat = protect(
            state,
            &format!("query/{l}"),
            vec![flat],
            cfg,
            cfg.project_queries,
        )?
        .remove(0);
        let mut offset = 0;
        for (i, shape) in shapes.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let gi = Tensor::new(shape, flat[offset..offset + n].to_vec())?;
            offset += n;
            opt.step(
                &mut state.queries[l].params_mut()[i],
                &gi,
                &mut query_states[l][i],
            )?;
        }
    }
    if let Some(g) = step.head {
        step_head(opt, &mut state.head, g, h_states, scope)?;
    }
    Ok(())
}

/// Accuracy of the memory-modulated model on `test`, restricted to
/// `allowed` classes when given, and the number of samples with a
/// degenerate read.
pub fn evaluate(
    state: &ModelState,
    test: &TaskDataset,
    allowed: Option<&BTreeSet<usize>>,
) -> Result<(f64, usize)> {
    let model = state.model();
    model.validate()?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let parts: Vec<(usize, usize)> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, y) = test.gather(chunk);
            let mut tape = Tape::inference();
            let bound = model.bind(&mut tape, Trainable::default())?;
            let xv = tape.constant(x);
            let out = model.forward_on_tape(&mut tape, &bound, xv)?;
            let correct = count_correct(tape.value(out.logits), &y, allowed);
            Ok((correct, out.degenerate_samples()))
        })
        .collect::<Result<_>>()?;
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let degenerate = parts.iter().map(|p| p.1).sum();
    Ok((correct as f64 / test.len() as f64, degenerate))
}

fn count_correct(logits: &Tensor, labels: &[usize], allowed: Option<&BTreeSet<usize>>) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i), allowed) == y)
        .count()
}

fn argmax(row: &[f64], allowed: Option<&BTreeSet<usize>>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (c, &v) in row.iter().enumerate() {
        if allowed.is_some_and(|a| !a.contains(&c)) {
            continue;
        }
        if best == usize::MAX || v > best_v {
            best = c;
            best_v = v;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "task", rename_all = "snake_case")]
pub enum Stage {
    Adapt(usize),
    Consolidate(usize),
    /// Joint consolidation over every source task (DG mixed batches).
    ConsolidateAll,
    /// Evaluation after step `i`.
    Evaluate(usize),
}

/// Stage order: per task adapt, consolidate, evaluate for continual
/// settings; all adaptations, then all consolidations, then one evaluation
/// for DG.
pub fn plan(setting: Setting, num_tasks: usize, mixed: bool) -> Vec<Stage> {
    if setting.is_continual() {
        return (0..num_tasks)
            .flat_map(|t| [Stage::Adapt(t), Stage::Consolidate(t), Stage::Evaluate(t)])
            .collect();
    }
    let mut p: Vec<Stage> = (0..num_tasks).map(Stage::Adapt).collect();
    if mixed {
        p.push(Stage::ConsolidateAll);
    } else {
        p.extend((0..num_tasks).map(Stage::Consolidate));
    }
    p.push(Stage::Evaluate(num_tasks.saturating_sub(1)));
    p
}

/// Run bookkeeping that survives checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunProgress {
    pub cursor: usize,
    pub trace: Vec<Stage>,
    /// `accuracy[i][j]`: accuracy on task `j` after step `i` (continual).
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub held_out_accuracy: Option<f64>,
    pub adapt_logs: Vec<AdaptLog>,
    pub consolidate_logs: Vec<ConsolidateLog>,
    pub degenerate_eval: usize,
    pub warnings: Vec<String>,
    /// Training sets that have been consumed and dropped.
    pub released: Vec<usize>,
}

/// Owns the training sets and hands them out only while their task is
/// active. Released sets are dropped and any later request fails.
pub struct DataGuard {
    setting: Setting,
    train: Vec<Option<TaskDataset>>,
    tests: Vec<TaskDataset>,
}

impl DataGuard {
    pub fn new(stream: TaskStream) -> Self {
        Self {
            setting: stream.setting,
            train: stream.tasks.into_iter().map(Some).collect(),
            tests: stream.tests,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.train.len()
    }

    pub fn train(&self, t: usize) -> Result<&TaskDataset> {
        let slot = self
            .train
            .get(t)
            .ok_or_else(|| MiraError::DataAccess(format!("task {t} does not exist")))?;
        let data = slot.as_ref().ok_or_else(|| {
            MiraError::DataAccess(format!("training data of task {t} was already released"))
        })?;
        if self.setting.is_continual() && self.train[..t].iter().any(Option::is_some) {
            return Err(MiraError::DataAccess(format!(
                "task {t} requested before earlier tasks finished"
            )));
        }
        Ok(data)
    }

    pub fn release(&mut self, t: usize) {
        if let Some(slot) = self.train.get_mut(t) {
            *slot = None;
        }
    }

    pub fn test(&self, j: usize) -> &TaskDataset {
        &self.tests[j]
    }
}

/// Executes a run stage by stage so it can stop and resume at stage
/// boundaries.
pub struct Runner {
    pub config: TrainConfig,
    pub state: ModelState,
    pub progress: RunProgress,
    plan: Vec<Stage>,
    data: DataGuard,
    /// Classes of each task, kept after release for CIL masks.
    label_sets: Vec<BTreeSet<usize>>,
}

impl Runner {
    pub fn new(config: TrainConfig, stream: TaskStream) -> Result<Self> {
        config.validate()?;
        let state = ModelState::init(&config, stream.input_dim(), stream.num_classes())?;
        Self::resume(config, state, RunProgress::default(), stream)
    }

    pub fn resume(
        config: TrainConfig,
        state: ModelState,
        progress: RunProgress,
        stream: TaskStream,
    ) -> Result<Self> {
        config.validate()?;
        stream.validate()?;
        if stream.setting != config.setting {
            return Err(MiraError::Config(format!(
                "stream setting {} does not match configured setting {}",
                stream.setting, config.setting
            )));
        }
        let expected_classes = stream.num_classes();
        if state.head.bias.len() != expected_classes
            || state.backbone.config.input_dim != stream.input_dim()
        {
            return Err(MiraError::Config(
                "model dimensions do not match the stream".into(),
            ));
        }
        let plan = plan(config.setting, stream.num_tasks(), config.dg_mixed_batches);
        if progress.cursor > plan.len() {
            return Err(MiraError::Corrupt(
                "run cursor past the end of the plan".into(),
            ));
        }
        let label_sets = stream.tasks.iter().map(|t| t.label_set.clone()).collect();
        let mut data = DataGuard::new(stream);
        for &t in &progress.released {
            data.release(t);
        }
        Ok(Self {
            config,
            state,
            progress,
            plan,
            data,
            label_sets,
        })
    }

    pub fn plan(&self) -> &[Stage] {
        &self.plan
    }

    pub fn data(&self) -> &DataGuard {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.progress.cursor >= self.plan.len()
    }

    pub fn next_stage(&self) -> Option<Stage> {
        self.plan.get(self.progress.cursor).copied()
    }

    fn seen_classes(&self, upto: usize) -> BTreeSet<usize> {
        self.label_sets[..=upto].iter().flatten().copied().collect()
    }

    fn release(&mut self, t: usize) {
        self.data.release(t);
        if !self.progress.released.contains(&t) {
            self.progress.released.push(t);
        }
    }

    /// Executes the next stage.
    pub fn step(&mut self) -> Result<Option<Stage>> {
        let Some(stage) = self.next_stage() else {
            return Ok(None);
        };
        let cfg = self.config.clone();
        match stage {
            Stage::Adapt(t) => {
                let data = self.data.train(t)?;
                let log = adaptation(&mut self.state, data, &cfg, t)?;
                self.progress.adapt_logs.push(log);
            }
            Stage::Consolidate(t) => {
                let seen = self.seen_classes(if cfg.setting.is_continual() {
                    t
                } else {
                    self.label_sets.len() - 1
                });
                let data = self.data.train(t)?;
                let log = consolidation(&mut self.state, &[data], &cfg, Some(t), &seen)?;
                self.progress.warnings.extend(log.warnings.iter().cloned());
                self.progress.consolidate_logs.push(log);
                self.release(t);
            }
            Stage::ConsolidateAll => {
                let n = self.data.num_tasks();
                let seen = self.seen_classes(n - 1);
                let data: Vec<&TaskDataset> =
                    (0..n).map(|t| self.data.train(t)).collect::<Result<_>>()?;
                let log = consolidation(&mut self.state, &data, &cfg, None, &seen)?;
                self.progress.warnings.extend(log.warnings.iter().cloned());
                self.progress.consolidate_logs.push(log);
                for t in 0..n {
                    self.release(t);
                }
            }
            Stage::Evaluate(i) => self.evaluate_step(i)?,
        }
        self.progress.trace.push(stage);
        self.progress.cursor += 1;
        Ok(Some(stage))
    }

    fn evaluate_step(&mut self, i: usize) -> Result<()> {
        if !self.config.setting.is_continual() {
            let (acc, degenerate) = evaluate(&self.state, self.data.test(0), None)?;
            self.progress.held_out_accuracy = Some(acc);
            self.progress.degenerate_eval += degenerate;
            return Ok(());
        }
        let t_total = self.data.num_tasks();
        let allowed = (self.config.setting == Setting::Cil).then(|| self.seen_classes(i));
        let mut row = vec![None; t_total];
        for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
            let (acc, degenerate) = evaluate(&self.state, self.data.test(j), allowed.as_ref())?;
            *slot = Some(acc);
            self.progress.degenerate_eval += degenerate;
        }
        info!("step {i}: accuracies {row:?}");
        self.progress.accuracy.push(row);
        Ok(())
    }

    /// Runs stages until `stop` returns true for a just-finished stage, or
    /// the plan ends.
    pub fn run_until(&mut self, mut stop: impl FnMut(Stage, Option<Stage>) -> bool) -> Result<()> {
        while let Some(stage) = self.step()? {
            if stop(stage, self.next_stage()) {
                break;
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<(ModelState, EvalReport)> {
        self.run_until(|_, _| false)?;
        let report = self.report()?;
        Ok((self.state, report))
    }

    pub fn report(&self) -> Result<EvalReport> {
        EvalReport::from_run(&self.config, &self.progress)
    }
}

/// Full run: the continual loop or the DG two-phase schedule.
pub fn run_mira(stream: TaskStream, cfg: &TrainConfig) -> Result<(ModelState, EvalReport)> {
    Runner::new(cfg.clone(), stream)?.run()
}

/// Naive sequential fine-tuning: one adapter set and the head trained on
/// each task in turn, no memory.
pub fn run_finetune(stream: TaskStream, cfg: &TrainConfig) -> Result<EvalReport> {
    cfg.validate()?;
    stream.validate()?;
    let mut state = ModelState::init(cfg, stream.input_dim(), stream.num_classes())?;
    let bc = state.backbone.config.clone();
    let dv = bc.adapter_len();
    let mut rng = rng_for(cfg.seed, "lora", &[0, 0]);
    let mut adapters: Vec<Tensor> = (0..bc.num_layers)
        .map(|l| {
            AdapterVector::init(&bc, l, &mut rng)
                .into_flat()
                .reshape(vec![1, dv])
        })
        .collect::<Result<_>>()?;
    let mut progress = RunProgress::default();
    let t_total = stream.num_tasks();
    let mut seen = BTreeSet::new();
    for (t, data) in stream.tasks.iter().enumerate() {
        seen.extend(data.label_set.iter().copied());
        let mut scope = scope_for_adaptation(cfg, bc.num_classes, &data.label_set);
        if cfg.setting == Setting::Cil {
            scope.head_cols = Some(head_masks(&state.head, &data.label_set));
        }
        let samples = (0..data.len()).collect();
        let losses = train_adapters(
            &state.backbone,
            &mut state.head,
            &mut adapters,
            data,
            samples,
            cfg,
            true,
            &scope,
            &[t as u64, 0],
        )?;
        progress.adapt_logs.push(AdaptLog {
            task: t,
            epoch_losses: vec![losses],
        });
        let fixed: Vec<AdapterVector> = adapters
            .iter()
            .enumerate()
            .map(|(l, a)| {
                AdapterVector::new(l, bc.lora_rank, bc.model_dim, a.clone().reshape(vec![dv])?)
            })
            .collect::<Result<_>>()?;
        let allowed = (cfg.setting == Setting::Cil).then_some(&seen);
        let fixed_acc = |test: &TaskDataset| -> Result<f64> {
            let idx: Vec<usize> = (0..test.len()).collect();
            let correct: usize = idx
                .par_chunks(EVAL_CHUNK)
                .map(|chunk| {
                    let (x, y) = test.gather(chunk);
                    let logits = state.backbone.forward(&x, &fixed, &state.head)?;
                    Ok(count_correct(&logits, &y, allowed))
                })
                .collect::<Result<Vec<usize>>>()?
                .into_iter()
                .sum();
            Ok(correct as f64 / test.len() as f64)
        };
        if cfg.setting.is_continual() {
            let mut row = vec![None; t_total];
            for (j, slot) in row.iter_mut().enumerate().take(t + 1) {
                *slot = Some(fixed_acc(&stream.tests[j])?);
            }
            progress.accuracy.push(row);
        } else if t + 1 == t_total {
            progress.held_out_accuracy = Some(fixed_acc(&stream.tests[0])?);
        }
        progress.trace.push(Stage::Adapt(t));
    }
    progress.cursor = progress.trace.len();
    EvalReport::from_run(cfg, &progress)
}
