use mira_core::backbone::{AdapterVector, Backbone, BackboneConfig, Head};
use mira_core::memory::{MemoryUnit, SeparationKind};
use mira_core::numerics::{grad_records, Tensor};
use mira_core::retrieval::{QueryKind, QueryModule, RetrievalModel};
use mira_core::rng::{gaussian_vec, rng_for};

struct Fixture {
    cfg: BackboneConfig,
    backbone: Backbone,
    memories: Vec<MemoryUnit>,
    queries: Vec<QueryModule>,
    head: Head,
}

fn fixture(kind: QueryKind, sep: SeparationKind, zero_values: bool) -> Fixture {
    let cfg = BackboneConfig {
        model_dim: 8,
        input_dim: 6,
        num_classes: 4,
        mlp_dim: 16,
        ..BackboneConfig::default()
    };
    let mut rng = rng_for(11, "retrieval-fixture", &[]);
    let backbone = Backbone::init(cfg.clone(), 3).unwrap();
    let head = Head::init(&cfg, &mut rng);
    let mut memories = Vec::new();
    let mut queries = Vec::new();
    for l in 0..cfg.num_layers {
        let mut mem = MemoryUnit::new(l, cfg.model_dim, cfg.lora_rank, cfg.model_dim, sep);
        for _ in 0..4 {
            let theta = if zero_values {
                AdapterVector::zeros(&cfg, l)
            } else {
                AdapterVector::init(&cfg, l, &mut rng)
            };
            mem.write(
                &Tensor::vector(gaussian_vec(&mut rng, cfg.model_dim, 0.5)),
                &theta,
            )
            .unwrap();
        }
        memories.push(mem);
        queries.push(QueryModule::new(kind, l, cfg.model_dim, cfg.model_dim, &mut rng).unwrap());
    }
    Fixture {
        cfg,
        backbone,
        memories,
        queries,
        head,
    }
}

impl Fixture {
    fn model(&self) -> RetrievalModel<'_> {
        RetrievalModel {
            backbone: &self.backbone,
            memories: &self.memories,
            queries: &self.queries,
            head: &self.head,
        }
    }
}

#[test]
fn zero_adapters_reproduce_the_frozen_backbone() {
    let f = fixture(QueryKind::Mlp3, SeparationKind::Softmax { beta: 1.0 }, true);
    let x = Tensor::matrix(5, 6, gaussian_vec(&mut rng_for(0, "x", &[]), 30, 1.0)).unwrap();
    let zeros: Vec<AdapterVector> = (0..f.cfg.num_layers)
        .map(|l| AdapterVector::zeros(&f.cfg, l))
        .collect();
    let frozen = f.backbone.forward(&x, &zeros, &f.head).unwrap();
    let modulated = f.model().inference_forward(&x).unwrap();
    assert!(frozen.max_abs_diff(&modulated) < 1e-12);
}

#[test]
fn softmax_reads_are_never_degenerate() {
    for kind in QueryKind::ALL {
        let f = fixture(kind, SeparationKind::Softmax { beta: 1.0 }, false);
        let x = Tensor::matrix(32, 6, gaussian_vec(&mut rng_for(1, "x", &[]), 192, 3.0)).unwrap();
        let trace = f.model().inference_trace(&x).unwrap();
        for layer in &trace.layers {
            for w in &layer.weights {
                assert!(!w.degenerate);
                let total: f64 = w.weights.data().iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(w.weights.data().iter().all(|&v| v > 0.0));
            }
        }
    }
}

#[test]
fn inference_is_pure() {
    let f = fixture(QueryKind::Linear, SeparationKind::Tanh, false);
    let x = Tensor::matrix(2, 6, gaussian_vec(&mut rng_for(2, "x", &[]), 12, 1.0)).unwrap();
    let keys = f
        .memories
        .iter()
        .map(MemoryUnit::keys_checksum)
        .collect::<Vec<_>>();
    let values = f
        .memories
        .iter()
        .map(MemoryUnit::values_checksum)
        .collect::<Vec<_>>();
    let backbone = f.backbone.checksum();
    let records = grad_records();
    let first = f.model().inference_forward(&x).unwrap();
    for _ in 0..10_000 {
        assert!(f.model().inference_forward(&x).unwrap().bitwise_eq(&first));
    }
    assert_eq!(grad_records(), records);
    assert_eq!(
        f.memories
            .iter()
            .map(MemoryUnit::keys_checksum)
            .collect::<Vec<_>>(),
        keys
    );
    assert_eq!(
        f.memories
            .iter()
            .map(MemoryUnit::values_checksum)
            .collect::<Vec<_>>(),
        values
    );
    assert_eq!(f.backbone.checksum(), backbone);
}
