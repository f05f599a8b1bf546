//! Fast invariant checks runnable from the command line.

use crate::backbone::AdapterVector;
use crate::continual::{select_rank, GradientSubspace};
use crate::error::Result;
use crate::harness::checkpoint::{decode, encode, Checkpoint};
use crate::memory::{MemoryUnit, SeparationKind};
use crate::numerics::gradcheck::{
    central_difference, relative_error, DEFAULT_STEP, RELATIVE_FLOOR,
};
use crate::numerics::{softmax, Tape, Tensor};
use crate::pipeline::{adaptation, ModelState, RunProgress, TrainConfig};
use crate::retrieval::Trainable;
use crate::rng::{gaussian_vec, rng_for};
use crate::tasks::{make_domain_blobs, BlobSpec};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check("softmax normalization", || {
            let s = softmax(&Tensor::vector(vec![1000.0, 0.0, -3.0]));
            Ok((
                (s.sum() - 1.0).abs() < 1e-15 && s.is_finite(),
                format!("sum {}", s.sum()),
            ))
        }),
        check("memory read matches direct weighted sum", || {
            let mut worst = 0.0f64;
            for seed in 0..20u64 {
                let mut rng = rng_for(seed, "selftest-read", &[]);
                let mut m = MemoryUnit::new(0, 4, 1, 2, SeparationKind::Softmax { beta: 1.0 });
                let mut keys = Vec::new();
                let mut vals = Vec::new();
                for _ in 0..5 {
                    let k = gaussian_vec(&mut rng, 4, 1.0);
                    let v = gaussian_vec(&mut rng, 8, 1.0);
                    m.write(
                        &Tensor::vector(k.clone()),
                        &AdapterVector::new(0, 1, 2, Tensor::vector(v.clone()))?,
                    )?;
                    keys.push(k);
                    vals.push(v);
                }
                let q = gaussian_vec(&mut rng, 4, 1.0);
                let s: Vec<f64> = keys
                    .iter()
                    .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let (out, _) = m.read(&Tensor::vector(q))?;
                for (i, &o) in out.flat().data().iter().enumerate() {
                    let expect: f64 = vals.iter().zip(&e).map(|(v, w)| v[i] * w / z).sum();
                    worst = worst.max((o - expect).abs());
                }
            }
            Ok((worst < 1e-12, format!("max abs diff {worst:e}")))
        }),
        check("projection removes protected component", || {
            let mut worst = 0.0f64;
            for seed in 0..20u64 {
                let mut rng = rng_for(seed, "selftest-proj", &[]);
                let mut s = GradientSubspace::new("g", 6, 0.7)?;
                let grads: Vec<Vec<f64>> =
                    (0..10).map(|_| gaussian_vec(&mut rng, 6, 1.0)).collect();
                s.accumulate(&grads)?;
                s.update_basis()?;
                let g = gaussian_vec(&mut rng, 6, 1.0);
                let p = s.project(&g)?;
                let u = s.basis().expect("non-empty basis");
                for c in 0..u.cols() {
                    let dot: f64 = (0..6).map(|r| u.at(r, c) * p[r]).sum();
                    worst = worst.max(dot.abs());
                }
            }
            Ok((worst < 1e-8, format!("max |Uᵀg'| {worst:e}")))
        }),
        check("energy rank selection", || {
            let k = select_rank(&[4.0, 3.0, 2.0, 1.0], 0.7)?;
            Ok((k == 2, format!("k = {k}")))
        }),
        check(
            "trained model: gradients, inference and checkpoint",
            trained_model_checks,
        ),
    ]
}

fn trained_model_checks() -> Result<(bool, String)> {
    let mut cfg = TrainConfig {
        adapt_epochs: 1,
        ..TrainConfig::default()
    };
    cfg.model.model_dim = 8;
    cfg.model.mlp_dim = 16;
    cfg.data.blobs = BlobSpec {
        num_classes: 3,
        num_domains: 2,
        samples_per_class: 10,
        input_dim: 8,
        ..BlobSpec::default()
    };
    let domains = make_domain_blobs(&cfg.data.blobs, 0)?;
    let mut state = ModelState::init(&cfg, 8, 3)?;
    adaptation(&mut state, &domains[0], &cfg, 0)?;
    adaptation(&mut state, &domains[1], &cfg, 1)?;
    let (x, y) = domains[0].gather(&[0, 11, 25]);

    let model = state.model();
    let mut tape = Tape::new();
    let bound = model.bind(
        &mut tape,
        Trainable {
            keys: true,
            queries: false,
            head: false,
        },
    )?;
    let xv = tape.constant(x.clone());
    let out = model.forward_on_tape(&mut tape, &bound, xv)?;
    let loss = tape.cross_entropy(out.logits, &y)?;
    let g = tape.backward(loss)?;
    let analytic = g
        .wrt(bound.keys[0])
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[2, 8]));
    let k0 = state.memories[0].key_rows()?;
    let fd = central_difference(
        |k| {
            let mut s = state.clone();
            s.memories[0].set_key_rows(k).expect("shape");
            let logits = s.model().inference_forward(&x).expect("forward");
            crate::numerics::cross_entropy(&logits, &y).expect("labels")
        },
        &k0,
        DEFAULT_STEP,
    );
    let grad_err = relative_error(&analytic, &fd, RELATIVE_FLOOR);

    let (modulated, _) = model.modulated_forward(&x, Trainable::default(), false)?;
    let inference = model.inference_forward(&x)?;
    let same = modulated.bitwise_eq(&inference);

    let ckpt = Checkpoint {
        config: cfg,
        state: state.clone(),
        progress: RunProgress::default(),
    };
    let back = decode(&encode(&ckpt)?)?;
    let round_trip = back == ckpt;

    Ok((
        grad_err < 1e-3 && same && round_trip,
        format!("key grad rel err {grad_err:e}, inference bitwise {same}, checkpoint round trip {round_trip}"),
    ))
}
