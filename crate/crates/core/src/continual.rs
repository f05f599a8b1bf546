//! Gradient-subspace protection across tasks, plus a generalized Hebbian
//! learner used to cross-check the subspace.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MiraError, Result};
use crate::numerics::Tensor;

pub const DEFAULT_ENERGY: f64 = 0.7;

/// Smallest `k` whose leading eigenvalues hold at least `eps` of the total.
///
/// `eigenvalues` must be sorted in descending order.
pub fn select_rank(eigenvalues: &[f64], eps: f64) -> Result<usize> {
    if eigenvalues.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(MiraError::Contract(
            "eigenvalues must be finite and non-negative".into(),
        ));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(MiraError::Contract("all-zero spectrum".into()));
    }
    let nonzero = eigenvalues.iter().filter(|&&l| l > 0.0).count();
    let mut acc = 0.0;
    for (i, &l) in eigenvalues.iter().enumerate() {
        acc += l;
        // A ratio within rounding of eps counts as reaching it.
        if acc / total >= eps - 1e-12 {
            return Ok((i + 1).min(nonzero));
        }
    }
    Ok(nonzero)
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending value.
pub fn sorted_eigen(sym: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = sym.nrows();
    let eig = SymmetricEigen::try_new(sym.clone(), 1e-14, 10_000)
        .ok_or_else(|| MiraError::Numeric("eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Protected subspace for one parameter group.
///
/// Moments of the current task accumulate until [`update_basis`] folds them
/// into the summed moments of all finished tasks and re-derives the basis.
///
/// [`update_basis`]: GradientSubspace::update_basis
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSubspace {
    pub group: String,
    pub energy: f64,
    dim: usize,
    /// Columns of `U`, each of length `dim`.
    basis: Vec<Vec<f64>>,
    /// Row-major `dim × dim` sum of `g gᵀ` for the current task.
    current: Vec<f64>,
    current_count: usize,
    /// Row-major sum of trace-normalized second moments of finished tasks,
    /// so every task carries equal weight regardless of gradient scale.
    summed: Vec<f64>,
    tasks: usize,
}

impl GradientSubspace {
    pub fn new(group: impl Into<String>, dim: usize, energy: f64) -> Result<Self> {
        if !(energy > 0.0 && energy < 1.0) {
            return Err(MiraError::Config(format!(
                "energy budget {energy} outside (0, 1)"
            )));
        }
        Ok(Self {
            group: group.into(),
            energy,
            dim,
            basis: Vec::new(),
            current: vec![0.0; dim * dim],
            current_count: 0,
            summed: vec![0.0; dim * dim],
            tasks: 0,
        })
    }

    /// Rebuilds a subspace from stored state. `basis` is `dim × k` and the
    /// moments are `dim × dim`.
    pub fn restore(
        group: String,
        energy: f64,
        basis: Option<&Tensor>,
        current: &Tensor,
        current_count: usize,
        summed: &Tensor,
        tasks: usize,
    ) -> Result<Self> {
        let dim = summed.rows();
        let mut s = Self::new(group, dim, energy)?;
        summed.expect_shape(&[dim, dim], "summed moment")?;
        current.expect_shape(&[dim, dim], "current moment")?;
        if let Some(u) = basis {
            u.expect_shape(&[dim, u.cols()], "basis")?;
            s.basis = (0..u.cols())
                .map(|c| (0..dim).map(|r| u.at(r, c)).collect())
                .collect();
        }
        s.current = current.data().to_vec();
        s.summed = summed.data().to_vec();
        s.current_count = current_count;
        s.tasks = tasks;
        Ok(s)
    }

    pub fn current_count(&self) -> usize {
        self.current_count
    }

    /// Raw current-task sum of outer products (not normalized).
    pub fn current_sum(&self) -> Tensor {
        Tensor::matrix(self.dim, self.dim, self.current.clone()).expect("square")
    }

    pub fn summed_moment(&self) -> Tensor {
        Tensor::matrix(self.dim, self.dim, self.summed.clone()).expect("square")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn tasks_folded(&self) -> usize {
        self.tasks
    }

    /// `U` as a `dim × k` tensor, or `None` before the first update.
    pub fn basis(&self) -> Option<Tensor> {
        let k = self.basis.len();
        if k == 0 {
            return None;
        }
        let data = (0..self.dim)
            .flat_map(|r| self.basis.iter().map(move |c| c[r]))
            .collect();
        Some(Tensor::matrix(self.dim, k, data).expect("non-empty basis"))
    }

    /// Adds gradients to the current task's moment.
    pub fn accumulate(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.is_empty() {
            return Err(MiraError::Contract("no gradients to accumulate".into()));
        }
        for g in grads {
            if g.len() != self.dim {
                return Err(MiraError::Shape(format!(
                    "gradient of length {} for subspace of dim {}",
                    g.len(),
                    self.dim
                )));
            }
        }
        let d = self.dim;
        for g in grads {
            for (r, &gr) in g.iter().enumerate() {
                if gr == 0.0 {
                    continue;
                }
                let row = &mut self.current[r * d..(r + 1) * d];
                for (dst, &gc) in row.iter_mut().zip(g) {
                    *dst += gr * gc;
                }
            }
        }
        self.current_count += grads.len();
        Ok(())
    }

    /// Empirical second moment `(1/N) Σ g gᵀ` of the current task.
    pub fn second_moment(&self) -> Tensor {
        let scale = if self.current_count == 0 {
            0.0
        } else {
            1.0 / self.current_count as f64
        };
        Tensor::matrix(
            self.dim,
            self.dim,
            self.current.iter().map(|v| v * scale).collect(),
        )
        .expect("square")
    }

    /// Folds the current task into the summed moments and recomputes `U`
    /// as the leading eigenvectors under the energy criterion.
    pub fn update_basis(&mut self) -> Result<()> {
        if self.current_count == 0 {
            return Err(MiraError::Contract(format!(
                "no gradients accumulated for group {}",
                self.group
            )));
        }
        let moment = self.second_moment();
        let trace: f64 = (0..self.dim).map(|i| moment.data()[i * self.dim + i]).sum();
        if trace > 0.0 {
            for (s, m) in self.summed.iter_mut().zip(moment.data()) {
                *s += m / trace;
            }
        }
        self.tasks += 1;
        self.current.fill(0.0);
        self.current_count = 0;

        let d = self.dim;
        let sym = DMatrix::from_fn(d, d, |r, c| {
            0.5 * (self.summed[r * d + c] + self.summed[c * d + r])
        });
        let (values, vectors) = sorted_eigen(&sym)?;
        if values.iter().all(|&v| v == 0.0) {
            self.basis.clear();
            return Ok(());
        }
        let k = select_rank(&values, self.energy)?;
        self.basis = (0..k)
            .map(|c| vectors.column(c).iter().copied().collect())
            .collect();
        Ok(())
    }

    /// `g − U(Uᵀg)`.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.dim {
            return Err(MiraError::Shape(format!(
                "gradient of length {} for subspace of dim {}",
                g.len(),
                self.dim
            )));
        }
        let mut out = g.to_vec();
        for u in &self.basis {
            let c: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
            for (o, &ui) in out.iter_mut().zip(u) {
                *o -= c * ui;
            }
        }
        Ok(out)
    }
}

/// Principal angles between the column spans of `a` and `b` (both `d × k`),
/// ascending. Columns need not be orthonormal.
pub fn principal_angles(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(MiraError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    let svd = (qa.transpose() * qb).svd(false, false);
    let mut angles: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos())
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn orthonormal_columns(t: &Tensor) -> DMatrix<f64> {
    to_dmatrix(t).qr().q()
}

/// Outcome of running the Hebbian learner.
#[derive(Clone, Debug, PartialEq)]
pub enum OjaOutcome {
    Converged { weights: Tensor, sweeps: usize },
    NotConverged { weights: Tensor, last_delta: f64 },
}

impl OjaOutcome {
    pub fn weights(&self) -> &Tensor {
        match self {
            Self::Converged { weights, .. } | Self::NotConverged { weights, .. } => weights,
        }
    }
}

/// Sanger's generalized Hebbian rule applied to the batch moment:
/// `ΔW = η(ΣW − W·UT(WᵀΣW))` with `UT` the upper-triangular part, which
/// drives the columns of `W` to the leading eigenvectors of `Σ` in order.
#[derive(Clone, Debug)]
pub struct HebbianLearner {
    pub weights: Tensor,
    pub step_size: f64,
    /// Step at sweep `t` is `step_size / (1 + decay·t)`.
    pub decay: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl HebbianLearner {
    pub fn new(weights: Tensor) -> Self {
        Self {
            weights,
            step_size: 1e-2,
            decay: 1e-5,
            tolerance: 1e-8,
            max_sweeps: 100_000,
        }
    }

    pub fn oja_converge(&self, grads: &[Vec<f64>]) -> Result<OjaOutcome> {
        if grads.is_empty() {
            return Err(MiraError::Contract(
                "no gradients for the Hebbian learner".into(),
            ));
        }
        let d = self.weights.rows();
        let k = self.weights.cols();
        let mut sigma = DMatrix::<f64>::zeros(d, d);
        for g in grads {
            if g.len() != d {
                return Err(MiraError::Shape(format!(
                    "gradient length {} vs {d}",
                    g.len()
                )));
            }
            let v = DVector::from_column_slice(g);
            sigma += &v * v.transpose();
        }
        sigma /= grads.len() as f64;

        let mut w = to_dmatrix(&self.weights);
        let mut last_delta = f64::INFINITY;
        for t in 0..self.max_sweeps {
            let eta = self.step_size / (1.0 + self.decay * t as f64);
            let sw = &sigma * &w;
            let mut inner = w.transpose() * &sw;
            for r in 0..k {
                for c in 0..r {
                    inner[(r, c)] = 0.0;
                }
            }
            let delta = (sw - &w * inner) * eta;
            w += &delta;
            last_delta = delta.norm();
            if !last_delta.is_finite() {
                return Err(MiraError::Numeric("Hebbian iterate diverged".into()));
            }
            if last_delta < self.tolerance {
                return Ok(OjaOutcome::Converged {
                    weights: from_dmatrix(&w),
                    sweeps: t + 1,
                });
            }
        }
        Ok(OjaOutcome::NotConverged {
            weights: from_dmatrix(&w),
            last_delta,
        })
    }
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)]))
        .collect();
    Tensor::matrix(m.nrows(), m.ncols(), data).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, rng_for};

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn accumulate_examples() {
        let mut s = GradientSubspace::new("g", 2, 0.7).unwrap();
        s.accumulate(&[e(2, 0)]).unwrap();
        assert_eq!(s.second_moment().data(), &[1.0, 0.0, 0.0, 0.0]);
        let mut s = GradientSubspace::new("g", 2, 0.7).unwrap();
        s.accumulate(&[e(2, 0), e(2, 1)]).unwrap();
        assert_eq!(s.second_moment().data(), &[0.5, 0.0, 0.0, 0.5]);
        assert!(matches!(s.accumulate(&[]), Err(MiraError::Contract(_))));
    }

    #[test]
    fn accumulate_matches_outer_product_loop() {
        let mut rng = rng_for(3, "acc", &[]);
        let grads: Vec<Vec<f64>> = (0..50).map(|_| gaussian_vec(&mut rng, 4, 1.0)).collect();
        let mut s = GradientSubspace::new("g", 4, 0.7).unwrap();
        s.accumulate(&grads[..20]).unwrap();
        s.accumulate(&grads[20..]).unwrap();
        let m = s.second_moment();
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for g in &grads {
                    acc += g[r] * g[c];
                }
                assert!((m.at(r, c) - acc / 50.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_rank_examples() {
        assert_eq!(select_rank(&[4.0, 3.0, 2.0, 1.0], 0.7).unwrap(), 2);
        assert_eq!(select_rank(&[4.0, 3.0, 2.0, 0.0], 0.999_999_9).unwrap(), 3);
        for eps in [0.1, 0.5, 0.99] {
            assert_eq!(select_rank(&[1.0, 0.0, 0.0], eps).unwrap(), 1);
        }
        assert!(matches!(
            select_rank(&[0.0, 0.0], 0.7),
            Err(MiraError::Contract(_))
        ));
    }

    #[test]
    fn basis_of_diagonal_moment() {
        let mut s = GradientSubspace::new("g", 4, 0.7).unwrap();
        let grads: Vec<Vec<f64>> = [4.0f64, 3.0, 2.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, l)| e(4, i).into_iter().map(|v| v * (4.0 * l).sqrt()).collect())
            .collect();
        s.accumulate(&grads).unwrap();
        let m = s.second_moment();
        assert_eq!(m.at(0, 0), 4.0);
        s.update_basis().unwrap();
        assert_eq!(s.rank(), 2);
        let u = s.basis().unwrap();
        // span{e1, e2}: rows 2 and 3 vanish.
        for r in 2..4 {
            assert!(u.row(r).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn isotropic_moment_gives_idempotent_projector() {
        let mut s = GradientSubspace::new("g", 3, 0.7).unwrap();
        s.accumulate(&[e(3, 0), e(3, 1), e(3, 2)]).unwrap();
        s.update_basis().unwrap();
        assert_eq!(s.rank(), 3);
        let u = s.basis().unwrap();
        let utu = crate::numerics::matmul(&u.transpose().unwrap(), &u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::identity(3)) < 1e-10);
        let g = vec![0.3, -1.0, 2.0];
        let p = s.project(&g).unwrap();
        let pp = s.project(&p).unwrap();
        for (a, b) in p.iter().zip(&pp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let mut s = GradientSubspace::new("g", 2, 0.5).unwrap();
        assert_eq!(s.project(&[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        s.accumulate(&[e(2, 0)]).unwrap();
        s.update_basis().unwrap();
        let p = s.project(&[3.0, 4.0]).unwrap();
        assert!(p[0].abs() < 1e-15);
        assert_eq!(p[1], 4.0);
    }

    #[test]
    fn tasks_weigh_equally_regardless_of_gradient_scale() {
        let mut s = GradientSubspace::new("g", 3, 0.7).unwrap();
        s.accumulate(&[vec![100.0, 0.0, 0.0]]).unwrap();
        s.update_basis().unwrap();
        s.accumulate(&[vec![0.0, 0.01, 0.0]]).unwrap();
        s.update_basis().unwrap();
        assert_eq!(s.rank(), 2);
        let p = s.project(&[1.0, 1.0, 1.0]).unwrap();
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn oja_rank_one() {
        let learner = HebbianLearner::new(Tensor::matrix(3, 1, vec![0.3, 0.2, -0.1]).unwrap());
        let out = learner.oja_converge(&[e(3, 0)]).unwrap();
        assert!(matches!(out, OjaOutcome::Converged { .. }));
        let w = out.weights();
        assert!((w.data()[0].abs() - 1.0).abs() < 1e-6);
        assert!(w.data()[1].abs() < 1e-6 && w.data()[2].abs() < 1e-6);
    }

    #[test]
    fn oja_full_rank_orders_columns() {
        let grads = vec![vec![2.0 * 2f64.sqrt(), 0.0], vec![0.0, 6f64.sqrt()]];
        let learner = HebbianLearner::new(Tensor::matrix(2, 2, vec![0.5, 0.1, 0.2, 0.6]).unwrap());
        let out = learner.oja_converge(&grads).unwrap();
        let w = out.weights();
        assert!((w.at(0, 0).abs() - 1.0).abs() < 1e-6);
        assert!(w.at(1, 0).abs() < 1e-6);
    }

    #[test]
    fn principal_angles_of_rotated_plane() {
        let a = Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0, 1.0, 0.0]).unwrap();
        let ang = principal_angles(&a, &b).unwrap();
        assert!((ang[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }
}
