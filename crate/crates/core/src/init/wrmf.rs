//! Weighted regularized matrix factorization of the binary playlist-song
//! occurrence matrix, solved by alternating least squares.
//!
//! Minimizes `Σ_{u,i} c_ui (p_ui − x_uᵀ y_i)² + λ (Σ‖x_u‖² + Σ‖y_i‖²)` with
//! `p_ui ∈ {0, 1}` and `c_ui = 1 + confidence_alpha · p_ui`. Each half-sweep
//! solves the regularized normal equations of every row exactly, so the
//! objective never increases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RtaError};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WrmfConfig {
    pub dim: usize,
    pub confidence_alpha: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub rng_seed: u64,
}

impl Default for WrmfConfig {
    fn default() -> Self {
        WrmfConfig {
            dim: 128,
            confidence_alpha: 10.0,
            lambda: 0.1,
            iterations: 15,
            rng_seed: 0,
        }
    }
}

impl WrmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(RtaError::Config("WRMF dimension must be ≥ 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(RtaError::Config(format!("WRMF lambda must be > 0, got {}", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(RtaError::Config("WRMF needs at least one ALS sweep".into()));
        }
        if !(self.confidence_alpha >= 0.0) {
            return Err(RtaError::Config("WRMF confidence_alpha must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrmfFactors {
    /// `K × D` playlist factors.
    pub playlist_vectors: Tensor,
    /// `N × D` song factors.
    pub song_vectors: Tensor,
    /// Objective after each full sweep.
    pub objective_history: Vec<f64>,
}

/// Binary occurrence matrix stored both row- and column-wise.
#[derive(Debug, Clone)]
pub struct Occurrences {
    pub n_rows: usize,
    pub n_cols: usize,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
}

impl Occurrences {
    /// Builds from row lists; duplicates within a row collapse.
    pub fn new(n_cols: usize, rows: impl IntoIterator<Item = Vec<usize>>) -> Result<Self> {
        let mut rs: Vec<Vec<usize>> = Vec::new();
        let mut cols = vec![Vec::new(); n_cols];
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            if let Some(&c) = r.iter().find(|&&c| c >= n_cols) {
                return Err(RtaError::UnknownSong(c));
            }
            for &c in &r {
                cols[c].push(rs.len());
            }
            rs.push(r);
        }
        Ok(Occurrences {
            n_rows: rs.len(),
            n_cols,
            rows: rs,
            cols,
        })
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }
}

fn gram(factors: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(dim, dim);
    for f in factors {
        g.ger(1.0, f, f, 1.0);
    }
    g
}

/// Solves every row of one side given the fixed other side.
fn solve_side(
    observed: &[Vec<usize>],
    fixed: &[DVector<f64>],
    dim: usize,
    alpha: f64,
    lambda: f64,
) -> Result<Vec<DVector<f64>>> {
    let base = gram(fixed, dim) + DMatrix::identity(dim, dim) * lambda;
    observed
        .par_iter()
        .map(|obs| {
            if obs.is_empty() {
                return Ok(DVector::zeros(dim));
            }
            let mut a = base.clone();
            let mut b = DVector::zeros(dim);
            for &j in obs {
                a.ger(alpha, &fixed[j], &fixed[j], 1.0);
                b.axpy(1.0 + alpha, &fixed[j], 1.0);
            }
            let chol = a
                .cholesky()
                .ok_or_else(|| RtaError::Internal("regularized normal equations are not positive definite".into()))?;
            Ok(chol.solve(&b))
        })
        .collect()
}

/// Objective value via the Gram-matrix identity (no dense `K × N` pass).
fn objective(occ: &Occurrences, xs: &[DVector<f64>], ys: &[DVector<f64>], alpha: f64, lambda: f64) -> f64 {
    let dim = xs.first().or(ys.first()).map_or(0, |v| v.len());
    let gy = gram(ys, dim);
    let mut total = 0.0;
    for (u, x) in xs.iter().enumerate() {
        // every cell contributes s² with unit confidence ...
        total += (x.transpose() * &gy * x)[(0, 0)];
        // ... observed cells are corrected to (1 + α)(1 − s)²
        for &i in occ.row(u) {
            let s = x.dot(&ys[i]);
            total += (1.0 + alpha) * (1.0 - s).powi(2) - s * s;
        }
    }
    let reg: f64 = xs.iter().chain(ys).map(|v| v.norm_squared()).sum();
    total + lambda * reg
}

fn to_tensor(vs: &[DVector<f64>], dim: usize) -> Tensor {
    let data = vs.iter().flat_map(|v| v.iter().map(|&x| x as f32)).collect();
    Tensor::matrix(vs.len(), dim, data).expect("factor shape")
}

pub fn wrmf_factorize(occ: &Occurrences, config: &WrmfConfig) -> Result<WrmfFactors> {
    config.validate()?;
    if occ.nnz() == 0 {
        return Err(RtaError::Domain("WRMF needs a nonempty occurrence matrix".into()));
    }
    let dim = config.dim;
    let mut rng = Rng::seed_from(config.rng_seed);
    let scale = 0.1 / (dim as f32).sqrt();
    let mut ys: Vec<DVector<f64>> = (0..occ.n_cols)
        .map(|_| DVector::from_fn(dim, |_, _| (rng.normal() * scale) as f64))
        .collect();
    let mut xs: Vec<DVector<f64>> = vec![DVector::zeros(dim); occ.n_rows];
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        xs = solve_side(&occ.rows, &ys, dim, config.confidence_alpha, config.lambda)?;
        ys = solve_side(&occ.cols, &xs, dim, config.confidence_alpha, config.lambda)?;
        history.push(objective(occ, &xs, &ys, config.confidence_alpha, config.lambda));
    }
    Ok(WrmfFactors {
        playlist_vectors: to_tensor(&xs, dim),
        song_vectors: to_tensor(&ys, dim),
        objective_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    /// Direct evaluation over every cell of the dense matrix.
    fn brute_objective(occ: &Occurrences, f: &WrmfFactors, alpha: f64, lambda: f64) -> f64 {
        let mut total = 0.0;
        for u in 0..occ.n_rows {
            for i in 0..occ.n_cols {
                let p = if occ.row(u).contains(&i) { 1.0 } else { 0.0 };
                let c = 1.0 + alpha * p;
                let s: f64 = f
                    .playlist_vectors
                    .row(u)
                    .iter()
                    .zip(f.song_vectors.row(i))
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                total += c * (p - s).powi(2);
            }
        }
        let reg: f64 = f
            .playlist_vectors
            .data()
            .iter()
            .chain(f.song_vectors.data())
            .map(|v| (*v as f64).powi(2))
            .sum();
        total + lambda * reg
    }

    fn random_occurrences(rows: usize, cols: usize, density: f32, seed: u64) -> Occurrences {
        let mut rng = Rng::seed_from(seed);
        let rs: Vec<Vec<usize>> = (0..rows)
            .map(|_| (0..cols).filter(|_| rng.uniform() < density).collect())
            .collect();
        Occurrences::new(cols, rs).unwrap()
    }

    #[test]
    fn objective_is_nonincreasing_on_random_matrix() {
        let occ = random_occurrences(50, 80, 0.1, 4);
        let cfg = WrmfConfig {
            dim: 8,
            iterations: 5,
            ..Default::default()
        };
        let f = wrmf_factorize(&occ, &cfg).unwrap();
        for w in f.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", f.objective_history);
        }
        assert!(f.objective_history[2] <= f.objective_history[0]);
        // the Gram shortcut agrees with the dense evaluation (up to f32 storage)
        let brute = brute_objective(&occ, &f, cfg.confidence_alpha, cfg.lambda);
        let last = *f.objective_history.last().unwrap();
        assert!((brute - last).abs() / last < 1e-4, "{brute} vs {last}");
    }

    #[test]
    fn block_diagonal_fixture_separates_blocks() {
        let occ = Occurrences::new(2, vec![vec![0], vec![1]]).unwrap();
        let f = wrmf_factorize(
            &occ,
            &WrmfConfig {
                dim: 2,
                iterations: 15,
                ..Default::default()
            },
        )
        .unwrap();
        let score = |u: usize, i: usize| dot(f.playlist_vectors.row(u), f.song_vectors.row(i));
        for u in 0..2 {
            for i in 0..2 {
                if u != i {
                    assert!(score(u, u) > score(u, i), "u={u} i={i}");
                    assert!(score(i, i) > score(u, i));
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let occ = random_occurrences(20, 30, 0.2, 1);
        let cfg = WrmfConfig {
            dim: 4,
            iterations: 3,
            ..Default::default()
        };
        assert_eq!(wrmf_factorize(&occ, &cfg).unwrap(), wrmf_factorize(&occ, &cfg).unwrap());
    }

    #[test]
    fn zero_iterations_rejected() {
        let occ = Occurrences::new(1, vec![vec![0]]).unwrap();
        let cfg = WrmfConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(matches!(wrmf_factorize(&occ, &cfg), Err(RtaError::Config(_))));
    }
}
