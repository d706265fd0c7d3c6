//! Second-moment estimation and the top eigenspace of reward correlations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::design::FeatureMatrix;
use crate::error::{LmabError, Result};
use crate::model::{Environment, LmabInstance, RewardKind};
use crate::rng::{self, StreamRng};

const EIGEN_TOLERANCE: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SecondMomentEstimate {
    /// `(A Z) x (A Z)` for discrete rewards, `A x A` for Gaussian rewards.
    pub matrix: DMatrix<f64>,
    pub episodes_used: u64,
    /// Reward values per action row block; 1 for Gaussian rewards.
    pub values: usize,
}

/// Monte Carlo second moment from `n0` episodes with two uniform first actions.
///
/// Scaled by `A^2` so the expectation is `sum_m w_m mu_m mu_m^T`.
pub fn estimate_second_moment<E: Environment>(env: &E, n0: usize, seed: u64) -> Result<SecondMomentEstimate> {
    if env.horizon() < 2 {
        return Err(LmabError::InvalidArgument(format!("second moment needs H >= 2, got {}", env.horizon())));
    }
    if n0 == 0 {
        return Err(LmabError::InvalidArgument("second moment needs N0 >= 1".into()));
    }
    let actions = env.num_actions();
    let z = env.num_values();
    let continuous = z == 0;
    let width = if continuous { 1 } else { z };
    let d = actions * width;
    let chunks = rng::par_chunked(n0, seed, |rng: &mut StreamRng, len| {
        let mut acc = vec![0.0f64; d * d];
        for _ in 0..len {
            let ctx = env.draw_context(rng);
            let a1 = rng.random_range(0..actions);
            let r1 = env.draw_reward(ctx, a1, rng);
            let a2 = rng.random_range(0..actions);
            let r2 = env.draw_reward(ctx, a2, rng);
            if continuous {
                acc[a1 * d + a2] += r1.value * r2.value;
            } else {
                acc[(a1 * z + r1.obs) * d + a2 * z + r2.obs] += 1.0;
            }
        }
        acc
    });
    let mut counts = vec![0.0f64; d * d];
    for chunk in chunks {
        for (c, x) in counts.iter_mut().zip(chunk) {
            *c += x;
        }
    }
    let scale = (actions * actions) as f64 / (2.0 * n0 as f64);
    let matrix = DMatrix::from_fn(d, d, |i, j| scale * (counts[i * d + j] + counts[j * d + i]));
    Ok(SecondMomentEstimate { matrix, episodes_used: n0 as u64, values: width })
}

/// Population second moment, for oracle injection.
pub fn exact_second_moment(inst: &LmabInstance) -> SecondMomentEstimate {
    let (matrix, values) = match inst.kind() {
        RewardKind::Discrete => (inst.second_moment(), inst.num_values()),
        RewardKind::Gaussian => {
            let a = inst.num_actions();
            let mut out = DMatrix::zeros(a, a);
            for m in 0..inst.num_contexts() {
                let v = DVector::from_fn(a, |i, _| inst.gaussian_mean(m, i));
                out += inst.weights()[m] * &v * v.transpose();
            }
            (out, 1)
        }
    };
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    SecondMomentEstimate { matrix, episodes_used: 0, values }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceEstimate {
    /// Orthonormal columns spanning the estimated reward subspace.
    pub basis: DMatrix<f64>,
    /// Leading eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// First discarded eigenvalue, 0 when none remains.
    pub residual: f64,
    pub values: usize,
}

impl SubspaceEstimate {
    /// Basis as a design feature matrix with (action, value) row labels.
    pub fn feature_matrix(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::from_action_values(self.basis.clone(), self.values)
    }
}

pub fn top_m_eigenspace(est: &SecondMomentEstimate, m: usize) -> Result<SubspaceEstimate> {
    let d = est.matrix.nrows();
    if m == 0 || m > d {
        return Err(LmabError::InvalidArgument(format!("need 1 <= M <= {d}, got {m}")));
    }
    let eig = SymmetricEigen::try_new(est.matrix.clone(), EIGEN_TOLERANCE, EIGEN_MAX_ITER)
        .ok_or(LmabError::EigenNotConverged)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut basis = DMatrix::zeros(d, m);
    for (col, &idx) in order.iter().take(m).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        basis.set_column(col, &v);
    }
    Ok(SubspaceEstimate {
        basis,
        eigenvalues: order.iter().take(m).map(|&i| eig.eigenvalues[i]).collect(),
        residual: order.get(m).map_or(0.0, |&i| eig.eigenvalues[i]),
        values: est.values,
    })
}

/// `||(I - U U^T) v||_inf`.
pub fn subspace_residual(sub: &SubspaceEstimate, v: &[f64]) -> Result<f64> {
    if v.len() != sub.basis.nrows() {
        return Err(LmabError::Dimension(format!("vector of length {} vs basis rows {}", v.len(), sub.basis.nrows())));
    }
    let v = DVector::from_column_slice(v);
    let coeffs = sub.basis.transpose() * &v;
    let resid = v - &sub.basis * coeffs;
    Ok(resid.amax())
}
