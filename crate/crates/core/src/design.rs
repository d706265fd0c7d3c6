//! G-optimal experimental design over feature rows and the core-set
//! reconstruction map built from it.
//!
//! The solver maximizes `log det G(rho)` with Frank-Wolfe plus away steps.
//! By the Kiefer-Wolfowitz equivalence the D-optimal design is also
//! G-optimal, with `max_i phi_i^T G^-1 phi_i = k` at the optimum.

use nalgebra::{DMatrix, DVector};

use crate::error::{LmabError, Result};

const REGULARIZATION: f64 = 1e-12;
const RECOMPUTE_EVERY: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Rows of `Phi` labelled by the (action, value) pair they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: DMatrix<f64>,
    row_index: Vec<(usize, usize)>,
}

impl FeatureMatrix {
    /// Rejects shapes with `k > d`, mislabeled rows and rank-deficient input.
    pub fn new(rows: DMatrix<f64>, row_index: Vec<(usize, usize)>) -> Result<Self> {
        let (d, k) = rows.shape();
        if row_index.len() != d {
            return Err(LmabError::Dimension(format!("{d} rows but {} labels", row_index.len())));
        }
        if k == 0 || k > d {
            return Err(LmabError::Dimension(format!("need 1 <= k <= d, got d = {d}, k = {k}")));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(LmabError::InvalidArgument("feature matrix has non-finite entries".into()));
        }
        let rank = numerical_rank(&rows);
        if rank < k {
            return Err(LmabError::RankDeficient { rank, cols: k });
        }
        Ok(FeatureMatrix { rows, row_index })
    }

    /// Rows ordered as `a * values + z`.
    pub fn from_action_values(rows: DMatrix<f64>, values: usize) -> Result<Self> {
        let index = (0..rows.nrows()).map(|i| (i / values, i % values)).collect();
        Self::new(rows, index)
    }

    /// Rows labelled by their own index.
    pub fn plain(rows: DMatrix<f64>) -> Result<Self> {
        let index = (0..rows.nrows()).map(|i| (i, 0)).collect();
        Self::new(rows, index)
    }

    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn num_cols(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row_index(&self) -> &[(usize, usize)] {
        &self.row_index
    }

    fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let tol = top * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&s| s > tol && s > 0.0).count()
}

/// Upper bound on the rounded support size, `4k ln ln k + 16`.
pub fn support_bound(k: usize) -> usize {
    let kf = k as f64;
    let loglog = if k >= 2 { kf.ln().ln().max(0.0) } else { 0.0 };
    (4.0 * kf * loglog + 16.0).floor() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignWeights {
    /// Probability over all `d` rows.
    pub rho: Vec<f64>,
    /// Rows with positive weight, ascending.
    pub support: Vec<usize>,
    pub g_value: f64,
    pub design_matrix: DMatrix<f64>,
    pub iterations: usize,
}

/// `G(rho) = sum_i rho_i phi_i phi_i^T`.
pub fn design_matrix(phi: &FeatureMatrix, rho: &[f64]) -> DMatrix<f64> {
    let m = phi.matrix();
    let mut weighted = m.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    m.transpose() * weighted
}

/// Inverse of `G + 1e-12 I`.
pub fn regularized_inverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = g.nrows();
    let reg = g + DMatrix::identity(k, k) * REGULARIZATION;
    if let Some(chol) = reg.clone().cholesky() {
        return Ok(chol.inverse());
    }
    reg.try_inverse().ok_or(LmabError::RankDeficient { rank: 0, cols: k })
}

/// Leverages `phi_i^T G^-1 phi_i` for every row.
pub fn leverages(phi: &FeatureMatrix, g_inv: &DMatrix<f64>) -> Vec<f64> {
    let m = phi.matrix();
    let proj = m * g_inv;
    (0..m.nrows()).map(|i| proj.row(i).dot(&m.row(i))).collect()
}

/// `g(rho) = max_i phi_i^T G(rho)^-1 phi_i`.
pub fn g_value(phi: &FeatureMatrix, rho: &[f64]) -> Result<f64> {
    let g_inv = regularized_inverse(&design_matrix(phi, rho))?;
    Ok(leverages(phi, &g_inv).into_iter().fold(f64::NEG_INFINITY, f64::max))
}

fn support_of(rho: &[f64]) -> Vec<usize> {
    (0..rho.len()).filter(|&i| rho[i] > 0.0).collect()
}

fn normalize(rho: &mut [f64]) {
    let s: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|r| *r /= s);
}

struct FwState {
    rho: Vec<f64>,
    g_inv: DMatrix<f64>,
    lev: Vec<f64>,
}

impl FwState {
    fn fresh(phi: &FeatureMatrix, mut rho: Vec<f64>) -> Result<Self> {
        normalize(&mut rho);
        let g_inv = regularized_inverse(&design_matrix(phi, &rho))?;
        let lev = leverages(phi, &g_inv);
        Ok(FwState { rho, g_inv, lev })
    }
}

/// Frank-Wolfe with away steps over the rows flagged in `allowed`.
fn frank_wolfe(
    phi: &FeatureMatrix,
    allowed: &[bool],
    rho: Vec<f64>,
    tolerance: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let k = phi.num_cols() as f64;
    let mut st = FwState::fresh(phi, rho)?;
    for iter in 0..max_iter {
        if iter > 0 && iter % RECOMPUTE_EVERY == 0 {
            st = FwState::fresh(phi, st.rho)?;
        }
        let mut toward = (usize::MAX, f64::NEG_INFINITY);
        let mut away = (usize::MAX, f64::INFINITY);
        for i in 0..st.lev.len() {
            if allowed[i] && st.lev[i] > toward.1 {
                toward = (i, st.lev[i]);
            }
            if st.rho[i] > 0.0 && st.lev[i] < away.1 {
                away = (i, st.lev[i]);
            }
        }
        if toward.1 <= (1.0 + tolerance) * k {
            return Ok((st.rho, iter));
        }
        let (j, alpha, beta) = if toward.1 - k >= k - away.1 || st.rho[away.0] >= 1.0 {
            let g = toward.1;
            let lam = (g - k) / (k * (g - 1.0));
            st.rho.iter_mut().for_each(|r| *r *= 1.0 - lam);
            st.rho[toward.0] += lam;
            (toward.0, 1.0 - lam, lam / (1.0 - lam))
        } else {
            let (j, g) = away;
            let rj = st.rho[j];
            let lam_max = rj / (1.0 - rj);
            let lam = if g <= 1.0 { lam_max } else { ((k - g) / (k * (g - 1.0))).min(lam_max) };
            st.rho.iter_mut().for_each(|r| *r *= 1.0 + lam);
            if lam >= lam_max {
                st.rho[j] = 0.0;
            } else {
                st.rho[j] -= lam;
            }
            (j, 1.0 + lam, -lam / (1.0 + lam))
        };
        let denom = 1.0 + beta * st.lev[j];
        if denom <= 1e-10 {
            st = FwState::fresh(phi, st.rho)?;
            continue;
        }
        let u = &st.g_inv * phi.row(j);
        let w = phi.matrix() * &u;
        let c = beta / denom;
        st.g_inv = (&st.g_inv - (&u * u.transpose()) * c) / alpha;
        for (l, wi) in st.lev.iter_mut().zip(w.iter()) {
            *l = (*l - c * wi * wi) / alpha;
        }
    }
    Ok((FwState::fresh(phi, st.rho)?.rho, max_iter))
}

fn drop_tiny(rho: &mut [f64]) {
    let cut = 1e-6 / rho.len() as f64;
    rho.iter_mut().filter(|r| **r < cut).for_each(|r| *r = 0.0);
    normalize(rho);
}

/// Near-G-optimal design with rounded support.
///
/// Runs until `g <= (1 + tolerance) k` or `max_iter`, then rounds the support
/// down toward [`support_bound`] while keeping `g <= 2k`.
pub fn solve_optimal_design(phi: &FeatureMatrix, tolerance: f64, max_iter: usize) -> Result<DesignWeights> {
    let d = phi.num_rows();
    let k = phi.num_cols();
    let bound_g = 2.0 * k as f64;
    let nonzero: Vec<bool> = (0..d).map(|i| phi.matrix().row(i).iter().any(|&x| x != 0.0)).collect();
    let init: Vec<f64> = nonzero.iter().map(|&nz| if nz { 1.0 } else { 0.0 }).collect();
    let (mut rho, mut iterations) = frank_wolfe(phi, &nonzero, init, tolerance, max_iter)?;
    drop_tiny(&mut rho);

    let limit = support_bound(k);
    loop {
        let support = support_of(&rho);
        if support.len() <= limit {
            break;
        }
        let smallest = support
            .iter()
            .copied()
            .min_by(|&a, &b| rho[a].total_cmp(&rho[b]).then(a.cmp(&b)))
            .expect("non-empty support");
        let mut trial = rho.clone();
        trial[smallest] = 0.0;
        normalize(&mut trial);
        let allowed: Vec<bool> = trial.iter().map(|&r| r > 0.0).collect();
        let Ok((mut trial, extra)) = frank_wolfe(phi, &allowed, trial, tolerance, max_iter) else { break };
        drop_tiny(&mut trial);
        match g_value(phi, &trial) {
            Ok(g) if g <= bound_g => {
                rho = trial;
                iterations += extra;
            }
            _ => break,
        }
    }

    let design_matrix = design_matrix(phi, &rho);
    let g = g_value(phi, &rho)?;
    if !(g <= bound_g) {
        return Err(LmabError::DesignNotConverged { g_value: g, bound: bound_g, iterations });
    }
    Ok(DesignWeights { support: support_of(&rho), rho, g_value: g, design_matrix, iterations })
}

/// Core (action, value) pairs plus the map rebuilding full vectors from them.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreSet {
    pub pairs: Vec<(usize, usize)>,
    /// Feature rows the pairs came from.
    pub rows: Vec<usize>,
    pub design: DesignWeights,
    /// `d x n`; column `j` is `rho_j Phi G^-1 phi_j`.
    pub transform: DMatrix<f64>,
}

impl CoreSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Values of a full vector at the core rows.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|&r| full[r]).collect()
    }

    /// Largest row L1 norm of the transform.
    pub fn max_row_l1(&self) -> f64 {
        self.transform.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Distinct actions appearing among the pairs, ascending.
    pub fn actions(&self) -> Vec<usize> {
        let mut acts: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        acts.sort_unstable();
        acts.dedup();
        acts
    }
}

pub fn select_core_coordinates(phi: &FeatureMatrix, design: &DesignWeights) -> Result<CoreSet> {
    if design.rho.len() != phi.num_rows() {
        return Err(LmabError::Dimension(format!(
            "design over {} rows, feature matrix has {}",
            design.rho.len(),
            phi.num_rows()
        )));
    }
    let g_inv = regularized_inverse(&design.design_matrix)?;
    let proj = phi.matrix() * g_inv;
    let n = design.support.len();
    let mut transform = DMatrix::zeros(phi.num_rows(), n);
    for (col, &row) in design.support.iter().enumerate() {
        let column = &proj * phi.row(row) * design.rho[row];
        transform.set_column(col, &column);
    }
    Ok(CoreSet {
        pairs: design.support.iter().map(|&r| phi.row_index()[r]).collect(),
        rows: design.support.clone(),
        design: design.clone(),
        transform,
    })
}

/// `T * core_values`.
pub fn reconstruct_from_core(core: &CoreSet, core_values: &[f64]) -> Result<Vec<f64>> {
    if core_values.len() != core.len() {
        return Err(LmabError::Dimension(format!(
            "{} core values for a core set of size {}",
            core_values.len(),
            core.len()
        )));
    }
    if core_values.iter().any(|v| !v.is_finite()) {
        return Err(LmabError::InvalidArgument("non-finite core value".into()));
    }
    let v = DVector::from_column_slice(core_values);
    Ok((&core.transform * v).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_phi(d: usize, k: usize, seed: u64) -> FeatureMatrix {
        let mut rng = seeded(seed);
        let m = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        FeatureMatrix::plain(m).unwrap()
    }

    #[test]
    fn basis_rows_get_uniform_weight() {
        let mut m = DMatrix::zeros(6, 3);
        for i in 0..3 {
            m[(i, i)] = 1.0;
        }
        let phi = FeatureMatrix::plain(m).unwrap();
        let design = solve_optimal_design(&phi, 1e-9, 1000).unwrap();
        assert_eq!(design.support, vec![0, 1, 2]);
        for i in 0..3 {
            assert!((design.rho[i] - 1.0 / 3.0).abs() < 1e-9);
        }
        assert!((design.g_value - 3.0).abs() < 1e-8);
        let core = select_core_coordinates(&phi, &design).unwrap();
        let block = core.transform.rows(0, 3).into_owned();
        assert!((block - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-9);
    }

    #[test]
    fn single_column_picks_largest_row() {
        // g(rho) = max_i phi_i^2 / sum_j rho_j phi_j^2 is minimized by all weight on the largest |phi_i|.
        let phi = FeatureMatrix::plain(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 1.0])).unwrap();
        let design = solve_optimal_design(&phi, 1e-10, 10_000).unwrap();
        assert_eq!(design.support, vec![1]);
        assert!((design.g_value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rank_deficient_input_is_rejected() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(FeatureMatrix::plain(m), Err(LmabError::RankDeficient { rank: 1, cols: 2 })));
    }

    #[test]
    fn random_design_meets_guarantees() {
        for (seed, (d, k)) in [(50, 3), (200, 8), (30, 10)].into_iter().enumerate() {
            let phi = gaussian_phi(d, k, seed as u64);
            let design = solve_optimal_design(&phi, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
            assert!(design.g_value <= 2.0 * k as f64);
            assert!(design.g_value >= k as f64 - 1e-6);
            assert!(design.support.len() <= support_bound(k));
            let fresh = g_value(&phi, &design.rho).unwrap();
            assert!((fresh - design.g_value).abs() <= 1e-8);
            assert!((design.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_reproduces_span_and_zero() {
        let phi = gaussian_phi(40, 4, 11);
        let design = solve_optimal_design(&phi, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        let core = select_core_coordinates(&phi, &design).unwrap();
        assert!(core.max_row_l1() <= (8.0f64).sqrt() + 1e-8);
        let zero = reconstruct_from_core(&core, &vec![0.0; core.len()]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let theta = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let u: Vec<f64> = (phi.matrix() * theta).iter().copied().collect();
        let back = reconstruct_from_core(&core, &core.restrict(&u)).unwrap();
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(reconstruct_from_core(&core, &[1.0]).is_err());
    }

    #[test]
    fn support_bound_values() {
        assert_eq!(support_bound(1), 16);
        assert_eq!(support_bound(2), 16);
        assert_eq!(support_bound(10), 49);
    }
}
