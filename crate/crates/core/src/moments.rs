//! Moment tensors over core coordinates, moment matching and the atomic
//! Wasserstein distance between latent parameter sets.
//!
//! Tensors are dense and row-major: cell `(i_1, ..., i_l)` lives at
//! `sum_t i_t n^(l-1-t)`.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::design::CoreSet;
use crate::error::{LmabError, Result};
use crate::model::{Environment, LmabInstance};
use crate::rng;

/// Largest tensor (in cells) any routine will allocate.
pub const TENSOR_GUARD: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTensor {
    pub order: usize,
    pub dim: usize,
    pub entries: Vec<f64>,
    pub episodes_used: u64,
}

impl MomentTensor {
    pub fn cells(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.entries[flat_index(index, self.dim)]
    }
}

fn flat_index(index: &[usize], dim: usize) -> usize {
    index.iter().fold(0, |acc, &i| acc * dim + i)
}

fn cell_count(dim: usize, order: usize) -> Result<usize> {
    let size = (dim as f64).powi(order as i32);
    if size > TENSOR_GUARD {
        return Err(LmabError::GuardExceeded { what: "moment tensor", size, limit: TENSOR_GUARD });
    }
    Ok(dim.pow(order as u32))
}

/// Advances a row-major multi-index; returns false after the last cell.
fn advance(index: &mut [usize], dim: usize) -> bool {
    for slot in index.iter_mut().rev() {
        *slot += 1;
        if *slot < dim {
            return true;
        }
        *slot = 0;
    }
    false
}

/// Mixture coefficients and core values of `M` latent components.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentParams {
    pub weights: Vec<f64>,
    /// `core_values[m][j]`.
    pub core_values: Vec<Vec<f64>>,
}

impl LatentParams {
    pub fn new(weights: Vec<f64>, core_values: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != core_values.len() || weights.is_empty() {
            return Err(LmabError::Dimension("one weight per component required".into()));
        }
        let n = core_values[0].len();
        if core_values.iter().any(|v| v.len() != n) {
            return Err(LmabError::Dimension("components have different core dimensions".into()));
        }
        Ok(LatentParams { weights, core_values })
    }

    /// Core values of an instance's contexts at the given (action, value) pairs.
    pub fn from_instance(inst: &LmabInstance, core: &CoreSet) -> Self {
        let core_values = (0..inst.num_contexts())
            .map(|m| core.pairs.iter().map(|&(a, z)| inst.prob_row(m, a)[z]).collect())
            .collect();
        LatentParams { weights: inst.weights().to_vec(), core_values }
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.core_values.first().map_or(0, Vec::len)
    }

    /// Components reordered so that new component `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        LatentParams {
            weights: perm.iter().map(|&i| self.weights[i]).collect(),
            core_values: perm.iter().map(|&i| self.core_values[i].clone()).collect(),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut x = self.weights.clone();
        for v in &self.core_values {
            x.extend_from_slice(v);
        }
        x
    }

    fn unflatten(x: &[f64], m: usize, n: usize) -> Self {
        LatentParams {
            weights: x[..m].to_vec(),
            core_values: (0..m).map(|c| x[m + c * n..m + (c + 1) * n].to_vec()).collect(),
        }
    }
}

/// `sum_m w_m v_m^{(x) order}` for arbitrary vectors.
pub fn mixture_tensor(weights: &[f64], vectors: &[Vec<f64>], order: usize) -> Result<MomentTensor> {
    let dim = vectors.first().map_or(0, Vec::len);
    let cells = cell_count(dim, order)?;
    let mut entries = vec![0.0; cells];
    for (w, v) in weights.iter().zip(vectors) {
        let mut layer = vec![*w];
        for _ in 0..order {
            layer = layer.iter().flat_map(|&p| v.iter().map(move |&x| p * x)).collect();
        }
        for (e, x) in entries.iter_mut().zip(layer) {
            *e += x;
        }
    }
    Ok(MomentTensor { order, dim, entries, episodes_used: 0 })
}

pub fn params_tensor(params: &LatentParams, order: usize) -> Result<MomentTensor> {
    mixture_tensor(&params.weights, &params.core_values, order)
}

/// Population tensor of an instance over its core pairs.
pub fn exact_moment_tensor(inst: &LmabInstance, core: &CoreSet, order: usize) -> Result<MomentTensor> {
    params_tensor(&LatentParams::from_instance(inst, core), order)
}

/// Empirical tensor: each cell plays its action sequence for `n1` fresh
/// episodes on its own seed stream and averages the product of indicators.
pub fn estimate_moment_tensor<E: Environment>(
    env: &E,
    core: &CoreSet,
    order: usize,
    n1: usize,
    seed: u64,
) -> Result<MomentTensor> {
    if order > env.horizon() {
        return Err(LmabError::InvalidArgument(format!(
            "order {order} exceeds horizon {}",
            env.horizon()
        )));
    }
    if n1 == 0 {
        return Err(LmabError::InvalidArgument("N1 must be positive".into()));
    }
    let n = core.len();
    let cells = cell_count(n, order)?;
    let entries: Vec<f64> = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let mut index = vec![0; order];
            let mut rest = cell;
            for slot in index.iter_mut().rev() {
                *slot = rest % n;
                rest /= n;
            }
            let mut rng = rng::stream_rng(seed, cell as u64);
            let mut hits = 0u64;
            for _ in 0..n1 {
                let ctx = env.draw_context(&mut rng);
                let mut all = true;
                for &j in &index {
                    let (a, z) = core.pairs[j];
                    all &= env.draw_reward(ctx, a, &mut rng).obs == z;
                }
                hits += u64::from(all);
            }
            hits as f64 / n1 as f64
        })
        .collect();
    Ok(MomentTensor { order, dim: n, entries, episodes_used: (cells * n1) as u64 })
}

/// Sup-norm residual of `params` against each tensor.
pub fn moment_residual(params: &LatentParams, tensors: &[MomentTensor]) -> Result<Vec<f64>> {
    tensors
        .iter()
        .map(|t| {
            if t.dim != params.dim() {
                return Err(LmabError::Dimension(format!("tensor dim {} vs params dim {}", t.dim, params.dim())));
            }
            let model = params_tensor(params, t.order)?;
            Ok(model.entries.iter().zip(&t.entries).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        })
        .collect()
}

/// Band constraints keeping the lifted vectors close to valid distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSpec {
    /// Reconstruction map from core values to all (action, value) coordinates.
    pub transform: DMatrix<f64>,
    pub values: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub delta_tsr: f64,
    pub max_order: usize,
    pub delta_sub: f64,
    pub w_min: f64,
    /// Box for every core value.
    pub value_range: (f64, f64),
    pub bands: Option<BandSpec>,
    pub max_iter: usize,
    pub random_restarts: usize,
}

impl MatchConfig {
    pub fn new(delta_tsr: f64, max_order: usize, w_min: f64) -> Self {
        MatchConfig {
            delta_tsr,
            max_order,
            delta_sub: 0.0,
            w_min,
            value_range: (0.0, 1.0),
            bands: None,
            max_iter: 5_000,
            random_restarts: 8,
        }
    }

    /// Band half-width for a component of weight `w`.
    fn band_width(&self, m: usize, w: f64) -> f64 {
        2.0 * (m as f64).sqrt() * self.delta_sub / w.sqrt()
    }
}

/// Result of [`fit_moments`]; `feasible` means every residual is within `delta_tsr`.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub params: LatentParams,
    pub residuals: Vec<f64>,
    pub band_violation: f64,
    pub feasible: bool,
    pub restart: usize,
    pub iterations: usize,
}

impl FitReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }
}

struct Objective<'a> {
    tensors: Vec<&'a MomentTensor>,
    config: &'a MatchConfig,
    m: usize,
    n: usize,
}

struct Eval {
    value: f64,
    grad: Vec<f64>,
    max_residual: f64,
}

impl Objective<'_> {
    fn eval(&self, x: &[f64]) -> Eval {
        let (m, n) = (self.m, self.n);
        let mut grad = vec![0.0; x.len()];
        let mut value = 0.0;
        let mut max_residual: f64 = 0.0;
        let w = &x[..m];
        let nu = |c: usize, j: usize| x[m + c * n + j];
        for tensor in &self.tensors {
            let l = tensor.order;
            let lambda = 1.0 / tensor.cells() as f64;
            let mut index = vec![0usize; l];
            let mut prefix = vec![vec![1.0; l + 1]; m];
            for cell in 0..tensor.cells() {
                let mut model = 0.0;
                for c in 0..m {
                    let pre = &mut prefix[c];
                    for t in 0..l {
                        pre[t + 1] = pre[t] * nu(c, index[t]);
                    }
                    model += w[c] * pre[l];
                }
                let r = model - tensor.entries[cell];
                max_residual = max_residual.max(r.abs());
                value += lambda * r * r;
                let coef = 2.0 * lambda * r;
                if coef != 0.0 {
                    for c in 0..m {
                        let pre = &prefix[c];
                        grad[c] += coef * pre[l];
                        let mut suffix = 1.0;
                        for t in (0..l).rev() {
                            grad[m + c * n + index[t]] += coef * w[c] * pre[t] * suffix;
                            suffix *= nu(c, index[t]);
                        }
                    }
                }
                advance(&mut index, n);
            }
        }
        if let Some(bands) = &self.config.bands {
            value += self.band_penalty(bands, x, Some(&mut grad));
        }
        Eval { value, grad, max_residual }
    }

    /// Squared-hinge violation of the band constraints; adds its gradient when asked.
    fn band_penalty(&self, bands: &BandSpec, x: &[f64], mut grad: Option<&mut Vec<f64>>) -> f64 {
        let (m, n) = (self.m, self.n);
        let z = bands.values;
        let mut total = 0.0;
        for c in 0..m {
            let w = x[c];
            if w <= 0.0 {
                continue;
            }
            let width = self.config.band_width(m, w);
            let nu = DVector::from_column_slice(&x[m + c * n..m + (c + 1) * n]);
            let v = &bands.transform * nu;
            let mut dv = DVector::zeros(v.len());
            let mut dwidth = 0.0;
            for (i, &vi) in v.iter().enumerate() {
                let low = -width - vi;
                let high = vi - 1.0 - width;
                if low > 0.0 {
                    total += low * low;
                    dv[i] -= 2.0 * low;
                    dwidth -= 2.0 * low;
                } else if high > 0.0 {
                    total += high * high;
                    dv[i] += 2.0 * high;
                    dwidth -= 2.0 * high;
                }
            }
            for a in 0..v.len() / z {
                let s: f64 = v.rows(a * z, z).sum();
                let excess = (s - 1.0).abs() - z as f64 * width;
                if excess > 0.0 {
                    total += excess * excess;
                    let sign = (s - 1.0).signum();
                    for i in a * z..(a + 1) * z {
                        dv[i] += 2.0 * excess * sign;
                    }
                    dwidth -= 2.0 * excess * z as f64;
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let dnu = bands.transform.transpose() * dv;
                for j in 0..n {
                    g[m + c * n + j] += dnu[j];
                }
                // width = K w^(-1/2)
                g[c] += dwidth * (-0.5 * width / w);
            }
        }
        total
    }
}

/// Euclidean projection onto `{w >= floor, sum w = 1}`.
pub fn project_capped_simplex(y: &[f64], floor: f64) -> Vec<f64> {
    let m = y.len();
    let budget = 1.0 - floor * m as f64;
    if budget <= 0.0 {
        return vec![1.0 / m as f64; m];
    }
    let mut sorted: Vec<f64> = y.iter().map(|v| v - floor).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        cum += s;
        let candidate = (cum - budget) / (i + 1) as f64;
        if s - candidate > 0.0 {
            tau = candidate;
        }
    }
    y.iter().map(|v| (v - floor - tau).max(0.0) + floor).collect()
}

fn project(x: &mut [f64], m: usize, config: &MatchConfig) {
    let w = project_capped_simplex(&x[..m], config.w_min);
    x[..m].copy_from_slice(&w);
    let (lo, hi) = config.value_range;
    x[m..].iter_mut().for_each(|v| *v = v.clamp(lo, hi));
}

fn descend(objective: &Objective<'_>, start: &LatentParams) -> (LatentParams, usize) {
    let (m, n) = (objective.m, objective.n);
    let config = objective.config;
    let mut x = start.flatten();
    project(&mut x, m, config);
    let mut current = objective.eval(&x);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < config.max_iter && current.max_residual > config.delta_tsr {
        iterations += 1;
        let mut accepted = None;
        while step > 1e-20 {
            let mut trial: Vec<f64> = x.iter().zip(&current.grad).map(|(xi, gi)| xi - step * gi).collect();
            project(&mut trial, m, config);
            let decrease: f64 = trial.iter().zip(&x).zip(&current.grad).map(|((t, xi), g)| g * (t - xi)).sum();
            if decrease >= 0.0 {
                break;
            }
            let next = objective.eval(&trial);
            if next.value <= current.value + 1e-4 * decrease {
                accepted = Some((trial, next));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, next)) = accepted else { break };
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(next.grad.iter().zip(&current.grad)).map(|(si, (g1, g0))| si * (g1 - g0)).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (step * 4.0).min(1e10) };
        x = trial;
        current = next;
    }
    (LatentParams::unflatten(&x, m, n), iterations)
}

/// Fits `M` components to the tensors of orders `1..=max_order` by projected
/// gradient on the squared residuals, restarting from each initial candidate
/// and from random draws; the smallest max residual wins.
pub fn fit_moments(
    tensors: &[MomentTensor],
    config: &MatchConfig,
    components: usize,
    initial: &[LatentParams],
    seed: u64,
) -> Result<FitReport> {
    if components == 0 || config.max_order == 0 {
        return Err(LmabError::InvalidArgument("need at least one component and one order".into()));
    }
    let used: Vec<&MomentTensor> = (1..=config.max_order)
        .map(|l| {
            tensors
                .iter()
                .find(|t| t.order == l)
                .ok_or_else(|| LmabError::InvalidArgument(format!("tensor of order {l} missing")))
        })
        .collect::<Result<_>>()?;
    let n = used[0].dim;
    if used.iter().any(|t| t.dim != n) {
        return Err(LmabError::Dimension("tensors have different dimensions".into()));
    }
    if let Some(b) = &config.bands {
        if b.transform.ncols() != n || b.values == 0 || b.transform.nrows() % b.values != 0 {
            return Err(LmabError::Dimension("band transform does not match core dimension".into()));
        }
    }
    if initial.iter().any(|p| p.num_components() != components || p.dim() != n) {
        return Err(LmabError::Dimension("initial candidate has the wrong shape".into()));
    }
    let mut starts: Vec<LatentParams> = initial.to_vec();
    let (lo, hi) = config.value_range;
    for r in 0..config.random_restarts {
        let mut rng = rng::stream_rng(seed, r as u64);
        let weights = rng::dirichlet(&mut rng, components, 1.0);
        let core_values =
            (0..components).map(|_| (0..n).map(|_| rng.random_range(lo..=hi)).collect()).collect();
        starts.push(LatentParams { weights, core_values });
    }
    let objective = Objective { tensors: used.clone(), config, m: components, n };
    let fits: Vec<(LatentParams, usize)> = starts.par_iter().map(|s| descend(&objective, s)).collect();
    let scored: Vec<(Vec<f64>, f64)> = fits
        .iter()
        .map(|(p, _)| {
            let res = moment_residual(p, &used.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
            let band = match &config.bands {
                Some(b) => objective.band_penalty(b, &p.flatten(), None).sqrt(),
                None => 0.0,
            };
            Ok((res, band))
        })
        .collect::<Result<_>>()?;
    let best = (0..fits.len())
        .min_by(|&a, &b| {
            let ra = scored[a].0.iter().cloned().fold(0.0, f64::max);
            let rb = scored[b].0.iter().cloned().fold(0.0, f64::max);
            ra.total_cmp(&rb).then(a.cmp(&b))
        })
        .expect("at least one start");
    let (params, iterations) = fits[best].clone();
    let (residuals, band_violation) = scored[best].clone();
    let feasible = residuals.iter().all(|&r| r <= config.delta_tsr);
    Ok(FitReport { params, residuals, band_violation, feasible, restart: best, iterations })
}

/// Exact optimal transport cost between marginals `a` and `b`.
pub fn transport_cost(cost: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<f64> {
    if cost.shape() != (a.len(), b.len()) {
        return Err(LmabError::Dimension("cost matrix shape does not match marginals".into()));
    }
    if a.iter().chain(b).any(|x| !(*x >= 0.0)) {
        return Err(LmabError::Transport("marginals must be nonnegative".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 {
        return Err(LmabError::Transport(format!("marginal sums differ: {sa} vs {sb}")));
    }
    if sa == 0.0 {
        return Ok(0.0);
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> =
        (0..a.len()).map(|i| (0..b.len()).map(|j| lp.add_var(cost[(i, j)], (0.0, f64::INFINITY))).collect()).collect();
    for (i, &ai) in a.iter().enumerate() {
        lp.add_constraint(vars[i].iter().map(|&v| (v, 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, ai);
    }
    // The last column constraint is implied by the others once the sums agree.
    for (j, &bj) in b.iter().enumerate().take(b.len() - 1) {
        let col: Vec<_> = vars.iter().map(|row| (row[j], 1.0)).collect();
        lp.add_constraint(col, ComparisonOp::Eq, bj * sa / sb);
    }
    let solution = lp.solve().map_err(|e| LmabError::Transport(e.to_string()))?;
    Ok(solution.objective().max(0.0))
}

/// Atomic Wasserstein distance with sup-norm ground cost.
pub fn wasserstein_distance(p: &LatentParams, q: &LatentParams) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(LmabError::Dimension(format!("core dims {} vs {}", p.dim(), q.dim())));
    }
    let cost = DMatrix::from_fn(p.num_components(), q.num_components(), |i, j| {
        p.core_values[i].iter().zip(&q.core_values[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    });
    transport_cost(&cost, &p.weights, &q.weights)
}
