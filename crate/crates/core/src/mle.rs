//! Likelihood-based fitting of core-coordinate parameters: data collection
//! with uniformly random core pairs, EM for the product-Bernoulli mixture and
//! spectral or clustering initializations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::design::CoreSet;
use crate::error::Result;
use crate::model::Environment;
use crate::moments::{project_capped_simplex, LatentParams, MomentTensor};
use crate::rng::{self, StreamRng};

/// Clip applied to core values inside the likelihood and the M-step.
pub const LIKELIHOOD_CLIP: f64 = 1e-9;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;
const EMPTY_COUNT: f64 = 1e-12;
const EPISODE_BLOCK: usize = 1024;
const INIT_WEIGHT_FLOOR: f64 = 1e-3;

/// Episodes of (core index, indicator) observations, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct MleDataset {
    pub dim: usize,
    pub horizon: usize,
    /// `indices[k * horizon + t]`.
    pub indices: Vec<u32>,
    pub outcomes: Vec<bool>,
}

impl MleDataset {
    pub fn num_episodes(&self) -> usize {
        self.indices.len().checked_div(self.horizon).unwrap_or(0)
    }

    fn episode(&self, k: usize) -> (&[u32], &[bool]) {
        let range = k * self.horizon..(k + 1) * self.horizon;
        (&self.indices[range.clone()], &self.outcomes[range])
    }
}

/// `n` episodes; each step plays a uniformly random core pair and records
/// whether its value was observed.
pub fn collect_mle_data<E: Environment>(env: &E, core: &CoreSet, n: usize, seed: u64) -> MleDataset {
    let horizon = env.horizon();
    let dim = core.len();
    let chunks = rng::par_chunked(n, seed, |rng: &mut StreamRng, len| {
        let mut idx = Vec::with_capacity(len * horizon);
        let mut out = Vec::with_capacity(len * horizon);
        for _ in 0..len {
            let ctx = env.draw_context(rng);
            for _ in 0..horizon {
                let j = rng.random_range(0..dim);
                let (a, z) = core.pairs[j];
                out.push(env.draw_reward(ctx, a, rng).obs == z);
                idx.push(j as u32);
            }
        }
        (idx, out)
    });
    let mut indices = Vec::with_capacity(n * horizon);
    let mut outcomes = Vec::with_capacity(n * horizon);
    for (i, o) in chunks {
        indices.extend(i);
        outcomes.extend(o);
    }
    MleDataset { dim, horizon, indices, outcomes }
}

fn clip(p: f64) -> f64 {
    p.clamp(LIKELIHOOD_CLIP, 1.0 - LIKELIHOOD_CLIP)
}

/// Per-component `log w_m + log P(episode | m)` for one episode.
fn component_logs(params: &LatentParams, idx: &[u32], out: &[bool], logs: &mut [f64]) {
    for (m, slot) in logs.iter_mut().enumerate() {
        let w = params.weights[m];
        if w <= 0.0 {
            *slot = f64::NEG_INFINITY;
            continue;
        }
        let nu = &params.core_values[m];
        let mut s = w.ln();
        for (&j, &b) in idx.iter().zip(out) {
            let p = clip(nu[j as usize]);
            s += if b { p.ln() } else { (1.0 - p).ln() };
        }
        *slot = s;
    }
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

/// Average episode log-likelihood of `params`; 0 on an empty dataset.
pub fn log_likelihood(data: &MleDataset, params: &LatentParams) -> f64 {
    e_step(data, params).0
}

/// Responsibilities `N x M` and the mean log-likelihood.
fn e_step(data: &MleDataset, params: &LatentParams) -> (f64, Vec<f64>) {
    let n = data.num_episodes();
    let m = params.num_components();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let blocks: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(EPISODE_BLOCK))
        .into_par_iter()
        .map(|b| {
            let range = b * EPISODE_BLOCK..((b + 1) * EPISODE_BLOCK).min(n);
            let mut resp = Vec::with_capacity(range.len() * m);
            let mut total = 0.0;
            let mut logs = vec![0.0; m];
            for k in range {
                let (idx, out) = data.episode(k);
                component_logs(params, idx, out, &mut logs);
                let norm = log_sum_exp(&logs);
                total += norm;
                resp.extend(logs.iter().map(|l| (l - norm).exp()));
            }
            (total, resp)
        })
        .collect();
    let mut total = 0.0;
    let mut resp = Vec::with_capacity(n * m);
    for (t, r) in blocks {
        total += t;
        resp.extend(r);
    }
    (total / n as f64, resp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmState {
    pub params: LatentParams,
    /// Mean log-likelihood at `params`.
    pub log_likelihood: f64,
    /// Posterior over components at `params`, `N x M` row-major.
    pub responsibilities: Vec<f64>,
    pub iterations: usize,
    /// Log-likelihood after each completed iteration, starting with the init.
    pub trace: Vec<f64>,
}

impl EmState {
    pub fn new(data: &MleDataset, params: LatentParams) -> Self {
        let (ll, resp) = e_step(data, &params);
        EmState { params, log_likelihood: ll, responsibilities: resp, iterations: 0, trace: vec![ll] }
    }
}

/// One M-step from the stored responsibilities followed by a fresh E-step.
pub fn em_step(data: &MleDataset, state: &EmState) -> EmState {
    let n = data.num_episodes();
    let m = state.params.num_components();
    let dim = state.params.dim();
    if n == 0 {
        let mut next = state.clone();
        next.iterations += 1;
        next.trace.push(next.log_likelihood);
        return next;
    }
    // hits[c * dim + j], counts[c * dim + j], mass[c]
    let partial: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n.div_ceil(EPISODE_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut hits = vec![0.0; m * dim];
            let mut counts = vec![0.0; m * dim];
            let mut mass = vec![0.0; m];
            for k in b * EPISODE_BLOCK..((b + 1) * EPISODE_BLOCK).min(n) {
                let (idx, out) = data.episode(k);
                for c in 0..m {
                    let r = state.responsibilities[k * m + c];
                    mass[c] += r;
                    if r == 0.0 {
                        continue;
                    }
                    for (&j, &bit) in idx.iter().zip(out) {
                        counts[c * dim + j as usize] += r;
                        if bit {
                            hits[c * dim + j as usize] += r;
                        }
                    }
                }
            }
            (hits, counts, mass)
        })
        .collect();
    let mut hits = vec![0.0; m * dim];
    let mut counts = vec![0.0; m * dim];
    let mut mass = vec![0.0; m];
    for (h, c, w) in partial {
        hits.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        mass.iter_mut().zip(w).for_each(|(a, b)| *a += b);
    }
    let weights: Vec<f64> = mass.iter().map(|w| w / n as f64).collect();
    let core_values = (0..m)
        .map(|c| {
            (0..dim)
                .map(|j| {
                    let cnt = counts[c * dim + j];
                    if cnt < EMPTY_COUNT {
                        state.params.core_values[c][j]
                    } else {
                        clip(hits[c * dim + j] / cnt)
                    }
                })
                .collect()
        })
        .collect();
    let params = LatentParams { weights, core_values };
    let (ll, resp) = e_step(data, &params);
    let mut trace = state.trace.clone();
    trace.push(ll);
    EmState { params, log_likelihood: ll, responsibilities: resp, iterations: state.iterations + 1, trace }
}

/// Iterates [`em_step`] until the log-likelihood moves less than `tol`.
pub fn em_fit(data: &MleDataset, init: LatentParams, max_iter: usize, tol: f64) -> EmState {
    let mut state = EmState::new(data, init);
    for _ in 0..max_iter {
        let next = em_step(data, &state);
        let delta = (next.log_likelihood - state.log_likelihood).abs();
        state = next;
        if delta < tol {
            break;
        }
    }
    state
}

/// Unbiased first three moments of the core indicators, using distinct time
/// steps within each episode.
pub fn empirical_core_tensors(data: &MleDataset) -> [MomentTensor; 3] {
    let n = data.dim;
    let mut s1 = vec![0.0; n];
    let mut c1 = vec![0.0; n];
    let mut s2 = vec![0.0; n * n];
    let mut c2 = vec![0.0; n * n];
    let mut s3 = vec![0.0; n * n * n];
    let mut c3 = vec![0.0; n * n * n];
    let h = data.horizon;
    for k in 0..data.num_episodes() {
        let (idx, out) = data.episode(k);
        for s in 0..h {
            let i = idx[s] as usize;
            c1[i] += 1.0;
            s1[i] += f64::from(u8::from(out[s]));
            for t in 0..h {
                if t == s {
                    continue;
                }
                let j = idx[t] as usize;
                let b2 = out[s] && out[t];
                c2[i * n + j] += 1.0;
                s2[i * n + j] += f64::from(u8::from(b2));
                for u in 0..h {
                    if u == s || u == t {
                        continue;
                    }
                    let cell = (i * n + j) * n + idx[u] as usize;
                    c3[cell] += 1.0;
                    s3[cell] += f64::from(u8::from(b2 && out[u]));
                }
            }
        }
    }
    let t1: Vec<f64> = (0..n).map(|i| if c1[i] > 0.0 { s1[i] / c1[i] } else { 0.5 }).collect();
    let t2: Vec<f64> = (0..n * n)
        .map(|c| if c2[c] > 0.0 { s2[c] / c2[c] } else { t1[c / n] * t1[c % n] })
        .collect();
    let t3: Vec<f64> = (0..n * n * n)
        .map(|c| if c3[c] > 0.0 { s3[c] / c3[c] } else { t1[c / (n * n)] * t1[(c / n) % n] * t1[c % n] })
        .collect();
    let used = data.num_episodes() as u64;
    [
        MomentTensor { order: 1, dim: n, entries: t1, episodes_used: used },
        MomentTensor { order: 2, dim: n, entries: t2, episodes_used: used },
        MomentTensor { order: 3, dim: n, entries: t3, episodes_used: used },
    ]
}

/// Outcome of [`init_spectral`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralInit {
    pub params: LatentParams,
    pub used_fallback: bool,
}

const SPECTRAL_DIRECTIONS: usize = 8;
const RELATIVE_EIGEN_FLOOR: f64 = 1e-3;

/// Whitened simultaneous diagonalization of the third moment.
///
/// Returns `None` when the spectrum is too degenerate to separate components.
pub fn spectral_from_tensors(
    t1: &MomentTensor,
    t2: &MomentTensor,
    t3: &MomentTensor,
    m: usize,
    seed: u64,
) -> Option<LatentParams> {
    let n = t1.dim;
    if m == 1 {
        return Some(LatentParams { weights: vec![1.0], core_values: vec![t1.entries.clone()] });
    }
    if m > n || t2.dim != n || t3.dim != n || t2.order != 2 || t3.order != 3 {
        return None;
    }
    let pair = DMatrix::from_row_slice(n, n, &t2.entries);
    let pair = (&pair + pair.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(pair, 1e-12, 100_000)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let top = eig.eigenvalues[order[0]];
    let kept: Vec<usize> = order[..m].to_vec();
    if top <= 0.0 || eig.eigenvalues[kept[m - 1]] <= RELATIVE_EIGEN_FLOOR * top {
        return None;
    }
    let u = DMatrix::from_fn(n, m, |r, c| eig.eigenvectors[(r, kept[c])]);
    let sqrt_lambda: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i].sqrt()).collect();
    let whiten = DMatrix::from_fn(n, m, |r, c| u[(r, c)] / sqrt_lambda[c]);

    let mut rng = rng::stream_rng(seed, 0);
    let mut best: Option<(f64, DMatrix<f64>, Vec<f64>, DVector<f64>)> = None;
    for _ in 0..SPECTRAL_DIRECTIONS {
        let theta = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)).normalize();
        let lifted = &whiten * &theta;
        let mut slice = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let base = (i * n + j) * n;
                slice[(i, j)] = (0..n).map(|k| t3.entries[base + k] * lifted[k]).sum();
            }
        }
        let small = whiten.transpose() * slice * &whiten;
        let small = (&small + small.transpose()) * 0.5;
        let Some(dec) = SymmetricEigen::try_new(small, 1e-12, 100_000) else { continue };
        let vals: Vec<f64> = dec.eigenvalues.iter().copied().collect();
        let scale = vals.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            continue;
        }
        let mut gap = f64::INFINITY;
        for a in 0..m {
            gap = gap.min(vals[a].abs() / scale);
            for b in a + 1..m {
                gap = gap.min((vals[a] - vals[b]).abs() / scale);
            }
        }
        if best.as_ref().is_none_or(|b| gap > b.0) {
            best = Some((gap, dec.eigenvectors, vals, theta));
        }
    }
    let (gap, vecs, vals, theta) = best?;
    if gap < 1e-6 {
        return None;
    }
    let mut weights = Vec::with_capacity(m);
    let mut core_values = Vec::with_capacity(m);
    for c in 0..m {
        let mut v = vecs.column(c).into_owned();
        let mut root_w = v.dot(&theta) / vals[c];
        if root_w < 0.0 {
            v.neg_mut();
            root_w = -root_w;
        }
        if !(root_w > 0.0) || !root_w.is_finite() {
            return None;
        }
        let scaled = DVector::from_fn(m, |r, _| v[r] * sqrt_lambda[r]);
        let nu = &u * scaled / root_w;
        weights.push(root_w * root_w);
        core_values.push(nu.iter().map(|x| x.clamp(0.0, 1.0)).collect());
    }
    Some(LatentParams { weights: project_capped_simplex(&weights, 0.0), core_values })
}

/// Per-episode success frequency per core index, unobserved entries imputed.
fn frequency_vectors(data: &MleDataset, fill: &[f64]) -> Vec<Vec<f64>> {
    (0..data.num_episodes())
        .map(|k| {
            let (idx, out) = data.episode(k);
            let mut hits = vec![0.0; data.dim];
            let mut seen = vec![0.0; data.dim];
            for (&j, &b) in idx.iter().zip(out) {
                seen[j as usize] += 1.0;
                hits[j as usize] += f64::from(u8::from(b));
            }
            (0..data.dim).map(|j| if seen[j] > 0.0 { hits[j] / seen[j] } else { fill[j] }).collect()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const KMEANS_ITERS: usize = 50;

/// k-means++ on per-episode frequency vectors; cluster shares become weights.
pub fn init_kmeans(data: &MleDataset, m: usize, seed: u64) -> LatentParams {
    let n = data.num_episodes();
    let fill = empirical_core_tensors_first(data);
    if n == 0 {
        return uniform_params(m, data.dim, 0.5);
    }
    let points = frequency_vectors(data, &fill);
    let mut rng = rng::stream_rng(seed, 1);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut best_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = best_d.iter().sum();
        let pick = if total > 0.0 {
            let probs: Vec<f64> = best_d.iter().map(|d| d / total).collect();
            rng::categorical(&mut rng, &probs)
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in best_d.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, centers.last().expect("center")));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        let next: Vec<usize> = points
            .par_iter()
            .map(|p| {
                (0..m).min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])).then(a.cmp(&b))).unwrap()
            })
            .collect();
        let changed = next != assign;
        assign = next;
        let mut sums = vec![vec![0.0; data.dim]; m];
        let mut sizes = vec![0usize; m];
        for (p, &c) in points.iter().zip(&assign) {
            sizes[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..m {
            if sizes[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes = vec![0.0; m];
    for &c in &assign {
        sizes[c] += 1.0;
    }
    let weights = floor_weights(&sizes.iter().map(|s| s / n as f64).collect::<Vec<_>>());
    let core_values = centers.into_iter().map(|c| c.into_iter().map(clip).collect()).collect();
    LatentParams { weights, core_values }
}

fn empirical_core_tensors_first(data: &MleDataset) -> Vec<f64> {
    let mut hits = vec![0.0; data.dim];
    let mut seen = vec![0.0; data.dim];
    for (&j, &b) in data.indices.iter().zip(&data.outcomes) {
        seen[j as usize] += 1.0;
        hits[j as usize] += f64::from(u8::from(b));
    }
    (0..data.dim).map(|j| if seen[j] > 0.0 { hits[j] / seen[j] } else { 0.5 }).collect()
}

/// Lifts weights below the floor so EM can still move them; others keep their ratios.
fn floor_weights(w: &[f64]) -> Vec<f64> {
    if w.iter().all(|&x| x >= INIT_WEIGHT_FLOOR) {
        return w.to_vec();
    }
    let raised: Vec<f64> = w.iter().map(|&x| x.max(INIT_WEIGHT_FLOOR)).collect();
    let total: f64 = raised.iter().sum();
    raised.iter().map(|x| x / total).collect()
}

/// Equal weights and a constant core value.
pub fn uniform_params(m: usize, dim: usize, value: f64) -> LatentParams {
    LatentParams { weights: vec![1.0 / m as f64; m], core_values: vec![vec![value; dim]; m] }
}

/// Random start: Dirichlet weights, uniform core values.
pub fn random_params(m: usize, dim: usize, seed: u64) -> LatentParams {
    let mut rng = rng::stream_rng(seed, 2);
    let weights = floor_weights(&rng::dirichlet(&mut rng, m, 1.0));
    let core_values = (0..m).map(|_| (0..dim).map(|_| clip(rng.random::<f64>())).collect()).collect();
    LatentParams { weights, core_values }
}

/// Where the spectral initializer reads its moments from.
#[derive(Clone, Copy)]
pub enum SpectralSource<'a> {
    Data(&'a MleDataset),
    Tensors { first: &'a MomentTensor, second: &'a MomentTensor, third: &'a MomentTensor },
}

/// Spectral initialization with a clustering fallback for degenerate spectra.
///
/// Without data the fallback replicates the first moment across components.
pub fn init_spectral(source: SpectralSource<'_>, m: usize, seed: u64) -> SpectralInit {
    let attempt = match source {
        SpectralSource::Data(data) if data.horizon >= 3 || m == 1 => {
            let [t1, t2, t3] = empirical_core_tensors(data);
            spectral_from_tensors(&t1, &t2, &t3, m, seed)
        }
        SpectralSource::Data(_) => None,
        SpectralSource::Tensors { first, second, third } => spectral_from_tensors(first, second, third, m, seed),
    };
    if let Some(mut params) = attempt {
        params.weights = floor_weights(&params.weights);
        return SpectralInit { params, used_fallback: false };
    }
    let params = match source {
        SpectralSource::Data(data) => init_kmeans(data, m, seed),
        SpectralSource::Tensors { first, .. } => LatentParams {
            weights: vec![1.0 / m as f64; m],
            core_values: vec![first.entries.iter().map(|x| x.clamp(0.0, 1.0)).collect(); m],
        },
    };
    SpectralInit { params, used_fallback: true }
}

/// Core values of split components move by at most this much.
const SPLIT_JITTER: f64 = 0.05;

/// Tensor decomposition with no clustering fallback.
///
/// When the second moment supports fewer than `m` components, decomposes at
/// its numerical rank and splits the heaviest components, with a seeded
/// jitter, until there are `m`.
pub fn init_tensor_only(source: SpectralSource<'_>, m: usize, seed: u64) -> SpectralInit {
    let tensors = match source {
        SpectralSource::Data(data) if data.horizon >= 3 => Some(empirical_core_tensors(data)),
        SpectralSource::Data(_) => None,
        SpectralSource::Tensors { first, second, third } => Some([first.clone(), second.clone(), third.clone()]),
    };
    let Some([t1, t2, t3]) = tensors else {
        let SpectralSource::Data(data) = source else { unreachable!() };
        let single = LatentParams { weights: vec![1.0], core_values: vec![empirical_core_tensors_first(data)] };
        return SpectralInit { params: split_to(single, m, seed), used_fallback: true };
    };
    if let Some(mut params) = spectral_from_tensors(&t1, &t2, &t3, m, seed) {
        params.weights = floor_weights(&params.weights);
        return SpectralInit { params, used_fallback: false };
    }
    let rank = numerical_rank(&t2).clamp(1, m);
    let base = (1..=rank)
        .rev()
        .find_map(|k| spectral_from_tensors(&t1, &t2, &t3, k, seed))
        .unwrap_or_else(|| LatentParams { weights: vec![1.0], core_values: vec![t1.entries.clone()] });
    SpectralInit { params: split_to(base, m, seed), used_fallback: true }
}

fn numerical_rank(t2: &MomentTensor) -> usize {
    let n = t2.dim;
    let pair = DMatrix::from_row_slice(n, n, &t2.entries);
    let eig = SymmetricEigen::new((&pair + pair.transpose()) * 0.5);
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > RELATIVE_EIGEN_FLOOR * top).count()
}

fn split_to(mut params: LatentParams, m: usize, seed: u64) -> LatentParams {
    let mut rng = rng::stream_rng(seed, 3);
    for c in &mut params.core_values {
        c.iter_mut().for_each(|x| *x = clip(*x));
    }
    while params.weights.len() < m {
        let heaviest = (0..params.weights.len()).max_by(|&i, &j| params.weights[i].total_cmp(&params.weights[j])).unwrap();
        params.weights[heaviest] *= 0.5;
        params.weights.push(params.weights[heaviest]);
        let copy = params.core_values[heaviest]
            .iter()
            .map(|&x| clip(x + rng.random_range(-SPLIT_JITTER..=SPLIT_JITTER)))
            .collect();
        params.core_values.push(copy);
    }
    params.weights = floor_weights(&params.weights);
    params
}

/// Sup-norm error of each true component against its matched estimate, under
/// the best component matching.
pub fn separation_diagnostic(estimate: &LatentParams, truth: &LatentParams) -> Vec<f64> {
    let m = truth.num_components();
    let cost = |i: usize, j: usize| -> f64 {
        truth.core_values[i].iter().zip(&estimate.core_values[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..estimate.num_components()).collect();
    permutations(&mut perm, 0, &mut |p| {
        let worst = (0..m).map(|i| cost(i, p[i])).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|b| worst < b.0) {
            best = Some((worst, p.to_vec()));
        }
    });
    let (_, p) = best.expect("nonempty");
    (0..m).map(|i| cost(i, p[i])).collect()
}

fn permutations(v: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// Dataset built directly from index and outcome lists, for tests and tools.
pub fn dataset_from_episodes(dim: usize, episodes: &[(Vec<u32>, Vec<bool>)]) -> Result<MleDataset> {
    let horizon = episodes.first().map_or(0, |e| e.0.len());
    let mut indices = Vec::new();
    let mut outcomes = Vec::new();
    for (idx, out) in episodes {
        if idx.len() != horizon || out.len() != horizon || idx.iter().any(|&j| j as usize >= dim) {
            return Err(crate::LmabError::Dimension("malformed episode".into()));
        }
        indices.extend_from_slice(idx);
        outcomes.extend_from_slice(out);
    }
    Ok(MleDataset { dim, horizon, indices, outcomes })
}
