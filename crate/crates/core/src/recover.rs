//! Turning fitted core values into a valid empirical model, plus the grid
//! discretization and raw moments used for Gaussian rewards.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::design::CoreSet;
use crate::error::{LmabError, Result};
use crate::model::{Environment, LmabInstance, Reward, RewardKind, RewardSupport};
use crate::moments::{LatentParams, MomentTensor};
use crate::rng;

/// Clipping diagnostics of one (context, action) row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEntry {
    pub context: usize,
    pub action: usize,
    /// `sum_z |v - clip(v, 0, 1)|`.
    pub clipped_mass: f64,
    /// Row sum after clipping; 0 marks a row replaced by the uniform distribution.
    pub normalizer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredModel {
    pub instance: LmabInstance,
    /// Lifted values before clipping, `pre_clip[m][a * Z + z]`.
    pub pre_clip: Vec<Vec<f64>>,
    pub clip_report: Vec<ClipEntry>,
}

impl RecoveredModel {
    pub fn total_clipped_mass(&self) -> f64 {
        self.clip_report.iter().map(|e| e.clipped_mass).sum()
    }

    pub fn degenerate_rows(&self) -> usize {
        self.clip_report.iter().filter(|e| e.normalizer == 0.0).count()
    }
}

fn normalized_weights(weights: &[f64]) -> Result<Vec<f64>> {
    let clipped: Vec<f64> = weights.iter().map(|w| w.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LmabError::InvalidArgument("weights have no positive mass".into()));
    }
    Ok(clipped.iter().map(|w| w / total).collect())
}

/// Lifts each component through the core transform, clips to `[0, 1]` and
/// normalizes every (context, action) row. The instance inherits `horizon`.
pub fn recover_reward_model(
    params: &LatentParams,
    core: &CoreSet,
    support: &RewardSupport,
    horizon: usize,
) -> Result<RecoveredModel> {
    let d = core.transform.nrows();
    let z = support.len();
    if params.dim() != core.len() {
        return Err(LmabError::Dimension(format!("params dim {} vs core size {}", params.dim(), core.len())));
    }
    if !d.is_multiple_of(z) {
        return Err(LmabError::Dimension(format!("{d} transform rows do not split into rows of {z}")));
    }
    let actions = d / z;
    let mut pre_clip = Vec::with_capacity(params.num_components());
    let mut clip_report = Vec::new();
    let mut tables = Vec::with_capacity(params.num_components());
    for (m, nu) in params.core_values.iter().enumerate() {
        let v: Vec<f64> = (&core.transform * DVector::from_column_slice(nu)).iter().copied().collect();
        let mut table = Vec::with_capacity(actions);
        for a in 0..actions {
            let raw = &v[a * z..(a + 1) * z];
            let clipped: Vec<f64> = raw.iter().map(|x| x.clamp(0.0, 1.0)).collect();
            let clipped_mass = raw.iter().zip(&clipped).map(|(r, c)| (r - c).abs()).sum();
            let normalizer: f64 = clipped.iter().sum();
            let row = if normalizer > 0.0 {
                clipped.iter().map(|c| c / normalizer).collect()
            } else {
                vec![1.0 / z as f64; z]
            };
            clip_report.push(ClipEntry { context: m, action: a, clipped_mass, normalizer });
            table.push(row);
        }
        pre_clip.push(v);
        tables.push(table);
    }
    let instance = LmabInstance::discrete(normalized_weights(&params.weights)?, tables, support.clone(), horizon)?;
    Ok(RecoveredModel { instance, pre_clip, clip_report })
}

/// Gaussian-mean model from fitted core means; lifted means are kept as is
/// apart from a clamp to `[-1, 1]`.
pub fn recover_gaussian_model(params: &LatentParams, core: &CoreSet, horizon: usize) -> Result<LmabInstance> {
    if params.dim() != core.len() {
        return Err(LmabError::Dimension("params dim does not match core size".into()));
    }
    let means = params
        .core_values
        .iter()
        .map(|nu| {
            (&core.transform * DVector::from_column_slice(nu)).iter().map(|x| x.clamp(-1.0, 1.0)).collect()
        })
        .collect();
    LmabInstance::gaussian(normalized_weights(&params.weights)?, means, horizon)
}

/// Largest grid a discretization may build.
pub const GRID_GUARD: usize = 100_000;

/// Uniform reward grid for discretizing unit-variance Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizationGrid {
    /// Grid points `z_1 < ... < z_Z`.
    pub points: Vec<f64>,
    pub spacing: f64,
    /// Support of the discretized model: `z_1..z_{Z-1}` plus the overflow value 0.
    pub support: RewardSupport,
    /// Support index of the overflow value.
    pub zero_index: usize,
    /// Support index of each bucket `[z_s, z_{s+1})`.
    bucket_index: Vec<usize>,
}

impl DiscretizationGrid {
    pub fn new(horizon: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || horizon == 0 || (horizon as f64) / epsilon <= 1.0 {
            return Err(LmabError::InvalidArgument("need H >= 1 and 0 < epsilon < H".into()));
        }
        let h2 = (horizon * horizon) as f64;
        let root = ((horizon as f64) / epsilon).ln().sqrt();
        let count = (8.0 * h2 * root / epsilon).floor();
        if count > GRID_GUARD as f64 {
            return Err(LmabError::GuardExceeded { what: "discretization grid", size: count, limit: GRID_GUARD as f64 });
        }
        let count = count as usize;
        if count < 2 {
            return Err(LmabError::InvalidArgument("epsilon too large: grid has fewer than 2 points".into()));
        }
        let spacing = epsilon / h2;
        let start = -4.0 * root;
        let points: Vec<f64> = (0..count).map(|i| start + i as f64 * spacing).collect();
        let buckets = &points[..count - 1];
        let merge = buckets.iter().position(|p| p.abs() < 1e-12);
        let (values, zero_index, bucket_index) = match merge {
            Some(i) => (buckets.to_vec(), i, (0..count - 1).collect()),
            None => {
                let split = buckets.partition_point(|&p| p < 0.0);
                let mut values = buckets[..split].to_vec();
                values.push(0.0);
                values.extend_from_slice(&buckets[split..]);
                let bucket_index = (0..count - 1).map(|s| if s < split { s } else { s + 1 }).collect();
                (values, split, bucket_index)
            }
        };
        Ok(DiscretizationGrid { points, spacing, support: RewardSupport::unbounded(values)?, zero_index, bucket_index })
    }

    /// Support index of a realized reward value.
    pub fn bucket(&self, value: f64) -> usize {
        let first = self.points[0];
        let last = *self.points.last().expect("grid");
        if !(value >= first && value < last) {
            return self.zero_index;
        }
        let s = (((value - first) / self.spacing).floor() as usize).min(self.points.len() - 2);
        // Guard against rounding at bucket edges.
        let s = if value < self.points[s] {
            s - 1
        } else if value >= self.points[s + 1] {
            s + 1
        } else {
            s
        };
        self.bucket_index[s.min(self.points.len() - 2)]
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Discrete model whose reward is the bucket of a unit-variance Gaussian
/// draw, with out-of-range draws sent to the value 0.
pub fn discretize_gaussian(inst: &LmabInstance, epsilon: f64) -> Result<(LmabInstance, DiscretizationGrid)> {
    if inst.kind() != RewardKind::Gaussian {
        return Err(LmabError::InvalidArgument("discretization needs a Gaussian instance".into()));
    }
    let grid = DiscretizationGrid::new(inst.horizon(), epsilon)?;
    let zn = grid.support.len();
    let count = grid.points.len();
    let tables = (0..inst.num_contexts())
        .map(|m| {
            (0..inst.num_actions())
                .map(|a| {
                    let mu = inst.gaussian_mean(m, a);
                    let cdf: Vec<f64> = grid.points.iter().map(|p| normal_cdf(p - mu)).collect();
                    let mut row = vec![0.0; zn];
                    for s in 0..count - 1 {
                        row[grid.bucket_index[s]] += (cdf[s + 1] - cdf[s]).max(0.0);
                    }
                    row[grid.zero_index] += cdf[0] + (1.0 - cdf[count - 1]);
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|p| *p /= total);
                    row
                })
                .collect()
        })
        .collect();
    let discrete = LmabInstance::discrete(inst.weights().to_vec(), tables, grid.support.clone(), inst.horizon())?;
    Ok((discrete, grid))
}

/// Environment drawing true Gaussian rewards but reporting grid buckets as observations.
pub struct DiscretizedGaussianEnv<'a> {
    inst: &'a LmabInstance,
    grid: &'a DiscretizationGrid,
}

impl<'a> DiscretizedGaussianEnv<'a> {
    pub fn new(inst: &'a LmabInstance, grid: &'a DiscretizationGrid) -> Self {
        DiscretizedGaussianEnv { inst, grid }
    }
}

impl Environment for DiscretizedGaussianEnv<'_> {
    fn num_actions(&self) -> usize {
        self.inst.num_actions()
    }

    fn num_values(&self) -> usize {
        self.grid.support.len()
    }

    fn horizon(&self) -> usize {
        self.inst.horizon()
    }

    fn draw_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.inst.draw_context(rng)
    }

    fn draw_reward<R: Rng + ?Sized>(&self, context: usize, action: usize, rng: &mut R) -> Reward {
        let value = self.inst.draw_reward(context, action, rng).value;
        Reward { value, obs: self.grid.bucket(value) }
    }
}

/// Raw product-of-rewards moments over core actions.
pub fn gaussian_raw_moment_tensor<E: Environment>(
    env: &E,
    core_actions: &[usize],
    order: usize,
    n1: usize,
    seed: u64,
) -> Result<MomentTensor> {
    if order > env.horizon() {
        return Err(LmabError::InvalidArgument(format!("order {order} exceeds horizon {}", env.horizon())));
    }
    if n1 == 0 || core_actions.is_empty() {
        return Err(LmabError::InvalidArgument("need N1 >= 1 and at least one core action".into()));
    }
    let n = core_actions.len();
    let cells = n.pow(order as u32);
    let entries = (0..cells)
        .into_par_iter()
        .map(|cell| {
            let mut index = vec![0; order];
            let mut rest = cell;
            for slot in index.iter_mut().rev() {
                *slot = rest % n;
                rest /= n;
            }
            let mut rng = rng::stream_rng(seed, cell as u64);
            let mut sum = 0.0;
            for _ in 0..n1 {
                let ctx = env.draw_context(&mut rng);
                sum += index.iter().map(|&j| env.draw_reward(ctx, core_actions[j], &mut rng).value).product::<f64>();
            }
            sum / n1 as f64
        })
        .collect();
    Ok(MomentTensor { order, dim: n, entries, episodes_used: (cells * n1) as u64 })
}
