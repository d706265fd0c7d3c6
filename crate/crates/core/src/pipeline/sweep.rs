//! Grid sweeps over horizon, context count or episode budget, and CSV output.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use super::{run, Pipeline, RunConfig, RunReport};
use crate::error::{LmabError, Result};
use crate::rng::derive_seed;

pub const CSV_HEADER: [&str; 9] =
    ["pipeline", "grid_param", "grid_value", "seed", "per_step_reward", "stderr", "wasserstein", "residual_max", "wallclock_ms"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Horizon,
    Contexts,
    Episodes,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Horizon => "h",
            SweepParam::Contexts => "m",
            SweepParam::Episodes => "n",
        }
    }

    fn apply(self, config: &mut RunConfig, value: usize) -> Result<()> {
        match self {
            SweepParam::Horizon => config.horizon = Some(value),
            SweepParam::Episodes => config.n = value,
            SweepParam::Contexts => {
                let g = config
                    .generator
                    .as_mut()
                    .ok_or_else(|| LmabError::Config("sweeping m needs a generator table".into()))?;
                g.m = value;
                g.rank = g.rank.min(value);
            }
        }
        Ok(())
    }
}

impl FromStr for SweepParam {
    type Err = LmabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h" => Ok(SweepParam::Horizon),
            "m" => Ok(SweepParam::Contexts),
            "n" => Ok(SweepParam::Episodes),
            _ => Err(LmabError::Config(format!("cannot sweep {s:?}; expected h, m or n"))),
        }
    }
}

/// `lo:hi` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<usize>> {
    let bad = || LmabError::Config(format!("bad grid {text:?}"));
    let parse = |s: &str| -> Result<usize> {
        let s = s.trim();
        s.parse::<usize>().or_else(|_| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && *v >= 0.0 && *v <= usize::MAX as f64)
                .map(|v| v as usize)
                .ok_or_else(bad)
        })
    };
    let grid = if let Some((lo, hi)) = text.split_once(':') {
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        text.split(',').map(parse).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(bad());
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub grid: Vec<usize>,
    pub reps: usize,
}

/// One CSV row: a finished report or the error that stopped the run.
#[derive(Clone, Debug)]
pub struct SweepRecord {
    pub label: String,
    pub grid_param: String,
    pub grid_value: Option<usize>,
    pub seed: u64,
    pub outcome: std::result::Result<RunReport, String>,
}

impl SweepRecord {
    pub fn from_report(report: RunReport, grid: Option<(SweepParam, usize)>) -> Self {
        SweepRecord {
            label: report.label.clone(),
            grid_param: grid.map_or("none", |(p, _)| p.name()).to_string(),
            grid_value: grid.map(|(_, v)| v),
            seed: report.seed,
            outcome: Ok(report),
        }
    }

    fn fields(&self) -> [String; 9] {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let (reward, se, w, res, ms) = match &self.outcome {
            Ok(r) => (
                r.per_step_reward.to_string(),
                r.stderr.to_string(),
                opt(r.wasserstein),
                opt(r.residual_max()),
                r.wallclock_ms.to_string(),
            ),
            Err(_) => ("NaN".into(), "NaN".into(), String::new(), String::new(), String::new()),
        };
        [
            self.label.clone(),
            self.grid_param.clone(),
            self.grid_value.map(|v| v.to_string()).unwrap_or_default(),
            self.seed.to_string(),
            reward,
            se,
            w,
            res,
            ms,
        ]
    }
}

/// Runs every (grid point, repetition, pipeline); repetition `r` uses seed
/// `derive_seed(base.seed, r)` at every grid point, so a repetition shares
/// its instance draw across the grid. Failed runs become marked rows.
pub fn run_sweep(base: &RunConfig, spec: &SweepSpec) -> Result<Vec<SweepRecord>> {
    if spec.grid.is_empty() || spec.reps == 0 {
        return Err(LmabError::Config("sweep needs a nonempty grid and at least one repetition".into()));
    }
    let pipelines = base.sweep_pipelines()?;
    let mut tasks = Vec::new();
    for &value in &spec.grid {
        for rep in 0..spec.reps {
            for &pipeline in &pipelines {
                let mut cfg = base.clone();
                spec.param.apply(&mut cfg, value)?;
                cfg.seed = derive_seed(base.seed, rep as u64);
                cfg.pipeline = Some(pipeline);
                cfg.pipelines.clear();
                cfg.validate()?;
                tasks.push((value, pipeline, cfg));
            }
        }
    }
    let chunks: Vec<Vec<SweepRecord>> = tasks
        .par_iter()
        .map(|(value, pipeline, cfg)| records_for(cfg, *pipeline, spec.param, *value))
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

fn records_for(cfg: &RunConfig, pipeline: Pipeline, param: SweepParam, value: usize) -> Vec<SweepRecord> {
    match run(cfg) {
        Ok(reports) => reports.into_iter().map(|r| SweepRecord::from_report(r, Some((param, value)))).collect(),
        Err(e) => vec![SweepRecord {
            label: pipeline.name().to_string(),
            grid_param: param.name().to_string(),
            grid_value: Some(value),
            seed: cfg.seed,
            outcome: Err(e.to_string()),
        }],
    }
}

pub fn write_csv<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for r in records {
        writer.write_record(r.fields())?;
    }
    writer.flush()?;
    Ok(())
}
