//! `lmab`: run learning pipelines, sweeps, instance generation and policy
//! evaluation from the command line.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmab_core::model::{
    exact_policy_value, generate_random_instance, monte_carlo_policy_value, GeneratorSpec, LmabInstance, PolicyTree,
    SeparationConfig,
};
use lmab_core::pipeline::{
    self, parse_grid, run_sweep, write_csv, Pipeline, RunConfig, SweepParam, SweepRecord, SweepSpec, Tolerance,
    WeightFloor,
};
use lmab_core::{rng, LmabError};

#[derive(Parser)]
#[command(name = "lmab", version, about = "Learning and planning in latent multi-armed bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline and write its CSV row(s).
    Run {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Vary one parameter over a grid and write one CSV row per run.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Parameter to vary: h, m or n.
        #[arg(long)]
        vary: String,
        /// Inclusive range `lo:hi` or a comma-separated list.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Draw a random instance and save it.
    GenInstance {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        a: usize,
        #[arg(long, default_value_t = 2)]
        z: usize,
        #[arg(long, default_value_t = 5)]
        h: usize,
        #[arg(long)]
        rank: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reject draws whose contexts are not separated by this margin.
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Value of a saved policy tree on a saved instance.
    Eval {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags that override fields of the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pipeline: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    delta_sub: Option<String>,
    #[arg(long)]
    delta_tsr: Option<String>,
    #[arg(long)]
    w_min: Option<String>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    noiseless: bool,
    /// Write zeros instead of measured wall-clock times.
    #[arg(long)]
    no_wallclock: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    policy_out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, LmabError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(list) = &self.pipeline {
            let parsed: Vec<Pipeline> = list.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
            cfg.pipeline = None;
            cfg.pipelines = parsed;
            if cfg.pipelines.len() == 1 {
                cfg.pipeline = cfg.pipelines.pop();
            }
        }
        if let Some(path) = &self.instance {
            cfg.instance = Some(path.clone());
            cfg.generator = None;
        }
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { cfg.$field = v; })* };
        }
        set!(seed, n0, n1, n, epsilon, eta, eval_episodes);
        if self.horizon.is_some() {
            cfg.horizon = self.horizon;
        }
        if let Some(s) = &self.delta_sub {
            cfg.delta_sub = s.parse::<Tolerance>()?;
        }
        if let Some(s) = &self.delta_tsr {
            cfg.delta_tsr = s.parse::<Tolerance>()?;
        }
        if let Some(s) = &self.w_min {
            cfg.w_min = s.parse::<WeightFloor>()?;
        }
        cfg.noiseless |= self.noiseless;
        if self.no_wallclock {
            cfg.record_wallclock = false;
        }
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        if self.policy_out.is_some() {
            cfg.policy_out = self.policy_out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_records(records: &[SweepRecord], output: Option<&Path>) -> Result<(), LmabError> {
    match output {
        Some(path) => write_csv(records, BufWriter::new(File::create(path)?)),
        None => write_csv(records, io::stdout().lock()),
    }
}

fn run_command(overrides: &Overrides) -> Result<(), LmabError> {
    let cfg = overrides.resolve()?;
    let reports = pipeline::run(&cfg)?;
    let mut err = io::stderr().lock();
    for r in &reports {
        writeln!(
            err,
            "{}: per-step reward {:.6} (se {:.2e}), genie {:.6}, episodes {}",
            r.label,
            r.per_step_reward,
            r.stderr,
            r.references.genie / r.horizon.max(1) as f64,
            r.episodes.total
        )?;
    }
    if let Some(path) = &cfg.policy_out {
        let last = reports.last().expect("a run yields at least one report");
        let z = cfg.load_instance()?.num_values();
        std::fs::write(path, last.policy.to_tree(z, last.horizon)?.to_file_string()?)?;
    }
    let records: Vec<SweepRecord> = reports.into_iter().map(|r| SweepRecord::from_report(r, None)).collect();
    write_records(&records, cfg.output.as_deref())
}

fn sweep_command(overrides: &Overrides, vary: &str, grid: &str, reps: usize) -> Result<(), LmabError> {
    let cfg = overrides.resolve()?;
    let spec = SweepSpec { param: vary.parse::<SweepParam>()?, grid: parse_grid(grid)?, reps };
    let records = run_sweep(&cfg, &spec)?;
    let failed = records.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; their rows carry NaN", records.len());
        for r in &records {
            if let Err(e) = &r.outcome {
                eprintln!("  {} {}={:?} seed {}: {e}", r.label, r.grid_param, r.grid_value, r.seed);
            }
        }
    }
    write_records(&records, cfg.output.as_deref())
}

fn gen_command(spec: GeneratorSpec, seed: u64, out: &Path) -> Result<(), LmabError> {
    let inst = generate_random_instance(&spec, &mut rng::stream_rng(seed, 1))?;
    inst.save(out)
}

fn eval_command(instance: &Path, policy: &Path, episodes: usize, seed: u64) -> Result<(), LmabError> {
    let config_err = |p: &Path, e: &dyn std::fmt::Display| LmabError::Config(format!("{}: {e}", p.display()));
    let inst = LmabInstance::load(instance).map_err(|e| config_err(instance, &e))?;
    let text = std::fs::read_to_string(policy).map_err(|e| config_err(policy, &e))?;
    let tree = PolicyTree::from_file_str(&text).map_err(|e| config_err(policy, &e))?;
    if tree.branching() != inst.num_values() || tree.actions().iter().any(|&a| a >= inst.num_actions()) {
        return Err(LmabError::Config("policy tree does not match the instance's actions or values".into()));
    }
    let exact = exact_policy_value(&inst, &tree).ok();
    let (mean, se) = monte_carlo_policy_value(&inst, &tree, episodes, seed);
    let mut out = io::stdout().lock();
    writeln!(out, "monte_carlo_value,{mean}")?;
    writeln!(out, "monte_carlo_stderr,{se}")?;
    if let Some(v) = exact {
        writeln!(out, "exact_value,{v}")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { overrides } => run_command(overrides),
        Command::Sweep { overrides, vary, grid, reps } => sweep_command(overrides, vary, grid, *reps),
        Command::GenInstance { m, a, z, h, rank, seed, separation, out } => {
            let mut spec = GeneratorSpec::new(*m, *a, *z, *h, *rank);
            spec.separation = separation.map(|gamma| SeparationConfig { gamma, enforced: true });
            gen_command(spec, *seed, out)
        }
        Command::Eval { instance, policy, episodes, seed } => eval_command(instance, policy, *episodes, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                LmabError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
