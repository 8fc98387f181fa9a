//! Command-line front end: `run`, `sweep` and `analyze`.
//!
//! Exit status is 0 on success, 1 for configuration or usage errors and 2
//! for runtime failures.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ExperimentConfig, RawConfig};
use crate::diagnostics::{self, Manifest, Mechanism, RunSummary, Table, TokenDumpRecord};
use crate::error::{ErcError, Result};
use crate::objectives::Variant;
use crate::trainer::{train_observed, StepMetrics};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TOKENS_FILE: &str = "tokens.jsonl";
pub const POLICY_FILE: &str = "policy.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const ANALYSIS_DIR: &str = "analysis";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "erc", version, about = "Clipped policy-optimization experiments with entropy-ratio clipping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Experiment config file.
    pub config: PathBuf,
    /// Replace a config value, `key=value`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replace `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print nothing on success.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    #[value(name = "beta_kl")]
    BetaKl,
    #[value(name = "alpha_entropy")]
    AlphaEntropy,
    #[value(name = "erc_bounds")]
    ErcBounds,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::BetaKl => "beta_kl",
            SweepAxis::AlphaEntropy => "alpha_entropy",
            SweepAxis::ErcBounds => "erc_bounds",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    #[value(name = "entropy-ratio")]
    EntropyRatio,
    #[value(name = "trust-region")]
    TrustRegion,
    #[value(name = "clip-ratio")]
    ClipRatio,
    #[value(name = "entropy-profile")]
    EntropyProfile,
    #[value(name = "token-frequency")]
    TokenFrequency,
}

impl Analysis {
    pub const ALL: [Analysis; 5] = [
        Analysis::EntropyRatio,
        Analysis::TrustRegion,
        Analysis::ClipRatio,
        Analysis::EntropyProfile,
        Analysis::TokenFrequency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::EntropyRatio => "entropy-ratio",
            Analysis::TrustRegion => "trust-region",
            Analysis::ClipRatio => "clip-ratio",
            Analysis::EntropyProfile => "entropy-profile",
            Analysis::TokenFrequency => "token-frequency",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one experiment and write its artifacts to `output_dir`.
    Run(RunArgs),
    /// Train one run per value of an ablation axis and compare them.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Axis values. `erc_bounds` takes `low:high` or one symmetric bound.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Turn a run's token dump into diagnostics tables.
    Analyze {
        /// Run directory holding the token dump and config snapshot.
        dump_dir: PathBuf,
        /// Analyses to produce; all of them when omitted.
        #[arg(long, value_enum, num_args = 0.., value_delimiter = ',')]
        analyses: Option<Vec<Analysis>>,
        /// Length of each token-frequency list.
        #[arg(long, default_value_t = 20)]
        top_n: usize,
        /// Analyze this many records drawn uniformly from the dump.
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        subsample_seed: u64,
        #[arg(long)]
        quiet: bool,
    },
}

/// Parse arguments, dispatch, report errors on stderr and return the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &ErcError) -> i32 {
    match err {
        ErcError::Config { .. } => 1,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let outcome = run_experiment(&cfg, args.quiet)?;
            if !args.quiet {
                print_summary(&cfg.output_dir, &outcome.summary);
            }
            Ok(())
        }
        Command::Sweep { run, axis, values } => {
            let cfg = load_config(&run)?;
            sweep(&cfg, axis, &values, run.quiet)
        }
        Command::Analyze { dump_dir, analyses, top_n, subsample, subsample_seed, quiet } => {
            let selected = analyses.unwrap_or_else(|| Analysis::ALL.to_vec());
            let options = AnalyzeOptions { top_n, subsample, subsample_seed };
            let written = analyze(&dump_dir, &selected, &options)?;
            if !quiet {
                for p in written {
                    println!("wrote {}", p.display());
                }
            }
            Ok(())
        }
    }
}

/// Read the config file and apply overrides and the seed flag.
pub fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| ErcError::config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut raw = RawConfig::parse(&text)?;
    for o in &args.overrides {
        raw.set_override(o)?;
    }
    if let Some(seed) = args.seed {
        raw.set_override(&format!("train.seed={seed}"))?;
    }
    raw.build()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<StepMetrics>,
    pub skipped_steps: Vec<usize>,
    pub summary: RunSummary,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        ErcError::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", path.display())))
    })
}

/// Train `cfg` and write its config snapshot, metrics, optional token dump,
/// final policy and summary into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, quiet: bool) -> Result<RunOutcome> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| {
        ErcError::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", dir.display())))
    })?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    let mut metrics_out = create(&dir.join(METRICS_FILE))?;
    let mut tokens_out = if cfg.dump_tokens { Some(create(&dir.join(TOKENS_FILE))?) } else { None };

    let policy = cfg.initial_policy()?;
    let every = (cfg.train.steps / 10).max(1);
    let last_mini_batch = cfg.train.mini_batches_per_step() - 1;
    let mut step_metrics: Vec<StepMetrics> = Vec::new();
    let report = train_observed(policy, &cfg.task, &cfg.train, &cfg.objective, |m, evals| {
        serde_json::to_writer(&mut metrics_out, m)?;
        metrics_out.write_all(b"\n")?;
        if let Some(out) = tokens_out.as_mut() {
            for e in evals {
                serde_json::to_writer(&mut *out, &TokenDumpRecord::from_eval(m.step, m.mini_batch_index, e))?;
                out.write_all(b"\n")?;
            }
        }
        if !quiet && m.step % every == 0 {
            step_metrics.push(m.clone());
            if m.mini_batch_index == last_mini_batch {
                report_progress(&step_metrics);
                step_metrics.clear();
            }
        }
        Ok(())
    })?;
    metrics_out.flush()?;
    if let Some(mut out) = tokens_out {
        out.flush()?;
    }

    let mut policy_out = create(&dir.join(POLICY_FILE))?;
    report.policy.write_snapshot(&mut policy_out)?;
    policy_out.flush()?;

    if report.metrics.is_empty() {
        return Err(ErcError::EmptyBatch);
    }
    let summary = RunSummary::from_metrics(&report.metrics, cfg.train.steps)?;
    let mut summary_out = create(&dir.join(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(&mut summary_out, &summary)?;
    summary_out.write_all(b"\n")?;
    summary_out.flush()?;
    Ok(RunOutcome { metrics: report.metrics, skipped_steps: report.skipped_steps, summary })
}

/// One stderr line per reported step, averaged over its updates.
fn report_progress(updates: &[StepMetrics]) {
    let Some(first) = updates.first() else { return };
    let n = updates.len() as f64;
    let reward = updates.iter().map(|m| m.mean_reward).sum::<f64>() / n;
    let live: Vec<&StepMetrics> = updates.iter().filter(|m| m.tokens > 0).collect();
    let avg = |f: fn(&StepMetrics) -> f64| {
        if live.is_empty() { 0.0 } else { live.iter().map(|m| f(m)).sum::<f64>() / live.len() as f64 }
    };
    eprintln!(
        "step {:>5}  reward {:.3}  entropy {:.3}  is-clip {:.4}  erc-clip {:.4}  updates {}/{}",
        first.step,
        reward,
        avg(|m| m.mean_entropy),
        avg(|m| m.is_clip_fraction),
        avg(|m| m.erc_clip_fraction),
        live.len(),
        updates.len()
    );
}

fn print_summary(dir: &Path, s: &RunSummary) {
    println!(
        "{}: reward {:.4} -> {:.4}, entropy std (final half) {:.6}, max grad norm {:.4}, is-clip {:.4}, erc-clip {:.4}",
        dir.display(),
        s.initial_reward,
        s.final_reward,
        s.entropy_std_final_half,
        s.grad_norm_max,
        s.mean_is_clip_fraction,
        s.mean_erc_clip_fraction
    );
}

/// One value of a sweep axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    Scalar(f64),
    Bounds(f64, f64),
}

impl AxisValue {
    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        let num = |t: &str| {
            f64::from_str(t.trim()).map_err(|_| ErcError::config(format!("bad {} value `{s}`", axis.name())))
        };
        match (axis, s.split_once(':')) {
            (SweepAxis::ErcBounds, Some((lo, hi))) => Ok(AxisValue::Bounds(num(lo)?, num(hi)?)),
            (SweepAxis::ErcBounds, None) => {
                let b = num(s)?;
                Ok(AxisValue::Bounds(b, b))
            }
            (_, Some(_)) => Err(ErcError::config(format!("{} takes a single number, got `{s}`", axis.name()))),
            (_, None) => Ok(AxisValue::Scalar(num(s)?)),
        }
    }

    fn label(self) -> String {
        match self {
            AxisValue::Scalar(x) => format!("{x:?}"),
            AxisValue::Bounds(lo, hi) => format!("{lo:?}:{hi:?}"),
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, axis: SweepAxis) {
        match (axis, self) {
            (SweepAxis::BetaKl, AxisValue::Scalar(x)) => cfg.objective.beta_kl = x,
            (SweepAxis::AlphaEntropy, AxisValue::Scalar(x)) => cfg.objective.alpha_entropy = x,
            (SweepAxis::ErcBounds, AxisValue::Bounds(lo, hi)) => {
                cfg.objective.erc_enabled = true;
                cfg.objective.beta_low = lo;
                cfg.objective.beta_high = hi;
            }
            _ => unreachable!("axis values are parsed per axis"),
        }
    }
}

/// Build the per-value configs of a sweep, validating everything up front.
pub fn sweep_configs(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<(String, ExperimentConfig)>> {
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(ErcError::config("sweep needs at least one value"));
    }
    if axis == SweepAxis::BetaKl && base.objective.variant != Variant::PpoPenalty {
        return Err(ErcError::config(format!(
            "beta_kl sweeps need objective.variant = ppo-penalty, not {}",
            base.objective.variant
        )));
    }
    values
        .into_iter()
        .map(|v| {
            let value = AxisValue::parse(axis, v)?;
            let mut cfg = base.clone();
            value.apply(&mut cfg, axis);
            cfg.objective.validate().map_err(|e| ErcError::config(e.to_string()))?;
            let label = value.label();
            cfg.output_dir = base.output_dir.join(format!("{}={label}", axis.name()));
            Ok((label, cfg))
        })
        .collect()
}

pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], quiet: bool) -> Result<()> {
    let runs = sweep_configs(base, axis, values)?;
    let mut table = Table {
        header: vec![
            "axis",
            "value",
            "initial_reward",
            "final_reward",
            "entropy_std_final_half",
            "grad_norm_max",
            "mean_is_clip_fraction",
            "mean_erc_clip_fraction",
        ],
        rows: Vec::new(),
    };
    for (label, cfg) in &runs {
        let out = run_experiment(cfg, true)?;
        if !quiet {
            print_summary(&cfg.output_dir, &out.summary);
        }
        let s = out.summary;
        table.rows.push(vec![
            axis.name().to_string(),
            label.clone(),
            diagnostics::sig9(s.initial_reward),
            diagnostics::sig9(s.final_reward),
            diagnostics::sig9(s.entropy_std_final_half),
            diagnostics::sig9(s.grad_norm_max),
            diagnostics::sig9(s.mean_is_clip_fraction),
            diagnostics::sig9(s.mean_erc_clip_fraction),
        ]);
    }
    let path = base.output_dir.join(COMPARISON_FILE);
    let mut out = create(&path)?;
    table.write_csv(&mut out)?;
    out.flush()?;
    if !quiet {
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalyzeOptions {
    pub top_n: usize,
    pub subsample: Option<usize>,
    pub subsample_seed: u64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { top_n: 20, subsample: None, subsample_seed: 0 }
    }
}

/// Write the selected analyses of `dump_dir` into `dump_dir/analysis`,
/// returning the paths written.
pub fn analyze(dump_dir: &Path, selected: &[Analysis], options: &AnalyzeOptions) -> Result<Vec<PathBuf>> {
    if selected.is_empty() {
        return Err(ErcError::config("no analyses selected"));
    }
    if options.top_n == 0 {
        return Err(ErcError::config("--top-n must be at least 1"));
    }
    let config_text = fs::read_to_string(dump_dir.join(CONFIG_FILE)).map_err(|e| {
        ErcError::Io(std::io::Error::new(e.kind(), format!("missing {} in {}: {e}", CONFIG_FILE, dump_dir.display())))
    })?;
    let cfg = ExperimentConfig::parse(&config_text)?;
    let tokens_path = dump_dir.join(TOKENS_FILE);
    let file = File::open(&tokens_path).map_err(|e| {
        ErcError::Io(std::io::Error::new(e.kind(), format!("missing token dump {}: {e}", tokens_path.display())))
    })?;
    let mut records = diagnostics::read_dump(BufReader::new(file))?;
    if let Some(n) = options.subsample {
        records = diagnostics::subsample(&records, n, options.subsample_seed);
    }

    let out_dir = dump_dir.join(ANALYSIS_DIR);
    fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    for &a in selected {
        let table = match a {
            Analysis::EntropyRatio => {
                diagnostics::entropy_ratio_table(&diagnostics::scatter_entropy_ratio_vs_old_prob(&records)?)
            }
            Analysis::TrustRegion => diagnostics::trust_region_table(&diagnostics::scatter_trust_region(&records)?),
            Analysis::ClipRatio => diagnostics::clip_ratio_csv(&diagnostics::clip_ratio_table(&records, &Mechanism::ALL)?),
            Analysis::EntropyProfile => {
                diagnostics::clipped_token_entropy_profile(&records, cfg.task.vocab.size())?.to_table()
            }
            Analysis::TokenFrequency => diagnostics::token_frequency_table(&records, options.top_n)?.to_table(),
        };
        let path = out_dir.join(a.file_name());
        let mut out = create(&path)?;
        table.write_csv(&mut out)?;
        out.flush()?;
        written.push(path);
    }

    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        record_count: records.len(),
        subsample_seed: options.subsample.map(|_| options.subsample_seed),
        analyses: selected.iter().map(|a| a.name().to_string()).collect(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut out = create(&path)?;
    manifest.write(&mut out)?;
    out.flush()?;
    written.push(path);
    Ok(written)
}
