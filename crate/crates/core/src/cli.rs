//! Command-line front end: `delta`, `prune`, `amplify`, `merge`, `analyze`,
//! `metrics`. Exit codes: 0 success, 2 usage or validation error, 3 I/O
//! error, 4 oracle error.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::amplify::{
    assemble, build_schedule, dare_schedule, default_amplify_grid, default_rate_ladder,
    default_reduction_grid, search, AmplificationProfile, ProfileMethod, SearchMethod,
};
use crate::archive::TensorArchive;
use crate::delta::{compute_delta, merge_weighted, offset_quantiles, quantiles_of, DeltaModel};
use crate::error::{Error, Result};
use crate::metrics::{structure_report, TaskScoreSet};
use crate::oracle::{OracleKind, OracleSpec};
use crate::pruners::{prune_dare, prune_dp, PruneMethod, SparseDelta};
use crate::significance::{
    compute_significance, plan_layer_rates, plan_rates, PruneRatePlan, SigNormalization,
    SignificanceConfig, ThresholdScope, DEFAULT_LAMBDA, DEFAULT_OUTLIER_FACTOR,
};
use crate::topology::{parse_topology, NamingRule};

/// Every knob of a run; serialized as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub base_path: Option<PathBuf>,
    pub finetuned_paths: Vec<PathBuf>,
    pub method: PruneMethod,
    /// Target pruning rate; the drop probability for `dare`.
    pub alpha: f64,
    pub lambda: f64,
    pub n_factor: f64,
    pub threshold_scope: ThresholdScope,
    pub sig_normalization: SigNormalization,
    pub rate_ladder: Option<Vec<f64>>,
    pub gamma_grid: Option<Vec<f64>>,
    pub search: SearchMethod,
    pub bands: usize,
    pub oracle: OracleKind,
    pub oracle_command: Option<String>,
    pub oracle_timeout_secs: f64,
    pub oracle_deterministic: bool,
    pub probe_seed: u64,
    pub probe_batch: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub naming_rules: Option<Vec<NamingRule>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            base_path: None,
            finetuned_paths: Vec::new(),
            method: PruneMethod::Dp,
            alpha: 0.9,
            lambda: DEFAULT_LAMBDA,
            n_factor: DEFAULT_OUTLIER_FACTOR,
            threshold_scope: ThresholdScope::Global,
            sig_normalization: SigNormalization::PerParameter,
            rate_ladder: None,
            gamma_grid: None,
            search: SearchMethod::Method2,
            bands: 4,
            oracle: OracleKind::ProxyReconstruction,
            oracle_command: None,
            oracle_timeout_secs: 600.0,
            oracle_deterministic: false,
            probe_seed: 0,
            probe_batch: 16,
            seed: 0,
            output_dir: None,
            naming_rules: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Argument(format!("config {}: {e}", path.display())))
    }

    pub fn rules(&self) -> Vec<NamingRule> {
        self.naming_rules.clone().unwrap_or_else(NamingRule::defaults)
    }

    pub fn significance(&self) -> SignificanceConfig {
        SignificanceConfig {
            outlier_factor: self.n_factor,
            scope: self.threshold_scope,
            normalization: self.sig_normalization,
        }
    }

    pub fn oracle_spec(&self) -> OracleSpec {
        let mut spec = OracleSpec::new(self.oracle)
            .with("probe_seed", self.probe_seed)
            .with("probe_batch", self.probe_batch)
            .with("timeout_secs", self.oracle_timeout_secs)
            .with("deterministic", self.oracle_deterministic);
        if let Some(c) = &self.oracle_command {
            spec = spec.with("command", c);
        }
        if let Some(b) = &self.base_path {
            spec = spec.with("base_path", b.display());
        }
        spec
    }

    fn base(&self) -> Result<&Path> {
        self.base_path
            .as_deref()
            .ok_or_else(|| Error::Argument("base_path is required".into()))
    }

    fn output(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::Argument("output_dir is required".into()))
    }

    fn validate(&self) -> Result<()> {
        self.base()?;
        self.output()?;
        if self.finetuned_paths.is_empty() {
            return Err(Error::Argument("finetuned_paths must list at least one checkpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dppa", version, about = "Prune, amplify and merge delta parameters of fine-tuned checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `finetuned - base` as a delta archive.
    Delta {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON list of naming rules.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Sparsify the delta of every fine-tuned checkpoint.
    Prune(ConfigArgs),
    /// Prune, then search per-partition amplification factors.
    Amplify(ConfigArgs),
    /// Add delta or sparse archives onto the base checkpoint.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated per-delta coefficients (default all 1.0).
        #[arg(long, value_delimiter = ',')]
        coefficients: Option<Vec<f64>>,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(required = true)]
        deltas: Vec<PathBuf>,
    },
    /// Offset quantiles of a delta; structure counts of a sparse delta.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        percentiles: Vec<f64>,
        /// Units whose row/column kept counts to report.
        #[arg(long, value_delimiter = ',')]
        units: Vec<String>,
        /// Multiply reported offsets by this factor.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Task and domain ratios from a task-score file.
    Metrics {
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long = "finetuned")]
    pub finetuned: Vec<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_factor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub rate_ladder: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub gamma_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub search: Option<String>,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long)]
    pub oracle_command: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Argument(format!("unknown {what} {s:?}")))
}

impl ConfigArgs {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.base {
            c.base_path = Some(v.clone());
        }
        if !self.finetuned.is_empty() {
            c.finetuned_paths = self.finetuned.clone();
        }
        if let Some(v) = &self.method {
            c.method = v.parse()?;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.n_factor {
            c.n_factor = v;
        }
        if let Some(v) = &self.rate_ladder {
            c.rate_ladder = Some(v.clone());
        }
        if let Some(v) = &self.gamma_grid {
            c.gamma_grid = Some(v.clone());
        }
        if let Some(v) = &self.search {
            c.search = parse_enum("search method", v)?;
        }
        if let Some(v) = self.bands {
            c.bands = v;
        }
        if let Some(v) = &self.oracle {
            c.oracle = parse_enum("oracle", v)?;
        }
        if let Some(v) = &self.oracle_command {
            c.oracle_command = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = Some(v.clone());
        }
        Ok(c)
    }
}

fn load_rules(path: Option<&Path>) -> Result<Vec<NamingRule>> {
    match path {
        None => Ok(NamingRule::defaults()),
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Argument(format!("rules {}: {e}", p.display()))),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn prepare_output(config: &PipelineConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = config.output()?.to_path_buf();
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    Ok(dir)
}

/// Loads either a plain delta archive or a sparse one, as a delta.
pub fn load_any_delta(path: &Path, rules: &[NamingRule]) -> Result<DeltaModel> {
    let archive = TensorArchive::load(path)?;
    if archive.metadata.get("kind").map(String::as_str) == Some("sparse") {
        Ok(SparseDelta::from_archive(&archive, rules)?.to_delta())
    } else {
        DeltaModel::from_archive(&archive, rules)
    }
}

pub fn cmd_delta(base: &Path, finetuned: &Path, out: &Path, rules: &[NamingRule]) -> Result<DeltaModel> {
    let base = TensorArchive::load(base)?;
    let ft = TensorArchive::load(finetuned)?;
    let topology = parse_topology(&base, rules)?;
    let delta = compute_delta(&base, &ft, &topology)?;
    delta.to_archive().save(out)?;
    Ok(delta)
}

pub fn cmd_merge(
    base: &Path,
    deltas: &[PathBuf],
    coefficients: Option<&[f64]>,
    out: &Path,
    rules: &[NamingRule],
) -> Result<()> {
    let base = TensorArchive::load(base)?;
    let models = deltas
        .iter()
        .map(|p| load_any_delta(p, rules))
        .collect::<Result<Vec<_>>>()?;
    let ones = vec![1.0; models.len()];
    let merged = merge_weighted(&base, &models, coefficients.unwrap_or(&ones))?;
    merged.save(out)
}

fn load_delta_for(config: &PipelineConfig, finetuned: &Path) -> Result<DeltaModel> {
    let base = TensorArchive::load(config.base()?)?;
    let ft = TensorArchive::load(finetuned)?;
    let topology = parse_topology(&base, &config.rules())?;
    compute_delta(&base, &ft, &topology)
}

/// Rate plan for the deterministic methods at `alpha`.
pub fn plan_for(config: &PipelineConfig, delta: &DeltaModel, alpha: f64) -> Result<PruneRatePlan> {
    match config.method {
        PruneMethod::Magnitude => {
            let counts: Vec<usize> = delta.units.iter().map(|t| t.numel()).collect();
            PruneRatePlan::uniform(&delta.topology.units, &counts, alpha)
        }
        PruneMethod::Owl => {
            let r = compute_significance(delta, &SignificanceConfig::with_factor(config.n_factor))?;
            plan_layer_rates(&r, alpha, config.lambda)
        }
        PruneMethod::Dp => {
            let r = compute_significance(delta, &config.significance())?;
            plan_rates(&r, alpha, config.lambda)
        }
        PruneMethod::Dare => Err(Error::Argument("dare has no rate plan".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub finetuned: PathBuf,
    pub output: PathBuf,
    pub method: PruneMethod,
    pub target: f64,
    pub realized_sparsity: f64,
    pub kept: usize,
    pub total: usize,
    /// Largest `|unit sparsity - unit target|` over units (deterministic methods).
    pub max_unit_deviation: Option<f64>,
}

pub fn prune_one(config: &PipelineConfig, delta: &DeltaModel) -> Result<SparseDelta> {
    match config.method {
        PruneMethod::Dare => prune_dare(delta, config.alpha, config.seed),
        method => {
            let plan = plan_for(config, delta, config.alpha)?;
            let mut s = prune_dp(delta, &plan)?;
            s.method = method;
            Ok(s)
        }
    }
}

pub fn cmd_prune(config: &PipelineConfig) -> Result<Vec<PruneSummary>> {
    let dir = prepare_output(config)?;
    let mut summaries = Vec::new();
    for (i, ft) in config.finetuned_paths.iter().enumerate() {
        let delta = load_delta_for(config, ft)?;
        let sparse = prune_one(config, &delta)?;
        let output = dir.join(format!("sparse_{i}.dppa"));
        sparse.to_archive().save(&output)?;
        if let Some(plan) = &sparse.rate_plan {
            write_json(&dir.join(format!("plan_{i}.json")), plan)?;
        }
        let max_unit_deviation = sparse.rate_plan.as_ref().map(|plan| {
            plan.units
                .iter()
                .enumerate()
                .map(|(u, r)| (sparse.unit_sparsity(u) - r.theta).abs())
                .fold(0.0, f64::max)
        });
        summaries.push(PruneSummary {
            finetuned: ft.clone(),
            output,
            method: sparse.method,
            target: config.alpha,
            realized_sparsity: sparse.realized_sparsity(),
            kept: sparse.total_kept(),
            total: sparse.total_count(),
            max_unit_deviation,
        });
    }
    write_json(&dir.join("summary.json"), &summaries)?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplifySummary {
    pub finetuned: PathBuf,
    pub output: PathBuf,
    pub trace: PathBuf,
    pub method: ProfileMethod,
    pub gammas: Vec<f64>,
    pub final_score: f64,
    pub oracle_calls: usize,
    pub cache_hits: usize,
    pub reproducible: bool,
}

/// Runs pruning plus factor search for one delta.
pub fn amplify_one(config: &PipelineConfig, delta: &DeltaModel) -> Result<(SparseDelta, AmplificationProfile)> {
    let spec = config.oracle_spec();
    let mut oracle = spec.build(delta)?;
    let (schedule, grid, method) = match config.method {
        PruneMethod::Dare => {
            let sparse = prune_dare(delta, config.alpha, config.seed)?;
            let grid = config.gamma_grid.clone().unwrap_or_else(default_reduction_grid);
            (dare_schedule(&sparse, config.bands)?, grid, SearchMethod::Method2)
        }
        _ => {
            let plan = plan_for(config, delta, config.alpha)?;
            let ladder = config.rate_ladder.clone().unwrap_or_else(|| default_rate_ladder(config.alpha));
            if ladder.last() != Some(&config.alpha) {
                return Err(Error::Argument(format!(
                    "rate ladder must end at alpha {}, got {ladder:?}",
                    config.alpha
                )));
            }
            let grid = config.gamma_grid.clone().unwrap_or_else(default_amplify_grid);
            (build_schedule(delta, &plan, &ladder)?, grid, config.search)
        }
    };
    let mut profile = search(&schedule, method, oracle.as_mut(), &grid)?;
    if config.method == PruneMethod::Dare {
        profile.method = ProfileMethod::DareReduction;
    }
    let mut sparse = assemble(&schedule, &profile.gammas)?;
    if config.method != PruneMethod::Dare {
        sparse.method = config.method;
    }
    Ok((sparse, profile))
}

pub fn cmd_amplify(config: &PipelineConfig) -> Result<Vec<AmplifySummary>> {
    let dir = prepare_output(config)?;
    let mut summaries = Vec::new();
    for (i, ft) in config.finetuned_paths.iter().enumerate() {
        let delta = load_delta_for(config, ft)?;
        let (sparse, profile) = amplify_one(config, &delta)?;
        let output = dir.join(format!("amplified_{i}.dppa"));
        sparse.to_archive().save(&output)?;
        let trace = dir.join(format!("trace_{i}.jsonl"));
        profile.write_trace_jsonl(BufWriter::new(fs::File::create(&trace)?))?;
        write_json(&dir.join(format!("profile_{i}.json")), &profile)?;
        summaries.push(AmplifySummary {
            finetuned: ft.clone(),
            output,
            trace,
            method: profile.method,
            gammas: profile.gammas.clone(),
            final_score: profile.final_score,
            oracle_calls: profile.oracle_calls,
            cache_hits: profile.cache_hits,
            reproducible: profile.reproducible,
        });
    }
    write_json(&dir.join("summary.json"), &summaries)?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub quantiles: PathBuf,
    pub structure_json: Option<PathBuf>,
    pub structure_csv: Option<PathBuf>,
}

pub fn cmd_analyze(
    input: &Path,
    output_dir: &Path,
    percentiles: &[f64],
    units: &[String],
    scale: f64,
    rules: &[NamingRule],
) -> Result<AnalyzeSummary> {
    let archive = TensorArchive::load(input)?;
    fs::create_dir_all(output_dir)?;
    let quantiles = output_dir.join("quantiles.json");
    let mut summary = AnalyzeSummary { quantiles: quantiles.clone(), structure_json: None, structure_csv: None };
    if archive.metadata.get("kind").map(String::as_str) == Some("sparse") {
        let sparse = SparseDelta::from_archive(&archive, rules)?;
        // offsets of the elements the sparse delta keeps
        let kept = sparse.values.iter().zip(&sparse.masks).flat_map(|(v, m)| {
            m.iter_ones().map(move |i| v.values[i])
        });
        let report = quantiles_of(kept.chain(sparse.passthrough.values().flat_map(|t| t.values.iter().copied())), percentiles)?;
        write_json(&quantiles, &report.scaled(scale))?;
        let names: Vec<&str> = units.iter().map(String::as_str).collect();
        let structure = structure_report(&sparse, &names)?;
        let sj = output_dir.join("structure.json");
        let sc = output_dir.join("structure.csv");
        write_json(&sj, &structure)?;
        structure.write_csv(&sparse, BufWriter::new(fs::File::create(&sc)?))?;
        summary.structure_json = Some(sj);
        summary.structure_csv = Some(sc);
    } else {
        let delta = DeltaModel::from_archive(&archive, rules)?;
        write_json(&quantiles, &offset_quantiles(&delta, percentiles)?.scaled(scale))?;
    }
    Ok(summary)
}

pub fn cmd_metrics(scores: &[PathBuf], out: Option<&Path>) -> Result<Vec<crate::metrics::DomainReport>> {
    let reports = scores
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            TaskScoreSet::from_json(&text)
                .map_err(|e| Error::Argument(format!("{}: {e}", p.display())))?
                .report()
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(out) = out {
        write_json(out, &reports)?;
    }
    Ok(reports)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Delta { base, finetuned, out, rules } => {
            let rules = load_rules(rules.as_deref())?;
            let delta = cmd_delta(&base, &finetuned, &out, &rules)?;
            eprintln!(
                "wrote {} ({} linear units, {} passthrough tensors)",
                out.display(),
                delta.units.len(),
                delta.passthrough.len()
            );
            Ok(())
        }
        Command::Prune(args) => print_json(&cmd_prune(&args.resolve()?)?),
        Command::Amplify(args) => print_json(&cmd_amplify(&args.resolve()?)?),
        Command::Merge { base, out, coefficients, rules, deltas } => {
            let rules = load_rules(rules.as_deref())?;
            cmd_merge(&base, &deltas, coefficients.as_deref(), &out, &rules)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Analyze { input, output_dir, percentiles, units, scale, rules } => {
            let rules = load_rules(rules.as_deref())?;
            print_json(&cmd_analyze(&input, &output_dir, &percentiles, &units, scale, &rules)?)
        }
        Command::Metrics { scores, out } => print_json(&cmd_metrics(&scores, out.as_deref())?),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let c = PipelineConfig::default();
        assert_eq!((c.alpha, c.lambda, c.n_factor), (0.9, 0.08, 5.0));
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), c);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"alhpa":0.5}"#).is_err());

        let args = ConfigArgs {
            method: Some("owl".into()),
            alpha: Some(0.8),
            search: Some("method1".into()),
            oracle: Some("proxy_cosine".into()),
            ..Default::default()
        };
        let r = args.resolve().unwrap();
        assert_eq!(r.method, PruneMethod::Owl);
        assert_eq!(r.search, SearchMethod::Method1);
        assert_eq!(r.oracle, OracleKind::ProxyCosine);
        assert_eq!(r.alpha, 0.8);

        let bad = ConfigArgs { method: Some("sparsegpt".into()), ..Default::default() };
        assert_eq!(bad.resolve().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_required_keys() {
        let c = PipelineConfig::default();
        assert!(matches!(cmd_prune(&c), Err(Error::Argument(_))));
    }

    #[test]
    fn usage_errors_exit_2() {
        for args in [&["dppa", "frobnicate"][..], &["dppa", "merge", "--base", "x", "--out", "y"]] {
            let e = Cli::try_parse_from(args).unwrap_err();
            assert!(e.use_stderr(), "{args:?}");
        }
        assert!(!Cli::try_parse_from(["dppa", "--help"]).unwrap_err().use_stderr());
    }
}
