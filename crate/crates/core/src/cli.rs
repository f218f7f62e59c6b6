//! Command-line front end.
//!
//! Human-readable summaries go to standard output; machine formats are
//! written only to `--out`-style paths. All randomness derives from the
//! global `--seed` via [`derive_seed`] with a per-command label.
//!
//! Exit codes: 0 ok, 1 selftest failure, 2 usage or validation error,
//! 3 numeric failure (non-convergence, unverifiable planted instance),
//! 4 I/O or malformed input.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::distributed::{distributed_universal_set, load_shards, split_rows};
use crate::error::{Error, Result};
use crate::linalg::io::{read_matrix, write_matrix, MatrixFileRows};
use crate::linalg::{dot, khatri_rao_row_power, lift_matrix, DenseMatrix, DEFAULT_LIFT_CAP};
use crate::oracle::{
    dense_attention, dense_attention_capped, histogram, important_keys, local_mass,
    local_plus_keys_mass, top_k_mass, write_histogram_csv, Adjacency, AttentionFn, AttentionMatrix,
    GridSpec, DEFAULT_DENSE_CAP,
};
use crate::planted::{
    candidate_set, check_threshold_factor, generate_query, generate_stochastic, jl_sketch_cols,
    param_f64, read_indices, read_params, self_attention_ratio, verify_query, write_indices,
    write_params, CandidateMode, GenerateOptions, PlantedInstance, PlantedParams, RecoveryIndex,
    DEFAULT_MAX_ATTEMPTS,
};
use crate::query::{NormalizationMode, QueryEngine, DEFAULT_SAMPLE_CONSTANT};
use crate::seed::derive_seed;
use crate::sensitivity::{
    leverage_scores, lewis_weights, online_leverage_scores, sensitivity_upper_bounds, Estimator,
    SensitivityVector,
};
use crate::streaming::{one_pass_universal_set, two_pass_universal_set, MatrixRows};
use crate::universal::{
    build_universal_set, check_epsilon, BuildOptions, FeatureMap, PowerRoute, UniversalSet,
};

#[derive(Debug, Parser)]
#[command(
    name = "levattn",
    version,
    about = "Universal key sets for large attention scores"
)]
pub struct Cli {
    /// Master seed; every random draw is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Extra diagnostics on standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Universal set of a key matrix.
    Uset(UsetArgs),
    /// Khatri-Rao row power of a key matrix.
    Lift(LiftArgs),
    /// Per-row sensitivity scores.
    Scores(ScoresArgs),
    /// Universal set over a row stream in one or two passes.
    Stream(StreamArgs),
    /// Build and save a query engine.
    Preprocess(PreprocessArgs),
    /// Heavy attention scores of queries against a saved engine.
    Query(QueryArgs),
    /// Simulated sharded protocol.
    Dist(DistArgs),
    /// Planted key/query model.
    #[command(subcommand)]
    Planted(PlantedCommand),
    /// Dense attention matrix (reference oracle).
    Attention(AttentionArgs),
    /// Structural statistics of an attention matrix.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct UsetArgs {
    /// Key matrix (LMAT or CSV).
    pub keys: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Exponent of f(x) = |x|^p; with a feature map, the overall degree 2h.
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// `identity` or `poly:h`, applied to both queries and keys.
    #[arg(long, value_parser = parse_feature_map)]
    pub feature_map: Option<FeatureMap>,
    /// auto | lewis | lift
    #[arg(long, default_value = "auto", value_parser = parse_route)]
    pub route: PowerRoute,
    #[arg(long, default_value_t = 2.0)]
    pub slack: f64,
    /// Universal set file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    pub keys: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub half_p: usize,
    #[arg(long, default_value_t = DEFAULT_LIFT_CAP)]
    pub cap: usize,
    /// Lifted matrix (`.csv` for CSV, LMAT otherwise).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Leverage,
    OnlineLeverage,
    Lewis,
    SensitivityUpperBound,
}

#[derive(Debug, Args)]
pub struct ScoresArgs {
    pub keys: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "leverage")]
    pub estimator: EstimatorArg,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    /// Ridge for online scores.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Score CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    pub keys: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub passes: u8,
    /// Print the memory accounting counters.
    #[arg(long)]
    pub report_memory: bool,
    /// Also write the memory report to this path.
    #[arg(long)]
    pub memory_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Sampled,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    pub keys: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, value_parser = parse_feature_map)]
    pub feature_map: Option<FeatureMap>,
    #[arg(long, value_enum, default_value = "exact")]
    pub mode: ModeArg,
    /// Relative accuracy of the sampled normalizer.
    #[arg(long, default_value_t = 0.25)]
    pub eps_norm: f64,
    /// Oversampling constant of the sampled normalizer.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_CONSTANT)]
    pub c: f64,
    #[arg(long, default_value = "auto", value_parser = parse_route)]
    pub route: PowerRoute,
    #[arg(long, default_value_t = 2.0)]
    pub slack: f64,
    /// Engine file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Engine file written by `preprocess`.
    pub engine: Option<PathBuf>,
    /// Query matrix, one query per row.
    pub queries: Option<PathBuf>,
    /// Report threshold; at least the engine's epsilon.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// CSV of `query,index,score`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    /// Manifest listing shard matrix paths in order.
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Message transcript CSV.
    #[arg(long)]
    pub transcript_out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Subcommand)]
pub enum PlantedCommand {
    /// Draw an instance: keys.lmat, planted.txt and params.txt.
    Gen(PlantedGenArgs),
    /// Draw a model query: q.lmat and hidden.txt.
    Query(PlantedQueryArgs),
    /// Recover the relevant keys of a query.
    Recover(PlantedRecoverArgs),
}

#[derive(Debug, Args)]
pub struct PlantedGenArgs {
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 0.05)]
    pub eps0: f64,
    #[arg(long, default_value_t = 0.01)]
    pub eps1: f64,
    #[arg(long, default_value_t = 0.25)]
    pub delta1: f64,
    #[arg(long, default_value_t = 0.01)]
    pub delta2: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ATTEMPTS)]
    pub max_attempts: usize,
    /// Keep the last draw even if the separation checks fail.
    #[arg(long)]
    pub allow_unverified: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Args)]
pub struct PlantedQueryArgs {
    /// Instance directory from `planted gen`.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub subset_size: usize,
    /// Share of the noise budget used by the query noise.
    #[arg(long, default_value_t = 0.5)]
    pub noise_fraction: f64,
    /// Query number; distinct numbers give independent queries.
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CandidateArg {
    Exact,
    Jl,
}

#[derive(Debug, Args)]
pub struct PlantedRecoverArgs {
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Query directory from `planted query`.
    #[arg(long)]
    pub query_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub threshold_factor: f64,
    #[arg(long, value_enum, default_value = "exact")]
    pub candidates: CandidateArg,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    /// Sketch width for `--candidates jl` (default `ceil(8 ln n / gamma^2)`).
    #[arg(long)]
    pub sketch_cols: Option<usize>,
    /// Candidate threshold (default from the model parameters).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Recovered index file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    pub queries: Option<PathBuf>,
    pub keys: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, value_parser = parse_feature_map)]
    pub feature_map: Option<FeatureMap>,
    #[arg(long, default_value_t = DEFAULT_DENSE_CAP)]
    pub cap: usize,
    /// Attention matrix.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatArg {
    TopK,
    Local,
    LocalPlusKeys,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Attention matrix.
    pub attention: Option<PathBuf>,
    /// Number of top entries summed per row.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Side of the patch grid.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub radius: usize,
    /// Index of a global token adjacent to every token.
    #[arg(long)]
    pub class_token: Option<usize>,
    /// Number of important keys.
    #[arg(long, default_value_t = 32)]
    pub important: usize,
    /// Per-row statistics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "top-k")]
    pub hist_of: StatArg,
    /// Histogram CSV.
    #[arg(long)]
    pub hist_out: Option<PathBuf>,
    #[arg(long)]
    pub selftest: bool,
}

fn parse_feature_map(s: &str) -> std::result::Result<FeatureMap, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_route(s: &str) -> std::result::Result<PowerRoute, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Outcome of a command: an error, a failed selftest, or success.
enum Failure {
    Error(Error),
    Selftest(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                0
            } else {
                let _ = write!(err, "{e}");
                2
            };
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            let _ = writeln!(err, "error: --threads must be at least 1");
            return 2;
        }
        // fails only if a pool already exists, e.g. when run twice in one process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(Failure::Selftest(msg)) => {
            let _ = writeln!(err, "selftest failed: {msg}");
            1
        }
        Err(Failure::Error(e)) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let seed = cli.seed;
    match &cli.command {
        Command::Uset(a) if a.selftest => report(out, "uset", selftest::uset()),
        Command::Uset(a) => cmd_uset(a, out),
        Command::Lift(a) if a.selftest => report(out, "lift", selftest::lift()),
        Command::Lift(a) => cmd_lift(a, out),
        Command::Scores(a) if a.selftest => report(out, "scores", selftest::scores()),
        Command::Scores(a) => cmd_scores(a, out),
        Command::Stream(a) if a.selftest => report(out, "stream", selftest::stream()),
        Command::Stream(a) => cmd_stream(a, out),
        Command::Preprocess(a) if a.selftest => report(out, "preprocess", selftest::preprocess()),
        Command::Preprocess(a) => cmd_preprocess(a, seed, out),
        Command::Query(a) if a.selftest => report(out, "query", selftest::query()),
        Command::Query(a) => cmd_query(a, out),
        Command::Dist(a) if a.selftest => report(out, "dist", selftest::dist()),
        Command::Dist(a) => cmd_dist(a, out),
        Command::Planted(PlantedCommand::Gen(a)) if a.selftest => {
            report(out, "planted gen", selftest::planted_gen())
        }
        Command::Planted(PlantedCommand::Gen(a)) => cmd_planted_gen(a, seed, out),
        Command::Planted(PlantedCommand::Query(a)) if a.selftest => {
            report(out, "planted query", selftest::planted_query())
        }
        Command::Planted(PlantedCommand::Query(a)) => cmd_planted_query(a, seed, out),
        Command::Planted(PlantedCommand::Recover(a)) if a.selftest => {
            report(out, "planted recover", selftest::planted_recover())
        }
        Command::Planted(PlantedCommand::Recover(a)) => cmd_planted_recover(a, seed, out),
        Command::Attention(a) if a.selftest => report(out, "attention", selftest::attention()),
        Command::Attention(a) => cmd_attention(a, out),
        Command::Stats(a) if a.selftest => report(out, "stats", selftest::stats()),
        Command::Stats(a) => cmd_stats(a, out),
    }
}

fn report(
    out: &mut dyn Write,
    name: &str,
    result: std::result::Result<usize, String>,
) -> CmdResult {
    let checks = result.map_err(Failure::Selftest)?;
    writeln!(out, "selftest {name}: ok ({checks} checks)")?;
    Ok(())
}

fn required<'a, T>(value: &'a Option<T>, name: &'static str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::invalid(name, "required unless --selftest is given"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if p.is_finite() && p >= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "p",
            format!("must be finite and >= 1, got {p}"),
        ))
    }
}

fn check_slack(slack: f64) -> Result<()> {
    if slack.is_finite() && slack >= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "slack",
            format!("must be >= 1, got {slack}"),
        ))
    }
}

/// `|x|^p`, or the symmetric feature map whose squared inner product has degree `p`.
fn attention_fn(p: f64, map: Option<&FeatureMap>) -> Result<AttentionFn> {
    check_p(p)?;
    let Some(map) = map else {
        return Ok(AttentionFn::Power(p));
    };
    let degree = match map {
        FeatureMap::Identity => 2,
        FeatureMap::Polynomial(h) => 2 * h,
        FeatureMap::Custom { .. } => unreachable!("not constructible from the command line"),
    };
    if p != degree as f64 {
        return Err(Error::invalid(
            "p",
            format!("feature map {map} gives degree {degree}; pass --p {degree}"),
        ));
    }
    Ok(AttentionFn::symmetric(map.clone()))
}

fn print_set(out: &mut dyn Write, set: &UniversalSet, n: usize) -> std::io::Result<()> {
    writeln!(
        out,
        "universal set: {} of {n} keys (epsilon {}, budget {:.1}, {})",
        set.len(),
        set.epsilon,
        set.budget,
        set.estimator.as_str()
    )?;
    let shown: Vec<String> = set.indices.iter().take(64).map(usize::to_string).collect();
    let more = if set.len() > 64 { " ..." } else { "" };
    writeln!(out, "indices: {}{more}", shown.join(" "))
}

fn cmd_uset(a: &UsetArgs, out: &mut dyn Write) -> CmdResult {
    check_epsilon(a.epsilon)?;
    check_slack(a.slack)?;
    let f = attention_fn(a.p, a.feature_map.as_ref())?;
    let k = read_matrix(required(&a.keys, "keys")?)?;
    let opts = BuildOptions {
        route: a.route,
        slack: a.slack,
        ..BuildOptions::default()
    };
    let set = build_universal_set(&k, a.epsilon, &f, &opts)?;
    print_set(out, &set, k.rows())?;
    if let Some(path) = &a.out {
        write_file(path, |w| set.write_text(w))?;
    }
    Ok(())
}

fn cmd_lift(a: &LiftArgs, out: &mut dyn Write) -> CmdResult {
    if a.half_p == 0 {
        return Err(Error::invalid("half-p", "must be at least 1").into());
    }
    let outp = required(&a.out, "out")?;
    let k = read_matrix(required(&a.keys, "keys")?)?;
    let lifted = lift_matrix(&k, a.half_p, a.cap)?;
    write_matrix(outp, &lifted)?;
    writeln!(
        out,
        "lifted {}x{} to {}x{}",
        k.rows(),
        k.cols(),
        lifted.rows(),
        lifted.cols()
    )?;
    Ok(())
}

fn cmd_scores(a: &ScoresArgs, out: &mut dyn Write) -> CmdResult {
    check_p(a.p)?;
    if !(a.tol > 0.0) {
        return Err(Error::invalid("tol", "must be > 0").into());
    }
    let k = read_matrix(required(&a.keys, "keys")?)?;
    let scores: SensitivityVector = match a.estimator {
        EstimatorArg::Leverage => leverage_scores(&k),
        EstimatorArg::OnlineLeverage => online_leverage_scores(k.cols(), k.iter_rows(), a.ridge)?,
        EstimatorArg::Lewis => lewis_weights(&k, a.p, a.tol, a.max_iter)?,
        EstimatorArg::SensitivityUpperBound => {
            sensitivity_upper_bounds(&k, a.p, a.tol, a.max_iter)?
        }
    };
    let max = scores.scores.iter().copied().fold(0.0, f64::max);
    writeln!(
        out,
        "{} scores for {} rows: sum {:.6}, max {:.6}",
        scores.estimator,
        scores.len(),
        scores.sum(),
        max
    )?;
    if let (Some(it), Some(res)) = (scores.iterations, scores.residual) {
        writeln!(out, "iterations {it}, residual {res:.3e}")?;
    }
    if let Some(path) = &a.out {
        write_file(path, |w| scores.write_csv(w))?;
    }
    Ok(())
}

fn cmd_stream(a: &StreamArgs, out: &mut dyn Write) -> CmdResult {
    check_epsilon(a.epsilon)?;
    let mut rows = MatrixFileRows::open(required(&a.keys, "keys")?)?;
    let outcome = if a.passes == 2 {
        two_pass_universal_set(&mut rows, a.epsilon)?
    } else {
        one_pass_universal_set(&mut rows, a.epsilon)?
    };
    print_set(out, &outcome.set, outcome.memory.rows)?;
    if a.report_memory {
        write!(out, "{}", outcome.memory)?;
    }
    if let Some(path) = &a.memory_out {
        write_file(path, |w| write!(w, "{}", outcome.memory))?;
    }
    if let Some(path) = &a.out {
        write_file(path, |w| outcome.set.write_text(w))?;
    }
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    check_epsilon(a.epsilon)?;
    check_slack(a.slack)?;
    let f = attention_fn(a.p, a.feature_map.as_ref())?;
    let mode = match a.mode {
        ModeArg::Exact => NormalizationMode::Exact,
        ModeArg::Sampled => NormalizationMode::Sampled {
            eps_norm: a.eps_norm,
            c: a.c,
        },
    };
    let outp = required(&a.out, "out")?;
    let k = read_matrix(required(&a.keys, "keys")?)?;
    let opts = BuildOptions {
        route: a.route,
        slack: a.slack,
        ..BuildOptions::default()
    };
    let engine = QueryEngine::preprocess(
        &k,
        a.epsilon,
        &f,
        mode,
        &opts,
        derive_seed(seed, "preprocess/sample"),
    )?;
    let mut w = create(outp)?;
    engine.save(&mut w)?;
    w.flush()?;
    print_set(out, engine.universal_set(), k.rows())?;
    if let Some(s) = engine.sampled() {
        writeln!(
            out,
            "sampled normalizer: {} rows (expected {:.1})",
            s.len(),
            s.expected_count
        )?;
    }
    Ok(())
}

fn cmd_query(a: &QueryArgs, out: &mut dyn Write) -> CmdResult {
    let path = required(&a.engine, "engine")?;
    let qpath = required(&a.queries, "queries")?;
    let engine = QueryEngine::load(&mut BufReader::new(File::open(path)?))?;
    let eps = a.epsilon.unwrap_or(engine.epsilon());
    check_epsilon(eps)?;
    if eps < engine.epsilon() {
        return Err(Error::invalid(
            "epsilon",
            format!(
                "engine was built for epsilon {}; cannot report below it",
                engine.epsilon()
            ),
        )
        .into());
    }
    let qs = read_matrix(qpath)?;
    let mut rows = Vec::new();
    for (i, q) in qs.iter_rows().enumerate() {
        let r = engine.query(q)?;
        let heavy: Vec<&(usize, f64)> = r.heavy.iter().filter(|(_, s)| *s >= eps).collect();
        let flag = if r.degenerate { " (degenerate)" } else { "" };
        writeln!(
            out,
            "query {i}: normalization {:e}{flag}, {} heavy, {} ops",
            r.normalization,
            heavy.len(),
            r.ops
        )?;
        for &&(j, s) in &heavy {
            writeln!(out, "  ({j}, {s})")?;
            rows.push((i, j, s));
        }
    }
    if let Some(p) = &a.out {
        write_file(p, |w| {
            writeln!(w, "query,index,score")?;
            for (i, j, s) in &rows {
                writeln!(w, "{i},{j},{s:?}")?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn cmd_dist(a: &DistArgs, out: &mut dyn Write) -> CmdResult {
    check_epsilon(a.epsilon)?;
    let shards = load_shards(required(&a.manifest, "manifest")?)?;
    let n: usize = shards.iter().map(|s| s.keys.rows()).sum();
    let result = distributed_universal_set(&shards, a.epsilon)?;
    print_set(out, &result.set, n)?;
    writeln!(
        out,
        "{} servers, {} messages, {} words",
        shards.len(),
        result.transcript.messages.len(),
        result.transcript.total_words()
    )?;
    if let Some(p) = &a.out {
        write_file(p, |w| result.set.write_text(w))?;
    }
    if let Some(p) = &a.transcript_out {
        write_file(p, |w| write!(w, "{}", result.transcript))?;
    }
    Ok(())
}

fn cmd_planted_gen(a: &PlantedGenArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let params = PlantedParams {
        n: a.n,
        d: a.d,
        k: a.k,
        eps0: a.eps0,
        eps1: a.eps1,
        delta1: a.delta1,
        delta2: a.delta2,
    };
    params.validate()?;
    let dir = required(&a.out_dir, "out-dir")?;
    let opts = GenerateOptions {
        max_attempts: a.max_attempts,
        require_verified: !a.allow_unverified,
    };
    let gen_seed = derive_seed(seed, "planted/gen");
    let inst = generate_stochastic(&params, gen_seed, &opts)?;
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join("keys.lmat"), &inst.keys)?;
    write_file(&dir.join("planted.txt"), |w| {
        write_indices(w, "planted", &inst.planted)
    })?;
    write_file(&dir.join("params.txt"), |w| {
        write_params(w, &inst, gen_seed)
    })?;
    let v = &inst.verification;
    writeln!(
        out,
        "planted instance: n {}, d {}, |S| {}, attempts {}, verified {}",
        a.n,
        a.d,
        inst.planted.len(),
        v.attempts,
        v.passed()
    )?;
    writeln!(
        out,
        "max correlation within S {:.4} (bound {}), across {:.4} (bound {})",
        v.within.ratio, a.delta1, v.across.ratio, a.delta2
    )?;
    Ok(())
}

fn load_instance(dir: &Path) -> Result<PlantedInstance> {
    let keys = read_matrix(&dir.join("keys.lmat"))?;
    let planted = read_indices(BufReader::new(File::open(dir.join("planted.txt"))?))?;
    let params = read_params(&dir.join("params.txt"))?;
    PlantedInstance::from_parts(
        keys,
        planted,
        param_f64(&params, "delta1")?,
        param_f64(&params, "delta2")?,
    )
}

fn cmd_planted_query(a: &PlantedQueryArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let dir = required(&a.dir, "dir")?;
    let out_dir = required(&a.out_dir, "out-dir")?;
    let inst = load_instance(dir)?;
    let q = generate_query(
        &inst,
        a.subset_size,
        a.noise_fraction,
        derive_seed(seed, &format!("planted/query/{}", a.index)),
    )?;
    let check = verify_query(&inst, &q);
    fs::create_dir_all(out_dir)?;
    write_matrix(
        &out_dir.join("q.lmat"),
        &DenseMatrix::new(1, q.q.len(), q.q.clone())?,
    )?;
    write_file(&out_dir.join("hidden.txt"), |w| {
        write_indices(w, "hidden relevant keys", &q.subset)
    })?;
    writeln!(
        out,
        "query over {} relevant keys; weight sum {:.4}, noise ratio {:.4}, model checks {}",
        q.subset.len(),
        check.weight_sum,
        check.noise_ratio,
        if check.passed() { "pass" } else { "FAIL" }
    )?;
    Ok(())
}

fn cmd_planted_recover(a: &PlantedRecoverArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    check_threshold_factor(a.threshold_factor)?;
    let dir = required(&a.dir, "dir")?;
    let qdir = required(&a.query_dir, "query-dir")?;
    let inst = load_instance(dir)?;
    let rho = a.rho.unwrap_or_else(|| inst.rho());
    let mode = match a.candidates {
        CandidateArg::Exact => CandidateMode::Exact,
        CandidateArg::Jl => CandidateMode::Jl {
            sketch_cols: a
                .sketch_cols
                .unwrap_or_else(|| jl_sketch_cols(inst.n(), a.gamma)),
            gamma: a.gamma,
            seed: derive_seed(seed, "planted/jl"),
        },
    };
    let cands = candidate_set(&inst.keys, rho, mode)?;
    let index = RecoveryIndex::new(&inst, &cands.indices)?;
    let q = read_matrix(&qdir.join("q.lmat"))?;
    if q.rows() != 1 {
        return Err(Error::Format(format!("expected one query row, found {}", q.rows())).into());
    }
    let rec = index.recover(q.row(0), a.threshold_factor)?;
    writeln!(out, "candidates: {} (rho {rho:.6})", cands.indices.len())?;
    let shown: Vec<String> = rec.indices.iter().map(usize::to_string).collect();
    writeln!(out, "recovered: {}", shown.join(" "))?;
    writeln!(out, "ops: {}", rec.ops)?;
    let hidden_path = qdir.join("hidden.txt");
    if hidden_path.exists() {
        let hidden = read_indices(BufReader::new(File::open(hidden_path)?))?;
        writeln!(
            out,
            "match: {}",
            if hidden == rec.indices { "yes" } else { "no" }
        )?;
    }
    if let Some(p) = &a.out {
        write_file(p, |w| write_indices(w, "recovered", &rec.indices))?;
    }
    Ok(())
}

fn cmd_attention(a: &AttentionArgs, out: &mut dyn Write) -> CmdResult {
    let f = attention_fn(a.p, a.feature_map.as_ref())?;
    let qs = read_matrix(required(&a.queries, "queries")?)?;
    let ks = read_matrix(required(&a.keys, "keys")?)?;
    let attn = dense_attention_capped(&qs, &ks, &f, a.cap)?;
    let degenerate = attn.degenerate_rows().iter().filter(|&&d| d).count();
    writeln!(
        out,
        "attention {}x{}: {degenerate} degenerate rows, max row-sum error {:.3e}",
        attn.rows(),
        attn.cols(),
        attn.stochasticity_error()
    )?;
    if let Some(p) = &a.out {
        write_matrix(p, attn.matrix())?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> CmdResult {
    let attn = AttentionMatrix::from_matrix(read_matrix(required(&a.attention, "attention")?)?)?;
    let top = top_k_mass(&attn, a.k)?;
    writeln!(out, "mean top-{} mass: {:.6}", a.k, mean(&top))?;
    let mut columns: Vec<(&str, Vec<f64>)> = vec![("top_k_mass", top)];
    if let Some(side) = a.grid {
        let adj = Adjacency::Grid(GridSpec {
            side,
            radius: a.radius,
            class_token: a.class_token,
        });
        let local = local_mass(&attn, &adj)?;
        let imp = important_keys(&attn, &adj, a.important)?;
        let plus = local_plus_keys_mass(&attn, &adj, &imp.keys)?;
        writeln!(
            out,
            "mean local mass (radius {}): {:.6}",
            a.radius,
            mean(&local)
        )?;
        writeln!(
            out,
            "mean local + {} important keys mass: {:.6}",
            a.important,
            mean(&plus)
        )?;
        let shown: Vec<String> = imp.keys.iter().map(usize::to_string).collect();
        writeln!(out, "important keys: {}", shown.join(" "))?;
        columns.push(("local_mass", local));
        columns.push(("local_plus_keys_mass", plus));
    }
    if let Some(p) = &a.out {
        write_file(p, |w| {
            let names: Vec<&str> = columns.iter().map(|(n, _)| *n).collect();
            writeln!(w, "row,{}", names.join(","))?;
            for i in 0..attn.rows() {
                let vals: Vec<String> =
                    columns.iter().map(|(_, v)| format!("{:?}", v[i])).collect();
                writeln!(w, "{i},{}", vals.join(","))?;
            }
            Ok(())
        })?;
    }
    if let Some(p) = &a.hist_out {
        let name = match a.hist_of {
            StatArg::TopK => "top_k_mass",
            StatArg::Local => "local_mass",
            StatArg::LocalPlusKeys => "local_plus_keys_mass",
        };
        let values = &columns
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::invalid("hist-of", "locality statistics need --grid"))?
            .1;
        let bins = histogram(values, a.bins, 0.0, 1.0)?;
        write_file(p, |w| write_histogram_csv(w, &bins))?;
    }
    Ok(())
}

/// Hand-checkable examples run by `--selftest`.
mod selftest {
    use super::*;
    use crate::streaming::ReplayableStream;

    type Outcome = std::result::Result<usize, String>;

    struct Checks(usize);

    impl Checks {
        fn ensure(&mut self, ok: bool, what: &str) -> std::result::Result<(), String> {
            self.0 += 1;
            if ok {
                Ok(())
            } else {
                Err(what.to_string())
            }
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).expect("selftest matrix")
    }

    fn k3() -> DenseMatrix {
        m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]])
    }

    fn e<T>(r: Result<T>) -> std::result::Result<T, String> {
        r.map_err(|e| e.to_string())
    }

    pub fn uset() -> Outcome {
        let mut c = Checks(0);
        let opts = BuildOptions::default();
        let u = e(build_universal_set(
            &DenseMatrix::identity(3),
            0.5,
            &AttentionFn::Power(2.0),
            &opts,
        ))?;
        c.ensure(
            u.indices == [0, 1, 2] && u.budget == 6.0,
            "I3 at 0.5 keeps every row",
        )?;
        let u = e(build_universal_set(
            &k3(),
            0.7,
            &AttentionFn::Power(2.0),
            &opts,
        ))?;
        c.ensure(u.is_empty(), "scores 2/3 fall below 0.7")?;
        let bad = build_universal_set(&k3(), 1.5, &AttentionFn::Power(2.0), &opts);
        c.ensure(
            matches!(bad, Err(ref err) if err.exit_code() == 2),
            "epsilon 1.5 is rejected",
        )?;
        Ok(c.0)
    }

    pub fn lift() -> Outcome {
        let mut c = Checks(0);
        c.ensure(
            e(khatri_rao_row_power(&[1.0, 2.0], 2, DEFAULT_LIFT_CAP))? == [1.0, 2.0, 2.0, 4.0],
            "[1,2]^2",
        )?;
        let a = e(khatri_rao_row_power(&[1.0, 2.0], 2, DEFAULT_LIFT_CAP))?;
        let b = e(khatri_rao_row_power(&[1.0, 1.0], 2, DEFAULT_LIFT_CAP))?;
        c.ensure(dot(&a, &b) == 9.0, "inner-product identity")?;
        let u = e(khatri_rao_row_power(&[0.0, 0.0, 1.0], 3, DEFAULT_LIFT_CAP))?;
        c.ensure(
            u.len() == 27 && u[26] == 1.0 && u.iter().sum::<f64>() == 1.0,
            "basis vector power",
        )?;
        Ok(c.0)
    }

    pub fn scores() -> Outcome {
        let mut c = Checks(0);
        c.ensure(
            leverage_scores(&DenseMatrix::identity(3)).scores == [1.0; 3],
            "I3 leverage",
        )?;
        c.ensure(
            close(&leverage_scores(&k3()).scores, &[2.0 / 3.0; 3], 1e-12),
            "K3 leverage",
        )?;
        let dup = m(&[&[0.6, 0.8], &[0.6, 0.8]]);
        c.ensure(
            close(&leverage_scores(&dup).scores, &[0.5; 2], 1e-12),
            "duplicated row",
        )?;
        let on = e(online_leverage_scores(
            3,
            DenseMatrix::identity(3).iter_rows(),
            0.0,
        ))?;
        c.ensure(on.scores == [1.0; 3], "online I3")?;
        let on = e(online_leverage_scores(2, [[1.0, 0.0], [1.0, 0.0]], 0.0))?;
        c.ensure(on.scores == [1.0, 1.0], "online repeated row")?;
        let w = e(lewis_weights(&k3(), 2.0, 1e-12, 50))?;
        c.ensure(
            close(&w.scores, &[2.0 / 3.0; 3], 1e-12),
            "p=2 Lewis weights",
        )?;
        let w = e(lewis_weights(&DenseMatrix::identity(3), 1.0, 1e-12, 200))?;
        c.ensure(
            close(&w.scores, &[1.0; 3], 1e-10),
            "p=1 Lewis weights of I3",
        )?;
        c.ensure(
            Estimator::Leverage.to_string() == "leverage",
            "estimator names",
        )?;
        Ok(c.0)
    }

    pub fn stream() -> Outcome {
        let mut c = Checks(0);
        let i3 = DenseMatrix::identity(3);
        let two = e(two_pass_universal_set(&mut MatrixRows::new(&i3), 0.5))?;
        c.ensure(two.set.indices == [0, 1, 2], "two-pass I3")?;
        let one = e(one_pass_universal_set(&mut MatrixRows::new(&i3), 1.0))?;
        c.ensure(
            one.candidates == [0, 1, 2] && one.set.indices == [0, 1, 2],
            "one-pass I3",
        )?;
        let empty = DenseMatrix::zeros(0, 3);
        let mut rows = MatrixRows::new(&empty);
        let out = e(two_pass_universal_set(&mut rows, 0.5))?;
        c.ensure(out.set.is_empty() && rows.rewind().is_ok(), "empty stream")?;
        Ok(c.0)
    }

    fn exact_engine(k: &DenseMatrix, eps: f64) -> std::result::Result<QueryEngine, String> {
        e(QueryEngine::preprocess(
            k,
            eps,
            &AttentionFn::Power(2.0),
            NormalizationMode::Exact,
            &BuildOptions::default(),
            0,
        ))
    }

    pub fn preprocess() -> Outcome {
        let mut c = Checks(0);
        let engine = exact_engine(&DenseMatrix::identity(4), 0.5)?;
        let (n, _, _) = e(engine.normalization(&[1.0, 0.0, 0.0, 0.0]))?;
        c.ensure((n - 1.0).abs() < 1e-12, "normalization of e1 against I4")?;
        let odd = QueryEngine::preprocess(
            &k3(),
            0.5,
            &AttentionFn::Power(3.0),
            NormalizationMode::Exact,
            &BuildOptions::default(),
            0,
        );
        c.ensure(odd.is_err(), "odd p in exact mode is rejected")?;
        let mut buf = Vec::new();
        e(engine.save(&mut buf))?;
        c.ensure(buf.starts_with(b"LENG"), "engine magic")?;
        Ok(c.0)
    }

    pub fn query() -> Outcome {
        let mut c = Checks(0);
        let r = e(exact_engine(&DenseMatrix::identity(3), 0.5)?.query(&[0.0, 1.0, 0.0]))?;
        c.ensure(
            r.heavy.len() == 1 && r.heavy[0].0 == 1 && (r.heavy[0].1 - 1.0).abs() < 1e-12,
            "e2 against I3",
        )?;
        let r = e(exact_engine(&k3(), 0.5)?.query(&[1.0, 1.0]))?;
        c.ensure(
            r.heavy.len() == 1 && r.heavy[0].0 == 2 && (r.heavy[0].1 - 2.0 / 3.0).abs() < 1e-12,
            "[1,1] against K3",
        )?;
        let r = e(exact_engine(&DenseMatrix::identity(3), 0.5)?.query(&[0.0; 3]))?;
        c.ensure(
            r.degenerate && r.heavy.is_empty(),
            "zero query is degenerate",
        )?;
        Ok(c.0)
    }

    pub fn dist() -> Outcome {
        let mut c = Checks(0);
        let k = e(DenseMatrix::identity(2).vstack(&DenseMatrix::identity(2)))?;
        let out = e(distributed_universal_set(&e(split_rows(&k, &[2, 2]))?, 0.4))?;
        c.ensure(out.set.indices == [0, 1, 2, 3], "two identity shards")?;
        c.ensure(out.transcript.total_words() == 20, "transcript words")?;
        let single = e(distributed_universal_set(&e(split_rows(&k3(), &[3]))?, 0.5))?;
        c.ensure(single.set.indices == [0, 1, 2], "single shard")?;
        Ok(c.0)
    }

    fn base_params() -> PlantedParams {
        PlantedParams {
            n: 400,
            d: 64,
            k: 16,
            eps0: 0.05,
            eps1: 0.01,
            delta1: 0.25,
            delta2: 0.01,
        }
    }

    pub fn planted_gen() -> Outcome {
        let mut c = Checks(0);
        c.ensure(base_params().validate().is_ok(), "k = d/4 accepted")?;
        let third = PlantedParams {
            d: 48,
            ..base_params()
        };
        c.ensure(third.validate().is_err(), "k = d/3 rejected")?;
        let low = PlantedParams {
            delta1: 0.2,
            ..base_params()
        };
        c.ensure(low.validate().is_err(), "delta1 < 4/k rejected")?;
        Ok(c.0)
    }

    fn toy_instance() -> std::result::Result<PlantedInstance, String> {
        e(PlantedInstance::from_parts(
            DenseMatrix::identity(8),
            vec![0, 1, 2, 3],
            0.1,
            0.05,
        ))
    }

    pub fn planted_query() -> Outcome {
        let mut c = Checks(0);
        let inst = toy_instance()?;
        let q = e(generate_query(&inst, 1, 0.5, 1))?;
        c.ensure(
            q.weights[0] >= 0.4 && q.weights[0] <= 1.0,
            "single-key weight range",
        )?;
        c.ensure(verify_query(&inst, &q).passed(), "query model checks")?;
        c.ensure(
            generate_query(&inst, 3, 0.5, 1).is_err(),
            "infeasible subset size rejected",
        )?;
        Ok(c.0)
    }

    pub fn planted_recover() -> Outcome {
        let mut c = Checks(0);
        let inst = toy_instance()?;
        let all: Vec<usize> = (0..8).collect();
        let idx = e(RecoveryIndex::new(&inst, &all))?;
        c.ensure(
            e(idx.recover(&[0.0; 8], 2.0))?.indices.is_empty(),
            "zero query",
        )?;
        let q = e(generate_query(&inst, 2, 0.5, 4))?;
        c.ensure(
            e(idx.recover(&q.q, 2.0))?.indices == q.subset,
            "model query recovered",
        )?;
        c.ensure(
            (0..8).all(|i| self_attention_ratio(&DenseMatrix::identity(8), i) == 1.0),
            "identity self-attention ratio",
        )?;
        Ok(c.0)
    }

    pub fn attention() -> Outcome {
        let mut c = Checks(0);
        let i2 = DenseMatrix::identity(2);
        let a = e(dense_attention(&i2, &i2, &AttentionFn::Power(2.0)))?;
        c.ensure(a.matrix() == &i2, "Q = K = I2")?;
        let a = e(dense_attention(
            &m(&[&[1.0, 1.0]]),
            &k3(),
            &AttentionFn::Power(2.0),
        ))?;
        c.ensure(
            close(a.row(0), &[1.0 / 6.0, 1.0 / 6.0, 4.0 / 6.0], 1e-15),
            "[1,1] against K3",
        )?;
        let eps = 0.01;
        let k = m(&[&[eps, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let a = e(dense_attention(
            &m(&[&[1.0, 0.0]]),
            &k,
            &AttentionFn::Power(1.0),
        ))?;
        c.ensure(
            close(
                a.row(0),
                &[eps / (1.0 + eps), 1.0 / (1.0 + eps), 0.0],
                1e-15,
            ),
            "|x| attention",
        )?;
        Ok(c.0)
    }

    pub fn stats() -> Outcome {
        let mut c = Checks(0);
        let uniform = e(AttentionMatrix::from_matrix(e(DenseMatrix::new(
            1,
            100,
            vec![0.01; 100],
        ))?))?;
        c.ensure(
            (e(top_k_mass(&uniform, 32))?[0] - 0.32).abs() < 1e-12,
            "uniform top-32",
        )?;
        let mut hot = vec![0.0; 10];
        hot[3] = 1.0;
        let hot = e(AttentionMatrix::from_matrix(e(DenseMatrix::new(
            1, 10, hot,
        ))?))?;
        c.ensure(e(top_k_mass(&hot, 1))?[0] == 1.0, "one-hot row")?;
        let grid = GridSpec {
            side: 14,
            radius: 3,
            class_token: None,
        };
        let center = 7 * 14 + 7;
        c.ensure(
            (0..196).filter(|&j| grid.is_neighbor(center, j)).count() == 25,
            "14x14 radius-3 neighbors",
        )?;
        Ok(c.0)
    }
}
