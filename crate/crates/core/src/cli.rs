//! Command-line front end: `quantize`, `search`, `eval` and `curves`.
//!
//! Exit codes are 0 on success, 2 for usage errors (bad flags, missing
//! inputs, invalid quantization or search settings) and 1 for failures while
//! running. `IVQ_THREADS` caps the worker threads used for evaluation.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{load_sequences, CalibSet};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::curves::{read_curves, render_svg, write_curves, Panel};
use crate::error::Error;
use crate::invariance::transform_tensors;
use crate::model::{cross_entropy, ModelParams};
use crate::quant::{max_abs_error, QuantSpec, QuantizedMatrix};
use crate::search::{LayerMatch, Moves, ObjectiveParts, Search, SearchConfig};

pub const VERSION: &str = concat!("invarexplore ", env!("CARGO_PKG_VERSION"));

/// Bit width that means "leave weights in full precision".
pub const IDENTITY_BITS: u8 = 16;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "invarexplore", version, about = "Low-bit group quantization with invariant-transform search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Round-to-nearest quantization with per-tensor error statistics.
    Quantize(QuantizeArgs),
    /// Hill-climbing search over FFN transforms, then quantization.
    Search(SearchArgs),
    /// Cross-entropy and perplexity of a checkpoint on a token corpus.
    Eval(EvalArgs),
    /// Export the optimization curves of a search run.
    Curves(CurvesArgs),
}

#[derive(Debug, Clone, Args)]
pub struct QuantArgs {
    /// Code width: 1, 2, 3, 4, 8, or 16 for no quantization.
    #[arg(long, default_value_t = 2, value_parser = parse_bits)]
    pub bits: u8,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    /// Use the raw group range instead of widening it to include zero.
    #[arg(long)]
    pub strict: bool,
}

impl QuantArgs {
    pub fn spec(&self) -> CliResult<Option<QuantSpec>> {
        if self.bits == IDENTITY_BITS {
            return Ok(None);
        }
        let spec = QuantSpec::new(self.bits, self.group_size).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Some(if self.strict { spec.strict() } else { spec }))
    }
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[arg(value_parser = existing_file)]
    pub model: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report path [default: the output path with a .json extension].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(value_parser = existing_file, required_unless_present = "replay")]
    pub model: Option<PathBuf>,
    #[arg(value_parser = existing_file, required_unless_present = "replay")]
    pub calib: Option<PathBuf>,
    /// Held-out corpus for before/after perplexity.
    #[arg(long, value_parser = existing_file)]
    pub heldout: Option<PathBuf>,
    /// Number of calibration sequences to read.
    #[arg(long, default_value_t = 4)]
    pub calib_seqs: usize,
    /// Tokens per sequence [default: the model context].
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Number of held-out sequences to read [default: all].
    #[arg(long)]
    pub heldout_seqs: Option<usize>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub sigma_s: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub sigma_r: f64,
    /// Fraction of hidden neurons moved per proposal.
    #[arg(long, default_value_t = 0.10)]
    pub subset: f64,
    /// Initial cross-entropy : weighted-MSE ratio that fixes alpha.
    #[arg(long, default_value_t = 10.0)]
    pub alpha_ratio: f64,
    /// Fixed alpha, overriding --alpha-ratio.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Layers in the activation-matching term: `all` or a count of evenly spaced layers.
    #[arg(long, default_value = "all", value_parser = parse_layer_match)]
    pub match_layers: LayerMatch,
    /// Transform families to search: `all` or a comma list of permute, scale, rotate.
    #[arg(long, default_value = "all", value_parser = parse_moves)]
    pub moves: Moves,
    /// Steps in the sliding acceptance-rate window.
    #[arg(long, default_value_t = 500)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Curves CSV [default: curves.csv next to the output].
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Run manifest [default: manifest.json next to the output].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Re-run the inputs and configuration recorded in a manifest.
    #[arg(long, value_parser = existing_file)]
    pub replay: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(value_parser = existing_file)]
    pub model: PathBuf,
    #[arg(value_parser = existing_file)]
    pub corpus: PathBuf,
    /// Also evaluate the model fake-quantized to this width.
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<u8>,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long)]
    pub strict: bool,
    /// Number of sequences to read [default: all].
    #[arg(long)]
    pub max_seqs: Option<usize>,
    /// Tokens per sequence [default: the model context].
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CurvesFormat {
    Csv,
    SvgPlot,
}

#[derive(Debug, Clone, Args)]
pub struct CurvesArgs {
    /// Run directory holding curves.csv, or the CSV itself.
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = CurvesFormat::SvgPlot)]
    pub format: CurvesFormat,
    /// Output directory [default: <run-dir>/plots].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b @ (1 | 2 | 3 | 4 | 8 | IDENTITY_BITS)) => Ok(b),
        _ => Err(format!("`{s}` is not one of 1, 2, 3, 4, 8, 16")),
    }
}

fn parse_layer_match(s: &str) -> Result<LayerMatch, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(LayerMatch::All);
    }
    s.parse()
        .map(LayerMatch::Count)
        .map_err(|_| format!("`{s}` is neither `all` nor a layer count"))
}

fn parse_moves(s: &str) -> Result<Moves, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Moves::ALL);
    }
    let mut m = Moves {
        permute: false,
        scale: false,
        rotate: false,
    };
    for part in s.split(',') {
        match part.trim() {
            "permute" => m.permute = true,
            "scale" => m.scale = true,
            "rotate" => m.rotate = true,
            other => return Err(format!("unknown move `{other}`")),
        }
    }
    Ok(m)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() && !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for(&args));
            }
            return e.exit_code();
        }
    };
    match configure_threads().and_then(|()| dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Usage line of the subcommand named in `args`, or of the whole program.
fn usage_for(args: &[OsString]) -> clap::builder::StyledStr {
    let mut cmd = Cli::command();
    cmd.build();
    let name = args.get(1).and_then(|a| a.to_str()).unwrap_or_default();
    match cmd.find_subcommand_mut(name) {
        Some(sub) => sub.render_usage(),
        None => cmd.render_usage(),
    }
}

pub fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::Quantize(a) => cmd_quantize(a).map(|_| ()),
        Command::Search(a) => cmd_search(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Curves(a) => cmd_curves(a).map(|_| ()),
    }
}

/// Sizes the global rayon pool from `IVQ_THREADS` when it is set. A pool that
/// already exists is left alone.
fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("IVQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("IVQ_THREADS=`{v}` is not a positive integer")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_model(path: &Path) -> CliResult<ModelParams> {
    Ok(ModelParams::from_checkpoint(&read_checkpoint(path)?)?)
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    ensure_parent(path)?;
    Ok(write_checkpoint(path, ckpt)?)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Ok(())
        }
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub max_abs_error: f64,
    /// Mean group scale; absent when weights stay in full precision.
    pub mean_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub model: PathBuf,
    pub out: PathBuf,
    pub bits: u8,
    pub group_size: usize,
    pub strict: bool,
    pub tensors: Vec<TensorReport>,
    pub max_abs_error: f64,
    /// Mean over every group of every tensor.
    pub mean_scale: Option<f64>,
}

pub fn cmd_quantize(args: &QuantizeArgs) -> CliResult<QuantizeReport> {
    let spec = args.quant.spec()?;
    let params = load_model(&args.model)?;
    let mut tensors = Vec::new();
    let (mut scale_sum, mut groups) = (0.0, 0usize);
    for (name, w) in params.weights() {
        let (rows, cols) = w.shape();
        let (max_err, mean_scale) = match &spec {
            None => (0.0, None),
            Some(spec) => {
                let q = QuantizedMatrix::quantize(w, spec)?;
                scale_sum += q.scales.iter().sum::<f64>();
                groups += q.n_groups();
                (max_abs_error(w, &q.dequantize()), Some(q.mean_scale()))
            }
        };
        tensors.push(TensorReport {
            name,
            rows,
            cols,
            max_abs_error: max_err,
            mean_scale,
        });
    }
    let ckpt = match &spec {
        None => params.to_checkpoint(),
        Some(spec) => params.to_quantized_checkpoint(spec)?,
    };
    save_checkpoint(&args.out, &ckpt)?;

    let report = QuantizeReport {
        model: args.model.clone(),
        out: args.out.clone(),
        bits: args.quant.bits,
        group_size: args.quant.group_size,
        strict: args.quant.strict,
        max_abs_error: tensors.iter().map(|t| t.max_abs_error).fold(0.0, f64::max),
        mean_scale: (groups > 0).then(|| scale_sum / groups as f64),
        tensors,
    };
    println!("{:<28} {:>10} {:>14} {:>12}", "tensor", "shape", "max |err|", "mean scale");
    for t in &report.tensors {
        println!(
            "{:<28} {:>10} {:>14.6e} {:>12}",
            t.name,
            format!("{}x{}", t.rows, t.cols),
            t.max_abs_error,
            t.mean_scale.map_or("-".into(), |s| format!("{s:.6}"))
        );
    }
    println!(
        "overall: max |err| {:.6e}, mean scale {}",
        report.max_abs_error,
        report.mean_scale.map_or("-".into(), |s| format!("{s:.6}"))
    );
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("json"));
    write_json(&report_path, &report)?;
    Ok(report)
}

/// Everything a search reads, as recorded in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchInputs {
    pub model: PathBuf,
    pub calib: PathBuf,
    pub heldout: Option<PathBuf>,
    pub calib_seqs: usize,
    pub seq_len: Option<usize>,
    pub heldout_seqs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutputs {
    pub checkpoint: PathBuf,
    pub curves: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutPerplexity {
    pub full_precision: f64,
    pub rtn: f64,
    pub searched: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub alpha: f64,
    pub initial: ObjectiveParts,
    pub best: ObjectiveParts,
    pub accepted: usize,
    pub heldout_perplexity: Option<HeldoutPerplexity>,
    pub checkpoint_sha256: String,
    pub curves_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: SearchConfig,
    pub inputs: SearchInputs,
    pub outputs: SearchOutputs,
    pub wall_clock_seconds: f64,
    pub metrics: RunMetrics,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
    }
}

impl SearchArgs {
    pub fn inputs(&self) -> CliResult<SearchInputs> {
        let missing = || CliError::Usage("model and calib are required without --replay".into());
        Ok(SearchInputs {
            model: self.model.clone().ok_or_else(missing)?,
            calib: self.calib.clone().ok_or_else(missing)?,
            heldout: self.heldout.clone(),
            calib_seqs: self.calib_seqs,
            seq_len: self.seq_len,
            heldout_seqs: self.heldout_seqs,
        })
    }

    pub fn config(&self) -> CliResult<SearchConfig> {
        let cfg = SearchConfig {
            steps: self.steps,
            sigma_scale: self.sigma_s,
            sigma_rotation: self.sigma_r,
            subset_fraction: self.subset,
            alpha_ratio: self.alpha_ratio,
            alpha: self.alpha,
            matched_layers: self.match_layers.clone(),
            quant: self.quant.spec()?,
            seed: self.seed,
            moves: self.moves,
            window: self.window,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn outputs(&self) -> SearchOutputs {
        let dir = self.out.parent().map(Path::to_path_buf).unwrap_or_default();
        SearchOutputs {
            checkpoint: self.out.clone(),
            curves: self.curves.clone().unwrap_or_else(|| dir.join("curves.csv")),
            manifest: self.manifest.clone().unwrap_or_else(|| dir.join("manifest.json")),
        }
    }
}

fn load_corpus(path: &Path, max: Option<usize>, seq_len: Option<usize>, params: &ModelParams) -> CliResult<CalibSet> {
    let c = params.config;
    let seq_len = seq_len.unwrap_or(c.context);
    if seq_len == 0 || seq_len > c.context {
        return Err(CliError::Usage(format!(
            "sequence length {seq_len} not in 1..={}",
            c.context
        )));
    }
    let set = load_sequences(path, max.unwrap_or(usize::MAX), seq_len, c.vocab)?;
    if set.is_empty() {
        return Err(Error::Domain(format!("{}: no sequences", path.display())).into());
    }
    Ok(set)
}

pub fn cmd_search(args: &SearchArgs) -> CliResult<RunManifest> {
    let (inputs, cfg) = match &args.replay {
        Some(path) => {
            let m = RunManifest::load(path)?;
            m.config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            (m.inputs, m.config)
        }
        None => (args.inputs()?, args.config()?),
    };
    run_search(&inputs, cfg, &args.outputs(), args.quiet)
}

/// Runs one search and writes its checkpoint, curves and manifest.
pub fn run_search(
    inputs: &SearchInputs,
    cfg: SearchConfig,
    outputs: &SearchOutputs,
    quiet: bool,
) -> CliResult<RunManifest> {
    let start = Instant::now();
    let base = load_model(&inputs.model)?;
    let calib = load_corpus(&inputs.calib, Some(inputs.calib_seqs), inputs.seq_len, &base)?;
    let heldout = inputs
        .heldout
        .as_deref()
        .map(|p| load_corpus(p, inputs.heldout_seqs, inputs.seq_len, &base))
        .transpose()?;

    let mut search = Search::new(&base, cfg.clone(), &calib.sequences)?;
    let initial = search.initial();
    println!(
        "rtn objective {:.6} (ce {:.6}, mse {:.6e}), alpha {:.6}",
        initial.loss,
        initial.ce,
        initial.mse,
        search.alpha()
    );
    let report_every = (cfg.steps / 10).max(1);
    while search.state().steps_taken < cfg.steps {
        let rec = search.step()?;
        if !quiet && rec.step % report_every == 0 {
            eprintln!(
                "step {}/{}: best {:.6}, window acceptance {:.3}",
                rec.step, cfg.steps, rec.best_loss, rec.acceptance_rate_window
            );
        }
    }
    let outcome = search.run_to_end()?;

    let mut ckpt = match &cfg.quant {
        Some(spec) => outcome.params.to_quantized_checkpoint(spec)?,
        None => outcome.params.to_checkpoint(),
    };
    for t in transform_tensors(&outcome.transforms) {
        ckpt.push(t);
    }
    save_checkpoint(&outputs.checkpoint, &ckpt)?;
    ensure_parent(&outputs.curves)?;
    write_curves(&outputs.curves, &outcome.curve)?;

    let spec = cfg.quant.as_ref();
    let heldout_perplexity = match &heldout {
        Some(h) => {
            let ppl = |p: &ModelParams, s| crate::model::perplexity(p, &h.sequences, s);
            Some(HeldoutPerplexity {
                full_precision: ppl(&base, None)?,
                rtn: ppl(&base, spec)?,
                searched: ppl(&outcome.params, spec)?,
            })
        }
        None => None,
    };
    println!(
        "searched objective {:.6} (ce {:.6}, mse {:.6e}), {:.2}% lower",
        outcome.best.loss,
        outcome.best.ce,
        outcome.best.mse,
        100.0 * (1.0 - outcome.best.loss / initial.loss)
    );
    if let Some(h) = &heldout_perplexity {
        println!(
            "held-out perplexity: fp {:.4}, rtn {:.4}, searched {:.4}",
            h.full_precision, h.rtn, h.searched
        );
    }

    let manifest = RunManifest {
        version: VERSION.into(),
        seed: cfg.seed,
        inputs: inputs.clone(),
        outputs: outputs.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        metrics: RunMetrics {
            alpha: outcome.alpha,
            initial,
            best: outcome.best,
            accepted: outcome.curve.iter().filter(|r| r.accepted).count(),
            heldout_perplexity,
            checkpoint_sha256: sha256_file(&outputs.checkpoint)?,
            curves_sha256: sha256_file(&outputs.curves)?,
        },
        config: cfg,
    };
    write_json(&outputs.manifest, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    /// Mean next-token cross-entropy, nats per token.
    pub ce: f64,
    pub perplexity: f64,
}

impl EvalScore {
    fn of(params: &ModelParams, corpus: &[Vec<u32>]) -> CliResult<Self> {
        let ce = cross_entropy(params, corpus)?;
        Ok(EvalScore {
            ce,
            perplexity: ce.exp(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub sequences: usize,
    pub tokens: usize,
    pub full_precision: EvalScore,
    pub quant: Option<QuantSpec>,
    pub quantized: Option<EvalScore>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let spec = args
        .bits
        .map(|bits| {
            QuantArgs {
                bits,
                group_size: args.group_size,
                strict: args.strict,
            }
            .spec()
        })
        .transpose()?
        .flatten();
    let params = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus, args.max_seqs, args.seq_len, &params)?;
    let full_precision = EvalScore::of(&params, &corpus.sequences)?;
    let quantized = spec
        .as_ref()
        .map(|s| EvalScore::of(&params.fake_quantized(s)?, &corpus.sequences))
        .transpose()?;
    let report = EvalReport {
        model: args.model.clone(),
        corpus: args.corpus.clone(),
        sequences: corpus.len(),
        tokens: corpus.token_count(),
        full_precision,
        quant: spec,
        quantized,
    };
    println!(
        "{} sequences, {} tokens",
        report.sequences, report.tokens
    );
    println!(
        "full precision: ce {:.6} nats/token, perplexity {:.4}",
        full_precision.ce, full_precision.perplexity
    );
    if let (Some(s), Some(q)) = (&report.quant, &report.quantized) {
        println!(
            "{}-bit g{}: ce {:.6} nats/token, perplexity {:.4}",
            s.bits(),
            s.group_size(),
            q.ce,
            q.perplexity
        );
    }
    if let Some(path) = &args.json {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Writes the curve artifacts and returns their paths.
pub fn cmd_curves(args: &CurvesArgs) -> CliResult<Vec<PathBuf>> {
    let csv_path = if args.run_dir.is_file() {
        args.run_dir.clone()
    } else {
        args.run_dir.join("curves.csv")
    };
    let out_dir = args.out.clone().unwrap_or_else(|| {
        let base = if args.run_dir.is_file() {
            args.run_dir.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            args.run_dir.clone()
        };
        base.join("plots")
    });
    let records = read_curves(&csv_path)?;
    if let Some(r) = records
        .iter()
        .find(|r| !(0.0..=1.0).contains(&r.acceptance_rate_window))
    {
        return Err(Error::Format(format!(
            "{}: step {} has acceptance rate {} outside [0, 1]",
            csv_path.display(),
            r.step,
            r.acceptance_rate_window
        ))
        .into());
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let written = match args.format {
        CurvesFormat::Csv => {
            let dest = out_dir.join("curves.csv");
            std::fs::copy(&csv_path, &dest).map_err(|e| Error::io(&dest, e))?;
            vec![dest]
        }
        CurvesFormat::SvgPlot => {
            let mut paths = Vec::new();
            for panel in [Panel::Loss, Panel::Acceptance] {
                let dest = out_dir.join(panel.file_name());
                std::fs::write(&dest, render_svg(&records, panel)).map_err(|e| Error::io(&dest, e))?;
                paths.push(dest);
            }
            paths
        }
    };
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsers() {
        assert_eq!(parse_bits("16"), Ok(16));
        assert!(parse_bits("5").is_err());
        assert!(parse_bits("x").is_err());
        assert_eq!(parse_layer_match("ALL"), Ok(LayerMatch::All));
        assert_eq!(parse_layer_match("3"), Ok(LayerMatch::Count(3)));
        assert!(parse_layer_match("-1").is_err());
        assert_eq!(parse_moves("all"), Ok(Moves::ALL));
        assert_eq!(parse_moves("scale, rotate").unwrap(), Moves { permute: false, ..Moves::ALL });
        assert!(parse_moves("shear").is_err());
    }

    #[test]
    fn search_defaults_match_library_defaults() {
        let cli = Cli::try_parse_from(["invarexplore", "search", "Cargo.toml", "Cargo.toml", "--out", "o.ivq"]).unwrap();
        let Command::Search(a) = cli.command else { panic!() };
        assert_eq!(a.config().unwrap(), SearchConfig::default());
        let o = a.outputs();
        assert_eq!(o.curves, PathBuf::from("curves.csv"));
        assert_eq!(o.manifest, PathBuf::from("manifest.json"));
    }

    #[test]
    fn usage_errors() {
        let bad = |args: &[&str]| Cli::try_parse_from(args).unwrap_err().exit_code();
        assert_eq!(bad(&["invarexplore", "quantize", "/no/such.ivq", "--out", "o"]), 2);
        assert_eq!(bad(&["invarexplore", "quantize", "Cargo.toml", "--bits", "5", "--out", "o"]), 2);
        assert_eq!(bad(&["invarexplore", "search", "--out", "o"]), 2);
        assert_eq!(bad(&["invarexplore"]), 2);
        let cli = Cli::try_parse_from(["invarexplore", "search", "Cargo.toml", "Cargo.toml", "--subset", "2", "--out", "o"]).unwrap();
        let Command::Search(a) = cli.command else { panic!() };
        assert_eq!(a.config().unwrap_err().exit_code(), 2);
    }
}
