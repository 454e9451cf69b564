//! `afg` subcommands. Each command returns a [`CliError`] carrying the exit
//! status to report.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use afg_core::attention::{attention_pair_count, AttentionConfig, PairPattern};
use afg_core::data::{load_sources, make_synthetic, StageRole};
use afg_core::generation::{greedy_decode, GenerationConfig};
use afg_core::pipeline::{
    encode_truncated, load_checkpoint, metrics_jsonl, run_pipeline, save_checkpoint, PipelineConfig, PipelineSummary,
};
use afg_core::rouge::{corpus_rouge, RougeReport};
use afg_core::Error;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self { status: ExitStatus::Usage, message: e.to_string() }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self { status: ExitStatus::Data, message: e.to_string() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::NonFiniteLoss { .. } | Error::Backward(_) => ExitStatus::Runtime,
            _ => ExitStatus::Data,
        };
        Self { status, message: e.to_string() }
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "afg", version, about = "Long-document feedback generation: data, training, decoding and scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus and its planted-content manifest.
    MakeSynthetic(MakeSyntheticArgs),
    /// Run a training pipeline and write the final checkpoint and metrics.
    Train(TrainArgs),
    /// Greedy-decode an output for every source in a JSONL file.
    Generate(GenerateArgs),
    /// Score aligned candidate and reference lines with ROUGE.
    Rouge(RougeArgs),
    /// Tabulate dense and sliding-window attention pair counts.
    AttnBench(AttnBenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Summarize,
    Review,
    Feedback,
}

impl From<RoleArg> for StageRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Summarize => StageRole::Summarize,
            RoleArg::Review => StageRole::Review,
            RoleArg::Feedback => StageRole::Feedback,
        }
    }
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    /// Stage role the corpus imitates.
    #[arg(long, value_enum)]
    pub role: RoleArg,
    /// Number of pairs.
    #[arg(long)]
    pub size: usize,
    /// Source length multiplier for the feedback role.
    #[arg(long, default_value_t = 1)]
    pub length_scale: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corpus JSONL output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest JSON output path.
    #[arg(long)]
    pub manifest_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    pub pipeline_config: PathBuf,
    /// Where to write the final checkpoint.
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Per-epoch metrics JSONL; a summary is written next to it as
    /// `<stem>.summary.json`.
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL with `id` and `source` per line (`target` is ignored).
    #[arg(long)]
    pub input_file: PathBuf,
    /// Output JSONL with `id` and `output` per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Cap on generated tokens; defaults to the model's target length less one.
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RougeArgs {
    /// Candidate texts, one per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference texts, one per line, aligned with the candidates.
    #[arg(long)]
    pub references: PathBuf,
    /// JSON report output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttnBenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_list: Vec<usize>,
    /// Sliding-window width (even, at least 2).
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// Number of global positions, taken from the start of the sequence.
    #[arg(long, default_value_t = 1)]
    pub globals: usize,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitStatus::Success;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for(&args));
            }
            return ExitStatus::Usage;
        }
    };
    let result = match cli.command {
        Command::MakeSynthetic(a) => make_synthetic_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Generate(a) => generate_cmd(&a),
        Command::Rouge(a) => rouge_cmd(&a),
        Command::AttnBench(a) => attn_bench_cmd(&a),
    };
    match result {
        Ok(()) => ExitStatus::Success,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.status
        }
    }
}

/// Usage line of the subcommand named in `args`, or of the whole program.
fn usage_for(args: &[OsString]) -> String {
    let mut cmd = Cli::command();
    let name = args.iter().skip(1).find_map(|a| {
        let a = a.to_str()?;
        cmd.get_subcommands().find(|s| s.get_name() == a).map(|s| s.get_name().to_string())
    });
    match name.and_then(|n| cmd.find_subcommand_mut(&n).cloned()) {
        Some(sub) => {
            let bin = format!("afg {}", sub.get_name());
            sub.bin_name(bin).render_usage().to_string()
        }
        None => cmd.render_usage().to_string(),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn make_synthetic_cmd(a: &MakeSyntheticArgs) -> CliResult {
    let syn = make_synthetic(a.role.into(), a.size, a.length_scale, a.seed).map_err(CliError::usage)?;
    write(&a.out, syn.corpus.to_jsonl())?;
    let manifest = serde_json::to_string_pretty(&syn.manifest).expect("manifest serializes");
    write(&a.manifest_out, manifest + "\n")
}

/// `metrics.jsonl` → `metrics.summary.json`.
pub fn summary_path(log: &Path) -> PathBuf {
    log.with_extension("summary.json")
}

pub fn train_cmd(a: &TrainArgs) -> CliResult {
    let cfg = PipelineConfig::load(&a.pipeline_config).map_err(|e| match e {
        Error::Io { .. } => CliError::data(e),
        other => CliError::usage(other),
    })?;
    let (ckpt, logs) = run_pipeline(&cfg)?;
    save_checkpoint(&ckpt, &a.out_checkpoint)?;
    write(&a.log, metrics_jsonl(&logs))?;
    let summary = serde_json::to_string_pretty(&PipelineSummary::new(&logs, &ckpt)).expect("summary serializes");
    write(&summary_path(&a.log), summary + "\n")
}

#[derive(Serialize)]
struct OutputLine<'a> {
    id: &'a str,
    output: String,
}

pub fn generate_cmd(a: &GenerateArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = &ckpt.config;
    let params = ckpt.params_for(cfg)?;
    let gen = GenerationConfig { max_new_tokens: a.max_new_tokens.unwrap_or(cfg.max_tgt_pos - 1) };
    gen.validate(cfg)?;
    let mut out = String::new();
    for (id, source) in load_sources(&a.input_file)? {
        let (src, cut) = encode_truncated(&ckpt.vocab, &source, cfg.max_src_pos);
        if cut {
            log::warn!("source `{id}` truncated to {} tokens", cfg.max_src_pos);
        }
        let ids = greedy_decode(params, &src, &gen, cfg)?;
        let line = OutputLine { id: &id, output: ckpt.vocab.decode_lossy(&ids) };
        out.push_str(&serde_json::to_string(&line).expect("line serializes"));
        out.push('\n');
    }
    write(&a.out, out)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Report JSON with every value printed to six decimals.
pub fn rouge_json(report: &RougeReport, pairs: usize) -> String {
    let mut s = format!("{{\n  \"pairs\": {pairs},\n");
    let variants = report.variants();
    for (i, (name, score)) in variants.iter().enumerate() {
        let sep = if i + 1 < variants.len() { "," } else { "" };
        let _ = writeln!(
            s,
            "  \"{name}\": {{\"precision\": {:.6}, \"recall\": {:.6}, \"f1\": {:.6}}}{sep}",
            score.precision, score.recall, score.f1
        );
    }
    s.push_str("}\n");
    s
}

pub fn rouge_cmd(a: &RougeArgs) -> CliResult {
    let candidates = read_lines(&a.candidates)?;
    let references = read_lines(&a.references)?;
    if candidates.len() != references.len() {
        return Err(CliError::data(format!(
            "{} candidate lines but {} reference lines",
            candidates.len(),
            references.len()
        )));
    }
    let pairs: Vec<(&String, &String)> = candidates.iter().zip(&references).collect();
    let report = corpus_rouge(&pairs)?;
    write(&a.out, rouge_json(&report, pairs.len()))
}

pub fn attn_bench_csv(n_list: &[usize], window: usize, globals: usize) -> Result<String, CliError> {
    let cfg = AttentionConfig::new(window, (0..globals).collect())?;
    let mut csv = String::from("n,dense_pairs,sparse_pairs,window,globals\n");
    for &n in n_list {
        let dense = attention_pair_count(n, PairPattern::Dense)?;
        let sparse = attention_pair_count(n, PairPattern::Sparse(&cfg))?;
        let _ = writeln!(csv, "{n},{dense},{sparse},{window},{globals}");
    }
    Ok(csv)
}

pub fn attn_bench_cmd(a: &AttnBenchArgs) -> CliResult {
    write(&a.out, attn_bench_csv(&a.n_list, a.window, a.globals)?)
}
