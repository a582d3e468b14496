use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use csls::corpus::{corpus_stats, load_jsonl, split_dataset, write_jsonl, CodeSnippet};
use csls::linealign::{align_batch, split_lines};
use csls::tokenize::encode_text;
use csls::trainkit::compare::ChiSquareMethod;
use csls::trainkit::train::{write_history_csv, write_history_json, Preset};
use csls::trainkit::{
    compare_models, evaluate, fit, sweep, synthetic_split, write_sweep_csv, EvalReport,
};
use csls::{checkpoint, ByteTokenizer, NormalizeMode};
use serde::Serialize;

mod config;

use config::{resolve, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "csls",
    version,
    about = "Line-structure-aware vulnerability detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; preset defaults fill anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Normalization for the whole-function token sequence.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    PaperScale,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Structured,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pearson,
    Mcnemar,
}

#[derive(Subcommand)]
enum Command {
    /// Dump global and line token alignments for every snippet.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Token and line statistics for a corpus.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Token limit for the over-limit fraction.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Split, train, and keep the checkpoint with the best validation F1.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which part of the seeded split to evaluate.
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
    /// Chi-square test and Venn counts for two evaluation reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and test one model per (p, k_cap) cell.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Cells as `p:k,p:k,...`; defaults to the config grid.
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the planted-pattern synthetic corpus as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        n: usize,
        #[arg(long, default_value_t = csls::trainkit::train::DEFAULT_SEED)]
        seed: u64,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let flags = Overrides {
            preset: self.preset.map(|p| match p {
                PresetArg::Desk => Preset::Desk,
                PresetArg::PaperScale => Preset::PaperScale,
            }),
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::Structured => NormalizeMode::Structured,
                ModeArg::Baseline => NormalizeMode::Baseline,
            }),
        };
        let cfg = resolve(self.config.as_deref(), &flags)?;
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        write_json(&self.out.join("config.json"), &cfg)?;
        Ok(cfg)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load(path: &Path) -> Result<Vec<CodeSnippet>> {
    let snippets = load_jsonl(path).with_context(|| format!("loading {}", path.display()))?;
    if snippets.is_empty() {
        bail!("{} contains no snippets", path.display());
    }
    Ok(snippets)
}

#[derive(Serialize)]
struct PreprocessRecord {
    id: u64,
    label: u8,
    mode: NormalizeMode,
    global_tokens: usize,
    global_truncated: bool,
    normalized: String,
    k: usize,
    p: usize,
    source_lines: usize,
    real_lines: usize,
    line_truncated: Vec<bool>,
}

fn cmd_preprocess(data: &Path, common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let snippets = load(data)?;
    let pp = cfg.model.preprocess;
    let tok = ByteTokenizer;
    let mut w = BufWriter::new(File::create(common.out.join("preprocess.jsonl"))?);
    for s in &snippets {
        let normalized = pp.mode.apply(&s.code);
        let seq = encode_text(&tok, &normalized, pp.max_len)?;
        let mut lines = split_lines(&s.code);
        if lines.is_empty() {
            lines.push("");
        }
        let batch = align_batch(&[lines], pp.k_cap, pp.p, &tok, pp.align)?;
        let d = batch.debug_records(&[s.id]).remove(0);
        let rec = PreprocessRecord {
            id: s.id,
            label: s.label,
            mode: pp.mode,
            global_tokens: seq.mask.iter().filter(|&&m| m == 1).count(),
            global_truncated: seq.truncated,
            normalized,
            k: d.k,
            p: d.p,
            source_lines: d.source_lines,
            real_lines: d.real_lines,
            line_truncated: d.line_truncated,
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    eprintln!(
        "wrote {} records to {}",
        snippets.len(),
        common.out.join("preprocess.jsonl").display()
    );
    Ok(())
}

fn cmd_stats(data: &Path, limit: Option<usize>, common: &Common) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(limit) = limit {
        cfg.limit = limit;
        write_json(&common.out.join("config.json"), &cfg)?;
    }
    let snippets = load(data)?;
    let stats = corpus_stats(&snippets, &ByteTokenizer, cfg.limit)?;
    write_json(&common.out.join("stats.json"), &stats)?;
    stats.write_csv(&common.out.join("stats_per_snippet.csv"))?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn cmd_train(data: &Path, common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let snippets = load(data)?;
    let split = split_dataset(&snippets, cfg.split_ratios(), cfg.seed)?;
    eprintln!(
        "training on {} snippets ({} valid, {} test), {} epochs",
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        cfg.train.epochs
    );
    let outcome = fit(cfg.model, &split, &cfg.train)?;
    checkpoint::save(&outcome.model, &common.out.join("model.ckpt"))?;
    write_history_csv(&outcome.history, &common.out.join("history.csv"))?;
    write_history_json(&outcome.history, &common.out.join("history.json"))?;
    for r in &outcome.history {
        eprintln!(
            "epoch {:>3}  loss {:.5}  valid f1 {}",
            r.epoch,
            r.loss,
            r.valid.map_or("-".into(), |m| format!("{:.4}", m.f1))
        );
    }
    if !split.test.is_empty() {
        let report = evaluate(
            &outcome.model,
            &split.test,
            cfg.train.threshold,
            cfg.train.batch_size,
        )?;
        write_json(&common.out.join("test_report.json"), &report)?;
        eprintln!(
            "best epoch {}, test accuracy {:.4}, f1 {:.4}",
            outcome.best_epoch, report.accuracy, report.f1
        );
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, which: SplitArg, common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let snippets = load(data)?;
    let selected = match which {
        SplitArg::All => snippets,
        part => {
            let split = split_dataset(&snippets, cfg.split_ratios(), cfg.seed)?;
            match part {
                SplitArg::Train => split.train,
                SplitArg::Valid => split.valid,
                _ => split.test,
            }
        }
    };
    if selected.is_empty() {
        bail!("the selected split is empty");
    }
    let report = evaluate(&model, &selected, cfg.train.threshold, cfg.train.batch_size)?;
    write_json(&common.out.join("eval_report.json"), &report)?;
    let mut w = BufWriter::new(File::create(common.out.join("sensitive_lines.jsonl"))?);
    for a in report.sensitive_audit(&selected) {
        serde_json::to_writer(&mut w, &a)?;
        writeln!(w)?;
    }
    w.flush()?;
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  (tp {} fp {} fn {} tn {})",
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.confusion.tp,
        report.confusion.fp,
        report.confusion.fn_,
        report.confusion.tn
    );
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_compare(a: &Path, b: &Path, method: Option<MethodArg>, common: &Common) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(m) = method {
        cfg.chi_square = match m {
            MethodArg::Pearson => ChiSquareMethod::Pearson,
            MethodArg::Mcnemar => ChiSquareMethod::Mcnemar,
        };
        write_json(&common.out.join("config.json"), &cfg)?;
    }
    let report = compare_models(&read_report(a)?, &read_report(b)?, cfg.chi_square)?;
    write_json(&common.out.join("comparison.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|cell| {
            let (p, k) = cell
                .trim()
                .split_once(':')
                .with_context(|| format!("grid cell `{cell}` is not p:k"))?;
            Ok((p.trim().parse()?, k.trim().parse()?))
        })
        .collect()
}

fn cmd_sweep(data: &Path, grid: Option<&str>, common: &Common) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(g) = grid {
        cfg.grid = parse_grid(g)?;
        write_json(&common.out.join("config.json"), &cfg)?;
    }
    let snippets = load(data)?;
    let split = split_dataset(&snippets, cfg.split_ratios(), cfg.seed)?;
    if split.test.is_empty() {
        bail!("split leaves no test snippets");
    }
    let rows = sweep(&cfg.grid, &cfg.model, &cfg.train, &split)?;
    write_sweep_csv(&rows, &common.out.join("sweep.csv"))?;
    for r in &rows {
        match (&r.error, r.f1) {
            (Some(e), _) => eprintln!("p={:<3} k={:<4} error: {e}", r.p, r.k_cap),
            (None, f1) => eprintln!("p={:<3} k={:<4} f1 {:.4}", r.p, r.k_cap, f1.unwrap_or(0.0)),
        }
    }
    Ok(())
}

fn cmd_synth(out: &Path, n: usize, seed: u64) -> Result<()> {
    if n < 2 {
        bail!("need at least 2 snippets");
    }
    let split = synthetic_split(n, 0, 0, seed);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_jsonl(out, &split.train)?;
    eprintln!("wrote {n} snippets to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess { data, common } => cmd_preprocess(data, common),
        Command::Stats {
            data,
            limit,
            common,
        } => cmd_stats(data, *limit, common),
        Command::Train { data, common } => cmd_train(data, common),
        Command::Eval {
            checkpoint,
            data,
            split,
            common,
        } => cmd_eval(checkpoint, data, *split, common),
        Command::Compare {
            a,
            b,
            method,
            common,
        } => cmd_compare(a, b, *method, common),
        Command::Sweep { data, grid, common } => cmd_sweep(data, grid.as_deref(), common),
        Command::Synth { out, n, seed } => cmd_synth(out, *n, *seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
