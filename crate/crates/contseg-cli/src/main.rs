//! Experiment driver for the continual-segmentation workbench.
//!
//! Subcommands cover the whole pipeline: `generate` writes a corpus to disk,
//! `run` executes a full continual schedule into a self-describing run
//! directory, `eval` re-scores a checkpoint, `ablate` sweeps named toggle
//! sets with a shared seed, and `report` renders a run directory's metrics.
//!
//! Exit codes: 0 success, 2 configuration or data-format problems, 3 numeric
//! failures (non-finite training values), 4 I/O failures, 1 anything else.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use contseg::checkpoint;
use contseg::config::{self, RunConfig};
use contseg::data::{self, Sample, TaskSchedule};
use contseg::engine::{Engine, RunReport};
use contseg::evalm::MetricReport;
use contseg::Error;

/// Environment variable naming the default output root (fallback: `runs`).
const OUT_ROOT_ENV: &str = "CONTSEG_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "contseg",
    version,
    about = "Continual segmentation workbench",
    long_about = "Continual segmentation workbench.\n\nExit codes: 0 success, \
                  2 configuration/format error, 3 numeric failure, 4 I/O failure."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a corpus and write both splits to disk.
    Generate(GenerateArgs),
    /// Train a full continual schedule into a run directory.
    Run(RunArgs),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Run a matrix of named toggle sets with a shared seed.
    Ablate(AblateArgs),
    /// Render tables and CSVs from an existing run directory.
    Report(ReportArgs),
}

/// How a command obtains its configuration.
#[derive(Args, Clone, Default)]
struct ConfigSel {
    /// Path to a TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled preset: toy-joint, toy-4-1, toy-4-2, finetune-baseline.
    #[arg(long)]
    preset: Option<String>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Swap in a named baseline (available: finetune).
    #[arg(long)]
    baseline: Option<String>,
    /// Flip one objective term, e.g. --toggle os_kd=off (repeatable).
    #[arg(long = "toggle", value_name = "NAME=on|off")]
    toggles: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    sel: ConfigSel,
    /// Corpus directory (default: <out-root>/<name>-corpus).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    sel: ConfigSel,
    /// Run directory (default: <out-root>/<name>-s<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an interrupted run from its directory; the stored config
    /// governs and other flags must not contradict it.
    #[arg(long, conflicts_with_all = ["out", "seed", "baseline", "toggles"])]
    resume: Option<PathBuf>,
    /// Load the corpus from disk instead of synthesizing in memory.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file from a run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    sel: ConfigSel,
    /// Load the corpus from disk instead of synthesizing in memory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Print the metric report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    sel: ConfigSel,
    /// Output root for the sweep (default: <out-root>/<name>-ablate).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated row names; duplicates are dropped with a warning.
    /// Known rows: full, finetune, no-os-kd, no-mask-kd, no-obj-kd,
    /// no-pe-kd, no-cls-kd-matched, no-cls-kd-unmatched, no-cls-kd, no-aux.
    #[arg(long, default_value = "full,no-os-kd,no-mask-kd,no-obj-kd")]
    rows: String,
    /// Load the corpus from disk instead of synthesizing in memory.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing metrics.json.
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape(_) | Error::Format(_) | Error::Json(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        Some(Error::Io(_) | Error::Image(_)) => 4,
        None => 1,
    }
}

fn cfg_err(msg: impl Into<String>) -> anyhow::Error {
    Error::config(msg).into()
}

/// Resolve `--config`/`--preset` plus the mutating flags into a validated
/// config and a short name for default paths.
fn resolve_config(sel: &ConfigSel) -> anyhow::Result<(RunConfig, String)> {
    let (mut cfg, name) = match (&sel.config, &sel.preset) {
        (Some(path), None) => {
            let cfg = config::load(path)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".to_string());
            (cfg, name)
        }
        (None, Some(p)) => (config::preset(p)?, p.clone()),
        (None, None) => return Err(cfg_err("pass --config <file> or --preset <name>")),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    if let Some(b) = &sel.baseline {
        match b.as_str() {
            "finetune" => cfg.make_finetune(),
            other => return Err(cfg_err(format!("unknown baseline '{other}' (available: finetune)"))),
        }
    }
    for t in &sel.toggles {
        let (name, value) = t
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("--toggle wants NAME=on|off, got '{t}'")))?;
        let on = match value {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => return Err(cfg_err(format!("toggle value '{other}' is not on/off"))),
        };
        cfg.toggles.set(name, on)?;
    }
    if let Some(s) = sel.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok((cfg, name))
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_split_corpus(root: &Path, cfg: &RunConfig) -> anyhow::Result<(Vec<Sample>, Vec<Sample>)> {
    let mut splits = Vec::with_capacity(2);
    for split in ["train", "eval"] {
        let (samples, manifest) = data::load_corpus(&root.join(split))
            .with_context(|| format!("loading {split} split from {}", root.display()))?;
        if manifest.spec != cfg.data {
            return Err(cfg_err(format!(
                "corpus at {} was generated from a different data spec",
                root.display()
            )));
        }
        splits.push(samples);
    }
    let eval = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok((train, eval))
}

fn obtain_data(corpus: &Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<(Vec<Sample>, Vec<Sample>)> {
    let dir = corpus.clone().or_else(|| cfg.corpus_dir.clone());
    match dir {
        Some(d) => load_split_corpus(&d, cfg),
        None => Ok(data::generate_dataset(&cfg.data)?),
    }
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let (cfg, name) = resolve_config(&a.sel)?;
    let out = a.out.unwrap_or_else(|| out_root().join(format!("{name}-corpus")));
    let (train, eval) = data::generate_dataset(&cfg.data)?;
    data::save_corpus(&out.join("train"), &train, &cfg.data, "train")?;
    data::save_corpus(&out.join("eval"), &eval, &cfg.data, "eval")?;
    println!(
        "corpus at {}: {} classes, {} train / {} eval samples",
        out.display(),
        cfg.data.num_classes,
        train.len(),
        eval.len()
    );
    Ok(())
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let (cfg, dir) = match &a.resume {
        Some(dir) => {
            let stored_path = dir.join("config.toml");
            let stored = config::load(&stored_path)
                .with_context(|| format!("resume directory has no usable {}", stored_path.display()))?;
            if a.sel.config.is_some() || a.sel.preset.is_some() {
                let (given, _) = resolve_config(&a.sel)?;
                if given != stored {
                    return Err(cfg_err(
                        "the given config disagrees with the one stored in the resume directory",
                    ));
                }
            }
            (stored, dir.clone())
        }
        None => {
            let (cfg, name) = resolve_config(&a.sel)?;
            let dir = a
                .out
                .clone()
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| out_root().join(format!("{name}-s{}", cfg.train.seed)));
            fs::create_dir_all(&dir)?;
            config::save(&dir.join("config.toml"), &cfg)?;
            (cfg, dir)
        }
    };
    let (train, eval) = obtain_data(&a.corpus, &cfg)?;
    let engine = Engine::new(cfg.settings(), train, eval)?;
    let report = engine.run(Some(&dir))?;
    write_run_csvs(&dir, &report)?;
    print_report(&report);
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let cfg = if a.sel.config.is_some() || a.sel.preset.is_some() {
        let (cfg, _) = resolve_config(&a.sel)?;
        let sched = data::build_schedule(cfg.data.num_classes, cfg.schedule.base, cfg.schedule.increment)?;
        if sched != ck.schedule || cfg.model != ck.model || cfg.heads.mode != ck.head_mode {
            return Err(cfg_err(
                "checkpoint was produced under a different schedule, model, or head mode than the config",
            ));
        }
        cfg
    } else {
        let mut cfg = RunConfig::current();
        cfg.schedule.base = ck.schedule.base();
        cfg.schedule.increment = ck.schedule.increment();
        cfg.data.num_classes = ck.schedule.all_classes().len();
        cfg.data.image_size = ck.model.image_size;
        cfg.model = ck.model.clone();
        cfg.heads.mode = ck.head_mode;
        cfg.validate()?;
        cfg
    };
    let (_, eval_split) = obtain_data(&a.corpus, &cfg)?;
    let train_stub = eval_split.clone();
    let engine = Engine::new(cfg.settings(), train_stub, eval_split)?;
    if engine.schedule() != &ck.schedule {
        return Err(cfg_err("schedule mismatch between checkpoint and data spec"));
    }
    let ev = engine.evaluate(&ck.params, ck.step)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&ev.report).map_err(Error::from)?);
    } else {
        print_step_table(ck.step, &ev.report, engine.schedule());
        if let Some(r) = ev.recall_positive {
            println!("proposal recall (any positive score): {:.4}", r.fraction());
        }
        if let Some(r) = ev.recall_confident {
            println!("proposal recall (confident only):     {:.4}", r.fraction());
        }
    }
    Ok(())
}

/// Apply a named toggle set to a copy of the base config.
fn apply_row(cfg: &mut RunConfig, row: &str) -> anyhow::Result<()> {
    match row {
        "full" => {}
        "finetune" => cfg.make_finetune(),
        "no-os-kd" => cfg.toggles.os_kd = false,
        "no-mask-kd" => cfg.toggles.mask_kd = false,
        "no-obj-kd" => {
            cfg.toggles.os_kd = false;
            cfg.toggles.mask_kd = false;
        }
        "no-pe-kd" => cfg.toggles.pe_kd = false,
        "no-cls-kd-matched" => cfg.toggles.cls_kd_matched = false,
        "no-cls-kd-unmatched" => cfg.toggles.cls_kd_unmatched = false,
        "no-cls-kd" => {
            cfg.toggles.cls_kd_matched = false;
            cfg.toggles.cls_kd_unmatched = false;
        }
        "no-aux" => cfg.toggles.aux = false,
        other => {
            return Err(cfg_err(format!(
                "unknown ablation row '{other}'; known rows: full, finetune, no-os-kd, \
                 no-mask-kd, no-obj-kd, no-pe-kd, no-cls-kd-matched, no-cls-kd-unmatched, \
                 no-cls-kd, no-aux"
            )));
        }
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let (base_cfg, name) = resolve_config(&a.sel)?;
    let out = a.out.unwrap_or_else(|| out_root().join(format!("{name}-ablate")));
    fs::create_dir_all(&out)?;

    let mut rows: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for raw in a.rows.split(',') {
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        if seen.insert(row.to_string()) {
            rows.push(row.to_string());
        } else {
            log::warn!("duplicate ablation row '{row}' dropped");
        }
    }
    // Fail on unknown names before any training starts.
    for row in &rows {
        apply_row(&mut base_cfg.clone(), row)?;
    }

    let (train, eval) = obtain_data(&a.corpus, &base_cfg)?;
    let csv_path = out.join("ablation.csv");
    let mut csv = String::from("row,base,inc,all,avg\n");
    for row in &rows {
        let mut cfg = base_cfg.clone();
        apply_row(&mut cfg, row)?;
        let dir = out.join(row);
        fs::create_dir_all(&dir)?;
        config::save(&dir.join("config.toml"), &cfg)?;
        let engine = Engine::new(cfg.settings(), train.clone(), eval.clone())?;
        log::info!("ablation row '{row}' starting");
        let report = engine.run(Some(&dir))?;
        write_run_csvs(&dir, &report)?;
        let c = &report.continual;
        csv.push_str(&format!("{row},{},{},{},{}\n", c.base, c.inc, c.all, c.avg));
    }
    fs::write(&csv_path, &csv)?;
    print!("{csv}");
    println!("ablation table: {}", csv_path.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let path = a.run.join("metrics.json");
    let report: RunReport = serde_json::from_reader(
        File::open(&path).with_context(|| format!("no metrics at {}", path.display()))?,
    )
    .map_err(Error::from)?;
    write_run_csvs(&a.run, &report)?;
    print_report(&report);
    Ok(())
}

/// `metrics.csv` (one row per step plus the aggregate) and `per_class.csv`
/// (final-step IoU per class).
fn write_run_csvs(dir: &Path, report: &RunReport) -> anyhow::Result<()> {
    let mut csv = String::from("step,base,inc,all,avg\n");
    for rec in &report.steps {
        let e = &rec.eval;
        csv.push_str(&format!("{},{},{},{},{}\n", rec.step, e.base, e.inc, e.all, e.avg));
    }
    let c = &report.continual;
    csv.push_str(&format!("continual,{},{},{},{}\n", c.base, c.inc, c.all, c.avg));
    fs::write(dir.join("metrics.csv"), &csv)?;

    if let Some(last) = report.steps.last() {
        let mut pc = String::from("class,iou\n");
        for (class, iou) in &last.eval.per_class_iou {
            pc.push_str(&format!("{class},{iou}\n"));
        }
        if let Some(bg) = last.eval.background_iou {
            pc.push_str(&format!("background,{bg}\n"));
        }
        fs::write(dir.join("per_class.csv"), &pc)?;
    }
    Ok(())
}

fn print_report(report: &RunReport) {
    println!("{:<6} {:>8} {:>8} {:>8} {:>10} {:>10}", "step", "base", "inc", "all", "ar(s>0)", "ar(conf)");
    for rec in &report.steps {
        let fmt_ar = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>10} {:>10}",
            rec.step,
            rec.eval.base,
            rec.eval.inc,
            rec.eval.all,
            fmt_ar(rec.ar_positive),
            fmt_ar(rec.ar_confident),
        );
    }
    let c = &report.continual;
    println!(
        "{:<6} {:>8.4} {:>8.4} {:>8.4}   (avg over steps {:.4})",
        "final", c.base, c.inc, c.all, c.avg
    );
}

fn print_step_table(step: usize, report: &MetricReport, schedule: &TaskSchedule) {
    println!("evaluation after step {step} over {} classes", report.per_class_iou.len());
    println!("{:<10} {:>8}", "class", "iou");
    for (class, iou) in &report.per_class_iou {
        let marker = if schedule.classes_at(1).contains(class) { "" } else { " (inc)" };
        println!("{:<10} {:>8.4}{marker}", class, iou);
    }
    if let Some(bg) = report.background_iou {
        println!("{:<10} {:>8.4}", "background", bg);
    }
    println!("base {:.4} | inc {:.4} | all {:.4}", report.base, report.inc, report.all);
}
