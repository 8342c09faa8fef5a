//! Command-line driver: data generation, curation, training, evaluation,
//! drift analysis and reporting. Each command reads and writes files under
//! the configured output directory.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline_classifier::classifier_buckets;
use crate::checkpoint::Checkpoint;
use crate::curation::{generate_corpus, read_jsonl, write_jsonl, ReactionRecord};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalModel, EvalReport};
use crate::library::TemplateLibrary;
use crate::pipeline::{corpus_vocab, curate};
use crate::reaction_engine::RewriteEngine;
use crate::retrieval::{build_bank, BankSource};
use crate::stability::{measure_drift, trace_from_bytes, trace_to_bytes, DriftProbe};
use crate::tokenizer::Vocabulary;
use crate::trainer::{
    metrics_to_jsonl, run_stage1, run_stage2, tokenize_library, DualEncoder, Stage1Data, Stage2Data, Stage2Options,
    Variant,
};

pub use config::{RunConfig, OUT_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "retrorank", about = "Two-stage dual-encoder template retrieval and ranking")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage2.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long, global = true)]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and template library.
    GenData,
    /// Validity staging and leakage removal.
    Curate,
    /// Train Stage 1 or a Stage 2 variant.
    Train(ModelArgs),
    /// Evaluate a trained model on a held-out split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Evaluation window preset (e3 or f3).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Replay an EMA run and check the drift bound per epoch.
    DriftCheck {
        #[arg(long)]
        ema_depth: Option<usize>,
    },
    /// Summarize every evaluation report in the output directory.
    Report,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    stage: u8,
    #[arg(long, default_value = "frozen")]
    variant: String,
    #[arg(long)]
    ema_depth: Option<usize>,
}

/// Parses `argv` (including the program name), runs one command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out_dir", out)?;
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Curate => "curate",
        Command::Train(_) => "train",
        Command::Eval { .. } => "eval",
        Command::DriftCheck { .. } => "drift-check",
        Command::Report => "report",
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(
        out.join(format!("{}.resolved.cfg", command_name(&cli.command))),
        cfg.to_text(),
    )?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Curate => curate_cmd(&cfg, &out),
        Command::Train(m) => train(&cfg, &out, m),
        Command::Eval { model, preset } => eval(&cfg, &out, model, preset.as_deref()),
        Command::DriftCheck { ema_depth } => drift_check(&cfg, &out, *ema_depth),
        Command::Report => report(&out),
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} not found; run `{hint}` first",
            path.display()
        )))
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let gen = cfg.generator()?;
    let (records, library) = generate_corpus(&gen, &RewriteEngine)?;
    let dir = out.join("data");
    fs::create_dir_all(&dir)?;
    write_jsonl(&dir.join("records.jsonl"), &records)?;
    library.save(&dir.join("templates.txt"))?;
    println!(
        "gen-data: {} records, {} templates -> {}",
        records.len(),
        library.len(),
        dir.display()
    );
    Ok(())
}

fn curate_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = out.join("data");
    require(&data.join("records.jsonl"), "gen-data")?;
    let records: Vec<ReactionRecord> = read_jsonl(&data.join("records.jsonl"))?;
    let mut library = TemplateLibrary::load(&data.join("templates.txt"))?;
    let splits = curate(&records, &mut library, &RewriteEngine, cfg.get("data.max_outcomes")?)?;
    let vocab = corpus_vocab(&splits.all(), &library)?;
    let dir = out.join("curated");
    fs::create_dir_all(&dir)?;
    write_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    write_jsonl(&dir.join("val.jsonl"), &splits.val)?;
    write_jsonl(&dir.join("test.jsonl"), &splits.test)?;
    library.save(&dir.join("templates.txt"))?;
    let freq: String = library.frequencies().iter().map(|f| format!("{f}\n")).collect();
    fs::write(dir.join("frequencies.txt"), freq)?;
    vocab.save(&dir.join("vocab.txt"))?;
    let summary = splits.summary();
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let v = &summary.validity;
    println!(
        "curate: total {} extracted {} multi-input {} failed-validation {} valid {}; leakage removed {}; train/val/test {}/{}/{}",
        v.total, v.extracted, v.multi_input, v.failed_forward_validation, v.valid,
        summary.leakage.union_removed, summary.train, summary.val, summary.test
    );
    Ok(())
}

struct Curated {
    train: Vec<ReactionRecord>,
    val: Vec<ReactionRecord>,
    test: Vec<ReactionRecord>,
    library: TemplateLibrary,
    vocab: Vocabulary,
}

fn load_curated(out: &Path) -> Result<Curated> {
    let dir = out.join("curated");
    require(&dir.join("train.jsonl"), "curate")?;
    let mut library = TemplateLibrary::load(&dir.join("templates.txt"))?;
    let freq = fs::read_to_string(dir.join("frequencies.txt"))?
        .lines()
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad frequency `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    library.set_frequencies(freq)?;
    Ok(Curated {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
        library,
        vocab: Vocabulary::load(&dir.join("vocab.txt"))?,
    })
}

fn run_dir(stage: u8, variant: Variant, cfg: &RunConfig, ema_depth: Option<usize>) -> Result<String> {
    if stage == 1 {
        return Ok("stage1".into());
    }
    Ok(match variant {
        Variant::Ema | Variant::Alt | Variant::SnapshotKld => {
            let k = match ema_depth {
                Some(k) => k,
                None => cfg.get("stage2.ema_depth")?,
            };
            format!("stage2-{}-k{k}", variant.name())
        }
        _ => format!("stage2-{}", variant.name()),
    })
}

fn check_stage(stage: u8) -> Result<()> {
    if stage == 1 || stage == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("--stage must be 1 or 2, got {stage}")))
    }
}

fn train(cfg: &RunConfig, out: &Path, m: &ModelArgs) -> Result<()> {
    check_stage(m.stage)?;
    let variant = Variant::parse(&m.variant)?;
    let data = load_curated(out)?;
    let enc = cfg.encoder(data.vocab.size())?;
    let stage1_ckpt = out.join("stage1").join("checkpoint.bin");
    let name = run_dir(m.stage, variant, cfg, m.ema_depth)?;
    let dir = out.join(&name);
    if m.stage == 1 {
        let tc = cfg.stage1()?;
        let s1 = Stage1Data::build(&data.train, &data.library, &data.vocab, enc.max_len)?;
        let outcome = run_stage1(&s1, DualEncoder::new(enc, tc.seed)?, &tc)?;
        let bank = build_bank(&outcome.towers.template, &s1.templates, BankSource::Live, tc.epochs)?;
        fs::create_dir_all(&dir)?;
        Checkpoint {
            product: outcome.towers.product,
            template: outcome.towers.template,
            shadow: None,
            bank: Some(bank),
        }
        .save(&dir.join("checkpoint.bin"))?;
        fs::write(dir.join("metrics.jsonl"), metrics_to_jsonl(&outcome.metrics)?)?;
        let last = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
        println!(
            "train stage 1: {} epochs, final loss {last:.4} -> {}",
            tc.epochs,
            dir.display()
        );
        return Ok(());
    }
    require(&stage1_ckpt, "train --stage 1")?;
    let init = Checkpoint::load(&stage1_ckpt, &enc)?;
    let flags = cfg.flags(variant, m.ema_depth)?;
    let tc = cfg.stage2(variant)?;
    let s2 = Stage2Data::build(&data.train, &data.library, &data.vocab, enc.max_len)?;
    let towers = DualEncoder {
        product: init.product,
        template: init.template,
    };
    let outcome = run_stage2(
        &s2,
        &towers,
        &flags,
        &tc,
        Stage2Options {
            record_trace: flags.ema,
        },
    )?;
    fs::create_dir_all(&dir)?;
    Checkpoint {
        product: outcome.towers.product,
        template: outcome.towers.template,
        shadow: outcome.shadow,
        bank: Some(outcome.bank),
    }
    .save(&dir.join("checkpoint.bin"))?;
    fs::write(dir.join("metrics.jsonl"), metrics_to_jsonl(&outcome.metrics)?)?;
    if let Some(trace) = &outcome.trace {
        fs::write(dir.join("trace.bin"), trace_to_bytes(trace))?;
    }
    let last = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "train stage 2 ({}): {} epochs, final loss {last:.4} -> {}",
        variant.name(),
        tc.epochs,
        dir.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path, m: &ModelArgs, preset: Option<&str>) -> Result<()> {
    check_stage(m.stage)?;
    let variant = Variant::parse(&m.variant)?;
    let data = load_curated(out)?;
    let enc: EncoderConfig = cfg.encoder(data.vocab.size())?;
    let ecfg = cfg.eval(preset)?;
    let preset_name = preset.unwrap_or(cfg.raw("eval.preset"));
    let dir = out.join(run_dir(m.stage, variant, cfg, m.ema_depth)?);
    let ckpt_path = dir.join("checkpoint.bin");
    require(
        &ckpt_path,
        &format!("train --stage {} --variant {}", m.stage, variant.name()),
    )?;
    let ck = Checkpoint::load(&ckpt_path, &enc)?;
    let bank = match ck.bank {
        Some(b) => b,
        None => {
            let seqs = tokenize_library(&data.library, &data.vocab, enc.max_len)?;
            build_bank(&ck.template, &seqs, BankSource::Live, 0)?
        }
    };
    let rows = match cfg.raw("eval.split") {
        "test" => &data.test,
        "val" => &data.val,
        other => return Err(Error::Config(format!("eval.split must be test or val, got `{other}`"))),
    };
    let model = EvalModel {
        product: &ck.product,
        template: &ck.template,
        bank: &bank,
        vocab: &data.vocab,
        temperature: cfg.get("train.temperature")?,
    };
    let (mut report, _) = evaluate(&model, &data.library, rows, &RewriteEngine, &ecfg)?;
    if m.stage == 1 {
        report.classifier_buckets = Some(classifier_buckets(
            &ck.product,
            &data.vocab,
            &data.train,
            rows,
            data.library.frequencies(),
            &ecfg.k_list,
            &cfg.classifier()?,
        )?);
    }
    write_report(&dir, preset_name, &report)?;
    println!("eval {} [{preset_name}]\n{}", dir.display(), report.table());
    Ok(())
}

fn write_report(dir: &Path, preset: &str, report: &EvalReport) -> Result<()> {
    fs::write(
        dir.join(format!("eval-{preset}.json")),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    fs::write(dir.join(format!("eval-{preset}.txt")), report.table())?;
    Ok(())
}

fn drift_check(cfg: &RunConfig, out: &Path, ema_depth: Option<usize>) -> Result<()> {
    let data = load_curated(out)?;
    let enc = cfg.encoder(data.vocab.size())?;
    let dir = out.join(run_dir(2, Variant::Ema, cfg, ema_depth)?);
    require(&dir.join("trace.bin"), "train --stage 2 --variant ema")?;
    let trace = trace_from_bytes(&fs::read(dir.join("trace.bin"))?)?;
    let ck = Checkpoint::load(&dir.join("checkpoint.bin"), &enc)?;
    let templates = tokenize_library(&data.library, &data.vocab, enc.max_len)?;
    let n_probes: usize = cfg.get("drift.probes")?;
    let mut seen = std::collections::BTreeSet::new();
    let queries = data
        .val
        .iter()
        .filter(|r| seen.insert(r.product.clone()))
        .take(n_probes)
        .map(|r| ck.product.embed(&data.vocab.encode(&r.product, enc.max_len)?))
        .collect::<Result<Vec<_>>>()?;
    let probe = DriftProbe {
        template_config: &enc,
        templates: &templates,
        queries: &queries,
        temperature: cfg.get("train.temperature")?,
        perturbations: cfg.get("drift.perturbations")?,
        seed: cfg.seed()?,
    };
    let rep = measure_drift(&trace, &probe)?;
    fs::write(
        dir.join("drift.json"),
        serde_json::to_string_pretty(&rep.epochs)? + "\n",
    )?;
    println!(
        "{:>5} {:>5} {:>12} {:>12} {:>12} {:>12} {:>4}",
        "epoch", "m", "drift", "bound", "L1", "L1 bound", "ok"
    );
    for e in &rep.epochs {
        println!(
            "{:>5} {:>5} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>4}",
            e.epoch, e.constants.m, e.shadow_drift, e.bound.bound, e.retrieval_l1, e.retrieval_l1_bound, e.within_bound
        );
    }
    if rep.epochs.iter().all(|e| e.within_bound) {
        Ok(())
    } else {
        Err(Error::InvalidParams("measured drift exceeded the bound".into()))
    }
}

fn report(out: &Path) -> Result<()> {
    let mut runs: Vec<(String, EvalReport)> = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&d)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("eval-") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        for f in files {
            let report: EvalReport = serde_json::from_str(&fs::read_to_string(&f)?)?;
            let label = format!(
                "{}/{}",
                d.file_name().and_then(|n| n.to_str()).unwrap_or("?"),
                f.file_stem().and_then(|n| n.to_str()).unwrap_or("?")
            );
            runs.push((label, report));
        }
    }
    if runs.is_empty() {
        return Err(Error::Config(format!(
            "no evaluation reports under {}; run `eval` first",
            out.display()
        )));
    }
    let mut text = format!("{:<32}", "run");
    let ks = [1usize, 3, 5, 10, 20];
    for k in ks {
        text.push_str(&format!("{:>8}", format!("Rxn@{k}")));
    }
    for k in ks {
        text.push_str(&format!("{:>9}", format!("TRetr@{k}")));
    }
    text.push('\n');
    for (label, r) in &runs {
        text.push_str(&format!("{label:<32}"));
        for k in ks {
            text.push_str(&format!(
                "{:>8.2}",
                r.reaction_topk.get(&k).copied().unwrap_or(f64::NAN)
            ));
        }
        for k in ks {
            text.push_str(&format!(
                "{:>9.2}",
                r.template_retrieval_topk.get(&k).copied().unwrap_or(f64::NAN)
            ));
        }
        text.push('\n');
    }
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
