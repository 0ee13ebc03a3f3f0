//! Single-binary command line. Every training-style command writes into a
//! run directory `{out}/{run_id}/` containing the resolved config and CSV
//! logs; run ids are deterministic (no timestamps), and all randomness
//! flows from the seed in the config through labeled substreams.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analyze;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CkptError};
use crate::config::{parse_config, write_resolved};
use crate::data::{batchify, read_split, unigram_perplexity, DataError, Vocab};
use crate::lm::{CellKind, LmConfig, LmModel};
use crate::prune::{
    prune_pipeline, write_prune_log, PruneError, PruneLogRow, PruneMasks,
};
use crate::rng::Rng;
use crate::sparse_infer::{
    compile, count_macs_structural, measure_effective_macs, render_mac_table, write_mac_report,
};
use crate::train::{
    evaluate, fit, gradient_check_stack, write_train_log, OptimState, TrainError,
};
use crate::StepMode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Analyze(#[from] analyze::AnalyzeError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Msg(String),
}

fn msg(s: impl Into<String>) -> CliError {
    CliError::Msg(s.into())
}

#[derive(Parser, Debug)]
#[command(
    name = "egru-lm",
    about = "Train, prune, and benchmark event-driven sparse recurrent language models",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. --set train.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Directory holding train.txt, valid.txt, and test.txt.
    #[arg(long, default_value = "crates/core/data/desk")]
    data: PathBuf,
    /// Root directory that run directories are created under.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run directory name; defaults to a deterministic id derived from the
    /// command, the cell, and the seed.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a dense model and save its checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Prune a trained checkpoint stepwise, fine-tuning after each step.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to start from (typically ckpt_dense.bin of a train run).
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Report perplexity and per-layer activity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "crates/core/data/desk")]
        data: PathBuf,
        /// One of train, valid, test.
        #[arg(long, default_value = "valid")]
        split: String,
    },
    /// Train once per weight-decay value and report the activity trend.
    SweepWd {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated wd_weights values.
        #[arg(long, default_value = "0.0,0.3")]
        values: String,
    },
    /// Histograms and diagnostics for a checkpoint, or (with --tables)
    /// the cross-run summary table for a runs root.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "valid")]
        split: String,
        /// Aggregate summary.csv files under --out into one table.
        #[arg(long)]
        tables: bool,
    },
    /// Compile a model and report structural and measured MAC counts.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to compile; without it the config alone is costed.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Measure effective MACs over this many validation tokens
        /// (0 = structural only).
        #[arg(long, default_value_t = 0)]
        tokens: usize,
        /// Weight density for the structural estimate without a checkpoint.
        #[arg(long, default_value_t = 1.0)]
        lambda_w: f64,
        /// Vocabulary size for the structural estimate without a checkpoint.
        #[arg(long, default_value_t = 10_000)]
        vocab_size: usize,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck,
}

/// Parses and runs. Returns the process exit code: 0 on success, 1 on a
/// runtime error, 2 on a usage error (clap's convention).
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run_cmd(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run_cmd(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train { run } => cmd_train(&run),
        Cmd::Prune { run, ckpt } => cmd_prune(&run, &ckpt),
        Cmd::Eval { ckpt, data, split } => cmd_eval(&ckpt, &data, &split),
        Cmd::SweepWd { run, values } => cmd_sweep_wd(&run, &values),
        Cmd::Analyze { run, ckpt, split, tables } => cmd_analyze(&run, ckpt.as_deref(), &split, tables),
        Cmd::Bench { run, ckpt, tokens, lambda_w, vocab_size } => {
            cmd_bench(&run, ckpt.as_deref(), tokens, lambda_w, vocab_size)
        }
        Cmd::Gradcheck => cmd_gradcheck(),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

struct Splits {
    vocab: Vocab,
    train: Vec<u32>,
    valid: Vec<u32>,
    test: Vec<u32>,
}

fn load_splits(dir: &Path, max_vocab: usize) -> Result<Splits, CliError> {
    let train_text = read_split(&dir.join("train.txt"))?;
    let valid_text = read_split(&dir.join("valid.txt"))?;
    let test_text = read_split(&dir.join("test.txt"))?;
    let cap = (max_vocab > 0).then_some(max_vocab);
    let vocab = Vocab::build(&train_text, cap)?;
    Ok(Splits {
        train: vocab.encode(&train_text),
        valid: vocab.encode(&valid_text),
        test: vocab.encode(&test_text),
        vocab,
    })
}

fn split_ids<'a>(s: &'a Splits, name: &str) -> Result<&'a [u32], CliError> {
    match name {
        "train" => Ok(&s.train),
        "valid" => Ok(&s.valid),
        "test" => Ok(&s.test),
        _ => Err(msg(format!("unknown split {name:?}: expected train, valid, or test"))),
    }
}

fn cell_label(cfg: &LmConfig) -> String {
    match cfg.cell {
        CellKind::Lstm => "lstm".to_string(),
        CellKind::Egru => {
            let mode = match cfg.mode {
                StepMode::Event => "event",
                StepMode::Dense => "dense",
                StepMode::Smooth => "smooth",
            };
            format!("egru-{mode}")
        }
    }
}

fn make_run_dir(run: &RunArgs, default_id: &str) -> Result<PathBuf, CliError> {
    let id = run.run_id.clone().unwrap_or_else(|| default_id.to_string());
    let dir = run.out.join(id);
    fs::create_dir_all(&dir)
        .map_err(|source| CliError::Io { path: dir.display().to_string(), source })?;
    Ok(dir)
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Loads a checkpoint plus the vocabulary it was trained with. The vocab is
/// read from `vocab.txt` next to the checkpoint when present, otherwise
/// rebuilt from the training split; either way the content hash must match
/// what the checkpoint recorded.
fn load_ckpt_with_vocab(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Vocab), CliError> {
    let ck = load_checkpoint(ckpt)?;
    let sibling = ckpt.parent().map(|d| d.join("vocab.txt"));
    let vocab = match sibling.as_deref().filter(|p| p.is_file()) {
        Some(p) => Vocab::load(p)?,
        None => {
            let text = read_split(&data.join("train.txt"))?;
            Vocab::build(&text, Some(ck.model.cfg.vocab_size))?
        }
    };
    if vocab.content_hash() != ck.vocab_hash {
        return Err(msg(format!(
            "vocabulary mismatch: checkpoint records hash {:#x}, data gives {:#x}",
            ck.vocab_hash,
            vocab.content_hash()
        )));
    }
    Ok((ck, vocab))
}

fn mean_lambda(lambda: &[f64], dims: &[usize]) -> f64 {
    let total: usize = dims.iter().sum();
    lambda.iter().zip(dims).map(|(l, &h)| l * h as f64).sum::<f64>() / total as f64
}

fn measured_macs_per_token(
    model: &LmModel<f32>,
    masks: Option<&PruneMasks>,
    ids: &[u32],
) -> f64 {
    let cm = compile(model, masks);
    measure_effective_macs(&cm, ids).effective_total
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(run: &RunArgs) -> Result<(), CliError> {
    let cfg = parse_config(run.config.as_deref(), &run.set)?;
    cfg.validate().map_err(msg)?;
    let splits = load_splits(&run.data, cfg.model.max_vocab)?;
    let lm_cfg = cfg.model.to_lm_config(splits.vocab.size());
    lm_cfg.validate().map_err(msg)?;

    let default_id = format!("train-{}-s{}", cell_label(&lm_cfg), cfg.train.seed);
    let dir = make_run_dir(run, &default_id)?;
    write_resolved(&dir, &cfg).map_err(io_at(&dir))?;
    splits.vocab.save(&dir.join("vocab.txt"))?;

    let root = Rng::new(cfg.train.seed);
    let mut model = LmModel::init(&lm_cfg, &root.substream("init"));
    let mut opt = OptimState::zeros_for(&model);
    let batched = batchify(&splits.train, cfg.train.batch_size)?;
    println!(
        "training {} on {} train tokens, vocab {}",
        cell_label(&lm_cfg),
        splits.train.len(),
        splits.vocab.size()
    );
    let log = fit(
        &mut model,
        &mut opt,
        &batched,
        &splits.valid,
        &cfg.train,
        None,
        &root.substream("noise"),
    )?;
    write_train_log(&dir.join("train_log.csv"), &log, lm_cfg.hidden_dims.len())
        .map_err(io_at(&dir))?;
    for row in &log {
        println!(
            "epoch {:>3}  train_loss {:.4}  valid_ppl {:.2}  lambda_a {:?}",
            row.epoch,
            row.train_loss,
            row.valid_ppl,
            row.lambda_a.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }

    let masks = PruneMasks::unpruned(&lm_cfg);
    save_checkpoint(
        &dir.join("ckpt_dense.bin"),
        &model,
        &opt,
        &masks,
        splits.vocab.content_hash(),
    )?;

    let valid = evaluate(&model, &splits.valid);
    let test = evaluate(&model, &splits.test);
    let unigram = unigram_perplexity(&splits.train, &splits.valid, splits.vocab.size());
    let macs = measured_macs_per_token(&model, None, &splits.valid);
    analyze::write_run_summary(
        &dir,
        &analyze::RunSummary {
            model: cell_label(&lm_cfg),
            seed: cfg.train.seed,
            weight_sparsity: 0.0,
            effective_macs: macs,
            valid_ppl: valid.ppl,
            test_ppl: test.ppl,
        },
    )
    .map_err(io_at(&dir))?;
    println!(
        "done: valid ppl {:.2}, test ppl {:.2} (unigram baseline {:.2}), {:.0} MACs/token",
        valid.ppl, test.ppl, unigram, macs
    );
    println!("run directory: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// prune

fn cmd_prune(run: &RunArgs, ckpt: &Path) -> Result<(), CliError> {
    let cfg = parse_config(run.config.as_deref(), &run.set)?;
    cfg.validate().map_err(msg)?;
    let (ck, vocab) = load_ckpt_with_vocab(ckpt, &run.data)?;
    let lm_cfg = ck.model.cfg.clone();
    let splits = load_splits(&run.data, vocab.size())?;

    let default_id = format!(
        "prune-{}-t{}-s{}",
        cell_label(&lm_cfg),
        cfg.prune.target_sparsity,
        cfg.train.seed
    );
    let dir = make_run_dir(run, &default_id)?;
    write_resolved(&dir, &cfg).map_err(io_at(&dir))?;
    vocab.save(&dir.join("vocab.txt"))?;

    let mut model = ck.model;
    let mut opt = ck.opt;
    let mut masks = ck.masks;
    let batched = batchify(&splits.train, cfg.train.batch_size)?;
    let root = Rng::new(cfg.train.seed);

    println!(
        "pruning {} to {:.0}% over {} steps, {} fine-tune epochs each",
        cell_label(&lm_cfg),
        cfg.prune.target_sparsity * 100.0,
        cfg.prune.n_steps,
        cfg.prune.finetune_epochs
    );
    let mut step_macs = Vec::new();
    let outcomes = prune_pipeline(
        &mut model,
        &mut opt,
        &mut masks,
        &cfg.prune,
        &cfg.train,
        &batched,
        &splits.valid,
        &root.substream("prune-noise"),
        |step, m, mk| {
            step_macs.push(measured_macs_per_token(m, Some(mk), &splits.valid));
            let _ = save_checkpoint(
                &dir.join(format!("ckpt_step{step}.bin")),
                m,
                &OptimState::zeros_for(m),
                mk,
                vocab.content_hash(),
            );
        },
    )?;
    let rows: Vec<PruneLogRow> = outcomes
        .iter()
        .zip(&step_macs)
        .map(|(o, &macs)| PruneLogRow {
            step: o.step,
            target_sparsity: o.target_sparsity,
            achieved_sparsity: o.achieved_sparsity,
            valid_ppl: o.valid_ppl,
            effective_macs: macs,
        })
        .collect();
    write_prune_log(&dir.join("prune_log.csv"), &rows).map_err(io_at(&dir))?;
    for o in &outcomes {
        println!(
            "step {}: target {:.3}, achieved {:.3}, valid ppl {:.2}{}",
            o.step,
            o.target_sparsity,
            o.achieved_sparsity,
            o.valid_ppl,
            if o.diverged { " (diverged, stopped)" } else { "" }
        );
    }

    save_checkpoint(&dir.join("ckpt_pruned.bin"), &model, &opt, &masks, vocab.content_hash())?;
    let cm = compile(&model, Some(&masks));
    let report = measure_effective_macs(&cm, &splits.valid);
    write_mac_report(&dir.join("macs.csv"), &report).map_err(io_at(&dir))?;
    println!("{}", render_mac_table(&report));

    let valid = evaluate(&model, &splits.valid);
    let test = evaluate(&model, &splits.test);
    analyze::write_run_summary(
        &dir,
        &analyze::RunSummary {
            model: cell_label(&lm_cfg),
            seed: cfg.train.seed,
            weight_sparsity: masks.sparsity(),
            effective_macs: report.effective_total,
            valid_ppl: valid.ppl,
            test_ppl: test.ppl,
        },
    )
    .map_err(io_at(&dir))?;
    println!(
        "done: sparsity {:.4}, valid ppl {:.2}, test ppl {:.2}, {:.0} MACs/token",
        masks.sparsity(),
        valid.ppl,
        test.ppl,
        report.effective_total
    );
    println!("run directory: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(ckpt: &Path, data: &Path, split: &str) -> Result<(), CliError> {
    let (ck, vocab) = load_ckpt_with_vocab(ckpt, data)?;
    let splits = load_splits(data, vocab.size())?;
    let ids = split_ids(&splits, split)?;
    let ev = evaluate(&ck.model, ids);
    println!(
        "{} on {}: ppl {:.4} over {} tokens",
        cell_label(&ck.model.cfg),
        split,
        ev.ppl,
        ev.tokens
    );
    for (l, la) in ev.lambda_a.iter().enumerate() {
        println!("layer {l}: lambda_a {la:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-wd

fn cmd_sweep_wd(run: &RunArgs, values: &str) -> Result<(), CliError> {
    let cfg = parse_config(run.config.as_deref(), &run.set)?;
    cfg.validate().map_err(msg)?;
    let wd_values: Vec<f64> = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| msg(format!("bad wd value {v:?}"))))
        .collect::<Result<_, _>>()?;
    if wd_values.is_empty() {
        return Err(msg("no wd values given"));
    }
    let splits = load_splits(&run.data, cfg.model.max_vocab)?;
    let lm_cfg = cfg.model.to_lm_config(splits.vocab.size());
    lm_cfg.validate().map_err(msg)?;
    let dir = make_run_dir(run, &format!("sweep-wd-s{}", cfg.train.seed))?;
    write_resolved(&dir, &cfg).map_err(io_at(&dir))?;

    let batched = batchify(&splits.train, cfg.train.batch_size)?;
    let mut csv = String::from("wd_weights,valid_ppl,lambda_a,weight_mean\n");
    println!("{:>10} {:>10} {:>9} {:>12}", "wd_weights", "valid_ppl", "lambda_a", "weight_mean");
    for &wd in &wd_values {
        // same seed and data order for every point; only the decay differs
        let root = Rng::new(cfg.train.seed);
        let mut model = LmModel::init(&lm_cfg, &root.substream("init"));
        let mut opt = OptimState::zeros_for(&model);
        let mut tcfg = cfg.train.clone();
        tcfg.wd_weights = wd;
        fit(&mut model, &mut opt, &batched, &splits.valid, &tcfg, None, &root.substream("noise"))?;
        let ev = evaluate(&model, &splits.valid);
        let la = mean_lambda(&ev.lambda_a, &lm_cfg.hidden_dims);
        let wm = analyze::gate_weight_mean(&model);
        use std::fmt::Write as _;
        let _ = writeln!(csv, "{wd},{},{la},{wm}", ev.ppl);
        println!("{wd:>10} {:>10.2} {la:>9.4} {wm:>12.3e}", ev.ppl);
    }
    fs::write(dir.join("sweep_wd.csv"), csv).map_err(io_at(&dir))?;
    println!("run directory: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

fn cmd_analyze(
    run: &RunArgs,
    ckpt: Option<&Path>,
    split: &str,
    tables: bool,
) -> Result<(), CliError> {
    if tables {
        let table = analyze::emit_tables(&run.out)?;
        fs::write(run.out.join("table.csv"), &table.csv).map_err(io_at(&run.out))?;
        fs::write(run.out.join("table.txt"), &table.text).map_err(io_at(&run.out))?;
        print!("{}", table.text);
        return Ok(());
    }
    let ckpt = ckpt.ok_or_else(|| msg("analyze needs --ckpt (or --tables for the summary)"))?;
    let (ck, vocab) = load_ckpt_with_vocab(ckpt, &run.data)?;
    let splits = load_splits(&run.data, vocab.size())?;
    let ids = split_ids(&splits, split)?;

    let dir = make_run_dir(run, &format!("analyze-{}-{split}", cell_label(&ck.model.cfg)))?;
    for h in analyze::activity_histogram(&ck.model, ids, analyze::DEFAULT_BINS, split)? {
        analyze::write_histogram_csv(&dir, &h).map_err(io_at(&dir))?;
        analyze::write_histogram_svg(&dir, &h).map_err(io_at(&dir))?;
    }
    for h in analyze::cell_state_histogram(&ck.model, ids, analyze::DEFAULT_BINS, split)? {
        analyze::write_histogram_csv(&dir, &h).map_err(io_at(&dir))?;
        analyze::write_histogram_svg(&dir, &h).map_err(io_at(&dir))?;
    }
    for h in analyze::weight_histogram(&ck.model, analyze::DEFAULT_BINS) {
        analyze::write_histogram_csv(&dir, &h).map_err(io_at(&dir))?;
        analyze::write_histogram_svg(&dir, &h).map_err(io_at(&dir))?;
    }

    let rows = analyze::preactivation_diagnostic(&ck.model, ids)?;
    analyze::write_preact_csv(&dir.join("preactivation.csv"), &rows).map_err(io_at(&dir))?;
    println!(
        "{:>5} {:>10} {:>10} {:>10} {:>11} {:>11} {:>9}",
        "layer", "E[W]", "E[a]", "E[b]", "predicted", "measured", "rel_gap"
    );
    for r in &rows {
        println!(
            "{:>5} {:>10.3e} {:>10.4} {:>10.3e} {:>11.4} {:>11.4} {:>9.3}",
            r.layer, r.e_w, r.e_a, r.e_b, r.predicted, r.measured, r.rel_gap
        );
    }

    let ev = evaluate(&ck.model, ids);
    for (l, la) in ev.lambda_a.iter().enumerate() {
        println!("layer {l}: lambda_a {la:.4}");
    }
    if let (Some(top), Some(rest)) = (
        ev.lambda_a.last(),
        (ev.lambda_a.len() > 1)
            .then(|| ev.lambda_a[..ev.lambda_a.len() - 1].iter().sum::<f64>()
                / (ev.lambda_a.len() - 1) as f64),
    ) {
        // observation only; whether the output layer runs hotter than the
        // interior depends on the trained model
        println!(
            "output layer activity {:.4} vs interior mean {:.4}",
            top, rest
        );
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

fn cmd_bench(
    run: &RunArgs,
    ckpt: Option<&Path>,
    tokens: usize,
    lambda_w: f64,
    vocab_size: usize,
) -> Result<(), CliError> {
    match ckpt {
        Some(ckpt) => {
            let ck = load_checkpoint(ckpt)?;
            let cfg = &ck.model.cfg;
            let masks = ck.masks;
            let lw = masks.density();
            println!(
                "{}: structural {:.0} MACs/token dense, {:.0} at stored density {:.4}",
                cell_label(cfg),
                count_macs_structural(cfg, 1.0),
                count_macs_structural(cfg, lw),
                lw
            );
            if tokens > 0 {
                let splits = load_splits(&run.data, cfg.vocab_size)?;
                let n = tokens.min(splits.valid.len());
                let cm = compile(&ck.model, Some(&masks));
                let report = measure_effective_macs(&cm, &splits.valid[..n]);
                let dir = make_run_dir(run, &format!("bench-{}", cell_label(cfg)))?;
                write_mac_report(&dir.join("macs.csv"), &report).map_err(io_at(&dir))?;
                println!("{}", render_mac_table(&report));
                println!("run directory: {}", dir.display());
            }
        }
        None => {
            let cfg = parse_config(run.config.as_deref(), &run.set)?;
            let lm_cfg = cfg.model.to_lm_config(vocab_size);
            println!(
                "{}: structural {:.0} MACs/token dense, {:.0} at lambda_w {}",
                cell_label(&lm_cfg),
                count_macs_structural(&lm_cfg, 1.0),
                count_macs_structural(&lm_cfg, lambda_w),
                lambda_w
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

fn cmd_gradcheck() -> Result<(), CliError> {
    let mut ok = true;
    for cell in [CellKind::Egru, CellKind::Lstm] {
        let cfg = LmConfig {
            vocab_size: 17,
            embed_dim: 8,
            hidden_dims: vec![8, 8],
            cell,
            mode: StepMode::Smooth,
            dropout_p: 0.0,
            dropconnect_p: 0.0,
            train_theta: true,
            surrogate_lambda: 1.0,
            surrogate_epsilon: 1.0,
        };
        let report = gradient_check_stack(&cfg, 4, 11);
        let label = match cell {
            CellKind::Egru => "egru",
            CellKind::Lstm => "lstm",
        };
        println!("{label}: max relative error {:.3e}", report.max_rel);
        for (name, err) in &report.per_tensor {
            println!("  {name:<22} {err:.3e}");
        }
        ok &= report.passed();
    }
    if ok {
        println!("all gradients match finite differences");
        Ok(())
    } else {
        Err(msg("gradient check failed: see per-tensor errors above"))
    }
}

// ---------------------------------------------------------------------------
