//! Command-line front end: train and evaluate models from TOML configs,
//! run the built-in verification suites, and generate synthetic tree
//! datasets to disk.
//!
//! Exit codes: 0 success, 1 I/O trouble, 2 bad configuration or usage,
//! 3 numeric failure (a verification check did not hold).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aan_core::checkpoint;
use aan_core::config::RunConfig;
use aan_core::data::{generate, DatasetSpec};
use aan_core::error::Error;
use aan_core::propagate::{dfd, TraceEvent};
use aan_core::train::{evaluate, train, MetricRow, Sample};
use aan_core::verify::run_suite;
use aan_core::{NodeId, Tape, Var};

#[derive(Parser)]
#[command(name = "aan", about = "Association networks over neuro trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics.csv and model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the head mode: shared or per-task.
        #[arg(long)]
        head: Option<String>,
        /// Override the cell: ran, lan, raan, laan, gau or gaau.
        #[arg(long)]
        cell: Option<String>,
        /// Print the propagation trace of one sample before training.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate a checkpoint on a config's validation split.
    Eval {
        ckpt: PathBuf,
        config: PathBuf,
        /// Directory for metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite: equivalence, gradients, traversal,
    /// batching, attention or all.
    Verify { suite: String },
    /// Generate a dataset from a JSON spec into a directory of tree files.
    GenData {
        spec: PathBuf,
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Validation(_) | Error::Checkpoint(_) => {
            ExitCode::from(2)
        }
        Error::NonFinite(_) | Error::Numeric(_) => ExitCode::from(3),
        _ => ExitCode::FAILURE,
    }
}

const CSV_HEADER: &str = "epoch,domain,split,loss,accuracy";

/// Drop a top-level `key = ...` line so an override can replace it.
fn strip_key(text: &str, key: &str) -> String {
    let mut in_top_level = true;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim_start().starts_with('[') {
            in_top_level = false;
        }
        let is_key = in_top_level
            && line
                .trim_start()
                .strip_prefix(key)
                .map(|rest| rest.trim_start().starts_with('='))
                .unwrap_or(false);
        if !is_key {
            out.push(line);
        }
    }
    out.join("\n")
}

fn csv_line(r: &MetricRow) -> String {
    format!(
        "{},{},{},{:.6},{:.6}",
        r.epoch, r.group, r.split, r.loss, r.accuracy
    )
}

fn print_trace(events: &[TraceEvent]) {
    for e in events {
        println!("{}\t{}\t{}\t{}", e.pass.label(), e.phase.label(), e.node, e.depth);
    }
}

fn trace_one(built: &aan_core::config::BuiltRun, sample: &Sample) -> Result<(), Error> {
    let tape = Tape::new();
    let bound = built.model.bind(&tape);
    let mut features: BTreeMap<NodeId, Var> = BTreeMap::new();
    for id in sample.tree.node_ids() {
        let node = sample.tree.node(id)?;
        if let (Some(p), Some(d)) = (&node.payload, node.domain) {
            features.insert(id, bound.registry.features(&tape, d, p)?);
        }
    }
    let conv = bound.conv(&tape, &sample.tree, &features)?;
    print_trace(&conv.trace);
    let deconv = dfd(
        &tape,
        &bound.inverse,
        bound.cell.config().readout,
        &sample.tree,
        &conv,
        false,
    )?;
    print_trace(&deconv.trace);
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    head: Option<String>,
    cell: Option<String>,
    trace: bool,
) -> Result<(), Error> {
    let mut text = fs::read_to_string(config_path)?;
    let mut cfg = RunConfig::from_toml(&text)?;
    let overridden = seed.is_some() || head.is_some() || cell.is_some();
    if let Some(s) = seed {
        cfg.seed = s;
        text = format!("seed = {s}\n{}", strip_key(&text, "seed"));
    }
    if let Some(h) = head {
        cfg.head = h.clone();
        text = format!("head = {h:?}\n{}", strip_key(&text, "head"));
    }
    if let Some(c) = cell {
        cfg.cell = c.clone();
        text = format!("cell = {c:?}\n{}", strip_key(&text, "cell"));
    }
    if overridden {
        // the rewritten text must still describe the run we execute
        RunConfig::from_toml(&text)?;
    }
    cfg.head_mode()?;
    cfg.cell_kind()?;
    let mut built = cfg.build()?;
    if trace {
        if let Some(first) = built.train_set.first().cloned() {
            trace_one(&built, &first)?;
        }
    }
    println!("{CSV_HEADER}");
    let mut lines = vec![CSV_HEADER.to_string()];
    let rows = {
        let built = &mut built;
        let mut opt = built.optimizer.clone();
        train(
            &mut built.model,
            &mut opt,
            &built.train_set,
            &built.val_set,
            &built.options,
            |epoch_rows| {
                for r in epoch_rows {
                    println!("{}", csv_line(r));
                }
            },
        )?
    };
    lines.extend(rows.iter().map(csv_line));
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), lines.join("\n") + "\n")?;
        checkpoint::save(
            &dir.join("model.ckpt"),
            &text,
            cfg.epochs as u64,
            &built.model,
        )?;
    }
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, config_path: &Path, out: Option<&Path>) -> Result<(), Error> {
    let loaded = checkpoint::load(ckpt_path)?;
    let model_cfg = RunConfig::from_toml(&loaded.config_text)?;
    let mut built = model_cfg.build()?;
    checkpoint::restore(&mut built.model, &loaded.params)?;

    let eval_text = fs::read_to_string(config_path)?;
    let eval_cfg = RunConfig::from_toml(&eval_text)?;
    let eval_built = eval_cfg.build()?;

    println!("{CSV_HEADER}");
    let mut lines = vec![CSV_HEADER.to_string()];
    for (group, loss, acc) in evaluate(&built.model, &eval_built.val_set, &eval_built.options)? {
        let row = MetricRow {
            epoch: loaded.epoch as usize,
            group,
            split: "val".into(),
            loss,
            accuracy: acc,
        };
        println!("{}", csv_line(&row));
        lines.push(csv_line(&row));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), lines.join("\n") + "\n")?;
    }
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<(), Error> {
    let reports = run_suite(suite)?;
    let mut all_ok = true;
    for report in &reports {
        for c in &report.checks {
            println!(
                "{}\t{}\t{}\t{}",
                report.name,
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.detail
            );
            all_ok &= c.passed;
        }
    }
    if !all_ok {
        return Err(Error::Numeric(format!("suite {suite} has failing checks")));
    }
    Ok(())
}

fn cmd_gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut spec = DatasetSpec::from_json(&fs::read_to_string(spec_path)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (train_set, val_set) = generate(&spec, 0, 0)?;
    for (split, samples) in [("train", &train_set), ("val", &val_set)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir)?;
        let mut labels = vec!["index,label".to_string()];
        for (i, s) in samples.iter().enumerate() {
            fs::write(dir.join(format!("{i:05}.json")), s.tree.to_json())?;
            labels.push(format!("{i},{}", s.label));
        }
        fs::write(dir.join("labels.csv"), labels.join("\n") + "\n")?;
    }
    fs::write(out.join("spec.json"), spec.to_json())?;
    println!(
        "wrote {} train and {} val trees to {}",
        train_set.len(),
        val_set.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            head,
            cell,
            trace,
        } => cmd_train(&config, seed, out.as_deref(), head, cell, trace),
        Command::Eval { ckpt, config, out } => cmd_eval(&ckpt, &config, out.as_deref()),
        Command::Verify { suite } => cmd_verify(&suite),
        Command::GenData { spec, out, seed } => cmd_gen_data(&spec, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
