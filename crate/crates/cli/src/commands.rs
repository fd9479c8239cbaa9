use std::path::{Path, PathBuf};

use anyhow::Context;
use hierloss::data::{read_predictions, write_class_embeddings, write_features, write_predictions};
use hierloss::gradcheck::randomized_suite;
use hierloss::metrics::evaluate;
use hierloss::trainer::{ablation, generate_synthetic, grid_search, sweep_table, train_model, Model};
use hierloss::{AdapterState, Dataset, PredictionSet, Samples, Taxonomy};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, RunConfig};
use crate::{check_input, read_input};

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "record.json";
pub const ADAPTER_FILE: &str = "adapter.json";

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

/// Creates `out/<timestamp>-<tag>`, adding a numeric suffix if it exists.
fn create_run_dir(out: &Path, tag: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{tag}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn seeded_run_dir(out: &Path, config: &RunConfig) -> anyhow::Result<PathBuf> {
    create_run_dir(out, &format!("seed{}", config.train.seed))
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(dir, name, &text)
}

fn write_config(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    write(dir, CONFIG_FILE, &config::to_toml(config)?)
}

fn load_dataset(config: &RunConfig) -> anyhow::Result<Dataset> {
    match &config.data.dir {
        Some(dir) => {
            check_input(dir)?;
            Dataset::load_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))
        }
        None => generate_synthetic(&config.data.synth).context("generating synthetic dataset"),
    }
}

fn transformed(model: &Model, samples: &Samples) -> anyhow::Result<Samples> {
    Ok(Samples {
        features: model.transform(samples)?,
        labels: samples.labels.clone(),
    })
}

fn write_dump(dir: &Path, data: &Dataset, model: &Model) -> anyhow::Result<()> {
    let train = transformed(model, &data.train)?;
    let val = transformed(model, &data.val)?;
    write_features(dir.join("dump_features.csv"), &data.taxonomy, &train, &val)?;
    write_class_embeddings(dir.join("dump_embeddings.csv"), &data.class_embeds)?;
    Ok(())
}

fn ok(command: &str, dir: Option<&Path>, extra: Value) -> Value {
    let mut v = json!({ "status": "ok", "command": command });
    if let Some(d) = dir {
        v["run_dir"] = json!(d.display().to_string());
    }
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

pub fn gen_synth(config: &RunConfig, out: &Path) -> anyhow::Result<Value> {
    let data = generate_synthetic(&config.data.synth)?;
    let dir = create_run_dir(out, &format!("seed{}", config.data.synth.seed))?;
    data.save_dir(&dir)?;
    write_config(&dir, config)?;
    let sizes = data.taxonomy.level_sizes();
    println!(
        "{} levels {:?}, {} leaves, {} samples ({} train, {} val), dim {}",
        sizes.len(),
        sizes,
        data.taxonomy.num_leaves(),
        data.train.len() + data.val.len(),
        data.train.len(),
        data.val.len(),
        data.dim()
    );
    Ok(ok(
        "gen-synth",
        Some(&dir),
        json!({
            "leaves": data.taxonomy.num_leaves(),
            "samples": data.train.len() + data.val.len(),
        }),
    ))
}

pub fn train(config: &RunConfig, out: &Path) -> anyhow::Result<Value> {
    let data = load_dataset(config)?;
    let (record, model) = train_model(&config.train, &data)?;
    let dir = seeded_run_dir(out, config)?;
    write_config(&dir, config)?;
    write_json(&dir, RECORD_FILE, &record)?;
    write(&dir, "epochs.csv", &record.epochs_csv())?;
    write_json(&dir, ADAPTER_FILE, &model.adapter)?;
    let preds = PredictionSet::new(&data.taxonomy, model.predictions(&data.val)?, data.val.labels.clone())?;
    write_predictions(dir.join("predictions.csv"), &preds)?;
    write_dump(&dir, &data, &model)?;
    print!("{}", record.final_report.to_table(&data.taxonomy));
    log::info!("trained in {:.2}s", record.wall_time_secs);
    let m = &record.final_report;
    Ok(ok(
        "train",
        Some(&dir),
        json!({ "accuracy": m.accuracy, "fpa": m.fpa, "tice": m.tice, "wap": m.wap }),
    ))
}

pub fn eval(preds: &Path, taxonomy: &Path, out: Option<&Path>) -> anyhow::Result<Value> {
    check_input(taxonomy)?;
    check_input(preds)?;
    let tax = Taxonomy::load(taxonomy)?;
    let set = read_predictions(preds, &tax)?;
    let report = evaluate(&set, &tax);
    let table = report.to_table(&tax);
    print!("{table}");
    let dir = match out {
        Some(o) => {
            let dir = create_run_dir(o, "eval")?;
            write_json(&dir, "report.json", &report)?;
            write(&dir, "report.txt", &table)?;
            Some(dir)
        }
        None => None,
    };
    Ok(ok("eval", dir.as_deref(), json!({ "report": report })))
}

fn number_tag(v: f64) -> String {
    format!("{v}").replace('-', "m")
}

pub fn sweep(config: &RunConfig, out: &Path) -> anyhow::Result<Value> {
    let data = load_dataset(config)?;
    let grid = grid_search(&config.sweep.lambda1, &config.sweep.lambda2, &config.train, &data)?;
    let dir = seeded_run_dir(out, config)?;
    write_config(&dir, config)?;
    write(&dir, "response.csv", &grid.response_csv())?;
    let table = sweep_table(&grid);
    write(&dir, "table.txt", &table)?;
    let records = dir.join("records");
    std::fs::create_dir(&records)?;
    for c in &grid.cells {
        if let Some(r) = c.record() {
            let name = format!(
                "lambda1_{}_lambda2_{}.json",
                number_tag(c.lambda1),
                number_tag(c.lambda2)
            );
            write_json(&records, &name, r)?;
        }
    }
    print!("{table}");
    let best = grid
        .best_cell()
        .map(|c| json!({ "lambda1": c.lambda1, "lambda2": c.lambda2 }));
    Ok(ok(
        "sweep",
        Some(&dir),
        json!({ "cells": grid.cells.len(), "failed": grid.failed, "best": best }),
    ))
}

pub fn ablate(config: &RunConfig, out: &Path) -> anyhow::Result<Value> {
    let data = load_dataset(config)?;
    let result = ablation(&config.train, &data, config.ablate.keep_ce);
    let dir = seeded_run_dir(out, config)?;
    write_config(&dir, config)?;
    let table = result.table();
    write(&dir, "table.txt", &table)?;
    let records = dir.join("records");
    std::fs::create_dir(&records)?;
    let mut failed = 0;
    for (arm, rec) in &result.arms {
        let name = serde_json::to_value(arm)?.as_str().unwrap_or("arm").to_string();
        match rec {
            Ok(r) => write_json(&records, &format!("{name}.json"), r)?,
            Err(e) => {
                failed += 1;
                log::warn!("ablation arm {} failed: {e}", arm.label());
            }
        }
    }
    print!("{table}");
    Ok(ok("ablate", Some(&dir), json!({ "failed": failed })))
}

pub fn check_grads(trials: usize, seed: u64, out: &Path) -> anyhow::Result<Value> {
    if trials == 0 {
        return Err(crate::config::ConfigError("trials must be positive".into()).into());
    }
    let summary = randomized_suite(trials, seed)?;
    let dir = create_run_dir(out, &format!("seed{seed}"))?;
    write_json(&dir, "check_grads.json", &summary)?;
    println!(
        "{:<18} {:>7} {:>12} {:>10}  result",
        "target", "trials", "max rel err", "tolerance"
    );
    for s in &summary {
        println!(
            "{:<18} {:>7} {:>12.3e} {:>10.0e}  {}",
            s.target,
            s.trials,
            s.max_rel_error,
            s.tolerance,
            if s.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = summary.iter().filter(|s| !s.passed).map(|s| s.target).collect();
    if !failed.is_empty() {
        return Err(CheckFailed(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(ok("check-grads", Some(&dir), json!({ "checks": summary })))
}

pub fn dump_embeddings(run: &Path) -> anyhow::Result<Value> {
    let cfg_path = run.join(CONFIG_FILE);
    let config = config::resolve(Some(&cfg_path), &[])?;
    let adapter: AdapterState = serde_json::from_str(&read_input(&run.join(ADAPTER_FILE))?)
        .with_context(|| format!("parsing {}", run.join(ADAPTER_FILE).display()))?;
    let data = load_dataset(&config)?;
    let model = Model::new(adapter, &data, &config.train.loss)?;
    write_dump(run, &data, &model)?;
    println!("wrote dump_features.csv and dump_embeddings.csv");
    Ok(ok("dump-embeddings", Some(run), json!({})))
}
