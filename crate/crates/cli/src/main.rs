use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hierloss::trainer::OptimizerKind;
use hierloss::TpKlMode;
use serde_json::json;

mod commands;
mod config;

use config::{parse_list, ConfigError, Override};

#[derive(Debug, Parser)]
#[command(
    name = "hierloss",
    version,
    about = "Hierarchy-aware losses, adapter training and metrics"
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for the generator and the trainer.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parent directory for run directories [default: runs].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical dataset.
    GenSynth {
        #[command(flatten)]
        synth: SynthFlags,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one adapter and record per-epoch metrics.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a prediction file against a taxonomy.
    Eval {
        #[arg(long, value_name = "CSV")]
        preds: PathBuf,
        #[arg(long, value_name = "JSON")]
        taxonomy: PathBuf,
    },
    /// Grid search over the loss weights.
    Sweep {
        #[command(flatten)]
        run: RunFlags,
        /// Comma-separated lambda1 values.
        #[arg(long, value_parser = num_list::<f64>)]
        lambda1: Option<NumList<f64>>,
        /// Comma-separated lambda2 values.
        #[arg(long, value_parser = num_list::<f64>)]
        lambda2: Option<NumList<f64>>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare CE only, TP-KL only, HiSCE only and the joint objective.
    Ablate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        /// Keep CE in the single-term arms.
        #[arg(long)]
        keep_ce: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Randomized finite-difference checks of every analytic gradient.
    CheckGrads {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Re-export adapter-transformed features and class embeddings of a train run.
    DumpEmbeddings {
        /// Run directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SynthFlags {
    /// Children per class at each level, e.g. 3,3,3.
    #[arg(long, value_parser = num_list::<usize>)]
    branching: Option<NumList<usize>>,
    #[arg(long)]
    per_leaf: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    signal: Option<f64>,
}

#[derive(Debug, Args)]
struct RunFlags {
    /// Dataset directory; a synthetic dataset is generated when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Spot-check every applied gradient.
    #[arg(long)]
    check_grads: bool,
    /// Global value or comma-separated per-level values.
    #[arg(long, value_parser = num_list::<f64>)]
    epsilon: Option<NumList<f64>>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    tpkl_mode: Option<TpKlMode>,
}

/// Comma-separated flag value, kept as one clap argument.
#[derive(Debug, Clone)]
struct NumList<T>(Vec<T>);

fn num_list<T: std::str::FromStr>(s: &str) -> Result<NumList<T>, String> {
    parse_list(s).map(NumList)
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adamw" => Ok(OptimizerKind::Adamw),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer {s:?} (adamw or sgd)")),
    }
}

fn parse_mode(s: &str) -> Result<TpKlMode, String> {
    s.parse().map_err(|e: hierloss::Error| e.to_string())
}

fn floats(v: &[f64]) -> toml::Value {
    toml::Value::Array(v.iter().map(|&x| toml::Value::Float(x)).collect())
}

impl SynthFlags {
    fn overrides(&self, out: &mut Vec<Override>) {
        if let Some(NumList(b)) = &self.branching {
            let v = b.iter().map(|&x| toml::Value::Integer(x as i64)).collect::<Vec<_>>();
            out.push(Override::new("data.synth.branching", toml::Value::Array(v)));
        }
        if let Some(n) = self.per_leaf {
            out.push(Override::new("data.synth.samples_per_leaf", n as i64));
        }
        if let Some(n) = self.dim {
            out.push(Override::new("data.synth.dim", n as i64));
        }
        if let Some(x) = self.spread {
            out.push(Override::new("data.synth.spread", x));
        }
        if let Some(x) = self.signal {
            out.push(Override::new("data.synth.signal", x));
        }
    }
}

impl RunFlags {
    fn overrides(&self, out: &mut Vec<Override>) {
        if let Some(d) = &self.data {
            out.push(Override::new("data.dir", d.display().to_string()));
        }
        self.synth.overrides(out);
        let ints = [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("train.rank", self.rank),
        ];
        for (k, v) in ints {
            if let Some(v) = v {
                out.push(Override::new(k, v as i64));
            }
        }
        let reals = [
            ("train.lr", self.lr),
            ("train.weight_decay", self.weight_decay),
            ("train.alpha", self.alpha),
            ("train.loss.tau", self.tau),
        ];
        for (k, v) in reals {
            if let Some(v) = v {
                out.push(Override::new(k, v));
            }
        }
        if let Some(o) = self.optimizer {
            let name = match o {
                OptimizerKind::Adamw => "adamw",
                OptimizerKind::Sgd => "sgd",
            };
            out.push(Override::new("train.optimizer", name));
        }
        if self.check_grads {
            out.push(Override::new("train.check_grads", true));
        }
        match self.epsilon.as_ref().map(|l| l.0.as_slice()) {
            Some([e]) => out.push(Override::new("train.loss.epsilon", *e)),
            Some(list) => out.push(Override::new("train.loss.epsilon", floats(list))),
            None => {}
        }
        if let Some(m) = self.tpkl_mode {
            let name = match m {
                TpKlMode::PerLevel => "per-level",
                TpKlMode::Global => "global",
            };
            out.push(Override::new("train.loss.tpkl_mode", name));
        }
    }
}

fn lambda_overrides(l1: Option<f64>, l2: Option<f64>, out: &mut Vec<Override>) {
    if let Some(v) = l1 {
        out.push(Override::new("train.loss.lambda1", v));
    }
    if let Some(v) = l2 {
        out.push(Override::new("train.loss.lambda2", v));
    }
}

#[derive(Debug, thiserror::Error)]
#[error("input file {} does not exist", .0.display())]
pub struct MissingInput(pub PathBuf);

/// Reads a user-supplied text file, reporting absence distinctly.
pub fn read_input(path: &Path) -> anyhow::Result<String> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn check_input(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingInput(path.to_path_buf()).into())
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<commands::CheckFailed>() {
            return "gradient_check";
        }
        if cause.is::<MissingInput>() {
            return "missing_input";
        }
        if let Some(core) = cause.downcast_ref::<hierloss::Error>() {
            return core.kind();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

fn report_error(kind: &str, e: &anyhow::Error) -> ExitCode {
    let context: Vec<String> = e.chain().map(ToString::to_string).collect();
    let body = json!({
        "status": "error",
        "kind": kind,
        "message": e.to_string(),
        "context": context,
    });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("HIERLOSS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("HIERLOSS_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker pool")
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    configure_threads()?;
    let mut ov = Vec::new();
    if let Some(s) = cli.seed {
        ov.push(Override::new("train.seed", s as i64));
        ov.push(Override::new("data.synth.seed", s as i64));
    }
    let parse_rest = |rest: &[String], ov: &mut Vec<Override>| -> anyhow::Result<()> {
        for r in rest {
            ov.push(Override::parse(r)?);
        }
        Ok(())
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::GenSynth { synth, overrides } => {
            synth.overrides(&mut ov);
            parse_rest(&overrides, &mut ov)?;
            commands::gen_synth(&config::resolve(cfg_path, &ov)?, &out)
        }
        Command::Train {
            run,
            lambda1,
            lambda2,
            overrides,
        } => {
            run.overrides(&mut ov);
            lambda_overrides(lambda1, lambda2, &mut ov);
            parse_rest(&overrides, &mut ov)?;
            commands::train(&config::resolve(cfg_path, &ov)?, &out)
        }
        Command::Eval { preds, taxonomy } => commands::eval(&preds, &taxonomy, cli.out.as_deref()),
        Command::Sweep {
            run,
            lambda1,
            lambda2,
            overrides,
        } => {
            run.overrides(&mut ov);
            if let Some(NumList(v)) = lambda1 {
                ov.push(Override::new("sweep.lambda1", floats(&v)));
            }
            if let Some(NumList(v)) = lambda2 {
                ov.push(Override::new("sweep.lambda2", floats(&v)));
            }
            parse_rest(&overrides, &mut ov)?;
            commands::sweep(&config::resolve(cfg_path, &ov)?, &out)
        }
        Command::Ablate {
            run,
            lambda1,
            lambda2,
            keep_ce,
            overrides,
        } => {
            run.overrides(&mut ov);
            lambda_overrides(lambda1, lambda2, &mut ov);
            if keep_ce {
                ov.push(Override::new("ablate.keep_ce", true));
            }
            parse_rest(&overrides, &mut ov)?;
            commands::ablate(&config::resolve(cfg_path, &ov)?, &out)
        }
        Command::CheckGrads { trials } => commands::check_grads(trials, cli.seed.unwrap_or(0), &out),
        Command::DumpEmbeddings { run } => commands::dump_embeddings(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = json!({
                "status": "error",
                "kind": "usage",
                "message": e.kind().to_string(),
                "context": [e.render().to_string()],
            });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(status) => {
            println!("{status}");
            ExitCode::SUCCESS
        }
        Err(e) => report_error(error_kind(&e), &e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hierloss::data::write_predictions;
    use hierloss::{Dataset, LabelPath, PredictionSet, Taxonomy};

    fn invoke(args: &[&str]) -> anyhow::Result<serde_json::Value> {
        let mut argv = vec!["hierloss"];
        argv.extend_from_slice(args);
        run(Cli::try_parse_from(argv)?)
    }

    fn dir_of(v: &serde_json::Value) -> PathBuf {
        PathBuf::from(v["run_dir"].as_str().unwrap())
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn gen_synth_sizes() {
        let tmp = tempfile::tempdir().unwrap();
        let v = invoke(&[
            "--out",
            s(tmp.path()),
            "gen-synth",
            "--branching",
            "2,2,2",
            "--per-leaf",
            "5",
        ])
        .unwrap();
        assert_eq!(v["leaves"], 8);
        assert_eq!(v["samples"], 40);
        let ds = Dataset::load_dir(dir_of(&v)).unwrap();
        assert_eq!(ds.taxonomy.num_leaves(), 8);
        assert_eq!(ds.train.len() + ds.val.len(), 40);
    }

    #[test]
    fn eval_perfect_predictions() {
        let tmp = tempfile::tempdir().unwrap();
        let tax = Taxonomy::balanced(&[2, 3]).unwrap();
        let tax_path = tmp.path().join("t.json");
        tax.save(&tax_path).unwrap();
        let truth: Vec<LabelPath> = (0..6).map(|l| tax.ancestor_path(l).unwrap()).collect();
        let preds = tmp.path().join("p.csv");
        write_predictions(&preds, &PredictionSet::new(&tax, truth.clone(), truth).unwrap()).unwrap();
        let v = invoke(&["eval", "--preds", s(&preds), "--taxonomy", s(&tax_path)]).unwrap();
        assert_eq!(v["report"]["fpa"], 1.0);
        assert_eq!(v["report"]["tice"], 0.0);
        assert!(v.get("run_dir").is_none());
        assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 2);
        let out = tmp.path().join("out");
        let v = invoke(&[
            "--out",
            s(&out),
            "eval",
            "--preds",
            s(&preds),
            "--taxonomy",
            s(&tax_path),
        ])
        .unwrap();
        assert!(dir_of(&v).join("report.json").exists());
    }

    #[test]
    fn train_artifacts_reproduce_from_resolved_config() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("runs");
        let common = ["--seed", "3", "--out", s(&out)];
        let v = invoke(
            &[
                &common[..],
                &[
                    "train",
                    "--branching",
                    "2,2",
                    "--dim",
                    "8",
                    "--epochs",
                    "4",
                    "--lambda1",
                    "0.5",
                    "train.rank=4",
                ],
            ]
            .concat(),
        )
        .unwrap();
        let first = dir_of(&v);
        for f in [
            "config.toml",
            "record.json",
            "epochs.csv",
            "adapter.json",
            "predictions.csv",
            "dump_features.csv",
            "dump_embeddings.csv",
        ] {
            assert!(first.join(f).exists(), "{f}");
        }
        let cfg = std::fs::read_to_string(first.join("config.toml")).unwrap();
        assert!(cfg.contains("lambda1 = 0.5") && cfg.contains("rank = 4"));
        let cfg_path = first.join("config.toml");
        let again = dir_of(&invoke(&["--config", s(&cfg_path), "--out", s(&out), "train"]).unwrap());
        assert_ne!(first, again);
        for f in ["record.json", "adapter.json", "dump_features.csv"] {
            assert_eq!(
                std::fs::read(first.join(f)).unwrap(),
                std::fs::read(again.join(f)).unwrap(),
                "{f}"
            );
        }
        assert_eq!(
            std::fs::read_to_string(first.join("epochs.csv"))
                .unwrap()
                .lines()
                .count(),
            6
        );

        let dump = std::fs::read(first.join("dump_features.csv")).unwrap();
        std::fs::remove_file(first.join("dump_features.csv")).unwrap();
        invoke(&["dump-embeddings", "--run", s(&first)]).unwrap();
        assert_eq!(std::fs::read(first.join("dump_features.csv")).unwrap(), dump);
    }

    #[test]
    fn sweep_and_ablate_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let out = s(tmp.path());
        let small = ["--branching", "2,2", "--dim", "6", "--epochs", "2"];
        let v = invoke(
            &[
                &["--out", out, "sweep"][..],
                &small,
                &["--lambda1", "0,1", "--lambda2", "0,2"],
            ]
            .concat(),
        )
        .unwrap();
        assert_eq!(v["cells"], 4);
        let d = dir_of(&v);
        assert_eq!(
            std::fs::read_to_string(d.join("response.csv")).unwrap().lines().count(),
            5
        );
        assert_eq!(std::fs::read_dir(d.join("records")).unwrap().count(), 4);
        let v = invoke(&[&["--out", out, "ablate", "--keep-ce"][..], &small].concat()).unwrap();
        let d = dir_of(&v);
        assert!(std::fs::read_to_string(d.join("config.toml"))
            .unwrap()
            .contains("keep_ce = true"));
        assert_eq!(std::fs::read_dir(d.join("records")).unwrap().count(), 4);
    }

    #[test]
    fn check_grads_command() {
        let tmp = tempfile::tempdir().unwrap();
        let v = invoke(&["--out", s(tmp.path()), "check-grads", "--trials", "10"]).unwrap();
        assert_eq!(v["checks"].as_array().unwrap().len(), 5);
        assert!(dir_of(&v).join("check_grads.json").exists());
    }

    #[test]
    fn error_kinds() {
        let tmp = tempfile::tempdir().unwrap();
        let out = s(tmp.path());
        let kind = |args: &[&str]| error_kind(&invoke(args).unwrap_err());
        let missing = tmp.path().join("nope");
        assert_eq!(kind(&["--out", out, "train", "--data", s(&missing)]), "missing_input");
        assert_eq!(kind(&["--out", out, "train", "train.nope=1"]), "config");
        assert_eq!(kind(&["--out", out, "train", "--epochs", "0"]), "invalid_parameter");
        let bad = tmp.path().join("bad.toml");
        std::fs::write(&bad, "train = [").unwrap();
        assert_eq!(kind(&["--config", s(&bad), "--out", out, "train"]), "config");
        let tax = tmp.path().join("t.json");
        std::fs::write(
            &tax,
            r#"{"levels":[{"name":"a","classes":[{"name":"x","parent":"y"}]}]}"#,
        )
        .unwrap();
        assert_eq!(
            kind(&["eval", "--preds", s(&tax), "--taxonomy", s(&tax)]),
            "invalid_taxonomy"
        );
        assert!(Cli::try_parse_from(["hierloss", "train", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["hierloss", "sweep", "--lambda1", "1,x"]).is_err());
    }
}
