//! Command-line experiment runner.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sdmp::checkpoint::{read_checkpoint, Checkpoint};
use sdmp::config::{parse_flags, parse_kv, RunConfig};
use sdmp::data::{load_dataset, LabeledSet};
use sdmp::evaluation::{self, Corruption, FinetuneOptions, ProbeOptions};
use sdmp::metrics::{self, append_probe_row, check_writable, export_plot, read_metrics};
use sdmp::model::init_params;
use sdmp::trainer::{run_training, RunOptions};

pub const USAGE: &str = "usage: sdmp <command> [options] [--<config-key> <value> ...]

commands:
  pretrain      --config FILE --out DIR [--resume CKPT] [--stop-after N]
  probe         --ckpt FILE
  knn           --ckpt FILE [--k K]
  finetune      (--ckpt FILE | --config FILE) --fraction F [--epochs E] [--lr LR]
  corrupt-eval  --ckpt FILE [--corruption NAME] [--seed S]
  ablate        --config FILE --out DIR [--grid key=v1|v2 ...]
  export-plot   --metrics FILE [--out FILE]

Any config key may be given as a flag and overrides the config file.";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit code 2.
    Usage(String),
    /// Runtime failure; exit code 1.
    Failed { kind: &'static str, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error kind=usage msg={m:?}"),
            CliError::Failed { kind, msg } => write!(f, "error kind={kind} msg={msg:?}"),
        }
    }
}

fn fail<E: fmt::Display>(kind: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Failed { kind, msg: e.to_string() }
}

/// Command options split from config-key overrides.
struct Args {
    opts: Vec<(String, String)>,
    overrides: Vec<String>,
}

impl Args {
    fn parse(args: &[String], own: &[&str]) -> Result<Self, CliError> {
        let mut opts = Vec::new();
        let mut overrides = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            let Some(flag) = a.strip_prefix("--") else {
                return Err(CliError::Usage(format!("unexpected argument {a:?}")));
            };
            let (name, inline) = match flag.split_once('=') {
                Some((n, v)) => (n.to_string(), Some(v.to_string())),
                None => (flag.to_string(), None),
            };
            let value = match inline {
                Some(v) => v,
                None => {
                    i += 1;
                    args.get(i).cloned().ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?
                }
            };
            if own.contains(&name.as_str()) {
                opts.push((name, value));
            } else {
                overrides.push(format!("--{name}"));
                overrides.push(value);
            }
            i += 1;
        }
        Ok(Self { opts, overrides })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.opts.iter().rev().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    fn all(&self, name: &str) -> Vec<&str> {
        self.opts.iter().filter(|(n, _)| n == name).map(|(_, v)| v.as_str()).collect()
    }

    fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name).ok_or_else(|| CliError::Usage(format!("missing --{name}")))
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| CliError::Usage(format!("--{name} {v:?}: {e}"))),
        }
    }
}

fn load_config(path: Option<&str>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(path.map(Path::new), overrides).map_err(fail("config"))?;
    cfg.echo();
    Ok(cfg)
}

fn datasets(cfg: &RunConfig) -> Result<(LabeledSet, LabeledSet), CliError> {
    load_dataset(&cfg.dataset).map_err(fail("data"))
}

/// Checkpoint plus the config stored in its manifest, with overrides applied.
fn open_checkpoint(args: &Args) -> Result<(PathBuf, Checkpoint, RunConfig), CliError> {
    let path = PathBuf::from(args.require("ckpt")?);
    let ck = read_checkpoint(&path).map_err(fail("checkpoint"))?;
    let file = parse_kv(&ck.manifest.config).map_err(fail("config"))?;
    let flags = parse_flags(&args.overrides).map_err(fail("config"))?;
    let cfg = RunConfig::resolve(&file, &flags).map_err(fail("config"))?;
    Ok((path, ck, cfg))
}

fn probe_options(cfg: &RunConfig) -> ProbeOptions {
    ProbeOptions {
        epochs: cfg.probe_epochs,
        lr: cfg.probe_lr,
        seed: cfg.seed,
        ..Default::default()
    }
}

fn pretrain(args: &Args) -> Result<String, CliError> {
    let cfg = load_config(args.get("config"), &args.overrides)?;
    let out = PathBuf::from(args.require("out")?);
    check_writable(&out).map_err(fail("io"))?;
    let (train, test) = datasets(&cfg)?;
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        resume_from: args.get("resume").map(PathBuf::from),
        stop_after_epochs: args.get("stop-after").map(|v| v.parse()).transpose().map_err(fail("usage"))?,
    };
    let outcome = run_training(&cfg, &train, &test, &opts).map_err(fail("train"))?;
    let last = outcome.rows.last().map(|r| r.to_csv()).unwrap_or_default();
    Ok(format!(
        "pretrain done: {} epochs, {} steps, config {}\n{}\n{last}\n",
        outcome.state.epoch,
        outcome.state.step,
        cfg.hash(),
        metrics::HEADER
    ))
}

fn probe(args: &Args) -> Result<String, CliError> {
    let (path, ck, cfg) = open_checkpoint(args)?;
    let (train, test) = datasets(&cfg)?;
    let student = ck.group("student");
    let out = evaluation::linear_probe(&cfg.topology(), &student, &train, &test, &probe_options(&cfg)).map_err(fail("eval"))?;
    let r = out.result;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let probe_csv = path.parent().unwrap_or(Path::new(".")).join(metrics::PROBE_FILE);
    append_probe_row(&probe_csv, &name, &ck.manifest.config_hash, r.top1, r.n_eval, &r.per_class).map_err(fail("io"))?;
    let pc = r.per_class.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
    Ok(format!(
        "{}\n{name},{},{},{},{pc}\n",
        metrics::PROBE_HEADER,
        ck.manifest.config_hash,
        r.top1,
        r.n_eval
    ))
}

fn knn(args: &Args) -> Result<String, CliError> {
    let (_, ck, cfg) = open_checkpoint(args)?;
    let (train, test) = datasets(&cfg)?;
    let k = args.parsed("k", cfg.knn_k)?;
    let acc = evaluation::knn_eval(&cfg.topology(), &ck.group("student"), &train, &test, k).map_err(fail("eval"))?;
    Ok(format!("knn k={k} top1={acc}\n"))
}

fn finetune(args: &Args) -> Result<String, CliError> {
    let (cfg, init) = if args.get("ckpt").is_some() {
        let (_, ck, cfg) = open_checkpoint(args)?;
        let init = ck.group("student");
        (cfg, init)
    } else {
        let cfg = load_config(args.get("config"), &args.overrides)?;
        let init = init_params(cfg.seed, &cfg.topology());
        (cfg, init)
    };
    let fraction: f64 = args.parsed("fraction", 1.0)?;
    let (train, test) = datasets(&cfg)?;
    let opts = FinetuneOptions {
        epochs: args.parsed("epochs", FinetuneOptions::default().epochs)?,
        lr: args.parsed("lr", FinetuneOptions::default().lr)?,
        seed: cfg.seed,
        ..Default::default()
    };
    let r = evaluation::fraction_finetune(&cfg.topology(), &init, &train, &test, fraction, &opts).map_err(fail("eval"))?;
    Ok(format!("finetune fraction={fraction} n_train={} top1={}\n", r.n_train, r.result.top1))
}

fn corrupt_eval(args: &Args) -> Result<String, CliError> {
    let (_, ck, cfg) = open_checkpoint(args)?;
    let corruptions: Vec<Corruption> = match args.get("corruption") {
        Some(c) => vec![c.parse().map_err(fail("usage"))?],
        None => Corruption::ALL.to_vec(),
    };
    let seed = args.parsed("seed", cfg.seed)?;
    let (train, test) = datasets(&cfg)?;
    let topology = cfg.topology();
    let student = ck.group("student");
    let probe = evaluation::linear_probe(&topology, &student, &train, &test, &probe_options(&cfg)).map_err(fail("eval"))?;
    let mut out = String::from("corruption,severity,top1\n");
    for c in corruptions {
        for (sev, acc) in evaluation::corruption_eval(&topology, &student, &probe.classifier, &test, c, seed).map_err(fail("eval"))? {
            out.push_str(&format!("{c},{sev},{acc}\n"));
        }
    }
    Ok(out)
}

/// Default ablation grid: weight modes × λ sharing × strategy sets × view policy.
const DEFAULT_GRID: &[&str] = &[
    "weight_source=random|static",
    "weight_mix=random|static",
    "lambda_mode=per_sample|per_batch",
    "strategies=mixup|cutmix|resizemix|mixup,cutmix,resizemix",
    "view_policy=replace|extra",
];

fn grid_points(specs: &[&str]) -> Result<Vec<Vec<(String, String)>>, CliError> {
    let mut points: Vec<Vec<(String, String)>> = vec![vec![]];
    for spec in specs {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--grid {spec:?} is not key=v1|v2")))?;
        let mut next = Vec::new();
        for p in &points {
            for v in values.split('|') {
                let mut q = p.clone();
                q.push((key.to_string(), v.to_string()));
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

fn ablate(args: &Args) -> Result<String, CliError> {
    let out = PathBuf::from(args.require("out")?);
    check_writable(&out).map_err(fail("io"))?;
    let given = args.all("grid");
    let specs: Vec<&str> = if given.is_empty() { DEFAULT_GRID.to_vec() } else { given };
    let mut index = String::from("run,config_hash,settings,final_loss\n");
    for (i, point) in grid_points(&specs)?.into_iter().enumerate() {
        let mut flags = args.overrides.clone();
        for (k, v) in &point {
            flags.push(format!("--{k}"));
            flags.push(v.clone());
        }
        let cfg = load_config(args.get("config"), &flags)?;
        let hash = cfg.hash();
        let name = format!("run{i:03}_{}", &hash[..8]);
        let (train, test) = datasets(&cfg)?;
        let opts = RunOptions {
            out_dir: Some(out.join(&name)),
            ..Default::default()
        };
        let outcome = run_training(&cfg, &train, &test, &opts).map_err(fail("train"))?;
        let settings = point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        let loss = outcome.rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
        index.push_str(&format!("{name},{hash},\"{settings}\",{loss}\n"));
    }
    let path = out.join("ablate.csv");
    fs::write(&path, &index).map_err(fail("io"))?;
    Ok(index)
}

fn export(args: &Args) -> Result<String, CliError> {
    let rows = read_metrics(Path::new(args.require("metrics")?)).map_err(fail("io"))?;
    let csv = export_plot(&rows);
    match args.get("out") {
        Some(p) => {
            fs::write(p, &csv).map_err(fail("io"))?;
            Ok(format!("wrote {p}\n"))
        }
        None => Ok(csv),
    }
}

/// Run one command; returns text for stdout.
pub fn run(argv: &[String]) -> Result<String, CliError> {
    let Some((cmd, rest)) = argv.split_first() else {
        return Err(CliError::Usage(USAGE.into()));
    };
    let own: &[&str] = match cmd.as_str() {
        "pretrain" => &["config", "out", "resume", "stop-after"],
        "probe" => &["ckpt"],
        "knn" => &["ckpt", "k"],
        "finetune" => &["ckpt", "config", "fraction", "epochs", "lr"],
        "corrupt-eval" => &["ckpt", "corruption", "seed"],
        "ablate" => &["config", "out", "grid"],
        "export-plot" => &["metrics", "out"],
        "help" | "--help" | "-h" => return Ok(format!("{USAGE}\n")),
        other => return Err(CliError::Usage(format!("unknown command {other:?}\n{USAGE}"))),
    };
    let args = Args::parse(rest, own)?;
    match cmd.as_str() {
        "pretrain" => pretrain(&args),
        "probe" => probe(&args),
        "knn" => knn(&args),
        "finetune" => finetune(&args),
        "corrupt-eval" => corrupt_eval(&args),
        "ablate" => ablate(&args),
        _ => export(&args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn splits_own_options_from_overrides() {
        let a = Args::parse(&s(&["--out", "d", "--alpha", "0.5", "--epochs=3"]), &["out"]).unwrap();
        assert_eq!(a.get("out"), Some("d"));
        assert_eq!(a.overrides, s(&["--alpha", "0.5", "--epochs", "3"]));
        assert!(Args::parse(&s(&["stray"]), &[]).is_err());
        assert!(Args::parse(&s(&["--out"]), &["out"]).is_err());
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let g = grid_points(&["a=1|2", "b=x|y|z"]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[5], vec![("a".into(), "2".into()), ("b".into(), "z".into())]);
        assert_eq!(grid_points(DEFAULT_GRID).unwrap().len(), 64);
        assert!(grid_points(&["nokey"]).is_err());
    }

    #[test]
    fn unknown_command_is_usage_error() {
        let e = run(&s(&["frobnicate"])).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(run(&[]).unwrap_err().exit_code(), 2);
        let e = run(&s(&["export-plot", "--metrics", "/nonexistent/m.csv"])).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().starts_with("error kind=io "));
    }
}
