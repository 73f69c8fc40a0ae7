//! Per-epoch metrics CSV, JSON run summary and plot-series export.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::config::RunConfig;

pub const HEADER: &str = "epoch,train_loss,lr,knn_acc,probe_acc,wall_time_s";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROBE_FILE: &str = "probe.csv";
pub const PROBE_HEADER: &str = "checkpoint,config_hash,top1,n_eval,per_class";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub knn_acc: Option<f64>,
    pub probe_acc: Option<f64>,
    pub wall_time_s: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.lr,
            opt(self.knn_acc),
            opt(self.probe_acc),
            self.wall_time_s
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, got {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let optional = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            epoch: f[0].parse().map_err(|e| format!("epoch {:?}: {e}", f[0]))?,
            train_loss: num(f[1])?,
            lr: num(f[2])?,
            knn_acc: optional(f[3])?,
            probe_acc: optional(f[4])?,
            wall_time_s: num(f[5])?,
        })
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "lr": self.lr,
            "knn_acc": self.knn_acc,
            "probe_acc": self.probe_acc,
            "wall_time_s": self.wall_time_s,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(HEADER) => {}
        other => {
            return Err(MetricsError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("bad header {other:?}"),
            })
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            MetricsRow::parse(l).map_err(|msg| MetricsError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg,
            })
        })
        .collect()
}

/// Single writer for one run directory.
pub struct MetricsWriter {
    csv: PathBuf,
    summary: PathBuf,
    config: serde_json::Value,
    config_hash: String,
}

impl MetricsWriter {
    /// Create `dir`, check it is writable and prepare `metrics.csv`. When
    /// resuming after `resume_epoch` epochs, rows beyond that epoch are
    /// dropped so no epoch is logged twice.
    pub fn open(dir: &Path, cfg: &RunConfig, resume_epoch: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let csv = dir.join(METRICS_FILE);
        let kept = if resume_epoch > 0 && csv.exists() {
            read_metrics(&csv)?.into_iter().filter(|r| r.epoch <= resume_epoch).collect()
        } else {
            Vec::new()
        };
        let mut text = format!("{HEADER}\n");
        for r in &kept {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        fs::write(&csv, text).map_err(io(&csv))?;
        let config: serde_json::Map<String, serde_json::Value> =
            cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        Ok(Self {
            csv,
            summary: dir.join(SUMMARY_FILE),
            config: serde_json::Value::Object(config),
            config_hash: cfg.hash(),
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.csv).map_err(io(&self.csv))?;
        writeln!(f, "{}", row.to_csv()).map_err(io(&self.csv))?;
        f.flush().map_err(io(&self.csv))
    }

    pub fn write_summary(&self, last: &MetricsRow, step: u64) -> Result<()> {
        let v = json!({
            "config_hash": self.config_hash,
            "config": self.config,
            "final": last.to_json(),
            "steps": step,
        });
        let text = serde_json::to_string_pretty(&v).expect("json");
        fs::write(&self.summary, text + "\n").map_err(io(&self.summary))
    }

    pub fn csv_path(&self) -> &Path {
        &self.csv
    }
}

/// Append one probe result row to `probe.csv` next to the checkpoint.
pub fn append_probe_row(path: &Path, checkpoint: &str, config_hash: &str, top1: f64, n_eval: usize, per_class: &[f64]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
    if fresh {
        writeln!(f, "{PROBE_HEADER}").map_err(io(path))?;
    }
    let pc = per_class.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
    writeln!(f, "{checkpoint},{config_hash},{top1},{n_eval},{pc}").map_err(io(path))
}

/// Long-format `series,x,y` CSV of loss and accuracy curves.
pub fn export_plot(rows: &[MetricsRow]) -> String {
    let mut out = String::from("series,x,y\n");
    let mut series = |name: &str, f: &dyn Fn(&MetricsRow) -> Option<f64>| {
        for r in rows {
            if let Some(y) = f(r) {
                out.push_str(&format!("{name},{},{y}\n", r.epoch));
            }
        }
    };
    series("train_loss", &|r| Some(r.train_loss));
    series("lr", &|r| Some(r.lr));
    series("knn_acc", &|r| r.knn_acc);
    series("probe_acc", &|r| r.probe_acc);
    out
}

/// Fail early if `dir` cannot hold run output.
pub fn check_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let probe = dir.join(".write_check");
    File::create(&probe).map_err(io(&probe))?;
    fs::remove_file(&probe).map_err(io(&probe))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> MetricsRow {
        MetricsRow {
            epoch,
            train_loss: 1.0 / epoch as f64,
            lr: 0.001,
            knn_acc: epoch.is_multiple_of(2).then_some(0.5),
            probe_acc: None,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn three_epochs_four_lines_and_resume_without_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let mut w = MetricsWriter::open(dir.path(), &cfg, 0).unwrap();
        for e in 1..=3 {
            w.append(&row(e)).unwrap();
        }
        let text = fs::read_to_string(w.csv_path()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next(), Some(HEADER));
        let mut w = MetricsWriter::open(dir.path(), &cfg, 2).unwrap();
        w.append(&row(3)).unwrap();
        let rows = read_metrics(w.csv_path()).unwrap();
        assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(rows[1], row(2));
    }

    #[test]
    fn summary_carries_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let w = MetricsWriter::open(dir.path(), &cfg, 0).unwrap();
        w.write_summary(&row(1), 10).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], json!(cfg.hash()));
        assert_eq!(v["config"]["batch_size"], json!("128"));
        assert_eq!(v["steps"], json!(10));
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        assert!(check_writable(&file.join("sub")).is_err());
        assert!(MetricsWriter::open(&file.join("sub"), &RunConfig::default(), 0).is_err());
    }

    #[test]
    fn plot_export_and_probe_rows() {
        let s = export_plot(&[row(1), row(2)]);
        assert!(s.starts_with("series,x,y\ntrain_loss,1,1\n"));
        assert!(s.contains("knn_acc,2,0.5\n"));
        assert!(!s.contains("probe_acc"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(PROBE_FILE);
        append_probe_row(&p, "ep1.ckpt", "abc", 0.5, 4, &[0.5, 0.5]).unwrap();
        append_probe_row(&p, "ep2.ckpt", "abc", 0.75, 4, &[1.0, 0.5]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.ends_with("ep2.ckpt,abc,0.75,4,1;0.5\n"));
    }
}
