//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{Temperature, ViewPolicy, WeightMode};
use crate::mixing::{LambdaMode, MixSpec, Strategy};
use crate::model::{Backbone, DistillHead, Topology};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("flag `{0}` has no value")]
    MissingValue(String),
    #[error("bad value for `{key}`: {value:?} ({msg})")]
    Value { key: String, value: String, msg: String },
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Framework {
    Contrastive,
    Distillation,
}

impl FromStr for Framework {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "contrastive" | "moco" => Ok(Self::Contrastive),
            "distillation" | "dino" => Ok(Self::Distillation),
            _ => Err("expected contrastive or distillation".into()),
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Contrastive => "contrastive",
            Self::Distillation => "distillation",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { dir: PathBuf, normalize: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Use only the first `n` training / test samples (0 = all).
    pub train_subset: usize,
    pub test_subset: usize,
}

/// Every knob of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub framework: Framework,
    pub mixing: bool,
    pub strategies: Vec<Strategy>,
    pub alpha_mixup: f64,
    pub alpha_cutmix: f64,
    pub alpha_resizemix: f64,
    pub lambda_mode: LambdaMode,
    pub patch_range: (f64, f64),
    pub weight_source: WeightMode,
    pub weight_mix: WeightMode,
    pub view_policy: ViewPolicy,
    pub n_local_views: usize,
    pub local_mixed_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub temperature: Temperature,
    pub center_momentum: f64,
    pub momentum: f64,
    pub seed: u64,
    pub backbone: Backbone,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    pub distill_hidden: usize,
    pub distill_bottleneck: usize,
    pub out_dim: usize,
    pub augment: bool,
    pub blur: bool,
    pub solarize: bool,
    pub dataset: DatasetSpec,
    pub checkpoint_every: usize,
    pub knn_every: usize,
    pub knn_k: usize,
    pub probe_every: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub log_wall_time: bool,
}

/// Keys, defaults and one-line descriptions, in canonical order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("framework", "contrastive", "contrastive | distillation"),
    ("mixing", "true", "enable intra-batch mixing"),
    ("strategies", "mixup,cutmix,resizemix", "strategy set, one drawn per batch"),
    ("alpha", "", "Beta(α,α) for every strategy; empty = per-strategy values"),
    ("alpha_mixup", "0.8", "Beta α for Mixup"),
    ("alpha_cutmix", "1.0", "Beta α for CutMix"),
    ("alpha_resizemix", "1.0", "Beta α for ResizeMix"),
    ("lambda_mode", "per_sample", "per_sample | per_batch"),
    ("patch_min", "0.1", "ResizeMix minimum side fraction"),
    ("patch_max", "0.8", "ResizeMix maximum side fraction"),
    ("weight_source", "random", "random | static source weights"),
    ("weight_mix", "random", "random | static mixing weights"),
    ("view_policy", "replace", "replace | extra"),
    ("n_local_views", "8", "distillation local crops"),
    ("local_mixed_fraction", "0.5", "fraction of local crops replaced by mixed crops"),
    ("epochs", "100", ""),
    ("batch_size", "128", "must be even"),
    ("base_lr", "0.0005", "lr at batch 256; scaled linearly"),
    ("warmup_epochs", "10", ""),
    ("weight_decay", "0.04", "decoupled"),
    ("tau", "0.2", "contrastive temperature"),
    ("tau_student", "0.1", ""),
    ("tau_teacher", "0.04", ""),
    ("center_momentum", "0.9", "teacher centering EMA"),
    ("momentum", "0.99", "teacher EMA momentum"),
    ("seed", "0", ""),
    ("backbone", "cnn", "cnn | mlp"),
    ("cnn_channels", "16,32,64,64", "stem and three block widths"),
    ("mlp_hidden", "512,256,128", "hidden widths of the MLP backbone"),
    ("proj_hidden", "256", ""),
    ("proj_dim", "64", ""),
    ("pred_hidden", "256", "contrastive predictor width"),
    ("distill_hidden", "256", ""),
    ("distill_bottleneck", "64", ""),
    ("out_dim", "256", "distillation logits K"),
    ("augment", "true", "crop/flip/jitter augmentations"),
    ("blur", "false", ""),
    ("solarize", "false", ""),
    ("dataset", "synthetic", "synthetic | cifar10"),
    ("data_dir", "", "CIFAR-10 binary directory"),
    ("cifar_normalize", "false", "per-channel CIFAR mean/std normalization"),
    ("train_subset", "0", "0 = all"),
    ("test_subset", "0", "0 = all"),
    ("synthetic_classes", "10", ""),
    ("synthetic_train_per_class", "50", ""),
    ("synthetic_test_per_class", "20", ""),
    ("synthetic_size", "32", ""),
    ("synthetic_channels", "3", ""),
    ("synthetic_sigma", "0.1", ""),
    ("data_seed", "0", ""),
    ("checkpoint_every", "10", "epochs between checkpoints; 0 = final only"),
    ("knn_every", "0", "epochs between kNN evaluations; 0 = never"),
    ("knn_k", "20", ""),
    ("probe_every", "0", "epochs between linear probes; 0 = never"),
    ("probe_epochs", "50", ""),
    ("probe_lr", "0.1", ""),
    ("log_wall_time", "true", "false writes 0 so metrics are byte-reproducible"),
];

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let k = k.trim();
        if !known(k) {
            return Err(ConfigError::UnknownKey { key: k.to_string() });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Turn `--key value` / `--key=value` flags into overrides. Dashes in keys
/// map to underscores.
pub fn parse_flags<S: AsRef<str>>(args: &[S]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut it = args.iter().map(AsRef::as_ref);
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(ConfigError::Syntax { line: 0, text: a.to_string() });
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::MissingValue(a.to_string()))?;
                (flag.to_string(), v.to_string())
            }
        };
        let k = k.replace('-', "_");
        if !known(&k) {
            return Err(ConfigError::UnknownKey { key: k });
        }
        out.insert(k, v);
    }
    Ok(out)
}

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn raw(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or("")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.into(),
            value: v.into(),
            msg: e.to_string(),
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let v = self.raw(key);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

impl RunConfig {
    /// Defaults overlaid with `file`, then with `flags`.
    pub fn resolve(file: &BTreeMap<String, String>, flags: &BTreeMap<String, String>) -> Result<Self> {
        let mut map: BTreeMap<String, String> = KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        for (k, v) in file.iter().chain(flags) {
            if !known(k) {
                return Err(ConfigError::UnknownKey { key: k.clone() });
            }
            map.insert(k.clone(), v.clone());
        }
        let r = Reader { map };
        let shared_alpha: Option<f64> = match r.raw("alpha") {
            "" => None,
            _ => Some(r.get("alpha")?),
        };
        let backbone = match r.raw("backbone") {
            "cnn" => {
                let c: Vec<usize> = r.list("cnn_channels")?;
                let channels: [usize; 4] = c.try_into().map_err(|_| ConfigError::Value {
                    key: "cnn_channels".into(),
                    value: r.raw("cnn_channels").into(),
                    msg: "expected four widths".into(),
                })?;
                Backbone::Cnn { channels }
            }
            "mlp" => Backbone::Mlp { hidden: r.list("mlp_hidden")? },
            other => {
                return Err(ConfigError::Value {
                    key: "backbone".into(),
                    value: other.into(),
                    msg: "expected cnn or mlp".into(),
                })
            }
        };
        let source = match r.raw("dataset") {
            "synthetic" => DataSource::Synthetic(SyntheticSpec {
                n_classes: r.get("synthetic_classes")?,
                train_per_class: r.get("synthetic_train_per_class")?,
                test_per_class: r.get("synthetic_test_per_class")?,
                image_size: r.get("synthetic_size")?,
                channels: r.get("synthetic_channels")?,
                sigma: r.get("synthetic_sigma")?,
                seed: r.get("data_seed")?,
            }),
            "cifar10" => DataSource::Cifar10 {
                dir: PathBuf::from(r.raw("data_dir")),
                normalize: r.get("cifar_normalize")?,
            },
            other => {
                return Err(ConfigError::Value {
                    key: "dataset".into(),
                    value: other.into(),
                    msg: "expected synthetic or cifar10".into(),
                })
            }
        };
        let cfg = RunConfig {
            framework: r.get("framework")?,
            mixing: r.get("mixing")?,
            strategies: r.list("strategies")?,
            alpha_mixup: shared_alpha.map_or_else(|| r.get("alpha_mixup"), Ok)?,
            alpha_cutmix: shared_alpha.map_or_else(|| r.get("alpha_cutmix"), Ok)?,
            alpha_resizemix: shared_alpha.map_or_else(|| r.get("alpha_resizemix"), Ok)?,
            lambda_mode: r.get("lambda_mode")?,
            patch_range: (r.get("patch_min")?, r.get("patch_max")?),
            weight_source: r.get("weight_source")?,
            weight_mix: r.get("weight_mix")?,
            view_policy: r.get("view_policy")?,
            n_local_views: r.get("n_local_views")?,
            local_mixed_fraction: r.get("local_mixed_fraction")?,
            epochs: r.get("epochs")?,
            batch_size: r.get("batch_size")?,
            base_lr: r.get("base_lr")?,
            warmup_epochs: r.get("warmup_epochs")?,
            weight_decay: r.get("weight_decay")?,
            temperature: Temperature {
                contrastive: r.get("tau")?,
                student: r.get("tau_student")?,
                teacher: r.get("tau_teacher")?,
            },
            center_momentum: r.get("center_momentum")?,
            momentum: r.get("momentum")?,
            seed: r.get("seed")?,
            backbone,
            proj_hidden: r.get("proj_hidden")?,
            proj_dim: r.get("proj_dim")?,
            pred_hidden: r.get("pred_hidden")?,
            distill_hidden: r.get("distill_hidden")?,
            distill_bottleneck: r.get("distill_bottleneck")?,
            out_dim: r.get("out_dim")?,
            augment: r.get("augment")?,
            blur: r.get("blur")?,
            solarize: r.get("solarize")?,
            dataset: DatasetSpec {
                source,
                train_subset: r.get("train_subset")?,
                test_subset: r.get("test_subset")?,
            },
            checkpoint_every: r.get("checkpoint_every")?,
            knn_every: r.get("knn_every")?,
            knn_k: r.get("knn_k")?,
            probe_every: r.get("probe_every")?,
            probe_epochs: r.get("probe_epochs")?,
            probe_lr: r.get("probe_lr")?,
            log_wall_time: r.get("log_wall_time")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(&parse_kv(text)?, &BTreeMap::new())
    }

    /// Read `path` (if any) and apply `flags` on top.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, flags: &[S]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        Self::resolve(&file, &parse_flags(flags)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ConfigError::Validation(m));
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return fail(format!(
                "batch_size must be even so every sample has a distinct mixing partner, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        for (name, a) in [("alpha_mixup", self.alpha_mixup), ("alpha_cutmix", self.alpha_cutmix), ("alpha_resizemix", self.alpha_resizemix)] {
            if !(a > 0.0 && a.is_finite()) {
                return fail(format!("{name} must be > 0, got {a}"));
            }
        }
        if self.mixing && self.strategies.is_empty() {
            return fail("strategies must be non-empty when mixing is enabled".into());
        }
        let (lo, hi) = self.patch_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return fail(format!("patch range must satisfy 0 < patch_min <= patch_max < 1, got ({lo}, {hi})"));
        }
        if !(0.0..=1.0).contains(&self.local_mixed_fraction) {
            return fail(format!("local_mixed_fraction must be in [0, 1], got {}", self.local_mixed_fraction));
        }
        for (name, v) in [("base_lr", self.base_lr), ("probe_lr", self.probe_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, v) in [("momentum", self.momentum), ("center_momentum", self.center_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        self.temperature
            .validate()
            .map_err(|e| ConfigError::Validation(e.to_string()))?;
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1".into());
        }
        let widths: Vec<usize> = match &self.backbone {
            Backbone::Cnn { channels } => channels.to_vec(),
            Backbone::Mlp { hidden } => hidden.clone(),
        };
        if widths.contains(&0)
            || [self.proj_hidden, self.proj_dim, self.pred_hidden, self.distill_hidden, self.distill_bottleneck, self.out_dim].contains(&0)
        {
            return fail("layer widths must be positive".into());
        }
        if matches!(self.backbone, Backbone::Mlp { .. }) && self.framework == Framework::Distillation && self.n_local_views > 0 {
            return fail("the mlp backbone takes one input resolution; use n_local_views = 0 or backbone = cnn".into());
        }
        if self.mixing && self.strategies.contains(&Strategy::ResizeMix) {
            let locals = self.framework == Framework::Distillation && self.n_local_views > 0;
            let side = if locals { self.image_size() / 2 } else { self.image_size() };
            if (lo * side as f64).round() < 1.0 {
                return fail(format!(
                    "patch_min {lo} gives an empty ResizeMix patch on {side}×{side} views; raise patch_min or the image size"
                ));
            }
        }
        if let DataSource::Synthetic(s) = &self.dataset.source {
            if s.n_classes < 2 {
                return fail(format!("synthetic_classes must be >= 2, got {}", s.n_classes));
            }
            if !(s.sigma >= 0.0) {
                return fail(format!("synthetic_sigma must be >= 0, got {}", s.sigma));
            }
            if s.image_size < 4 || s.channels == 0 {
                return fail("synthetic images must be at least 4×4 with one channel".into());
            }
        }
        if let DataSource::Cifar10 { dir, .. } = &self.dataset.source {
            if dir.as_os_str().is_empty() {
                return fail("dataset = cifar10 requires data_dir".into());
            }
        }
        Ok(())
    }

    /// Beta parameters for one strategy.
    pub fn mix_spec(&self, strategy: Strategy) -> MixSpec {
        let alpha = match strategy {
            Strategy::Mixup => self.alpha_mixup,
            Strategy::CutMix => self.alpha_cutmix,
            Strategy::ResizeMix => self.alpha_resizemix,
        };
        MixSpec {
            strategy,
            alpha,
            lambda_mode: self.lambda_mode,
            patch_range: self.patch_range,
        }
    }

    pub fn image_size(&self) -> usize {
        match &self.dataset.source {
            DataSource::Synthetic(s) => s.image_size,
            DataSource::Cifar10 { .. } => 32,
        }
    }

    pub fn channels(&self) -> usize {
        match &self.dataset.source {
            DataSource::Synthetic(s) => s.channels,
            DataSource::Cifar10 { .. } => 3,
        }
    }

    pub fn topology(&self) -> Topology {
        let contrastive = self.framework == Framework::Contrastive;
        Topology {
            in_channels: self.channels(),
            image_size: self.image_size(),
            backbone: self.backbone.clone(),
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            pred_hidden: contrastive.then_some(self.pred_hidden),
            distill: (!contrastive).then_some(DistillHead {
                hidden: self.distill_hidden,
                bottleneck: self.distill_bottleneck,
                out_dim: self.out_dim,
            }),
        }
    }

    /// Resolved configuration as `(key, value)` in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let (cnn, mlp) = match &self.backbone {
            Backbone::Cnn { channels } => (join(channels), String::new()),
            Backbone::Mlp { hidden } => (String::new(), join(hidden)),
        };
        let (dataset, data_dir, norm, syn) = match &self.dataset.source {
            DataSource::Synthetic(s) => ("synthetic", String::new(), false, Some(s)),
            DataSource::Cifar10 { dir, normalize } => ("cifar10", dir.display().to_string(), *normalize, None),
        };
        let syn_field = |f: fn(&SyntheticSpec) -> String| syn.map(f).unwrap_or_default();
        let backbone = match self.backbone {
            Backbone::Cnn { .. } => "cnn",
            Backbone::Mlp { .. } => "mlp",
        };
        let strategies = self.strategies.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
        vec![
            ("framework", self.framework.to_string()),
            ("mixing", self.mixing.to_string()),
            ("strategies", strategies),
            ("alpha", String::new()),
            ("alpha_mixup", self.alpha_mixup.to_string()),
            ("alpha_cutmix", self.alpha_cutmix.to_string()),
            ("alpha_resizemix", self.alpha_resizemix.to_string()),
            ("lambda_mode", self.lambda_mode.to_string()),
            ("patch_min", self.patch_range.0.to_string()),
            ("patch_max", self.patch_range.1.to_string()),
            ("weight_source", self.weight_source.to_string()),
            ("weight_mix", self.weight_mix.to_string()),
            ("view_policy", self.view_policy.to_string()),
            ("n_local_views", self.n_local_views.to_string()),
            ("local_mixed_fraction", self.local_mixed_fraction.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("tau", self.temperature.contrastive.to_string()),
            ("tau_student", self.temperature.student.to_string()),
            ("tau_teacher", self.temperature.teacher.to_string()),
            ("center_momentum", self.center_momentum.to_string()),
            ("momentum", self.momentum.to_string()),
            ("seed", self.seed.to_string()),
            ("backbone", backbone.to_string()),
            ("cnn_channels", cnn),
            ("mlp_hidden", mlp),
            ("proj_hidden", self.proj_hidden.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("pred_hidden", self.pred_hidden.to_string()),
            ("distill_hidden", self.distill_hidden.to_string()),
            ("distill_bottleneck", self.distill_bottleneck.to_string()),
            ("out_dim", self.out_dim.to_string()),
            ("augment", self.augment.to_string()),
            ("blur", self.blur.to_string()),
            ("solarize", self.solarize.to_string()),
            ("dataset", dataset.to_string()),
            ("data_dir", data_dir),
            ("cifar_normalize", norm.to_string()),
            ("train_subset", self.dataset.train_subset.to_string()),
            ("test_subset", self.dataset.test_subset.to_string()),
            ("synthetic_classes", syn_field(|s| s.n_classes.to_string())),
            ("synthetic_train_per_class", syn_field(|s| s.train_per_class.to_string())),
            ("synthetic_test_per_class", syn_field(|s| s.test_per_class.to_string())),
            ("synthetic_size", syn_field(|s| s.image_size.to_string())),
            ("synthetic_channels", syn_field(|s| s.channels.to_string())),
            ("synthetic_sigma", syn_field(|s| s.sigma.to_string())),
            ("data_seed", syn_field(|s| s.seed.to_string())),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("knn_every", self.knn_every.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("probe_every", self.probe_every.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
            ("log_wall_time", self.log_wall_time.to_string()),
        ]
    }

    /// Canonical `key = value` text; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            if !v.is_empty() {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }

    /// Hex sha256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Log every resolved value at info level.
    pub fn echo(&self) {
        for (k, v) in self.to_pairs() {
            log::info!("config {k} = {v}");
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_text("").expect("defaults validate")
    }
}
