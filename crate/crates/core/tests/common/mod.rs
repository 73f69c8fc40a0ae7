#![allow(dead_code)]

use sdmp::config::RunConfig;
use sdmp::data::{load_dataset, LabeledSet};

/// Small MLP contrastive setup on synthetic 8×8 images, plus `extra` lines.
pub fn tiny(extra: &str) -> RunConfig {
    let base = "\
backbone = mlp
mlp_hidden = 32
proj_hidden = 32
proj_dim = 16
pred_hidden = 32
distill_hidden = 32
distill_bottleneck = 16
out_dim = 32
synthetic_classes = 4
synthetic_train_per_class = 16
synthetic_test_per_class = 8
synthetic_size = 8
synthetic_channels = 3
batch_size = 16
epochs = 2
warmup_epochs = 1
base_lr = 0.05
n_local_views = 0
checkpoint_every = 1
log_wall_time = false
";
    RunConfig::from_text(&format!("{base}{extra}")).unwrap()
}

pub fn data(cfg: &RunConfig) -> (LabeledSet, LabeledSet) {
    load_dataset(&cfg.dataset).unwrap()
}
