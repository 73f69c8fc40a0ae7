//! Representation quality: linear probe, kNN, labeled-fraction finetune and
//! corruption robustness.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::augment::gaussian_blur;
use crate::data::LabeledSet;
use crate::model::{encoder_forward, forward_detached, EncoderParams, Head, ModelError, Topology};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: {labels} labels for {samples} samples")]
    LabelCount { what: &'static str, labels: usize, samples: usize },
    #[error("k = {k} but only {n_train} training samples")]
    KTooLarge { k: usize, n_train: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("fraction {fraction} leaves class {class} with no samples")]
    EmptyClass { fraction: f64, class: usize },
    #[error("unknown corruption `{0}` (expected gaussian_noise, blur or brightness)")]
    UnknownCorruption(String),
    #[error("severity {0} outside 0..=5")]
    Severity(usize),
    #[error("backbone parameters changed during probing")]
    BackboneMutated,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

const FEATURE_CHUNK: usize = 256;
const KNN_TEMPERATURE: f64 = 0.07;

/// Pooled backbone features `[N, F]`, computed in chunks.
pub fn extract_features(topology: &Topology, params: &EncoderParams, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut f = 0;
    for start in (0..n).step_by(FEATURE_CHUNK) {
        let idx: Vec<usize> = (start..(start + FEATURE_CHUNK).min(n)).collect();
        let out = forward_detached(topology, params, &images.select_rows(&idx), Head::Features)?;
        f = out.shape()[1];
        data.extend_from_slice(out.data());
    }
    Ok(Tensor::new(vec![n, f], data)?)
}

fn check_labels(what: &'static str, set: &LabeledSet) -> Result<()> {
    let samples = set.images.shape().first().copied().unwrap_or(0);
    if samples != set.labels.len() {
        return Err(EvalError::LabelCount { what, labels: set.labels.len(), samples });
    }
    Ok(())
}

/// Top-1 accuracy with its per-class decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub n_eval: usize,
    pub config_hash: Option<String>,
}

impl ProbeResult {
    pub fn from_predictions(pred: &[usize], labels: &[usize], n_classes: usize) -> Self {
        let mut correct = vec![0usize; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (&p, &l) in pred.iter().zip(labels) {
            counts[l] += 1;
            if p == l {
                correct[l] += 1;
            }
        }
        let total: usize = correct.iter().sum();
        Self {
            top1: if labels.is_empty() { 0.0 } else { total as f64 / labels.len() as f64 },
            per_class: correct
                .iter()
                .zip(&counts)
                .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect(),
            class_counts: counts,
            n_eval: labels.len(),
            config_hash: None,
        }
    }

    /// `Σ_c n_c · acc_c / N`
    pub fn reassembled_top1(&self) -> f64 {
        let s: f64 = self.per_class.iter().zip(&self.class_counts).map(|(a, &n)| a * n as f64).sum();
        s / self.n_eval.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Softmax classifier on standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LinearClassifier {
    fn standardize(&self, feats: &Tensor) -> Tensor {
        let f = self.mean.len();
        let mut out = feats.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % f;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn predict(&self, feats: &Tensor) -> Vec<usize> {
        let x = self.standardize(feats);
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let c = self.bias.len();
        (0..n)
            .map(|i| {
                let row = x.row(i);
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..c {
                    let mut s = self.bias.data()[k];
                    for j in 0..f {
                        s += row[j] * self.weight.data()[j * c + k];
                    }
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// A trained probe and its test result.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub result: ProbeResult,
    pub classifier: LinearClassifier,
}

/// Train a linear softmax classifier with SGD (momentum, cosine lr) on
/// fixed features.
pub fn train_linear(feats: &Tensor, labels: &[usize], n_classes: usize, opts: &ProbeOptions) -> Result<LinearClassifier> {
    let (n, f) = (feats.shape()[0], feats.shape()[1]);
    if labels.len() != n {
        return Err(EvalError::LabelCount { what: "probe train", labels: labels.len(), samples: n });
    }
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(feats.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((s, m), v) in std.iter_mut().zip(&mean).zip(feats.row(i)) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-6)).collect();
    let mut clf = LinearClassifier {
        weight: Tensor::zeros(&[f, n_classes]),
        bias: Tensor::zeros(&[n_classes]),
        mean,
        std,
    };
    let x = clf.standardize(feats);
    let mut vel = [Tensor::zeros(&[f, n_classes]), Tensor::zeros(&[n_classes])];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bs = opts.batch_size.clamp(1, n.max(1));
    let per_epoch = n.div_ceil(bs);
    let total = (opts.epochs * per_epoch).max(1);
    let mut step = 0;
    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let lr = 0.5 * opts.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            step += 1;
            let tape = Tape::new();
            let w = tape.param(clf.weight.clone());
            let b = tape.param(clf.bias.clone());
            let xb = tape.constant(x.select_rows(chunk));
            let mut onehot = Tensor::zeros(&[chunk.len(), n_classes]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.row_mut(r)[labels[i]] = 1.0;
            }
            let logp = xb.matmul(w)?.add_bias(b, 1)?.log_softmax(1)?;
            let loss = logp.mul(tape.constant(onehot))?.sum(None)?.scale(-1.0 / chunk.len() as f64);
            let g = tape.backward(loss)?;
            for (k, (p, var)) in [(&mut clf.weight, w), (&mut clf.bias, b)].into_iter().enumerate() {
                let grad = g.get(var).expect("probe gradient");
                for ((pv, gv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(vel[k].data_mut()) {
                    *vv = opts.momentum * *vv + gv + opts.weight_decay * *pv;
                    *pv -= lr * *vv;
                }
            }
        }
    }
    Ok(clf)
}

/// Linear evaluation of a frozen backbone: features are computed once,
/// a linear classifier is trained on them and scored on `test`.
pub fn linear_probe(
    topology: &Topology,
    params: &EncoderParams,
    train: &LabeledSet,
    test: &LabeledSet,
    opts: &ProbeOptions,
) -> Result<ProbeOutcome> {
    check_labels("probe train", train)?;
    check_labels("probe test", test)?;
    let snapshot = params.clone();
    let tr = extract_features(topology, params, &train.images)?;
    let te = extract_features(topology, params, &test.images)?;
    let classifier = train_linear(&tr, &train.labels, train.n_classes, opts)?;
    let result = ProbeResult::from_predictions(&classifier.predict(&te), &test.labels, test.n_classes);
    if &snapshot != params {
        return Err(EvalError::BackboneMutated);
    }
    Ok(ProbeOutcome { result, classifier })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnWeighting {
    /// `exp(cos / 0.07)` per neighbour.
    Cosine,
    Uniform,
}

/// k-nearest-neighbour vote over cosine similarity. Ties go to the lower
/// class index; neighbours with equal similarity to the lower train index.
pub fn knn_predict(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    n_classes: usize,
    k: usize,
    weighting: KnnWeighting,
) -> Result<Vec<usize>> {
    let n_train = train.shape()[0];
    if k == 0 {
        return Err(EvalError::KZero);
    }
    if k > n_train {
        return Err(EvalError::KTooLarge { k, n_train });
    }
    let unit = |t: &Tensor| -> Tensor {
        let mut t = t.clone();
        for i in 0..t.shape()[0] {
            let r = t.row_mut(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter_mut().for_each(|v| *v /= norm);
        }
        t
    };
    let (tr, te) = (unit(train), unit(test));
    let mut out = Vec::with_capacity(te.shape()[0]);
    for i in 0..te.shape()[0] {
        let q = te.row(i);
        let mut sims: Vec<(f64, usize)> = (0..n_train)
            .map(|j| (q.iter().zip(tr.row(j)).map(|(a, b)| a * b).sum(), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0.0; n_classes];
        for &(s, j) in &sims[..k] {
            votes[train_labels[j]] += match weighting {
                KnnWeighting::Cosine => (s / KNN_TEMPERATURE).exp(),
                KnnWeighting::Uniform => 1.0,
            };
        }
        let mut best = 0;
        for c in 1..n_classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Cosine-weighted kNN accuracy of pooled backbone features.
pub fn knn_eval(topology: &Topology, params: &EncoderParams, train: &LabeledSet, test: &LabeledSet, k: usize) -> Result<f64> {
    check_labels("knn train", train)?;
    check_labels("knn test", test)?;
    if k > train.len() {
        return Err(EvalError::KTooLarge { k, n_train: train.len() });
    }
    let tr = extract_features(topology, params, &train.images)?;
    let te = extract_features(topology, params, &test.images)?;
    let pred = knn_predict(&tr, &train.labels, &te, train.n_classes, k, KnnWeighting::Cosine)?;
    Ok(ProbeResult::from_predictions(&pred, &test.labels, test.n_classes).top1)
}

/// Per class, a seeded random `round(fraction · count)` of its samples.
pub fn stratified_indices(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        if idx.is_empty() {
            continue;
        }
        let take = (fraction * idx.len() as f64).round() as usize;
        if take == 0 {
            return Err(EvalError::EmptyClass { fraction, class: c });
        }
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..take.min(idx.len())]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub result: ProbeResult,
    pub n_train: usize,
    pub params: EncoderParams,
}

/// End-to-end supervised finetune (backbone + linear head, Adam) on a
/// stratified `fraction` of `train`.
pub fn fraction_finetune(
    topology: &Topology,
    init: &EncoderParams,
    train: &LabeledSet,
    test: &LabeledSet,
    fraction: f64,
    opts: &FinetuneOptions,
) -> Result<FinetuneResult> {
    check_labels("finetune train", train)?;
    check_labels("finetune test", test)?;
    let subset = train.select(&stratified_indices(&train.labels, train.n_classes, fraction, opts.seed)?);
    let f = topology.feature_dim();
    let c = train.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let bound = (1.0 / f as f64).sqrt();
    let head_w = Tensor::new(
        vec![f, c],
        (0..f * c).map(|_| rand::Rng::random_range(&mut rng, -bound..bound)).collect(),
    )?;
    let mut params: Vec<Tensor> = init.tensors().to_vec();
    params.push(head_w);
    params.push(Tensor::zeros(&[c]));
    let mut m: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut v = m.clone();
    let n = subset.len();
    let bs = opts.batch_size.clamp(1, n);
    let mut t = 0i32;
    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            t += 1;
            let tape = Tape::new();
            let enc = EncoderParams::new(init.names().to_vec(), params[..init.len()].to_vec())?;
            let bound_enc = enc.register(&tape, true);
            let hw = tape.param(params[init.len()].clone());
            let hb = tape.param(params[init.len() + 1].clone());
            let x = tape.constant(subset.gather(chunk));
            let feats = encoder_forward(topology, &bound_enc, x, Head::Features)?;
            let logp = feats.matmul(hw)?.add_bias(hb, 1)?.log_softmax(1)?;
            let mut onehot = Tensor::zeros(&[chunk.len(), c]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.row_mut(r)[subset.labels[i]] = 1.0;
            }
            let loss = logp.mul(tape.constant(onehot))?.sum(None)?.scale(-1.0 / chunk.len() as f64);
            let g = tape.backward(loss)?;
            let vars: Vec<_> = bound_enc.vars().iter().copied().chain([hw, hb]).collect();
            for (k, var) in vars.iter().enumerate() {
                let Some(grad) = g.get(*var) else { continue };
                let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
                for (((p, &gv), mv), vv) in params[k].data_mut().iter_mut().zip(grad.data()).zip(m[k].data_mut()).zip(v[k].data_mut()) {
                    *mv = 0.9 * *mv + 0.1 * gv;
                    *vv = 0.999 * *vv + 0.001 * gv * gv;
                    *p -= opts.lr * (*mv / c1) / ((*vv / c2).sqrt() + 1e-8);
                }
            }
        }
    }
    let head = LinearClassifier {
        weight: params[init.len()].clone(),
        bias: params[init.len() + 1].clone(),
        mean: vec![0.0; f],
        std: vec![1.0; f],
    };
    let enc = EncoderParams::new(init.names().to_vec(), params[..init.len()].to_vec())?;
    let feats = extract_features(topology, &enc, &test.images)?;
    let result = ProbeResult::from_predictions(&head.predict(&feats), &test.labels, c);
    Ok(FinetuneResult { result, n_train: n, params: enc })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    GaussianNoise,
    Blur,
    Brightness,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [Corruption::GaussianNoise, Corruption::Blur, Corruption::Brightness];

    /// Noise σ, blur σ or brightness shift at severities 1..=5.
    pub fn level(self, severity: usize) -> f64 {
        const NOISE: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
        const BLUR: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];
        const BRIGHT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
        let table = match self {
            Corruption::GaussianNoise => NOISE,
            Corruption::Blur => BLUR,
            Corruption::Brightness => BRIGHT,
        };
        table[severity - 1]
    }
}

impl FromStr for Corruption {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "blur" => Ok(Self::Blur),
            "brightness" => Ok(Self::Brightness),
            other => Err(EvalError::UnknownCorruption(other.into())),
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::Blur => "blur",
            Self::Brightness => "brightness",
        })
    }
}

/// Corrupted copy of NCHW `images`, clipped to `[0, 1]`. Severity 0 returns
/// the input unchanged.
pub fn corrupt(images: &Tensor, corruption: Corruption, severity: usize, seed: u64) -> Result<Tensor> {
    if severity > 5 {
        return Err(EvalError::Severity(severity));
    }
    if severity == 0 {
        return Ok(images.clone());
    }
    let level = corruption.level(severity);
    let mut out = images.clone();
    match corruption {
        Corruption::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, level).expect("sigma");
            out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        Corruption::Blur => {
            let s = images.shape().to_vec();
            for i in 0..s[0] {
                gaussian_blur(out.row_mut(i), s[1], s[2], s[3], level);
            }
        }
        Corruption::Brightness => out.data_mut().iter_mut().for_each(|v| *v += level),
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Probe accuracy at severities 0..=5 of one corruption.
pub fn corruption_eval(
    topology: &Topology,
    params: &EncoderParams,
    classifier: &LinearClassifier,
    test: &LabeledSet,
    corruption: Corruption,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    check_labels("corruption test", test)?;
    (0..=5)
        .map(|sev| {
            let x = corrupt(&test.images, corruption, sev, seed)?;
            let feats = extract_features(topology, params, &x)?;
            let r = ProbeResult::from_predictions(&classifier.predict(&feats), &test.labels, test.n_classes);
            Ok((sev, r.top1))
        })
        .collect()
}

/// Number of strict increases in a sequence that should be non-increasing.
pub fn inversions(acc: &[f64]) -> usize {
    acc.windows(2).filter(|w| w[1] > w[0]).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticSpec;
    use crate::data::generate_synthetic;
    use crate::model::{init_params, Backbone};

    fn mlp() -> Topology {
        Topology {
            in_channels: 3,
            image_size: 8,
            backbone: Backbone::Mlp { hidden: vec![32] },
            proj_hidden: 8,
            proj_dim: 4,
            pred_hidden: None,
            distill: None,
        }
    }

    fn synth(sigma: f64, n_classes: usize) -> (LabeledSet, LabeledSet) {
        generate_synthetic(&SyntheticSpec {
            n_classes,
            train_per_class: 20,
            test_per_class: 10,
            image_size: 8,
            channels: 3,
            sigma,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn per_class_reassembles_top1() {
        let r = ProbeResult::from_predictions(&[0, 1, 1, 2, 0], &[0, 1, 0, 2, 2], 3);
        assert!((r.top1 - 0.6).abs() < 1e-15);
        assert!((r.reassembled_top1() - r.top1).abs() < 1e-9);
        assert_eq!(r.class_counts, vec![2, 1, 2]);
    }

    #[test]
    fn knn_duplicate_and_majority() {
        let train = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![0.8, 0.6]]).unwrap();
        let labels = [0, 1, 1, 1];
        let test = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(knn_predict(&train, &labels, &test, 2, 1, KnnWeighting::Cosine).unwrap(), vec![0]);
        assert_eq!(knn_predict(&train, &labels, &test, 2, 4, KnnWeighting::Uniform).unwrap(), vec![1]);
        assert!(matches!(
            knn_predict(&train, &labels, &test, 2, 5, KnnWeighting::Uniform),
            Err(EvalError::KTooLarge { k: 5, n_train: 4 })
        ));
    }

    #[test]
    fn probe_leaves_backbone_untouched_and_separates_templates() {
        let (train, test) = synth(0.05, 4);
        let p = init_params(0, &mlp());
        let before = p.clone();
        let out = linear_probe(&mlp(), &p, &train, &test, &ProbeOptions { epochs: 20, ..Default::default() }).unwrap();
        assert_eq!(p, before);
        assert!(out.result.top1 > 0.9, "{}", out.result.top1);
    }

    #[test]
    fn probe_rejects_label_mismatch() {
        let (mut train, test) = synth(0.05, 2);
        train.labels.pop();
        let p = init_params(0, &mlp());
        assert!(matches!(
            linear_probe(&mlp(), &p, &train, &test, &ProbeOptions::default()),
            Err(EvalError::LabelCount { .. })
        ));
    }

    #[test]
    fn stratification_matches_class_proportions() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let idx = stratified_indices(&labels, 4, 0.1, 1).unwrap();
        let mut counts = [0; 4];
        for &i in &idx {
            counts[labels[i]] += 1;
        }
        assert!(counts.iter().all(|&c| (c as i64 - 2).abs() <= 1), "{counts:?}");
        assert!(matches!(stratified_indices(&labels, 4, 0.01, 1), Err(EvalError::EmptyClass { .. })));
    }

    #[test]
    fn corruptions_clip_and_severity_zero_is_identity() {
        let (_, test) = synth(0.1, 2);
        for c in Corruption::ALL {
            assert_eq!(corrupt(&test.images, c, 0, 1).unwrap(), test.images);
            let x = corrupt(&test.images, c, 5, 1).unwrap();
            assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(x, test.images);
        }
        assert!(matches!("fog".parse::<Corruption>(), Err(EvalError::UnknownCorruption(_))));
        assert!(corrupt(&test.images, Corruption::Blur, 6, 0).is_err());
    }

    #[test]
    fn corruption_severity_zero_equals_clean_probe() {
        let (train, test) = synth(0.05, 3);
        let p = init_params(0, &mlp());
        let out = linear_probe(&mlp(), &p, &train, &test, &ProbeOptions { epochs: 5, ..Default::default() }).unwrap();
        let curve = corruption_eval(&mlp(), &p, &out.classifier, &test, Corruption::GaussianNoise, 0).unwrap();
        assert_eq!(curve[0], (0, out.result.top1));
        assert_eq!(curve.len(), 6);
    }

    #[test]
    fn inversion_count() {
        assert_eq!(inversions(&[0.9, 0.8, 0.8, 0.7]), 0);
        assert_eq!(inversions(&[0.9, 0.8, 0.85, 0.7, 0.75]), 2);
    }
}
