//! Source and mixing losses for the contrastive and distillation frameworks.
//!
//! Every loss is a mean over the batch. Each mixed sample `i` has two
//! positives per term, its own index and its partner `pair_of[i]`, weighted
//! by a pair of coefficients that always sums to one:
//!
//! * source term: `(λ_i, 1 - λ_i)` against the clean keys/teacher outputs,
//! * mixing term: `(1/(1+λᶜ_i), λᶜ_i/(1+λᶜ_i))` against the mixed keys/teacher
//!   outputs.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::mixing::LambdaC;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("teacher row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("teacher row {row} has a negative entry")]
    NegativeProbability { row: usize },
    #[error("{0}")]
    Shape(String),
    #[error("unknown view policy '{0}' (replace|extra)")]
    InvalidPolicy(String),
    #[error("target index {target} out of range for {n} keys")]
    TargetOutOfRange { target: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Whether a loss weight follows the sampled coefficients or a constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Random,
    Static,
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "random" => Ok(WeightMode::Random),
            "static" => Ok(WeightMode::Static),
            other => Err(format!("unknown weight mode '{other}' (random|static)")),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Random => "random",
            WeightMode::Static => "static",
        })
    }
}

/// How the mixed branch enters the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewPolicy {
    /// One clean query branch is substituted by the mixed branch.
    Replace,
    /// The mixed branch is added next to both clean branches.
    Extra,
}

impl FromStr for ViewPolicy {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "replace" => Ok(ViewPolicy::Replace),
            "extra" => Ok(ViewPolicy::Extra),
            other => Err(LossError::InvalidPolicy(other.to_string())),
        }
    }
}

impl fmt::Display for ViewPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewPolicy::Replace => "replace",
            ViewPolicy::Extra => "extra",
        })
    }
}

/// Per-sample weight pairs for the source and mixing terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub source: Vec<(f64, f64)>,
    pub mix: Vec<(f64, f64)>,
    pub mode_source: WeightMode,
    pub mode_mix: WeightMode,
}

impl LossWeights {
    pub fn new(lambdas: &[f64], lambda_c: &LambdaC, mode_source: WeightMode, mode_mix: WeightMode) -> Self {
        let source = lambdas
            .iter()
            .map(|&l| match mode_source {
                WeightMode::Random => (l, 1.0 - l),
                WeightMode::Static => (0.5, 0.5),
            })
            .collect();
        let mix = lambda_c
            .values
            .iter()
            .map(|&c| {
                let c = match mode_mix {
                    WeightMode::Random => c,
                    WeightMode::Static => 1.0,
                };
                (1.0 / (1.0 + c), c / (1.0 + c))
            })
            .collect();
        Self {
            source,
            mix,
            mode_source,
            mode_mix,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Softmax temperatures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub contrastive: f64,
    pub student: f64,
    pub teacher: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            contrastive: 0.2,
            student: 0.1,
            teacher: 0.04,
        }
    }
}

impl Temperature {
    pub fn validate(&self) -> Result<()> {
        for t in [self.contrastive, self.student, self.teacher] {
            check_tau(t)?;
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidTemperature(tau))
    }
}

fn dims2(v: Var<'_>, what: &str) -> Result<(usize, usize)> {
    match v.shape().as_slice() {
        [a, b] => Ok((*a, *b)),
        s => Err(LossError::Shape(format!("{what}: expected 2-D, got {s:?}"))),
    }
}

/// `-log softmax(<query, keys_j> / τ)[target]` for a single query row.
pub fn info_nce_term<'t>(query: Var<'t>, keys: Var<'t>, target: usize, tau: f64) -> Result<Var<'t>> {
    check_tau(tau)?;
    let (n, d) = dims2(keys, "keys")?;
    let q = query.reshape(&[1, d])?;
    if target >= n {
        return Err(LossError::TargetOutOfRange { target, n });
    }
    let logits = q.matmul(keys.transpose()?)?.scale(1.0 / tau);
    let logp = logits.log_softmax(1)?;
    Ok(logp.slice(1, target, 1)?.sum(None)?.scale(-1.0))
}

/// `mean_i -Σ_j T_ij log softmax_j(<q_i, k_j> / τ)` for a fixed target matrix.
pub fn weighted_info_nce<'t>(queries: Var<'t>, keys: Var<'t>, targets: &Tensor, tau: f64) -> Result<Var<'t>> {
    check_tau(tau)?;
    let (n, d) = dims2(queries, "queries")?;
    let (nk, dk) = dims2(keys, "keys")?;
    if d != dk || targets.shape() != [n, nk] {
        return Err(LossError::Shape(format!(
            "queries [{n},{d}], keys [{nk},{dk}], targets {:?}",
            targets.shape()
        )));
    }
    let tape = queries.tape();
    let logp = queries.matmul(keys.transpose()?)?.scale(1.0 / tau).log_softmax(1)?;
    let t = tape.constant(targets.clone());
    Ok(logp.mul(t)?.sum(None)?.scale(-1.0 / n as f64))
}

/// Plain InfoNCE with the diagonal as positives.
pub fn info_nce<'t>(queries: Var<'t>, keys: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let n = dims2(queries, "queries")?.0;
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    weighted_info_nce(queries, keys, &t, tau)
}

fn pair_targets(n: usize, pair_of: &[usize], weights: &[(f64, f64)]) -> Result<Tensor> {
    if pair_of.len() != n || weights.len() != n {
        return Err(LossError::Shape(format!(
            "batch {n}, pair map {}, weights {}",
            pair_of.len(),
            weights.len()
        )));
    }
    let mut t = Tensor::zeros(&[n, n]);
    for (i, (&j, &(own, partner))) in pair_of.iter().zip(weights).enumerate() {
        let row = t.row_mut(i);
        row[i] += own;
        row[j] += partner;
    }
    Ok(t)
}

/// Mixed queries against the clean keys of both sources, weighted `(λ_i, 1 - λ_i)`.
pub fn moco_source_loss<'t>(
    y_mix: Var<'t>,
    y_keys: Var<'t>,
    weights: &LossWeights,
    pair_of: &[usize],
    tau: f64,
) -> Result<Var<'t>> {
    let n = dims2(y_mix, "y_mix")?.0;
    let t = pair_targets(n, pair_of, &weights.source)?;
    weighted_info_nce(y_mix, y_keys, &t, tau)
}

/// Mixed queries against the mixed keys of the pair, weighted by `λᶜ`.
pub fn moco_mixing_loss<'t>(
    y_mix: Var<'t>,
    y_mix_keys: Var<'t>,
    weights: &LossWeights,
    pair_of: &[usize],
    tau: f64,
) -> Result<Var<'t>> {
    let n = dims2(y_mix, "y_mix")?.0;
    let t = pair_targets(n, pair_of, &weights.mix)?;
    weighted_info_nce(y_mix, y_mix_keys, &t, tau)
}

/// Clean-view embeddings of one contrastive step.
///
/// Views `a` and `b` are the two augmentations of the batch. In replace mode
/// the query of view `a` is not computed; its place is taken by the mixed
/// query built from view `a`.
pub struct MocoViews<'t> {
    pub q_a: Option<Var<'t>>,
    pub q_b: Var<'t>,
    pub k_a: Var<'t>,
    pub k_b: Var<'t>,
}

/// Mixed-view embeddings: `q_mix = f(mix(view a))`, `k_mix = f_k(mix(view b))`.
pub struct MocoMixed<'t> {
    pub q_mix: Var<'t>,
    pub k_mix: Var<'t>,
}

/// Breakdown of a contrastive objective.
pub struct MocoLoss<'t> {
    pub total: Var<'t>,
    pub clean: Var<'t>,
    pub source: Option<Var<'t>>,
    pub mixing: Option<Var<'t>>,
    /// Number of InfoNCE logit groups (one softmax over a key batch each).
    pub groups: usize,
}

/// Symmetric contrastive objective with the optional mixed branch.
///
/// Without mixing: `ctr(q_a, k_b) + ctr(q_b, k_a)`. The mixed branch
/// contributes `(L^s + L^m) / 2`, so that with `λ ≡ 1` it collapses to the
/// clean branch it replaces.
pub fn moco_total_loss<'t>(
    views: &MocoViews<'t>,
    mixed: Option<&MocoMixed<'t>>,
    weights: Option<&LossWeights>,
    pair_of: &[usize],
    tau: f64,
    policy: ViewPolicy,
) -> Result<MocoLoss<'t>> {
    let Some(mixed) = mixed else {
        let q_a = views
            .q_a
            .ok_or_else(|| LossError::Shape("no mixing requires both clean queries".into()))?;
        let clean = info_nce(q_a, views.k_b, tau)?.add(info_nce(views.q_b, views.k_a, tau)?)?;
        return Ok(MocoLoss {
            total: clean,
            clean,
            source: None,
            mixing: None,
            groups: 2,
        });
    };
    let weights = weights.ok_or_else(|| LossError::Shape("mixed branch needs loss weights".into()))?;
    let (clean, clean_groups) = match (policy, views.q_a) {
        (ViewPolicy::Replace, None) => (info_nce(views.q_b, views.k_a, tau)?, 1),
        (ViewPolicy::Extra, Some(q_a)) => (
            info_nce(q_a, views.k_b, tau)?.add(info_nce(views.q_b, views.k_a, tau)?)?,
            2,
        ),
        (ViewPolicy::Replace, Some(_)) => {
            return Err(LossError::Shape("replace policy: view a must not have a clean query".into()))
        }
        (ViewPolicy::Extra, None) => {
            return Err(LossError::Shape("extra policy needs both clean queries".into()))
        }
    };
    let source = moco_source_loss(mixed.q_mix, views.k_b, weights, pair_of, tau)?;
    let mixing = moco_mixing_loss(mixed.q_mix, mixed.k_mix, weights, pair_of, tau)?;
    let total = clean.add(source.add(mixing)?.scale(0.5))?;
    Ok(MocoLoss {
        total,
        clean,
        source: Some(source),
        mixing: Some(mixing),
        groups: clean_groups + 2,
    })
}

fn check_distribution(p: &Tensor) -> Result<()> {
    if p.ndim() != 2 {
        return Err(LossError::Shape(format!("teacher rows must be 2-D, got {:?}", p.shape())));
    }
    for r in 0..p.shape()[0] {
        let row = p.row(r);
        if row.iter().any(|&v| v < 0.0) {
            return Err(LossError::NegativeProbability { row: r });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::NotNormalized { row: r, sum });
        }
    }
    Ok(())
}

/// `mean_rows -Σ_k P_t[k] log softmax(S / τ_s)[k]`; the teacher side is a constant.
pub fn soft_cross_entropy<'t>(p_t: &Tensor, s_logits: Var<'t>, tau_s: f64) -> Result<Var<'t>> {
    check_tau(tau_s)?;
    check_distribution(p_t)?;
    let shape = s_logits.shape();
    if shape != p_t.shape() {
        return Err(LossError::Shape(format!(
            "teacher {:?} vs student {:?}",
            p_t.shape(),
            shape
        )));
    }
    let n = shape[0] as f64;
    let logp = s_logits.scale(1.0 / tau_s).log_softmax(1)?;
    let t = s_logits.tape().constant(p_t.clone());
    Ok(logp.mul(t)?.sum(None)?.scale(-1.0 / n))
}

/// Teacher distribution `softmax((t - center) / τ_t)` row by row.
pub fn teacher_distribution(logits: &Tensor, center: &[f64], tau_t: f64) -> Result<Tensor> {
    check_tau(tau_t)?;
    let k = *logits.shape().last().unwrap_or(&0);
    if logits.ndim() != 2 || center.len() != k {
        return Err(LossError::Shape(format!(
            "logits {:?} vs center of {}",
            logits.shape(),
            center.len()
        )));
    }
    let mut out = logits.clone();
    for r in 0..logits.shape()[0] {
        let row = out.row_mut(r);
        for (v, c) in row.iter_mut().zip(center) {
            *v = (*v - c) / tau_t;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

fn mixture_rows(p: &Tensor, pair_of: &[usize], weights: &[(f64, f64)]) -> Result<Tensor> {
    let n = p.shape()[0];
    if pair_of.len() != n || weights.len() != n {
        return Err(LossError::Shape(format!(
            "teacher rows {n}, pair map {}, weights {}",
            pair_of.len(),
            weights.len()
        )));
    }
    let mut out = p.clone();
    for i in 0..n {
        let (a, b) = weights[i];
        let j = pair_of[i];
        for (k, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = a * p.row(i)[k] + b * p.row(j)[k];
        }
    }
    Ok(out)
}

/// Source-teacher mixture: `λ_i P_t(x'_i) + (1-λ_i) P_t(x'_pair)` as the
/// distillation target for the mixed student row `i`.
pub fn source_mixture(teacher_clean: &Tensor, pair_of: &[usize], weights: &LossWeights) -> Result<Tensor> {
    check_distribution(teacher_clean)?;
    mixture_rows(teacher_clean, pair_of, &weights.source)
}

pub fn dino_source_loss<'t>(
    teacher_clean: &Tensor,
    student_mixed: Var<'t>,
    weights: &LossWeights,
    pair_of: &[usize],
    tau_s: f64,
) -> Result<Var<'t>> {
    let target = source_mixture(teacher_clean, pair_of, weights)?;
    soft_cross_entropy(&target, student_mixed, tau_s)
}

/// Mix-teacher term. `H` is linear in its first argument, so the two
/// λᶜ-weighted cross-entropies equal one cross-entropy against the
/// weighted teacher mixture.
pub fn dino_mixing_loss<'t>(
    teacher_mixed: &Tensor,
    student_mixed: Var<'t>,
    weights: &LossWeights,
    pair_of: &[usize],
    tau_s: f64,
) -> Result<Var<'t>> {
    check_distribution(teacher_mixed)?;
    let target = mixture_rows(teacher_mixed, pair_of, &weights.mix)?;
    soft_cross_entropy(&target, student_mixed, tau_s)
}

/// Standard multi-view distillation: average of `H(P_t(a), P_s(v))` over all
/// (teacher view `a`, student view `v`) pairs with `v` not the same view as `a`.
///
/// `student` holds the logits of each clean student view and, for global
/// views, the index of the teacher view it coincides with.
pub fn dino_clean_loss<'t>(
    teacher: &[Tensor],
    student: &[(Var<'t>, Option<usize>)],
    tau_s: f64,
) -> Result<Var<'t>> {
    let mut terms = Vec::new();
    for (a, p_t) in teacher.iter().enumerate() {
        for (s, same) in student {
            if *same == Some(a) {
                continue;
            }
            terms.push(soft_cross_entropy(p_t, *s, tau_s)?);
        }
    }
    mean_of(&terms)
}

/// Sum of the three distillation components; absent mixed terms count as zero.
pub fn dino_total_loss<'t>(clean: Var<'t>, source: Option<Var<'t>>, mixing: Option<Var<'t>>) -> Result<Var<'t>> {
    let mut total = clean;
    for t in [source, mixing].into_iter().flatten() {
        total = total.add(t)?;
    }
    Ok(total)
}

/// Mean of scalar terms (each a shape `[]` node).
pub fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let first = terms
        .first()
        .ok_or_else(|| LossError::Shape("no loss terms to average".into()))?;
    let mut acc = *first;
    for t in &terms[1..] {
        acc = acc.add(*t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64))
}

/// Convenience for tests and diagnostics: evaluate on a throwaway tape.
pub fn eval_scalar(f: impl for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>) -> Result<f64> {
    let tape = Tape::new();
    Ok(f(&tape)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::compute_lambda_c;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|v| v.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn info_nce_two_keys() {
        let v = eval_scalar(|tape| {
            let q = tape.constant(rows(&[&[1.0, 0.0]]));
            let k = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
            info_nce_term(q, k, 0, 1.0)
        })
        .unwrap();
        let e = std::f64::consts::E;
        assert!((v - (-(e / (e + 1.0)).ln())).abs() < 1e-15);
        assert!((v - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_keys_give_log_n() {
        let v = eval_scalar(|tape| {
            let q = tape.constant(rows(&[&[0.6, 0.8]]));
            let k = tape.constant(rows(&[&[0.0, 1.0][..]; 5]));
            info_nce_term(q, k, 3, 0.2)
        })
        .unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let tape = Tape::new();
        let q = tape.constant(rows(&[&[1.0, 0.0]]));
        let k = tape.constant(rows(&[&[1.0, 0.0]]));
        assert_eq!(info_nce_term(q, k, 0, 0.0).unwrap_err(), LossError::InvalidTemperature(0.0));
        assert!(Temperature { contrastive: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn source_loss_hand_example() {
        let lambdas = [0.7, 0.7];
        let pair = [1, 0];
        let w = LossWeights::new(&lambdas, &compute_lambda_c(&lambdas, &pair), WeightMode::Random, WeightMode::Random);
        let v = eval_scalar(|tape| {
            let y = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
            let k = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
            moco_source_loss(y, k, &w, &pair, 1.0)
        })
        .unwrap();
        let e = std::f64::consts::E;
        let want = 0.7 * -(e / (e + 1.0)).ln() + 0.3 * -(1.0 / (e + 1.0)).ln();
        assert!((v - want).abs() < 1e-14);
        assert!((v - 0.6133).abs() < 1e-4);
    }

    #[test]
    fn static_weights() {
        let lambdas = [0.1, 0.9, 0.3, 0.6];
        let pair = [3, 2, 1, 0];
        let lc = compute_lambda_c(&lambdas, &pair);
        let w = LossWeights::new(&lambdas, &lc, WeightMode::Static, WeightMode::Static);
        assert!(w.source.iter().all(|&p| p == (0.5, 0.5)));
        assert!(w.mix.iter().all(|&p| p == (0.5, 0.5)));
        let w = LossWeights::new(&lambdas, &lc, WeightMode::Random, WeightMode::Random);
        for (&(a, b), &l) in w.source.iter().zip(&lambdas) {
            assert_eq!(a, l);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
        for ((a, b), c) in w.mix.iter().zip(&lc.values) {
            assert!((a + b - 1.0).abs() < 1e-12);
            assert!((a - 1.0 / (1.0 + c)).abs() < 1e-15);
        }
    }

    #[test]
    fn view_policy_parse() {
        assert_eq!("replace".parse::<ViewPolicy>().unwrap(), ViewPolicy::Replace);
        assert_eq!("extra".parse::<ViewPolicy>().unwrap(), ViewPolicy::Extra);
        assert_eq!("both".parse::<ViewPolicy>(), Err(LossError::InvalidPolicy("both".into())));
    }

    #[test]
    fn soft_ce_uniform_is_log_k() {
        let k = 7;
        let v = eval_scalar(|tape| {
            let p = Tensor::full(&[3, k], 1.0 / k as f64);
            let s = tape.constant(Tensor::full(&[3, k], 0.3));
            soft_cross_entropy(&p, s, 0.1)
        })
        .unwrap();
        assert!((v - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_one_hot_is_cross_entropy() {
        let logits = [0.2, -1.0, 0.9];
        let v = eval_scalar(|tape| {
            let p = rows(&[&[0.0, 0.0, 1.0]]);
            let s = tape.constant(rows(&[&logits]));
            soft_cross_entropy(&p, s, 1.0)
        })
        .unwrap();
        let lse = logits.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((v - (lse - 0.9)).abs() < 1e-14);
    }

    #[test]
    fn soft_ce_rejects_unnormalized_teacher() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[1, 2]));
        let p = rows(&[&[0.5, 0.6]]);
        assert!(matches!(soft_cross_entropy(&p, s, 0.1), Err(LossError::NotNormalized { row: 0, .. })));
    }

    #[test]
    fn mixture_rows_are_distributions() {
        let p = teacher_distribution(&rows(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0]]), &[0.1, 0.0, -0.2], 0.04).unwrap();
        let lambdas = [0.37, 0.81];
        let pair = [1, 0];
        let w = LossWeights::new(&lambdas, &compute_lambda_c(&lambdas, &pair), WeightMode::Random, WeightMode::Random);
        let m = source_mixture(&p, &pair, &w).unwrap();
        for r in 0..2 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dino_total_without_mixing_is_clean() {
        let tape = Tape::new();
        let c = tape.param(Tensor::scalar(1.25));
        let t = dino_total_loss(c, None, None).unwrap();
        assert_eq!(t.item(), 1.25);
    }
}
