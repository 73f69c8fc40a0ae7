//! Intra-batch pairing and the three image mixing operators.
//!
//! Sample `i` is always mixed with `pair_index(i, n) = n - 1 - i`, i.e. the
//! batch is mixed with its own reversed copy. The map is an involution, so the
//! two mixed images of a pair are built from the same two sources.
//!
//! Regional strategies record their geometry in a [`MixPlan`] so that the
//! second augmented view of the same batch can be mixed with identical boxes
//! (and, for a view at an integer multiple of the resolution, identical
//! relative boxes).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixError {
    #[error("batch size {0} is odd; intra-batch pairing needs an even batch")]
    OddBatch(usize),
    #[error("images must be NCHW with H, W >= 4, got {0:?}")]
    BadImageShape(Vec<usize>),
    #[error("Beta parameter alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("no mixing strategy enabled")]
    EmptyStrategySet,
    #[error("expected {expected} mixing coefficients, got {got}")]
    LambdaLength { expected: usize, got: usize },
    #[error("mixing coefficient {0} outside [0, 1]")]
    LambdaRange(f64),
    #[error("resize patch of {h}x{w} pixels is smaller than one pixel")]
    PatchTooSmall { h: usize, w: usize },
    #[error("patch side range ({0}, {1}) must satisfy 0 < min <= max < 1")]
    InvalidPatchRange(f64, f64),
    #[error("batch of {got:?} is not an integer multiple of the plan resolution {plan:?}")]
    ResolutionMismatch { plan: (usize, usize), got: (usize, usize) },
    #[error("unknown mixing strategy '{0}'")]
    UnknownStrategy(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MixError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Mixup,
    CutMix,
    ResizeMix,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Mixup, Strategy::CutMix, Strategy::ResizeMix];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mixup => "mixup",
            Strategy::CutMix => "cutmix",
            Strategy::ResizeMix => "resizemix",
        }
    }

    pub fn is_regional(self) -> bool {
        !matches!(self, Strategy::Mixup)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = MixError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mixup" => Ok(Strategy::Mixup),
            "cutmix" => Ok(Strategy::CutMix),
            "resizemix" => Ok(Strategy::ResizeMix),
            other => Err(MixError::UnknownStrategy(other.to_string())),
        }
    }
}

/// How mixing coefficients are drawn within one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    /// Independent draw for every sample.
    PerSample,
    /// One draw shared by the whole batch (regional geometry is shared too).
    PerBatch,
}

impl FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "per_sample" => Ok(LambdaMode::PerSample),
            "per_batch" => Ok(LambdaMode::PerBatch),
            other => Err(format!("unknown lambda mode '{other}' (per_sample|per_batch)")),
        }
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaMode::PerSample => "per_sample",
            LambdaMode::PerBatch => "per_batch",
        })
    }
}

/// Parameters for drawing one batch's mixing plan.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    pub strategy: Strategy,
    /// Beta(alpha, alpha) parameter; unused by ResizeMix.
    pub alpha: f64,
    pub lambda_mode: LambdaMode,
    /// Side-length fraction range for ResizeMix patches.
    pub patch_range: (f64, f64),
}

impl MixSpec {
    pub fn new(strategy: Strategy, alpha: f64) -> Self {
        Self {
            strategy,
            alpha,
            lambda_mode: LambdaMode::PerSample,
            patch_range: (0.1, 0.8),
        }
    }
}

/// A batch of NCHW images, pixel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    images: Tensor,
}

impl ImageBatch {
    pub fn new(images: Tensor) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[2] < 4 || s[3] < 4 {
            return Err(MixError::BadImageShape(s.to_vec()));
        }
        if !s[0].is_multiple_of(2) {
            return Err(MixError::OddBatch(s[0]));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn into_tensor(self) -> Tensor {
        self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }
}

/// Pixel rectangle `(top, left, h, w)` inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchBox {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.h && x >= self.left && x < self.left + self.w
    }

    fn scaled(&self, k: usize) -> PatchBox {
        PatchBox {
            top: self.top * k,
            left: self.left * k,
            h: self.h * k,
            w: self.w * k,
        }
    }
}

/// Everything needed to reproduce one batch's mixing on any view.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub strategy: Strategy,
    pub lambdas: Vec<f64>,
    pub pair_of: Vec<usize>,
    /// Per-sample pasted region for regional strategies, at `resolution`.
    pub boxes: Option<Vec<PatchBox>>,
    /// (H, W) the boxes are expressed in.
    pub resolution: (usize, usize),
}

/// Images after mixing together with the coefficients that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: Tensor,
    pub lambdas: Vec<f64>,
    pub pair_of: Vec<usize>,
    pub strategy: Strategy,
    pub patch_boxes: Option<Vec<PatchBox>>,
}

/// Shared-content coefficients of each mixed pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaC {
    pub values: Vec<f64>,
}

/// 0-based partner of sample `i` in a batch of `n`.
pub fn pair_index(i: usize, n: usize) -> usize {
    debug_assert!(i < n);
    n - 1 - i
}

pub fn pair_map(n: usize) -> Vec<usize> {
    (0..n).map(|i| pair_index(i, n)).collect()
}

/// Draw `n` mixing coefficients from Beta(alpha, alpha).
pub fn sample_lambdas<R: Rng + ?Sized>(spec: &MixSpec, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let beta = beta_dist(spec.alpha)?;
    Ok(match spec.lambda_mode {
        LambdaMode::PerSample => (0..n).map(|_| beta.sample(rng)).collect(),
        LambdaMode::PerBatch => vec![beta.sample(rng); n],
    })
}

fn beta_dist(alpha: f64) -> Result<Beta<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(MixError::InvalidAlpha(alpha));
    }
    Beta::new(alpha, alpha).map_err(|_| MixError::InvalidAlpha(alpha))
}

/// Pick one strategy uniformly from the enabled set.
pub fn select_strategy<R: Rng + ?Sized>(rng: &mut R, enabled: &[Strategy]) -> Result<Strategy> {
    if enabled.is_empty() {
        return Err(MixError::EmptyStrategySet);
    }
    Ok(enabled[rng.random_range(0..enabled.len())])
}

/// `λᶜ_i = min(λ_i, 1 - λ_j) + min(1 - λ_i, λ_j)` with `j = pair_of[i]`.
pub fn compute_lambda_c(lambdas: &[f64], pair_of: &[usize]) -> LambdaC {
    let values = lambdas
        .iter()
        .zip(pair_of)
        .map(|(&li, &j)| {
            let lj = lambdas[j];
            li.min(1.0 - lj) + (1.0 - li).min(lj)
        })
        .collect();
    LambdaC { values }
}

/// Elementwise convex combination with each sample's partner.
pub fn mixup(batch: &ImageBatch, lambdas: &[f64]) -> Result<MixedBatch> {
    MixPlan::mixup(lambdas.to_vec(), batch.len())?.apply(batch)
}

/// Paste a box of area ≈ `(1 - λ_i)·H·W` from the partner; λ is recomputed
/// from the clipped box.
pub fn cutmix<R: Rng + ?Sized>(batch: &ImageBatch, lambdas: &[f64], rng: &mut R) -> Result<MixedBatch> {
    let plan = MixPlan::cutmix(lambdas, batch.len(), (batch.height(), batch.width()), false, rng)?;
    plan.apply(batch)
}

/// Paste the whole partner image, resized to a random patch.
pub fn resizemix<R: Rng + ?Sized>(
    batch: &ImageBatch,
    rng: &mut R,
    patch_range: (f64, f64),
) -> Result<MixedBatch> {
    let plan = MixPlan::resizemix(
        batch.len(),
        (batch.height(), batch.width()),
        patch_range,
        LambdaMode::PerSample,
        rng,
    )?;
    plan.apply(batch)
}

fn check_lambdas(lambdas: &[f64], n: usize) -> Result<()> {
    if lambdas.len() != n {
        return Err(MixError::LambdaLength {
            expected: n,
            got: lambdas.len(),
        });
    }
    if let Some(&bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(MixError::LambdaRange(bad));
    }
    Ok(())
}

impl MixPlan {
    /// Draw a full plan for a batch of `n` images at `resolution`.
    pub fn sample<R: Rng + ?Sized>(
        spec: &MixSpec,
        n: usize,
        resolution: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if !n.is_multiple_of(2) {
            return Err(MixError::OddBatch(n));
        }
        match spec.strategy {
            Strategy::Mixup => Self::mixup(sample_lambdas(spec, n, rng)?, n),
            Strategy::CutMix => {
                let lambdas = sample_lambdas(spec, n, rng)?;
                let shared = spec.lambda_mode == LambdaMode::PerBatch;
                Self::cutmix(&lambdas, n, resolution, shared, rng)
            }
            Strategy::ResizeMix => Self::resizemix(n, resolution, spec.patch_range, spec.lambda_mode, rng),
        }
    }

    pub fn mixup(lambdas: Vec<f64>, n: usize) -> Result<Self> {
        check_lambdas(&lambdas, n)?;
        Ok(Self {
            strategy: Strategy::Mixup,
            lambdas,
            pair_of: pair_map(n),
            boxes: None,
            resolution: (0, 0),
        })
    }

    /// Standard CutMix boxes: side fraction `sqrt(1 - λ)`, uniform centre,
    /// clipped to the image. With `shared` every sample uses the first
    /// sample's centre.
    pub fn cutmix<R: Rng + ?Sized>(
        lambdas: &[f64],
        n: usize,
        (h, w): (usize, usize),
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_lambdas(lambdas, n)?;
        let mut boxes = Vec::with_capacity(n);
        let mut centre = None;
        for &lam in lambdas {
            let cut = (1.0 - lam).sqrt();
            let ch = (h as f64 * cut) as usize;
            let cw = (w as f64 * cut) as usize;
            let (cy, cx) = match (shared, centre) {
                (true, Some(c)) => c,
                _ => {
                    let c = (rng.random_range(0..h), rng.random_range(0..w));
                    centre = Some(c);
                    c
                }
            };
            let y1 = cy.saturating_sub(ch / 2);
            let y2 = (cy + ch / 2).min(h);
            let x1 = cx.saturating_sub(cw / 2);
            let x2 = (cx + cw / 2).min(w);
            boxes.push(PatchBox {
                top: y1,
                left: x1,
                h: y2 - y1,
                w: x2 - x1,
            });
        }
        let area = (h * w) as f64;
        let lambdas = boxes.iter().map(|b| 1.0 - b.area() as f64 / area).collect();
        Ok(Self {
            strategy: Strategy::CutMix,
            lambdas,
            pair_of: pair_map(n),
            boxes: Some(boxes),
            resolution: (h, w),
        })
    }

    /// ResizeMix: a side fraction is drawn per source image; sample `i`
    /// receives its partner resized by the partner's fraction at a uniform
    /// location, and `λ_i = 1 - patch area / image area`.
    pub fn resizemix<R: Rng + ?Sized>(
        n: usize,
        (h, w): (usize, usize),
        (r_min, r_max): (f64, f64),
        mode: LambdaMode,
        rng: &mut R,
    ) -> Result<Self> {
        if !(r_min > 0.0 && r_min <= r_max && r_max < 1.0) {
            return Err(MixError::InvalidPatchRange(r_min, r_max));
        }
        let draw = |rng: &mut R| {
            if r_min == r_max {
                r_min
            } else {
                rng.random_range(r_min..r_max)
            }
        };
        let fractions: Vec<f64> = match mode {
            LambdaMode::PerSample => (0..n).map(|_| draw(rng)).collect(),
            LambdaMode::PerBatch => vec![draw(rng); n],
        };
        let sizes = fractions
            .iter()
            .map(|r| {
                let ph = (r * h as f64).round() as usize;
                let pw = (r * w as f64).round() as usize;
                if ph == 0 || pw == 0 {
                    Err(MixError::PatchTooSmall { h: ph, w: pw })
                } else {
                    Ok((ph.min(h), pw.min(w)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let pair_of = pair_map(n);
        let mut boxes = Vec::with_capacity(n);
        let mut shared_loc = None;
        for &j in &pair_of {
            let (ph, pw) = sizes[j];
            let loc = match (mode, shared_loc) {
                (LambdaMode::PerBatch, Some(l)) => l,
                _ => {
                    let l = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
                    shared_loc = Some(l);
                    l
                }
            };
            boxes.push(PatchBox {
                top: loc.0,
                left: loc.1,
                h: ph,
                w: pw,
            });
        }
        let area = (h * w) as f64;
        let lambdas = boxes.iter().map(|b| 1.0 - b.area() as f64 / area).collect();
        Ok(Self {
            strategy: Strategy::ResizeMix,
            lambdas,
            pair_of,
            boxes: Some(boxes),
            resolution: (h, w),
        })
    }

    /// Mix `batch` according to this plan. Regional plans may be applied to
    /// a batch whose resolution is an integer multiple of the plan's; boxes
    /// are scaled and the coefficients are unchanged.
    pub fn apply(&self, batch: &ImageBatch) -> Result<MixedBatch> {
        let n = batch.len();
        check_lambdas(&self.lambdas, n)?;
        let (c, h, w) = (batch.channels(), batch.height(), batch.width());
        let plane = h * w;
        let img = c * plane;
        let src = batch.images().data();
        let mut out = src.to_vec();

        let boxes = match &self.boxes {
            None => {
                for i in 0..n {
                    let j = self.pair_of[i];
                    let (li, lj) = (self.lambdas[i], 1.0 - self.lambdas[i]);
                    let a = &src[i * img..(i + 1) * img];
                    let b = &src[j * img..(j + 1) * img];
                    for (o, (&x, &y)) in out[i * img..(i + 1) * img].iter_mut().zip(a.iter().zip(b)) {
                        let v = li * x + lj * y;
                        *o = v.clamp(x.min(y), x.max(y));
                    }
                }
                None
            }
            Some(boxes) => {
                let (ph, pw) = self.resolution;
                if ph == 0 || h % ph != 0 || w % pw != 0 || h / ph != w / pw {
                    return Err(MixError::ResolutionMismatch {
                        plan: self.resolution,
                        got: (h, w),
                    });
                }
                let k = h / ph;
                let scaled: Vec<PatchBox> = boxes.iter().map(|b| b.scaled(k)).collect();
                for (i, b) in scaled.iter().enumerate() {
                    if b.area() == 0 {
                        continue;
                    }
                    let j = self.pair_of[i];
                    for ch in 0..c {
                        let dst = &mut out[i * img + ch * plane..i * img + (ch + 1) * plane];
                        let partner = &src[j * img + ch * plane..j * img + (ch + 1) * plane];
                        match self.strategy {
                            Strategy::CutMix | Strategy::Mixup => {
                                for y in b.top..b.top + b.h {
                                    let r = y * w;
                                    dst[r + b.left..r + b.left + b.w]
                                        .copy_from_slice(&partner[r + b.left..r + b.left + b.w]);
                                }
                            }
                            Strategy::ResizeMix => {
                                let patch = resize_bilinear(partner, h, w, b.h, b.w);
                                for y in 0..b.h {
                                    let r = (b.top + y) * w + b.left;
                                    dst[r..r + b.w].copy_from_slice(&patch[y * b.w..(y + 1) * b.w]);
                                }
                            }
                        }
                    }
                }
                Some(scaled)
            }
        };

        Ok(MixedBatch {
            images: Tensor::new(batch.images().shape().to_vec(), out)?,
            lambdas: self.lambdas.clone(),
            pair_of: self.pair_of.clone(),
            strategy: self.strategy,
            patch_boxes: boxes,
        })
    }

    pub fn lambda_c(&self) -> LambdaC {
        compute_lambda_c(&self.lambdas, &self.pair_of)
    }
}

/// Bilinear resize of one `h × w` plane to `oh × ow` (half-pixel centres).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}
