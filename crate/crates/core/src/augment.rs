//! Per-image view augmentations on NCHW batches with pixels in `[0, 1]`.

use rand::Rng;

use crate::mixing::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub blur: bool,
    pub solarize: bool,
}

impl AugmentConfig {
    pub const OFF: AugmentConfig = AugmentConfig {
        enabled: false,
        blur: false,
        solarize: false,
    };
}

const PAD: usize = 4;
const BRIGHTNESS: f64 = 0.4;
const CONTRAST: f64 = 0.4;
const GLOBAL_SCALE: (f64, f64) = (0.4, 1.0);
const LOCAL_SCALE: (f64, f64) = (0.05, 0.4);

fn dims(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Random crop of a zero-padded image back to its own size.
pub fn pad_crop<R: Rng + ?Sized>(img: &[f64], c: usize, h: usize, w: usize, pad: usize, rng: &mut R) -> Vec<f64> {
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub fn hflip(img: &mut [f64], c: usize, h: usize, w: usize) {
    for r in 0..c * h {
        img[r * w..(r + 1) * w].reverse();
    }
}

/// Brightness offset and contrast scale around the image mean, clipped.
pub fn jitter<R: Rng + ?Sized>(img: &mut [f64], rng: &mut R) {
    let b = rng.random_range(-BRIGHTNESS..=BRIGHTNESS) * 0.5;
    let k = rng.random_range(1.0 - CONTRAST..=1.0 + CONTRAST);
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    for v in img.iter_mut() {
        *v = ((*v - mean) * k + mean + b).clamp(0.0, 1.0);
    }
}

/// Separable Gaussian blur, kernel radius `ceil(2σ)`, edge-clamped.
pub fn gaussian_blur(img: &mut [f64], c: usize, h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[(y as isize + k as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
            }
        }
    }
}

pub fn solarize(img: &mut [f64], threshold: f64) {
    for v in img.iter_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

/// Crop a box covering `scale` of the area with aspect in `[3/4, 4/3]`, then
/// resize it bilinearly to `out × out`.
pub fn resized_crop<R: Rng + ?Sized>(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out: usize,
    scale: (f64, f64),
    rng: &mut R,
) -> Vec<f64> {
    let area = (h * w) as f64;
    let (mut ch, mut cw) = (h, w);
    for _ in 0..10 {
        let s = rng.random_range(scale.0..=scale.1) * area;
        let log_r = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_r.exp();
        let bw = (s * ratio).sqrt().round() as usize;
        let bh = (s / ratio).sqrt().round() as usize;
        if bw >= 1 && bh >= 1 && bw <= w && bh <= h {
            (ch, cw) = (bh, bw);
            break;
        }
    }
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    crop_resize(img, c, h, w, (top, left, ch, cw), out)
}

/// Resize the `(top, left, h, w)` region of every channel to `out × out`.
pub fn crop_resize(img: &[f64], c: usize, h: usize, w: usize, b: (usize, usize, usize, usize), out: usize) -> Vec<f64> {
    let (top, left, bh, bw) = b;
    let mut res = Vec::with_capacity(c * out * out);
    let mut region = vec![0.0; bh * bw];
    for ch in 0..c {
        for y in 0..bh {
            let r = (ch * h + top + y) * w + left;
            region[y * bw..(y + 1) * bw].copy_from_slice(&img[r..r + bw]);
        }
        res.extend(resize_bilinear(&region, bh, bw, out, out));
    }
    res
}

fn photometric<R: Rng + ?Sized>(img: &mut [f64], c: usize, h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) {
    if rng.random_bool(0.5) {
        hflip(img, c, h, w);
    }
    if rng.random_bool(0.8) {
        jitter(img, rng);
    }
    if cfg.blur && rng.random_bool(0.5) {
        let sigma = rng.random_range(0.1..=1.0);
        gaussian_blur(img, c, h, w, sigma);
    }
    if cfg.solarize && rng.random_bool(0.2) {
        solarize(img, 0.5);
    }
}

fn per_image<R: Rng + ?Sized>(
    x: &Tensor,
    out_size: usize,
    rng: &mut R,
    mut f: impl FnMut(&[f64], &mut R) -> Vec<f64>,
) -> Tensor {
    let (n, c, _, _) = dims(x);
    let mut data = Vec::with_capacity(n * c * out_size * out_size);
    for i in 0..n {
        data.extend(f(x.row(i), rng));
    }
    Tensor::new(vec![n, c, out_size, out_size], data).expect("augment shape")
}

/// Contrastive view: padded random crop, flip, colour jitter and the
/// optional blur/solarize steps.
pub fn contrastive_view<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    if !cfg.enabled {
        return x.clone();
    }
    let (_, c, h, w) = dims(x);
    per_image(x, h, rng, |img, rng| {
        let mut v = pad_crop(img, c, h, w, PAD, rng);
        photometric(&mut v, c, h, w, cfg, rng);
        v
    })
}

/// Distillation view at `out` resolution: random resized crop (large scale
/// for global views, small for local ones) plus photometric steps. With
/// augmentation off the whole image is resized.
pub fn multicrop_view<R: Rng + ?Sized>(x: &Tensor, out: usize, local: bool, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let (_, c, h, w) = dims(x);
    if !cfg.enabled {
        if out == h && out == w {
            return x.clone();
        }
        return per_image(x, out, rng, |img, _| crop_resize(img, c, h, w, (0, 0, h, w), out));
    }
    let scale = if local { LOCAL_SCALE } else { GLOBAL_SCALE };
    per_image(x, out, rng, |img, rng| {
        let mut v = resized_crop(img, c, h, w, out, scale, rng);
        photometric(&mut v, c, out, out, cfg, rng);
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Tensor {
        Tensor::new(vec![2, 3, 8, 8], (0..384).map(|k| ((k * 29) % 97) as f64 / 96.0).collect()).unwrap()
    }

    #[test]
    fn disabled_views_are_copies() {
        let x = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(contrastive_view(&x, &AugmentConfig::OFF, &mut rng), x);
        assert_eq!(multicrop_view(&x, 8, false, &AugmentConfig::OFF, &mut rng), x);
        assert_eq!(multicrop_view(&x, 4, true, &AugmentConfig::OFF, &mut rng).shape(), &[2, 3, 4, 4]);
    }

    #[test]
    fn views_stay_in_range_and_are_seeded() {
        let x = batch();
        let cfg = AugmentConfig { enabled: true, blur: true, solarize: true };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (contrastive_view(&x, &cfg, &mut rng), multicrop_view(&x, 4, true, &cfg, &mut rng))
        };
        let (a, b) = run(3);
        assert_eq!((a.clone(), b.clone()), run(3));
        assert_ne!(a, x);
        for t in [&a, &b] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = batch();
        let mut v = x.row(0).to_vec();
        hflip(&mut v, 3, 8, 8);
        assert_eq!(v[0], x.row(0)[7]);
        hflip(&mut v, 3, 8, 8);
        assert_eq!(v, x.row(0));
    }

    #[test]
    fn blur_preserves_constants() {
        let mut v = vec![0.3; 3 * 8 * 8];
        gaussian_blur(&mut v, 3, 8, 8, 1.0);
        assert!(v.iter().all(|x| (x - 0.3).abs() < 1e-12));
    }
}
