//! Small encoders, projection/prediction/distillation heads and the EMA teacher.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input shape {got:?} does not match encoder input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter set does not match topology: {0}")]
    Params(String),
    #[error("topology has no {0} head")]
    MissingHead(&'static str),
    #[error("EMA momentum {0} outside [0, 1]")]
    Momentum(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    /// 3×3 stride-1 stem (no max-pool), three 3×3 stride-2 blocks, global
    /// average pool. `channels` = [stem, block1, block2, block3].
    Cnn { channels: [usize; 4] },
    /// Fully connected layers on flattened pixels.
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillHead {
    pub hidden: usize,
    pub bottleneck: usize,
    pub out_dim: usize,
}

/// Complete shape description of an encoder and its heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub in_channels: usize,
    pub image_size: usize,
    pub backbone: Backbone,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Prediction head width (contrastive query branch only).
    pub pred_hidden: Option<usize>,
    pub distill: Option<DistillHead>,
}

impl Topology {
    pub fn feature_dim(&self) -> usize {
        match &self.backbone {
            Backbone::Cnn { channels } => channels[3],
            Backbone::Mlp { hidden } => *hidden.last().unwrap_or(&(self.in_channels * self.image_size * self.image_size)),
        }
    }

    /// Ordered (name, shape, fan_in) of every parameter. Biases have fan_in 0.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<_>, name: &str, i: usize, o: usize, bias: bool| {
            out.push((format!("{name}.weight"), vec![i, o], i));
            if bias {
                out.push((format!("{name}.bias"), vec![o], 0));
            }
        };
        match &self.backbone {
            Backbone::Cnn { channels } => {
                let mut cin = self.in_channels;
                for (k, &c) in channels.iter().enumerate() {
                    out.push((format!("conv{k}.weight"), vec![c, cin, 3, 3], cin * 9));
                    out.push((format!("conv{k}.bias"), vec![c], 0));
                    cin = c;
                }
            }
            Backbone::Mlp { hidden } => {
                let mut cin = self.in_channels * self.image_size * self.image_size;
                for (k, &h) in hidden.iter().enumerate() {
                    linear(&mut out, &format!("fc{k}"), cin, h, true);
                    cin = h;
                }
            }
        }
        let f = self.feature_dim();
        linear(&mut out, "proj.0", f, self.proj_hidden, true);
        linear(&mut out, "proj.1", self.proj_hidden, self.proj_dim, true);
        if let Some(h) = self.pred_hidden {
            linear(&mut out, "pred.0", self.proj_dim, h, true);
            linear(&mut out, "pred.1", h, self.proj_dim, true);
        }
        if let Some(d) = &self.distill {
            linear(&mut out, "distill.0", f, d.hidden, true);
            linear(&mut out, "distill.1", d.hidden, d.bottleneck, true);
            linear(&mut out, "distill.last", d.bottleneck, d.out_dim, false);
        }
        out
    }
}

/// Which output an encoder pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Pooled backbone features.
    Features,
    /// L2-normalised projection (keys).
    Projection,
    /// L2-normalised projection followed by the predictor (queries).
    ProjectionPrediction,
    /// Distillation logits.
    Distillation,
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(ModelError::Params(format!("{} names for {} tensors", names.len(), tensors.len())));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Put every tensor on `tape` as a leaf.
    pub fn register<'t>(&self, tape: &'t Tape, requires_grad: bool) -> BoundParams<'t> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        let index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        BoundParams { vars, index }
    }

    pub fn check_matches(&self, topology: &Topology) -> Result<()> {
        let layout = topology.layout();
        if layout.len() != self.len() {
            return Err(ModelError::Params(format!("{} tensors, layout has {}", self.len(), layout.len())));
        }
        for ((name, shape, _), (n, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Params(format!("{n} {:?} vs layout {name} {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Parameters living on a tape for one forward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::Params(format!("missing parameter {name}")))
    }

    fn linear(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        let y = x.matmul(self.get(&format!("{name}.weight"))?)?;
        match self.index.get(&format!("{name}.bias")) {
            Some(&i) => Ok(y.add_bias(self.vars[i], 1)?),
            None => Ok(y),
        }
    }
}

/// Kaiming-uniform weights (ReLU gain), zero biases. Deterministic in `seed`.
pub fn init_params(seed: u64, topology: &Topology) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, fan_in) in topology.layout() {
        let n: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; n]
        } else {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        names.push(name);
        tensors.push(Tensor::new(shape, data).expect("layout shape"));
    }
    EncoderParams { names, tensors }
}

/// Run the encoder on NCHW `images` and return the requested head's output.
pub fn encoder_forward<'t>(
    topology: &Topology,
    params: &BoundParams<'t>,
    images: Var<'t>,
    head: Head,
) -> Result<Var<'t>> {
    let shape = images.shape();
    let expected_c = topology.in_channels;
    if shape.len() != 4 || shape[1] != expected_c {
        return Err(ModelError::InputShape {
            expected: vec![0, expected_c, topology.image_size, topology.image_size],
            got: shape,
        });
    }
    let n = shape[0];
    let features = match &topology.backbone {
        Backbone::Cnn { .. } => {
            let mut x = images;
            for k in 0..4 {
                let stride = if k == 0 { 1 } else { 2 };
                x = x
                    .conv2d(params.get(&format!("conv{k}.weight"))?, stride, 1)?
                    .add_bias(params.get(&format!("conv{k}.bias"))?, 1)?
                    .relu();
            }
            let s = x.shape();
            x.reshape(&[n, s[1], s[2] * s[3]])?.mean(Some(2))?
        }
        Backbone::Mlp { hidden } => {
            if shape[2] != topology.image_size || shape[3] != topology.image_size {
                return Err(ModelError::InputShape {
                    expected: vec![n, expected_c, topology.image_size, topology.image_size],
                    got: shape,
                });
            }
            let mut x = images.reshape(&[n, shape[1] * shape[2] * shape[3]])?;
            for k in 0..hidden.len() {
                x = params.linear(x, &format!("fc{k}"))?.relu();
            }
            x
        }
    };
    match head {
        Head::Features => Ok(features),
        Head::Projection | Head::ProjectionPrediction => {
            let z = params.linear(params.linear(features, "proj.0")?.relu(), "proj.1")?;
            if head == Head::Projection {
                return Ok(z.normalize_l2(1)?);
            }
            if topology.pred_hidden.is_none() {
                return Err(ModelError::MissingHead("prediction"));
            }
            let p = params.linear(params.linear(z, "pred.0")?.relu(), "pred.1")?;
            Ok(p.normalize_l2(1)?)
        }
        Head::Distillation => {
            if topology.distill.is_none() {
                return Err(ModelError::MissingHead("distillation"));
            }
            let h = params.linear(features, "distill.0")?.gelu();
            let b = params.linear(h, "distill.1")?.normalize_l2(1)?;
            params.linear(b, "distill.last")
        }
    }
}

/// Forward pass on a private tape with constant parameters; no gradient
/// can reach `params`.
pub fn forward_detached(topology: &Topology, params: &EncoderParams, images: &Tensor, head: Head) -> Result<Tensor> {
    let tape = Tape::new();
    let bp = params.register(&tape, false);
    let x = tape.constant(images.clone());
    let y = encoder_forward(topology, &bp, x, head)?.value();
    Ok((*y).clone())
}

/// Momentum (EMA) teacher mirroring the student.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: EncoderParams,
    pub momentum: f64,
    /// Running mean of teacher logits (distillation only).
    pub center: Option<Vec<f64>>,
}

impl TeacherState {
    /// Exact copy of the student.
    pub fn from_student(student: &EncoderParams, momentum: f64, center_dim: Option<usize>) -> Self {
        Self {
            params: student.clone(),
            momentum,
            center: center_dim.map(|k| vec![0.0; k]),
        }
    }

    /// `center ← c_m·center + (1 - c_m)·mean_rows(logits)`.
    pub fn update_center(&mut self, logits: &[&Tensor], center_momentum: f64) {
        let Some(center) = &mut self.center else { return };
        let k = center.len();
        let mut mean = vec![0.0; k];
        let mut rows = 0usize;
        for t in logits {
            for r in 0..t.shape()[0] {
                for (m, v) in mean.iter_mut().zip(t.row(r)) {
                    *m += v;
                }
                rows += 1;
            }
        }
        if rows == 0 {
            return;
        }
        for (c, m) in center.iter_mut().zip(mean) {
            *c = center_momentum * *c + (1.0 - center_momentum) * (m / rows as f64);
        }
    }
}

/// `θ_t ← m·θ_t + (1 - m)·θ_s` for every element.
pub fn ema_update(teacher: &mut EncoderParams, student: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ModelError::Momentum(m));
    }
    if teacher.len() != student.len() {
        return Err(ModelError::Params(format!("teacher has {} tensors, student {}", teacher.len(), student.len())));
    }
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        if t.shape() != s.shape() {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "ema_update",
                left: t.shape().to_vec(),
                right: s.shape().to_vec(),
            }));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cnn() -> Topology {
        Topology {
            in_channels: 3,
            image_size: 8,
            backbone: Backbone::Cnn { channels: [4, 6, 8, 8] },
            proj_hidden: 16,
            proj_dim: 8,
            pred_hidden: Some(16),
            distill: Some(DistillHead { hidden: 16, bottleneck: 8, out_dim: 12 }),
        }
    }

    fn images(n: usize, v: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(v).collect()).unwrap()
    }

    #[test]
    fn contrastive_rows_are_unit_norm_and_logits_have_k_columns() {
        let top = cnn();
        let p = init_params(1, &top);
        let tape = Tape::new();
        let bp = p.register(&tape, false);
        let x = tape.constant(images(4, |k| ((k * 13) % 17) as f64 / 17.0));
        for head in [Head::Projection, Head::ProjectionPrediction] {
            let y = encoder_forward(&top, &bp, x, head).unwrap().value();
            assert_eq!(y.shape(), &[4, 8]);
            for r in 0..4 {
                let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let l = encoder_forward(&top, &bp, x, Head::Distillation).unwrap();
        assert_eq!(l.shape(), vec![4, 12]);
        assert_eq!(encoder_forward(&top, &bp, x, Head::Features).unwrap().shape(), vec![4, 8]);
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let top = cnn();
        let p = init_params(2, &top);
        let tape = Tape::new();
        let bp = p.register(&tape, false);
        let x = tape.constant(images(2, |k| ((k % 192) * 7 % 11) as f64 / 11.0));
        let y = encoder_forward(&top, &bp, x, Head::Projection).unwrap().value();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn zero_image_is_finite_and_repeatable() {
        let top = cnn();
        let p = init_params(3, &top);
        let run = || {
            let tape = Tape::new();
            let bp = p.register(&tape, false);
            let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
            (*encoder_forward(&top, &bp, x, Head::Projection).unwrap().value()).clone()
        };
        let a = run();
        assert!(a.all_finite());
        assert_eq!(a, run());
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let top = cnn();
        let p = init_params(3, &top);
        let tape = Tape::new();
        let bp = p.register(&tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 1, 8, 8]));
        assert!(matches!(encoder_forward(&top, &bp, x, Head::Projection), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn init_is_seeded() {
        let top = cnn();
        assert_eq!(init_params(7, &top), init_params(7, &top));
        assert_ne!(init_params(7, &top), init_params(8, &top));
        init_params(7, &top).check_matches(&top).unwrap();
    }

    #[test]
    fn first_conv_scale_matches_kaiming() {
        let mut top = cnn();
        top.backbone = Backbone::Cnn { channels: [64, 8, 8, 8] };
        let p = init_params(11, &top);
        let w = p.get("conv0.weight").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let kaiming = (2.0 / 27.0f64).sqrt();
        assert!(std >= 0.5 * kaiming && std <= 2.0 * kaiming, "{std} vs {kaiming}");
    }

    #[test]
    fn ema_examples() {
        let mk = |v: f64| EncoderParams::new(vec!["w".into()], vec![Tensor::full(&[3], v)]).unwrap();
        let s = mk(4.0);
        let mut t = mk(2.0);
        ema_update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.tensors()[0].data(), &[3.0, 3.0, 3.0]);
        let mut t = mk(2.0);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, mk(2.0));
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        assert!(ema_update(&mut t, &s, 1.5).is_err());
        let bad = EncoderParams::new(vec!["w".into()], vec![Tensor::full(&[2], 1.0)]).unwrap();
        assert!(ema_update(&mut t, &bad, 0.5).is_err());
    }

    #[test]
    fn teacher_forward_leaves_no_gradient_leaves() {
        let top = cnn();
        let p = init_params(4, &top);
        let tape = Tape::new();
        let student = p.register(&tape, true);
        let teacher = p.register(&tape, false);
        let x = tape.constant(images(2, |k| (k % 5) as f64 / 5.0));
        let q = encoder_forward(&top, &student, x, Head::ProjectionPrediction).unwrap();
        let k = encoder_forward(&top, &teacher, x, Head::Projection).unwrap();
        assert!(!k.requires_grad());
        let loss = q.mul(k).unwrap().sum(None).unwrap();
        let g = tape.backward(loss).unwrap();
        for v in teacher.vars() {
            assert!(g.get(*v).is_none());
        }
        assert_eq!(g.len(), student.vars().len());
    }
}
