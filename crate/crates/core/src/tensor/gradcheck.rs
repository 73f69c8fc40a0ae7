use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over every coordinate.
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Check the tape gradient of a scalar function of `params` against central
/// finite differences with step `eps`.
///
/// `f` is evaluated once on a tape with all `params` as grad leaves, then
/// twice per coordinate on fresh tapes for the numeric estimate.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            msg: format!("step {eps} outside [1e-7, 1e-3]"),
        });
    }

    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&tape, &vars)?;
        if root.requires_grad() {
            let grads = tape.backward(root)?;
            vars.iter()
                .map(|v| grads.get(*v).cloned().expect("leaf gradient"))
                .collect::<Vec<_>>()
        } else {
            params.iter().map(|p| Tensor::zeros(p.shape())).collect()
        }
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let root = f(&tape, &vars)?;
        Ok(root.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel = 0.0;
    let mut worst = (0, 0);
    for (pi, p) in params.iter().enumerate() {
        let mut g = Tensor::zeros(p.shape());
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            for v in [fp, fm] {
                if !v.is_finite() {
                    return Err(TensorError::NonFinite { index: j, value: v });
                }
            }
            let fd = (fp - fm) / (2.0 * eps);
            g.data_mut()[j] = fd;
            let ad = analytic[pi].data()[j];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = (pi, j);
            }
        }
        numeric.push(g);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        analytic,
        numeric,
    })
}
