use super::{Graph, Tensor, TensorError, Var};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |a_i - d_i| / max(|a_i|, |d_i|, 1e-8)`.
    pub max_rel_error: f64,
    /// Flat index of the coordinate that produced `max_rel_error`.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
    #[error("function is not finite when probing coordinate {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn evaluate<F>(f: &F, x: Tensor) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    g.value(out).item()
}

/// Compares the reverse-mode gradient of `f` at `x` with central finite
/// differences of step `step`.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar node.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    if !(step > 0.0) {
        return Err(GradCheckError::Step(step));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let base = g.value(out).item()?;
    if !base.is_finite() {
        return Err(GradCheckError::NonFinite { index: 0 });
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut numeric = Vec::with_capacity(x.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let fp = evaluate(&f, Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = evaluate(&f, Tensor::new(x.shape().to_vec(), minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradCheckError::NonFinite { index: i });
        }
        let d = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - d).abs() / a.abs().max(d.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(d);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric: Tensor::new(x.shape().to_vec(), numeric)?,
    })
}
