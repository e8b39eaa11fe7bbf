use crate::scalar::Scalar;

use super::{Graph, Tensor, TensorError, Var};

/// Step and error normalization for a central-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl GradCheckConfig {
    /// Defaults tuned to the precision of `T`.
    pub fn for_scalar<T: Scalar>() -> Self {
        match T::DTYPE {
            crate::scalar::DType::F32 => GradCheckConfig { eps: 1e-2, floor: 1.0 },
            crate::scalar::DType::F64 => GradCheckConfig { eps: 1e-6, floor: 1.0 },
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function of several tensors
/// against central differences, coordinate by coordinate.
pub fn grad_check_many<T, F>(inputs: &[Tensor<T>], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>, TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter()
            .map(|&v| grads.tensor(v).values().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
            .collect()
    };
    let eval = |ins: &[Tensor<T>]| -> Result<f64, TensorError> {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = ins.iter().map(|t| g.constant(t)).collect();
        let out = f(&g, &vars)?;
        if out.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: out.shape() });
        }
        Ok(out.item().to_f64().unwrap_or(f64::NAN))
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut report = (0.0f64, (0, 0));
    let h = T::lit(cfg.eps);
    for t in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[t].numel());
        for j in 0..inputs[t].numel() {
            let orig = work[t].values()[j];
            work[t].values_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[t].values_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[t].values_mut()[j] = orig;
            // Divide by the step actually taken after rounding to T.
            let step = ((orig + h) - (orig - h)).to_f64().unwrap_or(2.0 * cfg.eps);
            let n = (up - down) / step;
            let e = rel_err(analytic[t][j], n, cfg.floor);
            if !(e <= report.0) {
                report = (e, (t, j));
            }
            col.push(n);
        }
        numeric.push(col);
    }
    Ok(GradCheckReport {
        max_rel_err: report.0,
        worst: report.1,
        analytic,
        numeric,
    })
}

/// Single-input convenience wrapper returning the worst relative error.
pub fn grad_check<T, F>(x: &Tensor<T>, f: F, eps: f64) -> Result<f64, TensorError>
where
    T: Scalar,
    F: for<'g> Fn(Var<'g, T>) -> Result<Var<'g, T>, TensorError>,
{
    let cfg = GradCheckConfig {
        eps,
        ..GradCheckConfig::for_scalar::<T>()
    };
    Ok(grad_check_many(std::slice::from_ref(x), |_, v| f(v[0]), cfg)?.max_rel_err)
}
