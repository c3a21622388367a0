use super::{Graph, Result, Tensor, Var};

/// Coordinates probed per parameter tensor; larger tensors are sampled on an
/// even stride.
const MAX_COORDS: usize = 48;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error found in each parameter tensor.
    pub per_param: Vec<f64>,
    pub worst: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

/// Compares autodiff gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh graph and one parameter node per entry of
/// `params` and must return a scalar node. The relative error of a
/// coordinate is `|a - n| / max(|a|, |n|, 1e-6 * max(1, |loss|))`; the floor
/// keeps coordinates whose true gradient is zero from reporting roundoff as
/// relative error.
pub fn gradient_check<F>(loss_fn: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.parameter(p.clone())).collect();
        let root = loss_fn(&mut g, &vars)?;
        Ok(g.value(root).item().unwrap_or(f64::NAN))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let root = loss_fn(&mut g, &vars)?;
    let loss = g.value(root).item().unwrap_or(f64::NAN);
    let grads = g.backward(root)?;
    let floor = 1e-6 * loss.abs().max(1.0);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut coords_checked = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *var);
        let len = params[pi].len();
        let stride = len.div_ceil(MAX_COORDS).max(1);
        let mut worst: f64 = 0.0;
        for idx in (0..len).step_by(stride) {
            let orig = params[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
            coords_checked += 1;
        }
        per_param.push(worst);
    }
    let worst = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, worst, tolerance, coords_checked })
}
