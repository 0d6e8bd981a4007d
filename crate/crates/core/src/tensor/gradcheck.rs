use super::{Graph, ParamRegistry, Result, Tensor, Var};

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator
/// so that coordinates with vanishing gradient are judged on absolute error.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat coordinates whose relative error exceeded the tolerance.
    pub failing: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }

    fn record(&mut self, coord: usize, analytic: f64, numeric: f64, tol: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_err || rel.is_nan() {
            self.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
        }
        if !(rel <= tol) {
            self.failing.push(coord);
        }
    }
}

/// Compares `analytic` against central differences of `f` at `point`.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> f64,
    analytic: &Tensor<f64>,
    point: &Tensor<f64>,
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut x = point.clone();
    for i in 0..point.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = f(&x);
        x.data_mut()[i] = orig - h;
        let fm = f(&x);
        x.data_mut()[i] = orig;
        report.record(i, analytic.data()[i], (fp - fm) / (2.0 * h), tol);
    }
    report
}

/// Gradient check of a graph-built scalar function of one input tensor.
pub fn grad_check_graph(
    build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    point: &Tensor<f64>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = build(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .var(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    let eval = |p: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(p.clone(), false);
        build(&mut g, x).map(|y| g.value(y).item()).unwrap_or(f64::NAN)
    };
    Ok(grad_check(eval, &analytic, point, h, tol))
}

/// Gradient check of every trainable parameter of `reg` under `build`.
pub fn grad_check_params(
    reg: &ParamRegistry<f64>,
    build: impl Fn(&mut Graph<f64>, &ParamRegistry<f64>) -> Result<Var>,
    h: f64,
    tol: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut g = Graph::new();
    let loss = build(&mut g, reg)?;
    let grads = g.backward(loss)?;
    let mut out = Vec::new();
    let mut work = reg.clone();
    for id in reg.ids() {
        let p = reg.param(id);
        if p.frozen {
            continue;
        }
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let name = p.name.clone();
        let base = p.value.clone();
        let mut report = GradCheckReport::default();
        for i in 0..base.numel() {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                work.set_value(&name, t)?;
                let mut g = Graph::new();
                let y = build(&mut g, &work)?;
                Ok(g.value(y).item())
            };
            let fp = eval_at(h)?;
            let fm = eval_at(-h)?;
            report.record(i, analytic.data()[i], (fp - fm) / (2.0 * h), tol);
        }
        work.set_value(&name, base)?;
        out.push((name, report));
    }
    Ok(out)
}
