use super::{Graph, Result, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    /// Coordinates sitting on a kink, where one-sided slopes disagree.
    pub skipped: Vec<usize>,
    pub non_finite: bool,
    pub error: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: impl Into<String>, non_finite: bool) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            pass: false,
            skipped: vec![],
            non_finite,
            error: Some(msg.into()),
        }
    }
}

/// Relative error floor: gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-3;
/// One-sided slopes differing by more than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-2;

/// Checks `∂f/∂x` against `(f(x+hᵢeᵢ) − f(x−hᵢeᵢ)) / 2hᵢ` with
/// `hᵢ = h·(1+|xᵢ|)`.
///
/// `f` must build a single-element output from the leaf it is given and be
/// deterministic. Coordinates at non-differentiable points are skipped and
/// listed in the report.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return GradCheckReport::failed("step must be positive", false);
    }
    let eval = |t: &Tensor| -> std::result::Result<f64, String> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v).map_err(|e| e.to_string())?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(format!("function output has shape {:?}", val.shape()));
        }
        Ok(val.item())
    };

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = match f(&mut g, leaf) {
        Ok(o) => o,
        Err(e) => return GradCheckReport::failed(e.to_string(), false),
    };
    let f0 = g.value(out).item();
    if !f0.is_finite() {
        return GradCheckReport::failed("non-finite function value", true);
    }
    if let Err(e) = g.backward(out) {
        return GradCheckReport::failed(e.to_string(), false);
    }
    let analytic = g.grad_or_zeros(leaf);
    if analytic.iter().any(|v| !v.is_finite()) {
        return GradCheckReport::failed("non-finite analytic gradient", true);
    }

    let mut max_err: f64 = 0.0;
    let mut skipped = vec![];
    for i in 0..x.numel() {
        let hi = h * (1.0 + x.data()[i].abs());
        let mut xp = x.clone();
        xp.data_mut()[i] += hi;
        let mut xm = x.clone();
        xm.data_mut()[i] -= hi;
        let (fp, fm) = match (eval(&xp), eval(&xm)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(e, false),
        };
        if !fp.is_finite() || !fm.is_finite() {
            return GradCheckReport::failed(format!("non-finite value near coordinate {i}"), true);
        }
        let right = (fp - f0) / hi;
        let left = (f0 - fm) / hi;
        if (right - left).abs() > KINK_TOL * right.abs().max(left.abs()).max(1.0) {
            skipped.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * hi);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        max_err = max_err.max(err);
    }
    GradCheckReport {
        max_rel_error: max_err,
        pass: max_err < tol,
        skipped,
        non_finite: false,
        error: None,
    }
}
