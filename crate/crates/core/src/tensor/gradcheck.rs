use super::{Result, Tape, Tensor, Var};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares tape gradients of `f` at `point` against central differences
/// with step `h`.
///
/// `f` receives a fresh tape and one trainable leaf per tensor in `point`
/// and must return a scalar node. The error for each entry is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(point: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };
    finite_diff_check_with(point, h, &f, eval)
}

/// Like [`finite_diff_check`], but the numeric side differentiates a
/// separate objective `numeric`. Used where the tape objective deliberately
/// detaches part of its graph: `numeric` then evaluates the same function
/// with the detached inputs frozen at `point`.
pub fn finite_diff_check_with<F, G>(point: &[Tensor], h: f64, f: F, numeric: G) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    G: Fn(&[Tensor]) -> Result<f64>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = point.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..point[p].len() {
            let orig = point[p].data()[i];
            probe[p].data_mut()[i] = orig + h;
            let up = numeric(&probe)?;
            probe[p].data_mut()[i] = orig - h;
            let down = numeric(&probe)?;
            probe[p].data_mut()[i] = orig;

            let num = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-8);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, i);
                report.analytic = a;
                report.numeric = num;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let point = [Tensor::vector(vec![0.3, -1.2, 2.5]).unwrap()];
        let coeffs = Tensor::vector(vec![2.0, -3.0, 0.5]).unwrap();
        let r = finite_diff_check(&point, 1e-5, |tape, v| {
            let c = tape.constant(coeffs.clone());
            let p = tape.mul(v[0], c)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn square_at_one() {
        let point = [Tensor::scalar(1.0)];
        let r = finite_diff_check(&point, 1e-5, |tape, v| Ok(tape.square(v[0]))).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
