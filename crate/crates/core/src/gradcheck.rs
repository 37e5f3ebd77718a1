//! Central-difference gradient checking against the tape.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of [`relative_error`].
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Below this magnitude, per unit of loss, gradients are compared
/// absolutely: central differences carry roundoff near `1e-11 * |f|`.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Step fractions retried when a coordinate disagrees at the full step. A
/// perturbation that crosses a ReLU kink stops crossing it once the step is
/// shorter than the distance to the kink; a wrong gradient stays wrong.
const REFINE: [f64; 3] = [1.0 / 8.0, 1.0 / 64.0, 1.0 / 512.0];
const REFINE_ABOVE: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, GRADIENT_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    scaled_error(a, b, 1.0)
}

/// [`relative_error`] with the floor scaled by `max(1, |loss|)`.
fn scaled_error(a: f64, b: f64, loss: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADIENT_FLOOR * loss.abs().max(1.0))
}

/// Checks the tape gradient of scalar `f` at `x`; returns the max relative
/// error over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps, None)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant. With `max_coords`, each input is probed at no more
/// than that many evenly spaced coordinates.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return invalid("grad_check", "eps must be positive");
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let loss = g.value(root).item();
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape()).unwrap()))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let step = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for coord in (0..n).step_by(step) {
            let orig = input.data()[coord];
            let mut central = |h: f64| -> Result<f64> {
                probe[which].data_mut()[coord] = orig + h;
                let up = eval(&probe)?;
                probe[which].data_mut()[coord] = orig - h;
                let down = eval(&probe)?;
                probe[which].data_mut()[coord] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let a = analytic[which].data()[coord];
            let mut numeric = central(eps)?;
            let mut err = scaled_error(a, numeric, loss);
            for frac in REFINE {
                if err <= REFINE_ABOVE {
                    break;
                }
                let n2 = central(eps * frac)?;
                let e2 = scaled_error(a, n2, loss);
                if e2 < err {
                    (numeric, err) = (n2, e2);
                }
            }
            report.coords_checked += 1;
            if err > report.max_rel_error || report.coords_checked == 1 {
                report.max_rel_error = err;
                report.worst = (which, coord);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx sum(x^2) via square is right; pretend-ident via detach is wrong
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let good = grad_check(
            |g, v| {
                let s = g.square(v)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(good < 1e-8);

        let bad = grad_check(
            |g, v| {
                let d = g.detach(v);
                let s = g.mul(d, v)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(bad > 0.4);
    }

    #[test]
    fn kink_within_the_step_is_resolved_by_refinement() {
        let x = Tensor::new(&[2], vec![3e-6, -0.5]).unwrap();
        let relu_sum = |g: &mut Graph<f64>, v: Var| {
            let r = g.relu(v)?;
            g.sum(r)
        };
        assert!(grad_check(relu_sum, &x, 1e-5).unwrap() < 1e-9);
        // a kink closer than every step is still reported
        let x = Tensor::new(&[1], vec![1e-9]).unwrap();
        assert!(grad_check(relu_sum, &x, 1e-5).unwrap() > 0.4);
    }

    #[test]
    fn vanishing_gradients_compare_absolutely() {
        assert_eq!(relative_error(0.0, 1e-12), 1e-6);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
