use super::{Graph, Tensor, Var};
use crate::error::{dim_err, Error, Result};

/// Compares reverse-mode gradients of a scalar graph function against
/// central differences and returns the largest
/// `|analytic − numeric| / max(1, |analytic|)` over the checked coordinates.
///
/// `coords` selects `(input, flat index)` pairs; `None` checks every
/// coordinate of every input. The function must be deterministic across
/// calls (fixed dropout seeds, no stateful side effects that feed back).
/// Points where `f` is not differentiable (ReLU kinks, max ties) give
/// meaningless numbers; callers keep test points away from them.
pub fn finite_difference_check<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor], grad: bool| -> Result<(f64, Graph, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(grad)))
            .collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return dim_err("finite_difference_check needs a scalar function");
        }
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(Error::Numeric(format!("function value {y} is not finite")));
        }
        if grad {
            g.backward(out)?;
        }
        Ok((y, g, vars))
    };

    let (_, graph, vars) = eval(inputs, true)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| graph.grad(v).to_vec()).collect();
    drop(graph);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].numel() {
            return Err(Error::Index(format!("coordinate ({i}, {j})")));
        }
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + h;
        let (plus, _, _) = eval(&probe, false)?;
        probe[i].data_mut()[j] = orig - h;
        let (minus, _, _) = eval(&probe, false)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i][j];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
