use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per input; larger inputs are sampled.
    pub max_coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Runs the analytic pass with the conv weight-gradient fault enabled.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_coords: 48,
            floor: 1e-3,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords: usize,
}

/// Worst relative error between back-propagated and central-difference
/// gradients of `f` with respect to every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(grad_check_with(f, inputs, &opts)?.max_rel_error)
}

/// Non-scalar outputs are reduced by a fixed random projection.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = rng_from_seed(opts.seed);
    let out_len = {
        let mut g = Graph::new();
        let vars = bind(&mut g, inputs)?;
        let out = f(&mut g, &vars)?;
        g.value(out).len()
    };
    let proj: Option<Vec<f64>> = (out_len != 1).then(|| (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect());
    let eval = |xs: &[Tensor<f64>], fault: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        g.inject_conv_weight_fault(fault);
        let vars = bind(&mut g, xs)?;
        let out = f(&mut g, &vars)?;
        let loss = match &proj {
            Some(c) => g.dot_const(out, c)?,
            None => out,
        };
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(inputs, opts.inject_fault)?;
    g.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords: 0,
    };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords).into_vec()
        };
        for j in coords {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + opts.eps;
            let (gp, _, lp) = eval(&xs, false)?;
            xs[i].data_mut()[j] = x0 - opts.eps;
            let (gm, _, lm) = eval(&xs, false)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * opts.eps);
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            if !rel.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.coords += 1;
        }
    }
    Ok(report)
}

fn bind(g: &mut Graph<f64>, xs: &[Tensor<f64>]) -> Result<Vec<Var>> {
    xs.iter().map(|x| g.variable(x.clone())).collect()
}
