use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{PmfError, Result};

/// Compares tape gradients of a scalar computation with central differences
/// over every coordinate of every parameter.
///
/// Returns the maximum of `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, params: &[Array2<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords: Vec<(usize, usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, a)| (0..a.nrows()).flat_map(move |r| (0..a.ncols()).map(move |c| (p, r, c))))
        .collect();
    check_coords(&f, params, eps, &coords)
}

/// Like [`finite_difference_check`] but probes at most `per_param` randomly
/// chosen coordinates of each parameter.
pub fn finite_difference_check_sampled<F>(
    f: F,
    params: &[Array2<f64>],
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (p, a) in params.iter().enumerate() {
        let total = a.len();
        if total == 0 {
            continue;
        }
        if total <= per_param {
            coords.extend((0..total).map(|k| (p, k / a.ncols(), k % a.ncols())));
        } else {
            for _ in 0..per_param {
                let k = rng.random_range(0..total);
                coords.push((p, k / a.ncols(), k % a.ncols()));
            }
        }
    }
    check_coords(&f, params, eps, &coords)
}

fn evaluate<F>(f: &F, params: &[Array2<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    scalar_of(&out)
}

fn scalar_of(out: &Var<'_>) -> Result<f64> {
    if out.shape() != (1, 1) {
        return Err(PmfError::dim(
            "finite_difference_check",
            format!("function returned {:?}, expected a scalar", out.shape()),
        ));
    }
    Ok(out.scalar())
}

fn check_coords<F>(
    f: &F,
    params: &[Array2<f64>],
    eps: f64,
    coords: &[(usize, usize, usize)],
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Array2<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        scalar_of(&out)?;
        let grads = tape.backward(&out);
        vars.iter().map(|v| grads.wrt(v)).collect()
    };

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for &(p, r, c) in coords {
        let orig = probe[p][[r, c]];
        probe[p][[r, c]] = orig + eps;
        let up = evaluate(f, &probe)?;
        probe[p][[r, c]] = orig - eps;
        let down = evaluate(f, &probe)?;
        probe[p][[r, c]] = orig;

        let central = (up - down) / (2.0 * eps);
        let a = analytic[p][[r, c]];
        let denom = a.abs().max(central.abs()).max(1e-8);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}
