//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Options shared by every check. `corrupt` names an op whose VJP is
/// deliberately scaled on the analytic tape (negative control).
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: DEFAULT_EPS, corrupt: None }
    }
}

impl GradCheckOptions {
    fn tape(&self) -> Tape {
        match &self.corrupt {
            Some(name) => Tape::with_corrupted_vjp(name),
            None => Tape::new(),
        }
    }
}

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Maximum relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions { eps, corrupt: None };
    grad_check_inputs(|tape, v| f(tape, v[0]), std::slice::from_ref(x), &opts)
}

/// Like [`grad_check`] for a function of several tensors; every input is
/// differentiated and the worst coordinate over all of them is returned.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = opts.tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let l0 = tape.value(loss).item();
    if !l0.is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v).value).collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut t = t.clone();
                if k == which {
                    t.data_mut()[coord] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut offset = 0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let plus = eval(k, i, opts.eps)?;
            let minus = eval(k, i, -opts.eps)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[k].data()[i];
            if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite { index: offset + i });
            }
            worst = worst.max(relative_error(a, numeric));
        }
        offset += input.len();
    }
    Ok(worst)
}

/// Reduces any tensor to a scalar through fixed pseudo-random weights, so that
/// every output coordinate contributes a distinct cotangent.
pub fn random_projection(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let w = random_tensor(&shape, -1.0, 1.0, seed);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = random_tensor(&[10], -1.0, 1.0, 7);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn corrupted_vjp_is_detected() {
        let x = random_tensor(&[6], 0.5, 1.5, 3);
        let opts = GradCheckOptions { corrupt: Some("exp".into()), ..Default::default() };
        let err = grad_check_inputs(
            |t, v| {
                let e = t.exp(v[0])?;
                t.sum(e)
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::from_vec(vec![1.0, 0.0, 2.0]);
        let res = grad_check(
            |t, v| {
                let l = t.log(v)?;
                t.sum(l)
            },
            &x,
            DEFAULT_EPS,
        );
        assert!(res.is_err());
    }
}
