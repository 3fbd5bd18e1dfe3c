//! Registry of finite-difference checks, one per differentiable op plus the
//! full training loss on a toy model.

use std::time::Instant;

use crate::config::ModelConfig;
use crate::detect2d::{normalize, GridToImage};
use crate::geometry::{project, Camera, MeshGrid3D};
use crate::gradcheck::{grad_check_inputs, random_projection, random_tensor, GradCheckOptions};
use crate::model::{Model, Objective};
use crate::nn::Bound;
use crate::ops::Conv2d;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub const TOL_ELEMENTWISE: f64 = 1e-4;
pub const TOL_GEOMETRIC: f64 = 1e-5;
pub const TOL_ALIGN: f64 = 1e-4;
pub const TOL_FULL_LOSS: f64 = 1e-3;

/// `name` is the op name as reported by `Op::name`, so that the corruption
/// hook can target it; `full_loss` is the composite check.
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(&GradCheckOptions) -> Result<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst relative error, or the failure message.
    pub error: std::result::Result<f64, String>,
    pub millis: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        matches!(self.error, Ok(e) if e < self.tolerance)
    }
}

fn projected(opts: &GradCheckOptions, inputs: &[Tensor], seed: u64, f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    grad_check_inputs(
        |t, v| {
            let y = f(t, v)?;
            random_projection(t, y, seed)
        },
        inputs,
        opts,
    )
}

/// Keeps samples away from kinks.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|x| if x.abs() < 0.1 { x.signum() * 0.5 + x } else { x })
}

fn conv_case(opts: &GradCheckOptions, conv: Conv2d, seed: u64) -> Result<f64> {
    let x = random_tensor(&[7, 6, 3], -1.0, 1.0, seed);
    let k = random_tensor(&[3, 3, 3, 4], -1.0, 1.0, seed + 1);
    let b = random_tensor(&[4], -1.0, 1.0, seed + 2);
    projected(opts, &[x, k, b], seed + 3, |t, v| t.conv2d(v[0], v[1], Some(v[2]), conv))
}

fn toy_camera() -> Camera {
    Camera::centered(20.0, 16, 16).expect("valid camera")
}

fn full_loss(opts: &GradCheckOptions) -> Result<f64> {
    let config = ModelConfig {
        n: 3,
        image_width: 16,
        image_height: 16,
        channels: 4,
        stage_width: 4,
        depth_width: 4,
        gamma: 0.5,
        seed: 5,
        ..ModelConfig::default()
    };
    let model = Model::new(&config);
    let mesh = MeshGrid3D::new(
        3,
        (0..9).map(|i| [(i % 3) as f64 * 0.3 - 0.3, (i / 3) as f64 * 0.3 - 0.3, 2.0 + 0.05 * (i % 2) as f64]).collect(),
    )
    .expect("valid mesh");
    let as_tensor_err = |e: crate::Error| TensorError::invalid("model", e.to_string());
    let uv = project(&toy_camera(), &mesh).map_err(|e| TensorError::invalid("model", e.to_string()))?;
    let heat = model.target_heatmap(&uv).map_err(as_tensor_err)?;
    let mut inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(random_tensor(&[16, 16, 3], 0.0, 1.0, 3));
    grad_check_inputs(
        |tape, v| {
            let (params, image) = v.split_at(v.len() - 1);
            let p = Bound::from_vars(params.to_vec());
            let fwd = model.forward(tape, &p, image[0], &toy_camera()).map_err(as_tensor_err)?;
            let xs = tape.constant(mesh.to_tensor());
            let bs = tape.constant(heat.clone());
            Ok(model.loss(tape, &fwd, xs, bs, Objective::Full).map_err(as_tensor_err)?.total)
        },
        &inputs,
        opts,
    )
}

fn symmetric4(seed: u64) -> Tensor {
    let r = random_tensor(&[4, 4], -1.0, 1.0, seed);
    let mut m = Tensor::zeros(&[4, 4]);
    for p in 0..4 {
        for q in 0..4 {
            let gap = if p == q { 2.0 * p as f64 } else { 0.0 };
            m.data_mut()[p * 4 + q] = r.data()[p.min(q) * 4 + p.max(q)] + gap;
        }
    }
    m
}

pub fn registry() -> Vec<Check> {
    vec![
        Check { name: "add", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[3, 4], -1.0, 1.0, 1), random_tensor(&[3, 4], -1.0, 1.0, 2)], 3, |t, v| t.add(v[0], v[1]))
        } },
        Check { name: "sub", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[3, 4], -1.0, 1.0, 4), random_tensor(&[3, 4], -1.0, 1.0, 5)], 6, |t, v| t.sub(v[0], v[1]))
        } },
        Check { name: "mul", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[3, 4], -1.0, 1.0, 7), random_tensor(&[3, 4], -1.0, 1.0, 8)], 9, |t, v| t.mul(v[0], v[1]))
        } },
        Check { name: "scale", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[5], -1.0, 1.0, 10)], 11, |t, v| t.scale(v[0], -1.7))
        } },
        Check { name: "add_scalar", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[5], -1.0, 1.0, 12)], 13, |t, v| t.add_scalar(v[0], 0.3))
        } },
        Check { name: "matmul", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[3, 4], -1.0, 1.0, 14), random_tensor(&[4, 2], -1.0, 1.0, 15)], 16, |t, v| t.matmul(v[0], v[1]))
        } },
        Check { name: "conv2d", tolerance: TOL_ELEMENTWISE, run: |o| {
            let same = conv_case(o, Conv2d::same(3), 20)?;
            let strided = conv_case(o, Conv2d { stride: 2, padding: 1, dilation: 1 }, 30)?;
            let dilated = conv_case(o, Conv2d { stride: 1, padding: 2, dilation: 2 }, 40)?;
            Ok(same.max(strided).max(dilated))
        } },
        Check { name: "leaky_relu", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[away_from_zero(random_tensor(&[8], -1.0, 1.0, 17))], 18, |t, v| t.leaky_relu(v[0], 0.1))
        } },
        Check { name: "exp", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[6], -1.0, 1.0, 19)], 20, |t, v| t.exp(v[0]))
        } },
        Check { name: "log", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[6], 0.5, 2.0, 21)], 22, |t, v| t.log(v[0]))
        } },
        Check { name: "sqrt", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[6], 0.5, 2.0, 23)], 24, |t, v| t.sqrt(v[0]))
        } },
        Check { name: "softplus", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[6], -3.0, 3.0, 25)], 26, |t, v| t.softplus(v[0]))
        } },
        Check { name: "sum", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[2, 3], -1.0, 1.0, 27)], 28, |t, v| t.sum(v[0]))
        } },
        Check { name: "mean", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[2, 3], -1.0, 1.0, 29)], 30, |t, v| t.mean(v[0]))
        } },
        Check { name: "reshape", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[2, 6], -1.0, 1.0, 31)], 32, |t, v| t.reshape(v[0], &[3, 4]))
        } },
        Check { name: "concat", tolerance: TOL_ELEMENTWISE, run: |o| {
            let (a, b) = (random_tensor(&[2, 3, 2], -1.0, 1.0, 33), random_tensor(&[2, 3, 1], -1.0, 1.0, 34));
            projected(o, &[a, b], 35, |t, v| t.concat(&[v[0], v[1]], 2))
        } },
        Check { name: "slice", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[4, 3], -1.0, 1.0, 36)], 37, |t, v| t.slice(v[0], 0, 1, 2))
        } },
        Check { name: "spatial_softmax", tolerance: TOL_ELEMENTWISE, run: |o| {
            projected(o, &[random_tensor(&[4, 5, 3], -2.0, 2.0, 38)], 39, |t, v| t.spatial_softmax(v[0]))
        } },
        Check { name: "soft_argmax", tolerance: TOL_GEOMETRIC, run: |o| {
            let b = normalize(&random_tensor(&[6, 6, 3], -2.0, 2.0, 40), 1)?.maps().clone();
            let map = GridToImage::new(24, 12, 6, 6);
            projected(o, &[b], 41, |t, v| t.soft_argmax(v[0], map))
        } },
        Check { name: "condition", tolerance: TOL_GEOMETRIC, run: |o| {
            let (b, f) = (random_tensor(&[4, 3, 4], 0.0, 1.0, 42), random_tensor(&[4, 3, 5], -1.0, 1.0, 43));
            projected(o, &[b, f], 44, |t, v| t.condition(v[0], v[1]))
        } },
        Check { name: "lift", tolerance: TOL_GEOMETRIC, run: |o| {
            let c = Camera::new(60.0, 55.0, 31.5, 24.0, 64, 48).expect("valid camera");
            let (uv, z) = (random_tensor(&[9, 2], 0.0, 64.0, 45), random_tensor(&[9], 0.5, 3.0, 46));
            projected(o, &[uv, z], 47, |t, v| t.lift(&c, v[0], v[1]))
        } },
        Check { name: "normalize_shape", tolerance: TOL_GEOMETRIC, run: |o| {
            projected(o, &[random_tensor(&[9, 3], -1.0, 1.0, 48)], 49, |t, v| t.normalize_shape(v[0]))
        } },
        Check { name: "eig_sym4_max", tolerance: TOL_ALIGN, run: |o| {
            grad_check_inputs(|t, v| t.eig_max(v[0]), &[symmetric4(50)], o)
        } },
        Check { name: "align_lambda_max", tolerance: TOL_ALIGN, run: |o| {
            let (a, b) = (random_tensor(&[25, 3], -1.0, 1.0, 51), random_tensor(&[25, 3], -1.0, 1.0, 52));
            grad_check_inputs(|t, v| t.align_lambda_max(v[0], v[1]), &[a, b], o)
        } },
        Check { name: "err_align", tolerance: TOL_ALIGN, run: |o| {
            let (a, b) = (random_tensor(&[25, 3], -1.0, 1.0, 15), random_tensor(&[25, 3], -1.0, 1.0, 16));
            grad_check_inputs(|t, v| t.err_align(v[0], v[1]), &[a, b], o)
        } },
        Check { name: "full_loss", tolerance: TOL_FULL_LOSS, run: full_loss },
    ]
}

/// Runs every check; `corrupt` scales the VJP of the named op by 1.5 on the
/// analytic tape.
pub fn run_suite(corrupt: Option<&str>) -> Vec<CheckResult> {
    let opts = GradCheckOptions { corrupt: corrupt.map(str::to_string), ..GradCheckOptions::default() };
    registry()
        .into_iter()
        .map(|c| {
            let t0 = Instant::now();
            let error = (c.run)(&opts).map_err(|e| e.to_string());
            CheckResult { name: c.name, tolerance: c.tolerance, error, millis: t0.elapsed().as_secs_f64() * 1e3 }
        })
        .collect()
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<18} {:>10} {:>12} {:>9}  result\n", "op", "tolerance", "rel_error", "ms");
    for r in results {
        let err = match &r.error {
            Ok(e) => format!("{e:.3e}"),
            Err(_) => "error".to_string(),
        };
        let verdict = if r.passed() { "PASS".to_string() } else { format!("FAIL{}", r.error.as_ref().err().map(|m| format!(" ({m})")).unwrap_or_default()) };
        s.push_str(&format!("{:<18} {:>10.0e} {:>12} {:>9.1}  {verdict}\n", r.name, r.tolerance, err, r.millis));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every differentiable op of the library, by `Op::name`.
    const ALL_OPS: &[&str] = &[
        "add", "sub", "mul", "scale", "add_scalar", "matmul", "conv2d", "leaky_relu", "exp", "log", "sqrt", "softplus",
        "sum", "mean", "reshape", "concat", "slice", "spatial_softmax", "soft_argmax", "condition", "lift",
        "normalize_shape", "eig_sym4_max", "align_lambda_max", "err_align",
    ];

    #[test]
    fn registry_covers_every_op() {
        let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        for op in ALL_OPS {
            assert!(names.contains(op), "{op} has no check");
        }
        assert!(names.contains(&"full_loss"));
    }

    #[test]
    fn cheap_checks_pass() {
        for c in registry().into_iter().filter(|c| c.name != "full_loss") {
            let e = (c.run)(&GradCheckOptions::default()).unwrap();
            assert!(e < c.tolerance, "{} {e}", c.name);
        }
    }

    #[test]
    fn corrupted_vjp_fails_only_its_own_checks() {
        let results = run_suite(Some("exp"));
        let exp = results.iter().find(|r| r.name == "exp").unwrap();
        assert!(!exp.passed());
        assert!(results.iter().find(|r| r.name == "lift").unwrap().passed());
        assert!(format_table(&results).contains("FAIL"));
    }
}
