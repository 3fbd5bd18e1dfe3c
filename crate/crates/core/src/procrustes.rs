//! Similarity-invariant alignment error between two point sets.
//!
//! Both shapes are centered and scaled to unit Frobenius norm. The best
//! rotation correlation `max_R Σ a_i·(R b_i)` is the largest eigenvalue of
//! Horn's symmetric 4x4 quaternion matrix, whose top eigenvector is the optimal
//! rotation as a unit quaternion. [`svd_align`] computes the same
//! optimum through the SVD of the cross-covariance and serves as the
//! independent route for tests and evaluation.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::MeshGrid3D;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

/// Below this root-sum-square deviation a shape counts as a single point.
pub const DEGENERATE_SCALE: f64 = 1e-12;
/// Eigenvalue gap under which the optimal rotation is not unique.
pub const EIGEN_GAP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcrustesError {
    #[error("degenerate shape: scale {0:e} below threshold")]
    Degenerate(f64),
    #[error("point count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("rank-deficient cross-covariance (singular values {0:?})")]
    RankDeficient([f64; 3]),
}

/// Centered, unit-norm point set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedShape {
    pub points: Vec<[f64; 3]>,
    pub centroid: [f64; 3],
    pub scale: f64,
}

pub fn normalize_points(points: &[[f64; 3]]) -> Result<NormalizedShape, ProcrustesError> {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let c = c.map(|v| v / n);
    let centered: Vec<[f64; 3]> = points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let scale = centered.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if !(scale >= DEGENERATE_SCALE) {
        return Err(ProcrustesError::Degenerate(scale));
    }
    Ok(NormalizedShape {
        points: centered.iter().map(|p| p.map(|v| v / scale)).collect(),
        centroid: c,
        scale,
    })
}

pub fn normalize_shape(mesh: &MeshGrid3D) -> Result<NormalizedShape, ProcrustesError> {
    normalize_points(mesh.vertices())
}

/// VJP of `x ↦ (x - mean(x)) / ||x - mean(x)||_F` given the normalized points.
fn normalize_vjp(xhat: &[f64], scale: f64, g: &[f64]) -> Vec<f64> {
    let dot: f64 = xhat.iter().zip(g).map(|(a, b)| a * b).sum();
    let mut dy: Vec<f64> = g.iter().zip(xhat).map(|(gi, xi)| (gi - xi * dot) / scale).collect();
    let n = (dy.len() / 3) as f64;
    for k in 0..3 {
        let mean = dy.iter().skip(k).step_by(3).sum::<f64>() / n;
        for v in dy.iter_mut().skip(k).step_by(3) {
            *v -= mean;
        }
    }
    dy
}

fn points_of(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn check_points(op: &'static str, t: &Tensor) -> TensorResult<()> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(TensorError::shape(op, format!("expected [N, 3], got {:?}", t.shape())));
    }
    Ok(())
}

/// Symmetric 4x4 quaternion matrix of a cross-covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatMatrix(pub [[f64; 4]; 4]);

/// `S[p][q] = Σ_i a_i[p] · b_i[q]`
pub fn cross_covariance(a: &[[f64; 3]], b: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let mut s = [[0.0; 3]; 3];
    for (pa, pb) in a.iter().zip(b) {
        for p in 0..3 {
            for q in 0..3 {
                s[p][q] += pa[p] * pb[q];
            }
        }
    }
    s
}

/// Horn's matrix for the covariance `s`; linear in `s`.
pub fn horn_matrix(s: &[[f64; 3]; 3]) -> QuatMatrix {
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = *s;
    QuatMatrix([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
}

pub fn quat_matrix(a: &NormalizedShape, b: &NormalizedShape) -> Result<QuatMatrix, ProcrustesError> {
    if a.points.len() != b.points.len() {
        return Err(ProcrustesError::CountMismatch(a.points.len(), b.points.len()));
    }
    Ok(horn_matrix(&cross_covariance(&a.points, &b.points)))
}

/// Eigen-decomposition of a symmetric 4x4 matrix, eigenvalues in descending
/// order; `vectors[k]` is the unit eigenvector for `values[k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigen4 {
    pub values: [f64; 4],
    pub vectors: [[f64; 4]; 4],
}

impl Eigen4 {
    pub fn gap(&self) -> f64 {
        self.values[0] - self.values[1]
    }
}

/// Cyclic Jacobi sweeps; the input is symmetrized first.
pub fn eig_sym4(m: &QuatMatrix) -> Eigen4 {
    let mut a = [[0.0; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            a[p][q] = 0.5 * (m.0[p][q] + m.0[q][p]);
        }
    }
    let mut v = [[0.0; 4]; 4];
    for (k, row) in v.iter_mut().enumerate() {
        row[k] = 1.0;
    }
    for _sweep in 0..64 {
        let off: f64 = (0..4).flat_map(|p| (p + 1..4).map(move |q| (p, q))).map(|(p, q)| a[p][q] * a[p][q]).sum();
        if off == 0.0 {
            break;
        }
        let diag: f64 = (0..4).map(|k| a[k][k] * a[k][k]).sum();
        if off <= 1e-34 * diag {
            break;
        }
        for p in 0..3 {
            for q in p + 1..4 {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order = [0, 1, 2, 3];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|k| a[k][k]);
    let vectors = order.map(|k| [v[0][k], v[1][k], v[2][k], v[3][k]]);
    Eigen4 { values, vectors }
}

/// `d λ_max / d S` through Horn's matrix, given the top eigenvector.
fn lambda_grad_wrt_covariance(v: &[f64; 4]) -> [[f64; 3]; 3] {
    let mut g = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            let mut e = [[0.0; 3]; 3];
            e[p][q] = 1.0;
            let n = horn_matrix(&e).0;
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    acc += v[i] * n[i][j] * v[j];
                }
            }
            g[p][q] = acc;
        }
    }
    g
}

/// Largest eigenvalue of the quaternion matrix of two normalized shapes.
pub fn lambda_max(a: &NormalizedShape, b: &NormalizedShape) -> Result<f64, ProcrustesError> {
    Ok(eig_sym4(&quat_matrix(a, b)?).values[0])
}

/// Alignment error between two point sets after similarity normalization.
pub fn err_align_points(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64, ProcrustesError> {
    if x.len() != y.len() {
        return Err(ProcrustesError::CountMismatch(x.len(), y.len()));
    }
    let a = normalize_points(x)?;
    let b = normalize_points(y)?;
    let e = eig_sym4(&quat_matrix(&a, &b)?);
    // The residual is summed directly under the optimal rotation rather than
    // through `1 + 1 - 2λ`, which loses half the digits near zero error.
    let r = quat_rotation(&e.vectors[0]);
    let ss: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(pa, pb)| (0..3).map(|i| (pb[i] - (0..3).map(|j| r[i][j] * pa[j]).sum::<f64>()).powi(2)).sum::<f64>())
        .sum();
    Ok((ss / x.len() as f64).sqrt())
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`; for the top
/// eigenvector of Horn's matrix of `(a, b)` it maps `a` onto `b`.
pub fn quat_rotation(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = *q;
    [
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
}

pub fn err_align(x: &MeshGrid3D, y: &MeshGrid3D) -> Result<f64, ProcrustesError> {
    err_align_points(x.vertices(), y.vertices())
}

/// Rigid alignment of `b` onto `a`: `a_i - ā ≈ R (b_i - b̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub rmsd: f64,
    pub centroid_a: [f64; 3],
    pub centroid_b: [f64; 3],
}

/// Kabsch alignment via SVD with the determinant correction (proper rotations only).
pub fn svd_align(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<Alignment, ProcrustesError> {
    if a.len() != b.len() {
        return Err(ProcrustesError::CountMismatch(a.len(), b.len()));
    }
    let centroid = |pts: &[[f64; 3]]| {
        let mut c = Vector3::zeros();
        for p in pts {
            c += Vector3::from(*p);
        }
        c / pts.len() as f64
    };
    let (ca, cb) = (centroid(a), centroid(b));
    let mut h = Matrix3::zeros();
    for (pa, pb) in a.iter().zip(b) {
        h += (Vector3::from(*pb) - cb) * (Vector3::from(*pa) - ca).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    sv.sort_by(|x, y| y.total_cmp(x));
    if !(sv[1] > 1e-12 * sv[0].max(1e-300)) || sv[0] <= 0.0 {
        return Err(ProcrustesError::RankDeficient(sv));
    }
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let mut ss = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        let diff = (Vector3::from(*pa) - ca) - r * (Vector3::from(*pb) - cb);
        ss += diff.norm_squared();
    }
    Ok(Alignment {
        rotation: r,
        rmsd: (ss / a.len() as f64).sqrt(),
        centroid_a: ca.into(),
        centroid_b: cb.into(),
    })
}

/// Mean per-vertex Euclidean distance between `truth` and `pred` after the
/// best similarity transform of `pred` onto `truth`, in the units of `truth`.
/// A prediction collapsed to a point is mapped onto the centroid of `truth`.
pub fn aligned_vertex_error(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64, ProcrustesError> {
    if pred.len() != truth.len() {
        return Err(ProcrustesError::CountMismatch(pred.len(), truth.len()));
    }
    let t = normalize_points(truth)?;
    let n = truth.len() as f64;
    let Ok(p) = normalize_points(pred) else {
        let d: f64 = t.points.iter().map(|q| Vector3::from(*q).norm()).sum();
        return Ok(t.scale * d / n);
    };
    let rotation = svd_align(&t.points, &p.points).map(|al| al.rotation).unwrap_or_else(|_| Matrix3::identity());
    let d: f64 = t
        .points
        .iter()
        .zip(&p.points)
        .map(|(q, r)| (Vector3::from(*q) - rotation * Vector3::from(*r)).norm())
        .sum();
    Ok(t.scale * d / n)
}

/// Differentiable centering and unit-norm scaling of `[N, 3]` points.
#[derive(Debug, Clone, Copy)]
pub struct NormalizeShapeOp;

impl Op for NormalizeShapeOp {
    fn name(&self) -> &'static str {
        "normalize_shape"
    }
    fn forward(&self, x: &[&Tensor]) -> TensorResult<Tensor> {
        check_points("normalize_shape", x[0])?;
        let s = normalize_points(&points_of(x[0]))
            .map_err(|e| TensorError::invalid("normalize_shape", e.to_string()))?;
        Tensor::new(x[0].shape(), s.points.iter().flatten().copied().collect())
    }
    fn backward(&self, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let s = normalize_points(&points_of(x[0])).expect("validated in forward");
        let dx = normalize_vjp(out.data(), s.scale, g.data());
        vec![Some(Tensor::new(x[0].shape(), dx).expect("shape"))]
    }
}

/// λ_max of a symmetric 4x4 matrix `[4, 4]`, gradient `v vᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct EigMaxOp;

impl Op for EigMaxOp {
    fn name(&self) -> &'static str {
        "eig_sym4_max"
    }
    fn forward(&self, x: &[&Tensor]) -> TensorResult<Tensor> {
        if x[0].shape() != [4, 4] {
            return Err(TensorError::shape("eig_sym4_max", format!("expected [4, 4], got {:?}", x[0].shape())));
        }
        Ok(Tensor::scalar(eig_sym4(&quat_from_tensor(x[0])).values[0]))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let e = eig_sym4(&quat_from_tensor(x[0]));
        let v = e.vectors[0];
        if e.gap() < EIGEN_GAP_TOL {
            log::warn!("eig_sym4_max: eigenvalue gap {:e} too small, gradient zeroed", e.gap());
            return vec![Some(Tensor::zeros(&[4, 4]))];
        }
        let gv = g.item();
        let data = (0..16).map(|k| gv * v[k / 4] * v[k % 4]).collect();
        vec![Some(Tensor::new(&[4, 4], data).expect("shape"))]
    }
}

fn quat_from_tensor(t: &Tensor) -> QuatMatrix {
    let d = t.data();
    let mut m = [[0.0; 4]; 4];
    for (k, &v) in d.iter().enumerate() {
        m[k / 4][k % 4] = v;
    }
    QuatMatrix(m)
}

/// λ_max of Horn's matrix of two already normalized `[N, 3]` shapes.
#[derive(Debug, Clone, Copy)]
pub struct AlignLambdaOp;

impl AlignLambdaOp {
    /// Gradients of λ_max w.r.t. both point sets, or `None` when the gap is degenerate.
    fn lambda_grads(a: &[[f64; 3]], b: &[[f64; 3]]) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
        let e = eig_sym4(&horn_matrix(&cross_covariance(a, b)));
        if e.gap() < EIGEN_GAP_TOL {
            return (e.values[0], None);
        }
        let gs = lambda_grad_wrt_covariance(&e.vectors[0]);
        let mut ga = Vec::with_capacity(3 * a.len());
        let mut gb = Vec::with_capacity(3 * b.len());
        for (pa, pb) in a.iter().zip(b) {
            for p in 0..3 {
                ga.push((0..3).map(|q| gs[p][q] * pb[q]).sum::<f64>());
            }
            for q in 0..3 {
                gb.push((0..3).map(|p| gs[p][q] * pa[p]).sum::<f64>());
            }
        }
        (e.values[0], Some((ga, gb)))
    }
}

impl Op for AlignLambdaOp {
    fn name(&self) -> &'static str {
        "align_lambda_max"
    }
    fn forward(&self, x: &[&Tensor]) -> TensorResult<Tensor> {
        check_points("align_lambda_max", x[0])?;
        check_points("align_lambda_max", x[1])?;
        if x[0].shape() != x[1].shape() {
            return Err(TensorError::shape("align_lambda_max", format!("{:?} vs {:?}", x[0].shape(), x[1].shape())));
        }
        let e = eig_sym4(&horn_matrix(&cross_covariance(&points_of(x[0]), &points_of(x[1]))));
        Ok(Tensor::scalar(e.values[0]))
    }
    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (_, grads) = Self::lambda_grads(&points_of(x[0]), &points_of(x[1]));
        let gv = g.item();
        match grads {
            Some((ga, gb)) => vec![
                Some(Tensor::new(x[0].shape(), ga.iter().map(|v| v * gv).collect()).expect("shape")),
                Some(Tensor::new(x[1].shape(), gb.iter().map(|v| v * gv).collect()).expect("shape")),
            ],
            None => {
                log::warn!("align_lambda_max: degenerate eigenvalue gap, gradient zeroed");
                vec![Some(Tensor::zeros(x[0].shape())), Some(Tensor::zeros(x[1].shape()))]
            }
        }
    }
}

/// Alignment error of two raw `[N, 3]` shapes, differentiable in both.
#[derive(Debug, Clone, Copy)]
pub struct ErrAlignOp;

impl Op for ErrAlignOp {
    fn name(&self) -> &'static str {
        "err_align"
    }
    fn forward(&self, x: &[&Tensor]) -> TensorResult<Tensor> {
        check_points("err_align", x[0])?;
        if x[0].shape() != x[1].shape() {
            return Err(TensorError::shape("err_align", format!("{:?} vs {:?}", x[0].shape(), x[1].shape())));
        }
        let e = err_align_points(&points_of(x[0]), &points_of(x[1]))
            .map_err(|e| TensorError::invalid("err_align", e.to_string()))?;
        Ok(Tensor::scalar(e))
    }
    fn backward(&self, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let err = out.item();
        let nv = x[0].shape()[0] as f64;
        if err <= 0.0 {
            return vec![Some(Tensor::zeros(x[0].shape())), Some(Tensor::zeros(x[1].shape()))];
        }
        let a = normalize_points(&points_of(x[0])).expect("validated in forward");
        let b = normalize_points(&points_of(x[1])).expect("validated in forward");
        // err² = (Σ|â|² + Σ|b̂|² - 2λ) / N_v
        let d_sq = g.item() / (2.0 * err);
        let (_, lambda_grads) = AlignLambdaOp::lambda_grads(&a.points, &b.points);
        if lambda_grads.is_none() {
            log::warn!("err_align: degenerate eigenvalue gap, rotation term of the gradient zeroed");
        }
        let flat = |s: &NormalizedShape| s.points.iter().flatten().copied().collect::<Vec<f64>>();
        let (fa, fb) = (flat(&a), flat(&b));
        let mut ga: Vec<f64> = fa.iter().map(|v| d_sq * 2.0 * v / nv).collect();
        let mut gb: Vec<f64> = fb.iter().map(|v| d_sq * 2.0 * v / nv).collect();
        if let Some((la, lb)) = lambda_grads {
            for (gi, li) in ga.iter_mut().zip(&la) {
                *gi -= d_sq * 2.0 * li / nv;
            }
            for (gi, li) in gb.iter_mut().zip(&lb) {
                *gi -= d_sq * 2.0 * li / nv;
            }
        }
        vec![
            Some(Tensor::new(x[0].shape(), normalize_vjp(&fa, a.scale, &ga)).expect("shape")),
            Some(Tensor::new(x[1].shape(), normalize_vjp(&fb, b.scale, &gb)).expect("shape")),
        ]
    }
}

impl Tape {
    pub fn normalize_shape(&self, x: Var) -> TensorResult<Var> {
        self.apply(NormalizeShapeOp, &[x])
    }
    pub fn align_lambda_max(&self, a: Var, b: Var) -> TensorResult<Var> {
        self.apply(AlignLambdaOp, &[a, b])
    }
    pub fn eig_max(&self, m: Var) -> TensorResult<Var> {
        self.apply(EigMaxOp, &[m])
    }
    pub fn err_align(&self, x: Var, x_star: Var) -> TensorResult<Var> {
        self.apply(ErrAlignOp, &[x, x_star])
    }
}
