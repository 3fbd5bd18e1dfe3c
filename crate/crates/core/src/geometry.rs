//! Pinhole camera, mesh grids and the lifting layer.
//!
//! Pixel coordinates are `(u, v) = (column, row)` with the origin at the
//! center of the top-left pixel. All 3D coordinates are in the camera frame
//! (x right, y down, z forward).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Op, Tape, Var};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("vertex index {index} out of range for a {n}x{n} grid")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("vertex {index} has non-positive depth {z}")]
    BehindCamera { index: usize, z: f64 },
    #[error("invalid mesh: {0}")]
    Mesh(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fu: f64,
    pub fv: f64,
    pub uc: f64,
    pub vc: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(fu: f64, fv: f64, uc: f64, vc: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let c = Camera { fu, fv, uc, vc, width, height };
        c.validate()?;
        Ok(c)
    }

    /// A camera with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(focal, focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fu, self.fv, self.uc, self.vc].iter().all(|v| v.is_finite());
        if !finite || self.fu <= 0.0 || self.fv <= 0.0 {
            return Err(GeometryError::Camera(format!("focal lengths must be positive, got {self:?}")));
        }
        if !(0.0..self.width as f64).contains(&self.uc) || !(0.0..self.height as f64).contains(&self.vc) {
            return Err(GeometryError::Camera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.uc, self.vc, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn project_point(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fu * p[0] / p[2] + self.uc, self.fv * p[1] / p[2] + self.vc]
    }

    pub fn lift_point(&self, uv: [f64; 2], z: f64) -> [f64; 3] {
        [z * (uv[0] - self.uc) / self.fu, z * (uv[1] - self.vc) / self.fv, z]
    }
}

/// Row-major grid coordinates `(row, column)` of vertex `i` in an `n x n` grid.
pub fn grid_index(i: usize, n: usize) -> Result<(usize, usize), GeometryError> {
    if i >= n * n {
        return Err(GeometryError::IndexOutOfRange { index: i, n });
    }
    Ok((i / n, i % n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrid3D {
    n: usize,
    vertices: Vec<[f64; 3]>,
}

impl MeshGrid3D {
    pub fn new(n: usize, vertices: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if n < 2 || vertices.len() != n * n {
            return Err(GeometryError::Mesh(format!("{} vertices for grid side {n}", vertices.len())));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::Mesh("non-finite coordinate".into()));
        }
        Ok(MeshGrid3D { n, vertices })
    }

    pub fn from_tensor(n: usize, t: &Tensor) -> Result<Self, GeometryError> {
        if t.len() != n * n * 3 {
            return Err(GeometryError::Mesh(format!("tensor {:?} is not {}x3", t.shape(), n * n)));
        }
        Self::new(n, t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.vertices.len(), 3], self.vertices.iter().flatten().copied().collect())
            .expect("shape")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn vertex(&self, row: usize, col: usize) -> [f64; 3] {
        self.vertices[row * self.n + col]
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        c.map(|s| s / self.vertices.len() as f64)
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> MeshGrid3D {
        MeshGrid3D { n: self.n, vertices: self.vertices.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrid2D {
    n: usize,
    vertices: Vec<[f64; 2]>,
}

impl MeshGrid2D {
    pub fn new(n: usize, vertices: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        if n < 2 || vertices.len() != n * n {
            return Err(GeometryError::Mesh(format!("{} vertices for grid side {n}", vertices.len())));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::Mesh("non-finite coordinate".into()));
        }
        Ok(MeshGrid2D { n, vertices })
    }

    pub fn from_tensor(n: usize, t: &Tensor) -> Result<Self, GeometryError> {
        if t.len() != n * n * 2 {
            return Err(GeometryError::Mesh(format!("tensor {:?} is not {}x2", t.shape(), n * n)));
        }
        Self::new(n, t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.vertices.len(), 2], self.vertices.iter().flatten().copied().collect())
            .expect("shape")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Mean Euclidean distance between corresponding vertices.
    pub fn mean_distance(&self, other: &MeshGrid2D) -> f64 {
        let total: f64 = self
            .vertices
            .iter()
            .zip(&other.vertices)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum();
        total / self.vertices.len() as f64
    }

    /// `(min_u, min_v, max_u, max_v)`
    pub fn bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for v in &self.vertices {
            b[0] = b[0].min(v[0]);
            b[1] = b[1].min(v[1]);
            b[2] = b[2].max(v[0]);
            b[3] = b[3].max(v[1]);
        }
        b
    }
}

pub fn project(camera: &Camera, mesh: &MeshGrid3D) -> Result<MeshGrid2D, GeometryError> {
    let mut out = Vec::with_capacity(mesh.num_vertices());
    for (index, &p) in mesh.vertices().iter().enumerate() {
        if p[2] <= 0.0 {
            return Err(GeometryError::BehindCamera { index, z: p[2] });
        }
        out.push(camera.project_point(p));
    }
    MeshGrid2D::new(mesh.n(), out)
}

pub fn lift(camera: &Camera, uv: &MeshGrid2D, depths: &[f64]) -> Result<MeshGrid3D, GeometryError> {
    if depths.len() != uv.num_vertices() {
        return Err(GeometryError::Mesh(format!(
            "{} depths for {} vertices",
            depths.len(),
            uv.num_vertices()
        )));
    }
    let mut out = Vec::with_capacity(depths.len());
    for (index, (&p, &z)) in uv.vertices().iter().zip(depths).enumerate() {
        if z <= 0.0 {
            return Err(GeometryError::BehindCamera { index, z });
        }
        out.push(camera.lift_point(p, z));
    }
    MeshGrid3D::new(uv.n(), out)
}

/// Differentiable lifting: inputs `U: [N_v, 2]` pixels and `z: [N_v]`, output `X: [N_v, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct LiftOp {
    pub camera: Camera,
}

impl Op for LiftOp {
    fn name(&self) -> &'static str {
        "lift"
    }

    fn forward(&self, x: &[&Tensor]) -> TensorResult<Tensor> {
        let (uv, z) = (x[0], x[1]);
        let nv = z.len();
        if uv.len() != 2 * nv {
            return Err(TensorError::shape("lift", format!("U {:?} vs z {:?}", uv.shape(), z.shape())));
        }
        let mut out = Vec::with_capacity(3 * nv);
        for (i, (p, &zi)) in uv.data().chunks_exact(2).zip(z.data()).enumerate() {
            if zi <= 0.0 {
                return Err(TensorError::invalid("lift", format!("vertex {i} has depth {zi} <= 0")));
            }
            out.extend_from_slice(&self.camera.lift_point([p[0], p[1]], zi));
        }
        Tensor::new(&[nv, 3], out)
    }

    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (uv, z) = (x[0], x[1]);
        let c = &self.camera;
        let mut guv = Vec::with_capacity(uv.len());
        let mut gz = Vec::with_capacity(z.len());
        for ((p, &zi), gi) in uv.data().chunks_exact(2).zip(z.data()).zip(g.data().chunks_exact(3)) {
            guv.push(gi[0] * zi / c.fu);
            guv.push(gi[1] * zi / c.fv);
            gz.push(gi[0] * (p[0] - c.uc) / c.fu + gi[1] * (p[1] - c.vc) / c.fv + gi[2]);
        }
        vec![
            Some(Tensor::new(uv.shape(), guv).expect("shape")),
            Some(Tensor::new(z.shape(), gz).expect("shape")),
        ]
    }
}

impl Tape {
    pub fn lift(&self, camera: &Camera, uv: Var, z: Var) -> TensorResult<Var> {
        self.apply(LiftOp { camera: *camera }, &[uv, z])
    }
}
