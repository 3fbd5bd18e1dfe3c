//! 2D detection branch: iterative belief-map regression, per-vertex spatial
//! normalization and the soft-argmax readout.
//!
//! Belief maps are `[H, W, N_v]` over the feature grid. A grid cell `(row j,
//! column k)` sits at grid coordinates `(u, v) = (k, j)`; with a downscale
//! factor `s` it covers image pixels `s·k ..= s·k + s - 1`, so its center maps
//! to pixel `s·k + (s - 1)/2`.

use crate::geometry::MeshGrid2D;
use crate::nn::{Bound, ConvLayer, Init, ParamStore, ResidualBlock, LEAKY_SLOPE};
use crate::ops::Conv2d;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Per-vertex probability maps of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefMapStack {
    pub stage: usize,
    maps: Tensor,
}

impl BeliefMapStack {
    /// Wraps maps that must already be normalized (each slice sums to 1 ± 1e-6).
    pub fn new(stage: usize, maps: Tensor) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(TensorError::shape("belief_maps", format!("expected [H, W, N_v], got {:?}", maps.shape())));
        }
        if maps.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(TensorError::invalid("belief_maps", "negative or NaN entry"));
        }
        let sums = slice_sums(&maps);
        if let Some(i) = sums.iter().position(|s| (s - 1.0).abs() > 1e-6) {
            return Err(TensorError::invalid("belief_maps", format!("slice {i} sums to {}", sums[i])));
        }
        Ok(BeliefMapStack { stage, maps })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn num_vertices(&self) -> usize {
        self.maps.shape()[2]
    }

    /// Maximum probability of each vertex slice.
    pub fn peak_values(&self) -> Vec<f64> {
        let nv = self.num_vertices();
        let mut peaks = vec![0.0f64; nv];
        for cell in self.maps.data().chunks_exact(nv) {
            for (p, &v) in peaks.iter_mut().zip(cell) {
                *p = p.max(v);
            }
        }
        peaks
    }
}

fn slice_sums(maps: &Tensor) -> Vec<f64> {
    let nv = maps.shape()[2];
    let mut sums = vec![0.0; nv];
    for cell in maps.data().chunks_exact(nv) {
        for (s, v) in sums.iter_mut().zip(cell) {
            *s += v;
        }
    }
    sums
}

/// Softmax over the spatial dimensions, independently per channel.
#[derive(Debug, Clone, Copy)]
pub struct SpatialSoftmaxOp;

impl Op for SpatialSoftmaxOp {
    fn name(&self) -> &'static str {
        "spatial_softmax"
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let raw = x[0];
        if raw.rank() != 3 {
            return Err(TensorError::shape("spatial_softmax", format!("expected [H, W, N_v], got {:?}", raw.shape())));
        }
        let nv = raw.shape()[2];
        let mut max = vec![f64::NEG_INFINITY; nv];
        for cell in raw.data().chunks_exact(nv) {
            for (m, &v) in max.iter_mut().zip(cell) {
                *m = m.max(v);
            }
        }
        let mut out: Vec<f64> = raw
            .data()
            .chunks_exact(nv)
            .flat_map(|cell| cell.iter().zip(&max).map(|(v, m)| (v - m).exp()))
            .collect();
        let mut sums = vec![0.0; nv];
        for cell in out.chunks_exact(nv) {
            for (s, v) in sums.iter_mut().zip(cell) {
                *s += v;
            }
        }
        for cell in out.chunks_exact_mut(nv) {
            for (v, s) in cell.iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        Tensor::new(raw.shape(), out)
    }

    fn backward(&self, _x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let nv = out.shape()[2];
        let mut dots = vec![0.0; nv];
        for (bc, gc) in out.data().chunks_exact(nv).zip(g.data().chunks_exact(nv)) {
            for ((d, b), gv) in dots.iter_mut().zip(bc).zip(gc) {
                *d += b * gv;
            }
        }
        let data = out
            .data()
            .chunks_exact(nv)
            .zip(g.data().chunks_exact(nv))
            .flat_map(|(bc, gc)| bc.iter().zip(gc).zip(&dots).map(|((b, gv), d)| b * (gv - d)).collect::<Vec<_>>())
            .collect();
        vec![Some(Tensor::new(out.shape(), data).expect("shape"))]
    }
}

/// Mapping from feature-grid coordinates to image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridToImage {
    pub scale_u: f64,
    pub scale_v: f64,
}

impl GridToImage {
    pub fn new(image_width: usize, image_height: usize, grid_width: usize, grid_height: usize) -> Self {
        GridToImage {
            scale_u: image_width as f64 / grid_width as f64,
            scale_v: image_height as f64 / grid_height as f64,
        }
    }

    pub fn to_image(&self, g: [f64; 2]) -> [f64; 2] {
        [self.scale_u * g[0] + (self.scale_u - 1.0) / 2.0, self.scale_v * g[1] + (self.scale_v - 1.0) / 2.0]
    }

    pub fn to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - (self.scale_u - 1.0) / 2.0) / self.scale_u, (p[1] - (self.scale_v - 1.0) / 2.0) / self.scale_v]
    }
}

/// Expected location under each belief slice, `[H, W, N_v] -> [N_v, 2]` in image pixels.
#[derive(Debug, Clone, Copy)]
pub struct SoftArgmaxOp {
    pub map: GridToImage,
}

impl SoftArgmaxOp {
    /// Returns per-vertex `(Σ u·B, Σ v·B, Σ B)` over the grid.
    fn moments(b: &Tensor) -> Vec<[f64; 3]> {
        let (w, nv) = (b.shape()[1], b.shape()[2]);
        let mut m = vec![[0.0; 3]; nv];
        for (cell, vals) in b.data().chunks_exact(nv).enumerate() {
            let (u, v) = ((cell % w) as f64, (cell / w) as f64);
            for (mi, &p) in m.iter_mut().zip(vals) {
                mi[0] += u * p;
                mi[1] += v * p;
                mi[2] += p;
            }
        }
        m
    }
}

impl Op for SoftArgmaxOp {
    fn name(&self) -> &'static str {
        "soft_argmax"
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        if x[0].rank() != 3 {
            return Err(TensorError::shape("soft_argmax", format!("expected [H, W, N_v], got {:?}", x[0].shape())));
        }
        let m = Self::moments(x[0]);
        if m.iter().any(|mi| !(mi[2] > 0.0)) {
            return Err(TensorError::invalid("soft_argmax", "belief slice with non-positive mass"));
        }
        let data = m.iter().flat_map(|mi| self.map.to_image([mi[0] / mi[2], mi[1] / mi[2]])).collect();
        Tensor::new(&[m.len(), 2], data)
    }

    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let b = x[0];
        let (w, nv) = (b.shape()[1], b.shape()[2]);
        let m = Self::moments(b);
        let coef: Vec<[f64; 4]> = m
            .iter()
            .zip(g.data().chunks_exact(2))
            .map(|(mi, gi)| {
                [mi[0] / mi[2], mi[1] / mi[2], self.map.scale_u * gi[0] / mi[2], self.map.scale_v * gi[1] / mi[2]]
            })
            .collect();
        let mut data = Vec::with_capacity(b.len());
        for cell in 0..b.len() / nv {
            let (u, v) = ((cell % w) as f64, (cell / w) as f64);
            data.extend(coef.iter().map(|c| c[2] * (u - c[0]) + c[3] * (v - c[1])));
        }
        vec![Some(Tensor::new(b.shape(), data).expect("shape"))]
    }
}

impl Tape {
    pub fn spatial_softmax(&self, raw: Var) -> Result<Var> {
        self.apply(SpatialSoftmaxOp, &[raw])
    }

    pub fn soft_argmax(&self, beliefs: Var, map: GridToImage) -> Result<Var> {
        self.apply(SoftArgmaxOp { map }, &[beliefs])
    }
}

/// Normalizes raw regressor output into a belief stack.
pub fn normalize(raw: &Tensor, stage: usize) -> Result<BeliefMapStack> {
    let maps = SpatialSoftmaxOp.forward(&[raw])?;
    BeliefMapStack::new(stage, maps)
}

pub fn soft_argmax(beliefs: &BeliefMapStack, map: GridToImage) -> Result<MeshGrid2D> {
    let uv = SoftArgmaxOp { map }.forward(&[beliefs.maps()])?;
    let nv = beliefs.num_vertices();
    let n = (nv as f64).sqrt().round() as usize;
    MeshGrid2D::from_tensor(n, &uv).map_err(|e| TensorError::invalid("soft_argmax", e.to_string()))
}

/// Target maps with a Gaussian peak at every ground-truth location. Locations
/// outside the grid are clipped to its border before the peak is placed.
pub fn gt_heatmap(uv: &MeshGrid2D, height: usize, width: usize, sigma: f64, map: GridToImage) -> Result<BeliefMapStack> {
    if !(sigma > 0.0) {
        return Err(TensorError::invalid("gt_heatmap", format!("sigma must be positive, got {sigma}")));
    }
    let nv = uv.num_vertices();
    let centers: Vec<[f64; 2]> = uv
        .vertices()
        .iter()
        .map(|&p| {
            let g = map.to_grid(p);
            [g[0].clamp(0.0, (width - 1) as f64), g[1].clamp(0.0, (height - 1) as f64)]
        })
        .collect();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0; height * width * nv];
    for j in 0..height {
        for k in 0..width {
            let cell = &mut data[(j * width + k) * nv..][..nv];
            for (d, c) in cell.iter_mut().zip(&centers) {
                let r2 = (k as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2);
                *d = (-r2 * inv).exp();
            }
        }
    }
    let sums = {
        let mut s = vec![0.0; nv];
        for cell in data.chunks_exact(nv) {
            for (a, v) in s.iter_mut().zip(cell) {
                *a += v;
            }
        }
        s
    };
    for cell in data.chunks_exact_mut(nv) {
        for (v, s) in cell.iter_mut().zip(&sums) {
            *v /= s;
        }
    }
    BeliefMapStack::new(0, Tensor::new(&[height, width, nv], data)?)
}

/// The regressor of one refinement stage: two residual blocks followed by two
/// convolutions producing one raw map per vertex.
#[derive(Debug, Clone)]
pub struct StageRegressor {
    pub stage: usize,
    pub in_channels: usize,
    pub num_vertices: usize,
    block1: ResidualBlock,
    block2: ResidualBlock,
    conv: ConvLayer,
    head: ConvLayer,
}

impl StageRegressor {
    /// `feature_channels` is the channel count of the image features; stages
    /// after the first also receive the previous belief maps.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        stage: usize,
        feature_channels: usize,
        width: usize,
        num_vertices: usize,
    ) -> Self {
        assert!(stage >= 1);
        let in_channels = if stage == 1 { feature_channels } else { feature_channels + num_vertices };
        let name = format!("phi{stage}");
        let block1 = ResidualBlock::new(store, init, &format!("{name}.res1"), in_channels, width, 1);
        let block2 = ResidualBlock::new(store, init, &format!("{name}.res2"), width, width, 2);
        let conv = ConvLayer::new(store, init, &format!("{name}.conv"), 3, width, width, Conv2d::same(3));
        let head = ConvLayer::with_gain(store, init, &format!("{name}.head"), 1, width, num_vertices, Conv2d::default(), 0.5);
        StageRegressor { stage, in_channels, num_vertices, block1, block2, conv, head }
    }

    /// Runs the stage on `features` (and the previous stage's maps for t > 1),
    /// returning the normalized belief maps.
    pub fn run(&self, tape: &Tape, p: &Bound, features: Var, prev: Option<Var>) -> Result<Var> {
        let input = match (self.stage, prev) {
            (1, None) => features,
            (1, Some(_)) => return Err(TensorError::invalid("run_stage", "stage 1 takes no previous maps")),
            (_, None) => return Err(TensorError::invalid("run_stage", format!("stage {} needs previous maps", self.stage))),
            (_, Some(prev)) => {
                let (fs, ps) = (tape.shape(features), tape.shape(prev));
                if fs[..2] != ps[..2] {
                    return Err(TensorError::shape("run_stage", format!("features {fs:?} vs previous maps {ps:?}")));
                }
                tape.concat(&[features, prev], 2)?
            }
        };
        let h = self.block1.forward(tape, p, input)?;
        let h = self.block2.forward(tape, p, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv.forward(tape, p, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let raw = self.head.forward(tape, p, h)?;
        tape.spatial_softmax(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, random_projection, random_tensor};

    fn flat_map() -> GridToImage {
        GridToImage { scale_u: 1.0, scale_v: 1.0 }
    }

    fn one_hot(h: usize, w: usize, cells: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[h, w, 1]);
        for &(row, col) in cells {
            t.data_mut()[row * w + col] = 1.0 / cells.len() as f64;
        }
        t
    }

    #[test]
    fn uniform_raw_gives_uniform_beliefs() {
        let b = normalize(&Tensor::zeros(&[4, 4, 3]), 1).unwrap();
        assert!(b.maps().data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn dominant_entry_takes_the_mass() {
        let mut raw = Tensor::zeros(&[4, 4, 1]);
        raw.data_mut()[5] = 50.0;
        let b = normalize(&raw, 1).unwrap();
        assert!(b.maps().data()[5] > 0.9999);
    }

    #[test]
    fn normalized_slices_sum_to_one() {
        let raw = random_tensor(&[6, 5, 4], -20.0, 20.0, 3);
        let b = normalize(&raw, 1).unwrap();
        for s in slice_sums(b.maps()) {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(b.maps().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn soft_argmax_of_delta_is_cell_center() {
        let b = BeliefMapStack::new(1, one_hot(32, 32, &[(20, 10)])).unwrap();
        let uv = SoftArgmaxOp { map: GridToImage { scale_u: 4.0, scale_v: 4.0 } }.forward(&[b.maps()]).unwrap();
        assert_eq!(uv.data(), &[41.5, 81.5]);
    }

    #[test]
    fn soft_argmax_uniform_is_grid_center() {
        let b = normalize(&Tensor::zeros(&[56, 56, 1]), 1).unwrap();
        let uv = SoftArgmaxOp { map: flat_map() }.forward(&[b.maps()]).unwrap();
        assert!((uv.data()[0] - 27.5).abs() < 1e-9 && (uv.data()[1] - 27.5).abs() < 1e-9);
    }

    #[test]
    fn soft_argmax_two_peaks_is_midpoint() {
        let b = one_hot(40, 40, &[(10, 10), (30, 30)]);
        let uv = SoftArgmaxOp { map: flat_map() }.forward(&[&b]).unwrap();
        assert_eq!(uv.data(), &[20.0, 20.0]);
    }

    #[test]
    // peaks at least 3 sigma inside the grid so truncation does not bias the mean
    fn heatmap_round_trips_through_soft_argmax() {
        let map = GridToImage { scale_u: 4.0, scale_v: 4.0 };
        let uv = MeshGrid2D::new(2, vec![[20.3, 30.7], [40.0, 26.9], [33.3, 44.4], [24.1, 38.2]]).unwrap();
        let b = gt_heatmap(&uv, 16, 16, 1.5, map).unwrap();
        let back = soft_argmax(&b, map).unwrap();
        for (p, q) in back.vertices().iter().zip(uv.vertices()) {
            let (gp, gq) = (map.to_grid(*p), map.to_grid(*q));
            assert!((gp[0] - gq[0]).abs() < 0.1 && (gp[1] - gq[1]).abs() < 0.1, "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn heatmap_peak_at_nearest_cell_and_concentrated() {
        let uv = MeshGrid2D::new(2, vec![[5.2, 7.9], [1.0, 1.0], [9.6, 3.4], [0.0, 11.0]]).unwrap();
        let b = gt_heatmap(&uv, 12, 12, 0.5, flat_map()).unwrap();
        let nv = 4;
        for (i, p) in uv.vertices().iter().enumerate() {
            let (best, _) = b
                .maps()
                .data()
                .iter()
                .skip(i)
                .step_by(nv)
                .enumerate()
                .fold((0, -1.0), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            assert_eq!((best % 12, best / 12), (p[0].round() as usize, p[1].round() as usize));
            let near: f64 = b
                .maps()
                .data()
                .iter()
                .skip(i)
                .step_by(nv)
                .enumerate()
                .filter(|(c, _)| ((c % 12) as f64 - p[0]).hypot((c / 12) as f64 - p[1]) <= 2.0)
                .map(|(_, v)| v)
                .sum();
            assert!(near > 0.99, "{near}");
        }
    }

    #[test]
    fn heatmap_outside_grid_is_clipped() {
        let uv = MeshGrid2D::new(2, vec![[-100.0, 5.0], [500.0, 500.0], [3.0, 3.0], [3.0, 3.0]]).unwrap();
        let b = gt_heatmap(&uv, 8, 8, 1.0, flat_map()).unwrap();
        assert!(b.maps().all_finite());
        assert!(gt_heatmap(&uv, 8, 8, 0.0, flat_map()).is_err());
    }

    #[test]
    fn softmax_gradient() {
        let raw = random_tensor(&[4, 5, 3], -2.0, 2.0, 1);
        let err = grad_check(
            |t, v| {
                let b = t.spatial_softmax(v)?;
                random_projection(t, b, 2)
            },
            &raw,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn soft_argmax_gradient() {
        let raw = random_tensor(&[6, 6, 3], -2.0, 2.0, 4);
        let b = normalize(&raw, 1).unwrap().maps().clone();
        let map = GridToImage { scale_u: 4.0, scale_v: 2.0 };
        let err = grad_check(
            |t, v| {
                let uv = t.soft_argmax(v, map)?;
                random_projection(t, uv, 5)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn stage_channel_arithmetic_and_contract() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let s1 = StageRegressor::new(&mut store, &mut init, 1, 6, 8, 4);
        let s2 = StageRegressor::new(&mut store, &mut init, 2, 6, 8, 4);
        assert_eq!(s2.in_channels, 6 + 4);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let f = tape.constant(random_tensor(&[5, 5, 6], -1.0, 1.0, 8));
        let b1 = s1.run(&tape, &p, f, None).unwrap();
        let stack = BeliefMapStack::new(1, tape.value(b1).clone()).unwrap();
        assert_eq!(stack.num_vertices(), 4);
        assert!(s2.run(&tape, &p, f, None).is_err());
        assert!(s1.run(&tape, &p, f, Some(b1)).is_err());
        let b2 = s2.run(&tape, &p, f, Some(b1)).unwrap();
        assert!(BeliefMapStack::new(2, tape.value(b2).clone()).is_ok());
        let small = tape.constant(Tensor::zeros(&[4, 5, 4]));
        assert!(s2.run(&tape, &p, f, Some(small)).is_err());
    }

    #[test]
    fn vertex_permutation_is_equivariant() {
        let raw = random_tensor(&[5, 5, 3], -3.0, 3.0, 11);
        let perm = [2usize, 0, 1];
        let mut permuted = Tensor::zeros(&[5, 5, 3]);
        for cell in 0..25 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted.data_mut()[cell * 3 + dst] = raw.data()[cell * 3 + src];
            }
        }
        let map = flat_map();
        let a = SoftArgmaxOp { map }.forward(&[normalize(&raw, 1).unwrap().maps()]).unwrap();
        let b = SoftArgmaxOp { map }.forward(&[normalize(&permuted, 1).unwrap().maps()]).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b.data()[2 * dst..2 * dst + 2], a.data()[2 * src..2 * src + 2]);
        }
    }

    #[test]
    fn three_stage_chain_gradient() {
        let mut store = ParamStore::new();
        let mut init = Init::new(21);
        let stages: Vec<_> = (1..=3).map(|t| StageRegressor::new(&mut store, &mut init, t, 2, 3, 4)).collect();
        let features = random_tensor(&[16, 16, 2], -1.0, 1.0, 22);
        let map = GridToImage { scale_u: 4.0, scale_v: 4.0 };
        let err = grad_check(
            |t, f| {
                let p = store.bind(t, |_| false);
                let mut prev = None;
                for s in &stages {
                    prev = Some(s.run(t, &p, f, prev)?);
                }
                let uv = t.soft_argmax(prev.unwrap(), map)?;
                random_projection(t, uv, 23)
            },
            &features,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    proptest::proptest! {
        #[test]
        fn soft_argmax_stays_in_grid_hull(seed in 0u64..1000, h in 2usize..9, w in 2usize..9, spread in 0.1f64..40.0) {
            let raw = random_tensor(&[h, w, 2], -spread, spread, seed);
            let uv = SoftArgmaxOp { map: flat_map() }.forward(&[normalize(&raw, 1).unwrap().maps()]).unwrap();
            for p in uv.data().chunks_exact(2) {
                proptest::prop_assert!(p[0] >= 0.0 && p[0] <= (w - 1) as f64);
                proptest::prop_assert!(p[1] >= 0.0 && p[1] <= (h - 1) as f64);
            }
        }
    }
}
