//! Depth branch: features pooled under each vertex's belief map, and the
//! regressor that turns them into per-vertex depths.

use crate::nn::{Bound, ConvLayer, Init, ParamStore, ResidualBlock, LEAKY_SLOPE};
use crate::ops::{gemm, Conv2d};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Default lower bound of predicted depths, in scene units.
pub const DEFAULT_Z_MIN: f64 = 0.1;

/// `V[j, k, c] = Σ_{u,v} B_i[v, u] F[v, u, c]` with `i = j N + k`.
///
/// Inputs are beliefs `[H, W, N_v]` and features `[H, W, C]`; the output is
/// `[N, N, C]`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionOp;

impl Op for ConditionOp {
    fn name(&self) -> &'static str {
        "condition"
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let (b, f) = (x[0], x[1]);
        if b.rank() != 3 || f.rank() != 3 {
            return Err(TensorError::shape("condition", format!("beliefs {:?}, features {:?}", b.shape(), f.shape())));
        }
        if b.shape()[..2] != f.shape()[..2] {
            return Err(TensorError::shape(
                "condition",
                format!("spatial mismatch: beliefs {:?}, features {:?}", b.shape(), f.shape()),
            ));
        }
        let nv = b.shape()[2];
        let n = (nv as f64).sqrt().round() as usize;
        if n * n != nv {
            return Err(TensorError::invalid("condition", format!("{nv} vertices do not form a square grid")));
        }
        let (cells, c) = (b.shape()[0] * b.shape()[1], f.shape()[2]);
        let mut out = vec![0.0; nv * c];
        gemm(nv, cells, c, b.data(), true, f.data(), false, &mut out, 0.0);
        Tensor::new(&[n, n, c], out)
    }

    fn backward(&self, x: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (b, f) = (x[0], x[1]);
        let (cells, nv, c) = (b.shape()[0] * b.shape()[1], b.shape()[2], f.shape()[2]);
        let mut gb = vec![0.0; cells * nv];
        gemm(cells, c, nv, f.data(), false, g.data(), true, &mut gb, 0.0);
        let mut gf = vec![0.0; cells * c];
        gemm(cells, nv, c, b.data(), false, g.data(), false, &mut gf, 0.0);
        vec![
            Some(Tensor::new(b.shape(), gb).expect("shape")),
            Some(Tensor::new(f.shape(), gf).expect("shape")),
        ]
    }
}

impl Tape {
    pub fn condition(&self, beliefs: Var, features: Var) -> Result<Var> {
        self.apply(ConditionOp, &[beliefs, features])
    }
}

pub fn condition(beliefs: &Tensor, features: &Tensor) -> Result<Tensor> {
    ConditionOp.forward(&[beliefs, features])
}

/// Two residual blocks over the `N x N x C` conditioned grid followed by a 3x3
/// and a 1x1 convolution down to one raw depth channel.
#[derive(Debug, Clone)]
pub struct DepthRegressor {
    pub z_min: f64,
    block1: ResidualBlock,
    block2: ResidualBlock,
    conv: ConvLayer,
    head: ConvLayer,
}

impl DepthRegressor {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, width: usize, z_min: f64) -> Self {
        DepthRegressor {
            z_min,
            block1: ResidualBlock::new(store, init, "omega.res1", channels, width, 1),
            block2: ResidualBlock::new(store, init, "omega.res2", width, width, 1),
            conv: ConvLayer::new(store, init, "omega.conv", 3, width, width, Conv2d::same(3)),
            head: ConvLayer::with_gain(store, init, "omega.head", 1, width, 1, Conv2d::default(), 0.5),
        }
    }

    /// Raw depth logits `[N, N, 1]`.
    pub fn raw(&self, tape: &Tape, p: &Bound, v: Var) -> Result<Var> {
        let h = self.block1.forward(tape, p, v)?;
        let h = self.block2.forward(tape, p, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv.forward(tape, p, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        self.head.forward(tape, p, h)
    }

    /// Per-vertex depths `[N_v]`, each `z_min + softplus(raw)`.
    pub fn predict(&self, tape: &Tape, p: &Bound, v: Var) -> Result<Var> {
        let raw = self.raw(tape, p, v)?;
        depth_from_raw(tape, raw, self.z_min)
    }
}

pub fn depth_from_raw(tape: &Tape, raw: Var, z_min: f64) -> Result<Var> {
    let nv = tape.value(raw).len();
    let flat = tape.reshape(raw, &[nv])?;
    let sp = tape.softplus(flat)?;
    tape.add_scalar(sp, z_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_inputs, random_projection, random_tensor, GradCheckOptions};
    use crate::optim::Adam;
    use proptest::prelude::*;

    fn uniform(h: usize, w: usize, nv: usize) -> Tensor {
        Tensor::full(&[h, w, nv], 1.0 / (h * w) as f64)
    }

    #[test]
    fn one_hot_samples_the_feature_vector() {
        let f = random_tensor(&[5, 6, 3], -1.0, 1.0, 1);
        let mut b = Tensor::zeros(&[5, 6, 4]);
        // vertex 3 looks at cell (row 2, col 4)
        b.data_mut()[(2 * 6 + 4) * 4 + 3] = 1.0;
        let v = condition(&b, &f).unwrap();
        assert_eq!(v.shape(), &[2, 2, 3]);
        assert_eq!(&v.data()[9..12], &f.data()[(2 * 6 + 4) * 3..][..3]);
    }

    #[test]
    fn uniform_belief_gives_channel_mean() {
        let f = random_tensor(&[4, 4, 2], -1.0, 1.0, 2);
        let v = condition(&uniform(4, 4, 9), &f).unwrap();
        for c in 0..2 {
            let mean: f64 = f.data().iter().skip(c).step_by(2).sum::<f64>() / 16.0;
            for i in 0..9 {
                assert!((v.data()[i * 2 + c] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let f = Tensor::zeros(&[4, 5, 2]);
        assert!(condition(&uniform(4, 4, 4), &f).is_err());
        assert!(condition(&uniform(4, 5, 3), &f).is_err());
    }

    #[test]
    fn condition_gradient() {
        let b = random_tensor(&[4, 3, 4], 0.0, 1.0, 3);
        let f = random_tensor(&[4, 3, 5], -1.0, 1.0, 4);
        let err = grad_check_inputs(
            |t, v| {
                let y = t.condition(v[0], v[1])?;
                random_projection(t, y, 5)
            },
            &[b, f],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_raw_depth_is_z_min_plus_ln2() {
        let tape = Tape::new();
        let raw = tape.constant(Tensor::zeros(&[3, 3, 1]));
        let z = depth_from_raw(&tape, raw, DEFAULT_Z_MIN).unwrap();
        let z = tape.value(z);
        assert_eq!(z.shape(), &[9]);
        assert!(z.data().iter().all(|&d| (d - 0.7931471805599453).abs() < 1e-12));
    }

    #[test]
    fn regressor_output_is_one_depth_per_vertex() {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let reg = DepthRegressor::new(&mut store, &mut init, 6, 8, DEFAULT_Z_MIN);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let v = tape.constant(random_tensor(&[5, 5, 6], -30.0, 30.0, 5));
        let z = reg.predict(&tape, &p, v).unwrap();
        let z = tape.value(z);
        assert_eq!(z.shape(), &[25]);
        assert!(z.data().iter().all(|&d| d > DEFAULT_Z_MIN));
    }

    #[test]
    fn overfits_one_sample() {
        let mut store = ParamStore::new();
        let mut init = Init::new(6);
        let reg = DepthRegressor::new(&mut store, &mut init, 4, 8, DEFAULT_Z_MIN);
        let v = random_tensor(&[3, 3, 4], -1.0, 1.0, 7);
        let target = random_tensor(&[9], 2.0, 3.0, 8);
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let tape = Tape::new();
            let p = store.bind(&tape, |_| true);
            let vv = tape.constant(v.clone());
            let z = reg.predict(&tape, &p, vv).unwrap();
            let zt = tape.constant(target.clone());
            let loss = tape.squared_distance(z, zt).unwrap();
            let vars = p.vars().to_vec();
            let mut g = tape.backward(loss).unwrap();
            let grads: Vec<_> = vars.iter().map(|&x| g.take(x)).collect();
            adam.step(&mut store, &grads, 1e-2, 0.0);
        }
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let vv = tape.constant(v);
        let z = tape.value(reg.predict(&tape, &p, vv).unwrap()).clone();
        let mean = target.sum() / 9.0;
        let worst = z.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 0.01 * mean, "{worst}");
    }

    proptest! {
        #[test]
        fn condition_is_bilinear(seed in 0u64..500, a in -3.0f64..3.0, c in -3.0f64..3.0) {
            let b1 = random_tensor(&[3, 4, 4], 0.0, 1.0, seed);
            let b2 = random_tensor(&[3, 4, 4], 0.0, 1.0, seed + 1);
            let f1 = random_tensor(&[3, 4, 2], -1.0, 1.0, seed + 2);
            let f2 = random_tensor(&[3, 4, 2], -1.0, 1.0, seed + 3);
            let combo = |x: &Tensor, y: &Tensor| x.zip_map(y, |p, q| a * p + c * q);
            let lhs = condition(&b1, &combo(&f1, &f2)).unwrap();
            let rhs = combo(&condition(&b1, &f1).unwrap(), &condition(&b1, &f2).unwrap());
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
            let lhs = condition(&combo(&b1, &b2), &f1).unwrap();
            let rhs = combo(&condition(&b1, &f1).unwrap(), &condition(&b2, &f1).unwrap());
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn conditioned_features_are_convex_combinations(seed in 0u64..500) {
            let raw = random_tensor(&[4, 4, 9], -5.0, 5.0, seed);
            let b = crate::detect2d::normalize(&raw, 1).unwrap();
            let f = random_tensor(&[4, 4, 3], -2.0, 2.0, seed + 7);
            let v = condition(b.maps(), &f).unwrap();
            for ch in 0..3 {
                let col: Vec<f64> = f.data().iter().skip(ch).step_by(3).copied().collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for x in v.data().iter().skip(ch).step_by(3) {
                    prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
                }
            }
        }
    }
}
