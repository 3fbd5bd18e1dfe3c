//! Direct-regression baseline: the same feature stack, two strided
//! convolutions and a dense layer straight to `3 N^2` coordinates, trained on
//! the alignment error alone. The reduction width is the largest one that
//! keeps the parameter count within the full model's.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::geometry::MeshGrid3D;
use crate::model::{FeatureExtractor, Model};
use crate::nn::{Bound, ConvLayer, Init, ParamId, ParamStore, LEAKY_SLOPE};
use crate::ops::Conv2d;
use crate::optim::Adam;
use crate::parallel::{self, Exec};
use crate::procrustes::aligned_vertex_error;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{learning_rate, validation_split};

const DOWN: Conv2d = Conv2d { stride: 2, padding: 1, dilation: 1 };

#[derive(Debug, Clone)]
pub struct Baseline {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub width: usize,
    psi: FeatureExtractor,
    reduce: [ConvLayer; 2],
    dense_w: ParamId,
    dense_b: ParamId,
}

fn reduced_cells(config: &ModelConfig) -> usize {
    let side = |s: usize| {
        let once = DOWN.output_size(s, 3).expect("grid fits a 3x3 kernel");
        DOWN.output_size(once, 3).expect("grid fits a 3x3 kernel")
    };
    side(config.grid_height()) * side(config.grid_width())
}

impl Baseline {
    pub fn with_width(config: &ModelConfig, width: usize) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed ^ 0xba5e);
        let psi = FeatureExtractor::new(&mut params, &mut init, config);
        let c = psi.out_channels();
        let reduce = [
            ConvLayer::new(&mut params, &mut init, "base.reduce1", 3, c, width, DOWN),
            ConvLayer::new(&mut params, &mut init, "base.reduce2", 3, width, width, DOWN),
        ];
        let fan_in = reduced_cells(config) * width;
        let out = 3 * config.num_vertices();
        let dense_w = params.insert("base.dense.w", init.normal(&[fan_in, out], (1.0 / fan_in as f64).sqrt()));
        let dense_b = params.insert("base.dense.b", Tensor::zeros(&[1, out]));
        Baseline { config: config.clone(), params, width, psi, reduce, dense_w, dense_b }
    }

    /// Widest baseline whose parameter count does not exceed the full model's.
    pub fn new(config: &ModelConfig) -> Self {
        let budget = Model::new(config).params.num_scalars();
        let count = |w: usize| Baseline::with_width(config, w).params.num_scalars();
        let mut width = 1;
        while count(width + 1) <= budget {
            width += 1;
        }
        Baseline::with_width(config, width)
    }

    /// `[N_v, 3]` coordinates.
    pub fn forward(&self, tape: &Tape, p: &Bound, image: Var) -> Result<Var> {
        let mut h = self.psi.forward(tape, p, image)?;
        for layer in &self.reduce {
            h = layer.forward(tape, p, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let flat = tape.reshape(h, &[1, reduced_cells(&self.config) * self.width])?;
        let y = tape.matmul(flat, p.var(self.dense_w))?;
        let y = tape.add(y, p.var(self.dense_b))?;
        Ok(tape.reshape(y, &[self.config.num_vertices(), 3])?)
    }

    pub fn predict(&self, image: &Tensor) -> Result<MeshGrid3D> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, |_| false);
        let img = tape.constant(image.clone());
        let x = self.forward(&tape, &p, img)?;
        let v = tape.value(x);
        Ok(MeshGrid3D::from_tensor(self.config.n, &v)?)
    }

    fn step(&self, image: &Tensor, mesh: &Tensor) -> Result<(f64, Vec<Option<Tensor>>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, |_| true);
        let img = tape.constant(image.clone());
        let target = tape.constant(mesh.clone());
        let x = self.forward(&tape, &p, img)?;
        let loss = tape.err_align(x, target)?;
        let value = tape.value(loss).item();
        let mut g = tape.backward(loss)?;
        Ok((value, p.vars().iter().map(|&v| g.take(v)).collect()))
    }

    /// Mean aligned per-vertex error over `samples`.
    pub fn evaluate(&self, samples: &[Sample], exec: Exec) -> Result<f64> {
        let errs = parallel::map(exec, samples, |s| -> Result<f64> {
            let x = self.predict(&s.image_tensor())?;
            Ok(aligned_vertex_error(x.vertices(), s.mesh3d.vertices())?)
        });
        let mut sum = 0.0;
        for e in errs {
            sum += e?;
        }
        Ok(sum / samples.len().max(1) as f64)
    }
}

/// Trains for `config.total_epochs()` epochs with the model's optimizer
/// settings and keeps the parameters of the best validation epoch.
pub fn train_baseline(config: &ModelConfig, samples: &[Sample], exec: Exec) -> Result<Baseline> {
    if samples.is_empty() {
        return Err(Error::Mismatch("empty training set".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.mesh3d.n() != config.n) {
        return Err(Error::Mismatch(format!("sample grid side {} but config expects {}", s.mesh3d.n(), config.n)));
    }
    let mut model = Baseline::new(config);
    let mut adam = Adam::new(&model.params);
    let (train_idx, val_idx) = validation_split(samples.len(), config.val_fraction, config.seed);
    let data: Vec<(Tensor, Tensor)> = samples.iter().map(|s| (s.image_tensor(), s.mesh3d.to_tensor())).collect();
    let val: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..config.total_epochs() {
        let lr = learning_rate(config, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x51ed).wrapping_add(epoch as u64)));
        for batch in order.chunks(config.batch_size) {
            let m = &model;
            let steps = parallel::map(exec, batch, |&i| m.step(&data[i].0, &data[i].1));
            let mut sum: Vec<Option<Tensor>> = vec![None; model.params.len()];
            for step in steps {
                let (loss, grads) = step?;
                if !loss.is_finite() {
                    return Err(Error::Mismatch(format!("baseline loss became {loss} in epoch {}", epoch + 1)));
                }
                for (s, g) in sum.iter_mut().zip(grads) {
                    match (s.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *s = Some(g),
                        _ => {}
                    }
                }
            }
            for g in sum.iter_mut().flatten() {
                g.scale_assign(1.0 / batch.len() as f64);
            }
            adam.step(&mut model.params, &sum, lr, config.weight_decay);
        }
        if !val.is_empty() {
            let e = model.evaluate(&val, exec)?;
            if best.as_ref().is_none_or(|b| e < b.0) {
                best = Some((e, model.params.clone()));
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(model)
}
