//! Mini-batch training with the staged schedule.
//!
//! Stage 0 fits the feature stack and the stage regressors on the belief-map
//! term. Stage 1 trains the regressors alone on the same term (the feature
//! stack joins only with `train_backbone`). Stage 2 trains the regressors and
//! the depth branch on the full loss.
//!
//! Per-sample gradients of a batch are computed in parallel, each on its own
//! tape, and summed in batch order before the Adam step, so results are
//! independent of the thread count.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::geometry::{Camera, MeshGrid2D, MeshGrid3D};
use crate::model::{param_group, Checkpoint, Model, Objective};
use crate::optim::Adam;
use crate::parallel::{self, Exec};
use crate::procrustes::aligned_vertex_error;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,stage,loss,loss_align,loss_heatmap,err2d_px,err3d_aligned";

/// Training phase; the number is the `stage` column of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain = 0,
    Regressors = 1,
    Joint = 2,
}

impl Phase {
    pub fn objective(self) -> Objective {
        match self {
            Phase::Joint => Objective::Full,
            _ => Objective::Heatmap,
        }
    }

    /// Whether parameter `name` is optimized in this phase.
    pub fn trains(self, name: &str, config: &ModelConfig) -> bool {
        match (param_group(name), self) {
            ("psi", Phase::Pretrain) => true,
            ("psi", _) => config.train_backbone,
            ("phi", _) => true,
            ("omega", Phase::Joint) => true,
            _ => false,
        }
    }

    pub fn epochs(self, config: &ModelConfig) -> usize {
        match self {
            Phase::Pretrain => config.pretrain_epochs,
            Phase::Regressors => config.stage1_epochs,
            Phase::Joint => config.stage2_epochs,
        }
    }
}

/// A sample with its training targets precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Tensor,
    pub camera: Camera,
    /// `[N_v, 3]`.
    pub mesh: Tensor,
    pub heatmap: Tensor,
    pub mesh3d: MeshGrid3D,
    pub mesh2d: MeshGrid2D,
}

pub fn prepare(model: &Model, samples: &[Sample], exec: Exec) -> Result<Vec<Prepared>> {
    let c = &model.config;
    parallel::map(exec, samples, |s| {
        if s.mesh3d.n() != c.n {
            return Err(Error::Mismatch(format!("sample grid side {} but model expects {}", s.mesh3d.n(), c.n)));
        }
        let image = s.image_tensor();
        model.check_image(&image)?;
        Ok(Prepared {
            image,
            camera: s.camera,
            mesh: s.mesh3d.to_tensor(),
            heatmap: model.target_heatmap(&s.mesh2d)?,
            mesh3d: s.mesh3d.clone(),
            mesh2d: s.mesh2d.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Loss terms of one sample (unweighted) and, when requested, the gradient
/// of the total for every parameter trained in the phase.
#[derive(Debug, Clone)]
pub struct SampleStep {
    pub loss: f64,
    pub align: f64,
    pub heatmap: f64,
    pub grads: Vec<Option<Tensor>>,
}

pub fn sample_step(model: &Model, s: &Prepared, phase: Phase) -> Result<SampleStep> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, |name| phase.trains(name, &model.config));
    let image = tape.constant(s.image.clone());
    let mesh = tape.constant(s.mesh.clone());
    let heat = tape.constant(s.heatmap.clone());
    let fwd = model.forward(&tape, &p, image, &s.camera)?;
    let l = model.loss(&tape, &fwd, mesh, heat, phase.objective())?;
    let (loss, align, heatmap) = (tape.value(l.total).item(), tape.value(l.shape).item(), tape.value(l.heatmap).item());
    let mut g = tape.backward(l.total)?;
    let grads = p.vars().iter().map(|&v| g.take(v)).collect();
    Ok(SampleStep { loss, align, heatmap, grads })
}

/// Losses and errors of a model over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub align: f64,
    pub heatmap: f64,
    /// Mean image distance between detected and true vertices, pixels.
    pub err2d_px: f64,
    /// Mean per-vertex distance after similarity alignment.
    pub err3d_aligned: f64,
}

pub fn evaluate(model: &Model, set: &[Prepared], phase: Phase, exec: Exec) -> Result<Evaluation> {
    let rows = parallel::map(exec, set, |s| -> Result<[f64; 5]> {
        let tape = Tape::new();
        let p = model.params.bind(&tape, |_| false);
        let image = tape.constant(s.image.clone());
        let mesh = tape.constant(s.mesh.clone());
        let heat = tape.constant(s.heatmap.clone());
        let fwd = model.forward(&tape, &p, image, &s.camera)?;
        let l = model.loss(&tape, &fwd, mesh, heat, phase.objective())?;
        let n = model.config.n;
        let uv = MeshGrid2D::from_tensor(n, &tape.value(fwd.uv))?;
        let x = MeshGrid3D::from_tensor(n, &tape.value(fwd.mesh))?;
        let losses = [tape.value(l.total).item(), tape.value(l.shape).item(), tape.value(l.heatmap).item()];
        let e3 = aligned_vertex_error(x.vertices(), s.mesh3d.vertices())?;
        Ok([losses[0], losses[1], losses[2], uv.mean_distance(&s.mesh2d), e3])
    });
    let mut acc = [0.0; 5];
    for r in rows {
        let r = r?;
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let k = set.len().max(1) as f64;
    Ok(Evaluation {
        loss: acc[0] / k,
        align: acc[1] / k,
        heatmap: acc[2] / k,
        err2d_px: acc[3] / k,
        err3d_aligned: acc[4] / k,
    })
}

/// One row of the metrics log. Loss columns are means over the epoch's
/// training samples; error columns are measured on the validation split
/// after the epoch (on the training set when there is no validation split).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based, counted over all stages.
    pub epoch: usize,
    pub stage: Phase,
    pub loss: f64,
    pub loss_align: f64,
    pub loss_heatmap: f64,
    pub err2d_px: f64,
    pub err3d_aligned: f64,
    pub learning_rate: f64,
    /// Validation loss of the stage objective, used for early stopping.
    pub val_loss: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.stage as u8,
            self.loss,
            self.loss_align,
            self.loss_heatmap,
            self.err2d_px,
            self.err3d_aligned
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// `lr0 * decay^(epoch / interval)` for the 0-based global epoch.
pub fn learning_rate(config: &ModelConfig, epoch: usize) -> f64 {
    config.learning_rate * config.lr_decay.powi((epoch / config.decay_interval) as i32)
}

/// Seeded split of `0..len` into (train, validation) index lists.
pub fn validation_split(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a1));
    let mut k = (fraction * len as f64).round() as usize;
    if fraction > 0.0 && len >= 2 {
        k = k.clamp(1, len - 1);
    }
    let val = idx.split_off(len - k.min(len));
    (idx, val)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub exec: Exec,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, exec: Exec) -> Self {
        let adam = Adam::new(&model.params);
        Trainer { model, adam, exec, epoch: 0 }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch as u64,
        }
    }

    /// One pass over `train` in a seeded shuffled order. Returns the mean
    /// loss terms `(loss, align, heatmap)`.
    pub fn run_epoch(&mut self, train: &[Prepared], phase: Phase) -> Result<[f64; 3]> {
        let config = self.model.config.clone();
        let lr = learning_rate(&config, self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(self.epoch as u64)));
        let start = self.checkpoint();
        let diverged = |detail: String| Error::Diverged { epoch: start.epoch as usize + 1, detail, last_good: Box::new(start.clone()) };
        let mut acc = [0.0; 3];
        for batch in order.chunks(config.batch_size) {
            let model = &self.model;
            let steps = parallel::map(self.exec, batch, |&i| sample_step(model, &train[i], phase));
            let mut sum: Vec<Option<Tensor>> = vec![None; model.params.len()];
            for step in steps {
                // numerical failures inside the forward pass count as divergence
                let step = step.map_err(|e| diverged(e.to_string()))?;
                if !(step.loss.is_finite() && step.grads.iter().flatten().all(Tensor::all_finite)) {
                    return Err(diverged(format!("non-finite loss {}", step.loss)));
                }
                acc[0] += step.loss;
                acc[1] += step.align;
                acc[2] += step.heatmap;
                for (s, g) in sum.iter_mut().zip(step.grads) {
                    match (s.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *s = Some(g),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in sum.iter_mut().flatten() {
                g.scale_assign(inv);
            }
            self.adam.step(&mut self.model.params, &sum, lr, config.weight_decay);
        }
        let k = train.len().max(1) as f64;
        Ok(acc.map(|a| a / k))
    }

    /// Runs every phase with early stopping on the validation loss. At the
    /// end of each phase the parameters of its best epoch are restored.
    pub fn fit(
        &mut self,
        train: &[Prepared],
        val: &[Prepared],
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        if train.is_empty() {
            return Err(Error::Mismatch("empty training set".into()));
        }
        let monitor = if val.is_empty() { train } else { val };
        let mut rows = Vec::new();
        for phase in [Phase::Pretrain, Phase::Regressors, Phase::Joint] {
            let epochs = phase.epochs(&self.model.config);
            if epochs == 0 {
                continue;
            }
            let mut best: Option<(f64, Checkpoint)> = None;
            let mut since_best = 0;
            for _ in 0..epochs {
                let lr = learning_rate(&self.model.config, self.epoch);
                let [loss, align, heat] = self.run_epoch(train, phase)?;
                self.epoch += 1;
                let e = match evaluate(&self.model, monitor, phase, self.exec) {
                    Ok(e) if e.loss.is_finite() => e,
                    failed => {
                        let detail = match failed {
                            Ok(e) => format!("non-finite validation loss {}", e.loss),
                            Err(err) => err.to_string(),
                        };
                        let last_good = best.map(|b| b.1).unwrap_or_else(|| self.checkpoint());
                        return Err(Error::Diverged { epoch: self.epoch, detail, last_good: Box::new(last_good) });
                    }
                };
                let row = EpochMetrics {
                    epoch: self.epoch,
                    stage: phase,
                    loss,
                    loss_align: align,
                    loss_heatmap: heat,
                    err2d_px: e.err2d_px,
                    err3d_aligned: e.err3d_aligned,
                    learning_rate: lr,
                    val_loss: e.loss,
                };
                on_epoch(&row);
                rows.push(row);
                if best.as_ref().is_none_or(|b| e.loss < b.0) {
                    best = Some((e.loss, self.checkpoint()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= self.model.config.patience {
                        log::info!("stage {} stopped early after epoch {}", phase as u8, self.epoch);
                        break;
                    }
                }
            }
            if let Some((_, ck)) = best {
                self.model.params = ck.params;
                self.adam = ck.adam;
            }
        }
        Ok(rows)
    }
}

/// Trains a fresh model on `samples`, holding out the configured validation
/// fraction.
pub fn train(
    config: &ModelConfig,
    samples: &[Sample],
    exec: Exec,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    use crate::config::Configurable;
    config.validate()?;
    let model = Model::new(config);
    let (ti, vi) = validation_split(samples.len(), config.val_fraction, config.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let train_set = prepare(&model, &pick(&ti), exec)?;
    let val_set = prepare(&model, &pick(&vi), exec)?;
    let mut trainer = Trainer::new(model, exec);
    let metrics = trainer.fit(&train_set, &val_set, on_epoch)?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), metrics })
}
