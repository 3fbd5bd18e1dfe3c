//! Full pipeline: features, iterated belief maps, soft-argmax, conditioned
//! depth regression and lifting, plus the training objective.

use crate::config::{Loss3d, ModelConfig};
use crate::depthnet::DepthRegressor;
use crate::detect2d::{gt_heatmap, BeliefMapStack, GridToImage, StageRegressor};
use crate::error::{Error, Result};
use crate::geometry::{Camera, MeshGrid2D, MeshGrid3D};
use crate::nn::{Bound, ConvLayer, Init, ParamStore, LEAKY_SLOPE};
use crate::ops::Conv2d;
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Small convolutional stack standing in for a pretrained backbone. Its output
/// is `[H, W, channels + 2]`: the learned channels followed by the feature-grid
/// column and row coordinates scaled to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<ConvLayer>,
    coords: Tensor,
    channels: usize,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, init: &mut Init, config: &ModelConfig) -> Self {
        let c = config.channels;
        let half = c.div_ceil(2);
        let down = Conv2d { stride: 2, padding: 1, dilation: 1 };
        let second = if config.downscale == 4 { down } else { Conv2d::same(3) };
        let layers = vec![
            ConvLayer::new(store, init, "psi.conv1", 3, 3, half, down),
            ConvLayer::new(store, init, "psi.conv2", 3, half, c, second),
            ConvLayer::new(store, init, "psi.conv3", 3, c, c, Conv2d::same(3)),
            ConvLayer::new(store, init, "psi.conv4", 3, c, c, Conv2d::same(3)),
        ];
        FeatureExtractor { layers, coords: coordinate_channels(config.grid_height(), config.grid_width()), channels: c }
    }

    /// Channels of the output, coordinates included.
    pub fn out_channels(&self) -> usize {
        self.channels + 2
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, image: Var) -> Result<Var> {
        let mut h = tape.add_scalar(image, -0.5)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
            h = layer.forward(tape, p, h)?;
        }
        let coords = tape.constant(self.coords.clone());
        Ok(tape.concat(&[h, coords], 2)?)
    }
}

pub(crate) fn coordinate_channels(h: usize, w: usize) -> Tensor {
    let mut coords = Vec::with_capacity(h * w * 2);
    for j in 0..h {
        for k in 0..w {
            coords.push(2.0 * k as f64 / (w - 1) as f64 - 1.0);
            coords.push(2.0 * j as f64 / (h - 1) as f64 - 1.0);
        }
    }
    Tensor::new(&[h, w, 2], coords).expect("shape")
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Var,
    /// Normalized belief maps of stages `1..=t_max`, each `[H, W, N_v]`.
    pub beliefs: Vec<Var>,
    /// Detected image locations `[N_v, 2]`.
    pub uv: Var,
    /// Depths `[N_v]`.
    pub depth: Var,
    /// Lifted vertices `[N_v, 3]`.
    pub mesh: Var,
}

/// Value-level result of [`Model::predict`].
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mesh3d: MeshGrid3D,
    pub mesh2d: MeshGrid2D,
    pub depths: Vec<f64>,
    pub beliefs: Vec<BeliefMapStack>,
}

/// Which terms the training objective includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Belief-map term only.
    Heatmap,
    /// 3D term plus `gamma` times the belief-map term.
    Full,
}

/// Scalar loss and its two terms (unweighted).
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub shape: Var,
    pub heatmap: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    psi: FeatureExtractor,
    stages: Vec<StageRegressor>,
    omega: DepthRegressor,
}

/// Parameter group a name belongs to: `psi`, `phi` or `omega`.
pub fn param_group(name: &str) -> &str {
    if name.starts_with("phi") {
        "phi"
    } else {
        name.split('.').next().unwrap_or(name)
    }
}

impl Model {
    /// Freshly initialized model; the seed comes from the config.
    pub fn new(config: &ModelConfig) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed);
        let psi = FeatureExtractor::new(&mut params, &mut init, config);
        let c = psi.out_channels();
        let stages = (1..=config.t_max)
            .map(|t| StageRegressor::new(&mut params, &mut init, t, c, config.stage_width, config.num_vertices()))
            .collect();
        let omega = DepthRegressor::new(&mut params, &mut init, c, config.depth_width, config.z_min);
        Model { config: config.clone(), params, psi, stages, omega }
    }

    /// Rebuilds the architecture of `config` and installs `params`, which must
    /// carry exactly the expected names and shapes.
    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config);
        if model.params.len() != params.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((n0, t0), (n1, t1)) in model.params.iter().zip(params.iter()) {
            if n0 != n1 || t0.shape() != t1.shape() {
                return Err(Error::Mismatch(format!("parameter {n1} {:?}, expected {n0} {:?}", t1.shape(), t0.shape())));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn grid_map(&self) -> GridToImage {
        let c = &self.config;
        GridToImage::new(c.image_width, c.image_height, c.grid_width(), c.grid_height())
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.image_height, c.image_width, 3] {
            return Err(Error::Mismatch(format!(
                "image {:?} does not match configured {}x{}x3",
                image.shape(),
                c.image_height,
                c.image_width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, image: Var, camera: &Camera) -> Result<Forward> {
        self.check_image(&tape.value(image))?;
        let features = self.psi.forward(tape, p, image)?;
        let mut beliefs: Vec<Var> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let b = stage.run(tape, p, features, beliefs.last().copied())?;
            beliefs.push(b);
        }
        let last = *beliefs.last().expect("t_max >= 1");
        let uv = tape.soft_argmax(last, self.grid_map())?;
        let v = tape.condition(last, features)?;
        let depth = self.omega.predict(tape, p, v)?;
        let mesh = tape.lift(camera, uv, depth)?;
        Ok(Forward { features, beliefs, uv, depth, mesh })
    }

    pub fn loss(&self, tape: &Tape, fwd: &Forward, mesh_star: Var, heatmap_star: Var, objective: Objective) -> Result<LossVars> {
        let mut heatmap: Option<Var> = None;
        for &b in &fwd.beliefs {
            let d = tape.squared_distance(b, heatmap_star)?;
            heatmap = Some(match heatmap {
                Some(h) => tape.add(h, d)?,
                None => d,
            });
        }
        let heatmap = heatmap.expect("t_max >= 1");
        let shape = match self.config.loss3d {
            Loss3d::Align => tape.err_align(fwd.mesh, mesh_star)?,
            Loss3d::L2 => tape.squared_distance(fwd.mesh, mesh_star)?,
        };
        let total = match objective {
            Objective::Heatmap => heatmap,
            Objective::Full => {
                let w = tape.scale(heatmap, self.config.gamma)?;
                tape.add(shape, w)?
            }
        };
        Ok(LossVars { total, shape, heatmap })
    }

    /// Target belief maps for ground-truth image locations.
    pub fn target_heatmap(&self, uv: &MeshGrid2D) -> Result<Tensor> {
        let c = &self.config;
        let b = gt_heatmap(uv, c.grid_height(), c.grid_width(), c.sigma_heatmap, self.grid_map())?;
        Ok(b.maps().clone())
    }

    pub fn predict(&self, image: &Tensor, camera: &Camera) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, |_| false);
        let img = tape.constant(image.clone());
        let fwd = self.forward(&tape, &p, img, camera)?;
        let n = self.config.n;
        let mesh3d = MeshGrid3D::from_tensor(n, &tape.value(fwd.mesh))?;
        let mesh2d = MeshGrid2D::from_tensor(n, &tape.value(fwd.uv))?;
        let depths = tape.value(fwd.depth).data().to_vec();
        let beliefs = fwd
            .beliefs
            .iter()
            .enumerate()
            .map(|(t, &b)| BeliefMapStack::new(t + 1, tape.value(b).clone()))
            .collect::<std::result::Result<Vec<_>, TensorError>>()?;
        Ok(Prediction { mesh3d, mesh2d, depths, beliefs })
    }
}

/// Everything needed to resume or deploy a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: u64,
}

impl Checkpoint {
    pub fn fresh(model: &Model) -> Self {
        Checkpoint { config: model.config.clone(), params: model.params.clone(), adam: Adam::new(&model.params), epoch: 0 }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.config, self.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::gradcheck::{grad_check_inputs, random_tensor, GradCheckOptions};

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            n: 3,
            image_width: 16,
            image_height: 16,
            downscale: 4,
            channels: 4,
            stage_width: 4,
            depth_width: 4,
            seed: 5,
            ..Default::default()
        }
    }

    fn camera() -> Camera {
        Camera::centered(20.0, 16, 16).unwrap()
    }

    fn toy_target(model: &Model) -> (MeshGrid3D, MeshGrid2D, Tensor) {
        let mesh = MeshGrid3D::new(
            3,
            (0..9).map(|i| [(i % 3) as f64 * 0.3 - 0.3, (i / 3) as f64 * 0.3 - 0.3, 2.0 + 0.05 * (i % 2) as f64]).collect(),
        )
        .unwrap();
        let uv = project(&camera(), &mesh).unwrap();
        let heat = model.target_heatmap(&uv).unwrap();
        (mesh, uv, heat)
    }

    #[test]
    fn forward_contract() {
        let model = Model::new(&toy_config());
        let image = random_tensor(&[16, 16, 3], 0.0, 1.0, 1);
        let pred = model.predict(&image, &camera()).unwrap();
        assert_eq!(pred.mesh3d.num_vertices(), 9);
        assert_eq!(pred.beliefs.len(), 3);
        assert!(pred.depths.iter().all(|&z| z > model.config.z_min));
        let reproj = project(&camera(), &pred.mesh3d).unwrap();
        for (a, b) in reproj.vertices().iter().zip(pred.mesh2d.vertices()) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
        assert!(model.predict(&Tensor::zeros(&[8, 16, 3]), &camera()).is_err());
    }

    #[test]
    fn groups_by_name() {
        let model = Model::new(&toy_config());
        let groups: std::collections::BTreeSet<_> = model.params.iter().map(|(n, _)| param_group(n).to_string()).collect();
        assert_eq!(groups.into_iter().collect::<Vec<_>>(), ["omega", "phi", "psi"]);
    }

    #[test]
    fn loss_is_zero_at_the_target_and_linear_in_gamma() {
        let model = Model::new(&toy_config());
        let (mesh, _, heat) = toy_target(&model);
        let tape = Tape::new();
        let x = tape.constant(mesh.to_tensor());
        let b = tape.constant(heat.clone());
        let fwd = Forward { features: x, beliefs: vec![b, b, b], uv: x, depth: x, mesh: x };
        let l = model.loss(&tape, &fwd, x, b, Objective::Full).unwrap();
        assert!(tape.value(l.total).item().abs() < 1e-12);

        let image = random_tensor(&[16, 16, 3], 0.0, 1.0, 2);
        let eval = |gamma: f64| {
            let mut m = model.clone();
            m.config.gamma = gamma;
            let tape = Tape::new();
            let p = m.params.bind(&tape, |_| false);
            let img = tape.constant(image.clone());
            let fwd = m.forward(&tape, &p, img, &camera()).unwrap();
            let (xs, bs) = (tape.constant(mesh.to_tensor()), tape.constant(heat.clone()));
            let l = m.loss(&tape, &fwd, xs, bs, Objective::Full).unwrap();
            let v = |x: Var| tape.value(x).item();
            (v(l.total), v(l.shape), v(l.heatmap))
        };
        let (t0, s0, _) = eval(0.0);
        assert_eq!(t0, s0);
        let (t1, _, h1) = eval(0.3);
        let (t2, _, _) = eval(0.6);
        assert!((t2 - t1 - 0.3 * h1).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradient_on_toy_model() {
        let model = Model::new(&toy_config());
        let (mesh, _, heat) = toy_target(&model);
        let image = random_tensor(&[16, 16, 3], 0.0, 1.0, 3);
        let ids: Vec<_> = model.params.ids().collect();
        let mut inputs: Vec<Tensor> = ids.iter().map(|&id| model.params.get(id).clone()).collect();
        inputs.push(image);
        let mut m = model.clone();
        m.config.gamma = 0.5;
        let err = grad_check_inputs(
            |tape, v| {
                let (params, image) = v.split_at(v.len() - 1);
                let p = crate::nn::Bound::from_vars(params.to_vec());
                let err = |e: Error| TensorError::invalid("model", e.to_string());
                let fwd = m.forward(tape, &p, image[0], &camera()).map_err(err)?;
                let xs = tape.constant(mesh.to_tensor());
                let bs = tape.constant(heat.clone());
                Ok(m.loss(tape, &fwd, xs, bs, Objective::Full).map_err(err)?.total)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
