//! Random scenes: a simulated hanging sheet, a framing camera pose, a light,
//! and the rendered sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datagen::cloth::{ClothState, Rigid, SimError, Wind, MATERIALS};
use crate::datagen::dataset::DataConfig;
use crate::datagen::occlude::add_occluders;
use crate::datagen::render::{blur_contours, render, Light};
use crate::datagen::sample::{Sample, SampleMeta};
use crate::datagen::texture::{make_texture, TextureKind};
use crate::error::{Error, Result};
use crate::geometry::{Camera, MeshGrid3D};

/// Fraction of the image size kept free around the projected mesh.
pub const FRAME_MARGIN: f64 = 0.05;

/// Which texture a sample uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureChoice {
    pub kind: TextureKind,
    pub id: u32,
    pub seed: u64,
}

pub fn camera_for(config: &DataConfig) -> Camera {
    Camera::centered(config.focal_scale * config.image_width as f64, config.image_width as u32, config.image_height as u32)
        .expect("validated config")
}

/// Simulates one random hanging sheet; positions are in the cloth frame.
pub fn simulate_shape(config: &DataConfig, rng: &mut ChaCha8Rng) -> std::result::Result<(MeshGrid3D, u8), SimError> {
    let n = config.n;
    let aspect: f64 = rng.random_range(0.5..2.0);
    let size: f64 = rng.random_range(0.8..1.2);
    let (width, height) = (size * aspect.sqrt(), size / aspect.sqrt());
    let material_id = rng.random_range(0..MATERIALS.len());
    let pins = random_pins(n, rng);
    let slack = rng.random_range(0.0..0.25);
    let wind = Wind::random(rng);
    let init = ClothState::hanging(n, width, height, MATERIALS[material_id], pins, slack, wind)?;
    let mut state = ClothState { view: Rigid::IDENTITY, ..init };
    state.run(config.sim_steps, config.sim_dt, rng.random())?;
    Ok((state.mesh(), material_id as u8))
}

/// Two to four pins, always holding both top corners; extras are drawn from
/// the rest of the top row and the upper halves of the sides.
fn random_pins(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = rng.random_range(2..=4);
    let mut pins = vec![0, n - 1];
    let mut pool: Vec<usize> = (1..n - 1).collect();
    for j in 1..=n / 2 {
        pool.push(j * n);
        pool.push(j * n + n - 1);
    }
    while pins.len() < count && !pool.is_empty() {
        pins.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    pins
}

/// True when every vertex is in front of the camera and projects inside the
/// image with the frame margin.
pub fn in_frame(mesh: &MeshGrid3D, camera: &Camera) -> bool {
    let mu = FRAME_MARGIN * camera.width as f64;
    let mv = FRAME_MARGIN * camera.height as f64;
    let (w, h) = (camera.width as f64 - 1.0, camera.height as f64 - 1.0);
    mesh.vertices().iter().all(|&p| {
        if p[2] <= 0.0 {
            return false;
        }
        let [u, v] = camera.project_point(p);
        u >= mu && u <= w - mu && v >= mv && v <= h - mv
    })
}

/// Rotates `mesh` about its centroid by a small random rotation and places
/// the centroid on the optical axis at the smallest distance keeping the
/// whole mesh in frame, times a random factor in `[1, 1.3]`.
pub fn frame_mesh(mesh: &MeshGrid3D, camera: &Camera, rng: &mut ChaCha8Rng) -> MeshGrid3D {
    let c = mesh.centroid();
    let yaw = Rigid::rotation([0.0, 1.0, 0.0], rng.random_range(-0.5..0.5));
    let pitch = Rigid::rotation([1.0, 0.0, 0.0], rng.random_range(-0.3..0.3));
    let roll = Rigid::rotation([0.0, 0.0, 1.0], rng.random_range(-0.15..0.15));
    let rot = roll.then(&pitch).then(&yaw);
    let centered = mesh.map(|p| rot.apply([p[0] - c[0], p[1] - c[1], p[2] - c[2]]));
    let at = |d: f64| centered.map(|p| [p[0], p[1], p[2] + d]);
    let mut lo = centered.vertices().iter().map(|p| -p[2]).fold(f64::NEG_INFINITY, f64::max) + 1e-3;
    let mut hi = lo.max(1.0);
    while !in_frame(&at(hi), camera) {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if in_frame(&at(mid), camera) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    at(hi * rng.random_range(1.0..1.3))
}

/// Light in front of the sheet. Intensity is scaled by the squared distance,
/// so the unshadowed diffuse term at the sheet center lies in `[0.6, 1]`.
pub fn random_light(mesh: &MeshGrid3D, rng: &mut ChaCha8Rng) -> Light {
    let c = mesh.centroid();
    let offset = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), -rng.random_range(0.8..2.0)];
    let d2: f64 = offset.iter().map(|x| x * x).sum();
    Light {
        position: [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]],
        intensity: rng.random_range(0.6..1.0) * d2,
        ambient: rng.random_range(0.15..0.35),
    }
}

/// Renders `mesh3d` with the look in `meta`, then applies the optional
/// contour blur and occluders.
pub fn render_sample(
    config: &DataConfig,
    mesh3d: MeshGrid3D,
    camera: Camera,
    meta: SampleMeta,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let texture = make_texture(meta.texture_kind, meta.texture_seed);
    let drawn = if meta.blurred { jitter_boundary(&mesh3d, &camera, config.boundary_jitter_px, rng) } else { mesh3d.clone() };
    let mut r = render(&drawn, &camera, &texture, &meta.light, meta.albedo);
    if meta.blurred {
        blur_contours(&mut r.image, &r.mask, config.blur_sigma, config.blur_band);
    }
    if meta.occluded {
        let bbox = r.bbox().ok_or_else(|| Error::Mismatch("surface not visible".into()))?;
        let count = rng.random_range(1..=config.occluder_max);
        add_occluders(&mut r.image, bbox, count, rng.random(), config.occluder_gray);
    }
    Ok(Sample::new(&r.image, mesh3d, camera, meta)?)
}

/// Moves each boundary vertex in the image plane by Gaussian noise of
/// `sigma_px` pixels at fixed depth.
fn jitter_boundary(mesh: &MeshGrid3D, camera: &Camera, sigma_px: f64, rng: &mut ChaCha8Rng) -> MeshGrid3D {
    let n = mesh.n();
    let noise = Normal::new(0.0, sigma_px.max(0.0)).expect("finite sigma");
    let verts = mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (j, k) = (i / n, i % n);
            if j == 0 || k == 0 || j == n - 1 || k == n - 1 {
                let [u, v] = camera.project_point(p);
                camera.lift_point([u + noise.sample(rng), v + noise.sample(rng)], p[2])
            } else {
                p
            }
        })
        .collect();
    MeshGrid3D::new(n, verts).expect("same grid")
}

/// A complete random sample from `seed`. Failed simulations are redrawn.
pub fn make_sample(config: &DataConfig, seed: u64, texture: TextureChoice, occluded: bool) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = camera_for(config);
    let mut tries = 0;
    let (shape, material_id) = loop {
        match simulate_shape(config, &mut rng) {
            Ok(s) => break s,
            Err(e) if tries >= 20 => return Err(e.into()),
            Err(_) => tries += 1,
        }
    };
    let mesh3d = frame_mesh(&shape, &camera, &mut rng);
    let meta = SampleMeta {
        texture_kind: texture.kind,
        texture_id: texture.id,
        texture_seed: texture.seed,
        material_id,
        occluded,
        blurred: config.blur_contours,
        seed,
        light: random_light(&mesh3d, &mut rng),
        albedo: rng.random_range(0.75..1.0),
    };
    render_sample(config, mesh3d, camera, meta, &mut rng)
}
