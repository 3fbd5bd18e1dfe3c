//! Flips, rigid re-renders and color jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::cloth::Rigid;
use crate::datagen::dataset::DataConfig;
use crate::datagen::render::quantize;
use crate::datagen::sample::Sample;
use crate::datagen::scene::{in_frame, render_sample};
use crate::error::Result;
use crate::geometry::{project, Camera, MeshGrid3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    /// Mirror columns: `x -> -x`, grid column `k -> N-1-k`.
    Horizontal,
    /// Mirror rows: `y -> -y`, grid row `j -> N-1-j`.
    Vertical,
}

/// Mirrors image, geometry, principal point and light together. The 2D
/// ground truth is re-projected, so applying the same flip twice returns the
/// original bits whenever the principal point sits at the image center.
pub fn flip(sample: &Sample, axis: Flip) -> Result<Sample> {
    let (w, h) = (sample.width, sample.height);
    let n = sample.mesh3d.n();
    let mut image = vec![0u8; sample.image.len()];
    for v in 0..h {
        for u in 0..w {
            let (su, sv) = match axis {
                Flip::Horizontal => (w - 1 - u, v),
                Flip::Vertical => (u, h - 1 - v),
            };
            let (dst, src) = (3 * (v * w + u), 3 * (sv * w + su));
            image[dst..dst + 3].copy_from_slice(&sample.image[src..src + 3]);
        }
    }
    let old = sample.mesh3d.vertices();
    let mirror = |p: [f64; 3]| match axis {
        Flip::Horizontal => [-p[0], p[1], p[2]],
        Flip::Vertical => [p[0], -p[1], p[2]],
    };
    let verts = (0..n * n)
        .map(|i| {
            let (j, k) = (i / n, i % n);
            let src = match axis {
                Flip::Horizontal => j * n + (n - 1 - k),
                Flip::Vertical => (n - 1 - j) * n + k,
            };
            mirror(old[src])
        })
        .collect();
    let c = sample.camera;
    let camera = match axis {
        Flip::Horizontal => Camera { uc: (c.width as f64 - 1.0) - c.uc, ..c },
        Flip::Vertical => Camera { vc: (c.height as f64 - 1.0) - c.vc, ..c },
    };
    let mesh3d = MeshGrid3D::new(n, verts)?;
    let mut meta = sample.meta.clone();
    meta.light.position = mirror(meta.light.position);
    Ok(Sample { width: w, height: h, image, mesh2d: project(&camera, &mesh3d)?, mesh3d, camera, meta })
}

/// Random hue rotation, saturation and contrast scaling and brightness shift,
/// done in YIQ space. Geometry is untouched.
pub fn color_jitter(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue: f64 = rng.random_range(-0.3..0.3);
    let sat: f64 = rng.random_range(0.7..1.3);
    let contrast: f64 = rng.random_range(0.8..1.2);
    let bright: f64 = rng.random_range(-0.08..0.08);
    let pixels: Vec<[f64; 3]> = sample.image.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(|b| b as f64 / 255.0)).collect();
    let yiq: Vec<[f64; 3]> = pixels
        .iter()
        .map(|&[r, g, b]| {
            [0.299 * r + 0.587 * g + 0.114 * b, 0.596 * r - 0.274 * g - 0.322 * b, 0.211 * r - 0.523 * g + 0.312 * b]
        })
        .collect();
    let mean_y = yiq.iter().map(|p| p[0]).sum::<f64>() / yiq.len() as f64;
    let (s, c) = hue.sin_cos();
    let mut image = Vec::with_capacity(sample.image.len());
    for [y, i, q] in yiq {
        let y = mean_y + contrast * (y - mean_y) + bright;
        let (i, q) = (sat * (c * i - s * q), sat * (s * i + c * q));
        let rgb = [y + 0.956 * i + 0.621 * q, y - 0.272 * i - 0.647 * q, y - 1.106 * i + 1.703 * q];
        image.extend(rgb.map(quantize));
    }
    Sample { image, ..sample.clone() }
}

/// Moves the surface by a random rigid transform about its centroid and
/// renders it again. Poses leaving the frame (or crossing `z = 0`) are
/// redrawn; after 50 rejections the original pose is kept.
pub fn rigid_variant(config: &DataConfig, sample: &Sample, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = sample.mesh3d.centroid();
    let mut mesh = sample.mesh3d.clone();
    for _ in 0..50 {
        let yaw = Rigid::rotation([0.0, 1.0, 0.0], rng.random_range(-0.4..0.4));
        let pitch = Rigid::rotation([1.0, 0.0, 0.0], rng.random_range(-0.25..0.25));
        let roll = Rigid::rotation([0.0, 0.0, 1.0], rng.random_range(-0.2..0.2));
        let rot = roll.then(&pitch).then(&yaw);
        let shift = [rng.random_range(-0.1..0.1) * c[2], rng.random_range(-0.1..0.1) * c[2], rng.random_range(-0.1..0.15) * c[2]];
        let candidate =
            sample.mesh3d.map(|p| rot.apply([p[0] - c[0], p[1] - c[1], p[2] - c[2]])).map(|p| {
                [p[0] + c[0] + shift[0], p[1] + c[1] + shift[1], p[2] + c[2] + shift[2]]
            });
        if in_frame(&candidate, &sample.camera) {
            mesh = candidate;
            break;
        }
    }
    render_sample(config, mesh, sample.camera, sample.meta.clone(), &mut rng)
}

/// The three flips, three rigid re-renders and one color-jittered copy.
pub fn augment(config: &DataConfig, sample: &Sample, seed: u64) -> Result<Vec<Sample>> {
    let h = flip(sample, Flip::Horizontal)?;
    let hv = flip(&h, Flip::Vertical)?;
    let v = flip(sample, Flip::Vertical)?;
    let mut out = vec![h, v, hv];
    for k in 0..3 {
        out.push(rigid_variant(config, sample, seed.wrapping_add(k))?);
    }
    out.push(color_jitter(sample, seed.wrapping_add(3)));
    Ok(out)
}
