//! Mass-spring cloth with structural, shear and bend springs, integrated with
//! semi-implicit Euler.
//!
//! Cloth frame: x to the right, y downwards (gravity is +y), z away from the
//! camera. Vertex `(row j, col k)` starts at `((k/(N-1) - 1/2) w, (j/(N-1) - 1/2) h, 0)`,
//! so row 0 is the top edge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::MeshGrid3D;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },
    #[error("step {step} moved a vertex by {ratio:.3} edge lengths; reduce dt")]
    Unstable { step: usize, ratio: f64 },
    #[error("invalid cloth: {0}")]
    Invalid(String),
}

/// Spring constants for structural, shear and bend springs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub stiffness: [f64; 3],
}

/// Four materials from stiff to limp.
pub const MATERIALS: [Material; 4] = [
    Material { stiffness: [800.0, 400.0, 80.0] },
    Material { stiffness: [400.0, 200.0, 40.0] },
    Material { stiffness: [200.0, 100.0, 10.0] },
    Material { stiffness: [100.0, 50.0, 2.0] },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpringKind {
    Structural = 0,
    Shear = 1,
    Bend = 2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest: f64,
    pub kind: SpringKind,
}

/// Force along `direction` of magnitude
/// `amplitude (sin(2π frequency t + phase + spatial (x + y)) + noise ξ)`, ξ ~ N(0, 1) per vertex and step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wind {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub spatial: f64,
    pub noise: f64,
    pub direction: [f64; 3],
}

impl Wind {
    pub const CALM: Wind =
        Wind { amplitude: 0.0, frequency: 0.0, phase: 0.0, spatial: 0.0, noise: 0.0, direction: [0.0, 0.0, 1.0] };

    pub fn random(rng: &mut impl Rng) -> Wind {
        let a = rng.random_range(-0.4..0.4f64);
        let dir = [a.sin(), 0.0, a.cos()];
        Wind {
            amplitude: rng.random_range(0.01..0.05),
            frequency: rng.random_range(0.3..1.5),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            spatial: rng.random_range(0.0..3.0),
            noise: rng.random_range(0.0..0.5),
            direction: dir,
        }
    }
}

/// Rotation then translation applied to the simulated positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    /// Rotation by `angle` about the unit `axis` (Rodrigues).
    pub fn rotation(axis: [f64; 3], angle: f64) -> Rigid {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = axis;
        let t = 1.0 - c;
        Rigid {
            rotation: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
            translation: [0.0; 3],
        }
    }

    pub fn then(&self, next: &Rigid) -> Rigid {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| next.rotation[i][k] * self.rotation[k][j]).sum();
            }
        }
        Rigid { rotation, translation: next.apply(self.translation) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClothState {
    pub n: usize,
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    /// Pinned vertex indices; at most four.
    pub pins: Vec<usize>,
    pub springs: Vec<Spring>,
    pub material: Material,
    pub wind: Wind,
    pub gravity: [f64; 3],
    /// Mass of each vertex.
    pub mass: f64,
    /// Velocity damping rate per second.
    pub damping: f64,
    /// Mean structural rest length.
    pub edge: f64,
    /// Applied to the positions returned by [`simulate_cloth`].
    pub view: Rigid,
}

pub const GRAVITY: f64 = 9.81;
pub const VERTEX_MASS: f64 = 0.01;
pub const DAMPING: f64 = 1.5;

impl ClothState {
    /// A `width x height` sheet at rest whose columns are bent onto a circular
    /// arc bulging towards +z, so that its horizontal span is `1 - 2 slack`
    /// times the width while edge lengths stay close to rest. `slack = 0`
    /// gives a flat sheet.
    pub fn hanging(
        n: usize,
        width: f64,
        height: f64,
        material: Material,
        pins: Vec<usize>,
        slack: f64,
        wind: Wind,
    ) -> Result<Self, SimError> {
        if n < 2 {
            return Err(SimError::Invalid(format!("grid side {n}")));
        }
        if pins.len() > 4 || pins.iter().any(|&p| p >= n * n) {
            return Err(SimError::Invalid(format!("pins {pins:?}")));
        }
        let rest_pos: Vec<[f64; 3]> = (0..n * n)
            .map(|i| {
                let (j, k) = (i / n, i % n);
                [(k as f64 / (n - 1) as f64 - 0.5) * width, (j as f64 / (n - 1) as f64 - 0.5) * height, 0.0]
            })
            .collect();
        let mut springs = Vec::new();
        let mut link = |a: usize, b: usize, kind: SpringKind| {
            let d = sub(rest_pos[a], rest_pos[b]);
            springs.push(Spring { i: a, j: b, rest: norm(d), kind });
        };
        for j in 0..n {
            for k in 0..n {
                let i = j * n + k;
                if k + 1 < n {
                    link(i, i + 1, SpringKind::Structural);
                }
                if j + 1 < n {
                    link(i, i + n, SpringKind::Structural);
                }
                if j + 1 < n && k + 1 < n {
                    link(i, i + n + 1, SpringKind::Shear);
                    link(i + 1, i + n, SpringKind::Shear);
                }
                if k + 2 < n {
                    link(i, i + 2, SpringKind::Bend);
                }
                if j + 2 < n {
                    link(i, i + 2 * n, SpringKind::Bend);
                }
            }
        }
        let structural: Vec<f64> = springs.iter().filter(|s| s.kind == SpringKind::Structural).map(|s| s.rest).collect();
        let edge = structural.iter().sum::<f64>() / structural.len() as f64;
        if !(0.0..0.5).contains(&slack) {
            return Err(SimError::Invalid(format!("slack {slack}")));
        }
        let positions = curl(&rest_pos, width, 1.0 - 2.0 * slack);
        Ok(ClothState {
            n,
            velocities: vec![[0.0; 3]; positions.len()],
            positions,
            pins,
            springs,
            material,
            wind,
            gravity: [0.0, GRAVITY, 0.0],
            mass: VERTEX_MASS,
            damping: DAMPING,
            edge,
            view: Rigid { translation: [0.0, 0.0, 3.0], ..Rigid::IDENTITY },
        })
    }

    /// Gravity plus spring forces.
    pub fn conservative_forces(&self) -> Vec<[f64; 3]> {
        let mut f: Vec<[f64; 3]> = vec![self.gravity.map(|g| self.mass * g); self.positions.len()];
        for s in &self.springs {
            let d = sub(self.positions[s.j], self.positions[s.i]);
            let len = norm(d);
            if len == 0.0 {
                continue;
            }
            let k = self.material.stiffness[s.kind as usize];
            let c = k * (len - s.rest) / len;
            for a in 0..3 {
                f[s.i][a] += c * d[a];
                f[s.j][a] -= c * d[a];
            }
        }
        f
    }

    fn forces(&self, t: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        let mut f = self.conservative_forces();
        let w = &self.wind;
        if w.amplitude != 0.0 {
            for (fi, p) in f.iter_mut().zip(&self.positions) {
                let xi: f64 = if w.noise != 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                let mag = w.amplitude
                    * ((std::f64::consts::TAU * w.frequency * t + w.phase + w.spatial * (p[0] + p[1])).sin() + w.noise * xi);
                for a in 0..3 {
                    fi[a] += mag * w.direction[a];
                }
            }
        }
        f
    }

    /// One step: velocities from forces, damping, then positions from the new
    /// velocities. Pinned vertices keep zero velocity. Returns the largest
    /// vertex displacement.
    pub fn step(&mut self, dt: f64, t: f64, rng: &mut ChaCha8Rng) -> f64 {
        let f = self.forces(t, rng);
        let keep = 1.0 - self.damping * dt;
        let mut max_disp = 0.0f64;
        for (i, ((x, v), fi)) in self.positions.iter_mut().zip(&mut self.velocities).zip(&f).enumerate() {
            if self.pins.contains(&i) {
                *v = [0.0; 3];
                continue;
            }
            for a in 0..3 {
                v[a] = (v[a] + dt * fi[a] / self.mass) * keep;
                x[a] += dt * v[a];
            }
            max_disp = max_disp.max(dt * norm(*v));
        }
        max_disp
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities.iter().map(|v| 0.5 * self.mass * dot(*v, *v)).sum()
    }

    /// Elastic plus gravitational potential energy.
    pub fn potential_energy(&self) -> f64 {
        let elastic: f64 = self
            .springs
            .iter()
            .map(|s| {
                let e = norm(sub(self.positions[s.j], self.positions[s.i])) - s.rest;
                0.5 * self.material.stiffness[s.kind as usize] * e * e
            })
            .sum();
        let grav: f64 = self.positions.iter().map(|p| -self.mass * dot(self.gravity, *p)).sum();
        elastic + grav
    }

    /// Mechanical energy as seen by the integrator: `KE + PE + dt/2 Σ v·F`.
    /// The correction term makes it an invariant of undamped semi-implicit
    /// Euler for linear forces (and nearly so otherwise), so with damping it
    /// decreases step by step, which the plain `KE + PE` does not at large
    /// `ω dt`.
    pub fn integrator_energy(&self, dt: f64) -> f64 {
        let f = self.conservative_forces();
        let work: f64 = self.velocities.iter().zip(&f).map(|(v, fi)| dot(*v, *fi)).sum();
        self.kinetic_energy() + self.potential_energy() + 0.5 * dt * work
    }

    /// Mean `|len / rest - 1|` over structural springs.
    pub fn edge_distortion(&self) -> f64 {
        let st: Vec<&Spring> = self.springs.iter().filter(|s| s.kind == SpringKind::Structural).collect();
        st.iter().map(|s| (norm(sub(self.positions[s.j], self.positions[s.i])) / s.rest - 1.0).abs()).sum::<f64>()
            / st.len() as f64
    }

    pub fn extent(&self) -> f64 {
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max)
    }

    /// Runs `steps` steps in place.
    pub fn run(&mut self, steps: usize, dt: f64, seed: u64) -> Result<(), SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.extent().max(self.edge);
        for step in 0..steps {
            let disp = self.step(dt, step as f64 * dt, &mut rng);
            if !disp.is_finite() || self.positions.iter().flatten().any(|v| v.abs() > 100.0 * size) {
                return Err(SimError::Diverged { step });
            }
            if disp > 0.05 * self.edge {
                return Err(SimError::Unstable { step, ratio: disp / self.edge });
            }
        }
        Ok(())
    }

    pub fn mesh(&self) -> MeshGrid3D {
        MeshGrid3D::new(self.n, self.positions.iter().map(|&p| self.view.apply(p)).collect()).expect("n * n vertices")
    }
}

/// Simulates `init` for `steps` steps of `dt` and returns the final vertices
/// mapped through `init.view`.
pub fn simulate_cloth(init: &ClothState, steps: usize, dt: f64, seed: u64) -> Result<MeshGrid3D, SimError> {
    let mut s = init.clone();
    s.run(steps, dt, seed)?;
    Ok(s.mesh())
}

/// Bends the sheet about the y axis onto an arc whose chord is `ratio` times
/// its length.
fn curl(rest: &[[f64; 3]], width: f64, ratio: f64) -> Vec<[f64; 3]> {
    if ratio >= 1.0 {
        return rest.to_vec();
    }
    // half angle φ of the arc solves sin(φ)/φ = ratio
    let (mut lo, mut hi) = (1e-9, std::f64::consts::PI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid.sin() / mid > ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let phi = 0.5 * (lo + hi);
    let r = 0.5 * width / phi;
    rest.iter()
        .map(|p| {
            let a = p[0] / r;
            [r * a.sin(), p[1], r * (a.cos() - phi.cos())]
        })
        .collect()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sheet(n: usize, material: Material, pins: Vec<usize>) -> ClothState {
        ClothState::hanging(n, 1.0, 1.0, material, pins, 0.0, Wind::CALM).unwrap()
    }

    #[test]
    fn spring_counts() {
        let s = sheet(5, MATERIALS[0], vec![]);
        let count = |k| s.springs.iter().filter(|x| x.kind == k).count();
        assert_eq!(count(SpringKind::Structural), 2 * 5 * 4);
        assert_eq!(count(SpringKind::Shear), 2 * 4 * 4);
        assert_eq!(count(SpringKind::Bend), 2 * 5 * 3);
        assert!((s.edge - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rest_state_without_forces_is_equilibrium() {
        let mut s = sheet(5, MATERIALS[2], vec![0, 4]);
        s.gravity = [0.0; 3];
        let before = s.positions.clone();
        s.run(500, 1e-3, 1).unwrap();
        assert_eq!(s.positions, before);
    }

    #[test]
    fn pins_hold_and_interior_sags() {
        let init = sheet(5, MATERIALS[1], vec![0, 4, 20, 24]);
        let mut s = init.clone();
        s.gravity = [0.0, 0.0, GRAVITY];
        s.run(800, 1e-3, 2).unwrap();
        for &p in &init.pins {
            assert_eq!(s.positions[p], init.positions[p]);
        }
        assert!(s.positions[12][2] > 0.01, "{}", s.positions[12][2]);
    }

    #[test]
    fn stiffest_material_is_quasi_isometric() {
        let mut s = ClothState::hanging(5, 1.0, 0.8, MATERIALS[0], vec![0, 4], 0.1, Wind::CALM).unwrap();
        s.wind = Wind { amplitude: 0.03, frequency: 1.0, phase: 0.3, spatial: 1.0, noise: 0.2, direction: [0.0, 0.0, 1.0] };
        s.run(1500, 1e-3, 3).unwrap();
        // frozen bound from this simulator
        assert!(s.edge_distortion() < 0.10, "{}", s.edge_distortion());
    }

    #[test]
    fn rigid_composition() {
        let a = Rigid::rotation([0.0, 0.0, 1.0], 0.3);
        let b = Rigid { translation: [1.0, 2.0, 3.0], ..Rigid::rotation([1.0, 0.0, 0.0], -0.7) };
        let p = [0.3, -0.2, 0.9];
        let c = a.then(&b);
        let (x, y) = (c.apply(p), b.apply(a.apply(p)));
        for i in 0..3 {
            assert!((x[i] - y[i]).abs() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn mechanical_energy_decays_without_wind(seed in 0u64..1000, m in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ClothState::hanging(5, 1.0, 1.0, MATERIALS[m], vec![0, 4], rng.random_range(0.0..0.2), Wind::CALM).unwrap();
            let mut prev = f64::INFINITY;
            for step in 0..400 {
                s.step(1e-3, step as f64 * 1e-3, &mut rng);
                let e = s.integrator_energy(1e-3);
                if step >= 10 {
                    prop_assert!(e <= prev + 1e-12, "step {}: {} > {}", step, e, prev);
                }
                prev = e;
            }
        }

        #[test]
        fn pinned_vertices_never_move(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pins = vec![0, 4, rng.random_range(1..4)];
            let mut s = ClothState::hanging(5, 1.0, 1.0, MATERIALS[3], pins.clone(), 0.2, Wind::random(&mut rng)).unwrap();
            let before: Vec<_> = pins.iter().map(|&p| s.positions[p]).collect();
            s.run(300, 1e-3, seed).unwrap();
            for (&p, b) in pins.iter().zip(&before) {
                prop_assert_eq!(s.positions[p], *b);
            }
        }
    }
}
