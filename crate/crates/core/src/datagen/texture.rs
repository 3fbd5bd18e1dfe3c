//! Procedural textures sampled in `[0, 1]^2` texture space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TEXTURE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    Stripes,
    NoiseRich,
    Plain,
}

impl TextureKind {
    pub const PATTERNED: [TextureKind; 3] = [TextureKind::Checker, TextureKind::Stripes, TextureKind::NoiseRich];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Checker => "checker",
            TextureKind::Stripes => "stripes",
            TextureKind::NoiseRich => "noise-rich",
            TextureKind::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    pub size: usize,
    /// Row-major RGB texels in `[0, 1]`; row 0 is `t = 0`.
    pub texels: Vec<[f64; 3]>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)]
}

/// Two colors whose channels differ by at least 0.3 somewhere.
fn contrasting_pair(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let (a, b) = (random_color(rng), random_color(rng));
        if (0..3).any(|i| (a[i] - b[i]).abs() > 0.3) {
            return (a, b);
        }
    }
}

pub fn make_texture(kind: TextureKind, seed: u64) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TEXTURE_SIZE;
    let mut texels = Vec::with_capacity(n * n);
    match kind {
        TextureKind::Plain => {
            let c = random_color(&mut rng);
            texels.resize(n * n, c);
        }
        TextureKind::Checker => {
            let (a, b) = contrasting_pair(&mut rng);
            let period = rng.random_range(4..=16usize);
            let (pu, pv) = (rng.random_range(0..period), rng.random_range(0..period));
            for r in 0..n {
                for c in 0..n {
                    let parity = ((c + pu) / period + (r + pv) / period) % 2;
                    texels.push(if parity == 0 { a } else { b });
                }
            }
        }
        TextureKind::Stripes => {
            let (a, b) = contrasting_pair(&mut rng);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(6.0..20.0);
            let phase = rng.random_range(0.0..1.0);
            let (s, co) = angle.sin_cos();
            for r in 0..n {
                for c in 0..n {
                    let x = (c as f64 * co + r as f64 * s) / period + phase;
                    texels.push(if x.rem_euclid(1.0) < 0.5 { a } else { b });
                }
            }
        }
        TextureKind::NoiseRich => {
            // sum of random plane waves per channel plus colored blobs
            let waves: Vec<([f64; 2], f64, [f64; 3])> = (0..12)
                .map(|_| {
                    let freq = rng.random_range(1.0..9.0) * std::f64::consts::TAU / n as f64;
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    ([freq * angle.cos(), freq * angle.sin()], rng.random_range(0.0..std::f64::consts::TAU), amp)
                })
                .collect();
            for r in 0..n {
                for c in 0..n {
                    let mut v = [0.0; 3];
                    for (k, ph, amp) in &waves {
                        let s = (k[0] * c as f64 + k[1] * r as f64 + ph).sin();
                        for ch in 0..3 {
                            v[ch] += amp[ch] * s;
                        }
                    }
                    texels.push(v.map(|x| (0.5 + 0.25 * x).clamp(0.0, 1.0)));
                }
            }
        }
    }
    Texture { kind, size: n, texels }
}

impl Texture {
    /// Bilinear lookup with wrap-around; `(s, t)` in `[0, 1]`.
    pub fn sample(&self, s: f64, t: f64) -> [f64; 3] {
        let n = self.size;
        let x = s * (n - 1) as f64;
        let y = t * (n - 1) as f64;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let idx = |xi: f64, yi: f64| {
            let xi = (xi as isize).rem_euclid(n as isize) as usize;
            let yi = (yi as isize).rem_euclid(n as isize) as usize;
            self.texels[yi * n + xi]
        };
        let (a, b, c, d) = (idx(x0, y0), idx(x0 + 1.0, y0), idx(x0, y0 + 1.0), idx(x0 + 1.0, y0 + 1.0));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] * (1.0 - fx) + b[ch] * fx;
            let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
            out[ch] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Per-channel standard deviation over texels.
    pub fn channel_std(&self) -> [f64; 3] {
        let n = self.texels.len() as f64;
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            // shifted by the first texel so a constant channel gives exactly 0
            let k = self.texels[0][ch];
            let mean = self.texels.iter().map(|t| t[ch] - k).sum::<f64>() / n;
            *o = (self.texels.iter().map(|t| (t[ch] - k - mean).powi(2)).sum::<f64>() / n).sqrt();
        }
        out
    }
}
