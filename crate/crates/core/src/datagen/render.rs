//! Software rasterizer for grid meshes: perspective-correct barycentrics,
//! z-buffer, smooth two-sided Lambertian shading under one point light.

use crate::datagen::texture::Texture;
use crate::geometry::{Camera, MeshGrid3D};

pub const BACKGROUND: f64 = 0.2;

/// Point light with inverse-square falloff plus an ambient term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub position: [f64; 3],
    /// Diffuse strength at unit distance.
    pub intensity: f64,
    pub ambient: f64,
}

/// Float RGB image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image { width, height, pixels: vec![[value; 3]; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixels[v * self.width + u]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().flatten().map(|&x| quantize(x)).collect()
    }
}

/// `round(255 x)` after clamping to `[0, 1]`.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rendered image plus which pixels show the surface.
#[derive(Debug, Clone)]
pub struct Render {
    pub image: Image,
    pub mask: Vec<bool>,
}

impl Render {
    /// Inclusive pixel bounding box `[u0, v0, u1, v1]` of the surface.
    pub fn bbox(&self) -> Option<[usize; 4]> {
        let w = self.image.width;
        let mut b: Option<[usize; 4]> = None;
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            let (u, v) = (i % w, i / w);
            b = Some(match b {
                None => [u, v, u, v],
                Some([a, c, d, e]) => [a.min(u), c.min(v), d.max(u), e.max(v)],
            });
        }
        b
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    if n > 0.0 {
        a.map(|x| x / n)
    } else {
        a
    }
}

/// The two triangles of every grid quad, as vertex indices.
pub fn grid_triangles(n: usize) -> Vec<[usize; 3]> {
    let mut t = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for k in 0..n - 1 {
            let i = j * n + k;
            t.push([i, i + 1, i + n]);
            t.push([i + 1, i + n + 1, i + n]);
        }
    }
    t
}

/// Area-weighted vertex normals.
pub fn vertex_normals(mesh: &MeshGrid3D) -> Vec<[f64; 3]> {
    let v = mesh.vertices();
    let mut normals = vec![[0.0; 3]; v.len()];
    for [a, b, c] in grid_triangles(mesh.n()) {
        let f = cross(sub(v[b], v[a]), sub(v[c], v[a]));
        for i in [a, b, c] {
            for k in 0..3 {
                normals[i][k] += f[k];
            }
        }
    }
    normals.into_iter().map(unit).collect()
}

pub fn render(mesh: &MeshGrid3D, camera: &Camera, texture: &Texture, light: &Light, albedo: f64) -> Render {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let n = mesh.n();
    let verts = mesh.vertices();
    let normals = vertex_normals(mesh);
    let tex: Vec<[f64; 2]> =
        (0..n * n).map(|i| [(i % n) as f64 / (n - 1) as f64, (i / n) as f64 / (n - 1) as f64]).collect();
    let screen: Vec<[f64; 2]> = verts.iter().map(|&p| camera.project_point(p)).collect();

    let mut image = Image::filled(w, h, BACKGROUND);
    let mut mask = vec![false; w * h];
    let mut zbuf = vec![f64::INFINITY; w * h];
    for tri in grid_triangles(n) {
        if tri.iter().any(|&i| verts[i][2] <= 0.0) {
            continue;
        }
        let [p0, p1, p2] = tri.map(|i| screen[i]);
        let area = edge(p0, p1, p2);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let lo_u = p0[0].min(p1[0]).min(p2[0]).ceil().max(0.0);
        let hi_u = p0[0].max(p1[0]).max(p2[0]).floor().min((w - 1) as f64);
        let lo_v = p0[1].min(p1[1]).min(p2[1]).ceil().max(0.0);
        let hi_v = p0[1].max(p1[1]).max(p2[1]).floor().min((h - 1) as f64);
        if lo_u > hi_u || lo_v > hi_v {
            continue;
        }
        for v in lo_v as usize..=hi_v as usize {
            for u in lo_u as usize..=hi_u as usize {
                let p = [u as f64, v as f64];
                let b = [edge(p1, p2, p) / area, edge(p2, p0, p) / area, edge(p0, p1, p) / area];
                if b.iter().any(|&x| x < -1e-12) {
                    continue;
                }
                // perspective-correct weights
                let q = [b[0] / verts[tri[0]][2], b[1] / verts[tri[1]][2], b[2] / verts[tri[2]][2]];
                let z = 1.0 / (q[0] + q[1] + q[2]);
                let idx = v * w + u;
                if z >= zbuf[idx] {
                    continue;
                }
                zbuf[idx] = z;
                mask[idx] = true;
                let lam = q.map(|x| x * z);
                let interp3 = |a: &[[f64; 3]]| {
                    let mut out = [0.0; 3];
                    for (k, &i) in tri.iter().enumerate() {
                        for c in 0..3 {
                            out[c] += lam[k] * a[i][c];
                        }
                    }
                    out
                };
                let point = interp3(verts);
                let mut normal = unit(interp3(&normals));
                if dot(normal, point) > 0.0 {
                    normal = normal.map(|x| -x);
                }
                let (mut s, mut t) = (0.0, 0.0);
                for (k, &i) in tri.iter().enumerate() {
                    s += lam[k] * tex[i][0];
                    t += lam[k] * tex[i][1];
                }
                let to_light = sub(light.position, point);
                let d2 = dot(to_light, to_light);
                let diffuse = light.intensity * dot(normal, unit(to_light)).max(0.0) / d2;
                let shade = light.ambient + diffuse;
                let c = texture.sample(s, t);
                image.pixels[idx] = c.map(|x| (albedo * x * shade).clamp(0.0, 1.0));
            }
        }
    }
    Render { image, mask }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Gaussian blur (standard deviation `sigma` pixels) applied only to pixels
/// within `band` pixels of the surface silhouette.
pub fn blur_contours(image: &mut Image, mask: &[bool], sigma: f64, band: usize) {
    let (w, h) = (image.width, image.height);
    let is_edge = |u: usize, v: usize| {
        let m = mask[v * w + u];
        [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(du, dv)| {
            let (x, y) = (u as i64 + du, v as i64 + dv);
            x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask[y as usize * w + x as usize] != m
        })
    };
    let edges: Vec<(usize, usize)> = (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).filter(|&(u, v)| is_edge(u, v)).collect();
    let mut in_band = vec![false; w * h];
    let b = band as i64;
    for &(u, v) in &edges {
        for dv in -b..=b {
            for du in -b..=b {
                let (x, y) = (u as i64 + du, v as i64 + dv);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    in_band[y as usize * w + x as usize] = true;
                }
            }
        }
    }
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let src = image.pixels.clone();
    for v in 0..h {
        for u in 0..w {
            if !in_band[v * w + u] {
                continue;
            }
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for dv in -r..=r {
                for du in -r..=r {
                    let (x, y) = (u as i64 + du, v as i64 + dv);
                    if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                        continue;
                    }
                    let k = kernel[(du + r) as usize] * kernel[(dv + r) as usize];
                    let p = src[y as usize * w + x as usize];
                    for c in 0..3 {
                        acc[c] += k * p[c];
                    }
                    wsum += k;
                }
            }
            image.pixels[v * w + u] = acc.map(|x| x / wsum);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::texture::{make_texture, TextureKind};

    fn flat(n: usize, half: f64, z: f64) -> MeshGrid3D {
        MeshGrid3D::new(
            n,
            (0..n * n)
                .map(|i| {
                    let (j, k) = (i / n, i % n);
                    [(2.0 * k as f64 / (n - 1) as f64 - 1.0) * half, (2.0 * j as f64 / (n - 1) as f64 - 1.0) * half, z]
                })
                .collect(),
        )
        .unwrap()
    }

    fn white() -> Texture {
        Texture { kind: TextureKind::Plain, size: 4, texels: vec![[1.0; 3]; 16] }
    }

    #[test]
    fn brightest_under_the_light_and_decreasing_outward() {
        let cam = Camera::centered(40.0, 41, 41).unwrap();
        let light = Light { position: [0.0, 0.0, 1.0], intensity: 0.8, ambient: 0.0 };
        let r = render(&flat(5, 2.0, 2.0), &cam, &white(), &light, 1.0);
        let row: Vec<f64> = (20..41).map(|u| r.image.get(u, 20)[0]).collect();
        let max = r.image.pixels.iter().map(|p| p[0]).fold(0.0, f64::max);
        assert_eq!(row[0], max);
        for w in row.windows(2) {
            assert!(w[1] <= w[0], "{row:?}");
        }
        assert!(row[20] < row[0]);
    }

    #[test]
    fn ambient_only_is_albedo_times_texture() {
        let cam = Camera::centered(30.0, 32, 32).unwrap();
        let tex = make_texture(TextureKind::Checker, 4);
        let light = Light { position: [0.0, 0.0, 0.0], intensity: 0.0, ambient: 0.7 };
        let mesh = flat(4, 0.5, 2.0);
        let r = render(&mesh, &cam, &tex, &light, 0.9);
        let mut covered = 0;
        for (i, &m) in r.mask.iter().enumerate() {
            let p = r.image.pixels[i];
            if m {
                covered += 1;
                let (u, v) = ((i % 32) as f64, (i / 32) as f64);
                // planar frontal mesh: texture coordinate is affine in the pixel
                let s = ((u - cam.uc) * 2.0 / cam.fu + 0.5) / 1.0;
                let t = (v - cam.vc) * 2.0 / cam.fv + 0.5;
                let c = tex.sample(s, t);
                for ch in 0..3 {
                    assert!((p[ch] - 0.9 * 0.7 * c[ch]).abs() < 1e-9);
                }
            } else {
                assert_eq!(p, [BACKGROUND; 3]);
            }
        }
        assert!(covered > 100);
    }

    #[test]
    fn z_buffer_keeps_the_near_layer() {
        // rows 0-1: near sheet at z = 2; row 2 folds back to z = 4 behind row 0
        let mesh = MeshGrid3D::new(
            3,
            vec![
                [-0.5, -0.5, 2.0],
                [0.0, -0.5, 2.0],
                [0.5, -0.5, 2.0],
                [-0.5, 0.5, 2.0],
                [0.0, 0.5, 2.0],
                [0.5, 0.5, 2.0],
                [-1.6, -1.0, 4.0],
                [0.0, -1.0, 4.0],
                [1.6, -1.0, 4.0],
            ],
        )
        .unwrap();
        // t < 0.5 red (near sheet), t > 0.5 blue (the folded part)
        let mut texels = Vec::new();
        for r in 0..8 {
            for _ in 0..8 {
                texels.push(if r < 4 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
            }
        }
        let tex = Texture { kind: TextureKind::Plain, size: 8, texels };
        let cam = Camera::centered(20.0, 41, 41).unwrap();
        let light = Light { position: [0.0; 3], intensity: 0.0, ambient: 1.0 };
        let r = render(&mesh, &cam, &tex, &light, 1.0);
        // center pixel of the near sheet's upper half is covered by both layers
        let near_only = r.image.get(20, 17);
        assert!(near_only[0] > 0.5 && near_only[2] < 0.5, "{near_only:?}");
        // the far layer shows beside the near sheet
        let far = r.image.get(13, 16);
        assert!(far[2] > 0.5, "{far:?}");
    }

    #[test]
    fn blur_only_touches_the_band() {
        let cam = Camera::centered(30.0, 32, 32).unwrap();
        let light = Light { position: [0.0, 0.0, 1.0], intensity: 0.5, ambient: 0.3 };
        let r = render(&flat(3, 0.4, 2.0), &cam, &make_texture(TextureKind::Stripes, 2), &light, 1.0);
        let mut img = r.image.clone();
        blur_contours(&mut img, &r.mask, 1.0, 1);
        assert_eq!(img.get(16, 16), r.image.get(16, 16));
        assert_eq!(img.get(0, 0), r.image.get(0, 0));
        assert_ne!(img, r.image);
    }
}
