//! Single-image inference: mesh text output and wireframe overlay.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use meshlift::checkpoint;
use meshlift::config::{parse_pairs, parse_value};
use meshlift::geometry::{Camera, MeshGrid2D, MeshGrid3D};
use meshlift::Tensor;

pub struct CameraArgs {
    pub file: Option<PathBuf>,
    pub focal: Option<f64>,
    pub principal: Option<(f64, f64)>,
}

/// Focal length over image width used when none is given; matches the
/// generator default.
pub const DEFAULT_FOCAL_SCALE: f64 = 1.2;

/// Intrinsics for an image of `width` x `height` as given on the command line.
fn camera_for(args: &CameraArgs, width: u32, height: u32) -> Result<Camera> {
    let centered = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (fu, fv, (uc, vc)) = match &args.file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading camera {}", path.display()))?;
            let (mut fu, mut fv, mut uc, mut vc) = (None, None, None, None);
            for (line, key, value) in parse_pairs(&text)? {
                let slot = match key.as_str() {
                    "fu" => &mut fu,
                    "fv" => &mut fv,
                    "uc" => &mut uc,
                    "vc" => &mut vc,
                    _ => bail!("{}: line {line}: unknown camera key {key:?}", path.display()),
                };
                *slot = Some(parse_value::<f64>(&key, &value)?);
            }
            let Some(fu) = fu else { bail!("{}: missing fu", path.display()) };
            (fu, fv.unwrap_or(fu), (uc.unwrap_or(centered.0), vc.unwrap_or(centered.1)))
        }
        None => {
            let f = args.focal.unwrap_or(DEFAULT_FOCAL_SCALE * width as f64);
            (f, f, args.principal.unwrap_or(centered))
        }
    };
    Ok(Camera::new(fu, fv, uc, vc, width, height)?)
}

/// Intrinsics after resampling the image to `width` x `height`; pixel
/// centers map as `u' = (u + 0.5) s - 0.5`.
pub fn rescale_camera(c: &Camera, width: u32, height: u32) -> Result<Camera> {
    let (su, sv) = (width as f64 / c.width as f64, height as f64 / c.height as f64);
    Ok(Camera::new(c.fu * su, c.fv * sv, (c.uc + 0.5) * su - 0.5, (c.vc + 0.5) * sv - 0.5, width, height)?)
}

pub fn image_tensor(img: &RgbImage) -> Tensor {
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[img.height() as usize, img.width() as usize, 3], data).expect("dims match buffer")
}

/// `#` header line then one `x y z` line per vertex, row-major.
pub fn mesh_text(mesh: &MeshGrid3D) -> String {
    let n = mesh.n();
    let mut s = format!("# N {n} vertices {} camera frame x y z\n", n * n);
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (u, v) = ((a[0] + t * (b[0] - a[0])).round(), (a[1] + t * (b[1] - a[1])).round());
        if u >= 0.0 && v >= 0.0 && (u as u32) < img.width() && (v as u32) < img.height() {
            img.put_pixel(u as u32, v as u32, color);
        }
    }
}

pub const EDGE_COLOR: Rgb<u8> = Rgb([40, 220, 60]);
pub const VERTEX_COLOR: Rgb<u8> = Rgb([230, 30, 30]);

/// Grid edges between neighboring vertices, vertices drawn on top at their
/// rounded pixel positions.
pub fn overlay(img: &RgbImage, uv: &MeshGrid2D) -> RgbImage {
    let mut out = img.clone();
    let n = uv.n();
    let p = uv.vertices();
    for j in 0..n {
        for k in 0..n {
            if k + 1 < n {
                draw_line(&mut out, p[j * n + k], p[j * n + k + 1], EDGE_COLOR);
            }
            if j + 1 < n {
                draw_line(&mut out, p[j * n + k], p[(j + 1) * n + k], EDGE_COLOR);
            }
        }
    }
    for q in p {
        draw_line(&mut out, *q, *q, VERTEX_COLOR);
    }
    out
}

pub fn cmd_infer(ckpt: &Path, image_path: &Path, camera: &CameraArgs, want_overlay: bool, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?.model()?;
    let img = image::open(image_path).with_context(|| format!("reading image {}", image_path.display()))?.to_rgb8();
    let camera = camera_for(camera, img.width(), img.height())?;
    let (w, h) = (model.config.image_width as u32, model.config.image_height as u32);
    let (img, camera) = if img.dimensions() == (w, h) {
        (img, camera)
    } else {
        (imageops::resize(&img, w, h, FilterType::Triangle), rescale_camera(&camera, w, h)?)
    };
    let pred = model.predict(&image_tensor(&img), &camera)?;
    let mesh_path = out.join("mesh.txt");
    fs::write(&mesh_path, mesh_text(&pred.mesh3d))?;
    println!("wrote {}", mesh_path.display());
    if want_overlay {
        let path = out.join("overlay.png");
        overlay(&img, &meshlift::geometry::project(&camera, &pred.mesh3d)?).save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescaling_keeps_the_centered_principal_point_centered() {
        let c = Camera::centered(120.0, 100, 80).unwrap();
        let r = rescale_camera(&c, 50, 40).unwrap();
        assert!((r.uc - 24.5).abs() < 1e-12 && (r.vc - 19.5).abs() < 1e-12);
        assert_eq!((r.fu, r.fv), (60.0, 60.0));
    }

    #[test]
    fn mesh_text_has_header_plus_one_line_per_vertex() {
        let m = MeshGrid3D::new(3, (0..9).map(|i| [i as f64, 0.5, 2.0]).collect()).unwrap();
        let t = mesh_text(&m);
        assert_eq!(t.lines().count(), 10);
        assert_eq!(t.lines().nth(2).unwrap(), "1 0.5 2");
    }

    #[test]
    fn overlay_marks_vertices() {
        let img = RgbImage::new(20, 20);
        let uv = MeshGrid2D::new(2, vec![[2.2, 3.0], [15.0, 3.4], [2.0, 16.0], [14.6, 15.5]]).unwrap();
        let o = overlay(&img, &uv);
        for q in uv.vertices() {
            assert_eq!(*o.get_pixel(q[0].round() as u32, q[1].round() as u32), VERTEX_COLOR);
        }
        assert_eq!(*o.get_pixel(8, 3), EDGE_COLOR);
    }
}
