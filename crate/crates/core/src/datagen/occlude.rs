//! Gray rectangular occluders over the surface bounding box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::render::Image;

pub const MIN_FRACTION: f64 = 0.05;
pub const MAX_FRACTION: f64 = 0.40;
const MAX_TRIES: usize = 1000;

/// Paints `count` gray rectangles whose union covers between 5% and 40% of
/// the inclusive box `bbox = [u0, v0, u1, v1]`. Rectangle layouts outside the
/// bound are redrawn. Returns the covered fraction of the box (0 when
/// `count == 0`).
pub fn add_occluders(image: &mut Image, bbox: [usize; 4], count: usize, seed: u64, gray: f64) -> f64 {
    if count == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [u0, v0, u1, v1] = bbox;
    let (bw, bh) = (u1 - u0 + 1, v1 - v0 + 1);
    let area = (bw * bh) as f64;
    let mut rects = Vec::with_capacity(count);
    for _ in 0..MAX_TRIES {
        rects.clear();
        for _ in 0..count {
            let w = ((bw as f64 * rng.random_range(0.1..0.45)).round() as usize).max(1);
            let h = ((bh as f64 * rng.random_range(0.1..0.45)).round() as usize).max(1);
            let u = u0 + rng.random_range(0..=bw - w.min(bw));
            let v = v0 + rng.random_range(0..=bh - h.min(bh));
            rects.push([u, v, (u + w - 1).min(u1), (v + h - 1).min(v1)]);
        }
        let covered = coverage(&rects, bbox);
        let frac = covered as f64 / area;
        if (MIN_FRACTION..=MAX_FRACTION).contains(&frac) {
            paint(image, &rects, gray);
            return frac;
        }
    }
    // one centered block of about 20% of the box
    let (w, h) = (((bw as f64) * 0.45) as usize, ((bh as f64) * 0.45) as usize);
    let (w, h) = (w.max(1), h.max(1));
    let (u, v) = (u0 + (bw - w) / 2, v0 + (bh - h) / 2);
    let r = [u, v, u + w - 1, v + h - 1];
    paint(image, &[r], gray);
    coverage(&[r], bbox) as f64 / area
}

fn coverage(rects: &[[usize; 4]], bbox: [usize; 4]) -> usize {
    let [u0, v0, u1, v1] = bbox;
    let mut n = 0;
    for v in v0..=v1 {
        for u in u0..=u1 {
            if rects.iter().any(|r| (r[0]..=r[2]).contains(&u) && (r[1]..=r[3]).contains(&v)) {
                n += 1;
            }
        }
    }
    n
}

fn paint(image: &mut Image, rects: &[[usize; 4]], gray: f64) {
    for r in rects {
        for v in r[1]..=r[3].min(image.height - 1) {
            for u in r[0]..=r[2].min(image.width - 1) {
                image.pixels[v * image.width + u] = [gray; 3];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, 0.0);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = [(i % 7) as f64 / 7.0, (i % 5) as f64 / 5.0, 0.9];
        }
        img
    }

    #[test]
    fn zero_count_is_identity() {
        let mut img = noisy(32, 32);
        let before = img.clone();
        assert_eq!(add_occluders(&mut img, [4, 4, 27, 27], 0, 1, 0.5), 0.0);
        assert_eq!(img, before);
    }

    #[test]
    fn fraction_bound_over_many_seeds() {
        let before = noisy(64, 64);
        let bbox = [10, 6, 50, 58];
        let area = (41 * 53) as f64;
        for seed in 0..1000 {
            let mut img = before.clone();
            let count = 1 + (seed as usize % 4);
            let frac = add_occluders(&mut img, bbox, count, seed, 0.5);
            assert!((MIN_FRACTION..=MAX_FRACTION).contains(&frac), "seed {seed}: {frac}");
            let gray = (0..64 * 64)
                .filter(|&i| {
                    let (u, v) = (i % 64, i / 64);
                    img.pixels[i] != before.pixels[i]
                        && (bbox[0]..=bbox[2]).contains(&u)
                        && (bbox[1]..=bbox[3]).contains(&v)
                })
                .count();
            // every changed pixel is exactly gray and inside the box
            assert!(img.pixels.iter().zip(&before.pixels).all(|(a, b)| a == b || *a == [0.5; 3]));
            assert!((gray as f64 / area) <= frac + 1e-12);
        }
    }

    #[test]
    fn tiny_box_still_bounded() {
        let mut img = noisy(8, 8);
        let frac = add_occluders(&mut img, [2, 2, 4, 4], 3, 9, 0.5);
        assert!((MIN_FRACTION..=MAX_FRACTION).contains(&frac), "{frac}");
    }
}
