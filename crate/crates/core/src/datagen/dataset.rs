//! Generator settings, split layout and dataset files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{apply, parse_value, to_text, ConfigError, Configurable};
use crate::datagen::augment::augment;
use crate::datagen::format::{read_split, write_atomic, write_split};
use crate::datagen::sample::{Sample, PLAIN_TEXTURE_ID};
use crate::datagen::scene::{camera_for, make_sample, TextureChoice};
use crate::datagen::texture::TextureKind;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::parallel::{self, Exec};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub seed: u64,
    pub train_count: usize,
    /// Samples in each test split.
    pub test_count: usize,
    /// Size of the known (training) texture pool; the new-texture pool has
    /// the same size and disjoint ids.
    pub texture_pool: usize,
    pub train_occluded_fraction: f64,
    pub occluder_gray: f64,
    pub occluder_max: usize,
    pub sim_steps: usize,
    pub sim_dt: f64,
    /// Focal length over image width.
    pub focal_scale: f64,
    /// Augmented copies following each base training sample.
    pub augment_variants: usize,
    pub blur_contours: bool,
    pub blur_sigma: f64,
    pub blur_band: usize,
    pub boundary_jitter_px: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 5,
            image_width: 64,
            image_height: 64,
            seed: 0,
            train_count: 2000,
            test_count: 200,
            texture_pool: 30,
            train_occluded_fraction: 0.0,
            occluder_gray: 0.5,
            occluder_max: 4,
            sim_steps: 800,
            sim_dt: 1e-3,
            focal_scale: 1.2,
            augment_variants: 0,
            blur_contours: false,
            blur_sigma: 1.0,
            blur_band: 2,
            boundary_jitter_px: 1.0,
        }
    }
}

impl DataConfig {
    /// Full-size variant: 224x224 images of a 9x9 grid.
    pub fn paper_scale() -> Self {
        DataConfig { n: 9, image_width: 224, image_height: 224, train_count: 128_000, test_count: 553, ..Self::default() }
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut c = DataConfig::default();
        apply(text, &mut [&mut c])?;
        Ok(c)
    }

    pub fn camera(&self) -> Camera {
        camera_for(self)
    }
}

impl Configurable for DataConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, ConfigError> {
        match key {
            "n" => self.n = parse_value(key, v)?,
            "image_width" => self.image_width = parse_value(key, v)?,
            "image_height" => self.image_height = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "train_count" => self.train_count = parse_value(key, v)?,
            "test_count" => self.test_count = parse_value(key, v)?,
            "texture_pool" => self.texture_pool = parse_value(key, v)?,
            "train_occluded_fraction" => self.train_occluded_fraction = parse_value(key, v)?,
            "occluder_gray" => self.occluder_gray = parse_value(key, v)?,
            "occluder_max" => self.occluder_max = parse_value(key, v)?,
            "sim_steps" => self.sim_steps = parse_value(key, v)?,
            "sim_dt" => self.sim_dt = parse_value(key, v)?,
            "focal_scale" => self.focal_scale = parse_value(key, v)?,
            "augment_variants" => self.augment_variants = parse_value(key, v)?,
            "blur_contours" => self.blur_contours = parse_value(key, v)?,
            "blur_sigma" => self.blur_sigma = parse_value(key, v)?,
            "blur_band" => self.blur_band = parse_value(key, v)?,
            "boundary_jitter_px" => self.boundary_jitter_px = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("image_width", self.image_width.to_string()),
            ("image_height", self.image_height.to_string()),
            ("seed", self.seed.to_string()),
            ("train_count", self.train_count.to_string()),
            ("test_count", self.test_count.to_string()),
            ("texture_pool", self.texture_pool.to_string()),
            ("train_occluded_fraction", format!("{:e}", self.train_occluded_fraction)),
            ("occluder_gray", format!("{:e}", self.occluder_gray)),
            ("occluder_max", self.occluder_max.to_string()),
            ("sim_steps", self.sim_steps.to_string()),
            ("sim_dt", format!("{:e}", self.sim_dt)),
            ("focal_scale", format!("{:e}", self.focal_scale)),
            ("augment_variants", self.augment_variants.to_string()),
            ("blur_contours", self.blur_contours.to_string()),
            ("blur_sigma", format!("{:e}", self.blur_sigma)),
            ("blur_band", self.blur_band.to_string()),
            ("boundary_jitter_px", format!("{:e}", self.boundary_jitter_px)),
        ]
    }

    fn validate(&self) -> std::result::Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.image_width < 8 || self.image_height < 8 {
            return bad("images must be at least 8x8");
        }
        if self.texture_pool == 0 || self.occluder_max == 0 {
            return bad("texture_pool and occluder_max must be positive");
        }
        if self.augment_variants > 7 {
            return bad("augment_variants is at most 7");
        }
        if !(0.0..=1.0).contains(&self.train_occluded_fraction) || !(0.0..=1.0).contains(&self.occluder_gray) {
            return bad("train_occluded_fraction and occluder_gray must lie in [0, 1]");
        }
        for (name, v) in [("sim_dt", self.sim_dt), ("focal_scale", self.focal_scale), ("blur_sigma", self.blur_sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.boundary_jitter_px >= 0.0 && self.boundary_jitter_px.is_finite()) {
            return bad("boundary_jitter_px must be non-negative");
        }
        Ok(())
    }
}

/// Texture condition of a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Textures from the training pool.
    Known,
    /// Textures from the held-out pool.
    New,
    /// Untextured, constant color.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub name: &'static str,
    pub condition: Condition,
    /// `None` mixes occluded and clean samples (training).
    pub occluded: Option<bool>,
}

pub const SPLITS: [Split; 7] = [
    Split { name: "train", condition: Condition::Known, occluded: None },
    Split { name: "test_known", condition: Condition::Known, occluded: Some(false) },
    Split { name: "test_known_occ", condition: Condition::Known, occluded: Some(true) },
    Split { name: "test_new", condition: Condition::New, occluded: Some(false) },
    Split { name: "test_new_occ", condition: Condition::New, occluded: Some(true) },
    Split { name: "test_plain", condition: Condition::Plain, occluded: Some(false) },
    Split { name: "test_plain_occ", condition: Condition::Plain, occluded: Some(true) },
];

pub fn split_by_name(name: &str) -> Option<Split> {
    SPLITS.iter().copied().find(|s| s.name == name)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(base, a, b)`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ a) ^ b.rotate_left(17))
}

/// Texture `id` of the known (`id < pool`) or new (`pool <= id < 2 pool`)
/// pool. Kinds cycle through the patterned ones.
pub fn pooled_texture(config: &DataConfig, id: u32) -> TextureChoice {
    TextureChoice {
        kind: TextureKind::PATTERNED[id as usize % 3],
        id,
        seed: derive_seed(config.seed, 0x7e87, id as u64),
    }
}

fn split_index(split: &Split) -> u64 {
    SPLITS.iter().position(|s| s == split).expect("listed split") as u64 + 1
}

/// Texture and occlusion of sample `index` of `split`.
fn sample_plan(config: &DataConfig, split: &Split, index: usize) -> (u64, TextureChoice, bool) {
    let seed = derive_seed(config.seed, split_index(split), index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let pool = config.texture_pool as u32;
    let texture = match split.condition {
        Condition::Known => pooled_texture(config, rng.random_range(0..pool)),
        Condition::New => pooled_texture(config, pool + rng.random_range(0..pool)),
        Condition::Plain => TextureChoice { kind: TextureKind::Plain, id: PLAIN_TEXTURE_ID, seed: rng.random() },
    };
    let occluded = split.occluded.unwrap_or_else(|| rng.random_bool(config.train_occluded_fraction));
    (seed, texture, occluded)
}

/// All samples of one split, in index order. Samples are generated in
/// parallel from per-sample seeds, so the result does not depend on `exec`.
pub fn generate_split(config: &DataConfig, split: &Split, count: usize, exec: Exec) -> Result<Vec<Sample>> {
    let per_base = if split.occluded.is_none() { config.augment_variants + 1 } else { 1 };
    let bases = count.div_ceil(per_base);
    let groups = parallel::map_range(exec, bases, |b| -> Result<Vec<Sample>> {
        let (seed, texture, occluded) = sample_plan(config, split, b);
        let base = make_sample(config, seed, texture, occluded)?;
        if per_base == 1 {
            return Ok(vec![base]);
        }
        let mut variants = augment(config, &base, seed ^ 0xa06)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa07);
        let mut out = vec![base];
        for _ in 0..per_base - 1 {
            out.push(variants.swap_remove(rng.random_range(0..variants.len())));
        }
        Ok(out)
    });
    let mut out = Vec::with_capacity(count);
    for g in groups {
        out.extend(g?);
    }
    out.truncate(count);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub condition: Condition,
    pub occluded: Option<bool>,
    pub count: usize,
    pub file: String,
    /// Distinct texture ids used, ascending (plain textures excluded).
    pub texture_ids: Vec<u32>,
    /// Number of samples carrying occluders.
    pub occluded_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub n: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub camera: Camera,
    /// Generator settings in config-file syntax.
    pub config: String,
    pub splits: Vec<SplitInfo>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn split(&self, name: &str) -> Option<&SplitInfo> {
        self.splits.iter().find(|s| s.name == name)
    }

    /// Texture ids shared by the training split and the new-texture splits.
    pub fn texture_overlap(&self) -> Vec<u32> {
        let train: Vec<u32> = self.split("train").map(|s| s.texture_ids.clone()).unwrap_or_default();
        let mut shared: Vec<u32> = self
            .splits
            .iter()
            .filter(|s| s.condition == Condition::New)
            .flat_map(|s| s.texture_ids.iter().copied())
            .filter(|id| train.contains(id))
            .collect();
        shared.sort_unstable();
        shared.dedup();
        shared
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

fn split_info(split: &Split, samples: &[Sample]) -> SplitInfo {
    let mut ids: Vec<u32> =
        samples.iter().map(|s| s.meta.texture_id).filter(|&id| id != PLAIN_TEXTURE_ID).collect();
    ids.sort_unstable();
    ids.dedup();
    SplitInfo {
        name: split.name.to_string(),
        condition: split.condition,
        occluded: split.occluded,
        count: samples.len(),
        file: format!("{}.bin", split.name),
        texture_ids: ids,
        occluded_count: samples.iter().filter(|s| s.meta.occluded).count(),
    }
}

/// Writes every split and the manifest into `dir`. Progress is reported per
/// split through `log`.
pub fn generate_dataset(config: &DataConfig, dir: &Path, exec: Exec) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut infos = Vec::with_capacity(SPLITS.len());
    for split in &SPLITS {
        let count = if split.occluded.is_none() { config.train_count } else { config.test_count };
        let samples = generate_split(config, split, count, exec)?;
        let info = split_info(split, &samples);
        write_split(&dir.join(&info.file), &samples)?;
        log::info!("{}: {} samples", split.name, samples.len());
        infos.push(info);
    }
    let manifest = Manifest {
        format: "meshlift-dataset".into(),
        version: 1,
        seed: config.seed,
        n: config.n,
        image_width: config.image_width,
        image_height: config.image_height,
        camera: config.camera(),
        config: to_text(config),
        splits: infos,
    };
    let overlap = manifest.texture_overlap();
    if !overlap.is_empty() {
        return Err(Error::Mismatch(format!("train and new-texture pools share ids {overlap:?}")));
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    Ok(manifest)
}

/// Reads one split named in the manifest of `dir`.
pub fn load_split(dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(dir)?;
    let info = manifest
        .split(name)
        .ok_or_else(|| Error::Mismatch(format!("dataset {} has no split {name:?}", dir.display())))?;
    let path = dir.join(&info.file);
    let samples = read_split(&path)?;
    if samples.len() != info.count {
        return Err(Error::format(&path, format!("{} samples, manifest says {}", samples.len(), info.count)));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DataConfig {
        DataConfig {
            n: 4,
            image_width: 24,
            image_height: 24,
            train_count: 12,
            test_count: 3,
            texture_pool: 4,
            train_occluded_fraction: 0.5,
            sim_steps: 150,
            ..DataConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let c = DataConfig { blur_contours: true, sim_dt: 7.5e-4, ..tiny() };
        assert_eq!(DataConfig::from_text(&to_text(&c)).unwrap(), c);
        assert!(DataConfig::paper_scale().validate().is_ok());
        assert!(DataConfig::from_text("bogus = 1").is_err());
        assert!(DataConfig::from_text("texture_pool = 0").is_err());
    }

    #[test]
    fn splits_are_independent_of_execution_strategy() {
        let c = tiny();
        let a = generate_split(&c, &SPLITS[0], 5, Exec::Auto).unwrap();
        let b = generate_split(&c, &SPLITS[0], 5, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augmented_training_split_has_requested_count() {
        let c = DataConfig { augment_variants: 2, ..tiny() };
        let s = generate_split(&c, &SPLITS[0], 7, Exec::Auto).unwrap();
        assert_eq!(s.len(), 7);
        for x in &s {
            assert!(x.projection_error().unwrap() < 1e-9);
        }
    }

    #[test]
    fn dataset_is_byte_identical_across_runs() {
        let c = tiny();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_dataset(&c, d1.path(), Exec::Auto).unwrap();
        generate_dataset(&c, d2.path(), Exec::Sequential).unwrap();
        for f in m.splits.iter().map(|s| s.file.as_str()).chain([MANIFEST_FILE]) {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(Manifest::load(d1.path()).unwrap(), m);
        assert!(m.texture_overlap().is_empty());
        let train = m.split("train").unwrap();
        assert!(train.texture_ids.iter().all(|&id| id < 4));
        assert!(m.split("test_new").unwrap().texture_ids.iter().all(|&id| (4..8).contains(&id)));
        assert!(m.split("test_plain").unwrap().texture_ids.is_empty());
        assert_eq!(m.split("test_known_occ").unwrap().occluded_count, 3);
        let loaded = load_split(d1.path(), "test_new").unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(loaded.iter().all(|s| s.projection_error().unwrap() < 1e-9));
        assert!(load_split(d1.path(), "nope").is_err());
    }
}
