//! Plain-text configuration: one `key = value` per line, `#` starts a comment.
//!
//! Model and generator settings live in one file; each key is consumed by
//! whichever side knows it (`n`, `image_width`, `image_height` and `seed` are
//! read by both).

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Entries in file order with their 1-based line numbers.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Value { key: key.into(), value: value.into() })
}

/// Something configurable from key/value pairs.
pub trait Configurable {
    /// Applies one entry; returns `Ok(false)` if the key is not recognized.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    /// Every setting as `key = value` lines, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn validate(&self) -> Result<()>;
}

/// Applies `text` to every target; a key no target recognizes is an error.
pub fn apply(text: &str, targets: &mut [&mut dyn Configurable]) -> Result<()> {
    for (line, key, value) in parse_pairs(text)? {
        let mut known = false;
        for t in targets.iter_mut() {
            known |= t.set(&key, &value)?;
        }
        if !known {
            return Err(ConfigError::UnknownKey { line, key });
        }
    }
    targets.iter().try_for_each(|t| t.validate())
}

pub fn to_text(c: &dyn Configurable) -> String {
    let mut s = String::new();
    for (k, v) in c.entries() {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// The 3D term of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss3d {
    /// Similarity-invariant alignment error.
    Align,
    /// Sum of squared vertex distances without alignment (ablation).
    L2,
}

impl FromStr for Loss3d {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "align" => Ok(Loss3d::Align),
            "l2" => Ok(Loss3d::L2),
            _ => Err(()),
        }
    }
}

impl Loss3d {
    pub fn as_str(self) -> &'static str {
        match self {
            Loss3d::Align => "align",
            Loss3d::L2 => "l2",
        }
    }
}

/// Architecture, loss and training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Mesh grid side; the mesh has `n * n` vertices.
    pub n: usize,
    pub t_max: usize,
    pub gamma: f64,
    /// Ground-truth heatmap spread in feature-grid cells.
    pub sigma_heatmap: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Image size over feature-grid size, 2 or 4.
    pub downscale: usize,
    /// Channels produced by the convolutional feature stack (two coordinate
    /// channels are appended on top).
    pub channels: usize,
    pub stage_width: usize,
    pub depth_width: usize,
    pub z_min: f64,
    pub loss3d: Loss3d,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs of the pre-phase fitting the feature stack together with the
    /// stage regressors on the heatmap term.
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Keep training the feature stack after the pre-phase.
    pub train_backbone: bool,
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 5,
            t_max: 3,
            gamma: 5e-3,
            sigma_heatmap: 1.5,
            image_width: 64,
            image_height: 64,
            downscale: 4,
            channels: 32,
            stage_width: 32,
            depth_width: 64,
            z_min: 0.1,
            loss3d: Loss3d::Align,
            learning_rate: 2e-4,
            lr_decay: 0.95,
            decay_interval: 2,
            weight_decay: 4e-5,
            batch_size: 3,
            seed: 0,
            pretrain_epochs: 0,
            stage1_epochs: 10,
            stage2_epochs: 20,
            train_backbone: false,
            patience: 10,
            val_fraction: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn num_vertices(&self) -> usize {
        self.n * self.n
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.downscale
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.downscale
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.stage1_epochs + self.stage2_epochs
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        apply(text, &mut [&mut c])?;
        Ok(c)
    }
}

impl Configurable for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "n" => self.n = parse_value(key, v)?,
            "t_max" => self.t_max = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "sigma_heatmap" => self.sigma_heatmap = parse_value(key, v)?,
            "image_width" => self.image_width = parse_value(key, v)?,
            "image_height" => self.image_height = parse_value(key, v)?,
            "downscale" => self.downscale = parse_value(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "stage_width" => self.stage_width = parse_value(key, v)?,
            "depth_width" => self.depth_width = parse_value(key, v)?,
            "z_min" => self.z_min = parse_value(key, v)?,
            "loss3d" => self.loss3d = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "lr_decay" => self.lr_decay = parse_value(key, v)?,
            "decay_interval" => self.decay_interval = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, v)?,
            "stage1_epochs" => self.stage1_epochs = parse_value(key, v)?,
            "stage2_epochs" => self.stage2_epochs = parse_value(key, v)?,
            "train_backbone" => self.train_backbone = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "val_fraction" => self.val_fraction = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("t_max", self.t_max.to_string()),
            ("gamma", format!("{:e}", self.gamma)),
            ("sigma_heatmap", format!("{:e}", self.sigma_heatmap)),
            ("image_width", self.image_width.to_string()),
            ("image_height", self.image_height.to_string()),
            ("downscale", self.downscale.to_string()),
            ("channels", self.channels.to_string()),
            ("stage_width", self.stage_width.to_string()),
            ("depth_width", self.depth_width.to_string()),
            ("z_min", format!("{:e}", self.z_min)),
            ("loss3d", self.loss3d.as_str().to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("lr_decay", format!("{:e}", self.lr_decay)),
            ("decay_interval", self.decay_interval.to_string()),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("stage2_epochs", self.stage2_epochs.to_string()),
            ("train_backbone", self.train_backbone.to_string()),
            ("patience", self.patience.to_string()),
            ("val_fraction", format!("{:e}", self.val_fraction)),
        ]
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.t_max < 1 {
            return bad("t_max must be at least 1");
        }
        if !matches!(self.downscale, 2 | 4) {
            return bad("downscale must be 2 or 4");
        }
        if self.image_width % self.downscale != 0 || self.image_height % self.downscale != 0 {
            return bad("image size must be a multiple of downscale");
        }
        if self.grid_width() < 2 || self.grid_height() < 2 {
            return bad("feature grid must be at least 2x2");
        }
        for (name, v) in [
            ("sigma_heatmap", self.sigma_heatmap),
            ("z_min", self.z_min),
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        if self.channels == 0 || self.stage_width == 0 || self.depth_width == 0 {
            return bad("layer widths must be positive");
        }
        if self.batch_size == 0 || self.decay_interval == 0 {
            return bad("batch_size and decay_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!((c.batch_size, c.t_max, c.decay_interval), (3, 3, 2));
        assert_eq!((c.learning_rate, c.weight_decay, c.gamma), (2e-4, 4e-5, 5e-3));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let c = ModelConfig::from_text("# desk\n n = 3 # small\n\ngamma=0.5\nloss3d = l2\ntrain_backbone = true\n").unwrap();
        assert_eq!(c.n, 3);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.loss3d, Loss3d::L2);
        assert!(c.train_backbone);
    }

    #[test]
    fn text_round_trip() {
        let c = ModelConfig { gamma: 0.123456789012345, seed: 99, ..Default::default() };
        assert_eq!(ModelConfig::from_text(&to_text(&c)).unwrap(), c);
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(ModelConfig::from_text("bogus = 1"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(ModelConfig::from_text("n 3"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(ModelConfig::from_text("n = -3"), Err(ConfigError::Value { .. })));
        assert!(matches!(ModelConfig::from_text("downscale = 3"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ModelConfig::from_text("t_max = 0"), Err(ConfigError::Invalid(_))));
    }
}
