//! Synthetic deformable-surface dataset: simulated hanging sheets, procedural
//! textures, a Lambertian rasterizer, occluders, augmentations and the file
//! format.

pub mod augment;
pub mod cloth;
pub mod dataset;
pub mod format;
pub mod occlude;
pub mod render;
pub mod sample;
pub mod scene;
pub mod texture;

pub use augment::{augment, color_jitter, flip, Flip};
pub use cloth::simulate_cloth;
pub use dataset::{generate_dataset, generate_split, load_split, Condition, DataConfig, Manifest, Split, SPLITS};
pub use occlude::add_occluders;
pub use render::render;
pub use sample::{Sample, SampleMeta};
pub use texture::{make_texture, TextureKind};
