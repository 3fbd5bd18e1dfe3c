//! The dataset unit.

use crate::datagen::render::{Image, Light};
use crate::datagen::texture::TextureKind;
use crate::geometry::{project, Camera, GeometryError, MeshGrid2D, MeshGrid3D};
use crate::tensor::Tensor;

/// Texture id of the per-sample plain textures, which belong to no pool.
pub const PLAIN_TEXTURE_ID: u32 = u32::MAX;

/// Everything needed to re-render a sample besides its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub texture_kind: TextureKind,
    pub texture_id: u32,
    pub texture_seed: u64,
    /// Index into [`crate::datagen::cloth::MATERIALS`].
    pub material_id: u8,
    pub occluded: bool,
    pub blurred: bool,
    pub seed: u64,
    pub light: Light,
    pub albedo: f64,
}

/// Image plus ground truth. The image is stored as 8-bit RGB, row-major,
/// exactly as written to disk; [`Sample::image_tensor`] gives `v / 255`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub mesh3d: MeshGrid3D,
    pub mesh2d: MeshGrid2D,
    pub camera: Camera,
    pub meta: SampleMeta,
}

impl Sample {
    /// Builds a sample whose 2D ground truth is the projection of `mesh3d`.
    pub fn new(image: &Image, mesh3d: MeshGrid3D, camera: Camera, meta: SampleMeta) -> Result<Self, GeometryError> {
        let mesh2d = project(&camera, &mesh3d)?;
        Ok(Sample { width: image.width, height: image.height, image: image.to_u8(), mesh3d, mesh2d, camera, meta })
    }

    /// `[H, W, 3]` with values in `[0, 1]`.
    pub fn image_tensor(&self) -> Tensor {
        let data = self.image.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("stored dims match payload")
    }

    pub fn image_f64(&self) -> Image {
        let pixels = self.image.chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(|b| b as f64 / 255.0)).collect();
        Image { width: self.width, height: self.height, pixels }
    }

    /// Largest deviation between the stored 2D ground truth and the
    /// projection of the 3D one.
    pub fn projection_error(&self) -> Result<f64, GeometryError> {
        let p = project(&self.camera, &self.mesh3d)?;
        Ok(p.vertices()
            .iter()
            .zip(self.mesh2d.vertices())
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max))
    }
}
