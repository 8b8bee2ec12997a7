//! Semantic map grids: category palettes, one-hot maps, partial observations,
//! patch masking, rasterization, and the on-disk dataset format.

mod dataset;
mod mask;
mod palette;
mod render;
mod semantic;

pub use dataset::{read_dataset, write_dataset, DATASET_MAGIC};
pub use mask::{apply_mask, object_patches, patch_grid, MaskPlan, PatchCoord};
pub use palette::{object_row, Category, CategoryPalette, FIRST_OBJECT_ID, FREE_ID, OCCUPIED_ID};
pub use render::{render_map, render_partial, render_row, Raster, UNOBSERVED_GRAY};
pub use semantic::{onehot_decode, onehot_encode, PartialMap, SemanticMap};
