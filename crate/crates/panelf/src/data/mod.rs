//! Dataset preparation: page classification, panel cropping, manifests,
//! edge maps and synthetic corpora.
//!
//! Images enter the numeric side as `[1, H, W]` tensors in `[-1, 1]`
//! (see [`image_to_tensor`]).

mod edges;
mod manifest;
mod page;
mod synth;

pub use edges::{edge_map, sobel_magnitude, DEFAULT_EDGE_HIGH, DEFAULT_EDGE_LOW};
pub use manifest::{build_manifest, list_pngs, DatasetManifest, ManifestRecord, DEFAULT_CAPTION};
pub use page::{
    classify_page, expected_panel_count, extract_panels, image_to_tensor, max_channel_difference, tensor_to_image,
    PageClass, PageImage, PanelGrid, PanelRect, DEFAULT_COLOR_THRESHOLD,
};
pub use synth::{
    generate_shape_panels, generate_synthetic_corpus, shape_panel, ShapeKind, SyntheticKind, INK, PAPER,
    SHAPE_PANEL_SIZE, SYNTH_PAGE_HEIGHT, SYNTH_PAGE_WIDTH,
};
