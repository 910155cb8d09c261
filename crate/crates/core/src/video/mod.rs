//! Consistent video edits through layered atlases: an edit is learned once
//! per atlas and mapped onto every frame through per-pixel UVs.

pub mod package;
pub mod render;
pub mod segment;
pub mod synthetic;
pub mod train;

pub use package::{AtlasPackage, Layer, PackageMeta, TexelMap, UvGrid, UvRect};
pub use render::{blend_frame, render_layer_to_frame, render_video, AtlasEdit, FrameLayers};
pub use segment::{crop_from_segment, sample_segment, AtlasCrop, SegmentConfig, TexelRect, VideoSegmentSample};
pub use synthetic::{synthetic_package, SyntheticSpec};
pub use train::{infer_atlas_edit, train_video, train_video_with, working_rect, VideoTrainConfig, VideoTrainOutput};
