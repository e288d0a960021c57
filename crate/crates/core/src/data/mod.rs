//! Dataset unification, label derivation, ground-truth construction and
//! augmentation.

pub mod augment;
pub mod convert;
pub mod eyediap;
pub mod geometry;
pub mod heatmap;
pub mod sample;
pub mod synthetic;

pub use augment::{augment, AugmentConfig, Augmented};
pub use convert::{convert, Conversion, SourceFormat};
pub use eyediap::{sample_eyediap_frames, FRAMES_PER_VIDEO};
pub use geometry::{
    ec_distance, ec_distance_literal, label_ec_columbia, label_ec_mpii, EcLabel, Gaze3dRecord,
    EC_THRESHOLD_MM,
};
pub use heatmap::{build_gt_heatmap, gaussian_grid, GT_SIGMA_CELLS};
pub use sample::{
    load_unified, write_manifest, AnnotatedSample, LoadOptions, SampleLabel, SampleRecord,
    UnifiedDataset,
};
