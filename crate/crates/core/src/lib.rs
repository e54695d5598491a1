//! Unsupervised terrain segmentation for video sequences.
//!
//! Frames are over-segmented into superpixels, each superpixel gets a
//! descriptor pooled from a precomputed patch-token feature map, and two
//! rounds of k-means (inside short temporal windows, then over the whole
//! sequence) give every pixel a sequence-consistent cluster label. The
//! [`eval`] module scores label maps against annotated ground truth.

// `!(x > 0.0)` is how parameters reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod clustering;
pub mod error;
pub mod eval;
pub mod features;
pub mod imageproc;
pub mod labelmap;
pub mod pipeline;
pub mod testkit;

pub use clustering::{
    Centroids, ClusterAssignment, KMeansFit, KMeansParams, MergedMask, TemporalWindow,
};
pub use error::{Error, Result};
pub use eval::{GroundTruthMap, JointHistogram, Matching, MetricsReport, Palette, Protocol};
pub use features::{DescriptorMode, FeatureMap, RegionDescriptor};
pub use imageproc::{LabImage, RegionLabels, RgbImage, SuperpixelMask};
pub use labelmap::{label_colour, overlay, LabelMap};
pub use pipeline::{PipelineConfig, RunOutput, SegmentationSequence};
