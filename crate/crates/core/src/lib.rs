//! Incremental dual-layer semantic voxel mapping.
//!
//! A dense layer keeps a running-mean embedding per voxel; an instance
//! layer keeps up to K instance hypotheses per voxel with one embedding per
//! instance. Cross-layer fusion combines the two, optionally inside a
//! sliding window around the camera.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod dense;
pub mod error;
pub mod formats;
pub mod frames;
pub mod fusion;
pub mod instance;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod query;
pub mod snapshot;
pub mod stream;
pub mod synth;
pub mod types;
pub mod window;

pub use config::{EvidenceScope, MapConfig, MotionThresholds};
pub use dense::DenseLayer;
pub use error::{Error, Result};
pub use frames::{FrameGeometry, FrameRecord, SegmentProposal};
pub use fusion::{fuse_all, FusedInstance, FusionOutput, FusionScope};
pub use instance::{InstanceLayer, InstanceRecord};
pub use mask::Mask;
pub use metrics::{evaluate, GroundTruthVolume, SegmentationReport};
pub use pipeline::{map_stream, run_mapping, Mapper, MappingMode, RunReport};
pub use query::{predict_classes, similarity_map, LayerSelection, MapView, PromptSet};
pub use snapshot::MapSnapshot;
pub use types::{CameraIntrinsics, Embedding, Pose, VoxelKey};
