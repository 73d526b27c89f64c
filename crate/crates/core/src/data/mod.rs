//! Synthetic scenes and sensors, on-disk ingestion, normalization, masking
//! and homogeneous batch scheduling.

pub mod batch;
pub mod ingest;
pub mod mask;
pub mod norm;
pub mod registry;
pub mod render;
pub mod scene;
pub mod synth;

pub use batch::{materialize, Batch, BatchConfig, BatchPlan, BatchScheduler, PlanItem, Sample};
pub use ingest::{decode_png, encode_png16, load_image_dir, parse_manifest, ManifestRow};
pub use mask::make_mask;
pub use norm::{ChannelStats, NormStats};
pub use registry::{Entry, ImageSource, Registry};
pub use render::{render_optical, render_sar, OpticalStyle, SarStyle};
pub use scene::{gen_scene, Region, Scene, NUM_CLASSES};
pub use synth::{SynthConfig, SynthPair};
