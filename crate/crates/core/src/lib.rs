//! Lossless octree point cloud geometry coding with learned occupancy
//! probabilities.

pub mod cli;
pub mod codec;
pub mod context;
pub mod entropy;
pub mod geometry;
pub mod io;
pub mod model;
pub mod synth;
pub mod variant;

pub use codec::{decode, encode, Bitstream, CodecError};
pub use context::{ContextHistogram, ContextVector, Counts, TemplateVariant};
pub use entropy::QuantizedDist;
pub use geometry::{CandidateList, Pyramid, SectionBuffer, Voxel, VoxelSet};
pub use io::{read_ply, requantize, write_ply, RawPointCloud};
pub use model::{Model, OutputArch, TrainConfig};
pub use variant::Variant;
