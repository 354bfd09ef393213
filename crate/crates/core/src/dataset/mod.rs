//! Synthetic ID-consistent attack dataset, manifests and protocol splits.

pub mod io;
pub mod manifest;
pub mod protocol;
pub mod synth;
pub mod types;

pub use manifest::{build_manifest, verify_id_consistency, ConsistencyReport, Manifest};
pub use protocol::{
    table_counts, scaled_counts, split_protocol, CountRow, CountTable, ProtocolId, ProtocolSplit, SplitPart,
};
pub use synth::{render, render_image, synthesize_sample, SynthConfig};
pub use types::{AttackKind, AttackMethod, AttackType, Ethnicity, Image, Label, SampleDescriptor, SampleRecord};
