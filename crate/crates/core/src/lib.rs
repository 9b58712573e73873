//! Weakly supervised 3D visual grounding.
//!
//! Given scenes of detector proposals and scene-level sentence annotations
//! only, the model learns to point at the object a sentence describes. It
//! selects candidates with a class- and feature-level similarity, scores them
//! by how well each one helps reconstruct masked keywords of the sentence,
//! and distils the resulting ranking into a lightweight matching head that is
//! all inference needs.
//!
//! Runnable walkthroughs of each capability live in this crate's `examples/`
//! directory; `cargo run --example <name>` lists them.

pub mod coarse;
pub mod encoders;
pub mod distill;
pub mod error;
pub mod fine;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth_data;
pub mod tape;

pub use error::{Error, Result};
pub use geometry::AxisAlignedBox;
