//! faceforge: desk-scale 3D-aware face video editing.
//!
//! The toolkit personalizes a small differentiable 3D-aware generator by
//! jointly inverting several face crops (optimizing camera poses alongside
//! the latents), inverts a video frame by frame against the personalized
//! generator, applies linear latent-space edits and camera trajectories, and
//! composites the edited heads back into the source frames with optical-flow
//! position correction and boundary optimization.

pub mod align;
pub mod composite;
pub mod edit;
pub mod error;
pub mod flow;
pub mod graph;
pub mod image;
pub mod invert;
pub mod pipeline;
pub mod providers;
pub mod rng;
pub mod toygen;

pub use error::{Error, Result};
pub use image::{Image, RawImage};
