//! Salient instance region detection and instance retrieval.
//!
//! Pipeline: [`graph`] runs a pre-trained network; [`excitation`] pushes
//! response peaks of the last convolution layer back to the image;
//! [`region`] turns each probability map into an ellipse and a box;
//! [`descriptor`] pools instance descriptors; [`vlad`] aggregates them per
//! image; [`retrieval`] searches and evaluates. [`cli`] ties it together.

pub mod cli;
pub mod descriptor;
pub mod error;
pub mod excitation;
pub mod graph;
pub mod ingest;
pub mod linalg;
pub mod model_io;
pub mod region;
pub mod retrieval;
pub mod tensor;
pub mod vlad;

pub use error::{Error, Result};
pub use tensor::Tensor;
