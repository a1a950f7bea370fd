//! Hyper-relational knowledge graph toolkit.
//!
//! Facts of the form `(s, r, o, {(a_i, v_i)})` are turned into an ordinary
//! triple KG by an invertible mediator-based transformation, embedded with a
//! GNN encoder plus multilinear decoder, and evaluated by filtered link
//! prediction at every entity position.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod ingest;
pub mod model;
pub mod numeric;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
