//! Pseudo-ligand/pocket complex mining from protein structures, contrastive pocket
//! encoder training against a frozen reference molecule encoder, transfer-bound
//! verification and embedding evaluation.

pub mod autograd;
pub mod contrastive;
pub mod element;
pub mod encoder;
pub mod evaluation;
pub mod fragment_forge;
pub mod geometry;
pub mod grid;
pub mod optim;
pub mod pipeline;
pub mod structure_io;
pub mod sampler;
pub mod surface;
pub mod synthetic;
pub mod tensor_io;
pub mod transfer_bound;
