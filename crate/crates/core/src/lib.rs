//! Cross-modal person re-identification from images and scene graphs.

pub mod attribution;
pub mod clients;
pub mod evalkit;
pub mod fusion;
pub mod gat;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scenegraph;
pub mod textembed;
pub mod trainkit;
pub mod visual;
