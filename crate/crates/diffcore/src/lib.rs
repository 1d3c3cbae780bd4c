//! Desk-scale latent diffusion for imitative editing: a fixed patch codec,
//! 13-channel condition assembly, a reference U-Net whose features join the
//! imitative U-Net's attention as extra keys/values, conditioning dropout,
//! Adam training, and classifier-free-guided DDIM sampling.

pub mod checkpoint;
pub mod codec;
pub mod conditions;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
