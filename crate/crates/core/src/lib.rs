//! Software-emulated FP8 (E4M3) training and rollout for a tiny language
//! model, built around one precision flow shared by the training forward pass
//! and autoregressive generation.
//!
//! Layers, bottom up: scalar codecs in [`fp8num`], block-scaled matrices in
//! [`blocktensor`], the three quantized GEMMs in [`qgemm`], the quantized
//! linear layer in [`qlinear`], precision-flow graphs in [`flowgraph`], the
//! transformer in [`tinylm`], and the GRPO loop in [`rlloop`].

pub mod blocktensor;
pub mod flowgraph;
pub mod fp8num;
pub mod qgemm;
pub mod qlinear;
pub mod rlloop;
pub mod tinylm;
