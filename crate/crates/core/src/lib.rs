//! SRAM-based self-attestation lab: synthetic firmware traces, a small
//! denoising autoencoder with int8 post-training quantization, adaptive
//! threshold calibration, the on-device attestation state machine and a
//! four-message mutual-attestation handshake with scripted adversaries.

pub mod exec;
pub mod matrix;
pub mod rng;
pub mod trace;
pub mod autoenc;
pub mod threshold;
pub mod secure_channel;
pub mod quantize;
pub mod container;
pub mod attestor;
pub mod pipeline;
pub mod handshake;
pub mod evalkit;
pub mod cli;
