//! Multimodal masked-autoencoder foundation model for wireless signals:
//! synthetic IQ and spectrogram corpora, tokenization, a shared transformer
//! encoder, masked pretraining over both modalities, and fine-tuning with
//! linear probes, partial unfreezing or low-rank adapters.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod embedding;
pub mod error;
pub mod finetuner;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pretrainer;
pub mod rng;
pub mod signalgen;
pub mod tokenizer;

pub use error::{Error, Result};
