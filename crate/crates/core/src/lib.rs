//! Core of a desk-scale federated learning simulator for Wi-Fi fingerprint
//! indoor localization.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`] reads UJIIndoorLoc CSV files, normalises RSSI readings and
//!   encodes building/floor classes.
//! * [`partition`] splits samples into labeled/unlabeled pools and spreads
//!   them over simulated clients (IID or Dirichlet label skew).
//! * [`nn`] is a small reverse-mode neural network toolkit (dense and
//!   depthwise-separable 1-D convolution layers, losses, Adam, gradient check).
//! * [`models`] assembles the autoencoder + classifier used by every client.
//! * [`fedcore`] runs federated rounds with similarity-based, FedAvg and
//!   FedProx aggregation.

pub mod dataset;
pub mod fedcore;
pub mod models;
pub mod nn;
pub mod partition;
pub mod rng;

pub use dataset::{ClassId, FingerprintRecord, Sample, TransformConfig};
pub use fedcore::{RoundRecord, SimConfig, Strategy};
pub use models::{Architecture, Network};
pub use nn::{Layout, ParamVector};
pub use partition::{ClientDataset, PartitionConfig, PartitionMode};
