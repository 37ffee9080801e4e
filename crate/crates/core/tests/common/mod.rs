#![allow(dead_code)]

use std::sync::Arc;

use fedloc_core::dataset::{ClassId, Sample, NUM_CLASSES};
use fedloc_core::models::{AutoencoderSpec, ClassifierSpec};
use fedloc_core::partition::{partition_pools, split_labeled_unlabeled};
use fedloc_core::{rng, Architecture, ClientDataset, PartitionConfig, PartitionMode};
use rand::Rng;

pub const TOY_DIM: usize = 12;

pub fn toy_arch() -> Architecture {
    Architecture {
        autoencoder: AutoencoderSpec {
            encoder_dims: vec![TOY_DIM, 10, 8],
            dropout: 0.3,
        },
        classifier: ClassifierSpec {
            channels: vec![1, 8, 16],
            kernel: 3,
            hidden: 16,
            classes: NUM_CLASSES,
            dropout: 0.5,
        },
    }
}

/// Noisy copies of one prototype per class; classes `0..n_classes` only.
pub fn toy_samples(n: usize, n_classes: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng::stream(seed, &[300]);
    let protos: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..TOY_DIM).map(|_| if r.random::<f64>() < 0.4 { r.random_range(0.5..1.0) } else { 0.0 }).collect())
        .collect();
    (0..n)
        .map(|i| {
            let c = i % n_classes;
            let features: Arc<[f64]> = protos[c]
                .iter()
                .map(|&p| (p + r.random_range(-0.05..0.05)).clamp(0.0, 1.0))
                .collect();
            Sample {
                features,
                label: Some(ClassId::new(c).unwrap()),
                phone_id: (i % 3) as u32,
            }
        })
        .collect()
}

pub fn toy_clients(n_clients: usize, n: usize, seed: u64) -> Vec<ClientDataset> {
    let samples = toy_samples(n, 4, seed);
    let (labeled, unlabeled) = split_labeled_unlabeled(&samples, 0.3, seed).unwrap();
    let cfg = PartitionConfig {
        n_clients,
        labeled_ratio: 0.3,
        mode: if n_clients > 1 { PartitionMode::NonIid } else { PartitionMode::Iid },
        concentration: 0.5,
        seed,
    };
    partition_pools(&labeled, &unlabeled, &cfg).unwrap()
}
