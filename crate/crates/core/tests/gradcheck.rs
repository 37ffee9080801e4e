//! Reverse-mode gradients against the central-difference oracle.

use std::sync::Arc;

use fedloc_core::dataset::{ClassId, NUM_CLASSES};
use fedloc_core::models::{
    AutoencoderSpec, ClassifierSpec, CombinedObjective, Network, ReconstructionObjective, TrainExample,
};
use fedloc_core::nn::{backprop, finite_diff_grad, gradient_check, max_relative_error, ParamVector};
use fedloc_core::rng;
use fedloc_core::Architecture;
use rand::Rng;

pub fn tiny_arch(seed: u64) -> Architecture {
    let mut r = rng::stream(seed, &[100]);
    Architecture {
        autoencoder: AutoencoderSpec {
            encoder_dims: vec![r.random_range(5..9), r.random_range(4..7), r.random_range(3..6)],
            dropout: 0.3,
        },
        classifier: ClassifierSpec {
            channels: vec![r.random_range(1..4), r.random_range(2..4)],
            kernel: 3,
            hidden: r.random_range(3..6),
            classes: NUM_CLASSES,
            dropout: 0.5,
        },
    }
}

fn batch(net: &Network, seed: u64, n: usize) -> Vec<TrainExample> {
    let mut r = rng::stream(seed, &[200]);
    (0..n)
        .map(|_| TrainExample {
            features: (0..net.input_dim()).map(|_| r.random::<f64>()).collect(),
            label: ClassId::new(r.random_range(0..NUM_CLASSES)).unwrap(),
        })
        .collect()
}

fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
    max_relative_error(a.values(), b.values(), 1e-6)
}

/// Draws tiny models until `count` of them have a loss that is smooth within
/// `h` of every coordinate, and returns (worst error, models skipped).
pub fn check_tiny_models(count: usize, h: f64) -> (f64, usize) {
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut seed = 0;
    while checked < count {
        let net = Network::new(tiny_arch(seed)).unwrap();
        let params = net.init_params(seed);
        let items = batch(&net, seed, 4);
        let refs: Vec<&TrainExample> = items.iter().collect();
        let obj = CombinedObjective {
            network: &net,
            lambda: 0.7,
        };
        let check = gradient_check(&obj, &params, &refs, h).unwrap();
        if check.kinked == 0 {
            worst = worst.max(check.max_rel_error);
            checked += 1;
        } else {
            skipped += 1;
        }
        seed += 1;
        assert!(skipped < 10 * count, "too many kinked draws");
    }
    (worst, skipped)
}

#[test]
fn combined_gradient_matches_central_differences() {
    let (worst, skipped) = check_tiny_models(10, 1e-3);
    println!("max relative gradient error over 10 models: {worst:.3e} ({skipped} kinked draws skipped)");
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn kinked_draws_agree_at_small_step() {
    // The skipped draws still match once the probe is too short to cross a kink.
    for seed in [0, 2] {
        let net = Network::new(tiny_arch(seed)).unwrap();
        let params = net.init_params(seed);
        let items = batch(&net, seed, 4);
        let refs: Vec<&TrainExample> = items.iter().collect();
        let obj = CombinedObjective {
            network: &net,
            lambda: 0.7,
        };
        let (g, _) = backprop(&obj, &params, &refs, None).unwrap();
        let fd = finite_diff_grad(&obj, &params, &refs, 1e-6).unwrap();
        assert!(max_relative_error(g.values(), fd.values(), 1e-4) <= 1e-4);
    }
}

#[test]
fn reconstruction_gradient_matches_central_differences() {
    let net = Network::new(tiny_arch(42)).unwrap();
    let params = net.init_params(42);
    let feats: Vec<Arc<[f64]>> = batch(&net, 42, 3).into_iter().map(|e| e.features).collect();
    let refs: Vec<&Arc<[f64]>> = feats.iter().collect();
    let obj = ReconstructionObjective { network: &net };
    let (g, _) = backprop(&obj, &params, &refs, None).unwrap();
    let fd = finite_diff_grad(&obj, &params, &refs, 1e-3).unwrap();
    assert!(rel_err(&g, &fd) <= 1e-4);
    let cls = net.classifier_range();
    assert!(g.values()[cls].iter().all(|&v| v == 0.0));
}

#[test]
fn autoencoder_gradient_scales_with_lambda() {
    let net = Network::new(tiny_arch(7)).unwrap();
    let params = net.init_params(7);
    let items = batch(&net, 7, 5);
    let refs: Vec<&TrainExample> = items.iter().collect();
    let grad = |lambda| backprop(&CombinedObjective { network: &net, lambda }, &params, &refs, None).unwrap().0;
    let (g0, g1, g2) = (grad(0.0), grad(1.0), grad(2.0));
    for k in 0..params.len() {
        let ae1 = g1.values()[k] - g0.values()[k];
        let ae2 = g2.values()[k] - g0.values()[k];
        assert!((ae2 - 2.0 * ae1).abs() <= 1e-12 * (1.0 + ae1.abs()), "param {k}");
    }
    let cls = net.classifier_range();
    assert_eq!(&g0.values()[cls.clone()], &g2.values()[cls]);
}

#[test]
fn perfect_fit_has_near_zero_gradient() {
    // Zero weights reconstruct zero inputs exactly; a huge bias on the true
    // class saturates the classifier.
    let net = Network::new(tiny_arch(3)).unwrap();
    let mut params = ParamVector::zeros(net.layout().clone());
    let label = ClassId::new(4).unwrap();
    params.segment_mut("classifier.fc1.bias").unwrap()[label.index()] = 1000.0;
    let items = vec![
        TrainExample {
            features: vec![0.0; net.input_dim()].into(),
            label,
        };
        3
    ];
    let refs: Vec<&TrainExample> = items.iter().collect();
    let (g, r) = backprop(&CombinedObjective { network: &net, lambda: 1.0 }, &params, &refs, None).unwrap();
    assert!(r.loss_total < 1e-12);
    assert!(g.norm() < 1e-12);
}

#[test]
fn dropout_masks_are_reproducible() {
    let net = Network::new(tiny_arch(5)).unwrap();
    let params = net.init_params(5);
    let items = batch(&net, 5, 6);
    let refs: Vec<&TrainExample> = items.iter().collect();
    let obj = CombinedObjective {
        network: &net,
        lambda: 1.0,
    };
    let run = |s| backprop(&obj, &params, &refs, Some(&mut rng::stream(s, &[]))).unwrap();
    let (a, ra) = run(1);
    let (b, rb) = run(1);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let (c, _) = run(2);
    assert_ne!(a, c);
}
