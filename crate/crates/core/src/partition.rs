//! Labeled/unlabeled splitting and client partitioning.
//!
//! All functions are deterministic in their seed and return exact set
//! partitions of their input; every output list keeps the input order.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, Sample, NUM_CLASSES};
use crate::rng::{self, tag, StreamRng};

/// Share draws attempted before a non-IID partition is declared unsatisfiable.
pub const MAX_SHARE_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("invalid partition config: {0}")]
    Config(String),
    #[error("cannot spread {samples} samples over {clients} clients")]
    TooFewSamples { clients: usize, samples: usize },
    #[error("no share draw gave every client a labeled sample after {0} attempts")]
    Unsatisfiable(usize),
}

pub type Result<T> = std::result::Result<T, PartitionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    #[serde(alias = "non_iid", alias = "non-iid")]
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_clients: usize,
    pub labeled_ratio: f64,
    pub mode: PartitionMode,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            labeled_ratio: 0.3,
            mode: PartitionMode::NonIid,
            concentration: 0.5,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(PartitionError::Config("n_clients must be at least 1".into()));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(PartitionError::Config(format!(
                "labeled_ratio must be in (0, 1], got {}",
                self.labeled_ratio
            )));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(PartitionError::Config(format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        if self.mode == PartitionMode::NonIid && self.n_clients < 2 {
            return Err(PartitionError::Config("non-IID partitioning needs at least 2 clients".into()));
        }
        Ok(())
    }
}

/// One simulated client's private data.
///
/// `unlabeled` samples carry no label; their ground truth sits in
/// `unlabeled_truth` (same order) and is only read for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub unlabeled_truth: Vec<Option<ClassId>>,
}

impl ClientDataset {
    /// N_k: all local samples, labeled or not.
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label histogram over labeled samples plus the hidden truth of
    /// unlabeled ones.
    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0usize; NUM_CLASSES];
        let labels = self
            .labeled
            .iter()
            .filter_map(|s| s.label)
            .chain(self.unlabeled_truth.iter().flatten().copied());
        for c in labels {
            h[c.index()] += 1;
        }
        h
    }
}

pub fn class_histogram(samples: &[Sample]) -> [usize; NUM_CLASSES] {
    let mut h = [0usize; NUM_CLASSES];
    for c in samples.iter().filter_map(|s| s.label) {
        h[c.index()] += 1;
    }
    h
}

/// Stratified random split. Each class contributes `round(ratio * n_c)`
/// labeled samples, at least one if the class is present.
pub fn split_labeled_unlabeled(samples: &[Sample], labeled_ratio: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(PartitionError::Config(format!(
            "labeled_ratio must be in (0, 1], got {labeled_ratio}"
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SPLIT]);
    let mut is_labeled = vec![false; samples.len()];
    for stratum in strata(samples) {
        if stratum.is_empty() {
            continue;
        }
        let mut idx = stratum;
        idx.shuffle(&mut rng);
        let take = ((labeled_ratio * idx.len() as f64).round() as usize).clamp(1, idx.len());
        for &i in &idx[..take] {
            is_labeled[i] = true;
        }
    }
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (s, &l) in samples.iter().zip(&is_labeled) {
        if l {
            labeled.push(s.clone());
        } else {
            unlabeled.push(s.clone());
        }
    }
    Ok((labeled, unlabeled))
}

/// Seeded random train/test split; `test_fraction` of the samples (rounded)
/// go to the test side.
pub fn train_test_split(samples: &[Sample], test_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = rng::stream(seed, &[tag::TEST_SPLIT]);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng);
    let n_test = ((test_fraction.clamp(0.0, 1.0)) * samples.len() as f64).round() as usize;
    let mut is_test = vec![false; samples.len()];
    for &i in &idx[..n_test] {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(samples.len() - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (s, &t) in samples.iter().zip(&is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}

/// Per-class index lists; unlabeled samples form an extra trailing stratum.
fn strata(samples: &[Sample]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); NUM_CLASSES + 1];
    for (i, s) in samples.iter().enumerate() {
        let k = s.label.map_or(NUM_CLASSES, ClassId::index);
        out[k].push(i);
    }
    out
}

/// Shuffle then deal round robin, starting at client `offset`.
fn assign_round_robin(n: usize, n_clients: usize, offset: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut owner = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        owner[i] = (pos + offset) % n_clients;
    }
    owner
}

/// Per-stratum client shares drawn from a symmetric Dirichlet via
/// normalised Gamma variates.
fn draw_shares(n_strata: usize, n_clients: usize, concentration: f64, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    (0..n_strata)
        .map(|_| loop {
            let g: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = g.iter().sum();
            if total > 0.0 && total.is_finite() {
                break g.into_iter().map(|x| x / total).collect();
            }
        })
        .collect()
}

/// Splits each stratum's (shuffled) members by cumulative share boundaries.
fn assign_by_shares(samples: &[Sample], shares: &[Vec<f64>], rng: &mut StreamRng) -> Vec<usize> {
    let mut owner = vec![0; samples.len()];
    for (k, mut members) in strata(samples).into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let n = members.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        let p = &shares[k];
        for (client, &share) in p.iter().enumerate() {
            cum += share;
            let end = if client + 1 == p.len() {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            for &i in &members[start..end] {
                owner[i] = client;
            }
            start = end;
        }
    }
    owner
}

fn assemble(
    n_clients: usize,
    labeled: &[Sample],
    labeled_owner: &[usize],
    unlabeled: &[Sample],
    unlabeled_owner: &[usize],
) -> Vec<ClientDataset> {
    let mut clients: Vec<ClientDataset> = (0..n_clients)
        .map(|client_id| ClientDataset {
            client_id,
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            unlabeled_truth: Vec::new(),
        })
        .collect();
    for (s, &c) in labeled.iter().zip(labeled_owner) {
        clients[c].labeled.push(s.clone());
    }
    for (s, &c) in unlabeled.iter().zip(unlabeled_owner) {
        clients[c].unlabeled.push(s.unlabeled());
        clients[c].unlabeled_truth.push(s.label);
    }
    clients
}

fn split_by_label(samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().cloned().partition(|s| s.label.is_some())
}

/// IID partition: shuffle, then round-robin. Client sizes differ by at most
/// one. Samples without a label land in the clients' unlabeled lists.
pub fn partition_iid(samples: &[Sample], n_clients: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(PartitionError::Config("n_clients must be at least 1".into()));
    }
    let (labeled, unlabeled) = split_by_label(samples);
    let cfg = PartitionConfig {
        n_clients,
        labeled_ratio: 1.0,
        mode: PartitionMode::Iid,
        concentration: 1.0,
        seed,
    };
    partition_pools(&labeled, &unlabeled, &cfg)
}

/// Dirichlet label-skew partition over labeled samples.
pub fn partition_noniid(samples: &[Sample], n_clients: usize, concentration: f64, seed: u64) -> Result<Vec<ClientDataset>> {
    let (labeled, unlabeled) = split_by_label(samples);
    let cfg = PartitionConfig {
        n_clients,
        labeled_ratio: 1.0,
        mode: PartitionMode::NonIid,
        concentration,
        seed,
    };
    partition_pools(&labeled, &unlabeled, &cfg)
}

/// Partitions the labeled and unlabeled pools with the same procedure.
///
/// Under non-IID mode the per-class Dirichlet shares are drawn once and
/// applied to both pools, so a client's unlabeled data follows the same
/// label skew as its labeled data. Unlabeled pool samples may still carry
/// their label; it is moved to `unlabeled_truth`.
pub fn partition_pools(labeled: &[Sample], unlabeled: &[Sample], cfg: &PartitionConfig) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let total = labeled.len() + unlabeled.len();
    if cfg.n_clients > total {
        return Err(PartitionError::TooFewSamples {
            clients: cfg.n_clients,
            samples: total,
        });
    }
    let mut rng = rng::stream(cfg.seed, &[tag::PARTITION]);
    match cfg.mode {
        PartitionMode::Iid => {
            let lo = assign_round_robin(labeled.len(), cfg.n_clients, 0, &mut rng);
            let uo = assign_round_robin(unlabeled.len(), cfg.n_clients, labeled.len() % cfg.n_clients, &mut rng);
            Ok(assemble(cfg.n_clients, labeled, &lo, unlabeled, &uo))
        }
        PartitionMode::NonIid => {
            if labeled.len() < cfg.n_clients {
                return Err(PartitionError::TooFewSamples {
                    clients: cfg.n_clients,
                    samples: labeled.len(),
                });
            }
            for _ in 0..MAX_SHARE_ATTEMPTS {
                let shares = draw_shares(NUM_CLASSES + 1, cfg.n_clients, cfg.concentration, &mut rng);
                let lo = assign_by_shares(labeled, &shares, &mut rng);
                let mut has_labeled = vec![false; cfg.n_clients];
                for &c in &lo {
                    has_labeled[c] = true;
                }
                if has_labeled.iter().all(|&b| b) {
                    let uo = assign_by_shares(unlabeled, &shares, &mut rng);
                    return Ok(assemble(cfg.n_clients, labeled, &lo, unlabeled, &uo));
                }
            }
            Err(PartitionError::Unsatisfiable(MAX_SHARE_ATTEMPTS))
        }
    }
}

/// Moves every sample recorded by one of `phone_ids` to the held-out side.
pub fn holdout_by_phone(samples: &[Sample], phone_ids: &[u32]) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if phone_ids.is_empty() {
        return Err(PartitionError::Config("phone id list must not be empty".into()));
    }
    Ok(samples.iter().cloned().partition(|s| !phone_ids.contains(&s.phone_id)))
}

/// Chi-squared statistic of the client-by-class contingency table against
/// the pooled class distribution. Larger means stronger label skew.
pub fn label_skew_chi2(histograms: &[[usize; NUM_CLASSES]]) -> f64 {
    let mut pooled = [0usize; NUM_CLASSES];
    for h in histograms {
        for (p, &c) in pooled.iter_mut().zip(h) {
            *p += c;
        }
    }
    let grand: usize = pooled.iter().sum();
    if grand == 0 {
        return 0.0;
    }
    let mut chi2 = 0.0;
    for h in histograms {
        let n_k: usize = h.iter().sum();
        for (c, &obs) in h.iter().enumerate() {
            if pooled[c] == 0 {
                continue;
            }
            let expected = n_k as f64 * pooled[c] as f64 / grand as f64;
            if expected > 0.0 {
                chi2 += (obs as f64 - expected).powi(2) / expected;
            }
        }
    }
    chi2
}

/// Mean total-variation distance between each client's label distribution
/// and the pooled one.
pub fn mean_label_divergence(histograms: &[[usize; NUM_CLASSES]]) -> f64 {
    let mut pooled = [0usize; NUM_CLASSES];
    for h in histograms {
        for (p, &c) in pooled.iter_mut().zip(h) {
            *p += c;
        }
    }
    let grand: usize = pooled.iter().sum();
    let nonempty: Vec<_> = histograms.iter().filter(|h| h.iter().sum::<usize>() > 0).collect();
    if grand == 0 || nonempty.is_empty() {
        return 0.0;
    }
    let tv: f64 = nonempty
        .iter()
        .map(|h| {
            let n_k: usize = h.iter().sum();
            0.5 * h
                .iter()
                .zip(&pooled)
                .map(|(&a, &b)| (a as f64 / n_k as f64 - b as f64 / grand as f64).abs())
                .sum::<f64>()
        })
        .sum();
    tv / nonempty.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                features: Arc::from(vec![i as f64]),
                label: ClassId::new(i % 13),
                phone_id: (i % 24) as u32 + 1,
            })
            .collect()
    }

    fn ids(list: &[Sample]) -> Vec<usize> {
        list.iter().map(|s| s.features[0] as usize).collect()
    }

    fn all_ids(clients: &[ClientDataset]) -> Vec<usize> {
        let mut v: Vec<usize> = clients
            .iter()
            .flat_map(|c| ids(&c.labeled).into_iter().chain(ids(&c.unlabeled)))
            .collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn split_full_ratio_labels_everything() {
        let s = samples(50);
        let (l, u) = split_labeled_unlabeled(&s, 1.0, 3).unwrap();
        assert_eq!(l.len(), 50);
        assert!(u.is_empty());
        assert!(split_labeled_unlabeled(&s, 0.0, 3).is_err());
        let (l, u) = split_labeled_unlabeled(&[], 0.3, 3).unwrap();
        assert!(l.is_empty() && u.is_empty());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let s = samples(1300);
        let (l1, u1) = split_labeled_unlabeled(&s, 0.3, 9).unwrap();
        let (l2, _) = split_labeled_unlabeled(&s, 0.3, 9).unwrap();
        assert_eq!(ids(&l1), ids(&l2));
        assert_eq!(l1.len() + u1.len(), 1300);
        let h = class_histogram(&l1);
        for c in 0..13 {
            assert_eq!(h[c], 30);
        }
        let (l3, _) = split_labeled_unlabeled(&s, 0.3, 10).unwrap();
        assert_ne!(ids(&l1), ids(&l3));
    }

    #[test]
    fn iid_sizes() {
        let c = partition_iid(&samples(10), 2, 0).unwrap();
        assert_eq!(c.iter().map(ClientDataset::len).collect::<Vec<_>>(), vec![5, 5]);

        let c = partition_iid(&samples(19_937), 10, 0).unwrap();
        for client in &c {
            assert!(client.len() == 1993 || client.len() == 1994);
        }
        assert_eq!(all_ids(&c), (0..19_937).collect::<Vec<_>>());

        let c = partition_iid(&samples(7), 1, 0).unwrap();
        assert_eq!(c[0].len(), 7);
        assert!(matches!(
            partition_iid(&samples(3), 4, 0),
            Err(PartitionError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn pools_iid_total_sizes_balanced() {
        let s = samples(103);
        let (l, u) = split_labeled_unlabeled(&s, 0.3, 1).unwrap();
        let cfg = PartitionConfig {
            n_clients: 4,
            mode: PartitionMode::Iid,
            ..Default::default()
        };
        let c = partition_pools(&l, &u, &cfg).unwrap();
        let sizes: Vec<_> = c.iter().map(ClientDataset::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
        for client in &c {
            assert!(client.unlabeled.iter().all(|s| s.label.is_none()));
            assert_eq!(client.unlabeled.len(), client.unlabeled_truth.len());
            assert!(client.unlabeled_truth.iter().all(Option::is_some));
        }
    }

    #[test]
    fn noniid_is_partition_with_labeled_everywhere() {
        let s = samples(2000);
        for seed in 0..5 {
            let c = partition_noniid(&s, 10, 0.5, seed).unwrap();
            assert_eq!(all_ids(&c), (0..2000).collect::<Vec<_>>());
            assert!(c.iter().all(|c| !c.labeled.is_empty()));
            assert_eq!(c, partition_noniid(&s, 10, 0.5, seed).unwrap());
        }
        assert!(partition_noniid(&s, 1, 0.5, 0).is_err());
        assert!(partition_noniid(&s, 3, 0.0, 0).is_err());
    }

    #[test]
    fn large_concentration_is_near_uniform() {
        let s = samples(5000);
        let c = partition_noniid(&s, 5, 1e6, 4).unwrap();
        for client in &c {
            assert!((client.len() as i64 - 1000).abs() <= 20, "{}", client.len());
        }
    }

    #[test]
    fn skew_measures_order_iid_below_noniid() {
        let s = samples(5000);
        let iid: Vec<_> = partition_iid(&s, 10, 2).unwrap().iter().map(ClientDataset::class_histogram).collect();
        let non: Vec<_> = partition_noniid(&s, 10, 0.5, 2).unwrap().iter().map(ClientDataset::class_histogram).collect();
        assert!(label_skew_chi2(&non) > label_skew_chi2(&iid));
        assert!(mean_label_divergence(&non) > mean_label_divergence(&iid));
    }

    #[test]
    fn holdout() {
        let s = samples(48);
        assert!(holdout_by_phone(&s, &[]).is_err());
        let (rest, held) = holdout_by_phone(&s, &[99]).unwrap();
        assert!(held.is_empty());
        assert_eq!(rest.len(), 48);
        let (rest, held) = holdout_by_phone(&s, &[8, 10, 22, 23, 24]).unwrap();
        assert_eq!(held.len(), 10);
        assert_eq!(rest.len() + held.len(), 48);
        assert!(held.iter().all(|x| [8, 10, 22, 23, 24].contains(&x.phone_id)));
        let (_, held) = holdout_by_phone(&s[..1], &[1]).unwrap();
        assert_eq!(held.len(), 1);
    }

    #[test]
    fn train_test_split_sizes() {
        let s = samples(1000);
        let (train, test) = train_test_split(&s, 0.3, 5);
        assert_eq!((train.len(), test.len()), (700, 300));
        let mut all = ids(&train);
        all.extend(ids(&test));
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }
}
