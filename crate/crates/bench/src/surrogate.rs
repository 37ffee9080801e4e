//! Synthetic stand-in for UJIIndoorLoc.
//!
//! Three buildings with 4, 4 and 5 floors; 520 access points, 40 per
//! populated floor. Readings follow a log-distance path-loss model with
//! per-floor and exterior-wall attenuation, log-normal shadowing and
//! per-phone gain offsets and sensitivities. Class frequencies follow the
//! real training and validation files. The validation set is drawn from a
//! separate stream with access-point drift and a few access points switched
//! off, mimicking a later collection campaign.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use fedloc_core::dataset::{write_ujiindoorloc, DatasetError, FingerprintRecord, MIN_RSS_DBM, NOT_DETECTED, NUM_WAPS};
use fedloc_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Records per (building, floor) in the real training file.
pub const TRAIN_COUNTS: [&[usize]; 3] = [&[1059, 1356, 1443, 1391], &[1368, 1484, 1396, 948], &[1942, 2162, 1577, 2709, 1102]];
/// Records per (building, floor) in the real validation file.
pub const VALIDATION_COUNTS: [&[usize]; 3] = [&[78, 208, 165, 85], &[30, 143, 87, 47], &[24, 111, 54, 40, 39]];

pub const TRAIN_PHONES: [u32; 16] = [1, 3, 6, 7, 8, 10, 11, 13, 14, 16, 17, 18, 19, 22, 23, 24];
pub const VALIDATION_PHONES: [u32; 11] = [0, 2, 4, 5, 9, 12, 13, 14, 15, 20, 21];

const BUILDING_X: [f64; 3] = [0.0, 100.0, 200.0];
const FOOTPRINT: (f64, f64) = (80.0, 50.0);
const FLOOR_HEIGHT: f64 = 3.5;
const TX_POWER: (f64, f64) = (-35.0, 3.0);
const PATH_LOSS_EXPONENT: f64 = 3.0;
const FLOOR_LOSS_DB: f64 = 14.0;
const WALL_LOSS_DB: f64 = 20.0;
const SHADOWING_DB: f64 = 5.0;
const PHONE_OFFSET_DB: f64 = 4.0;
const SENSITIVITY_DBM: (f64, f64) = (-100.0, -92.0);
const DRIFT_DB: f64 = 3.0;
const SWITCHED_OFF: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    pub train_records: usize,
    pub validation_records: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            train_records: 19_937,
            validation_records: 1_111,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    pub training: Vec<FingerprintRecord>,
    pub validation: Vec<FingerprintRecord>,
}

struct Wap {
    pos: [f64; 3],
    building: usize,
    floor: usize,
    power: f64,
}

struct Phone {
    id: u32,
    offset: f64,
    sensitivity: f64,
}

fn phones(ids: &[u32], r: &mut impl Rng) -> Vec<Phone> {
    let offset = Normal::new(0.0, PHONE_OFFSET_DB).expect("valid sd");
    ids.iter()
        .map(|&id| Phone {
            id,
            offset: offset.sample(r),
            sensitivity: r.random_range(SENSITIVITY_DBM.0..SENSITIVITY_DBM.1),
        })
        .collect()
}

/// Scales `counts` to sum to roughly `total`, keeping every class present.
/// Class counts rescaled to `total` by largest remainder; every class keeps
/// at least one record when `total` allows it.
fn scaled_counts(counts: &[&[usize]; 3], total: usize) -> Vec<(usize, usize, usize)> {
    let all: usize = counts.iter().flat_map(|c| c.iter()).sum();
    let mut out = Vec::new();
    let mut rest = Vec::new();
    for (b, floors) in counts.iter().enumerate() {
        for (f, &n) in floors.iter().enumerate() {
            let exact = n as f64 * total as f64 / all as f64;
            rest.push((exact - exact.floor(), out.len()));
            out.push((b, f, exact.floor() as usize));
        }
    }
    let assigned: usize = out.iter().map(|c| c.2).sum();
    rest.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rest.iter().take(total - assigned) {
        out[i].2 += 1;
    }
    if total >= out.len() {
        while let Some(i) = out.iter().position(|c| c.2 == 0) {
            let big = (0..out.len()).max_by_key(|&j| (out[j].2, std::cmp::Reverse(j))).expect("non-empty");
            out[big].2 -= 1;
            out[i].2 = 1;
        }
    }
    out
}

fn position(building: usize, floor: usize, height: f64, r: &mut impl Rng) -> [f64; 3] {
    [
        BUILDING_X[building] + r.random_range(0.0..FOOTPRINT.0),
        r.random_range(0.0..FOOTPRINT.1),
        floor as f64 * FLOOR_HEIGHT + height,
    ]
}

struct Campaign<'a> {
    waps: &'a [Wap],
    drift: Vec<f64>,
    active: Vec<bool>,
    phones: Vec<Phone>,
    spaces: bool,
    time0: i64,
}

impl Campaign<'_> {
    fn record(&self, building: usize, floor: usize, k: usize, r: &mut impl Rng) -> FingerprintRecord {
        let shadow = Normal::new(0.0, SHADOWING_DB).expect("valid sd");
        let phone_idx = r.random_range(0..self.phones.len());
        let phone = &self.phones[phone_idx];
        let at = position(building, floor, 1.2, r);
        let wap_rss = self
            .waps
            .iter()
            .enumerate()
            .map(|(w, ap)| {
                if !self.active[w] {
                    return NOT_DETECTED;
                }
                let d = ((ap.pos[0] - at[0]).powi(2) + (ap.pos[1] - at[1]).powi(2) + (ap.pos[2] - at[2]).powi(2))
                    .sqrt()
                    .max(1.0);
                let mut rss = ap.power - 10.0 * PATH_LOSS_EXPONENT * d.log10() + self.drift[w];
                rss -= FLOOR_LOSS_DB * (ap.floor as f64 - floor as f64).abs();
                if ap.building != building {
                    rss -= WALL_LOSS_DB;
                }
                rss += shadow.sample(r) + phone.offset;
                if rss < phone.sensitivity {
                    NOT_DETECTED
                } else {
                    (rss.round() as i32).clamp(MIN_RSS_DBM, 0)
                }
            })
            .collect();
        FingerprintRecord {
            wap_rss,
            longitude: -7691.3 + at[0],
            latitude: 4_864_745.7 + at[1],
            floor: floor as u8,
            building_id: building as u8,
            space_id: if self.spaces { r.random_range(1..=254) } else { 0 },
            relative_position: if self.spaces { r.random_range(1..=2) } else { 0 },
            user_id: if self.spaces { phone_idx as i64 + 1 } else { 0 },
            phone_id: phone.id,
            timestamp: self.time0 + 13 * k as i64,
        }
    }

    fn records(&self, counts: &[(usize, usize, usize)], r: &mut impl Rng) -> Vec<FingerprintRecord> {
        let mut plan: Vec<(usize, usize)> = counts
            .iter()
            .flat_map(|&(b, f, n)| std::iter::repeat_n((b, f), n))
            .collect();
        plan.shuffle(r);
        plan.into_iter()
            .enumerate()
            .map(|(k, (b, f))| self.record(b, f, k, r))
            .collect()
    }
}

pub fn generate(cfg: &SurrogateConfig) -> Surrogate {
    let mut r = rng::stream(cfg.seed, &[0x5EED, 0]);
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (b, floors) in TRAIN_COUNTS.iter().enumerate() {
        for f in 0..floors.len() {
            slots.extend(std::iter::repeat_n((b, f), NUM_WAPS / 13));
        }
    }
    slots.shuffle(&mut r);
    let power = Normal::new(TX_POWER.0, TX_POWER.1).expect("valid sd");
    let waps: Vec<Wap> = slots
        .into_iter()
        .map(|(building, floor)| Wap {
            pos: position(building, floor, 2.5, &mut r),
            building,
            floor,
            power: power.sample(&mut r),
        })
        .collect();

    let train = Campaign {
        waps: &waps,
        drift: vec![0.0; NUM_WAPS],
        active: vec![true; NUM_WAPS],
        phones: phones(&TRAIN_PHONES, &mut r),
        spaces: true,
        time0: 1_369_908_924,
    };
    let mut tr = rng::stream(cfg.seed, &[0x5EED, 1]);
    let training = train.records(&scaled_counts(&TRAIN_COUNTS, cfg.train_records), &mut tr);

    let mut vr = rng::stream(cfg.seed, &[0x5EED, 2]);
    let drift = Normal::new(0.0, DRIFT_DB).expect("valid sd");
    let validation_campaign = Campaign {
        waps: &waps,
        drift: (0..NUM_WAPS).map(|_| drift.sample(&mut vr)).collect(),
        active: (0..NUM_WAPS).map(|_| vr.random::<f64>() >= SWITCHED_OFF).collect(),
        phones: phones(&VALIDATION_PHONES, &mut vr),
        spaces: false,
        time0: 1_380_872_703,
    };
    let validation = validation_campaign.records(&scaled_counts(&VALIDATION_COUNTS, cfg.validation_records), &mut vr);
    Surrogate { training, validation }
}

/// Writes `trainingData.csv` and `validationData.csv` into `dir`.
pub fn write_surrogate(dir: &Path, cfg: &SurrogateConfig) -> Result<(), DatasetError> {
    let io = |path: &Path| {
        let p = path.to_path_buf();
        move |source| DatasetError::Io { path: p, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let data = generate(cfg);
    for (name, records) in [("trainingData.csv", &data.training), ("validationData.csv", &data.validation)] {
        let path = dir.join(name);
        let file = File::create(&path).map_err(io(&path))?;
        write_ujiindoorloc(BufWriter::new(file), records)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_matches_file_sizes() {
        let total: usize = scaled_counts(&TRAIN_COUNTS, 19_937).iter().map(|c| c.2).sum();
        assert_eq!(total, 19_937);
        let total: usize = scaled_counts(&VALIDATION_COUNTS, 1_111).iter().map(|c| c.2).sum();
        assert_eq!(total, 1_111);
    }

    #[test]
    fn scaled_counts_hit_the_total() {
        for total in [13, 50, 150, 777, 4000, 19_937, 40_000] {
            let c = scaled_counts(&TRAIN_COUNTS, total);
            assert_eq!(c.iter().map(|c| c.2).sum::<usize>(), total);
            assert!(c.iter().all(|c| c.2 >= 1));
        }
        let full = scaled_counts(&TRAIN_COUNTS, 19_937);
        let flat: Vec<usize> = TRAIN_COUNTS.iter().flat_map(|c| c.iter().copied()).collect();
        assert_eq!(full.iter().map(|c| c.2).collect::<Vec<_>>(), flat);
    }

    #[test]
    fn records_are_valid_and_deterministic() {
        let cfg = SurrogateConfig {
            train_records: 300,
            validation_records: 60,
            seed: 3,
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.training, b.training);
        assert_eq!(a.validation, b.validation);
        for rec in a.training.iter().chain(&a.validation) {
            assert_eq!(rec.wap_rss.len(), NUM_WAPS);
            assert!(rec.wap_rss.iter().all(|&v| v == NOT_DETECTED || (MIN_RSS_DBM..=0).contains(&v)));
            assert!(rec.class_id().is_ok());
            assert!(rec.wap_rss.iter().any(|&v| v != NOT_DETECTED));
        }
        let classes: std::collections::BTreeSet<_> = a.training.iter().map(|r| r.class_id().unwrap()).collect();
        assert_eq!(classes.len(), 13);
    }
}
