//! Synthetic token datasets and their binary format.
//!
//! Binary layout (all integers u32 little-endian, floats f64 little-endian):
//!
//! ```text
//! "NSDS" | version | k | M | c | ordering (0 morton, 1 raster) | num_items
//! per item: class_id | n·c token values in schedule order
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{self, Reader};
use crate::error::{check_len, Error, Result};
use crate::schedule::{Ordering, ScheduleSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"NSDS";
pub const DATASET_VERSION: u32 = 1;

/// Schedule parameters a dataset was laid out for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    pub k: usize,
    pub modules: usize,
    pub c: usize,
    pub ordering: Ordering,
}

impl Fingerprint {
    pub fn of(schedule: &ScheduleSpec) -> Self {
        Fingerprint {
            k: schedule.k(),
            modules: schedule.modules(),
            c: schedule.c(),
            ordering: schedule.ordering(),
        }
    }

    pub fn schedule(&self) -> Result<ScheduleSpec> {
        ScheduleSpec::new(self.k, self.modules, self.c, self.ordering)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub class_id: u32,
    /// `n·c` values, token-major, in schedule order.
    pub tokens: Vec<f64>,
}

/// How a dataset was produced. Not part of the binary format.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMeta {
    pub name: String,
    pub params: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    fingerprint: Fingerprint,
    items: Vec<Item>,
    meta: Option<GeneratorMeta>,
}

impl Dataset {
    pub fn new(
        schedule: &ScheduleSpec,
        items: Vec<Item>,
        meta: Option<GeneratorMeta>,
    ) -> Result<Self> {
        let len = schedule.n() * schedule.c();
        for (idx, item) in items.iter().enumerate() {
            check_len("dataset item", len, item.tokens.len())?;
            if item.tokens.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("dataset item {idx}")));
            }
        }
        Ok(Dataset {
            fingerprint: Fingerprint::of(schedule),
            items,
            meta,
        })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn meta(&self) -> Option<&GeneratorMeta> {
        self.meta.as_ref()
    }

    /// Fails unless the dataset was laid out for exactly this schedule.
    pub fn check_schedule(&self, schedule: &ScheduleSpec) -> Result<()> {
        let expected = Fingerprint::of(schedule);
        if self.fingerprint != expected {
            return Err(Error::Structure(format!(
                "dataset fingerprint {:?} does not match schedule {:?}",
                self.fingerprint, expected
            )));
        }
        Ok(())
    }

    /// Splits into the first `at` items and the rest.
    pub fn split_at(&self, at: usize) -> Result<(Dataset, Dataset)> {
        if at > self.items.len() {
            return Err(Error::OutOfRange(format!(
                "split point {at} beyond {} items",
                self.items.len()
            )));
        }
        let (a, b) = self.items.split_at(at);
        let part = |items: &[Item]| Dataset {
            fingerprint: self.fingerprint,
            items: items.to_vec(),
            meta: self.meta.clone(),
        };
        Ok((part(a), part(b)))
    }

    /// Flattened token vectors, one per item.
    pub fn flat_vectors(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|i| i.tokens.clone()).collect()
    }
}

/// Parameters of the quadtree generator.
#[derive(Debug, Clone, PartialEq)]
pub struct HierParams {
    pub num_classes: usize,
    /// Offset scale of internal nodes at depth `0..M` (root first).
    pub sigma_level: Vec<f64>,
    pub sigma_leaf: f64,
    /// One `c`-vector per class.
    pub class_means: Vec<Vec<f64>>,
}

impl HierParams {
    /// Class means spaced evenly on a circle of `radius` in the first two
    /// token components (on a line when `c = 1`).
    pub fn circle_means(num_classes: usize, c: usize, radius: f64) -> Vec<Vec<f64>> {
        (0..num_classes)
            .map(|j| {
                let mut mean = vec![0.0; c];
                if c == 1 {
                    mean[0] = if num_classes == 1 {
                        0.0
                    } else {
                        radius * (2.0 * j as f64 / (num_classes - 1) as f64 - 1.0)
                    };
                } else {
                    let angle = 2.0 * std::f64::consts::PI * j as f64 / num_classes as f64;
                    mean[0] = radius * angle.cos();
                    mean[1] = radius * angle.sin();
                }
                mean
            })
            .collect()
    }

    pub fn validate(&self, schedule: &ScheduleSpec) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidParameter("num_classes must be >= 1".into()));
        }
        check_len("sigma_level", schedule.modules(), self.sigma_level.len())?;
        check_len("class_means", self.num_classes, self.class_means.len())?;
        for mean in &self.class_means {
            check_len("class mean", schedule.c(), mean.len())?;
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("class means must be finite".into()));
            }
        }
        let sigmas = self
            .sigma_level
            .iter()
            .chain(std::iter::once(&self.sigma_leaf));
        for &s in sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "noise scales must be finite and >= 0, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Per-component variance of a single token.
    pub fn total_variance(&self) -> f64 {
        self.sigma_level.iter().map(|s| s * s).sum::<f64>() + self.sigma_leaf * self.sigma_leaf
    }

    /// Per-component covariance of two distinct tokens whose lowest common
    /// ancestor sits at `lca_depth` (root = 0).
    pub fn covariance_at_depth(&self, lca_depth: usize) -> f64 {
        self.sigma_level
            .iter()
            .take(lca_depth + 1)
            .map(|s| s * s)
            .sum()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Quadtree data: each item picks a class, every internal node of a depth-`M`
/// quadtree adds a gaussian offset shared by its subtree, and every leaf adds
/// its own noise.
///
/// Draw order per item: class, then node offsets depth by depth (nodes in
/// Morton order, `c` components each), then leaf noise in token order.
pub fn gen_hier_quadrant(
    schedule: &ScheduleSpec,
    hp: &HierParams,
    n_items: usize,
    seed: u64,
) -> Result<Dataset> {
    if schedule.ordering() != Ordering::Morton || schedule.k() != 4 {
        return Err(Error::InvalidParameter(
            "quadtree data needs k = 4 with morton ordering".into(),
        ));
    }
    hp.validate(schedule)?;
    let (depth, c, n) = (schedule.modules(), schedule.c(), schedule.n());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_items);
    let mut offsets: Vec<Vec<f64>> = (0..depth).map(|d| vec![0.0; (1 << (2 * d)) * c]).collect();
    for _ in 0..n_items {
        let class = rng.random_range(0..hp.num_classes);
        for (d, level) in offsets.iter_mut().enumerate() {
            for v in level.iter_mut() {
                *v = hp.sigma_level[d] * normal(&mut rng);
            }
        }
        let mean = &hp.class_means[class];
        let mut tokens = Vec::with_capacity(n * c);
        for token in 0..n {
            for j in 0..c {
                let mut v = mean[j];
                for (d, level) in offsets.iter().enumerate() {
                    let node = token >> (2 * (depth - d));
                    v += level[node * c + j];
                }
                tokens.push(v);
            }
        }
        for v in tokens.iter_mut() {
            *v += hp.sigma_leaf * normal(&mut rng);
        }
        items.push(Item {
            class_id: class as u32,
            tokens,
        });
    }
    let meta = GeneratorMeta {
        name: "hier-quadrant".into(),
        params: format!(
            "classes={} sigma_level={:?} sigma_leaf={} class_means={:?}",
            hp.num_classes, hp.sigma_level, hp.sigma_leaf, hp.class_means
        ),
        seed,
    };
    Dataset::new(schedule, items, Some(meta))
}

/// Independent standard-normal tokens, class 0.
pub fn gen_iid_gauss(schedule: &ScheduleSpec, n_items: usize, seed: u64) -> Result<Dataset> {
    let len = schedule.n() * schedule.c();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n_items)
        .map(|_| Item {
            class_id: 0,
            tokens: (0..len).map(|_| normal(&mut rng)).collect(),
        })
        .collect();
    let meta = GeneratorMeta {
        name: "iid-gauss".into(),
        params: String::new(),
        seed,
    };
    Dataset::new(schedule, items, Some(meta))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let f = ds.fingerprint;
    let schedule = f.schedule()?;
    let len = schedule.n() * schedule.c();
    let mut buf = Vec::with_capacity(28 + ds.items.len() * (4 + 8 * len));
    buf.extend_from_slice(DATASET_MAGIC);
    codec::put_u32(&mut buf, DATASET_VERSION);
    for v in [f.k, f.modules, f.c] {
        codec::put_u32(&mut buf, codec::to_u32(v, "schedule field")?);
    }
    codec::put_u32(&mut buf, f.ordering.code());
    codec::put_u32(&mut buf, codec::to_u32(ds.items.len(), "num_items")?);
    for item in &ds.items {
        codec::put_u32(&mut buf, item.class_id);
        codec::put_f64s(&mut buf, &item.tokens);
    }
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset");
    let magic = r.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let k = r.u32()? as usize;
    let modules = r.u32()? as usize;
    let c = r.u32()? as usize;
    let ordering = Ordering::from_code(r.u32()?)?;
    let schedule = ScheduleSpec::new(k, modules, c, ordering)?;
    let num_items = r.u32()? as usize;
    let len = schedule.n() * c;
    let mut items = Vec::with_capacity(num_items.min(bytes.len() / (4 + 8 * len)));
    for _ in 0..num_items {
        let class_id = r.u32()?;
        let tokens = r.f64s(len)?;
        items.push(Item { class_id, tokens });
    }
    r.finish()?;
    Dataset::new(&schedule, items, None)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

/// Loads a dataset; generator metadata is not stored and comes back as `None`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&codec::read_file(path)?)
}

/// Loads a dataset and checks it against `schedule`.
pub fn load_dataset_for(path: &Path, schedule: &ScheduleSpec) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    ds.check_schedule(schedule)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn morton(m: usize, c: usize) -> ScheduleSpec {
        ScheduleSpec::new(4, m, c, Ordering::Morton).unwrap()
    }

    fn hp(m: usize, c: usize, sl: f64, leaf: f64) -> HierParams {
        HierParams {
            num_classes: 3,
            sigma_level: vec![sl; m],
            sigma_leaf: leaf,
            class_means: HierParams::circle_means(3, c, 2.0),
        }
    }

    #[test]
    fn degenerate_variances_give_class_means() {
        let s = morton(2, 2);
        let p = hp(2, 2, 0.0, 0.0);
        let ds = gen_hier_quadrant(&s, &p, 20, 1).unwrap();
        for item in ds.items() {
            let mean = &p.class_means[item.class_id as usize];
            for tok in item.tokens.chunks(2) {
                assert_eq!(tok, mean.as_slice());
            }
        }
    }

    #[test]
    fn quadrant_needs_morton_k4() {
        let s = ScheduleSpec::new(4, 2, 1, Ordering::Raster).unwrap();
        assert!(gen_hier_quadrant(&s, &hp(2, 1, 1.0, 1.0), 1, 0).is_err());
        let s = morton(2, 1);
        let mut bad = hp(2, 1, 1.0, 1.0);
        bad.sigma_level.pop();
        assert!(gen_hier_quadrant(&s, &bad, 1, 0).is_err());
        bad = hp(2, 1, -1.0, 1.0);
        assert!(gen_hier_quadrant(&s, &bad, 1, 0).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let s = morton(2, 2);
        let p = hp(2, 2, 0.5, 0.2);
        assert_eq!(
            gen_hier_quadrant(&s, &p, 10, 3).unwrap(),
            gen_hier_quadrant(&s, &p, 10, 3).unwrap()
        );
        assert_ne!(
            gen_hier_quadrant(&s, &p, 10, 3).unwrap().items(),
            gen_hier_quadrant(&s, &p, 10, 4).unwrap().items()
        );
        assert_eq!(
            gen_iid_gauss(&s, 5, 9).unwrap(),
            gen_iid_gauss(&s, 5, 9).unwrap()
        );
    }

    #[test]
    fn circle_means_are_distinct() {
        let means = HierParams::circle_means(4, 2, 3.0);
        assert!((means[0][0] - 3.0).abs() < 1e-12 && means[0][1].abs() < 1e-12);
        assert!((means[1][1] - 3.0).abs() < 1e-12);
        let line = HierParams::circle_means(3, 1, 2.0);
        assert_eq!(line, vec![vec![-2.0], vec![0.0], vec![2.0]]);
    }

    #[test]
    fn covariance_closed_form() {
        let p = HierParams {
            num_classes: 1,
            sigma_level: vec![0.5, 0.3],
            sigma_leaf: 0.2,
            class_means: vec![vec![0.0]],
        };
        assert!((p.total_variance() - (0.25 + 0.09 + 0.04)).abs() < 1e-15);
        assert!((p.covariance_at_depth(0) - 0.25).abs() < 1e-15);
        assert!((p.covariance_at_depth(1) - 0.34).abs() < 1e-15);
    }

    #[test]
    fn round_trip_and_corruption() {
        let s = morton(2, 2);
        let ds = gen_hier_quadrant(&s, &hp(2, 2, 0.5, 0.2), 7, 11).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), 28 + 7 * (4 + 8 * 32));
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back.items(), ds.items());
        assert_eq!(back.fingerprint(), ds.fingerprint());
        assert_eq!(encode_dataset(&back).unwrap(), bytes);

        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_dataset(&bytes[..10]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(Error::Format(_))));
    }

    #[test]
    fn header_layout_is_exact() {
        let s = ScheduleSpec::new(2, 2, 1, Ordering::Raster).unwrap();
        let ds = Dataset::new(
            &s,
            vec![Item {
                class_id: 5,
                tokens: vec![1.0, 2.0, 3.0, 4.0],
            }],
            None,
        )
        .unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let mut expected = b"NSDS".to_vec();
        for v in [1u32, 2, 2, 1, 1, 1, 5] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f64, 2.0, 3.0, 4.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn fingerprint_guard() {
        let s = morton(2, 2);
        let ds = gen_iid_gauss(&s, 2, 0).unwrap();
        assert!(ds.check_schedule(&s).is_ok());
        assert!(ds.check_schedule(&morton(3, 2)).is_err());
        assert!(ds.check_schedule(&morton(2, 1)).is_err());
        assert!(ds
            .check_schedule(&ScheduleSpec::new(4, 2, 2, Ordering::Raster).unwrap())
            .is_err());
    }

    #[test]
    fn item_shape_is_validated() {
        let s = morton(1, 1);
        let bad = Item {
            class_id: 0,
            tokens: vec![0.0; 3],
        };
        assert!(Dataset::new(&s, vec![bad], None).is_err());
        let nan = Item {
            class_id: 0,
            tokens: vec![f64::NAN; 4],
        };
        assert!(Dataset::new(&s, vec![nan], None).is_err());
    }
}
