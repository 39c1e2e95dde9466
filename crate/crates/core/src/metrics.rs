//! Sample-quality statistics and evaluation-count bookkeeping.
//!
//! Image-scale scores (FID, IS) are not computed. A Gaussian-kernel MMD
//! between flattened token vectors stands in for distribution distance, and
//! mode coverage with the assignment entropy stands in for diversity.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

pub const SUBSTITUTE_NOTE: &str = "mmd2 and coverage replace image-scale FID/IS";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled sets.
    MedianHeuristic,
}

/// Gaussian kernel `exp(-|a-b|^2 / (2 σ^2))`, biased (V-statistic) estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("MMD sample set"));
    }
    let dim = a[0].len();
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "MMD sample vector",
                expected: dim,
                got: v.len(),
            });
        }
    }
    Ok(dim)
}

/// Median of all pairwise distances in `a ∪ b`. Even counts average the two
/// middle values. Falls back to 1 when every point coincides.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(|v| v.as_slice()).collect();
    if pooled.len() < 2 {
        return Ok(1.0);
    }
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

fn kernel_sum(a: &[Vec<f64>], b: &[Vec<f64>], inv: f64) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += (-sq_dist(x, y) * inv).exp();
        }
    }
    total
}

/// Biased MMD² between two sets of equal-length vectors.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &MmdConfig) -> Result<f64> {
    check_sets(a, b)?;
    let sigma = match cfg.bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => {
            return Err(Error::InvalidParameter(format!(
                "MMD bandwidth must be > 0, got {s}"
            )))
        }
        Bandwidth::MedianHeuristic => median_bandwidth(a, b)?,
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let kaa = kernel_sum(a, a, inv) / (na * na);
    let kbb = kernel_sum(b, b, inv) / (nb * nb);
    let kab = kernel_sum(a, b, inv) / (na * nb);
    Ok(kaa + kbb - 2.0 * kab)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiusPolicy {
    Nearest,
    /// Samples farther than this from every center are dropped.
    Radius(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    /// Fraction of centers with at least one assigned sample.
    pub coverage: f64,
    /// Shannon entropy (nats) of the assignment histogram.
    pub entropy: f64,
    pub dropped_fraction: f64,
    pub counts: Vec<usize>,
}

/// Assigns each sample to its nearest center; ties go to the lower index.
pub fn mode_coverage(
    samples: &[Vec<f64>],
    centers: &[Vec<f64>],
    policy: RadiusPolicy,
) -> Result<CoverageReport> {
    if centers.is_empty() {
        return Err(Error::Empty("mode centers"));
    }
    if samples.is_empty() {
        return Err(Error::Empty("coverage samples"));
    }
    check_sets(samples, centers)?;
    if let RadiusPolicy::Radius(r) = policy {
        if !(r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "coverage radius must be > 0, got {r}"
            )));
        }
    }
    let mut counts = vec![0usize; centers.len()];
    let mut dropped = 0usize;
    for s in samples {
        let mut best = (0, f64::INFINITY);
        for (idx, c) in centers.iter().enumerate() {
            let d = sq_dist(s, c);
            if d < best.1 {
                best = (idx, d);
            }
        }
        match policy {
            RadiusPolicy::Radius(r) if best.1.sqrt() > r => dropped += 1,
            _ => counts[best.0] += 1,
        }
    }
    let assigned: usize = counts.iter().sum();
    let hit = counts.iter().filter(|&&c| c > 0).count();
    let entropy = if assigned == 0 {
        0.0
    } else {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / assigned as f64;
                -p * p.ln()
            })
            .sum::<f64>()
            .max(0.0)
    };
    Ok(CoverageReport {
        coverage: hit as f64 / centers.len() as f64,
        entropy,
        dropped_fraction: dropped as f64 / samples.len() as f64,
        counts,
    })
}

/// Patch counts of nested generation against the token-by-token baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityRow {
    pub k: usize,
    pub modules: usize,
    pub ode_steps: usize,
    pub n: usize,
    pub nested_patches: usize,
    pub vanilla_patches: usize,
    pub ratio: f64,
}

impl ComplexityRow {
    pub fn nested_nfe(&self) -> usize {
        self.nested_patches * self.ode_steps
    }

    pub fn vanilla_nfe(&self) -> usize {
        self.vanilla_patches * self.ode_steps
    }

    pub const CSV_HEADER: &'static str =
        "k,modules,ode_steps,n,nested_patches,vanilla_patches,ratio,nested_nfe,vanilla_nfe";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.4},{},{}",
            self.k,
            self.modules,
            self.ode_steps,
            self.n,
            self.nested_patches,
            self.vanilla_patches,
            self.ratio,
            self.nested_nfe(),
            self.vanilla_nfe()
        )
    }
}

impl fmt::Display for ComplexityRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} vs {}, ratio {:.2}",
            self.nested_patches, self.vanilla_patches, self.ratio
        )
    }
}

pub fn complexity_report(
    k: usize,
    modules: usize,
    ode_steps: usize,
    n: usize,
) -> Result<ComplexityRow> {
    if k < 2 || modules < 1 || ode_steps < 1 {
        return Err(Error::InvalidParameter(format!(
            "need k >= 2, M >= 1, S >= 1; got k={k}, M={modules}, S={ode_steps}"
        )));
    }
    let expected = u32::try_from(modules)
        .ok()
        .and_then(|m| k.checked_pow(m))
        .ok_or_else(|| Error::Overflow(format!("{k}^{modules} does not fit")))?;
    if n != expected {
        return Err(Error::InvalidParameter(format!(
            "n = {n} but k^M = {expected}"
        )));
    }
    let nested = (k - 1) * modules + 1;
    Ok(ComplexityRow {
        k,
        modules,
        ode_steps,
        n,
        nested_patches: nested,
        vanilla_patches: n,
        ratio: n as f64 / nested as f64,
    })
}

/// CRC32 of a configuration text, as 8 hex digits.
pub fn config_hash(text: &str) -> String {
    format!("{:08x}", crc32fast::hash(text.as_bytes()))
}

/// `metric,value` table preceded by one `# key=value ...` metadata line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub meta: Vec<(String, String)>,
    pub rows: Vec<(String, f64)>,
}

impl MetricsTable {
    pub fn meta(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn row(&mut self, name: &str, value: f64) -> &mut Self {
        self.rows.push((name.to_string(), value));
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("#");
        for (k, v) in &self.meta {
            let _ = write!(out, " {k}={}", v.replace(char::is_whitespace, "_"));
        }
        out.push_str("\nmetric,value\n");
        for (k, v) in &self.rows {
            let _ = writeln!(out, "{k},{v:e}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = pts(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert_eq!(mmd(&a, &a, &MmdConfig::default()).unwrap(), 0.0);
        let mut b = a.clone();
        b.reverse();
        assert!(mmd(&a, &b, &MmdConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn singleton_closed_form() {
        let sigma = 0.7;
        let cfg = MmdConfig {
            bandwidth: Bandwidth::Fixed(sigma),
        };
        for d in [0.0, 0.3, 1.0, 2.5] {
            let got = mmd(&pts(&[&[0.0]]), &pts(&[&[d]]), &cfg).unwrap();
            let want = 2.0 - 2.0 * (-d * d / (2.0 * sigma * sigma)).exp();
            assert!((got - want).abs() < 1e-14, "d={d}");
        }
    }

    #[test]
    fn median_heuristic_values() {
        // pooled {0, 1, 3}: distances 1, 2, 3 -> median 2
        let a = pts(&[&[0.0], &[1.0]]);
        let b = pts(&[&[3.0]]);
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 2.0);
        // pooled {0, 1, 3, 7}: 1,2,3,4,6,7 -> (3 + 4) / 2
        let b = pts(&[&[3.0], &[7.0]]);
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 3.5);
        let same = pts(&[&[1.0], &[1.0]]);
        assert_eq!(median_bandwidth(&same, &same).unwrap(), 1.0);
    }

    #[test]
    fn mmd_errors() {
        let a = pts(&[&[0.0]]);
        assert!(matches!(
            mmd(&a, &[], &MmdConfig::default()),
            Err(Error::Empty(_))
        ));
        let b = pts(&[&[0.0, 1.0]]);
        assert!(matches!(
            mmd(&a, &b, &MmdConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let cfg = MmdConfig {
            bandwidth: Bandwidth::Fixed(0.0),
        };
        assert!(mmd(&a, &a, &cfg).is_err());
    }

    fn centers() -> Vec<Vec<f64>> {
        pts(&[&[0.0, 0.0], &[4.0, 0.0], &[0.0, 4.0], &[4.0, 4.0]])
    }

    #[test]
    fn coverage_examples() {
        let r = mode_coverage(&centers(), &centers(), RadiusPolicy::Nearest).unwrap();
        assert_eq!(r.coverage, 1.0);
        assert!((r.entropy - 4f64.ln()).abs() < 1e-15);
        let r = mode_coverage(
            &pts(&[&[0.0, 0.0], &[0.0, 0.0]]),
            &centers(),
            RadiusPolicy::Nearest,
        )
        .unwrap();
        assert_eq!(r.coverage, 0.25);
        assert_eq!(r.entropy, 0.0);
        assert_eq!(r.counts, vec![2, 0, 0, 0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let r = mode_coverage(&pts(&[&[2.0, 0.0]]), &centers(), RadiusPolicy::Nearest).unwrap();
        assert_eq!(r.counts, vec![1, 0, 0, 0]);
    }

    #[test]
    fn radius_drops_far_samples() {
        let s = pts(&[&[0.1, 0.0], &[2.0, 2.0], &[4.0, 4.0], &[9.0, 9.0]]);
        let r = mode_coverage(&s, &centers(), RadiusPolicy::Radius(1.0)).unwrap();
        assert_eq!(r.dropped_fraction, 0.5);
        assert_eq!(r.counts, vec![1, 0, 0, 1]);
        assert!((r.entropy - 2f64.ln()).abs() < 1e-15);
        assert!(mode_coverage(&[], &centers(), RadiusPolicy::Nearest).is_err());
        assert!(mode_coverage(&s, &[], RadiusPolicy::Nearest).is_err());
    }

    #[test]
    fn complexity_examples() {
        let r = complexity_report(4, 4, 50, 256).unwrap();
        assert_eq!((r.nested_patches, r.vanilla_patches), (13, 256));
        assert!((r.ratio - 256.0 / 13.0).abs() < 1e-12);
        assert_eq!(r.to_string(), "13 vs 256, ratio 19.69");
        assert_eq!(r.nested_nfe(), 650);
        let r = complexity_report(2, 8, 50, 256).unwrap();
        assert_eq!((r.nested_patches, r.vanilla_patches), (9, 256));
        let r = complexity_report(4, 1, 50, 4).unwrap();
        assert_eq!((r.nested_patches, r.vanilla_patches), (4, 4));
        assert!(complexity_report(4, 4, 50, 255).is_err());
        assert!(complexity_report(1, 4, 50, 1).is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let mut t = MetricsTable::default();
        t.meta("generator", "hier-quadrant").meta("seed", 3);
        t.row("mmd2", 0.25);
        assert_eq!(
            t.to_csv(),
            "# generator=hier-quadrant seed=3\nmetric,value\nmmd2,2.5e-1\n"
        );
        assert_eq!(t.get("mmd2"), Some(0.25));
        assert_eq!(config_hash("abc"), "352441c2");
    }
}
