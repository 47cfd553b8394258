//! Cluster-multiplier bootstrap over influence functions.
//!
//! Every estimator in this crate is asymptotically linear: an estimate can be
//! written as its point value plus a sum of per-unit influence contributions.
//! The multiplier bootstrap perturbs that sum with mean-zero, unit-variance
//! cluster-level draws and reads standard errors off the interquartile range
//! of the perturbed estimates, which is robust to the occasional wild draw.
//! Simultaneous confidence bands use the sup-t critical value over the
//! parameter family.
//!
//! # References
//!
//! - Chernozhukov, Chetverikov & Kato (2013), *Annals of Statistics* 41(6),
//!   for multiplier-bootstrap sup-norm approximations.
//! - Mammen (1993), *Annals of Statistics* 21(1), for the asymmetric
//!   two-point multiplier law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// `z(0.75) - z(0.25)`: the normal interquartile range that converts a
/// bootstrap IQR into a standard error.
pub const NORMAL_IQR: f64 = 1.348_979_500_392_163_4;

/// Multiplier law for the bootstrap weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Multiplier {
    /// Symmetric ±1 with equal probability.
    #[default]
    Rademacher,
    /// Mammen's two-point law with mean zero and unit second and third
    /// moments.
    Mammen,
}

impl Multiplier {
    /// Draws one multiplier.
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Multiplier::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Multiplier::Mammen => {
                // v = (1 - sqrt(5))/2 with probability (1 + sqrt(5))/(2 sqrt(5)).
                let s5 = 5.0_f64.sqrt();
                if rng.random::<f64>() < (s5 + 1.0) / (2.0 * s5) {
                    (1.0 - s5) / 2.0
                } else {
                    (1.0 + s5) / 2.0
                }
            }
        }
    }
}

/// A family of parameters sharing one sample: point estimates plus an
/// influence matrix laid out `[parameter][unit]`. Cluster assignment is by
/// sorted key, so results are invariant to the order units arrive in.
#[derive(Debug, Clone)]
pub struct ParamFamily {
    /// Parameter labels, used in reports.
    pub names: Vec<String>,
    /// Point estimates, one per parameter.
    pub estimates: Vec<f64>,
    /// Influence contributions, `influence[p][i]` for parameter `p`, unit `i`.
    pub influence: Vec<Vec<f64>>,
    /// Cluster index of each unit, dense in `0..n_clusters`.
    pub clusters: Vec<usize>,
    /// Number of distinct clusters.
    pub n_clusters: usize,
}

impl ParamFamily {
    /// Builds a family, deriving dense cluster indices from per-unit keys by
    /// sorting the distinct keys.
    pub fn new(
        names: Vec<String>,
        estimates: Vec<f64>,
        influence: Vec<Vec<f64>>,
        cluster_keys: &[String],
    ) -> Result<Self> {
        if names.len() != estimates.len() || names.len() != influence.len() {
            return Err(Error::Validation(format!(
                "parameter family shape mismatch: {} names, {} estimates, {} influence rows",
                names.len(),
                estimates.len(),
                influence.len()
            )));
        }
        for row in &influence {
            if row.len() != cluster_keys.len() {
                return Err(Error::Validation(format!(
                    "influence row has {} entries for {} units",
                    row.len(),
                    cluster_keys.len()
                )));
            }
        }
        let mut sorted: Vec<&String> = cluster_keys.iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        let lookup: std::collections::BTreeMap<&String, usize> =
            sorted.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let clusters = cluster_keys.iter().map(|k| lookup[k]).collect();
        Ok(ParamFamily {
            names,
            estimates,
            influence,
            clusters,
            n_clusters: sorted.len(),
        })
    }

    /// Number of parameters.
    pub fn n_params(&self) -> usize {
        self.estimates.len()
    }

    /// Number of units.
    pub fn n_units(&self) -> usize {
        self.clusters.len()
    }

    /// Collapses influence to cluster level: `[parameter][cluster]` sums.
    fn cluster_influence(&self) -> Vec<Vec<f64>> {
        self.influence
            .iter()
            .map(|row| {
                let mut out = vec![0.0; self.n_clusters];
                for (i, &c) in self.clusters.iter().enumerate() {
                    out[c] += row[i];
                }
                out
            })
            .collect()
    }
}

/// Bootstrap settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of multiplier draws.
    pub draws: usize,
    /// Confidence level for intervals and bands, e.g. 0.95.
    pub level: f64,
    /// Multiplier law.
    pub multiplier: Multiplier,
    /// Base seed; each draw derives its own stream.
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            draws: 999,
            level: 0.95,
            multiplier: Multiplier::Rademacher,
            seed: 0,
        }
    }
}

/// Bootstrap output for a parameter family.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    /// Parameter labels.
    pub names: Vec<String>,
    /// Point estimates.
    pub estimates: Vec<f64>,
    /// IQR-based standard errors.
    pub se: Vec<f64>,
    /// Pointwise confidence interval bounds.
    pub ci_lower: Vec<f64>,
    /// Pointwise confidence interval bounds.
    pub ci_upper: Vec<f64>,
    /// Simultaneous band bounds.
    pub band_lower: Vec<f64>,
    /// Simultaneous band bounds.
    pub band_upper: Vec<f64>,
    /// Sup-t critical value; at least the pointwise normal quantile, so the
    /// band always contains the pointwise interval.
    pub critical_value: f64,
    /// Two-sided normal quantile for the pointwise intervals.
    pub z: f64,
    /// Confidence level.
    pub level: f64,
    /// Draws retained (finite in every coordinate).
    pub draws_used: usize,
    /// Draws discarded as non-finite.
    pub draws_excluded: usize,
    /// Retained perturbed estimates, `[draw][parameter]`, in draw order.
    pub draws: Vec<Vec<f64>>,
}

/// SplitMix64 finalizer used to derive independent per-draw seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for one bootstrap draw (or simulation replication) from a
/// base seed and an index. Deterministic and order-free, so draws can run in
/// parallel without changing results.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Perturbed estimates for every draw: `out[b][p] = est[p] + sum_c v_bc psi[p][c]`.
fn perturbed_draws(family: &ParamFamily, cfg: &BootstrapConfig) -> Vec<Vec<f64>> {
    let cluster_psi = family.cluster_influence();
    (0..cfg.draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, b as u64));
            let v: Vec<f64> = (0..family.n_clusters)
                .map(|_| cfg.multiplier.draw(&mut rng))
                .collect();
            cluster_psi
                .iter()
                .zip(&family.estimates)
                .map(|(psi, &est)| {
                    est + psi.iter().zip(&v).map(|(p, m)| p * m).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Linear-interpolation quantile of a sorted slice.
/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Runs the multiplier bootstrap on a parameter family.
///
/// Standard errors are `IQR / (z(0.75) - z(0.25))` over the perturbed
/// estimates. Draws with any non-finite coordinate are discarded; more than
/// ten percent discarded is an error. The simultaneous critical value is the
/// `level` quantile of the max-t statistic, floored at the pointwise normal
/// quantile.
pub fn bootstrap(family: &ParamFamily, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    if cfg.draws < 100 {
        return Err(Error::Validation(format!(
            "bootstrap band construction needs at least 100 draws, got {}",
            cfg.draws
        )));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Validation(format!(
            "confidence level {} outside (0, 1)",
            cfg.level
        )));
    }
    let p = family.n_params();
    let all = perturbed_draws(family, cfg);
    let kept: Vec<Vec<f64>> = all
        .into_iter()
        .filter(|d| d.iter().all(|x| x.is_finite()))
        .collect();
    let excluded = cfg.draws - kept.len();
    if excluded * 10 > cfg.draws {
        return Err(Error::DegenerateDraws {
            excluded,
            total: cfg.draws,
        });
    }
    if kept.is_empty() {
        return Err(Error::DegenerateDraws {
            excluded,
            total: cfg.draws,
        });
    }

    let mut se = vec![0.0; p];
    for j in 0..p {
        let mut dev: Vec<f64> = kept.iter().map(|d| d[j] - family.estimates[j]).collect();
        dev.sort_unstable_by(|a, b| a.total_cmp(b));
        let iqr = quantile_sorted(&dev, 0.75) - quantile_sorted(&dev, 0.25);
        se[j] = iqr / NORMAL_IQR;
    }

    let z = normal_quantile(0.5 + cfg.level / 2.0);

    // Max-t over parameters with positive spread; zero-spread parameters are
    // degenerate points that contribute nothing to the supremum.
    let mut max_t: Vec<f64> = kept
        .iter()
        .map(|d| {
            let mut m: f64 = 0.0;
            for j in 0..p {
                if se[j] > 0.0 {
                    m = m.max(((d[j] - family.estimates[j]) / se[j]).abs());
                }
            }
            m
        })
        .collect();
    max_t.sort_unstable_by(|a, b| a.total_cmp(b));
    let critical_value = quantile_sorted(&max_t, cfg.level).max(z);

    let mut ci_lower = vec![0.0; p];
    let mut ci_upper = vec![0.0; p];
    let mut band_lower = vec![0.0; p];
    let mut band_upper = vec![0.0; p];
    for j in 0..p {
        ci_lower[j] = family.estimates[j] - z * se[j];
        ci_upper[j] = family.estimates[j] + z * se[j];
        band_lower[j] = family.estimates[j] - critical_value * se[j];
        band_upper[j] = family.estimates[j] + critical_value * se[j];
    }

    Ok(BootstrapResult {
        names: family.names.clone(),
        estimates: family.estimates.clone(),
        se,
        ci_lower,
        ci_upper,
        band_lower,
        band_upper,
        critical_value,
        z,
        level: cfg.level,
        draws_used: kept.len(),
        draws_excluded: excluded,
        draws: kept,
    })
}

/// Pre-trend test output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrendTest {
    /// Sup-t statistic over the placebo family.
    pub statistic: f64,
    /// Bootstrap p-value of the joint test.
    pub p_value: f64,
    /// Parameter labels.
    pub names: Vec<String>,
    /// Placebo point estimates.
    pub estimates: Vec<f64>,
    /// Bootstrap standard errors.
    pub se: Vec<f64>,
    /// Per-parameter bootstrap-t p-values.
    pub p_values: Vec<f64>,
}

/// Joint and per-parameter tests that the placebo family is zero.
///
/// The joint statistic is the largest studentized placebo; its p-value is the
/// share of bootstrap draws whose max-t statistic is at least as large. A
/// family of exactly-zero placebos yields p-values of one.
pub fn pretrend_test(family: &ParamFamily, cfg: &BootstrapConfig) -> Result<PretrendTest> {
    let boot = bootstrap(family, cfg)?;
    let p = family.n_params();

    let mut statistic: f64 = 0.0;
    for j in 0..p {
        let t = if boot.se[j] > 0.0 {
            (family.estimates[j] / boot.se[j]).abs()
        } else if family.estimates[j] == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        statistic = statistic.max(t);
    }

    let exceed = boot
        .draws
        .iter()
        .filter(|d| {
            let mut m: f64 = 0.0;
            for j in 0..p {
                if boot.se[j] > 0.0 {
                    m = m.max(((d[j] - family.estimates[j]) / boot.se[j]).abs());
                }
            }
            m >= statistic
        })
        .count();
    let p_value = if statistic == 0.0 {
        1.0
    } else {
        exceed as f64 / boot.draws_used as f64
    };

    let mut p_values = vec![0.0; p];
    for j in 0..p {
        let hits = boot
            .draws
            .iter()
            .filter(|d| (d[j] - family.estimates[j]).abs() >= family.estimates[j].abs())
            .count();
        p_values[j] = if family.estimates[j] == 0.0 {
            1.0
        } else {
            hits as f64 / boot.draws_used as f64
        };
    }

    Ok(PretrendTest {
        statistic,
        p_value,
        names: family.names.clone(),
        estimates: family.estimates.clone(),
        se: boot.se,
        p_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i:04}")).collect()
    }

    #[test]
    fn zero_influence_gives_zero_se_and_degenerate_band() {
        let fam = ParamFamily::new(
            vec!["a".into()],
            vec![2.5],
            vec![vec![0.0; 40]],
            &keys(40),
        )
        .unwrap();
        let r = bootstrap(&fam, &BootstrapConfig { draws: 199, ..Default::default() }).unwrap();
        assert_eq!(r.se[0], 0.0);
        assert_eq!(r.ci_lower[0], 2.5);
        assert_eq!(r.band_upper[0], 2.5);
        assert!(r.critical_value >= r.z);
    }

    #[test]
    fn se_matches_influence_scale_and_band_contains_ci() {
        // theta* - theta = sum_i v_i psi_i with psi_i = c: variance = n c^2.
        let n = 400;
        let c = 0.05;
        let fam = ParamFamily::new(
            vec!["a".into()],
            vec![1.0],
            vec![vec![c; n]],
            &keys(n),
        )
        .unwrap();
        let cfg = BootstrapConfig { draws: 4000, seed: 7, ..Default::default() };
        let r = bootstrap(&fam, &cfg).unwrap();
        let want = c * (n as f64).sqrt();
        assert!(
            (r.se[0] - want).abs() < 0.12 * want,
            "se {} vs {}",
            r.se[0],
            want
        );
        assert!(r.band_lower[0] <= r.ci_lower[0] && r.ci_upper[0] <= r.band_upper[0]);
        // One parameter: the sup-t quantile is near z, and clamping keeps it >= z.
        assert!(r.critical_value >= r.z && r.critical_value < r.z * 1.15);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let n = 120;
        let influence: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() / 10.0).collect();
        let fam = ParamFamily::new(
            vec!["a".into(), "b".into()],
            vec![0.3, -0.2],
            vec![influence.clone(), influence.iter().map(|x| x * -0.5).collect()],
            &keys(n),
        )
        .unwrap();
        let cfg = BootstrapConfig { draws: 257, seed: 11, ..Default::default() };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| bootstrap(&fam, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.se, b.se);
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.critical_value, b.critical_value);
    }

    #[test]
    fn cluster_assignment_is_by_sorted_key_not_position() {
        // Two layouts of the same data; unit order differs, keys identical.
        let psi = [0.4, -0.3, 0.2, 0.1];
        let k: Vec<String> = ["b", "d", "a", "c"].iter().map(|s| s.to_string()).collect();
        let fam1 = ParamFamily::new(
            vec!["a".into()],
            vec![0.0],
            vec![psi.to_vec()],
            &k,
        )
        .unwrap();
        // Sort units by key; influence permutes along.
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by_key(|&i| k[i].clone());
        let k2: Vec<String> = order.iter().map(|&i| k[i].clone()).collect();
        let psi2: Vec<f64> = order.iter().map(|&i| psi[i]).collect();
        let fam2 = ParamFamily::new(vec!["a".into()], vec![0.0], vec![psi2], &k2).unwrap();
        let cfg = BootstrapConfig { draws: 128, seed: 3, ..Default::default() };
        let r1 = bootstrap(&fam1, &cfg).unwrap();
        let r2 = bootstrap(&fam2, &cfg).unwrap();
        assert_eq!(r1.draws, r2.draws);
    }

    #[test]
    fn mammen_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut m1, mut m2, mut m3) = (0.0, 0.0, 0.0);
        let n = 200_000;
        for _ in 0..n {
            let v = Multiplier::Mammen.draw(&mut rng);
            m1 += v;
            m2 += v * v;
            m3 += v * v * v;
        }
        let n = n as f64;
        assert!((m1 / n).abs() < 0.01);
        assert!((m2 / n - 1.0).abs() < 0.02);
        assert!((m3 / n - 1.0).abs() < 0.03);
    }

    #[test]
    fn all_zero_placebos_give_unit_p_values() {
        let fam = ParamFamily::new(
            vec!["p1".into(), "p2".into()],
            vec![0.0, 0.0],
            vec![vec![0.0; 30], vec![0.0; 30]],
            &keys(30),
        )
        .unwrap();
        let t = pretrend_test(&fam, &BootstrapConfig { draws: 199, ..Default::default() }).unwrap();
        assert_eq!(t.p_value, 1.0);
        assert!(t.p_values.iter().all(|&p| p == 1.0));
        assert_eq!(t.statistic, 0.0);
    }

    #[test]
    fn pretrend_detects_a_large_violation() {
        // Placebo estimate far from zero relative to its influence spread.
        let n = 200;
        let psi: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 300.0).collect();
        let fam = ParamFamily::new(vec!["p".into()], vec![1.0], vec![psi], &keys(n)).unwrap();
        let t = pretrend_test(&fam, &BootstrapConfig { draws: 999, seed: 9, ..Default::default() })
            .unwrap();
        assert!(t.p_value < 0.01, "p = {}", t.p_value);
    }
}
