//! Expected patch-mean perturbation under i.i.d. and low-frequency noise:
//! closed forms, Monte Carlo estimates, the resolution-matching schedule
//! solver and sweep tables.
//!
//! For a patch of `M` values with `x0 ~ N(0, 1)` and
//! `x_t = sqrt(g) x0 + sqrt(1 - g) e`, the quantity is
//! `E[((1/M) sum (x0 - x_t))^2]`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, ScheduleSpec};
use crate::error::{invalid, Result};

pub const MIN_SAMPLES: usize = 1000;
pub const CHUNK: usize = 1 << 16;

/// `(2 / M)(1 - sqrt(g))`.
pub fn expected_perturbation_iid(m: usize, gamma: f64) -> f64 {
    2.0 / m as f64 * (1.0 - gamma.sqrt())
}

/// `(2 / M)(1 - sqrt(g)) + (1 - 1/M)(1 - g) alpha`.
pub fn expected_perturbation_lf(m: usize, gamma: f64, alpha: f64) -> f64 {
    let m = m as f64;
    2.0 / m * (1.0 - gamma.sqrt()) + (1.0 - 1.0 / m) * (1.0 - gamma) * alpha
}

/// Which elements share the low-frequency draw `e2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scope", content = "k")]
pub enum SharingScope {
    /// One draw for the whole patch.
    #[default]
    Patch,
    /// The patch splits into `k` equal channels with one draw each.
    Channels(usize),
}

impl SharingScope {
    fn groups(self, m: usize) -> Result<usize> {
        match self {
            SharingScope::Patch => Ok(1),
            SharingScope::Channels(k) if k >= 1 && m.is_multiple_of(k) => Ok(k),
            SharingScope::Channels(k) => Err(invalid("sharing scope", format!("{k} channels do not split a patch of {m}"))),
        }
    }
}

/// Closed form for any sharing scope:
/// `(1 - sqrt(g))^2 / M + (1 - g)((1 - alpha) / M + alpha / k)`.
pub fn expected_perturbation(m: usize, gamma: f64, alpha: f64, scope: SharingScope) -> Result<f64> {
    let k = scope.groups(m)? as f64;
    if k == 1.0 {
        return Ok(expected_perturbation_lf(m, gamma, alpha));
    }
    let mf = m as f64;
    Ok((1.0 - gamma.sqrt()).powi(2) / mf + (1.0 - gamma) * ((1.0 - alpha) / mf + alpha / k))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    /// Draws all `M` values of `x0` and the noise.
    #[default]
    Elementwise,
    /// Draws the patch means directly: `mean(x0) ~ N(0, 1/M)` and the
    /// i.i.d. noise mean `~ N(0, 1/M)`, plus the `k` shared draws. Same
    /// distribution, `O(k)` per sample.
    Aggregated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub m: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub scope: SharingScope,
    #[serde(default)]
    pub mode: McMode,
}

impl PerturbationConfig {
    pub fn new(m: usize, gamma: f64, alpha: f64, samples: usize, seed: u64) -> Self {
        PerturbationConfig { m, gamma, alpha, samples, seed, scope: SharingScope::Patch, mode: McMode::Elementwise }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("M", "must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", format!("{} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", format!("{} outside [0, 1]", self.alpha)));
        }
        if self.samples < MIN_SAMPLES {
            return Err(invalid("samples", format!("{} < {MIN_SAMPLES}", self.samples)));
        }
        self.scope.groups(self.m)?;
        Ok(())
    }

    pub fn closed_form(&self) -> Result<f64> {
        expected_perturbation(self.m, self.gamma, self.alpha, self.scope)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(chunk as u64);
    r
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One sample of the squared patch-mean perturbation.
fn draw(cfg: &PerturbationConfig, k: usize, rng: &mut ChaCha8Rng, scratch: &mut Vec<f64>) -> f64 {
    let (sg, sn) = (cfg.gamma.sqrt(), (1.0 - cfg.gamma).sqrt());
    let (a, b) = ((1.0 - cfg.alpha).sqrt(), cfg.alpha.sqrt());
    let m = cfg.m;
    let mean_diff = match cfg.mode {
        McMode::Elementwise => {
            scratch.clear();
            scratch.extend((0..k).map(|_| normal(rng)));
            let per = m / k;
            let mut acc = 0.0;
            for i in 0..m {
                let x0 = normal(rng);
                let e = a * normal(rng) + b * scratch[i / per];
                let xt = sg * x0 + sn * e;
                acc += x0 - xt;
            }
            acc / m as f64
        }
        McMode::Aggregated => {
            let inv = (1.0 / m as f64).sqrt();
            let x0_mean = inv * normal(rng);
            let e1_mean = inv * normal(rng);
            let shared_mean = (0..k).map(|_| normal(rng)).sum::<f64>() / k as f64;
            let e_mean = a * e1_mean + b * shared_mean;
            x0_mean - (sg * x0_mean + sn * e_mean)
        }
    };
    mean_diff * mean_diff
}

/// Chunked estimate: chunk `i` uses stream `i` of `seed`; chunk sums are
/// reduced in index order, so the result does not depend on scheduling.
pub fn monte_carlo_perturbation(cfg: &PerturbationConfig) -> Result<Estimate> {
    cfg.validate()?;
    let k = cfg.scope.groups(cfg.m)?;
    let chunks = cfg.samples.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(cfg.seed, c);
            let mut scratch = Vec::with_capacity(k);
            let count = CHUNK.min(cfg.samples - c * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let v = draw(cfg, k, &mut rng, &mut scratch);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let n = cfg.samples as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(Estimate { mean, se: (var / n).sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Feasibility {
    Feasible { gamma: f64 },
    /// `base = 1 - (M'/M)(1 - sqrt(g))` fell outside `[0, 1]`.
    Infeasible { base: f64 },
}

/// Signal level `g'` at patch size `M'` with the same i.i.d. perturbation as
/// `g` at `M`: `(1 - sqrt(g')) / (1 - sqrt(g)) = M' / M`.
pub fn schedule_feasibility(gamma: f64, m: usize, m_new: usize) -> Result<Feasibility> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid("gamma", format!("{gamma} outside (0, 1]")));
    }
    if m == 0 || m_new == 0 {
        return Err(invalid("M", "patch sizes must be at least 1"));
    }
    if m == m_new {
        return Ok(Feasibility::Feasible { gamma });
    }
    let base = 1.0 - m_new as f64 / m as f64 * (1.0 - gamma.sqrt());
    Ok(if (0.0..=1.0).contains(&base) { Feasibility::Feasible { gamma: base * base } } else { Feasibility::Infeasible { base } })
}

/// Where the sweep takes its signal level from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepLevel {
    Gamma(f64),
    /// `gamma_t` of a schedule.
    Timestep { schedule: ScheduleSpec, t: usize },
}

impl SweepLevel {
    pub fn gamma(&self) -> Result<f64> {
        match self {
            SweepLevel::Gamma(g) => Ok(*g),
            SweepLevel::Timestep { schedule, t } => {
                let s = build_schedule(schedule)?;
                if *t == 0 || *t > s.steps() {
                    return Err(invalid("t", format!("{t} outside 1..={}", s.steps())));
                }
                Ok(s.gamma(*t))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub alpha: f64,
    pub closed_form: f64,
    pub mc_estimate: f64,
    pub mc_se: f64,
}

/// One row per `(M, alpha)`; row `i` seeds its estimate with `seed + i`.
pub fn perturbation_sweep(
    resolutions: &[usize],
    level: &SweepLevel,
    alphas: &[f64],
    samples: usize,
    seed: u64,
    mode: McMode,
) -> Result<Vec<SweepRow>> {
    let gamma = level.gamma()?;
    let mut rows = Vec::with_capacity(resolutions.len() * alphas.len());
    for &m in resolutions {
        for &alpha in alphas {
            let cfg = PerturbationConfig {
                mode,
                ..PerturbationConfig::new(m, gamma, alpha, samples, seed.wrapping_add(rows.len() as u64))
            };
            let est = monte_carlo_perturbation(&cfg)?;
            rows.push(SweepRow { m, alpha, closed_form: cfg.closed_form()?, mc_estimate: est.mean, mc_se: est.se });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "M,alpha,closed_form,mc_estimate,mc_se";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.m, r.alpha, r.closed_form, r.mc_estimate, r.mc_se).expect("writing to a String");
    }
    s
}

/// Perturbation of real data: random patches of `patch` consecutive values
/// from `data`, mixed noise shared per patch, averaged over `samples` draws.
pub fn empirical_perturbation(data: &[f32], patch: usize, gamma: f64, alpha: f64, samples: usize, seed: u64) -> Result<Estimate> {
    if patch == 0 || patch > data.len() {
        return Err(invalid("patch", format!("{patch} outside 1..={}", data.len())));
    }
    PerturbationConfig::new(patch, gamma, alpha, samples, seed).validate()?;
    let (sg, sn) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let (a, b) = ((1.0 - alpha).sqrt(), alpha.sqrt());
    let mut rng = chunk_rng(seed, 0);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let start = rng.random_range(0..=data.len() - patch);
        let shared = normal(&mut rng);
        let mut acc = 0.0;
        for &x in &data[start..start + patch] {
            let e = a * normal(&mut rng) + b * shared;
            let x0 = x as f64;
            acc += x0 - (sg * x0 + sn * e);
        }
        let v = (acc / patch as f64).powi(2);
        s += v;
        s2 += v * v;
    }
    let n = samples as f64;
    let mean = s / n;
    Ok(Estimate { mean, se: (((s2 - n * mean * mean) / (n - 1.0)).max(0.0) / n).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iid_closed_form_cases() {
        assert_eq!(expected_perturbation_iid(7, 1.0), 0.0);
        assert_eq!(expected_perturbation_iid(1, 0.25), 1.0);
        let a = expected_perturbation_iid(64, 0.3);
        assert!((expected_perturbation_iid(128, 0.3) - a / 2.0).abs() < 1e-15);
    }

    #[test]
    fn lf_closed_form_cases() {
        for m in [1, 5, 4096] {
            assert_eq!(expected_perturbation_lf(m, 0.4, 0.0), expected_perturbation_iid(m, 0.4));
        }
        assert_eq!(expected_perturbation_lf(1, 0.4, 0.7), expected_perturbation_iid(1, 0.4));
        let v = expected_perturbation_lf(4096, 0.65, 0.5);
        let hand = 2.0 / 4096.0 * (1.0 - 0.65f64.sqrt()) + 4095.0 / 4096.0 * 0.35 * 0.5;
        assert!((v - hand).abs() < 1e-15);
        assert!((v - 0.175052).abs() < 1e-6);
    }

    #[test]
    fn lf_dominates_iid() {
        for m in [1, 2, 16, 300] {
            for g in [0.05, 0.5, 1.0] {
                for a in [0.0, 0.2, 1.0] {
                    let (lf, iid) = (expected_perturbation_lf(m, g, a), expected_perturbation_iid(m, g));
                    assert!(lf >= iid);
                    let equal = a == 0.0 || m == 1 || g == 1.0;
                    assert_eq!(lf == iid, equal, "m={m} g={g} a={a}");
                }
            }
        }
    }

    #[test]
    fn channel_scope_closed_form() {
        // one channel equals the patch scope
        let p = expected_perturbation(12, 0.3, 0.6, SharingScope::Patch).unwrap();
        let c1 = expected_perturbation(12, 0.3, 0.6, SharingScope::Channels(1)).unwrap();
        assert_eq!(p, c1);
        // M channels of one value each behave like i.i.d. noise
        let cm = expected_perturbation(12, 0.3, 0.6, SharingScope::Channels(12)).unwrap();
        assert!((cm - expected_perturbation_iid(12, 0.3)).abs() < 1e-15);
        assert!(expected_perturbation(12, 0.3, 0.6, SharingScope::Channels(5)).is_err());
    }

    #[test]
    fn clean_level_is_exactly_zero() {
        for mode in [McMode::Elementwise, McMode::Aggregated] {
            let cfg = PerturbationConfig { mode, ..PerturbationConfig::new(16, 1.0, 0.5, 2000, 1) };
            assert_eq!(monte_carlo_perturbation(&cfg).unwrap(), Estimate { mean: 0.0, se: 0.0 });
        }
    }

    #[test]
    fn feasibility_cases() {
        assert_eq!(schedule_feasibility(0.37, 4096, 4096).unwrap(), Feasibility::Feasible { gamma: 0.37 });
        match schedule_feasibility(0.048, 64 * 64, 32 * 32 * 32).unwrap() {
            Feasibility::Infeasible { base } => assert!((base - (1.0 - 8.0 * (1.0 - 0.048f64.sqrt()))).abs() < 1e-12 && (base + 5.25).abs() < 0.01),
            f => panic!("{f:?}"),
        }
        match schedule_feasibility(0.25, 64, 32).unwrap() {
            Feasibility::Feasible { gamma } => assert!((gamma - 0.5625).abs() < 1e-15),
            f => panic!("{f:?}"),
        }
        assert!(schedule_feasibility(0.0, 1, 1).is_err());
    }

    #[test]
    fn validation() {
        assert!(PerturbationConfig::new(0, 0.5, 0.5, 5000, 0).validate().is_err());
        assert!(PerturbationConfig::new(4, 0.5, 0.5, 999, 0).validate().is_err());
        assert!(PerturbationConfig::new(4, 0.5, 1.5, 5000, 0).validate().is_err());
    }
}
