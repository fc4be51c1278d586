//! `noise-lab verify | sweep | feasibility`.

use anyhow::{bail, Result};
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use voldiff_core::diffusion::{ScheduleKind, ScheduleSpec};
use voldiff_core::noiselab::{
    empirical_perturbation, monte_carlo_perturbation, perturbation_sweep, schedule_feasibility, sweep_csv, Feasibility, McMode,
    PerturbationConfig, SharingScope, SweepLevel,
};
use voldiff_core::scene::{bake_volume, scene_gen};

use crate::config::{resolve, Common};
use crate::run::RunDir;

#[derive(Subcommand, Debug)]
pub enum NoiseCmd {
    /// Monte Carlo estimate of one configuration against its closed form.
    Verify(VerifyArgs),
    /// Closed form and Monte Carlo over patch sizes and noise mixes.
    Sweep(SweepArgs),
    /// Signal level at a new patch size with the same i.i.d. perturbation.
    Feasibility(FeasibilityArgs),
}

pub fn noise_cmd(common: &Common, cmd: &NoiseCmd) -> Result<()> {
    match cmd {
        NoiseCmd::Verify(a) => verify(common, a),
        NoiseCmd::Sweep(a) => sweep(common, a),
        NoiseCmd::Feasibility(a) => feasibility(common, a),
    }
}

fn scope(channels: usize) -> SharingScope {
    if channels == 0 {
        SharingScope::Patch
    } else {
        SharingScope::Channels(channels)
    }
}

fn emit(run: &RunDir, name: &str, csv: &str) -> Result<()> {
    print!("{csv}");
    run.write(name, csv)?;
    Ok(())
}

// verify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub m: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub samples: usize,
    /// Channels sharing one low-frequency draw each; 0 shares it over the patch.
    pub channels: usize,
    pub mode: McMode,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { seed: 0, m: 64, gamma: 0.5, alpha: 0.5, samples: 1_000_000, channels: 0, mode: McMode::Elementwise }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
}

fn verify(common: &Common, args: &VerifyArgs) -> Result<()> {
    let r = resolve::<VerifyConfig>(common, args)?;
    let c = &r.config;
    let cfg = PerturbationConfig { scope: scope(c.channels), mode: c.mode, ..PerturbationConfig::new(c.m, c.gamma, c.alpha, c.samples, c.seed) };
    let est = monte_carlo_perturbation(&cfg)?;
    let cf = cfg.closed_form()?;
    let z = if est.se > 0.0 { (est.mean - cf) / est.se } else { 0.0 };
    let run = RunDir::create("noise-lab-verify", common.out.as_deref(), r.snapshot.clone())?;
    let csv = format!(
        "M,gamma,alpha,channels,closed_form,mc_estimate,mc_se,z\n{},{},{},{},{},{},{},{}\n",
        c.m, c.gamma, c.alpha, c.channels, cf, est.mean, est.se, z
    );
    emit(&run, "verify.csv", &csv)?;
    run.finish()?;
    Ok(())
}

// sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seed: u64,
    /// Patch sizes `M`.
    pub resolutions: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Fixed signal level; overrides `t`.
    pub gamma: Option<f64>,
    /// Timestep whose `gamma_t` is used when `gamma` is absent.
    pub t: usize,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub samples: usize,
    pub mode: McMode,
    /// Baked scenes for the empirical table; 0 skips it.
    pub empirical_scenes: usize,
    pub empirical_n: usize,
    pub empirical_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let s = ScheduleSpec::default();
        SweepConfig {
            seed: 0,
            resolutions: vec![16, 64, 256, 1024, 4096],
            alphas: vec![0.0, 0.5],
            gamma: None,
            t: 200,
            schedule: s.kind,
            timesteps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            samples: 100_000,
            mode: McMode::Aggregated,
            empirical_scenes: 0,
            empirical_n: 32,
            empirical_samples: 20_000,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    resolutions: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    empirical_scenes: Option<usize>,
    #[arg(long)]
    empirical_n: Option<usize>,
    #[arg(long)]
    empirical_samples: Option<usize>,
}

fn sweep(common: &Common, args: &SweepArgs) -> Result<()> {
    let r = resolve::<SweepConfig>(common, args)?;
    let c = &r.config;
    if c.resolutions.is_empty() || c.alphas.is_empty() {
        bail!("`resolutions` and `alphas` must be non-empty");
    }
    let level = match c.gamma {
        Some(g) => SweepLevel::Gamma(g),
        None => SweepLevel::Timestep {
            schedule: ScheduleSpec { kind: c.schedule, steps: c.timesteps, beta_start: c.beta_start, beta_end: c.beta_end, ..ScheduleSpec::default() },
            t: c.t,
        },
    };
    let gamma = level.gamma()?;
    eprintln!("gamma = {gamma}");
    let rows = perturbation_sweep(&c.resolutions, &level, &c.alphas, c.samples, c.seed, c.mode)?;
    let run = RunDir::create("noise-lab-sweep", common.out.as_deref(), r.snapshot.clone())?;
    emit(&run, "sweep.csv", &sweep_csv(&rows))?;
    if c.empirical_scenes > 0 {
        let mut data = Vec::new();
        for s in scene_gen(c.seed, c.empirical_scenes, 2)? {
            data.extend_from_slice(bake_volume(&s, c.empirical_n, 4)?.data());
        }
        let mut csv = String::from("M,alpha,empirical,empirical_se\n");
        for (i, &m) in c.resolutions.iter().enumerate() {
            if m > data.len() {
                continue;
            }
            for (j, &a) in c.alphas.iter().enumerate() {
                let seed = c.seed.wrapping_add((i * c.alphas.len() + j) as u64);
                let est = empirical_perturbation(&data, m, gamma, a, c.empirical_samples, seed)?;
                writeln!(csv, "{m},{a},{},{}", est.mean, est.se)?;
            }
        }
        run.write("empirical.csv", &csv)?;
    }
    run.finish()?;
    Ok(())
}

// feasibility

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeasibilityConfig {
    pub gamma: f64,
    pub m: usize,
    pub m_new: usize,
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        FeasibilityConfig { gamma: 0.048, m: 64 * 64, m_new: 32 * 32 * 32 }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct FeasibilityArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    m_new: Option<usize>,
}

fn feasibility(common: &Common, args: &FeasibilityArgs) -> Result<()> {
    let r = resolve::<FeasibilityConfig>(common, args)?;
    let c = &r.config;
    let f = schedule_feasibility(c.gamma, c.m, c.m_new)?;
    let (status, g, base) = match f {
        Feasibility::Feasible { gamma } => ("feasible", gamma.to_string(), gamma.sqrt().to_string()),
        Feasibility::Infeasible { base } => ("infeasible", String::new(), base.to_string()),
    };
    let run = RunDir::create("noise-lab-feasibility", common.out.as_deref(), r.snapshot.clone())?;
    let csv = format!("gamma,M,M_new,status,gamma_new,base\n{},{},{},{status},{g},{base}\n", c.gamma, c.m, c.m_new);
    emit(&run, "feasibility.csv", &csv)?;
    run.finish()?;
    Ok(())
}
