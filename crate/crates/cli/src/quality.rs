//! `filter` and `metrics`.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};
use voldiff_core::filter::{filter, load_caption_sets, HashedBagOfWords, Thresholds, DEFAULT_MEAN_THRESHOLD, DEFAULT_MIN_THRESHOLD};
use voldiff_core::raster::{psnr, ssim, Image};
use voldiff_core::volume::FeatureVolume;

use crate::config::{required, resolve, Common};
use crate::run::RunDir;

// filter

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Directory of per-object caption JSON files, or a JSON-lines file.
    pub input: Option<PathBuf>,
    pub mean_threshold: f64,
    pub min_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { input: None, mean_threshold: DEFAULT_MEAN_THRESHOLD, min_threshold: DEFAULT_MIN_THRESHOLD }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct FilterArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    mean_threshold: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    min_threshold: Option<f64>,
}

pub fn filter_cmd(common: &Common, args: &FilterArgs) -> Result<()> {
    let r = resolve::<FilterConfig>(common, args)?;
    let c = &r.config;
    let sets = load_caption_sets(required(&c.input, "input")?)?;
    let report = filter(&sets, &HashedBagOfWords, Thresholds { mean: c.mean_threshold, min: c.min_threshold })?;
    let run = RunDir::create("filter", common.out.as_deref(), r.snapshot.clone())?;
    run.write("report.csv", report.to_csv())?;
    let kept = report.kept();
    run.write("kept.txt", kept.iter().map(|k| format!("{k}\n")).collect::<String>())?;
    eprintln!("kept {} of {} objects", kept.len(), report.rows.len());
    run.finish()?;
    Ok(())
}

// metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct MetricsConfig {
    /// IMGF image or VOLB volume.
    pub pred: Option<PathBuf>,
    #[serde(rename = "ref")]
    pub reference: Option<PathBuf>,
}


#[derive(Args, Debug, Serialize)]
pub struct MetricsArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long = "ref")]
    #[serde(rename = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    Image { psnr: f64, ssim: f64, mse: f64 },
    Volume { mse: f64, rmse: f64 },
}

fn is_volume(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "volb")
}

pub fn compute_metrics(pred: &Path, reference: &Path) -> Result<Metrics> {
    if is_volume(pred) || is_volume(reference) {
        let mse = FeatureVolume::load(pred)?.mse(&FeatureVolume::load(reference)?)?;
        return Ok(Metrics::Volume { mse, rmse: mse.sqrt() });
    }
    let (a, b) = (Image::load(pred)?, Image::load(reference)?);
    Ok(Metrics::Image { psnr: psnr(&a, &b)?, ssim: ssim(&a, &b)?, mse: a.mse(&b)? })
}

pub fn metrics_cmd(common: &Common, args: &MetricsArgs) -> Result<()> {
    let r = resolve::<MetricsConfig>(common, args)?;
    let c = &r.config;
    let m = compute_metrics(required(&c.pred, "pred")?, required(&c.reference, "ref")?)?;
    let line = serde_json::to_string(&m)?;
    println!("{line}");
    let mut run = RunDir::create("metrics", common.out.as_deref(), r.snapshot.clone())?;
    run.log(&m)?;
    run.finish()?;
    Ok(())
}
