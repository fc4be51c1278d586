//! Caption-consistency filtering: embed the 8 view captions and the summary,
//! score each object by the mean and minimum pairwise similarity, and keep
//! objects that clear both thresholds.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::text::fnv1a64;

pub const VIEW_CAPTIONS: usize = 8;
pub const CAPTIONS: usize = VIEW_CAPTIONS + 1;
pub const PAIRS: usize = CAPTIONS * (CAPTIONS - 1) / 2;
pub const TOY_DIM: usize = 256;
/// Arbitrary starting points; override per run.
pub const DEFAULT_MEAN_THRESHOLD: f64 = 0.85;
pub const DEFAULT_MIN_THRESHOLD: f64 = 0.60;
const SYMMETRY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionSet {
    pub id: String,
    pub views: Vec<String>,
    pub summary: String,
}

impl CaptionSet {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(invalid("id", "empty object id"));
        }
        if self.views.len() != VIEW_CAPTIONS {
            return Err(invalid("views", format!("object `{}` has {} view captions, expected {VIEW_CAPTIONS}", self.id, self.views.len())));
        }
        if self.captions().any(|c| c.is_empty()) {
            return Err(invalid("caption", format!("object `{}` has an empty caption", self.id)));
        }
        Ok(())
    }

    /// Views first, summary last.
    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.views.iter().map(String::as_str).chain(std::iter::once(self.summary.as_str()))
    }
}

/// Deterministic text embedding with unit norm.
pub trait EmbeddingProvider: Sync {
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Lowercase, split on whitespace, count FNV-1a 64 hashes mod 256, L2
/// normalise.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashedBagOfWords;

impl EmbeddingProvider for HashedBagOfWords {
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let mut v = vec![0.0; TOY_DIM];
        for tok in text.to_lowercase().split_whitespace() {
            v[(fnv1a64(tok.as_bytes()) % TOY_DIM as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(format!("no tokens in caption {text:?}"));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

pub type SimMatrix = [[f64; CAPTIONS]; CAPTIONS];

pub fn similarity_matrix(provider: &dyn EmbeddingProvider, set: &CaptionSet) -> Result<SimMatrix> {
    set.validate()?;
    let provider_err = |detail: String| CoreError::Provider { id: set.id.clone(), detail };
    let emb = set.captions().map(|c| provider.embed(c).map_err(provider_err)).collect::<Result<Vec<_>>>()?;
    if let Some(e) = emb.iter().find(|e| e.len() != emb[0].len()) {
        return Err(provider_err(format!("embedding sizes {} and {} differ", emb[0].len(), e.len())));
    }
    let mut s = [[0.0; CAPTIONS]; CAPTIONS];
    for i in 0..CAPTIONS {
        s[i][i] = 1.0;
        for j in i + 1..CAPTIONS {
            let d = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum::<f64>();
            s[i][j] = d;
            s[j][i] = d;
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub mean_sim: f64,
    pub min_sim: f64,
}

/// Mean and minimum over the 36 strictly upper-triangle entries.
pub fn quality_scores(s: &SimMatrix) -> Result<QualityScore> {
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    for i in 0..CAPTIONS {
        for j in i + 1..CAPTIONS {
            if (s[i][j] - s[j][i]).abs() > SYMMETRY_TOL {
                return Err(invalid("similarity matrix", format!("entries ({i},{j}) and ({j},{i}) differ: {} vs {}", s[i][j], s[j][i])));
            }
            sum += s[i][j];
            min = min.min(s[i][j]);
        }
    }
    Ok(QualityScore { mean_sim: sum / PAIRS as f64, min_sim: min })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mean: f64,
    pub min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { mean: DEFAULT_MEAN_THRESHOLD, min: DEFAULT_MIN_THRESHOLD }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mean threshold", self.mean), ("min threshold", self.min)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(invalid(name, format!("{v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub id: String,
    pub score: Option<QualityScore>,
    pub kept: bool,
    /// Empty when kept; `mean_sim`, `min_sim`, `mean_sim+min_sim` or the
    /// provider error.
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub rows: Vec<FilterRow>,
}

impl FilterReport {
    pub fn kept(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| r.kept).map(|r| r.id.as_str()).collect()
    }

    pub fn dropped(&self) -> Vec<(&str, &str)> {
        self.rows.iter().filter(|r| !r.kept).map(|r| (r.id.as_str(), r.reason.as_str())).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,mean_sim,min_sim,kept,reason\n");
        for r in &self.rows {
            let (mean, min) = r.score.map_or((String::new(), String::new()), |q| (q.mean_sim.to_string(), q.min_sim.to_string()));
            writeln!(s, "{},{mean},{min},{},{}", csv_field(&r.id), r.kept, csv_field(&r.reason)).expect("writing to a String");
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn judge(score: QualityScore, th: Thresholds) -> String {
    let mut why = Vec::new();
    if score.mean_sim < th.mean {
        why.push("mean_sim");
    }
    if score.min_sim < th.min {
        why.push("min_sim");
    }
    why.join("+")
}

/// Rows come back sorted by object id.
pub fn filter(sets: &[CaptionSet], provider: &dyn EmbeddingProvider, th: Thresholds) -> Result<FilterReport> {
    th.validate()?;
    let mut rows: Vec<FilterRow> = sets
        .par_iter()
        .map(|set| match similarity_matrix(provider, set).and_then(|s| quality_scores(&s)) {
            Ok(score) => {
                let reason = judge(score, th);
                FilterRow { id: set.id.clone(), score: Some(score), kept: reason.is_empty(), reason }
            }
            Err(e) => FilterRow { id: set.id.clone(), score: None, kept: false, reason: e.to_string() },
        })
        .collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = rows.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(invalid("id", format!("duplicate object id `{}`", w[0].id)));
    }
    Ok(FilterReport { rows })
}

/// A directory of `*.json` documents (one object each) or a JSON-lines file.
pub fn load_caption_sets(path: &Path) -> Result<Vec<CaptionSet>> {
    let parse = |text: &str, p: &Path| serde_json::from_str::<CaptionSet>(text).map_err(|source| CoreError::Json { path: p.to_path_buf(), source });
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files.iter().map(|p| parse(&std::fs::read_to_string(p).map_err(io_err(p))?, p)).collect()
    } else {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| parse(l, path)).collect()
    }
}
