//! Trace analytics: per-step visual-attention aggregation, per-image-token
//! profiles, Gaussian kernel density estimation, first-occurrence label
//! filtering, and per-class density comparisons.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::trace::{LabeledToken, TokenClass, TraceRecord};

/// Head-mean image mass averaged over recorded layers, per step.
fn series_by_step(records: &[TraceRecord]) -> Result<BTreeMap<usize, f64>> {
    if records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut by_step: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for record in records {
        let entry = by_step.entry(record.step).or_insert((0.0, 0));
        entry.0 += record.mass;
        entry.1 += 1;
    }
    Ok(by_step
        .into_iter()
        .map(|(step, (sum, n))| (step, sum / n as f64))
        .collect())
}

/// Mean visual attention per generated step, in step order: for each step,
/// the mean over layers of the head-mean image mass.
pub fn visual_attention_series(records: &[TraceRecord]) -> Result<Vec<f64>> {
    Ok(series_by_step(records)?.into_values().collect())
}

/// Mean attention per image-token index across all recorded steps, layers,
/// and heads. Requires per-token vectors in the trace.
pub fn image_token_profile(records: &[TraceRecord]) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for record in records {
        let Some(profile) = &record.profile else {
            continue;
        };
        match &mut acc {
            None => acc = Some(profile.clone()),
            Some(acc) => {
                if acc.len() != profile.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "profile of {} entries vs {} in earlier records",
                        profile.len(),
                        acc.len()
                    )));
                }
                for (a, p) in acc.iter_mut().zip(profile) {
                    *a += p;
                }
            }
        }
        count += 1;
    }
    let mut profile = acc.ok_or(Error::ProfileNotRecorded)?;
    for v in &mut profile {
        *v /= count as f64;
    }
    Ok(profile)
}

/// Bandwidth selection for [`gaussian_kde`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `h = sigma_hat * n^(-1/5)` with the sample standard deviation.
    Scott,
    Fixed(f64),
}

/// Evaluable kernel density estimate with standard normal kernels:
/// `f(x) = 1/(n h) * sum_i phi((x - x_i) / h)`.
#[derive(Debug, Clone)]
pub struct GaussianKde {
    samples: Vec<f64>,
    bandwidth: f64,
}

const INV_SQRT_TAU: f64 = 0.3989422804014327; // 1 / sqrt(2 pi)

impl GaussianKde {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let sum: f64 = self
            .samples
            .iter()
            .map(|s| {
                let u = (x - s) / h;
                (-0.5 * u * u).exp() * INV_SQRT_TAU
            })
            .sum();
        sum / (self.samples.len() as f64 * h)
    }

    /// Evenly spaced grid covering every sample padded by six bandwidths;
    /// wide enough that the density integrates to 1 over it.
    pub fn default_grid(&self, points: usize) -> Vec<f64> {
        let lo = self.samples.iter().copied().fold(f64::INFINITY, f64::min)
            - 6.0 * self.bandwidth;
        let hi = self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            + 6.0 * self.bandwidth;
        if points <= 1 {
            return vec![lo];
        }
        let step = (hi - lo) / (points - 1) as f64;
        (0..points).map(|i| lo + step * i as f64).collect()
    }

    pub fn evaluate(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|x| self.density(*x)).collect()
    }
}

pub fn gaussian_kde(samples: &[f64], bandwidth: Bandwidth) -> Result<GaussianKde> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "fixed bandwidth {h} must be > 0"
                )));
            }
            h
        }
        Bandwidth::Scott => {
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = if samples.len() > 1 {
                samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let sigma = var.sqrt();
            // Identical samples leave rounding dust in the variance; treat
            // anything at that scale as zero.
            if sigma <= 1e-12 * mean.abs().max(1.0) {
                log::warn!("zero-variance samples; falling back to fixed bandwidth 1e-3");
                1e-3
            } else {
                sigma * n.powf(-0.2)
            }
        }
    };
    Ok(GaussianKde {
        samples: samples.to_vec(),
        bandwidth: h,
    })
}

/// Keep, per word, only its earliest-step record, and drop words the
/// tokenizer split into several tokens. Order-preserving and idempotent.
pub fn first_occurrence_filter(labels: &[LabeledToken]) -> Vec<LabeledToken> {
    let mut earliest: HashMap<&str, usize> = HashMap::new();
    for label in labels.iter().filter(|l| !l.multi_token) {
        earliest
            .entry(label.word.as_str())
            .and_modify(|s| *s = (*s).min(label.step))
            .or_insert(label.step);
    }
    let mut kept: HashSet<&str> = HashSet::new();
    let mut out = Vec::new();
    for label in labels.iter().filter(|l| !l.multi_token) {
        if earliest[label.word.as_str()] == label.step && kept.insert(label.word.as_str()) {
            out.push(label.clone());
        }
    }
    out
}

/// Density comparison of correct vs hallucinated tokens: over the visual
/// attention at their steps and over the step positions themselves.
/// Classes with no samples stay `None`.
#[derive(Debug)]
pub struct ClassDensities {
    pub correct_attention: Option<GaussianKde>,
    pub hallucinated_attention: Option<GaussianKde>,
    pub correct_position: Option<GaussianKde>,
    pub hallucinated_position: Option<GaussianKde>,
    pub correct_count: usize,
    pub hallucinated_count: usize,
}

/// Join labels to the per-step visual attention series and estimate the
/// per-class densities.
///
/// `filter` applies [`first_occurrence_filter`] before the join.
/// `bandwidth` governs the attention densities; positional densities use
/// Scott's rule (step indices live on a different scale).
pub fn class_attention_densities(
    records: &[TraceRecord],
    labels: &[LabeledToken],
    filter: bool,
    bandwidth: Bandwidth,
) -> Result<ClassDensities> {
    let series = series_by_step(records)?;
    let filtered;
    let labels = if filter {
        filtered = first_occurrence_filter(labels);
        &filtered[..]
    } else {
        labels
    };

    let mut attention = (Vec::new(), Vec::new());
    let mut position = (Vec::new(), Vec::new());
    for label in labels {
        let value = series
            .get(&label.step)
            .ok_or(Error::LabelStepOutOfRange {
                step: label.step,
                len: series.len(),
            })?;
        match label.class {
            TokenClass::Correct => {
                attention.0.push(*value);
                position.0.push(label.step as f64);
            }
            TokenClass::Hallucinated => {
                attention.1.push(*value);
                position.1.push(label.step as f64);
            }
        }
    }

    let kde = |samples: &[f64], bw: Bandwidth| -> Result<Option<GaussianKde>> {
        if samples.is_empty() {
            Ok(None)
        } else {
            gaussian_kde(samples, bw).map(Some)
        }
    };
    Ok(ClassDensities {
        correct_count: attention.0.len(),
        hallucinated_count: attention.1.len(),
        correct_attention: kde(&attention.0, bandwidth)?,
        hallucinated_attention: kde(&attention.1, bandwidth)?,
        correct_position: kde(&position.0, Bandwidth::Scott)?,
        hallucinated_position: kde(&position.1, Bandwidth::Scott)?,
    })
}
