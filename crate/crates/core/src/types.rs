//! Shared domain types: parameter sequences, audio features, subspace
//! partitions, normalization stats, and the diffusion noise schedule.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_finite<T: Scalar>(values: &Array2<T>, what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

/// A frames x N matrix of 3DMM expression coefficients over time.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionSequence<T: Scalar> {
    values: Array2<T>,
    fps: f64,
}

impl<T: Scalar> ExpressionSequence<T> {
    pub fn new(values: Array2<T>, fps: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Invalid("expression sequence must be non-empty".into()));
        }
        if !(fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        check_finite(&values, "expression sequence")?;
        Ok(Self { values, fps })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }
}

/// A frames x D_a matrix of per-frame audio features (HuBERT-like).
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence<T: Scalar> {
    values: Array2<T>,
}

impl<T: Scalar> AudioFeatureSequence<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Invalid("audio feature sequence must be non-empty".into()));
        }
        check_finite(&values, "audio feature sequence")?;
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }
}

/// Disjoint lip / eye / global index sets over the N coefficient
/// dimensions. Indices are 0-based and stored sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspacePartition {
    pub n_dims: usize,
    pub lip: Vec<usize>,
    pub eye: Vec<usize>,
    #[serde(rename = "global")]
    pub global_: Vec<usize>,
}

impl SubspacePartition {
    /// Build from lip and eye sets; the global set is the complement.
    pub fn new(n_dims: usize, mut lip: Vec<usize>, mut eye: Vec<usize>) -> Result<Self> {
        lip.sort_unstable();
        eye.sort_unstable();
        lip.dedup();
        eye.dedup();
        for &i in lip.iter().chain(eye.iter()) {
            if i >= n_dims {
                return Err(Error::Invalid(format!(
                    "partition index {i} out of range for n_dims={n_dims}"
                )));
            }
        }
        if lip.iter().any(|i| eye.binary_search(i).is_ok()) {
            return Err(Error::Invalid("lip and eye sets overlap".into()));
        }
        let global_: Vec<usize> = (0..n_dims)
            .filter(|i| lip.binary_search(i).is_err() && eye.binary_search(i).is_err())
            .collect();
        Ok(Self { n_dims, lip, eye, global_ })
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = SubspacePartition::new(self.n_dims, self.lip.clone(), self.eye.clone())?;
        if rebuilt != *self {
            return Err(Error::Invalid(
                "partition sets are not sorted/disjoint or global set is not the complement".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash, recorded in checkpoint manifests.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("partition serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_string(&digest)
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-dimension mean/std used to map E <-> Z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct NormStats<T: Scalar> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape(format!(
                "mean/std length mismatch: {} vs {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::Invalid("std components must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    /// Corpus statistics over all frames of all sequences; std floored at 1e-8.
    pub fn from_sequences(seqs: &[ExpressionSequence<T>]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::Corpus("no sequences".into()))?;
        let n = first.dim();
        let mut count = 0usize;
        let mut sum = vec![T::zero(); n];
        let mut sumsq = vec![T::zero(); n];
        for s in seqs {
            if s.dim() != n {
                return Err(Error::Shape(format!(
                    "sequence dim {} != corpus dim {n}",
                    s.dim()
                )));
            }
            for row in s.values().rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += *v;
                    sumsq[j] += *v * *v;
                }
            }
            count += s.frames();
        }
        let cnt = T::from_f64(count as f64);
        let floor = T::from_f64(1e-8);
        let mean: Vec<T> = sum.iter().map(|s| *s / cnt).collect();
        let std: Vec<T> = sumsq
            .iter()
            .zip(mean.iter())
            .map(|(sq, m)| {
                let var = *sq / cnt - *m * *m;
                var.max(T::zero()).sqrt().max(floor)
            })
            .collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Normalized parameter sequence (the diffusion model's working space),
/// carrying the stats needed to map back to raw coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T: Scalar> {
    pub values: Array2<T>,
    pub stats: NormStats<T>,
    pub fps: f64,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// z[i,j] = (e[i,j] - mean[j]) / std[j]
pub fn normalize<T: Scalar>(
    e: &ExpressionSequence<T>,
    stats: &NormStats<T>,
) -> Result<LatentSequence<T>> {
    if stats.dim() != e.dim() {
        return Err(Error::Shape(format!(
            "stats dim {} != sequence dim {}",
            stats.dim(),
            e.dim()
        )));
    }
    let mut values = e.values().clone();
    for mut row in values.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    Ok(LatentSequence {
        values,
        stats: stats.clone(),
        fps: e.fps(),
    })
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(z: &LatentSequence<T>) -> Result<ExpressionSequence<T>> {
    let stats = &z.stats;
    if stats.dim() != z.dim() {
        return Err(Error::Shape(format!(
            "stats dim {} != latent dim {}",
            stats.dim(),
            z.dim()
        )));
    }
    let mut values = z.values.clone();
    for mut row in values.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * stats.std[j] + stats.mean[j];
        }
    }
    ExpressionSequence::new(values, z.fps)
}

/// Per-timestep noise levels and the derived cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T: Scalar> {
    beta_step: Array1<T>,
    alpha_bar: Array1<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear per-step schedule from `beta_min` to `beta_max` over `t_steps`.
    pub fn linear(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Invalid("schedule needs at least one timestep".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut beta_step = Array1::zeros(t_steps);
        for t in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                t as f64 / (t_steps - 1) as f64
            };
            beta_step[t] = T::from_f64(beta_min + (beta_max - beta_min) * frac);
        }
        let mut alpha_bar = Array1::zeros(t_steps);
        let mut acc = T::one();
        for t in 0..t_steps {
            acc = acc * (T::one() - beta_step[t]);
            alpha_bar[t] = acc;
        }
        Ok(Self { beta_step, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.beta_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_step.is_empty()
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta_step[t]
    }

    pub fn alpha(&self, t: usize) -> T {
        T::one() - self.beta_step[t]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    pub fn beta_step(&self) -> &Array1<T> {
        &self.beta_step
    }

    pub fn alpha_bar_all(&self) -> &Array1<T> {
        &self.alpha_bar
    }

    /// Posterior variance of the reverse step at t (0 for t = 0).
    pub fn beta_tilde(&self, t: usize) -> T {
        if t == 0 {
            T::zero()
        } else {
            (T::one() - self.alpha_bar[t - 1]) / (T::one() - self.alpha_bar[t]) * self.beta_step[t]
        }
    }
}
