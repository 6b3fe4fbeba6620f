//! Synthetic corpus generator with known ground truth.
//!
//! Audio is a smoothed Gaussian process; planted lip dimensions follow a
//! fixed random linear map of the audio with a 2-frame lag; planted eye
//! dimensions carry a rest level with Poisson-timed blink dips; the
//! remaining dimensions drift as a slow random walk. Every sequence is a
//! pure function of (spec.seed, sequence index).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{AudioFeatureSequence, ExpressionSequence};

/// Frames of lag between audio and the lip response it drives.
pub const AUDIO_LIP_LAG: usize = 2;

/// Moving-average width used for all smoothing.
pub const SMOOTH_WIDTH: usize = 3;

/// Eye openness at rest and when fully closed.
pub const EYE_REST: f64 = 1.0;
pub const EYE_CLOSED: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_dims: usize,
    pub planted_lip: Vec<usize>,
    pub planted_eye: Vec<usize>,
    pub audio_dim: usize,
    pub fps: f64,
    /// Blink events per second (Poisson rate).
    pub blink_rate: f64,
    /// Frames from blink onset back to fully open.
    pub blink_duration: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_dims: 64,
            planted_lip: (2..15).collect(),   // 13 dims
            planted_eye: (20..28).collect(),  // 8 dims
            audio_dim: 32,
            fps: 25.0,
            blink_rate: 0.3,
            blink_duration: 6,
            seq_len: 500,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_dims == 0 || self.audio_dim == 0 || self.seq_len == 0 {
            return Err(Error::Invalid("n_dims, audio_dim, seq_len must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Invalid("fps must be positive".into()));
        }
        if self.blink_rate < 0.0 {
            return Err(Error::Invalid("blink_rate must be nonnegative".into()));
        }
        if self.blink_duration < 2 {
            return Err(Error::Invalid("blink_duration must be at least 2 frames".into()));
        }
        if self.planted_lip.iter().any(|i| self.planted_eye.contains(i)) {
            return Err(Error::Invalid("planted lip/eye sets must be disjoint".into()));
        }
        if self
            .planted_lip
            .iter()
            .chain(&self.planted_eye)
            .any(|&i| i >= self.n_dims)
        {
            return Err(Error::Invalid("planted index out of range".into()));
        }
        if self.planted_lip.is_empty() || self.planted_eye.is_empty() {
            return Err(Error::Invalid("planted sets must be non-empty".into()));
        }
        Ok(())
    }
}

/// Everything needed to recompute the corpus and to act as an oracle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// audio_dim x K_lip linear map applied to lagged audio.
    pub audio_to_lip: Vec<Vec<f64>>,
    pub lag: usize,
    /// Per-dimension positive weights of the blink axis.
    pub eye_weights: Vec<f64>,
    /// Blink onset frames per sequence.
    pub blink_onsets: Vec<Vec<usize>>,
}

pub struct SynthCorpus<T: Scalar> {
    pub items: Vec<(AudioFeatureSequence<T>, ExpressionSequence<T>)>,
    pub truth: GroundTruth,
}

/// Centered moving average with shrinking windows at the edges.
pub fn smooth_columns(m: &Array2<f64>, width: usize) -> Array2<f64> {
    let half = width / 2;
    let (rows, cols) = m.dim();
    let mut out = Array2::zeros((rows, cols));
    for t in 0..rows {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(rows - 1);
        let cnt = (hi - lo + 1) as f64;
        for c in 0..cols {
            let mut acc = 0.0;
            for s in lo..=hi {
                acc += m[[s, c]];
            }
            out[[t, c]] = acc / cnt;
        }
    }
    out
}

fn seq_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Cosine dip profile: 0 at the endpoints, 1 at the midpoint.
fn blink_profile(frame_in_blink: usize, duration: usize) -> f64 {
    let x = frame_in_blink as f64 / (duration - 1) as f64;
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * x).cos())
}

/// The lip trajectory implied by an audio sequence: the planted linear map
/// applied with lag, then smoothed. Shared by the generator and by tests
/// as the oracle.
pub fn oracle_lip(truth: &GroundTruth, audio: &Array2<f64>) -> Array2<f64> {
    let k_lip = truth.spec.planted_lip.len();
    let frames = audio.nrows();
    let mut lip = Array2::zeros((frames, k_lip));
    for t in 0..frames {
        let src = t.saturating_sub(truth.lag);
        for k in 0..k_lip {
            let mut acc = 0.0;
            for a in 0..truth.spec.audio_dim {
                acc += audio[[src, a]] * truth.audio_to_lip[a][k];
            }
            lip[[t, k]] = acc;
        }
    }
    smooth_columns(&lip, SMOOTH_WIDTH)
}

/// Eye openness signal in [0,1] given blink onsets.
pub fn openness_signal(frames: usize, onsets: &[usize], duration: usize) -> Vec<f64> {
    let mut s = vec![EYE_REST; frames];
    for &onset in onsets {
        for k in 0..duration {
            let t = onset + k;
            if t >= frames {
                break;
            }
            let dip = blink_profile(k, duration);
            let level = EYE_REST - (EYE_REST - EYE_CLOSED) * dip;
            s[t] = s[t].min(level);
        }
    }
    s
}

pub fn generate<T: Scalar>(spec: &SynthSpec, count: usize) -> Result<SynthCorpus<T>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Invalid("count must be positive".into()));
    }
    let k_lip = spec.planted_lip.len();
    let k_eye = spec.planted_eye.len();

    // Stream 0: corpus-level structure (map + eye weights).
    let mut rng = seq_rng(spec.seed, 0);
    let audio_to_lip: Vec<Vec<f64>> = (0..spec.audio_dim)
        .map(|_| {
            (0..k_lip)
                .map(|_| normal(&mut rng) / (spec.audio_dim as f64).sqrt())
                .collect()
        })
        .collect();
    let eye_weights: Vec<f64> = (0..k_eye).map(|_| 0.5 + rng.gen_range(0.0..1.0)).collect();

    let mut truth = GroundTruth {
        spec: spec.clone(),
        audio_to_lip,
        lag: AUDIO_LIP_LAG,
        eye_weights,
        blink_onsets: Vec::with_capacity(count),
    };

    let mut items = Vec::with_capacity(count);
    for s in 0..count {
        // Streams 1.. : per-sequence noise.
        let mut rng = seq_rng(spec.seed, 1 + s as u64);
        let frames = spec.seq_len;

        let audio_raw =
            Array2::from_shape_fn((frames, spec.audio_dim), |_| normal(&mut rng));
        let audio = smooth_columns(&audio_raw, SMOOTH_WIDTH);

        // Poisson blink process via exponential inter-arrival times.
        let mut onsets = Vec::new();
        if spec.blink_rate > 0.0 {
            let mut t = 0.0f64;
            loop {
                let u: f64 = rng.gen_range(0.0f64..1.0).max(1e-12);
                t += -u.ln() / spec.blink_rate;
                let frame = (t * spec.fps) as usize;
                if frame >= frames {
                    break;
                }
                onsets.push(frame);
            }
        }
        let openness = openness_signal(frames, &onsets, spec.blink_duration);

        let lip = oracle_lip(&truth, &audio);

        let n_global = spec.n_dims - k_lip - k_eye;
        let mut walk = Array2::zeros((frames, n_global));
        for c in 0..n_global {
            let mut level = normal(&mut rng) * 0.5;
            for t in 0..frames {
                level += 0.02 * normal(&mut rng);
                walk[[t, c]] = level;
            }
        }

        let mut e = Array2::zeros((frames, spec.n_dims));
        for t in 0..frames {
            for (k, &j) in spec.planted_lip.iter().enumerate() {
                e[[t, j]] = lip[[t, k]];
            }
            for (k, &j) in spec.planted_eye.iter().enumerate() {
                e[[t, j]] = truth.eye_weights[k] * openness[t];
            }
            let mut g = 0usize;
            for j in 0..spec.n_dims {
                if !spec.planted_lip.contains(&j) && !spec.planted_eye.contains(&j) {
                    e[[t, j]] = walk[[t, g]];
                    g += 1;
                }
            }
        }

        truth.blink_onsets.push(onsets);
        let audio_t = audio.mapv(T::from_f64);
        let e_t = e.mapv(T::from_f64);
        items.push((
            AudioFeatureSequence::new(audio_t)?,
            ExpressionSequence::new(e_t, spec.fps)?,
        ));
    }

    Ok(SynthCorpus { items, truth })
}

/// (original, lip-closed, eye-closed) triples: lip-closed zeroes the planted
/// lip columns, eye-closed sets the planted eye columns to the closed level.
pub fn generate_edit_pairs<T: Scalar>(
    spec: &SynthSpec,
    corpus: &SynthCorpus<T>,
) -> Vec<(ExpressionSequence<T>, ExpressionSequence<T>, ExpressionSequence<T>)> {
    corpus
        .items
        .iter()
        .map(|(_, e)| {
            let mut lip_closed = e.values().clone();
            let mut eye_closed = e.values().clone();
            for t in 0..e.frames() {
                for &j in &spec.planted_lip {
                    lip_closed[[t, j]] = T::zero();
                }
                for (k, &j) in spec.planted_eye.iter().enumerate() {
                    eye_closed[[t, j]] =
                        T::from_f64(corpus.truth.eye_weights[k] * EYE_CLOSED);
                }
            }
            (
                e.clone(),
                ExpressionSequence::new(lip_closed, e.fps()).expect("valid edit"),
                ExpressionSequence::new(eye_closed, e.fps()).expect("valid edit"),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disentangle::{build_partition, compute_delta_stats, Region};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_dims: 12,
            planted_lip: vec![1, 4, 7],
            planted_eye: vec![2, 9],
            audio_dim: 6,
            seq_len: 120,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_blink_rate_gives_constant_eye_columns() {
        let spec = SynthSpec { blink_rate: 0.0, ..small_spec() };
        let corpus = generate::<f64>(&spec, 2).unwrap();
        for (_, e) in &corpus.items {
            for &j in &spec.planted_eye {
                let col = e.values().column(j);
                let first = col[0];
                assert!(col.iter().all(|&v| v == first));
            }
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_identical() {
        let spec = small_spec();
        let a = generate::<f64>(&spec, 3).unwrap();
        let b = generate::<f64>(&spec, 3).unwrap();
        for ((aa, ae), (ba, be)) in a.items.iter().zip(&b.items) {
            assert_eq!(aa.values(), ba.values());
            assert_eq!(ae.values(), be.values());
        }
        assert_eq!(a.truth.blink_onsets, b.truth.blink_onsets);
    }

    #[test]
    fn blink_count_matches_poisson_statistics() {
        // 1000 s of signal; count within 3 sigma of rate * duration.
        let spec = SynthSpec {
            seq_len: 25_000,
            ..small_spec()
        };
        let corpus = generate::<f64>(&spec, 1).unwrap();
        let lambda = spec.blink_rate * 1000.0;
        let count = corpus.truth.blink_onsets[0].len() as f64;
        assert!(
            (count - lambda).abs() <= 3.0 * lambda.sqrt(),
            "blink count {count} outside 3 sigma of {lambda}"
        );
    }

    #[test]
    fn edits_touch_only_planted_columns() {
        let spec = small_spec();
        let corpus = generate::<f64>(&spec, 2).unwrap();
        let triples = generate_edit_pairs(&spec, &corpus);
        for (orig, lip_closed, eye_closed) in &triples {
            for j in 0..spec.n_dims {
                let planted_lip = spec.planted_lip.contains(&j);
                let planted_eye = spec.planted_eye.contains(&j);
                for t in 0..orig.frames() {
                    if !planted_lip {
                        assert_eq!(orig.values()[[t, j]], lip_closed.values()[[t, j]]);
                    }
                    if !planted_eye {
                        assert_eq!(orig.values()[[t, j]], eye_closed.values()[[t, j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn delta_zero_outside_planted_dims() {
        let spec = small_spec();
        let corpus = generate::<f64>(&spec, 2).unwrap();
        let triples = generate_edit_pairs(&spec, &corpus);
        let originals: Vec<_> = triples.iter().map(|t| t.0.clone()).collect();
        let lips: Vec<_> = triples.iter().map(|t| t.1.clone()).collect();
        let stats = compute_delta_stats(&originals, &lips, Region::Lip).unwrap();
        for j in 0..spec.n_dims {
            if spec.planted_lip.contains(&j) {
                assert!(stats.delta[j] > 0.0);
            } else {
                assert_eq!(stats.delta[j], 0.0);
            }
        }
    }

    #[test]
    fn disentangle_recovers_planted_sets() {
        // Property over many seeds: the full pipeline returns the planted sets.
        for seed in 0..20 {
            let spec = SynthSpec { seed, ..small_spec() };
            let corpus = generate::<f64>(&spec, 3).unwrap();
            let triples = generate_edit_pairs(&spec, &corpus);
            let originals: Vec<_> = triples.iter().map(|t| t.0.clone()).collect();
            let lips: Vec<_> = triples.iter().map(|t| t.1.clone()).collect();
            let eyes: Vec<_> = triples.iter().map(|t| t.2.clone()).collect();
            let lip_stats = compute_delta_stats(&originals, &lips, Region::Lip).unwrap();
            let eye_stats = compute_delta_stats(&originals, &eyes, Region::Eye).unwrap();
            let p = build_partition(
                &lip_stats,
                &eye_stats,
                spec.planted_lip.len(),
                spec.planted_eye.len(),
            )
            .unwrap();
            assert_eq!(p.lip, spec.planted_lip, "seed {seed}");
            assert_eq!(p.eye, spec.planted_eye, "seed {seed}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec();
        s.planted_eye = vec![1]; // overlaps lip
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.planted_lip = vec![99];
        assert!(s.validate().is_err());
        assert!(generate::<f64>(&small_spec(), 0).is_err());
    }
}
