//! Parameter-level evaluation metrics: blink rate, lip distance against a
//! reference, and frame-to-frame smoothness. These are parameter-space
//! analogs of image-based metrics; reports label them as such.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{ExpressionSequence, SubspacePartition};

/// Physiologically natural blink range in blinks per second.
pub const BLINK_BAND: (f64, f64) = (0.28, 0.45);

/// Frames the signal must spend above threshold before a falling edge
/// counts as a blink.
const HYSTERESIS_FRAMES: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EvalReport<T: Scalar> {
    pub blink_rate: f64,
    pub blink_in_band: bool,
    pub sync_conf: f64,
    pub lip_l2: f64,
    pub temporal_var: Vec<T>,
}

impl<T: Scalar> EvalReport<T> {
    pub fn mean_smoothness(&self) -> f64 {
        if self.temporal_var.is_empty() {
            return 0.0;
        }
        self.temporal_var.iter().map(|v| v.as_f64()).sum::<f64>() / self.temporal_var.len() as f64
    }
}

pub fn blink_in_band(rate: f64) -> bool {
    rate >= BLINK_BAND.0 && rate <= BLINK_BAND.1
}

fn eye_signal<T: Scalar>(
    e: &ExpressionSequence<T>,
    partition: &SubspacePartition,
    axis: &[T],
) -> Vec<T> {
    (0..e.frames())
        .map(|i| {
            partition
                .eye
                .iter()
                .zip(axis.iter())
                .map(|(&j, &a)| e.values()[[i, j]] * a)
                .sum()
        })
        .collect()
}

/// First principal axis of the eye-column motion by power iteration,
/// oriented so dips point downward (median of the projection above its
/// mean).
pub fn eye_principal_axis<T: Scalar>(
    e: &ExpressionSequence<T>,
    partition: &SubspacePartition,
) -> Result<Vec<T>> {
    let k = partition.eye.len();
    if k == 0 {
        return Err(Error::Invalid("eye subspace is empty".into()));
    }
    let frames = e.frames();
    let mut x = Array2::<T>::zeros((frames, k));
    for (c, &j) in partition.eye.iter().enumerate() {
        let mean = e.values().column(j).sum() / T::from_f64(frames as f64);
        for i in 0..frames {
            x[[i, c]] = e.values()[[i, j]] - mean;
        }
    }
    let cov = x.t().dot(&x);
    let mut v = Array1::<T>::ones(k);
    let mut norm = v.iter().map(|&a| a * a).sum::<T>().sqrt();
    v.mapv_inplace(|a| a / norm);
    for _ in 0..200 {
        let next = cov.dot(&v);
        norm = next.iter().map(|&a| a * a).sum::<T>().sqrt();
        if norm <= T::from_f64(1e-30) {
            // no eye motion at all: any unit axis works
            break;
        }
        v = next.mapv(|a| a / norm);
    }
    let mut axis: Vec<T> = v.to_vec();

    // orient: dips away from rest are rare, so the median projection
    // should sit above the mean
    let s = eye_signal(e, partition, &axis);
    let mean = s.iter().copied().sum::<T>() / T::from_f64(frames as f64);
    let mut sorted = s.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite signal"));
    let median = sorted[frames / 2];
    if median < mean {
        for a in &mut axis {
            *a = -*a;
        }
    }
    Ok(axis)
}

/// Blinks per second: falling-edge crossings of the mid-level threshold
/// on the eye signal projected onto `axis`, with a 3-frame arming
/// hysteresis.
pub fn blink_rate_with_axis<T: Scalar>(
    e: &ExpressionSequence<T>,
    partition: &SubspacePartition,
    axis: &[T],
) -> Result<f64> {
    if e.frames() < 2 {
        return Err(Error::Invalid("need at least 2 frames to count blinks".into()));
    }
    if axis.len() != partition.eye.len() {
        return Err(Error::Shape(format!(
            "axis length {} != eye set size {}",
            axis.len(),
            partition.eye.len()
        )));
    }
    if partition.eye.is_empty() {
        return Err(Error::Invalid("eye subspace is empty".into()));
    }
    let s = eye_signal(e, partition, axis);
    let lo = s.iter().copied().fold(T::infinity(), T::min);
    let hi = s.iter().copied().fold(T::neg_infinity(), T::max);
    if hi <= lo {
        return Ok(0.0); // flat signal: no events
    }
    let thr = (lo + hi) / T::from_f64(2.0);

    let mut blinks = 0usize;
    let mut above_run = 0usize;
    let mut armed = false;
    for &v in &s {
        if v >= thr {
            above_run += 1;
            if above_run >= HYSTERESIS_FRAMES {
                armed = true;
            }
        } else {
            if armed {
                blinks += 1;
                armed = false;
            }
            above_run = 0;
        }
    }
    Ok(blinks as f64 / e.duration_secs())
}

/// Blink rate with the axis estimated from the sequence itself.
pub fn blink_rate<T: Scalar>(
    e: &ExpressionSequence<T>,
    partition: &SubspacePartition,
) -> Result<f64> {
    let axis = eye_principal_axis(e, partition)?;
    blink_rate_with_axis(e, partition, &axis)
}

/// Mean over frames of the L2 distance restricted to lip columns.
pub fn lip_distance<T: Scalar>(
    generated: &ExpressionSequence<T>,
    reference: &ExpressionSequence<T>,
    partition: &SubspacePartition,
) -> Result<f64> {
    if generated.frames() != reference.frames() {
        return Err(Error::Shape(format!(
            "generated has {} frames, reference {}",
            generated.frames(),
            reference.frames()
        )));
    }
    if generated.dim() != reference.dim() || generated.dim() != partition.n_dims {
        return Err(Error::Shape("dimension mismatch against partition".into()));
    }
    let mut total = 0.0f64;
    for i in 0..generated.frames() {
        let mut sq = 0.0f64;
        for &j in &partition.lip {
            let d = (generated.values()[[i, j]] - reference.values()[[i, j]]).as_f64();
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / generated.frames() as f64)
}

/// v[i] = ||e[i+1] - e[i]||_2 for i in 0..frames-1.
pub fn temporal_smoothness<T: Scalar>(e: &ExpressionSequence<T>) -> Result<Vec<T>> {
    if e.frames() < 2 {
        return Err(Error::Invalid("need at least 2 frames for smoothness".into()));
    }
    let v = e.values();
    Ok((0..e.frames() - 1)
        .map(|i| {
            (0..e.dim())
                .map(|j| {
                    let d = v[[i + 1, j]] - v[[i, j]];
                    d * d
                })
                .sum::<T>()
                .sqrt()
        })
        .collect())
}

/// Pearson correlation between two equally long samples; 0.0 when either
/// side is constant.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "pearson inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("pearson needs at least 2 samples".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mb = b.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x.as_f64() - ma;
        let dy = y.as_f64() - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn partition() -> SubspacePartition {
        SubspacePartition::new(6, vec![0, 1], vec![3, 4]).unwrap()
    }

    /// Rest level 1.0 with cosine dips to 0 at the given centers.
    fn eye_track(frames: usize, centers: &[usize], half_width: usize) -> Vec<f64> {
        let mut s = vec![1.0f64; frames];
        for &c in centers {
            for off in 0..=half_width {
                let w = 0.5 + 0.5 * (std::f64::consts::PI * off as f64 / half_width as f64).cos();
                for idx in [c.wrapping_sub(off), c + off] {
                    if idx < frames {
                        s[idx] = s[idx].min(1.0 - w);
                    }
                }
            }
        }
        s
    }

    fn seq_with_eye(track: &[f64], fps: f64) -> ExpressionSequence<f64> {
        let p = partition();
        let mut vals = Array2::zeros((track.len(), 6));
        for (i, &v) in track.iter().enumerate() {
            // two eye columns carrying the same openness at different gains
            vals[[i, p.eye[0]]] = 0.8 * v;
            vals[[i, p.eye[1]]] = 0.3 * v + 0.1;
        }
        ExpressionSequence::new(vals, fps).unwrap()
    }

    #[test]
    fn three_blinks_over_ten_seconds() {
        // 250 frames at 25 fps = 10 s, dips at 40/120/200 -> 0.3 blinks/s
        let track = eye_track(250, &[40, 120, 200], 3);
        let e = seq_with_eye(&track, 25.0);
        let rate = blink_rate(&e, &partition()).unwrap();
        assert!((rate - 0.3).abs() < 1e-12, "rate {rate}");
        assert!(blink_in_band(rate));
    }

    #[test]
    fn constant_eye_signal_is_zero() {
        let e = seq_with_eye(&vec![1.0; 100], 25.0);
        assert_eq!(blink_rate(&e, &partition()).unwrap(), 0.0);
        assert!(!blink_in_band(0.0));
    }

    #[test]
    fn band_endpoints() {
        assert!(blink_in_band(0.28));
        assert!(blink_in_band(0.45));
        assert!(!blink_in_band(0.2799));
        assert!(!blink_in_band(0.4501));
    }

    #[test]
    fn affine_rescaling_leaves_rate_unchanged() {
        let track = eye_track(250, &[50, 150], 3);
        let base = seq_with_eye(&track, 25.0);
        let rate0 = blink_rate(&base, &partition()).unwrap();
        assert!(rate0 > 0.0);

        let p = partition();
        let mut vals = base.values().clone();
        for i in 0..vals.nrows() {
            for &j in &p.eye {
                vals[[i, j]] = 2.7 * vals[[i, j]] + 0.4;
            }
        }
        let scaled = ExpressionSequence::new(vals, 25.0).unwrap();
        assert_eq!(blink_rate(&scaled, &p).unwrap(), rate0);
    }

    #[test]
    fn provided_axis_matches_estimated_axis() {
        let track = eye_track(500, &[60, 200, 350, 470], 3);
        let e = seq_with_eye(&track, 25.0);
        let p = partition();
        // true blink axis direction: the per-column gains (0.8, 0.3)
        let n = (0.8f64 * 0.8 + 0.3 * 0.3).sqrt();
        let axis = vec![0.8 / n, 0.3 / n];
        let with_axis = blink_rate_with_axis(&e, &p, &axis).unwrap();
        let estimated = blink_rate(&e, &p).unwrap();
        assert_eq!(with_axis, estimated);
    }

    #[test]
    fn hysteresis_ignores_single_frame_spikes() {
        // dip after only 2 frames above threshold is not armed yet
        let mut track = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        track.extend(std::iter::repeat(1.0).take(13));
        let e = seq_with_eye(&track, 25.0);
        // only the fall at index 10 counts (preceded by 4 frames above)
        let rate = blink_rate(&e, &partition()).unwrap();
        assert_eq!(rate, 1.0 / e.duration_secs());
    }

    #[test]
    fn blink_rate_errors() {
        let e = seq_with_eye(&[1.0], 25.0);
        assert!(blink_rate(&e, &partition()).is_err());
        let no_eye = SubspacePartition::new(6, vec![0, 1], vec![]).unwrap();
        let e = seq_with_eye(&[1.0, 0.5, 1.0], 25.0);
        assert!(blink_rate(&e, &no_eye).is_err());
    }

    #[test]
    fn lip_distance_identity_and_unit_offset() {
        let p = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals = Array2::from_shape_fn((20, 6), |_| rng.gen_range(-1.0..1.0));
        let a = ExpressionSequence::new(vals.clone(), 25.0).unwrap();
        assert_eq!(lip_distance(&a, &a, &p).unwrap(), 0.0);

        let mut shifted = vals.clone();
        for i in 0..20 {
            shifted[[i, p.lip[0]]] += 1.0;
        }
        let b = ExpressionSequence::new(shifted, 25.0).unwrap();
        assert!((lip_distance(&b, &a, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lip_distance_matches_brute_force() {
        let p = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let va = Array2::<f64>::from_shape_fn((15, 6), |_| rng.gen_range(-2.0..2.0));
        let vb = Array2::<f64>::from_shape_fn((15, 6), |_| rng.gen_range(-2.0..2.0));
        let a = ExpressionSequence::new(va.clone(), 25.0).unwrap();
        let b = ExpressionSequence::new(vb.clone(), 25.0).unwrap();

        let mut expect = 0.0f64;
        for i in 0..15 {
            let mut sq = 0.0f64;
            for &j in &p.lip {
                sq += (va[[i, j]] - vb[[i, j]]).powi(2);
            }
            expect += sq.sqrt();
        }
        expect /= 15.0;

        let d = lip_distance(&a, &b, &p).unwrap();
        assert!((d - expect).abs() < 1e-12);
        // symmetric
        assert_eq!(d, lip_distance(&b, &a, &p).unwrap());
        // ignores non-lip columns
        let mut vc = vb.clone();
        for i in 0..15 {
            vc[[i, 5]] += 10.0;
        }
        let c = ExpressionSequence::new(vc, 25.0).unwrap();
        assert_eq!(lip_distance(&a, &c, &p).unwrap(), d);
    }

    #[test]
    fn lip_distance_length_mismatch() {
        let p = partition();
        let a = ExpressionSequence::new(Array2::<f64>::zeros((5, 6)), 25.0).unwrap();
        let b = ExpressionSequence::new(Array2::<f64>::zeros((6, 6)), 25.0).unwrap();
        assert!(lip_distance(&a, &b, &p).is_err());
    }

    #[test]
    fn smoothness_constant_and_ramp() {
        let constant = ExpressionSequence::new(Array2::<f64>::ones((8, 3)), 25.0).unwrap();
        assert!(temporal_smoothness(&constant).unwrap().iter().all(|&v| v == 0.0));

        let c = -0.35;
        let ramp = ExpressionSequence::new(
            Array2::from_shape_fn((8, 3), |(i, j)| if j == 1 { c * i as f64 } else { 0.0 }),
            25.0,
        )
        .unwrap();
        let v = temporal_smoothness(&ramp).unwrap();
        assert_eq!(v.len(), 7);
        for x in v {
            assert!((x - c.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothness_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals = Array2::from_shape_fn((12, 4), |_| rng.gen_range(-1.0..1.0));
        let offset = [3.0, -1.0, 0.5, 2.0];
        let shifted = Array2::from_shape_fn((12, 4), |(i, j)| vals[[i, j]] + offset[j]);
        let a = ExpressionSequence::new(vals, 25.0).unwrap();
        let b = ExpressionSequence::new(shifted, 25.0).unwrap();
        assert_eq!(temporal_smoothness(&a).unwrap(), temporal_smoothness(&b).unwrap());
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = a.iter().map(|x| -0.5 * x).collect();
        assert!((pearson(&a, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &down).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[5.0; 4]).unwrap(), 0.0);
        assert!(pearson(&a, &[1.0]).is_err());
    }

    #[test]
    fn smoothness_too_short() {
        let e = ExpressionSequence::new(Array2::<f64>::zeros((1, 3)), 25.0).unwrap();
        assert!(temporal_smoothness(&e).is_err());
    }
}
