//! Data-driven selection of lip/eye/global subspaces from paired
//! original/edited parameter sequences.
//!
//! For each region the per-dimension sensitivity is the mean absolute
//! difference between original and edited states, normalized by the
//! corpus std of the original sequences. The top-K ratios pick the
//! region's dimensions; the remainder is the global subspace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{ExpressionSequence, SubspacePartition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Lip,
    Eye,
}

/// Per-dimension |delta| statistic and scale for one region.
#[derive(Clone, Debug)]
pub struct RegionDeltaStats<T: Scalar> {
    pub region: Region,
    pub delta: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Scalar> RegionDeltaStats<T> {
    pub fn n_dims(&self) -> usize {
        self.delta.len()
    }

    pub fn ratio(&self, i: usize) -> T {
        self.delta[i] / self.sigma[i]
    }
}

const SIGMA_FLOOR: f64 = 1e-8;

/// delta[i] = mean |original - edited| over all pairs and frames;
/// sigma[i] = std of dimension i over all original frames, floored.
pub fn compute_delta_stats<T: Scalar>(
    original: &[ExpressionSequence<T>],
    edited: &[ExpressionSequence<T>],
    region: Region,
) -> Result<RegionDeltaStats<T>> {
    if original.is_empty() {
        return Err(Error::Corpus("empty disentanglement corpus".into()));
    }
    if original.len() != edited.len() {
        return Err(Error::Shape(format!(
            "{} original vs {} edited sequences",
            original.len(),
            edited.len()
        )));
    }
    let n = original[0].dim();
    let mut abs_sum = vec![T::zero(); n];
    let mut frame_count = 0usize;
    let mut sum = vec![T::zero(); n];
    let mut sumsq = vec![T::zero(); n];

    for (o, e) in original.iter().zip(edited) {
        if o.dim() != n || e.dim() != n {
            return Err(Error::Shape(format!(
                "corpus dims differ: expected {n}, found {}/{}",
                o.dim(),
                e.dim()
            )));
        }
        if o.frames() != e.frames() {
            return Err(Error::Shape(format!(
                "pair frame counts differ: {} vs {}",
                o.frames(),
                e.frames()
            )));
        }
        for (orow, erow) in o.values().rows().into_iter().zip(e.values().rows()) {
            for j in 0..n {
                abs_sum[j] += (orow[j] - erow[j]).abs();
                sum[j] += orow[j];
                sumsq[j] += orow[j] * orow[j];
            }
        }
        frame_count += o.frames();
    }

    let cnt = T::from_f64(frame_count as f64);
    let floor = T::from_f64(SIGMA_FLOOR);
    let delta: Vec<T> = abs_sum.iter().map(|s| *s / cnt).collect();
    let sigma: Vec<T> = sumsq
        .iter()
        .zip(sum.iter())
        .map(|(sq, s)| {
            let mean = *s / cnt;
            let var = *sq / cnt - mean * mean;
            var.max(T::zero()).sqrt().max(floor)
        })
        .collect();
    Ok(RegionDeltaStats { region, delta, sigma })
}

/// Dimension indices ranked by delta/sigma descending, ties to lower index.
fn ranked_dims<T: Scalar>(stats: &RegionDeltaStats<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..stats.n_dims()).collect();
    idx.sort_by(|&a, &b| {
        stats
            .ratio(b)
            .partial_cmp(&stats.ratio(a))
            .expect("finite ratios")
            .then(a.cmp(&b))
    });
    idx
}

/// The `k` indices with the largest delta/sigma ratio.
pub fn select_region_dims<T: Scalar>(stats: &RegionDeltaStats<T>, k: usize) -> Result<Vec<usize>> {
    let n = stats.n_dims();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("K must be in 1..={n}, got {k}")));
    }
    let mut picked: Vec<usize> = ranked_dims(stats).into_iter().take(k).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Select both regions, resolve overlaps by the larger ratio (tie -> lip),
/// refill the loser from its own ranking, and return the full partition.
pub fn build_partition<T: Scalar>(
    lip_stats: &RegionDeltaStats<T>,
    eye_stats: &RegionDeltaStats<T>,
    k_lip: usize,
    k_eye: usize,
) -> Result<SubspacePartition> {
    let n = lip_stats.n_dims();
    if eye_stats.n_dims() != n {
        return Err(Error::Shape(format!(
            "lip stats over {n} dims, eye stats over {}",
            eye_stats.n_dims()
        )));
    }
    if k_lip + k_eye > n {
        return Err(Error::Invalid(format!(
            "K_lip + K_eye = {} exceeds N = {n}",
            k_lip + k_eye
        )));
    }
    let lip_rank = ranked_dims(lip_stats);
    let eye_rank = ranked_dims(eye_stats);
    let mut lip: Vec<usize> = lip_rank.iter().take(k_lip).copied().collect();
    let mut eye: Vec<usize> = eye_rank.iter().take(k_eye).copied().collect();

    loop {
        let overlap: Vec<usize> = lip.iter().filter(|i| eye.contains(i)).copied().collect();
        if overlap.is_empty() {
            break;
        }
        for dim in overlap {
            let lip_wins = lip_stats.ratio(dim) >= eye_stats.ratio(dim);
            let (loser_set, loser_rank): (&mut Vec<usize>, &[usize]) = if lip_wins {
                (&mut eye, &eye_rank)
            } else {
                (&mut lip, &lip_rank)
            };
            loser_set.retain(|&i| i != dim);
            // next-ranked dim not claimed by either region
            let replacement = loser_rank
                .iter()
                .find(|i| !lip.contains(i) && !eye.contains(i) && **i != dim)
                .copied()
                .ok_or_else(|| Error::Invalid("no unused dimension left for refill".into()))?;
            if lip_wins {
                eye.push(replacement);
            } else {
                lip.push(replacement);
            }
        }
    }

    SubspacePartition::new(n, lip, eye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(values: Array2<f64>) -> ExpressionSequence<f64> {
        ExpressionSequence::new(values, 25.0).unwrap()
    }

    #[test]
    fn single_frame_difference() {
        let stats = compute_delta_stats(
            &[seq(array![[1.0, 0.0]])],
            &[seq(array![[0.0, 0.0]])],
            Region::Lip,
        )
        .unwrap();
        assert_eq!(stats.delta, vec![1.0, 0.0]);
    }

    #[test]
    fn delta_is_mean_over_pairs() {
        let stats = compute_delta_stats(
            &[seq(array![[2.0, 0.0]]), seq(array![[4.0, 0.0]])],
            &[seq(array![[0.0, 0.0]]), seq(array![[0.0, 0.0]])],
            Region::Lip,
        )
        .unwrap();
        assert_eq!(stats.delta, vec![3.0, 0.0]);
    }

    #[test]
    fn empty_and_mismatched_corpora_rejected() {
        assert!(compute_delta_stats::<f64>(&[], &[], Region::Lip).is_err());
        let a = seq(array![[1.0, 2.0]]);
        let b = seq(array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(compute_delta_stats(&[a.clone()], &[b], Region::Lip).is_err());
        let c = seq(array![[1.0]]);
        assert!(compute_delta_stats(&[a], &[c], Region::Lip).is_err());
    }

    /// Independent two-loop recomputation of delta on a random corpus.
    #[test]
    fn delta_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let mut originals = Vec::new();
        let mut editeds = Vec::new();
        for _ in 0..4 {
            let frames = rng.gen_range(2..7);
            let o = Array2::from_shape_fn((frames, n), |_| rng.gen_range(-2.0..2.0));
            let e = Array2::from_shape_fn((frames, n), |_| rng.gen_range(-2.0..2.0));
            originals.push(seq(o));
            editeds.push(seq(e));
        }
        let stats = compute_delta_stats(&originals, &editeds, Region::Eye).unwrap();

        for j in 0..n {
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for (o, e) in originals.iter().zip(&editeds) {
                for t in 0..o.frames() {
                    acc += (o.values()[[t, j]] - e.values()[[t, j]]).abs();
                    cnt += 1;
                }
            }
            assert!((stats.delta[j] - acc / cnt as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_ranking() {
        let stats = RegionDeltaStats {
            region: Region::Lip,
            delta: vec![5.0, 4.0, 0.1, 0.1],
            sigma: vec![1.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(select_region_dims(&stats, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn tie_breaks_to_lower_index() {
        let stats = RegionDeltaStats {
            region: Region::Lip,
            delta: vec![1.0, 1.0],
            sigma: vec![1.0, 1.0],
        };
        assert_eq!(select_region_dims(&stats, 1).unwrap(), vec![0]);
    }

    #[test]
    fn k_out_of_range_rejected() {
        let stats = RegionDeltaStats {
            region: Region::Lip,
            delta: vec![1.0, 1.0],
            sigma: vec![1.0, 1.0],
        };
        assert!(select_region_dims(&stats, 0).is_err());
        assert!(select_region_dims(&stats, 3).is_err());
    }

    #[test]
    fn partition_global_is_complement() {
        let lip = RegionDeltaStats {
            region: Region::Lip,
            delta: vec![9.0, 8.0, 0.0, 0.0],
            sigma: vec![1.0; 4],
        };
        let eye = RegionDeltaStats {
            region: Region::Eye,
            delta: vec![0.0, 0.0, 9.0, 0.0],
            sigma: vec![1.0; 4],
        };
        let p = build_partition(&lip, &eye, 2, 1).unwrap();
        assert_eq!(p.lip, vec![0, 1]);
        assert_eq!(p.eye, vec![2]);
        assert_eq!(p.global_, vec![3]);
    }

    /// Forced overlap on dim 1: lip ratio 5 beats eye ratio 3, eye takes
    /// its rank-2 dim. Cross-checked by exhaustive assignment.
    #[test]
    fn overlap_resolved_by_ratio_winner() {
        let lip = RegionDeltaStats {
            region: Region::Lip,
            delta: vec![9.0, 5.0, 0.0, 0.0],
            sigma: vec![1.0; 4],
        };
        let eye = RegionDeltaStats {
            region: Region::Eye,
            delta: vec![0.0, 3.0, 2.0, 0.1],
            sigma: vec![1.0; 4],
        };
        let p = build_partition(&lip, &eye, 2, 1).unwrap();
        assert_eq!(p.lip, vec![0, 1]);
        assert_eq!(p.eye, vec![2]);

        // Exhaustive oracle: all (lip pair, eye single) disjoint assignments,
        // maximize total ratio; the winner-with-refill rule must agree.
        let mut best = (f64::NEG_INFINITY, vec![], vec![]);
        for a in 0..4 {
            for b in (a + 1)..4 {
                for e in 0..4 {
                    if e == a || e == b {
                        continue;
                    }
                    let score = lip.ratio(a) + lip.ratio(b) + eye.ratio(e);
                    if score > best.0 {
                        best = (score, vec![a, b], vec![e]);
                    }
                }
            }
        }
        assert_eq!(p.lip, best.1);
        assert_eq!(p.eye, best.2);
    }

    #[test]
    fn cardinality_overflow_rejected() {
        let lip = RegionDeltaStats {
            region: Region::Lip,
            delta: vec![1.0; 3],
            sigma: vec![1.0; 3],
        };
        let eye = RegionDeltaStats {
            region: Region::Eye,
            delta: vec![1.0; 3],
            sigma: vec![1.0; 3],
        };
        assert!(build_partition(&lip, &eye, 2, 2).is_err());
    }

    /// Scaling dimension i of both corpora by c > 0 leaves the selected
    /// sets unchanged.
    #[test]
    fn selection_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let frames = 20;
        let o = Array2::from_shape_fn((frames, n), |_| rng.gen_range(-1.0..1.0));
        let e = Array2::from_shape_fn((frames, n), |_| rng.gen_range(-1.0..1.0));

        let base = compute_delta_stats(&[seq(o.clone())], &[seq(e.clone())], Region::Lip).unwrap();
        let base_sel = select_region_dims(&base, 3).unwrap();

        let scales: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..10.0)).collect();
        let scale_cols = |m: &Array2<f64>| {
            Array2::from_shape_fn(m.dim(), |(i, j)| m[[i, j]] * scales[j])
        };
        let scaled =
            compute_delta_stats(&[seq(scale_cols(&o))], &[seq(scale_cols(&e))], Region::Lip)
                .unwrap();
        assert_eq!(select_region_dims(&scaled, 3).unwrap(), base_sel);
    }

    #[test]
    fn partition_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10;
        let o = Array2::from_shape_fn((15, n), |_| rng.gen_range(-1.0..1.0));
        let el = Array2::from_shape_fn((15, n), |_| rng.gen_range(-1.0..1.0));
        let ee = Array2::from_shape_fn((15, n), |_| rng.gen_range(-1.0..1.0));
        let lip = compute_delta_stats(&[seq(o.clone())], &[seq(el)], Region::Lip).unwrap();
        let eye = compute_delta_stats(&[seq(o)], &[seq(ee)], Region::Eye).unwrap();
        let p1 = build_partition(&lip, &eye, 3, 2).unwrap();
        let p2 = build_partition(&lip, &eye, 3, 2).unwrap();
        assert_eq!(p1, p2);
    }
}
