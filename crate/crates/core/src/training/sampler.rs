use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{transform_to_frame, PointFrame};

/// Which offsets of an `n`-frame temporal batch may serve as the previous
/// and the current frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalBatchRule {
    pub n: usize,
}

impl Default for TemporalBatchRule {
    fn default() -> Self {
        TemporalBatchRule { n: 6 }
    }
}

impl TemporalBatchRule {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "temporal batch length must be at least 3, got {n}"
            )));
        }
        Ok(TemporalBatchRule { n })
    }

    /// Offsets `0..ceil(n/3)`.
    pub fn prev_offsets(&self) -> std::ops::Range<usize> {
        0..self.n.div_ceil(3)
    }

    /// Offsets `ceil(2n/3)..n`.
    pub fn cur_offsets(&self) -> std::ops::Range<usize> {
        (2 * self.n).div_ceil(3)..self.n
    }
}

/// Draw `(prev, cur)` frame indices into a sequence of `len` frames: a
/// uniform batch start, then uniform offsets from the first and last thirds.
pub fn temporal_indices<R: Rng + ?Sized>(len: usize, rule: &TemporalBatchRule, rng: &mut R) -> Result<(usize, usize)> {
    if rule.n < 3 {
        return Err(Error::InvalidArgument(format!(
            "temporal batch length must be at least 3, got {}",
            rule.n
        )));
    }
    if len < rule.n {
        return Err(Error::InvalidArgument(format!(
            "sequence of {len} frames is shorter than the temporal batch ({})",
            rule.n
        )));
    }
    let start = rng.gen_range(0..=len - rule.n);
    let t1 = rng.gen_range(rule.prev_offsets());
    let t2 = rng.gen_range(rule.cur_offsets());
    Ok((start + t1, start + t2))
}

/// Draw a training pair; `prev` comes back in `cur`'s ego coordinates.
pub fn temporal_sample<R: Rng + ?Sized>(
    sequence: &[PointFrame],
    rule: &TemporalBatchRule,
    rng: &mut R,
) -> Result<(PointFrame, PointFrame)> {
    let (i, j) = temporal_indices(sequence.len(), rule, rng)?;
    let cur = sequence[j].clone();
    let prev = transform_to_frame(&sequence[i], &cur.pose)?;
    Ok((prev, cur))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn bounds_hold_for_every_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 3..=12 {
            let rule = TemporalBatchRule::new(n).unwrap();
            let mut seen = BTreeMap::new();
            for _ in 0..4000 {
                let (a, b) = temporal_indices(n, &rule, &mut rng).unwrap();
                assert!((a as f64) < n as f64 / 3.0, "n={n} t1={a}");
                assert!(b as f64 >= 2.0 * n as f64 / 3.0 && b < n, "n={n} t2={b}");
                *seen.entry((a, b)).or_insert(0) += 1;
            }
            assert_eq!(seen.len(), rule.prev_offsets().len() * rule.cur_offsets().len());
        }
    }

    #[test]
    fn degenerate_and_short() {
        let rule = TemporalBatchRule::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert_eq!(temporal_indices(3, &rule, &mut rng).unwrap(), (0, 2));
        }
        assert!(temporal_indices(5, &TemporalBatchRule::default(), &mut rng).is_err());
        assert!(TemporalBatchRule::new(2).is_err());
    }

    #[test]
    fn longer_sequences_shift_the_batch() {
        let rule = TemporalBatchRule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut starts = [0usize; 5];
        for _ in 0..5000 {
            let (a, b) = temporal_indices(10, &rule, &mut rng).unwrap();
            assert!((3..=5).contains(&(b - a)));
            starts[a.min(4)] += 1;
        }
        assert!(starts.iter().all(|&c| c > 0));
    }

    #[test]
    fn prev_is_aligned_to_cur() {
        let f = |i: u32, x: f64| PointFrame::new(i, vec![[1.0, 0.0, 0.0]], vec![0.5], Pose::from_translation([x, 0.0, 0.0])).unwrap();
        let seq: Vec<PointFrame> = (0..3).map(|i| f(i, i as f64)).collect();
        let (prev, cur) = temporal_sample(&seq, &TemporalBatchRule::new(3).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(cur.timestamp_index, 2);
        assert_eq!(prev.pose, cur.pose);
        // world x = 1 in frame 0 is ego x = -1 in frame 2
        assert!((prev.points[0][0] + 1.0).abs() < 1e-12);
    }
}
