//! Anticipation label algebra.
//!
//! Detection uses the frame labels as annotated. Anticipation at horizon
//! `alpha` asks, at frame `t`, whether any of the next `alpha` frames is
//! anomalous, so its label sequence is a forward sliding-window maximum
//! with the last `alpha` frames dropped.

use serde::{Deserialize, Serialize};

use crate::scoring::ScoreSeries;
use crate::{Error, Result};

/// Per-frame binary labels for one video at a given anticipation horizon.
/// `alpha == 0` means plain detection labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSeries {
    pub video_id: String,
    /// Anticipation horizon in frames; 0 for detection.
    pub alpha: usize,
    pub values: Vec<u8>,
}

impl LabelSeries {
    pub fn detection(video_id: impl Into<String>, values: Vec<u8>) -> Self {
        LabelSeries {
            video_id: video_id.into(),
            alpha: 0,
            values,
        }
    }
}

/// Labels for anticipation: `out[t] = max(g[t+1..=t+alpha])`, defined for
/// `t` in `[0, T - alpha)`.
pub fn anticipation_labels(g0: &LabelSeries, alpha: usize) -> Result<LabelSeries> {
    if g0.alpha != 0 {
        return Err(Error::Labels(format!(
            "anticipation labels must start from detection labels, got alpha={}",
            g0.alpha
        )));
    }
    if alpha == 0 {
        return Ok(g0.clone());
    }
    let t_len = g0.values.len();
    if alpha >= t_len {
        return Err(Error::Labels(format!(
            "horizon exceeds video length: alpha={alpha}, frames={t_len}"
        )));
    }
    // Backward running window: windows[t] counts ones in g[t+1..=t+alpha].
    let mut values = vec![0u8; t_len - alpha];
    let mut ones_in_window = 0usize;
    for t in (0..t_len - 1).rev() {
        ones_in_window += usize::from(g0.values[t + 1]);
        if t + 1 + alpha < t_len {
            ones_in_window -= usize::from(g0.values[t + 1 + alpha]);
        }
        if t < values.len() {
            values[t] = u8::from(ones_in_window > 0);
        }
    }
    Ok(LabelSeries {
        video_id: g0.video_id.clone(),
        alpha,
        values,
    })
}

/// Scores and labels truncated to their common frame range.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Frames dropped from the head of the label series (score warm-up).
    pub dropped_head: usize,
    /// Frames dropped from whichever series ran longer at the tail.
    pub dropped_tail: usize,
}

/// Pair a score series (which starts at `start_offset` because of the
/// observation warm-up) with a label series of the same horizon.
pub fn align_series(scores: &ScoreSeries, labels: &LabelSeries) -> Result<AlignedPair> {
    if scores.video_id != labels.video_id {
        return Err(Error::Labels(format!(
            "video id mismatch: scores `{}` vs labels `{}`",
            scores.video_id, labels.video_id
        )));
    }
    if scores.alpha != labels.alpha {
        return Err(Error::Labels(format!(
            "alpha mismatch: scores {} vs labels {}",
            scores.alpha, labels.alpha
        )));
    }
    let head = scores.start_offset.min(labels.values.len());
    let usable = labels.values.len() - head;
    let n = scores.values.len().min(usable);
    let dropped_tail = (scores.values.len() - n) + (usable - n);
    Ok(AlignedPair {
        scores: scores.values[..n].to_vec(),
        labels: labels.values[head..head + n].to_vec(),
        dropped_head: head,
        dropped_tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<u8>) -> LabelSeries {
        LabelSeries::detection("v", values)
    }

    /// Literal double-loop definition, kept independent of the
    /// running-window implementation above.
    fn window_max_oracle(g: &[u8], alpha: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for t in 0..g.len().saturating_sub(alpha) {
            let mut m = 0;
            for i in 1..=alpha {
                if g[t + i] > m {
                    m = g[t + i];
                }
            }
            out.push(m);
        }
        out
    }

    #[test]
    fn all_zeros_stay_zero() {
        for alpha in 1..5 {
            let got = anticipation_labels(&series(vec![0; 20]), alpha).unwrap();
            assert_eq!(got.values, vec![0; 20 - alpha]);
            assert_eq!(got.alpha, alpha);
        }
    }

    #[test]
    fn anomaly_three_ahead_is_flagged_at_horizon_four() {
        // Anomaly at t+3 with alpha=4 means the label at t is 1.
        let mut g = vec![0u8; 10];
        g[5] = 1;
        let got = anticipation_labels(&series(g), 4).unwrap();
        assert_eq!(got.values[2], 1); // frames 3..=6 include frame 5
        assert_eq!(got.values[5], 0); // frames 6..=9 do not
        assert_eq!(got.values[1], 1); // frames 2..=5 include frame 5
        assert_eq!(got.values[0], 0); // frames 1..=4 do not
    }

    #[test]
    fn matches_brute_force_on_random_sequences() {
        use rand::Rng;
        let mut rng = crate::rng::sub_rng(42, "labels-oracle");
        for _ in 0..1000 {
            let len = rng.random_range(2..=500);
            let alpha = rng.random_range(1..=10.min(len - 1));
            let g: Vec<u8> = (0..len).map(|_| rng.random_range(0..=1) as u8).collect();
            let got = anticipation_labels(&series(g.clone()), alpha).unwrap();
            assert_eq!(got.values, window_max_oracle(&g, alpha));
        }
    }

    #[test]
    fn horizon_at_or_past_length_is_an_error() {
        assert!(anticipation_labels(&series(vec![0, 1, 0]), 3).is_err());
        assert!(anticipation_labels(&series(vec![0, 1, 0]), 7).is_err());
    }

    #[test]
    fn align_equal_lengths_is_identity() {
        let scores = ScoreSeries {
            video_id: "v".into(),
            alpha: 0,
            start_offset: 0,
            values: vec![0.1, 0.2, 0.3],
        };
        let pair = align_series(&scores, &series(vec![0, 1, 0])).unwrap();
        assert_eq!(pair.scores, vec![0.1, 0.2, 0.3]);
        assert_eq!(pair.labels, vec![0, 1, 0]);
        assert_eq!(pair.dropped_head, 0);
        assert_eq!(pair.dropped_tail, 0);
    }

    #[test]
    fn align_drops_warmup_from_labels() {
        let scores = ScoreSeries {
            video_id: "v".into(),
            alpha: 0,
            start_offset: 2,
            values: vec![0.5, 0.6],
        };
        let pair = align_series(&scores, &series(vec![1, 1, 0, 1])).unwrap();
        assert_eq!(pair.scores, vec![0.5, 0.6]);
        assert_eq!(pair.labels, vec![0, 1]);
        assert_eq!(pair.dropped_head, 2);
        assert_eq!(pair.dropped_tail, 0);
    }

    #[test]
    fn align_rejects_alpha_mismatch() {
        let scores = ScoreSeries {
            video_id: "v".into(),
            alpha: 3,
            start_offset: 0,
            values: vec![0.5],
        };
        assert!(align_series(&scores, &series(vec![1, 1])).is_err());
    }

    proptest! {
        #[test]
        fn aligned_lengths_always_equal(
            n_scores in 0usize..40,
            n_labels in 1usize..40,
            offset in 0usize..10,
        ) {
            let scores = ScoreSeries {
                video_id: "v".into(),
                alpha: 0,
                start_offset: offset,
                values: vec![0.0; n_scores],
            };
            let labels = series(vec![0; n_labels]);
            let pair = align_series(&scores, &labels).unwrap();
            prop_assert_eq!(pair.scores.len(), pair.labels.len());
            let accounted = pair.dropped_head + pair.labels.len();
            prop_assert!(accounted <= n_labels);
        }

        #[test]
        fn widening_horizon_never_clears_a_label(
            g in proptest::collection::vec(0u8..=1, 6..80),
            a1 in 1usize..3,
            a2 in 3usize..5,
        ) {
            prop_assume!(a2 < g.len());
            let s1 = anticipation_labels(&series(g.clone()), a1).unwrap();
            let s2 = anticipation_labels(&series(g), a2).unwrap();
            for t in 0..s2.values.len() {
                prop_assert!(s2.values[t] >= s1.values[t]);
            }
        }

        #[test]
        fn composed_windows_equal_one_wide_window(
            g in proptest::collection::vec(0u8..=1, 8..80),
            a1 in 1usize..4,
            a2 in 1usize..4,
        ) {
            prop_assume!(a1 + a2 < g.len());
            // max over (t, t+a1] of max over (u, u+a2] == max over (t, t+a1+a2]
            let inner = anticipation_labels(&series(g.clone()), a2).unwrap();
            let mut shifted = inner.values.clone();
            // Composing via the oracle definition on the overlap region:
            let outer_direct = anticipation_labels(&series(g.clone()), a1 + a2).unwrap();
            // window-max of `inner` with width a1, including the current
            // element offset by one (labels at t+1..t+a1 plus inner[t]).
            let mut composed = Vec::new();
            for t in 0..outer_direct.values.len() {
                let mut m = inner.values[t];
                for i in 1..=a1 {
                    if t + i < shifted.len() && shifted[t + i] > m {
                        m = shifted[t + i];
                    }
                }
                // also the raw labels in (t, t+a1]
                for i in 1..=a1 {
                    if g[t + i] > m {
                        m = g[t + i];
                    }
                }
                composed.push(m);
            }
            shifted.clear();
            prop_assert_eq!(composed, outer_direct.values);
        }

        #[test]
        fn constant_vectors_stay_constant(
            value in 0u8..=1,
            len in 5usize..60,
            alpha in 1usize..4,
        ) {
            prop_assume!(alpha < len);
            let got = anticipation_labels(&series(vec![value; len]), alpha).unwrap();
            prop_assert!(got.values.iter().all(|&v| v == value));
        }
    }
}
