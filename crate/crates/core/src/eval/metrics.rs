//! ACER / ACC / AUC / EER with a development-set threshold.
//!
//! A sample is accepted as live when `live_score >= threshold`. Rates are
//! step functions of the threshold that only change at score values, so every
//! threshold inside `(s_k, s_{k+1}]` behaves the same; the operating points
//! considered are one per such interval.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: String,
    pub label: Label,
    pub live_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        Self { entries }
    }

    /// Convenience constructor from bare `(label, score)` pairs.
    pub fn from_pairs(pairs: &[(Label, f64)]) -> Self {
        Self::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, &(label, live_score))| ScoreEntry { sample_id: format!("s{i}"), label, live_score })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn split_by_label(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lives = Vec::new();
        let mut attacks = Vec::new();
        for e in &self.entries {
            if e.label.is_live() {
                lives.push(e.live_score);
            } else {
                attacks.push(e.live_score);
            }
        }
        (lives, attacks)
    }

    fn checked_classes(&self, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some(e) = self.entries.iter().find(|e| !e.live_score.is_finite()) {
            return Err(Error::Numeric(format!("{what} score of {} is not finite", e.sample_id)));
        }
        let (lives, attacks) = self.split_by_label();
        if lives.is_empty() || attacks.is_empty() {
            return Err(Error::Contract(format!(
                "{what} set needs both classes ({} live, {} attack)",
                lives.len(),
                attacks.len()
            )));
        }
        Ok((lives, attacks))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub lives: usize,
    pub attacks: usize,
    /// Attacks accepted as live.
    pub false_accepts: usize,
    /// Lives rejected.
    pub false_rejects: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub counts: ErrorCounts,
}

fn sorted_unique(lives: &[f64], attacks: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = lives.iter().chain(attacks).copied().collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

fn counts_at(lives: &[f64], attacks: &[f64], t: f64) -> ErrorCounts {
    ErrorCounts {
        lives: lives.len(),
        attacks: attacks.len(),
        false_accepts: attacks.iter().filter(|&&s| s >= t).count(),
        false_rejects: lives.iter().filter(|&&s| s < t).count(),
    }
}

impl ErrorCounts {
    pub fn apcer(&self) -> f64 {
        self.false_accepts as f64 / self.attacks as f64
    }

    pub fn bpcer(&self) -> f64 {
        self.false_rejects as f64 / self.lives as f64
    }
}

/// Equal-error operating point: the interval minimising `|APCER − BPCER|`,
/// then `APCER + BPCER`; if several intervals tie, the midpoint of their span.
fn eer_threshold(lives: &[f64], attacks: &[f64]) -> f64 {
    let s = sorted_unique(lives, attacks);
    let n = s.len();
    // interval k is (lo_k, hi_k]; the outer two are padded by 1
    let bounds = |k: usize| -> (f64, f64) {
        let lo = if k == 0 { s[0] - 1.0 } else { s[k - 1] };
        let hi = if k == n { s[n - 1] + 1.0 } else { s[k] };
        (lo, hi)
    };
    // rates in interval k, swept with two pointers
    let (mut l_sorted, mut a_sorted) = (lives.to_vec(), attacks.to_vec());
    l_sorted.sort_by(f64::total_cmp);
    a_sorted.sort_by(f64::total_cmp);
    let (nl, na) = (lives.len() as f64, attacks.len() as f64);
    let (mut li, mut ai) = (0usize, 0usize);
    let mut best: Option<((f64, f64), usize, usize)> = None;
    for k in 0..=n {
        if k > 0 {
            let passed = s[k - 1];
            while li < l_sorted.len() && l_sorted[li] <= passed {
                li += 1;
            }
            while ai < a_sorted.len() && a_sorted[ai] <= passed {
                ai += 1;
            }
        }
        let apcer = (a_sorted.len() - ai) as f64 / na;
        let bpcer = li as f64 / nl;
        let key = ((apcer - bpcer).abs(), apcer + bpcer);
        best = match best {
            None => Some((key, k, k)),
            Some((b, first, _)) if key == b => Some((b, first, k)),
            Some((b, ..)) if key < b => Some((key, k, k)),
            keep => keep,
        };
    }
    let (_, first, last) = best.expect("at least one interval");
    let (lo, _) = bounds(first);
    let (_, hi) = bounds(last);
    0.5 * (lo + hi)
}

/// Threshold equalising APCER and BPCER on the development scores.
pub fn dev_threshold(dev: &ScoreSet) -> Result<f64> {
    let (lives, attacks) = dev.checked_classes("dev")?;
    Ok(eer_threshold(&lives, &attacks))
}

/// Probability that a random live outscores a random attack; ties count ½.
pub fn rank_auc(lives: &[f64], attacks: &[f64]) -> f64 {
    let mut sorted_attacks = attacks.to_vec();
    sorted_attacks.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for &l in lives {
        let below = sorted_attacks.partition_point(|&a| a < l);
        let not_above = sorted_attacks.partition_point(|&a| a <= l);
        acc += below as f64 + 0.5 * (not_above - below) as f64;
    }
    acc / (lives.len() as f64 * attacks.len() as f64)
}

/// Rates on `test` at a fixed threshold.
pub fn metrics_at(test: &ScoreSet, threshold: f64) -> Result<MetricsReport> {
    let (lives, attacks) = test.checked_classes("test")?;
    let counts = counts_at(&lives, &attacks, threshold);
    let (apcer, bpcer) = (counts.apcer(), counts.bpcer());
    let total = (counts.lives + counts.attacks) as f64;
    let acc = 1.0 - (counts.false_accepts + counts.false_rejects) as f64 / total;
    let own = counts_at(&lives, &attacks, eer_threshold(&lives, &attacks));
    Ok(MetricsReport {
        threshold,
        apcer,
        bpcer,
        acer: 0.5 * (apcer + bpcer),
        acc,
        auc: rank_auc(&lives, &attacks),
        eer: 0.5 * (own.apcer() + own.bpcer()),
        counts,
    })
}

/// Threshold from `dev`, rates on `test`; EER is computed on `test` itself.
pub fn compute_metrics(dev: &ScoreSet, test: &ScoreSet) -> Result<MetricsReport> {
    let t = dev_threshold(dev)?;
    metrics_at(test, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(lives: &[f64], attacks: &[f64]) -> ScoreSet {
        let mut pairs: Vec<_> = lives.iter().map(|&s| (Label::Live, s)).collect();
        pairs.extend(attacks.iter().map(|&s| (Label::Spoof, s)));
        ScoreSet::from_pairs(&pairs)
    }

    #[test]
    fn separated_dev_gives_midpoint() {
        let dev = set(&[0.9, 0.9], &[0.1, 0.1]);
        assert_eq!(dev_threshold(&dev).unwrap(), 0.5);
    }

    #[test]
    fn crossed_dev_threshold_equalises_rates() {
        let dev = set(&[0.9, 0.4], &[0.6, 0.1]);
        let t = dev_threshold(&dev).unwrap();
        assert!((t - 0.5).abs() < 1e-15);
        let c = counts_at(&[0.9, 0.4], &[0.6, 0.1], t);
        assert_eq!((c.apcer(), c.bpcer()), (0.5, 0.5));
    }

    #[test]
    fn symmetric_scores_threshold_half() {
        let dev = set(&[0.7, 0.8, 0.3], &[0.3, 0.2, 0.7]);
        assert!((dev_threshold(&dev).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_contract_error() {
        let err = dev_threshold(&set(&[0.2, 0.3], &[])).unwrap_err();
        assert_eq!(err.kind(), "contract");
        assert_eq!(compute_metrics(&set(&[0.2], &[0.1]), &set(&[], &[0.4])).unwrap_err().kind(), "contract");
    }

    #[test]
    fn perfect_and_hand_cases() {
        let dev = set(&[0.9], &[0.1]);
        let r = compute_metrics(&dev, &set(&[0.9, 0.8], &[0.2, 0.1])).unwrap();
        assert_eq!((r.acer, r.acc, r.auc, r.eer), (0.0, 1.0, 1.0, 0.0));

        let r = compute_metrics(&dev, &set(&[0.9, 0.4], &[0.6, 0.1])).unwrap();
        assert_eq!(r.threshold, 0.5);
        assert_eq!((r.apcer, r.bpcer, r.acer, r.acc, r.auc), (0.5, 0.5, 0.5, 0.5, 0.75));
    }

    #[test]
    fn constant_scores_auc_half() {
        let s = set(&[0.3; 4], &[0.3; 3]);
        assert_eq!(rank_auc(&[0.3; 4], &[0.3; 3]), 0.5);
        let r = metrics_at(&s, 0.5).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    /// Independent oracle: explicit candidate thresholds, direct counting,
    /// all pairs for AUC.
    fn brute(dev: &ScoreSet, test: &ScoreSet) -> (f64, f64, f64, f64, f64, f64, f64) {
        fn rates(s: &ScoreSet, t: f64) -> (f64, f64) {
            let (mut fa, mut a, mut fr, mut l) = (0.0, 0.0, 0.0, 0.0);
            for e in &s.entries {
                if e.label.is_live() {
                    l += 1.0;
                    if e.live_score < t {
                        fr += 1.0;
                    }
                } else {
                    a += 1.0;
                    if e.live_score >= t {
                        fa += 1.0;
                    }
                }
            }
            (fa / a, fr / l)
        }
        fn eer_t(s: &ScoreSet) -> f64 {
            let mut v: Vec<f64> = s.entries.iter().map(|e| e.live_score).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup();
            let mut cands = vec![(v[0] - 1.0, v[0])];
            for w in v.windows(2) {
                cands.push((w[0], w[1]));
            }
            cands.push((v[v.len() - 1], v[v.len() - 1] + 1.0));
            let keys: Vec<(f64, f64)> = cands
                .iter()
                .map(|&(lo, hi)| {
                    let (a, b) = rates(s, 0.5 * (lo + hi));
                    ((a - b).abs(), a + b)
                })
                .collect();
            let best = keys.iter().copied().fold((f64::INFINITY, f64::INFINITY), |m, k| if k < m { k } else { m });
            let idx: Vec<usize> = (0..keys.len()).filter(|&i| keys[i] == best).collect();
            0.5 * (cands[idx[0]].0 + cands[*idx.last().unwrap()].1)
        }
        let t = eer_t(dev);
        let (apcer, bpcer) = rates(test, t);
        let (mut wins, mut pairs) = (0.0, 0.0);
        for l in test.entries.iter().filter(|e| e.label.is_live()) {
            for a in test.entries.iter().filter(|e| !e.label.is_live()) {
                pairs += 1.0;
                if l.live_score > a.live_score {
                    wins += 1.0;
                } else if l.live_score == a.live_score {
                    wins += 0.5;
                }
            }
        }
        let n = test.len() as f64;
        let wrong = test
            .entries
            .iter()
            .filter(|e| (e.live_score >= t) != e.label.is_live())
            .count() as f64;
        let (ea, eb) = rates(test, eer_t(test));
        (t, apcer, bpcer, 1.0 - wrong / n, wins / pairs, 0.5 * (ea + eb), 0.5 * (apcer + bpcer))
    }

    fn score_set() -> impl Strategy<Value = ScoreSet> {
        // coarse grid in half the cases so ties are exercised
        (1usize..25, 1usize..25, any::<bool>()).prop_flat_map(|(nl, na, coarse)| {
            let score = move || {
                if coarse {
                    (0u32..6).prop_map(|k| k as f64 / 5.0).boxed()
                } else {
                    (0.0f64..1.0).boxed()
                }
            };
            (proptest::collection::vec(score(), nl), proptest::collection::vec(score(), na))
                .prop_map(|(l, a)| set(&l, &a))
        })
    }

    fn reflect(s: &ScoreSet) -> ScoreSet {
        ScoreSet::new(
            s.entries
                .iter()
                .map(|e| ScoreEntry {
                    sample_id: e.sample_id.clone(),
                    label: if e.label.is_live() { Label::Spoof } else { Label::Live },
                    live_score: 1.0 - e.live_score,
                })
                .collect(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_brute_force_oracle(dev in score_set(), test in score_set()) {
            let r = compute_metrics(&dev, &test).unwrap();
            let (t, apcer, bpcer, acc, auc, eer, acer) = brute(&dev, &test);
            prop_assert!((r.threshold - t).abs() <= 1e-12);
            prop_assert!((r.apcer - apcer).abs() <= 1e-12);
            prop_assert!((r.bpcer - bpcer).abs() <= 1e-12);
            prop_assert!((r.acer - acer).abs() <= 1e-12);
            prop_assert!((r.acc - acc).abs() <= 1e-12);
            prop_assert!((r.auc - auc).abs() <= 1e-12);
            prop_assert!((r.eer - eer).abs() <= 1e-12);
            prop_assert!((r.acer - 0.5 * (r.apcer + r.bpcer)).abs() <= 1e-15);
            for v in [r.apcer, r.bpcer, r.acer, r.acc, r.auc, r.eer] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(test in score_set()) {
            let (l, a) = test.split_by_label();
            let f = |s: f64| (3.0 * s).exp() - 7.0;
            let lt: Vec<f64> = l.iter().map(|&s| f(s)).collect();
            let at: Vec<f64> = a.iter().map(|&s| f(s)).collect();
            prop_assert_eq!(rank_auc(&l, &a), rank_auc(&lt, &at));
        }

        #[test]
        fn swapping_labels_swaps_error_rates(dev in score_set(), test in score_set()) {
            let r = compute_metrics(&dev, &test).unwrap();
            let s = compute_metrics(&reflect(&dev), &reflect(&test)).unwrap();
            prop_assert!((r.apcer - s.bpcer).abs() <= 1e-12);
            prop_assert!((r.bpcer - s.apcer).abs() <= 1e-12);
            prop_assert!((r.acer - s.acer).abs() <= 1e-12);
        }

        #[test]
        fn eer_at_most_half_when_roc_never_below_chance(test in score_set()) {
            let (l, a) = test.split_by_label();
            let above_chance = sorted_unique(&l, &a).iter().all(|&t| {
                let c = counts_at(&l, &a, t);
                c.apcer() + c.bpcer() <= 1.0
            });
            let r = metrics_at(&test, 0.5).unwrap();
            if above_chance {
                prop_assert!(r.auc >= 0.5);
                prop_assert!((0.0..=0.5).contains(&r.eer), "auc {} eer {}", r.auc, r.eer);
            }
        }
    }

    #[test]
    fn eer_can_exceed_half_while_auc_is_above_half() {
        // the ROC dips below chance around the crossing point
        let s = set(&[0.9, 0.9, 0.7, 0.7, 0.7], &[0.8, 0.8, 0.8, 0.1, 0.1]);
        let r = metrics_at(&s, 0.5).unwrap();
        assert!((r.auc - 0.64).abs() < 1e-12);
        assert!((r.eer - 0.6).abs() < 1e-12);
    }
}
