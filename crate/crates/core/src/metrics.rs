//! Latency, efficiency and quality metrics.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const BLEU_MAX_ORDER: usize = 4;

/// Per-token delays for one hypothesis, in seconds of source audio.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayProfile {
    pub delays: Vec<f64>,
    pub source_duration: f64,
    pub ref_len: usize,
}

impl DelayProfile {
    pub fn hyp_len(&self) -> usize {
        self.delays.len()
    }
}

/// Length-adaptive average lagging.
///
/// The ideal emission rate uses `max(|hyp|, |ref|)` as its denominator, so
/// over-generation is not rewarded with a lower score.
pub fn laal(profile: &DelayProfile) -> Result<f64> {
    let hyp_len = profile.delays.len();
    if hyp_len == 0 {
        return Err(Error::EmptyHypothesis);
    }
    if !(profile.source_duration > 0.0) {
        return Err(Error::ZeroAudio);
    }
    let rate = profile.source_duration / hyp_len.max(profile.ref_len) as f64;
    let tau = profile
        .delays
        .iter()
        .position(|&d| d >= profile.source_duration)
        .map_or(hyp_len, |i| i + 1);
    let lag: f64 = profile.delays[..tau]
        .iter()
        .enumerate()
        .map(|(i, &d)| d - i as f64 * rate)
        .sum();
    Ok(lag / tau as f64)
}

/// Decision-path cost over one or more sessions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EfficiencyStats {
    pub decision_count: usize,
    /// Seconds spent making read/write decisions.
    pub total_decision_compute: f64,
    pub audio_duration: f64,
}

impl EfficiencyStats {
    pub fn merge(self, other: EfficiencyStats) -> EfficiencyStats {
        EfficiencyStats {
            decision_count: self.decision_count + other.decision_count,
            total_decision_compute: self.total_decision_compute + other.total_decision_compute,
            audio_duration: self.audio_duration + other.audio_duration,
        }
    }
}

/// Mean decision time in milliseconds.
pub fn avg_decision_time(stats: &EfficiencyStats) -> Result<f64> {
    if stats.decision_count == 0 {
        return Err(Error::NoDecisions);
    }
    Ok(1000.0 * stats.total_decision_compute / stats.decision_count as f64)
}

/// Real-time factor of the decision path.
pub fn rtf(stats: &EfficiencyStats) -> Result<f64> {
    if !(stats.audio_duration > 0.0) {
        return Err(Error::ZeroAudio);
    }
    Ok(stats.total_decision_compute / stats.audio_duration)
}

/// Clipped n-gram statistics accumulated over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn from_pair<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Self {
        let mut stats = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            if hyp.len() < n {
                continue;
            }
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hyp, n);
            stats.totals[n - 1] = hyp.len() + 1 - n;
            stats.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Modified precision for n-gram order `n` (1-based).
    pub fn precision(&self, n: usize) -> f64 {
        let total = self.totals[n - 1];
        if total == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / total as f64
        }
    }

    /// Unsmoothed BLEU-4 in [0, 1].
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_mean = (1..=BLEU_MAX_ORDER)
            .map(|n| self.precision(n).ln())
            .sum::<f64>()
            / BLEU_MAX_ORDER as f64;
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * log_mean.exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU-4 over paired hypotheses and references.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(&BleuStats::from_pair(h, r));
    }
    Ok(stats.score())
}
