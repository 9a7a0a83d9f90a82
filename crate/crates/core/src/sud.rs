//! Streaming sense-unit detector.
//!
//! [`AccumulatorState`] is the online form of threshold segmentation: frames
//! arrive one weight at a time and every frame yields a read or write
//! decision. Weights come from a [`WeightOracle`], which stands in for a
//! trained detector network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cif::{fire_count, FeatureSequence, FrameWeights};
use crate::datagen::UtteranceRecord;
use crate::error::{Error, Result};

/// Weight given to frames that are not annotated boundaries.
pub const ORACLE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyTag {
    Low,
    Medium,
    High,
}

impl LatencyTag {
    pub const ALL: [LatencyTag; 3] = [LatencyTag::Low, LatencyTag::Medium, LatencyTag::High];

    pub fn as_str(self) -> &'static str {
        match self {
            LatencyTag::Low => "low",
            LatencyTag::Medium => "medium",
            LatencyTag::High => "high",
        }
    }
}

impl fmt::Display for LatencyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LatencyTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(LatencyTag::Low),
            "medium" | "med" => Ok(LatencyTag::Medium),
            "high" => Ok(LatencyTag::High),
            other => Err(format!(
                "unknown latency tag `{other}` (expected low, medium or high)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: DecisionKind,
    /// 1-based index of the frame that produced this decision.
    pub frame_index: usize,
    /// Number of sense-unit triggers at this frame; non-zero iff `Write`.
    pub fires: u32,
}

impl Decision {
    pub fn is_write(&self) -> bool {
        self.kind == DecisionKind::Write
    }
}

/// Running state of the detector within one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatorState {
    gamma: f64,
    tag: LatencyTag,
    residual: f64,
    frames_seen: usize,
    frames_since_last_trigger: usize,
}

impl AccumulatorState {
    pub fn new(gamma: f64, tag: LatencyTag) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::NonPositiveThreshold(gamma));
        }
        Ok(Self {
            gamma,
            tag,
            residual: 0.0,
            frames_seen: 0,
            frames_since_last_trigger: 0,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tag(&self) -> LatencyTag {
        self.tag
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn frames_since_last_trigger(&self) -> usize {
        self.frames_since_last_trigger
    }

    /// Consume one frame's weight. The state is untouched on error.
    pub fn push_frame(&mut self, alpha: f64) -> Result<Decision> {
        if !alpha.is_finite() {
            return Err(Error::NonFiniteWeight {
                index: self.frames_seen,
            });
        }
        if alpha < 0.0 {
            return Err(Error::NegativeWeight {
                index: self.frames_seen,
                value: alpha,
            });
        }
        let (fires, residual) = fire_count(self.residual + alpha, self.gamma);
        self.residual = residual;
        self.frames_seen += 1;
        let kind = if fires > 0 {
            self.frames_since_last_trigger = 0;
            DecisionKind::Write
        } else {
            self.frames_since_last_trigger += 1;
            DecisionKind::Read
        };
        Ok(Decision {
            kind,
            frame_index: self.frames_seen,
            fires,
        })
    }

    pub fn run_stream(&mut self, weights: &[f64]) -> Result<Vec<Decision>> {
        weights.iter().map(|&a| self.push_frame(a)).collect()
    }
}

/// Source of per-frame detector weights for an utterance.
///
/// Implementations must be deterministic and return non-negative weights,
/// one per frame.
pub trait WeightOracle: Send + Sync {
    fn describe(&self) -> String;

    fn weights(
        &self,
        record: &UtteranceRecord,
        features: &FeatureSequence,
        tag: LatencyTag,
    ) -> Result<FrameWeights>;
}

/// How a ground-truth oracle lays out a unit's mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruthShape {
    /// The whole unit of mass sits on the unit's last frame.
    Peak,
    /// The unit of mass is spread evenly over the unit's frames, so the
    /// cumulative weight crosses each integer exactly at a boundary.
    Spread,
}

/// Weights of a perfectly trained detector for the tag's annotation tier.
///
/// Every annotated boundary closes exactly one unit of mass; the final unit
/// of the utterance carries only the floor weight, since end of stream
/// closes it anyway.
pub fn oracle_ground_truth(record: &UtteranceRecord, tag: LatencyTag) -> Result<FrameWeights> {
    ground_truth_weights(record, tag, GroundTruthShape::Peak)
}

pub fn ground_truth_weights(
    record: &UtteranceRecord,
    tag: LatencyTag,
    shape: GroundTruthShape,
) -> Result<FrameWeights> {
    let frames = record.frame_count();
    let boundaries = record.boundaries(tag);
    if boundaries.iter().any(|&b| b == 0 || b > frames) {
        return Err(Error::MissingAnnotation {
            id: record.id.clone(),
            tier: tag.as_str(),
        });
    }
    let mut w = vec![ORACLE_FLOOR; frames];
    let mut start = 0;
    for &b in boundaries {
        match shape {
            GroundTruthShape::Peak => w[b - 1] = 1.0,
            GroundTruthShape::Spread => {
                let share = 1.0 / (b - start) as f64;
                for x in &mut w[start..b] {
                    *x += share;
                }
            }
        }
        start = b;
    }
    FrameWeights::new(w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthOracle {
    pub shape: GroundTruthShape,
}

impl WeightOracle for GroundTruthOracle {
    fn describe(&self) -> String {
        match self.shape {
            GroundTruthShape::Peak => "gt-peak".into(),
            GroundTruthShape::Spread => "gt".into(),
        }
    }

    fn weights(
        &self,
        record: &UtteranceRecord,
        _: &FeatureSequence,
        tag: LatencyTag,
    ) -> Result<FrameWeights> {
        ground_truth_weights(record, tag, self.shape)
    }
}

/// Constant weight per frame: a fixed-interval policy in detector form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformOracle {
    rate: f64,
}

impl UniformOracle {
    pub fn rate(&self) -> f64 {
        self.rate
    }
}

pub fn oracle_uniform(rate: f64) -> Result<UniformOracle> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidRange(format!(
            "uniform rate must be positive, got {rate}"
        )));
    }
    Ok(UniformOracle { rate })
}

impl WeightOracle for UniformOracle {
    fn describe(&self) -> String {
        format!("uniform@{}", self.rate)
    }

    fn weights(
        &self,
        record: &UtteranceRecord,
        _: &FeatureSequence,
        _: LatencyTag,
    ) -> Result<FrameWeights> {
        FrameWeights::new(vec![self.rate; record.frame_count()])
    }
}
