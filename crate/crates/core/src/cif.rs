//! Continuous integrate-and-fire primitives.
//!
//! Everything here is a pure function over 64-bit floats: weight scaling,
//! threshold segmentation with residual carryover, and the soft-boundary
//! integration that turns a run of frames into fired vectors.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack under which an accumulator that is just short of the
/// threshold still counts as having reached it.
pub const FIRE_TOLERANCE: f64 = 1e-9;

/// Per-frame non-negative weight mass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameWeights(Vec<f64>);

impl FrameWeights {
    /// Validates that every value is finite and non-negative.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFiniteWeight { index });
            }
            if value < 0.0 {
                return Err(Error::NegativeWeight { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Sub-range of frames as an owned weight sequence.
    pub fn slice(&self, range: Range<usize>) -> FrameWeights {
        FrameWeights(self.0[range].to_vec())
    }
}

impl AsRef<[f64]> for FrameWeights {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A run of equal-dimension feature frames, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    dim: usize,
    frame_duration: f64,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, dim: usize, frame_duration: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        if !(frame_duration > 0.0) {
            return Err(Error::InvalidRange(format!(
                "frame duration must be positive, got {frame_duration}"
            )));
        }
        Ok(Self {
            data,
            dim,
            frame_duration,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>], frame_duration: f64) -> Result<Self> {
        let dim = frames.first().map_or(1, Vec::len);
        let mut data = Vec::with_capacity(frames.len() * dim);
        for frame in frames {
            if frame.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: frame.len(),
                });
            }
            data.extend_from_slice(frame);
        }
        Self::new(data, dim, frame_duration)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_duration(&self) -> f64 {
        self.frame_duration
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn slice(&self, range: Range<usize>) -> FeatureSequence {
        FeatureSequence {
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
            dim: self.dim,
            frame_duration: self.frame_duration,
        }
    }
}

/// Boundaries produced by thresholding accumulated weight.
///
/// Boundaries are 1-based frame indices naming the last frame of each closed
/// segment. A frame that fires several times appears several times.
#[derive(Debug, Clone, PartialEq)]
pub struct SenseSegmentation {
    pub boundaries: Vec<usize>,
    pub final_residual: f64,
}

impl SenseSegmentation {
    pub fn trigger_count(&self) -> usize {
        self.boundaries.len()
    }

    /// Number of segments when the stream tail after the last boundary is
    /// counted as the final segment.
    pub fn segment_count(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Zero-based frame ranges of every segment over a stream of
    /// `frame_count` frames, including the (possibly empty) tail segment.
    pub fn segments(&self, frame_count: usize) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.boundaries.len() + 1);
        let mut start = 0;
        for &b in &self.boundaries {
            out.push(start..b);
            start = b;
        }
        out.push(start..frame_count.max(start));
        out
    }
}

/// Fired vectors for one sense unit.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedUnit {
    pub vectors: Vec<Vec<f64>>,
    /// Weight mass that went into each fired vector.
    pub masses: Vec<f64>,
    /// Mass left after the last firing, whether it was fired or dropped.
    pub tail_mass: f64,
    pub tail_fired: bool,
}

impl IntegratedUnit {
    pub fn count(&self) -> usize {
        self.vectors.len()
    }

    /// Mass that was neither part of a fired vector nor kept.
    pub fn dropped_mass(&self) -> f64 {
        if self.tail_fired {
            0.0
        } else {
            self.tail_mass
        }
    }
}

/// What to do with mass left in the accumulator after the last frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailPolicy {
    /// Fire when the tail holds at least half the threshold.
    HalfThreshold,
    /// Fire a non-empty tail only if fewer than `target` vectors were fired.
    ForceIfShort {
        target: usize,
    },
    Drop,
}

/// Rescale weights so they sum to `target_sum`.
pub fn scale_weights(raw: &FrameWeights, target_sum: f64) -> Result<FrameWeights> {
    if !(target_sum >= 0.0) || !target_sum.is_finite() {
        return Err(Error::InvalidRange(format!(
            "scaling target must be a finite non-negative number, got {target_sum}"
        )));
    }
    let total = raw.sum();
    if total == 0.0 {
        if target_sum > 0.0 {
            return Err(Error::ZeroMass { target: target_sum });
        }
        return Ok(raw.clone());
    }
    let factor = target_sum / total;
    Ok(FrameWeights(raw.0.iter().map(|w| w * factor).collect()))
}

/// One accumulator step: returns how many thresholds `accumulated` covers and
/// what is left. Exact multiples fire; so does anything within
/// [`FIRE_TOLERANCE`] of the next multiple.
///
/// Both the offline segmenter and the streaming detector go through this
/// function so that their decisions agree bit for bit.
pub fn fire_count(accumulated: f64, gamma: f64) -> (u32, f64) {
    let slack = FIRE_TOLERANCE * gamma;
    let mut fires = (accumulated / gamma).floor().max(0.0);
    let mut residual = accumulated - fires * gamma;
    if residual < 0.0 && fires > 0.0 {
        fires -= 1.0;
        residual += gamma;
    }
    while residual >= gamma - slack {
        fires += 1.0;
        residual -= gamma;
    }
    (fires as u32, residual.max(0.0))
}

fn check_threshold(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::NonPositiveThreshold(gamma));
    }
    Ok(())
}

fn check_weights(weights: &[f64]) -> Result<()> {
    for (index, &value) in weights.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFiniteWeight { index });
        }
        if value < 0.0 {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    Ok(())
}

/// Scan weights left to right and emit a boundary each time the accumulated
/// mass reaches `gamma`, carrying the excess into the next segment.
pub fn segment_by_threshold(
    weights: &[f64],
    gamma: f64,
    initial_residual: f64,
) -> Result<SenseSegmentation> {
    check_threshold(gamma)?;
    if !(0.0..gamma).contains(&initial_residual) {
        return Err(Error::InvalidResidual {
            residual: initial_residual,
            gamma,
        });
    }
    check_weights(weights)?;

    let mut residual = initial_residual;
    let mut boundaries = Vec::new();
    for (i, &alpha) in weights.iter().enumerate() {
        let (fires, rest) = fire_count(residual + alpha, gamma);
        boundaries.extend(std::iter::repeat_n(i + 1, fires as usize));
        residual = rest;
    }
    Ok(SenseSegmentation {
        boundaries,
        final_residual: residual,
    })
}

/// Scale `weights` to `n_units - 1` and segment at threshold 1.0, giving
/// `n_units` segments.
///
/// If rounding leaves the scan one trigger short, the final frame is closed
/// as the last boundary so that the segment count contract holds.
pub fn segment_into_units(weights: &FrameWeights, n_units: usize) -> Result<SenseSegmentation> {
    if n_units == 0 {
        return Err(Error::InvalidRange("unit count must be at least 1".into()));
    }
    let target = (n_units - 1) as f64;
    let scaled = scale_weights(weights, target)?;
    let mut seg = segment_by_threshold(scaled.as_slice(), 1.0, 0.0)?;
    let wanted = n_units - 1;
    if seg.boundaries.len() + 1 == wanted && !weights.is_empty() {
        seg.boundaries.push(weights.len());
        seg.final_residual = 0.0;
    }
    if seg.boundaries.len() != wanted {
        return Err(Error::Internal(format!(
            "scaled segmentation produced {} boundaries, expected {wanted}",
            seg.boundaries.len()
        )));
    }
    Ok(seg)
}

/// Integrate-and-fire over one segment.
///
/// Each fired vector is the weighted sum of the frames that contributed
/// exactly `lambda` of mass; a frame that straddles a firing is split
/// between the closing and the opening vector.
pub fn cif_integrate(
    segment: &FeatureSequence,
    weights: &FrameWeights,
    lambda: f64,
    tail: TailPolicy,
) -> Result<IntegratedUnit> {
    check_threshold(lambda)?;
    if weights.len() != segment.len() {
        return Err(Error::DimensionMismatch {
            expected: segment.len(),
            found: weights.len(),
        });
    }
    check_weights(weights.as_slice())?;

    let dim = segment.dim();
    let slack = FIRE_TOLERANCE * lambda;
    let mut vectors = Vec::new();
    let mut masses = Vec::new();
    let mut acc = 0.0;
    let mut state = vec![0.0; dim];

    for (h, &beta) in segment.frames().zip(weights.as_slice()) {
        if acc + beta < lambda - slack {
            acc += beta;
            axpy(&mut state, beta, h);
            continue;
        }
        // Close the open vector with the part of this frame that completes it.
        let closing = (lambda - acc).min(beta);
        axpy(&mut state, closing, h);
        vectors.push(std::mem::replace(&mut state, vec![0.0; dim]));
        masses.push(acc + closing);

        let mut remaining = beta - closing;
        while remaining >= lambda - slack {
            let mass = lambda.min(remaining);
            vectors.push(h.iter().map(|x| x * mass).collect());
            masses.push(mass);
            remaining -= mass;
        }
        acc = remaining.max(0.0);
        axpy(&mut state, acc, h);
    }

    let fire_tail = acc > 0.0
        && match tail {
            TailPolicy::HalfThreshold => acc >= lambda / 2.0,
            TailPolicy::ForceIfShort { target } => vectors.len() < target,
            TailPolicy::Drop => false,
        };
    if fire_tail {
        vectors.push(state);
        masses.push(acc);
    }
    Ok(IntegratedUnit {
        vectors,
        masses,
        tail_mass: acc,
        tail_fired: fire_tail,
    })
}

/// Scale a unit's weights to `target_count` and integrate at threshold 1.0,
/// returning exactly `target_count` vectors.
pub fn integrate_scaled_unit(
    segment: &FeatureSequence,
    weights: &FrameWeights,
    target_count: usize,
) -> Result<IntegratedUnit> {
    if target_count == 0 {
        return Err(Error::InvalidRange(
            "target count must be at least 1".into(),
        ));
    }
    let scaled = scale_weights(weights, target_count as f64)?;
    let unit = cif_integrate(
        segment,
        &scaled,
        1.0,
        TailPolicy::ForceIfShort {
            target: target_count,
        },
    )?;
    if unit.count() != target_count {
        return Err(Error::Internal(format!(
            "scaled integration fired {} vectors, expected {target_count}",
            unit.count()
        )));
    }
    Ok(unit)
}

fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}
