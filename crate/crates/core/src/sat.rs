//! Sense-aware transducer training mathematics at desk scale.
//!
//! Two quantity losses tie the detector's weight mass to unit counts: the
//! α-group total must match the number of sense units, and the β-group mass
//! inside each unit must match that unit's target token count. A toy linear
//! detector is trained with their subgradients.

use std::fmt::Write as _;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::cif::{
    integrate_scaled_unit, scale_weights, segment_by_threshold, FeatureSequence, FrameWeights,
    IntegratedUnit, SenseSegmentation,
};
use crate::datagen::UtteranceRecord;
use crate::error::{Error, Result};
use crate::sud::{AccumulatorState, LatencyTag, WeightOracle};

/// Value and subgradient of a loss with respect to per-frame weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Which unit count the α-mass quantity loss aims for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantityTarget {
    /// Total α-mass equals the number of units N.
    #[default]
    Units,
    /// Total α-mass equals N - 1, the number of boundaries the scaled
    /// segmentation produces.
    UnitsMinusOne,
}

impl QuantityTarget {
    pub fn value(self, n_units: usize) -> f64 {
        match self {
            QuantityTarget::Units => n_units as f64,
            QuantityTarget::UnitsMinusOne => n_units.saturating_sub(1) as f64,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|sum(alpha) - N|` with subgradient 0 at the kink.
pub fn loss_qua1(alpha: &FrameWeights, n_units: usize) -> Result<QuantityLoss> {
    loss_qua1_with_target(alpha, n_units, QuantityTarget::Units)
}

pub fn loss_qua1_with_target(
    alpha: &FrameWeights,
    n_units: usize,
    target: QuantityTarget,
) -> Result<QuantityLoss> {
    if n_units == 0 {
        return Err(Error::InvalidRange("unit count must be at least 1".into()));
    }
    let diff = alpha.sum() - target.value(n_units);
    Ok(QuantityLoss {
        value: diff.abs(),
        grad: vec![sign(diff); alpha.len()],
    })
}

/// Per-unit target token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitTargets {
    counts: Vec<usize>,
}

impl UnitTargets {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::InvalidRange(
                "unit targets need at least one unit and every count >= 1".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn unit_count(&self) -> usize {
        self.counts.len()
    }
}

/// `sum_k |sum_{i in U_k} beta_i - L_k|` over the segments induced by
/// `segmentation`. Boundaries are held fixed; only β receives gradient.
pub fn loss_qua2(
    beta: &FrameWeights,
    segmentation: &SenseSegmentation,
    targets: &UnitTargets,
) -> Result<QuantityLoss> {
    if segmentation.segment_count() != targets.unit_count() {
        return Err(Error::SegmentCountMismatch {
            segments: segmentation.segment_count(),
            targets: targets.unit_count(),
        });
    }
    let b = beta.as_slice();
    let mut grad = vec![0.0; b.len()];
    let mut value = 0.0;
    for (range, &want) in segmentation
        .segments(b.len())
        .into_iter()
        .zip(targets.counts())
    {
        let diff = b[range.clone()].iter().sum::<f64>() - want as f64;
        value += diff.abs();
        grad[range].fill(sign(diff));
    }
    Ok(QuantityLoss { value, grad })
}

/// Everything a pluggable loss term may look at for one utterance.
pub struct UnitBatch<'a> {
    /// Integrated vectors per sense unit; `None` where a unit had no β-mass.
    pub integrated: &'a [Option<IntegratedUnit>],
    /// Target tokens per sense unit.
    pub targets: &'a [&'a [u32]],
}

/// An externally supplied loss term (transducer joint, language model).
pub trait LossTerm: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, batch: &UnitBatch<'_>) -> f64;
}

/// A term that always contributes zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroLoss;

impl LossTerm for ZeroLoss {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn evaluate(&self, _: &UnitBatch<'_>) -> f64 {
        0.0
    }
}

/// Forward-only cross-entropy of a fixed linear classifier over integrated
/// vectors, with position-wise alignment `c_k^j <-> y_k^j`.
#[derive(Debug, Clone)]
pub struct ToyJointCrossEntropy {
    weights: Vec<Vec<f64>>,
}

impl ToyJointCrossEntropy {
    /// Classifier rows for token ids `0..vocab`, drawn from `seed`.
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..vocab)
            .map(|_| (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .collect();
        Self { weights }
    }
}

impl LossTerm for ToyJointCrossEntropy {
    fn name(&self) -> &'static str {
        "toy-joint-ce"
    }

    fn evaluate(&self, batch: &UnitBatch<'_>) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (unit, targets) in batch.integrated.iter().zip(batch.targets) {
            let Some(unit) = unit else { continue };
            for (c, &y) in unit.vectors.iter().zip(targets.iter()) {
                let logits: Vec<f64> = self
                    .weights
                    .iter()
                    .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum())
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                let target = logits.get(y as usize).copied().unwrap_or(max);
                total += log_z - target;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// All loss components for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub qua1: f64,
    pub qua2: f64,
    pub joint: f64,
    pub lm: f64,
    pub total: f64,
    pub joint_present: bool,
    pub lm_present: bool,
}

pub fn assemble_total(
    qua1: f64,
    qua2: f64,
    joint: Option<f64>,
    lm: Option<f64>,
) -> Result<LossReport> {
    let check = |term: &'static str, value: f64| {
        if value.is_finite() && value >= 0.0 {
            Ok(value)
        } else {
            Err(Error::NonFiniteLoss { term, value })
        }
    };
    let qua1 = check("qua1", qua1)?;
    let qua2 = check("qua2", qua2)?;
    let joint_v = joint.map(|v| check("joint", v)).transpose()?.unwrap_or(0.0);
    let lm_v = lm.map(|v| check("lm", v)).transpose()?.unwrap_or(0.0);
    Ok(LossReport {
        qua1,
        qua2,
        joint: joint_v,
        lm: lm_v,
        total: joint_v + qua1 + qua2 + lm_v,
        joint_present: joint.is_some(),
        lm_present: lm.is_some(),
    })
}

/// Logistic-squashed linear map from a feature frame to a weight in
/// `(0, w_max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub w: Vec<f64>,
    pub b: f64,
    pub w_max: f64,
}

impl LinearPredictor {
    /// Zero feature weights, bias set so every frame predicts `rate`.
    pub fn constant(dim: usize, rate: f64, w_max: f64) -> Self {
        let p = (rate / w_max).clamp(1e-6, 1.0 - 1e-6);
        Self {
            w: vec![0.0; dim],
            b: (p / (1.0 - p)).ln(),
            w_max,
        }
    }

    fn logit(&self, h: &[f64]) -> f64 {
        self.b + self.w.iter().zip(h).map(|(a, x)| a * x).sum::<f64>()
    }

    pub fn predict_frame(&self, h: &[f64]) -> f64 {
        self.w_max * logistic(self.logit(h))
    }

    pub fn predict(&self, features: &FeatureSequence) -> Result<FrameWeights> {
        if features.dim() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                found: features.dim(),
            });
        }
        FrameWeights::new(features.frames().map(|h| self.predict_frame(h)).collect())
    }

    /// Chain a per-frame weight gradient through the squashing and linear
    /// map. Returns `(d/dw, d/db)`.
    fn backprop(
        &self,
        features: &FeatureSequence,
        outputs: &[f64],
        upstream: &[f64],
    ) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = 0.0;
        for ((h, &y), &g) in features.frames().zip(outputs).zip(upstream) {
            if g == 0.0 {
                continue;
            }
            let dz = g * y * (1.0 - y / self.w_max);
            gb += dz;
            for (acc, x) in gw.iter_mut().zip(h) {
                *acc += dz * x;
            }
        }
        (gw, gb)
    }

    fn step(&mut self, (gw, gb): &(Vec<f64>, f64), step_size: f64) {
        for (w, g) in self.w.iter_mut().zip(gw) {
            *w -= step_size * g;
        }
        self.b -= step_size * gb;
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The toy detector: one linear head per weight group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub tag: LatencyTag,
    pub alpha: LinearPredictor,
    pub beta: LinearPredictor,
}

impl ToyDetector {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("detector serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<detector>".into(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

impl WeightOracle for ToyDetector {
    fn describe(&self) -> String {
        format!("toy-detector[{}]", self.tag)
    }

    fn weights(
        &self,
        _: &UtteranceRecord,
        features: &FeatureSequence,
        _: LatencyTag,
    ) -> Result<FrameWeights> {
        self.alpha.predict(features)
    }
}

pub struct TrainConfig {
    pub epochs: usize,
    /// Constant subgradient step applied after every utterance.
    pub step_size: f64,
    pub qua1_target: QuantityTarget,
    /// Squashing cap shared by both heads.
    pub w_max: f64,
    /// Initial per-frame α and β predictions.
    pub init_alpha: f64,
    pub init_beta: f64,
    pub joint: Option<Box<dyn LossTerm>>,
    pub lm: Option<Box<dyn LossTerm>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            step_size: 0.03,
            qua1_target: QuantityTarget::Units,
            w_max: 1.0,
            init_alpha: 0.02,
            init_beta: 0.05,
            joint: None,
            lm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_qua1: f64,
    pub mean_qua2: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: ToyDetector,
    /// Row 0 is the loss of the initial detector; row `e` follows epoch `e`.
    pub curve: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,mean_qua1,mean_qua2,mean_total\n");
        for s in &self.curve {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                s.epoch, s.mean_qua1, s.mean_qua2, s.mean_total
            );
        }
        out
    }

    /// Number of epochs whose mean loss rose over the previous epoch.
    pub fn non_monotone_epochs(&self) -> usize {
        self.curve
            .windows(2)
            .filter(|w| w[1].mean_total > w[0].mean_total)
            .count()
    }
}

struct Prepared<'a> {
    record: &'a UtteranceRecord,
    features: FeatureSequence,
    unit_tokens: Vec<usize>,
}

/// Losses and head gradients for one utterance under the current detector.
struct Evaluation {
    report: LossReport,
    alpha_grad: (Vec<f64>, f64),
    beta_grad: (Vec<f64>, f64),
}

fn evaluate(det: &ToyDetector, item: &Prepared<'_>, cfg: &TrainConfig) -> Result<Evaluation> {
    let n = item.unit_tokens.len();
    let alpha = det.alpha.predict(&item.features)?;
    let beta = det.beta.predict(&item.features)?;

    let q1 = loss_qua1_with_target(&alpha, n, cfg.qua1_target)?;
    let scaled = scale_weights(&alpha, (n - 1) as f64)?;
    let mut seg = segment_by_threshold(scaled.as_slice(), 1.0, 0.0)?;
    if seg.boundaries.len() + 1 == n - 1 {
        seg.boundaries.push(alpha.len());
    }
    let targets = UnitTargets::new(item.unit_tokens.clone())?;
    let q2 = loss_qua2(&beta, &seg, &targets)?;

    let joint = cfg
        .joint
        .as_deref()
        .map(|t| plugin_value(t, item, &seg, &beta))
        .transpose()?;
    let lm = cfg
        .lm
        .as_deref()
        .map(|t| plugin_value(t, item, &seg, &beta))
        .transpose()?;
    let report = assemble_total(q1.value, q2.value, joint, lm)?;

    Ok(Evaluation {
        report,
        alpha_grad: det
            .alpha
            .backprop(&item.features, alpha.as_slice(), &q1.grad),
        beta_grad: det.beta.backprop(&item.features, beta.as_slice(), &q2.grad),
    })
}

fn plugin_value(
    term: &dyn LossTerm,
    item: &Prepared<'_>,
    seg: &SenseSegmentation,
    beta: &FrameWeights,
) -> Result<f64> {
    let reference = item.record.reference();
    let mut integrated = Vec::new();
    let mut targets = Vec::new();
    let mut token = 0;
    for (range, &count) in seg.segments(beta.len()).into_iter().zip(&item.unit_tokens) {
        let unit_beta = beta.slice(range.clone());
        let unit = if unit_beta.sum() > 0.0 {
            Some(integrate_scaled_unit(
                &item.features.slice(range),
                &unit_beta,
                count,
            )?)
        } else {
            None
        };
        integrated.push(unit);
        targets.push(&reference[token..token + count]);
        token += count;
    }
    Ok(term.evaluate(&UnitBatch {
        integrated: &integrated,
        targets: &targets,
    }))
}

/// Fit a [`ToyDetector`] to `corpus` at the given tier with per-utterance
/// subgradient steps on the two quantity losses.
pub fn train_toy_predictor(
    corpus: &[UtteranceRecord],
    tag: LatencyTag,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let dim = first.dim;
    let prepared: Vec<Prepared<'_>> = corpus
        .iter()
        .map(|record| {
            let unit_tokens = record
                .units_for(tag)
                .iter()
                .map(|u| u.tokens.len())
                .collect();
            Prepared {
                record,
                features: record.features(),
                unit_tokens,
            }
        })
        .collect();
    if prepared.iter().any(|p| p.features.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: prepared
                .iter()
                .map(|p| p.features.dim())
                .find(|&d| d != dim)
                .unwrap_or(dim),
        });
    }

    let mut det = ToyDetector {
        tag,
        alpha: LinearPredictor::constant(dim, cfg.init_alpha, cfg.w_max),
        beta: LinearPredictor::constant(dim, cfg.init_beta, cfg.w_max),
    };

    let mut curve = vec![corpus_loss(&det, &prepared, cfg, 0)?];
    for epoch in 1..=cfg.epochs {
        for item in &prepared {
            let eval = evaluate(&det, item, cfg)?;
            det.alpha.step(&eval.alpha_grad, cfg.step_size);
            det.beta.step(&eval.beta_grad, cfg.step_size);
        }
        let stats = corpus_loss(&det, &prepared, cfg, epoch)?;
        debug!(
            "epoch {epoch}: qua1 {:.4} qua2 {:.4} total {:.4}",
            stats.mean_qua1, stats.mean_qua2, stats.mean_total
        );
        curve.push(stats);
    }
    Ok(TrainOutcome {
        detector: det,
        curve,
    })
}

fn corpus_loss(
    det: &ToyDetector,
    prepared: &[Prepared<'_>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let (mut q1, mut q2, mut total) = (0.0, 0.0, 0.0);
    for item in prepared {
        let r = evaluate(det, item, cfg)?.report;
        q1 += r.qua1;
        q2 += r.qua2;
        total += r.total;
    }
    let n = prepared.len() as f64;
    let stats = EpochStats {
        epoch,
        mean_qua1: q1 / n,
        mean_qua2: q2 / n,
        mean_total: total / n,
    };
    if !stats.mean_total.is_finite() {
        return Err(Error::DivergedLoss {
            epoch,
            value: stats.mean_total,
        });
    }
    Ok(stats)
}

/// Precision, recall and F1 of predicted boundary frames against reference
/// frames, matching one-to-one within `tolerance` frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryScore {
    pub true_positives: usize,
    pub predicted: usize,
    pub reference: usize,
}

impl BoundaryScore {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.reference == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.reference as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: BoundaryScore) {
        self.true_positives += other.true_positives;
        self.predicted += other.predicted;
        self.reference += other.reference;
    }
}

/// Greedy in-order matching; both inputs sorted ascending, duplicates in
/// `predicted` count as separate predictions.
pub fn boundary_score(predicted: &[usize], reference: &[usize], tolerance: usize) -> BoundaryScore {
    let mut used = vec![false; reference.len()];
    let mut hits = 0;
    for &p in predicted {
        let best = reference
            .iter()
            .enumerate()
            .filter(|(i, &r)| !used[*i] && p.abs_diff(r) <= tolerance)
            .min_by_key(|(_, &r)| p.abs_diff(r))
            .map(|(i, _)| i);
        if let Some(i) = best {
            used[i] = true;
            hits += 1;
        }
    }
    BoundaryScore {
        true_positives: hits,
        predicted: predicted.len(),
        reference: reference.len(),
    }
}

/// Frame tolerance used when scoring detected boundaries (40 ms at 50 fps).
pub const BOUNDARY_TOLERANCE_FRAMES: usize = 2;

/// Run the detector's α head through the streaming accumulator and score
/// its triggers against the tier annotations, pooled over `records`.
pub fn evaluate_boundaries(
    detector: &dyn WeightOracle,
    records: &[UtteranceRecord],
    tag: LatencyTag,
    gamma: f64,
    tolerance: usize,
) -> Result<BoundaryScore> {
    let mut total = BoundaryScore {
        true_positives: 0,
        predicted: 0,
        reference: 0,
    };
    for record in records {
        let features = record.features();
        let weights = detector.weights(record, &features, tag)?;
        let mut state = AccumulatorState::new(gamma, tag)?;
        let predicted: Vec<usize> = state
            .run_stream(weights.as_slice())?
            .into_iter()
            .filter(|d| d.is_write())
            .map(|d| d.frame_index)
            .collect();
        total.add(boundary_score(
            &predicted,
            record.boundaries(tag),
            tolerance,
        ));
    }
    Ok(total)
}
