//! Discrete-event simulation of a streaming translation session.
//!
//! Source audio arrives chunk by chunk at real-time pace. Each chunk is
//! encoded, handed to the policy, and possibly followed by a translation
//! call. All computation costs come from a [`CostModel`] on a simulated
//! clock, so runs are reproducible on any machine.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::UtteranceRecord;
use crate::error::{Error, Result};
use crate::metrics::{DelayProfile, EfficiencyStats};
use crate::policies::{
    PolicyAction, PolicyConfig, PolicyKind, PolicySession, Translator, DEFAULT_TAG,
};
use crate::sat::ToyDetector;
use crate::sud::{oracle_uniform, GroundTruthOracle, GroundTruthShape, WeightOracle};

pub const DEFAULT_CHUNK_MS: f64 = 500.0;

/// Simulated milliseconds charged for each kind of work.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostModel {
    /// Encoding one source chunk.
    pub encoder_ms: f64,
    /// One sense-unit detector decision over a chunk.
    pub sud_ms: f64,
    /// Fixed cost of one translator call.
    pub call_ms: f64,
    /// Per generated token of a translator call.
    pub token_ms: f64,
}

impl CostModel {
    fn translator_s(&self, tokens: usize) -> f64 {
        (self.call_ms + self.token_ms * tokens as f64) / 1000.0
    }

    /// Seconds spent deciding whether to read or write.
    fn decision_s(&self, kind: &PolicyKind, action: &PolicyAction) -> f64 {
        let base = match kind.decision_policy() {
            PolicyKind::SenseUnit { .. } => self.sud_ms / 1000.0,
            _ => 0.0,
        };
        let call = action
            .decision_call
            .map_or(0.0, |c| self.translator_s(c.tokens));
        base + call + kind.extra_decision_ms() / 1000.0
    }
}

/// Where detector weights come from.
#[derive(Debug, Clone)]
pub enum WeightSource {
    GroundTruth(GroundTruthShape),
    Uniform(f64),
    Model(ToyDetector),
}

/// Stand-ins for the encoder, detector and translator.
#[derive(Debug, Clone)]
pub struct OracleSpec {
    pub weights: WeightSource,
    pub costs: CostModel,
    /// Seed of the translator's corruption of partially heard units.
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            weights: WeightSource::GroundTruth(GroundTruthShape::Spread),
            costs: CostModel::default(),
            seed: 0,
        }
    }
}

impl OracleSpec {
    pub fn weight_oracle(&self) -> Result<Box<dyn WeightOracle>> {
        Ok(match &self.weights {
            WeightSource::GroundTruth(shape) => Box::new(GroundTruthOracle { shape: *shape }),
            WeightSource::Uniform(rate) => Box::new(oracle_uniform(*rate)?),
            WeightSource::Model(detector) => Box::new(detector.clone()),
        })
    }

    /// Parse `key=value` items separated by commas. Keys: `weights`
    /// (`gt`, `gt-peak`, `uniform@RATE` or `model@PATH`), `encoder_ms`,
    /// `sud_ms`, `call_ms`, `token_ms` and `seed`. Missing keys keep their
    /// defaults: ground-truth weights, zero costs, seed 0.
    pub fn parse(spec: &str) -> Result<Self> {
        let err = |message: String| Error::OracleSpec {
            spec: spec.to_string(),
            message,
        };
        let mut out = OracleSpec::default();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {item:?}")))?;
            let ms = || -> Result<f64> {
                match value.parse::<f64>() {
                    Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
                    _ => Err(err(format!(
                        "{key} must be a non-negative number, got {value:?}"
                    ))),
                }
            };
            match key {
                "weights" => out.weights = parse_weights(value, &err)?,
                "encoder_ms" => out.costs.encoder_ms = ms()?,
                "sud_ms" => out.costs.sud_ms = ms()?,
                "call_ms" => out.costs.call_ms = ms()?,
                "token_ms" => out.costs.token_ms = ms()?,
                "seed" => {
                    out.seed = value
                        .parse()
                        .map_err(|_| err(format!("invalid seed {value:?}")))?
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(out)
    }
}

/// A model path that cannot be read is a runtime failure, not a usage error.
fn parse_weights(value: &str, err: &dyn Fn(String) -> Error) -> Result<WeightSource> {
    match value {
        "gt" => Ok(WeightSource::GroundTruth(GroundTruthShape::Spread)),
        "gt-peak" => Ok(WeightSource::GroundTruth(GroundTruthShape::Peak)),
        _ => {
            if let Some(rate) = value.strip_prefix("uniform@") {
                match rate.parse::<f64>() {
                    Ok(r) if r > 0.0 && r.is_finite() => Ok(WeightSource::Uniform(r)),
                    _ => Err(err(format!("uniform rate must be positive, got {rate:?}"))),
                }
            } else if let Some(path) = value.strip_prefix("model@") {
                load_detector(Path::new(path)).map(WeightSource::Model)
            } else {
                Err(err(format!("unknown weight source {value:?}")))
            }
        }
    }
}

fn load_detector(path: &Path) -> Result<ToyDetector> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ToyDetector::from_json(&text).map_err(|e| match e {
        Error::Parse {
            line,
            column,
            message,
            ..
        } => Error::Parse {
            path: path.display().to_string(),
            line,
            column,
            message,
        },
        other => other,
    })
}

impl FromStr for OracleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OracleSpec::parse(s)
    }
}

/// Alignment-table translator.
///
/// A prefix covering whole units translates to exactly those units' target
/// tokens. A unit heard only partly contributes a proportional share of its
/// tokens, and each of those is wrong with probability one minus the share.
/// Wrong tokens lie outside the reference vocabulary, and which ones are
/// wrong is a fixed function of (seed, position, prefix length).
#[derive(Debug, Clone)]
pub struct AlignmentTranslator {
    /// Per low-tier unit: end frame (exclusive, 0-based start implied by the
    /// previous end) and token end.
    units: Vec<(usize, usize)>,
    reference: Vec<u32>,
    wrong_base: u32,
    seed: u64,
}

impl AlignmentTranslator {
    pub fn new(record: &UtteranceRecord, seed: u64) -> Self {
        let mut units = Vec::with_capacity(record.units.len());
        let mut tokens = 0;
        for unit in &record.units {
            tokens += unit.tokens.len();
            units.push((unit.span[1], tokens));
        }
        let reference = record.reference();
        let wrong_base = reference.iter().max().map_or(1, |m| m.saturating_add(1));
        Self {
            units,
            reference,
            wrong_base,
            seed,
        }
    }

    fn mix(&self, position: usize, frames: usize) -> u64 {
        // SplitMix64 finaliser over the three inputs.
        let mut z = self
            .seed
            .wrapping_add((position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add((frames as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn wrong_token(&self, position: usize, frames: usize) -> u32 {
        let offset = (self.mix(position, frames) >> 44) as u32;
        self.wrong_base.saturating_add(offset)
    }

    fn keeps(&self, position: usize, frames: usize, share: f64) -> bool {
        let u = (self.mix(position, frames) >> 11) as f64 / (1u64 << 53) as f64;
        u < share
    }
}

impl Translator for AlignmentTranslator {
    fn hypothesis(&self, frames: usize) -> Vec<u32> {
        let mut out = Vec::new();
        let (mut frame_start, mut token_start) = (0, 0);
        for &(frame_end, token_end) in &self.units {
            if frame_end <= frames {
                out.extend_from_slice(&self.reference[token_start..token_end]);
            } else {
                if frames > frame_start {
                    let share = (frames - frame_start) as f64 / (frame_end - frame_start) as f64;
                    let count = (share * (token_end - token_start) as f64).floor() as usize;
                    for position in token_start..token_start + count {
                        out.push(if self.keeps(position, frames, share) {
                            self.reference[position]
                        } else {
                            self.wrong_token(position, frames)
                        });
                    }
                }
                break;
            }
            frame_start = frame_end;
            token_start = token_end;
        }
        out
    }

    fn token_at(&self, position: usize, frames: usize) -> u32 {
        self.hypothesis(frames)
            .get(position)
            .copied()
            .unwrap_or_else(|| self.wrong_token(position, frames))
    }

    fn full(&self) -> &[u32] {
        &self.reference
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ChunkArrived,
    DecisionMade,
    TokensCommitted,
    StreamEnded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EventPayload {
    Chunk {
        chunk: usize,
        arrival_s: f64,
        frames: usize,
    },
    Decision {
        chunk: usize,
        write: bool,
        /// 1-based frames at which the detector fired, repeated per fire.
        triggers: Vec<usize>,
    },
    Commit {
        tokens: Vec<u32>,
        ideal_delay_s: f64,
    },
    End {
        chunks: usize,
    },
}

/// One timestamped entry of a session log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulEvent {
    /// Simulated wall time at which the event completes.
    pub time_s: f64,
    pub kind: EventKind,
    pub payload: EventPayload,
    /// Computation charged by this event.
    pub cost_s: f64,
}

/// Everything observed in one utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionResult {
    pub utterance_id: String,
    pub hypothesis: Vec<u32>,
    pub reference: Vec<u32>,
    pub source_duration: f64,
    pub ideal_delays: Vec<f64>,
    pub ca_delays: Vec<f64>,
    pub decision_count: usize,
    pub decision_compute_s: f64,
    /// All computation, including encoding and translation for commits.
    pub total_compute_s: f64,
    pub num_writes: usize,
    pub events: Vec<SimulEvent>,
}

impl SessionResult {
    pub fn ideal_profile(&self) -> DelayProfile {
        DelayProfile {
            delays: self.ideal_delays.clone(),
            source_duration: self.source_duration,
            ref_len: self.reference.len(),
        }
    }

    pub fn ca_profile(&self) -> DelayProfile {
        DelayProfile {
            delays: self.ca_delays.clone(),
            source_duration: self.source_duration,
            ref_len: self.reference.len(),
        }
    }

    pub fn efficiency(&self) -> EfficiencyStats {
        EfficiencyStats {
            decision_count: self.decision_count,
            total_decision_compute: self.decision_compute_s,
            audio_duration: self.source_duration,
        }
    }

    /// The event log as JSONL, one event per line.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("events serialize"));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::ChunkArrived => "chunk_arrived",
            EventKind::DecisionMade => "decision_made",
            EventKind::TokensCommitted => "tokens_committed",
            EventKind::StreamEnded => "stream_ended",
        })
    }
}

/// Frames fully heard by time `t`.
fn frames_by(t: f64, frame_rate: f64, total: usize) -> usize {
    ((t * frame_rate + 1e-9).floor() as usize).min(total)
}

struct Log {
    events: Vec<SimulEvent>,
    hypothesis: Vec<u32>,
    ideal: Vec<f64>,
    ca: Vec<f64>,
    total_cost: f64,
}

impl Log {
    fn push(&mut self, time_s: f64, kind: EventKind, payload: EventPayload, cost_s: f64) {
        self.total_cost += cost_s;
        self.events.push(SimulEvent {
            time_s,
            kind,
            payload,
            cost_s,
        });
    }

    fn commit(&mut self, time_s: f64, tokens: &[u32], ideal_delay_s: f64, cost_s: f64) {
        self.hypothesis.extend_from_slice(tokens);
        self.ideal
            .extend(std::iter::repeat_n(ideal_delay_s, tokens.len()));
        self.ca.extend(std::iter::repeat_n(time_s, tokens.len()));
        self.push(
            time_s,
            EventKind::TokensCommitted,
            EventPayload::Commit {
                tokens: tokens.to_vec(),
                ideal_delay_s,
            },
            cost_s,
        );
    }
}

/// Simulate one utterance under `policy`.
pub fn run_session(
    record: &UtteranceRecord,
    policy: &PolicyKind,
    oracles: &OracleSpec,
    weights: &dyn WeightOracle,
    chunk_ms: f64,
) -> Result<SessionResult> {
    if !(chunk_ms > 0.0) || !chunk_ms.is_finite() {
        return Err(Error::InvalidRange(format!(
            "chunk length must be positive, got {chunk_ms} ms"
        )));
    }
    let total_frames = record.frame_count();
    if !(record.duration_s > 0.0) || total_frames == 0 {
        return Err(Error::EmptyUtterance(record.id.clone()));
    }
    let tag = policy.tag().unwrap_or(DEFAULT_TAG);
    let alphas = match policy.decision_policy() {
        PolicyKind::SenseUnit { .. } => {
            let w = weights.weights(record, &record.features(), tag)?;
            if w.len() != total_frames {
                return Err(Error::OracleFailure(format!(
                    "{} returned {} weights for {} frames of {}",
                    weights.describe(),
                    w.len(),
                    total_frames,
                    record.id
                )));
            }
            w.into_inner()
        }
        _ => vec![0.0; total_frames],
    };
    let translator = AlignmentTranslator::new(record, oracles.seed);
    let costs = &oracles.costs;
    let mut session = PolicySession::new(policy)?;

    let chunk_s = chunk_ms / 1000.0;
    let duration = record.duration_s;
    let chunks = ((duration / chunk_s) - 1e-9).ceil().max(1.0) as usize;
    let mut log = Log {
        events: Vec::new(),
        hypothesis: Vec::new(),
        ideal: Vec::new(),
        ca: Vec::new(),
        total_cost: 0.0,
    };
    let (mut clock, mut decision_compute, mut writes) = (0.0f64, 0.0, 0);
    let mut heard = 0;
    for chunk in 1..=chunks {
        let arrival = (chunk as f64 * chunk_s).min(duration);
        let frames = if chunk == chunks {
            total_frames
        } else {
            frames_by(arrival, record.frame_rate, total_frames)
        };
        let start = clock.max(arrival);
        let encode = costs.encoder_ms / 1000.0;
        log.push(
            start,
            EventKind::ChunkArrived,
            EventPayload::Chunk {
                chunk,
                arrival_s: arrival,
                frames,
            },
            encode,
        );
        let action = session.step(&alphas[heard..frames], &translator)?;
        heard = frames;
        let decide = costs.decision_s(policy, &action);
        decision_compute += decide;
        clock = start + encode + decide;
        log.push(
            clock,
            EventKind::DecisionMade,
            EventPayload::Decision {
                chunk,
                write: action.write,
                triggers: action
                    .triggers
                    .iter()
                    .flat_map(|d| std::iter::repeat_n(d.frame_index, d.fires as usize))
                    .collect(),
            },
            decide,
        );
        if action.write {
            writes += 1;
        }
        let translate = action
            .commit_call
            .map_or(0.0, |c| costs.translator_s(c.tokens));
        clock += translate;
        if !action.commit.is_empty() {
            log.commit(clock, &action.commit, arrival, translate);
        } else if translate > 0.0 {
            // A translation that added nothing still costs time; book it on
            // the decision so the cost ledger stays complete.
            if let Some(last) = log.events.last_mut() {
                last.cost_s += translate;
                last.time_s = clock;
            }
            log.total_cost += translate;
        }
    }

    let start = clock.max(duration);
    let flush = session.finish(&translator);
    let translate = flush
        .commit_call
        .map_or(0.0, |c| costs.translator_s(c.tokens));
    clock = start + translate;
    if !flush.commit.is_empty() {
        log.commit(clock, &flush.commit, duration, translate);
        log.push(
            clock,
            EventKind::StreamEnded,
            EventPayload::End { chunks },
            0.0,
        );
    } else {
        log.push(
            clock,
            EventKind::StreamEnded,
            EventPayload::End { chunks },
            translate,
        );
    }

    Ok(SessionResult {
        utterance_id: record.id.clone(),
        hypothesis: log.hypothesis,
        reference: translator.full().to_vec(),
        source_duration: duration,
        ideal_delays: log.ideal,
        ca_delays: log.ca,
        decision_count: chunks,
        decision_compute_s: decision_compute,
        total_compute_s: log.total_cost,
        num_writes: writes,
        events: log.events,
    })
}

/// Simulate every record, in order, on up to `parallelism` worker threads.
pub fn run_corpus(
    records: &[UtteranceRecord],
    policy: &PolicyConfig,
    oracles: &OracleSpec,
    default_chunk_ms: f64,
    parallelism: usize,
) -> Result<Vec<SessionResult>> {
    if parallelism == 0 {
        return Err(Error::InvalidRange("parallelism must be at least 1".into()));
    }
    let chunk_ms = policy.chunk_ms.unwrap_or(default_chunk_ms);
    let weights = oracles.weight_oracle()?;
    let weights = weights.as_ref();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
    pool.install(|| {
        records
            .par_iter()
            .map(|r| run_session(r, &policy.kind, oracles, weights, chunk_ms))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Unit;

    /// 10 s at 50 fps, two 5 s units of three tokens each.
    fn record() -> UtteranceRecord {
        UtteranceRecord {
            id: "u".into(),
            duration_s: 10.0,
            frame_rate: 50.0,
            dim: 8,
            seed: 1,
            boundaries_low: vec![250],
            boundaries_med: vec![250],
            boundaries_high: vec![250],
            units: vec![
                Unit {
                    span: [1, 250],
                    tokens: vec![1, 2, 3],
                },
                Unit {
                    span: [251, 500],
                    tokens: vec![4, 5, 6],
                },
            ],
        }
    }

    fn run(policy: &str, oracles: &OracleSpec) -> SessionResult {
        let p: PolicyConfig = policy.parse().unwrap();
        let w = oracles.weight_oracle().unwrap();
        run_session(
            &record(),
            &p.kind,
            oracles,
            w.as_ref(),
            p.chunk_ms.unwrap_or(500.0),
        )
        .unwrap()
    }

    #[test]
    fn translator_is_exact_on_unit_boundaries() {
        let t = AlignmentTranslator::new(&record(), 3);
        assert_eq!(t.hypothesis(0), Vec::<u32>::new());
        assert_eq!(t.hypothesis(250), vec![1, 2, 3]);
        assert_eq!(t.hypothesis(500), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(t.hypothesis(375).len(), 4);
        assert!(t.hypothesis(375)[3] == 4 || t.hypothesis(375)[3] > 6);
        assert!(t.token_at(5, 250) > 6);
    }

    #[test]
    fn wait_k_first_token_after_third_chunk() {
        let r = run("waitk:k=2", &OracleSpec::default());
        assert!((r.ideal_delays[0] - 1.5).abs() < 1e-12);
        assert_eq!(r.ideal_delays, r.ca_delays);
        assert_eq!(r.hypothesis.len(), r.reference.len());
    }

    #[test]
    fn mock_cost_is_charged_per_decision() {
        let r = run("mockllm:base=waitk:k=2,cost_ms=100", &OracleSpec::default());
        assert_eq!(r.decision_count, 20);
        assert!((r.decision_compute_s - 2.0).abs() < 1e-9);
        assert!(r.ca_delays.iter().zip(&r.ideal_delays).all(|(c, i)| c >= i));
        assert!(r.ca_delays.last().unwrap() > r.ideal_delays.last().unwrap());
    }

    #[test]
    fn ground_truth_sense_commits_at_the_boundary_chunk() {
        let r = run("sense:gamma=1,tag=high", &OracleSpec::default());
        assert_eq!(r.hypothesis, r.reference);
        assert_eq!(&r.ideal_delays[..3], &[5.0, 5.0, 5.0]);
        assert_eq!(&r.ideal_delays[3..], &[10.0, 10.0, 10.0]);
        assert_eq!(r.num_writes, 1);
    }

    #[test]
    fn oracle_spec_parses() {
        let o = OracleSpec::parse("weights=uniform@0.1,sud_ms=38.6,seed=7").unwrap();
        assert!(matches!(o.weights, WeightSource::Uniform(r) if r == 0.1));
        assert_eq!(o.costs.sud_ms, 38.6);
        assert_eq!(o.seed, 7);
        assert!(OracleSpec::parse("weights=bogus").unwrap_err().is_usage());
        assert!(OracleSpec::parse("sud_ms=-1").unwrap_err().is_usage());
        assert!(matches!(
            OracleSpec::parse("weights=gt-peak").unwrap().weights,
            WeightSource::GroundTruth(GroundTruthShape::Peak)
        ));
    }

    #[test]
    fn event_log_costs_add_up() {
        let o = OracleSpec::parse("encoder_ms=3,sud_ms=7,call_ms=20,token_ms=2").unwrap();
        for policy in ["sense", "waitk:k=3", "la", "mockllm:base=la,cost_ms=50"] {
            let r = run(policy, &o);
            let sum: f64 = r.events.iter().map(|e| e.cost_s).sum();
            assert!((sum - r.total_compute_s).abs() < 1e-9, "{policy}");
            assert!(
                r.events.windows(2).all(|w| w[0].time_s <= w[1].time_s),
                "{policy}"
            );
            assert!(r.ca_delays.windows(2).all(|w| w[0] <= w[1]), "{policy}");
        }
    }
}
