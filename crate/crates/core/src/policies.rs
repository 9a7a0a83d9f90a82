//! Read/write policies for simultaneous translation.
//!
//! Every policy sees the source one chunk at a time and answers with a
//! [`PolicyAction`]. Target tokens come from a [`Translator`], which stands in
//! for an offline translation model that can be asked for a hypothesis of any
//! source prefix. Commits are append-only.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sud::{AccumulatorState, Decision, LatencyTag};

/// Offline translation of source prefixes.
pub trait Translator {
    /// Hypothesis for the first `frames` source frames.
    fn hypothesis(&self, frames: usize) -> Vec<u32>;

    /// Token at `position` when only `frames` source frames are visible. Past
    /// the end of [`Translator::hypothesis`] this is an anticipated guess.
    fn token_at(&self, position: usize, frames: usize) -> u32;

    /// Translation of the complete source.
    fn full(&self) -> &[u32];
}

/// Policy selection with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    SenseUnit {
        gamma: f64,
        tag: LatencyTag,
    },
    WaitK {
        k: usize,
    },
    LocalAgreement,
    /// Decisions of `base`, with an extra simulated cost per decision.
    MockLlm {
        base: Box<PolicyKind>,
        cost_ms: f64,
    },
}

/// A parsed policy spec: the policy plus an optional chunk length override.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub chunk_ms: Option<f64>,
}

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_TAG: LatencyTag = LatencyTag::High;

impl PolicyKind {
    /// Threshold of the sense-unit component, if any.
    pub fn gamma(&self) -> Option<f64> {
        match self {
            PolicyKind::SenseUnit { gamma, .. } => Some(*gamma),
            PolicyKind::MockLlm { base, .. } => base.gamma(),
            _ => None,
        }
    }

    pub fn tag(&self) -> Option<LatencyTag> {
        match self {
            PolicyKind::SenseUnit { tag, .. } => Some(*tag),
            PolicyKind::MockLlm { base, .. } => base.tag(),
            _ => None,
        }
    }

    /// Copy with the sense-unit threshold replaced. Policies without a
    /// sense-unit component are returned unchanged.
    pub fn with_gamma(&self, gamma: f64) -> PolicyKind {
        match self {
            PolicyKind::SenseUnit { tag, .. } => PolicyKind::SenseUnit { gamma, tag: *tag },
            PolicyKind::MockLlm { base, cost_ms } => PolicyKind::MockLlm {
                base: Box::new(base.with_gamma(gamma)),
                cost_ms: *cost_ms,
            },
            other => other.clone(),
        }
    }

    /// Copy with the sense-unit tag replaced, like [`PolicyKind::with_gamma`].
    pub fn with_tag(&self, tag: LatencyTag) -> PolicyKind {
        match self {
            PolicyKind::SenseUnit { gamma, .. } => PolicyKind::SenseUnit { gamma: *gamma, tag },
            PolicyKind::MockLlm { base, cost_ms } => PolicyKind::MockLlm {
                base: Box::new(base.with_tag(tag)),
                cost_ms: *cost_ms,
            },
            other => other.clone(),
        }
    }

    /// Extra simulated milliseconds charged per decision.
    pub fn extra_decision_ms(&self) -> f64 {
        match self {
            PolicyKind::MockLlm { base, cost_ms } => cost_ms + base.extra_decision_ms(),
            _ => 0.0,
        }
    }

    /// The policy whose decisions are actually taken.
    pub fn decision_policy(&self) -> &PolicyKind {
        match self {
            PolicyKind::MockLlm { base, .. } => base.decision_policy(),
            other => other,
        }
    }

    /// Label without the threshold and tag, which are reported separately.
    pub fn label(&self) -> String {
        match self {
            PolicyKind::SenseUnit { .. } => "sense".to_string(),
            PolicyKind::WaitK { k } => format!("waitk:k={k}"),
            PolicyKind::LocalAgreement => "la".to_string(),
            PolicyKind::MockLlm { base, cost_ms } => {
                format!("mockllm:base={},cost_ms={}", base.label(), cost_ms)
            }
        }
    }

    fn validate(&self, spec: &str) -> Result<()> {
        match self {
            PolicyKind::SenseUnit { gamma, .. } => {
                if !(*gamma > 0.0) || !gamma.is_finite() {
                    return Err(Error::NonPositiveThreshold(*gamma));
                }
            }
            PolicyKind::WaitK { k } => {
                if *k == 0 {
                    return Err(spec_error(spec, "k must be at least 1"));
                }
            }
            PolicyKind::LocalAgreement => {}
            PolicyKind::MockLlm { base, cost_ms } => {
                if !(*cost_ms >= 0.0) || !cost_ms.is_finite() {
                    return Err(spec_error(spec, "cost_ms must be a non-negative number"));
                }
                base.validate(spec)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match &self.kind {
            PolicyKind::SenseUnit { gamma, tag } => format!("sense:gamma={gamma},tag={tag}"),
            other => other.label(),
        };
        match self.chunk_ms {
            Some(ms) if base.contains(':') => write!(f, "{base},chunk_ms={ms}"),
            Some(ms) => write!(f, "{base}:chunk_ms={ms}"),
            None => f.write_str(&base),
        }
    }
}

fn spec_error(spec: &str, message: impl Into<String>) -> Error {
    Error::PolicySpec {
        spec: spec.to_string(),
        message: message.into(),
    }
}

fn parse_number<T: FromStr>(spec: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| spec_error(spec, format!("invalid value {value:?} for {key}")))
}

fn split_pair<'a>(spec: &str, item: &'a str) -> Result<(&'a str, &'a str)> {
    item.split_once('=')
        .ok_or_else(|| spec_error(spec, format!("expected key=value, got {item:?}")))
}

/// Parse `name[:key=value,...]`, where `name` is one of `sense`, `waitk`,
/// `la` or `mockllm`. A `mockllm` spec takes `base=<spec>`; every later item
/// except `cost_ms` and `chunk_ms` belongs to the base spec.
pub fn parse_policy(spec: &str) -> Result<PolicyConfig> {
    let spec = spec.trim();
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let items: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let mut chunk_ms = None;
    let kind = match name {
        "sense" => {
            let (mut gamma, mut tag) = (DEFAULT_GAMMA, DEFAULT_TAG);
            for item in items {
                match split_pair(spec, item)? {
                    ("gamma", v) => gamma = parse_number(spec, "gamma", v)?,
                    ("tag", v) => tag = v.parse().map_err(|e: String| spec_error(spec, e))?,
                    ("chunk_ms", v) => chunk_ms = Some(parse_number(spec, "chunk_ms", v)?),
                    (k, _) => return Err(spec_error(spec, format!("unknown key {k:?} for sense"))),
                }
            }
            PolicyKind::SenseUnit { gamma, tag }
        }
        "waitk" => {
            let mut k = None;
            for item in items {
                match split_pair(spec, item)? {
                    ("k", v) => k = Some(parse_number(spec, "k", v)?),
                    ("chunk_ms", v) => chunk_ms = Some(parse_number(spec, "chunk_ms", v)?),
                    (key, _) => {
                        return Err(spec_error(spec, format!("unknown key {key:?} for waitk")))
                    }
                }
            }
            PolicyKind::WaitK {
                k: k.ok_or_else(|| spec_error(spec, "waitk requires k"))?,
            }
        }
        "la" => {
            for item in items {
                match split_pair(spec, item)? {
                    ("chunk_ms", v) => chunk_ms = Some(parse_number(spec, "chunk_ms", v)?),
                    (key, _) => {
                        return Err(spec_error(spec, format!("unknown key {key:?} for la")))
                    }
                }
            }
            PolicyKind::LocalAgreement
        }
        "mockllm" => {
            let mut base: Option<String> = None;
            let mut cost_ms = None;
            for item in items {
                let (key, value) = split_pair(spec, item)?;
                match key {
                    "base" => base = Some(value.to_string()),
                    "cost_ms" => cost_ms = Some(parse_number(spec, "cost_ms", value)?),
                    "chunk_ms" => chunk_ms = Some(parse_number(spec, "chunk_ms", value)?),
                    _ => match base.as_mut() {
                        Some(b) => {
                            b.push(if b.contains(':') { ',' } else { ':' });
                            b.push_str(item);
                        }
                        None => {
                            return Err(spec_error(
                                spec,
                                format!("unknown key {key:?} for mockllm"),
                            ))
                        }
                    },
                }
            }
            let base = base.ok_or_else(|| spec_error(spec, "mockllm requires base"))?;
            let base = parse_policy(&base)?;
            if base.chunk_ms.is_some() {
                return Err(spec_error(spec, "set chunk_ms on mockllm, not on its base"));
            }
            PolicyKind::MockLlm {
                base: Box::new(base.kind),
                cost_ms: cost_ms.ok_or_else(|| spec_error(spec, "mockllm requires cost_ms"))?,
            }
        }
        "" => return Err(spec_error(spec, "empty policy spec")),
        other => return Err(spec_error(spec, format!("unknown policy {other:?}"))),
    };
    if let Some(ms) = chunk_ms {
        if !(ms > 0.0) || !f64::is_finite(ms) {
            return Err(spec_error(spec, "chunk_ms must be positive"));
        }
    }
    kind.validate(spec)?;
    Ok(PolicyConfig { kind, chunk_ms })
}

impl FromStr for PolicyConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_policy(s)
    }
}

/// Translator usage inside one step, for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TranslatorCall {
    /// Tokens in the hypothesis the call produced.
    pub tokens: usize,
}

/// Outcome of one policy step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyAction {
    /// Source chunks consumed by this step.
    pub reads: usize,
    /// Newly committed target tokens, possibly empty.
    pub commit: Vec<u32>,
    /// Whether the policy decided to write at this step.
    pub write: bool,
    /// Detector decisions that fired during this step (sense policy only).
    pub triggers: Vec<Decision>,
    /// Translator call made to reach the decision itself (local agreement).
    pub decision_call: Option<TranslatorCall>,
    /// Translator call made to produce the commit after a write decision.
    pub commit_call: Option<TranslatorCall>,
}

#[derive(Debug, Clone)]
enum State {
    Sense(AccumulatorState),
    WaitK { k: usize, chunks: usize },
    LocalAgreement { previous: Option<Vec<u32>> },
}

/// One utterance's worth of policy state.
#[derive(Debug, Clone)]
pub struct PolicySession {
    kind: PolicyKind,
    state: State,
    committed: Vec<u32>,
    frames: usize,
    finished: bool,
}

impl PolicySession {
    pub fn new(kind: &PolicyKind) -> Result<Self> {
        kind.validate(&kind.label())?;
        let state = match kind.decision_policy() {
            PolicyKind::SenseUnit { gamma, tag } => {
                State::Sense(AccumulatorState::new(*gamma, *tag)?)
            }
            PolicyKind::WaitK { k } => State::WaitK { k: *k, chunks: 0 },
            PolicyKind::LocalAgreement => State::LocalAgreement { previous: None },
            PolicyKind::MockLlm { .. } => unreachable!("decision_policy unwraps mock policies"),
        };
        Ok(Self {
            kind: kind.clone(),
            state,
            committed: Vec::new(),
            frames: 0,
            finished: false,
        })
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn committed(&self) -> &[u32] {
        &self.committed
    }

    /// Source frames seen so far.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Consume one chunk. `alphas` holds the detector weight of each new
    /// frame; policies other than the sense policy use only its length.
    pub fn step(&mut self, alphas: &[f64], translator: &dyn Translator) -> Result<PolicyAction> {
        if self.finished {
            return Err(Error::Internal("policy stepped after end of stream".into()));
        }
        let mut action = PolicyAction {
            reads: 1,
            ..Default::default()
        };
        match &mut self.state {
            State::Sense(acc) => {
                // Run the whole chunk first so an error leaves the session as it was.
                let mut trial = acc.clone();
                let decisions = trial.run_stream(alphas)?;
                *acc = trial;
                action.triggers = decisions.into_iter().filter(Decision::is_write).collect();
                if let Some(last) = action.triggers.last() {
                    action.write = true;
                    let hyp = translator.hypothesis(last.frame_index);
                    action.commit_call = Some(TranslatorCall { tokens: hyp.len() });
                    action.commit = hyp.get(self.committed.len()..).unwrap_or_default().to_vec();
                }
            }
            State::WaitK { k, chunks } => {
                *chunks += 1;
                let frames = self.frames + alphas.len();
                if *chunks > *k && self.committed.len() < translator.full().len() {
                    action.write = true;
                    action.commit = vec![translator.token_at(self.committed.len(), frames)];
                }
            }
            State::LocalAgreement { previous } => {
                let frames = self.frames + alphas.len();
                let mut current = self.committed.clone();
                let fresh = translator.hypothesis(frames);
                action.decision_call = Some(TranslatorCall {
                    tokens: fresh.len(),
                });
                if let Some(tail) = fresh.get(self.committed.len()..) {
                    current.extend_from_slice(tail);
                }
                if let Some(prev) = previous.as_ref() {
                    let agreed = common_prefix_len(prev, &current);
                    if agreed > self.committed.len() {
                        action.write = true;
                        action.commit = current[self.committed.len()..agreed].to_vec();
                    }
                }
                *previous = Some(current);
            }
        }
        self.frames += alphas.len();
        self.committed.extend_from_slice(&action.commit);
        Ok(action)
    }

    /// End of stream: translate the complete source and commit the rest.
    pub fn finish(&mut self, translator: &dyn Translator) -> PolicyAction {
        self.finished = true;
        let full = translator.full();
        let commit = full
            .get(self.committed.len()..)
            .unwrap_or_default()
            .to_vec();
        self.committed.extend_from_slice(&commit);
        PolicyAction {
            reads: 0,
            write: !commit.is_empty(),
            commit,
            commit_call: Some(TranslatorCall { tokens: full.len() }),
            ..Default::default()
        }
    }
}

/// Length of the longest common prefix of two token sequences.
pub fn common_prefix_len(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}
