//! Synthetic corpora with nested sense-unit annotations, and manifest I/O.
//!
//! A manifest is JSONL: a header line followed by one utterance record per
//! line. Feature frames are not stored; they are regenerated from each
//! record's seed.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cif::FeatureSequence;
use crate::error::{Error, Result};
use crate::sud::LatencyTag;

pub const MANIFEST_FORMAT: &str = "simulsense-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Offset added to a cue dimension of a boundary frame: dim 0 marks
/// low-tier boundaries, dim 1 medium, dim 2 high.
pub const FEATURE_CUE: f64 = 3.0;

/// Standard deviation of the Gaussian background in every feature dimension.
pub const FEATURE_NOISE: f64 = 0.25;

/// Number of leading feature dimensions reserved for boundary cues.
pub const CUE_DIMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Unit {
    /// First and last frame of the unit, 1-based and inclusive.
    pub span: [usize; 2],
    pub tokens: Vec<u32>,
}

/// One synthetic utterance. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub duration_s: f64,
    pub frame_rate: f64,
    pub dim: usize,
    pub seed: u64,
    pub boundaries_low: Vec<usize>,
    pub boundaries_med: Vec<usize>,
    pub boundaries_high: Vec<usize>,
    /// Low-tier units; coarser tiers are unions of consecutive units.
    pub units: Vec<Unit>,
}

/// A unit at some tier, as a span of frames and a span of reference tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierUnit {
    /// Zero-based, end-exclusive frame range.
    pub frames: Range<usize>,
    /// Zero-based, end-exclusive range into [`UtteranceRecord::reference`].
    pub tokens: Range<usize>,
}

impl UtteranceRecord {
    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.frame_rate).round() as usize
    }

    pub fn frame_duration(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn boundaries(&self, tag: LatencyTag) -> &[usize] {
        match tag {
            LatencyTag::Low => &self.boundaries_low,
            LatencyTag::Medium => &self.boundaries_med,
            LatencyTag::High => &self.boundaries_high,
        }
    }

    pub fn unit_count(&self, tag: LatencyTag) -> usize {
        self.boundaries(tag).len() + 1
    }

    pub fn reference(&self) -> Vec<u32> {
        self.units
            .iter()
            .flat_map(|u| u.tokens.iter().copied())
            .collect()
    }

    pub fn reference_len(&self) -> usize {
        self.units.iter().map(|u| u.tokens.len()).sum()
    }

    /// Units at the given tier, merged from the low-tier units.
    pub fn units_for(&self, tag: LatencyTag) -> Vec<TierUnit> {
        let ends: HashSet<usize> = self.boundaries(tag).iter().copied().collect();
        let mut out = Vec::new();
        let mut frame_start = 0;
        let mut token_start = 0;
        let mut token_end = 0;
        for unit in &self.units {
            token_end += unit.tokens.len();
            let end = unit.span[1];
            if ends.contains(&end) || end == self.frame_count() {
                out.push(TierUnit {
                    frames: frame_start..end,
                    tokens: token_start..token_end,
                });
                frame_start = end;
                token_start = token_end;
            }
        }
        out
    }

    /// Regenerate this record's feature frames from its seed.
    pub fn features(&self) -> FeatureSequence {
        let frames = self.frame_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut data: Vec<f64> = (0..frames * self.dim)
            .map(|_| FEATURE_NOISE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (cue_dim, tier) in LatencyTag::ALL.iter().enumerate().take(self.dim) {
            for &b in self.boundaries(*tier) {
                data[(b - 1) * self.dim + cue_dim] += FEATURE_CUE;
            }
        }
        FeatureSequence::new(data, self.dim, self.frame_duration())
            .expect("record dimensions validated on construction")
    }

    /// Check every structural invariant of a record.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return Err(format!(
                "frame_rate must be positive, got {}",
                self.frame_rate
            ));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(format!(
                "duration_s must be positive, got {}",
                self.duration_s
            ));
        }
        if self.dim == 0 {
            return Err("dim must be at least 1".into());
        }
        let frames = self.frame_count();
        if frames == 0 {
            return Err("record has no frames".into());
        }
        for tag in LatencyTag::ALL {
            let b = self.boundaries(tag);
            if b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("{tag} boundaries are not strictly increasing"));
            }
            if b.iter().any(|&x| x == 0 || x >= frames) {
                return Err(format!("{tag} boundary outside 1..{frames}"));
            }
        }
        let low: HashSet<_> = self.boundaries_low.iter().collect();
        let med: HashSet<_> = self.boundaries_med.iter().collect();
        if !self.boundaries_med.iter().all(|b| low.contains(b)) {
            return Err("medium boundaries are not a subset of low boundaries".into());
        }
        if !self.boundaries_high.iter().all(|b| med.contains(b)) {
            return Err("high boundaries are not a subset of medium boundaries".into());
        }
        if self.units.len() != self.boundaries_low.len() + 1 {
            return Err(format!(
                "{} units but {} low boundaries",
                self.units.len(),
                self.boundaries_low.len()
            ));
        }
        let mut next = 1;
        for (i, unit) in self.units.iter().enumerate() {
            let [start, end] = unit.span;
            if start != next || end < start {
                return Err(format!(
                    "unit {i} span {start}..{end} does not continue at frame {next}"
                ));
            }
            let expected_end = self.boundaries_low.get(i).copied().unwrap_or(frames);
            if end != expected_end {
                return Err(format!("unit {i} ends at {end}, expected {expected_end}"));
            }
            if unit.tokens.is_empty() {
                return Err(format!("unit {i} has no target tokens"));
            }
            next = end + 1;
        }
        Ok(())
    }
}

/// Header line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.to_string(),
            version: self.version,
            seed: self.seed,
            records: self.records.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parse manifest text. `path` is only used in diagnostics.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let parse_err = |line: usize, column: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            column,
            message,
        };
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| parse_err(1, 1, "missing manifest header".into()))?;

        // Check the version before the strict parse so that a newer schema
        // is reported as such rather than as unknown fields.
        let raw: serde_json::Value = serde_json::from_str(header_line)
            .map_err(|e| parse_err(1, e.column(), e.to_string()))?;
        let version = raw
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| parse_err(1, 1, "header has no numeric `version`".into()))?;
        if version != u64::from(MANIFEST_VERSION) {
            return Err(Error::VersionMismatch {
                path: path.to_string(),
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: MANIFEST_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(raw).map_err(|e| parse_err(1, 1, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(parse_err(
                1,
                1,
                format!("unknown format `{}`", header.format),
            ));
        }

        let mut records = Vec::with_capacity(header.records);
        let mut ids = HashSet::new();
        let mut line_no = 1;
        for line in lines {
            line_no += 1;
            if line.trim().is_empty() {
                return Err(parse_err(line_no, 1, "blank line".into()));
            }
            let record: UtteranceRecord = serde_json::from_str(line)
                .map_err(|e| parse_err(line_no, e.column(), e.to_string()))?;
            record
                .validate()
                .map_err(|m| parse_err(line_no, 1, format!("record `{}`: {m}", record.id)))?;
            if !ids.insert(record.id.clone()) {
                return Err(parse_err(
                    line_no,
                    1,
                    format!("duplicate id `{}`", record.id),
                ));
            }
            records.push(record);
        }
        if records.len() != header.records {
            return Err(parse_err(
                line_no + 1,
                1,
                format!(
                    "header declares {} records but the file holds {} (truncated?)",
                    header.records,
                    records.len()
                ),
            ));
        }
        Ok(Manifest {
            version: header.version,
            seed: header.seed,
            records,
        })
    }

    /// Unit counts summed over the corpus, in low/medium/high order.
    pub fn tier_unit_totals(&self) -> [usize; 3] {
        let mut totals = [0; 3];
        for r in &self.records {
            for (slot, tag) in totals.iter_mut().zip(LatencyTag::ALL) {
                *slot += r.unit_count(tag);
            }
        }
        totals
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, &path.display().to_string())
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_utterances: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub dim: usize,
    pub frame_rate: f64,
    /// Mean unit length in seconds for the low, medium and high tiers.
    pub mean_unit_s: [f64; 3],
    pub tokens_per_s: f64,
    pub vocab_size: u32,
    /// Per-utterance speaking-rate spread: unit lengths in a record are
    /// multiplied by a factor drawn log-uniformly from `[1/s, s]`.
    pub rate_spread: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_utterances: 50,
            min_duration_s: 6.0,
            max_duration_s: 20.0,
            dim: 8,
            frame_rate: 50.0,
            mean_unit_s: [0.8, 1.6, 3.2],
            tokens_per_s: 3.0,
            vocab_size: 1000,
            rate_spread: 2.0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRange(m));
        if self.n_utterances == 0 {
            return bad("need at least one utterance".into());
        }
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return bad(format!(
                "frame rate must be positive, got {}",
                self.frame_rate
            ));
        }
        if self.dim < CUE_DIMS {
            return bad(format!(
                "feature dimension must be at least {CUE_DIMS}, got {}",
                self.dim
            ));
        }
        if !(self.min_duration_s >= 2.0) || !(self.max_duration_s >= self.min_duration_s) {
            return bad(format!(
                "duration range {}..{} s must satisfy 2 <= min <= max",
                self.min_duration_s, self.max_duration_s
            ));
        }
        let [low, med, high] = self.mean_unit_s;
        if !(low > 0.0 && low < med && med < high) {
            return bad(format!(
                "mean unit lengths must be positive and increasing, got {low}/{med}/{high}"
            ));
        }
        if !(self.rate_spread >= 1.0) || !self.rate_spread.is_finite() {
            return bad(format!(
                "rate spread must be at least 1, got {}",
                self.rate_spread
            ));
        }
        if !(self.tokens_per_s > 0.0) || self.vocab_size < 2 {
            return bad("token rate and vocabulary size must be positive".into());
        }
        Ok(())
    }
}

/// Generate a corpus deterministically from `config.seed`.
pub fn generate_corpus(config: &GenConfig) -> Result<Manifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.n_utterances.to_string().len().max(4);
    let records = (0..config.n_utterances)
        .map(|i| generate_record(config, &mut rng, format!("utt{i:0width$}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        records,
    })
}

fn generate_record(
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<UtteranceRecord> {
    let fr = config.frame_rate;
    let min_frames = (config.min_duration_s * fr).round() as usize;
    let max_frames = (config.max_duration_s * fr).round() as usize;
    let frames = rng.gen_range(min_frames..=max_frames);
    let seed: u64 = rng.gen();

    let to_frames = |s: f64| ((s * fr).round() as usize).max(1);
    let spread = config.rate_spread.ln();
    let pace = if spread > 0.0 {
        rng.gen_range(-spread..=spread).exp()
    } else {
        1.0
    };
    let [low_mean, med_mean, high_mean] = config.mean_unit_s.map(|m| m * pace);

    // Low tier: unit lengths uniform in [0.5, 1.5] x mean.
    let mut low = Vec::new();
    let mut pos = 0;
    loop {
        let len = to_frames(low_mean * rng.gen_range(0.5..1.5));
        let min_len = to_frames(low_mean * 0.5);
        if pos + len + min_len > frames {
            break;
        }
        pos += len;
        low.push(pos);
    }
    if low.is_empty() && frames >= 2 {
        low.push(frames / 2);
    }

    let mut med = coarsen(&low, frames, med_mean, fr, rng);
    let mut high = coarsen(&med, frames, high_mean, fr, rng);
    // Coarser tiers must merge at least once so that the density ordering is
    // strict in every record that has anything to merge.
    if med.len() == low.len() && !med.is_empty() {
        med.remove(rng.gen_range(0..med.len()));
        high.retain(|b| med.contains(b));
    }
    if high.len() == med.len() && !high.is_empty() {
        high.remove(rng.gen_range(0..high.len()));
    }

    let mut units = Vec::with_capacity(low.len() + 1);
    let mut start = 1;
    for &end in low.iter().chain(std::iter::once(&frames)) {
        let secs = (end + 1 - start) as f64 / fr;
        let count = 1 + (secs * config.tokens_per_s + rng.gen_range(-0.5..0.5)).max(0.0) as usize;
        let tokens = (0..count)
            .map(|_| rng.gen_range(1..=config.vocab_size))
            .collect();
        units.push(Unit {
            span: [start, end],
            tokens,
        });
        start = end + 1;
    }

    let record = UtteranceRecord {
        id,
        duration_s: frames as f64 / fr,
        frame_rate: fr,
        dim: config.dim,
        seed,
        boundaries_low: low,
        boundaries_med: med,
        boundaries_high: high,
        units,
    };
    record.validate().map_err(Error::Internal)?;
    Ok(record)
}

/// Keep a subset of `fine` boundaries so that kept segments average roughly
/// `mean_s` seconds.
fn coarsen(
    fine: &[usize],
    frames: usize,
    mean_s: f64,
    fr: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut last = 0;
    let mut want = mean_s * rng.gen_range(0.6..1.4);
    for &b in fine {
        let since = (b - last) as f64 / fr;
        let remaining = (frames - b) as f64 / fr;
        if since >= want && remaining >= mean_s * 0.4 {
            kept.push(b);
            last = b;
            want = mean_s * rng.gen_range(0.6..1.4);
        }
    }
    kept
}
