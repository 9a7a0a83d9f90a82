//! Per-utterance metric rows, their aggregation, and threshold sweeps.
//!
//! Every number is rounded to six decimals when a row is built, and the
//! aggregate is computed from the rounded values. A summary computed from a
//! freshly simulated run therefore matches one computed from that run's CSV
//! file digit for digit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::UtteranceRecord;
use crate::error::{Error, Result};
use crate::metrics::{avg_decision_time, laal, rtf, BleuStats};
use crate::policies::PolicyConfig;
use crate::simulator::{run_corpus, OracleSpec, SessionResult};
use crate::sud::LatencyTag;

pub const UTTERANCE_COLUMNS: [&str; 10] = [
    "utterance_id",
    "policy",
    "gamma",
    "tag",
    "bleu",
    "laal_ideal_s",
    "laal_ca_s",
    "avg_decision_ms",
    "rtf",
    "num_writes",
];

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "policy",
    "gamma",
    "tag",
    "utterances",
    "bleu",
    "laal_ideal_s",
    "laal_ca_s",
    "avg_decision_ms",
    "rtf",
    "num_writes",
];

/// Round to the six decimals used in every CSV.
pub fn quantize(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float parses")
}

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn optional_gamma(gamma: Option<f64>) -> String {
    gamma.map(fixed).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub utterance_id: String,
    pub policy: String,
    pub gamma: Option<f64>,
    pub tag: Option<LatencyTag>,
    pub bleu: f64,
    pub laal_ideal_s: f64,
    pub laal_ca_s: f64,
    pub avg_decision_ms: f64,
    pub rtf: f64,
    pub num_writes: usize,
}

impl UtteranceRow {
    pub fn from_result(result: &SessionResult, policy: &PolicyConfig) -> Result<Self> {
        let efficiency = result.efficiency();
        Ok(Self {
            utterance_id: result.utterance_id.clone(),
            policy: policy.kind.label(),
            gamma: policy.kind.gamma().map(quantize),
            tag: policy.kind.tag(),
            bleu: quantize(BleuStats::from_pair(&result.hypothesis, &result.reference).score()),
            laal_ideal_s: quantize(laal(&result.ideal_profile())?),
            laal_ca_s: quantize(laal(&result.ca_profile())?),
            avg_decision_ms: quantize(avg_decision_time(&efficiency)?),
            rtf: quantize(rtf(&efficiency)?),
            num_writes: result.num_writes,
        })
    }

    fn fields(&self) -> [String; 10] {
        [
            self.utterance_id.clone(),
            self.policy.clone(),
            optional_gamma(self.gamma),
            self.tag.map(|t| t.to_string()).unwrap_or_default(),
            fixed(self.bleu),
            fixed(self.laal_ideal_s),
            fixed(self.laal_ca_s),
            fixed(self.avg_decision_ms),
            fixed(self.rtf),
            self.num_writes.to_string(),
        ]
    }
}

/// One aggregated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub gamma: Option<f64>,
    pub tag: Option<LatencyTag>,
    pub utterances: usize,
    pub bleu: f64,
    pub laal_ideal_s: f64,
    pub laal_ca_s: f64,
    pub avg_decision_ms: f64,
    pub rtf: f64,
    /// Total over the utterances, not a mean.
    pub num_writes: usize,
}

impl SummaryRow {
    fn fields(&self) -> [String; 10] {
        [
            self.policy.clone(),
            optional_gamma(self.gamma),
            self.tag.map(|t| t.to_string()).unwrap_or_default(),
            self.utterances.to_string(),
            fixed(self.bleu),
            fixed(self.laal_ideal_s),
            fixed(self.laal_ca_s),
            fixed(self.avg_decision_ms),
            fixed(self.rtf),
            self.num_writes.to_string(),
        ]
    }
}

/// Group rows by (policy, gamma, tag) in order of first appearance and
/// average each group. Sums run in row order.
pub fn aggregate(rows: &[UtteranceRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(SummaryRow, [f64; 5])> = Vec::new();
    for row in rows {
        let found = groups.iter_mut().find(|(s, _)| {
            s.policy == row.policy && s.gamma.map(fixed) == row.gamma.map(fixed) && s.tag == row.tag
        });
        let (summary, sums) = match found {
            Some(group) => group,
            None => {
                groups.push((
                    SummaryRow {
                        policy: row.policy.clone(),
                        gamma: row.gamma,
                        tag: row.tag,
                        utterances: 0,
                        bleu: 0.0,
                        laal_ideal_s: 0.0,
                        laal_ca_s: 0.0,
                        avg_decision_ms: 0.0,
                        rtf: 0.0,
                        num_writes: 0,
                    },
                    [0.0; 5],
                ));
                groups.last_mut().expect("just pushed")
            }
        };
        summary.utterances += 1;
        summary.num_writes += row.num_writes;
        for (acc, v) in sums.iter_mut().zip([
            row.bleu,
            row.laal_ideal_s,
            row.laal_ca_s,
            row.avg_decision_ms,
            row.rtf,
        ]) {
            *acc += v;
        }
    }
    groups
        .into_iter()
        .map(|(mut s, sums)| {
            let n = s.utterances as f64;
            s.bleu = sums[0] / n;
            s.laal_ideal_s = sums[1] / n;
            s.laal_ca_s = sums[2] / n;
            s.avg_decision_ms = sums[3] / n;
            s.rtf = sums[4] / n;
            s
        })
        .collect()
}

fn write_table<const N: usize>(
    header: [&str; N],
    rows: impl Iterator<Item = [String; N]>,
) -> Result<String> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let table_err = |e: csv::Error| Error::Table(e.to_string());
    writer.write_record(header).map_err(table_err)?;
    for row in rows {
        writer.write_record(&row).map_err(table_err)?;
    }
    writer.flush().map_err(|e| Error::Table(e.to_string()))?;
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Table(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Table(e.to_string()))
}

pub fn utterance_csv(rows: &[UtteranceRow]) -> Result<String> {
    write_table(UTTERANCE_COLUMNS, rows.iter().map(UtteranceRow::fields))
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    write_table(SUMMARY_COLUMNS, rows.iter().map(SummaryRow::fields))
}

/// Write `text` to `out`, where `-` means standard output.
pub fn emit(text: &str, out: &std::path::Path) -> Result<()> {
    if out.as_os_str() == "-" {
        let mut stdout = std::io::stdout().lock();
        stdout
            .write_all(text.as_bytes())
            .and_then(|_| stdout.flush())
            .map_err(|e| Error::io(out, e))
    } else {
        std::fs::write(out, text).map_err(|e| Error::io(out, e))
    }
}

/// Parse a per-utterance CSV as written by [`utterance_csv`].
pub fn read_utterance_csv(text: &str, path: &str) -> Result<Vec<UtteranceRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_string(),
        line: line as usize,
        column: 0,
        message,
    };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(UTTERANCE_COLUMNS) {
        return Err(parse_err(
            1,
            format!("expected header {}", UTTERANCE_COLUMNS.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let number = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                parse_err(
                    line,
                    format!(
                        "column {}: not a number: {:?}",
                        UTTERANCE_COLUMNS[i],
                        field(i)
                    ),
                )
            })
        };
        rows.push(UtteranceRow {
            utterance_id: field(0).to_string(),
            policy: field(1).to_string(),
            gamma: if field(2).is_empty() {
                None
            } else {
                Some(number(2)?)
            },
            tag: if field(3).is_empty() {
                None
            } else {
                Some(field(3).parse().map_err(|e: String| parse_err(line, e))?)
            },
            bleu: number(4)?,
            laal_ideal_s: number(5)?,
            laal_ca_s: number(6)?,
            avg_decision_ms: number(7)?,
            rtf: number(8)?,
            num_writes: field(9).parse().map_err(|_| {
                parse_err(
                    line,
                    format!("column num_writes: not a count: {:?}", field(9)),
                )
            })?,
        });
    }
    Ok(rows)
}

/// Parse `start:stop:step` (inclusive of `stop`) or a comma-separated list.
pub fn parse_gammas(spec: &str) -> Result<Vec<f64>> {
    let bad = |m: String| Error::InvalidRange(format!("gamma spec {spec:?}: {m}"));
    let number = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| bad(format!("not a number: {s:?}")))
    };
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(bad("expected start:stop:step".into()));
        };
        let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
        if !(step > 0.0) || !step.is_finite() || stop < start {
            return Err(bad("need step > 0 and stop >= start".into()));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        if count > 100_000 {
            return Err(bad(format!("{count} points is too many")));
        }
        (0..count)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect()
    } else {
        spec.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(number)
            .collect::<Result<Vec<f64>>>()?
    };
    if values.is_empty() {
        return Err(bad("no values".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositiveThreshold(*v));
    }
    Ok(values)
}

/// Policies × thresholds. Policies without a sense-unit component appear once.
pub fn sweep_points(policies: &[PolicyConfig], gammas: &[f64]) -> Vec<PolicyConfig> {
    let mut points = Vec::new();
    for policy in policies {
        if policy.kind.gamma().is_some() {
            for &g in gammas {
                points.push(PolicyConfig {
                    kind: policy.kind.with_gamma(g),
                    chunk_ms: policy.chunk_ms,
                });
            }
        } else {
            points.push(policy.clone());
        }
    }
    points
}

/// Simulate a corpus under one policy and tabulate it.
pub fn evaluate_policy(
    records: &[UtteranceRecord],
    policy: &PolicyConfig,
    oracles: &OracleSpec,
    chunk_ms: f64,
    parallelism: usize,
) -> Result<(Vec<SessionResult>, Vec<UtteranceRow>)> {
    let results = run_corpus(records, policy, oracles, chunk_ms, parallelism)?;
    let rows = results
        .iter()
        .map(|r| UtteranceRow::from_result(r, policy))
        .collect::<Result<Vec<_>>>()?;
    Ok((results, rows))
}

/// Evaluate every sweep point and return one summary row per point.
pub fn run_sweep(
    records: &[UtteranceRecord],
    points: &[PolicyConfig],
    oracles: &OracleSpec,
    chunk_ms: f64,
    parallelism: usize,
) -> Result<Vec<SummaryRow>> {
    let mut out = Vec::with_capacity(points.len());
    for point in points {
        let (_, rows) = evaluate_policy(records, point, oracles, chunk_ms, parallelism)?;
        let mut summary = aggregate(&rows);
        match summary.pop() {
            Some(row) if summary.is_empty() => out.push(row),
            Some(_) => {
                return Err(Error::Internal(
                    "one sweep point produced several groups".into(),
                ))
            }
            None => log::warn!("sweep point {point} produced no rows (empty corpus)"),
        }
    }
    Ok(out)
}
