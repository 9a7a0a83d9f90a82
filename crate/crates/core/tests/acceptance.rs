//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every tolerance is pinned below.

#![allow(clippy::needless_range_loop)]

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simulsense::cif::{
    integrate_scaled_unit, segment_by_threshold, segment_into_units, FeatureSequence, FrameWeights,
};
use simulsense::datagen::{generate_corpus, GenConfig};
use simulsense::metrics::{
    avg_decision_time, corpus_bleu, laal, rtf, BleuStats, DelayProfile, EfficiencyStats,
};
use simulsense::policies::parse_policy;
use simulsense::report::{parse_gammas, run_sweep, summary_csv, sweep_points};
use simulsense::sat::{
    evaluate_boundaries, loss_qua1, loss_qua2, train_toy_predictor, TrainConfig, UnitTargets,
    BOUNDARY_TOLERANCE_FRAMES,
};
use simulsense::simulator::OracleSpec;
use simulsense::sud::{AccumulatorState, LatencyTag};

const FLOOR_STREAMS: usize = 1000;
const FLOOR_GAMMAS: [f64; 4] = [0.5, 1.0, 2.5, 5.0];
const FLOOR_BUDGET: Duration = Duration::from_secs(5);
const UNIT_STREAMS: usize = 500;
const UNIT_RANGE: (usize, usize) = (2, 40);
const RESIDUAL_TOL: f64 = 1e-9;
const CHUNK_STREAMS: usize = 1000;
const CHUNK_PARTITIONS: usize = 10;
const SCALED_PAIRS: usize = 1000;
const MAX_UNIT_TOKENS: usize = 20;
const MASS_REL_TOL: f64 = 1e-9;
const GRAD_POINTS: usize = 200;
const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-3;
const TRAIN_UTTERANCES: usize = 50;
const HELDOUT_UTTERANCES: usize = 20;
const TRAIN_EPOCHS: usize = 50;
const MAX_NON_MONOTONE: usize = 2;
const MIN_F1: f64 = 0.9;
const TRAIN_BUDGET: Duration = Duration::from_secs(60);
const LAAL_TOL: f64 = 1e-9;
const TABLE_TOL: f64 = 1e-9;
const SWEEP_GAMMAS: &str = "0.5:5.0:0.5";
const SENSE_MS: f64 = 38.6;
const MOCK_MS: f64 = 116.2;
const MIN_RTF_RATIO: f64 = 3.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_stream(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Residual statistics gathered by criteria 1 and 2 for criterion 3.
#[derive(Default)]
struct ResidualLog {
    observed: usize,
    out_of_range: usize,
    final_checked: usize,
    final_mismatch: usize,
    worst_final_error: f64,
}

impl ResidualLog {
    fn observe(&mut self, r: f64, gamma: f64) {
        self.observed += 1;
        if !(0.0..gamma).contains(&r) {
            self.out_of_range += 1;
        }
    }

    fn check_final(&mut self, r: f64, total: f64, gamma: f64) {
        let expected = total.rem_euclid(gamma);
        // Values just below a multiple of gamma fire within the tolerance.
        let err = (r - expected).abs().min((r - expected + gamma).abs());
        self.final_checked += 1;
        self.worst_final_error = self.worst_final_error.max(err);
        if err > RESIDUAL_TOL {
            self.final_mismatch += 1;
        }
    }
}

fn floor_count_law(log: &mut ResidualLog) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    let mut cases = 0;
    for _ in 0..FLOOR_STREAMS {
        let stream = random_stream(&mut rng, 200);
        for gamma in FLOOR_GAMMAS {
            let r0 = rng.gen_range(0.0..gamma);
            let total = r0 + stream.iter().sum::<f64>();
            let seg = segment_by_threshold(&stream, gamma, r0).expect("valid stream");
            cases += 1;
            if seg.trigger_count() != (total / gamma).floor() as usize {
                failures += 1;
            }
            log.observe(seg.final_residual, gamma);
            if seg.trigger_count() >= 1 {
                log.check_final(seg.final_residual, total, gamma);
            }
            let mut state = AccumulatorState::new(gamma, LatencyTag::High).expect("valid gamma");
            for &a in &stream {
                state.push_frame(a).expect("valid weight");
                log.observe(state.residual(), gamma);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < FLOOR_BUDGET,
        format!(
            "{failures} mismatches in {cases} cases, {:.2} s (budget {} s)",
            elapsed.as_secs_f64(),
            FLOOR_BUDGET.as_secs()
        ),
    )
}

fn unit_count_contract(log: &mut ResidualLog) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..UNIT_STREAMS {
        let n = rng.gen_range(UNIT_RANGE.0..=UNIT_RANGE.1);
        let len = rng.gen_range(n..=n + 200);
        let stream: Vec<f64> = (0..len).map(|_| rng.gen_range(0.001..1.0)).collect();
        let seg = segment_into_units(&FrameWeights::new(stream).expect("valid"), n).expect("valid");
        if seg.segment_count() != n {
            failures += 1;
        }
        log.observe(seg.final_residual, 1.0);
    }
    outcome(
        failures == 0,
        format!(
            "{failures} failures in {UNIT_STREAMS} streams, N in [{}, {}]",
            UNIT_RANGE.0, UNIT_RANGE.1
        ),
    )
}

fn residual_invariant(log: &ResidualLog) -> Outcome {
    outcome(
        log.out_of_range == 0 && log.final_mismatch == 0,
        format!(
            "{} of {} residuals outside [0, gamma); {} of {} final residuals off by > {RESIDUAL_TOL:e} (worst {:.1e})",
            log.out_of_range, log.observed, log.final_mismatch, log.final_checked, log.worst_final_error
        ),
    )
}

fn online_offline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    for _ in 0..CHUNK_STREAMS {
        let stream = random_stream(&mut rng, 150);
        let gamma = rng.gen_range(0.25..4.0);
        let offline = segment_by_threshold(&stream, gamma, 0.0)
            .expect("valid")
            .boundaries;
        for _ in 0..CHUNK_PARTITIONS {
            let mut state = AccumulatorState::new(gamma, LatencyTag::Medium).expect("valid");
            let mut online = Vec::new();
            let mut at = 0;
            while at < stream.len() {
                let len = rng.gen_range(1..=(stream.len() - at).min(40));
                for d in state.run_stream(&stream[at..at + len]).expect("valid") {
                    online.extend(std::iter::repeat_n(d.frame_index, d.fires as usize));
                }
                at += len;
            }
            if online != offline {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!(
            "{failures} mismatches over {CHUNK_STREAMS} streams x {CHUNK_PARTITIONS} partitions"
        ),
    )
}

fn per_unit_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut count_failures = 0;
    let mut worst_mass = 0.0f64;
    for _ in 0..SCALED_PAIRS {
        let len = rng.gen_range(1..=80);
        let dim = rng.gen_range(1..=6);
        let data = (0..len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = FeatureSequence::new(data, dim, 0.02).expect("valid");
        let weights: Vec<f64> = (0..len).map(|_| rng.gen_range(0.001..1.0)).collect();
        let l_k = rng.gen_range(1..=MAX_UNIT_TOKENS);
        let unit =
            integrate_scaled_unit(&features, &FrameWeights::new(weights).expect("valid"), l_k)
                .expect("valid");
        if unit.count() != l_k {
            count_failures += 1;
        }
        let mass = unit.masses.iter().sum::<f64>() + unit.dropped_mass();
        worst_mass = worst_mass.max((mass - l_k as f64).abs() / l_k as f64);
    }
    outcome(
        count_failures == 0 && worst_mass <= MASS_REL_TOL,
        format!(
            "{count_failures} count failures in {SCALED_PAIRS} pairs; worst relative mass error {worst_mass:.1e} (tol {MASS_REL_TOL:e})"
        ),
    )
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let (mut q1_points, mut q2_points) = (0, 0);
    let fd = |f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize| {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[i] += FD_STEP;
        down[i] -= FD_STEP;
        (f(&up) - f(&down)) / (2.0 * FD_STEP)
    };
    while q1_points < GRAD_POINTS {
        let alpha: Vec<f64> = (0..rng.gen_range(1..40))
            .map(|_| rng.gen_range(0.05..1.0))
            .collect();
        let n = rng.gen_range(1..30);
        if (alpha.iter().sum::<f64>() - n as f64).abs() <= KINK_MARGIN {
            continue;
        }
        let f = |a: &[f64]| {
            loss_qua1(&FrameWeights::new(a.to_vec()).unwrap(), n)
                .unwrap()
                .value
        };
        let grad = loss_qua1(&FrameWeights::new(alpha.clone()).unwrap(), n)
            .unwrap()
            .grad;
        for i in 0..alpha.len() {
            worst = worst.max((fd(&f, &alpha, i) - grad[i]).abs());
        }
        q1_points += 1;
    }
    while q2_points < GRAD_POINTS {
        let n = rng.gen_range(2..8);
        let len = rng.gen_range(n..60);
        let alpha: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
        let beta: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
        let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..6)).collect();
        let seg = segment_into_units(&FrameWeights::new(alpha).unwrap(), n).unwrap();
        let near_kink = seg
            .segments(len)
            .into_iter()
            .zip(&counts)
            .any(|(r, &c)| (beta[r].iter().sum::<f64>() - c as f64).abs() <= KINK_MARGIN);
        if near_kink {
            continue;
        }
        let targets = UnitTargets::new(counts).unwrap();
        let f = |b: &[f64]| {
            loss_qua2(&FrameWeights::new(b.to_vec()).unwrap(), &seg, &targets)
                .unwrap()
                .value
        };
        let grad = loss_qua2(&FrameWeights::new(beta.clone()).unwrap(), &seg, &targets)
            .unwrap()
            .grad;
        for i in 0..len {
            worst = worst.max((fd(&f, &beta, i) - grad[i]).abs());
        }
        q2_points += 1;
    }
    outcome(
        worst <= GRAD_TOL,
        format!("{q1_points} + {q2_points} points, worst |analytic - numeric| {worst:.1e} (tol {GRAD_TOL:e}, h {FD_STEP:e})"),
    )
}

fn toy_training() -> Outcome {
    let train = generate_corpus(&GenConfig {
        seed: 42,
        n_utterances: TRAIN_UTTERANCES,
        ..GenConfig::default()
    })
    .expect("corpus");
    let heldout = generate_corpus(&GenConfig {
        seed: 4242,
        n_utterances: HELDOUT_UTTERANCES,
        ..GenConfig::default()
    })
    .expect("corpus");
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: TRAIN_EPOCHS,
        ..TrainConfig::default()
    };
    let trained =
        train_toy_predictor(&train.records, LatencyTag::High, &cfg).expect("training runs");
    let elapsed = start.elapsed();
    let score = evaluate_boundaries(
        &trained.detector,
        &heldout.records,
        LatencyTag::High,
        1.0,
        BOUNDARY_TOLERANCE_FRAMES,
    )
    .expect("scoring runs");
    let rising = trained.non_monotone_epochs();
    let first = trained.curve.first().unwrap().mean_total;
    let last = trained.curve.last().unwrap().mean_total;
    let monotone = rising <= MAX_NON_MONOTONE;
    let accurate = score.f1() >= MIN_F1;
    let fast = elapsed < TRAIN_BUDGET;
    outcome(
        monotone && accurate && fast,
        format!(
            "loss {first:.3} -> {last:.3}, {rising} rising epochs of {TRAIN_EPOCHS} (allowed {MAX_NON_MONOTONE}) [{}]; \
             held-out F1 {:.4} (min {MIN_F1}) [{}]; {:.1} s (budget {} s) [{}]",
            if monotone { "ok" } else { "MISS" },
            score.f1(),
            if accurate { "ok" } else { "MISS" },
            elapsed.as_secs_f64(),
            TRAIN_BUDGET.as_secs(),
            if fast { "ok" } else { "MISS" },
        ),
    )
}

fn latency_fixtures() -> Outcome {
    let p = |delays: &[f64], source: f64, ref_len: usize| DelayProfile {
        delays: delays.to_vec(),
        source_duration: source,
        ref_len,
    };
    let cases = [
        (p(&[1.0, 2.0, 3.0, 4.0], 4.0, 4), 1.0),
        (p(&[4.0, 4.0, 4.0, 4.0], 4.0, 4), 4.0),
        (p(&[1.0, 1.0, 2.0, 2.0, 3.0, 4.0], 4.0, 4), 0.5),
    ];
    let laal_ok = cases
        .iter()
        .all(|(profile, want)| (laal(profile).unwrap() - want).abs() <= LAAL_TOL);
    let decision = avg_decision_time(&EfficiencyStats {
        decision_count: 20,
        total_decision_compute: 0.772,
        audio_duration: 10.0,
    })
    .unwrap();
    let factor = rtf(&EfficiencyStats {
        decision_count: 1,
        total_decision_compute: 0.16,
        audio_duration: 10.0,
    })
    .unwrap();
    let ok = laal_ok && (decision - 38.6).abs() <= TABLE_TOL && (factor - 0.016).abs() <= TABLE_TOL;
    outcome(
        ok,
        format!("LAAL examples {}; avg decision {decision:.6} ms (want 38.6); RTF {factor:.6} (want 0.016)", if laal_ok { "exact" } else { "WRONG" }),
    )
}

fn tradeoff_shape() -> Outcome {
    let corpus = generate_corpus(&GenConfig::default()).expect("corpus");
    let zero = OracleSpec::default();
    let points = sweep_points(
        &[parse_policy("sense:tag=high").unwrap()],
        &parse_gammas(SWEEP_GAMMAS).unwrap(),
    );
    let rows = run_sweep(&corpus.records, &points, &zero, 500.0, 4).expect("sweep runs");
    let laal_rising = rows
        .windows(2)
        .all(|w| w[1].laal_ideal_s > w[0].laal_ideal_s);
    let writes_falling = rows.windows(2).all(|w| w[1].num_writes <= w[0].num_writes);

    let timed = OracleSpec::parse(&format!("sud_ms={SENSE_MS}")).unwrap();
    let sense = run_sweep(
        &corpus.records,
        &[parse_policy("sense").unwrap()],
        &timed,
        500.0,
        4,
    )
    .unwrap();
    let mock_spec = format!("mockllm:base=waitk:k=3,cost_ms={MOCK_MS}");
    let mock = run_sweep(
        &corpus.records,
        &[parse_policy(&mock_spec).unwrap()],
        &timed,
        500.0,
        4,
    )
    .unwrap();
    let ratio = mock[0].rtf / sense[0].rtf;
    outcome(
        laal_rising && writes_falling && ratio >= MIN_RTF_RATIO,
        format!(
            "ideal LAAL {:.3} -> {:.3} s strictly rising: {laal_rising}; writes {} -> {} non-increasing: {writes_falling}; \
             RTF sense {:.4} vs mock {:.4}, ratio {ratio:.2} (min {MIN_RTF_RATIO})",
            rows[0].laal_ideal_s,
            rows[rows.len() - 1].laal_ideal_s,
            rows[0].num_writes,
            rows[rows.len() - 1].num_writes,
            sense[0].rtf,
            mock[0].rtf,
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = GenConfig {
        seed: 42,
        n_utterances: 20,
        ..GenConfig::default()
    };
    let manifest = generate_corpus(&cfg).unwrap();
    let manifest_same = manifest.to_jsonl() == generate_corpus(&cfg).unwrap().to_jsonl();
    let oracles =
        OracleSpec::parse("encoder_ms=4,sud_ms=38.6,call_ms=30,token_ms=2,seed=9").unwrap();
    let policies = [
        parse_policy("sense").unwrap(),
        parse_policy("la").unwrap(),
        parse_policy("mockllm:base=waitk:k=3,cost_ms=116.2").unwrap(),
    ];
    let points = sweep_points(&policies, &parse_gammas("0.5:2.0:0.5").unwrap());
    let run = |threads| {
        summary_csv(&run_sweep(&manifest.records, &points, &oracles, 500.0, threads).unwrap())
            .unwrap()
    };
    let first = run(1);
    let repeat = run(1);
    let wide = run(8);
    let sweeps_same = first == repeat && first == wide;
    outcome(
        manifest_same && sweeps_same,
        format!("manifest regeneration identical: {manifest_same}; sweep CSV identical across repeats and parallelism 1/8: {sweeps_same}"),
    )
}

fn bleu_fixtures() -> Outcome {
    let refs = vec![vec![3u32, 1, 4, 1, 5, 9, 2, 6], vec![5, 3, 5, 8, 9, 7]];
    let identical = corpus_bleu(&refs, &refs).unwrap();
    let hyp: Vec<&str> = "the the the the the the the".split(' ').collect();
    let reference: Vec<&str> = "the cat is on the mat".split(' ').collect();
    let p1 = BleuStats::from_pair(&hyp, &reference).precision(1);
    outcome(
        identical == 1.0 && p1 == 2.0 / 7.0,
        format!("identical corpus BLEU {identical}; clipped unigram precision {p1:.6} (want 2/7)"),
    )
}

fn main() -> ExitCode {
    let mut log = ResidualLog::default();
    let results = [
        ("1 floor-count law", floor_count_law(&mut log)),
        (
            "2 N-1 scaling gives N segments",
            unit_count_contract(&mut log),
        ),
        ("3 residual invariant", residual_invariant(&log)),
        ("4 online/offline equivalence", online_offline()),
        ("5 per-unit count and mass", per_unit_counts()),
        ("6 gradient checks", gradient_checks()),
        ("7 toy training", toy_training()),
        ("8 latency metric fixtures", latency_fixtures()),
        ("9 tradeoff shape", tradeoff_shape()),
        ("10 determinism", determinism()),
        ("11 BLEU fixtures", bleu_fixtures()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "{} criterion {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
