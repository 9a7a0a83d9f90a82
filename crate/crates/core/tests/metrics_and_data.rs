use proptest::prelude::*;

use simulsense::datagen::{generate_corpus, read_manifest, write_manifest, GenConfig, Manifest};
use simulsense::error::Error;
use simulsense::metrics::{corpus_bleu, laal, BleuStats, DelayProfile};
use simulsense::policies::parse_policy;
use simulsense::report::{
    aggregate, evaluate_policy, parse_gammas, read_utterance_csv, run_sweep, summary_csv,
    sweep_points, utterance_csv,
};
use simulsense::simulator::OracleSpec;
use simulsense::sud::LatencyTag;

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn laal_is_shift_equivariant_before_the_cut(
        raw in prop::collection::vec(0.0f64..5.0, 1..30),
        shift in 0.0f64..2.0,
        ref_len in 1usize..40,
    ) {
        // With every delay below the source length, no cut happens and
        // adding a constant adds it to the score.
        let source = 20.0;
        let delays = sorted(raw);
        let base = laal(&DelayProfile { delays: delays.clone(), source_duration: source, ref_len }).unwrap();
        let moved: Vec<f64> = delays.iter().map(|d| d + shift).collect();
        let shifted = laal(&DelayProfile { delays: moved, source_duration: source, ref_len }).unwrap();
        prop_assert!((shifted - base - shift).abs() < 1e-9);
    }

    #[test]
    fn laal_grows_with_later_emission(
        raw in prop::collection::vec(0.0f64..10.0, 1..30),
        bump in 0.0f64..3.0,
        at in 0usize..30,
        ref_len in 1usize..40,
    ) {
        let delays: Vec<f64> = sorted(raw).into_iter().map(|d| d.min(9.0)).collect();
        let i = at % delays.len();
        let mut later = delays.clone();
        for d in &mut later[i..] {
            *d = (*d + bump).min(9.5);
        }
        let p = |d: Vec<f64>| DelayProfile { delays: d, source_duration: 10.0, ref_len };
        prop_assert!(laal(&p(later)).unwrap() >= laal(&p(delays)).unwrap() - 1e-12);
    }

    #[test]
    fn offline_emission_scores_the_source_length(n in 1usize..30, source in 0.5f64..30.0, ref_len in 1usize..40) {
        let v = laal(&DelayProfile { delays: vec![source; n], source_duration: source, ref_len }).unwrap();
        prop_assert!((v - source).abs() < 1e-9);
    }

    #[test]
    fn corpus_bleu_ignores_pair_order(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u32..6, 0..12), prop::collection::vec(0u32..6, 1..12)),
            1..8,
        ),
        rotate in 0usize..8,
    ) {
        let (h, r): (Vec<Vec<u32>>, Vec<Vec<u32>>) = pairs.into_iter().unzip();
        let k = rotate % h.len();
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        let a = corpus_bleu(&h, &r).unwrap();
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn self_bleu_is_one(refs in prop::collection::vec(prop::collection::vec(0u32..50, 4..15), 1..6)) {
        prop_assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 1.0);
    }

    #[test]
    fn clipped_matches_never_exceed_reference_counts(
        hyp in prop::collection::vec(0u32..4, 1..20),
        reference in prop::collection::vec(0u32..4, 1..20),
    ) {
        let s = BleuStats::from_pair(&hyp, &reference);
        prop_assert!(s.matches[0] <= reference.len().min(hyp.len()));
        for n in 0..4 {
            prop_assert!(s.matches[n] <= s.totals[n]);
        }
    }

    #[test]
    fn gamma_ranges_are_inclusive_and_evenly_spaced(start in 1u32..20, count in 1u32..30, step in 1u32..10) {
        let (a, d) = (start as f64 / 10.0, step as f64 / 10.0);
        let b = a + (count - 1) as f64 * d;
        let g = parse_gammas(&format!("{a}:{b}:{d}")).unwrap();
        prop_assert_eq!(g.len(), count as usize);
        prop_assert!((g[0] - a).abs() < 1e-9);
        prop_assert!((g[g.len() - 1] - b).abs() < 1e-9);
    }
}

#[test]
fn laal_worked_examples() {
    let p = |delays: &[f64], source: f64, ref_len: usize| DelayProfile {
        delays: delays.to_vec(),
        source_duration: source,
        ref_len,
    };
    assert!((laal(&p(&[1.0, 2.0, 3.0, 4.0], 4.0, 4)).unwrap() - 1.0).abs() < 1e-9);
    assert!((laal(&p(&[4.0, 4.0, 4.0], 4.0, 3)).unwrap() - 4.0).abs() < 1e-9);
    assert!((laal(&p(&[1.0, 1.0, 2.0, 2.0, 3.0, 4.0], 4.0, 4)).unwrap() - 0.5).abs() < 1e-9);
    assert!(matches!(laal(&p(&[], 4.0, 4)), Err(Error::EmptyHypothesis)));
}

#[test]
fn manifests_are_deterministic_and_round_trip() {
    let cfg = GenConfig {
        seed: 42,
        n_utterances: 10,
        ..GenConfig::default()
    };
    let a = generate_corpus(&cfg).unwrap();
    let b = generate_corpus(&cfg).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let other = generate_corpus(&GenConfig {
        seed: 43,
        ..cfg.clone()
    })
    .unwrap();
    assert_ne!(a.to_jsonl(), other.to_jsonl());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    write_manifest(&a, &path).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_jsonl(), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn generated_tiers_nest_and_cover_every_frame() {
    let m = generate_corpus(&GenConfig {
        seed: 5,
        n_utterances: 30,
        ..GenConfig::default()
    })
    .unwrap();
    let [low, med, high] = m.tier_unit_totals();
    assert!(low >= med && med >= high && low > high);
    for r in &m.records {
        r.validate().unwrap();
        let low = r.boundaries(LatencyTag::Low);
        let med = r.boundaries(LatencyTag::Medium);
        let high = r.boundaries(LatencyTag::High);
        assert!(high.iter().all(|b| med.contains(b)), "{}", r.id);
        assert!(med.iter().all(|b| low.contains(b)), "{}", r.id);
        for tag in LatencyTag::ALL {
            let units = r.units_for(tag);
            assert_eq!(units.len(), r.unit_count(tag));
            // Consecutive, gap-free spans over frames and over tokens.
            let mut frame_at = 0;
            let mut token_at = 0;
            for u in &units {
                assert_eq!(u.frames.start, frame_at);
                assert_eq!(u.tokens.start, token_at);
                assert!(!u.frames.is_empty() && !u.tokens.is_empty());
                frame_at = u.frames.end;
                token_at = u.tokens.end;
            }
            assert_eq!(frame_at, r.frame_count());
            assert_eq!(token_at, r.reference_len());
        }
    }
}

#[test]
fn manifest_errors_are_specific() {
    let m = generate_corpus(&GenConfig {
        seed: 1,
        n_utterances: 3,
        ..GenConfig::default()
    })
    .unwrap();
    let text = m.to_jsonl();
    let lines: Vec<&str> = text.lines().collect();

    let truncated = lines[..3].join("\n") + "\n";
    match Manifest::parse(&truncated, "t.jsonl") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }

    let cut_mid_line = &text[..text.len() - 40];
    match Manifest::parse(cut_mid_line, "t.jsonl") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }

    let future = text.replacen("\"version\":1", "\"version\":2", 1);
    assert!(matches!(
        Manifest::parse(&future, "t.jsonl"),
        Err(Error::VersionMismatch { found: 2, .. })
    ));

    let unknown = text.replacen("{\"id\"", "{\"extra\":1,\"id\"", 1);
    match Manifest::parse(&unknown, "t.jsonl") {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 2);
            assert!(message.contains("extra"), "{message}");
        }
        other => panic!("{other:?}"),
    }

    assert!(matches!(
        generate_corpus(&GenConfig {
            n_utterances: 0,
            ..GenConfig::default()
        }),
        Err(Error::InvalidRange(_))
    ));
}

#[test]
fn one_point_sweep_matches_simulate_then_aggregate() {
    let m = generate_corpus(&GenConfig {
        seed: 8,
        n_utterances: 12,
        ..GenConfig::default()
    })
    .unwrap();
    let oracles =
        OracleSpec::parse("encoder_ms=3,sud_ms=38.6,call_ms=25,token_ms=1.5,seed=2").unwrap();
    for spec in [
        "sense:gamma=1.5,tag=medium",
        "la",
        "mockllm:base=sense:gamma=2,cost_ms=116.2",
    ] {
        let policy = parse_policy(spec).unwrap();
        let (_, rows) = evaluate_policy(&m.records, &policy, &oracles, 500.0, 3).unwrap();
        let csv = utterance_csv(&rows).unwrap();
        let reread = read_utterance_csv(&csv, "run.csv").unwrap();
        assert_eq!(reread, rows);
        let via_file = summary_csv(&aggregate(&reread)).unwrap();

        let gammas = match policy.kind.gamma() {
            Some(g) => vec![g],
            None => parse_gammas("1,2").unwrap(),
        };
        let points = sweep_points(std::slice::from_ref(&policy), &gammas);
        assert_eq!(points.len(), 1);
        let direct =
            summary_csv(&run_sweep(&m.records, &points, &oracles, 500.0, 5).unwrap()).unwrap();
        assert_eq!(direct, via_file, "{spec}");
    }
}

#[test]
fn sweep_points_cross_policies_with_thresholds() {
    let policies = [
        parse_policy("sense").unwrap(),
        parse_policy("waitk:k=3").unwrap(),
        parse_policy("mockllm:base=sense:tag=low,cost_ms=5").unwrap(),
    ];
    let gammas = parse_gammas("0.5:5.0:0.5").unwrap();
    let points = sweep_points(&policies, &gammas);
    assert_eq!(points.len(), 10 + 1 + 10);
    assert_eq!(points[9].kind.gamma(), Some(5.0));
    assert_eq!(points[10].kind.gamma(), None);
    assert_eq!(points[11].kind.tag(), Some(LatencyTag::Low));
}
