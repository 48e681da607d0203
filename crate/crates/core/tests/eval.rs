use hiergrpo::eval::{
    evaluate, format_adherence, intermediate_accuracy, length_stats, level_correctness,
    trace_lengths, Averaging, EvalConfig, EvalError, Scored, TraceRecord,
};
use hiergrpo::synthworld::{PairSample, Split};
use hiergrpo::taxonomy::{AttributeMode, AttributeSchema, Lineage, Stratum};
use hiergrpo::trace::{parse_trace, parse_trace_with, LevelRequirement, Whitespace};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lin(c: &str, o: &str, f: &str, g: &str, s: &str) -> Lineage {
    Lineage::taxonomy(c, o, f, g, s).unwrap()
}

/// A pair whose lineages share exactly the ranks implied by `stratum`;
/// visual pairs share nothing.
fn pair(id: usize, stratum: Stratum) -> PairSample {
    let a = lin("C1", "O1", "F1", "G1", "S1");
    let b = match stratum {
        Stratum::SameSpecies => a.clone(),
        Stratum::SameGenus => lin("C1", "O1", "F1", "G1", "S2"),
        Stratum::SameFamily => lin("C1", "O1", "F1", "G2", "S3"),
        Stratum::SameOrder => lin("C1", "O1", "F2", "G3", "S4"),
        Stratum::SameClass => lin("C1", "O2", "F3", "G4", "S5"),
        _ => lin("C2", "O3", "F4", "G5", "S6"),
    };
    PairSample {
        id: format!("p{id:06}"),
        features_a: vec![0.0],
        features_b: vec![0.0],
        lineage_a: a,
        lineage_b: b,
        label: stratum.label(),
        stratum,
        split: Split::Test,
        visual: stratum == Stratum::Visual,
    }
}

fn answer_trace(answer: &str) -> String {
    format!("<think></think><answer>{answer}</answer>")
}

fn schema() -> AttributeSchema {
    AttributeSchema::taxonomy(AttributeMode::Concrete)
}

fn record(p: &PairSample, trace: String) -> TraceRecord {
    TraceRecord {
        pair_id: p.id.clone(),
        trace,
    }
}

#[test]
fn all_correct_corpus_scores_100_everywhere() {
    let mut data = Vec::new();
    let mut traces = Vec::new();
    for (i, &s) in Stratum::TAXONOMY_COLUMNS.iter().enumerate() {
        let p = pair(i, s);
        traces.push(record(
            &p,
            answer_trace(if s.label() == 1 { "1" } else { "0" }),
        ));
        data.push(p);
    }
    let r = evaluate(
        &traces,
        &data,
        &schema(),
        LevelRequirement::Optional,
        &EvalConfig::default(),
        &Whitespace,
    )
    .unwrap();
    assert!(r.strata.iter().all(|s| s.accuracy == 100.0));
    assert_eq!(r.macro_average, Some(100.0));
    assert_eq!(r.weighted_average, Some(100.0));
    assert!(r.misclassified.is_empty());
}

#[test]
fn stratified_accuracy_reproduces_published_row() {
    // Per-stratum correct counts out of 1000, in column order.
    let cells = [794, 837, 917, 1000, 1000, 1000];
    let mut data = Vec::new();
    let mut traces = Vec::new();
    for (&s, &ok) in Stratum::TAXONOMY_COLUMNS.iter().zip(&cells) {
        for k in 0..1000 {
            let p = pair(data.len(), s);
            let right = if s.label() == 1 { "1" } else { "0" };
            let wrong = if s.label() == 1 { "0" } else { "1" };
            traces.push(record(&p, answer_trace(if k < ok { right } else { wrong })));
            data.push(p);
        }
    }
    let r = evaluate(
        &traces,
        &data,
        &schema(),
        LevelRequirement::Optional,
        &EvalConfig::default(),
        &Whitespace,
    )
    .unwrap();
    let got: Vec<String> = r
        .strata
        .iter()
        .map(|s| format!("{:.1}", s.accuracy))
        .collect();
    assert_eq!(got, ["79.4", "83.7", "91.7", "100.0", "100.0", "100.0"]);
    assert_eq!(r.strata.iter().map(|s| s.total).sum::<usize>(), data.len());
    let correct: usize = r.strata.iter().map(|s| s.correct).sum();
    assert_eq!(
        r.weighted_average,
        Some(correct as f64 * 100.0 / data.len() as f64)
    );
    let macro_mean = cells.iter().map(|&c| c as f64 / 10.0).sum::<f64>() / 6.0;
    assert!((r.macro_average.unwrap() - macro_mean).abs() < 1e-9);
    assert_eq!(r.misclassified.len(), data.len() - correct);
}

#[test]
fn threshold_boundary_counts_as_positive() {
    let p = pair(0, Stratum::SameSpecies);
    let data = vec![p.clone()];
    let cfg = EvalConfig::default();
    let at = evaluate(
        &[record(&p, answer_trace("0.5000"))],
        &data,
        &schema(),
        LevelRequirement::Optional,
        &cfg,
        &Whitespace,
    )
    .unwrap();
    assert_eq!(at.strata[0].correct, 1);
    let below = evaluate(
        &[record(&p, answer_trace("0.4999"))],
        &data,
        &schema(),
        LevelRequirement::Optional,
        &cfg,
        &Whitespace,
    )
    .unwrap();
    assert_eq!(below.strata[0].correct, 0);
}

#[test]
fn unparseable_trace_is_incorrect() {
    let p = pair(0, Stratum::SameGenus);
    let r = evaluate(
        &[record(&p, "0".into())],
        std::slice::from_ref(&p),
        &schema(),
        LevelRequirement::Optional,
        &EvalConfig::default(),
        &Whitespace,
    )
    .unwrap();
    assert_eq!(r.strata[0].correct, 0);
    assert_eq!(r.format_adherence, 0.0);
    assert_eq!(r.misclassified[0].answer, None);
}

#[test]
fn input_errors() {
    let p = pair(0, Stratum::SameGenus);
    let stray = TraceRecord {
        pair_id: "nope".into(),
        trace: answer_trace("0"),
    };
    let cfg = EvalConfig::default();
    assert_eq!(
        evaluate(
            &[stray],
            std::slice::from_ref(&p),
            &schema(),
            LevelRequirement::Optional,
            &cfg,
            &Whitespace
        ),
        Err(EvalError::UnknownPair("nope".into()))
    );
    assert_eq!(
        evaluate(
            &[],
            &[p],
            &schema(),
            LevelRequirement::Optional,
            &cfg,
            &Whitespace
        ),
        Err(EvalError::Empty)
    );
    assert_eq!(
        format_adherence(
            std::iter::empty(),
            &schema(),
            LevelRequirement::Hierarchical
        ),
        Err(EvalError::Empty)
    );
    assert_eq!(length_stats(&[]), Err(EvalError::Empty));
    let bad = EvalConfig {
        decision_threshold: 1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn averaging_selection() {
    let p = pair(0, Stratum::SameGenus);
    let t = [record(&p, answer_trace("0"))];
    let run = |averaging| {
        let cfg = EvalConfig {
            averaging,
            ..Default::default()
        };
        evaluate(
            &t,
            std::slice::from_ref(&p),
            &schema(),
            LevelRequirement::Optional,
            &cfg,
            &Whitespace,
        )
        .unwrap()
    };
    let m = run(Averaging::Macro);
    assert!(m.macro_average.is_some() && m.weighted_average.is_none());
    let w = run(Averaging::Weighted);
    assert!(w.macro_average.is_none() && w.weighted_average.is_some());
}

fn levels(order: &str, family: Option<&str>, genus: Option<&str>, answer: &str) -> String {
    let mut s = format!("<think><order>{order}</order>");
    if let Some(f) = family {
        s += &format!("<family>{f}</family>");
    }
    if let Some(g) = genus {
        s += &format!("<genus>{g}</genus>");
    }
    s + &format!("</think><answer>{answer}</answer>")
}

#[test]
fn legal_early_termination_is_credited() {
    let p = pair(0, Stratum::SameOrder);
    let doc = parse_trace(&levels("O1; O1", Some("F1; F2"), None, "0"), &schema()).unwrap();
    assert_eq!(
        level_correctness(&doc, &p, &schema(), true),
        [true, true, true]
    );
    assert_eq!(
        level_correctness(&doc, &p, &schema(), false),
        [true, true, false]
    );
}

#[test]
fn wrong_terminating_level_earns_nothing_below() {
    let p = pair(0, Stratum::SameOrder);
    let doc = parse_trace(&levels("O1; O1", Some("F1; F9"), None, "0"), &schema()).unwrap();
    assert_eq!(
        level_correctness(&doc, &p, &schema(), true),
        [true, false, false]
    );
}

#[test]
fn omission_after_a_same_claim_does_not_parse() {
    let t = levels("O1; O1", Some("F1; F1"), None, "0");
    assert!(parse_trace_with(&t, &schema(), LevelRequirement::Hierarchical).is_err());
}

fn scored<'a>(data: &'a [PairSample], traces: &'a [String]) -> Vec<Scored<'a>> {
    data.iter()
        .zip(traces)
        .map(|(p, t)| Scored {
            pair: p,
            text: t,
            doc: parse_trace(t, &schema()).ok(),
        })
        .collect()
}

#[test]
fn intermediate_table_reproduces_engineered_averages() {
    // Two rows of 500; order/family/genus hits chosen so both averages land
    // on 97.9 / 90.1 / 86.9.
    let hits = [
        (Stratum::SameFamily, [490, 451, 435]),
        (Stratum::SameGenus, [489, 450, 434]),
    ];
    let mut data = Vec::new();
    let mut traces = Vec::new();
    for (s, h) in hits {
        for k in 0..500 {
            let p = pair(data.len(), s);
            let order = if k < h[0] { "O1; O1" } else { "O7; O7" };
            let family = if k < h[1] { "F1; F1" } else { "F7; F7" };
            let genus = match (s, k < h[2]) {
                (Stratum::SameFamily, true) => "G1; G2",
                (Stratum::SameGenus, true) => "G1; G1",
                _ => "G7; G7",
            };
            traces.push(levels(order, Some(family), Some(genus), "0"));
            data.push(p);
        }
    }
    let table =
        intermediate_accuracy(&scored(&data, &traces), &schema(), &EvalConfig::default()).unwrap();
    assert_eq!(table.columns, ["order", "family", "genus", "answer"]);
    let fmt = |v: &[f64]| v[..3].iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>();
    assert_eq!(fmt(&table.macro_average), ["97.9", "90.1", "86.9"]);
    assert_eq!(fmt(&table.weighted_average), ["97.9", "90.1", "86.9"]);
    let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Same Family", "Same Genus"]);
}

#[test]
fn visual_pairs_move_to_their_true_distance_row() {
    let mut v = pair(0, Stratum::SameClass);
    v.stratum = Stratum::Visual;
    v.visual = true;
    v.id = "v".into();
    let far = pair(1, Stratum::Visual);
    let data = vec![v, far, pair(2, Stratum::SameClass)];
    let traces = vec![
        levels("O1; O2", None, None, "0"),
        levels("O1; O3", None, None, "0"),
        levels("O1; O2", None, None, "0"),
    ];
    let on =
        intermediate_accuracy(&scored(&data, &traces), &schema(), &EvalConfig::default()).unwrap();
    let rows: Vec<(&str, usize)> = on.rows.iter().map(|r| (r.name.as_str(), r.pairs)).collect();
    assert_eq!(rows, [("Same Class", 2), ("Visual", 1)]);
    let cfg = EvalConfig {
        redistribute_visual: false,
        ..Default::default()
    };
    let off = intermediate_accuracy(&scored(&data, &traces), &schema(), &cfg).unwrap();
    let rows: Vec<(&str, usize)> = off
        .rows
        .iter()
        .map(|r| (r.name.as_str(), r.pairs))
        .collect();
    assert_eq!(rows, [("Same Class", 1), ("Visual", 2)]);
}

#[test]
fn binary_corpus_has_no_intermediate_table() {
    let bin = AttributeSchema::taxonomy(AttributeMode::Binary);
    assert_eq!(
        intermediate_accuracy(&[], &bin, &EvalConfig::default()),
        Err(EvalError::BinaryMode)
    );
}

#[test]
fn adherence_arithmetic() {
    let good = levels("O1; O2", None, None, "0");
    let all: Vec<&str> = vec![good.as_str(); 1000];
    assert_eq!(
        format_adherence(all, &schema(), LevelRequirement::Hierarchical).unwrap(),
        100.0
    );
    let mixed: Vec<&str> = (0..1000)
        .map(|i| if i < 993 { good.as_str() } else { "<think>" })
        .collect();
    let pct = format_adherence(mixed, &schema(), LevelRequirement::Hierarchical).unwrap();
    assert_eq!(format!("{pct:.2}"), "99.30");
}

#[test]
fn length_arithmetic() {
    let one = length_stats(&[121]).unwrap();
    assert_eq!(
        (one.min, format!("{:.2}", one.mean), one.max),
        (121, "121.00".to_string(), 121)
    );
    assert_eq!(
        format!("{:.2}", length_stats(&[1, 3]).unwrap().mean),
        "2.00"
    );
    // 121 + 537 + 22 × 318 + 327 = 7981 = 25 × 319.24
    let mut lengths = vec![121, 537, 327];
    lengths.extend(std::iter::repeat_n(318, 22));
    let texts: Vec<String> = lengths.iter().map(|&n| vec!["w"; n].join(" ")).collect();
    let counted = trace_lengths(texts.iter().map(String::as_str), &Whitespace);
    assert_eq!(counted, lengths);
    let s = length_stats(&counted).unwrap();
    assert_eq!(
        (s.min, format!("{:.2}", s.mean), s.max),
        (121, "319.24".to_string(), 537)
    );
}

/// Random corpus of hierarchical traces over all strata.
fn random_corpus(seed: u64, n: usize) -> (Vec<PairSample>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut traces = Vec::new();
    let pick = |rng: &mut ChaCha8Rng, pool: &[&str]| pool[rng.gen_range(0..pool.len())].to_string();
    for i in 0..n {
        let s = Stratum::TAXONOMY_COLUMNS[rng.gen_range(0..6)];
        let mut p = pair(i, s);
        if s == Stratum::Visual && rng.gen_bool(0.5) {
            p = pair(i, Stratum::SameClass);
            p.stratum = Stratum::Visual;
            p.visual = true;
        }
        let o = ["O1", "O2", "O3"];
        let f = ["F1", "F2", "F3"];
        let g = ["G1", "G2", "G3"];
        let mut t = String::from("<think>");
        for (tag, pool) in [("order", &o), ("family", &f), ("genus", &g)] {
            let (a, b) = (pick(&mut rng, pool), pick(&mut rng, pool));
            t += &format!("<{tag}>{a}; {b}</{tag}>");
            if a != b && rng.gen_bool(0.7) {
                break;
            }
        }
        t += &format!(
            "</think><answer>{}</answer>",
            if rng.gen_bool(0.5) { "1" } else { "0" }
        );
        traces.push(t);
        data.push(p);
    }
    (data, traces)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crediting_is_monotone(seed in any::<u64>()) {
        let (data, traces) = random_corpus(seed, 60);
        let sc = scored(&data, &traces);
        let with = intermediate_accuracy(&sc, &schema(), &EvalConfig::default()).unwrap();
        let cfg = EvalConfig { early_termination_credit: false, ..Default::default() };
        let without = intermediate_accuracy(&sc, &schema(), &cfg).unwrap();
        for (a, b) in with.rows.iter().zip(&without.rows) {
            prop_assert_eq!(&a.name, &b.name);
            for (x, y) in a.accuracy.iter().zip(&b.accuracy) {
                prop_assert!(x >= y);
            }
        }
    }

    #[test]
    fn redistribution_preserves_pair_count(seed in any::<u64>(), redistribute in any::<bool>()) {
        let (data, traces) = random_corpus(seed, 60);
        let cfg = EvalConfig { redistribute_visual: redistribute, ..Default::default() };
        let t = intermediate_accuracy(&scored(&data, &traces), &schema(), &cfg).unwrap();
        prop_assert_eq!(t.rows.iter().map(|r| r.pairs).sum::<usize>(), data.len());
        for r in &t.rows {
            prop_assert!(r.accuracy.iter().all(|&a| (0.0..=100.0).contains(&a)));
        }
    }

    #[test]
    fn evaluation_is_pure(seed in any::<u64>()) {
        let (data, traces) = random_corpus(seed, 40);
        let recs: Vec<TraceRecord> = data.iter().zip(&traces).map(|(p, t)| record(p, t.clone())).collect();
        let cfg = EvalConfig::default();
        let a = evaluate(&recs, &data, &schema(), LevelRequirement::Hierarchical, &cfg, &Whitespace).unwrap();
        let b = evaluate(&recs, &data, &schema(), LevelRequirement::Hierarchical, &cfg, &Whitespace).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        prop_assert_eq!(a.strata.iter().map(|s| s.total).sum::<usize>(), data.len());
        let correct: usize = a.strata.iter().map(|s| s.correct).sum();
        prop_assert_eq!(a.weighted_average, Some(correct as f64 * 100.0 / data.len() as f64));
    }
}
