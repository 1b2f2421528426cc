//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use deliberate_core::encode::{encode_design_matrix, ColumnEncoding};
use deliberate_core::evaluate::{
    evaluate_performance, fairness_report, query_personas, FairnessDefinition, FeatureFilter, Metric, PersonaQuery,
    Predicate,
};
use deliberate_core::fixtures;
use deliberate_core::schema::{Derivation, FeatureKind};
use deliberate_core::session::{
    DeliberationFile, EventKind, FeatureDecision, Inclusion, ModelRegistry, PromptConfig, Role, SessionError,
    SessionEvent, SessionSettings, SessionState,
};
use deliberate_core::trainer::{
    fit_linear, split, train_model, ModelVariant, SplitSpec, TrainOptions, TrainedModel, DEFAULT_RIDGE_EPS,
};
use deliberate_core::{ApplicantRecord, Dataset, Decision, FeatureSchema, FeatureSpec, Session, Value};
use deliberate_server::service::{AdvanceRequest, ConsensusRequest, CreateSessionRequest, SelectionRequest};
use deliberate_server::{Auth, Service, ServiceConfig};
use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- regression

fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
}

fn regression_recovery() -> Outcome {
    const N: usize = 200;
    const P: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_matrix(&mut rng, N, P);
    let beta: Vec<f64> = (0..P).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..N).map(|i| (0..P).map(|j| x[(i, j)] * beta[j]).sum()).collect();
    let start = Instant::now();
    let fit = fit_linear(&x, &y, DEFAULT_RIDGE_EPS).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let max_err = fit
        .weights
        .iter()
        .zip(&beta)
        .map(|(w, b)| (w - b).abs())
        .fold(0.0, f64::max);
    check(max_err < 1e-8, || format!("noiseless max |w-b| = {max_err:e}"))?;
    check(fit.intercept.abs() < 1e-8, || {
        format!("noiseless intercept {}", fit.intercept)
    })?;
    check(elapsed < Duration::from_secs(1), || format!("fit took {elapsed:?}"))?;

    let noise = Normal::new(0.0, 0.1).expect("valid sd");
    let mut trials_ok = 0;
    let mut coef_ok = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = gaussian_matrix(&mut rng, N, P);
        let beta: Vec<f64> = (0..P).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..N)
            .map(|i| (0..P).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + noise.sample(&mut rng))
            .collect();
        let fit = fit_linear(&x, &y, DEFAULT_RIDGE_EPS).map_err(|e| e.to_string())?;
        let se = fit.standard_errors.ok_or("no standard errors")?;
        let within = (0..P)
            .filter(|&j| (fit.weights[j] - beta[j]).abs() <= 3.0 * se[j])
            .count();
        coef_ok += within;
        if within == P {
            trials_ok += 1;
        }
    }
    check(trials_ok >= 95, || {
        format!("all coefficients within 3 SE on {trials_ok}/100 trials ({coef_ok}/1000 coefficients)")
    })?;
    Ok(format!(
        "noiseless max err {max_err:.1e} in {elapsed:?}; noisy: {trials_ok}/100 trials fully within 3 SE ({coef_ok}/1000 coefficients)"
    ))
}

// ------------------------------------------------------------ synthetic data

fn spec(name: &str, kind: FeatureKind, sensitive: bool) -> FeatureSpec {
    FeatureSpec {
        name: name.into(),
        kind,
        derivation: Derivation::Direct { column: name.into() },
        sensitive,
        unit: String::new(),
    }
}

fn decision(b: bool) -> Decision {
    if b {
        Decision::Admit
    } else {
        Decision::Reject
    }
}

fn record(id: usize, values: Vec<(&str, Value)>, outcome: Decision) -> ApplicantRecord {
    ApplicantRecord {
        synthetic_id: id as u32 + 1,
        values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        outcome,
        imputed: BTreeSet::new(),
    }
}

fn all_of(ds: &Dataset) -> BTreeSet<String> {
    ds.schema.feature_names().map(str::to_string).collect()
}

fn separable_data() -> Outcome {
    let schema = FeatureSchema::new(
        "y",
        vec![
            spec("x1", FeatureKind::Numeric, false),
            spec("x2", FeatureKind::Numeric, false),
            spec("x3", FeatureKind::Numeric, false),
        ],
    )
    .map_err(|e| e.to_string())?;
    let w = [0.9, -0.6, 0.4];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut records = Vec::new();
    while records.len() < 500 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - 0.1;
        if s.abs() < 0.2 {
            continue;
        }
        let values = vec![
            ("x1", Value::Numeric(x[0])),
            ("x2", Value::Numeric(x[1])),
            ("x3", Value::Numeric(x[2])),
        ];
        records.push(record(records.len(), values, decision(s > 0.0)));
    }
    let ds = Dataset {
        schema,
        records,
        dropped_count: 0,
    };
    let opts = TrainOptions::default();
    let sp = split(ds.len(), opts.split).map_err(|e| e.to_string())?;
    let m = train_model("sep", None, ModelVariant::AllFeatures, &ds, &all_of(&ds), &sp, &opts)
        .map_err(|e| e.to_string())?;
    let report = evaluate_performance(&m, &ds, &sp.test).map_err(|e| e.to_string())?;
    let acc = report.accuracy.value().ok_or("accuracy undefined")?;
    check(acc >= 0.95, || format!("test accuracy {acc:.4}"))?;
    Ok(format!("test accuracy {acc:.4} on {} held-out records", report.n))
}

// ------------------------------------------------------- oracle equivalence

const GROUPS: [&str; 3] = ["p", "q", "r"];

fn oracle_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let schema = FeatureSchema::new(
        "y",
        vec![
            spec("x", FeatureKind::Numeric, false),
            spec("b", FeatureKind::Binary, true),
            spec(
                "g",
                FeatureKind::Categorical {
                    levels: GROUPS.iter().map(|s| s.to_string()).collect(),
                },
                true,
            ),
        ],
    )
    .expect("valid schema");
    let n = rng.random_range(20..=50);
    let records = (0..n)
        .map(|i| {
            let values = vec![
                ("x", Value::Numeric(f64::from(rng.random_range(-5i32..=5)))),
                ("b", Value::Binary(rng.random())),
                ("g", Value::Level(GROUPS[rng.random_range(0..3)].to_string())),
            ];
            record(i, values, decision(rng.random()))
        })
        .collect();
    Dataset {
        schema,
        records,
        dropped_count: 0,
    }
}

/// Score recomputed from the stored weights and encoding constants.
fn hand_score(m: &TrainedModel, r: &ApplicantRecord) -> f64 {
    let mut sum = 0.0;
    for (column, w) in m.encoding.columns.iter().zip(&m.weights) {
        let v = r.value(&column.feature).expect("complete record");
        let x = match (&column.encoding, v) {
            (ColumnEncoding::Standardized { mean, sd }, Value::Numeric(x)) => (x - mean) / sd,
            (ColumnEncoding::Binary, Value::Binary(b)) => f64::from(u8::from(*b)),
            (ColumnEncoding::Indicator { level }, Value::Level(l)) => f64::from(u8::from(l == level)),
            other => panic!("unexpected cell {other:?}"),
        };
        sum += w.weight * x;
    }
    m.intercept + sum
}

fn oracle_trial(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = oracle_dataset(&mut rng);
    let opts = TrainOptions {
        split: SplitSpec::new(0.7, rng.random()).expect("valid ratio"),
        ..TrainOptions::default()
    };
    let sp = split(ds.len(), opts.split).map_err(|e| e.to_string())?;
    let m =
        train_model("m", None, ModelVariant::AllFeatures, &ds, &all_of(&ds), &sp, &opts).map_err(|e| e.to_string())?;
    let predicted: Vec<Decision> = ds
        .records
        .iter()
        .map(|r| decision(hand_score(&m, r) >= m.threshold))
        .collect();

    // Confusion counts and metrics.
    let test = &sp.test;
    let count = |p: Decision, a: Decision| {
        test.iter()
            .filter(|&&i| predicted[i] == p && ds.records[i].outcome == a)
            .count()
    };
    let (tp, fp) = (
        count(Decision::Admit, Decision::Admit),
        count(Decision::Admit, Decision::Reject),
    );
    let (tn, fn_) = (
        count(Decision::Reject, Decision::Reject),
        count(Decision::Reject, Decision::Admit),
    );
    let perf = evaluate_performance(&m, &ds, test).map_err(|e| e.to_string())?;
    let cm = perf.matrix;
    check((cm.tp, cm.fp, cm.tn, cm.fn_) == (tp, fp, tn, fn_), || {
        format!("seed {seed}: confusion {cm:?} vs oracle {:?}", (tp, fp, tn, fn_))
    })?;
    let ratio = |a: usize, b: usize| {
        if b == 0 {
            Metric::Undefined
        } else {
            Metric::Value(a as f64 / b as f64)
        }
    };
    check(perf.accuracy == ratio(tp + tn, test.len()), || {
        format!("seed {seed}: accuracy")
    })?;
    check(perf.precision == ratio(tp, tp + fp), || {
        format!("seed {seed}: precision")
    })?;
    check(perf.recall == ratio(tp, tp + fn_), || format!("seed {seed}: recall"))?;

    // Group rates under both definitions.
    for feature in ["b", "g"] {
        for def in [
            FairnessDefinition::DemographicParity,
            FairnessDefinition::EqualOpportunity,
        ] {
            let report = fairness_report(def, &m, &ds, feature, test).map_err(|e| e.to_string())?;
            let mut oracle: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for &i in test {
                let r = &ds.records[i];
                if def == FairnessDefinition::EqualOpportunity && r.outcome != Decision::Admit {
                    continue;
                }
                let group = match r.value(feature).expect("present") {
                    Value::Binary(true) => "yes".to_string(),
                    Value::Binary(false) => "no".to_string(),
                    Value::Level(l) => l.clone(),
                    other => return Err(format!("unexpected group value {other:?}")),
                };
                let e = oracle.entry(group).or_default();
                e.0 += 1;
                e.1 += usize::from(predicted[i] == Decision::Admit);
            }
            let got: BTreeMap<String, (usize, usize, f64)> = report
                .per_group
                .iter()
                .map(|g| (g.group.clone(), (g.n, g.admitted, g.rate)))
                .collect();
            let want: BTreeMap<String, (usize, usize, f64)> = oracle
                .iter()
                .map(|(k, &(n, a))| (k.clone(), (n, a, a as f64 / n as f64)))
                .collect();
            check(got == want, || {
                format!("seed {seed}: {def} on {feature}: {got:?} vs {want:?}")
            })?;
            let rates: Vec<f64> = want.values().map(|v| v.2).collect();
            let spread = if rates.is_empty() {
                0.0
            } else {
                rates.iter().copied().fold(f64::MIN, f64::max) - rates.iter().copied().fold(f64::MAX, f64::min)
            };
            check(report.max_disparity == spread, || {
                format!("seed {seed}: disparity {} vs {spread}", report.max_disparity)
            })?;
        }
    }

    // Persona query with paging.
    let model_filter: Option<bool> = rng.random_bool(0.5).then(|| rng.random());
    let actual_filter: Option<bool> = rng.random_bool(0.5).then(|| rng.random());
    let group: Option<usize> = rng.random_bool(0.5).then(|| rng.random_range(0..3));
    let range: Option<(i32, i32)> = rng
        .random_bool(0.5)
        .then(|| (rng.random_range(-5..=5), rng.random_range(0..=6)));
    let mut filters = Vec::new();
    if let Some(g) = group {
        filters.push(FeatureFilter {
            feature: "g".into(),
            predicate: Predicate::Level {
                level: GROUPS[g].into(),
            },
        });
    }
    if let Some((lo, w)) = range {
        filters.push(FeatureFilter {
            feature: "x".into(),
            predicate: Predicate::Range {
                min: Some(f64::from(lo)),
                max: Some(f64::from(lo + w)),
            },
        });
    }
    let page_size = rng.random_range(1..=12);
    let mut query = PersonaQuery {
        model_decision: model_filter.map(decision),
        actual_decision: actual_filter.map(decision),
        filters,
        page_size,
        cursor: 0,
    };
    let mut expected: Vec<(f64, u32)> = Vec::new();
    for (i, r) in ds.records.iter().enumerate() {
        let x = r.value("x").and_then(Value::as_f64).expect("numeric x");
        let keep = model_filter.is_none_or(|d| predicted[i] == decision(d))
            && actual_filter.is_none_or(|d| r.outcome == decision(d))
            && group.is_none_or(|g| r.value("g").and_then(Value::level) == Some(GROUPS[g]))
            && range.is_none_or(|(lo, w)| x >= f64::from(lo) && x <= f64::from(lo + w));
        if keep {
            expected.push((hand_score(&m, r), r.synthetic_id));
        }
    }
    expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut got = Vec::new();
    loop {
        let page = query_personas(&m, &ds, &query).map_err(|e| e.to_string())?;
        check(page.total == expected.len(), || format!("seed {seed}: persona total"))?;
        check(page.items.len() <= page_size, || format!("seed {seed}: page overflow"))?;
        for p in &page.items {
            let i = p.synthetic_id as usize - 1;
            check(
                p.model_decision == predicted[i] && p.actual_decision == ds.records[i].outcome,
                || format!("seed {seed}: persona {} decisions", p.synthetic_id),
            )?;
        }
        got.extend(page.items.iter().map(|p| p.synthetic_id));
        match page.next_cursor {
            Some(c) => query.cursor = c,
            None => break,
        }
    }
    let ids: Vec<u32> = expected.iter().map(|e| e.1).collect();
    check(got == ids, || format!("seed {seed}: persona order {got:?} vs {ids:?}"))
}

fn oracle_equivalence() -> Outcome {
    for seed in 0..1000 {
        oracle_trial(seed)?;
    }
    Ok("1000 trials: confusion, metrics, both group-rate definitions, persona pages".into())
}

// ------------------------------------------------------------------ splits

fn split_contract() -> Outcome {
    for n in [10usize, 100, 2207] {
        let mut seen = Vec::new();
        for seed in 0..20u64 {
            let spec = SplitSpec::new(0.7, seed).map_err(|e| e.to_string())?;
            let s = split(n, spec).map_err(|e| e.to_string())?;
            check(s.train.len() == n * 7 / 10, || {
                format!("n={n}: |train| = {}", s.train.len())
            })?;
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            check(all == (0..n).collect::<Vec<_>>(), || {
                format!("n={n} seed={seed}: not a partition")
            })?;
            check(split(n, spec).map_err(|e| e.to_string())? == s, || {
                format!("n={n} seed={seed}: not deterministic")
            })?;
            check(!seen.contains(&s), || {
                format!("n={n} seed={seed}: repeats an earlier seed")
            })?;
            seen.push(s);
        }
    }
    Ok("n in {10, 100, 2207} x 20 seeds".into())
}

// ------------------------------------------------------------- sessions

fn fixture_dataset() -> Dataset {
    fixtures::dataset().expect("bundled fixture ingests")
}

fn new_session(ds: &Dataset, participants: &[&str]) -> Session {
    let roster: Vec<String> = participants.iter().map(|s| s.to_string()).collect();
    Session::create(
        "s",
        "d",
        Some(ds),
        &roster,
        PromptConfig::default(),
        SessionSettings::default(),
    )
    .expect("valid session")
}

fn pick(participant: &str, feature: &str, include: bool) -> FeatureDecision {
    FeatureDecision {
        participant_id: participant.into(),
        feature: feature.into(),
        decision: if include {
            Inclusion::Include
        } else {
            Inclusion::Exclude
        },
        unsure: false,
        reason: String::new(),
    }
}

/// Student and faculty inclusion counts per feature, as printed.
const REFERENCE_COUNTS: [(&str, u32, u32, u32, u32); 18] = [
    ("GRE Verbal %", 7, 78, 4, 57),
    ("GRE Quant %", 6, 67, 4, 57),
    ("GRE Analytical %", 6, 67, 4, 57),
    ("Tier of Undergrad Inst.", 4, 44, 6, 86),
    ("GPA", 8, 89, 6, 86),
    ("Master's Held", 1, 11, 6, 86),
    ("Doctorate Held", 1, 11, 3, 43),
    ("Special Degree Held", 1, 11, 3, 43),
    ("Awards: Arts", 7, 78, 3, 43),
    ("Awards: Scholastic", 9, 100, 6, 86),
    ("Awards: Research", 8, 89, 6, 86),
    ("Awards: Service", 6, 67, 5, 71),
    ("Awards: Leadership", 7, 78, 4, 57),
    ("Awards: Competition", 7, 78, 5, 71),
    ("Gender", 1, 11, 4, 57),
    ("Ethnicity", 4, 44, 5, 71),
    ("First Generation", 8, 89, 7, 100),
    ("Work Experience", 9, 100, 7, 100),
];

fn reference_counts_replay() -> Outcome {
    let ds = fixture_dataset();
    let mut checked = 0;
    for (cohort, size) in [("student", 9usize), ("faculty", 7)] {
        let ids: Vec<String> = (0..size).map(|i| format!("{cohort}{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut s = new_session(&ds, &refs);
        s.advance(SessionEvent::StartExploration, Role::Facilitator)
            .map_err(|e| e.to_string())?;
        s.advance(SessionEvent::StartSelection, Role::Facilitator)
            .map_err(|e| e.to_string())?;
        for &(feature, sc, _, fc, _) in &REFERENCE_COUNTS {
            let includes = if cohort == "student" { sc } else { fc } as usize;
            for (i, pid) in ids.iter().enumerate() {
                s.record_selection(pick(pid, feature, i < includes))
                    .map_err(|e| e.to_string())?;
            }
        }
        for &(feature, _, sp, _, fp) in &REFERENCE_COUNTS {
            let want = if cohort == "student" { sp } else { fp };
            let got = s.tally(feature).map_err(|e| e.to_string())?.include_percent;
            check(got == want, || format!("{cohort} {feature}: {got}% vs printed {want}%"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} printed percentages reproduced"))
}

fn drive_to(ds: &Dataset, target: SessionState) -> Session {
    let mut s = new_session(ds, &["a", "b", "c"]);
    let features = s.features.clone();
    let step = |s: &mut Session, e: SessionEvent| {
        s.advance(e, Role::Facilitator).expect("documented path");
    };
    let order = SessionState::ALL;
    let reached = |s: &Session| s.state == target;
    if reached(&s) {
        return s;
    }
    step(&mut s, SessionEvent::StartExploration);
    if reached(&s) {
        return s;
    }
    step(&mut s, SessionEvent::StartSelection);
    for p in ["a", "b", "c"] {
        for (i, f) in features.iter().enumerate() {
            s.record_selection(pick(p, f, i % 2 == 0 || p == "a"))
                .expect("selection");
        }
    }
    for (event, next) in [
        (SessionEvent::StartDeliberation, order[3]),
        (
            SessionEvent::FinalizeGroup {
                tiebreaks: BTreeMap::new(),
                facilitator: "f".into(),
            },
            order[4],
        ),
        (SessionEvent::ModelsTrained { registry: registry() }, order[5]),
        (SessionEvent::StartEvaluation, order[6]),
        (SessionEvent::Complete, order[7]),
    ] {
        if reached(&s) {
            return s;
        }
        step(&mut s, event);
        assert_eq!(s.state, next);
    }
    s
}

fn registry() -> ModelRegistry {
    ModelRegistry {
        all_features: Some("all".into()),
        group: Some("group".into()),
        individual: ["a", "b", "c"]
            .iter()
            .map(|p| (p.to_string(), format!("ind-{p}")))
            .collect(),
    }
}

fn event_of(kind: EventKind) -> SessionEvent {
    SessionEvent::simple(kind).unwrap_or_else(|| match kind {
        EventKind::FinalizeGroup => SessionEvent::FinalizeGroup {
            tiebreaks: BTreeMap::new(),
            facilitator: "f".into(),
        },
        _ => SessionEvent::ModelsTrained { registry: registry() },
    })
}

fn state_machine() -> Outcome {
    let ds = fixture_dataset();
    let documented: BTreeSet<(SessionState, EventKind)> = EventKind::ALL.iter().map(|k| (k.edge().0, *k)).collect();
    let mut pairs = 0;
    let mut edges = 0;
    for state in SessionState::ALL {
        let base = drive_to(&ds, state);
        for kind in EventKind::ALL {
            pairs += 1;
            let mut s = base.clone();
            let result = s.advance(event_of(kind), Role::Facilitator);
            if documented.contains(&(state, kind)) {
                let to = result.map_err(|e| format!("{state} --{kind}-> failed: {e}"))?;
                check(to == kind.edge().1 && s.version == base.version + 1, || {
                    format!("{state} --{kind}-> {to}")
                })?;
                edges += 1;
                if kind.facilitator_only() {
                    let mut p = base.clone();
                    let denied = p.advance(event_of(kind), Role::Participant);
                    check(matches!(denied, Err(SessionError::Forbidden(_))) && p == base, || {
                        format!("participant allowed {kind}")
                    })?;
                }
            } else {
                check(
                    matches!(result, Err(SessionError::IllegalTransition { .. })) && s == base,
                    || format!("{state} accepted {kind}"),
                )?;
            }
        }
    }
    check(edges == 8, || format!("{edges} documented edges succeeded"))?;

    // A 1-1 split must be broken by the facilitator.
    let mut tied = new_session(&ds, &["a", "b"]);
    tied.advance(SessionEvent::StartExploration, Role::Facilitator)
        .map_err(|e| e.to_string())?;
    tied.advance(SessionEvent::StartSelection, Role::Facilitator)
        .map_err(|e| e.to_string())?;
    for f in tied.features.clone() {
        tied.record_selection(pick("a", &f, true)).map_err(|e| e.to_string())?;
        tied.record_selection(pick("b", &f, f != "GPA"))
            .map_err(|e| e.to_string())?;
    }
    tied.advance(SessionEvent::StartDeliberation, Role::Facilitator)
        .map_err(|e| e.to_string())?;
    let before = tied.clone();
    let blocked = tied.finalize_group(BTreeMap::new(), "f");
    check(blocked.is_err() && tied == before, || {
        "tie finalized without a tiebreak".into()
    })?;
    let records = tied
        .finalize_group(BTreeMap::from([("GPA".to_string(), Inclusion::Exclude)]), "f")
        .map_err(|e| e.to_string())?;
    check(
        tied.state == SessionState::GroupFinalized && !tied.group_features().contains(&"GPA".to_string()),
        || format!("tiebreak not applied: {records:?}"),
    )?;
    Ok(format!(
        "{pairs} (state, event) pairs; {edges} edges succeed; tie blocks finalize"
    ))
}

const REASON_ALPHABET: &[&str] = &["a", "Z", " ", ",", "\"", "\n", "\r\n", ";", "é", "0", "'"];

fn random_reason(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..12);
    (0..len)
        .map(|_| *REASON_ALPHABET.choose(rng).expect("non-empty"))
        .collect()
}

fn flat_file_round_trip() -> Outcome {
    let ds = fixture_dataset();
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut s = new_session(&ds, &refs);
        check(s.features.len() == 18, || format!("{} features", s.features.len()))?;
        s.advance(SessionEvent::StartExploration, Role::Facilitator)
            .map_err(|e| e.to_string())?;
        s.advance(SessionEvent::StartSelection, Role::Facilitator)
            .map_err(|e| e.to_string())?;
        for p in &ids {
            for f in s.features.clone() {
                let mut d = pick(p, &f, rng.random());
                d.unsure = rng.random_bool(0.3);
                d.reason = random_reason(&mut rng);
                s.record_selection(d).map_err(|e| e.to_string())?;
            }
        }
        s.advance(SessionEvent::StartDeliberation, Role::Facilitator)
            .map_err(|e| e.to_string())?;
        let file = s.export_deliberation_file().map_err(|e| e.to_string())?;
        let csv = file.to_csv();
        let imported = DeliberationFile::from_csv(&csv).map_err(|e| format!("seed {seed}: {e}"))?;
        check(imported == file && imported.to_csv() == csv, || {
            format!("seed {seed}: CSV round trip differs")
        })?;
        let json = file.to_json();
        let from_json = DeliberationFile::from_json(&json).map_err(|e| e.to_string())?;
        check(from_json == file && from_json.to_csv() == csv, || {
            format!("seed {seed}: JSON mirror differs")
        })?;
        check(
            s.export_deliberation_file().map_err(|e| e.to_string())?.to_csv() == csv,
            || format!("seed {seed}: export not deterministic"),
        )?;
    }
    Ok("25 randomized 18-feature, 5-participant sessions".into())
}

// ------------------------------------------------------------ persistence

enum Op {
    Advance(&'static str),
    Select(FeatureDecision),
    Finalize,
    Train,
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = ServiceConfig::new(dir.path().join("store"));
    config.snapshot_every = 8;
    let open = |c: &ServiceConfig| Service::open(c.clone()).map_err(|e| format!("{}: {}", e.code, e.message));
    let events = |s: &Service| s.health()["events"].as_u64().unwrap_or(0);
    let auth = Auth::Local;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let participants = ["p1", "p2", "p3"];
    let features: Vec<String> = fixtures::schema().feature_names().map(str::to_string).collect();
    let mut script = vec![Op::Advance("start_exploration"), Op::Advance("start_selection")];
    let random_pick = |p: &str, f: &str, rng: &mut ChaCha8Rng| {
        let mut d = pick(p, f, rng.random_bool(0.6));
        d.unsure = rng.random_bool(0.2);
        d.reason = random_reason(rng);
        Op::Select(d)
    };
    for p in participants {
        for f in &features {
            script.push(random_pick(p, f, &mut rng));
        }
    }
    // Two setup events plus nine from the closing steps (training commits
    // two) bring the log to 100.
    while script.len() < 100 - 2 - 9 {
        let p = *participants.choose(&mut rng).expect("non-empty");
        let f = features.choose(&mut rng).expect("non-empty").clone();
        script.push(random_pick(p, &f, &mut rng));
    }
    script.push(Op::Advance("start_deliberation"));
    script.push(Op::Advance("rollback"));
    script.push(random_pick("p1", &features[0], &mut rng));
    script.push(Op::Advance("start_deliberation"));
    script.push(Op::Finalize);
    script.push(Op::Train);
    script.push(Op::Advance("start_evaluation"));
    script.push(Op::Advance("complete"));

    let mut service = open(&config)?;
    let mut restarts = 0;
    let mut restart = |service: Service| -> Result<Service, String> {
        let before = service.state();
        let seq = events(&service);
        drop(service);
        let reopened = open(&config)?;
        check(reopened.state() == before, || {
            format!("state differs after restart at event {seq}")
        })?;
        check(events(&reopened) == seq, || {
            format!("event count {} vs {seq}", events(&reopened))
        })?;
        restarts += 1;
        Ok(reopened)
    };
    service
        .register_dataset(&auth, "default", fixture_dataset())
        .map_err(|e| e.message)?;
    service = restart(service)?;
    service
        .create_session(
            &auth,
            CreateSessionRequest {
                session_id: Some("s".into()),
                participants: participants.iter().map(|p| p.to_string()).collect(),
                ..CreateSessionRequest::default()
            },
        )
        .map_err(|e| e.message)?;
    service = restart(service)?;
    for op in script {
        let result = match op {
            Op::Advance(event) => service.advance(
                &auth,
                "s",
                AdvanceRequest {
                    event: event.into(),
                    expected_version: None,
                },
            ),
            Op::Select(d) => service.record_selections(
                &auth,
                "s",
                SelectionRequest {
                    expected_version: None,
                    selections: vec![d],
                },
            ),
            Op::Finalize => service.finalize(&auth, "s", ConsensusRequest::default()),
            Op::Train => service.train_blocking(&auth, "s"),
        };
        result.map_err(|e| format!("{}: {}", e.code, e.message))?;
        service = restart(service)?;
    }
    let total = events(&service);
    check(total == 100, || format!("script produced {total} events"))?;
    let state = service.state();
    check(state.sessions["s"].state == SessionState::Completed, || {
        "session did not complete".into()
    })?;
    Ok(format!(
        "{total} events, restart after each of {restarts} commands (training commits two events), state identical each time"
    ))
}

// ---------------------------------------------------------- standardization

fn standardization() -> Outcome {
    let ds = fixture_dataset();
    let sp = split(ds.len(), SplitSpec::default()).map_err(|e| e.to_string())?;
    let (matrix, map) = encode_design_matrix(&ds, &all_of(&ds), &sp.train).map_err(|e| e.to_string())?;
    let mut worst_mean: f64 = 0.0;
    let mut worst_sd: f64 = 0.0;
    let mut standardized = 0;
    for (j, column) in map.columns.iter().enumerate() {
        if !matches!(column.encoding, ColumnEncoding::Standardized { .. }) {
            continue;
        }
        standardized += 1;
        let values: Vec<f64> = sp.train.iter().map(|&i| matrix[(i, j)]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_sd = worst_sd.max((sd - 1.0).abs());
    }
    check(standardized > 0, || "no standardized columns".into())?;
    check(worst_mean < 1e-9 && worst_sd < 1e-9, || {
        format!("max |mean| {worst_mean:e}, max |sd-1| {worst_sd:e}")
    })?;

    // Second column is an exact affine copy of the first.
    let schema = FeatureSchema::new(
        "y",
        vec![
            spec("u", FeatureKind::Numeric, false),
            spec("u_twice", FeatureKind::Numeric, false),
            spec("v", FeatureKind::Numeric, false),
        ],
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records = (0..60)
        .map(|i| {
            let u: f64 = rng.random_range(0.0..10.0);
            let v: f64 = rng.random_range(0.0..10.0);
            let values = vec![
                ("u", Value::Numeric(u)),
                ("u_twice", Value::Numeric(2.0 * u + 1.0)),
                ("v", Value::Numeric(v)),
            ];
            record(i, values, decision(u + v > 10.0))
        })
        .collect();
    let collinear = Dataset {
        schema,
        records,
        dropped_count: 0,
    };
    let opts = TrainOptions::default();
    let sp = split(collinear.len(), opts.split).map_err(|e| e.to_string())?;
    let m = train_model(
        "c",
        None,
        ModelVariant::AllFeatures,
        &collinear,
        &all_of(&collinear),
        &sp,
        &opts,
    )
    .map_err(|e| e.to_string())?;
    let ridge = m.ridge_fallback.ok_or("ridge fallback did not trigger")?;
    let meta = serde_json::to_value(&m).map_err(|e| e.to_string())?;
    check(meta["ridge_fallback"].as_f64() == Some(ridge), || {
        "ridge term missing from metadata".into()
    })?;
    Ok(format!(
        "{standardized} columns: max |mean| {worst_mean:.1e}, max |sd-1| {worst_sd:.1e}; collinear fixture used ridge {ridge:e} (condition {:.1e})",
        m.condition
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("regression recovery", regression_recovery),
        ("separable data sanity", separable_data),
        ("oracle equivalence", oracle_equivalence),
        ("split contract", split_contract),
        ("reference counts replay", reference_counts_replay),
        ("state machine exhaustion", state_machine),
        ("flat-file round trip", flat_file_round_trip),
        ("persistence", persistence),
        ("standardization and ridge fallback", standardization),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", 9 - failed, 9);
    if failed > 0 {
        std::process::exit(1);
    }
}
