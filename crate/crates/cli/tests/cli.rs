use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use deliberate_core::evaluate::{fairness_report, FairnessDefinition};
use deliberate_core::fixtures;
use deliberate_server::{prepare, router, ServeConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cli(storage: &Path, args: &[&str]) -> Run {
    let mut argv = vec![
        "deliberate".to_string(),
        "--storage".into(),
        storage.display().to_string(),
    ];
    argv.extend(args.iter().map(|a| a.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = deliberate_cli::run(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn ok(storage: &Path, args: &[&str]) -> String {
    let r = cli(storage, args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.err);
    r.out
}

fn ok_json(storage: &Path, args: &[&str]) -> Value {
    let mut full = vec!["--format", "json"];
    full.extend_from_slice(args);
    serde_json::from_str(&ok(storage, &full)).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [
            ("applicants.csv", fixtures::APPLICANTS),
            ("schema.toml", fixtures::SCHEMA),
            ("tiers.csv", fixtures::TIERS),
            ("awards.csv", fixtures::AWARDS),
        ] {
            std::fs::write(dir.path().join(name), text).unwrap();
        }
        Fixture { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn storage(&self) -> PathBuf {
        self.dir.path().join("store")
    }

    fn ingest(&self) -> Value {
        ok_json(
            &self.storage(),
            &[
                "ingest",
                "--data",
                &self.path("applicants.csv"),
                "--schema",
                &self.path("schema.toml"),
                "--tiers",
                &self.path("tiers.csv"),
                "--awards",
                &self.path("awards.csv"),
            ],
        )
    }

    /// Ingests, runs a three-person session through consensus and training,
    /// and returns the session id.
    fn trained_session(&self) -> String {
        self.ingest();
        let s = self.storage();
        let created = ok_json(&s, &["session", "create", "--participants", "ana,ben,cy", "--id", "s1"]);
        assert_eq!(created["session"]["state"], "Created");
        ok(
            &s,
            &["session", "advance", "--session", "s1", "--event", "start_exploration"],
        );
        ok(
            &s,
            &["session", "advance", "--session", "s1", "--event", "start_selection"],
        );
        let schema = fixtures::schema();
        let features: Vec<&str> = schema.feature_names().collect();
        let mut decisions = Vec::new();
        for (p, who) in ["ana", "ben", "cy"].into_iter().enumerate() {
            for (i, f) in features.iter().enumerate() {
                let include = i % 2 == 0 || p == 0;
                decisions.push(json!({
                    "participant_id": who,
                    "feature": f,
                    "decision": if include { "include" } else { "exclude" },
                    "reason": "because, \"quoted\"\nand more",
                }));
            }
        }
        let file = self.dir.path().join("selections.json");
        std::fs::write(&file, serde_json::to_string(&decisions).unwrap()).unwrap();
        ok(
            &s,
            &[
                "session",
                "select",
                "--session",
                "s1",
                "--file",
                &file.display().to_string(),
            ],
        );
        ok(
            &s,
            &["session", "advance", "--session", "s1", "--event", "start_deliberation"],
        );
        self.check_export(&features);
        let finalized = ok_json(&s, &["consensus", "--session", "s1"]);
        assert_eq!(finalized["state"], "GroupFinalized");
        let trained = ok_json(&s, &["train", "--session", "s1"]);
        assert_eq!(trained["status"], "done", "{trained}");
        "s1".into()
    }
}

#[test]
fn ingest_prints_summary() {
    let fx = Fixture::new();
    let summary = fx.ingest();
    assert_eq!(summary["features"], 18);
    assert!(summary["records"].as_u64().unwrap() > 0);
    let table = ok(&fx.storage(), &["session", "list"]);
    assert!(table.starts_with("session_id"), "{table}");
}

#[test]
fn fairness_json_matches_http_payload_bytes() {
    let fx = Fixture::new();
    let session = fx.trained_session();
    let s = fx.storage();
    let models = ok_json(&s, &["report", "models", "--session", &session]);
    let model_id = models["registry"]["group"].as_str().unwrap().to_string();

    let cli_json = ok(
        &s,
        &[
            "--format",
            "json",
            "report",
            "fairness",
            "--model",
            &model_id,
            "--feature",
            "Gender",
        ],
    );
    let table = ok(&s, &["report", "fairness", "--model", &model_id, "--feature", "Gender"]);

    let mut config = ServeConfig::new(&s);
    config.admin_token = Some("tok".into());
    let service = prepare(&config).unwrap();

    // Same numbers straight from the evaluation module.
    let state = service.state();
    let model = &state.models[&model_id];
    let dataset = &state.datasets[&state.sessions[&session].dataset_id];
    let report = fairness_report(
        FairnessDefinition::DemographicParity,
        model,
        dataset,
        "Gender",
        &model.split.test,
    )
    .unwrap();
    for g in &report.per_group {
        let rate = format!("{:.4}", g.rate);
        let rate = rate.trim_end_matches('0').trim_end_matches('.');
        let line = table
            .lines()
            .find(|l| l.split("  ").next() == Some(g.group.as_str()))
            .unwrap_or_else(|| panic!("no row for {}: {table}", g.group));
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(
            cells[cells.len() - 3..],
            [g.n.to_string().as_str(), &g.admitted.to_string(), rate],
            "{line}"
        );
    }

    let app = router(Arc::clone(&service));
    let body = tokio::runtime::Builder::new_current_thread()
        .build()
        .unwrap()
        .block_on(async {
            let req = Request::builder()
                .uri(format!("/models/{model_id}/fairness?feature=Gender"))
                .header("authorization", "Bearer tok")
                .body(Body::empty())
                .unwrap();
            let resp = app.oneshot(req).await.unwrap();
            String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap()
        });
    let expected = format!("{{\"status\":\"ok\",\"payload\":{}}}", cli_json.trim_end_matches('\n'));
    assert_eq!(body, expected);
}

#[test]
fn reports_and_exports() {
    let fx = Fixture::new();
    let session = fx.trained_session();
    let s = fx.storage();
    let models = ok_json(&s, &["report", "models", "--session", &session]);
    let all = models["registry"]["all_features"].as_str().unwrap().to_string();
    let group = models["registry"]["group"].as_str().unwrap().to_string();

    let perf = ok_json(&s, &["report", "performance", "--model", &all]);
    let m = &perf["matrix"];
    let total = ["tp", "fp", "tn", "fn"]
        .iter()
        .map(|k| m[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(Some(total), perf["n"].as_u64());
    assert!(ok(&s, &["report", "performance", "--model", &all]).contains("accuracy"));

    let cmp = ok(&s, &["report", "weights", "--model", &all, "--compare", &group]);
    assert!(cmp.contains("absent"), "{cmp}");

    let page = ok_json(
        &s,
        &[
            "report",
            "personas",
            "--model",
            &all,
            "--filter",
            "Gender=Female",
            "--page-size",
            "5",
        ],
    );
    assert!(page["items"].as_array().unwrap().len() <= 5);
    let csv = ok(&s, &["--format", "csv", "report", "personas", "--model", &all]);
    assert!(
        csv.starts_with("synthetic_id,model,score,confidence,actual,GRE Verbal %"),
        "{csv}"
    );

    let r = cli(
        &s,
        &[
            "report",
            "personas",
            "--model",
            &all,
            "--filter",
            "Gender=Female",
            "--filter",
            "GPA:3..",
            "--filter",
            "Ethnicity=White",
        ],
    );
    assert_eq!(r.code, 1);
    assert!(r.err.contains("TooManyFilters"), "{}", r.err);
}

impl Fixture {
    fn check_export(&self, features: &[&str]) {
        let s = self.storage();
        let export = ok(&s, &["export-deliberation", "--session", "s1"]);
        let mut rows = csv_rows(&export);
        let header = rows.remove(0);
        assert_eq!(header.len(), 1 + 3 * 3);
        assert_eq!(header[..4], ["feature", "ana_decision", "ana_unsure", "ana_reason"]);
        assert_eq!(rows.len(), features.len());
        assert_eq!(rows[0][3], "because, \"quoted\"\nand more");
        assert_eq!(
            ok(&s, &["--format", "csv", "export-deliberation", "--session", "s1"]),
            export
        );

        let out = self.dir.path().join("d.json");
        let r = cli(
            &s,
            &[
                "--format",
                "json",
                "export-deliberation",
                "--session",
                "s1",
                "--out",
                &out.display().to_string(),
            ],
        );
        assert_eq!(r.code, 0, "{}", r.err);
        assert!(r.out.is_empty());
        let v: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
        assert!(v.is_object());
    }
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn reset_requires_confirm() {
    let fx = Fixture::new();
    fx.ingest();
    let s = fx.storage();
    ok(&s, &["session", "create", "--participants", "ana", "--id", "keep"]);
    let r = cli(&s, &["reset"]);
    assert_eq!(r.code, 2);
    assert!(r.err.contains("UsageError"), "{}", r.err);
    let list = ok_json(&s, &["session", "list"]);
    assert_eq!(list["sessions"].as_array().unwrap().len(), 1);

    let done = ok_json(&s, &["reset", "--confirm"]);
    assert_eq!(done["removed"]["sessions"], 1);
    let list = ok_json(&s, &["session", "list"]);
    assert_eq!(list["sessions"], json!([]));
}

#[test]
fn domain_errors_exit_one_with_code() {
    let fx = Fixture::new();
    fx.ingest();
    let s = fx.storage();
    ok(&s, &["session", "create", "--participants", "ana", "--id", "x"]);
    let r = cli(&s, &["session", "advance", "--session", "x", "--event", "complete"]);
    assert_eq!(r.code, 1);
    assert!(r.err.starts_with("error: IllegalTransition:"), "{}", r.err);
    let r = cli(&s, &["session", "status", "--session", "nope"]);
    assert_eq!(r.code, 1);
    assert!(r.err.starts_with("error: UnknownSession:"), "{}", r.err);
    let r = cli(&s, &["train", "--session", "x"]);
    assert_eq!(r.code, 1);
    let status = ok(&s, &["session", "status", "--session", "x"]);
    assert!(status.contains("state       Created"), "{status}");
}

#[test]
fn config_file_supplies_storage() {
    let fx = Fixture::new();
    let config = fx.dir.path().join("deliberate.toml");
    std::fs::write(
        &config,
        format!("storage = {:?}\nseed = 7\n", fx.storage().display().to_string()),
    )
    .unwrap();
    fx.ingest();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = deliberate_cli::run(
        [
            "deliberate",
            "--config",
            &config.display().to_string(),
            "--format",
            "json",
            "session",
            "create",
            "--participants",
            "a",
        ],
        &mut out,
        &mut err,
    );
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    let v: Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["session"]["settings"]["split_seed"], 7);

    std::fs::write(&config, "bogus = 1\n").unwrap();
    let code = deliberate_cli::run(
        [
            "deliberate",
            "--config",
            &config.display().to_string(),
            "session",
            "list",
        ],
        &mut out,
        &mut err,
    );
    assert_eq!(code, 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_deliberate");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("DELIBERATE_STORAGE", dir.path().join("s"))
            .env_remove("DELIBERATE_CONFIG")
            .output()
            .unwrap()
    };
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
    let bad = run(&["frobnicate"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("UsageError"));
    let missing = run(&["report", "fairness", "--model", "m"]);
    assert_eq!(missing.status.code(), Some(2));
    let reset = run(&["reset"]);
    assert_eq!(reset.status.code(), Some(2));
    let list = run(&["session", "list"]);
    assert_eq!(list.status.code(), Some(0), "{}", String::from_utf8_lossy(&list.stderr));
}
