//! Facilitator command-line tool. Every subcommand opens the storage
//! directory under its exclusive lock and calls the same service layer the
//! HTTP server uses, so `--format json` prints exactly the payload an HTTP
//! client would receive.

mod render;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use deliberate_core::session::{FeatureDecision, Inclusion, SessionSettings};
use deliberate_server::query::PersonaParams;
use deliberate_server::service::{
    AdvanceRequest, ConsensusRequest, CreateSessionRequest, IngestInput, SelectionRequest, SettingsPatch,
};
use deliberate_server::store::DEFAULT_SNAPSHOT_EVERY;
use deliberate_server::{ApiError, Auth, ServeConfig, Service, ServiceConfig};

pub use render::{flatten, Format, Output, Table};

const DEFAULT_STORAGE: &str = "./deliberate-data";
const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(
    name = "deliberate",
    version,
    about = "Run feature-selection deliberation sessions: ingest applicant data, collect selections, train and inspect models"
)]
pub struct Cli {
    /// TOML file with defaults for storage, bind address, data paths and session settings.
    #[arg(long, global = true, env = "DELIBERATE_CONFIG")]
    config: Option<PathBuf>,
    /// Storage directory holding the event log and snapshots.
    #[arg(long, global = true, env = "DELIBERATE_STORAGE")]
    storage: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, derive and register a dataset.
    Ingest(IngestArgs),
    #[command(subcommand)]
    Session(SessionCommand),
    /// Write the per-participant deliberation file (CSV unless --format json).
    ExportDeliberation {
        #[arg(long)]
        session: String,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finalize the group selection by majority vote.
    Consensus {
        #[arg(long)]
        session: String,
        /// Facilitator decision for a tied feature, as `Feature=include` or `Feature=exclude`.
        #[arg(long = "tiebreak", value_name = "FEATURE=DECISION")]
        tiebreaks: Vec<String>,
        #[arg(long)]
        facilitator: Option<String>,
        #[arg(long)]
        expected_version: Option<u64>,
    },
    /// Train the all-features, group and individual models for a session.
    Train {
        #[arg(long)]
        session: String,
    },
    #[command(subcommand)]
    Report(ReportCommand),
    /// Run the HTTP server.
    Serve(ServeArgs),
    /// Delete every dataset, session and model in the storage directory.
    Reset {
        #[arg(long)]
        confirm: bool,
    },
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    tiers: Option<PathBuf>,
    #[arg(long)]
    awards: Option<PathBuf>,
    #[arg(long)]
    dataset_id: Option<String>,
}

#[derive(Debug, Subcommand)]
enum SessionCommand {
    /// Create a session and print its participant and facilitator tokens.
    Create {
        /// Comma-separated participant ids.
        #[arg(long, value_delimiter = ',', required = true)]
        participants: Vec<String>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        dataset_id: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        split_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML table of prompt overrides keyed by screen, with optional `training_video`.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    Status {
        #[arg(long)]
        session: String,
    },
    /// Apply a state transition such as `start_exploration` or `start_deliberation`.
    Advance {
        #[arg(long)]
        session: String,
        #[arg(long)]
        event: String,
        #[arg(long)]
        expected_version: Option<u64>,
    },
    /// Record one decision, or a JSON array of decisions with --file.
    Select(SelectArgs),
    /// Vote counts per feature, before or after finalizing.
    Tally {
        #[arg(long)]
        session: String,
    },
    Tokens {
        #[arg(long)]
        session: String,
    },
    List,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    session: String,
    #[arg(long, required_unless_present = "file")]
    participant: Option<String>,
    #[arg(long, required_unless_present = "file")]
    feature: Option<String>,
    #[arg(long, required_unless_present = "file", value_parser = ["include", "exclude"])]
    decision: Option<String>,
    #[arg(long)]
    unsure: bool,
    #[arg(long, default_value = "")]
    reason: String,
    #[arg(long, conflicts_with_all = ["participant", "feature", "decision"])]
    file: Option<PathBuf>,
    #[arg(long)]
    expected_version: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum ReportCommand {
    /// Models trained for a session.
    Models {
        #[arg(long)]
        session: String,
    },
    /// Standardized weights of one model, or side by side with --compare.
    Weights {
        #[arg(long)]
        model: String,
        #[arg(long)]
        compare: Option<String>,
    },
    Performance {
        #[arg(long)]
        model: String,
        /// Records to evaluate: test (default), train or all.
        #[arg(long)]
        on: Option<String>,
    },
    Fairness {
        #[arg(long)]
        model: String,
        #[arg(long)]
        feature: String,
        /// demographic_parity (default) or equal_opportunity.
        #[arg(long)]
        definition: Option<String>,
        #[arg(long)]
        on: Option<String>,
    },
    /// Page through the records the model decided, as personas.
    Personas {
        #[arg(long)]
        model: String,
        #[arg(long)]
        model_decision: Option<String>,
        #[arg(long)]
        actual: Option<String>,
        /// `Feature=Level` or `Feature:min..max`; at most two.
        #[arg(long = "filter")]
        filters: Vec<String>,
        #[arg(long)]
        cursor: Option<String>,
        #[arg(long)]
        page_size: Option<String>,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "DELIBERATE_BIND")]
    bind: Option<String>,
    #[arg(long, env = "DELIBERATE_DATASET")]
    dataset: Option<PathBuf>,
    #[arg(long, env = "DELIBERATE_SCHEMA")]
    schema: Option<PathBuf>,
    #[arg(long, env = "DELIBERATE_TIERS")]
    tiers: Option<PathBuf>,
    #[arg(long, env = "DELIBERATE_AWARDS")]
    awards: Option<PathBuf>,
    #[arg(long, env = "DELIBERATE_DATASET_ID")]
    dataset_id: Option<String>,
    /// Token for admin endpoints; generated and printed when absent.
    #[arg(long, env = "DELIBERATE_ADMIN_TOKEN")]
    admin_token: Option<String>,
    #[arg(long, env = "DELIBERATE_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "DELIBERATE_THRESHOLD")]
    threshold: Option<f64>,
    #[arg(long, env = "DELIBERATE_SPLIT_RATIO")]
    split_ratio: Option<f64>,
    #[arg(long)]
    snapshot_every: Option<u64>,
}

/// Contents of the `--config` file. Flags and environment variables win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    storage: Option<PathBuf>,
    bind: Option<String>,
    dataset: Option<PathBuf>,
    schema: Option<PathBuf>,
    tiers: Option<PathBuf>,
    awards: Option<PathBuf>,
    dataset_id: Option<String>,
    admin_token: Option<String>,
    seed: Option<u64>,
    threshold: Option<f64>,
    split_ratio: Option<f64>,
    snapshot_every: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Api(ApiError),
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        CliError::Api(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_opt(path: Option<&PathBuf>) -> Result<Option<String>, CliError> {
    path.map(|p| read_text(p)).transpose()
}

struct Context {
    file: FileConfig,
    storage: PathBuf,
    format: Format,
}

impl Context {
    fn settings(&self) -> SessionSettings {
        let d = SessionSettings::default();
        SessionSettings {
            threshold: self.file.threshold.unwrap_or(d.threshold),
            split_ratio: self.file.split_ratio.unwrap_or(d.split_ratio),
            split_seed: self.file.seed.unwrap_or(d.split_seed),
        }
    }

    fn open(&self) -> Result<Service, CliError> {
        let mut config = ServiceConfig::new(&self.storage);
        config.settings = self.settings();
        config.snapshot_every = self.file.snapshot_every.unwrap_or(DEFAULT_SNAPSHOT_EVERY);
        if let Some(id) = &self.file.dataset_id {
            config.dataset_id = id.clone();
        }
        Ok(Service::open(config)?)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 for usage errors and 1
/// for everything else.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "UsageError\n{}", e.render());
                    2
                }
            };
        }
    };
    match execute(cli, out, err) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: UsageError: {msg}\n\n{}", Cli::command().render_usage());
            2
        }
        Err(CliError::Api(e)) => {
            let _ = writeln!(err, "error: {}: {}", e.code, e.message);
            if let Some(detail) = &e.detail {
                let _ = writeln!(err, "detail: {detail}");
            }
            1
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => toml::from_str(&read_text(path)?)
            .map_err(|e| usage(format!("bad config file {}: {}", path.display(), e.message())))?,
        None => FileConfig::default(),
    };
    let storage = cli
        .storage
        .clone()
        .or_else(|| file.storage.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STORAGE));
    let ctx = Context {
        file,
        storage,
        format: cli.format,
    };
    let output = match cli.command {
        Command::Serve(args) => return serve(&ctx, args, err),
        Command::Reset { confirm } => {
            if !confirm {
                return Err(usage("reset deletes all stored data; pass --confirm to proceed"));
            }
            let payload = ctx.open()?.reset(&Auth::Local)?;
            Output::new(payload)
        }
        Command::Ingest(args) => ingest(&ctx, args)?,
        Command::Session(cmd) => session(&ctx, cmd)?,
        Command::ExportDeliberation { session, out: path } => {
            let service = ctx.open()?;
            let text = match ctx.format {
                Format::Json => format!(
                    "{}\n",
                    deliberate_server::payload_json(&service.deliberation_json(&Auth::Local, &session)?)
                ),
                Format::Csv | Format::Table => service.deliberation_csv(&Auth::Local, &session)?,
            };
            match path {
                Some(p) => {
                    fs::write(&p, text).map_err(|e| usage(format!("cannot write {}: {e}", p.display())))?;
                    let _ = writeln!(err, "wrote {}", p.display());
                }
                None => out
                    .write_all(text.as_bytes())
                    .map_err(|e| usage(format!("cannot write output: {e}")))?,
            }
            return Ok(());
        }
        Command::Consensus {
            session,
            tiebreaks,
            facilitator,
            expected_version,
        } => {
            let mut map = BTreeMap::new();
            for t in &tiebreaks {
                let (feature, decision) = t
                    .rsplit_once('=')
                    .and_then(|(f, d)| Inclusion::parse(d).map(|d| (f.trim().to_string(), d)))
                    .ok_or_else(|| usage(format!("tiebreak `{t}` is not `Feature=include|exclude`")))?;
                map.insert(feature, decision);
            }
            let payload = ctx.open()?.finalize(
                &Auth::Local,
                &session,
                ConsensusRequest {
                    tiebreaks: map,
                    facilitator,
                    expected_version,
                },
            )?;
            consensus_output(payload)
        }
        Command::Train { session } => {
            let payload = ctx.open()?.train_blocking(&Auth::Local, &session)?;
            Output::new(payload)
        }
        Command::Report(cmd) => report(&ctx, cmd)?,
    };
    render::emit(out, ctx.format, &output).map_err(|e| usage(format!("cannot write output: {e}")))
}

fn ingest(ctx: &Context, args: IngestArgs) -> Result<Output, CliError> {
    let input = IngestInput {
        data_csv: read_text(&args.data)?,
        schema_toml: read_text(&args.schema)?,
        tiers_csv: read_opt(args.tiers.as_ref())?,
        awards_csv: read_opt(args.awards.as_ref())?,
    };
    let id = args
        .dataset_id
        .or_else(|| ctx.file.dataset_id.clone())
        .unwrap_or_else(|| "default".into());
    Ok(Output::new(ctx.open()?.ingest(&Auth::Local, &id, &input)?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    training_video: Option<String>,
    #[serde(default)]
    prompts: BTreeMap<String, String>,
}

fn session(ctx: &Context, cmd: SessionCommand) -> Result<Output, CliError> {
    let service = ctx.open()?;
    let auth = Auth::Local;
    Ok(match cmd {
        SessionCommand::Create {
            participants,
            id,
            dataset_id,
            threshold,
            split_ratio,
            seed,
            prompts,
        } => {
            let prompts: PromptFile = match prompts {
                Some(p) => toml::from_str(&read_text(&p)?)
                    .map_err(|e| usage(format!("bad prompt file {}: {}", p.display(), e.message())))?,
                None => PromptFile::default(),
            };
            let payload = service.create_session(
                &auth,
                CreateSessionRequest {
                    session_id: id,
                    dataset_id,
                    participants: participants.iter().map(|p| p.trim().to_string()).collect(),
                    settings: SettingsPatch {
                        threshold,
                        split_ratio,
                        split_seed: seed,
                    },
                    prompts: prompts.prompts,
                    training_video: prompts.training_video,
                },
            )?;
            let s = &payload["session"];
            Output::new(payload.clone())
                .note(format!("session_id         {}", str_of(&s["session_id"])))
                .note(format!("dataset_id         {}", str_of(&s["dataset_id"])))
                .note(format!("state              {}", str_of(&s["state"])))
                .note(format!("participants       {}", join(&s["participants"])))
                .note(format!("participant_token  {}", str_of(&payload["participant_token"])))
                .note(format!("facilitator_token  {}", str_of(&payload["facilitator_token"])))
        }
        SessionCommand::Status { session } => {
            let payload = service.session(&auth, &session)?;
            status_output(payload)
        }
        SessionCommand::Advance {
            session,
            event,
            expected_version,
        } => Output::new(service.advance(
            &auth,
            &session,
            AdvanceRequest {
                event,
                expected_version,
            },
        )?),
        SessionCommand::Select(args) => {
            let selections = match &args.file {
                Some(p) => serde_json::from_str::<Vec<FeatureDecision>>(&read_text(p)?)
                    .map_err(|e| usage(format!("bad selections file {}: {e}", p.display())))?,
                None => vec![FeatureDecision {
                    participant_id: args.participant.clone().unwrap_or_default(),
                    feature: args.feature.clone().unwrap_or_default(),
                    decision: args
                        .decision
                        .as_deref()
                        .and_then(Inclusion::parse)
                        .ok_or_else(|| usage("--decision must be include or exclude"))?,
                    unsure: args.unsure,
                    reason: args.reason.clone(),
                }],
            };
            let payload = service.record_selections(
                &auth,
                &args.session,
                SelectionRequest {
                    expected_version: args.expected_version,
                    selections,
                },
            )?;
            let mut t = Table::new(&["participant", "feature", "participant_complete", "version"]);
            for a in payload["acks"].as_array().into_iter().flatten() {
                t.push(vec![
                    a["participant_id"].clone(),
                    a["feature"].clone(),
                    a["participant_complete"].clone(),
                    a["version"].clone(),
                ]);
            }
            Output::new(payload).table(t)
        }
        SessionCommand::Tally { session } => {
            let payload = service.tally(&auth, &session)?;
            let mut out = Output::new(payload.clone()).note(format!(
                "finalized  {}",
                payload["finalized"].as_bool().unwrap_or(false)
            ));
            if let Some(ties) = payload["unresolved_ties"].as_array().filter(|t| !t.is_empty()) {
                out = out.note(format!("unresolved ties  {}", join(&Value::Array(ties.clone()))));
            }
            out.table(consensus_table(&payload["records"]))
        }
        SessionCommand::Tokens { session } => {
            let payload = service.tokens(&auth, &session)?;
            Output::new(payload)
        }
        SessionCommand::List => {
            let payload = service.sessions(&auth)?;
            let mut t = Table::new(&["session_id", "dataset_id", "state", "participants", "version"]);
            for s in payload["sessions"].as_array().into_iter().flatten() {
                t.push(vec![
                    s["session_id"].clone(),
                    s["dataset_id"].clone(),
                    s["state"].clone(),
                    s["participants"].clone(),
                    s["version"].clone(),
                ]);
            }
            Output::new(payload).table(t)
        }
    })
}

fn str_of(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn join(v: &Value) -> String {
    v.as_array()
        .map(|a| a.iter().map(str_of).collect::<Vec<_>>().join(", "))
        .unwrap_or_default()
}

fn status_output(payload: Value) -> Output {
    let features = payload["features"].as_array().map(Vec::len).unwrap_or(0);
    let mut t = Table::new(&["participant", "decided", "of"]);
    for p in payload["participants"].as_array().into_iter().flatten() {
        let pid = str_of(p);
        let decided = payload["selections"][&pid].as_object().map(|m| m.len()).unwrap_or(0);
        t.push(vec![json!(pid), json!(decided), json!(features)]);
    }
    Output::new(payload.clone())
        .note(format!("session_id  {}", str_of(&payload["session_id"])))
        .note(format!("dataset_id  {}", str_of(&payload["dataset_id"])))
        .note(format!("state       {}", str_of(&payload["state"])))
        .note(format!("version     {}", payload["version"]))
        .table(t)
}

fn consensus_table(records: &Value) -> Table {
    let mut t = Table::new(&[
        "feature",
        "include",
        "exclude",
        "include_percent",
        "outcome",
        "resolved_by",
    ]);
    for r in records.as_array().into_iter().flatten() {
        t.push(vec![
            r["feature"].clone(),
            r["include_votes"].clone(),
            r["exclude_votes"].clone(),
            r["include_percent"].clone(),
            r["outcome"].clone(),
            r["resolved_by"].clone(),
        ]);
    }
    t
}

fn consensus_output(payload: Value) -> Output {
    let t = consensus_table(&payload["consensus"]);
    Output::new(payload.clone())
        .note(format!("state           {}", str_of(&payload["state"])))
        .note(format!("group features  {}", join(&payload["group_features"])))
        .table(t)
}

fn report(ctx: &Context, cmd: ReportCommand) -> Result<Output, CliError> {
    let service = ctx.open()?;
    let auth = Auth::Local;
    Ok(match cmd {
        ReportCommand::Models { session } => {
            let payload = service.models(&auth, &session)?;
            let mut t = Table::new(&[
                "model_id",
                "variant",
                "features",
                "train_size",
                "test_size",
                "ridge_fallback",
            ]);
            for m in payload["models"].as_array().into_iter().flatten() {
                let variant = match m["variant"]["participant"].as_str() {
                    Some(p) => format!("individual ({p})"),
                    None => str_of(&m["variant"]["type"]),
                };
                t.push(vec![
                    m["model_id"].clone(),
                    json!(variant),
                    json!(m["selected_features"].as_array().map(Vec::len).unwrap_or(0)),
                    m["train_size"].clone(),
                    m["test_size"].clone(),
                    m["ridge_fallback"].clone(),
                ]);
            }
            Output::new(payload.clone())
                .note(format!("training  {}", str_of(&payload["training"]["status"])))
                .table(t)
        }
        ReportCommand::Weights { model, compare: None } => {
            let payload = service.weights(&auth, &model)?;
            let mut t = Table::new(&["feature", "column", "weight"]);
            for w in payload["weights"].as_array().into_iter().flatten() {
                t.push(vec![w["feature"].clone(), w["column"].clone(), w["weight"].clone()]);
            }
            let mut out = Output::new(payload.clone())
                .note(format!("model_id   {}", str_of(&payload["model_id"])))
                .note(format!("intercept  {}", payload["intercept"]))
                .note(format!("threshold  {}", payload["threshold"]));
            if !payload["ridge_fallback"].is_null() {
                out = out.note(format!("ridge      {}", payload["ridge_fallback"]));
            }
            out.table(t)
        }
        ReportCommand::Weights {
            model,
            compare: Some(other),
        } => {
            let payload = service.compare(&auth, &model, &other)?;
            let mut t = Table::new(&["feature", "column", "weight_a", "weight_b"]);
            let cell = |v: &Value| if v.is_null() { json!("absent") } else { v.clone() };
            for r in payload["rows"].as_array().into_iter().flatten() {
                t.push(vec![
                    r["feature"].clone(),
                    r["column"].clone(),
                    cell(&r["weight_a"]),
                    cell(&r["weight_b"]),
                ]);
            }
            Output::new(payload)
                .note(format!("a  {model}"))
                .note(format!("b  {other}"))
                .table(t)
        }
        ReportCommand::Performance { model, on } => {
            let payload = service.performance(&auth, &model, on.as_deref())?;
            let m = &payload["matrix"];
            let mut t = Table::new(&["", "actual admit", "actual reject"]);
            t.push(vec![json!("model admit"), m["tp"].clone(), m["fp"].clone()]);
            t.push(vec![json!("model reject"), m["fn"].clone(), m["tn"].clone()]);
            Output::new(payload.clone())
                .note(format!("model_id   {}", str_of(&payload["model_id"])))
                .note(format!(
                    "evaluated  {} ({} records)",
                    str_of(&payload["evaluated_on"]),
                    payload["n"]
                ))
                .note(format!("accuracy   {}", metric(&payload["accuracy"])))
                .note(format!("precision  {}", metric(&payload["precision"])))
                .note(format!("recall     {}", metric(&payload["recall"])))
                .table(t)
        }
        ReportCommand::Fairness {
            model,
            feature,
            definition,
            on,
        } => {
            let payload = service.fairness(&auth, &model, Some(&feature), definition.as_deref(), on.as_deref())?;
            fairness_output(payload)
        }
        ReportCommand::Personas {
            model,
            model_decision,
            actual,
            filters,
            cursor,
            page_size,
        } => {
            let mut it = filters.into_iter();
            let params = PersonaParams {
                model: model_decision,
                actual,
                f1: it.next(),
                f2: it.next(),
                f3: it.next(),
                cursor,
                page_size,
            };
            if it.next().is_some() {
                return Err(ApiError::new("TooManyFilters", "at most 2 feature filters may be combined").into());
            }
            personas_output(service.personas(&auth, &model, &params)?)
        }
    })
}

fn metric(v: &Value) -> String {
    match v.as_f64() {
        Some(f) => format!("{f:.4}"),
        None => str_of(v),
    }
}

/// Table rendering of a fairness payload; one row per compared group.
pub fn fairness_output(payload: Value) -> Output {
    let mut t = Table::new(&["group", "n", "admitted", "rate"]);
    for g in payload["per_group"].as_array().into_iter().flatten() {
        t.push(vec![
            g["group"].clone(),
            g["n"].clone(),
            g["admitted"].clone(),
            g["rate"].clone(),
        ]);
    }
    let mut out = Output::new(payload.clone())
        .note(format!("model_id       {}", str_of(&payload["model_id"])))
        .note(format!("feature        {}", str_of(&payload["group_feature"])))
        .note(format!("definition     {}", str_of(&payload["definition"])))
        .note(format!("               {}", str_of(&payload["description"])))
        .note(format!("evaluated on   {}", str_of(&payload["evaluated_on"])))
        .note(format!("max disparity  {}", metric(&payload["max_disparity"])));
    if let Some(ex) = payload["excluded_groups"].as_array().filter(|e| !e.is_empty()) {
        out = out.note(format!("excluded       {}", join(&Value::Array(ex.clone()))));
    }
    for w in payload["warnings"].as_array().into_iter().flatten() {
        out = out.note(format!("warning: {}", str_of(w)));
    }
    out.table(t)
}

fn personas_output(payload: Value) -> Output {
    let items = payload["items"].as_array().cloned().unwrap_or_default();
    let features: Vec<String> = items
        .first()
        .and_then(|p| p["values"].as_array())
        .map(|vals| vals.iter().map(|v| str_of(&v["feature"])).collect())
        .unwrap_or_default();
    let mut headers = vec!["synthetic_id", "model", "score", "confidence", "actual"];
    headers.extend(features.iter().map(String::as_str));
    let mut t = Table::new(&headers);
    for p in &items {
        let mut row = vec![
            p["synthetic_id"].clone(),
            p["model_decision"].clone(),
            p["score"].clone(),
            p["confidence"].clone(),
            p["actual_decision"].clone(),
        ];
        for v in p["values"].as_array().into_iter().flatten() {
            let mut cell = str_of(&v["value"]);
            if v["imputed"].as_bool() == Some(true) {
                cell.push('*');
            }
            row.push(json!(cell));
        }
        t.push(row);
    }
    let start = payload["cursor"].as_u64().unwrap_or(0);
    let mut out = Output::new(payload.clone()).note(format!(
        "showing {}-{} of {}",
        if items.is_empty() { start } else { start + 1 },
        start + items.len() as u64,
        payload["total"]
    ));
    if let Some(next) = payload["next_cursor"].as_u64() {
        out = out.note(format!("next page: --cursor {next}"));
    }
    out.table(t)
}

fn serve(ctx: &Context, args: ServeArgs, err: &mut dyn Write) -> Result<(), CliError> {
    let f = &ctx.file;
    let mut settings = ctx.settings();
    if let Some(s) = args.seed {
        settings.split_seed = s;
    }
    if let Some(t) = args.threshold {
        settings.threshold = t;
    }
    if let Some(r) = args.split_ratio {
        settings.split_ratio = r;
    }
    let admin_token = args.admin_token.or_else(|| f.admin_token.clone()).unwrap_or_else(|| {
        let token = uuid::Uuid::new_v4().simple().to_string();
        let _ = writeln!(err, "admin token: {token}");
        token
    });
    let config = ServeConfig {
        bind: args
            .bind
            .or_else(|| f.bind.clone())
            .unwrap_or_else(|| DEFAULT_BIND.into()),
        storage: ctx.storage.clone(),
        dataset: args.dataset.or_else(|| f.dataset.clone()),
        schema: args.schema.or_else(|| f.schema.clone()),
        tiers: args.tiers.or_else(|| f.tiers.clone()),
        awards: args.awards.or_else(|| f.awards.clone()),
        dataset_id: args
            .dataset_id
            .or_else(|| f.dataset_id.clone())
            .unwrap_or_else(|| "default".into()),
        settings,
        admin_token: Some(admin_token),
        snapshot_every: args
            .snapshot_every
            .or(f.snapshot_every)
            .unwrap_or(DEFAULT_SNAPSHOT_EVERY),
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(tracing_subscriber::filter::LevelFilter::INFO)
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ApiError::new("Internal", format!("cannot start runtime: {e}")))?;
    runtime
        .block_on(deliberate_server::serve(config))
        .map_err(|e| ApiError::new(e.code(), e.to_string()).into())
}
