use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tempdx_core::equivalence::partition_for;
use tempdx_core::kb::{parse_kb, validate_kb, KbError, KnowledgeBase};
use tempdx_core::report::{Recommendation, Report};
use tempdx_core::sensitivity::{analyze_with, default_candidates};
use tempdx_core::session::{parse_script, replay, Session, SessionError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tempdx", version, about = "Diagnosis and treatment over time-indexed influence diagrams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a knowledge base and list every violation.
    Validate { kb: PathBuf },
    /// Recommend a treatment for a set of observations.
    Diagnose {
        kb: PathBuf,
        #[command(flatten)]
        obs: ObsArgs,
    },
    /// Run a session script and print the final snapshot.
    Replay { kb: PathBuf, script: PathBuf },
    /// Check whether the tables of other times would change the decision.
    Sensitivity {
        kb: PathBuf,
        #[command(flatten)]
        obs: ObsArgs,
        /// Candidate times; defaults to the window around --time.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
    },
    /// Print the diagram built for a set of observations.
    Export {
        kb: PathBuf,
        #[command(flatten)]
        obs: ObsArgs,
        /// Graphviz DOT instead of the JSON snapshot.
        #[arg(long)]
        dot: bool,
    },
    /// Serve the session API over HTTP.
    Serve {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory holding one event-log file per session.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct ObsArgs {
    /// Observations as var=state, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub obs: Vec<String>,
    /// Time of the observations; defaults to the first time index.
    #[arg(long)]
    pub time: Option<String>,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Domain(_) => EXIT_DOMAIN,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Domain(m) => m,
        }
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        Failure::Domain(format!("{}: {e}", e.code()))
    }
}

/// Parses `args` and runs the command, writing results to `out` and
/// diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.exit_code()
        }
    }
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_kb(path: &PathBuf) -> Result<KnowledgeBase, Failure> {
    parse_kb(&read(path)?).map_err(|e| Failure::Domain(e.to_string()))
}

fn parse_obs(obs: &[String]) -> Result<Vec<(String, String)>, Failure> {
    obs.iter()
        .map(|o| match o.split_once('=') {
            Some((v, s)) if !v.trim().is_empty() && !s.trim().is_empty() => Ok((v.trim().to_string(), s.trim().to_string())),
            _ => Err(Failure::Usage(format!("observation '{o}' is not var=state"))),
        })
        .collect()
}

/// The session a client reaches by observing `obs` one by one at `time`.
pub fn observe_all(kb: Arc<KnowledgeBase>, obs: &ObsArgs) -> Result<Session, Failure> {
    let lits = parse_obs(&obs.obs)?;
    let t0 = kb.time_axis.labels.first().cloned().unwrap_or_default();
    let time = obs.time.clone().unwrap_or_else(|| t0.clone());
    let mut s = Session::new(kb, &t0)?;
    for (v, st) in &lits {
        s.observe(v, st, &time)?;
    }
    Ok(s)
}

/// The recommendation report for a session, as served over HTTP.
pub fn recommendation(s: &Session) -> Result<Report, SessionError> {
    let (decision, sensitivity, trace) = s.recommend()?;
    Ok(Report::Recommendation(Box::new(Recommendation {
        decision: decision.clone(),
        sensitivity: sensitivity.clone(),
        trace: trace.clone(),
    })))
}

pub fn snapshot_report(s: &Session) -> Report {
    Report::Snapshot { session: s.snapshot() }
}

fn emit(out: &mut dyn Write, r: &Report) -> Result<i32, Failure> {
    writeln!(out, "{}", r.to_json()).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(EXIT_OK)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32, Failure> {
    match cmd {
        Command::Validate { kb } => {
            let violations = match parse_kb(&read(&kb)?) {
                Ok(k) => validate_kb(&k),
                Err(KbError::Invalid(v)) => v,
                Err(e) => return Err(Failure::Domain(e.to_string())),
            };
            if violations.is_empty() {
                writeln!(out, "OK").map_err(|e| Failure::Usage(e.to_string()))?;
                return Ok(EXIT_OK);
            }
            for v in &violations {
                writeln!(out, "{v}").map_err(|e| Failure::Usage(e.to_string()))?;
            }
            Ok(EXIT_DOMAIN)
        }
        Command::Diagnose { kb, obs } => {
            let s = observe_all(Arc::new(load_kb(&kb)?), &obs)?;
            emit(out, &recommendation(&s)?)
        }
        Command::Replay { kb, script } => {
            let kb = Arc::new(load_kb(&kb)?);
            let cmds = parse_script(&read(&script)?).map_err(|e| Failure::Domain(e.to_string()))?;
            let s = replay(kb, &cmds).map_err(|(i, e)| Failure::Domain(format!("command {}: {}: {e}", i + 1, e.code())))?;
            emit(out, &snapshot_report(&s))
        }
        Command::Sensitivity { kb, obs, candidates } => {
            let kb = Arc::new(load_kb(&kb)?);
            let s = observe_all(kb.clone(), &obs)?;
            let d = s.diagram.as_ref().ok_or(SessionError::NoDiagram)?;
            let candidates = if candidates.is_empty() { default_candidates(&kb, &d.time, s.config.window) } else { candidates };
            let partition = partition_for(d, s.config.quantum);
            let report = analyze_with(d, &kb, &d.time, &candidates, &partition, s.config.rebuild_threshold)
                .map_err(|e| Failure::Domain(e.to_string()))?;
            emit(out, &Report::Sensitivity(report))
        }
        Command::Export { kb, obs, dot } => {
            let s = observe_all(Arc::new(load_kb(&kb)?), &obs)?;
            let d = s.diagram.as_ref().ok_or(SessionError::NoDiagram)?;
            if dot {
                write!(out, "{}", d.to_dot()).map_err(|e| Failure::Usage(e.to_string()))?;
                Ok(EXIT_OK)
            } else {
                emit(out, &Report::Diagram(d.snapshot()))
            }
        }
        Command::Serve { kb, port, data_dir } => {
            let kb = Arc::new(load_kb(&kb)?);
            let state = crate::server::AppState::open(kb, data_dir).map_err(Failure::Domain)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Usage(e.to_string()))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
                    .await
                    .map_err(|e| Failure::Usage(format!("cannot bind port {port}: {e}")))?;
                let _ = writeln!(out, "listening on http://127.0.0.1:{port}");
                axum::serve(listener, crate::server::router(state)).await.map_err(|e| Failure::Domain(e.to_string()))
            })?;
            Ok(EXIT_OK)
        }
    }
}
