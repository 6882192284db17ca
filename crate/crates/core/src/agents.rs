//! Answering agents and the evaluation driver.
//!
//! Builtin agents answer in-process. External agents speak a line-delimited
//! JSON protocol over a child process's standard streams or a TCP stream.
//! Every session is driven by [`crate::session`], so predictions are
//! consistent whatever an agent answers; a session whose agent misbehaves is
//! scored as an all-negative report and counted as failed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{compute_metrics, MetricsError, MetricsResult};
use crate::report::{StructuredReport, YesNo};
use crate::session::{start_session, HistoryEntry, HistoryRole, QuestionInstance, SessionError};
use crate::template::{ChoiceMode, Level, ReportTemplate, NO, NO_SELECTION, YES};

/// Longest accepted protocol line, newline excluded.
pub const MAX_LINE_BYTES: usize = 1 << 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinKind {
    Oracle,
    AllNegative,
    Majority,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentSpec {
    Builtin(BuiltinKind),
    /// Shell command spawned once per worker.
    Exec(String),
    /// `host:port` connected once per worker.
    Tcp(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid agent spec `{spec}`: {reason}")]
pub struct AgentSpecError {
    pub spec: String,
    pub reason: String,
}

impl FromStr for AgentSpec {
    type Err = AgentSpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| AgentSpecError {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("oracle", None) => Ok(AgentSpec::Builtin(BuiltinKind::Oracle)),
            ("all-negative" | "all_negative", None) => {
                Ok(AgentSpec::Builtin(BuiltinKind::AllNegative))
            }
            ("majority", None) => Ok(AgentSpec::Builtin(BuiltinKind::Majority)),
            ("random", Some(seed)) => seed
                .trim()
                .parse()
                .map(|seed| AgentSpec::Builtin(BuiltinKind::Random { seed }))
                .map_err(|_| err("random needs an unsigned integer seed")),
            ("random", None) => Err(err("random needs a seed, as in random:7")),
            ("exec", Some(cmd)) if !cmd.trim().is_empty() => Ok(AgentSpec::Exec(cmd.to_string())),
            ("tcp", Some(addr)) if !addr.trim().is_empty() => Ok(AgentSpec::Tcp(addr.to_string())),
            ("exec" | "tcp", _) => Err(err("missing argument")),
            ("oracle" | "all-negative" | "all_negative" | "majority", Some(_)) => {
                Err(err("takes no argument"))
            }
            _ => Err(err(
                "expected oracle, all-negative, majority, random:<seed>, exec:<cmd> or tcp:<addr>",
            )),
        }
    }
}

impl fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentSpec::Builtin(BuiltinKind::Oracle) => f.write_str("oracle"),
            AgentSpec::Builtin(BuiltinKind::AllNegative) => f.write_str("all-negative"),
            AgentSpec::Builtin(BuiltinKind::Majority) => f.write_str("majority"),
            AgentSpec::Builtin(BuiltinKind::Random { seed }) => write!(f, "random:{seed}"),
            AgentSpec::Exec(cmd) => write!(f, "exec:{cmd}"),
            AgentSpec::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("the oracle agent needs the gold report")]
    OracleWithoutGold,
    #[error("the majority agent needs training statistics")]
    NoMajorityStats,
    #[error("no majority statistics for node `{0}`")]
    UnknownNode(String),
    #[error("agent answer rejected: {0}")]
    Rejected(#[from] SessionError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("agent reported error `{code}`: {detail}")]
    Reported { code: String, detail: String },
    #[error("expected {expected}, agent sent {got}")]
    Unexpected { expected: String, got: String },
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("agent closed the connection")]
    Closed,
    #[error("agent i/o: {0}")]
    Io(#[from] io::Error),
}

/// Per-node answer counts gathered by replaying training reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MajorityStats {
    counts: HashMap<(String, bool), BTreeMap<Vec<String>, u64>>,
}

impl MajorityStats {
    /// Counts, for every question the oracle is asked on each training
    /// report, the selection it gives. Follow-ups are counted apart from the
    /// element question they repeat.
    pub fn from_reports(t: &ReportTemplate, train: &[StructuredReport]) -> Self {
        let mut counts: HashMap<(String, bool), BTreeMap<Vec<String>, u64>> = t
            .nodes()
            .values()
            .flat_map(|n| {
                let followups = n.level == Level::L2 && n.max_instances.unwrap_or(1) > 1;
                let mut keys = vec![(n.id.clone(), false)];
                if followups {
                    keys.push((n.id.clone(), true));
                }
                keys
            })
            .map(|k| (k, BTreeMap::new()))
            .collect();
        for gold in train {
            let mut s = start_session(t, &gold.patient_id, &gold.image_ref);
            while let Some(q) = s.pending() {
                let answer = oracle_answer(t, gold, &q);
                *counts
                    .entry((q.node_id.clone(), q.is_followup))
                    .or_default()
                    .entry(answer.clone())
                    .or_default() += 1;
                s.apply_answer(&q, answer)
                    .expect("oracle answers are valid");
            }
        }
        MajorityStats { counts }
    }

    pub fn counts(&self, node_id: &str, is_followup: bool) -> Option<&BTreeMap<Vec<String>, u64>> {
        self.counts.get(&(node_id.to_string(), is_followup))
    }

    /// The most frequent selection, ties to the lexicographically smallest;
    /// the negative value when the question was never asked in training.
    pub fn answer(&self, q: &QuestionInstance) -> Result<Vec<String>, AgentError> {
        let counts = self
            .counts(&q.node_id, q.is_followup)
            .ok_or_else(|| AgentError::UnknownNode(q.node_id.clone()))?;
        let best = counts
            .iter()
            .filter(|(sel, _)| sel.iter().all(|v| q.valid_answers.contains(v)))
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
        Ok(match best {
            Some((sel, _)) => sel.clone(),
            None => vec![negative_value(q).to_string()],
        })
    }
}

fn negative_value(q: &QuestionInstance) -> &'static str {
    if q.level == Level::L3 {
        NO_SELECTION
    } else {
        NO
    }
}

/// The answer the gold report gives to `q`.
pub fn oracle_answer(
    t: &ReportTemplate,
    gold: &StructuredReport,
    q: &QuestionInstance,
) -> Vec<String> {
    let yes_no = |b: bool| vec![if b { YES } else { NO }.to_string()];
    match q.level {
        Level::L1 => yes_no(gold.l1_answers.get(&q.node_id) == Some(&YesNo::Yes)),
        Level::L2 => yes_no(
            gold.instances_of(&q.node_id)
                .any(|i| i.instance_index == q.instance_index),
        ),
        Level::L3 => {
            let parent = t.parent(&q.node_id).unwrap_or_default();
            gold.instances_of(parent)
                .find(|i| i.instance_index == q.instance_index)
                .and_then(|i| i.attribute_answers.get(&q.node_id))
                .filter(|sel| !sel.is_empty())
                .map(|sel| sel.iter().cloned().collect())
                .unwrap_or_else(|| vec![NO_SELECTION.to_string()])
        }
    }
}

/// An in-process agent. The random agent's generator is reseeded per
/// session so results do not depend on how sessions are scheduled.
pub struct BuiltinAgent<'a> {
    kind: BuiltinKind,
    template: &'a ReportTemplate,
    majority: Option<&'a MajorityStats>,
    rng: ChaCha8Rng,
}

impl<'a> BuiltinAgent<'a> {
    pub fn new(
        kind: BuiltinKind,
        template: &'a ReportTemplate,
        majority: Option<&'a MajorityStats>,
    ) -> Self {
        let seed = match kind {
            BuiltinKind::Random { seed } => seed,
            _ => 0,
        };
        BuiltinAgent {
            kind,
            template,
            majority,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn begin_session(&mut self, session_id: u64) {
        if let BuiltinKind::Random { seed } = self.kind {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
            self.rng.set_stream(session_id);
        }
    }

    /// Answers `q`. History is accepted for interface parity with external
    /// agents; no builtin agent conditions on it.
    pub fn answer(
        &mut self,
        q: &QuestionInstance,
        _history: &[HistoryEntry],
        gold: Option<&StructuredReport>,
    ) -> Result<Vec<String>, AgentError> {
        match self.kind {
            BuiltinKind::Oracle => gold
                .map(|g| oracle_answer(self.template, g, q))
                .ok_or(AgentError::OracleWithoutGold),
            BuiltinKind::AllNegative => Ok(vec![negative_value(q).to_string()]),
            BuiltinKind::Majority => self.majority.ok_or(AgentError::NoMajorityStats)?.answer(q),
            BuiltinKind::Random { .. } => Ok(q
                .valid_answers
                .choose(&mut self.rng)
                .cloned()
                .into_iter()
                .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireHistory {
    pub q: String,
    pub a: String,
    pub role: HistoryRole,
}

impl From<&HistoryEntry> for WireHistory {
    fn from(h: &HistoryEntry) -> Self {
        WireHistory {
            q: h.question_text.clone(),
            a: h.answer_text.clone(),
            role: h.role,
        }
    }
}

/// One gold-answered question with the history an oracle session builds
/// for it. Field names follow the question message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub patient_id: String,
    pub image_ref: String,
    pub node_id: String,
    pub instance_index: u32,
    pub is_followup: bool,
    pub text: String,
    pub history: Vec<WireHistory>,
    pub valid_answers: Vec<String>,
    pub choice_mode: ChoiceMode,
    pub selections: Vec<String>,
}

/// Replays every gold report through an oracle session and records each
/// asked question with its ground-truth history, in session order.
pub fn training_samples(
    t: &ReportTemplate,
    golds: &[StructuredReport],
) -> Result<Vec<TrainingSample>, SessionError> {
    let mut out = Vec::new();
    for gold in golds {
        let mut s = start_session(t, &gold.patient_id, &gold.image_ref);
        while let Some(q) = s.pending() {
            let history = s.build_history(&q);
            let selections = oracle_answer(t, gold, &q);
            s.apply_answer(&q, selections.iter().cloned())?;
            out.push(TrainingSample {
                patient_id: gold.patient_id.clone(),
                image_ref: gold.image_ref.clone(),
                node_id: q.node_id,
                instance_index: q.instance_index,
                is_followup: q.is_followup,
                text: q.text,
                history: history.iter().map(WireHistory::from).collect(),
                valid_answers: q.valid_answers,
                choice_mode: q.choice_mode,
                selections,
            });
        }
    }
    Ok(out)
}

pub fn render_training_samples(samples: &[TrainingSample]) -> String {
    samples
        .iter()
        .map(|s| serde_json::to_string(s).expect("sample serializes") + "\n")
        .collect()
}

pub fn parse_training_samples(text: &str) -> Result<Vec<TrainingSample>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProtocolMessage {
    Hello {
        template_fingerprint: String,
        answer_vocabulary: Vec<String>,
    },
    Question {
        session_id: u64,
        patient_id: String,
        image_ref: String,
        node_id: String,
        instance_index: u32,
        is_followup: bool,
        text: String,
        history: Vec<WireHistory>,
        valid_answers: Vec<String>,
        choice_mode: ChoiceMode,
    },
    Answer {
        session_id: u64,
        selections: Vec<String>,
    },
    SessionEnd {
        session_id: u64,
    },
    Shutdown {},
    Error {
        code: String,
        detail: String,
    },
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::Hello { .. } => "hello",
            ProtocolMessage::Question { .. } => "question",
            ProtocolMessage::Answer { .. } => "answer",
            ProtocolMessage::SessionEnd { .. } => "session_end",
            ProtocolMessage::Shutdown {} => "shutdown",
            ProtocolMessage::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("line of {len} bytes exceeds the {MAX_LINE_BYTES}-byte limit")]
    Oversized { len: usize },
    #[error("invalid UTF-8 at byte {offset}")]
    Utf8 { offset: usize },
    #[error("malformed message at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
}

/// One JSON object followed by a newline.
pub fn protocol_encode(m: &ProtocolMessage) -> Vec<u8> {
    let mut line = serde_json::to_vec(m).expect("protocol messages serialize");
    line.push(b'\n');
    line
}

/// Decodes one line; a trailing `\n` or `\r\n` is optional and unknown
/// fields are ignored.
pub fn protocol_decode(line: &[u8]) -> Result<ProtocolMessage, ProtocolError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    if line.len() > MAX_LINE_BYTES {
        return Err(ProtocolError::Oversized { len: line.len() });
    }
    let text = std::str::from_utf8(line).map_err(|e| ProtocolError::Utf8 {
        offset: e.valid_up_to(),
    })?;
    serde_json::from_str(text).map_err(|e| {
        // the column counts bytes on the offending line
        let offset = if e.is_eof() {
            text.len()
        } else {
            text.split_inclusive('\n')
                .take(e.line().saturating_sub(1))
                .map(str::len)
                .sum::<usize>()
                + e.column().saturating_sub(1)
        };
        ProtocolError::Malformed {
            offset: offset.min(text.len()),
            detail: e.to_string(),
        }
    })
}

/// Reads one line of at most [`MAX_LINE_BYTES`] bytes. `Ok(None)` is a clean
/// end of stream.
pub fn read_line(reader: &mut impl BufRead) -> io::Result<Option<Result<Vec<u8>, ProtocolError>>> {
    let mut buf = Vec::new();
    let n = reader
        .by_ref()
        .take(MAX_LINE_BYTES as u64 + 2)
        .read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if !buf.ends_with(b"\n") && buf.len() > MAX_LINE_BYTES {
        return Ok(Some(Err(ProtocolError::Oversized { len: buf.len() })));
    }
    Ok(Some(Ok(buf)))
}

/// A bidirectional line connection whose reads time out.
struct LineConn {
    writer: Box<dyn Write + Send>,
    lines: Receiver<Result<Vec<u8>, ProtocolError>>,
    child: Option<Child>,
    timeout: Duration,
}

impl LineConn {
    fn spawn_reader(
        source: impl Read + Send + 'static,
    ) -> Receiver<Result<Vec<u8>, ProtocolError>> {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(source);
            while let Ok(Some(line)) = read_line(&mut reader) {
                let fatal = line.is_err();
                if tx.send(line).is_err() || fatal {
                    break;
                }
            }
        });
        rx
    }

    fn exec(cmd: &str, timeout: Duration) -> Result<Self, AgentError> {
        let mut child = shell(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        Ok(LineConn {
            writer: Box::new(stdin),
            lines: Self::spawn_reader(stdout),
            child: Some(child),
            timeout,
        })
    }

    fn tcp(addr: &str, timeout: Duration) -> Result<Self, AgentError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(LineConn {
            writer: Box::new(stream),
            lines: Self::spawn_reader(reader),
            child: None,
            timeout,
        })
    }

    fn send(&mut self, m: &ProtocolMessage) -> Result<(), AgentError> {
        self.writer.write_all(&protocol_encode(m))?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<ProtocolMessage, AgentError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(line) => Ok(protocol_decode(&line?)?),
            Err(RecvTimeoutError::Timeout) => Err(AgentError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(AgentError::Closed),
        }
    }
}

impl Drop for LineConn {
    fn drop(&mut self) {
        let _ = self.send(&ProtocolMessage::Shutdown {});
        // closing stdin lets a well-behaved agent exit on its own
        self.writer = Box::new(io::sink());
        if let Some(child) = self.child.as_mut() {
            let deadline = Instant::now() + Duration::from_secs(2);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn shell(cmd: &str) -> Command {
    if cfg!(windows) {
        let mut c = Command::new("cmd");
        c.args(["/C", cmd]);
        c
    } else {
        let mut c = Command::new("sh");
        c.args(["-c", cmd]);
        c
    }
}

/// An agent reached over the wire protocol.
struct ExternalAgent {
    conn: LineConn,
}

impl ExternalAgent {
    fn connect(
        spec: &AgentSpec,
        t: &ReportTemplate,
        timeout: Duration,
    ) -> Result<Self, AgentError> {
        let mut conn = match spec {
            AgentSpec::Exec(cmd) => LineConn::exec(cmd, timeout)?,
            AgentSpec::Tcp(addr) => LineConn::tcp(addr, timeout)?,
            AgentSpec::Builtin(_) => unreachable!("builtin agents are not connected"),
        };
        conn.send(&ProtocolMessage::Hello {
            template_fingerprint: t.fingerprint(),
            answer_vocabulary: t.answer_vocabulary(),
        })?;
        match conn.recv()? {
            ProtocolMessage::Hello { .. } => Ok(ExternalAgent { conn }),
            ProtocolMessage::Error { code, detail } => Err(AgentError::Reported { code, detail }),
            other => Err(AgentError::Unexpected {
                expected: "hello".into(),
                got: other.kind().into(),
            }),
        }
    }

    fn ask(
        &mut self,
        session_id: u64,
        gold: &StructuredReport,
        q: &QuestionInstance,
        history: &[HistoryEntry],
    ) -> Result<Vec<String>, AgentError> {
        self.conn.send(&ProtocolMessage::Question {
            session_id,
            patient_id: gold.patient_id.clone(),
            image_ref: gold.image_ref.clone(),
            node_id: q.node_id.clone(),
            instance_index: q.instance_index,
            is_followup: q.is_followup,
            text: q.text.clone(),
            history: history.iter().map(WireHistory::from).collect(),
            valid_answers: q.valid_answers.clone(),
            choice_mode: q.choice_mode,
        })?;
        match self.conn.recv()? {
            ProtocolMessage::Answer {
                session_id: sid,
                selections,
            } if sid == session_id => Ok(selections),
            ProtocolMessage::Error { code, detail } => Err(AgentError::Reported { code, detail }),
            other => Err(AgentError::Unexpected {
                expected: format!("answer for session {session_id}"),
                got: other.kind().into(),
            }),
        }
    }

    fn end(&mut self, session_id: u64) -> Result<(), AgentError> {
        self.conn.send(&ProtocolMessage::SessionEnd { session_id })
    }
}

enum Worker<'a> {
    Builtin(Box<BuiltinAgent<'a>>),
    External(Option<ExternalAgent>),
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub parallelism: usize,
    pub timeout: Duration,
    /// Training statistics for the majority agent.
    pub majority: Option<MajorityStats>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            parallelism: 1,
            timeout: DEFAULT_TIMEOUT,
            majority: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFailure {
    pub session_id: u64,
    pub patient_id: String,
    pub image_ref: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub agent: String,
    pub sessions: usize,
    pub failed: usize,
    pub questions: usize,
    pub failures: Vec<SessionFailure>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<StructuredReport>,
    pub metrics: MetricsResult<f64>,
    pub summary: RunSummary,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: the gold report list is empty")]
    Empty,
    #[error(transparent)]
    Agent(AgentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

struct SessionOutcome {
    report: StructuredReport,
    questions: usize,
    failure: Option<String>,
}

fn drive<'a>(
    t: &'a ReportTemplate,
    worker: &mut Worker<'a>,
    session_id: u64,
    gold: &StructuredReport,
    spec: &AgentSpec,
    timeout: Duration,
) -> SessionOutcome {
    let mut s = start_session(t, &gold.patient_id, &gold.image_ref);
    let mut result = (|| -> Result<(), AgentError> {
        if let Worker::External(conn @ None) = worker {
            *conn = Some(ExternalAgent::connect(spec, t, timeout)?);
        }
        if let Worker::Builtin(agent) = worker {
            agent.begin_session(session_id);
        }
        while let Some(q) = s.pending() {
            let history = s.build_history(&q);
            let selections = match worker {
                Worker::Builtin(agent) => agent.answer(&q, &history, Some(gold))?,
                Worker::External(conn) => conn
                    .as_mut()
                    .expect("connected above")
                    .ask(session_id, gold, &q, &history)?,
            };
            s.apply_answer(&q, selections)?;
        }
        if let Worker::External(Some(agent)) = worker {
            agent.end(session_id)?;
        }
        Ok(())
    })();
    if result.is_err() {
        if let Worker::External(conn) = worker {
            // the stream may be desynchronized; reconnect for the next session
            *conn = None;
        }
    }
    let report = match &result {
        Ok(()) => s.finalize().map_err(AgentError::from),
        Err(_) => Ok(StructuredReport::all_negative(
            t,
            &gold.patient_id,
            &gold.image_ref,
        )),
    };
    let report = report.unwrap_or_else(|e| {
        result = Err(e);
        StructuredReport::all_negative(t, &gold.patient_id, &gold.image_ref)
    });
    let failure = result.err().map(|e| {
        warn!(
            "session {session_id} ({}/{}) failed: {e}",
            gold.patient_id, gold.image_ref
        );
        e.to_string()
    });
    SessionOutcome {
        report,
        questions: s.asked().len(),
        failure,
    }
}

/// Runs one session per gold report against the agent and scores the
/// predictions. Results do not depend on `parallelism`.
pub fn run_evaluation(
    t: &ReportTemplate,
    golds: &[StructuredReport],
    spec: &AgentSpec,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    if spec == &AgentSpec::Builtin(BuiltinKind::Majority) && opts.majority.is_none() {
        return Err(EvalError::Agent(AgentError::NoMajorityStats));
    }
    let workers = opts.parallelism.clamp(1, golds.len());
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Option<SessionOutcome>>> =
        Mutex::new((0..golds.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut worker = match spec {
                    AgentSpec::Builtin(kind) => Worker::Builtin(Box::new(BuiltinAgent::new(
                        *kind,
                        t,
                        opts.majority.as_ref(),
                    ))),
                    _ => Worker::External(None),
                };
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(gold) = golds.get(i) else { break };
                    let outcome = drive(t, &mut worker, i as u64, gold, spec, opts.timeout);
                    debug!("session {i} done: {} questions", outcome.questions);
                    outcomes
                        .lock()
                        .expect("no worker panics while holding the lock")[i] = Some(outcome);
                }
            });
        }
    });

    let mut summary = RunSummary {
        agent: spec.to_string(),
        sessions: golds.len(),
        ..RunSummary::default()
    };
    let mut predictions = Vec::with_capacity(golds.len());
    let outcomes = outcomes.into_inner().expect("workers finished");
    for (i, (outcome, gold)) in outcomes.into_iter().zip(golds).enumerate() {
        let outcome = outcome.expect("every session ran");
        summary.questions += outcome.questions;
        if let Some(reason) = outcome.failure {
            summary.failures.push(SessionFailure {
                session_id: i as u64,
                patient_id: gold.patient_id.clone(),
                image_ref: gold.image_ref.clone(),
                reason,
            });
        }
        predictions.push(outcome.report);
    }
    summary.failed = summary.failures.len();
    let metrics = compute_metrics(&predictions, golds, t)?;
    Ok(Evaluation {
        predictions,
        metrics,
        summary,
    })
}

/// Serves a builtin agent over the wire protocol until shutdown or end of
/// input. Questions carry the patient and image, which is how the oracle
/// finds its gold report.
pub fn serve(
    t: &ReportTemplate,
    kind: BuiltinKind,
    golds: &[StructuredReport],
    majority: Option<&MajorityStats>,
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    let by_key: HashMap<(&str, &str), &StructuredReport> =
        golds.iter().map(|g| (g.key(), g)).collect();
    let mut agent = BuiltinAgent::new(kind, t, majority);
    let mut current: Option<u64> = None;
    let mut input = input;
    let reply = |m: ProtocolMessage, output: &mut dyn Write| -> io::Result<()> {
        output.write_all(&protocol_encode(&m))?;
        output.flush()
    };
    while let Some(line) = read_line(&mut input)? {
        let message = match line.and_then(|l| protocol_decode(&l)) {
            Ok(m) => m,
            Err(e) => {
                reply(
                    ProtocolMessage::Error {
                        code: "malformed".into(),
                        detail: e.to_string(),
                    },
                    &mut output,
                )?;
                continue;
            }
        };
        match message {
            ProtocolMessage::Hello {
                template_fingerprint,
                ..
            } => {
                if template_fingerprint != t.fingerprint() {
                    warn!("engine template fingerprint differs from the served template");
                }
                reply(
                    ProtocolMessage::Hello {
                        template_fingerprint: t.fingerprint(),
                        answer_vocabulary: t.answer_vocabulary(),
                    },
                    &mut output,
                )?;
            }
            ProtocolMessage::Question {
                session_id,
                patient_id,
                image_ref,
                node_id,
                instance_index,
                is_followup,
                text,
                history,
                valid_answers,
                choice_mode,
            } => {
                if current != Some(session_id) {
                    agent.begin_session(session_id);
                    current = Some(session_id);
                }
                let Some(node) = t.node(&node_id) else {
                    reply(
                        ProtocolMessage::Error {
                            code: "unknown_node".into(),
                            detail: node_id,
                        },
                        &mut output,
                    )?;
                    continue;
                };
                let q = QuestionInstance {
                    node_id,
                    level: node.level,
                    instance_index,
                    is_followup,
                    text,
                    valid_answers,
                    choice_mode,
                };
                let history: Vec<HistoryEntry> = history
                    .into_iter()
                    .map(|h| HistoryEntry {
                        question_text: h.q,
                        answer_text: h.a,
                        role: h.role,
                    })
                    .collect();
                let gold = by_key
                    .get(&(patient_id.as_str(), image_ref.as_str()))
                    .copied();
                let m = match agent.answer(&q, &history, gold) {
                    Ok(selections) => ProtocolMessage::Answer {
                        session_id,
                        selections,
                    },
                    Err(e) => ProtocolMessage::Error {
                        code: "agent".into(),
                        detail: e.to_string(),
                    },
                };
                reply(m, &mut output)?;
            }
            ProtocolMessage::SessionEnd { .. } => current = None,
            ProtocolMessage::Shutdown {} => break,
            ProtocolMessage::Error { code, detail } => warn!("engine reported `{code}`: {detail}"),
            ProtocolMessage::Answer { .. } => reply(
                ProtocolMessage::Error {
                    code: "unexpected".into(),
                    detail: "agents do not accept answers".into(),
                },
                &mut output,
            )?,
        }
    }
    Ok(())
}
