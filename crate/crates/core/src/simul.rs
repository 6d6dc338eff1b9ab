//! Simultaneous-translation harness: a session driver, the wait-k reference
//! policy, a JSON-lines protocol for out-of-process agents and corpus-level
//! quality/latency reporting.
//!
//! Protocol (one JSON object per LF-terminated line):
//!
//! ```text
//! harness -> agent  {"t":"begin","id":"utt1","unit":"word"}
//!                   {"t":"state","src":["a","b"],"src_done":false,"hyp":["x"]}
//!                   {"t":"end"}
//! agent -> harness  {"t":"read"} | {"t":"write","token":"y"} | {"t":"final"}
//! ```
//!
//! The agent answers every `state` line with exactly one action.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::Exec;
use crate::scorers::{
    average_lagging, bleu_with, differentiable_average_lagging, BleuOptions, BleuReport, DelaySequence, ScoreError,
    ScoreReport,
};

/// Default speech chunk when sources are streamed by duration.
pub const DEFAULT_CHUNK_MS: u64 = 250;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "lowercase", deny_unknown_fields)]
pub enum Action {
    Read,
    Write {
        token: String,
    },
    /// End of sentence.
    Final,
}

impl Action {
    pub fn write(token: impl Into<String>) -> Self {
        Action::Write { token: token.into() }
    }

    fn letter(&self) -> char {
        match self {
            Action::Read => 'R',
            Action::Write { .. } => 'W',
            Action::Final => 'F',
        }
    }
}

/// Compact `RWRWF` rendering of an action list.
pub fn action_string(actions: &[Action]) -> String {
    actions.iter().map(Action::letter).collect()
}

/// Messages sent from the harness to an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "lowercase", deny_unknown_fields)]
pub enum HarnessMessage {
    Begin { id: String, unit: String },
    State { src: Vec<String>, src_done: bool, hyp: Vec<String> },
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayUnit {
    /// One unit per source word.
    Word,
    /// Fixed-duration chunks; delays are milliseconds of audio consumed.
    Ms { chunk_ms: u64, total_ms: u64 },
}

impl DelayUnit {
    pub fn name(&self) -> &'static str {
        match self {
            DelayUnit::Word => "word",
            DelayUnit::Ms { .. } => "ms",
        }
    }
}

/// The source side of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulSource {
    pub id: String,
    pub segments: Vec<String>,
    pub unit: DelayUnit,
}

impl SimulSource {
    /// Whitespace-separated words.
    pub fn words(id: impl Into<String>, text: &str) -> Self {
        Self { id: id.into(), segments: text.split_whitespace().map(str::to_string).collect(), unit: DelayUnit::Word }
    }

    /// `total_ms` of audio cut into `chunk_ms` chunks (the last may be short).
    /// Segments are the chunk indices.
    pub fn speech(id: impl Into<String>, total_ms: u64, chunk_ms: u64) -> Self {
        let chunk_ms = chunk_ms.max(1);
        let n = total_ms.div_ceil(chunk_ms);
        Self {
            id: id.into(),
            segments: (0..n).map(|i| i.to_string()).collect(),
            unit: DelayUnit::Ms { chunk_ms, total_ms },
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// |x| in the delay unit.
    pub fn src_len(&self) -> f64 {
        match self.unit {
            DelayUnit::Word => self.segments.len() as f64,
            DelayUnit::Ms { total_ms, .. } => total_ms as f64,
        }
    }

    /// Delay after `read_count` segments have been consumed.
    pub fn delay_at(&self, read_count: usize) -> f64 {
        match self.unit {
            DelayUnit::Word => read_count as f64,
            DelayUnit::Ms { chunk_ms, total_ms } => (read_count as u64 * chunk_ms).min(total_ms) as f64,
        }
    }
}

/// What an agent sees before choosing its next action.
#[derive(Debug, Clone, Copy)]
pub struct SessionView<'a> {
    pub src: &'a [String],
    pub src_done: bool,
    pub hyp: &'a [String],
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("peer closed the connection")]
    PeerClosed,
    #[error("i/o error: {0}")]
    Io(String),
}

/// A simultaneous policy. One agent instance serves one session at a time.
pub trait Agent {
    fn begin(&mut self, _id: &str, _unit: &str) -> Result<(), AgentError> {
        Ok(())
    }

    fn act(&mut self, view: &SessionView<'_>) -> Result<Action, AgentError>;

    fn end(&mut self) -> Result<(), AgentError> {
        Ok(())
    }
}

impl<A: Agent + ?Sized> Agent for Box<A> {
    fn begin(&mut self, id: &str, unit: &str) -> Result<(), AgentError> {
        (**self).begin(id, unit)
    }

    fn act(&mut self, view: &SessionView<'_>) -> Result<Action, AgentError> {
        (**self).act(view)
    }

    fn end(&mut self) -> Result<(), AgentError> {
        (**self).end()
    }
}

/// Audit record of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulTrace {
    pub id: String,
    pub unit: String,
    pub src_len: f64,
    pub actions: Vec<Action>,
    /// d_i for each written token, in the source unit.
    pub delays: Vec<f64>,
    pub hypothesis: Vec<String>,
    pub finished: bool,
}

impl SimulTrace {
    fn new(source: &SimulSource) -> Self {
        Self {
            id: source.id.clone(),
            unit: source.unit.name().to_string(),
            src_len: source.src_len(),
            actions: Vec::new(),
            delays: Vec::new(),
            hypothesis: Vec::new(),
            finished: false,
        }
    }

    pub fn hypothesis_text(&self) -> String {
        self.hypothesis.join(" ")
    }

    pub fn delay_sequence(&self) -> Result<DelaySequence, ScoreError> {
        DelaySequence::new(self.delays.clone(), self.src_len)
    }

    pub fn average_lagging(&self) -> Result<f64, ScoreError> {
        Ok(average_lagging(&self.delay_sequence()?))
    }

    pub fn differentiable_average_lagging(&self) -> Result<f64, ScoreError> {
        Ok(differentiable_average_lagging(&self.delay_sequence()?))
    }
}

/// Recompute delays from an action list alone.
pub fn replay_delays(actions: &[Action], source: &SimulSource) -> Vec<f64> {
    let mut read = 0;
    let mut delays = Vec::new();
    for a in actions {
        match a {
            Action::Read => read = (read + 1).min(source.len()),
            Action::Write { .. } => delays.push(source.delay_at(read)),
            Action::Final => break,
        }
    }
    delays
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulError {
    #[error("session `{}`: agent protocol violation: {reason}", trace.id)]
    AgentProtocolViolation { reason: String, trace: Box<SimulTrace> },
    #[error("session `{}`: action budget of {budget} exhausted", trace.id)]
    ActionBudgetExceeded { budget: usize, trace: Box<SimulTrace> },
    #[error("session `{}`: protocol error: {reason}", trace.id)]
    ProtocolError { reason: String, trace: Box<SimulTrace> },
    #[error("session `{}`: peer closed", trace.id)]
    PeerClosed { trace: Box<SimulTrace> },
    #[error("session `{}`: i/o error: {reason}", trace.id)]
    Io { reason: String, trace: Box<SimulTrace> },
    #[error("agent unavailable: {0}")]
    AgentUnavailable(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

impl SimulError {
    /// The trace recorded up to the failure, when there was a session.
    pub fn partial_trace(&self) -> Option<&SimulTrace> {
        match self {
            SimulError::AgentProtocolViolation { trace, .. }
            | SimulError::ActionBudgetExceeded { trace, .. }
            | SimulError::ProtocolError { trace, .. }
            | SimulError::PeerClosed { trace }
            | SimulError::Io { trace, .. } => Some(trace),
            _ => None,
        }
    }

    fn from_agent(e: AgentError, trace: SimulTrace) -> Self {
        let trace = Box::new(trace);
        match e {
            AgentError::Protocol(reason) => SimulError::ProtocolError { reason, trace },
            AgentError::PeerClosed => SimulError::PeerClosed { trace },
            AgentError::Io(reason) => SimulError::Io { reason, trace },
        }
    }
}

/// Drive one session to completion.
///
/// A READ past the end of the source is tolerated once and puts the session
/// in a forced-finish state where the agent must WRITE or finish; a second
/// consecutive over-read is a protocol violation. The session ends at
/// `final`, or fails once `max_actions` actions have been taken without one.
pub fn run_session(agent: &mut dyn Agent, source: &SimulSource, max_actions: usize) -> Result<SimulTrace, SimulError> {
    let mut trace = SimulTrace::new(source);
    let mut read_count = 0usize;
    let mut forced = false;
    if let Err(e) = agent.begin(&source.id, source.unit.name()) {
        return Err(SimulError::from_agent(e, trace));
    }
    while !trace.finished {
        if trace.actions.len() >= max_actions {
            return Err(SimulError::ActionBudgetExceeded { budget: max_actions, trace: Box::new(trace) });
        }
        let view = SessionView {
            src: &source.segments[..read_count],
            src_done: read_count == source.len(),
            hyp: &trace.hypothesis,
        };
        let action = match agent.act(&view) {
            Ok(a) => a,
            Err(e) => return Err(SimulError::from_agent(e, trace)),
        };
        match &action {
            Action::Read if read_count < source.len() => read_count += 1,
            Action::Read if !forced => forced = true,
            Action::Read => {
                return Err(SimulError::AgentProtocolViolation {
                    reason: "READ after the source was exhausted; expected WRITE or final".into(),
                    trace: Box::new(trace),
                })
            }
            Action::Write { token } => {
                if token.is_empty() || token.chars().any(char::is_whitespace) {
                    return Err(SimulError::AgentProtocolViolation {
                        reason: format!("WRITE token {token:?} is empty or contains whitespace"),
                        trace: Box::new(trace),
                    });
                }
                forced = false;
                trace.hypothesis.push(token.clone());
                trace.delays.push(source.delay_at(read_count));
            }
            Action::Final => trace.finished = true,
        }
        trace.actions.push(action);
    }
    if let Err(e) = agent.end() {
        return Err(SimulError::from_agent(e, trace));
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Built-in agents

/// Wait-k over a fixed token script: before token i (1-based) the agent has
/// read min(k + i - 1, |x|) segments.
#[derive(Debug, Clone)]
pub struct WaitK {
    k: usize,
    tokens: Option<Vec<String>>,
}

/// `k` below 1 is treated as 1.
pub fn waitk_agent(k: usize, scripted_tokens: Vec<String>) -> WaitK {
    WaitK { k: k.max(1), tokens: Some(scripted_tokens) }
}

impl WaitK {
    /// Wait-k that copies source segment i as target token i.
    pub fn echo(k: usize) -> Self {
        WaitK { k: k.max(1), tokens: None }
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl Agent for WaitK {
    fn act(&mut self, view: &SessionView<'_>) -> Result<Action, AgentError> {
        let i = view.hyp.len();
        let needed = self.k + i;
        if view.src.len() < needed && !view.src_done {
            return Ok(Action::Read);
        }
        let next = match &self.tokens {
            Some(tokens) => tokens.get(i),
            None => view.src.get(i),
        };
        Ok(next.map_or(Action::Final, |t| Action::write(t.clone())))
    }
}

/// Replays recorded action streams, ignoring what it is shown.
#[derive(Debug, Clone, Default)]
pub struct ReplayAgent {
    by_id: HashMap<String, Vec<Action>>,
    fallback: Option<Vec<Action>>,
    current: VecDeque<Action>,
}

impl ReplayAgent {
    /// Same stream for every session.
    pub fn new(actions: Vec<Action>) -> Self {
        Self { fallback: Some(actions), ..Self::default() }
    }

    /// One stream per session id.
    pub fn by_id(streams: HashMap<String, Vec<Action>>) -> Self {
        Self { by_id: streams, ..Self::default() }
    }

    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a SimulTrace>) -> Self {
        Self::by_id(traces.into_iter().map(|t| (t.id.clone(), t.actions.clone())).collect())
    }
}

impl Agent for ReplayAgent {
    fn begin(&mut self, id: &str, _unit: &str) -> Result<(), AgentError> {
        let stream = self
            .by_id
            .get(id)
            .or(self.fallback.as_ref())
            .ok_or_else(|| AgentError::Protocol(format!("no recorded actions for `{id}`")))?;
        self.current = stream.iter().cloned().collect();
        Ok(())
    }

    fn act(&mut self, _view: &SessionView<'_>) -> Result<Action, AgentError> {
        self.current.pop_front().ok_or_else(|| AgentError::Protocol("recorded action stream exhausted".into()))
    }
}

// ---------------------------------------------------------------------------
// External agents

/// An agent in another process or across a socket, spoken to over the line
/// protocol.
pub struct ExternalAgent {
    reader: Box<dyn BufRead + Send>,
    writer: Option<Box<dyn Write + Send>>,
    child: Option<Child>,
    line: String,
}

impl fmt::Debug for ExternalAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalAgent").field("child", &self.child.as_ref().map(Child::id)).finish()
    }
}

fn io_err(e: io::Error) -> AgentError {
    match e.kind() {
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::UnexpectedEof => {
            AgentError::PeerClosed
        }
        _ => AgentError::Io(e.to_string()),
    }
}

impl ExternalAgent {
    pub fn new(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self { reader: Box::new(reader), writer: Some(Box::new(writer)), child: None, line: String::new() }
    }

    /// Run `command` through `sh -c` and talk to it on stdin/stdout.
    pub fn spawn(command: &str) -> Result<Self, SimulError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SimulError::AgentUnavailable(format!("spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut agent = Self::new(BufReader::new(stdout), stdin);
        agent.child = Some(child);
        Ok(agent)
    }

    pub fn connect_tcp(addr: &str) -> Result<Self, SimulError> {
        let stream =
            TcpStream::connect(addr).map_err(|e| SimulError::AgentUnavailable(format!("connect {addr}: {e}")))?;
        let reader = stream.try_clone().map_err(|e| SimulError::AgentUnavailable(e.to_string()))?;
        Ok(Self::new(BufReader::new(reader), stream))
    }

    fn send(&mut self, msg: &HarnessMessage) -> Result<(), AgentError> {
        let w = self.writer.as_mut().ok_or(AgentError::PeerClosed)?;
        let mut line = serde_json::to_string(msg).map_err(|e| AgentError::Io(e.to_string()))?;
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    fn receive(&mut self) -> Result<Action, AgentError> {
        self.line.clear();
        let n = self.reader.read_line(&mut self.line).map_err(io_err)?;
        if n == 0 {
            return Err(AgentError::PeerClosed);
        }
        let text = self.line.trim_end_matches(['\n', '\r']);
        serde_json::from_str(text).map_err(|e| AgentError::Protocol(format!("bad action line {text:?}: {e}")))
    }
}

impl Agent for ExternalAgent {
    fn begin(&mut self, id: &str, unit: &str) -> Result<(), AgentError> {
        self.send(&HarnessMessage::Begin { id: id.to_string(), unit: unit.to_string() })
    }

    fn act(&mut self, view: &SessionView<'_>) -> Result<Action, AgentError> {
        self.send(&HarnessMessage::State { src: view.src.to_vec(), src_done: view.src_done, hyp: view.hyp.to_vec() })?;
        self.receive()
    }

    fn end(&mut self) -> Result<(), AgentError> {
        self.send(&HarnessMessage::End)
    }
}

impl Drop for ExternalAgent {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved child exit on EOF.
        self.writer = None;
        if let Some(mut child) = self.child.take() {
            let _ = child.wait();
        }
    }
}

/// Serve `agent` over the line protocol until the harness closes the stream.
/// Returns the number of sessions completed.
pub fn serve_agent(agent: &mut dyn Agent, reader: impl BufRead, mut writer: impl Write) -> Result<usize, AgentError> {
    let mut sessions = 0;
    for line in reader.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let msg: HarnessMessage =
            serde_json::from_str(&line).map_err(|e| AgentError::Protocol(format!("bad harness line {line:?}: {e}")))?;
        match msg {
            HarnessMessage::Begin { id, unit } => agent.begin(&id, &unit)?,
            HarnessMessage::State { src, src_done, hyp } => {
                let action = agent.act(&SessionView { src: &src, src_done, hyp: &hyp })?;
                let mut out = serde_json::to_string(&action).map_err(|e| AgentError::Io(e.to_string()))?;
                out.push('\n');
                writer.write_all(out.as_bytes()).map_err(io_err)?;
                writer.flush().map_err(io_err)?;
            }
            HarnessMessage::End => {
                agent.end()?;
                sessions += 1;
            }
        }
    }
    Ok(sessions)
}

// ---------------------------------------------------------------------------
// Corpus evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyRegime {
    Low,
    Medium,
    High,
}

impl LatencyRegime {
    /// High above 6, medium above 3, low otherwise.
    pub fn from_al(al: f64) -> Self {
        if al > 6.0 {
            LatencyRegime::High
        } else if al > 3.0 {
            LatencyRegime::Medium
        } else {
            LatencyRegime::Low
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LatencyRegime::Low => "low",
            LatencyRegime::Medium => "medium",
            LatencyRegime::High => "high",
        }
    }
}

impl fmt::Display for LatencyRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sentence of a simultaneous evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulCase {
    pub source: SimulSource,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEvaluation {
    pub traces: Vec<SimulTrace>,
    /// Per-sentence (AL, DAL), in case order.
    pub latencies: Vec<(f64, f64)>,
    pub bleu: BleuReport,
    /// Macro averages over sentences.
    pub al: f64,
    pub dal: f64,
    pub regime: LatencyRegime,
    pub unit: String,
}

impl CorpusEvaluation {
    pub fn report(&self) -> ScoreReport {
        let mut r = ScoreReport::new();
        r.push("bleu", self.bleu.bleu)
            .push("al", self.al)
            .push("dal", self.dal)
            .push_label("regime", self.regime.as_str())
            .push_label("unit", &self.unit);
        r
    }
}

/// Run one session per case with a fresh agent from `factory`, then score.
pub fn evaluate_corpus<F>(
    cases: &[SimulCase],
    factory: F,
    max_actions: usize,
    bleu_opts: BleuOptions,
    exec: Exec,
) -> Result<CorpusEvaluation, SimulError>
where
    F: Fn(&SimulCase) -> Result<Box<dyn Agent>, SimulError> + Sync + Send,
{
    let results = exec.map(cases, |case| -> Result<(SimulTrace, (f64, f64)), SimulError> {
        let mut agent = factory(case)?;
        let trace = run_session(agent.as_mut(), &case.source, max_actions)?;
        let d = trace.delay_sequence()?;
        let lat = (average_lagging(&d), differentiable_average_lagging(&d));
        Ok((trace, lat))
    });
    let mut traces = Vec::with_capacity(cases.len());
    let mut latencies = Vec::with_capacity(cases.len());
    for r in results {
        let (t, l) = r?;
        traces.push(t);
        latencies.push(l);
    }
    let hyps: Vec<String> = traces.iter().map(SimulTrace::hypothesis_text).collect();
    let refs: Vec<&str> = cases.iter().map(|c| c.reference.as_str()).collect();
    let bleu = bleu_with(&refs, &hyps, bleu_opts, exec)?;
    let n = latencies.len().max(1) as f64;
    let al = latencies.iter().map(|l| l.0).sum::<f64>() / n;
    let dal = latencies.iter().map(|l| l.1).sum::<f64>() / n;
    let unit = cases.first().map_or("word", |c| c.source.unit.name()).to_string();
    Ok(CorpusEvaluation { traces, latencies, bleu, al, dal, regime: LatencyRegime::from_al(al), unit })
}
