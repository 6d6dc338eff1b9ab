//! score, simul and the agent server.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use s2t_core::scorers::{bleu_with, chrf_with, wer_with, BleuTokenizer, ChrfOptions};
use s2t_core::simul::{evaluate_corpus, serve_agent, ExternalAgent, ReplayAgent, SimulCase, SimulSource, WaitK};
use s2t_core::{read_manifest, waitk_agent, Agent, BleuOptions, Exec, ScoreError, ScoreReport, SimulError, SimulTrace};

use crate::{usage_error, AgentArgs, CmdResult, ExitContext, Failure, ScoreArgs, SimulArgs, UnitArg};

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).usage()?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Mismatched or empty inputs are caller errors; anything else is a failure.
fn score_failure(e: ScoreError) -> Failure {
    let code = match e {
        ScoreError::LengthMismatch { .. } | ScoreError::EmptyReference { .. } | ScoreError::EmptyCorpus => 2,
        ScoreError::InvalidDelays(_) => 1,
    };
    Failure { code, error: e.into() }
}

fn bleu_options(char_level: bool) -> BleuOptions {
    let tokenizer = if char_level { BleuTokenizer::Char } else { BleuTokenizer::Word13a };
    BleuOptions { tokenizer, ..BleuOptions::default() }
}

fn emit(report: &ScoreReport, record: bool) {
    if record {
        println!("{}", report.to_record());
    } else {
        print!("{}", report.to_flat());
    }
}

pub fn score(args: &ScoreArgs, exec: Exec) -> CmdResult {
    let refs = read_lines(&args.refs)?;
    let hyps = read_lines(&args.hyps)?;
    if refs.len() != hyps.len() {
        return Err(usage_error(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let bleu = args.bleu || !(args.wer || args.chrf);
    let mut report = ScoreReport::new();
    if args.wer {
        report.extend(&wer_with(&refs, &hyps, exec).map_err(score_failure)?.report());
    }
    if bleu {
        report.extend(&bleu_with(&refs, &hyps, bleu_options(args.char), exec).map_err(score_failure)?.report());
    }
    if args.chrf {
        let c = chrf_with(&refs, &hyps, ChrfOptions::default(), exec).map_err(score_failure)?;
        report.push("chrf", c);
    }
    emit(&report, args.record);
    Ok(())
}

enum AgentSpec {
    WaitK(usize),
    Exec(String),
    Tcp(String),
}

fn parse_agent_spec(spec: &str) -> Result<AgentSpec, Failure> {
    let bad = || usage_error(format!("agent `{spec}`: expected waitk:K, exec:COMMAND or tcp:HOST:PORT"));
    let (kind, rest) = spec.split_once(':').ok_or_else(bad)?;
    match kind {
        "waitk" => match rest.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(AgentSpec::WaitK(k)),
            _ => Err(usage_error(format!("wait-k needs a positive integer, got `{rest}`"))),
        },
        "exec" if !rest.trim().is_empty() => Ok(AgentSpec::Exec(rest.to_string())),
        "tcp" if rest.contains(':') => Ok(AgentSpec::Tcp(rest.to_string())),
        _ => Err(bad()),
    }
}

fn simul_failure(e: SimulError) -> Failure {
    match e {
        SimulError::Score(s) => score_failure(s),
        other => Failure { code: 1, error: other.into() },
    }
}

fn write_traces(path: &Path, traces: &[SimulTrace], latencies: &[(f64, f64)]) -> anyhow::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for (t, (al, dal)) in traces.iter().zip(latencies) {
        let mut v = serde_json::to_value(t)?;
        v["al"] = (*al).into();
        v["dal"] = (*dal).into();
        serde_json::to_writer(&mut out, &v)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn simul(args: &SimulArgs, exec: Exec) -> CmdResult {
    let spec = parse_agent_spec(&args.agent)?;
    if args.chunk_ms == 0 {
        return Err(usage_error("--chunk-ms must be positive"));
    }
    let bytes = fs::read(&args.manifest).with_context(|| format!("reading {}", args.manifest.display())).usage()?;
    let rows = read_manifest(&bytes).usage()?;
    let refs = match &args.refs {
        Some(p) => read_lines(p)?,
        None => rows.iter().map(|r| r.tgt_text.clone()).collect(),
    };
    if refs.len() != rows.len() {
        return Err(usage_error(format!("{} manifest rows but {} references", rows.len(), refs.len())));
    }
    let cases: Vec<SimulCase> = rows
        .iter()
        .zip(&refs)
        .map(|(row, reference)| {
            let source = match args.unit {
                UnitArg::Word => SimulSource::words(&row.id, row.src_text.as_deref().unwrap_or(&row.tgt_text)),
                // 10 ms frame shift.
                UnitArg::Ms => SimulSource::speech(&row.id, row.n_frames * 10, args.chunk_ms),
            };
            SimulCase { source, reference: reference.clone() }
        })
        .collect();
    if let Some(c) = cases.iter().find(|c| c.source.is_empty()) {
        return Err(usage_error(format!("row `{}` has an empty source", c.source.id)));
    }
    let scripts: HashMap<&str, Vec<String>> =
        rows.iter().map(|r| (r.id.as_str(), r.tgt_text.split_whitespace().map(str::to_string).collect())).collect();
    let unit = args.unit;
    let factory = |case: &SimulCase| -> Result<Box<dyn Agent>, SimulError> {
        Ok(match &spec {
            AgentSpec::WaitK(k) => match unit {
                UnitArg::Word => Box::new(WaitK::echo(*k)),
                UnitArg::Ms => Box::new(waitk_agent(*k, scripts[case.source.id.as_str()].clone())),
            },
            AgentSpec::Exec(cmd) => Box::new(ExternalAgent::spawn(cmd)?),
            AgentSpec::Tcp(addr) => Box::new(ExternalAgent::connect_tcp(addr)?),
        })
    };
    let eval = evaluate_corpus(&cases, factory, args.max_actions, bleu_options(args.char), exec).map_err(|e| {
        if let Some(t) = e.partial_trace() {
            eprintln!("partial trace for `{}`: {}", t.id, serde_json::to_string(t).unwrap_or_default());
        }
        simul_failure(e)
    })?;
    if let Some(p) = &args.traces {
        write_traces(p, &eval.traces, &eval.latencies)?;
    }
    emit(&eval.report(), args.record);
    Ok(())
}

pub fn agent(args: &AgentArgs) -> CmdResult {
    let mut agent: Box<dyn Agent> = match (&args.policy, &args.replay) {
        (Some(p), None) => match parse_agent_spec(p)? {
            AgentSpec::WaitK(k) => Box::new(WaitK::echo(k)),
            _ => return Err(usage_error("the agent server only runs waitk:K")),
        },
        (None, Some(path)) => {
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display())).usage()?;
            let mut traces = Vec::new();
            for (i, line) in io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let t: SimulTrace =
                    serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1)).usage()?;
                traces.push(t);
            }
            Box::new(ReplayAgent::from_traces(&traces))
        }
        _ => return Err(usage_error("give exactly one of --policy or --replay")),
    };
    let sessions = serve_agent(agent.as_mut(), io::stdin().lock(), io::stdout().lock())?;
    eprintln!("agent: served {sessions} sessions");
    Ok(())
}
