use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use storetrace::aggregate::{merge_files, read_experiment, trace_files};
use storetrace::analysis::Records;
use storetrace::detect::latency_report;
use storetrace::event::TraceEvent;
use storetrace::flows::{build_flows, flow_latency_breakdown, RequestFlow};
use storetrace::pipeline::{analyze_file, detect_all, replay_file, DetectConfig};
use storetrace::sht::{Header, ShtConfig, ShtReader};
use storetrace::spans::{attach_redis_spans, reconstruct_spans, SpanForest};
use storetrace::syngen::{generate, Fault, GenError, Scenario, ScenarioConfig, ServiceTime};

use crate::{GenArgs, Inputs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("{}", p.display()))?;
            let mut w = BufWriter::new(f);
            serde_json::to_writer_pretty(&mut w, value)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        None => {
            let mut w = io::stdout().lock();
            serde_json::to_writer_pretty(&mut w, value)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn header_json(h: &Header) -> serde_json::Value {
    json!({
        "fanout": h.fanout,
        "block_size": h.block_size,
        "tree_start": h.tree_start,
        "tree_end": h.tree_end,
        "blocks": h.block_count,
        "depth": h.depth,
        "leaves": h.leaf_count,
        "intervals": h.interval_count,
        "quarks": h.quark_count,
    })
}

pub fn gen(a: GenArgs) -> Result<()> {
    let scenario: Scenario = a.scenario.parse().map_err(|e: GenError| usage(e.to_string()))?;
    let mut cfg = ScenarioConfig::for_scenario(scenario);
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.nodes {
        cfg.nodes = v;
    }
    if let Some(v) = a.clients {
        cfg.clients = v;
    }
    if let Some(v) = a.requests {
        cfg.requests = v;
    }
    if let Some(v) = a.payload {
        cfg.payload = v;
    }
    if let Some(v) = a.gossip_header {
        cfg.gossip_header = v;
    }
    if !a.faults.is_empty() {
        cfg.faults.clear();
        for f in &a.faults {
            if f != "none" {
                cfg.faults.push(f.parse::<Fault>().map_err(|e| usage(e.to_string()))?);
            }
        }
    }
    for o in &a.offsets {
        let (h, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("offset `{o}` is not host=ns")))?;
        let v: i64 = v.parse().map_err(|_| usage(format!("offset `{o}` is not host=ns")))?;
        cfg.offsets.insert(h.to_owned(), v);
    }
    cfg.pings |= a.pings;
    if let Some(ns) = a.service_ns {
        cfg.service = ServiceTime::Deterministic { ns };
    }
    if let Some(mean_ns) = a.service_mean_ns {
        cfg.service = ServiceTime::Exponential { mean_ns };
    }
    let g = match generate(scenario, &cfg) {
        Ok(g) => g,
        Err(GenError::ConfigInvalid(m)) => return Err(usage(m)),
        Err(e) => return Err(e.into()),
    };
    g.write_dir(&a.out).with_context(|| format!("{}", a.out.display()))?;
    let events: usize = g.streams.iter().map(|s| s.events.len()).sum();
    println!(
        "{}: {} hosts, {} events -> {}",
        scenario,
        g.streams.len(),
        events,
        a.out.display()
    );
    Ok(())
}

pub fn merge(input: &Path, out: &Path, sync: bool) -> Result<()> {
    let files = trace_files(input).with_context(|| format!("{}", input.display()))?;
    if files.is_empty() {
        bail!("{}: no trace files", input.display());
    }
    let f = File::create(out).with_context(|| format!("{}", out.display()))?;
    let mut w = BufWriter::new(f);
    let (offsets, summary) = merge_files(&files, sync, &mut w)?;
    w.flush().with_context(|| format!("{}", out.display()))?;
    let sidecar = out.with_file_name("offsets.json");
    offsets
        .write(&sidecar)
        .with_context(|| format!("{}", sidecar.display()))?;
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    emit(None, &summary)
}

pub fn analyze(input: &Path, out: &Path, fanout: u32, block_size: u32) -> Result<()> {
    let cfg = ShtConfig { fanout, block_size };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let a = analyze_file(input, out, cfg, false)?;
    let report = json!({ "analysis": a.report, "model": header_json(&a.header) });
    emit(Some(&out.with_file_name("report.json")), &report)?;
    println!(
        "{} events, {} quarks, {} intervals, depth {} -> {}",
        a.report.events,
        a.header.quark_count,
        a.header.interval_count,
        a.header.depth,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FlowOut<'a> {
    #[serde(flatten)]
    flow: &'a RequestFlow,
    breakdown: Option<BTreeMap<String, i64>>,
}

pub fn flows_with_breakdown(flows: &[RequestFlow]) -> Vec<serde_json::Value> {
    flows
        .iter()
        .map(|f| {
            let out = FlowOut {
                flow: f,
                breakdown: flow_latency_breakdown(f).ok(),
            };
            serde_json::to_value(out).expect("flow serializes")
        })
        .collect()
}

pub fn flows(i: &Inputs) -> Result<()> {
    let a = replay_file(&i.trace)?;
    let flows = build_flows(&a.records);
    emit(i.out.as_deref(), &flows_with_breakdown(&flows))
}

#[derive(Serialize)]
pub struct SpansOut<'a> {
    pub depth: usize,
    pub depth_with_flows: usize,
    #[serde(flatten)]
    pub forest: &'a SpanForest,
}

pub fn span_forest(events: &[TraceEvent], records: &Records) -> (SpanForest, Vec<RequestFlow>) {
    let flows = build_flows(records);
    let mut forest = reconstruct_spans(events);
    attach_redis_spans(&mut forest, &flows);
    (forest, flows)
}

pub fn spans(i: &Inputs) -> Result<()> {
    let x = read_experiment(&i.trace)?;
    let a = replay_file(&i.trace)?;
    let (forest, _) = span_forest(&x.events, &a.records);
    let out = SpansOut {
        depth: forest.depth(false),
        depth_with_flows: forest.depth(true),
        forest: &forest,
    };
    emit(i.out.as_deref(), &out)
}

pub fn report(i: &Inputs) -> Result<()> {
    let a = replay_file(&i.trace)?;
    let model = match &i.model {
        Some(p) => {
            let r = ShtReader::open(p).with_context(|| format!("{}", p.display()))?;
            Some(header_json(r.header()))
        }
        None => None,
    };
    let out = json!({
        "latency": latency_report(&a.records.commands),
        "analysis": a.report,
        "model": model,
    });
    emit(i.out.as_deref(), &out)
}

pub fn detect(i: &Inputs, bucket_ns: i64, threshold: f64, series_out: Option<&Path>) -> Result<()> {
    if bucket_ns <= 0 {
        return Err(usage("bucket width must be positive"));
    }
    let x = read_experiment(&i.trace)?;
    if x.is_empty() {
        bail!("{}: empty trace", i.trace.display());
    }
    let a = replay_file(&i.trace)?;
    let cfg = DetectConfig {
        bucket_ns,
        threshold,
        ..DetectConfig::default()
    };
    let d = detect_all(&x.events, &a.records, &cfg)?;
    if let Some(base) = series_out {
        for (suffix, s) in [("in", &d.series_in), ("out", &d.series_out)] {
            let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
            let p = base.with_file_name(format!("{stem}-{suffix}.csv"));
            std::fs::write(&p, s.to_csv()).with_context(|| format!("{}", p.display()))?;
        }
    }
    emit(i.out.as_deref(), &json!({ "findings": d.findings }))
}

pub fn query(model: &Path, path: &str, t0: Option<i64>, t1: Option<i64>) -> Result<()> {
    let r = ShtReader::open(model).with_context(|| format!("{}", model.display()))?;
    let q = r.quark(path).map_err(|e| usage(e.to_string()))?;
    let (t0, t1) = (t0.unwrap_or(r.start()), t1.unwrap_or(r.end()));
    if t0 > t1 {
        return Err(usage("t0 must not exceed t1"));
    }
    let mut w = BufWriter::new(io::stdout().lock());
    for iv in r.query_range(q, t0, t1)? {
        writeln!(w, "{}\t{}\t{}", iv.start, iv.end, iv.value)?;
    }
    w.flush()?;
    Ok(())
}
