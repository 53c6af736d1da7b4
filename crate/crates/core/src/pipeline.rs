//! File-level glue: build a model from a merged trace, replay a trace for
//! records, and run the detectors over both.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisReport, Analyzer, Records};
use crate::detect::{
    broadcast_fanout, bus_volume_series, detect_bus_amplification, detect_double_free, detect_read_stall, DetectError,
    Direction, Finding, Series, StallConfig,
};
use crate::event::{EventReader, TraceError, TraceEvent};
use crate::sht::{Header, ShtConfig};
use crate::state::{AttributeTree, StateError, StateSystem};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Trace {
        path: PathBuf,
        #[source]
        source: TraceError,
    },
    #[error("{}: line {line}: {source}", path.display())]
    State {
        path: PathBuf,
        line: usize,
        #[source]
        source: StateError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Detect(#[from] DetectError),
}

pub struct Analysis {
    pub report: AnalysisReport,
    pub records: Records,
    pub header: Header,
}

fn run<W: Write + Seek>(
    path: &Path,
    events: impl Iterator<Item = Result<(usize, TraceEvent), TraceError>>,
    sink: W,
    config: ShtConfig,
    tree: AttributeTree,
    collect: bool,
) -> Result<(Analysis, StateSystem<W>), PipelineError> {
    let state_err = |line, source| PipelineError::State {
        path: path.to_owned(),
        line,
        source,
    };
    let model = StateSystem::new(sink, config, tree).map_err(|e| state_err(0, e))?;
    let mut a = Analyzer::new(model, collect);
    for item in events {
        let (line, e) = item.map_err(|source| PipelineError::Trace {
            path: path.to_owned(),
            source,
        })?;
        a.handle(&e).map_err(|s| state_err(line, s))?;
    }
    let (report, records, header, model) = a.finalize(None).map_err(|e| state_err(0, e))?;
    Ok((
        Analysis {
            report,
            records,
            header,
        },
        model,
    ))
}

fn reader(path: &Path) -> Result<EventReader<BufReader<File>>, PipelineError> {
    let f = File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(EventReader::new(BufReader::new(f)))
}

fn numbered(mut r: EventReader<BufReader<File>>) -> impl Iterator<Item = Result<(usize, TraceEvent), TraceError>> {
    std::iter::from_fn(move || {
        let e = r.next()?;
        Some(e.map(|e| (r.line(), e)))
    })
}

/// Streams a merged trace into a model file. Records are kept only when
/// `collect` is set, so memory stays flat otherwise.
pub fn analyze_file(trace: &Path, model: &Path, config: ShtConfig, collect: bool) -> Result<Analysis, PipelineError> {
    let out = File::create(model).map_err(|source| PipelineError::Io {
        path: model.to_owned(),
        source,
    })?;
    let tree = AttributeTree::with_spill(true).map_err(|source| PipelineError::Io {
        path: model.to_owned(),
        source,
    })?;
    let (analysis, state) = run(
        trace,
        numbered(reader(trace)?),
        BufWriter::new(out),
        config,
        tree,
        collect,
    )?;
    if let Some(mut w) = state.into_sink() {
        w.flush().map_err(|source| PipelineError::Io {
            path: model.to_owned(),
            source,
        })?;
    }
    Ok(analysis)
}

/// Replays a merged trace for its records; the model is built in a scratch
/// file and dropped.
pub fn replay_file(trace: &Path) -> Result<Analysis, PipelineError> {
    let scratch = tempfile::tempfile().map_err(|source| PipelineError::Io {
        path: trace.to_owned(),
        source,
    })?;
    let tree = AttributeTree::new(true);
    let (analysis, _) = run(
        trace,
        numbered(reader(trace)?),
        BufWriter::new(scratch),
        ShtConfig::default(),
        tree,
        true,
    )?;
    Ok(analysis)
}

/// In-memory analysis; returns the model bytes as well.
pub fn analyze_events(events: &[TraceEvent], config: ShtConfig) -> Result<(Analysis, Vec<u8>), PipelineError> {
    let path = Path::new("<memory>");
    let it = events.iter().cloned().enumerate().map(|(i, e)| Ok((i + 1, e)));
    let (analysis, state) = run(
        path,
        it,
        Cursor::new(Vec::new()),
        config,
        AttributeTree::new(true),
        true,
    )?;
    let bytes = state.into_sink().map(Cursor::into_inner).unwrap_or_default();
    Ok((analysis, bytes))
}

/// Loads every event of a merged trace.
pub fn load_events(trace: &Path) -> Result<Vec<TraceEvent>, PipelineError> {
    reader(trace)?
        .map(|e| {
            e.map_err(|source| PipelineError::Trace {
                path: trace.to_owned(),
                source,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub bucket_ns: i64,
    pub threshold: f64,
    pub stall: StallConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            bucket_ns: crate::detect::DEFAULT_BUCKET_NS,
            threshold: crate::detect::DEFAULT_AMPLIFICATION_THRESHOLD,
            stall: StallConfig::default(),
        }
    }
}

pub struct Detection {
    pub findings: Vec<Finding>,
    pub series_in: Series,
    pub series_out: Series,
}

/// All detectors over a merged experiment and its replay records.
pub fn detect_all(events: &[TraceEvent], records: &Records, cfg: &DetectConfig) -> Result<Detection, PipelineError> {
    let series_in = bus_volume_series(events, cfg.bucket_ns, Direction::In)?;
    let series_out = bus_volume_series(events, cfg.bucket_ns, Direction::Out)?;
    let mut findings = detect_bus_amplification(&series_in, &series_out, cfg.threshold, broadcast_fanout(events));
    findings.extend(detect_double_free(events));
    findings.extend(detect_read_stall(&records.cluster_reads, &series_out, cfg.stall));
    findings.sort_by_key(|f| (f.t0, f.kind, f.t1));
    Ok(Detection {
        findings,
        series_in,
        series_out,
    })
}
