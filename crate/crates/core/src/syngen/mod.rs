//! Deterministic synthetic traces with ground-truth sidecars.
//!
//! Each scenario runs a small discrete-event simulation in true time and
//! emits one stream per host. Host clocks are skewed by the configured
//! offsets, so raw timestamps are `BASE_TS + true + skew[host]`.

mod commands;
mod micro;
mod publish;
mod ssl;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{write_stream_file, TraceError, TraceEvent, TraceStream};
use crate::flows::RequestFlow;
use crate::spans::SpanKind;

/// True time zero on every host clock.
pub const BASE_TS: i64 = 1_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    ClusterPublish,
    SslDoubleFree,
    Microservices,
    Commands,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::ClusterPublish,
        Scenario::SslDoubleFree,
        Scenario::Microservices,
        Scenario::Commands,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ClusterPublish => "cluster-publish",
            Scenario::SslDoubleFree => "ssl-double-free",
            Scenario::Microservices => "microservices",
            Scenario::Commands => "commands",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, GenError> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| GenError::ConfigInvalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Publishes go to every peer instead of only the subscriber's node.
    BroadcastAmplification,
    /// A second thread frees the SSL connection again.
    SslPendingDoubleFree,
    /// One cluster message takes this much longer to process.
    ReadStall { delay_ns: i64 },
    /// Gateway requests go out in pairs on one keep-alive connection.
    PipelinedHttp,
    /// The peer side of the last publish is missing.
    Truncate,
}

impl FromStr for Fault {
    type Err = GenError;

    /// `broadcast-amplification`, `ssl-pending-double-free`,
    /// `read-stall[=<ns>]`, `pipelined-http`, `truncate`.
    fn from_str(s: &str) -> Result<Self, GenError> {
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || GenError::ConfigInvalid(format!("unknown fault `{s}`"));
        let f = match name {
            "broadcast-amplification" => Fault::BroadcastAmplification,
            "ssl-pending-double-free" => Fault::SslPendingDoubleFree,
            "pipelined-http" => Fault::PipelinedHttp,
            "truncate" => Fault::Truncate,
            "read-stall" => Fault::ReadStall {
                delay_ns: match arg {
                    Some(a) => a.parse().map_err(|_| bad())?,
                    None => 50_000_000,
                },
            },
            _ => return Err(bad()),
        };
        if arg.is_some() && !matches!(f, Fault::ReadStall { .. }) {
            return Err(bad());
        }
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTime {
    Exponential { mean_ns: i64 },
    Deterministic { ns: i64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub nodes: usize,
    pub clients: usize,
    /// Publishes, or requests per command, or gateway requests.
    pub requests: usize,
    pub payload: i64,
    pub gossip_header: i64,
    pub service: ServiceTime,
    /// Clock skew per host in ns, added to raw timestamps.
    pub offsets: BTreeMap<String, i64>,
    pub faults: Vec<Fault>,
    /// Ping/pong gossip between every node pair.
    pub pings: bool,
    pub ping_interval_ns: i64,
    pub publish_interval_ns: i64,
    pub net_base_ns: i64,
    pub net_jitter_mean_ns: i64,
    pub ssl_bytes: [i64; 3],
    /// Payload multiplier for publishes near a read stall.
    pub stall_burst: i64,
    pub pipeline_gap_ns: i64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            nodes: 3,
            clients: 4,
            requests: 1000,
            payload: 1024,
            gossip_header: 2048,
            service: ServiceTime::Exponential { mean_ns: 10_000 },
            offsets: BTreeMap::new(),
            faults: Vec::new(),
            pings: false,
            ping_interval_ns: 100_000_000,
            publish_interval_ns: 1_000_000,
            net_base_ns: 200_000,
            net_jitter_mean_ns: 20_000,
            ssl_bytes: [8192, 101, 18],
            stall_burst: 8,
            pipeline_gap_ns: 5_000,
        }
    }
}

impl ScenarioConfig {
    /// Defaults with the faults a scenario is about switched on.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let mut c = ScenarioConfig::default();
        if scenario == Scenario::SslDoubleFree {
            c.faults.push(Fault::SslPendingDoubleFree);
        }
        c
    }

    pub fn has(&self, f: impl Fn(&Fault) -> bool) -> bool {
        self.faults.iter().any(f)
    }

    fn check(&self, hosts: &[String]) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::ConfigInvalid(m));
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        if self.payload < 0 || self.gossip_header < 0 {
            return bad("payload and gossip header must be non-negative".into());
        }
        if self.publish_interval_ns <= 0 || self.ping_interval_ns <= 0 || self.net_base_ns <= 0 {
            return bad("intervals and network delay must be positive".into());
        }
        if self.net_jitter_mean_ns < 0 || self.pipeline_gap_ns < 0 || self.stall_burst < 1 {
            return bad("jitter, pipeline gap and stall burst are out of range".into());
        }
        match self.service {
            ServiceTime::Exponential { mean_ns } if mean_ns <= 0 => return bad("service mean must be positive".into()),
            ServiceTime::Deterministic { ns } if ns < 0 => return bad("service time must be non-negative".into()),
            _ => {}
        }
        for h in self.offsets.keys() {
            if !hosts.contains(h) {
                return bad(format!("offset given for unknown host `{h}`"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Identifies a span by where and when it starts (raw host clock).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanKey {
    pub host: String,
    pub kind: SpanKind,
    pub t_start: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSpan {
    pub key: SpanKey,
    pub service: String,
    pub t_end: i64,
    pub parent: Option<SpanKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSite {
    pub fault: String,
    pub host: String,
    pub t0: i64,
    pub t1: i64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tids: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<i64>,
}

/// What the generator knows. Times are raw host timestamps; a bus transit
/// starts on the sender's clock and ends on the receiver's.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: String,
    pub seed: u64,
    pub hosts: Vec<String>,
    /// Injected skew per host; the correction that undoes it is the negation.
    pub skews: BTreeMap<String, i64>,
    /// Smallest true one-way delay of any cross-host message.
    pub min_one_way_delay_ns: Option<i64>,
    pub events: u64,
    pub flows: Vec<RequestFlow>,
    pub spans: Vec<TruthSpan>,
    pub faults: Vec<FaultSite>,
}

impl GroundTruth {
    pub fn read(path: &Path) -> io::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub struct Generated {
    pub streams: Vec<TraceStream>,
    pub truth: GroundTruth,
}

impl Generated {
    /// Writes `<host>.jsonl` per stream and `ground_truth.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), GenError> {
        std::fs::create_dir_all(dir)?;
        for s in &self.streams {
            write_stream_file(&dir.join(format!("{}.jsonl", s.host)), s)?;
        }
        let mut json = serde_json::to_vec_pretty(&self.truth).map_err(io::Error::from)?;
        json.push(b'\n');
        std::fs::write(dir.join("ground_truth.json"), json)?;
        Ok(())
    }
}

pub fn generate(scenario: Scenario, cfg: &ScenarioConfig) -> Result<Generated, GenError> {
    let mut g = match scenario {
        Scenario::ClusterPublish => publish::generate(cfg)?,
        Scenario::SslDoubleFree => ssl::generate(cfg)?,
        Scenario::Microservices => micro::generate(cfg)?,
        Scenario::Commands => commands::generate(cfg)?,
    };
    g.truth.scenario = scenario.name().to_owned();
    g.truth.seed = cfg.seed;
    g.truth.events = g.streams.iter().map(|s| s.len() as u64).sum();
    Ok(g)
}

/// Collects events in true time and turns them into skewed per-host streams.
pub(crate) struct Emitter {
    skews: BTreeMap<String, i64>,
    hosts: Vec<String>,
    events: BTreeMap<String, Vec<(i64, u64, TraceEvent)>>,
    order: u64,
    min_delay: Option<i64>,
    pub rng: ChaCha8Rng,
    jitter: Option<Exp<f64>>,
    net_base: i64,
}

impl Emitter {
    pub fn new(cfg: &ScenarioConfig, hosts: Vec<String>) -> Result<Self, GenError> {
        cfg.check(&hosts)?;
        let skews = hosts
            .iter()
            .map(|h| (h.clone(), cfg.offsets.get(h).copied().unwrap_or(0)))
            .collect();
        let jitter = (cfg.net_jitter_mean_ns > 0).then(|| Exp::new(1.0 / cfg.net_jitter_mean_ns as f64).unwrap());
        Ok(Emitter {
            skews,
            hosts,
            events: BTreeMap::new(),
            order: 0,
            min_delay: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            jitter,
            net_base: cfg.net_base_ns,
        })
    }

    pub fn raw(&self, host: &str, t: i64) -> i64 {
        BASE_TS + t + self.skews.get(host).copied().unwrap_or(0)
    }

    /// Records `e` at true time `t` on its host and returns the raw timestamp.
    pub fn push(&mut self, t: i64, mut e: TraceEvent) -> i64 {
        e.ts = self.raw(&e.host, t);
        let ts = e.ts;
        self.order += 1;
        self.events.entry(e.host.clone()).or_default().push((t, self.order, e));
        ts
    }

    /// One-way network delay: base plus exponential jitter.
    pub fn net_delay(&mut self) -> i64 {
        let j = self.jitter.map_or(0, |d| d.sample(&mut self.rng).round() as i64);
        let d = self.net_base + j;
        self.min_delay = Some(self.min_delay.map_or(d, |m| m.min(d)));
        d
    }

    pub fn uniform(&mut self, lo: i64, hi: i64) -> i64 {
        self.rng.random_range(lo..=hi)
    }

    pub fn service(&mut self, s: ServiceTime) -> i64 {
        match s {
            ServiceTime::Deterministic { ns } => ns,
            ServiceTime::Exponential { mean_ns } => {
                let d = Exp::new(1.0 / mean_ns as f64).unwrap();
                (d.sample(&mut self.rng).round() as i64).max(1)
            }
        }
    }

    pub fn finish(self, mut truth: GroundTruth) -> Generated {
        let mut streams = Vec::new();
        for (host, mut evs) in self.events {
            evs.sort_by_key(|(t, o, _)| (*t, *o));
            let events = evs
                .into_iter()
                .enumerate()
                .map(|(i, (_, _, mut e))| {
                    e.seq = i as u64;
                    e
                })
                .collect();
            streams.push(TraceStream::new(host, events));
        }
        truth.hosts = self.hosts;
        truth.skews = self.skews;
        truth.min_one_way_delay_ns = self.min_delay;
        Generated { streams, truth }
    }
}

pub(crate) fn ev(host: &str, tid: i64, name: &str) -> TraceEvent {
    TraceEvent::new(0, host, tid, 0, name)
}

#[cfg(test)]
mod tests;
