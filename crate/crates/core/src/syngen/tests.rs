use std::collections::BTreeSet;

use super::*;
use crate::event::{write_stream, EventKind};

fn bytes(g: &Generated) -> Vec<u8> {
    let mut out = Vec::new();
    for s in &g.streams {
        write_stream(&mut out, s).unwrap();
    }
    out.extend(serde_json::to_vec(&g.truth).unwrap());
    out
}

fn count(g: &Generated, kind: EventKind) -> usize {
    g.streams
        .iter()
        .flat_map(|s| &s.events)
        .filter(|e| e.kind() == Some(kind))
        .count()
}

fn small(requests: usize) -> ScenarioConfig {
    ScenarioConfig {
        requests,
        ..ScenarioConfig::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    for s in Scenario::ALL {
        let mut cfg = ScenarioConfig::for_scenario(s);
        cfg.requests = 40;
        cfg.pings = true;
        let a = bytes(&generate(s, &cfg).unwrap());
        let b = bytes(&generate(s, &cfg).unwrap());
        assert_eq!(a, b, "{s}");
    }
    let a = bytes(&generate(Scenario::ClusterPublish, &small(40)).unwrap());
    let mut other = small(40);
    other.seed = 2;
    assert_ne!(a, bytes(&generate(Scenario::ClusterPublish, &other).unwrap()));
}

#[test]
fn single_node_sends_nothing() {
    let cfg = ScenarioConfig {
        nodes: 1,
        pings: true,
        ..small(30)
    };
    let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
    assert_eq!(count(&g, EventKind::ClusterSend), 0);
    assert_eq!(g.truth.flows.len(), 30);
}

#[test]
fn every_send_is_read_once() {
    let cfg = ScenarioConfig {
        nodes: 4,
        pings: true,
        faults: vec![Fault::BroadcastAmplification],
        ..small(200)
    };
    let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
    let mut sent: BTreeSet<(i64, &str)> = BTreeSet::new();
    let mut read: BTreeSet<(i64, &str)> = BTreeSet::new();
    for e in g.streams.iter().flat_map(|s| &s.events) {
        match e.kind() {
            Some(EventKind::ClusterSend) => assert!(sent.insert((e.int("msg_id").unwrap(), e.str("dst").unwrap()))),
            Some(EventKind::ClusterRead) => assert!(read.insert((e.int("msg_id").unwrap(), &e.host))),
            _ => {}
        }
    }
    assert_eq!(sent, read);
    // 3 peers per publish, plus ping and pong traffic.
    assert!(sent.len() > 600);
}

#[test]
fn broadcast_volume_matches_closed_form() {
    for n in [2usize, 3, 5, 9] {
        let cfg = ScenarioConfig {
            nodes: n,
            payload: 10240,
            gossip_header: 40960,
            faults: vec![Fault::BroadcastAmplification],
            ..small(50)
        };
        let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
        let sum = |kind| -> i64 {
            g.streams
                .iter()
                .flat_map(|s| &s.events)
                .filter(|e| e.kind() == Some(kind))
                .map(|e| e.int("bytes").unwrap())
                .sum()
        };
        let (inp, out) = (sum(EventKind::StartReadClientQuery), sum(EventKind::ClusterSend));
        assert_eq!(out * 10240, inp * (n as i64 - 1) * 51200);
    }
}

#[test]
fn truncation_drops_peer_side_of_last_publish() {
    let cfg = ScenarioConfig {
        faults: vec![Fault::Truncate],
        ..small(5)
    };
    let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
    assert_eq!(count(&g, EventKind::ClusterSend), 5);
    assert_eq!(count(&g, EventKind::ClusterRead), 4);
    let last = g.truth.flows.last().unwrap();
    assert!(!last.complete);
    assert_eq!(last.dangling.len(), 1);
    assert!(g.truth.flows[..4].iter().all(|f| f.complete));
}

#[test]
fn skew_shifts_raw_clock() {
    let mut cfg = small(3);
    cfg.net_jitter_mean_ns = 0;
    let plain = generate(Scenario::ClusterPublish, &cfg).unwrap();
    cfg.offsets.insert("n2".into(), 5_000_000);
    let skewed = generate(Scenario::ClusterPublish, &cfg).unwrap();
    let first = |g: &Generated, h: &str| g.streams.iter().find(|s| s.host == h).unwrap().events[0].ts;
    assert_eq!(first(&skewed, "n2") - first(&plain, "n2"), 5_000_000);
    assert_eq!(first(&skewed, "n1"), first(&plain, "n1"));
    assert_eq!(skewed.truth.skews["n2"], 5_000_000);
    assert_eq!(skewed.truth.min_one_way_delay_ns, Some(cfg.net_base_ns));
}

#[test]
fn ssl_control_has_one_free_per_connection() {
    let fault = generate(
        Scenario::SslDoubleFree,
        &ScenarioConfig::for_scenario(Scenario::SslDoubleFree),
    )
    .unwrap();
    let control = generate(Scenario::SslDoubleFree, &ScenarioConfig::default()).unwrap();
    assert_eq!(count(&fault, EventKind::FreeClient), 3);
    assert_eq!(count(&control, EventKind::FreeClient), 2);
    let reads: Vec<i64> = fault.streams[0]
        .events
        .iter()
        .filter_map(|e| e.int("bytes_read"))
        .collect();
    assert_eq!(reads, [8192, 101, 18, -1, -1]);
    assert_eq!(fault.truth.faults[0].tids.len(), 2);
}

#[test]
fn one_microservice_request() {
    let g = generate(Scenario::Microservices, &small(1)).unwrap();
    let http = g
        .streams
        .iter()
        .flat_map(|s| &s.events)
        .filter(|e| e.kind().is_some_and(EventKind::is_http))
        .count();
    assert_eq!(http, 10);
    assert_eq!(g.truth.spans.len(), 5);
    assert_eq!(g.truth.flows.len(), 1);
    let hosts: BTreeSet<&str> = g.streams.iter().map(|s| s.host.as_str()).collect();
    assert_eq!(hosts, BTreeSet::from(["gateway", "n1", "redisgw", "user"]));
    assert_eq!(g.truth.spans.iter().filter(|s| s.parent.is_none()).count(), 1);
}

#[test]
fn commands_ground_truth_covers_every_request() {
    let cfg = ScenarioConfig {
        service: ServiceTime::Deterministic { ns: 100_000 },
        ..small(25)
    };
    let g = generate(Scenario::Commands, &cfg).unwrap();
    assert_eq!(g.truth.flows.len(), 100);
    let ids: BTreeSet<&str> = g.truth.flows.iter().map(|f| f.id.as_str()).collect();
    assert_eq!(ids.len(), 100);
    assert!(ids.contains("n1:42#1:1"));
    assert!(g
        .truth
        .flows
        .iter()
        .all(|f| f.segments[1].t1 - f.segments[1].t0 == 100_000));
    assert_eq!(count(&g, EventKind::FreeClient), 5);
}

#[test]
fn streams_are_strictly_ordered() {
    let mut cfg = ScenarioConfig::for_scenario(Scenario::Microservices);
    cfg.faults.push(Fault::PipelinedHttp);
    cfg.requests = 50;
    let g = generate(Scenario::Microservices, &cfg).unwrap();
    for s in &g.streams {
        for (i, w) in s.events.windows(2).enumerate() {
            assert!(w[0].ts <= w[1].ts, "{} at {i}", s.host);
            assert_eq!(w[1].seq, w[0].seq + 1);
        }
    }
}

#[test]
fn invalid_configs() {
    let bad = |s, cfg: ScenarioConfig| matches!(generate(s, &cfg), Err(GenError::ConfigInvalid(_)));
    assert!(bad(Scenario::ClusterPublish, ScenarioConfig { nodes: 0, ..small(1) }));
    assert!(bad(
        Scenario::ClusterPublish,
        ScenarioConfig {
            nodes: 1,
            faults: vec![Fault::BroadcastAmplification],
            ..small(1)
        }
    ));
    let mut cfg = small(1);
    cfg.offsets.insert("nowhere".into(), 1);
    assert!(bad(Scenario::Microservices, cfg));
    assert!(bad(Scenario::Commands, ScenarioConfig { clients: 0, ..small(1) }));
}

#[test]
fn names_parse() {
    assert_eq!(
        "read-stall".parse::<Fault>().unwrap(),
        Fault::ReadStall { delay_ns: 50_000_000 }
    );
    assert_eq!(
        "read-stall=7".parse::<Fault>().unwrap(),
        Fault::ReadStall { delay_ns: 7 }
    );
    assert!("truncate=3".parse::<Fault>().is_err());
    assert!("nope".parse::<Fault>().is_err());
    for s in Scenario::ALL {
        assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
    }
}

#[test]
fn writes_directory() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(Scenario::ClusterPublish, &small(10)).unwrap();
    g.write_dir(dir.path()).unwrap();
    let truth = GroundTruth::read(&dir.path().join("ground_truth.json")).unwrap();
    assert_eq!(truth, g.truth);
    assert!(dir.path().join("n1.jsonl").is_file());
    assert!(dir.path().join("n2.jsonl").is_file());
}
