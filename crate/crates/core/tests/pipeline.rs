use std::collections::{BTreeMap, HashMap};

use storetrace::aggregate::{estimate_stream_offsets, merge, ClockOffsets, Experiment};
use storetrace::analysis::Records;
use storetrace::detect::{
    broadcast_fanout, bus_volume_series, detect_bus_amplification, detect_double_free, detect_read_stall,
    latency_report, Direction, FindingKind, Severity, StallConfig,
};
use storetrace::flows::{build_flows, flow_latency_breakdown};
use storetrace::pipeline::analyze_events;
use storetrace::sht::{ShtConfig, ShtReader, StateValue};
use storetrace::spans::{attach_redis_spans, reconstruct_spans};
use storetrace::syngen::{generate, Fault, Generated, Scenario, ScenarioConfig, ServiceTime, SpanKey};

fn experiment(g: &Generated, sync: bool) -> Experiment {
    let offsets = if sync {
        estimate_stream_offsets(&g.streams).offsets
    } else {
        ClockOffsets::zero(g.streams.iter().map(|s| s.host.as_str()))
    };
    merge(g.streams.clone(), offsets)
}

fn records(x: &Experiment) -> Records {
    analyze_events(&x.events, ShtConfig::default()).unwrap().0.records
}

fn publish(requests: usize, faults: Vec<Fault>) -> Generated {
    let cfg = ScenarioConfig {
        requests,
        faults,
        ..ScenarioConfig::default()
    };
    generate(Scenario::ClusterPublish, &cfg).unwrap()
}

#[test]
fn publish_flows_equal_ground_truth() {
    for faults in [vec![], vec![Fault::BroadcastAmplification]] {
        let g = publish(300, faults);
        let x = experiment(&g, true);
        let flows = build_flows(&records(&x));
        assert_eq!(flows, g.truth.flows);
        for f in &flows {
            let b = flow_latency_breakdown(f).unwrap();
            assert_eq!(b.values().sum::<i64>(), f.end().unwrap() - f.start().unwrap());
        }
    }
}

#[test]
fn targeted_publish_visits_subscriber_node() {
    let g = publish(1, vec![]);
    let flows = build_flows(&records(&experiment(&g, true)));
    let labels: Vec<(&str, &str)> = flows[0]
        .segments
        .iter()
        .map(|s| (s.host.as_str(), s.label.as_str()))
        .collect();
    assert_eq!(
        labels,
        [
            ("n1", "Read"),
            ("n1", "publish"),
            ("n1", "Bus transit"),
            ("n1", "Write to client"),
            ("n2", "Cluster read"),
            ("n2", "Write to client"),
        ]
    );
}

#[test]
fn truncated_publish_is_incomplete() {
    let g = publish(20, vec![Fault::Truncate]);
    let flows = build_flows(&records(&experiment(&g, true)));
    assert_eq!(flows, g.truth.flows);
    assert!(flow_latency_breakdown(flows.last().unwrap()).is_err());
    assert_eq!(flows.iter().filter(|f| f.complete).count(), 19);
}

#[test]
fn offsets_recovered_from_pings() {
    let cfg = ScenarioConfig {
        requests: 500,
        pings: true,
        ping_interval_ns: 20_000_000,
        offsets: BTreeMap::from([("n2".into(), 5_000_000), ("n3".into(), -3_000_000)]),
        ..ScenarioConfig::default()
    };
    let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
    let sync = estimate_stream_offsets(&g.streams);
    let tol = g.truth.min_one_way_delay_ns.unwrap();
    for (h, skew) in &g.truth.skews {
        let got = sync.offsets.get(h);
        assert!((got + skew).abs() <= tol, "{h}: {got} vs {}", -skew);
    }
    assert!(sync.violations.is_empty());
    assert!(sync.offsets.error_bound_ns.values().all(Option::is_some));
}

#[test]
fn microservice_spans_match_ground_truth() {
    let cfg = ScenarioConfig {
        requests: 400,
        faults: vec![Fault::PipelinedHttp],
        offsets: BTreeMap::from([("user".into(), 2_000_000), ("n1".into(), -1_500_000)]),
        ..ScenarioConfig::default()
    };
    let g = generate(Scenario::Microservices, &cfg).unwrap();
    let x = experiment(&g, true);
    let mut forest = reconstruct_spans(&x.events);
    let flows = build_flows(&records(&x));
    attach_redis_spans(&mut forest, &flows);
    assert!(forest.unmatched.is_empty());
    assert!(forest.root_flows.is_empty());
    assert_eq!(forest.spans.len(), g.truth.spans.len());

    let key = |i: usize| {
        let s = &forest.spans[i];
        SpanKey {
            host: s.host.clone(),
            kind: s.kind,
            t_start: s.t_start - x.offsets.get(&s.host),
        }
    };
    let truth: HashMap<&SpanKey, _> = g.truth.spans.iter().map(|t| (&t.key, t)).collect();
    for s in &forest.spans {
        let t = truth[&key(s.id)];
        assert_eq!(s.parent.map(key), t.parent);
        assert_eq!(s.t_end.unwrap() - x.offsets.get(&s.host), t.t_end);
        assert_eq!(s.flows.first(), t.flow.as_ref());
    }
    let tol = g.truth.min_one_way_delay_ns.unwrap();
    assert!(forest.containment_violations(tol).is_empty());
    assert_eq!(forest.depth(false), 4);
    assert_eq!(forest.depth(true), 5);
}

#[test]
fn amplification_ratio_is_exact() {
    let cfg = ScenarioConfig {
        requests: 200,
        payload: 10240,
        gossip_header: 40960,
        faults: vec![Fault::BroadcastAmplification],
        ..ScenarioConfig::default()
    };
    let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
    let x = experiment(&g, true);
    let inp = bus_volume_series(&x.events, 1_000_000, Direction::In).unwrap();
    let out = bus_volume_series(&x.events, 1_000_000, Direction::Out).unwrap();
    let f = detect_bus_amplification(&inp, &out, 2.0, broadcast_fanout(&x.events));
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].severity, Severity::Critical);
    assert_eq!(f[0].evidence["ratio"], 10.0);
    assert_eq!(f[0].evidence["broadcast_fanout"], 2.0);
}

#[test]
fn ssl_double_free_and_control() {
    let fault = generate(
        Scenario::SslDoubleFree,
        &ScenarioConfig::for_scenario(Scenario::SslDoubleFree),
    )
    .unwrap();
    let found = detect_double_free(&experiment(&fault, true).events);
    assert_eq!(found.len(), 1);
    assert_eq!(found[0].kind, FindingKind::DoubleFree);
    assert_eq!(
        (found[0].evidence["first_tid"], found[0].evidence["second_tid"]),
        (3201.0, 3202.0)
    );

    let control = generate(Scenario::SslDoubleFree, &ScenarioConfig::default()).unwrap();
    assert!(detect_double_free(&experiment(&control, true).events).is_empty());

    let mut other = ScenarioConfig::for_scenario(Scenario::SslDoubleFree);
    other.ssl_bytes = [4096, 50, 7];
    let g = generate(Scenario::SslDoubleFree, &other).unwrap();
    assert_eq!(detect_double_free(&experiment(&g, true).events).len(), 1);
}

#[test]
fn ssl_thread_states_in_model() {
    let g = generate(
        Scenario::SslDoubleFree,
        &ScenarioConfig::for_scenario(Scenario::SslDoubleFree),
    )
    .unwrap();
    let x = experiment(&g, true);
    let (_, bytes) = analyze_events(&x.events, ShtConfig::default()).unwrap();
    let r = ShtReader::from_bytes(bytes).unwrap();
    let q = r.quark("Threads/n1:3201/Operation").unwrap();
    let values: Vec<String> = r
        .query_range(q, r.start(), r.end())
        .unwrap()
        .into_iter()
        .filter_map(|iv| iv.value.as_str().map(str::to_owned))
        .collect();
    let ssl: Vec<&str> = values
        .iter()
        .map(String::as_str)
        .filter(|v| v.starts_with("Reading SSL") || *v == "FREEING CLIENT")
        .collect();
    assert_eq!(
        ssl,
        [
            "FREEING CLIENT",
            "Reading SSL bytes=8192",
            "Reading SSL bytes=101",
            "Reading SSL bytes=18",
            "Reading SSL bytes=-1",
            "FREEING CLIENT"
        ]
    );
}

#[test]
fn read_stall_escalates_only_with_burst() {
    for (burst, severity) in [(8, Severity::Warn), (1, Severity::Info)] {
        let cfg = ScenarioConfig {
            requests: 400,
            stall_burst: burst,
            faults: vec![Fault::ReadStall { delay_ns: 50_000_000 }],
            ..ScenarioConfig::default()
        };
        let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
        let x = experiment(&g, true);
        let out = bus_volume_series(&x.events, 1_000_000, Direction::Out).unwrap();
        let found = detect_read_stall(&records(&x).cluster_reads, &out, StallConfig::default());
        assert_eq!(found.len(), 1, "burst {burst}");
        assert_eq!(found[0].severity, severity);
        let site = &g.truth.faults[0];
        assert_eq!((found[0].t0, found[0].t1), (site.t0, site.t1));
    }
}

#[test]
fn deterministic_service_time_gives_exact_latency() {
    let cfg = ScenarioConfig {
        requests: 500,
        service: ServiceTime::Deterministic { ns: 100_000 },
        ..ScenarioConfig::default()
    };
    let g = generate(Scenario::Commands, &cfg).unwrap();
    let x = experiment(&g, true);
    let rec = records(&x);
    assert_eq!(build_flows(&rec), g.truth.flows);
    let report = latency_report(&rec.commands);
    assert_eq!(report.len(), 4);
    for c in report {
        assert_eq!(c.count, 500);
        assert_eq!((c.mean_ns, c.p50_ns, c.p99_ns), (100_000.0, 100_000, 100_000));
    }
}

#[test]
fn default_suite_has_no_false_double_frees() {
    for s in Scenario::ALL {
        let cfg = ScenarioConfig {
            faults: Vec::new(),
            requests: 300,
            pings: true,
            ..ScenarioConfig::default()
        };
        let g = generate(s, &cfg).unwrap();
        let x = experiment(&g, true);
        assert!(detect_double_free(&x.events).is_empty(), "{s}");
        let (a, _) = analyze_events(&x.events, ShtConfig::default()).unwrap();
        assert_eq!(a.report.unmatched, 0, "{s}");
        assert_eq!(a.report.queue_underflows, 0, "{s}");
    }
}

#[test]
fn publish_thread_states_in_order() {
    let g = publish(200, vec![]);
    let x = experiment(&g, true);
    let (_, bytes) = analyze_events(&x.events, ShtConfig::default()).unwrap();
    let r = ShtReader::from_bytes(bytes).unwrap();
    let q = r.quark("Threads/n1:3100/Operation").unwrap();
    for f in &g.truth.flows {
        let states: Vec<StateValue> = r
            .query_range(
                q,
                f.start().unwrap(),
                f.segments
                    .iter()
                    .find(|s| s.host == "n1" && s.label == "Write to client")
                    .unwrap()
                    .t1
                    - 1,
            )
            .unwrap()
            .into_iter()
            .map(|iv| iv.value)
            .filter(|v| !v.is_null())
            .collect();
        assert_eq!(
            states,
            [
                StateValue::from("Read"),
                StateValue::from("publish"),
                StateValue::from("Write to client")
            ]
        );
    }
}
