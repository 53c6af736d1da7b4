use std::hint::black_box;
use std::io::Cursor;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use storetrace::aggregate::{estimate_stream_offsets, merge};
use storetrace::pipeline::analyze_events;
use storetrace::sht::{ShtConfig, ShtReader, ShtWriter, StateInterval};
use storetrace::syngen::{generate, Scenario, ScenarioConfig};

const QUARKS: u32 = 200;
const INTERVALS: u32 = 50_000;

fn workload() -> (Vec<StateInterval>, i64) {
    // Round-robin tilings with staggered lengths, already in end order.
    let mut cursor = vec![0i64; QUARKS as usize];
    let mut out: Vec<StateInterval> = (0..INTERVALS)
        .map(|i| {
            let q = i % QUARKS;
            let len = 50 + (i as i64 * 7919) % 400;
            let s = cursor[q as usize];
            cursor[q as usize] = s + len;
            StateInterval::new(q, s, s + len, i as i64)
        })
        .collect();
    out.sort_by_key(|iv| iv.end);
    let end = out.last().unwrap().end + 1;
    (out, end)
}

fn build(ivs: &[StateInterval], end: i64) -> Vec<u8> {
    let mut w = ShtWriter::new(Cursor::new(Vec::new()), ShtConfig::default(), 0).unwrap();
    for iv in ivs {
        w.insert(iv.clone()).unwrap();
    }
    w.finish(end, None).unwrap();
    w.into_inner().into_inner()
}

fn sht(c: &mut Criterion) {
    let (ivs, end) = workload();
    let mut g = c.benchmark_group("sht");
    g.throughput(Throughput::Elements(INTERVALS as u64));
    g.bench_function("insert", |b| b.iter(|| build(black_box(&ivs), end)));
    g.finish();

    let r = ShtReader::from_bytes(build(&ivs, end)).unwrap();
    let mut t = 0;
    c.bench_function("sht/query_single", |b| {
        b.iter(|| {
            t = (t + 7_777) % end;
            r.query_single(black_box((t % QUARKS as i64) as u32), t).unwrap()
        })
    });
    c.bench_function("sht/query_full", |b| {
        b.iter(|| {
            t = (t + 7_777) % end;
            r.query_full(black_box(t)).unwrap()
        })
    });
    c.bench_function("sht/query_range_1pct", |b| {
        b.iter(|| {
            t = (t + 7_777) % end;
            r.query_range(black_box(3), t, t + end / 100).unwrap()
        })
    });
}

fn pipeline(c: &mut Criterion) {
    let cfg = ScenarioConfig {
        requests: 2000,
        pings: true,
        ..ScenarioConfig::default()
    };
    let g = generate(Scenario::ClusterPublish, &cfg).unwrap();
    let events: usize = g.streams.iter().map(|s| s.events.len()).sum();
    let mut grp = c.benchmark_group("pipeline");
    grp.throughput(Throughput::Elements(events as u64));
    grp.bench_function("sync_and_merge", |b| {
        b.iter_batched(
            || g.streams.clone(),
            |streams| {
                let offsets = estimate_stream_offsets(&streams).offsets;
                merge(streams, offsets)
            },
            BatchSize::LargeInput,
        )
    });
    let x = merge(g.streams.clone(), estimate_stream_offsets(&g.streams).offsets);
    grp.bench_function("analyze", |b| {
        b.iter(|| analyze_events(black_box(&x.events), ShtConfig::default()).unwrap())
    });
    grp.finish();
}

criterion_group!(benches, sht, pipeline);
criterion_main!(benches);
