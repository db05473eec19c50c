use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use mbsgd_bench::integer_buffers;
use mbsgd_core::collectives::allreduce;
use mbsgd_core::{Algorithm, Topology, TransportKind};

fn bench_allreduce(c: &mut Criterion) {
    let mut group = c.benchmark_group("allreduce");
    let len = 1 << 14;
    for algo in [
        Algorithm::Ring,
        Algorithm::HalvingDoubling,
        Algorithm::BinaryBlocks,
    ] {
        for p in [2, 4, 8] {
            let topology = Topology::new(p, 1).unwrap();
            let buffers = integer_buffers(1, p, len);
            group.throughput(Throughput::Bytes((len * 8) as u64));
            group.bench_with_input(
                BenchmarkId::new(algo.to_string(), p),
                &buffers,
                |b, bufs| {
                    b.iter(|| {
                        allreduce(algo, &topology, black_box(bufs), TransportKind::Simulated)
                            .unwrap()
                    })
                },
            );
        }
    }
    group.finish();
}

criterion_group!(benches, bench_allreduce);
criterion_main!(benches);
