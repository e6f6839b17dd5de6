//! Data-parallel hot paths on a single-thread pool versus the full pool.
//!
//! Built without the `parallel` feature every variant runs the sequential
//! fallback, which gives the third point of comparison.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;
use uniret::dense_index::{embed_corpus, IvfIndex};
use uniret::encoder::{EncoderParams, Variant};
use uniret::eval;
use uniret::sparse::Bm25Index;
use uniret::synth::{self, SynthConfig, SyntheticData};
use uniret::trainer::{self, DatasetSpec, Profile, TrainConfig, TrainData};

fn pools() -> Vec<(String, ThreadPool)> {
    let full = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut sizes = vec![1];
    if full > 1 {
        sizes.push(full);
    }
    let mode = if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential"
    };
    sizes
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("{mode}-{n}t"), pool)
        })
        .collect()
}

fn data() -> SyntheticData {
    synth::generate(&SynthConfig {
        entities: 600,
        train: [300, 300, 300],
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        datasets: ["kwqa", "paraqa", "slot"]
            .iter()
            .map(|id| DatasetSpec::new(id))
            .collect(),
        epochs: 1,
        dim: 64,
        vocab_size: 4096,
        ..TrainConfig::profile(Profile::Desk)
    }
}

fn bench(c: &mut Criterion) {
    let d = data();
    let cfg = config();
    let params = EncoderParams::init(Variant::Shared, cfg.dim, cfg.vocab_size, 0).unwrap();
    let flat = embed_corpus(&params, &d.passages);
    let queries: Vec<_> = d
        .test
        .iter()
        .map(|q| params.encode_query(&q.text, q.task_class))
        .collect();
    let ivf = IvfIndex::build(flat.clone(), 32, 0).unwrap();
    let bm25 = Bm25Index::build(&d.passages).unwrap();
    let examples = trainer::build_training_set(&d.train, &bm25, &cfg.datasets, 0, cfg.mapping_threshold).unwrap();
    let train_data = || TrainData {
        passages: &d.passages,
        train: &d.train,
        dev: &d.dev,
    };

    let mut g = c.benchmark_group("parallel");
    g.sample_size(10);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::new("embed_corpus", &label), |b| {
            b.iter(|| pool.install(|| black_box(embed_corpus(&params, &d.passages))))
        });
        g.bench_function(BenchmarkId::new("flat_search_many", &label), |b| {
            b.iter(|| pool.install(|| black_box(flat.search_many(&queries, 100).unwrap())))
        });
        g.bench_function(BenchmarkId::new("ivf_build", &label), |b| {
            b.iter(|| pool.install(|| black_box(IvfIndex::build(flat.clone(), 32, 0).unwrap())))
        });
        g.bench_function(BenchmarkId::new("ivf_search_many", &label), |b| {
            b.iter(|| pool.install(|| black_box(ivf.search_many(&queries, 100, 8).unwrap())))
        });
        g.bench_function(BenchmarkId::new("bm25_run", &label), |b| {
            b.iter(|| pool.install(|| black_box(eval::bm25_run(&bm25, &d.test, 100, "bm25").unwrap())))
        });
        g.bench_function(BenchmarkId::new("train_epoch", &label), |b| {
            b.iter(|| {
                pool.install(|| {
                    black_box(trainer::train_examples(&cfg, params.clone(), &examples, train_data()).unwrap())
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
