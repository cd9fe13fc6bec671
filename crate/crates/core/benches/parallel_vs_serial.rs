use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use geocollapse::data::{gen_gaussian_mixture, EpisodeSpec};
use geocollapse::metrics::empirical_gc;
use geocollapse::nn::{gc_reg_grad, init_params, Activation, NetworkSpec, Subnet};
use geocollapse::par;
use geocollapse::transfer::few_shot_eval;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn modes() -> Vec<(&'static str, bool)> {
    let mut m = vec![("serial", false)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", true));
    }
    m
}

fn bench(c: &mut Criterion) {
    let spec = NetworkSpec::new(vec![64, 128, 64, 10], Activation::Relu).unwrap();
    let params = init_params(&spec, 0);
    let ds = gen_gaussian_mixture(10, 64, 3.0, 1.0, 40, 1).unwrap();
    let target = gen_gaussian_mixture(20, 64, 3.0, 1.0, 30, 2).unwrap();
    let episodes = EpisodeSpec { n_way: 5, n_shot: 5, n_query: 15, n_episodes: 200 };

    let mut group = c.benchmark_group("empirical_gc");
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_function(name, |b| b.iter(|| empirical_gc(&params, black_box(ds.x().view()), Subnet::Embedding).unwrap()));
    }
    group.finish();

    let batch = ds.x().slice(ndarray::s![..128, ..]).to_owned();
    let mut group = c.benchmark_group("gc_reg_grad");
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_function(name, |b| b.iter(|| gc_reg_grad(&params, black_box(batch.view())).unwrap()));
    }
    group.finish();

    let mut group = c.benchmark_group("few_shot_eval");
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_function(name, |b| {
            b.iter(|| few_shot_eval(&params, &target, &episodes, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
        });
    }
    group.finish();
    par::set_parallel(cfg!(feature = "parallel"));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
