//! The sequential fallback and the rayon path must agree bit for bit.

use geocollapse::data::{gen_gaussian_mixture, stratified_split, EpisodeSpec};
use geocollapse::metrics::empirical_gc;
use geocollapse::nn::{init_params, logit_gc_and_grad, Activation, NetworkSpec, Subnet};
use geocollapse::par;
use geocollapse::train::{train_run, TrainConfig};
use geocollapse::transfer::few_shot_eval;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn serial_and_parallel_paths_agree() {
    let spec = NetworkSpec::new(vec![6, 16, 8, 4], Activation::Relu).unwrap();
    let params = init_params(&spec, 2);
    let ds = gen_gaussian_mixture(4, 6, 3.0, 1.0, 30, 4).unwrap();
    let (train, test) = stratified_split(&ds, 0.2, 1).unwrap();
    let target = gen_gaussian_mixture(5, 6, 3.0, 1.0, 20, 5).unwrap();
    let episodes = EpisodeSpec { n_way: 3, n_shot: 2, n_query: 4, n_episodes: 12 };
    let cfg = TrainConfig { steps: 20, log_every: 10, batch_size: 8, gc_reg: 0.01, ..TrainConfig::new(spec, 7) };

    let run = || {
        let gc = empirical_gc(&params, ds.x().view(), Subnet::Embedding).unwrap();
        let grad = logit_gc_and_grad(&params, ds.x().view()).unwrap();
        let shots = few_shot_eval(&params, &target, &episodes, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let log = train_run(&cfg, &train, &test, None).unwrap();
        (gc, grad, shots, log)
    };
    par::set_parallel(false);
    let serial = run();
    par::set_parallel(cfg!(feature = "parallel"));
    let parallel = run();
    assert_eq!(serial, parallel);
}
