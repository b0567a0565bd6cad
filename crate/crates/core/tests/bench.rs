//! Ignored-by-default timing probes; run with `--ignored --nocapture`.

use std::time::Instant;

use crowdcount::autodiff::Tape;
use crowdcount::harness::{gradcheck_report, train, RunConfig};
use crowdcount::model::{init_params, model_forward, ModelConfig};
use crowdcount::tensor::Tensor;

#[test]
#[ignore]
fn bench_gradcheck() {
    let t0 = Instant::now();
    let report = gradcheck_report().unwrap();
    println!("gradcheck took {:.1?}", t0.elapsed());
    println!("{}", report.to_text());
}

#[test]
#[ignore]
fn bench_default_forward() {
    let config = ModelConfig::default();
    let t0 = Instant::now();
    let store = init_params::<f32>(&config, 0).unwrap();
    println!("init took {:.1?} ({} params)", t0.elapsed(), store.num_scalars());
    let t0 = Instant::now();
    let mut tape = Tape::<f32>::new();
    let binding = store.bind(&mut tape);
    let x = tape.constant(Tensor::from_fn(&[1, 3, 64, 64], |i| ((i % 97) as f32) / 97.0));
    let out = model_forward(&mut tape, &binding, &store, &config, x).unwrap();
    println!("one default f32 forward took {:.1?}, out shape {:?}", t0.elapsed(), tape.value(out).shape());
}

#[test]
#[ignore]
fn bench_overfit_step() {
    let dir = std::env::temp_dir().join("bench_overfit");
    let mut cfg = RunConfig::tiny_overfit(dir, 1);
    cfg.optimizer.steps = 5;
    let t0 = Instant::now();
    let out = train(&cfg).unwrap();
    println!("5 overfit steps took {:.1?}; loss {} -> {}", t0.elapsed(), out.initial_loss, out.final_loss);
}
