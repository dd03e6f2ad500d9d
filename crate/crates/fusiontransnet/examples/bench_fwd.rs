use std::time::Instant;
use fusiontransnet::data::{generate_synthetic, SyntheticConfig};
use fusiontransnet::model::{forward_batch, init_state, Capture, DataCache, Leaves, ModelArch, ModelConfig, TensorCache};
use fusiontransnet::train::prepare;

fn main() {
    let ds = generate_synthetic(&SyntheticConfig { days: 10, ..SyntheticConfig::default() }).unwrap();
    let cfg = ModelConfig::default();
    let prepared = prepare(&ds, &cfg).unwrap();
    let arch = ModelArch::new(cfg.clone(), &ds.modes, Some(&prepared.volumes)).unwrap();
    let state = init_state(&arch);
    let tensors = TensorCache::new(&prepared.cache);
    let _ = DataCache::build(&ds.modes, &ds.modes);

    // forward only
    let leaves = Leaves::from_state(&state, false);
    let t0 = Instant::now();
    let reps = 100;
    for i in 0..reps {
        let t = 3 + (i % 100);
        forward_batch(&arch, &leaves, &tensors, &[t], Capture::default()).unwrap();
    }
    println!("forward only: {:.3} ms/example", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // forward + backward
    let t0 = Instant::now();
    for i in 0..reps {
        let t = 3 + (i % 100);
        let leaves = Leaves::from_state(&state, true);
        let out = forward_batch(&arch, &leaves, &tensors, &[t], Capture::default()).unwrap();
        out.loss.backward().unwrap();
        let _ = leaves.gradients();
    }
    println!("fwd+bwd+grads: {:.3} ms/example", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // count tape size
    let leaves = Leaves::from_state(&state, true);
    let out = forward_batch(&arch, &leaves, &tensors, &[3], Capture::default()).unwrap();
    let tape = fusiontransnet::autodiff::Tape::record(&out.loss);
    println!("tape nodes for one example: {}", tape.len());
}
