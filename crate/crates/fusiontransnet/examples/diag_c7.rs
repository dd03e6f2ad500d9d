use fusiontransnet::data::{generate_synthetic, SyntheticConfig};
use fusiontransnet::model::{ModelArch, ModelConfig};
use fusiontransnet::train::{poc_foc_validation, prepare, train_prepared};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(40);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let base: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2000.0);
    let dataset = generate_synthetic(&SyntheticConfig { base_intensity: base, ..SyntheticConfig::default() }).unwrap();
    let focal: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2);
    let single = dataset.filter_modes(&[focal]).unwrap();
    let k_list = [5usize, 10, 15, 20];

    for (name, data) in [("multi", &dataset), ("single", &single)] {
        let cfg = ModelConfig { learning_rate: lr, epochs, seed, ..ModelConfig::default() };
        let prepared = prepare(data, &cfg).unwrap();
        let arch = ModelArch::new(cfg.clone(), &data.modes, Some(&prepared.volumes)).unwrap();
        let outcome = train_prepared(data, &cfg, &prepared).unwrap();
        let mode_filter = if data.modes.len() == 1 { 0 } else { focal };
        // peak-hour windows only
        let hours: Vec<usize> = prepared.split.test.clone()
            .filter(|t| { let h = t % 24; h == 8 || h == 9 || h == 18 || h == 19 })
            .collect();
        let span = hours[0]..hours[0] + 1; // placeholder, replaced below
        let _ = span;
        let rows = fusiontransnet::train::poc_foc_validation_at(
            &arch, &outcome.state, &prepared, data,
            &hours, &k_list, Some(mode_filter),
        ).unwrap();
        print!(
            "{name} (MAE {:.4}):",
            outcome.report.per_mode[if data.modes.len() == 1 { 0 } else { focal }].mae
        );
        for r in rows {
            print!("  k={} {:.4}/{:.4}", r.k, r.mean_poc, r.mean_foc);
        }
        println!();
    }
}
