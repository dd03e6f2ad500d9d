use fusiontransnet::data::{load_dataset, Dataset};
use fusiontransnet::model::ModelConfig;
use fusiontransnet::train::train;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds: Dataset = load_dataset(std::path::Path::new(&args[1])).unwrap();
    let single = ds.filter_modes(&[0]).unwrap();
    let cfg = ModelConfig {
        learning_rate: 0.02,
        epochs: 60,
        ..ModelConfig::default()
    };
    let outcome = train(&single, &cfg).unwrap();
    println!(
        "single-mode taxi: test MAE {:.4} RMSE {:.4}",
        outcome.report.per_mode[0].mae, outcome.report.per_mode[0].rmse
    );
}
