use fusiontransnet::data::{generate_synthetic, SyntheticConfig};
use fusiontransnet::train::{as_printed_foc, as_printed_poc};

fn main() {
    let dataset = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let taxi = &dataset.modes[0];
    let test_start = 720 - 72;
    let series: Vec<Vec<f64>> = (0..taxi.node_count())
        .map(|node| {
            (test_start..720)
                .map(|t| taxi.snapshots[t].flow.column(node).sum())
                .collect()
        })
        .collect();
    let n = series.len();
    let k = 5;

    // oracle: neighbors by true FOC; random baseline: all others
    let mut oracle_poc = 0.0;
    let mut oracle_foc = 0.0;
    let mut rand_poc = 0.0;
    let mut rand_foc = 0.0;
    let mut count_r = 0.0;
    for i in 0..n {
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (as_printed_foc(&series[i], &series[j]), j))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for &(_, j) in scored.iter().take(k) {
            oracle_poc += as_printed_poc(&series[i], &series[j]) / (n * k) as f64;
            oracle_foc += as_printed_foc(&series[i], &series[j]) / (n * k) as f64;
        }
        for &(_, j) in scored.iter() {
            rand_poc += as_printed_poc(&series[i], &series[j]);
            rand_foc += as_printed_foc(&series[i], &series[j]);
            count_r += 1.0;
        }
    }
    println!("oracle k=5: poc {:.4} foc {:.4}", oracle_poc, oracle_foc);
    println!("random    : poc {:.4} foc {:.4}", rand_poc / count_r, rand_foc / count_r);
}
