//! Desk-scale adaptation run: `cargo run --release -p photon-da-core --example desk [seed]`.

use photon_da_core::experiment::{run_desk, DeskConfig};
use photon_da_core::trainer::adapt_csv;

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let report = match run_desk(&DeskConfig::toy(seed)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("desk run failed: {e}");
            std::process::exit(2);
        }
    };
    for e in &report.pretrain_trace {
        println!("epoch {:>3}  loss {:.3}  ce {:.3}  tv {:.3}", e.epoch, e.total, e.ce, e.tv);
    }
    let csv = adapt_csv(&report.adapt_trace);
    if let Some(last) = csv.lines().last() {
        println!("last adaptation record: {last}");
    }
    println!(
        "target RMSE {:.4} -> {:.4} (x{:.3})",
        report.baseline_target_rmse,
        report.adapted_target_rmse,
        report.target_ratio()
    );
    println!(
        "source RMSE {:.4} -> {:.4} ({:+.1}%)",
        report.baseline_source_rmse,
        report.adapted_source_rmse,
        100.0 * report.source_regression()
    );
    println!("pretrain {:.0?}, adapt {:.0?}, total {:.0?}", report.pretrain_time, report.adapt_time, report.total_time);
}
