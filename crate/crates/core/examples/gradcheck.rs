//! Verifies analytic gradients of every primitive op and every parameter
//! group of the tiny model against central finite differences.
//!
//! `cargo run --release --example gradcheck -- [seed]`

use std::time::Instant;

use iaunet::gradcheck::{run, GradcheckOptions};
use iaunet::model::ModelConfig;

fn main() -> iaunet::Result<()> {
    let start = Instant::now();
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let report = run(&ModelConfig::tiny(), &GradcheckOptions { seed, ..Default::default() })?;
    print!("{}", report.render());
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
