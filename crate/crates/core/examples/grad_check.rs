//! Finite-difference gradient checks for one module (default `all`) and seed.
//!
//! `cargo run --release --example grad_check -- decoder 3`

use std::time::Instant;

fn main() -> pcc::Result<()> {
    let mut args = std::env::args().skip(1);
    let module = args.next().unwrap_or_else(|| "all".into());
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let start = Instant::now();
    let results = pcc::gradsuite::run(&module, seed)?;
    for r in &results {
        println!("{}", r.line());
        if !r.passed() {
            println!("   worst {:?}", r.report.worst);
        }
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} cases, {failed} failed, {:.2?}",
        results.len(),
        start.elapsed()
    );
    Ok(())
}
