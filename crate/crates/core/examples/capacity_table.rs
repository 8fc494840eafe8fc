//! Parameter counts for the capacity-matched model family, plus a per-tensor
//! breakdown of one configuration.
//!
//! cargo run --example capacity_table

use gfrnn::charlm::PAPER_VOCAB_SIZE;
use gfrnn::gfstack::{count_parameters, paper_capacity_config, paper_capacity_rows, parameter_breakdown, Arch};

fn main() {
    let mut base = 0;
    for row in paper_capacity_rows() {
        let cfg = paper_capacity_config(&row, PAPER_VOCAB_SIZE);
        let n = count_parameters(&cfg);
        if row.arch == Arch::Single {
            base = n;
        }
        let dims: Vec<String> = row.units_per_layer.iter().map(|u| u.to_string()).collect();
        println!(
            "{:<5} {:<21} {:<12} {n:>9} {:+6.1}%",
            row.unit.to_string(),
            row.label,
            dims.join("-"),
            100.0 * (n as f64 / base as f64 - 1.0)
        );
    }

    let gf = paper_capacity_rows().into_iter().find(|r| r.arch == Arch::GatedFeedback).unwrap();
    println!("\nbreakdown of {} {}:", gf.unit, gf.label);
    for (name, n) in parameter_breakdown(&paper_capacity_config(&gf, PAPER_VOCAB_SIZE)) {
        println!("  {name:<24} {n:>8}");
    }
}
