//! Compare truncated-BPTT gradients with central differences on a small
//! gated-feedback LSTM.
//!
//! cargo run --release --example gradient_check

use gfrnn::cells::UnitKind;
use gfrnn::gfstack::{sequence_backward, sequence_forward, Arch, Model, ModelConfig};
use gfrnn::gradcheck::{central_difference, max_relative_error};
use gfrnn::numerics::Rng;

fn main() -> gfrnn::Result<()> {
    let mut rng = Rng::new(7);
    for unit in [UnitKind::Tanh, UnitKind::Gru, UnitKind::Lstm] {
        for arch in [Arch::Single, Arch::Stacked, Arch::GatedFeedback] {
            let layers = if arch == Arch::Single { vec![4] } else { vec![3, 4, 2] };
            let cfg = ModelConfig::new(arch, unit, layers, 5, 5);
            let model = Model::new(cfg.clone(), &mut rng)?;
            let inputs: Vec<usize> = (0..6).map(|_| rng.below(5)).collect();
            let targets: Vec<usize> = (0..6).map(|_| rng.below(5)).collect();
            let s0 = model.zero_state();

            let out = sequence_forward(&cfg, &model.params, &inputs, &targets, &s0)?;
            let grads = sequence_backward(&cfg, &model.params, Some(&out.cache))?;
            let numeric = central_difference(
                |v| {
                    let mut p = model.params.clone();
                    p.set_flat(v).unwrap();
                    sequence_forward(&cfg, &p, &inputs, &targets, &s0).unwrap().nll
                },
                &model.params.to_flat(),
                1e-5,
            );
            let err = max_relative_error(&grads.params.to_flat(), &numeric);
            println!("{:<5} {:<15} {:>5} params  max relative error {err:.2e}", unit.to_string(), arch.to_string(), model.params.len());
        }
    }
    Ok(())
}
