//! Train stacked and gated-feedback encoder-decoders on generated programs and
//! print their accuracy heatmaps over nesting and target length.
//!
//! cargo run --release --example program_eval -- [train_samples] [epochs]
//!
//! Defaults take a few minutes on one core.

use std::collections::HashSet;

use gfrnn::cells::UnitKind;
use gfrnn::gfstack::Arch;
use gfrnn::numerics::Rng;
use gfrnn::progeval::{
    build_heatmap, build_splits, encode_sample, teacher_forced_accuracy, Curriculum, EncodedSample, EncoderDecoder, GridSpec, HeatmapGrid,
    ProgramSample, Seq2SeqTrainer, TaskVocab, DEFAULT_BATCH_SIZE,
};
use gfrnn::training::{ExplosionRule, OptimizerConfig};

fn encode(samples: &[ProgramSample]) -> gfrnn::Result<Vec<EncodedSample>> {
    let vocab = TaskVocab::v1();
    samples.iter().map(|s| encode_sample(&vocab, s)).collect()
}

fn print_grid(title: &str, grid: &HeatmapGrid, m: &[Vec<f64>]) {
    println!("{title}");
    print!("nesting\\length");
    grid.lengths.iter().for_each(|l| print!("{l:>7}"));
    println!();
    for (n, row) in grid.nestings.iter().zip(m) {
        print!("{n:>14}");
        row.iter().for_each(|v| print!("{v:>7.3}"));
        println!();
    }
}

fn main() -> gfrnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_train: usize = args.next().map_or(5000, |v| v.parse().expect("train_samples must be an integer"));
    let epochs: usize = args.next().map_or(10, |v| v.parse().expect("epochs must be an integer"));
    let curriculum = Curriculum { nesting: (1, 2), length: (1, 4) };
    let splits = build_splits(&curriculum, (n_train, 200, 200), &mut Rng::new(5))?;
    let (train, valid) = (encode(&splits.train)?, encode(&splits.valid)?);

    let mut models = Vec::new();
    for arch in [Arch::Stacked, Arch::GatedFeedback] {
        let mut ed = EncoderDecoder::new(arch, UnitKind::Gru, vec![40, 40], &mut Rng::new(6))?;
        // Smaller batches and a faster optimizer than the full recipe so a desk run gets somewhere.
        let mut opt = OptimizerConfig::adam();
        opt.learning_rate = 2e-3;
        opt.beta1 = 0.9;
        let mut t = Seq2SeqTrainer::new(&ed, opt, ExplosionRule::default(), DEFAULT_BATCH_SIZE / 4, 7)?;
        for _ in 0..epochs {
            let m = t.train_epoch(&mut ed, &train, &mut |_| {})?;
            println!(
                "{arch:<15} epoch {}  train nll {:.4}  valid accuracy {:.4}",
                m.epoch,
                m.mean_nll,
                teacher_forced_accuracy(&ed, &valid)?
            );
        }
        models.push(ed);
    }

    let seen: HashSet<String> = splits.train.iter().map(|s| s.script.clone()).collect();
    let grid = GridSpec { nestings: vec![1, 2, 3], lengths: vec![1, 2, 3, 4, 5], samples_per_cell: 100 };
    let heat = build_heatmap(&models[0], &models[1], &grid, &seen, &Rng::new(8))?;
    print_grid("\nstacked", &heat, &heat.stacked);
    print_grid("\ngated feedback", &heat, &heat.gated_feedback);
    print_grid("\ngated feedback minus stacked", &heat, &heat.difference);
    Ok(())
}
