//! Train a small gated-feedback GRU on a text file, report validation and test
//! bits per character, then sample from it.
//!
//! cargo run --release --example char_lm -- [path/to/text] [epochs]
//!
//! Without a path it trains on this crate's own Rust sources.

use gfrnn::cells::UnitKind;
use gfrnn::charlm::{evaluate_bpc, fit, generate_text, prepare_corpus, SplitRatios, SymbolMode, PAPER_VOCAB_SIZE};
use gfrnn::gfstack::{count_parameters, Arch, Model, ModelConfig};
use gfrnn::numerics::Rng;
use gfrnn::training::{BatchPlan, ExplosionRule, OptimizerConfig, StreamTrainer};

fn own_sources() -> Vec<u8> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files: Vec<_> = std::fs::read_dir(dir).expect("source directory").map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().filter(|p| p.extension().is_some_and(|x| x == "rs")).flat_map(|p| std::fs::read(p).unwrap()).collect()
}

fn main() -> gfrnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next();
    let epochs: u64 = args.next().map_or(5, |e| e.parse().expect("epochs must be an integer"));
    let (path, raw) = match path {
        Some(p) => {
            let raw = std::fs::read(&p).map_err(|source| gfrnn::Error::Io { path: p.clone().into(), source })?;
            (p, raw)
        }
        None => ("crate sources".to_string(), own_sources()),
    };

    let (vocab, split) = prepare_corpus(&raw, PAPER_VOCAB_SIZE, SymbolMode::Byte, SplitRatios::default())?;
    let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Gru, vec![48, 48], vocab.len(), vocab.len());
    println!("{path}: {} bytes, vocabulary {}, model {} params", raw.len(), vocab.len(), count_parameters(&cfg));

    let mut model = Model::new(cfg, &mut Rng::new(1))?;
    let plan = BatchPlan { n_streams: 8, subseq_len: 50, reset_interval: 20 };
    let mut opt = OptimizerConfig::adam();
    opt.learning_rate = 3e-3;
    opt.beta1 = 0.9;
    opt.beta2 = 0.999;
    let mut trainer = StreamTrainer::new(&model, opt, ExplosionRule::default(), plan, split.train.len())?;
    let report = fit(&mut model, &mut trainer, &split.train, &split.valid, epochs, 5, &mut |_| {}, &mut |e, _, _| {
        println!("epoch {:>3}  train nll {:.4}  valid bpc {:.4}{}", e.epoch, e.train_nll, e.valid_bpc, if e.improved { " *" } else { "" });
        Ok(())
    })?;

    let best = report.best_model;
    println!("best valid bpc {:.4}, test bpc {:.4}", report.best_valid_bpc, evaluate_bpc(&best, &split.test)?);
    let sample = generate_text(&best, &vocab, b"The ", 200, &mut Rng::new(3), 1.0)?;
    println!("--- sample\nThe {}", String::from_utf8_lossy(&sample));
    Ok(())
}
