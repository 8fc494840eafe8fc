//! Acceptance gate. Each test prints one `PASS`/`FAIL` line before asserting.

use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;

use gfrnn::cells::{cell_forward, CellParams, UnitKind};
use gfrnn::charlm::{build_vocab, evaluate_bpc, prepare_corpus, SplitRatios, SymbolMode, PAPER_VOCAB_SIZE};
use gfrnn::cli::{self, CharlmRun, Checkpoint, ProgevalData, ProgevalRun, Run, RunConfig};
use gfrnn::gfstack::{
    count_parameters, gf_step, gf_step_with_gates, paper_capacity_config, paper_capacity_rows, sequence_backward, sequence_forward,
    stacked_step, Arch, Model, ModelConfig, ParamSet, StackState, UnitGateSource,
};
use gfrnn::gradcheck::{central_difference, max_relative_error};
use gfrnn::numerics::{Real, Rng, Tensor1};
use gfrnn::progeval::{
    digit_length, encode_sample, generate_program, interpret, paper_layer_sizes, parse_program, teacher_forced_accuracy, Curriculum,
    EncodedSample, EncoderDecoder, Seq2SeqTrainer, TaskVocab, DEFAULT_BATCH_SIZE, ENCODER_TRUNCATION, PAPER_CELL_SAMPLES,
};
use gfrnn::training::{BatchPlan, ExplosionRule, OptimizerConfig, OptimizerKind, StreamTrainer};

/// Writes straight to the stdout handle so the line shows up even when the
/// harness captures test output.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").and_then(|_| out.flush()).expect("stdout is writable");
}

fn verdict(name: &str, ok: bool, detail: &str) {
    report(&format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
    assert!(ok, "{name}: {detail}");
}

const UNITS: [UnitKind; 3] = [UnitKind::Tanh, UnitKind::Gru, UnitKind::Lstm];
const ARCHS: [Arch; 3] = [Arch::Single, Arch::Stacked, Arch::GatedFeedback];

fn random_flat(n: usize, rng: &mut Rng, scale: Real) -> Vec<Real> {
    (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()
}

fn random_params(cfg: &ModelConfig, rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::zeros(cfg);
    p.set_flat(&random_flat(p.len(), rng, 0.6)).unwrap();
    p
}

fn random_state(cfg: &ModelConfig, rng: &mut Rng) -> StackState {
    let n = StackState::zeros(cfg).to_flat().len();
    StackState::from_flat(cfg, &random_flat(n, rng, 0.5)).unwrap()
}

/// Worst relative error between BPTT and central differences, over parameters
/// and the initial state, for one random instance.
fn gradient_error(cfg: &ModelConfig, rng: &mut Rng) -> Real {
    let p = random_params(cfg, rng);
    let s0 = random_state(cfg, rng);
    let steps = rng.range_inclusive(1, 6);
    let inputs: Vec<usize> = (0..steps).map(|_| rng.below(cfg.input_vocab)).collect();
    let targets: Vec<usize> = (0..steps).map(|_| rng.below(cfg.output_vocab)).collect();
    let out = sequence_forward(cfg, &p, &inputs, &targets, &s0).unwrap();
    let g = sequence_backward(cfg, &p, Some(&out.cache)).unwrap();
    let numeric = central_difference(
        |v| {
            let mut q = p.clone();
            q.set_flat(v).unwrap();
            sequence_forward(cfg, &q, &inputs, &targets, &s0).unwrap().nll
        },
        &p.to_flat(),
        1e-5,
    );
    let e_params = max_relative_error(&g.params.to_flat(), &numeric);
    let numeric_s = central_difference(
        |v| sequence_forward(cfg, &p, &inputs, &targets, &StackState::from_flat(cfg, v).unwrap()).unwrap().nll,
        &s0.to_flat(),
        1e-5,
    );
    e_params.max(max_relative_error(&g.state0.to_flat(), &numeric_s))
}

fn random_instance(arch: Arch, unit: UnitKind, rng: &mut Rng) -> ModelConfig {
    let layers = if arch == Arch::Single { 1 } else { rng.range_inclusive(1, 3) };
    let units = (0..layers).map(|_| rng.range_inclusive(1, 4)).collect();
    let vocab = rng.range_inclusive(2, 5);
    ModelConfig::new(arch, unit, units, vocab, vocab)
}

#[test]
fn gradient_exactness() {
    let started = std::time::Instant::now();
    let mut worst: Real = 0.0;
    let mut lines = Vec::new();
    for unit in UNITS {
        for (label, arch, variant) in [
            ("single", Arch::Single, 0),
            ("stacked", Arch::Stacked, 0),
            ("gated_feedback", Arch::GatedFeedback, 0),
            ("gated_feedback frozen", Arch::GatedFeedback, 1),
            ("gated_feedback skip+all-layer gates", Arch::GatedFeedback, 2),
            ("stacked skip+readout-all strict", Arch::Stacked, 3),
        ] {
            let mut case_worst: Real = 0.0;
            for seed in 0..10 {
                let mut rng = Rng::new(seed);
                let mut cfg = random_instance(arch, unit, &mut rng);
                match variant {
                    1 => cfg.freeze_gates_to_one = true,
                    2 => {
                        cfg.skip_connections = true;
                        cfg.unit_gate_source = UnitGateSource::AllLayers;
                    }
                    3 => {
                        cfg.skip_connections = true;
                        cfg.readout_all_layers = true;
                        cfg.strict = true;
                    }
                    _ => {}
                }
                case_worst = case_worst.max(gradient_error(&cfg, &mut rng));
            }
            lines.push(format!("{unit} {label}: {case_worst:.2e}"));
            worst = worst.max(case_worst);
        }
    }
    for l in &lines {
        println!("  {l}");
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "gradient_exactness",
        worst <= 1e-5 && secs < 120.0,
        &format!("max relative error {worst:.2e} over {} cases × 10 seeds in {secs:.1}s", lines.len()),
    );
}

/// Gated-feedback parameters that share every stacked weight; cross-layer
/// recurrent weights and gate vectors are random.
fn gf_sharing(scfg: &ModelConfig, sp: &ParamSet, rng: &mut Rng) -> (ModelConfig, ParamSet) {
    let mut gcfg = scfg.clone();
    gcfg.arch = Arch::GatedFeedback;
    let mut gp = random_params(&gcfg, rng);
    for (j, (gl, sl)) in gp.layers.iter_mut().zip(&sp.layers).enumerate() {
        gl.w = sl.w.clone();
        gl.b = sl.b.clone();
        gl.u_gate = sl.u_gate.clone();
        gl.u_rec[j] = sl.u_rec[0].clone();
    }
    gp.out_w = sp.out_w.clone();
    gp.out_b = sp.out_b.clone();
    (gcfg, gp)
}

fn one_hot(n: usize, k: usize) -> Tensor1 {
    let mut v = Tensor1::zeros(n);
    v.data[k] = 1.0;
    v
}

#[test]
fn architecture_degeneracies() {
    let mut identity_ok = true;
    let mut cell_ok = true;
    let mut frozen_ok = true;
    for unit in UNITS {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let scfg = ModelConfig::new(Arch::Stacked, unit, vec![3, 4, 2], 5, 5);
            let sp = random_params(&scfg, &mut rng);
            let (gcfg, gp) = gf_sharing(&scfg, &sp, &mut rng);
            let eye: Vec<Vec<Real>> = (0..3).map(|i| (0..3).map(|j| Real::from(u8::from(i == j))).collect()).collect();
            let mut a = random_state(&scfg, &mut rng);
            let mut b = a.clone();
            for _ in 0..8 {
                let sym = rng.below(5);
                a = stacked_step(&scfg, &sp, sym, &a).unwrap();
                b = gf_step_with_gates(&gcfg, &gp, sym, &b, &eye).unwrap();
                identity_ok &= a == b;
            }

            for arch in ARCHS {
                let mut cfg = ModelConfig::new(arch, unit, vec![4], 6, 6);
                cfg.freeze_gates_to_one = arch == Arch::GatedFeedback;
                let p = random_params(&cfg, &mut rng);
                let mut cell = CellParams::zeros(unit, 6, 4);
                for (k, (w, u, b)) in cell.blocks_mut().into_iter().enumerate() {
                    *w = p.layers[0].w[k].clone();
                    *b = p.layers[0].b[k].clone();
                    *u = if k + 1 == unit.n_blocks() { p.layers[0].u_rec[0].clone() } else { p.layers[0].u_gate[k].clone() };
                }
                let mut state = random_state(&cfg, &mut rng);
                for _ in 0..6 {
                    let sym = rng.below(6);
                    let next = gf_step(&cfg, &p, sym, &state).unwrap();
                    let c = cell_forward(&cell, &one_hot(6, sym), &state.layers[0].h, state.layers[0].c.as_ref()).unwrap();
                    cell_ok &= next.layers[0].h.data == c.core.h();
                    cell_ok &= next.layers[0].c.as_ref().map(|c| c.data.as_slice()) == c.core.c();
                    state = next;
                }
            }

            let mut fcfg = ModelConfig::new(Arch::GatedFeedback, unit, vec![3, 2, 3], 4, 4);
            fcfg.freeze_gates_to_one = true;
            let p = random_params(&fcfg, &mut rng);
            let inputs: Vec<usize> = (0..7).map(|_| rng.below(4)).collect();
            let targets: Vec<usize> = (0..7).map(|_| rng.below(4)).collect();
            let out = sequence_forward(&fcfg, &p, &inputs, &targets, &random_state(&fcfg, &mut rng)).unwrap();
            let g = sequence_backward(&fcfg, &p, Some(&out.cache)).unwrap();
            let gates = g.params.gates.unwrap();
            frozen_ok &= gates.w.iter().chain(&gates.u).flatten().all(|t| t.data.iter().all(|v| *v == 0.0));
        }
    }
    verdict(
        "architecture_degeneracies",
        identity_ok && cell_ok && frozen_ok,
        &format!("identity gates ≡ stacked: {identity_ok}; one layer ≡ plain cell: {cell_ok}; frozen gates get zero gradient: {frozen_ok}"),
    );
}

/// Totals under the capacity accounting with a 205-symbol vocabulary.
const CAPACITY_TOTALS: [usize; 11] = [
    1_410_000, 1_240_200, 1_394_433, // tanh
    1_317_600, 1_340_640, 1_311_615, 2_285_721, // GRU
    1_299_144, 1_316_945, 1_299_365, 2_200_637, // LSTM
];

#[test]
fn capacity_matching() {
    let rows = paper_capacity_rows();
    let totals: Vec<usize> = rows.iter().map(|r| count_parameters(&paper_capacity_config(r, PAPER_VOCAB_SIZE))).collect();
    let mut all_within = true;
    let mut base = 0;
    for (row, &n) in rows.iter().zip(&totals) {
        if row.arch == Arch::Single {
            base = n;
        }
        let dev = n as Real / base as Real - 1.0;
        let matched = row.label.ends_with("large") || dev.abs() <= 0.10;
        all_within &= matched;
        println!(
            "  {:<5} {:<21} {}x{:<5} {:>9}  {:+6.1}%{}",
            row.unit.to_string(),
            row.label,
            row.units_per_layer.len(),
            row.units_per_layer[0],
            n,
            100.0 * dev,
            if matched { "" } else { "  outside ±10%" }
        );
    }
    let regression = totals == CAPACITY_TOTALS;
    verdict(
        "capacity_matching",
        all_within && regression,
        &format!("every group within ±10% of its single-layer model: {all_within}; totals match recorded values: {regression}"),
    );
}

#[test]
fn uniform_model_bpc() {
    let want = (PAPER_VOCAB_SIZE as Real).log2();
    let mut worst: Real = 0.0;
    for arch in ARCHS {
        for unit in UNITS {
            let units = if arch == Arch::Single { vec![8] } else { vec![8, 6] };
            let cfg = ModelConfig::new(arch, unit, units, PAPER_VOCAB_SIZE, PAPER_VOCAB_SIZE);
            let mut rng = Rng::new(4);
            let mut model = Model::new(cfg, &mut rng).unwrap();
            model.params.out_w.data.iter_mut().for_each(|v| *v = 0.0);
            model.params.out_b.data.iter_mut().for_each(|v| *v = 0.0);
            let seq: Vec<usize> = (0..400).map(|_| rng.below(PAPER_VOCAB_SIZE)).collect();
            worst = worst.max((evaluate_bpc(&model, &seq).unwrap() - want).abs());
        }
    }
    verdict("uniform_model_bpc", worst <= 1e-6, &format!("log2(205) = {want:.6}, worst deviation {worst:.1e}"));
}

fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn charlm_overfit() {
    let started = std::time::Instant::now();
    let raw = std::fs::read(data_path("paragraph.txt")).unwrap();
    assert_eq!(raw.len(), 1000);
    let vocab = build_vocab(&raw, PAPER_VOCAB_SIZE, SymbolMode::Byte).unwrap();
    let seq = vocab.encode(&raw);
    let cfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Lstm, vec![32, 32], vocab.len(), vocab.len());
    let mut model = Model::new(cfg, &mut Rng::new(0)).unwrap();
    // Standard Adam momentum; the slower 0.99 default needs far more updates here.
    let mut opt = OptimizerConfig::adam();
    opt.learning_rate = OVERFIT_CHARLM_LR;
    opt.beta1 = 0.9;
    let plan = BatchPlan { n_streams: 1, subseq_len: seq.len(), reset_interval: 1 };
    let mut t = StreamTrainer::new(&model, opt, ExplosionRule::default(), plan, seq.len()).unwrap();
    let mut bpc = Real::INFINITY;
    let mut used = 0;
    for u in 1..=500 {
        t.step(&mut model, &seq, &mut |_| {}).unwrap();
        if u % 25 == 0 {
            bpc = evaluate_bpc(&model, &seq).unwrap();
            used = u;
            if bpc < 0.2 {
                break;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "charlm_overfit",
        bpc < 0.2 && secs < 300.0,
        &format!("GF-LSTM 2x32 reached {bpc:.4} bpc on 1000 characters after {used} updates ({secs:.0}s)"),
    );
}

const OVERFIT_CHARLM_LR: Real = 0.03;
const OVERFIT_PROGEVAL_LR: Real = 0.01;

#[test]
fn progeval_overfit() {
    let started = std::time::Instant::now();
    let vocab = TaskVocab::v1();
    let mut rng = Rng::new(1);
    let samples: Vec<EncodedSample> =
        (0..50).map(|_| encode_sample(&vocab, &Curriculum::DESK.sample(&mut rng).unwrap()).unwrap()).collect();
    let mut ed = EncoderDecoder::new(Arch::GatedFeedback, UnitKind::Gru, vec![32, 32], &mut Rng::new(2)).unwrap();
    let mut opt = OptimizerConfig::adam();
    opt.learning_rate = OVERFIT_PROGEVAL_LR;
    let mut t = Seq2SeqTrainer::new(&ed, opt, ExplosionRule::default(), samples.len(), 3).unwrap();
    let mut acc = 0.0;
    let mut used = 0;
    for u in 1..=2000 {
        t.step(&mut ed, &samples, &mut |_| {}).unwrap();
        if u % 50 == 0 {
            acc = teacher_forced_accuracy(&ed, &samples).unwrap();
            used = u;
            if acc == 1.0 {
                break;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "progeval_overfit",
        acc == 1.0 && secs < 300.0,
        &format!("GF-GRU 2x32 reached accuracy {acc:.4} on 50 samples after {used} updates ({secs:.0}s)"),
    );
}

/// About 1 MB of Python standard-library source, or `GFRNN_CORPUS` if set.
fn directional_corpus() -> Option<(String, Vec<u8>)> {
    if let Ok(p) = std::env::var("GFRNN_CORPUS") {
        return Some((p.clone(), std::fs::read(&p).ok()?));
    }
    let dir = std::path::Path::new("/usr/lib/python3.10");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "py"))
        .collect();
    files.sort();
    let mut raw = Vec::new();
    for f in files {
        raw.extend(std::fs::read(f).ok()?);
        if raw.len() >= DIRECTIONAL_BYTES {
            break;
        }
    }
    if raw.len() < DIRECTIONAL_BYTES {
        return None;
    }
    raw.truncate(DIRECTIONAL_BYTES);
    Some((format!("{} (sorted *.py, first {DIRECTIONAL_BYTES} bytes)", dir.display()), raw))
}

const DIRECTIONAL_BYTES: usize = 1_000_000;
const DIRECTIONAL_LAYERS: usize = 3;
const DIRECTIONAL_STACKED_UNITS: usize = 48;
const DIRECTIONAL_EPOCHS: u64 = 8;
const DIRECTIONAL_LR: Real = 2e-3;

/// Width of the gated-feedback stack whose size is closest to `target`.
fn matched_width(unit: UnitKind, layers: usize, vocab: usize, target: usize) -> usize {
    (1..=4 * DIRECTIONAL_STACKED_UNITS)
        .min_by_key(|&n| {
            let cfg = ModelConfig::new(Arch::GatedFeedback, unit, vec![n; layers], vocab, vocab);
            count_parameters(&cfg).abs_diff(target)
        })
        .unwrap()
}

#[test]
fn directional_gf_vs_stacked() {
    let started = std::time::Instant::now();
    let Some((source, raw)) = directional_corpus() else {
        verdict("directional_gf_vs_stacked", false, "no corpus found; set GFRNN_CORPUS to a 1-5 MB text file");
        return;
    };
    let (vocab, split) = prepare_corpus(&raw, PAPER_VOCAB_SIZE, SymbolMode::Byte, SplitRatios::default()).unwrap();
    let v = vocab.len();
    let scfg = ModelConfig::new(Arch::Stacked, UnitKind::Lstm, vec![DIRECTIONAL_STACKED_UNITS; DIRECTIONAL_LAYERS], v, v);
    let budget = count_parameters(&scfg);
    let gn = matched_width(UnitKind::Lstm, DIRECTIONAL_LAYERS, v, budget);
    let gcfg = ModelConfig::new(Arch::GatedFeedback, UnitKind::Lstm, vec![gn; DIRECTIONAL_LAYERS], v, v);
    report(&format!(
        "  directional corpus {source}, vocab {v}; stacked {}x{} = {budget} params, gated feedback {}x{gn} = {} params",
        DIRECTIONAL_LAYERS,
        DIRECTIONAL_STACKED_UNITS,
        DIRECTIONAL_LAYERS,
        count_parameters(&gcfg)
    ));
    let plan = BatchPlan { n_streams: 16, subseq_len: 100, reset_interval: 100 };
    let best_bpc = |cfg: &ModelConfig, seed: u64| -> Real {
        let mut model = Model::new(cfg.clone(), &mut Rng::new(seed)).unwrap();
        let mut opt = OptimizerConfig::rmsprop_for(UnitKind::Lstm);
        opt.learning_rate = DIRECTIONAL_LR;
        let mut t = StreamTrainer::new(&model, opt, ExplosionRule::default(), plan, split.train.len()).unwrap();
        let mut best = Real::INFINITY;
        for _ in 0..DIRECTIONAL_EPOCHS {
            t.train_epoch(&mut model, &split.train, &mut |_| {}).unwrap();
            best = best.min(evaluate_bpc(&model, &split.valid).unwrap());
        }
        best
    };
    let mut wins = 0;
    for seed in 0..3 {
        let s = best_bpc(&scfg, seed);
        let g = best_bpc(&gcfg, seed);
        wins += usize::from(g <= s);
        report(&format!("  directional seed {seed}: stacked {s:.4} bpc, gated feedback {g:.4} bpc"));
    }
    let mins = started.elapsed().as_secs_f64() / 60.0;
    verdict(
        "directional_gf_vs_stacked",
        wins >= 2 && mins <= 120.0,
        &format!("gated feedback at or below stacked in {wins}/3 seeds ({mins:.0} min)"),
    );
}

#[test]
fn generator_soundness() {
    let vocab = TaskVocab::v1();
    let mut checked = 0;
    let mut bad = Vec::new();
    for nesting in 1..=5 {
        for length in 1..=10 {
            let mut rng = Rng::new(1000 + (nesting * 10 + length) as u64);
            for _ in 0..200 {
                let s = generate_program(nesting, length, &mut rng).unwrap();
                let sound = interpret(&s.script).is_ok_and(|t| t == s.target)
                    && parse_program(&s.script).unwrap().nesting() == s.nesting
                    && s.nesting == nesting
                    && digit_length(&s.target) == length
                    && s.target_length == length
                    && vocab.encode_script(&s.script).is_ok();
                if !sound {
                    bad.push(s.script);
                }
                checked += 1;
            }
        }
    }
    verdict(
        "generator_soundness",
        bad.is_empty() && checked == 10_000,
        &format!("{checked} programs over nesting 1-5 × length 1-10, {} unsound", bad.len()),
    );
}

#[test]
fn protocol_constants() {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    for unit in [UnitKind::Gru, UnitKind::Lstm] {
        let o = OptimizerConfig::rmsprop_for(unit);
        check("gated rmsprop lr 0.001", o.kind == OptimizerKind::RmspropMomentum && o.learning_rate == 1e-3);
        check("gated momentum 0.9", o.momentum == 0.9);
    }
    check("tanh lr 5e-5", OptimizerConfig::rmsprop_for(UnitKind::Tanh).learning_rate == 5e-5);
    check("charlm minibatch 100x100, reset 100", BatchPlan::PAPER == BatchPlan { n_streams: 100, subseq_len: 100, reset_interval: 100 });
    let a = OptimizerConfig::adam();
    check("adam lr 0.001, betas 0.99", a.kind == OptimizerKind::Adam && a.learning_rate == 1e-3 && a.beta1 == 0.99 && a.beta2 == 0.99);
    check("progeval minibatch 128", DEFAULT_BATCH_SIZE == 128);
    check("encoder truncation 50", ENCODER_TRUNCATION == 50);
    check("GRU 3x230", paper_layer_sizes(UnitKind::Gru) == vec![230; 3]);
    check("LSTM 3x200", paper_layer_sizes(UnitKind::Lstm) == vec![200; 3]);
    check("vocabulary 205", PAPER_VOCAB_SIZE == 205);
    check("input/output alphabets 41/13", TaskVocab::v1().input_len() == 41 && TaskVocab::v1().output_len() == 13);
    check("paper curriculum", Curriculum::PAPER.nesting == (1, 5) && Curriculum::PAPER_TRAIN_SAMPLES == 320_000);
    check("2000 samples per heatmap cell", PAPER_CELL_SAMPLES == 2000);
    check("generation default length", (200..=300).contains(&cli::DEFAULT_GENERATE_LEN));

    let model = "[model]\narch = \"stacked\"\nunit = \"gru\"\nunits_per_layer = [4]\n";
    let c = RunConfig::from_toml(&format!("task = \"charlm\"\nseed = 1\n{model}")).unwrap();
    check("charlm run defaults", c.charlm.batch == BatchPlan::PAPER && c.max_epochs() == 100 && c.patience == 5);
    let p = RunConfig::from_toml(&format!("task = \"progeval\"\nseed = 1\n{model}")).unwrap();
    check(
        "progeval run defaults",
        p.progeval.batch_size == 128
            && p.max_epochs() == 30
            && p.optimizer_config().kind == OptimizerKind::Adam
            && p.truncation() == Some(50),
    );
    verdict(
        "protocol_constants",
        failures.is_empty(),
        &if failures.is_empty() { "all defaults match".to_string() } else { format!("mismatched: {}", failures.join(", ")) },
    );
}

fn charlm_config(corpus: &std::path::Path) -> RunConfig {
    RunConfig::from_toml(&format!(
        "task = \"charlm\"\nseed = 9\n[model]\narch = \"gated_feedback\"\nunit = \"lstm\"\nunits_per_layer = [6, 5]\n\
         [optimizer]\nkind = \"rmsprop_momentum\"\nlearning_rate = 0.01\nmomentum = 0.9\nbeta1 = 0.9\nbeta2 = 0.999\nrms_decay = 0.95\nepsilon = 1e-8\n\
         [paths]\ncorpus = \"{}\"\n[charlm.batch]\nn_streams = 4\nsubseq_len = 12\nreset_interval = 5\n",
        corpus.display()
    ))
    .unwrap()
}

#[test]
fn determinism_and_checkpointing() {
    let dir = tempfile::tempdir().unwrap();
    let raw = std::fs::read(data_path("paragraph.txt")).unwrap();
    let cfg = charlm_config(&data_path("paragraph.txt"));

    let trace = |run: &mut dyn Run, n: usize| -> Vec<Real> { (0..n).map(|_| run.step(&mut |_| {}).unwrap().nll).collect() };
    let mut a = CharlmRun::new(cfg.clone(), &raw).unwrap();
    let mut b = CharlmRun::new(cfg.clone(), &raw).unwrap();
    let ta = trace(&mut a, 30);
    let same_seed = ta == trace(&mut b, 30) && a.model.params == b.model.params;

    let mut c = CharlmRun::new(cfg.clone(), &raw).unwrap();
    let mut tc = trace(&mut c, 13);
    let path = dir.path().join("mid.ckpt");
    c.checkpoint().save(&path).unwrap();
    let mut d = CharlmRun::resume(&Checkpoint::load(&path).unwrap(), &raw).unwrap();
    tc.extend(trace(&mut d, 17));
    let charlm_resume = tc == ta && d.model.params == a.model.params && d.trainer == a.trainer;

    let mut rng = Rng::new(6);
    let samples: Vec<_> = (0..40).map(|_| Curriculum::DESK.sample(&mut rng).unwrap()).collect();
    let data = ProgevalData::from_samples(&samples, &samples[..5], &samples[..5]).unwrap();
    let pcfg = RunConfig::from_toml(
        "task = \"progeval\"\nseed = 4\n[model]\narch = \"gated_feedback\"\nunit = \"gru\"\nunits_per_layer = [5, 4]\n[progeval]\nbatch_size = 16\n",
    )
    .unwrap();
    let mut p = ProgevalRun::new(pcfg.clone(), data.clone()).unwrap();
    let mut q = ProgevalRun::new(pcfg.clone(), data.clone()).unwrap();
    let tp = trace(&mut p, 8);
    let progeval_same = tp == trace(&mut q, 8) && p.model == q.model;
    let mut r = ProgevalRun::new(pcfg, data.clone()).unwrap();
    let mut tr = trace(&mut r, 5);
    let ppath = dir.path().join("pe.ckpt");
    r.checkpoint().save(&ppath).unwrap();
    let mut s = ProgevalRun::resume(&Checkpoint::load(&ppath).unwrap(), data).unwrap();
    tr.extend(trace(&mut s, 3));
    let progeval_resume = tr == tp && s.model == p.model;

    verdict(
        "determinism_and_checkpointing",
        same_seed && charlm_resume && progeval_same && progeval_resume,
        &format!(
            "same-seed charlm: {same_seed}, charlm resume: {charlm_resume}, same-seed progeval: {progeval_same}, progeval resume: {progeval_resume}"
        ),
    );
}

#[test]
fn heatmap_cells_disjoint_from_training() {
    let mut rng = Rng::new(8);
    let train: HashSet<String> = (0..300).map(|_| generate_program(1, 1, &mut rng).unwrap().script).collect();
    let cells = gfrnn::progeval::cell_test_set(1, 1, 100, &mut Rng::new(9), &train).unwrap();
    verdict(
        "heatmap_cells_disjoint_from_training",
        cells.iter().all(|s| !train.contains(&s.script)),
        &format!("{} cell samples checked against {} training scripts", cells.len(), train.len()),
    );
}
