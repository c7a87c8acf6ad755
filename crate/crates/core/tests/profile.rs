//! Manual timing probes (run with --ignored when tuning).

use masklab::config::ExperimentConfig;
use masklab::data::Filter;
use masklab::graph::Graph;
use masklab::mask::MaskSet;
use masklab::objective::{GraphSource, MaskMode, Objective, TaskData};
use masklab::pipeline::Session;
use masklab::rng::{SeedPool, StreamKind};
use std::time::Instant;

#[test]
#[ignore]
fn profile_mask_step_components() {
    let config = ExperimentConfig::from_toml_str(
        r#"
        task = "addmul"
        [model]
        kind = "ffn"
        layers = [42, 400, 400, 200, 20]
        [mask]
        beta = 1e-4
        "#,
    )
    .unwrap();
    let session: Session<f32> = Session::new(config).unwrap();
    let pool = SeedPool::new(1);
    let mut rng = pool.stream(StreamKind::WeightsInit, 0);
    let params = session.objective.init_params::<f32>(&mut rng);
    let mask = MaskSet::init(&params, 0.9, &[], "p").unwrap();
    let mut mrng = pool.stream(StreamKind::MaskSample, 0);
    let mut drng = pool.stream(StreamKind::DataShuffle, 0);
    let mut data = TaskData::<f32>::synthetic(
        session.config.task,
        &Filter::All,
        session.objective.da_protocol(),
    )
    .unwrap();

    let reps = 50;

    let t = Instant::now();
    for _ in 0..reps {
        let _ = mask.sample_noise(&mut mrng);
    }
    eprintln!("noise (1 sample, 262k): {:?}/rep", t.elapsed() / reps);

    let batch = data.next_step(128, &mut drng).remove(0);
    let part = batch.slice_rows(0, 32);

    let noise = mask.sample_noise(&mut mrng);
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let mut src = GraphSource::new(&params, false, MaskMode::Sampled { mask: &mask, noise: &noise });
        let loss = session.objective.loss(&mut g, &mut src, &part).unwrap();
        let _ = g.value(loss).scalar_value();
    }
    eprintln!("forward only (batch 32 masked): {:?}/rep", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let mut src = GraphSource::new(&params, false, MaskMode::Sampled { mask: &mask, noise: &noise });
        let loss = session.objective.loss(&mut g, &mut src, &part).unwrap();
        let _ = g.backward(loss).unwrap();
    }
    eprintln!("forward+backward (batch 32 masked): {:?}/rep", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let mut src = GraphSource::new(&params, true, MaskMode::None);
        let loss = session.objective.loss(&mut g, &mut src, &batch).unwrap();
        let _ = g.backward(loss).unwrap();
    }
    eprintln!("weight step fwd+bwd (batch 128, no mask): {:?}/rep", t.elapsed() / reps);
}

#[test]
#[ignore]
fn probe_addmul_beta_choices() {
    for beta in [4e-4_f64, 1e-3] {
        let config = ExperimentConfig::from_toml_str(&format!(
            r#"
            task = "addmul"
            seeds = [1]
            [model]
            kind = "ffn"
            layers = [42, 400, 400, 200, 20]
            [mask]
            beta = {beta}
            [train]
            steps = 8000
            [train.early_exit]
            check_every = 250
            target_accuracy = 0.995
            probe_samples = 2048
            [eval]
            samples = 4096
            [[stage]]
            name = "add"
            filter = "op=add"
            steps = 4000
            [stage.early_exit]
            check_every = 500
            target_accuracy = 0.95
            probe_samples = 1024
            min_steps = 1500
            kept_tolerance = 0.004
            [[stage]]
            name = "mul"
            filter = "op=mul"
            steps = 4000
            [stage.early_exit]
            check_every = 500
            target_accuracy = 0.95
            probe_samples = 1024
            min_steps = 1500
            kept_tolerance = 0.004
            "#
        ))
        .unwrap();
        let session: Session<f32> = Session::new(config).unwrap();
        let t0 = Instant::now();
        let mut ckpt = masklab::pipeline::train_weights(&session, 1).unwrap();
        masklab::pipeline::train_mask_stage(&session, &mut ckpt, "add").unwrap();
        masklab::pipeline::train_mask_stage(&session, &mut ckpt, "mul").unwrap();
        let matrix = masklab::pipeline::evaluate_matrix(&session, &ckpt).unwrap();
        eprintln!(
            "beta={beta}: {:.0?} total | add-mask: add={:.3} mul={:.3} kept={:.3} | not-add on add={:.3} | mul-mask kept={:.3}",
            t0.elapsed(),
            matrix.accuracy("add", "op=add").unwrap(),
            matrix.accuracy("add", "op=mul").unwrap(),
            ckpt.metrics["kept/add"],
            matrix.accuracy("not-add", "op=add").unwrap(),
            ckpt.metrics["kept/mul"],
        );
        let sharing = &matrix.sharing[0];
        let layers: Vec<String> = sharing
            .per_layer
            .iter()
            .map(|(l, s)| format!("L{l}={:.3}", s.shared_fraction))
            .collect();
        eprintln!("  add-vs-mul sharing: {} total={:.3}", layers.join(" "), sharing.totals.shared_fraction);
    }
}

#[test]
#[ignore]
fn profile_noise_breakdown() {
    let pool = SeedPool::new(3);
    let mut rng = pool.stream(StreamKind::MaskSample, 0);
    let n = 1_000_000usize;

    let t = Instant::now();
    let mut acc = 0.0f64;
    for _ in 0..2 * n {
        acc += rng.uniform_open();
    }
    let uniform_time = t.elapsed();
    eprintln!("2M uniform_open: {uniform_time:?} ({acc:.1})");

    let us: Vec<f32> = (0..2 * n).map(|_| rng.uniform_open() as f32).collect();
    let t = Instant::now();
    let mut acc = 0.0f32;
    for pair in us.chunks_exact(2) {
        acc += (pair[0].ln() / pair[1].ln()).ln();
    }
    eprintln!("1M gumbel noise from cached f32 uniforms (3 lnf): {:?} ({acc:.1})", t.elapsed());

    let us64: Vec<f64> = us.iter().map(|&x| x as f64).collect();
    let t = Instant::now();
    let mut acc = 0.0f64;
    for pair in us64.chunks_exact(2) {
        acc += (pair[0].ln() / pair[1].ln()).ln();
    }
    eprintln!("1M gumbel noise from cached f64 uniforms (3 ln): {:?} ({acc:.1})", t.elapsed());

    let t = Instant::now();
    let mut acc = 0.0f32;
    for &u in &us {
        acc += u.exp();
    }
    eprintln!("2M expf: {:?} ({acc:.1})", t.elapsed());
}
