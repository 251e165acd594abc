//! Acceptance suite: one test per criterion, each printing a
//! `[PASS]`/`[FAIL]` line with its measured quantity. Run with
//! `cargo test -p ansg-cli --test acceptance -- --nocapture`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ansg_core::autograd::{GradientSet, ParamId, ParamSet, Tape};
use ansg_core::check::{format_entry, standard_gradcheck_suite};
use ansg_core::data::{generate_phantom, ImageStack, PhantomConfig};
use ansg_core::fcn::{KUNetConfig, UNetConfig};
use ansg_core::metrics::{info_score, pixel_error, rand_score_foreground, Labeling};
use ansg_core::pipeline::{
    segment_stack, tiled_apply, FeatureStack, InferencePath, PipelineConfig, SegModel,
    SequenceMode,
};
use ansg_core::recurrent::{
    clstm_step, lstm_step, BdcLstmStackConfig, BdcLstmStackParams, CellState, ConvLstmParams,
    InitScheme, LstmParams,
};
use ansg_core::rng::Rng;
use ansg_core::tensor::{Padding, Tensor};
use ansg_core::training::{
    adam_step, clip_gradients, lr_schedule, rmsprop_step, train_loop, LrSchedule, OptimizerHyper,
    TrainConfig, TrainMode, TrainState,
};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[{}] {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ansg"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ansg-acc-{}-{name}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let entries = standard_gradcheck_suite().expect("suite must build");
    let mut worst: f64 = 0.0;
    let mut all_ok = true;
    for entry in &entries {
        println!("  {}", format_entry(entry));
        worst = worst.max(entry.report.max_rel_err);
        all_ok &= entry.report.passed();
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "criterion 1 (gradient integrity)",
        all_ok && elapsed < 600.0,
        &format!(
            "{} checks, worst max_rel_err {worst:.3e} (tol 1e-4), {elapsed:.1}s (budget 600s)",
            entries.len()
        ),
    );
}

#[test]
fn criterion_2_shape_fidelity() {
    let dir = temp_dir("shapes");
    let cfg_path = dir.join("full-scale.json");
    std::fs::write(
        &cfg_path,
        r#"{ "fcn": { "out_channels": 64 }, "rnn": { "preset": "full" },
             "pipeline": { "tile": 100, "margin": 26 } }"#,
    )
    .unwrap();
    let out = bin()
        .args(["shapes", "--config", cfg_path.to_str().unwrap()])
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let chain = "64x126x126 -> 64x118x118 -> 64x59x59 -> 64x51x51 -> 64x102x102 -> 64x100x100 -> 2x100x100";
    let ok = out.status.success()
        && stdout.contains(&format!("chain: {chain}"))
        && stdout.contains("tile margin: 26");
    report(
        "criterion 2 (shape fidelity)",
        ok,
        &format!("`shapes` chain and margin verified against `{chain}`"),
    );
}

#[test]
fn criterion_3_degeneracy_oracle() {
    let mut rng = Rng::from_seed(0xACCE_55);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let input = 1 + rng.index(4);
        let hidden = 1 + rng.index(4);
        let mut ps = ParamSet::new();
        let mut zero = Rng::from_seed(0);
        let vec_cell = LstmParams::init(&mut ps, "v", input, hidden, InitScheme::Uniform(0.0), &mut zero)
            .unwrap();
        let conv_cell =
            ConvLstmParams::init(&mut ps, "c", input, hidden, 1, InitScheme::Uniform(0.0), &mut zero)
                .unwrap();
        for (v, c) in [
            (vec_cell.w_xi, conv_cell.w_xi),
            (vec_cell.w_hi, conv_cell.w_hi),
            (vec_cell.w_xf, conv_cell.w_xf),
            (vec_cell.w_hf, conv_cell.w_hf),
            (vec_cell.w_xc, conv_cell.w_xc),
            (vec_cell.w_hc, conv_cell.w_hc),
            (vec_cell.w_xo, conv_cell.w_xo),
            (vec_cell.w_ho, conv_cell.w_ho),
            (vec_cell.b_i, conv_cell.b_i),
            (vec_cell.b_f, conv_cell.b_f),
            (vec_cell.b_c, conv_cell.b_c),
            (vec_cell.b_o, conv_cell.b_o),
        ] {
            let draws: Vec<f64> = (0..ps.value(v).numel()).map(|_| rng.uniform(-1.5, 1.5)).collect();
            ps.value_mut(v).data_mut().copy_from_slice(&draws);
            ps.value_mut(c).data_mut().copy_from_slice(&draws);
        }
        let x: Vec<f64> = (0..input).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let c0: Vec<f64> = (0..hidden).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let h0: Vec<f64> = (0..hidden).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(vec![input], x.clone()).unwrap());
        let prev_v = CellState {
            c: tape.input(Tensor::new(vec![hidden], c0.clone()).unwrap()),
            h: tape.input(Tensor::new(vec![hidden], h0.clone()).unwrap()),
        };
        let sv = lstm_step(&mut tape, &ps, &vec_cell, xv, Some(&prev_v)).unwrap();

        let xc = tape.input(Tensor::new(vec![input, 1, 1], x).unwrap());
        let prev_c = CellState {
            c: tape.input(Tensor::new(vec![hidden, 1, 1], c0).unwrap()),
            h: tape.input(Tensor::new(vec![hidden, 1, 1], h0).unwrap()),
        };
        let sc = clstm_step(&mut tape, &ps, &conv_cell, xc, Some(&prev_c), Padding::Valid).unwrap();

        let same = tape
            .value(sv.h)
            .data()
            .iter()
            .zip(tape.value(sc.h).data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && tape
                .value(sv.c)
                .data()
                .iter()
                .zip(tape.value(sc.c).data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += usize::from(!same);
    }
    report(
        "criterion 3 (degeneracy oracle)",
        mismatches == 0,
        &format!("100 random parameter draws, {mismatches} bitwise mismatches"),
    );
}

#[test]
fn criterion_4_tiling_oracle() {
    let stack_cfg = BdcLstmStackConfig::with_widths(3, 2, 3, 4);
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = Rng::substream(seed, "acceptance.tiling");
        let mut ps = ParamSet::<f32>::new();
        let params =
            BdcLstmStackParams::init(&mut ps, "deep", &stack_cfg, InitScheme::Uniform(0.02), &mut rng)
                .unwrap();
        let features = FeatureStack::new(
            (0..3)
                .map(|_| Tensor::from_fn(&[3, 220, 220], |_| rng.uniform(-1.0, 1.0) as f32))
                .collect(),
        )
        .unwrap();
        let config = |tile: usize| PipelineConfig {
            rho: 1,
            tile,
            margin: 14,
            sequence_mode: SequenceMode::Window,
            feature_working: 512,
            feature_context: 32,
        };
        let tiled = tiled_apply(&features, &ps, &stack_cfg, &params, &config(100)).unwrap();
        let whole = tiled_apply(&features, &ps, &stack_cfg, &params, &config(220)).unwrap();
        for z in 0..3 {
            worst = worst.max(tiled.slice(z).max_abs_diff(whole.slice(z)));
        }
    }
    report(
        "criterion 4 (tiling oracle)",
        worst < 1e-5,
        &format!("3x220x220 stacks, 10 seeds: max |tiled - whole| = {worst:.3e} (tol 1e-5)"),
    );
}

#[test]
fn criterion_5_optimizer_unit_oracles() {
    let scalar_state = |v: f64| {
        let mut ps = ParamSet::new();
        ps.register("p", Tensor::scalar(v)).unwrap();
        TrainState::new(ps, 0)
    };
    let grad_one = || {
        let mut g = GradientSet::empty(1);
        g.insert(ParamId(0), Tensor::scalar(1.0));
        g
    };

    let mut state = scalar_state(0.0);
    adam_step(&mut state, &grad_one(), &OptimizerHyper::adam_reference()).unwrap();
    let adam_update = -state.params.value(ParamId(0)).data()[0];
    let adam_expected = 5e-5 / (1.0 + 1e-10);
    let adam_ok = (adam_update - adam_expected).abs() < 1e-9;

    let mut state = scalar_state(0.0);
    let mut hyper = OptimizerHyper::rmsprop_reference();
    hyper.schedule = LrSchedule::Constant(1e-3);
    rmsprop_step(&mut state, &grad_one(), &hyper).unwrap();
    let rms_update = -state.params.value(ParamId(0)).data()[0];
    let rms_expected = 1e-3 / (0.1f64 + 1e-5).sqrt();
    let rms_ok = (rms_update - rms_expected).abs() < 1e-9;

    let lr_ok =
        lr_schedule(0) == 1e-3 && lr_schedule(4000) == 2.5e-4 && lr_schedule(14000) == 1e-5;

    let mut grads = GradientSet::empty(1);
    grads.insert(ParamId(0), Tensor::new(vec![2], vec![7.0, -6.0]).unwrap());
    clip_gradients(&mut grads, 5.0).unwrap();
    let clip_ok = grads.get(ParamId(0)).unwrap().data() == [5.0, -5.0];

    report(
        "criterion 5 (optimizer unit oracles)",
        adam_ok && rms_ok && lr_ok && clip_ok,
        &format!(
            "adam {adam_update:.6e} (want {adam_expected:.6e}), rmsprop {rms_update:.6e} \
             (want {rms_expected:.6e}), schedule 1e-3/2.5e-4/1e-5, clip 7->5 / -6->-5"
        ),
    );
}

#[test]
fn criterion_6_metric_oracles() {
    // Pair-enumeration oracle (predicted background = singleton segments).
    let rand_by_pairs = |pred: &Labeling, gt: &Labeling| -> f64 {
        let (mut agree, mut same_pred, mut same_gt) = (0u64, 0u64, 0u64);
        let n = gt.ids.len();
        for i in 0..n {
            if gt.ids[i] == 0 {
                continue;
            }
            for j in i + 1..n {
                if gt.ids[j] == 0 {
                    continue;
                }
                let sp = pred.ids[i] != 0 && pred.ids[i] == pred.ids[j];
                let sg = gt.ids[i] == gt.ids[j];
                same_pred += u64::from(sp);
                same_gt += u64::from(sg);
                agree += u64::from(sp && sg);
            }
        }
        let p = if same_pred == 0 { 1.0 } else { agree as f64 / same_pred as f64 };
        let r = if same_gt == 0 { 1.0 } else { agree as f64 / same_gt as f64 };
        if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
    };
    let info_by_table = |pred: &Labeling, gt: &Labeling| -> f64 {
        use std::collections::BTreeMap;
        let mut joint: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        let mut singleton = 1_000_000u64;
        let mut n = 0u64;
        for (&p, &g) in pred.ids.iter().zip(gt.ids.iter()) {
            if g == 0 {
                continue;
            }
            let pk = if p == 0 {
                singleton += 1;
                singleton
            } else {
                u64::from(p)
            };
            *joint.entry((pk, u64::from(g))).or_insert(0) += 1;
            n += 1;
        }
        let nf = n as f64;
        let mut pm: BTreeMap<u64, u64> = BTreeMap::new();
        let mut gm: BTreeMap<u64, u64> = BTreeMap::new();
        for (&(p, g), &c) in &joint {
            *pm.entry(p).or_insert(0) += c;
            *gm.entry(g).or_insert(0) += c;
        }
        let entropy = |m: &BTreeMap<u64, u64>| {
            m.values().map(|&c| (c as f64 / nf) * (nf / c as f64).ln()).sum::<f64>()
        };
        let (hp, hg) = (entropy(&pm), entropy(&gm));
        if hp + hg == 0.0 {
            return 1.0;
        }
        let mut mi = 0.0;
        for (&(p, g), &c) in &joint {
            mi += (c as f64 / nf) * ((c as f64 * nf) / (pm[&p] as f64 * gm[&g] as f64)).ln();
        }
        (2.0 * mi / (hp + hg)).clamp(0.0, 1.0)
    };

    // All component labelings of all binary 3x3 maps with <= 3 segments.
    let mut labelings = Vec::new();
    for bits in 0u16..512 {
        let map: Vec<u8> = (0..9).map(|i| ((bits >> i) & 1) as u8).collect();
        for conn in [
            ansg_core::metrics::Connectivity::Four,
            ansg_core::metrics::Connectivity::Eight,
        ] {
            let l = ansg_core::metrics::connected_components(&map, 3, 3, conn);
            if l.n_segments <= 3 && !labelings.contains(&l) {
                labelings.push(l);
            }
        }
    }
    let mut pairs = 0u64;
    let mut exact = true;
    for gt in &labelings {
        if gt.foreground_count() == 0 {
            continue;
        }
        for pred in &labelings {
            exact &= rand_score_foreground(pred, gt).unwrap() == rand_by_pairs(pred, gt);
            exact &= info_score(pred, gt).unwrap() == info_by_table(pred, gt);
            pairs += 1;
        }
    }

    let gt4 = Labeling::new(vec![1, 1, 2, 2], 2, 2).unwrap();
    let pred4 = Labeling::new(vec![1, 1, 1, 1], 2, 2).unwrap();
    let worked = rand_score_foreground(&pred4, &gt4).unwrap();

    report(
        "criterion 6 (metric oracles)",
        exact && worked == 0.5,
        &format!("{pairs} labeling pairs matched exactly; 4-pixel example V_rand = {worked}"),
    );
}

// Shared setup for the training-based criteria.

fn acceptance_phantom(seed: u64) -> ImageStack {
    generate_phantom(&PhantomConfig {
        n_z: 12,
        n_x: 48,
        n_y: 48,
        anisotropy: 4.0,
        tubes: 3,
        radius: (2.5, 4.5),
        noise: 0.05,
        illumination: 0.15,
        seed,
    })
    .unwrap()
}

fn acceptance_model(ps: &mut ParamSet<f32>, seed: u64) -> SegModel {
    let unet = UNetConfig {
        depth: 2,
        base_channels: 8,
        kernel: 3,
        padding: Padding::Same,
        out_channels: 64,
    };
    SegModel::init(
        ps,
        KUNetConfig::uniform(2, unet),
        BdcLstmStackConfig::with_widths(64, 8, 3, 16),
        seed,
    )
    .unwrap()
}

fn acceptance_pipe() -> PipelineConfig {
    PipelineConfig {
        rho: 1,
        tile: 48,
        margin: 14,
        sequence_mode: SequenceMode::Window,
        feature_working: 256,
        feature_context: 32,
    }
}

fn held_out_pixel_error(
    stack: &ImageStack,
    state: &TrainState<f32>,
    model: &SegModel,
    path: InferencePath,
) -> f64 {
    let probs = segment_stack(stack, &state.params, model, &acceptance_pipe(), path).unwrap();
    pixel_error(&probs, stack.labels.as_ref().unwrap(), None).unwrap()
}

#[test]
fn criterion_7_learning_smoke_test() {
    let start = Instant::now();
    let train_stack = acceptance_phantom(1001);
    let held_out = acceptance_phantom(2002);

    let mut ps = ParamSet::new();
    let model = acceptance_model(&mut ps, 5);
    let mut state = TrainState::new(ps, 5);

    let untrained = held_out_pixel_error(&held_out, &state, &model, InferencePath::FcnOnly);

    let mut cfg = TrainConfig::new(TrainMode::FcnOnly, 500, 5);
    cfg.fcn_tile = 48;
    let trace = train_loop(&model, &mut state, &train_stack, &cfg, |_, _| Ok(())).unwrap();

    // First/last windows of the per-iteration loss (single random tiles are
    // noisy; short windows keep the comparison meaningful).
    let initial: f64 = trace.iter().take(10).map(|r| r.loss).sum::<f64>() / 10.0;
    let final_loss: f64 = trace.iter().rev().take(10).map(|r| r.loss).sum::<f64>() / 10.0;
    let trained = held_out_pixel_error(&held_out, &state, &model, InferencePath::FcnOnly);
    let elapsed = start.elapsed().as_secs_f64();

    let ok = final_loss < 0.5 * initial && untrained >= 0.4 && trained < 0.25 && elapsed < 900.0;
    report(
        "criterion 7 (learning smoke test)",
        ok,
        &format!(
            "loss {initial:.4} -> {final_loss:.4} (need < 50%), held-out pixel error \
             {untrained:.3} -> {trained:.3} (need >= 0.4 -> < 0.25), {elapsed:.0}s (budget 900s)"
        ),
    );
}

#[test]
fn criterion_8_qualitative_ordering() {
    let train_stack = acceptance_phantom(1001);
    let held_out = acceptance_phantom(2002);

    // Desk-width model for the comparison; the reduced widths need the
    // fan-in-scaled stack initialization to converge in a sane budget.
    let ordering_model = |ps: &mut ParamSet<f32>, seed: u64| -> SegModel {
        let unet = UNetConfig {
            depth: 2,
            base_channels: 8,
            kernel: 3,
            padding: Padding::Same,
            out_channels: 16,
        };
        SegModel::init_with_stack_scheme(
            ps,
            KUNetConfig::uniform(2, unet),
            BdcLstmStackConfig::with_widths(16, 8, 3, 16),
            seed,
            InitScheme::FanInUniform,
        )
        .unwrap()
    };

    let mut best_gap = f64::INFINITY;
    let mut rows = Vec::new();
    for seed in [11u64, 22, 33] {
        let mut ps = ParamSet::new();
        let model = ordering_model(&mut ps, seed);
        let mut state = TrainState::new(ps, seed);

        let mut fcn_cfg = TrainConfig::new(TrainMode::FcnOnly, 400, seed);
        fcn_cfg.fcn_tile = 48;
        train_loop(&model, &mut state, &train_stack, &fcn_cfg, |_, _| Ok(())).unwrap();
        let pe_fcn = held_out_pixel_error(&held_out, &state, &model, InferencePath::FcnOnly);

        let mut rnn_cfg = TrainConfig::new(TrainMode::RnnOnly, 400, seed);
        rnn_cfg.rnn_tile = 26;
        train_loop(&model, &mut state, &train_stack, &rnn_cfg, |_, _| Ok(())).unwrap();
        let pe_rnn = held_out_pixel_error(&held_out, &state, &model, InferencePath::WithContext);

        rows.push(format!("seed {seed}: fcn {pe_fcn:.4}, fcn+rnn {pe_rnn:.4}"));
        best_gap = best_gap.min(pe_rnn - pe_fcn);
    }
    for row in &rows {
        println!("  {row}");
    }
    report(
        "criterion 8 (qualitative ordering)",
        best_gap <= 0.01,
        &format!("best-of-3 gap fcn+rnn minus fcn = {best_gap:.4} (ties allowed, fail above 0.01)"),
    );
}

#[test]
fn criterion_9_reproducibility() {
    let dir = temp_dir("repro");
    let cfg_path = dir.join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{
          "seed": 17,
          "data": { "phantom": { "n_z": 6, "n_x": 32, "n_y": 32, "tubes": 2,
                                  "radius_min": 2.0, "radius_max": 3.0 } },
          "fcn": { "base_channels": 4, "out_channels": 16 },
          "rnn": { "hidden": 4, "conv_channels": 8 },
          "pipeline": { "tile": 32, "margin": 14 },
          "training": { "iterations": 12, "fcn_tile": 32, "rnn_tile": 6 }
        }"#,
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let run = |args: &[&str]| {
        let out = bin().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let read = |p: &Path| std::fs::read(p).unwrap();

    let data = dir.join("data");
    run(&["gen-data", "--config", cfg, "--out", data.to_str().unwrap()]);
    let phantom = data.join("phantom.zstk");

    let (a, b) = (dir.join("train-a"), dir.join("train-b"));
    run(&["train", "--config", cfg, "--out", a.to_str().unwrap()]);
    run(&["train", "--config", cfg, "--out", b.to_str().unwrap()]);
    let ckpt_same = read(&a.join("checkpoint.ansg")) == read(&b.join("checkpoint.ansg"));
    let trace_same = read(&a.join("loss_trace.csv")) == read(&b.join("loss_trace.csv"));

    let (sa, sb) = (dir.join("seg-a"), dir.join("seg-b"));
    for seg in [&sa, &sb] {
        run(&[
            "infer",
            "--config",
            cfg,
            "--out",
            seg.to_str().unwrap(),
            "--stack",
            phantom.to_str().unwrap(),
            "--checkpoint",
            a.join("checkpoint.ansg").to_str().unwrap(),
        ]);
    }
    let probs_same = read(&sa.join("probabilities.zstk")) == read(&sb.join("probabilities.zstk"));

    report(
        "criterion 9 (reproducibility)",
        ckpt_same && trace_same && probs_same,
        &format!(
            "checkpoint bitwise: {ckpt_same}, loss trace bitwise: {trace_same}, \
             probabilities bitwise: {probs_same}"
        ),
    );
}
