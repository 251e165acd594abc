//! The standard gradient-integrity suite: every differentiable building
//! block, the recurrent cells, the reduced-width deep stack and a small
//! two-scale feature extractor, each verified against central finite
//! differences in double precision.
//!
//! The `gradcheck` CLI subcommand prints this suite; the acceptance tests
//! assert it. All inputs and parameters are seeded, so a run either always
//! passes or always fails.

use crate::autograd::{finite_diff_check, GradCheckReport, NodeId, ParamSet};
use crate::error::Result;
use crate::fcn::{kunet_forward, KUNetConfig, KUNetParams, UNetConfig};
use crate::recurrent::{
    bdclstm_forward, clstm_step, deep_forward, lstm_step, BdcLstmStackConfig, BdcLstmStackParams,
    CellState, ConvLstmParams, InitScheme, LstmParams,
};
use crate::rng::Rng;
use crate::tensor::{Padding, Tensor};

/// One named gradient check.
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-scale, scale))
}

fn check_conv2d() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(11, "check.conv2d");
    let mut ps = ParamSet::new();
    let x = ps.register("x", rand_tensor(&[3, 6, 6], &mut rng, 1.0))?;
    let wv = ps.register("w_valid", rand_tensor(&[4, 3, 3, 3], &mut rng, 0.7))?;
    let bv = ps.register("b_valid", rand_tensor(&[4], &mut rng, 0.7))?;
    let ws = ps.register("w_same", rand_tensor(&[2, 3, 3, 3], &mut rng, 0.7))?;
    let bs = ps.register("b_same", rand_tensor(&[2], &mut rng, 0.7))?;
    finite_diff_check(
        &mut ps,
        |tape, ps| {
            let xn = tape.param(ps, x);
            let wvn = tape.param(ps, wv);
            let bvn = tape.param(ps, bv);
            let valid = tape.conv2d(xn, wvn, Some(bvn), Padding::Valid)?;
            let l1 = tape.sum(valid);
            let wsn = tape.param(ps, ws);
            let bsn = tape.param(ps, bs);
            let same = tape.conv2d(xn, wsn, Some(bsn), Padding::Same)?;
            let act = tape.tanh(same);
            let l2 = tape.sum(act);
            let total = tape.add(l1, l2)?;
            // Keep the loss O(1) so finite-difference roundoff stays below
            // the relative-error floor at near-zero gradient coordinates.
            Ok(tape.scale(total, 1.0 / 252.0))
        },
        1e-4,
        TOL,
    )
}

fn check_max_pool2() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(12, "check.maxpool");
    let mut ps = ParamSet::new();
    let x = ps.register("x", rand_tensor(&[2, 6, 6], &mut rng, 1.0))?;
    finite_diff_check(
        &mut ps,
        |tape, ps| {
            let xn = tape.param(ps, x);
            let pooled = tape.max_pool2(xn)?;
            let act = tape.tanh(pooled);
            let total = tape.sum(act);
            Ok(tape.scale(total, 1.0 / 18.0))
        },
        1e-4,
        TOL,
    )
}

fn check_deconv2() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(13, "check.deconv");
    let mut ps = ParamSet::new();
    let x = ps.register("x", rand_tensor(&[2, 3, 3], &mut rng, 1.0))?;
    let w = ps.register("w", rand_tensor(&[3, 2, 2, 2], &mut rng, 0.7))?;
    let b = ps.register("b", rand_tensor(&[3], &mut rng, 0.7))?;
    finite_diff_check(
        &mut ps,
        |tape, ps| {
            let xn = tape.param(ps, x);
            let wn = tape.param(ps, w);
            let bn = tape.param(ps, b);
            let up = tape.deconv2(xn, wn, Some(bn))?;
            let act = tape.tanh(up);
            let total = tape.sum(act);
            Ok(tape.scale(total, 1.0 / 108.0))
        },
        1e-4,
        TOL,
    )
}

fn check_softmax_wce() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(14, "check.wce");
    let mut ps = ParamSet::new();
    let logits = ps.register("logits", rand_tensor(&[2, 5, 5], &mut rng, 2.0))?;
    let labels: Vec<u8> = (0..25).map(|_| rng.index(2) as u8).collect();
    let weights = Tensor::from_fn(&[1, 5, 5], |_| rng.uniform(0.2, 3.0));
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let ln = tape.param(ps, logits);
            let prob = tape.softmax_channels(ln)?;
            tape.weighted_cross_entropy(prob, &labels, &weights)
        },
        1e-4,
        TOL,
    )
}

fn check_lstm_step() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(15, "check.lstm");
    let mut ps = ParamSet::new();
    let params = LstmParams::init(&mut ps, "cell", 4, 3, InitScheme::Uniform(0.8), &mut rng)?;
    let x = ps.register("x", rand_tensor(&[4], &mut rng, 1.0))?;
    let c0 = ps.register("c0", rand_tensor(&[3], &mut rng, 1.0))?;
    let h0 = ps.register("h0", rand_tensor(&[3], &mut rng, 1.0))?;
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let xn = tape.param(ps, x);
            let prev = CellState {
                c: tape.param(ps, c0),
                h: tape.param(ps, h0),
            };
            let state = lstm_step(tape, ps, &params, xn, Some(&prev))?;
            let lh = tape.sum(state.h);
            let lc = tape.sum(state.c);
            let total = tape.add(lh, lc)?;
            Ok(tape.scale(total, 1.0 / 6.0))
        },
        1e-4,
        TOL,
    )
}

fn check_clstm_step() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(16, "check.clstm");
    let mut ps = ParamSet::new();
    let params = ConvLstmParams::init(&mut ps, "cell", 1, 2, 3, InitScheme::Uniform(0.6), &mut rng)?;
    let x = ps.register("x", rand_tensor(&[1, 4, 4], &mut rng, 1.0))?;
    let c0 = ps.register("c0", rand_tensor(&[2, 4, 4], &mut rng, 1.0))?;
    let h0 = ps.register("h0", rand_tensor(&[2, 4, 4], &mut rng, 1.0))?;
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let xn = tape.param(ps, x);
            let prev = CellState {
                c: tape.param(ps, c0),
                h: tape.param(ps, h0),
            };
            let state = clstm_step(tape, ps, &params, xn, Some(&prev), Padding::Same)?;
            let lh = tape.sum(state.h);
            let lc = tape.sum(state.c);
            let total = tape.add(lh, lc)?;
            Ok(tape.scale(total, 1.0 / 64.0))
        },
        1e-4,
        TOL,
    )
}

fn check_bdclstm() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(17, "check.bdclstm");
    let mut ps = ParamSet::new();
    let fwd = ConvLstmParams::init(&mut ps, "fwd", 2, 2, 3, InitScheme::Uniform(0.5), &mut rng)?;
    let bwd = ConvLstmParams::init(&mut ps, "bwd", 2, 2, 3, InitScheme::Uniform(0.5), &mut rng)?;
    let slices: Vec<_> = (0..3)
        .map(|z| ps.register(&format!("slice{z}"), rand_tensor(&[2, 5, 5], &mut rng, 1.0)))
        .collect::<Result<_>>()?;
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let seq: Vec<NodeId> = slices.iter().map(|&s| tape.param(ps, s)).collect();
            let out = bdclstm_forward(tape, ps, &fwd, &bwd, &seq, Padding::Same)?;
            let mut total = tape.sum(out[0]);
            for &o in &out[1..] {
                let s = tape.sum(o);
                total = tape.add(total, s)?;
            }
            Ok(tape.scale(total, 1.0 / 300.0))
        },
        1e-4,
        TOL,
    )
}

fn check_deep_stack() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(18, "check.deep");
    let mut ps = ParamSet::new();
    let cfg = BdcLstmStackConfig::reduced();
    let params = BdcLstmStackParams::init(&mut ps, "deep", &cfg, InitScheme::Uniform(0.1), &mut rng)?;
    let slices: Vec<_> = (0..3)
        .map(|z| ps.register(&format!("slice{z}"), rand_tensor(&[8, 20, 20], &mut rng, 0.8)))
        .collect::<Result<_>>()?;
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let seq: Vec<NodeId> = slices.iter().map(|&s| tape.param(ps, s)).collect();
            // Dropout masks frozen by a fixed seed: every evaluation of the
            // checked function sees the same masks.
            let mut mask_rng = Rng::substream(777, "check.deep.dropout");
            let out = deep_forward(tape, ps, &cfg, &params, &seq, Some(&mut mask_rng))?;
            let mut total = tape.sum(out[0]);
            for &o in &out[1..] {
                let s = tape.sum(o);
                total = tape.add(total, s)?;
            }
            Ok(tape.scale(total, 1.0 / 216.0))
        },
        1e-4,
        TOL,
    )
}

fn check_kunet() -> Result<GradCheckReport> {
    let mut rng = Rng::substream(19, "check.kunet");
    let mut ps = ParamSet::new();
    let unet = UNetConfig {
        depth: 2,
        base_channels: 4,
        kernel: 3,
        padding: Padding::Same,
        out_channels: 8,
    };
    let cfg = KUNetConfig::uniform(2, unet);
    let params = KUNetParams::init(&mut ps, "kunet", &cfg, 1, &mut rng)?;
    // Shift all parameters (including the zero-initialized biases) so
    // pre-activations are not clustered at the rectifier kink.
    let ids: Vec<_> = ps.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in ps.value_mut(id).data_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
    }
    let x = ps.register("x", Tensor::from_fn(&[1, 16, 16], |_| rng.uniform(0.1, 0.9)))?;
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let xn = tape.param(ps, x);
            let out = kunet_forward(tape, ps, &params, xn)?;
            let act = tape.tanh(out);
            let total = tape.sum(act);
            Ok(tape.scale(total, 1.0 / 16384.0))
        },
        1e-5,
        TOL,
    )
}

/// Runs the whole gradient-integrity suite.
pub fn standard_gradcheck_suite() -> Result<Vec<SuiteEntry>> {
    Ok(vec![
        SuiteEntry {
            name: "conv2d",
            report: check_conv2d()?,
        },
        SuiteEntry {
            name: "max_pool2",
            report: check_max_pool2()?,
        },
        SuiteEntry {
            name: "deconv2",
            report: check_deconv2()?,
        },
        SuiteEntry {
            name: "softmax+weighted_cross_entropy",
            report: check_softmax_wce()?,
        },
        SuiteEntry {
            name: "lstm_step",
            report: check_lstm_step()?,
        },
        SuiteEntry {
            name: "clstm_step",
            report: check_clstm_step()?,
        },
        SuiteEntry {
            name: "bdclstm_forward",
            report: check_bdclstm()?,
        },
        SuiteEntry {
            name: "deep_bdclstm_reduced",
            report: check_deep_stack()?,
        },
        SuiteEntry {
            name: "kunet_depth2_k2",
            report: check_kunet()?,
        },
    ])
}

/// Formats one report line: `name  coords checked  max rel err  PASS/FAIL`.
pub fn format_entry(entry: &SuiteEntry) -> String {
    let r = &entry.report;
    format!(
        "{:32} {:>5}/{:<6} coords  max_rel_err {:>12.3e}  {}",
        entry.name,
        r.coords_checked,
        r.total_coords,
        r.max_rel_err,
        if r.passed() { "PASS" } else { "FAIL" }
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_check_passes() {
        let report = check_clstm_step().unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
