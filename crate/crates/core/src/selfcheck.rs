//! Built-in gradient and invariant checks, run by `headlab selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Real;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, PARAMS};
use crate::error::Result;
use crate::exec::{mix_seed, Exec};
use crate::model::{ForwardOptions, Gates, HeadGateVector, HeadId, ModelConfig, ModelState};
use crate::report::CheckResult;
use crate::tasks::{EncodedInput, Label, TaskKind};
use crate::train::{paired_bootstrap, sampling_probs, SamplingMode};

/// Finite-difference step for gate probes.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-7;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Two-layer, four-head, d=16 probe model with a three-class head.
pub fn probe_model<T: Real>(seed: u64) -> Result<ModelState<T>> {
    let mut cfg = ModelConfig::small(2, 4, 16, 24, 12);
    cfg.d_ff = 32;
    ModelState::new(cfg, &[("probe".to_string(), TaskKind::Classification { n_class: 3 })], seed)
}

pub fn random_input(rng: &mut impl Rng, vocab: usize, max_len: usize) -> EncodedInput {
    let len = rng.random_range(3..=max_len);
    let ids = (0..len).map(|_| rng.random_range(4..vocab as u32)).collect();
    EncodedInput { ids, segments: vec![0; len] }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub seed: u64,
    /// Max over heads of the relative error between the tape gradient and
    /// the central difference.
    pub fd: f64,
    /// Max over heads of the relative error between the tape gradient and
    /// `⟨∂L/∂(ξ·A_h), A_h⟩`.
    pub identity: f64,
    pub analytic: Vec<f64>,
}

/// Gate gradients of one random example, checked against central
/// differences at `ξ = 1 ± FD_STEP` and against the inner-product identity.
pub fn gate_gradient_check(seed: u64) -> Result<GradCheck> {
    let model = probe_model::<f64>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6C]));
    let input = random_input(&mut rng, model.config.vocab_size, model.config.max_seq_len);
    let label = Label::Class(rng.random_range(0..3));
    let nh = model.config.total_heads();

    let mut g = model.graph(0, &input, ForwardOptions { gates: Some(Gates::Leaves), ..Default::default() })?;
    let loss = g.loss(label)?;
    let a_vals: Vec<Vec<f64>> = g.head_outputs.iter().map(|&v| g.tape.value(v).data().to_vec()).collect();
    let gates = std::mem::take(&mut g.gates);
    let gated = std::mem::take(&mut g.gated_outputs);
    let grads = g.tape.backward(loss)?;
    let analytic: Vec<f64> = gates.iter().map(|&v| grads.get(v).map_or(0.0, |t| t.data()[0])).collect();

    let loss_at = |xi: &[f64]| -> Result<f64> {
        let mut g = model.graph(0, &input, ForwardOptions { gates: Some(Gates::Probe(xi)), ..Default::default() })?;
        let l = g.loss(label)?;
        Ok(g.tape.value(l).data()[0])
    };
    let mut fd = 0.0f64;
    let mut identity = 0.0f64;
    for h in 0..nh {
        let mut xi = vec![1.0; nh];
        xi[h] = 1.0 + FD_STEP;
        let up = loss_at(&xi)?;
        xi[h] = 1.0 - FD_STEP;
        let down = loss_at(&xi)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        fd = fd.max(rel_err(analytic[h], numeric));
        let dg = grads.get_or_zeros(gated[h]);
        let ip: f64 = dg.data().iter().zip(&a_vals[h]).map(|(a, b)| a * b).sum();
        identity = identity.max(rel_err(analytic[h], ip));
    }
    Ok(GradCheck { seed, fd, identity, analytic })
}

/// Largest elementwise difference between gating a head set off and zeroing
/// its output-projection rows, over `n_sets` random head sets.
pub fn gate_pruning_check(seed: u64, n_sets: usize) -> Result<f64> {
    let model = probe_model::<f32>(seed)?;
    let nh = model.config.total_heads();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9A]));
    let mut worst = 0.0f64;
    for _ in 0..n_sets {
        let members: Vec<HeadId> =
            (0..nh).filter(|_| rng.random_bool(0.4)).map(|i| HeadId::from_flat(i, model.config.n_heads)).collect();
        let gates = HeadGateVector::pruned(model.config.n_layers, model.config.n_heads, &members)?;
        let mut zeroed = model.clone();
        for &h in &members {
            zeroed.zero_output_rows(h);
        }
        let input = random_input(&mut rng, model.config.vocab_size, model.config.max_seq_len);
        let a = model.forward_gated(0, &input, &gates)?;
        let b = zeroed.forward(0, &input)?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Largest deviation of an attention row sum from 1.
pub fn attention_row_check(seed: u64) -> Result<f64> {
    let model = probe_model::<f64>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xA7]));
    let input = random_input(&mut rng, model.config.vocab_size, model.config.max_seq_len);
    let g = model.graph(0, &input, ForwardOptions::default())?;
    let mut worst = 0.0f64;
    for &a in &g.attention {
        let t = g.tape.value(a);
        let (r, _) = t.dims2().unwrap();
        for i in 0..r {
            worst = worst.max((t.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed, detail }
}

fn run_one(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((p, d)) => check(name, p, d),
        Err(e) => check(name, false, format!("error: {e}")),
    }
}

/// Runs every suite over `seeds` seeds.
pub fn run_selfcheck(seeds: u64, exec: Exec) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(run_one("gate-gradient-fd", || {
        let rs = (0..seeds).map(gate_gradient_check).collect::<Result<Vec<_>>>()?;
        let fd = rs.iter().map(|r| r.fd).fold(0.0, f64::max);
        let id = rs.iter().map(|r| r.identity).fold(0.0, f64::max);
        Ok((fd < 1e-3 && id < 1e-5, format!("{seeds} seeds: max FD rel err {fd:.2e}, max identity rel err {id:.2e}")))
    }));
    out.push(run_one("gate-pruning-equivalence", || {
        let w = (0..seeds).map(|s| gate_pruning_check(s, 10)).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
        Ok((w <= 1e-6, format!("max abs diff {w:.2e}")))
    }));
    out.push(run_one("attention-rows", || {
        let w = (0..seeds).map(attention_row_check).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
        Ok((w <= 1e-6, format!("max |row sum - 1| {w:.2e}")))
    }));
    out.push(run_one("parameter-count", || {
        let m = probe_model::<f32>(0)?;
        let n: usize = m.params().iter().map(|p| p.numel()).sum();
        let want = m.config.parameter_count(&[3]);
        Ok((n == want, format!("{n} tensor elements vs closed form {want}")))
    }));
    out.push(run_one("sampling-normalized", || {
        let mut worst = 0.0f64;
        for e in 1..=5 {
            for mode in [SamplingMode::Proportional, SamplingMode::Annealed] {
                let p = sampling_probs(&[100, 400, 7], e, 5, mode)?;
                worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok((worst < 1e-12, format!("max |sum - 1| {worst:.2e}")))
    }));
    out.push(run_one("bootstrap-enumeration", || {
        let r = paired_bootstrap(&[(1.0, 0.0), (1.0, 0.0), (-1.0, 0.0)], 10_000, 0, exec)?;
        Ok(((r.p_value - 7.0 / 27.0).abs() < 1e-12, format!("p = {:.6} (exact {})", r.p_value, r.exact)))
    }));
    out.push(run_one("checkpoint-round-trip", || {
        let dir = std::env::temp_dir().join(format!("headlab-selfcheck-{}", std::process::id()));
        let m = probe_model::<f32>(1)?;
        save_checkpoint(&dir, &m, None, &CheckpointMeta::default())?;
        let first = std::fs::read(dir.join(PARAMS)).map_err(|e| crate::Error::io(&dir, e))?;
        let back = load_checkpoint(&dir)?;
        save_checkpoint(&dir, &back.model, None, &CheckpointMeta::default())?;
        let second = std::fs::read(dir.join(PARAMS)).map_err(|e| crate::Error::io(&dir, e))?;
        let _ = std::fs::remove_dir_all(&dir);
        Ok((first == second && back.model == m, format!("{} bytes", first.len())))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for c in run_selfcheck(2, Exec::Sequential) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
