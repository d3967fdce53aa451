//! Central finite-difference checks against tape gradients.
//!
//! The finite-difference side only ever evaluates forward passes on
//! inference tapes, so it shares no code with any backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{fuse_on_tape, FusionOptions, FusionParams, FusionVars};
use crate::model::{teacher_forcing, Captioner, ModelConfig, EOS, PAD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-6;

/// Denominator floor for [`relative_error`]. Below this magnitude both
/// gradients are treated as "zero-ish" and compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(REL_FLOOR);
    (a - b).abs() / denom
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numerical_grad(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(g)
}

/// Largest relative error over all entries of two same-shaped tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic.data().iter().zip(numeric.data()).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// Compares reverse-mode gradients of a scalar-valued tape function with
/// central differences for every entry of every input. Returns the maximum
/// relative error.
pub fn check_tape_fn<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("check_tape_fn", "function must return a single value"));
    }
    let grads = tape.backward_scalar(out)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.var(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(vars[k], x);
        let numeric = numerical_grad(x, FD_EPS, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            eval(&xs)
        })?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Weighted sum with fixed random weights, so every output entry
/// contributes a distinct coefficient.
fn project(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(Tensor::randn(t.value(v).shape(), 1.0, &mut rng));
    let p = t.mul(v, w)?;
    Ok(t.sum_all(p))
}

fn every_op_inputs<R: Rng>(rng: &mut R) -> Vec<Tensor> {
    [&[3, 4][..], &[4, 2], &[3, 4], &[1, 4], &[1, 1]].iter().map(|s| Tensor::randn(s, 1.0, rng)).collect()
}

/// A scalar function touching every differentiable tape operation.
fn every_op(t: &mut Tape, v: &[Var], salt: u64) -> Result<Var> {
    let mm = t.matmul(v[0], v[1])?;
    let mt = t.matmul_t(v[0], v[2])?;
    let tr = t.transpose(v[2])?;
    let tr = t.transpose(tr)?;
    let sum = t.add(v[0], v[2])?;
    let diff = t.sub(sum, v[2])?;
    let prod = t.mul(diff, v[2])?;
    let biased = t.add_row(prod, v[3])?;
    let scaled = t.scale_by(biased, v[4])?;
    let g = t.gelu(scaled);
    let sg = t.sigmoid(g);
    let sm = t.softmax_rows(sg)?;
    let cm = t.softmax_rows_masked(mt, true)?;
    let ln = t.layer_norm(v[0], v[3], v[3], 1e-5)?;
    let cc = t.concat_cols(&[mm, ln])?;
    let sl = t.slice_cols(cc, 1, 4)?;
    let cr = t.concat_rows(&[sl, sm, tr])?;
    let pooled = t.pool_rows(cr, 3)?;
    let e = t.entropy(cm, false);
    let e2 = t.entropy(sm, false);
    let table = t.matmul_t(v[2], v[0])?;
    let emb = t.embedding(table, &[2, 0, 2])?;
    let ce = t.cross_entropy(emb, &[1, 0, 2], Some(0))?;
    let parts = [project(t, pooled, salt)?, project(t, e, salt + 1)?, project(t, e2, salt + 2)?, ce];
    let all = t.concat_rows(&parts)?;
    let all = t.affine(all, 0.5, 1.0);
    Ok(t.mean_all(all))
}

/// Fused output of one random fusion configuration, dotted with a fixed
/// random upstream. Inputs: audio, visual, `W_q`, `W_k`, `W_v`, `w_g`,
/// `b_g`.
fn fusion_case<R: Rng>(rng: &mut R) -> (Vec<Tensor>, FusionOptions, Tensor) {
    let ta = rng.gen_range(1..=9);
    let tv = rng.gen_range(1..=9);
    let d = if rng.gen_bool(0.5) { 4 } else { 8 };
    let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
    let p = FusionParams::init(d, rng).with_gate(rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0));
    let inputs = vec![
        Tensor::randn(&[ta, d], 1.0, rng),
        Tensor::randn(&[tv, d], 1.0, rng),
        p.w_q,
        p.w_k,
        p.w_v,
        Tensor::scalar(p.w_g),
        Tensor::scalar(p.b_g),
    ];
    let up = Tensor::randn(&[ta, d], 1.0, rng);
    (inputs, FusionOptions { heads, detach_entropy: false }, up)
}

fn fusion_loss(t: &mut Tape, v: &[Var], opts: FusionOptions, up: &Tensor) -> Result<Var> {
    let vars = FusionVars { w_q: v[2], w_k: v[3], w_v: v[4], w_g: v[5], b_g: v[6] };
    let out = fuse_on_tape(t, v[0], v[1], &vars, opts)?;
    let u = t.constant(up.clone());
    let p = t.mul(out.fused, u)?;
    Ok(t.sum_all(p))
}

/// Largest relative error over every parameter of a small captioner
/// trained on one caption.
pub fn model_max_error(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        t_a: 4,
        t_v: 3,
        d_in_a: 5,
        d_in_v: 6,
        vocab_size: 11,
        seed,
        ..ModelConfig::default()
    };
    let mut m = Captioner::new(cfg)?;
    m.set_gate(-1.5, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let visual = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let (input, target) = teacher_forcing(&[4, 7, 3, EOS]);
    let loss = |m: &Captioner, t: &mut Tape| -> Result<Var> {
        let vars = m.params().bind(t);
        let out = m.record(t, &vars, &audio, Some(&visual), &input)?;
        t.cross_entropy(out.logits, &target, Some(PAD))
    };
    let mut t = Tape::new();
    let l = loss(&m, &mut t)?;
    let grads = t.backward_scalar(l)?.param_grads(&m.params().shapes());
    let mut worst = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for id in 0..m.params().len() {
        let base = m.params().get(id).clone();
        let numeric = numerical_grad(&base, FD_EPS, |probe| {
            *m.params_mut().get_mut(id) = probe.clone();
            let mut t = Tape::inference();
            let l = loss(&m, &mut t)?;
            Ok(t.value(l).item())
        })?;
        *m.params_mut().get_mut(id) = base;
        worst = worst.max(max_relative_error(&grads[id], &numeric));
    }
    Ok(worst)
}

/// Tolerance for single operations and the fusion path.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the full captioner.
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub configurations: usize,
    pub ops_max: f64,
    pub fusion_max: f64,
    pub model_max: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops_max < OP_TOL && self.fusion_max < OP_TOL && self.model_max < MODEL_TOL
    }
}

/// Runs `configurations` random checks of the operation composite and of
/// the fusion path, then the captioner check.
pub fn run_suite(seed: u64, configurations: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ops_max, mut fusion_max) = (0.0f64, 0.0f64);
    for k in 0..configurations as u64 {
        let inputs = every_op_inputs(&mut rng);
        ops_max = ops_max.max(check_tape_fn(&inputs, |t, v| every_op(t, v, seed ^ k))?);
        let (inputs, opts, up) = fusion_case(&mut rng);
        fusion_max = fusion_max.max(check_tape_fn(&inputs, |t, v| fusion_loss(t, v, opts, &up))?);
    }
    let model_max = model_max_error(seed)?;
    Ok(SuiteReport { configurations, ops_max, fusion_max, model_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100u64 {
            let err = check_tape_fn(&every_op_inputs(&mut rng), |t, v| every_op(t, v, trial)).unwrap();
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn embedding_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let table = rand(&[6, 5], &mut rng);
            let w = rand(&[5, 7], &mut rng);
            let err = check_tape_fn(&[table, w], |t, v| {
                let e = t.embedding(v[0], &[1, 4, 4, 0])?;
                let logits = t.matmul(e, v[1])?;
                t.cross_entropy(logits, &[3, 0, 6, 2], Some(0))
            })
            .unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn suite_passes() {
        let r = run_suite(3, 10).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn numerical_grad_of_square() {
        let g = numerical_grad(&Tensor::scalar(3.0), FD_EPS, |x| Ok(x.item() * x.item())).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }
}
