//! Entropy-aware gated cross-attention.
//!
//! Audio frames query visual tokens:
//!
//! ```text
//! P = softmax((A W_q)(V W_k)ᵀ / √d)        attention, T_a × T_v
//! F = P (V W_v)                             attended visual features
//! E = mean_i(−Σ_j P_ij ln P_ij) / ln T_v    normalized entropy in [0, 1]
//! g = σ(w_g E + b_g)                        scalar gate
//! out = (1 − g) A + g F
//! ```
//!
//! Diffuse attention (high `E`) signals that no visual token answers the
//! audio query well, and a learned negative `w_g` turns that into a small
//! gate. The same math runs on plain tensors ([`fuse`]) and on a [`Tape`]
//! ([`fuse_on_tape`]) for training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{sigmoid, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Row sums of an attention matrix must be within this of 1.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Entropies this close to 0 or 1 are reported as exactly 0 or 1.
pub const SNAP_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_g: f64,
    pub b_g: f64,
}

impl FusionParams {
    /// Random projections (std `1/√d`) and a neutral gate, `w_g = b_g = 0`.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        FusionParams {
            w_q: Tensor::randn(&[d, d], std, rng),
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
            w_g: 0.0,
            b_g: 0.0,
        }
    }

    pub fn identity(d: usize) -> Self {
        FusionParams {
            w_q: Tensor::identity(d),
            w_k: Tensor::identity(d),
            w_v: Tensor::identity(d),
            w_g: 0.0,
            b_g: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn with_gate(mut self, w_g: f64, b_g: f64) -> Self {
        self.w_g = w_g;
        self.b_g = b_g;
        self
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape() != [d, d] {
                return Err(Error::shape("fusion params", format!("{name} is {:?}, expected [{d}, {d}]", w.shape())));
            }
            if !w.is_finite() {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
        }
        if !self.w_g.is_finite() || !self.b_g.is_finite() {
            return Err(Error::invalid("gate parameters must be finite"));
        }
        Ok(())
    }
}

/// Everything one fusion pass computes for a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    /// `(1 − g)·A + g·F`, shaped like the audio input.
    pub fused: Tensor,
    /// Row-stochastic attention of audio frames over visual tokens (the
    /// head average when more than one head is used).
    pub attention: Tensor,
    /// Attended visual features `F`.
    pub attended: Tensor,
    pub entropy: f64,
    pub gate: f64,
}

fn check_inputs(audio: &Tensor, visual: &Tensor, d: usize) -> Result<()> {
    if audio.shape().len() != 2 || visual.shape().len() != 2 {
        return Err(Error::shape("cross_attend", "audio and visual must be matrices"));
    }
    if audio.cols() != d || visual.cols() != d {
        return Err(Error::shape(
            "cross_attend",
            format!("audio {:?}, visual {:?}, projections {d}x{d}", audio.shape(), visual.shape()),
        ));
    }
    Ok(())
}

/// Single-head scaled dot-product attention with audio queries and visual
/// keys/values. Returns `(features, attention)`.
pub fn cross_attend(audio: &Tensor, visual: &Tensor, params: &FusionParams) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    check_inputs(audio, visual, params.dim())?;
    let q = audio.matmul(&params.w_q)?;
    let k = visual.matmul(&params.w_k)?;
    let v = visual.matmul(&params.w_v)?;
    let scores = q.matmul_t(&k)?.scale(1.0 / (params.dim() as f64).sqrt());
    let attention = scores.softmax_rows()?;
    let features = attention.matmul(&v)?;
    Ok((features, attention))
}

/// Normalized entropy without validation. One column means a single key,
/// which is maximally concentrated, so the result is 0.
pub(crate) fn entropy_of_rows(p: &Tensor) -> f64 {
    let (m, n) = (p.rows(), p.cols());
    if n < 2 {
        return 0.0;
    }
    let total: f64 =
        p.data().chunks(n).map(|row| -row.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()).sum();
    let e = total / (m as f64 * (n as f64).ln());
    // Uniform and one-hot rows land within rounding of the bounds.
    if e < SNAP_TOL {
        0.0
    } else if e > 1.0 - SNAP_TOL {
        1.0
    } else {
        e
    }
}

/// Mean per-row Shannon entropy divided by `ln T_v`, clamped to `[0, 1]`
/// (values within [`SNAP_TOL`] of a bound snap to it).
/// Zero probabilities contribute nothing. Rejects matrices whose rows are
/// not probability distributions.
pub fn attention_entropy(attention: &Tensor) -> Result<f64> {
    if attention.shape().len() != 2 {
        return Err(Error::shape("attention_entropy", "expected a matrix"));
    }
    for r in 0..attention.rows() {
        let row = attention.row(r);
        if row.iter().any(|&q| q < 0.0 || !q.is_finite()) {
            return Err(Error::invalid(format!("attention row {r} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!("attention row {r} sums to {s}")));
        }
    }
    Ok(entropy_of_rows(attention))
}

/// `σ(w_g · entropy + b_g)`.
pub fn gate_value(entropy: f64, params: &FusionParams) -> f64 {
    sigmoid(params.w_g * entropy + params.b_g)
}

/// Blend of audio and attended features: `(1 − g)·audio + g·attended`.
pub fn blend(audio: &Tensor, attended: &Tensor, gate: f64) -> Result<Tensor> {
    audio.zip_map(attended, "blend", |a, f| (1.0 - gate) * a + gate * f)
}

/// Full fusion pass on plain tensors.
pub fn fuse(audio: &Tensor, visual: &Tensor, params: &FusionParams) -> Result<FusionOutput> {
    let (attended, attention) = cross_attend(audio, visual, params)?;
    let entropy = attention_entropy(&attention)?;
    let gate = gate_value(entropy, params);
    let fused = blend(audio, &attended, gate)?;
    Ok(FusionOutput { fused, attention, attended, entropy, gate })
}

/// Fusion parameters bound to a tape. `w_g` and `b_g` are `[1×1]` nodes.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_g: Var,
    pub b_g: Var,
}

impl FusionVars {
    pub fn bind(tape: &mut Tape, params: &FusionParams) -> Self {
        FusionVars {
            w_q: tape.var(params.w_q.clone()),
            w_k: tape.var(params.w_k.clone()),
            w_v: tape.var(params.w_v.clone()),
            w_g: tape.var(Tensor::scalar(params.w_g)),
            b_g: tape.var(Tensor::scalar(params.b_g)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionOptions {
    /// Attention heads; the projection width must divide evenly.
    pub heads: usize,
    /// Treat the entropy as a constant, so no gradient reaches the
    /// attention through the gate.
    pub detach_entropy: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions { heads: 1, detach_entropy: false }
    }
}

/// Tape nodes produced by [`fuse_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct FusionNodes {
    pub fused: Var,
    pub attention: Var,
    pub attended: Var,
    pub entropy: Var,
    pub gate: Var,
}

/// Records a fusion pass. With several heads, each head attends in its own
/// column slice, entropies are averaged over heads, and the reported
/// attention is the head mean.
pub fn fuse_on_tape(
    tape: &mut Tape,
    audio: Var,
    visual: Var,
    p: &FusionVars,
    opts: FusionOptions,
) -> Result<FusionNodes> {
    let d = tape.value(p.w_q).rows();
    check_inputs(tape.value(audio), tape.value(visual), d)?;
    let h = opts.heads.max(1);
    if !d.is_multiple_of(h) {
        return Err(Error::shape("fuse", format!("width {d} not divisible by {h} heads")));
    }
    let hd = d / h;
    let q = tape.matmul(audio, p.w_q)?;
    let k = tape.matmul(visual, p.w_k)?;
    let v = tape.matmul(visual, p.w_v)?;
    let mut outs = Vec::with_capacity(h);
    let mut atts = Vec::with_capacity(h);
    let mut ents = Vec::with_capacity(h);
    for head in 0..h {
        let (qh, kh, vh) = if h == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, head * hd, hd)?, tape.slice_cols(k, head * hd, hd)?, tape.slice_cols(v, head * hd, hd)?)
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let att = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(att, vh)?);
        ents.push(tape.entropy(att, opts.detach_entropy));
        atts.push(att);
    }
    let (attended, attention, entropy) = if h == 1 {
        (outs[0], atts[0], ents[0])
    } else {
        let f = tape.concat_cols(&outs)?;
        let stacked = tape.concat_rows(&ents)?;
        let e = tape.mean_all(stacked);
        let mut acc = atts[0];
        for &a in &atts[1..] {
            acc = tape.add(acc, a)?;
        }
        (f, tape.scale(acc, 1.0 / h as f64), e)
    };
    let we = tape.mul(p.w_g, entropy)?;
    let logit = tape.add(we, p.b_g)?;
    let gate = tape.sigmoid(logit);
    // (1 − g)·A + g·F = A + g·(F − A)
    let delta = tape.sub(attended, audio)?;
    let gated = tape.scale_by(delta, gate)?;
    let fused = tape.add(audio, gated)?;
    Ok(FusionNodes { fused, attention, attended, entropy, gate })
}

/// Gradients of a scalar loss with respect to the fusion parameters and
/// both inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGradients {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_g: f64,
    pub b_g: f64,
    pub audio: Tensor,
    pub visual: Tensor,
}

struct Trace {
    tape: Tape,
    audio: Var,
    visual: Var,
    vars: FusionVars,
    fused: Var,
}

/// Stateful fusion block: `forward` records a trace, `backward` consumes it.
pub struct GatedFusion {
    pub params: FusionParams,
    pub options: FusionOptions,
    trace: Option<Trace>,
}

impl GatedFusion {
    pub fn new(params: FusionParams) -> Self {
        GatedFusion { params, options: FusionOptions::default(), trace: None }
    }

    pub fn with_options(mut self, options: FusionOptions) -> Self {
        self.options = options;
        self
    }

    pub fn forward(&mut self, audio: &Tensor, visual: &Tensor) -> Result<FusionOutput> {
        self.params.validate()?;
        let mut tape = Tape::new();
        let a = tape.var(audio.clone());
        let v = tape.var(visual.clone());
        let vars = FusionVars::bind(&mut tape, &self.params);
        let nodes = fuse_on_tape(&mut tape, a, v, &vars, self.options)?;
        let out = FusionOutput {
            fused: tape.value(nodes.fused).clone(),
            attention: tape.value(nodes.attention).clone(),
            attended: tape.value(nodes.attended).clone(),
            entropy: tape.value(nodes.entropy).item(),
            gate: tape.value(nodes.gate).item(),
        };
        self.trace = Some(Trace { tape, audio: a, visual: v, vars, fused: nodes.fused });
        Ok(out)
    }

    /// Backpropagates `upstream = ∂loss/∂fused` through the last forward
    /// pass: the blend, the gate, the entropy and the attention itself.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<FusionGradients> {
        let trace =
            self.trace.take().ok_or_else(|| Error::State("fuse backward without a recorded forward pass".into()))?;
        let g: Gradients = trace.tape.backward(trace.fused, upstream)?;
        let t = &trace.tape;
        let scalar = |v: Var| g.wrt(v).map(|x| x.item()).unwrap_or(0.0);
        Ok(FusionGradients {
            w_q: g.wrt_or_zeros(trace.vars.w_q, t.value(trace.vars.w_q)),
            w_k: g.wrt_or_zeros(trace.vars.w_k, t.value(trace.vars.w_k)),
            w_v: g.wrt_or_zeros(trace.vars.w_v, t.value(trace.vars.w_v)),
            w_g: scalar(trace.vars.w_g),
            b_g: scalar(trace.vars.b_g),
            audio: g.wrt_or_zeros(trace.audio, t.value(trace.audio)),
            visual: g.wrt_or_zeros(trace.visual, t.value(trace.visual)),
        })
    }
}
