use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::metrics::{words, Scores};
use crate::augment::{sms_apply, Batch};
use crate::error::{Error, Result};
use crate::model::Captioner;

/// Seed for test-time shuffling, shared by every model so sweep rows line
/// up.
pub const EVAL_SEED: u64 = 0x5EED_7E57;

/// Batch size used when re-pairing test clips.
pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateSplit {
    pub matched: Option<f64>,
    pub mismatched: Option<f64>,
    pub n_matched: usize,
    pub n_mismatched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: Scores,
    pub gates: GateSplit,
    pub hypotheses: Vec<Vec<usize>>,
}

/// Greedy-decodes every clip after test-time shuffling with `p_mix`, and
/// scores the words against each clip's own caption.
pub fn evaluate(model: &Captioner, samples: &[Sample], p_mix: f64, seed: u64) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = model.config().max_caption_len;
    let mut hyps = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    let (mut gm, mut gx) = (Vec::new(), Vec::new());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::new(
            chunk.iter().map(|s| s.audio.clone()).collect(),
            chunk.iter().map(|s| s.visual.clone()).collect(),
            chunk.iter().map(|s| s.caption.clone()).collect(),
        )?;
        let batch = sms_apply(&batch, p_mix, &mut rng)?;
        for i in 0..batch.len() {
            let (tokens, gate) = model.decode_with_gate(&batch.audio[i], Some(&batch.visual[i]), max_len)?;
            if let Some(g) = gate {
                if batch.mismatch_flags[i] {
                    gx.push(g);
                } else {
                    gm.push(g);
                }
            }
            hyps.push(words(&tokens));
            refs.push(words(&batch.captions[i]));
        }
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(Evaluation {
        scores: Scores::compute(&hyps, &refs),
        gates: GateSplit { matched: mean(&gm), mismatched: mean(&gx), n_matched: gm.len(), n_mismatched: gx.len() },
        hypotheses: hyps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub probability: f64,
    pub scores: Scores,
    /// `scores / scores at probability 0`, per metric; absent where the
    /// baseline is zero.
    pub retention: [Option<f64>; 6],
    pub gates: GateSplit,
}

/// One machine-readable line of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub probability: f64,
    pub metric: String,
    pub value: f64,
    pub retention: Option<f64>,
}

/// Evaluates at each probability with the same shuffling seed. The
/// baseline for retention is always a fresh evaluation at probability 0.
pub fn mismatch_sweep(
    model: &Captioner,
    samples: &[Sample],
    probabilities: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if probabilities.is_empty() {
        return Err(Error::invalid("empty probability grid"));
    }
    let base = evaluate(model, samples, 0.0, seed)?.scores.values();
    probabilities
        .iter()
        .map(|&p| {
            let e = evaluate(model, samples, p, seed)?;
            let v = e.scores.values();
            let retention = std::array::from_fn(|k| (base[k] != 0.0).then(|| v[k] / base[k]));
            Ok(SweepRow { probability: p, scores: e.scores, retention, gates: e.gates })
        })
        .collect()
}

pub fn metric_rows(model: &str, sweep: &[SweepRow]) -> Vec<MetricRow> {
    sweep
        .iter()
        .flat_map(|row| {
            Scores::NAMES.iter().zip(row.scores.values()).zip(row.retention).map(move |((name, value), retention)| {
                MetricRow {
                    model: model.to_string(),
                    probability: row.probability,
                    metric: name.to_string(),
                    value,
                    retention,
                }
            })
        })
        .collect()
}

/// Human-readable sweep table.
pub fn format_sweep(model: &str, sweep: &[SweepRow]) -> String {
    let mut s = format!("{model}\n{:>8}", "shuffle");
    for n in Scores::NAMES {
        s.push_str(&format!(" {n:>14}"));
    }
    s.push('\n');
    for row in sweep {
        s.push_str(&format!("{:>7.1}%", row.probability * 100.0));
        for (v, r) in row.scores.values().iter().zip(row.retention) {
            match r {
                Some(r) => s.push_str(&format!(" {v:>6.4} ({:>5.1}%)", r * 100.0)),
                None => s.push_str(&format!(" {v:>6.4} (  n/a)")),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::traineval::data::{generate_synthetic, SyntheticTaskSpec};

    fn setup() -> (Captioner, Vec<Sample>) {
        let spec = SyntheticTaskSpec { n_train: 1, n_val: 1, n_test: 20, ..SyntheticTaskSpec::default() };
        let d = generate_synthetic(&spec).unwrap();
        let cfg = spec.fit_config(&ModelConfig { d_model: 8, n_dec_layers: 1, seed: 1, ..ModelConfig::default() });
        (Captioner::new(cfg).unwrap(), d.test)
    }

    #[test]
    fn zero_probability_matches_plain_evaluation() {
        let (m, test) = setup();
        let plain = evaluate(&m, &test, 0.0, 1).unwrap();
        let other_seed = evaluate(&m, &test, 0.0, 99).unwrap();
        assert_eq!(plain, other_seed);
        assert_eq!(plain.gates.n_mismatched, 0);
        let sweep = mismatch_sweep(&m, &test, &[0.0, 0.05, 0.5, 1.0], EVAL_SEED).unwrap();
        assert_eq!(sweep.len(), 4);
        assert_eq!(sweep[0].scores, plain.scores);
        for (k, r) in sweep[0].retention.iter().enumerate() {
            assert!(r.is_none() || r == &Some(1.0), "metric {k}: {r:?}");
        }
    }

    #[test]
    fn retention_is_the_ratio_to_the_unshuffled_row() {
        let (m, test) = setup();
        let sweep = mismatch_sweep(&m, &test, &[1.0, 0.0], EVAL_SEED).unwrap();
        let base = sweep[1].scores.values();
        for (k, v) in sweep[0].scores.values().iter().enumerate() {
            match sweep[0].retention[k] {
                Some(r) => assert_eq!(r, v / base[k]),
                None => assert_eq!(base[k], 0.0),
            }
        }
        assert!(sweep[0].gates.n_mismatched > 0);
        let rows = metric_rows("gated", &sweep);
        assert_eq!(rows.len(), 12);
        assert!(format_sweep("gated", &sweep).lines().count() == 4);
    }
}
