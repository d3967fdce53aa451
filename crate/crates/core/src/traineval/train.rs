use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::eval::SweepRow;
use super::optim::{Adam, AdamConfig};
use crate::augment::{sms_apply, Batch};
use crate::error::{Error, Result};
use crate::model::{teacher_forcing, Captioner, PAD};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-batch probability of re-pairing visual streams.
    pub shuffle_prob: f64,
    /// Seeds batch order and shuffling.
    pub seed: u64,
    /// Weight of the batch gate-variance penalty. Zero disables it.
    pub gate_variance_weight: f64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            shuffle_prob: 0.0,
            seed: 0,
            gate_variance_weight: 0.0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.shuffle_prob) {
            return Err(Error::Config(format!("shuffle_prob {} outside [0, 1]", self.shuffle_prob)));
        }
        if !(self.gate_variance_weight >= 0.0 && self.gate_variance_weight.is_finite()) {
            return Err(Error::Config("gate_variance_weight must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Mean gate on pairs left matched; absent without gated fusion.
    pub gate_matched: Option<f64>,
    /// Mean gate on re-paired samples; absent when none were re-paired.
    pub gate_mismatched: Option<f64>,
    pub mismatched: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Filled in by a later [`super::mismatch_sweep`], if any.
    pub sweep: Vec<SweepRow>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, skipping [`PAD`] targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut t = Tape::inference();
    let l = t.constant(logits.clone());
    let out = t.cross_entropy(l, targets, Some(PAD))?;
    Ok(t.value(out).item())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Trains in place. Each batch is shuffled with probability
/// `cfg.shuffle_prob` before encoding, and its mean loss drives one
/// optimizer step.
pub fn train(model: &mut Captioner, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer, model.params())?;
    let shapes: Vec<Vec<usize>> = model.params().shapes().iter().map(|s| s.to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut sample_loss = vec![0.0; data.len()];
        let (mut matched, mut mismatched) = (Vec::new(), Vec::new());

        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::new(
                idx.iter().map(|&i| data[i].audio.clone()).collect(),
                idx.iter().map(|&i| data[i].visual.clone()).collect(),
                idx.iter().map(|&i| data[i].caption.clone()).collect(),
            )?;
            let batch = sms_apply(&batch, cfg.shuffle_prob, &mut rng)?;

            let mut t = Tape::new();
            let vars = model.params().bind(&mut t);
            let mut losses = Vec::with_capacity(batch.len());
            let mut gates = Vec::with_capacity(batch.len());
            for i in 0..batch.len() {
                let (input, target) = teacher_forcing(&batch.captions[i]);
                let out = model.record(&mut t, &vars, &batch.audio[i], Some(&batch.visual[i]), &input)?;
                losses.push(t.cross_entropy(out.logits, &target, Some(PAD))?);
                if let Some(f) = out.fusion {
                    let g = t.value(f.gate).item();
                    if batch.mismatch_flags[i] {
                        mismatched.push(g);
                    } else {
                        matched.push(g);
                    }
                    gates.push(f.gate);
                }
            }
            for (&i, &l) in idx.iter().zip(&losses) {
                sample_loss[i] = t.value(l).item();
            }
            let stacked = t.concat_rows(&losses)?;
            let mut loss = t.mean_all(stacked);
            if cfg.gate_variance_weight > 0.0 && gates.len() > 1 {
                let g = t.concat_rows(&gates)?;
                let g_mean = t.mean_all(g);
                let sq = t.mul(g, g)?;
                let sq_mean = t.mean_all(sq);
                let mean_sq = t.mul(g_mean, g_mean)?;
                let var = t.sub(sq_mean, mean_sq)?;
                let penalty = t.scale(var, cfg.gate_variance_weight);
                loss = t.add(loss, penalty)?;
            }
            let value = t.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss: value });
            }
            let grads = t.backward_scalar(loss)?.param_grads(&shape_refs);
            opt.step(model.params_mut(), &grads);
        }
        report.epochs.push(EpochStats {
            epoch,
            loss: sample_loss.iter().sum::<f64>() / data.len() as f64,
            gate_matched: mean(&matched),
            gate_mismatched: mean(&mismatched),
            mismatched: mismatched.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionMode, ModelConfig};
    use crate::traineval::data::{generate_synthetic, SyntheticTaskSpec};

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        for v in [2, 5, 11, 50] {
            let logits = Tensor::zeros(&[3, v]);
            let l = cross_entropy(&logits, &[1, 0, v - 1]).unwrap();
            // PAD targets are skipped, the other two average ln V
            assert!((l - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturates_with_large_margin() {
        let mut logits = Tensor::zeros(&[2, 6]);
        logits.data_mut()[3] = 100.0;
        logits.data_mut()[6 + 5] = 100.0;
        assert!(cross_entropy(&logits, &[3, 5]).unwrap() < 1e-10);
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let logits =
            Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.0], vec![1.5, 0.2, -0.7, 0.9], vec![-0.4, 0.8, 0.1, -2.2]])
                .unwrap();
        let targets = [2, 3, 1];
        let mut total = 0.0;
        for (r, &tg) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[tg].exp() / z).ln();
        }
        let want = total / 3.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_targets() {
        assert!(matches!(cross_entropy(&Tensor::zeros(&[1, 4]), &[4]), Err(Error::InvalidInput(_))));
    }

    fn tiny_setup(n: usize) -> (Captioner, Vec<Sample>) {
        let spec = SyntheticTaskSpec { n_train: n, n_val: 1, n_test: 1, ..SyntheticTaskSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        let cfg = spec.fit_config(&ModelConfig { d_model: 8, n_dec_layers: 1, seed: 3, ..ModelConfig::default() });
        (Captioner::new(cfg).unwrap(), data.train)
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (mut m, data) = tiny_setup(20);
        let before = m.params().clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            optimizer: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let r = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(m.params(), &before);
        assert!(r.losses().windows(2).all(|w| w[0] == w[1]), "{:?}", r.losses());
    }

    #[test]
    fn no_shuffle_means_no_mismatched_statistic() {
        let (mut m, data) = tiny_setup(16);
        let r = train(&mut m, &data, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
        for e in &r.epochs {
            assert_eq!(e.mismatched, 0);
            assert_eq!(e.gate_mismatched, None);
            let g = e.gate_matched.unwrap();
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn full_shuffle_records_mismatched_gates() {
        let (mut m, data) = tiny_setup(16);
        let r = train(&mut m, &data, &TrainConfig { epochs: 1, shuffle_prob: 1.0, ..TrainConfig::default() }).unwrap();
        assert!(r.epochs[0].mismatched > 0);
        assert!(r.epochs[0].gate_mismatched.is_some());
    }

    #[test]
    fn audio_only_reports_no_gates() {
        let (m, data) = tiny_setup(8);
        let mut m = m.with_mode(FusionMode::AudioOnly);
        let r = train(&mut m, &data, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
        assert_eq!(r.epochs[0].gate_matched, None);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut m, data) = tiny_setup(8);
        m.params_mut().get_mut(0).data_mut()[0] = f64::NAN;
        let err = train(&mut m, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, batch: 0, .. }), "{err}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let run = |w: f64| {
            let (mut m, data) = tiny_setup(24);
            let cfg = TrainConfig {
                epochs: 4,
                shuffle_prob: 0.5,
                gate_variance_weight: w,
                optimizer: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
                ..TrainConfig::default()
            };
            let r = train(&mut m, &data, &cfg).unwrap();
            (r, m.params().checksum())
        };
        let (a, ca) = run(0.0);
        let (b, cb) = run(0.0);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(a.epochs[3].loss < a.epochs[0].loss);
        let (_, cr) = run(1.0);
        assert_ne!(ca, cr);
    }

    #[test]
    fn bad_config_is_rejected() {
        let (mut m, data) = tiny_setup(4);
        assert!(train(&mut m, &data, &TrainConfig { batch_size: 0, ..TrainConfig::default() }).is_err());
        assert!(train(&mut m, &data, &TrainConfig { shuffle_prob: 2.0, ..TrainConfig::default() }).is_err());
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
    }
}
