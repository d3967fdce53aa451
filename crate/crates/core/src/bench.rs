//! Inference latency benchmark.
//!
//! For each frame count and fusion mode, a model is built and inputs are
//! drawn before any clock starts. Every cell gets its warm-up runs first,
//! then timed runs go round-robin across cells. Each run is one full
//! encode, fuse and fixed-length decode pass timed with [`Instant`]. Frame
//! count 0 feeds no visual input, so both modes take the audio-only path.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Captioner, FusionMode, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub frame_counts: Vec<usize>,
    /// Raw audio rows per clip, before pooling into audio tokens.
    pub audio_frames: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub modes: Vec<FusionMode>,
    /// Forced decode length, identical across modes.
    pub decode_steps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            frame_counts: vec![0, 1, 4, 8, 18],
            audio_frames: 1024,
            warmup_runs: 5,
            timed_runs: 10,
            modes: vec![FusionMode::Gated, FusionMode::Concat],
            decode_steps: 16,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_counts.is_empty() {
            return Err(Error::Config("frame_counts must not be empty".into()));
        }
        if self.timed_runs == 0 {
            return Err(Error::Config("timed_runs must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no fusion modes to compare".into()));
        }
        if self.audio_frames == 0 || self.decode_steps == 0 {
            return Err(Error::Config("audio_frames and decode_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Model dimensions used for timing: 16 raw audio frames per audio token
/// and 16 patches per video frame.
pub fn bench_model_config(spec: &BenchSpec) -> ModelConfig {
    let audio_pool = 16;
    ModelConfig {
        d_model: 32,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_heads: 2,
        t_a: spec.audio_frames.div_ceil(audio_pool),
        t_v: spec.frame_counts.iter().copied().max().unwrap_or(1).max(1),
        d_in_a: 16,
        d_in_v: 16,
        audio_pool,
        patches_per_frame: 16,
        vocab_size: 32,
        max_caption_len: spec.decode_steps,
        seed: spec.seed,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub mode: FusionMode,
    pub frames: usize,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl BenchCell {
    fn from_samples(mode: FusionMode, frames: usize, samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() < 2 {
            0.0
        } else {
            (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        BenchCell { mode, frames, samples, mean: mean.clamp(min, max), std, min, max }
    }
}

/// One machine-readable timing row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: FusionMode,
    pub frames: usize,
    pub run_index: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub model: ModelConfig,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, mode: FusionMode, frames: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.mode == mode && c.frames == frames)
    }

    pub fn means(&self, mode: FusionMode) -> Vec<(usize, f64)> {
        self.spec.frame_counts.iter().filter_map(|&f| self.cell(mode, f).map(|c| (f, c.mean))).collect()
    }

    /// `mean_concat / mean_gated` per frame count.
    pub fn ratios(&self) -> Vec<(usize, f64)> {
        self.spec
            .frame_counts
            .iter()
            .filter_map(|&f| {
                let c = self.cell(FusionMode::Concat, f)?;
                let g = self.cell(FusionMode::Gated, f)?;
                Some((f, c.mean / g.mean))
            })
            .collect()
    }

    /// `(max − min) / min` of a mode's means over frame counts of at
    /// least one.
    pub fn spread(&self, mode: FusionMode) -> Option<f64> {
        let m: Vec<f64> = self.means(mode).into_iter().filter(|&(f, _)| f >= 1).map(|(_, m)| m).collect();
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (!m.is_empty()).then(|| (hi - lo) / lo)
    }

    pub fn strictly_increasing(&self, mode: FusionMode) -> bool {
        let mut m = self.means(mode);
        m.sort_by_key(|&(f, _)| f);
        m.windows(2).all(|w| w[1].1 > w[0].1)
    }

    pub fn rows(&self) -> Vec<BenchRow> {
        self.cells
            .iter()
            .flat_map(|c| {
                c.samples.iter().enumerate().map(|(i, &s)| BenchRow {
                    mode: c.mode,
                    frames: c.frames,
                    run_index: i,
                    seconds: s,
                })
            })
            .collect()
    }

    pub fn write_rows<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.rows() {
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let m = &self.model;
        let mut s = format!(
            "timed region: audio+visual encode, fusion, {} forced decode steps (no cache)\n\
             d_model {}, audio {} frames -> {} tokens, {} patches per video frame, {} warm-up + {} timed runs\n",
            self.spec.decode_steps,
            m.d_model,
            self.spec.audio_frames,
            m.t_a,
            m.patches_per_frame,
            self.spec.warmup_runs,
            self.spec.timed_runs
        );
        s.push_str(&format!("{:>10} {:>7} {:>12} {:>12} {:>9}\n", "mode", "frames", "mean_s", "std_s", "concat/g"));
        let ratios = self.ratios();
        for c in &self.cells {
            let ratio = match (c.mode, ratios.iter().find(|(f, _)| *f == c.frames)) {
                (FusionMode::Concat, Some((_, r))) => format!("{r:>9.2}"),
                _ => format!("{:>9}", ""),
            };
            s.push_str(&format!("{:>10} {:>7} {:>12.6} {:>12.6} {ratio}\n", c.mode.as_str(), c.frames, c.mean, c.std));
        }
        s
    }
}

fn time_once(model: &Captioner, audio: &Tensor, visual: Option<&Tensor>, steps: usize) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(model.decode_fixed(audio, visual, steps)?);
    let s = start.elapsed().as_secs_f64();
    if !s.is_finite() || s < 0.0 {
        return Err(Error::State(format!("clock returned {s} seconds")));
    }
    Ok(s)
}

pub fn run_bench(spec: &BenchSpec, config: &ModelConfig) -> Result<BenchReport> {
    spec.validate()?;
    config.validate()?;
    let base = Captioner::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xBE_7C);
    let audio_rows = config.t_a * config.audio_pool;
    let audio = Tensor::randn(&[audio_rows, config.d_in_a], 1.0, &mut rng);
    let mut cases = Vec::new();
    for &frames in &spec.frame_counts {
        let visual =
            (frames > 0).then(|| Tensor::randn(&[frames * config.patches_per_frame, config.d_in_v], 1.0, &mut rng));
        for &mode in &spec.modes {
            cases.push((mode, frames, base.with_mode(mode), visual.clone()));
        }
    }
    for (_, _, model, visual) in &cases {
        for _ in 0..spec.warmup_runs {
            std::hint::black_box(model.decode_fixed(&audio, visual.as_ref(), spec.decode_steps)?);
        }
    }
    // Round-robin over cells so a slow stretch of the machine is shared
    // rather than landing on one cell.
    let mut samples = vec![Vec::with_capacity(spec.timed_runs); cases.len()];
    for _ in 0..spec.timed_runs {
        for ((_, _, model, visual), out) in cases.iter().zip(&mut samples) {
            out.push(time_once(model, &audio, visual.as_ref(), spec.decode_steps)?);
        }
    }
    let cells =
        cases.iter().zip(samples).map(|((mode, frames, _, _), s)| BenchCell::from_samples(*mode, *frames, s)).collect();
    Ok(BenchReport { spec: spec.clone(), model: config.clone(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchSpec {
        BenchSpec {
            frame_counts: vec![0, 2],
            audio_frames: 32,
            warmup_runs: 1,
            timed_runs: 3,
            decode_steps: 2,
            ..BenchSpec::default()
        }
    }

    fn small_model(spec: &BenchSpec) -> ModelConfig {
        ModelConfig { d_model: 8, patches_per_frame: 2, ..bench_model_config(spec) }
    }

    #[test]
    fn single_run_has_zero_std() {
        let c = BenchCell::from_samples(FusionMode::Gated, 1, vec![0.25]);
        assert_eq!((c.mean, c.std, c.min, c.max), (0.25, 0.0, 0.25, 0.25));
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let c = BenchCell::from_samples(FusionMode::Concat, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.mean, 2.5);
        assert!((c.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn report_shape_and_ratios() {
        let spec = quick();
        let r = run_bench(&spec, &small_model(&spec)).unwrap();
        assert_eq!(r.cells.len(), 4);
        for c in &r.cells {
            assert_eq!(c.samples.len(), 3);
            assert!(c.min <= c.mean && c.mean <= c.max);
        }
        for (f, ratio) in r.ratios() {
            let want = r.cell(FusionMode::Concat, f).unwrap().mean / r.cell(FusionMode::Gated, f).unwrap().mean;
            assert_eq!(ratio, want);
        }
        assert_eq!(r.rows().len(), 12);
        let mut buf = Vec::new();
        r.write_rows(&mut buf).unwrap();
        let first: BenchRow = serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first, r.rows()[0]);
        assert!(r.table().contains("concat"));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let m = small_model(&quick());
        assert!(run_bench(&BenchSpec { timed_runs: 0, ..quick() }, &m).is_err());
        assert!(run_bench(&BenchSpec { frame_counts: vec![], ..quick() }, &m).is_err());
    }

    #[test]
    fn spread_and_monotonicity_helpers() {
        let spec = BenchSpec { frame_counts: vec![0, 1, 4], ..quick() };
        let cell = |mode, frames, s: f64| BenchCell::from_samples(mode, frames, vec![s]);
        let r = BenchReport {
            model: small_model(&spec),
            spec,
            cells: vec![
                cell(FusionMode::Gated, 0, 1.0),
                cell(FusionMode::Gated, 1, 2.0),
                cell(FusionMode::Gated, 4, 2.5),
                cell(FusionMode::Concat, 0, 1.0),
                cell(FusionMode::Concat, 1, 3.0),
                cell(FusionMode::Concat, 4, 3.0),
            ],
        };
        assert_eq!(r.spread(FusionMode::Gated), Some(0.25));
        assert!(r.strictly_increasing(FusionMode::Gated));
        assert!(!r.strictly_increasing(FusionMode::Concat));
    }
}
