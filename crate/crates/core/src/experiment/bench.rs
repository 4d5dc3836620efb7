//! Wall-clock inference timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seqmodels::SeqModel;

pub const MIN_ITERS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Per-iteration timing plus optional whole-pipeline accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub warmup: usize,
    pub iterations: usize,
    pub median_secs: f64,
    pub mean_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    /// Predictor training plus inference over the test set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_secs: Option<f64>,
    /// Feature extraction plus frame reconstruction (and autoencoder training).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage13_secs: Option<f64>,
    pub hardware: String,
}

impl BenchReport {
    /// Attaches stage totals; `total_secs` is then their sum.
    pub fn with_stage_times(mut self, stage2: f64, stage13: f64) -> Self {
        self.stage2_secs = Some(stage2);
        self.stage13_secs = Some(stage13);
        self
    }

    pub fn total_secs(&self) -> Option<f64> {
        match (self.stage2_secs, self.stage13_secs) {
            (Some(a), Some(b)) => Some(a + b),
            (Some(a), None) => Some(a),
            _ => None,
        }
    }
}

/// CPU model and logical core count, as far as the platform reveals them.
pub fn hardware_descriptor() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!(
        "{model}, {cores} logical core(s), {} {}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Times `iters` calls of `f` after `warmup` untimed calls on a dedicated
/// single-thread pool; the median is the headline statistic.
pub fn benchmark<F>(label: &str, mut f: F, warmup: usize, iters: usize) -> Result<BenchReport>
where
    F: FnMut() -> Result<()> + Send,
{
    if iters < MIN_ITERS || warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_ITERS} iterations and {MIN_WARMUP} warmup runs, got {iters} and {warmup}"
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut times = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..warmup {
            f()?;
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            f()?;
            times.push(t.elapsed().as_secs_f64());
        }
        Ok(times)
    })?;
    let mean = times.iter().sum::<f64>() / iters as f64;
    times.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    Ok(BenchReport {
        label: label.to_string(),
        warmup,
        iterations: iters,
        median_secs: median,
        mean_secs: mean,
        min_secs: times[0],
        max_secs: times[iters - 1],
        stage2_secs: None,
        stage13_secs: None,
        hardware: hardware_descriptor(),
    })
}

/// Times single-window predictions of `model` on `input` (`[1, c, k, h, w]`).
pub fn benchmark_inference(
    model: &SeqModel,
    input: &Tensor<f32>,
    warmup: usize,
    iters: usize,
) -> Result<BenchReport> {
    let label = format!("{} {:?}", model.config.kind, model.net.map_shape());
    benchmark(
        &label,
        || {
            std::hint::black_box(model.predict_tensor(input.clone())?);
            Ok(())
        },
        warmup,
        iters,
    )
}
