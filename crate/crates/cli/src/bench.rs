//! Wall-clock latency of full versus truncated forwards.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use unidec_core::decoder::{forward, DecoderModel, Mode};
use unidec_core::tape::Tape;
use unidec_core::tokens::TokenSequence;

use crate::error::{CliError, CliResult};

/// Fewer timed runs than this make the median meaningless.
pub const MIN_RUNS: usize = 10;
pub const WARMUP_RUNS: usize = 10;

/// Truncated/full median ratio of the large-scale measurement, for context.
pub const REFERENCE_SCALE_RATIO: f64 = 156.0 / 263.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: Mode,
    pub n_runs: usize,
    pub layers_executed: usize,
    pub runs_ms: Vec<f64>,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyComparison {
    pub seq_len: usize,
    pub full: LatencyReport,
    pub truncated: LatencyReport,
    /// Truncated median over full median.
    pub ratio: f64,
    pub reference_ratio: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one inference forward per run after discarding the warmups.
pub fn latency_bench(model: &DecoderModel, seq: &TokenSequence, mode: Mode, n_runs: usize) -> CliResult<LatencyReport> {
    if n_runs < MIN_RUNS {
        return Err(CliError::Config(format!("latency bench needs at least {MIN_RUNS} runs, got {n_runs}")));
    }
    let mut layers = 0;
    let mut runs_ms = Vec::with_capacity(n_runs);
    for i in 0..WARMUP_RUNS + n_runs {
        let t0 = Instant::now();
        let mut tape = Tape::inference(&model.store);
        let trace = forward(&mut tape, model, seq, mode)?;
        std::hint::black_box(&tape);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        layers = trace.layers_executed;
        if i >= WARMUP_RUNS {
            runs_ms.push(ms);
        }
    }
    Ok(LatencyReport { mode, n_runs, layers_executed: layers, median_ms: median(&runs_ms), runs_ms })
}

pub fn compare(model: &DecoderModel, seq: &TokenSequence, n_runs: usize) -> CliResult<LatencyComparison> {
    let full = latency_bench(model, seq, Mode::Full, n_runs)?;
    let truncated = latency_bench(model, seq, Mode::Truncated, n_runs)?;
    Ok(LatencyComparison {
        seq_len: seq.len(),
        ratio: truncated.median_ms / full.median_ms,
        full,
        truncated,
        reference_ratio: REFERENCE_SCALE_RATIO,
    })
}
