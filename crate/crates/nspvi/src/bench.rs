//! Time-budget benchmark: the same prediction task under each sampler and
//! each sample count, with cumulative sampling wall time per cell.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{EventSeq, ModelParams};
use crate::predict::{predict_sequence, score, PredictionRecord, Sampler, SamplerKind};
use crate::rng::RngStream;
use crate::variational::{UnspParams, UsapParams};

/// One benchmark cell: a (sampler, sample count) pair over the whole
/// prediction protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sampler: SamplerKind,
    pub s: usize,
    /// Total prediction wall time across all prefixes, seconds.
    pub wall_s: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub failures: usize,
    pub predictions: usize,
}

pub struct BenchSetup<'a> {
    pub model: &'a ModelParams,
    pub unsp: &'a UnspParams,
    pub usap: &'a UsapParams,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

/// All predictions for one (sampler, S) cell, sequences in parallel.
pub fn bench_cell(
    setup: &BenchSetup,
    kind: SamplerKind,
    s: usize,
    test: &[EventSeq],
) -> Result<(BenchRecord, Vec<PredictionRecord>)> {
    let root = RngStream::root(setup.seed);
    let records: Vec<Vec<PredictionRecord>> = test
        .par_iter()
        .enumerate()
        .map(|(seq_id, seq)| {
            let sampler = match kind {
                SamplerKind::Mcmc => Sampler::Mcmc { burn_in: setup.burn_in, thin: setup.thin },
                SamplerKind::Unsp => Sampler::Unsp(setup.unsp),
                SamplerKind::Usap => Sampler::Usap(setup.usap),
            };
            predict_sequence(&sampler, setup.model, &root, seq_id, seq, s)
        })
        .collect::<Result<_>>()?;
    let records: Vec<PredictionRecord> = records.into_iter().flatten().collect();
    let failures = records.iter().filter(|r| r.failed).count();
    let (rmse, accuracy) = if failures == records.len() {
        (f64::NAN, f64::NAN)
    } else {
        score(&records)?
    };
    let cell = BenchRecord {
        sampler: kind,
        s,
        wall_s: records.iter().map(|r| r.wall_ms).sum::<f64>() / 1e3,
        rmse,
        accuracy,
        failures,
        predictions: records.len(),
    };
    Ok((cell, records))
}

/// Full sweep: every sampler crossed with every sample count.
pub fn bench_sweep(
    setup: &BenchSetup,
    s_values: &[usize],
    test: &[EventSeq],
) -> Result<(Vec<BenchRecord>, Vec<PredictionRecord>)> {
    let mut cells = Vec::new();
    let mut all = Vec::new();
    for kind in [SamplerKind::Mcmc, SamplerKind::Unsp, SamplerKind::Usap] {
        for &s in s_values {
            let (cell, records) = bench_cell(setup, kind, s, test)?;
            cells.push(cell);
            all.extend(records);
        }
    }
    Ok((cells, all))
}
