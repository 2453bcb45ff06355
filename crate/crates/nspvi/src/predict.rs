//! Next-event prediction: posterior draws (MCMC chain or a variational
//! family), a top-rate refresh, and forward simulation of the generative
//! model past the last observed event.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::RATE_FLOOR;
use crate::mcmc::ChainState;
use crate::model::{EventSeq, HiddenEvents, ModelParams};
use crate::rng::{tag, RngStream};
use crate::simulate::sample_poisson_on;
use crate::variational::{UnspParams, UsapParams};

/// Default forward-simulation horizon as a multiple of the window.
pub const HORIZON_FACTOR: f64 = 2.0;
/// Horizon doublings before a draw counts as an empty future.
pub const HORIZON_RETRIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Mcmc,
    Unsp,
    Usap,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Mcmc => "mcmc",
            SamplerKind::Unsp => "unsp",
            SamplerKind::Usap => "usap",
        })
    }
}

/// Posterior sampler used during prediction.
pub enum Sampler<'a> {
    Mcmc { burn_in: usize, thin: usize },
    Unsp(&'a UnspParams),
    Usap(&'a UsapParams),
}

impl Sampler<'_> {
    pub fn kind(&self) -> SamplerKind {
        match self {
            Sampler::Mcmc { .. } => SamplerKind::Mcmc,
            Sampler::Unsp(_) => SamplerKind::Unsp,
            Sampler::Usap(_) => SamplerKind::Usap,
        }
    }
}

/// Per-sequence state carried across the events of one sequence: the warm
/// chain (MCMC only), the locally refreshed top rates, and the streams.
pub struct PredictState {
    pub model: ModelParams,
    pub chain: Option<ChainState>,
    chain_rng: RngStream,
    q_rng: RngStream,
    future_rng: RngStream,
}

impl PredictState {
    pub fn new(model: ModelParams, root: &RngStream, seq_id: u64) -> Self {
        Self {
            model,
            chain: None,
            chain_rng: root.split2(tag::CHAIN, seq_id),
            q_rng: root.split2(tag::VARIATIONAL, seq_id),
            future_rng: root.split2(tag::FUTURE, seq_id),
        }
    }

    /// MCMC cycles run so far; stays zero under the variational samplers.
    pub fn mcmc_cycles(&self) -> u64 {
        self.chain.as_ref().map_or(0, |c| c.cycles_run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub seq_id: usize,
    /// Index (1-based count of context events) of the predicted event.
    pub n: usize,
    pub t_true: f64,
    pub k_true: usize,
    pub t_hat: f64,
    pub k_hat: usize,
    pub sampler: SamplerKind,
    pub s: usize,
    pub wall_ms: f64,
    pub failed: bool,
}

/// `mu_k = (1/S) sum_s m^s_k / T`, floored.
pub fn top_rate_mle(counts: &[Vec<usize>], window: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("top-rate MLE needs at least one draw".into()));
    }
    let k = counts[0].len();
    Ok((0..k)
        .map(|j| {
            let mean = counts.iter().map(|c| c[j] as f64).sum::<f64>() / counts.len() as f64;
            (mean / window).max(RATE_FLOOR)
        })
        .collect())
}

/// Forward-simulate the generative model on `(t_n, t_n + horizon]` given a
/// posterior draw, and return the earliest simulated observed event.
pub fn simulate_future(
    model: &ModelParams,
    z: &HiddenEvents,
    t_n: f64,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<Option<(f64, usize)>> {
    let l = model.hidden_layers();
    let end = t_n + horizon;
    // extended hidden events: posterior draw plus newly simulated futures
    let mut ext: Vec<Vec<Vec<f64>>> = z.layers.clone();
    for layer in (1..=l).rev() {
        let parents: Vec<Vec<f64>> = if layer == l {
            Vec::new()
        } else {
            ext[layer].clone() // layer + 1, shifted index
        };
        for k in 0..model.layer_sizes[layer] {
            let cif = model.rpp_cif_pw(layer, k, &parents, end);
            let new = sample_poisson_on(&cif, t_n, end, rng)?;
            ext[layer - 1][k].extend(new);
            ext[layer - 1][k].sort_by(f64::total_cmp);
        }
    }
    let parents = ext[0].clone();
    let mut best: Option<(f64, usize)> = None;
    for k in 0..model.layer_sizes[0] {
        let cif = model.rpp_cif_pw(0, k, &parents, end);
        if let Some(&t) = sample_poisson_on(&cif, t_n, end, rng)?.first() {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, k));
            }
        }
    }
    Ok(best)
}

/// Mean simulated time and majority-vote type (ties toward the smallest
/// type index). `None` when no simulation produced an event.
pub fn aggregate_draws(times: &[f64], votes: &[usize]) -> Option<(f64, usize)> {
    if times.is_empty() {
        return None;
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let k_hat = votes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k)
        .unwrap();
    Some((mean, k_hat))
}

/// One next-event prediction from `n` context events. Phase 1 refreshes
/// the top rates from `s` posterior draws; phase 2 forward-simulates `s`
/// fresh draws and aggregates (mean time, majority type).
pub fn predict_next(
    sampler: &Sampler,
    state: &mut PredictState,
    seq_id: usize,
    seq: &EventSeq,
    n: usize,
    s: usize,
) -> Result<PredictionRecord> {
    let started = std::time::Instant::now();
    let (t_true, k_true) = seq.events[n];
    let t_n = seq.events[n - 1].0;
    let context = EventSeq { events: seq.events[..n].to_vec(), window: t_n };
    let l = state.model.hidden_layers();

    let draw = |state: &mut PredictState| -> Result<HiddenEvents> {
        match sampler {
            Sampler::Mcmc { burn_in, thin } => {
                if state.chain.is_none() {
                    state.chain =
                        Some(ChainState::new(&state.model, &context, state.chain_rng.clone()));
                }
                let chain = state.chain.as_mut().unwrap();
                chain.set_observations(&state.model, &context);
                let burn_now = if chain.cycles_run == 0 { *burn_in } else { 0 };
                let model = state.model.clone();
                chain.posterior_sample(&model, burn_now, *thin)
            }
            Sampler::Unsp(q) => q.sample(&context, &mut state.q_rng),
            Sampler::Usap(q) => q.sample(&context, &mut state.q_rng),
        }
    };

    // phase 1: refresh the constant top rates
    let counts: Vec<Vec<usize>> = (0..s)
        .map(|_| draw(state).map(|z| z.layer(l).iter().map(Vec::len).collect()))
        .collect::<Result<_>>()?;
    state.model.top_rates = top_rate_mle(&counts, t_n)?;

    // phase 2: fresh draws, forward simulation with horizon doubling
    let mut times = Vec::with_capacity(s);
    let mut votes = vec![0usize; state.model.layer_sizes[0]];
    for _ in 0..s {
        let z = draw(state)?;
        let mut horizon = HORIZON_FACTOR * seq.window;
        let mut hit = None;
        for _ in 0..=HORIZON_RETRIES {
            hit = simulate_future(&state.model, &z, t_n, horizon, &mut state.future_rng)?;
            if hit.is_some() {
                break;
            }
            horizon *= 2.0;
        }
        if let Some((t, k)) = hit {
            times.push(t);
            votes[k] += 1;
        }
    }
    let agg = aggregate_draws(&times, &votes);
    let failed = agg.is_none();
    let (t_hat, k_hat) = agg.unwrap_or((f64::NAN, 0));
    Ok(PredictionRecord {
        seq_id,
        n,
        t_true,
        k_true,
        t_hat,
        k_hat,
        sampler: sampler.kind(),
        s,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        failed,
    })
}

/// Next-event predictions for every prefix with at least one event.
pub fn predict_sequence(
    sampler: &Sampler,
    model: &ModelParams,
    root: &RngStream,
    seq_id: usize,
    seq: &EventSeq,
    s: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut state = PredictState::new(model.clone(), root, seq_id as u64);
    (1..seq.events.len())
        .map(|n| predict_next(sampler, &mut state, seq_id, seq, n, s))
        .collect()
}

/// RMSE over predicted times and accuracy over predicted types, ignoring
/// failure records.
pub fn score(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    let ok: Vec<&PredictionRecord> = records.iter().filter(|r| !r.failed).collect();
    if ok.is_empty() {
        return Err(Error::EmptyInput("no successful predictions to score".into()));
    }
    let mse = ok.iter().map(|r| (r.t_hat - r.t_true).powi(2)).sum::<f64>() / ok.len() as f64;
    let acc = ok.iter().filter(|r| r.k_hat == r.k_true).count() as f64 / ok.len() as f64;
    Ok((mse.sqrt(), acc))
}
