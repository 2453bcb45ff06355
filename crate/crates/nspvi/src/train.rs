//! MCEM training: per iteration, one warm-chain posterior draw per batch
//! sequence feeds a Fisher-identity Adam step on the model kernels, a
//! direct MLE update of the top rates, and inclusive-KL Adam steps on both
//! variational families.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    kernel_from_raw, kernel_to_raw, sigmoid, softplus_inv, WeibullKernel, RATE_FLOOR,
};
use crate::mcmc::ChainState;
use crate::model::{EventSeq, HiddenEvents, ModelParams, OBS_BACKGROUND};
use crate::rng::{tag, RngStream};
use crate::variational::{
    EncoderParams, HeadParams, OutputHead, UnspParams, UsapConfig, UsapParams,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Model-parameter step size (MPSS).
    pub model_step: f64,
    /// Variational step size (SASS).
    pub variational_step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `None` = full batch; `Some(b)` = shuffled minibatches of size `b`.
    pub batch_size: Option<usize>,
    /// Chain burn-in cycles on first use of each sequence.
    pub burn_in: usize,
    /// Chain cycles between consecutive draws of a warm chain.
    pub thin: usize,
    /// Validation check every this many iterations.
    pub val_cadence: usize,
    /// Early stop after this many checks without improvement.
    pub patience: usize,
    /// q-draws per validation sequence.
    pub val_samples: usize,
    /// Freeze the shape parameter of the model's downward kernels.
    pub fix_k_shape: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            model_step: 0.01,
            variational_step: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: None,
            burn_in: 100,
            thin: 10,
            val_cadence: 50,
            patience: 5,
            val_samples: 16,
            fix_k_shape: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.model_step > 0.0 && self.variational_step > 0.0) {
            return Err(Error::InvalidParameter("step sizes must be positive".into()));
        }
        if self.patience == 0 || self.val_cadence == 0 {
            return Err(Error::InvalidParameter("patience and cadence must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Constant-step Adam over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    step: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, step: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, step, beta1, beta2, eps }
    }

    /// Ascent step: `theta += step * mhat / (sqrt(vhat) + eps)`.
    pub fn ascend(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] += self.step * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Unconstrained mirror of the model's downward kernel tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRaw {
    /// `[l][i][k]` triples matching `ModelParams::down_kernels`.
    pub raw: Vec<Vec<Vec<[f64; 3]>>>,
}

impl ModelRaw {
    pub fn from_model(model: &ModelParams) -> Self {
        Self {
            raw: model
                .down_kernels
                .iter()
                .map(|plane| {
                    plane
                        .iter()
                        .map(|row| row.iter().map(kernel_to_raw).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn install(&self, model: &mut ModelParams) {
        for (plane, rplane) in model.down_kernels.iter_mut().zip(&self.raw) {
            for (row, rrow) in plane.iter_mut().zip(rplane) {
                for (kern, &raw) in row.iter_mut().zip(rrow) {
                    *kern = kernel_from_raw(raw);
                }
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.raw.iter().flatten().flatten().count() * 3
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.raw
            .iter()
            .flatten()
            .flatten()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn unflatten_into(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for plane in &mut self.raw {
            for row in plane {
                for triple in row {
                    for x in triple.iter_mut() {
                        *x = it.next().unwrap();
                    }
                }
            }
        }
    }
}

/// `log p(x, z)` and its gradient with respect to the flattened raw
/// downward-kernel parameters. Top rates contribute to the value only.
pub fn joint_grad(model: &ModelParams, x: &EventSeq, z: &HiddenEvents) -> Result<(f64, Vec<f64>)> {
    let l = model.hidden_layers();
    let window = x.window;
    let mut ll = 0.0;
    let mut grads: Vec<Vec<Vec<[f64; 3]>>> = model
        .down_kernels
        .iter()
        .map(|plane| plane.iter().map(|row| vec![[0.0; 3]; row.len()]).collect())
        .collect();
    // top layer: constant rates, no kernel parameters involved
    for k in 0..model.layer_sizes[l] {
        let mu = model.top_rates[k];
        ll += z.layer(l)[k].len() as f64 * mu.ln() - mu * window;
    }
    let obs = x.grouped(model.layer_sizes[0]);
    for layer in 0..l {
        let parents = z.layer(layer + 1);
        for k in 0..model.layer_sizes[layer] {
            let events: &[f64] = if layer == 0 { &obs[k] } else { &z.layer(layer)[k] };
            let base = if layer == 0 { model.obs_background } else { 0.0 };
            for &t in events {
                let mut lam = base;
                for (i, times) in parents.iter().enumerate() {
                    let kern = &model.down_kernels[layer][i][k];
                    for &s in times {
                        lam += kern.eval(t - s)?;
                    }
                }
                if lam <= 0.0 {
                    return Err(Error::LogOfZero { t, layer, index: k });
                }
                ll += lam.ln();
                let inv = 1.0 / lam;
                for (i, times) in parents.iter().enumerate() {
                    let kern = &model.down_kernels[layer][i][k];
                    for &s in times {
                        let ge = kern.eval_grads(t - s)?;
                        for d in 0..3 {
                            grads[layer][i][k][d] += inv * ge[d];
                        }
                    }
                }
            }
            ll -= base * window;
            for (i, times) in parents.iter().enumerate() {
                let kern = &model.down_kernels[layer][i][k];
                for &s in times {
                    ll -= kern.integral(0.0, window - s)?;
                    let gi = kern.integral_grads(window - s);
                    for d in 0..3 {
                        grads[layer][i][k][d] -= gi[d];
                    }
                }
            }
        }
    }
    // chain through softplus into raw coordinates, flattening in ModelRaw order
    let mut flat = Vec::new();
    for (layer, plane) in grads.iter().enumerate() {
        for (i, row) in plane.iter().enumerate() {
            for (k, g) in row.iter().enumerate() {
                let raw = kernel_to_raw(&model.down_kernels[layer][i][k]);
                for d in 0..3 {
                    flat.push(g[d] * sigmoid(raw[d]));
                }
            }
        }
    }
    Ok((ll, flat))
}

/// One Fisher-identity Adam step on the kernel parameters plus the direct
/// top-rate MLE update, from one posterior draw per sequence. On a
/// non-finite gradient the parameters are left unchanged.
pub fn model_grad_step(
    model: &mut ModelParams,
    raws: &mut ModelRaw,
    adam: &mut Adam,
    batch: &[(&EventSeq, &HiddenEvents)],
    fix_k_shape: bool,
) -> Result<f64> {
    let per_seq: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(x, z)| joint_grad(model, x, z))
        .collect::<Result<_>>()?;
    let mut total_ll = 0.0;
    let mut grad = vec![0.0; raws.n_params()];
    for (ll, g) in &per_seq {
        total_ll += ll;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { context: "model kernels".into() });
    }
    if fix_k_shape {
        for g in grad.chunks_mut(3) {
            g[1] = 0.0;
        }
    }
    let mut theta = raws.flatten();
    adam.ascend(&mut theta, &grad);
    raws.unflatten_into(&theta);
    raws.install(model);
    // direct MLE for the constant top rates
    let l = model.hidden_layers();
    for k in 0..model.layer_sizes[l] {
        let mean: f64 = batch
            .iter()
            .map(|(x, z)| z.layer(l)[k].len() as f64 / x.window)
            .sum::<f64>()
            / batch.len() as f64;
        model.top_rates[k] = mean.max(RATE_FLOOR);
    }
    Ok(total_ll)
}

/// One Adam ascent step on `Sum_seq log q(z | x)` for the UNSP family.
pub fn unsp_grad_step(
    q: &mut UnspParams,
    adam: &mut Adam,
    batch: &[(&EventSeq, &HiddenEvents)],
) -> Result<f64> {
    let per_seq: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(x, z)| q.q_loglik_grad(x, z))
        .collect::<Result<_>>()?;
    let theta = q.flatten();
    ascend_merged(per_seq, &mut |theta| q.unflatten_into(theta), theta, adam)
}

/// One Adam ascent step on `Sum_seq log q(z | x)` for the USAP family.
pub fn usap_grad_step(
    q: &mut UsapParams,
    adam: &mut Adam,
    batch: &[(&EventSeq, &HiddenEvents)],
) -> Result<f64> {
    let per_seq: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(x, z)| q.q_loglik_grad(x, z))
        .collect::<Result<_>>()?;
    let theta = q.flatten();
    ascend_merged(per_seq, &mut |theta| q.unflatten_into(theta), theta, adam)
}

fn ascend_merged(
    per_seq: Vec<(f64, Vec<f64>)>,
    write_back: &mut dyn FnMut(&[f64]) -> Result<()>,
    mut theta: Vec<f64>,
    adam: &mut Adam,
) -> Result<f64> {
    let mut total_ll = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for (ll, g) in &per_seq {
        total_ll += ll;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    adam.ascend(&mut theta, &grad);
    write_back(&theta)?;
    Ok(total_ll)
}

/// One CSV-friendly row per training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub joint_loglik: f64,
    pub q_loglik_unsp: f64,
    pub q_loglik_usap: f64,
    pub top_rates: Vec<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub model: ModelParams,
    pub unsp: UnspParams,
    pub usap: UsapParams,
    pub log: Vec<LogRecord>,
    pub stopped_early: bool,
}

/// Scale-aware initial model: kernel mass ~ U(0.5, 1.5), unit shape, scale
/// T/10, and all base rates set from the mean observed count.
pub fn init_model(
    layer_sizes: &[usize],
    window: f64,
    mean_count: f64,
    rng: &mut RngStream,
) -> ModelParams {
    let l = layer_sizes.len() - 1;
    let rate = |k: usize| (mean_count / (k as f64 * window)).max(RATE_FLOOR);
    let kern =
        |rng: &mut RngStream| WeibullKernel::new(rng.uniform_range(0.5, 1.5), 1.0, window / 10.0).unwrap();
    ModelParams {
        layer_sizes: layer_sizes.to_vec(),
        down_kernels: (0..l)
            .map(|layer| {
                (0..layer_sizes[layer + 1])
                    .map(|_| (0..layer_sizes[layer]).map(|_| kern(rng)).collect())
                    .collect()
            })
            .collect(),
        top_rates: vec![rate(layer_sizes[l]); layer_sizes[l]],
        vpp_kernels: (0..l)
            .map(|layer| {
                (0..layer_sizes[layer])
                    .map(|_| (0..layer_sizes[layer + 1]).map(|_| kern(rng)).collect())
                    .collect()
            })
            .collect(),
        vpp_base: (1..=l).map(|layer| vec![rate(layer_sizes[layer]); layer_sizes[layer]]).collect(),
        obs_background: OBS_BACKGROUND,
    }
}

/// UNSP initialized from the model's virtual tables.
pub fn init_unsp(model: &ModelParams) -> UnspParams {
    UnspParams::from_tables(&model.layer_sizes, &model.vpp_kernels, &model.vpp_base)
}

fn uniform_tensor(rows: usize, cols: usize, rng: &mut RngStream) -> crate::graph::Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
    crate::graph::Tensor::new(rows, cols, data).unwrap()
}

fn const_tensor(rows: usize, v: f64) -> crate::graph::Tensor {
    crate::graph::Tensor::vector(vec![v; rows])
}

/// USAP with U(+/- 1/sqrt(fan_in)) weights, identity layer norms, and output
/// biases chosen so the initial kernels are near (p=1, k=1, lam=T/10).
pub fn init_usap(config: UsapConfig, window: f64, rate: f64, rng: &mut RngStream) -> UsapParams {
    let l = config.hidden_layers();
    let b_theta = crate::graph::Tensor::vector(vec![
        softplus_inv(1.0),
        softplus_inv(1.0),
        softplus_inv(window / 10.0),
    ]);
    let encoders = (0..l)
        .map(|_| EncoderParams {
            heads: (0..config.heads)
                .map(|_| HeadParams {
                    w_q: uniform_tensor(config.d_k, config.d_m, rng),
                    w_k: uniform_tensor(config.d_k, config.d_m, rng),
                    w_v: uniform_tensor(config.d_v, config.d_m, rng),
                })
                .collect(),
            w_o: uniform_tensor(config.d_m, config.heads * config.d_v, rng),
            ln_q_gain: const_tensor(config.d_m, 1.0),
            ln_q_bias: const_tensor(config.d_m, 0.0),
            ffn_w1: uniform_tensor(config.d_h, config.d_m, rng),
            ffn_b1: const_tensor(config.d_h, 0.0),
            ffn_w2: uniform_tensor(config.d_m, config.d_h, rng),
            ffn_b2: const_tensor(config.d_m, 0.0),
            ln_f_gain: const_tensor(config.d_m, 1.0),
            ln_f_bias: const_tensor(config.d_m, 0.0),
        })
        .collect();
    let out_heads = (1..=l)
        .map(|layer| {
            (0..config.layer_sizes[layer])
                .map(|_| OutputHead {
                    w_theta: uniform_tensor(3, config.d_m, rng),
                    b_theta: b_theta.clone(),
                })
                .collect()
        })
        .collect();
    let raw_base = (1..=l)
        .map(|layer| {
            vec![softplus_inv(rate.max(RATE_FLOOR * 2.0)); config.layer_sizes[layer]]
        })
        .collect();
    UsapParams {
        w_eid: uniform_tensor(config.d_m, config.n_pp(), rng),
        config,
        encoders,
        out_heads,
        raw_base,
    }
}

/// Validation score: mean log predictive intensity of each sequence's last
/// event under `s` UNSP posterior draws of the remaining context.
fn validation_score(
    model: &ModelParams,
    unsp: &UnspParams,
    val: &[EventSeq],
    s: usize,
    rng: &RngStream,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (seq_id, seq) in val.iter().enumerate() {
        if seq.events.is_empty() {
            continue;
        }
        let (t_last, k_last) = *seq.events.last().unwrap();
        let context = seq.prefix(seq.events.len() - 1);
        let mut stream = rng.split2(tag::VARIATIONAL, seq_id as u64);
        let mut lam = 0.0;
        for _ in 0..s {
            let z = unsp.sample(&context, &mut stream)?;
            lam += model.rpp_cif(0, k_last, z.layer(1), t_last)?;
        }
        total += (lam / s as f64).max(f64::MIN_POSITIVE).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("validation set has no events".into()));
    }
    Ok(total / n as f64)
}

/// Alg.-style MCEM: warm per-sequence chains, shared draws for the model
/// and both variational families, VPPs tied to the UNSP parameters, and
/// early stopping on a validation score.
pub fn mcem_run(
    mut model: ModelParams,
    mut unsp: UnspParams,
    mut usap: UsapParams,
    train: &[EventSeq],
    val: &[EventSeq],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    let root = RngStream::root(cfg.seed);
    let mut raws = ModelRaw::from_model(&model);
    let mut adam_model =
        Adam::new(raws.n_params(), cfg.model_step, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut adam_unsp =
        Adam::new(unsp.n_params(), cfg.variational_step, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut adam_usap =
        Adam::new(usap.n_params(), cfg.variational_step, cfg.beta1, cfg.beta2, cfg.adam_eps);
    // tie the MCMC virtual processes to the UNSP parameters
    let (vk, vb) = unsp.to_tables();
    model.vpp_kernels = vk;
    model.vpp_base = vb;

    let mut chains: Vec<Option<ChainState>> = vec![None; train.len()];
    let mut shuffle_rng = root.split(tag::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len(); // force a reshuffle on first minibatch
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut best_score = f64::NEG_INFINITY;
    let mut misses = 0usize;
    let mut stopped_early = false;

    for iter in 0..cfg.iterations {
        let started = std::time::Instant::now();
        // pick the batch
        let batch_idx: Vec<usize> = match cfg.batch_size {
            None => (0..train.len()).collect(),
            Some(b) => {
                let mut idx = Vec::with_capacity(b);
                while idx.len() < b {
                    if cursor >= order.len() {
                        // reshuffle per epoch (Fisher-Yates with the seeded stream)
                        for i in (1..order.len()).rev() {
                            order.swap(i, shuffle_rng.index(i + 1));
                        }
                        cursor = 0;
                    }
                    idx.push(order[cursor]);
                    cursor += 1;
                }
                idx
            }
        };
        // sampling phase: one draw per batch sequence, chains stay warm
        for &i in &batch_idx {
            if chains[i].is_none() {
                chains[i] = Some(ChainState::new(
                    &model,
                    &train[i],
                    root.split2(tag::CHAIN, i as u64),
                ));
            }
        }
        let draws: Vec<HiddenEvents> = {
            let mut slots: Vec<(usize, &mut Option<ChainState>)> = chains
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| batch_idx.contains(i))
                .collect();
            let model_ref = &model;
            let burn = cfg.burn_in;
            let thin = cfg.thin;
            let mut by_index: Vec<(usize, HiddenEvents)> = slots
                .par_iter_mut()
                .map(|(i, slot)| {
                    let chain = slot.as_mut().expect("chain initialized above");
                    let burn_now = if chain.cycles_run == 0 { burn } else { 0 };
                    chain.posterior_sample(model_ref, burn_now, thin).map(|z| (*i, z))
                })
                .collect::<Result<_>>()?;
            by_index.sort_by_key(|(i, _)| *i);
            let lookup: std::collections::HashMap<usize, HiddenEvents> =
                by_index.into_iter().collect();
            batch_idx.iter().map(|i| lookup[i].clone()).collect()
        };
        let batch: Vec<(&EventSeq, &HiddenEvents)> = batch_idx
            .iter()
            .zip(&draws)
            .map(|(&i, z)| (&train[i], z))
            .collect();
        // update phase: skip an update (parameters unchanged) only on a
        // non-finite gradient; propagate everything else
        let joint = match model_grad_step(&mut model, &mut raws, &mut adam_model, &batch, cfg.fix_k_shape)
        {
            Ok(v) => v,
            Err(Error::NonFiniteGradient { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        let ql_unsp = match unsp_grad_step(&mut unsp, &mut adam_unsp, &batch) {
            Ok(v) => v,
            Err(Error::NonFiniteGradient { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        let ql_usap = match usap_grad_step(&mut usap, &mut adam_usap, &batch) {
            Ok(v) => v,
            Err(Error::NonFiniteGradient { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        let (vk, vb) = unsp.to_tables();
        model.vpp_kernels = vk;
        model.vpp_base = vb;
        log.push(LogRecord {
            iter,
            joint_loglik: joint,
            q_loglik_unsp: ql_unsp,
            q_loglik_usap: ql_usap,
            top_rates: model.top_rates.clone(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        // early stopping
        if !val.is_empty() && (iter + 1) % cfg.val_cadence == 0 {
            let score = validation_score(
                &model,
                &unsp,
                val,
                cfg.val_samples,
                &root.split2(tag::VARIATIONAL, iter as u64),
            )?;
            if score > best_score {
                best_score = score;
                misses = 0;
            } else {
                misses += 1;
                if misses >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainResult { model, unsp, usap, log, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::one_hidden_model;
    use crate::variational::fixtures::{small_unsp, small_usap};

    fn draw_fixture() -> (EventSeq, HiddenEvents) {
        let x = EventSeq::new(vec![(1.5, 0), (6.0, 0), (13.0, 0)], 20.0, 1).unwrap();
        let z = HiddenEvents { layers: vec![vec![vec![1.0, 5.2]]] };
        (x, z)
    }

    #[test]
    fn joint_grad_matches_finite_differences() {
        let model = one_hidden_model(1.2, 1.7, 0.15);
        let (x, z) = draw_fixture();
        let (_, grad) = joint_grad(&model, &x, &z).unwrap();
        let mut raws = ModelRaw::from_model(&model);
        let theta = raws.flatten();
        for d in 0..theta.len() {
            let h = 1e-6 * theta[d].abs().max(1.0);
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[d] += h;
            dn[d] -= h;
            let mut mu = model.clone();
            raws.unflatten_into(&up);
            raws.install(&mut mu);
            let fu = mu.joint_loglik(&x, &z).unwrap();
            raws.unflatten_into(&dn);
            raws.install(&mut mu);
            let fl = mu.joint_loglik(&x, &z).unwrap();
            let fd = (fu - fl) / (2.0 * h);
            let rel = (grad[d] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "entry {d}: {} vs fd {fd}", grad[d]);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut adam = Adam::new(3, 0.1, 0.9, 0.999, 1e-8);
        let mut theta = vec![1.0, -2.0, 0.5];
        adam.ascend(&mut theta, &[0.0, 0.0, 0.0]);
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn top_rate_update_is_mean_count_over_window() {
        let mut model = one_hidden_model(1.0, 1.0, 0.15);
        let mut raws = ModelRaw::from_model(&model);
        let mut adam = Adam::new(raws.n_params(), 1e-9, 0.9, 0.999, 1e-8);
        let x1 = EventSeq::new(vec![(1.0, 0)], 20.0, 1).unwrap();
        let z1 = HiddenEvents { layers: vec![vec![vec![0.5, 2.0, 9.0]]] };
        let z2 = HiddenEvents { layers: vec![vec![vec![0.5, 2.0, 4.0, 6.0, 9.0]]] };
        let batch = vec![(&x1, &z1), (&x1, &z2)];
        model_grad_step(&mut model, &mut raws, &mut adam, &batch, false).unwrap();
        assert!((model.top_rates[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn model_step_moves_uphill() {
        let mut model = one_hidden_model(0.4, 3.0, 0.15);
        let mut raws = ModelRaw::from_model(&model);
        let mut adam = Adam::new(raws.n_params(), 0.05, 0.9, 0.999, 1e-8);
        let (x, z) = draw_fixture();
        let before = model.joint_loglik(&x, &z).unwrap();
        let batch = vec![(&x, &z)];
        model_grad_step(&mut model, &mut raws, &mut adam, &batch, false).unwrap();
        // top-rate MLE also changes the likelihood; both moves are ascent
        let after = model.joint_loglik(&x, &z).unwrap();
        assert!(after > before, "{after} vs {before}");
    }

    #[test]
    fn fix_k_shape_freezes_the_shape() {
        let mut model = one_hidden_model(0.4, 3.0, 0.15);
        let shape_before = model.down_kernels[0][0][0].k_shape;
        let mut raws = ModelRaw::from_model(&model);
        let mut adam = Adam::new(raws.n_params(), 0.05, 0.9, 0.999, 1e-8);
        let (x, z) = draw_fixture();
        let batch = vec![(&x, &z)];
        model_grad_step(&mut model, &mut raws, &mut adam, &batch, true).unwrap();
        assert!((model.down_kernels[0][0][0].k_shape - shape_before).abs() < 1e-12);
        assert!((model.down_kernels[0][0][0].p - 0.4).abs() > 1e-6);
    }

    #[test]
    fn variational_steps_ascend_on_frozen_draws() {
        let mut unsp = small_unsp();
        let mut usap = small_usap(vec![1, 1]);
        let (x, z) = draw_fixture();
        let batch = vec![(&x, &z)];
        let mut adam_n = Adam::new(unsp.n_params(), 0.02, 0.9, 0.999, 1e-8);
        let mut adam_a = Adam::new(usap.n_params(), 0.002, 0.9, 0.999, 1e-8);
        let mut prev_n = unsp.q_loglik(&x, &z).unwrap();
        let mut prev_a = usap.q_loglik(&x, &z).unwrap();
        let mut bad_n = 0;
        let mut bad_a = 0;
        for _ in 0..100 {
            unsp_grad_step(&mut unsp, &mut adam_n, &batch).unwrap();
            usap_grad_step(&mut usap, &mut adam_a, &batch).unwrap();
            let cur_n = unsp.q_loglik(&x, &z).unwrap();
            let cur_a = usap.q_loglik(&x, &z).unwrap();
            if cur_n < prev_n {
                bad_n += 1;
            }
            if cur_a < prev_a {
                bad_a += 1;
            }
            prev_n = cur_n;
            prev_a = cur_a;
        }
        assert!(bad_n <= 5, "unsp violations {bad_n}");
        assert!(bad_a <= 5, "usap violations {bad_a}");
    }

    #[test]
    fn unsp_base_converges_to_poisson_mle() {
        // kernels effectively zeroed by empty observations: only mu free
        let mut unsp = small_unsp();
        let x = EventSeq::new(vec![], 20.0, 1).unwrap();
        let z1 = HiddenEvents { layers: vec![vec![vec![1.0, 2.0, 3.0]]] };
        let z2 = HiddenEvents { layers: vec![vec![vec![4.0, 5.0]]] };
        let batch = vec![(&x, &z1), (&x, &z2)];
        let mut adam = Adam::new(unsp.n_params(), 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..5000 {
            unsp_grad_step(&mut unsp, &mut adam, &batch).unwrap();
        }
        let target = 5.0 / (2.0 * 20.0); // total count / (S * T)
        let got = unsp.base(1, 0);
        assert!((got - target).abs() / target < 0.01, "{got} vs {target}");
    }

    #[test]
    fn mcem_zero_iterations_returns_inits() {
        let model = one_hidden_model(1.0, 2.0, 0.15);
        let unsp = init_unsp(&model);
        let usap = small_usap(vec![1, 1]);
        let train = vec![EventSeq::new(vec![(1.0, 0)], 20.0, 1).unwrap()];
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        let out = mcem_run(model.clone(), unsp.clone(), usap.clone(), &train, &[], &cfg).unwrap();
        assert_eq!(out.model.down_kernels, model.down_kernels);
        assert_eq!(out.unsp, unsp);
        assert_eq!(out.usap, usap);
        assert!(out.log.is_empty());
    }

    #[test]
    fn mcem_is_deterministic() {
        let model = one_hidden_model(1.0, 2.0, 0.15);
        let unsp = init_unsp(&model);
        let usap = small_usap(vec![1, 1]);
        let train = vec![
            EventSeq::new(vec![(1.0, 0), (4.0, 0)], 20.0, 1).unwrap(),
            EventSeq::new(vec![(2.5, 0)], 20.0, 1).unwrap(),
        ];
        let cfg = TrainConfig {
            iterations: 5,
            burn_in: 5,
            thin: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = mcem_run(model.clone(), unsp.clone(), usap.clone(), &train, &[], &cfg).unwrap();
        let b = mcem_run(model, unsp, usap, &train, &[], &cfg).unwrap();
        let strip = |log: &[LogRecord]| -> Vec<(usize, f64, f64, f64, Vec<f64>)> {
            log.iter()
                .map(|r| {
                    (r.iter, r.joint_loglik, r.q_loglik_unsp, r.q_loglik_usap, r.top_rates.clone())
                })
                .collect()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.model.down_kernels, b.model.down_kernels);
    }

    #[test]
    fn disjoint_parameter_sets_never_cross_contaminate() {
        let mut unsp = small_unsp();
        let usap = small_usap(vec![1, 1]);
        let usap_before = usap.flatten();
        let (x, z) = draw_fixture();
        let batch = vec![(&x, &z)];
        let mut adam = Adam::new(unsp.n_params(), 0.05, 0.9, 0.999, 1e-8);
        unsp_grad_step(&mut unsp, &mut adam, &batch).unwrap();
        assert_eq!(usap.flatten(), usap_before);
    }
}
