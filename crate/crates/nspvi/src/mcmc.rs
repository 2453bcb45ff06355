//! Auxiliary-variable Markov chain over the hidden real events. Virtual
//! events drawn from the upward processes act as candidate locations; the
//! chain cycles through per-process resampling, label flips, and swaps.

use crate::error::Result;
use crate::model::{EventSeq, HiddenEvents, ModelParams};
use crate::rng::RngStream;
use crate::simulate::sample_poisson;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Real,
    Virtual,
}

#[derive(Debug, Clone, Copy)]
pub struct ChainEvent {
    pub t: f64,
    pub label: Label,
    pub id: u64,
}

/// Per-sequence MCMC state: labelled events for every hidden process plus
/// the chain's private random stream.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Observations grouped per layer-0 process.
    obs: Vec<Vec<f64>>,
    /// `procs[l-1][k]`: events of hidden process `(l, k)`, sorted by (t, id).
    procs: Vec<Vec<Vec<ChainEvent>>>,
    window: f64,
    next_id: u64,
    pub rng: RngStream,
    /// Completed move cycles, for diagnostics and speed accounting.
    pub cycles_run: u64,
}

impl ChainState {
    /// Cold chain: no hidden events yet. The first cycle's resample step
    /// populates the virtual candidates.
    pub fn new(model: &ModelParams, x: &EventSeq, rng: RngStream) -> Self {
        Self {
            obs: x.grouped(model.layer_sizes[0]),
            procs: model.layer_sizes[1..]
                .iter()
                .map(|&k| vec![Vec::new(); k])
                .collect(),
            window: x.window,
            next_id: 0,
            rng,
            cycles_run: 0,
        }
    }

    /// Replace the observation context (longer prefix of the same sequence)
    /// while keeping the hidden events, so the chain stays warm.
    pub fn set_observations(&mut self, model: &ModelParams, x: &EventSeq) {
        self.obs = x.grouped(model.layer_sizes[0]);
        self.window = x.window;
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn events(&self, layer: usize, k: usize) -> &[ChainEvent] {
        &self.procs[layer - 1][k]
    }

    fn events_with(&self, layer: usize, k: usize, label: Label) -> Vec<f64> {
        self.procs[layer - 1][k]
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.t)
            .collect()
    }

    /// Real events of a layer; layer 0 yields the observations.
    /// `exclude` drops one event id (used while scoring a pending flip).
    fn real_layer(&self, layer: usize, exclude: Option<u64>) -> Vec<Vec<f64>> {
        if layer == 0 {
            return self.obs.clone();
        }
        self.procs[layer - 1]
            .iter()
            .map(|events| {
                events
                    .iter()
                    .filter(|e| e.label == Label::Real && Some(e.id) != exclude)
                    .map(|e| e.t)
                    .collect()
            })
            .collect()
    }

    /// Current real events as a posterior draw.
    pub fn real_events(&self) -> HiddenEvents {
        HiddenEvents {
            layers: (1..=self.procs.len())
                .map(|l| {
                    (0..self.procs[l - 1].len())
                        .map(|k| self.events_with(l, k, Label::Real))
                        .collect()
                })
                .collect(),
        }
    }

    /// Total of the auxiliary-target decomposition: joint log-likelihood of
    /// (x, real z) plus the virtual processes' log-likelihood under their
    /// upward CIFs. Full recompute; the moves use incremental deltas.
    pub fn target(&self, model: &ModelParams) -> Result<f64> {
        let x = EventSeq {
            events: {
                let mut ev: Vec<(f64, usize)> = self
                    .obs
                    .iter()
                    .enumerate()
                    .flat_map(|(k, ts)| ts.iter().map(move |&t| (t, k)))
                    .collect();
                ev.sort_by(|a, b| a.0.total_cmp(&b.0));
                ev
            },
            window: self.window,
        };
        let z = self.real_events();
        let mut total = model.joint_loglik(&x, &z)?;
        for layer in 1..=self.procs.len() {
            let children = self.real_layer(layer - 1, None);
            for k in 0..self.procs[layer - 1].len() {
                let cif = model.vpp_cif_pw(layer, k, &children, self.window);
                let virt = self.events_with(layer, k, Label::Virtual);
                total += crate::cif::poisson_loglik(&virt, &cif, layer, k)?;
            }
        }
        Ok(total)
    }

    /// Redraw the virtual events of `(layer, k)` from the upward CIF given
    /// the current real events below. Gibbs step on the auxiliaries; always
    /// accepted. Real events untouched.
    pub fn resample_virtual(&mut self, model: &ModelParams, layer: usize, k: usize) -> Result<()> {
        let children = self.real_layer(layer - 1, None);
        let cif = model.vpp_cif_pw(layer, k, &children, self.window);
        let fresh = sample_poisson(&cif, &mut self.rng)?;
        let proc = &mut self.procs[layer - 1][k];
        proc.retain(|e| e.label == Label::Real);
        for t in fresh {
            proc.push(ChainEvent { t, label: Label::Virtual, id: self.next_id });
            self.next_id += 1;
        }
        proc.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id)));
        Ok(())
    }

    /// Log target change from toggling the label of event `idx` of
    /// `(layer, k)`. `-inf` signals a certain rejection.
    pub fn flip_delta(
        &self,
        model: &ModelParams,
        layer: usize,
        k: usize,
        idx: usize,
    ) -> Result<f64> {
        let ev = self.procs[layer - 1][k][idx];
        match ev.label {
            Label::Virtual => self.delta_to_real(model, layer, k, ev.t, None),
            Label::Real => Ok(-self.delta_to_real(model, layer, k, ev.t, Some(ev.id))?),
        }
    }

    /// Target change from promoting an event at `t` in `(layer, k)` from
    /// virtual to real. When scoring the reverse direction the event is
    /// already real and must be excluded from the parent sets (`exclude`).
    fn delta_to_real(
        &self,
        model: &ModelParams,
        layer: usize,
        k: usize,
        t: f64,
        exclude: Option<u64>,
    ) -> Result<f64> {
        let l = self.procs.len();
        // point terms of the flipped event itself
        let parents = if layer == l { Vec::new() } else { self.real_layer(layer + 1, None) };
        let lam_real = model.rpp_cif(layer, k, &parents, t)?;
        if lam_real <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let children_below = self.real_layer(layer - 1, None);
        let lam_virt = model.vpp_cif(layer, k, &children_below, t)?;
        let mut delta = lam_real.ln() - lam_virt.ln();

        // the event becomes a parent of layer `layer - 1`
        for kc in 0..model.layer_sizes[layer - 1] {
            let kern = &model.down_kernels[layer - 1][k][kc];
            let siblings = self.real_layer(layer, exclude);
            for &te in &child_times(&self.obs, &self.procs, layer - 1, kc, exclude) {
                let base = {
                    let mut v = if layer - 1 == 0 { model.obs_background } else { 0.0 };
                    for (i, times) in siblings.iter().enumerate() {
                        let kk = &model.down_kernels[layer - 1][i][kc];
                        for &s in times {
                            v += kk.eval(te - s)?;
                        }
                    }
                    v
                };
                delta += (base + kern.eval(te - t)?).ln() - base.ln();
            }
            delta -= kern.integral(0.0, self.window - t)?;
        }

        // the event becomes a child in the upward CIF of layer `layer + 1`
        if layer < l {
            let siblings = self.real_layer(layer, exclude);
            for ku in 0..model.layer_sizes[layer + 1] {
                let kern = &model.vpp_kernels[layer][k][ku];
                for e in &self.procs[layer][ku] {
                    if e.label != Label::Virtual {
                        continue;
                    }
                    let mut base = model.vpp_base[layer][ku];
                    for (i, times) in siblings.iter().enumerate() {
                        let kk = &model.vpp_kernels[layer][i][ku];
                        for &s in times {
                            base += kk.eval(s - e.t)?;
                        }
                    }
                    delta += (base + kern.eval(t - e.t)?).ln() - base.ln();
                }
                delta -= kern.integral(0.0, t)?;
            }
        }
        Ok(delta)
    }

    /// Metropolis flip: toggle one uniformly chosen event's label. No-op on
    /// an empty process. Returns whether a flip was accepted.
    pub fn flip_move(&mut self, model: &ModelParams, layer: usize, k: usize) -> Result<bool> {
        let n = self.procs[layer - 1][k].len();
        if n == 0 {
            return Ok(false);
        }
        let idx = self.rng.index(n);
        let delta = self.flip_delta(model, layer, k, idx)?;
        let accept = self.rng.exp1() > -delta; // ln u < delta, u in (0,1]
        if accept {
            self.toggle(layer, k, idx);
        }
        Ok(accept)
    }

    /// Metropolis swap: exchange the labels of one real and one virtual
    /// event, scored as two sequential flips. No-op unless both kinds exist.
    pub fn swap_move(&mut self, model: &ModelParams, layer: usize, k: usize) -> Result<bool> {
        let proc = &self.procs[layer - 1][k];
        let reals: Vec<usize> = indices_with(proc, Label::Real);
        let virtuals: Vec<usize> = indices_with(proc, Label::Virtual);
        if reals.is_empty() || virtuals.is_empty() {
            return Ok(false);
        }
        let a = reals[self.rng.index(reals.len())];
        let b = virtuals[self.rng.index(virtuals.len())];
        let d1 = self.flip_delta(model, layer, k, a)?;
        self.toggle(layer, k, a);
        let d2 = self.flip_delta(model, layer, k, b)?;
        let delta = d1 + d2;
        let accept = self.rng.exp1() > -delta;
        if accept {
            self.toggle(layer, k, b);
        } else {
            self.toggle(layer, k, a);
        }
        Ok(accept)
    }

    /// Toggle one event's label unconditionally, bypassing the Metropolis
    /// test. Diagnostic hook for checking `flip_delta` against `target`.
    pub fn force_toggle(&mut self, layer: usize, k: usize, idx: usize) {
        self.toggle(layer, k, idx);
    }

    fn toggle(&mut self, layer: usize, k: usize, idx: usize) {
        let ev = &mut self.procs[layer - 1][k][idx];
        ev.label = match ev.label {
            Label::Real => Label::Virtual,
            Label::Virtual => Label::Real,
        };
    }

    /// One full move cycle: for each hidden process in (layer, k) order,
    /// resample virtuals, then 3 flips, 1 swap, 3 flips, 1 swap.
    pub fn cycle(&mut self, model: &ModelParams) -> Result<()> {
        for layer in 1..=self.procs.len() {
            for k in 0..self.procs[layer - 1].len() {
                self.resample_virtual(model, layer, k)?;
                for _ in 0..3 {
                    self.flip_move(model, layer, k)?;
                }
                self.swap_move(model, layer, k)?;
                for _ in 0..3 {
                    self.flip_move(model, layer, k)?;
                }
                self.swap_move(model, layer, k)?;
            }
        }
        self.cycles_run += 1;
        Ok(())
    }

    /// Run `burn_in + thin` cycles and return the real events. The chain
    /// persists, so the next call continues from here (warm chain).
    pub fn posterior_sample(
        &mut self,
        model: &ModelParams,
        burn_in: usize,
        thin: usize,
    ) -> Result<HiddenEvents> {
        for _ in 0..burn_in + thin {
            self.cycle(model)?;
        }
        Ok(self.real_events())
    }
}

fn indices_with(proc: &[ChainEvent], label: Label) -> Vec<usize> {
    proc.iter()
        .enumerate()
        .filter(|(_, e)| e.label == label)
        .map(|(i, _)| i)
        .collect()
}

/// Real events of process `(layer, kc)`, with observations standing in for
/// layer 0.
fn child_times(
    obs: &[Vec<f64>],
    procs: &[Vec<Vec<ChainEvent>>],
    layer: usize,
    kc: usize,
    exclude: Option<u64>,
) -> Vec<f64> {
    if layer == 0 {
        obs[kc].clone()
    } else {
        procs[layer - 1][kc]
            .iter()
            .filter(|e| e.label == Label::Real && Some(e.id) != exclude)
            .map(|e| e.t)
            .collect()
    }
}
