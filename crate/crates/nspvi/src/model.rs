//! Deep Neyman-Scott model: layered Poisson processes with Weibull kernels
//! downward (real processes) and upward (virtual processes), plus exact
//! joint log-likelihood.

use serde::{Deserialize, Serialize};

use crate::cif::{poisson_loglik, Direction, KernelTerm, Piece, PiecewiseCif};
use crate::error::{Error, Result};
use crate::kernel::{WeibullKernel, RATE_FLOOR};

/// Background rate added to every observed-layer intensity.
pub const OBS_BACKGROUND: f64 = 1e-10;

/// Identifies one Poisson process in the hierarchy. Layer 0 is the observed
/// layer; `index` is 0-based within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessRef {
    pub layer: usize,
    pub index: usize,
}

/// One event with its owning process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub owner: ProcessRef,
}

/// One observed multi-type sequence on `(0, T]`. Event types are 0-based
/// internally; the JSON interface uses 1-based types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSeq {
    /// Time-sorted `(t, type)` pairs.
    pub events: Vec<(f64, usize)>,
    pub window: f64,
}

impl EventSeq {
    pub fn new(events: Vec<(f64, usize)>, window: f64, n_types: usize) -> Result<Self> {
        if !(window.is_finite() && window > 0.0) {
            return Err(Error::InvalidData(format!("window T must be positive, got {window}")));
        }
        let mut prev = 0.0;
        for &(t, k) in &events {
            if !t.is_finite() || t <= 0.0 || t > window {
                return Err(Error::InvalidData(format!("event time {t} outside (0, {window}]")));
            }
            if t < prev {
                return Err(Error::InvalidData(format!("events not sorted at t={t}")));
            }
            if k >= n_types {
                return Err(Error::InvalidData(format!(
                    "event type {k} out of range (K_0 = {n_types})"
                )));
            }
            prev = t;
        }
        Ok(Self { events, window })
    }

    /// Event times grouped per observed process.
    pub fn grouped(&self, n_types: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); n_types];
        for &(t, k) in &self.events {
            out[k].push(t);
        }
        out
    }

    /// Prefix containing the first `n` events, same window.
    pub fn prefix(&self, n: usize) -> EventSeq {
        EventSeq { events: self.events[..n].to_vec(), window: self.window }
    }
}

/// Hidden events for layers `1..=L`: `layers[l-1][k]` is the sorted time
/// list of process `(l, k)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HiddenEvents {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl HiddenEvents {
    pub fn empty(layer_sizes: &[usize]) -> Self {
        Self {
            layers: layer_sizes[1..].iter().map(|&k| vec![Vec::new(); k]).collect(),
        }
    }

    pub fn layer(&self, layer: usize) -> &[Vec<f64>] {
        &self.layers[layer - 1]
    }

    /// Total hidden event count across all processes.
    pub fn count(&self) -> usize {
        self.layers.iter().flatten().map(Vec::len).sum()
    }
}

/// Full DNSP parameterization with `L` hidden layers.
///
/// Kernel tables are fully bipartite between adjacent layers:
/// `down_kernels[l][i][k]` connects `(l+1, i) -> (l, k)` for `l in 0..L`,
/// `vpp_kernels[l-1][i][k]` connects `(l-1, i) -> (l, k)` for `l in 1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `K_0..K_L`, length `L + 1`.
    pub layer_sizes: Vec<usize>,
    pub down_kernels: Vec<Vec<Vec<WeibullKernel>>>,
    /// Top-layer constant rates, length `K_L`.
    pub top_rates: Vec<f64>,
    pub vpp_kernels: Vec<Vec<Vec<WeibullKernel>>>,
    /// Virtual base rates `[l-1][k]`.
    pub vpp_base: Vec<Vec<f64>>,
    pub obs_background: f64,
}

impl ModelParams {
    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.hidden_layers();
        if l == 0 {
            return Err(Error::InvalidParameter("need at least one hidden layer".into()));
        }
        if self.down_kernels.len() != l
            || self.vpp_kernels.len() != l
            || self.vpp_base.len() != l
            || self.top_rates.len() != self.layer_sizes[l]
        {
            return Err(Error::InvalidParameter("kernel table shape mismatch".into()));
        }
        for ell in 0..l {
            if self.down_kernels[ell].len() != self.layer_sizes[ell + 1]
                || self.down_kernels[ell].iter().any(|row| row.len() != self.layer_sizes[ell])
            {
                return Err(Error::InvalidParameter(format!(
                    "down_kernels[{ell}] not fully bipartite"
                )));
            }
            if self.vpp_kernels[ell].len() != self.layer_sizes[ell]
                || self.vpp_kernels[ell].iter().any(|row| row.len() != self.layer_sizes[ell + 1])
                || self.vpp_base[ell].len() != self.layer_sizes[ell + 1]
            {
                return Err(Error::InvalidParameter(format!(
                    "vpp tables for layer {} malformed",
                    ell + 1
                )));
            }
        }
        if self.top_rates.iter().any(|&r| !(r >= RATE_FLOOR)) {
            return Err(Error::InvalidParameter("top rates must be >= the rate floor".into()));
        }
        if self.vpp_base.iter().flatten().any(|&r| !(r >= RATE_FLOOR)) {
            return Err(Error::InvalidParameter("vpp base rates must be >= the rate floor".into()));
        }
        Ok(())
    }

    /// Real-process CIF value at `t`. `parents[i]` holds the events of
    /// process `(layer+1, i)`; ignored (may be empty) at the top layer.
    pub fn rpp_cif(&self, layer: usize, index: usize, parents: &[Vec<f64>], t: f64) -> Result<f64> {
        let l = self.hidden_layers();
        if layer == l {
            return Ok(self.top_rates[index]);
        }
        let mut v = if layer == 0 { self.obs_background } else { 0.0 };
        for (i, times) in parents.iter().enumerate() {
            let kern = &self.down_kernels[layer][i][index];
            for &s in times {
                v += kern.eval(t - s)?;
            }
        }
        Ok(v)
    }

    /// Virtual-process CIF value at `t` for hidden process `(layer, index)`,
    /// given the real events of layer `layer - 1` (layer 0 = observations).
    pub fn vpp_cif(&self, layer: usize, index: usize, children: &[Vec<f64>], t: f64) -> Result<f64> {
        let mut v = self.vpp_base[layer - 1][index];
        for (i, times) in children.iter().enumerate() {
            let kern = &self.vpp_kernels[layer - 1][i][index];
            for &s in times {
                v += kern.eval(s - t)?;
            }
        }
        Ok(v)
    }

    /// Piecewise form of the real-process CIF on `(0, window]`.
    pub fn rpp_cif_pw(
        &self,
        layer: usize,
        index: usize,
        parents: &[Vec<f64>],
        window: f64,
    ) -> PiecewiseCif {
        let l = self.hidden_layers();
        if layer == l {
            return PiecewiseCif::uniform(window, Piece { base: self.top_rates[index], terms: vec![] });
        }
        let base = if layer == 0 { self.obs_background } else { 0.0 };
        let mut terms = Vec::new();
        for (i, times) in parents.iter().enumerate() {
            let kern = self.down_kernels[layer][i][index];
            for &s in times {
                terms.push(KernelTerm { kernel: kern, anchor: s, dir: Direction::Forward });
            }
        }
        build_piecewise(window, base, terms)
    }

    /// Piecewise form of the virtual-process CIF on `(0, window]`.
    pub fn vpp_cif_pw(
        &self,
        layer: usize,
        index: usize,
        children: &[Vec<f64>],
        window: f64,
    ) -> PiecewiseCif {
        let base = self.vpp_base[layer - 1][index];
        let mut terms = Vec::new();
        for (i, times) in children.iter().enumerate() {
            let kern = self.vpp_kernels[layer - 1][i][index];
            for &s in times {
                terms.push(KernelTerm { kernel: kern, anchor: s, dir: Direction::Backward });
            }
        }
        build_piecewise(window, base, terms)
    }

    /// Joint log-likelihood `log p(x, z)`: sum of Poisson log-likelihoods of
    /// every layer under its real-process CIF.
    pub fn joint_loglik(&self, x: &EventSeq, z: &HiddenEvents) -> Result<f64> {
        let l = self.hidden_layers();
        let window = x.window;
        let mut total = 0.0;
        for layer in 0..=l {
            let events_of = |k: usize| -> Vec<f64> {
                if layer == 0 {
                    x.grouped(self.layer_sizes[0]).swap_remove(k)
                } else {
                    z.layer(layer)[k].clone()
                }
            };
            let empty: Vec<Vec<f64>> = Vec::new();
            let parents: &[Vec<f64>] = if layer == l { &empty } else { z.layer(layer + 1) };
            for k in 0..self.layer_sizes[layer] {
                let cif = self.rpp_cif_pw(layer, k, parents, window);
                total += poisson_loglik(&events_of(k), &cif, layer, k)?;
            }
        }
        Ok(total)
    }
}

/// Assemble a piecewise CIF with breakpoints at the kernel anchors; each
/// piece keeps only the terms active on it.
pub fn build_piecewise(window: f64, base: f64, terms: Vec<KernelTerm>) -> PiecewiseCif {
    let anchors: Vec<f64> = terms.iter().map(|t| t.anchor).collect();
    PiecewiseCif::from_pieces(window, &anchors, |lo, hi| Piece {
        base,
        terms: terms
            .iter()
            .filter(|term| match term.dir {
                Direction::Forward => term.anchor <= lo,
                Direction::Backward => term.anchor >= hi,
            })
            .cloned()
            .collect(),
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::one_hidden_model;
    use super::*;
    use crate::cif::poisson_loglik;

    #[test]
    fn top_layer_is_constant() {
        let m = one_hidden_model(1.0, 1.0, 0.15);
        for &t in &[0.1, 5.0, 19.9] {
            assert_eq!(m.rpp_cif(1, 0, &[], t).unwrap(), 0.15);
        }
    }

    #[test]
    fn hidden_layer_empty_parents_is_zero() {
        let mut m = one_hidden_model(1.0, 1.0, 0.15);
        m.layer_sizes = vec![1, 1, 1];
        m.down_kernels.push(vec![vec![WeibullKernel::new(1.0, 1.0, 1.0).unwrap()]]);
        m.vpp_kernels.push(vec![vec![WeibullKernel::new(1.0, 1.0, 1.0).unwrap()]]);
        m.vpp_base.push(vec![0.1]);
        assert_eq!(m.rpp_cif(1, 0, &[vec![]], 3.0).unwrap(), 0.0);
    }

    #[test]
    fn single_parent_exponential_value() {
        let m = one_hidden_model(1.0, 1.0, 0.15);
        let v = m.rpp_cif(0, 0, &[vec![1.0]], 2.0).unwrap();
        assert!((v - ((-1.0f64).exp() + OBS_BACKGROUND)).abs() < 1e-15);
    }

    #[test]
    fn layer0_always_has_background() {
        let m = one_hidden_model(1.0, 1.0, 0.15);
        assert_eq!(m.rpp_cif(0, 0, &[vec![]], 5.0).unwrap(), OBS_BACKGROUND);
        let pw = m.rpp_cif_pw(0, 0, &[vec![]], 20.0);
        assert_eq!(pw.eval(5.0).unwrap(), OBS_BACKGROUND);
    }

    #[test]
    fn vpp_cif_values() {
        let m = one_hidden_model(1.0, 1.0, 0.15);
        // no children -> base only
        assert!((m.vpp_cif(1, 0, &[vec![]], 2.0).unwrap() - 0.1).abs() < 1e-15);
        // child at 3, t=2 -> 0.1 + e^-1
        let v = m.vpp_cif(1, 0, &[vec![3.0]], 2.0).unwrap();
        assert!((v - (0.1 + (-1.0f64).exp())).abs() < 1e-12);
        // t past the child -> base only
        assert!((m.vpp_cif(1, 0, &[vec![3.0]], 4.0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn cif_additive_in_parents() {
        let m = one_hidden_model(0.7, 2.0, 0.15);
        let a = vec![vec![0.5, 1.2]];
        let b = vec![vec![2.0]];
        let both = vec![vec![0.5, 1.2, 2.0]];
        let t = 3.1;
        let va = m.rpp_cif(0, 0, &a, t).unwrap();
        let vb = m.rpp_cif(0, 0, &b, t).unwrap();
        let vboth = m.rpp_cif(0, 0, &both, t).unwrap();
        assert!((vboth - (va + vb - OBS_BACKGROUND)).abs() < 1e-14);
    }

    #[test]
    fn joint_loglik_empty_case() {
        let m = one_hidden_model(1.0, 1.0, 0.5);
        let x = EventSeq::new(vec![], 20.0, 1).unwrap();
        let z = HiddenEvents::empty(&m.layer_sizes);
        let ll = m.joint_loglik(&x, &z).unwrap();
        let expect = -0.5 * 20.0 - OBS_BACKGROUND * 20.0;
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn joint_loglik_recomposes_from_layer_terms() {
        let m = one_hidden_model(1.5, 2.0, 0.5);
        let x = EventSeq::new(vec![(2.5, 0)], 20.0, 1).unwrap();
        let z = HiddenEvents { layers: vec![vec![vec![1.0]]] };
        let ll = m.joint_loglik(&x, &z).unwrap();
        let obs_cif = m.rpp_cif_pw(0, 0, z.layer(1), 20.0);
        let top_cif = m.rpp_cif_pw(1, 0, &[], 20.0);
        let expect = poisson_loglik(&[2.5], &obs_cif, 0, 0).unwrap()
            + poisson_loglik(&[1.0], &top_cif, 1, 0).unwrap();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn loglik_monotone_in_point_intensity() {
        // moving the observed event to a lower-intensity spot lowers loglik
        let m = one_hidden_model(1.0, 1.0, 0.5);
        let z = HiddenEvents { layers: vec![vec![vec![1.0]]] };
        let near = EventSeq::new(vec![(1.5, 0)], 20.0, 1).unwrap();
        let far = EventSeq::new(vec![(15.0, 0)], 20.0, 1).unwrap();
        assert!(m.joint_loglik(&near, &z).unwrap() > m.joint_loglik(&far, &z).unwrap());
    }

    #[test]
    fn pw_and_direct_agree() {
        let m = one_hidden_model(0.9, 1.7, 0.3);
        let parents = vec![vec![0.7, 2.3, 5.1]];
        let pw = m.rpp_cif_pw(0, 0, &parents, 10.0);
        for &t in &[0.1, 0.9, 2.4, 6.0, 9.99] {
            let a = pw.eval(t).unwrap();
            let b = m.rpp_cif(0, 0, &parents, t).unwrap();
            assert!((a - b).abs() < 1e-13, "t={t}: {a} vs {b}");
        }
        let children = vec![vec![1.0, 4.0]];
        let pw = m.vpp_cif_pw(1, 0, &children, 10.0);
        for &t in &[0.2, 1.5, 3.9, 8.0] {
            let a = pw.eval(t).unwrap();
            let b = m.vpp_cif(1, 0, &children, t).unwrap();
            assert!((a - b).abs() < 1e-13, "t={t}: {a} vs {b}");
        }
    }
}
