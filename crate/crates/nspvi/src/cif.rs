//! Piecewise conditional intensity functions: a constant part plus Weibull
//! kernel terms per piece, with closed-form cumulative intensity.

use crate::error::{Error, Result};
use crate::kernel::WeibullKernel;

/// Orientation of a kernel term relative to its anchor event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `phi(t - anchor)`: fires after the anchor (downward/generative).
    Forward,
    /// `phi(anchor - t)`: fires before the anchor (upward/posterior).
    Backward,
}

#[derive(Debug, Clone)]
pub struct KernelTerm {
    pub kernel: WeibullKernel,
    pub anchor: f64,
    pub dir: Direction,
}

impl KernelTerm {
    pub fn eval(&self, t: f64) -> Result<f64> {
        match self.dir {
            Direction::Forward => self.kernel.eval(t - self.anchor),
            Direction::Backward => self.kernel.eval(self.anchor - t),
        }
    }

    /// Integral of the term over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        match self.dir {
            Direction::Forward => self.kernel.integral(a - self.anchor, b - self.anchor),
            Direction::Backward => self.kernel.integral(self.anchor - b, self.anchor - a),
        }
    }
}

/// One piece of a piecewise intensity: constant part plus active kernel terms.
#[derive(Debug, Clone, Default)]
pub struct Piece {
    pub base: f64,
    pub terms: Vec<KernelTerm>,
}

impl Piece {
    pub fn eval(&self, t: f64) -> Result<f64> {
        let mut v = self.base;
        for term in &self.terms {
            v += term.eval(t)?;
        }
        Ok(v)
    }

    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        let mut v = self.base * (b - a);
        for term in &self.terms {
            v += term.integral(a, b)?;
        }
        Ok(v)
    }
}

/// Intensity on `(0, T]` split at breakpoints; piece `i` covers
/// `(breaks[i], breaks[i+1]]`.
#[derive(Debug, Clone)]
pub struct PiecewiseCif {
    breaks: Vec<f64>,
    pieces: Vec<Piece>,
}

impl PiecewiseCif {
    /// Build from breakpoints interior to `(0, T)` and a piece factory called
    /// with each piece's `(lo, hi]` bounds.
    pub fn from_pieces(
        window: f64,
        interior_breaks: &[f64],
        mut piece_for: impl FnMut(f64, f64) -> Piece,
    ) -> Self {
        let mut breaks = Vec::with_capacity(interior_breaks.len() + 2);
        breaks.push(0.0);
        for &b in interior_breaks {
            if b > 0.0 && b < window {
                breaks.push(b);
            }
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        breaks.push(window);
        let pieces = breaks
            .windows(2)
            .map(|w| piece_for(w[0], w[1]))
            .collect();
        Self { breaks, pieces }
    }

    /// Single piece covering all of `(0, T]`.
    pub fn uniform(window: f64, piece: Piece) -> Self {
        Self {
            breaks: vec![0.0, window],
            pieces: vec![piece],
        }
    }

    pub fn window(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, &Piece)> {
        self.breaks
            .windows(2)
            .zip(&self.pieces)
            .map(|(w, p)| (w[0], w[1], p))
    }

    fn piece_index(&self, t: f64) -> usize {
        // piece i covers (breaks[i], breaks[i+1]]
        match self.breaks.binary_search_by(|b| b.total_cmp(&t)) {
            Ok(i) => i.saturating_sub(1).min(self.pieces.len() - 1),
            Err(i) => i.saturating_sub(1).min(self.pieces.len() - 1),
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        self.pieces[self.piece_index(t)].eval(t)
    }

    /// Integral over `[a, b] ∩ (0, T]`.
    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        if a > b {
            return Err(Error::ReversedBounds { a, b });
        }
        let a = a.max(0.0);
        let b = b.min(self.window());
        if a >= b {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (lo, hi, piece) in self.pieces() {
            let x = a.max(lo);
            let y = b.min(hi);
            if x < y {
                total += piece.integral(x, y)?;
            }
        }
        Ok(total)
    }

    pub fn total_integral(&self) -> Result<f64> {
        self.integral(0.0, self.window())
    }
}

/// Poisson-process log-likelihood of sorted event times under `cif` on
/// `(0, T]`: sum of log intensities minus the exact integrated intensity.
///
/// `layer`/`index` only label the error when an event sits at zero intensity.
pub fn poisson_loglik(
    events: &[f64],
    cif: &PiecewiseCif,
    layer: usize,
    index: usize,
) -> Result<f64> {
    let mut ll = 0.0;
    for &t in events {
        let lam = cif.eval(t)?;
        if lam <= 0.0 {
            return Err(Error::LogOfZero { t, layer, index });
        }
        ll += lam.ln();
    }
    ll -= cif.total_integral()?;
    Ok(ll)
}
