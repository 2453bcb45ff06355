//! Inhomogeneous Poisson sampling by inversion of the cumulative intensity
//! (thinning kept as a distribution cross-check), and the top-down DNSP
//! generative process.

use crate::cif::PiecewiseCif;
use crate::error::{Error, Result};
use crate::model::{EventSeq, HiddenEvents, ModelParams};
use crate::rng::RngStream;

const BISECT_TOL: f64 = 1e-10;
const BISECT_MAX_ITERS: usize = 200;

/// Sample a Poisson process with intensity `cif` on `(0, T]` by inversion:
/// each inter-event cumulative mass is a unit-exponential draw.
pub fn sample_poisson(cif: &PiecewiseCif, rng: &mut RngStream) -> Result<Vec<f64>> {
    sample_poisson_on(cif, 0.0, cif.window(), rng)
}

/// Inversion sampling restricted to `(from, to] ⊆ (0, T]`.
pub fn sample_poisson_on(
    cif: &PiecewiseCif,
    from: f64,
    to: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut events = Vec::new();
    let mut target = rng.exp1();
    for (lo, hi, piece) in cif.pieces() {
        let lo = lo.max(from);
        let hi = hi.min(to);
        if lo >= hi {
            continue;
        }
        let mut cursor = lo;
        loop {
            let remaining = piece.integral(cursor, hi)?;
            if target > remaining {
                target -= remaining;
                break;
            }
            let t = if piece.terms.is_empty() {
                // constant piece: closed-form inverse
                cursor + target / piece.base
            } else {
                invert_within_piece(piece, cursor, hi, target)?
            };
            events.push(t);
            cursor = t;
            target = rng.exp1();
        }
    }
    Ok(events)
}

/// Solve `∫_cursor^t piece = target` for `t` in `(cursor, hi]` by bracketed
/// bisection. The cumulative is non-decreasing, so the bracket is valid.
fn invert_within_piece(
    piece: &crate::cif::Piece,
    cursor: f64,
    hi: f64,
    target: f64,
) -> Result<f64> {
    let mut a = cursor;
    let mut b = hi;
    for _ in 0..BISECT_MAX_ITERS {
        let mid = 0.5 * (a + b);
        if b - a < BISECT_TOL {
            return Ok(mid);
        }
        if piece.integral(cursor, mid)? < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Err(Error::BisectionDiverged { max_iters: BISECT_MAX_ITERS })
}

/// Ogata-style thinning under a dominating constant rate. Test oracle for
/// `sample_poisson`.
pub fn sample_thinning(
    cif: &PiecewiseCif,
    bound: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let window = cif.window();
    let mut events = Vec::new();
    if bound <= 0.0 {
        return Ok(events);
    }
    let mut t = 0.0;
    loop {
        t += rng.exp1() / bound;
        if t > window {
            break;
        }
        let lam = cif.eval(t)?;
        if lam > bound * (1.0 + 1e-12) {
            return Err(Error::DominationViolated { t, value: lam, bound });
        }
        if rng.uniform() <= lam / bound {
            events.push(t);
        }
    }
    Ok(events)
}

/// Run the DNSP generative process: constant-rate top layer, then each lower
/// layer from its real-process CIF given the sampled parents, down to the
/// observations. Returns the observed sequence and all hidden events.
pub fn generate_dnsp(
    model: &ModelParams,
    window: f64,
    rng: &mut RngStream,
) -> Result<(EventSeq, HiddenEvents)> {
    let l = model.hidden_layers();
    let mut hidden = HiddenEvents::empty(&model.layer_sizes);
    for layer in (1..=l).rev() {
        let parents: Vec<Vec<f64>> = if layer == l {
            Vec::new()
        } else {
            hidden.layer(layer + 1).to_vec()
        };
        for k in 0..model.layer_sizes[layer] {
            let cif = model.rpp_cif_pw(layer, k, &parents, window);
            hidden.layers[layer - 1][k] = sample_poisson(&cif, rng)?;
        }
    }
    let parents = hidden.layer(1).to_vec();
    let mut observed: Vec<(f64, usize)> = Vec::new();
    for k in 0..model.layer_sizes[0] {
        let cif = model.rpp_cif_pw(0, k, &parents, window);
        for t in sample_poisson(&cif, rng)? {
            observed.push((t, k));
        }
    }
    observed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok((EventSeq { events: observed, window }, hidden))
}
