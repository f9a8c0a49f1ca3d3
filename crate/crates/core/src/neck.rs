//! Segment energies along a neck, three-circle verdicts, the ladder bound,
//! decay-rate fits and the Pohozaev gap.

use crate::cylgrid::{integrate, GridField, Region};
use crate::error::{LabError, Result};
use crate::geometry::{frame_gap, FundamentalForms, GaussMapField};
use crate::par;

/// Per-segment energies on `Q_i = [t_start + (i-1)L, t_start + iL] x S^1`,
/// `i = 1..=k`. Vectors are indexed from 0 (entry 0 is `Q_1`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentProfile {
    pub l: f64,
    pub t_start: f64,
    pub phi_a: Vec<f64>,
    pub phi_h: Vec<f64>,
    /// `phi_h / phi_a`, `NaN` where `phi_a = 0`.
    pub ratio_h_over_a: Vec<f64>,
    /// `sup |grad v|` over the stations of each segment.
    pub sup_grad_v: Vec<f64>,
}

impl SegmentProfile {
    pub fn segments(&self) -> usize {
        self.phi_a.len()
    }

    pub fn values(&self, which: Energy) -> &[f64] {
        match which {
            Energy::A => &self.phi_a,
            Energy::H => &self.phi_h,
        }
    }

    /// Profile of a synthetic sequence (`phi_h` set to zero).
    pub fn synthetic(l: f64, phi: Vec<f64>) -> Result<Self> {
        if !(l > 0.0) || phi.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(LabError::Parameter(
                "synthetic profile needs L > 0 and finite nonnegative values".into(),
            ));
        }
        let k = phi.len();
        Ok(Self {
            l,
            t_start: 0.0,
            ratio_h_over_a: phi.iter().map(|&a| if a > 0.0 { 0.0 } else { f64::NAN }).collect(),
            phi_a: phi,
            phi_h: vec![0.0; k],
            sup_grad_v: vec![0.0; k],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Energy {
    /// `int |A|^2 dV`
    A,
    /// `int |H|^2 dV`
    H,
}

/// Quadrature of `|A|^2 dV` and `|H|^2 dV` over `k` consecutive segments of
/// length `l` starting at `t_start`. Segment ends must be grid stations.
pub fn segment_energies(forms: &FundamentalForms, l: f64, k: usize, t_start: f64) -> Result<SegmentProfile> {
    if !(l > 0.0) || k == 0 {
        return Err(LabError::Parameter(format!("need L > 0 and k >= 1 (L = {l}, k = {k})")));
    }
    let grid = forms.grid();
    let ends: Vec<usize> = (0..=k)
        .map(|i| grid.station_of(t_start + i as f64 * l))
        .collect::<Result<_>>()
        .map_err(|_| {
            LabError::Domain(format!(
                "segments [{t_start}, {}] do not fit the grid [{}, {}] on stations",
                t_start + k as f64 * l,
                grid.t_min(),
                grid.t_max()
            ))
        })?;
    if ends.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::Domain(format!("segment length {l} is below the grid spacing")));
    }
    let dv = forms.area_density();
    let h2 = forms.h_norm2();
    let grad_v = GridField::from_indices(grid, 1, |i, j, out| {
        let vt = forms.u_t.get(i, j, 0) + forms.winding as f64;
        let vth = forms.u_theta.get(i, j, 0);
        out[0] = vt.hypot(vth);
    });
    let band = |density: &GridField, s: usize| {
        integrate(
            density,
            Region::WeightedBand {
                weight: &dv,
                first: ends[s],
                last: ends[s + 1],
            },
        )
    };
    let mut phi_a = Vec::with_capacity(k);
    let mut phi_h = Vec::with_capacity(k);
    let mut sup_grad_v = Vec::with_capacity(k);
    for s in 0..k {
        phi_a.push(band(&forms.norm_a2, s)?.max(0.0));
        phi_h.push(band(&h2, s)?.max(0.0));
        sup_grad_v.push(grad_v.max_abs_in(ends[s]..ends[s + 1] + 1));
    }
    let ratio_h_over_a = phi_a
        .iter()
        .zip(&phi_h)
        .map(|(&a, &h)| if a > 0.0 { h / a } else { f64::NAN })
        .collect();
    Ok(SegmentProfile {
        l,
        t_start,
        phi_a,
        phi_h,
        ratio_h_over_a,
        sup_grad_v,
    })
}

/// Three-circle verdict at one interior segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentVerdict {
    /// 1-based segment index.
    pub index: usize,
    pub holds: bool,
    /// `e^{-qL}(Phi_{i-1} + Phi_{i+1}) - Phi_i`.
    pub margin: f64,
}

fn verdicts_of(phi: &[f64], l: f64, q: f64) -> Vec<SegmentVerdict> {
    let w = (-q * l).exp();
    (1..phi.len().saturating_sub(1))
        .map(|s| {
            let margin = w * (phi[s - 1] + phi[s + 1]) - phi[s];
            SegmentVerdict {
                index: s + 1,
                holds: margin >= 0.0,
                margin,
            }
        })
        .collect()
}

/// `Phi_i <= e^{-qL}(Phi_{i-1} + Phi_{i+1})` for every interior segment.
pub fn three_circle_verdict(profile: &SegmentProfile, which: Energy, q: f64) -> Result<Vec<SegmentVerdict>> {
    if profile.segments() < 3 {
        return Err(LabError::Parameter(format!(
            "three-circle verdicts need at least 3 segments, got {}",
            profile.segments()
        )));
    }
    Ok(verdicts_of(profile.values(which), profile.l, q))
}

/// Smallest `i0` such that every verdict with index `> i0` holds, or `None`
/// when the last interior verdict fails.
pub fn first_stable_index(verdicts: &[SegmentVerdict]) -> Option<usize> {
    match verdicts.iter().rposition(|v| !v.holds) {
        None => Some(verdicts.first().map_or(0, |v| v.index - 1)),
        Some(p) if p + 1 < verdicts.len() => Some(verdicts[p].index),
        Some(_) => None,
    }
}

/// Direction in which the energy grows by at least `e^{q'L}` from segment `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Escalation {
    Left,
    Right,
    /// `Phi_i = 0`.
    Flat,
}

/// Two-sided decay bound
/// `Phi_i <= C (e^{-(i-1)q'L} Phi_1 + e^{-(k-i)q'L} Phi_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LadderBound {
    pub q_prime: f64,
    /// Constant guaranteed by the comparison argument.
    pub c: f64,
    /// Smallest constant that works for this sequence.
    pub c_observed: f64,
    /// Right-hand side with `C = c`, per segment.
    pub bound: Vec<f64>,
    /// Escalation direction at each interior segment `2..k-1`.
    pub escalation: Vec<Escalation>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LadderOutcome {
    Bound(LadderBound),
    /// First interior segment (1-based) where the three-circle step fails.
    Counterexample(usize),
}

/// Turn per-segment three-circle inequalities at rate `q` into the two-sided
/// decay bound at rate `q' < q`. Requires `e^{-(q-q')L} < 1/2`.
///
/// With `psi_i = e^{-(i-1)q'L} Phi_1 + e^{-(k-i)q'L} Phi_k` one has
/// `e^{-qL}(psi_{i-1} + psi_{i+1}) <= 2 e^{-(q-q')L} psi_i < psi_i`, so
/// `Phi - psi` cannot have a positive interior maximum and `C = 1`.
pub fn ladder_decay(profile: &SegmentProfile, which: Energy, q: f64, q_prime: f64) -> Result<LadderOutcome> {
    let l = profile.l;
    if !(q_prime > 0.0 && q_prime < q) {
        return Err(LabError::Parameter(format!("need 0 < q' < q (q = {q}, q' = {q_prime})")));
    }
    if (-(q - q_prime) * l).exp() >= 0.5 {
        return Err(LabError::Parameter(format!(
            "e^(-(q - q')L) = {} is not below 1/2",
            (-(q - q_prime) * l).exp()
        )));
    }
    let verdicts = three_circle_verdict(profile, which, q)?;
    if let Some(v) = verdicts.iter().find(|v| !v.holds) {
        return Ok(LadderOutcome::Counterexample(v.index));
    }
    let phi = profile.values(which);
    let k = phi.len();
    let up = (q_prime * l).exp();
    let escalation = (1..k - 1)
        .map(|s| {
            if phi[s] == 0.0 {
                Escalation::Flat
            } else if phi[s - 1] >= up * phi[s] {
                Escalation::Left
            } else {
                debug_assert!(phi[s + 1] >= up * phi[s] * (1.0 - 1e-12));
                Escalation::Right
            }
        })
        .collect();
    let psi: Vec<f64> = (0..k)
        .map(|s| {
            (-(s as f64) * q_prime * l).exp() * phi[0] + (-((k - 1 - s) as f64) * q_prime * l).exp() * phi[k - 1]
        })
        .collect();
    let c = 1.0;
    let c_observed = phi
        .iter()
        .zip(&psi)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, s)| p / s)
        .fold(0.0, f64::max);
    // Post-hoc check of the bound on the input (rounding slack only).
    if let Some(s) = (0..k).find(|&s| phi[s] > c * psi[s] * (1.0 + 1e-12)) {
        return Err(LabError::Fit(format!(
            "ladder bound violated at segment {}: {:e} > {:e}",
            s + 1,
            phi[s],
            c * psi[s]
        )));
    }
    Ok(LadderOutcome::Bound(LadderBound {
        q_prime,
        c,
        c_observed,
        bound: psi.iter().map(|s| c * s).collect(),
        escalation,
    }))
}

/// Fit of `Phi_i ~ C_left e^{-q i L} + C_right e^{-q (k-i) L}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayFit {
    pub q: f64,
    pub c_left: f64,
    pub c_right: f64,
    /// RMS of `ln Phi_i - ln model_i` over the window.
    pub rms_log_residual: f64,
    /// 1-based inclusive segment range.
    pub window: (usize, usize),
}

/// Grid step of the rate search.
pub const DECAY_Q_STEP: f64 = 1e-3;

/// Nonnegative least squares in two unknowns; returns `(x, y, sse)`.
fn nnls2(p: &[f64], r: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let sse = |a: f64, b: f64| {
        p.iter()
            .zip(r)
            .zip(y)
            .map(|((pi, ri), yi)| (a * pi + b * ri - yi).powi(2))
            .sum::<f64>()
    };
    let d = |x: &[f64], z: &[f64]| x.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    let (pp, rr, pr, py, ry) = (d(p, p), d(r, r), d(p, r), d(p, y), d(r, y));
    let mut best = (0.0, 0.0, sse(0.0, 0.0));
    let mut consider = |a: f64, b: f64| {
        if a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite() {
            let e = sse(a, b);
            if e < best.2 {
                best = (a, b, e);
            }
        }
    };
    let det = pp * rr - pr * pr;
    if det > 1e-14 * pp * rr {
        consider((py * rr - ry * pr) / det, (ry * pp - py * pr) / det);
    }
    if pp > 0.0 {
        consider(py / pp, 0.0);
    }
    if rr > 0.0 {
        consider(0.0, ry / rr);
    }
    best
}

/// Grid search over `q in (0, 2]` in steps of [`DECAY_Q_STEP`], with a
/// nonnegative linear fit of `(C_left, C_right)` at each `q`. `window` is a
/// 1-based inclusive segment range.
pub fn decay_fit(profile: &SegmentProfile, which: Energy, window: (usize, usize)) -> Result<DecayFit> {
    let phi = profile.values(which);
    let k = phi.len();
    let (lo, hi) = window;
    if lo == 0 || hi > k || hi < lo + 4 {
        return Err(LabError::Parameter(format!(
            "window {lo}..={hi} must hold at least 5 of the {k} segments"
        )));
    }
    let idx: Vec<usize> = (lo..=hi).collect();
    let y: Vec<f64> = idx.iter().map(|&i| phi[i - 1]).collect();
    if y.iter().filter(|v| **v > 0.0).count() < 5 {
        return Err(LabError::Fit(format!(
            "window {lo}..={hi} has fewer than 5 segments with positive energy"
        )));
    }
    let l = profile.l;
    let steps = (2.0 / DECAY_Q_STEP).round() as usize;
    let fits = par::map_range(steps, |s| {
        let q = (s + 1) as f64 * DECAY_Q_STEP;
        let p: Vec<f64> = idx.iter().map(|&i| (-q * i as f64 * l).exp()).collect();
        let r: Vec<f64> = idx.iter().map(|&i| (-q * (k - i) as f64 * l).exp()).collect();
        let (a, b, e) = nnls2(&p, &r, &y);
        (q, a, b, e)
    });
    let (q, c_left, c_right, _) = fits
        .into_iter()
        .fold((f64::NAN, 0.0, 0.0, f64::INFINITY), |best, f| if f.3 < best.3 { f } else { best });
    let logs: Vec<f64> = idx
        .iter()
        .zip(&y)
        .filter(|(_, v)| **v > 0.0)
        .map(|(&i, v)| {
            let model = c_left * (-q * i as f64 * l).exp() + c_right * (-q * (k - i) as f64 * l).exp();
            (v.ln() - model.ln()).powi(2)
        })
        .collect();
    let rms_log_residual = (logs.iter().sum::<f64>() / logs.len() as f64).sqrt();
    if !q.is_finite() || !rms_log_residual.is_finite() {
        return Err(LabError::Fit("decay model does not fit the window".into()));
    }
    Ok(DecayFit {
        q,
        c_left,
        c_right,
        rms_log_residual,
        window,
    })
}

/// Radial-minus-tangential Gauss map energy against `e^{2u}|A||H|`.
#[derive(Clone, Debug)]
pub struct PohozaevGap {
    /// `|d_t N|^2 - |d_theta N|^2`
    pub gap: GridField,
    /// `e^{2u} |A| |H|`
    pub bound: GridField,
    /// Largest `|gap| / bound` where `bound > 1e-14`; `None` if nowhere.
    pub max_ratio: Option<f64>,
    /// Largest `|gap - e^{-2u} sum(|A_tt|^2 - |A_thth|^2)|`.
    pub identity_residual: f64,
}

pub fn pohozaev_gap(forms: &FundamentalForms, gmap: &GaussMapField) -> PohozaevGap {
    let grid = forms.grid();
    let gap = gmap.radial_minus_tangential();
    let bound = GridField::from_indices(grid, 1, |i, j, out| {
        let h = forms.h.at(i, j);
        let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        out[0] = (2.0 * forms.u.get(i, j, 0)).exp() * forms.norm_a2.get(i, j, 0).sqrt() * hn;
    });
    let max_ratio = gap
        .values()
        .iter()
        .zip(bound.values())
        .filter(|(_, b)| **b > 1e-14)
        .map(|(g, b)| g.abs() / b)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let identity_residual = gap.axpy(-1.0, &frame_gap(forms)).max_abs();
    PohozaevGap {
        gap,
        bound,
        max_ratio,
        identity_residual,
    }
}

/// Regime of the segment triple `Q_{i-1} u Q_i u Q_{i+1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dominance {
    /// `int |H|^2 >= delta int |A|^2`
    HDominated,
    /// `int |H|^2 < delta int |A|^2`
    ADominated,
    BothZero,
}

pub const DEFAULT_DELTA: f64 = 0.1;

/// Triple energies at or below this are treated as zero. Both energies are
/// scale invariant, so an absolute floor is meaningful.
pub const ENERGY_FLOOR: f64 = 1e-12;

/// Label every interior segment `2..k-1` (1-based) by its regime.
pub fn h_vs_a_ratio(profile: &SegmentProfile, delta: f64) -> Result<Vec<(usize, Dominance)>> {
    if !(delta > 0.0) {
        return Err(LabError::Parameter(format!("delta = {delta} must be positive")));
    }
    let k = profile.segments();
    Ok((1..k.saturating_sub(1))
        .map(|s| {
            let a: f64 = profile.phi_a[s - 1..=s + 1].iter().sum();
            let h: f64 = profile.phi_h[s - 1..=s + 1].iter().sum();
            let label = if a <= ENERGY_FLOOR && h <= ENERGY_FLOOR {
                Dominance::BothZero
            } else if h >= delta * a {
                Dominance::HDominated
            } else {
                Dominance::ADominated
            };
            (s + 1, label)
        })
        .collect())
}
