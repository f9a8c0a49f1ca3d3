//! Harmonic functions on the cylinder, their weighted segment norms, and
//! three-circle thresholds.
//!
//! A harmonic function is stored as
//! `a + b t + sum_k (a_k e^{-kt} + b_k e^{kt}) cos k theta
//!           + (a'_k e^{-kt} + b'_k e^{kt}) sin k theta`
//! and segments are `Q_i = [(i-1)L, iL] x S^1`, `i = 1, 2, 3`, measured
//! from `t = 0`. Segment norms are `Phi_i = int_{Q_i} u^2 e^{-2mt}`.
//!
//! Profiles are evaluated in log space: thresholds for `q` close to 2 sit at
//! `L` in the thousands, where the individual exponentials overflow.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cylgrid::{fourier_modes, GridField};
use crate::error::{LabError, Result};
use crate::par;

/// Coefficients of one Fourier mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mode {
    /// `cos`, decaying.
    pub a: f64,
    /// `cos`, growing.
    pub b: f64,
    /// `sin`, decaying.
    pub a_sin: f64,
    /// `sin`, growing.
    pub b_sin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicExpansion {
    /// Weight exponent in `e^{-2mt}`.
    pub m: u32,
    pub a: f64,
    pub b: f64,
    /// `modes[k - 1]` for `k = 1..=K`.
    pub modes: Vec<Mode>,
}

impl HarmonicExpansion {
    pub fn new(m: u32, a: f64, b: f64, modes: Vec<Mode>) -> Result<Self> {
        if m == 0 {
            return Err(LabError::Parameter("weight m must be positive".into()));
        }
        let finite = a.is_finite()
            && b.is_finite()
            && modes
                .iter()
                .all(|c| c.a.is_finite() && c.b.is_finite() && c.a_sin.is_finite() && c.b_sin.is_finite());
        if !finite {
            return Err(LabError::Parameter("non-finite coefficient".into()));
        }
        Ok(Self { m, a, b, modes })
    }

    /// Truncation order `K`.
    pub fn order(&self) -> usize {
        self.modes.len()
    }

    pub fn is_zero(&self) -> bool {
        self.a == 0.0
            && self.b == 0.0
            && self
                .modes
                .iter()
                .all(|c| c.a == 0.0 && c.b == 0.0 && c.a_sin == 0.0 && c.b_sin == 0.0)
    }

    pub fn eval(&self, t: f64, theta: f64) -> f64 {
        let mut u = self.a + self.b * t;
        for (idx, c) in self.modes.iter().enumerate() {
            let k = (idx + 1) as f64;
            let (dec, gro) = ((-k * t).exp(), (k * t).exp());
            u += (c.a * dec + c.b * gro) * (k * theta).cos()
                + (c.a_sin * dec + c.b_sin * gro) * (k * theta).sin();
        }
        u
    }
}

/// Result of [`expand`].
#[derive(Clone, Debug)]
pub struct ExpansionFit {
    pub expansion: HarmonicExpansion,
    /// RMS misfit of the per-station Fourier data against the fitted modes.
    pub residual: f64,
    /// Largest tail RMS beyond mode `K` over the stations used.
    pub tail: f64,
}

/// Largest acceptable condition number of an equilibrated design matrix.
pub const MAX_DESIGN_CONDITION: f64 = 1e12;

/// Least-squares fit of `x`-coefficients for columns `p, q` over samples
/// `y`. Columns are equilibrated first; errors when the normalized design is
/// ill-conditioned.
fn lsq2(p: &[f64], q: &[f64], y: &[f64], mode: usize) -> Result<(f64, f64)> {
    let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(np > 0.0 && nq > 0.0 && np.is_finite() && nq.is_finite()) {
        return Err(LabError::Conditioning {
            mode,
            cond: f64::INFINITY,
        });
    }
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((pi, qi), yi) in p.iter().zip(q).zip(y) {
        let (x1, x2) = (pi / np, qi / nq);
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        r1 += x1 * yi;
        r2 += x2 * yi;
    }
    // Eigenvalues of the 2x2 normal matrix; cond(design)^2 = lmax/lmin.
    let tr = s11 + s22;
    let det = s11 * s22 - s12 * s12;
    let disc = ((s11 - s22).powi(2) + 4.0 * s12 * s12).sqrt();
    let (lmax, lmin) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
    let cond = if lmin > 0.0 { (lmax / lmin).sqrt() } else { f64::INFINITY };
    if cond > MAX_DESIGN_CONDITION {
        return Err(LabError::Conditioning { mode, cond });
    }
    let x1 = (s22 * r1 - s12 * r2) / det;
    let x2 = (s11 * r2 - s12 * r1) / det;
    Ok((x1 / np, x2 / nq))
}

/// Fit a harmonic expansion with modes `1..=k_max` to scalar samples using
/// the Fourier data at every grid station.
pub fn expand(samples: &GridField, m: u32, k_max: usize) -> Result<ExpansionFit> {
    if samples.components() != 1 {
        return Err(LabError::Parameter("expand needs a scalar field".into()));
    }
    let grid = samples.grid();
    let n_t = grid.n_t();
    if n_t < 4 {
        return Err(LabError::Sizing("expand needs at least 4 stations".into()));
    }
    let data = (0..n_t)
        .map(|i| fourier_modes(samples, i, k_max))
        .collect::<Result<Vec<_>>>()?;
    let ts: Vec<f64> = (0..n_t).map(|i| grid.t(i)).collect();
    let ones = vec![1.0; n_t];
    let c0: Vec<f64> = data.iter().map(|d| d.coeffs[0].0).collect();
    let (a, b) = lsq2(&ones, &ts, &c0, 0)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (i, t) in ts.iter().enumerate() {
        sq += (c0[i] - a - b * t).powi(2);
        count += 1;
    }
    let mut modes = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let kf = k as f64;
        let dec: Vec<f64> = ts.iter().map(|t| (-kf * t).exp()).collect();
        let gro: Vec<f64> = ts.iter().map(|t| (kf * t).exp()).collect();
        let cs: Vec<f64> = data.iter().map(|d| d.coeffs[k].0).collect();
        let ss: Vec<f64> = data.iter().map(|d| d.coeffs[k].1).collect();
        let (ac, bc) = lsq2(&dec, &gro, &cs, k)?;
        let (as_, bs) = lsq2(&dec, &gro, &ss, k)?;
        for i in 0..n_t {
            sq += (cs[i] - ac * dec[i] - bc * gro[i]).powi(2);
            sq += (ss[i] - as_ * dec[i] - bs * gro[i]).powi(2);
            count += 2;
        }
        modes.push(Mode {
            a: ac,
            b: bc,
            a_sin: as_,
            b_sin: bs,
        });
    }
    Ok(ExpansionFit {
        expansion: HarmonicExpansion::new(m, a, b, modes)?,
        residual: (sq / count as f64).sqrt(),
        tail: data.iter().map(|d| d.tail_rms).fold(0.0, f64::max),
    })
}

/// `ln(sum_j s_j e^{x_j})` for signed terms; `-inf` for a non-positive sum.
fn signed_log_sum(terms: &[(f64, f64)]) -> f64 {
    let max = terms
        .iter()
        .filter(|(s, _)| *s != 0.0)
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = terms
        .iter()
        .filter(|(s, _)| *s != 0.0)
        .map(|(s, x)| s * (x - max).exp())
        .sum();
    if sum > 0.0 {
        max + sum.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn log_sum(logs: &[f64]) -> f64 {
    let terms: Vec<(f64, f64)> = logs.iter().map(|x| (1.0, *x)).collect();
    signed_log_sum(&terms)
}

/// `(sign, ln |x|)`.
fn signed_log(x: f64) -> (f64, f64) {
    if x == 0.0 {
        (0.0, f64::NEG_INFINITY)
    } else {
        (x.signum(), x.abs().ln())
    }
}

/// `ln (1 - e^{x})` for `x < 0`.
fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Per-mode constants of the profile: `(C, D, E)` with
/// `B_i = C e^{-2(k+m)(i-1)L} + D e^{2(k-m)(i-1)L} + E e^{-2m(i-1)L}`.
/// Stored as signed logs so large `L` does not overflow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeConstants {
    pub log_c: f64,
    pub log_d: f64,
    pub e_sign: f64,
    pub log_e: f64,
}

impl ModeConstants {
    /// `(C, D, E)` as plain numbers (may overflow for large `L`).
    pub fn values(&self) -> (f64, f64, f64) {
        (self.log_c.exp(), self.log_d.exp(), self.e_sign * self.log_e.exp())
    }
}

fn mode_constants(decay: f64, grow: f64, k: f64, m: f64, l: f64) -> ModeConstants {
    let half_pi = (PI / 2.0).ln();
    let (_, la) = signed_log(decay);
    let (_, lb) = signed_log(grow);
    // C = (pi/2) a^2 (1 - e^{-2(k+m)L})/(k+m)
    let log_c = half_pi + 2.0 * la + ln_one_minus_exp(-2.0 * (k + m) * l) - (k + m).ln();
    // D = (pi/2) b^2 (e^{2(k-m)L} - 1)/(k-m), limit 2L at k = m
    let log_d = half_pi
        + 2.0 * lb
        + if k == m {
            (2.0 * l).ln()
        } else {
            let x = 2.0 * (k - m) * l;
            if x > 0.0 {
                x + ln_one_minus_exp(-x) - (k - m).ln()
            } else {
                ln_one_minus_exp(x) - (m - k).ln()
            }
        };
    // E = (pi/2) 2 a b (1 - e^{-2mL})/m
    let e_sign = signed_log(decay * grow).0;
    let log_e = half_pi + LN_2 + la + lb + ln_one_minus_exp(-2.0 * m * l) - m.ln();
    ModeConstants {
        log_c,
        log_d,
        e_sign,
        log_e,
    }
}

/// Closed-form segment norms of a harmonic expansion.
#[derive(Clone, Debug)]
pub struct ThreeCircleProfile {
    pub l: f64,
    pub m: u32,
    /// Primitive constants `c1, c2, c3` of `F(t) = e^{-2mt}/(2m)(c1 + c2 t + c3 t^2)`.
    pub c: [f64; 3],
    /// `ln A_i`.
    pub log_a: [f64; 3],
    /// Cosine-mode constants, `cos_constants[k - 1]`.
    pub cos_constants: Vec<ModeConstants>,
    /// Sine-mode constants.
    pub sin_constants: Vec<ModeConstants>,
    /// `ln B_{i;k}`, `log_b[k - 1][i - 1]`.
    pub log_b: Vec<[f64; 3]>,
    /// `ln B'_{i;k}`.
    pub log_b_sin: Vec<[f64; 3]>,
    /// `ln Phi_i`.
    pub log_phi: [f64; 3],
}

impl ThreeCircleProfile {
    pub fn a(&self) -> [f64; 3] {
        self.log_a.map(f64::exp)
    }

    pub fn phi(&self) -> [f64; 3] {
        self.log_phi.map(f64::exp)
    }

    /// `B_i = sum_k B_{i;k}`.
    pub fn b_total(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for row in &self.log_b {
            for i in 0..3 {
                out[i] += row[i].exp();
            }
        }
        out
    }

    pub fn b_sin_total(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for row in &self.log_b_sin {
            for i in 0..3 {
                out[i] += row[i].exp();
            }
        }
        out
    }
}

/// `ln F(t)` for the linear part.
fn log_primitive(c: [f64; 3], m: f64, t: f64) -> f64 {
    let poly = c[0] + c[1] * t + c[2] * t * t;
    if poly <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -2.0 * m * t - (2.0 * m).ln() + poly.ln()
}

/// Segment norms `Phi_1, Phi_2, Phi_3` in closed form.
pub fn weighted_threecircle_closed_form(exp: &HarmonicExpansion, l: f64) -> Result<ThreeCircleProfile> {
    if !(l.is_finite() && l > 0.0) {
        return Err(LabError::Parameter(format!("segment length {l} must be positive")));
    }
    let m = exp.m as f64;
    let (a, b) = (exp.a, exp.b);
    let c = [
        a * a + a * b / m + b * b / (2.0 * m * m),
        b * b / m + 2.0 * a * b,
        b * b,
    ];
    let mut log_a = [f64::NEG_INFINITY; 3];
    for (i, slot) in log_a.iter_mut().enumerate() {
        let lo = log_primitive(c, m, i as f64 * l);
        let hi = log_primitive(c, m, (i + 1) as f64 * l);
        if lo > f64::NEG_INFINITY {
            *slot = (2.0 * PI).ln() + lo + ln_one_minus_exp(hi - lo);
        }
    }
    let mut cos_constants = Vec::new();
    let mut sin_constants = Vec::new();
    let mut log_b = Vec::new();
    let mut log_b_sin = Vec::new();
    for (idx, mode) in exp.modes.iter().enumerate() {
        let k = (idx + 1) as f64;
        for (decay, grow, consts, rows) in [
            (mode.a, mode.b, &mut cos_constants, &mut log_b),
            (mode.a_sin, mode.b_sin, &mut sin_constants, &mut log_b_sin),
        ] {
            let mc = mode_constants(decay, grow, k, m, l);
            let mut row = [f64::NEG_INFINITY; 3];
            for (i, slot) in row.iter_mut().enumerate() {
                let s = i as f64 * l;
                *slot = signed_log_sum(&[
                    (1.0, mc.log_c - 2.0 * (k + m) * s),
                    (1.0, mc.log_d + 2.0 * (k - m) * s),
                    (mc.e_sign, mc.log_e - 2.0 * m * s),
                ]);
            }
            consts.push(mc);
            rows.push(row);
        }
    }
    let mut log_phi = [f64::NEG_INFINITY; 3];
    for i in 0..3 {
        let mut parts = vec![log_a[i]];
        parts.extend(log_b.iter().map(|r| r[i]));
        parts.extend(log_b_sin.iter().map(|r| r[i]));
        log_phi[i] = log_sum(&parts);
    }
    Ok(ThreeCircleProfile {
        l,
        m: exp.m,
        c,
        log_a,
        cos_constants,
        sin_constants,
        log_b,
        log_b_sin,
        log_phi,
    })
}

/// Outcome of a three-circle check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThreeCircleVerdict {
    pub holds: bool,
    /// `e^{-qL}(Phi_1 + Phi_3) - Phi_2` (may be infinite for huge `L`).
    pub margin: f64,
    /// `ln Phi_2 - ln(e^{-qL}(Phi_1 + Phi_3))`; negative when the inequality
    /// holds strictly. `-inf` for the zero function.
    pub log_ratio: f64,
}

/// Strict weighted three-circle inequality
/// `Phi_2 < e^{-qL}(Phi_1 + Phi_3)`; holds vacuously for `u = 0`.
pub fn check_lemma31(exp: &HarmonicExpansion, l: f64, q: f64) -> Result<ThreeCircleVerdict> {
    if !(q > 0.0 && q < 2.0) {
        return Err(LabError::Parameter(format!("q = {q} outside (0, 2)")));
    }
    let profile = weighted_threecircle_closed_form(exp, l)?;
    Ok(verdict_from_profile(&profile, q))
}

fn verdict_from_profile(profile: &ThreeCircleProfile, q: f64) -> ThreeCircleVerdict {
    let [p1, p2, p3] = profile.log_phi;
    let log_rhs = -q * profile.l + log_sum(&[p1, p3]);
    if p2 == f64::NEG_INFINITY && log_rhs == f64::NEG_INFINITY {
        return ThreeCircleVerdict {
            holds: true,
            margin: 0.0,
            log_ratio: f64::NEG_INFINITY,
        };
    }
    let log_ratio = p2 - log_rhs;
    ThreeCircleVerdict {
        holds: log_ratio < 0.0,
        margin: log_rhs.exp() - p2.exp(),
        log_ratio,
    }
}

/// `ln(cosh(2kL) + 1) - qL`; the appendix inequality holds for every
/// `(a, b)` exactly when this is nonnegative.
pub fn appendix_condition(q: f64, k: u32, l: f64) -> f64 {
    let x = k as f64 * l;
    // cosh(2x) + 1 = 2 cosh^2 x, ln cosh x = x + ln(1 + e^{-2x}) - ln 2.
    LN_2 + 2.0 * (x + (-2.0 * x).exp().ln_1p() - LN_2) - q * l
}

/// Both sides of `(a+b)^2 <= e^{-qL}((a e^{kL} + b e^{-kL})^2 + (a e^{-kL} + b e^{kL})^2)`.
pub fn appendix_sides(a: f64, b: f64, l: f64, q: f64, k: u32) -> (f64, f64) {
    let x = k as f64 * l;
    let (ep, em) = (x.exp(), (-x).exp());
    let rhs = (-q * l).exp() * ((a * ep + b * em).powi(2) + (a * em + b * ep).powi(2));
    ((a + b).powi(2), rhs)
}

/// Largest root `L_0` of `cosh(2kL) + 1 = e^{qL}`; zero when there is none.
pub fn appendix_threshold(q: f64, k: u32) -> Result<f64> {
    if !(q > 0.0 && q < 2.0) {
        return Err(LabError::Parameter(format!(
            "q = {q} outside (0, 2): no finite threshold"
        )));
    }
    if k == 0 {
        return Err(LabError::Parameter("mode k must be at least 1".into()));
    }
    // Beyond ln 2/(2k - q) the condition holds since ln cosh x >= x - ln 2.
    let upper = LN_2 / (2.0 * k as f64 - q) + 1.0;
    let f = |l: f64| appendix_condition(q, k, l);
    let steps = 100_000;
    let h = upper / steps as f64;
    let mut hi = upper;
    for s in (0..steps).rev() {
        let lo = s as f64 * h;
        if f(lo) < 0.0 {
            // Root in [lo, hi]: f(lo) < 0 <= f(hi).
            let mut a = lo;
            let mut b = hi;
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if f(mid) < 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
                if b - a < 1e-14 * b.max(1.0) {
                    break;
                }
            }
            return Ok(b);
        }
        hi = lo;
    }
    Ok(0.0)
}

/// Random expansion for threshold searches: truncation `K` uniform in
/// `1..=k_max`, each coefficient uniform in `[-1, 1]` damped by `2^{-k}`,
/// with the growing mode `k = m` removed.
pub fn random_expansion(rng: &mut impl Rng, m: u32, k_max: usize) -> HarmonicExpansion {
    let order = rng.gen_range(1..=k_max);
    let mut draw = |scale: f64| scale * rng.gen_range(-1.0..=1.0);
    let a = draw(1.0);
    let b = draw(1.0);
    let modes = (1..=order)
        .map(|k| {
            let s = 0.5_f64.powi(k as i32);
            let mut c = Mode {
                a: draw(s),
                b: draw(s),
                a_sin: draw(s),
                b_sin: draw(s),
            };
            if k == m as usize {
                c.b = 0.0;
                c.b_sin = 0.0;
            }
            c
        })
        .collect();
    HarmonicExpansion { m, a, b, modes }
}

/// Resolution of the empirical threshold search.
pub const L0_RESOLUTION: f64 = 0.05;

/// Largest `L` tried by the search.
pub const L0_SEARCH_LIMIT: f64 = 1e5;

/// Result of [`empirical_l0_search`].
#[derive(Clone, Debug)]
pub struct L0Search {
    /// Every trial holds at `l0` and at every scanned length above it; some
    /// trial fails within [`L0_RESOLUTION`] below it.
    pub l0: f64,
    /// The trial closest to failing at `l0`.
    pub witness: HarmonicExpansion,
    pub witness_log_ratio: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Search for the segment length beyond which the weighted three-circle
/// inequality holds for a fixed set of random expansions.
pub fn empirical_l0_search(m: u32, q: f64, trials: usize, k_max: usize, seed: u64) -> Result<L0Search> {
    if trials < 100 {
        return Err(LabError::Parameter(format!("need at least 100 trials, got {trials}")));
    }
    if !(q > 0.0 && q < 2.0) {
        return Err(LabError::Parameter(format!("q = {q} outside (0, 2)")));
    }
    if m == 0 || k_max == 0 || k_max > 8 {
        return Err(LabError::Parameter("need m >= 1 and 1 <= K <= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<HarmonicExpansion> = (0..trials).map(|_| random_expansion(&mut rng, m, k_max)).collect();
    let worst = |l: f64| -> Result<(usize, f64)> {
        let ratios = par::map_range(pool.len(), |i| check_lemma31(&pool[i], l, q).map(|v| v.log_ratio));
        let mut best = (0, f64::NEG_INFINITY);
        for (i, r) in ratios.into_iter().enumerate() {
            let r = r?;
            if r >= best.1 {
                best = (i, r);
            }
        }
        Ok(best)
    };
    let holds = |l: f64| -> Result<bool> { Ok(worst(l)?.1 < 0.0) };
    // The inequality holds trivially for small L (e^{-qL} near 1), fails on
    // an intermediate range, and holds again beyond L_0. Locate the largest
    // failing point of a geometric scan, then bisect up to the next point.
    let mut grid_l = Vec::new();
    let mut l = L0_RESOLUTION;
    while l <= L0_SEARCH_LIMIT {
        grid_l.push(l);
        l *= 1.1;
    }
    let mut last_fail = None;
    for (idx, &l) in grid_l.iter().enumerate() {
        if !holds(l)? {
            last_fail = Some(idx);
        }
    }
    let Some(idx) = last_fail else {
        let (w, ratio) = worst(L0_RESOLUTION)?;
        return Ok(L0Search {
            l0: 0.0,
            witness: pool[w].clone(),
            witness_log_ratio: ratio,
            trials,
            seed,
        });
    };
    if idx + 1 == grid_l.len() {
        return Err(LabError::Fit(format!("no threshold below L = {L0_SEARCH_LIMIT}")));
    }
    let (mut lo, mut hi) = (grid_l[idx], grid_l[idx + 1]);
    while hi - lo > L0_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if holds(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (idx, ratio) = worst(hi)?;
    Ok(L0Search {
        l0: hi,
        witness: pool[idx].clone(),
        witness_log_ratio: ratio,
        trials,
        seed,
    })
}
