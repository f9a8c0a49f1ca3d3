//! Descent on the Willmore energy with clamped end rings.

use std::io::Write;

use rand::Rng;

use crate::catalog::bump;
use crate::cylgrid::{CylinderGrid, GridField};
use crate::error::{LabError, Result};
use crate::geometry::{dot, el_operator, tangent_frame, fundamental_forms, FundamentalForms, ImmersionField, BOUNDARY_MARGIN};
use crate::par;

/// Rows held fixed at each end of the grid.
pub const CLAMP_ROWS: usize = 2;

/// Stations where the gradient is evaluated; it vanishes elsewhere.
pub fn active_stations(grid: &CylinderGrid) -> std::ops::Range<usize> {
    let m = BOUNDARY_MARGIN.max(CLAMP_ROWS);
    m..grid.n_t().saturating_sub(m)
}

/// `L^2(dt dtheta)` gradient of `W = int |H|^2 dV`: the Euler-Lagrange
/// operator on active stations, zero on the rows near each end.
pub fn willmore_gradient(imm: &ImmersionField, forms: &FundamentalForms, defect_tol: f64) -> Result<GridField> {
    let grid = imm.grid();
    let active = active_stations(grid);
    if active.is_empty() {
        return Err(LabError::Sizing("grid has no active stations".into()));
    }
    let defect = forms.max_defect_in(active.clone());
    if defect > defect_tol {
        return Err(LabError::Conformality { defect, tol: defect_tol });
    }
    let g = el_operator(imm, forms)?;
    let n = imm.ambient_dim();
    Ok(GridField::from_indices(grid, n, |i, j, out| {
        out.iter_mut().for_each(|x| *x = 0.0);
        if active.contains(&i) {
            out.copy_from_slice(g.at(i, j));
            let (e_t, e_th) = tangent_frame(imm.f_t().at(i, j), imm.f_theta().at(i, j));
            for e in [e_t, e_th] {
                let c = dot(out, &e);
                out.iter_mut().zip(&e).for_each(|(o, x)| *o -= c * x);
            }
        }
    }))
}

/// Trapezoid weight of station `i`; spectrally accurate here because every
/// integrand the optimizer sees vanishes near the clamped ends.
fn station_weight(grid: &CylinderGrid, i: usize) -> f64 {
    let w = grid.h_t() * grid.h_theta();
    if i == 0 || i + 1 == grid.n_t() {
        0.5 * w
    } else {
        w
    }
}

fn trapezoid(grid: &CylinderGrid, density: impl Fn(usize, usize) -> f64 + Sync + Send) -> f64 {
    par::sum_range(grid.n_t(), |i| {
        station_weight(grid, i) * (0..grid.n_theta()).map(|j| density(i, j)).sum::<f64>()
    })
}

/// `int int a . b dt dtheta` for vector fields on one grid.
pub fn l2_inner(a: &GridField, b: &GridField) -> Result<f64> {
    if a.grid() != b.grid() || a.components() != b.components() {
        return Err(LabError::Parameter("fields live on different grids".into()));
    }
    Ok(trapezoid(a.grid(), |i, j| dot(a.at(i, j), b.at(i, j))))
}

/// `int |H|^2 dV` with the optimizer's quadrature.
pub fn descent_energy(forms: &FundamentalForms) -> f64 {
    trapezoid(forms.grid(), |i, j| {
        let h = forms.h.at(i, j);
        dot(h, h) * forms.detg.get(i, j, 0).sqrt()
    })
}

fn energy_of(samples: &GridField) -> Result<(ImmersionField, FundamentalForms, f64)> {
    let imm = ImmersionField::new(samples.clone())?;
    let forms = fundamental_forms(&imm)?;
    let w = descent_energy(&forms);
    if !w.is_finite() {
        return Err(LabError::Domain("Willmore energy is not finite".into()));
    }
    Ok((imm, forms, w))
}

/// Willmore energy of `f + eps phi` (finite-difference jets).
pub fn energy_along(imm: &ImmersionField, phi: &GridField, eps: f64) -> Result<f64> {
    Ok(energy_of(&imm.samples().axpy(eps, phi))?.2)
}

/// Smooth variation supported in `[t0, t1]`: a bump in `t` times random low
/// Fourier modes in `theta`, with random ambient directions.
pub fn random_variation(rng: &mut impl Rng, grid: &CylinderGrid, n: usize, t0: f64, t1: f64) -> GridField {
    let modes = 3;
    let coeffs: Vec<f64> = (0..2 * modes * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (c, w) = (0.5 * (t0 + t1), 0.5 * (t1 - t0));
    GridField::from_indices(grid, n, |i, j, out| {
        let b = bump((grid.t(i) - c) / w);
        let th = grid.theta(j);
        for (comp, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..modes {
                let base = 2 * (comp * modes + k);
                s += coeffs[base] * (k as f64 * th).cos() + coeffs[base + 1] * (k as f64 * th).sin();
            }
            *o = b * s;
        }
    })
}

/// `<gradient, phi>` next to the central difference
/// `(W(f + eps phi) - W(f - eps phi)) / 2 eps`.
pub fn gradient_fd_check(imm: &ImmersionField, phi: &GridField, eps: f64, defect_tol: f64) -> Result<(f64, f64)> {
    let base = ImmersionField::new(imm.samples().clone())?;
    let forms = fundamental_forms(&base)?;
    let grad = willmore_gradient(&base, &forms, defect_tol)?;
    let analytic = l2_inner(&grad, phi)?;
    let fd = (energy_along(&base, phi, eps)? - energy_along(&base, phi, -eps)?) / (2.0 * eps);
    Ok((analytic, fd))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentConfig {
    pub max_iter: usize,
    /// Stop once the gradient norm is at or below this.
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    /// Halt when the conformal defect on active stations exceeds this.
    pub defect_halt: f64,
    /// First trial step is `initial_step_factor * h_t^4 / |grad|`.
    pub initial_step_factor: f64,
    pub step_rule: StepRule,
}

/// First trial step of each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    /// `initial_step_factor * h_t^4 / |grad|` at the current point.
    Rescaled,
    /// Twice the last accepted step.
    Doubling,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            armijo: 1e-4,
            max_halvings: 40,
            defect_halt: 1e-3,
            initial_step_factor: 1e-2,
            step_rule: StepRule::Doubling,
        }
    }
}

/// Snapshot after an accepted step (or the seed).
#[derive(Clone, Debug)]
pub struct DescentState {
    pub imm: ImmersionField,
    pub w: f64,
    pub grad_norm: f64,
    /// Step that produced this state (0 for the seed).
    pub step: f64,
    pub iteration: usize,
    pub conformal_defect: f64,
}

/// One line of the iteration trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub w: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub defect: f64,
}

#[derive(Debug)]
pub enum Stop {
    Converged,
    MaxIterations,
    GaugeDrift { defect: f64 },
    /// No trial step passed the Armijo test.
    Stalled,
    /// Every trial step broke the immersion; carries the last error.
    Degenerate(LabError),
}

#[derive(Debug)]
pub struct DescentRun {
    /// Last accepted state.
    pub state: DescentState,
    pub trace: Vec<TraceRow>,
    pub stop: Stop,
}

impl DescentRun {
    pub fn initial_grad_norm(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |r| r.grad_norm)
    }

    /// True when the recorded energies never increase.
    pub fn energy_monotone(&self) -> bool {
        self.trace.windows(2).all(|w| w[1].w <= w[0].w)
    }

    pub fn write_trace_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,W,gradnorm,step,defect")?;
        for r in &self.trace {
            writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e}", r.iteration, r.w, r.grad_norm, r.step, r.defect)?;
        }
        Ok(())
    }
}

struct Point {
    imm: ImmersionField,
    w: f64,
    grad: GridField,
    grad_norm: f64,
    defect: f64,
}

fn evaluate(samples: &GridField) -> Result<Point> {
    let (imm, forms, w) = energy_of(samples)?;
    let defect = forms.max_defect_in(active_stations(imm.grid()));
    let grad = willmore_gradient(&imm, &forms, f64::INFINITY)?;
    let grad_norm = l2_inner(&grad, &grad)?.max(0.0).sqrt();
    Ok(Point {
        imm,
        w,
        grad,
        grad_norm,
        defect,
    })
}

/// Steepest descent on `W` with Armijo backtracking (halving). The first
/// trial step of the run is `initial_step_factor * h_t^4 / |grad|`; later
/// iterations start according to `step_rule`. Clamped rows never move
/// because the gradient vanishes there.
///
/// A step that passes the Armijo test but pushes the conformal defect past
/// `defect_halt` ends the run with [`Stop::GaugeDrift`]. Trial steps that
/// break the immersion count as rejections; if every trial of an iteration
/// breaks it the run ends with [`Stop::Degenerate`]. In every case the last
/// accepted state is returned.
pub fn synthesize_neck(seed: &ImmersionField, config: &DescentConfig) -> Result<DescentRun> {
    let h_t = seed.grid().h_t();
    let mut cur = evaluate(seed.samples())?;
    if cur.defect > config.defect_halt {
        return Err(LabError::Conformality {
            defect: cur.defect,
            tol: config.defect_halt,
        });
    }
    let first_step = |g: f64| config.initial_step_factor * h_t.powi(4) / g.max(f64::MIN_POSITIVE);
    let mut trace = vec![TraceRow {
        iteration: 0,
        w: cur.w,
        grad_norm: cur.grad_norm,
        step: 0.0,
        defect: cur.defect,
    }];
    let mut last_step = 0.0;
    let mut step = first_step(cur.grad_norm);
    let mut iteration = 0;
    let stop = loop {
        if cur.grad_norm <= config.grad_tol {
            break Stop::Converged;
        }
        if iteration >= config.max_iter {
            break Stop::MaxIterations;
        }
        let slope = cur.grad_norm * cur.grad_norm;
        let mut s = match config.step_rule {
            StepRule::Rescaled => first_step(cur.grad_norm),
            StepRule::Doubling => step,
        };
        let mut accepted = None;
        let mut broken = None;
        let mut rejected = 0;
        for _ in 0..=config.max_halvings {
            match evaluate(&cur.imm.samples().axpy(-s, &cur.grad)) {
                Ok(p) if p.w <= cur.w - config.armijo * s * slope => {
                    accepted = Some(p);
                    break;
                }
                Ok(_) => rejected += 1,
                Err(e) => broken = Some(e),
            }
            s *= 0.5;
        }
        let next = match (accepted, broken) {
            (Some(p), _) => p,
            (None, Some(e)) if rejected == 0 => break Stop::Degenerate(e),
            (None, _) => break Stop::Stalled,
        };
        if next.defect > config.defect_halt {
            break Stop::GaugeDrift { defect: next.defect };
        }
        iteration += 1;
        last_step = s;
        step = 2.0 * s;
        cur = next;
        trace.push(TraceRow {
            iteration,
            w: cur.w,
            grad_norm: cur.grad_norm,
            step: s,
            defect: cur.defect,
        });
    };
    Ok(DescentRun {
        state: DescentState {
            imm: cur.imm,
            w: cur.w,
            grad_norm: cur.grad_norm,
            step: last_step,
            iteration,
            conformal_defect: cur.defect,
        },
        trace,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{make_example, perturb, ExampleKind, ExampleSpec, PerturbMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn catenoid(nt: usize, nth: usize) -> ImmersionField {
        let g = CylinderGrid::new(-2.0, 2.0, nt, nth).unwrap();
        make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap()
    }

    fn seed(nt: usize, nth: usize, amp: f64) -> ImmersionField {
        let fine = 8;
        let cat = catenoid((nt - 1) * fine + 1, nth);
        let p = perturb(&cat, amp, PerturbMode::RadialConformal { center: 0.0, width: 1.5 }).unwrap();
        ImmersionField::new(p.samples().subsample(fine, 1).unwrap()).unwrap()
    }

    #[test]
    fn gradient_vanishes_on_catenoid() {
        let imm = ImmersionField::new(catenoid(161, 32).samples().clone()).unwrap();
        let f = fundamental_forms(&imm).unwrap();
        let g = willmore_gradient(&imm, &f, 1e-6).unwrap();
        assert!(g.max_abs() < 1e-6, "{}", g.max_abs());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let imm = seed(161, 32, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let phi = random_variation(&mut rng, imm.grid(), 3, -1.2, 1.2);
            let (a, fd) = gradient_fd_check(&imm, &phi, 1e-5, 1e-4).unwrap();
            assert!((a - fd).abs() <= 1e-5 * fd.abs(), "{a} {fd}");
        }
    }

    #[test]
    fn catenoid_seed_converges_immediately() {
        let cfg = DescentConfig {
            grad_tol: 1e-5,
            ..Default::default()
        };
        let run = synthesize_neck(&catenoid(81, 16), &cfg).unwrap();
        assert!(matches!(run.stop, Stop::Converged));
        assert_eq!(run.state.iteration, 0);
    }

    #[test]
    fn descent_is_monotone_and_keeps_clamps() {
        let s = seed(41, 16, 0.01);
        let cfg = DescentConfig {
            max_iter: 40,
            ..Default::default()
        };
        let run = synthesize_neck(&s, &cfg).unwrap();
        assert!(run.state.iteration > 0);
        assert!(run.energy_monotone());
        assert!(run.state.w < run.trace[0].w);
        for pair in run.trace.windows(2) {
            let r = pair[1];
            assert!(r.w <= pair[0].w - cfg.armijo * r.step * pair[0].grad_norm.powi(2));
            assert!(r.defect <= cfg.defect_halt);
        }
        let n = s.grid().n_theta();
        let clamp = CLAMP_ROWS * n * 3;
        let (a, b) = (s.samples().values(), run.state.imm.samples().values());
        assert_eq!(&a[..clamp], &b[..clamp]);
        assert_eq!(&a[a.len() - clamp..], &b[b.len() - clamp..]);
        let mut csv = Vec::new();
        run.write_trace_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,W,gradnorm,step,defect\n"));
        assert_eq!(text.lines().count(), run.trace.len() + 1);
    }

    #[test]
    fn broken_immersion_returns_last_state() {
        let s = seed(41, 16, 0.01);
        let cfg = DescentConfig {
            initial_step_factor: 1e300,
            max_halvings: 0,
            ..Default::default()
        };
        let run = synthesize_neck(&s, &cfg).unwrap();
        assert!(matches!(run.stop, Stop::Degenerate(_)), "{:?}", run.stop);
        assert_eq!(run.state.iteration, 0);
        assert_eq!(run.state.imm.samples(), s.samples());
    }

    #[test]
    fn drifting_seed_is_refused() {
        let cat = catenoid(41, 16);
        let bent = perturb(
            &cat,
            0.05,
            PerturbMode::NormalTrig {
                k: 2,
                center: 0.0,
                width: 1.0,
            },
        )
        .unwrap();
        let err = synthesize_neck(&bent, &DescentConfig::default()).unwrap_err();
        assert!(matches!(err, LabError::Conformality { .. }));
    }
}
