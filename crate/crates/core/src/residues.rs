//! Circle residues attached to translations and rotations, and the
//! Gauss-Bonnet flux balance.
//!
//! With `W = (H.A_tt) f_t + (H.A_tth) f_th` and `g^{ij} = e^{-2u} delta^{ij}`:
//!
//! ```text
//! tau1(c) = int [ -2 d_t H - 4 e^{-2u} W + |H|^2 d_t f ] . c  dtheta
//! tau2(S) = int 2 (H . S d_t f - d_t H . S f) - 4 e^{-2u} W . S f
//!               + |H|^2 d_t f . S f  dtheta
//! ```

use crate::cylgrid::{circle_integral, integrate, t_derivative_at, theta_derivative_at, Region};
use crate::error::{LabError, Result};
use crate::geometry::{dot, wedge_basis, FundamentalForms, ImmersionField, BOUNDARY_MARGIN};
use crate::par;

/// Thresholds for declaring a residue zero:
/// `|value| <= max(abs, rel * scale)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidueTolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for ResidueTolerance {
    fn default() -> Self {
        Self { abs: 1e-6, rel: 1e-4 }
    }
}

impl ResidueTolerance {
    pub fn threshold(&self, scale: f64) -> f64 {
        self.abs.max(self.rel * scale)
    }

    pub fn is_zero(&self, value: f64, scale: f64) -> bool {
        value.abs() <= self.threshold(scale)
    }
}

/// The circle integrals at one station from which every residue follows by
/// linearity.
#[derive(Clone, Debug)]
pub struct CircleResidues {
    pub station: usize,
    pub t: f64,
    /// `tau1(c) = j . c`.
    pub j: Vec<f64>,
    /// `tau2(S) = sum_ab S_ab m[a n + b]`.
    pub m: Vec<f64>,
    /// `int |H|^2 dtheta + int |grad H| dtheta` on the circle.
    pub scale: f64,
}

impl CircleResidues {
    pub fn tau1(&self, c: &[f64]) -> Result<f64> {
        if c.len() != self.j.len() {
            return Err(LabError::Parameter(format!(
                "vector has {} components, ambient dimension is {}",
                c.len(),
                self.j.len()
            )));
        }
        Ok(dot(&self.j, c))
    }

    /// `s` is row-major `n x n` and must be skew.
    pub fn tau2(&self, s: &[f64]) -> Result<f64> {
        let n = self.j.len();
        if s.len() != n * n {
            return Err(LabError::Parameter(format!(
                "matrix has {} entries, expected {}",
                s.len(),
                n * n
            )));
        }
        check_skew(s, n)?;
        Ok(dot(&self.m, s))
    }

    /// `tau2(E_ab - E_ba)`.
    pub fn tau2_basis(&self, a: usize, b: usize) -> f64 {
        let n = self.j.len();
        self.m[a * n + b] - self.m[b * n + a]
    }
}

fn check_skew(s: &[f64], n: usize) -> Result<()> {
    let size = s.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut worst = 0.0_f64;
    for a in 0..n {
        for b in 0..n {
            worst = worst.max((s[a * n + b] + s[b * n + a]).abs());
        }
    }
    if worst > 1e-12 * size.max(1e-300) {
        return Err(LabError::NotSkew(worst));
    }
    Ok(())
}

/// Resolve `t` to an interior grid station.
fn interior_station(forms: &FundamentalForms, t: f64) -> Result<usize> {
    let grid = forms.grid();
    let i = grid.station_of(t)?;
    if i < BOUNDARY_MARGIN || i + BOUNDARY_MARGIN >= grid.n_t() {
        return Err(LabError::BoundaryStation {
            station: i,
            margin: BOUNDARY_MARGIN,
        });
    }
    Ok(i)
}

/// Circle integrals at the grid station `t`.
pub fn circle_residues(
    imm: &ImmersionField,
    forms: &FundamentalForms,
    t: f64,
    defect_tol: f64,
) -> Result<CircleResidues> {
    let i = interior_station(forms, t)?;
    let defect = forms.max_defect_in(i..i + 1);
    if defect > defect_tol {
        return Err(LabError::Conformality {
            defect,
            tol: defect_tol,
        });
    }
    let grid = imm.grid();
    let n = imm.ambient_dim();
    let n_theta = grid.n_theta();
    let h_t = t_derivative_at(&forms.h, i, 1)?;
    let h_th = theta_derivative_at(&forms.h, i, 1)?;
    let mut j_acc = vec![0.0; n];
    let mut m_acc = vec![0.0; n * n];
    let mut scale = 0.0;
    for jj in 0..n_theta {
        let h = forms.h.at(i, jj);
        let dh = &h_t[jj * n..(jj + 1) * n];
        let dh_th = &h_th[jj * n..(jj + 1) * n];
        let f = imm.samples().at(i, jj);
        let f_t = imm.f_t().at(i, jj);
        let f_th = imm.f_theta().at(i, jj);
        let e2u = (-2.0 * forms.u.get(i, jj, 0)).exp();
        let (htt, htth) = (dot(h, forms.a_tt.at(i, jj)), dot(h, forms.a_ttheta.at(i, jj)));
        let h2 = dot(h, h);
        let w: Vec<f64> = (0..n).map(|c| htt * f_t[c] + htth * f_th[c]).collect();
        for a in 0..n {
            j_acc[a] += -2.0 * dh[a] - 4.0 * e2u * w[a] + h2 * f_t[a];
            for b in 0..n {
                m_acc[a * n + b] += 2.0 * (h[a] * f_t[b] - dh[a] * f[b]) - 4.0 * e2u * w[a] * f[b]
                    + h2 * f_t[a] * f[b];
            }
        }
        scale += h2 + (dot(dh, dh) + dot(dh_th, dh_th)).sqrt();
    }
    let h_theta = grid.h_theta();
    Ok(CircleResidues {
        station: i,
        t: grid.t(i),
        j: j_acc.into_iter().map(|x| x * h_theta).collect(),
        m: m_acc.into_iter().map(|x| x * h_theta).collect(),
        scale: scale * h_theta,
    })
}

/// First residue `tau1(f, c)` on the circle at grid station `t`.
pub fn tau1(
    imm: &ImmersionField,
    forms: &FundamentalForms,
    c: &[f64],
    t: f64,
    defect_tol: f64,
) -> Result<f64> {
    circle_residues(imm, forms, t, defect_tol)?.tau1(c)
}

/// Second residue `tau2(f, S)` for a skew `S` (row-major `n x n`).
pub fn tau2(
    imm: &ImmersionField,
    forms: &FundamentalForms,
    s: &[f64],
    t: f64,
    defect_tol: f64,
) -> Result<f64> {
    circle_residues(imm, forms, t, defect_tol)?.tau2(s)
}

/// Residues for the standard bases over several stations.
#[derive(Clone, Debug)]
pub struct ResidueReport {
    pub stations: Vec<f64>,
    /// `tau1[a][s]`: basis vector `e_a` at station `s`.
    pub tau1: Vec<Vec<f64>>,
    /// Index pairs `(a, b)`, `a < b`, of the rotation basis `E_ab - E_ba`.
    pub pairs: Vec<(usize, usize)>,
    /// `tau2[p][s]`.
    pub tau2: Vec<Vec<f64>>,
    pub tau1_variation: Vec<f64>,
    pub tau2_variation: Vec<f64>,
    /// Calibration scale per station.
    pub scale_used: Vec<f64>,
}

fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
    hi - lo
}

impl ResidueReport {
    /// Largest `|tau|` over all basis elements and stations.
    pub fn max_abs(&self) -> f64 {
        self.tau1
            .iter()
            .chain(&self.tau2)
            .flatten()
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_variation(&self) -> f64 {
        self.tau1_variation
            .iter()
            .chain(&self.tau2_variation)
            .fold(0.0, |m, x| m.max(*x))
    }

    /// Every residue is zero under `tol` at its station's scale.
    pub fn all_zero(&self, tol: &ResidueTolerance) -> bool {
        self.tau1.iter().chain(&self.tau2).all(|row| {
            row.iter()
                .zip(&self.scale_used)
                .all(|(v, s)| tol.is_zero(*v, *s))
        })
    }
}

/// Full basis sweep over the given grid stations (at least three, strictly
/// increasing, interior).
pub fn residue_sweep(
    imm: &ImmersionField,
    forms: &FundamentalForms,
    stations: &[f64],
    defect_tol: f64,
) -> Result<ResidueReport> {
    if stations.len() < 3 {
        return Err(LabError::Parameter(format!(
            "residue sweep needs at least 3 stations, got {}",
            stations.len()
        )));
    }
    if stations.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::Parameter("stations must be strictly increasing".into()));
    }
    let circles = par::map_range(stations.len(), |k| circle_residues(imm, forms, stations[k], defect_tol))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = imm.ambient_dim();
    let pairs = wedge_basis(n);
    let tau1: Vec<Vec<f64>> = (0..n).map(|a| circles.iter().map(|c| c.j[a]).collect()).collect();
    let tau2: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(a, b)| circles.iter().map(|c| c.tau2_basis(a, b)).collect())
        .collect();
    Ok(ResidueReport {
        stations: circles.iter().map(|c| c.t).collect(),
        tau1_variation: tau1.iter().map(|r| spread(r)).collect(),
        tau2_variation: tau2.iter().map(|r| spread(r)).collect(),
        tau1,
        pairs,
        tau2,
        scale_used: circles.iter().map(|c| c.scale).collect(),
    })
}

/// Both sides of the flux balance between two circles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussBonnetFlux {
    /// `int_{t'} d_t u dtheta - int_{t''} d_t u dtheta`.
    pub flux_difference: f64,
    /// `int int_{[t', t'']} K e^{2u} dt dtheta`.
    pub curvature_integral: f64,
}

/// Flux balance of `d_t u` against the curvature between `t' < t''`.
pub fn gauss_bonnet_flux(forms: &FundamentalForms, t_lo: f64, t_hi: f64) -> Result<GaussBonnetFlux> {
    if t_hi <= t_lo {
        return Err(LabError::Domain(format!("need t' < t'', got {t_lo} >= {t_hi}")));
    }
    let grid = forms.grid();
    let (a, b) = (grid.station_of(t_lo)?, grid.station_of(t_hi)?);
    let weight = forms.u.map(1, |p, o| o[0] = (2.0 * p[0]).exp());
    let curvature_integral = integrate(
        &forms.k,
        Region::WeightedBand {
            weight: &weight,
            first: a,
            last: b,
        },
    )?;
    Ok(GaussBonnetFlux {
        flux_difference: circle_integral(&forms.u_t, a) - circle_integral(&forms.u_t, b),
        curvature_integral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{make_example, End, ExampleKind, ExampleSpec};
    use crate::cylgrid::CylinderGrid;
    use crate::geometry::{fundamental_forms, DEFAULT_DEFECT_TOL};
    use std::f64::consts::PI;

    fn setup(kind: ExampleKind, t0: f64, t1: f64, nt: usize) -> (ImmersionField, FundamentalForms) {
        let g = CylinderGrid::new(t0, t1, nt, 32).unwrap();
        let imm = make_example(&ExampleSpec::new(kind), &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        (imm, forms)
    }

    #[test]
    fn catenoid_residues_vanish_exactly() {
        let (imm, forms) = setup(ExampleKind::Catenoid, -2.0, 2.0, 401);
        let rep = residue_sweep(&imm, &forms, &[-1.0, 0.0, 1.0], DEFAULT_DEFECT_TOL).unwrap();
        assert!(rep.max_abs() < 1e-12, "{}", rep.max_abs());
    }

    #[test]
    fn sphere_residues_vanish() {
        let (imm, forms) = setup(ExampleKind::Sphere, -4.0, 4.0, 801);
        let rep = residue_sweep(&imm, &forms, &[-1.0, -0.5, 0.0, 0.5, 1.0], DEFAULT_DEFECT_TOL).unwrap();
        assert!(rep.max_abs() < 1e-6, "{}", rep.max_abs());
        assert!(rep.max_variation() < 1e-6);
        assert!(rep.all_zero(&ResidueTolerance::default()));
    }

    #[test]
    fn flat_cover_residues_vanish() {
        let (imm, forms) = setup(ExampleKind::FlatCover { m: 2 }, 0.0, 1.0, 101);
        let rep = residue_sweep(&imm, &forms, &[0.25, 0.5, 0.75], DEFAULT_DEFECT_TOL).unwrap();
        assert_eq!(rep.max_abs(), 0.0);
    }

    #[test]
    fn inverted_catenoid_has_axial_first_residue() {
        let kind = ExampleKind::InvertedCatenoid { end: End::Upper };
        let (imm, forms) = setup(kind.clone(), 1.0, 6.0, 501);
        let rep = residue_sweep(&imm, &forms, &[2.0, 3.0, 4.0, 5.0], DEFAULT_DEFECT_TOL).unwrap();
        let axial = rep.tau1[2][0];
        assert!(axial.abs() > 1e-3, "{axial}");
        assert!(rep.tau1_variation[2] < 1e-4 * axial.abs().max(1.0));
        // The transverse directions and all rotations vanish by symmetry.
        assert!(rep.tau1[0][0].abs() < 1e-8 && rep.tau1[1][0].abs() < 1e-8);
        let (imm2, forms2) = setup(kind, 1.0, 6.0, 1001);
        let fine = tau1(&imm2, &forms2, &[0.0, 0.0, 1.0], 3.0, DEFAULT_DEFECT_TOL).unwrap();
        assert!(((fine - axial) / axial).abs() < 0.01);
    }

    #[test]
    fn linearity_and_scaling() {
        let kind = ExampleKind::InvertedCatenoid { end: End::Lower };
        let (imm, forms) = setup(kind.clone(), 1.0, 4.0, 301);
        let circ = circle_residues(&imm, &forms, 2.0, DEFAULT_DEFECT_TOL).unwrap();
        let c1 = [0.3, -1.0, 2.0];
        let c2 = [1.0, 0.5, -0.25];
        let comb: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let lhs = circ.tau1(&comb).unwrap();
        let rhs = 2.0 * circ.tau1(&c1).unwrap() - 3.0 * circ.tau1(&c2).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));

        let g = imm.grid().clone();
        let scaled = make_example(&ExampleSpec::new(kind).with_scale(2.5), &g).unwrap();
        let sforms = fundamental_forms(&scaled).unwrap();
        let sc = circle_residues(&scaled, &sforms, 2.0, DEFAULT_DEFECT_TOL).unwrap();
        let t1 = circ.tau1(&[0.0, 0.0, 1.0]).unwrap();
        assert!((sc.tau1(&[0.0, 0.0, 1.0]).unwrap() * 2.5 - t1).abs() < 1e-8 * t1.abs());
        let s = [0.0, 1.0, -2.0, -1.0, 0.0, 0.5, 2.0, -0.5, 0.0];
        let a = circ.tau2(&s).unwrap();
        let b = sc.tau2(&s).unwrap();
        assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn rotation_covariance() {
        let kind = ExampleKind::InvertedCatenoid { end: End::Upper };
        let (imm, forms) = setup(kind, 1.0, 4.0, 301);
        // Rotation about the first axis.
        let (c, s) = (0.6_f64, 0.8_f64);
        let r = [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c];
        let rotated = imm
            .map_jets(3, |jet, out| {
                for k in 0..6 {
                    for a in 0..3 {
                        out[k * 3 + a] = (0..3).map(|b| r[a * 3 + b] * jet[k * 3 + b]).sum();
                    }
                }
            })
            .unwrap();
        let rforms = fundamental_forms(&rotated).unwrap();
        let v = [0.2, -0.7, 1.1];
        let rt_v: Vec<f64> = (0..3).map(|a| (0..3).map(|b| r[b * 3 + a] * v[b]).sum()).collect();
        let lhs = tau1(&rotated, &rforms, &v, 2.0, DEFAULT_DEFECT_TOL).unwrap();
        let rhs = tau1(&imm, &forms, &rt_v, 2.0, DEFAULT_DEFECT_TOL).unwrap();
        assert!((lhs - rhs).abs() < 1e-8 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn translation_invariance_when_first_residue_vanishes() {
        let (imm, forms) = setup(ExampleKind::Sphere, -3.0, 3.0, 2401);
        let d = [0.3, -1.2, 0.7];
        let moved = imm
            .map_jets(3, |jet, out| {
                out.copy_from_slice(jet);
                for a in 0..3 {
                    out[a] += d[a];
                }
            })
            .unwrap();
        let mforms = fundamental_forms(&moved).unwrap();
        let s = [0.0, 1.0, 0.5, -1.0, 0.0, -2.0, -0.5, 2.0, 0.0];
        let a = tau2(&imm, &forms, &s, 0.5, DEFAULT_DEFECT_TOL).unwrap();
        let b = tau2(&moved, &mforms, &s, 0.5, DEFAULT_DEFECT_TOL).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        let t1a = tau1(&imm, &forms, &d, 0.5, DEFAULT_DEFECT_TOL).unwrap();
        let t1b = tau1(&moved, &mforms, &d, 0.5, DEFAULT_DEFECT_TOL).unwrap();
        assert_eq!(t1a, t1b);
    }

    #[test]
    fn bad_inputs_are_refused() {
        let (imm, forms) = setup(ExampleKind::Sphere, -1.0, 1.0, 41);
        assert!(matches!(
            tau1(&imm, &forms, &[1.0, 0.0, 0.0], -1.0 + 0.05, DEFAULT_DEFECT_TOL),
            Err(LabError::BoundaryStation { .. })
        ));
        let not_skew = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            tau2(&imm, &forms, &not_skew, 0.0, DEFAULT_DEFECT_TOL),
            Err(LabError::NotSkew(_))
        ));
        assert!(residue_sweep(&imm, &forms, &[0.0, 0.1], DEFAULT_DEFECT_TOL).is_err());
    }

    #[test]
    fn flux_balance() {
        let (_, forms) = setup(ExampleKind::Sphere, -3.0, 3.0, 1201);
        let gb = gauss_bonnet_flux(&forms, -1.0, 1.0).unwrap();
        let exact = 2.0 * PI * (1.0_f64.tanh() - (-1.0_f64).tanh());
        assert!((gb.flux_difference - exact).abs() < 1e-8);
        assert!((gb.curvature_integral - exact).abs() < 1e-8);

        let (_, forms) = setup(ExampleKind::Catenoid, -1.0, 3.0, 1201);
        let gb = gauss_bonnet_flux(&forms, 0.0, 2.0).unwrap();
        let exact = -2.0 * PI * 2.0_f64.tanh();
        assert!((gb.flux_difference - exact).abs() < 1e-8, "{}", gb.flux_difference);
        assert!((gb.curvature_integral - exact).abs() < 1e-8);

        let (_, forms) = setup(ExampleKind::FlatCover { m: 1 }, 0.0, 1.0, 101);
        let gb = gauss_bonnet_flux(&forms, 0.2, 0.8).unwrap();
        assert!(gb.flux_difference.abs() < 1e-12 && gb.curvature_integral.abs() < 1e-12);
    }
}
