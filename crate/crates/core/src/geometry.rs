//! Second-order geometry of sampled immersions.
//!
//! Everything here is computed from the samples alone: derivative jets come
//! from [`crate::cylgrid::differentiate`], the second fundamental form is the
//! normal part of the second derivatives (tangential part removed with the
//! full inverse metric), and the mean curvature vector is its metric trace,
//! `H = g^{ij} A_ij` (no factor one half, so the unit sphere has `|H| = 2`).
//!
//! The Euler-Lagrange operator and the Gauss-map tension are written in the
//! conformal gauge and refuse inputs whose conformal defect is too large.

use std::f64::consts::PI;
use std::ops::Range;

use crate::cylgrid::{differentiate, integrate, CylinderGrid, Direction, GridField, Region};
use crate::error::{LabError, Result};
use crate::par;

/// Default tolerance on the conformal defect for gauge-dependent operators.
pub const DEFAULT_DEFECT_TOL: f64 = 1e-6;

/// Stations excluded at each end when a quantity involves derivatives of
/// derived fields (two stencil half-widths).
pub const BOUNDARY_MARGIN: usize = 4;

/// Largest distance of the circle-averaged `-d_t u` from an integer before the
/// winding number is flagged as ambiguous.
pub const WINDING_AMBIGUITY: f64 = 0.2;

/// Where the derivative jets of an [`ImmersionField`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JetSource {
    /// Closed-form derivatives evaluated at the gridpoints.
    Analytic,
    /// Derivatives of the samples by [`differentiate`].
    Sampled,
}

/// Samples of `f` together with their first and second derivative jets.
#[derive(Clone, Debug)]
pub struct ImmersionField {
    source: JetSource,
    f: GridField,
    f_t: GridField,
    f_th: GridField,
    f_tt: GridField,
    f_tth: GridField,
    f_thth: GridField,
}

impl ImmersionField {
    /// Wrap samples of an immersion into `R^n`, `n >= 3`, and compute the
    /// derivative jets. Fails if the metric degenerates anywhere.
    pub fn new(f: GridField) -> Result<Self> {
        if f.components() < 3 {
            return Err(LabError::Parameter(format!(
                "ambient dimension {} < 3",
                f.components()
            )));
        }
        let f_t = differentiate(&f, Direction::T, 1)?;
        let f_th = differentiate(&f, Direction::Theta, 1)?;
        let f_tt = differentiate(&f, Direction::T, 2)?;
        let f_tth = differentiate(&f_th, Direction::T, 1)?;
        let f_thth = differentiate(&f, Direction::Theta, 2)?;
        let imm = Self {
            source: JetSource::Sampled,
            f,
            f_t,
            f_th,
            f_tt,
            f_tth,
            f_thth,
        };
        imm.check_immersion()?;
        Ok(imm)
    }

    pub fn from_fn<F>(grid: &CylinderGrid, n: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, f64, &mut [f64]) + Sync + Send,
    {
        Self::new(GridField::from_fn(grid, n, f)?)
    }

    /// Build from closed-form jets. `jet` fills `6n` values at `(t, theta)`:
    /// `f, f_t, f_theta, f_tt, f_ttheta, f_thetatheta`.
    pub fn from_jet_fn<F>(grid: &CylinderGrid, n: usize, jet: F) -> Result<Self>
    where
        F: Fn(f64, f64, &mut [f64]) + Sync + Send,
    {
        if n < 3 {
            return Err(LabError::Parameter(format!("ambient dimension {n} < 3")));
        }
        let packed = GridField::from_fn(grid, 6 * n, jet)?;
        let part = |k: usize| packed.map(n, |p, o| o.copy_from_slice(&p[k * n..(k + 1) * n]));
        let imm = Self {
            source: JetSource::Analytic,
            f: part(0),
            f_t: part(1),
            f_th: part(2),
            f_tt: part(3),
            f_tth: part(4),
            f_thth: part(5),
        };
        imm.check_immersion()?;
        Ok(imm)
    }

    /// Apply a pointwise map to all jets at once: `map(jet_in, jet_out)` with
    /// the same `6n` layout as [`ImmersionField::from_jet_fn`]. The result
    /// keeps this field's jet source.
    pub fn map_jets<F>(&self, n_out: usize, map: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Sync + Send,
    {
        let n = self.ambient_dim();
        let grid = self.grid();
        let packed = GridField::from_indices(grid, 6 * n_out, |i, j, o| {
            let mut input = Vec::with_capacity(6 * n);
            for part in self.jets() {
                input.extend_from_slice(part.at(i, j));
            }
            map(&input, o);
        });
        let part = |k: usize| {
            packed.map(n_out, |p, o| o.copy_from_slice(&p[k * n_out..(k + 1) * n_out]))
        };
        if let Some(pos) = packed.values().iter().position(|v| !v.is_finite()) {
            let point = pos / (6 * n_out);
            return Err(LabError::Domain(format!(
                "non-finite jet at station {}, theta index {}",
                point / grid.n_theta(),
                point % grid.n_theta()
            )));
        }
        let imm = Self {
            source: self.source,
            f: part(0),
            f_t: part(1),
            f_th: part(2),
            f_tt: part(3),
            f_tth: part(4),
            f_thth: part(5),
        };
        imm.check_immersion()?;
        Ok(imm)
    }

    fn jets(&self) -> [&GridField; 6] {
        [&self.f, &self.f_t, &self.f_th, &self.f_tt, &self.f_tth, &self.f_thth]
    }

    pub fn jet_source(&self) -> JetSource {
        self.source
    }

    fn check_immersion(&self) -> Result<()> {
        let grid = self.grid();
        for i in 0..grid.n_t() {
            for j in 0..grid.n_theta() {
                let a = self.f_t.at(i, j);
                let b = self.f_th.at(i, j);
                let (gtt, gtth, gthth) = (dot(a, a), dot(a, b), dot(b, b));
                let detg = gtt * gthth - gtth * gtth;
                if !(detg > 1e-14 * gtt * gthth) || !detg.is_finite() {
                    return Err(LabError::Immersion {
                        station: i,
                        theta: j,
                        detg,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &CylinderGrid {
        self.f.grid()
    }

    pub fn ambient_dim(&self) -> usize {
        self.f.components()
    }

    pub fn samples(&self) -> &GridField {
        &self.f
    }

    pub fn f_t(&self) -> &GridField {
        &self.f_t
    }

    pub fn f_theta(&self) -> &GridField {
        &self.f_th
    }

    pub fn f_tt(&self) -> &GridField {
        &self.f_tt
    }

    pub fn f_ttheta(&self) -> &GridField {
        &self.f_tth
    }

    pub fn f_thetatheta(&self) -> &GridField {
        &self.f_thth
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Pointwise geometry at one grid point, the building block of
/// [`FundamentalForms`].
#[derive(Clone, Debug)]
pub(crate) struct PointForms {
    pub g: [[f64; 2]; 2],
    pub ginv: [[f64; 2]; 2],
    pub detg: f64,
    /// `A[i][j]`, `i, j` in `{t, theta}`.
    pub a: [[Vec<f64>; 2]; 2],
    pub h: Vec<f64>,
    pub norm_a2: f64,
    pub k: f64,
}

pub(crate) fn point_forms(d1: [&[f64]; 2], d2: [[&[f64]; 2]; 2]) -> PointForms {
    let n = d1[0].len();
    let mut g = [[0.0; 2]; 2];
    for p in 0..2 {
        for q in 0..2 {
            g[p][q] = dot(d1[p], d1[q]);
        }
    }
    let detg = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let ginv = [
        [g[1][1] / detg, -g[0][1] / detg],
        [-g[1][0] / detg, g[0][0] / detg],
    ];
    let normal_part = |v: &[f64]| -> Vec<f64> {
        let alpha = [dot(v, d1[0]), dot(v, d1[1])];
        let mut out = v.to_vec();
        for p in 0..2 {
            let coeff = ginv[p][0] * alpha[0] + ginv[p][1] * alpha[1];
            for c in 0..n {
                out[c] -= coeff * d1[p][c];
            }
        }
        out
    };
    let a_tt = normal_part(d2[0][0]);
    let a_tth = normal_part(d2[0][1]);
    let a_thth = normal_part(d2[1][1]);
    let a = [[a_tt.clone(), a_tth.clone()], [a_tth, a_thth]];
    let mut h = vec![0.0; n];
    for p in 0..2 {
        for q in 0..2 {
            for c in 0..n {
                h[c] += ginv[p][q] * a[p][q][c];
            }
        }
    }
    let mut norm_a2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    norm_a2 += ginv[i][k] * ginv[j][l] * dot(&a[i][j], &a[k][l]);
                }
            }
        }
    }
    let k = (dot(&a[0][0], &a[1][1]) - dot(&a[0][1], &a[0][1])) / detg;
    PointForms {
        g,
        ginv,
        detg,
        a,
        h,
        norm_a2,
        k,
    }
}

/// Per-gridpoint first and second fundamental forms and derived scalars.
#[derive(Clone, Debug)]
pub struct FundamentalForms {
    pub g_tt: GridField,
    pub g_ttheta: GridField,
    pub g_thetatheta: GridField,
    pub ginv_tt: GridField,
    pub ginv_ttheta: GridField,
    pub ginv_thetatheta: GridField,
    pub detg: GridField,
    /// Log conformal factor, `u = log(g_tt g_thetatheta) / 4`.
    pub u: GridField,
    pub u_t: GridField,
    pub u_theta: GridField,
    /// `max(|g_tt - g_thth|, |g_tth|) / g_tt`.
    pub conformal_defect: GridField,
    pub a_tt: GridField,
    pub a_ttheta: GridField,
    pub a_thetatheta: GridField,
    /// Mean curvature vector `g^{ij} A_ij`.
    pub h: GridField,
    pub norm_a2: GridField,
    /// Gauss curvature.
    pub k: GridField,
    /// Winding number `m` in `u = -m t + v`.
    pub winding: i64,
    /// The unrounded circle average `-(1/2 pi) int d_t u` at the midline.
    pub winding_raw: f64,
    /// `|m - winding_raw| > WINDING_AMBIGUITY`.
    pub winding_ambiguous: bool,
    /// `v = u + m t`.
    pub v: GridField,
}

/// Compute the fundamental forms of an immersion.
pub fn fundamental_forms(imm: &ImmersionField) -> Result<FundamentalForms> {
    let grid = imm.grid().clone();
    let n = imm.ambient_dim();
    // Packed layout: 11 scalars followed by A_tt, A_tth, A_thth, H.
    const S: usize = 11;
    let d = S + 4 * n;
    let packed = GridField::from_indices(&grid, d, |i, j, out| {
        let pf = point_forms(
            [imm.f_t.at(i, j), imm.f_th.at(i, j)],
            [
                [imm.f_tt.at(i, j), imm.f_tth.at(i, j)],
                [imm.f_tth.at(i, j), imm.f_thth.at(i, j)],
            ],
        );
        let (gtt, gtth, gthth) = (pf.g[0][0], pf.g[0][1], pf.g[1][1]);
        out[0] = gtt;
        out[1] = gtth;
        out[2] = gthth;
        out[3] = pf.ginv[0][0];
        out[4] = pf.ginv[0][1];
        out[5] = pf.ginv[1][1];
        out[6] = pf.detg;
        out[7] = 0.25 * (gtt * gthth).ln();
        out[8] = (gtt - gthth).abs().max(gtth.abs()) / gtt;
        out[9] = pf.norm_a2;
        out[10] = pf.k;
        out[S..S + n].copy_from_slice(&pf.a[0][0]);
        out[S + n..S + 2 * n].copy_from_slice(&pf.a[0][1]);
        out[S + 2 * n..S + 3 * n].copy_from_slice(&pf.a[1][1]);
        out[S + 3 * n..S + 4 * n].copy_from_slice(&pf.h);
    });
    let slice = |r: Range<usize>| -> GridField {
        let width = r.len();
        packed.map(width, |p, out| out.copy_from_slice(&p[r.clone()]))
    };
    let u = packed.component(7);
    let u_t = differentiate(&u, Direction::T, 1)?;
    let u_theta = differentiate(&u, Direction::Theta, 1)?;
    let mid = grid.n_t() / 2;
    let winding_raw = -crate::cylgrid::circle_integral(&u_t, mid) / (2.0 * PI);
    let winding = winding_raw.round() as i64;
    let winding_ambiguous = (winding as f64 - winding_raw).abs() > WINDING_AMBIGUITY;
    let m = winding as f64;
    let v = GridField::from_indices(&grid, 1, |i, j, out| {
        out[0] = u.get(i, j, 0) + m * grid.t(i);
    });
    Ok(FundamentalForms {
        g_tt: packed.component(0),
        g_ttheta: packed.component(1),
        g_thetatheta: packed.component(2),
        ginv_tt: packed.component(3),
        ginv_ttheta: packed.component(4),
        ginv_thetatheta: packed.component(5),
        detg: packed.component(6),
        u,
        u_t,
        u_theta,
        conformal_defect: packed.component(8),
        a_tt: slice(S..S + n),
        a_ttheta: slice(S + n..S + 2 * n),
        a_thetatheta: slice(S + 2 * n..S + 3 * n),
        h: slice(S + 3 * n..S + 4 * n),
        norm_a2: packed.component(9),
        k: packed.component(10),
        winding,
        winding_raw,
        winding_ambiguous,
        v,
    })
}

impl FundamentalForms {
    pub fn grid(&self) -> &CylinderGrid {
        self.u.grid()
    }

    /// Largest conformal defect over the given stations.
    pub fn max_defect_in(&self, stations: Range<usize>) -> f64 {
        self.conformal_defect.max_abs_in(stations)
    }

    pub fn max_defect(&self) -> f64 {
        self.conformal_defect.max_abs()
    }

    /// Area element `sqrt(det g)`.
    pub fn area_density(&self) -> GridField {
        self.detg.map(1, |p, out| out[0] = p[0].sqrt())
    }

    /// `|H|^2` as a scalar field.
    pub fn h_norm2(&self) -> GridField {
        self.h.map(1, |p, out| out[0] = dot(p, p))
    }

    /// Largest `|H . d_i f| / (|H| |d_i f|)` over the grid; zero where `H`
    /// vanishes.
    pub fn max_normal_leak(&self, imm: &ImmersionField) -> f64 {
        let grid = self.grid();
        let rows = par::map_range(grid.n_t(), |i| {
            let mut worst = 0.0_f64;
            for j in 0..grid.n_theta() {
                let h = self.h.at(i, j);
                let hn = norm(h);
                if hn < 1e-12 {
                    continue;
                }
                for df in [imm.f_t.at(i, j), imm.f_th.at(i, j)] {
                    worst = worst.max(dot(h, df).abs() / (hn * norm(df)));
                }
            }
            worst
        });
        rows.into_iter().fold(0.0, f64::max)
    }

    /// Smallest `|A|^2 - |H|^2 / 2` over the grid (nonnegative for surfaces).
    pub fn min_umbilic_excess(&self) -> f64 {
        self.norm_a2
            .values()
            .iter()
            .zip(self.h.values().chunks(self.h.components()))
            .map(|(a2, h)| a2 - 0.5 * dot(h, h))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest `|d_t f|^2`-relative residual of the pointwise Gauss-Bonnet
    /// relation `-Delta u = K e^{2u}` over interior stations.
    pub fn gauss_bonnet_pointwise_residual(&self) -> Result<GridField> {
        let u_tt = differentiate(&self.u, Direction::T, 2)?;
        let u_thth = differentiate(&self.u, Direction::Theta, 2)?;
        let grid = self.grid();
        Ok(GridField::from_indices(grid, 1, |i, j, out| {
            let lap = u_tt.get(i, j, 0) + u_thth.get(i, j, 0);
            let e2u = (2.0 * self.u.get(i, j, 0)).exp();
            out[0] = -lap - self.k.get(i, j, 0) * e2u;
        }))
    }

    fn scalar_energy_density(&self, density: &GridField, region: Subregion) -> Result<f64> {
        let grid = self.grid();
        let (first, last) = region.stations(grid)?;
        let weight = self.area_density();
        integrate(
            density,
            Region::WeightedBand {
                weight: &weight,
                first,
                last,
            },
        )
    }

    /// `int |A|^2 dV_g` over a subregion.
    pub fn total_curvature(&self, region: Subregion) -> Result<f64> {
        self.scalar_energy_density(&self.norm_a2, region)
    }
}

/// A t-band of the grid, given by its end values or the whole cylinder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Subregion {
    Whole,
    Band { t0: f64, t1: f64 },
}

impl Subregion {
    pub fn stations(&self, grid: &CylinderGrid) -> Result<(usize, usize)> {
        match *self {
            Subregion::Whole => Ok((0, grid.n_t() - 1)),
            Subregion::Band { t0, t1 } => {
                if t1 <= t0 {
                    return Err(LabError::Domain(format!("empty band [{t0}, {t1}]")));
                }
                Ok((grid.station_of(t0)?, grid.station_of(t1)?))
            }
        }
    }
}

/// Willmore energy `int |H|^2 dV_g` over a subregion (full metric, no
/// conformality assumed).
pub fn willmore_energy(forms: &FundamentalForms, region: Subregion) -> Result<f64> {
    forms.scalar_energy_density(&forms.h_norm2(), region)
}

/// Index pairs `(i, j)`, `i < j`, of the lexicographic basis of `Lambda^2 R^n`.
pub fn wedge_basis(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

/// Gram-Schmidt frame `(e_t, e_theta)` of the tangent plane.
pub(crate) fn tangent_frame(f_t: &[f64], f_th: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nt = norm(f_t);
    let e_t: Vec<f64> = f_t.iter().map(|x| x / nt).collect();
    let proj = dot(f_th, &e_t);
    let mut e_th: Vec<f64> = f_th.iter().zip(&e_t).map(|(x, e)| x - proj * e).collect();
    let nth = norm(&e_th);
    e_th.iter_mut().for_each(|x| *x /= nth);
    (e_t, e_th)
}

/// The Gauss map `N = e_t ^ e_theta` and its derivatives.
#[derive(Clone, Debug)]
pub struct GaussMapField {
    /// Components in the lexicographic `Lambda^2` basis.
    pub n: GridField,
    pub n_t: GridField,
    pub n_theta: GridField,
    /// `|d_t N|^2 + |d_theta N|^2`.
    pub energy_density: GridField,
    /// Frame used for the wedge, `2n` components: `e_t` then `e_theta`.
    frame: GridField,
}

/// Derivative of the Gram-Schmidt frame along one coordinate direction,
/// given `d f_t` and `d f_theta` in that direction.
fn frame_derivative(
    f_t: &[f64],
    f_th: &[f64],
    e_t: &[f64],
    e_th: &[f64],
    df_t: &[f64],
    df_th: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = f_t.len();
    let lt = norm(f_t);
    let a = dot(e_t, df_t);
    let de_t: Vec<f64> = (0..n).map(|c| (df_t[c] - a * e_t[c]) / lt).collect();
    // w = f_th - (f_th . e_t) e_t, e_th = w / |w|.
    let proj = dot(f_th, e_t);
    let dproj = dot(df_th, e_t) + dot(f_th, &de_t);
    let w: Vec<f64> = (0..n).map(|c| f_th[c] - proj * e_t[c]).collect();
    let lw = norm(&w);
    let dw: Vec<f64> = (0..n)
        .map(|c| df_th[c] - dproj * e_t[c] - proj * de_t[c])
        .collect();
    let b = dot(e_th, &dw);
    let de_th: Vec<f64> = (0..n).map(|c| (dw[c] - b * e_th[c]) / lw).collect();
    (de_t, de_th)
}

/// Gauss map of an immersion; the tangent frame is orthonormalized by
/// Gram-Schmidt (`e_t` first) so non-conformal inputs are handled. The first
/// derivatives of `N` are obtained from the derivatives of the frame, which
/// only involve the 2-jet of `f`.
pub fn gauss_map(imm: &ImmersionField, _forms: &FundamentalForms) -> Result<GaussMapField> {
    let grid = imm.grid();
    let n = imm.ambient_dim();
    let basis = wedge_basis(n);
    let d = basis.len();
    let wedge = |a: &[f64], b: &[f64], out: &mut [f64]| {
        for (k, &(p, q)) in basis.iter().enumerate() {
            out[k] += a[p] * b[q] - a[q] * b[p];
        }
    };
    // Packed: e_t, e_th (2n), N, N_t, N_th (3d).
    let packed = GridField::from_indices(grid, 2 * n + 3 * d, |i, j, out| {
        out.iter_mut().for_each(|x| *x = 0.0);
        let (f_t, f_th) = (imm.f_t.at(i, j), imm.f_th.at(i, j));
        let (e_t, e_th) = tangent_frame(f_t, f_th);
        let (frame, rest) = out.split_at_mut(2 * n);
        frame[..n].copy_from_slice(&e_t);
        frame[n..].copy_from_slice(&e_th);
        let (nv, rest) = rest.split_at_mut(d);
        let (n_t, n_th) = rest.split_at_mut(d);
        wedge(&e_t, &e_th, nv);
        let dirs = [
            (imm.f_tt.at(i, j), imm.f_tth.at(i, j)),
            (imm.f_tth.at(i, j), imm.f_thth.at(i, j)),
        ];
        for ((df_t, df_th), slot) in dirs.into_iter().zip([n_t, n_th]) {
            let (de_t, de_th) = frame_derivative(f_t, f_th, &e_t, &e_th, df_t, df_th);
            wedge(&de_t, &e_th, slot);
            wedge(&e_t, &de_th, slot);
        }
    });
    let part = |r: Range<usize>| packed.map(r.len(), |p, o| o.copy_from_slice(&p[r.clone()]));
    let frame = part(0..2 * n);
    let nfield = part(2 * n..2 * n + d);
    let n_t = part(2 * n + d..2 * n + 2 * d);
    let n_theta = part(2 * n + 2 * d..2 * n + 3 * d);
    let energy_density = GridField::from_indices(grid, 1, |i, j, out| {
        let a = n_t.at(i, j);
        let b = n_theta.at(i, j);
        out[0] = dot(a, a) + dot(b, b);
    });
    Ok(GaussMapField {
        n: nfield,
        n_t,
        n_theta,
        energy_density,
        frame,
    })
}

impl GaussMapField {
    /// Largest `| |N| - 1 |`.
    pub fn max_unit_defect(&self) -> f64 {
        self.n
            .values()
            .chunks(self.n.components())
            .map(|p| (norm(p) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `|d_t N|^2 - |d_theta N|^2`.
    pub fn radial_minus_tangential(&self) -> GridField {
        let grid = self.n.grid();
        GridField::from_indices(grid, 1, |i, j, out| {
            let a = self.n_t.at(i, j);
            let b = self.n_theta.at(i, j);
            out[0] = dot(a, a) - dot(b, b);
        })
    }

    /// `int |grad N|^2 dt dtheta`.
    pub fn dirichlet_energy(&self) -> Result<f64> {
        integrate(&self.energy_density, Region::Cylinder)
    }
}

/// The frame-side expression `e^{-2u} (|A_tt|^2 - |A_thth|^2)` that equals
/// `|d_t N|^2 - |d_theta N|^2` for conformal immersions.
pub fn frame_gap(forms: &FundamentalForms) -> GridField {
    let grid = forms.grid();
    GridField::from_indices(grid, 1, |i, j, out| {
        let a = forms.a_tt.at(i, j);
        let b = forms.a_thetatheta.at(i, j);
        out[0] = (-2.0 * forms.u.get(i, j, 0)).exp() * (dot(a, a) - dot(b, b));
    })
}

fn require_conformal(forms: &FundamentalForms, stations: Range<usize>, tol: f64) -> Result<()> {
    let defect = forms.max_defect_in(stations);
    if defect > tol {
        return Err(LabError::Conformality { defect, tol });
    }
    Ok(())
}

/// Interior stations `BOUNDARY_MARGIN..n_t - BOUNDARY_MARGIN`.
pub fn interior_stations(grid: &CylinderGrid) -> Range<usize> {
    BOUNDARY_MARGIN..grid.n_t().saturating_sub(BOUNDARY_MARGIN)
}

/// The left side of the Euler-Lagrange equation in flat conformal
/// coordinates,
/// `2 Delta H + 4 div(H.A_pq g^{ip} d_i f) - div(|H|^2 grad f)`,
/// evaluated at every grid point (values near the ends carry one-sided
/// stencil error). No conformality check.
pub fn el_operator(imm: &ImmersionField, forms: &FundamentalForms) -> Result<GridField> {
    let grid = imm.grid();
    let n = imm.ambient_dim();
    let h = &forms.h;
    let h_tt = differentiate(h, Direction::T, 2)?;
    let h_thth = differentiate(h, Direction::Theta, 2)?;
    // Flux fields: W_t, W_theta (from the A-term) and Y_t, Y_theta (|H|^2 df).
    let w = GridField::from_indices(grid, 2 * n, |i, j, out| {
        let hv = h.at(i, j);
        let a = [
            [forms.a_tt.at(i, j), forms.a_ttheta.at(i, j)],
            [forms.a_ttheta.at(i, j), forms.a_thetatheta.at(i, j)],
        ];
        let ginv = [
            [forms.ginv_tt.get(i, j, 0), forms.ginv_ttheta.get(i, j, 0)],
            [forms.ginv_ttheta.get(i, j, 0), forms.ginv_thetatheta.get(i, j, 0)],
        ];
        let df = [imm.f_t.at(i, j), imm.f_th.at(i, j)];
        for q in 0..2 {
            let o = &mut out[q * n..(q + 1) * n];
            o.iter_mut().for_each(|x| *x = 0.0);
            for p in 0..2 {
                let hap = dot(hv, a[p][q]);
                for ii in 0..2 {
                    let coeff = hap * ginv[ii][p];
                    for c in 0..n {
                        o[c] += coeff * df[ii][c];
                    }
                }
            }
        }
    });
    let y = GridField::from_indices(grid, 2 * n, |i, j, out| {
        let h2 = dot(h.at(i, j), h.at(i, j));
        for (c, v) in imm.f_t.at(i, j).iter().enumerate() {
            out[c] = h2 * v;
        }
        for (c, v) in imm.f_th.at(i, j).iter().enumerate() {
            out[n + c] = h2 * v;
        }
    });
    // One pass of each derivative on the stacked [W | Y] flux.
    let flux_t = GridField::from_indices(grid, 2 * n, |i, j, out| {
        out[..n].copy_from_slice(&w.at(i, j)[..n]);
        out[n..].copy_from_slice(&y.at(i, j)[..n]);
    });
    let flux_th = GridField::from_indices(grid, 2 * n, |i, j, out| {
        out[..n].copy_from_slice(&w.at(i, j)[n..]);
        out[n..].copy_from_slice(&y.at(i, j)[n..]);
    });
    let dflux_t = differentiate(&flux_t, Direction::T, 1)?;
    let dflux_th = differentiate(&flux_th, Direction::Theta, 1)?;
    Ok(GridField::from_indices(grid, n, |i, j, out| {
        let htt = h_tt.at(i, j);
        let hthth = h_thth.at(i, j);
        let ft = dflux_t.at(i, j);
        let fth = dflux_th.at(i, j);
        for c in 0..n {
            let lap = htt[c] + hthth[c];
            let div_w = ft[c] + fth[c];
            let div_y = ft[n + c] + fth[n + c];
            out[c] = 2.0 * lap + 4.0 * div_w - div_y;
        }
    }))
}

/// Pointwise Euler-Lagrange residual on interior stations.
#[derive(Clone, Debug)]
pub struct ElResidual {
    /// The vector-valued left side of the Euler-Lagrange equation.
    pub vector: GridField,
    /// Its pointwise Euclidean norm.
    pub norm: GridField,
    /// Stations on which the residual is reported.
    pub stations: Range<usize>,
}

impl ElResidual {
    pub fn max(&self) -> f64 {
        self.norm.max_abs_in(self.stations.clone())
    }
}

/// Euler-Lagrange residual; refuses inputs with conformal defect above `defect_tol`.
pub fn el_residual(
    imm: &ImmersionField,
    forms: &FundamentalForms,
    defect_tol: f64,
) -> Result<ElResidual> {
    let stations = interior_stations(imm.grid());
    if stations.is_empty() {
        return Err(LabError::Sizing("grid has no interior stations".into()));
    }
    require_conformal(forms, stations.clone(), defect_tol)?;
    let vector = el_operator(imm, forms)?;
    let norm_field = vector.map(1, |p, out| out[0] = norm(p));
    Ok(ElResidual {
        vector,
        norm: norm_field,
        stations,
    })
}

/// Both sides of the Gauss-map equation computed in ambient coordinates.
#[derive(Clone, Debug)]
pub struct GaussTension {
    /// Tangential (to `G(2,n)` at `N`) part of the flat Laplacian of `N`.
    pub tension: GridField,
    /// Normal projections of `d_t H` then `d_theta H` (`2n` components).
    pub normal_grad_h: GridField,
    pub tension_norm: GridField,
    pub normal_grad_h_norm: GridField,
    pub stations: Range<usize>,
}

impl GaussTension {
    pub fn max_tension(&self) -> f64 {
        self.tension_norm.max_abs_in(self.stations.clone())
    }

    pub fn max_normal_grad_h(&self) -> f64 {
        self.normal_grad_h_norm.max_abs_in(self.stations.clone())
    }

    /// `||tension||_2 / ||grad-perp H||_2` over the interior, or `None` when
    /// the denominator vanishes.
    pub fn norm_ratio(&self) -> Option<f64> {
        let grid = self.tension.grid();
        let (first, last) = (self.stations.start, self.stations.end - 1);
        let sq = |f: &GridField| {
            let f2 = f.map(1, |p, o| o[0] = p[0] * p[0]);
            integrate(&f2, Region::Band { first, last }).unwrap_or(f64::NAN)
        };
        let den = sq(&self.normal_grad_h_norm);
        let num = sq(&self.tension_norm);
        let _ = grid;
        (den > 0.0).then(|| (num / den).sqrt())
    }
}

/// Tension of the Gauss map and the normal gradient of `H`.
pub fn gauss_tension(
    imm: &ImmersionField,
    forms: &FundamentalForms,
    gmap: &GaussMapField,
    defect_tol: f64,
) -> Result<GaussTension> {
    let grid = imm.grid();
    let stations = interior_stations(grid);
    if stations.is_empty() {
        return Err(LabError::Sizing("grid has no interior stations".into()));
    }
    require_conformal(forms, stations.clone(), defect_tol)?;
    let n = imm.ambient_dim();
    let basis = wedge_basis(n);
    let n_tt = differentiate(&gmap.n_t, Direction::T, 1)?;
    let n_thth = differentiate(&gmap.n_theta, Direction::Theta, 1)?;
    let tension = GridField::from_indices(grid, basis.len(), |i, j, out| {
        let (e_t, e_th) = gmap.frame.at(i, j).split_at(n);
        // Skew matrix M of Delta N.
        let mut m = vec![0.0; n * n];
        for (k, &(a, b)) in basis.iter().enumerate() {
            let x = n_tt.get(i, j, k) + n_thth.get(i, j, k);
            m[a * n + b] = x;
            m[b * n + a] = -x;
        }
        // Projection onto span{e_t ^ e_alpha, e_th ^ e_alpha}:
        // e_t ^ P_perp(M^T e_t) + e_th ^ P_perp(M^T e_th).
        let perp = |v: &mut Vec<f64>| {
            let (a, b) = (dot(v, e_t), dot(v, e_th));
            for c in 0..n {
                v[c] -= a * e_t[c] + b * e_th[c];
            }
        };
        let mt = |e: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|col| (0..n).map(|row| m[row * n + col] * e[row]).sum())
                .collect()
        };
        let mut w_t = mt(e_t);
        perp(&mut w_t);
        let mut w_th = mt(e_th);
        perp(&mut w_th);
        for (k, &(a, b)) in basis.iter().enumerate() {
            out[k] = e_t[a] * w_t[b] - e_t[b] * w_t[a] + e_th[a] * w_th[b] - e_th[b] * w_th[a];
        }
    });
    let h_t = differentiate(&forms.h, Direction::T, 1)?;
    let h_th = differentiate(&forms.h, Direction::Theta, 1)?;
    let normal_grad_h = GridField::from_indices(grid, 2 * n, |i, j, out| {
        let (e_t, e_th) = gmap.frame.at(i, j).split_at(n);
        for (slot, dh) in [h_t.at(i, j), h_th.at(i, j)].into_iter().enumerate() {
            let (a, b) = (dot(dh, e_t), dot(dh, e_th));
            for c in 0..n {
                out[slot * n + c] = dh[c] - a * e_t[c] - b * e_th[c];
            }
        }
    });
    let tension_norm = tension.map(1, |p, o| o[0] = norm(p));
    let normal_grad_h_norm = normal_grad_h.map(1, |p, o| o[0] = norm(p));
    Ok(GaussTension {
        tension,
        normal_grad_h,
        tension_norm,
        normal_grad_h_norm,
        stations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn catenoid(grid: &CylinderGrid) -> ImmersionField {
        ImmersionField::from_fn(grid, 3, |t, th, o| {
            o[0] = t.cosh() * th.cos();
            o[1] = t.cosh() * th.sin();
            o[2] = t;
        })
        .unwrap()
    }

    fn sphere(grid: &CylinderGrid) -> ImmersionField {
        ImmersionField::from_fn(grid, 3, |t, th, o| {
            let s = 1.0 / t.cosh();
            o[0] = s * th.cos();
            o[1] = s * th.sin();
            o[2] = t.tanh();
        })
        .unwrap()
    }

    fn flat_cover(grid: &CylinderGrid, m: i32, n: usize) -> ImmersionField {
        let mf = m as f64;
        ImmersionField::from_fn(grid, n, move |t, th, o| {
            o.iter_mut().for_each(|x| *x = 0.0);
            o[0] = (-mf * t).exp() / mf * (mf * th).cos();
            o[1] = (-mf * t).exp() / mf * (mf * th).sin();
        })
        .unwrap()
    }

    #[test]
    fn flat_cover_forms() {
        let grid = CylinderGrid::new(0.0, 2.0, 201, 32).unwrap();
        let imm = flat_cover(&grid, 2, 4);
        let forms = fundamental_forms(&imm).unwrap();
        assert_eq!(forms.winding, 2);
        assert!(!forms.winding_ambiguous);
        for i in 0..grid.n_t() {
            for j in 0..grid.n_theta() {
                assert_abs_diff_eq!(forms.u.get(i, j, 0), -2.0 * grid.t(i), epsilon = 1e-7);
            }
        }
        // A, H, K vanish up to discretization (scale e^{-2t} ~ 1).
        assert!(forms.h.max_abs() < 1e-6, "{}", forms.h.max_abs());
        assert!(forms.norm_a2.max_abs() < 1e-10);
        assert!(forms.k.max_abs() < 1e-10);
        assert!(forms.max_defect() < 1e-6);
    }

    #[test]
    fn catenoid_closed_forms() {
        let grid = CylinderGrid::new(-2.0, 2.0, 401, 16).unwrap();
        let imm = catenoid(&grid);
        let forms = fundamental_forms(&imm).unwrap();
        assert_eq!(forms.winding, 0);
        for i in 0..grid.n_t() {
            let t = grid.t(i);
            for j in [0, 5] {
                assert!(norm(forms.h.at(i, j)) < 1e-7);
                assert_abs_diff_eq!(forms.norm_a2.get(i, j, 0), 2.0 / t.cosh().powi(4), epsilon = 1e-7);
                assert_abs_diff_eq!(forms.u.get(i, j, 0), t.cosh().ln(), epsilon = 1e-8);
                assert_abs_diff_eq!(forms.k.get(i, j, 0), -1.0 / t.cosh().powi(4), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn catenoid_end_has_negative_winding() {
        let grid = CylinderGrid::new(0.0, 8.0, 321, 16).unwrap();
        let forms = fundamental_forms(&catenoid(&grid)).unwrap();
        assert_eq!(forms.winding, -1);
    }

    #[test]
    fn sphere_closed_forms() {
        let grid = CylinderGrid::new(0.0, 8.0, 801, 16).unwrap();
        let imm = sphere(&grid);
        let forms = fundamental_forms(&imm).unwrap();
        assert_eq!(forms.winding, 1);
        for i in (0..grid.station_of(6.0).unwrap()).step_by(7) {
            let t = grid.t(i);
            assert_abs_diff_eq!(norm(forms.h.at(i, 3)), 2.0, epsilon = 1e-5);
            assert_abs_diff_eq!(forms.norm_a2.get(i, 3, 0), 2.0, epsilon = 1e-5);
            assert_abs_diff_eq!(forms.k.get(i, 3, 0), 1.0, epsilon = 1e-5);
            assert_abs_diff_eq!(forms.u.get(i, 3, 0), -t.cosh().ln(), epsilon = 1e-7);
        }
        assert!(forms.max_normal_leak(&imm) < 1e-8);
        assert!(forms.min_umbilic_excess() > -1e-6);
    }

    #[test]
    fn degenerate_metric_is_rejected() {
        let grid = CylinderGrid::new(0.0, 1.0, 11, 16).unwrap();
        let err = ImmersionField::from_fn(&grid, 3, |t, _, o| {
            o[0] = t;
            o[1] = 0.0;
            o[2] = 0.0;
        });
        assert!(matches!(err, Err(LabError::Immersion { .. })));
    }

    #[test]
    fn sphere_band_energy() {
        let grid = CylinderGrid::new(-2.0, 2.0, 801, 16).unwrap();
        let forms = fundamental_forms(&sphere(&grid)).unwrap();
        let w = willmore_energy(&forms, Subregion::Band { t0: -1.0, t1: 1.5 }).unwrap();
        let exact = 4.0 * 2.0 * PI * (1.5_f64.tanh() - (-1.0_f64).tanh());
        assert_abs_diff_eq!(w, exact, epsilon = 1e-8);
        assert!(willmore_energy(&forms, Subregion::Band { t0: -1.0, t1: 2.5 }).is_err());
    }

    #[test]
    fn gauss_map_of_flat_cover_is_constant() {
        let grid = CylinderGrid::new(0.0, 1.0, 101, 32).unwrap();
        let imm = flat_cover(&grid, 3, 3);
        let forms = fundamental_forms(&imm).unwrap();
        let g = gauss_map(&imm, &forms).unwrap();
        assert!(g.energy_density.max_abs() < 1e-16);
        assert!(g.max_unit_defect() < 1e-14);
    }

    #[test]
    fn gap_identity_and_energy_identity_on_catenoid() {
        let grid = CylinderGrid::new(-1.0, 1.0, 801, 16).unwrap();
        let imm = catenoid(&grid);
        let forms = fundamental_forms(&imm).unwrap();
        let g = gauss_map(&imm, &forms).unwrap();
        let gap = g.radial_minus_tangential();
        assert!(gap.max_abs() < 1e-7, "{}", gap.max_abs());
        let lhs = g.dirichlet_energy().unwrap();
        let rhs = forms.total_curvature(Subregion::Whole).unwrap();
        assert!(((lhs - rhs) / rhs).abs() < 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn conformality_is_enforced() {
        let grid = CylinderGrid::new(0.0, 1.0, 41, 16).unwrap();
        // Stretched cylinder: g_tt = 4, g_thth = 1.
        let imm = ImmersionField::from_fn(&grid, 3, |t, th, o| {
            o[0] = th.cos();
            o[1] = th.sin();
            o[2] = 2.0 * t;
        })
        .unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        assert!(matches!(
            el_residual(&imm, &forms, DEFAULT_DEFECT_TOL),
            Err(LabError::Conformality { .. })
        ));
        let g = gauss_map(&imm, &forms).unwrap();
        assert!(gauss_tension(&imm, &forms, &g, DEFAULT_DEFECT_TOL).is_err());
    }

    #[test]
    fn catenoid_is_critical_and_harmonic_gauss_map() {
        let grid = CylinderGrid::new(-2.0, 2.0, 401, 16).unwrap();
        let imm = catenoid(&grid);
        let forms = fundamental_forms(&imm).unwrap();
        let res = el_residual(&imm, &forms, DEFAULT_DEFECT_TOL).unwrap();
        assert!(res.max() < 1e-6, "{}", res.max());
        let g = gauss_map(&imm, &forms).unwrap();
        let ten = gauss_tension(&imm, &forms, &g, DEFAULT_DEFECT_TOL).unwrap();
        assert!(ten.max_tension() < 1e-6, "{}", ten.max_tension());
        assert!(ten.max_normal_grad_h() < 1e-6);
    }
}
