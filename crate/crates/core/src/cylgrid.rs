//! Discrete calculus on the cylinder `[t_min, t_max] x S^1`.
//!
//! Fields are sampled on a uniform tensor grid, t-major: the sample for
//! station `i`, angle index `j`, component `c` lives at
//! `(i * n_theta + j) * d + c`. The angular direction is periodic and the seam
//! column is never duplicated.
//!
//! Angular derivatives are spectral (exact for trigonometric polynomials of
//! degree below `n_theta / 2`); t-derivatives use fourth-order finite
//! differences with one-sided stencils of matching order at the two stations
//! nearest each end.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{LabError, Result};
use crate::par;

/// Relative slack (in units of `h_t`) when snapping a t-value to a station.
const STATION_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CylinderGrid {
    t_min: f64,
    t_max: f64,
    n_t: usize,
    n_theta: usize,
}

impl CylinderGrid {
    pub fn new(t_min: f64, t_max: f64, n_t: usize, n_theta: usize) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite()) || t_max <= t_min {
            return Err(LabError::Sizing(format!(
                "t range [{t_min}, {t_max}] is empty or not finite"
            )));
        }
        if n_t < 9 {
            return Err(LabError::Sizing(format!("n_t = {n_t} < 9")));
        }
        if n_theta < 16 || !n_theta.is_multiple_of(2) {
            return Err(LabError::Sizing(format!(
                "n_theta = {n_theta} must be even and at least 16"
            )));
        }
        Ok(Self {
            t_min,
            t_max,
            n_t,
            n_theta,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn h_t(&self) -> f64 {
        (self.t_max - self.t_min) / (self.n_t - 1) as f64
    }

    pub fn h_theta(&self) -> f64 {
        2.0 * PI / self.n_theta as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        if i + 1 == self.n_t {
            self.t_max
        } else {
            self.t_min + i as f64 * self.h_t()
        }
    }

    pub fn theta(&self, j: usize) -> f64 {
        j as f64 * self.h_theta()
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.n_t * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Station index whose t-value equals `t` (up to a tiny fraction of `h_t`).
    pub fn station_of(&self, t: f64) -> Result<usize> {
        let x = (t - self.t_min) / self.h_t();
        let i = x.round();
        if (x - i).abs() > STATION_SNAP || i < 0.0 || i > (self.n_t - 1) as f64 {
            return Err(LabError::Domain(format!(
                "t = {t} is not a station of the grid [{}, {}] with {} stations",
                self.t_min, self.t_max, self.n_t
            )));
        }
        Ok(i as usize)
    }

    /// Station closest to `t`, clamped to the grid.
    pub fn nearest_station(&self, t: f64) -> usize {
        let x = ((t - self.t_min) / self.h_t()).round();
        x.clamp(0.0, (self.n_t - 1) as f64) as usize
    }
}

/// Samples of a `d`-component field on a [`CylinderGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    grid: CylinderGrid,
    components: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: CylinderGrid, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 {
            return Err(LabError::Sizing("field needs at least one component".into()));
        }
        if values.len() != grid.len() * components {
            return Err(LabError::Sizing(format!(
                "expected {} values, got {}",
                grid.len() * components,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let point = k / components;
            return Err(LabError::Domain(format!(
                "non-finite sample at station {}, theta index {}, component {}",
                point / grid.n_theta(),
                point % grid.n_theta(),
                k % components
            )));
        }
        Ok(Self {
            grid,
            components,
            values,
        })
    }

    pub fn zeros(grid: &CylinderGrid, components: usize) -> Self {
        Self {
            grid: grid.clone(),
            components,
            values: vec![0.0; grid.len() * components],
        }
    }

    /// Sample `f(t, theta, out)` at every grid point. Non-finite samples are
    /// rejected.
    pub fn from_fn<F>(grid: &CylinderGrid, components: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, f64, &mut [f64]) + Sync + Send,
    {
        let mut values = vec![0.0; grid.len() * components];
        let row = grid.n_theta() * components;
        par::for_each_chunk_mut(&mut values, row, |i, chunk| {
            let t = grid.t(i);
            for (j, out) in chunk.chunks_mut(components).enumerate() {
                f(t, grid.theta(j), out);
            }
        });
        Self::new(grid.clone(), components, values)
    }

    pub fn scalar_from_fn<F>(grid: &CylinderGrid, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Sync + Send,
    {
        Self::from_fn(grid, 1, |t, th, out| out[0] = f(t, th))
    }

    /// Build a field point by point from the grid indices, without the
    /// finiteness check (used for derived quantities that are finite by
    /// construction).
    pub(crate) fn from_indices<F>(grid: &CylinderGrid, components: usize, f: F) -> Self
    where
        F: Fn(usize, usize, &mut [f64]) + Sync + Send,
    {
        let mut values = vec![0.0; grid.len() * components];
        let row = grid.n_theta() * components;
        par::for_each_chunk_mut(&mut values, row, |i, chunk| {
            for (j, out) in chunk.chunks_mut(components).enumerate() {
                f(i, j, out);
            }
        });
        Self {
            grid: grid.clone(),
            components,
            values,
        }
    }

    pub fn grid(&self) -> &CylinderGrid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.grid.n_theta() + j) * self.components;
        &self.values[k..k + self.components]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = (i * self.grid.n_theta() + j) * self.components;
        &mut self.values[k..k + self.components]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.grid.n_theta() + j) * self.components + c]
    }

    /// Scalar field holding component `c`.
    pub fn component(&self, c: usize) -> GridField {
        assert!(c < self.components, "component {c} out of range");
        let values = self
            .values
            .chunks(self.components)
            .map(|p| p[c])
            .collect();
        GridField {
            grid: self.grid.clone(),
            components: 1,
            values,
        }
    }

    /// Pointwise map to a new field with `d_out` components.
    pub fn map<F>(&self, d_out: usize, f: F) -> GridField
    where
        F: Fn(&[f64], &mut [f64]) + Sync + Send,
    {
        GridField::from_indices(&self.grid, d_out, |i, j, out| f(self.at(i, j), out))
    }

    /// Largest absolute sample over stations in `stations`.
    pub fn max_abs_in(&self, stations: std::ops::Range<usize>) -> f64 {
        let row = self.grid.n_theta() * self.components;
        self.values[stations.start * row..stations.end * row]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs_in(0..self.grid.n_t())
    }

    /// `self + alpha * other`, components matched.
    pub fn axpy(&self, alpha: f64, other: &GridField) -> GridField {
        assert_eq!(self.components, other.components);
        assert_eq!(self.grid, other.grid);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        GridField {
            grid: self.grid.clone(),
            components: self.components,
            values,
        }
    }

    /// Every `every_t`-th station and every `every_theta`-th angle, keeping
    /// both ends of the t-range.
    pub fn subsample(&self, every_t: usize, every_theta: usize) -> Result<GridField> {
        let (n_t, n_th) = (self.grid.n_t(), self.grid.n_theta());
        if every_t == 0 || every_theta == 0 || (n_t - 1) % every_t != 0 || n_th % every_theta != 0 {
            return Err(LabError::Sizing(format!(
                "cannot subsample a {n_t} x {n_th} grid by ({every_t}, {every_theta})"
            )));
        }
        let grid = CylinderGrid::new(
            self.grid.t_min(),
            self.grid.t_max(),
            (n_t - 1) / every_t + 1,
            n_th / every_theta,
        )?;
        Ok(GridField::from_indices(&grid, self.components, |i, j, out| {
            out.copy_from_slice(self.at(i * every_t, j * every_theta))
        }))
    }

    pub fn scale(&self, s: f64) -> GridField {
        GridField {
            grid: self.grid.clone(),
            components: self.components,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    T,
    Theta,
}

// Fourth-order stencils, numerators over 12 h^order.
const D1_INTERIOR: [f64; 5] = [1.0, -8.0, 0.0, 8.0, -1.0];
const D1_EDGE0: [f64; 5] = [-25.0, 48.0, -36.0, 16.0, -3.0];
const D1_EDGE1: [f64; 5] = [-3.0, -10.0, 18.0, -6.0, 1.0];
const D2_INTERIOR: [f64; 5] = [-1.0, 16.0, -30.0, 16.0, -1.0];
const D2_EDGE0: [f64; 6] = [45.0, -154.0, 214.0, -156.0, 61.0, -10.0];
const D2_EDGE1: [f64; 6] = [10.0, -15.0, -4.0, 14.0, -6.0, 1.0];

/// Smallest `n_t` for which the t-stencils fit.
pub const MIN_STATIONS: usize = 6;

/// Derivative of `field` along `direction` of order 1 or 2.
pub fn differentiate(field: &GridField, direction: Direction, order: u8) -> Result<GridField> {
    if !(1..=2).contains(&order) {
        return Err(LabError::Parameter(format!(
            "derivative order {order} not supported (use 1 or 2)"
        )));
    }
    match direction {
        Direction::T => differentiate_t(field, order),
        Direction::Theta => Ok(differentiate_theta(field, order)),
    }
}

/// Stations and weights (numerators over `12 h^order`) of the t-stencil at
/// station `i` of `n`. Stencils at the upper end mirror those at the lower end.
fn t_stencil(i: usize, n: usize, order: u8) -> Vec<(usize, f64)> {
    let (from_low, first, weights): (bool, isize, &[f64]) = match order {
        1 if i == 0 => (true, 0, &D1_EDGE0),
        1 if i == 1 => (true, -1, &D1_EDGE1),
        1 if i == n - 1 => (false, 0, &D1_EDGE0),
        1 if i == n - 2 => (false, -1, &D1_EDGE1),
        1 => (true, -2, &D1_INTERIOR),
        _ if i == 0 => (true, 0, &D2_EDGE0),
        _ if i == 1 => (true, -1, &D2_EDGE1),
        _ if i == n - 1 => (false, 0, &D2_EDGE0),
        _ if i == n - 2 => (false, -1, &D2_EDGE1),
        _ => (true, -2, &D2_INTERIOR),
    };
    // Mirroring flips the sign of odd derivatives.
    let sign = if from_low || order.is_multiple_of(2) { 1.0 } else { -1.0 };
    weights
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let off = first + k as isize;
            let station = if from_low {
                i as isize + off
            } else {
                i as isize - off
            };
            (station as usize, sign * w)
        })
        .collect()
}

fn differentiate_t(field: &GridField, order: u8) -> Result<GridField> {
    let grid = field.grid();
    let n = grid.n_t();
    if n < MIN_STATIONS {
        return Err(LabError::Sizing(format!(
            "t-stencil needs at least {MIN_STATIONS} stations, grid has {n}"
        )));
    }
    let d = field.components();
    let row = grid.n_theta() * d;
    let scale = 1.0 / (12.0 * grid.h_t().powi(order as i32));
    let src = field.values();
    let mut out = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut out, row, |i, dst| {
        for (station, w) in t_stencil(i, n, order) {
            let coeff = w * scale;
            let s = &src[station * row..(station + 1) * row];
            for (o, v) in dst.iter_mut().zip(s) {
                *o += coeff * v;
            }
        }
    });
    Ok(GridField {
        grid: grid.clone(),
        components: d,
        values: out,
    })
}

/// The t-derivative of `field` on the single circle at station `i`, laid out
/// like one station row of a [`GridField`] (`n_theta * components` values).
pub fn t_derivative_at(field: &GridField, i: usize, order: u8) -> Result<Vec<f64>> {
    let grid = field.grid();
    let n = grid.n_t();
    if n < MIN_STATIONS {
        return Err(LabError::Sizing(format!(
            "t-stencil needs at least {MIN_STATIONS} stations, grid has {n}"
        )));
    }
    if i >= n || !(1..=2).contains(&order) {
        return Err(LabError::Domain(format!("station {i} / order {order} out of range")));
    }
    let row = grid.n_theta() * field.components();
    let scale = 1.0 / (12.0 * grid.h_t().powi(order as i32));
    let mut out = vec![0.0; row];
    for (station, w) in t_stencil(i, n, order) {
        let s = &field.values()[station * row..(station + 1) * row];
        for (o, v) in out.iter_mut().zip(s) {
            *o += w * scale * v;
        }
    }
    Ok(out)
}

/// Spectral `d^order / d theta^order` on circles of `n` samples.
struct ThetaDiff {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    multipliers: Vec<Complex64>,
}

impl ThetaDiff {
    fn new(n: usize, order: u8) -> Self {
        let mut planner = FftPlanner::new();
        // Multiplier (i k)^order with the Nyquist mode dropped for odd orders.
        let multipliers = (0..n)
            .map(|j| {
                let k = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                match order {
                    1 if j == n / 2 => Complex64::new(0.0, 0.0),
                    1 => Complex64::new(0.0, k),
                    _ => Complex64::new(-k * k, 0.0),
                }
            })
            .collect();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            multipliers,
        }
    }

    /// Differentiate one station row (`n * d` interleaved values).
    fn apply_row(&self, src: &[f64], dst: &mut [f64], d: usize) {
        let n = self.multipliers.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![
            Complex64::new(0.0, 0.0);
            self.forward
                .get_inplace_scratch_len()
                .max(self.inverse.get_inplace_scratch_len())
        ];
        for c in 0..d {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(src[j * d + c], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (b, m) in buf.iter_mut().zip(&self.multipliers) {
                *b *= m;
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for (j, b) in buf.iter().enumerate() {
                dst[j * d + c] = b.re / n as f64;
            }
        }
    }
}

fn differentiate_theta(field: &GridField, order: u8) -> GridField {
    let grid = field.grid();
    let d = field.components();
    let op = ThetaDiff::new(grid.n_theta(), order);
    let row = grid.n_theta() * d;
    let src = field.values();
    let mut out = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut out, row, |i, dst| {
        op.apply_row(&src[i * row..(i + 1) * row], dst, d);
    });
    GridField {
        grid: grid.clone(),
        components: d,
        values: out,
    }
}

/// The theta-derivative of `field` on the single circle at station `i`.
pub fn theta_derivative_at(field: &GridField, i: usize, order: u8) -> Result<Vec<f64>> {
    let grid = field.grid();
    if i >= grid.n_t() || !(1..=2).contains(&order) {
        return Err(LabError::Domain(format!("station {i} / order {order} out of range")));
    }
    let d = field.components();
    let row = grid.n_theta() * d;
    let mut out = vec![0.0; row];
    ThetaDiff::new(grid.n_theta(), order).apply_row(&field.values()[i * row..(i + 1) * row], &mut out, d);
    Ok(out)
}

/// Composite quadrature weights for `n` equally spaced nodes with spacing `h`:
/// Simpson's rule, closing with the 3/8 rule when the interval count is odd.
pub fn t_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 2, "need at least two nodes");
    let intervals = n - 1;
    let mut w = vec![0.0; n];
    if intervals == 1 {
        w[0] = 0.5 * h;
        w[1] = 0.5 * h;
        return w;
    }
    let simpson_intervals = if intervals.is_multiple_of(2) {
        intervals
    } else {
        intervals - 3
    };
    for k in (0..simpson_intervals).step_by(2) {
        w[k] += h / 3.0;
        w[k + 1] += 4.0 * h / 3.0;
        w[k + 2] += h / 3.0;
    }
    if simpson_intervals < intervals {
        let s = simpson_intervals;
        for (k, c) in [1.0, 3.0, 3.0, 1.0].iter().enumerate() {
            w[s + k] += 3.0 * h / 8.0 * c;
        }
    }
    w
}

/// Integration region for [`integrate`].
#[derive(Clone, Copy, Debug)]
pub enum Region<'a> {
    /// The circle `{t_i} x S^1` at station `i`.
    Circle(usize),
    /// The whole cylinder.
    Cylinder,
    /// Stations `first..=last`.
    Band { first: usize, last: usize },
    /// The whole cylinder with a scalar weight field.
    Weighted(&'a GridField),
    /// Stations `first..=last` with a scalar weight field.
    WeightedBand {
        weight: &'a GridField,
        first: usize,
        last: usize,
    },
}

/// Circle integral (trapezoid, spectrally exact) of a scalar field at station `i`.
pub fn circle_integral(field: &GridField, i: usize) -> f64 {
    let grid = field.grid();
    let n = grid.n_theta();
    (0..n).map(|j| field.get(i, j, 0)).sum::<f64>() * grid.h_theta()
}

/// Integral of a scalar field over a region.
pub fn integrate(field: &GridField, region: Region<'_>) -> Result<f64> {
    if field.components() != 1 {
        return Err(LabError::Parameter(format!(
            "integrate expects a scalar field, got {} components",
            field.components()
        )));
    }
    let grid = field.grid();
    let n_t = grid.n_t();
    let check_band = |first: usize, last: usize| -> Result<()> {
        if last >= n_t || first >= last {
            return Err(LabError::Domain(format!(
                "band {first}..={last} outside grid with {n_t} stations"
            )));
        }
        Ok(())
    };
    let check_weight = |w: &GridField| -> Result<()> {
        if w.components() != 1 || w.grid() != grid {
            return Err(LabError::Parameter(
                "weight must be a scalar field on the same grid".into(),
            ));
        }
        Ok(())
    };
    match region {
        Region::Circle(i) => {
            if i >= n_t {
                return Err(LabError::Domain(format!(
                    "station {i} outside grid with {n_t} stations"
                )));
            }
            Ok(circle_integral(field, i))
        }
        Region::Cylinder => Ok(band_integral(field, None, 0, n_t - 1)),
        Region::Band { first, last } => {
            check_band(first, last)?;
            Ok(band_integral(field, None, first, last))
        }
        Region::Weighted(w) => {
            check_weight(w)?;
            Ok(band_integral(field, Some(w), 0, n_t - 1))
        }
        Region::WeightedBand {
            weight,
            first,
            last,
        } => {
            check_band(first, last)?;
            check_weight(weight)?;
            Ok(band_integral(field, Some(weight), first, last))
        }
    }
}

fn band_integral(field: &GridField, weight: Option<&GridField>, first: usize, last: usize) -> f64 {
    let grid = field.grid();
    let n = grid.n_theta();
    let w = t_weights(last - first + 1, grid.h_t());
    let circles = par::map_range(last - first + 1, |k| {
        let i = first + k;
        let s: f64 = match weight {
            Some(wf) => (0..n).map(|j| field.get(i, j, 0) * wf.get(i, j, 0)).sum(),
            None => (0..n).map(|j| field.get(i, j, 0)).sum(),
        };
        s * grid.h_theta()
    });
    circles.iter().zip(&w).map(|(c, wk)| c * wk).sum()
}

/// Fourier coefficients of the restriction to one circle.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierModes {
    /// `(cos, sin)` coefficients for `k = 0..=K`; the `k = 0` entry is the mean.
    pub coeffs: Vec<(f64, f64)>,
    /// RMS of the part of the samples not captured by modes `0..=K`.
    pub tail_rms: f64,
    /// True when the tail is not negligible relative to the samples.
    pub aliased: bool,
}

/// Fourier coefficients of a scalar field at station `i`, so that the circle
/// restriction equals `c_0 + sum_k (c_k cos k theta + s_k sin k theta)`.
pub fn fourier_modes(field: &GridField, station: usize, k_max: usize) -> Result<FourierModes> {
    let grid = field.grid();
    let n = grid.n_theta();
    if field.components() != 1 {
        return Err(LabError::Parameter("fourier_modes expects a scalar field".into()));
    }
    if station >= grid.n_t() {
        return Err(LabError::Domain(format!("station {station} outside grid")));
    }
    if k_max >= n / 2 {
        return Err(LabError::Aliasing {
            requested: k_max,
            n_theta: n,
            max: n / 2 - 1,
        });
    }
    let samples: Vec<f64> = (0..n).map(|j| field.get(station, j, 0)).collect();
    let coeffs: Vec<(f64, f64)> = (0..=k_max)
        .map(|k| {
            let (mut c, mut s) = (0.0, 0.0);
            for (j, v) in samples.iter().enumerate() {
                let a = k as f64 * grid.theta(j);
                c += v * a.cos();
                s += v * a.sin();
            }
            if k == 0 {
                (c / n as f64, 0.0)
            } else {
                (2.0 * c / n as f64, 2.0 * s / n as f64)
            }
        })
        .collect();
    let mut tail2 = 0.0;
    let mut total2 = 0.0;
    for (j, v) in samples.iter().enumerate() {
        let th = grid.theta(j);
        let recon: f64 = coeffs
            .iter()
            .enumerate()
            .map(|(k, (c, s))| c * (k as f64 * th).cos() + s * (k as f64 * th).sin())
            .sum();
        tail2 += (v - recon).powi(2);
        total2 += v * v;
    }
    let tail_rms = (tail2 / n as f64).sqrt();
    let total_rms = (total2 / n as f64).sqrt();
    Ok(FourierModes {
        coeffs,
        tail_rms,
        aliased: tail_rms > 1e-10 * total_rms.max(1e-300),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(n_t: usize, n_theta: usize) -> CylinderGrid {
        CylinderGrid::new(0.0, 1.0, n_t, n_theta).unwrap()
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(CylinderGrid::new(0.0, 1.0, 8, 16).is_err());
        assert!(CylinderGrid::new(0.0, 1.0, 9, 15).is_err());
        assert!(CylinderGrid::new(0.0, 1.0, 9, 14).is_err());
        assert!(CylinderGrid::new(1.0, 1.0, 9, 16).is_err());
    }

    #[test]
    fn rejects_non_finite_samples() {
        let g = grid(9, 16);
        let err = GridField::scalar_from_fn(&g, |t, _| if t > 0.5 { f64::NAN } else { 1.0 });
        assert!(matches!(err, Err(LabError::Domain(_))));
    }

    #[test]
    fn spectral_derivative_of_cos3() {
        let g = grid(9, 32);
        let f = GridField::scalar_from_fn(&g, |_, th| (3.0 * th).cos()).unwrap();
        let df = differentiate(&f, Direction::Theta, 1).unwrap();
        for i in 0..g.n_t() {
            for j in 0..g.n_theta() {
                assert_abs_diff_eq!(df.get(i, j, 0), -3.0 * (3.0 * g.theta(j)).sin(), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn constant_has_zero_derivatives() {
        let g = grid(12, 16);
        let f = GridField::scalar_from_fn(&g, |_, _| 7.0).unwrap();
        for dir in [Direction::T, Direction::Theta] {
            for order in [1, 2] {
                let df = differentiate(&f, dir, order).unwrap();
                assert!(df.max_abs() < 1e-9, "{dir:?} {order}: {}", df.max_abs());
            }
        }
    }

    #[test]
    fn t_stencils_exact_on_quartics_and_quintics() {
        let g = CylinderGrid::new(-1.0, 2.0, 13, 16).unwrap();
        let p = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t + 0.3 * t.powi(3) - 0.1 * t.powi(4);
        let dp = |t: f64| -2.0 + t + 0.9 * t * t - 0.4 * t.powi(3);
        let f = GridField::scalar_from_fn(&g, |t, _| p(t)).unwrap();
        let df = differentiate(&f, Direction::T, 1).unwrap();
        for i in 0..g.n_t() {
            assert_abs_diff_eq!(df.get(i, 0, 0), dp(g.t(i)), epsilon = 1e-10);
        }
        let q = |t: f64| p(t) + 0.05 * t.powi(5);
        let d2q = |t: f64| 1.0 + 1.8 * t - 1.2 * t * t + t.powi(3);
        let f = GridField::scalar_from_fn(&g, |t, _| q(t)).unwrap();
        let d2 = differentiate(&f, Direction::T, 2).unwrap();
        for i in 0..g.n_t() {
            assert_abs_diff_eq!(d2.get(i, 3, 0), d2q(g.t(i)), epsilon = 1e-9);
        }
    }

    #[test]
    fn exponential_t_derivative_error_bound() {
        // h_t = 0.01 on [0, 1].
        let g = CylinderGrid::new(0.0, 1.0, 101, 16).unwrap();
        let f = GridField::scalar_from_fn(&g, |t, _| (2.0 * t).exp()).unwrap();
        let df = differentiate(&f, Direction::T, 1).unwrap();
        let h = g.h_t();
        for i in 0..g.n_t() {
            let exact = 2.0 * (2.0 * g.t(i)).exp();
            let rel = (df.get(i, 0, 0) - exact).abs() / exact;
            assert!(rel <= 10.0 * h.powi(4), "station {i}: rel {rel:e}");
        }
    }

    #[test]
    fn too_few_stations_is_sizing_error() {
        // Bypass the grid constructor's n_t >= 9 guard by building directly.
        let g = CylinderGrid {
            t_min: 0.0,
            t_max: 1.0,
            n_t: 5,
            n_theta: 16,
        };
        let f = GridField::zeros(&g, 1);
        assert!(matches!(
            differentiate(&f, Direction::T, 1),
            Err(LabError::Sizing(_))
        ));
    }

    #[test]
    fn integrals() {
        let g = CylinderGrid::new(0.0, 1.0, 401, 16).unwrap();
        let one = GridField::scalar_from_fn(&g, |_, _| 1.0).unwrap();
        assert_abs_diff_eq!(integrate(&one, Region::Circle(7)).unwrap(), 2.0 * PI, epsilon = 1e-14);
        let c = GridField::scalar_from_fn(&g, |_, th| th.cos()).unwrap();
        assert_abs_diff_eq!(integrate(&c, Region::Circle(3)).unwrap(), 0.0, epsilon = 1e-14);
        let e = GridField::scalar_from_fn(&g, |t, _| (-4.0 * t).exp()).unwrap();
        let exact = 2.0 * PI * (1.0 - (-4.0_f64).exp()) / 4.0;
        assert_abs_diff_eq!(integrate(&e, Region::Cylinder).unwrap(), exact, epsilon = 1e-10);
        assert!(integrate(&e, Region::Circle(401)).is_err());
        assert!(integrate(&e, Region::Band { first: 3, last: 500 }).is_err());
    }

    #[test]
    fn odd_interval_count_uses_three_eighths_closure() {
        let g = CylinderGrid::new(0.0, 1.0, 400, 16).unwrap();
        let e = GridField::scalar_from_fn(&g, |t, _| (-4.0 * t).exp()).unwrap();
        let exact = 2.0 * PI * (1.0 - (-4.0_f64).exp()) / 4.0;
        assert_abs_diff_eq!(integrate(&e, Region::Cylinder).unwrap(), exact, epsilon = 1e-10);
    }

    #[test]
    fn fourier_coefficients() {
        let g = CylinderGrid::new(0.0, 2.0, 21, 32).unwrap();
        let f = GridField::scalar_from_fn(&g, |_, th| 2.0 + 3.0 * (2.0 * th).cos()).unwrap();
        let m = fourier_modes(&f, 4, 5).unwrap();
        assert_abs_diff_eq!(m.coeffs[0].0, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.coeffs[2].0, 3.0, epsilon = 1e-14);
        for (k, (c, s)) in m.coeffs.iter().enumerate() {
            if k != 0 && k != 2 {
                assert_abs_diff_eq!(*c, 0.0, epsilon = 1e-14);
            }
            assert_abs_diff_eq!(*s, 0.0, epsilon = 1e-14);
        }
        assert!(!m.aliased);

        let station = g.station_of(1.0).unwrap();
        let f = GridField::scalar_from_fn(&g, |t, th| t.exp() * th.cos()).unwrap();
        let m = fourier_modes(&f, station, 3).unwrap();
        assert_abs_diff_eq!(m.coeffs[1].0, 1f64.exp(), epsilon = 1e-12);

        let f = GridField::scalar_from_fn(&g, |_, th| (5.0 * th).sin()).unwrap();
        let m = fourier_modes(&f, 0, 4).unwrap();
        assert!(m.coeffs.iter().all(|(c, s)| c.abs() < 1e-14 && s.abs() < 1e-14));
        assert!(m.aliased);
        assert!(matches!(fourier_modes(&f, 0, 16), Err(LabError::Aliasing { .. })));
    }

    #[test]
    fn station_lookup() {
        let g = CylinderGrid::new(-4.0, 4.0, 81, 16).unwrap();
        assert_eq!(g.station_of(0.0).unwrap(), 40);
        assert_eq!(g.station_of(4.0).unwrap(), 80);
        assert!(g.station_of(0.05).is_err());
        assert!(g.station_of(4.1).is_err());
    }
}
