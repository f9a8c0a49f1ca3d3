//! Closed-form test immersions, inversion, perturbations and the text file
//! format for sampled immersions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cylgrid::{differentiate, CylinderGrid, Direction, GridField};
use crate::error::{LabError, Result};
use crate::geometry::{dot, norm, ImmersionField};

/// Smallest allowed distance between the surface and an inversion center.
pub const MIN_INVERSION_DISTANCE: f64 = 1e-3;

/// Which end of the catenoid is inverted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum End {
    /// Use the grid's t-range as is.
    Upper,
    /// Use the mirror image `t -> -t`.
    Lower,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExampleKind {
    /// `e^{-mt}/m (cos m theta, sin m theta, 0, ...)`.
    FlatCover { m: u32 },
    /// `(cosh t cos theta, cosh t sin theta, t)`.
    Catenoid,
    /// `(sech t cos theta, sech t sin theta, tanh t)`.
    Sphere,
    /// One end of the catenoid inverted in the unit sphere about the origin.
    InvertedCatenoid { end: End },
    /// The flat `m`-cover carrying the harmonic graph `eps e^{kt} cos k theta`
    /// in the third coordinate, completed by its conjugate in the fourth so
    /// the chart stays conformal. Needs `n >= 4`.
    HarmonicGraph { m: u32, k: i32, epsilon: f64 },
    /// Samples read with [`load_from_file`].
    FromFile(PathBuf),
}

/// Smooth perturbation profiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbMode {
    /// `bump((t - center)/width) cos(k theta)` along a unit normal field.
    NormalTrig { k: u32, center: f64, width: f64 },
    /// For surfaces of revolution about the last-used axis: radius scaled by
    /// `1 + amplitude bump`, height re-integrated so the chart stays conformal.
    RadialConformal { center: f64, width: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub amplitude: f64,
    pub mode: PerturbMode,
}

/// Description of a catalog immersion; the t-range comes from the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSpec {
    pub kind: ExampleKind,
    pub scale: f64,
    pub ambient_dim: usize,
    /// Applied after the closed form (and after scaling).
    pub inversion_center: Option<Vec<f64>>,
    pub perturbation: Option<Perturbation>,
}

impl ExampleSpec {
    pub fn new(kind: ExampleKind) -> Self {
        let ambient_dim = match kind {
            ExampleKind::HarmonicGraph { .. } => 4,
            _ => 3,
        };
        Self {
            kind,
            scale: 1.0,
            ambient_dim,
            inversion_center: None,
            perturbation: None,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_ambient_dim(mut self, n: usize) -> Self {
        self.ambient_dim = n;
        self
    }

    pub fn with_inversion(mut self, center: Vec<f64>) -> Self {
        self.inversion_center = Some(center);
        self
    }

    pub fn with_perturbation(mut self, amplitude: f64, mode: PerturbMode) -> Self {
        self.perturbation = Some(Perturbation { amplitude, mode });
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(LabError::Parameter(format!("scale {} must be positive", self.scale)));
        }
        let min_n = match self.kind {
            ExampleKind::HarmonicGraph { .. } => 4,
            _ => 3,
        };
        if self.ambient_dim < min_n {
            return Err(LabError::Parameter(format!(
                "ambient dimension {} below {min_n} for this kind",
                self.ambient_dim
            )));
        }
        match self.kind {
            ExampleKind::FlatCover { m: 0 } => {
                return Err(LabError::Parameter("flat cover needs m >= 1".into()))
            }
            ExampleKind::HarmonicGraph { m, k, epsilon } if m == 0 || k == 0 || !epsilon.is_finite() => {
                return Err(LabError::Parameter(
                    "harmonic graph needs m >= 1, k != 0 and finite epsilon".into(),
                ));
            }
            _ => {}
        }
        if let Some(p) = &self.inversion_center {
            if p.len() != self.ambient_dim {
                return Err(LabError::Parameter(format!(
                    "inversion center has {} coordinates, ambient dimension is {}",
                    p.len(),
                    self.ambient_dim
                )));
            }
        }
        Ok(())
    }
}

/// Closed-form 2-jet `[f, f_t, f_th, f_tt, f_tth, f_thth]` (each `n` wide)
/// of the unit-scale chart.
fn unit_jet(kind: &ExampleKind, n: usize, t: f64, th: f64, o: &mut [f64]) {
    o.iter_mut().for_each(|x| *x = 0.0);
    let mut put = |k: usize, c: usize, v: f64| o[k * n + c] = v;
    match *kind {
        ExampleKind::FlatCover { m } => flat_cover_jet(m as f64, t, th, &mut put),
        ExampleKind::Catenoid => catenoid_jet(1.0, t, th, &mut put),
        ExampleKind::Sphere => {
            let sg = 1.0 / t.cosh();
            let tau = t.tanh();
            let d1 = -sg * tau;
            let d2 = sg * (tau * tau - sg * sg);
            let (c, s) = (th.cos(), th.sin());
            for (k, (x, y, z)) in [
                (sg * c, sg * s, tau),
                (d1 * c, d1 * s, sg * sg),
                (-sg * s, sg * c, 0.0),
                (d2 * c, d2 * s, -2.0 * sg * sg * tau),
                (-d1 * s, d1 * c, 0.0),
                (-sg * c, -sg * s, 0.0),
            ]
            .into_iter()
            .enumerate()
            {
                put(k, 0, x);
                put(k, 1, y);
                put(k, 2, z);
            }
        }
        ExampleKind::InvertedCatenoid { end } => {
            let sign = if end == End::Lower { -1.0 } else { 1.0 };
            let mut cat = vec![0.0; 18];
            catenoid_jet(sign, t, th, &mut |k, c, v| cat[k * 3 + c] = v);
            let mut inv = vec![0.0; 18];
            invert_jet(&cat, &[0.0; 3], &mut inv);
            for k in 0..6 {
                for c in 0..3 {
                    put(k, c, inv[k * 3 + c]);
                }
            }
        }
        ExampleKind::HarmonicGraph { m, k, epsilon } => {
            flat_cover_jet(m as f64, t, th, &mut put);
            let k = k as f64;
            let g = epsilon * (k * t).exp();
            let (c, s) = ((k * th).cos(), (k * th).sin());
            // (g cos k th, -g sin k th) and its derivatives.
            for (slot, (x, y)) in [
                (g * c, -g * s),
                (k * g * c, -k * g * s),
                (-k * g * s, -k * g * c),
                (k * k * g * c, -k * k * g * s),
                (-k * k * g * s, -k * k * g * c),
                (-k * k * g * c, k * k * g * s),
            ]
            .into_iter()
            .enumerate()
            {
                put(slot, 2, x);
                put(slot, 3, y);
            }
        }
        ExampleKind::FromFile(_) => unreachable!("file examples are not closed-form"),
    }
}

fn flat_cover_jet(m: f64, t: f64, th: f64, put: &mut impl FnMut(usize, usize, f64)) {
    let r = (-m * t).exp() / m;
    let (c, s) = ((m * th).cos(), (m * th).sin());
    for (k, (x, y)) in [
        (r * c, r * s),
        (-m * r * c, -m * r * s),
        (-m * r * s, m * r * c),
        (m * m * r * c, m * m * r * s),
        (m * m * r * s, -m * m * r * c),
        (-m * m * r * c, -m * m * r * s),
    ]
    .into_iter()
    .enumerate()
    {
        put(k, 0, x);
        put(k, 1, y);
    }
}

/// Jet of `t -> catenoid(sign t)`.
fn catenoid_jet(sign: f64, t: f64, th: f64, put: &mut impl FnMut(usize, usize, f64)) {
    let t = sign * t;
    let (ch, sh) = (t.cosh(), t.sinh());
    let (c, s) = (th.cos(), th.sin());
    for (k, (x, y, z)) in [
        (ch * c, ch * s, t),
        (sign * sh * c, sign * sh * s, sign),
        (-ch * s, ch * c, 0.0),
        (ch * c, ch * s, 0.0),
        (-sign * sh * s, sign * sh * c, 0.0),
        (-ch * c, -ch * s, 0.0),
    ]
    .into_iter()
    .enumerate()
    {
        put(k, 0, x);
        put(k, 1, y);
        put(k, 2, z);
    }
}

/// Push a 2-jet (layout of `unit_jet`) through `x -> p + (x - p)/|x - p|^2`.
fn invert_jet(jet: &[f64], p: &[f64], out: &mut [f64]) {
    let n = p.len();
    let part = |k: usize| &jet[k * n..(k + 1) * n];
    let w: Vec<f64> = part(0).iter().zip(p).map(|(x, q)| x - q).collect();
    let rho = dot(&w, &w);
    // D phi [v] = v/rho - 2 (w.v) w / rho^2
    let d1 = |v: &[f64], o: &mut [f64]| {
        let wv = dot(&w, v);
        for c in 0..n {
            o[c] += v[c] / rho - 2.0 * wv * w[c] / (rho * rho);
        }
    };
    // D^2 phi [v, v']
    let d2 = |v: &[f64], v2: &[f64], o: &mut [f64]| {
        let (wv, wv2, vv2) = (dot(&w, v), dot(&w, v2), dot(v, v2));
        let r2 = rho * rho;
        for c in 0..n {
            o[c] += -2.0 * (wv2 * v[c] + wv * v2[c] + vv2 * w[c]) / r2
                + 8.0 * wv * wv2 * w[c] / (r2 * rho);
        }
    };
    out.iter_mut().for_each(|x| *x = 0.0);
    for c in 0..n {
        out[c] = p[c] + w[c] / rho;
    }
    let (f_t, f_th) = (part(1), part(2));
    d1(f_t, &mut out[n..2 * n]);
    d1(f_th, &mut out[2 * n..3 * n]);
    for (k, (a, b)) in [(3, (f_t, f_t)), (4, (f_t, f_th)), (5, (f_th, f_th))] {
        let slot = &mut out[k * n..(k + 1) * n];
        d1(part(k), slot);
        d2(a, b, slot);
    }
}

/// Sample a catalog immersion on `grid`.
pub fn make_example(spec: &ExampleSpec, grid: &CylinderGrid) -> Result<ImmersionField> {
    spec.validate()?;
    let mut imm = match &spec.kind {
        ExampleKind::FromFile(path) => {
            let imm = load_from_file(path, Some(grid))?;
            if imm.ambient_dim() != spec.ambient_dim {
                return Err(LabError::Parameter(format!(
                    "file has ambient dimension {}, spec asks for {}",
                    imm.ambient_dim(),
                    spec.ambient_dim
                )));
            }
            if spec.scale == 1.0 {
                imm
            } else {
                ImmersionField::new(imm.samples().scale(spec.scale))?
            }
        }
        kind => {
            let s = spec.scale;
            let n = spec.ambient_dim;
            ImmersionField::from_jet_fn(grid, n, |t, th, o| {
                unit_jet(kind, n, t, th, o);
                o.iter_mut().for_each(|x| *x *= s);
            })?
        }
    };
    if let Some(p) = &spec.inversion_center {
        imm = invert(&imm, p)?;
    }
    if let Some(pert) = spec.perturbation {
        imm = perturb(&imm, pert.amplitude, pert.mode)?;
    }
    Ok(imm)
}

/// Inversion `x -> p + (x - p)/|x - p|^2` applied to every sample.
pub fn invert(imm: &ImmersionField, p: &[f64]) -> Result<ImmersionField> {
    let n = imm.ambient_dim();
    if p.len() != n {
        return Err(LabError::Parameter(format!(
            "inversion center has {} coordinates, ambient dimension is {n}",
            p.len()
        )));
    }
    let samples = imm.samples();
    let distance = samples
        .values()
        .chunks(n)
        .map(|x| x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    if distance < MIN_INVERSION_DISTANCE {
        return Err(LabError::Proximity { distance });
    }
    imm.map_jets(n, |jet, out| invert_jet(jet, p, out))
}

/// `exp(1 - 1/(1 - s^2))` on `|s| < 1`, zero outside; peak value 1 at `s = 0`.
pub fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

fn bump_derivative(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        let d = 1.0 - s * s;
        -2.0 * s / (d * d) * bump(s)
    }
}

/// Add a smooth perturbation of the given amplitude.
pub fn perturb(imm: &ImmersionField, amplitude: f64, mode: PerturbMode) -> Result<ImmersionField> {
    if amplitude == 0.0 {
        return Ok(imm.clone());
    }
    if !amplitude.is_finite() {
        return Err(LabError::Amplitude(amplitude));
    }
    let out = match mode {
        PerturbMode::NormalTrig { k, center, width } => {
            check_width(width)?;
            normal_trig(imm, amplitude, k, center, width)?
        }
        PerturbMode::RadialConformal { center, width } => {
            check_width(width)?;
            radial_conformal(imm, amplitude, center, width)?
        }
    };
    ImmersionField::new(out).map_err(|e| match e {
        LabError::Immersion { .. } => LabError::Amplitude(amplitude),
        other => other,
    })
}

fn check_width(width: f64) -> Result<()> {
    if width.is_finite() && width > 0.0 {
        Ok(())
    } else {
        Err(LabError::Parameter(format!("bump width {width} must be positive")))
    }
}

fn normal_trig(
    imm: &ImmersionField,
    amplitude: f64,
    k: u32,
    center: f64,
    width: f64,
) -> Result<GridField> {
    let grid = imm.grid();
    let n = imm.ambient_dim();
    let mut degenerate = false;
    let mut out = imm.samples().clone();
    for i in 0..grid.n_t() {
        let b = bump((grid.t(i) - center) / width);
        if b == 0.0 {
            continue;
        }
        for j in 0..grid.n_theta() {
            let nu = unit_normal(imm.f_t().at(i, j), imm.f_theta().at(i, j));
            let Some(nu) = nu else {
                degenerate = true;
                continue;
            };
            let w = amplitude * b * (k as f64 * grid.theta(j)).cos();
            let x = out.at_mut(i, j);
            for c in 0..n {
                x[c] += w * nu[c];
            }
        }
    }
    if degenerate {
        return Err(LabError::Parameter(
            "no usable normal field: the last ambient axis is nearly tangent".into(),
        ));
    }
    Ok(out)
}

/// Unit normal: the cross product for `n = 3`, otherwise the normalized
/// normal component of the last ambient axis.
fn unit_normal(f_t: &[f64], f_th: &[f64]) -> Option<Vec<f64>> {
    let n = f_t.len();
    let v = if n == 3 {
        vec![
            f_t[1] * f_th[2] - f_t[2] * f_th[1],
            f_t[2] * f_th[0] - f_t[0] * f_th[2],
            f_t[0] * f_th[1] - f_t[1] * f_th[0],
        ]
    } else {
        let (e_t, e_th) = crate::geometry::tangent_frame(f_t, f_th);
        let mut v = vec![0.0; n];
        v[n - 1] = 1.0;
        let (a, b) = (e_t[n - 1], e_th[n - 1]);
        for c in 0..n {
            v[c] -= a * e_t[c] + b * e_th[c];
        }
        if norm(&v) < 1e-3 {
            return None;
        }
        v
    };
    let len = norm(&v);
    Some(v.into_iter().map(|x| x / len).collect())
}

/// Cumulative integral of station samples from the first station, fourth
/// order: each interval integrates the cubic through its four nearest
/// stations.
fn cumulative_integral(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n];
    for i in 0..n - 1 {
        let piece = if i == 0 {
            9.0 * y[0] + 19.0 * y[1] - 5.0 * y[2] + y[3]
        } else if i == n - 2 {
            y[n - 4] - 5.0 * y[n - 3] + 19.0 * y[n - 2] + 9.0 * y[n - 1]
        } else {
            -y[i - 1] + 13.0 * y[i] + 13.0 * y[i + 1] - y[i + 2]
        };
        out[i + 1] = out[i] + piece * h / 24.0;
    }
    out
}

fn radial_conformal(
    imm: &ImmersionField,
    amplitude: f64,
    center: f64,
    width: f64,
) -> Result<GridField> {
    let grid = imm.grid();
    let n = imm.ambient_dim();
    let f = imm.samples();
    // Profile (r, z) from theta = 0, then check rotational symmetry.
    let r: Vec<f64> = (0..grid.n_t()).map(|i| f.get(i, 0, 0).hypot(f.get(i, 0, 1))).collect();
    let z: Vec<f64> = (0..grid.n_t()).map(|i| f.get(i, 0, 2)).collect();
    let size = r.iter().chain(z.iter()).fold(0.0_f64, |a, x| a.max(x.abs()));
    for i in 0..grid.n_t() {
        for j in 0..grid.n_theta() {
            let x = f.at(i, j);
            let th = grid.theta(j);
            let mut dev = (x[0] - r[i] * th.cos())
                .abs()
                .max((x[1] - r[i] * th.sin()).abs())
                .max((x[2] - z[i]).abs());
            for v in &x[3..n] {
                dev = dev.max(v.abs());
            }
            if dev > 1e-9 * size.max(1.0) {
                return Err(LabError::Parameter(
                    "radial perturbation needs a surface of revolution about the third axis".into(),
                ));
            }
        }
    }
    let profile = GridField::from_indices(grid, 2, |i, _, o| {
        o[0] = r[i];
        o[1] = z[i];
    });
    let dprofile = differentiate(&profile, Direction::T, 1)?;
    let mut dz_shift = vec![0.0; grid.n_t()];
    let mut r_new = vec![0.0; grid.n_t()];
    for i in 0..grid.n_t() {
        let s = (grid.t(i) - center) / width;
        let b = bump(s);
        let db = bump_derivative(s) / width;
        let (dr, dz) = (dprofile.get(i, 0, 0), dprofile.get(i, 0, 1));
        let rn = r[i] * (1.0 + amplitude * b);
        let drn = dr * (1.0 + amplitude * b) + r[i] * amplitude * db;
        let disc = rn * rn - drn * drn;
        if !(disc > 0.0) || rn <= 0.0 {
            return Err(LabError::Amplitude(amplitude));
        }
        r_new[i] = rn;
        dz_shift[i] = dz.signum() * disc.sqrt() - dz;
    }
    let shift = cumulative_integral(&dz_shift, grid.h_t());
    Ok(GridField::from_indices(grid, n, |i, j, o| {
        let th = grid.theta(j);
        o.iter_mut().for_each(|x| *x = 0.0);
        o[0] = r_new[i] * th.cos();
        o[1] = r_new[i] * th.sin();
        o[2] = z[i] + shift[i];
    }))
}

/// Write samples in the `WNL1` text format.
pub fn save_to_file(imm: &ImmersionField, path: &Path) -> Result<()> {
    let grid = imm.grid();
    let n = imm.ambient_dim();
    let mut text = String::with_capacity(grid.len() * n * 24 + 64);
    let _ = writeln!(
        text,
        "WNL1 {} {} {} {:.16e} {:.16e}",
        grid.n_t(),
        grid.n_theta(),
        n,
        grid.t_min(),
        grid.t_max()
    );
    for x in imm.samples().values().chunks(n) {
        let line: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| LabError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read samples in the `WNL1` text format. When `grid` is given the file's
/// grid must match it.
pub fn load_from_file(path: &Path, grid: Option<&CylinderGrid>) -> Result<ImmersionField> {
    let text = fs::read_to_string(path).map_err(|source| LabError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fail = |line: usize, msg: String| LabError::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fail(1, "empty file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "WNL1" {
        return Err(fail(1, "expected header `WNL1 n_t n_theta n t_min t_max`".into()));
    }
    let int = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| fail(1, format!("bad {what} `{s}`")))
    };
    let float = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| fail(1, format!("bad {what} `{s}`")))
    };
    let n_t = int(parts[1], "n_t")?;
    let n_theta = int(parts[2], "n_theta")?;
    let n = int(parts[3], "n")?;
    let t_min = float(parts[4], "t_min")?;
    let t_max = float(parts[5], "t_max")?;
    if n_theta % 2 == 1 {
        return Err(fail(1, format!("n_theta = {n_theta} is odd")));
    }
    let file_grid = CylinderGrid::new(t_min, t_max, n_t, n_theta).map_err(|e| fail(1, e.to_string()))?;
    if let Some(g) = grid {
        let same = g.n_t() == n_t
            && g.n_theta() == n_theta
            && (g.t_min() - t_min).abs() <= 1e-12 * (1.0 + t_min.abs())
            && (g.t_max() - t_max).abs() <= 1e-12 * (1.0 + t_max.abs());
        if !same {
            return Err(fail(
                1,
                format!(
                    "shape mismatch: file grid {n_t}x{n_theta} on [{t_min}, {t_max}], expected {}x{} on [{}, {}]",
                    g.n_t(),
                    g.n_theta(),
                    g.t_min(),
                    g.t_max()
                ),
            ));
        }
    }
    let mut values = Vec::with_capacity(n_t * n_theta * n);
    let mut rows = 0;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        if rows == n_t * n_theta {
            return Err(fail(lineno, "more sample lines than the header declares".into()));
        }
        let (i, j) = (rows / n_theta, rows % n_theta);
        let mut count = 0;
        for (c, tok) in line.split_whitespace().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| fail(lineno, format!("bad number `{tok}`")))?;
            if !v.is_finite() {
                return Err(fail(
                    lineno,
                    format!("non-finite value at station {i}, theta index {j}, component {c}"),
                ));
            }
            values.push(v);
            count += 1;
        }
        if count != n {
            return Err(fail(lineno, format!("expected {n} values, found {count}")));
        }
        rows += 1;
    }
    if rows != n_t * n_theta {
        return Err(fail(
            rows + 2,
            format!("expected {} sample lines, found {rows}", n_t * n_theta),
        ));
    }
    ImmersionField::new(GridField::new(file_grid, n, values)?)
}

/// Largest distance between the samples of two immersions on the same grid.
pub fn max_sample_distance(a: &ImmersionField, b: &ImmersionField) -> f64 {
    let n = a.ambient_dim();
    a.samples()
        .values()
        .chunks(n)
        .zip(b.samples().values().chunks(n))
        .map(|(x, y)| {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            dot(&d, &d).sqrt()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{el_operator, el_residual, fundamental_forms, willmore_energy, Subregion};
    use std::f64::consts::PI;

    fn grid(t0: f64, t1: f64, nt: usize, nth: usize) -> CylinderGrid {
        CylinderGrid::new(t0, t1, nt, nth).unwrap()
    }

    #[test]
    fn flat_cover_is_exactly_conformal() {
        let g = grid(0.0, 2.0, 101, 32);
        let imm = make_example(&ExampleSpec::new(ExampleKind::FlatCover { m: 2 }), &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        assert_eq!(forms.winding, 2);
        // Interior stations use centered stencils only.
        assert!(forms.max_defect_in(2..99) < 1e-10);
    }

    #[test]
    fn catenoid_scaling_is_exact() {
        let g = grid(-1.0, 1.0, 41, 16);
        let a = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let b = make_example(&ExampleSpec::new(ExampleKind::Catenoid).with_scale(3.0), &g).unwrap();
        for (x, y) in a.samples().values().iter().zip(b.samples().values()) {
            assert_eq!(3.0 * x, *y);
        }
    }

    #[test]
    fn catenoid_band_energy_vanishes() {
        let g = grid(-2.0, 2.0, 401, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        let w = willmore_energy(&forms, Subregion::Band { t0: -1.0, t1: 1.0 }).unwrap();
        assert!(w.abs() < 1e-12, "{w}");
    }

    #[test]
    fn sphere_total_curvature() {
        let g = grid(-8.0, 8.0, 3201, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Sphere), &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        let total = forms.total_curvature(Subregion::Whole).unwrap();
        let exact = 4.0 * PI * 2.0 * 8.0_f64.tanh();
        assert!((total - exact).abs() < 1e-6, "{total} vs {exact}");
    }

    #[test]
    fn inversion_is_an_involution() {
        let g = grid(-1.0, 1.0, 81, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let p = [0.3, -0.2, 0.1];
        let back = invert(&invert(&imm, &p).unwrap(), &p).unwrap();
        assert!(max_sample_distance(&imm, &back) < 1e-12);
    }

    #[test]
    fn inversion_near_surface_is_refused() {
        let g = grid(-1.0, 1.0, 41, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        assert!(matches!(invert(&imm, &[1.0, 0.0, 0.0]), Err(LabError::Proximity { .. })));
    }

    #[test]
    fn inverted_catenoid_is_conformal_and_willmore() {
        let g = grid(1.0, 6.0, 1001, 32);
        let spec = ExampleSpec::new(ExampleKind::InvertedCatenoid { end: End::Upper });
        let imm = make_example(&spec, &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        assert_eq!(forms.winding, 1);
        assert!(forms.max_defect_in(4..997) < 1e-8, "{}", forms.max_defect_in(4..997));
        let res = el_residual(&imm, &forms, 1e-6).unwrap();
        assert!(res.max() < 1e-5, "{}", res.max());
        // Equivalent to inverting the catenoid explicitly.
        let cat = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let explicit = invert(&cat, &[0.0; 3]).unwrap();
        assert!(max_sample_distance(&imm, &explicit) < 1e-15);
    }

    #[test]
    fn harmonic_graph_is_conformal_and_minimal() {
        let g = grid(0.0, 1.0, 201, 32);
        let spec = ExampleSpec::new(ExampleKind::HarmonicGraph { m: 1, k: 2, epsilon: 0.1 });
        let imm = make_example(&spec, &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        assert!(forms.max_defect_in(2..199) < 1e-9);
        assert!(forms.h.max_abs_in(2..199) < 1e-6);
        assert!(make_example(&spec.clone().with_ambient_dim(3), &g).is_err());
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let g = grid(-1.0, 1.0, 41, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let mode = PerturbMode::NormalTrig { k: 1, center: 0.0, width: 0.5 };
        let same = perturb(&imm, 0.0, mode).unwrap();
        assert_eq!(imm.samples().values(), same.samples().values());
    }

    #[test]
    fn normal_perturbation_breaks_criticality() {
        let g = grid(-2.0, 2.0, 401, 16);
        let spec = ExampleSpec::new(ExampleKind::Catenoid)
            .with_perturbation(0.01, PerturbMode::NormalTrig { k: 1, center: 0.0, width: 1.0 });
        let imm = make_example(&spec, &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        let g_el = el_operator(&imm, &forms).unwrap();
        let base = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let base_forms = fundamental_forms(&base).unwrap();
        let floor = el_residual(&base, &base_forms, 1e-6).unwrap().max();
        assert!(g_el.max_abs_in(4..397) > 10.0 * floor);
    }

    #[test]
    fn radial_perturbation_stays_conformal() {
        let g = grid(-2.0, 2.0, 801, 16);
        let spec = ExampleSpec::new(ExampleKind::Catenoid)
            .with_perturbation(0.01, PerturbMode::RadialConformal { center: 0.0, width: 1.0 });
        let imm = make_example(&spec, &g).unwrap();
        let forms = fundamental_forms(&imm).unwrap();
        assert!(forms.max_defect_in(4..797) < 1e-6, "{}", forms.max_defect_in(4..797));
        let res = el_residual(&imm, &forms, 1e-6).unwrap();
        assert!(res.max() > 1e-3);
    }

    #[test]
    fn oversized_perturbation_is_rejected() {
        let g = grid(-1.0, 1.0, 41, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let mode = PerturbMode::RadialConformal { center: 0.0, width: 0.2 };
        assert!(matches!(perturb(&imm, 5.0, mode), Err(LabError::Amplitude(_))));
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cat.wnl");
        let g = grid(-1.0, 1.0, 21, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        save_to_file(&imm, &path).unwrap();
        let back = load_from_file(&path, Some(&g)).unwrap();
        assert_eq!(imm.samples().values(), back.samples().values());
        let other = grid(-1.0, 1.0, 23, 16);
        assert!(matches!(load_from_file(&path, Some(&other)), Err(LabError::Format { .. })));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(-1.0, 1.0, 21, 16);
        let imm = make_example(&ExampleSpec::new(ExampleKind::Catenoid), &g).unwrap();
        let path = dir.path().join("a.wnl");
        save_to_file(&imm, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[5] = "1.0 NaN 0.0".into();
        fs::write(&path, lines.join("\n")).unwrap();
        let err = load_from_file(&path, None).unwrap_err().to_string();
        assert!(err.contains(":6:") && err.contains("station 0, theta index 4"), "{err}");

        let odd = text.replacen("WNL1 21 16", "WNL1 21 15", 1);
        fs::write(&path, odd).unwrap();
        assert!(load_from_file(&path, None).unwrap_err().to_string().contains("odd"));

        let short: Vec<&str> = text.lines().take(100).collect();
        fs::write(&path, short.join("\n")).unwrap();
        assert!(load_from_file(&path, None).is_err());
    }
}
