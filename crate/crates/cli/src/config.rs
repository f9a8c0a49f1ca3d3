//! Run configuration: a flat `key = value` text file, overridable by flags.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value          # trailing comments are allowed
//! list_key = 1.0, 2.5  # lists are comma separated
//! ```
//!
//! Keys are unique; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use necklab::catalog::{End, ExampleKind, ExampleSpec, PerturbMode};
use necklab::optimizer::StepRule;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// Every accepted key with a one-line description (used by `--help-config`).
pub const KEYS: &[(&str, &str)] = &[
    ("example", "flat_cover | catenoid | sphere | inverted_catenoid | harmonic_graph"),
    ("input", "immersion file to analyze instead of a catalog example"),
    ("m", "winding of flat_cover / harmonic_graph, weight for harmonic-lab"),
    ("harmonic_k", "mode number of harmonic_graph"),
    ("epsilon", "amplitude of harmonic_graph"),
    ("end", "upper | lower end of the inverted catenoid"),
    ("scale", "scale factor"),
    ("ambient_dim", "ambient dimension n"),
    ("inversion_center", "point to invert about (n coordinates)"),
    ("perturb_amplitude", "perturbation amplitude"),
    ("perturb_mode", "normal_trig | radial_conformal"),
    ("perturb_k", "angular mode of normal_trig"),
    ("perturb_center", "t-center of the perturbation bump"),
    ("perturb_width", "half-width of the perturbation bump"),
    ("refine", "build the surface on a t-grid this many times finer, then subsample"),
    ("grid", "n_t, n_theta"),
    ("trange", "t_min, t_max"),
    ("residues", "on | off: include residues in analyze"),
    ("stations", "t-values of residue circles"),
    ("expect_nonzero_tau1", "1-based axes whose first residue is expected nonzero"),
    ("L", "segment length"),
    ("segments", "segment count k"),
    ("t_start", "start of the first segment"),
    ("q", "list of three-circle rates"),
    ("q_prime", "ladder rate q' (default q - 1.5 ln2 / L)"),
    ("which", "A | H energy for verdicts and fits"),
    ("delta", "H-vs-A classification threshold"),
    ("fit_window", "first, last segment (1-based) of the decay fit"),
    ("expect_q", "expected fitted rate"),
    ("expect_q_tol", "tolerance on the fitted rate"),
    ("tol_defect", "conformal defect tolerance"),
    ("tol_residue", "absolute residue tolerance"),
    ("tol_residue_rel", "residue tolerance relative to the curvature scale"),
    ("tol_identity", "tolerance for exact pointwise identities"),
    ("tol_el", "if set, check the Euler-Lagrange residual against it"),
    ("seed", "random seed"),
    ("trials", "random trials for harmonic-lab"),
    ("k_max", "highest Fourier mode for harmonic-lab"),
    ("max_iter", "descent iterations"),
    ("grad_tol", "descent gradient tolerance"),
    ("defect_halt", "descent gauge-drift halt"),
    ("step_rule", "doubling | rescaled"),
    ("target_reduction", "required gradient-norm reduction factor"),
    ("fd_checks", "random finite-difference gradient checks"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum Surface {
    Example(ExampleKind),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub surface: Option<Surface>,
    pub scale: f64,
    pub ambient_dim: Option<usize>,
    pub inversion_center: Option<Vec<f64>>,
    pub perturbation: Option<(f64, PerturbMode)>,
    pub refine: usize,
    pub grid: (usize, usize),
    pub trange: (f64, f64),
    pub residues: bool,
    pub stations: Option<Vec<f64>>,
    pub expect_nonzero_tau1: Vec<usize>,
    pub l: f64,
    pub segments: Option<usize>,
    pub t_start: Option<f64>,
    pub q: Vec<f64>,
    pub q_prime: Option<f64>,
    pub which_h: bool,
    pub delta: f64,
    pub fit_window: Option<(usize, usize)>,
    pub expect_q: Option<(f64, f64)>,
    pub tol_defect: f64,
    pub tol_residue: f64,
    pub tol_residue_rel: f64,
    pub tol_identity: f64,
    pub tol_el: Option<f64>,
    pub seed: u64,
    pub m: u32,
    pub trials: usize,
    pub k_max: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub defect_halt: f64,
    pub step_rule: StepRule,
    pub target_reduction: f64,
    pub fd_checks: usize,
    /// Resolved entries, echoed into reports.
    pub entries: BTreeMap<String, String>,
}

/// Raw `key -> value` entries before interpretation.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!("{origin}:{}: expected `key = value`", n + 1));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(key, _)| *key == k) {
                return err(format!("{origin}:{}: unknown key `{k}`", n + 1));
            }
            if v.is_empty() {
                return err(format!("{origin}:{}: empty value for `{k}`", n + 1));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return err(format!("{origin}:{}: duplicate key `{k}`", n + 1));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Set a key from a command-line flag, replacing any file value.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(KEYS.iter().any(|(k, _)| *k == key));
        self.entries.insert(key.to_string(), value.into());
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn resolve(mut self) -> Result<RunConfig> {
        let echo = self.entries.clone();
        let mut c = Cursor { raw: &mut self };
        let m = c.parse::<u32>("m")?.unwrap_or(1);
        if m == 0 {
            return err("m must be at least 1");
        }
        let surface = match (c.string("example"), c.string("input")) {
            (Some(_), Some(_)) => return err("give either `example` or `input`, not both"),
            (None, Some(p)) => Some(Surface::File(PathBuf::from(p))),
            (Some(name), None) => Some(Surface::Example(match name.as_str() {
                "flat_cover" => ExampleKind::FlatCover { m },
                "catenoid" => ExampleKind::Catenoid,
                "sphere" => ExampleKind::Sphere,
                "inverted_catenoid" => ExampleKind::InvertedCatenoid {
                    end: match c.string("end").as_deref() {
                        None | Some("upper") => End::Upper,
                        Some("lower") => End::Lower,
                        Some(o) => return err(format!("end must be upper or lower, got `{o}`")),
                    },
                },
                "harmonic_graph" => ExampleKind::HarmonicGraph {
                    m,
                    k: c.parse("harmonic_k")?.unwrap_or(1),
                    epsilon: c.parse("epsilon")?.unwrap_or(0.1),
                },
                o => return err(format!("unknown example `{o}`")),
            })),
            (None, None) => None,
        };
        let perturbation = match c.parse::<f64>("perturb_amplitude")? {
            None => None,
            Some(a) => {
                let center = c.parse("perturb_center")?.unwrap_or(0.0);
                let width = c.parse("perturb_width")?.unwrap_or(1.0);
                let mode = match c.string("perturb_mode").as_deref() {
                    None | Some("radial_conformal") => PerturbMode::RadialConformal { center, width },
                    Some("normal_trig") => PerturbMode::NormalTrig {
                        k: c.parse("perturb_k")?.unwrap_or(1),
                        center,
                        width,
                    },
                    Some(o) => return err(format!("unknown perturb_mode `{o}`")),
                };
                Some((a, mode))
            }
        };
        let grid = c.pair::<usize>("grid")?.unwrap_or((801, 32));
        let trange = c.pair::<f64>("trange")?.unwrap_or((0.0, 8.0));
        if !(trange.1 > trange.0) {
            return err(format!("trange {} .. {} is empty", trange.0, trange.1));
        }
        let fit_window = c.pair::<usize>("fit_window")?;
        let expect_q = match c.parse::<f64>("expect_q")? {
            Some(q) => Some((q, c.parse("expect_q_tol")?.unwrap_or(0.01))),
            None => None,
        };
        let which_h = match c.string("which").as_deref() {
            None | Some("A") => false,
            Some("H") => true,
            Some(o) => return err(format!("which must be A or H, got `{o}`")),
        };
        let step_rule = match c.string("step_rule").as_deref() {
            None | Some("doubling") => StepRule::Doubling,
            Some("rescaled") => StepRule::Rescaled,
            Some(o) => return err(format!("unknown step_rule `{o}`")),
        };
        let cfg = RunConfig {
            surface,
            scale: c.parse("scale")?.unwrap_or(1.0),
            ambient_dim: c.parse("ambient_dim")?,
            inversion_center: c.list("inversion_center")?,
            perturbation,
            refine: c.parse("refine")?.unwrap_or(1),
            grid,
            trange,
            residues: c.flag("residues")?.unwrap_or(false),
            stations: c.list("stations")?,
            expect_nonzero_tau1: c.list("expect_nonzero_tau1")?.unwrap_or_default(),
            l: c.parse("L")?.unwrap_or(1.0),
            segments: c.parse("segments")?,
            t_start: c.parse("t_start")?,
            q: c.list("q")?.unwrap_or_else(|| vec![1.0]),
            q_prime: c.parse("q_prime")?,
            which_h,
            delta: c.parse("delta")?.unwrap_or(necklab::neck::DEFAULT_DELTA),
            fit_window,
            expect_q,
            tol_defect: c.parse("tol_defect")?.unwrap_or(necklab::geometry::DEFAULT_DEFECT_TOL),
            tol_residue: c.parse("tol_residue")?.unwrap_or(1e-6),
            tol_residue_rel: c.parse("tol_residue_rel")?.unwrap_or(1e-4),
            tol_identity: c.parse("tol_identity")?.unwrap_or(1e-8),
            tol_el: c.parse("tol_el")?,
            seed: c.parse("seed")?.unwrap_or(20_241_016),
            m,
            trials: c.parse("trials")?.unwrap_or(1000),
            k_max: c.parse("k_max")?.unwrap_or(8),
            max_iter: c.parse("max_iter")?.unwrap_or(500),
            grad_tol: c.parse("grad_tol")?.unwrap_or(1e-8),
            defect_halt: c.parse("defect_halt")?.unwrap_or(1e-3),
            step_rule,
            target_reduction: c.parse("target_reduction")?.unwrap_or(10.0),
            fd_checks: c.parse("fd_checks")?.unwrap_or(20),
            entries: echo,
        };
        if let Some(k) = self.entries.keys().next() {
            return err(format!("key `{k}` does not apply to this configuration"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Cursor<'a> {
    raw: &'a mut RawConfig,
}

impl Cursor<'_> {
    fn string(&mut self, key: &str) -> Option<String> {
        self.raw.take(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("cannot parse `{v}` for `{key}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| ConfigError(format!("cannot parse `{}` in `{key}`", s.trim())))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn pair<T: std::str::FromStr + Copy>(&mut self, key: &str) -> Result<Option<(T, T)>> {
        match self.list::<T>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
            Some(v) => err(format!("`{key}` needs two values, got {}", v.len())),
        }
    }

    fn flag(&mut self, key: &str) -> Result<Option<bool>> {
        match self.raw.take(key).as_deref() {
            None => Ok(None),
            Some("on" | "true" | "yes") => Ok(Some(true)),
            Some("off" | "false" | "no") => Ok(Some(false)),
            Some(o) => err(format!("`{key}` must be on or off, got `{o}`")),
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("scale", self.scale),
            ("L", self.l),
            ("delta", self.delta),
            ("tol_defect", self.tol_defect),
            ("tol_residue", self.tol_residue),
            ("tol_identity", self.tol_identity),
            ("defect_halt", self.defect_halt),
            ("target_reduction", self.target_reduction),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("`{k}` must be positive, got {v}"));
            }
        }
        if self.refine == 0 {
            return err("`refine` must be at least 1");
        }
        if self.q.is_empty() || self.q.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
            return err("`q` must list positive rates");
        }
        if self.expect_nonzero_tau1.contains(&0) {
            return err("`expect_nonzero_tau1` axes are 1-based");
        }
        Ok(())
    }

    /// Catalog spec for an example surface (not for file inputs).
    pub fn example_spec(&self, kind: &ExampleKind) -> ExampleSpec {
        let mut spec = ExampleSpec::new(kind.clone()).with_scale(self.scale);
        if let Some(n) = self.ambient_dim {
            spec = spec.with_ambient_dim(n);
        }
        if let Some(p) = &self.inversion_center {
            spec = spec.with_inversion(p.clone());
        }
        if let Some((a, mode)) = self.perturbation {
            spec = spec.with_perturbation(a, mode);
        }
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_flags() {
        let raw = RawConfig::parse(
            "# sphere run\nexample = sphere\nq = 1.0, 1.5 # two rates\nresidues = on\ngrid = 401, 16\n",
            "test",
        )
        .unwrap();
        let c = raw.resolve().unwrap();
        assert_eq!(c.surface, Some(Surface::Example(ExampleKind::Sphere)));
        assert_eq!(c.q, vec![1.0, 1.5]);
        assert!(c.residues);
        assert_eq!(c.grid, (401, 16));
        assert_eq!(c.entries.get("example").map(String::as_str), Some("sphere"));
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(RawConfig::parse("colour = red\n", "t").unwrap_err().0.contains("unknown key"));
        assert!(RawConfig::parse("L = 1\nL = 2\n", "t").unwrap_err().0.contains("duplicate"));
        assert!(RawConfig::parse("L 1\n", "t").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["L = -1", "grid = 10", "which = B", "example = torus", "q = 1, x", "refine = 0"] {
            let raw = RawConfig::parse(text, "t").unwrap();
            assert!(raw.resolve().is_err(), "{text}");
        }
    }

    #[test]
    fn flags_override_file_values() {
        let mut raw = RawConfig::parse("L = 2\n", "t").unwrap();
        raw.set("L", "0.5");
        assert_eq!(raw.resolve().unwrap().l, 0.5);
    }

    #[test]
    fn unused_keys_are_rejected() {
        let raw = RawConfig::parse("end = lower\nexample = sphere\n", "t").unwrap();
        assert!(raw.resolve().unwrap_err().0.contains("end"));
    }
}
