//! Plain-text configuration: solver weights and phantom description.
//!
//! The format is flat `key = value` lines under `[solver]` and `[phantom]`
//! sections, with `#` comments. Solver keys use the canonical parameter
//! names of the model (`a1`, `a2`, `gamma1`, `gamma2`, `gamma3`, `theta`,
//! `sigma`, `k`, `N`, `n`) so a config file reads like the parameter table
//! it encodes. Every key has a default; an empty file is a valid default
//! run. Parsing is strict — unknown keys, duplicate keys, and malformed
//! values fail with the offending line number — and `to_text` emits a
//! canonical echo whose re-parse reproduces the configuration exactly.

use crate::error::{Error, Result};
use crate::phantom::{default_ellipses, Ellipse, MotionKind, PhantomSpec};

/// All numerical parameters of the joint solver.
///
/// Config keys: the model weights appear verbatim (`a1`, `a2`, `gamma1`,
/// `gamma2`, `gamma3`, `theta`, `sigma`), iteration counts as `k` (outer),
/// `N` (inner flow steps), `n` (dual projection steps), plus the step
/// sizes and floors listed per field.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Length-change weight of the hyperelastic energy (`a1`).
    pub a1: f64,
    /// Area-change weight of the hyperelastic energy (`a2`).
    pub a2: f64,
    /// Coupling weight between the displacement gradient and its auxiliary
    /// tensor (`gamma1`).
    pub gamma1: f64,
    /// Registration fidelity weight (`gamma2`).
    pub gamma2: f64,
    /// Acquisition data fidelity weight (`gamma3`).
    pub gamma3: f64,
    /// Proximal coupling of the denoised auxiliaries (`theta`).
    pub theta: f64,
    /// Gaussian pre-smoothing width for edge weights (`sigma`).
    pub sigma: f64,
    /// Outer iterations per pyramid level (`k`).
    pub k_outer: usize,
    /// Inner flow iterations per outer iteration (`N`).
    pub n_inner: usize,
    /// Dual projection iterations of the TV proximal solve (`n`).
    pub n_chambolle: usize,
    /// Time step of the auxiliary-tensor flow (`dt_v`).
    pub dt_v: f64,
    /// Time step of the displacement flow (`dt_phi`).
    pub dt_phi: f64,
    /// Dual step of the TV projection (`delta_t`), at most 1/8.
    pub delta_t: f64,
    /// Regridding floor on det(I + grad z) (`det_floor`).
    pub det_floor: f64,
    /// Lower clamp of the edge-stopping weights (`g_floor`).
    pub g_floor: f64,
    /// Pyramid levels, coarse to fine (`levels`).
    pub levels: usize,
    /// Acquisition whose adjoint initializes the image (`reference_index`).
    pub reference_index: usize,
    /// Skip all motion updates, reducing the solver to TV-regularized
    /// averaging (`freeze_motion`).
    pub freeze_motion: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            a1: 1.0,
            a2: 50.0,
            gamma1: 5.0,
            gamma2: 1e5,
            gamma3: 30.0,
            theta: 5.0,
            sigma: 2.0,
            k_outer: 2,
            n_inner: 500,
            n_chambolle: 500,
            dt_v: 1e-3,
            dt_phi: 1e-3,
            delta_t: 0.125,
            det_floor: 0.05,
            g_floor: 0.01,
            levels: 3,
            reference_index: 0,
            freeze_motion: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, f64); 7] = [
            ("a1", self.a1),
            ("gamma1", self.gamma1),
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("dt_v", self.dt_v),
            ("dt_phi", self.dt_phi),
            ("delta_t", self.delta_t),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be positive and finite", v));
            }
        }
        let non_negative: [(&'static str, f64); 3] = [
            ("a2", self.a2),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(name, "must be non-negative and finite", v));
            }
        }
        if self.delta_t > 0.125 {
            return Err(Error::param(
                "delta_t",
                "dual step must not exceed 1/8",
                self.delta_t,
            ));
        }
        if !(self.det_floor > 0.0 && self.det_floor < 1.0) {
            return Err(Error::param(
                "det_floor",
                "must lie in (0, 1)",
                self.det_floor,
            ));
        }
        if !(self.g_floor > 0.0 && self.g_floor < 1.0) {
            return Err(Error::param("g_floor", "must lie in (0, 1)", self.g_floor));
        }
        for (name, v) in [
            ("k", self.k_outer),
            ("N", self.n_inner),
            ("n", self.n_chambolle),
            ("levels", self.levels),
        ] {
            if v < 1 {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must be at least 1",
                    value: v as f64,
                });
            }
        }
        Ok(())
    }
}

/// A full run description: solver parameters plus the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub phantom: PhantomSpec,
}

/// Section being parsed.
#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Solver,
    Phantom,
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, raw: &str, kind: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| bad(line, format!("key '{key}': expected {kind}, got '{raw}'")))
}

/// Parses a configuration from text. Missing keys fall back to defaults;
/// the result is validated before being returned.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = Section::None;
    let mut seen: Vec<String> = Vec::new();
    let mut ellipses: Vec<Ellipse> = Vec::new();
    let mut saw_ellipse = false;

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| bad(line, "unterminated section header"))?
                .trim();
            section = match name {
                "solver" => Section::Solver,
                "phantom" => Section::Phantom,
                other => return Err(bad(line, format!("unknown section '[{other}]'"))),
            };
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected 'key = value', got '{content}'")))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(bad(line, format!("key '{key}' has no value")));
        }
        if key != "ellipse" {
            let qualified = format!("{}{key}", match section {
                Section::None => "",
                Section::Solver => "solver.",
                Section::Phantom => "phantom.",
            });
            if seen.contains(&qualified) {
                return Err(bad(line, format!("duplicate key '{key}'")));
            }
            seen.push(qualified);
        }
        match section {
            Section::None => {
                return Err(bad(
                    line,
                    format!("key '{key}' outside a section; start with [solver] or [phantom]"),
                ))
            }
            Section::Solver => {
                let s = &mut cfg.solver;
                match key {
                    "a1" => s.a1 = parse_num(line, key, value, "a number")?,
                    "a2" => s.a2 = parse_num(line, key, value, "a number")?,
                    "gamma1" => s.gamma1 = parse_num(line, key, value, "a number")?,
                    "gamma2" => s.gamma2 = parse_num(line, key, value, "a number")?,
                    "gamma3" => s.gamma3 = parse_num(line, key, value, "a number")?,
                    "theta" => s.theta = parse_num(line, key, value, "a number")?,
                    "sigma" => s.sigma = parse_num(line, key, value, "a number")?,
                    "k" => s.k_outer = parse_num(line, key, value, "an integer")?,
                    "N" => s.n_inner = parse_num(line, key, value, "an integer")?,
                    "n" => s.n_chambolle = parse_num(line, key, value, "an integer")?,
                    "dt_v" => s.dt_v = parse_num(line, key, value, "a number")?,
                    "dt_phi" => s.dt_phi = parse_num(line, key, value, "a number")?,
                    "delta_t" => s.delta_t = parse_num(line, key, value, "a number")?,
                    "det_floor" => s.det_floor = parse_num(line, key, value, "a number")?,
                    "g_floor" => s.g_floor = parse_num(line, key, value, "a number")?,
                    "levels" => s.levels = parse_num(line, key, value, "an integer")?,
                    "reference_index" => {
                        s.reference_index = parse_num(line, key, value, "an integer")?
                    }
                    "freeze_motion" => {
                        s.freeze_motion = parse_num(line, key, value, "true or false")?
                    }
                    other => {
                        return Err(bad(line, format!("unknown solver key '{other}'")))
                    }
                }
            }
            Section::Phantom => {
                let p = &mut cfg.phantom;
                match key {
                    "width" => p.width = parse_num(line, key, value, "an integer")?,
                    "height" => p.height = parse_num(line, key, value, "an integer")?,
                    "frames" => p.frames = parse_num(line, key, value, "an integer")?,
                    "amplitude" => p.amplitude = parse_num(line, key, value, "a number")?,
                    "period" => p.period = parse_num(line, key, value, "an integer")?,
                    "noise_sigma" => p.noise_sigma = parse_num(line, key, value, "a number")?,
                    "seed" => p.seed = parse_num(line, key, value, "an integer")?,
                    "kind" => {
                        p.kind = match value {
                            "translation" => MotionKind::Translation,
                            "compression" => MotionKind::Compression,
                            other => {
                                return Err(bad(
                                    line,
                                    format!(
                                        "key 'kind': expected translation or compression, got '{other}'"
                                    ),
                                ))
                            }
                        }
                    }
                    "ellipse" => {
                        saw_ellipse = true;
                        let parts: Vec<&str> = value.split_whitespace().collect();
                        if parts.len() != 6 {
                            return Err(bad(
                                line,
                                format!(
                                    "key 'ellipse': expected 6 numbers (cx cy rx ry angle intensity), got {}",
                                    parts.len()
                                ),
                            ));
                        }
                        let nums: Result<Vec<f64>> = parts
                            .iter()
                            .map(|p| parse_num(line, key, p, "a number"))
                            .collect();
                        let v = nums?;
                        ellipses.push(Ellipse {
                            cx: v[0],
                            cy: v[1],
                            rx: v[2],
                            ry: v[3],
                            angle: v[4],
                            intensity: v[5],
                        });
                    }
                    other => {
                        return Err(bad(line, format!("unknown phantom key '{other}'")))
                    }
                }
            }
        }
    }
    if saw_ellipse {
        cfg.phantom.ellipses = ellipses;
    } else {
        // No explicit layout: use the standard one scaled to the grid.
        cfg.phantom.ellipses = default_ellipses(cfg.phantom.width, cfg.phantom.height);
    }
    cfg.solver.validate()?;
    cfg.phantom.validate()?;
    Ok(cfg)
}

/// Canonical text form; `parse_config(&to_text(c))` reproduces `c` exactly
/// (floats are printed with their shortest round-tripping representation).
pub fn to_text(cfg: &RunConfig) -> String {
    let s = &cfg.solver;
    let p = &cfg.phantom;
    let mut out = String::new();
    out.push_str("[solver]\n");
    for (k, v) in [
        ("a1", s.a1),
        ("a2", s.a2),
        ("gamma1", s.gamma1),
        ("gamma2", s.gamma2),
        ("gamma3", s.gamma3),
        ("theta", s.theta),
        ("sigma", s.sigma),
    ] {
        out.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in [
        ("k", s.k_outer),
        ("N", s.n_inner),
        ("n", s.n_chambolle),
    ] {
        out.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in [
        ("dt_v", s.dt_v),
        ("dt_phi", s.dt_phi),
        ("delta_t", s.delta_t),
        ("det_floor", s.det_floor),
        ("g_floor", s.g_floor),
    ] {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push_str(&format!("levels = {}\n", s.levels));
    out.push_str(&format!("reference_index = {}\n", s.reference_index));
    out.push_str(&format!("freeze_motion = {}\n", s.freeze_motion));
    out.push_str("\n[phantom]\n");
    out.push_str(&format!("width = {}\n", p.width));
    out.push_str(&format!("height = {}\n", p.height));
    out.push_str(&format!("frames = {}\n", p.frames));
    out.push_str(&format!("amplitude = {}\n", p.amplitude));
    out.push_str(&format!("period = {}\n", p.period));
    out.push_str(&format!(
        "kind = {}\n",
        match p.kind {
            MotionKind::Translation => "translation",
            MotionKind::Compression => "compression",
        }
    ));
    out.push_str(&format!("noise_sigma = {}\n", p.noise_sigma));
    out.push_str(&format!("seed = {}\n", p.seed));
    for e in &p.ellipses {
        out.push_str(&format!(
            "ellipse = {} {} {} {} {} {}\n",
            e.cx, e.cy, e.rx, e.ry, e.angle, e.intensity
        ));
    }
    out
}

/// Reads and parses a configuration file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
