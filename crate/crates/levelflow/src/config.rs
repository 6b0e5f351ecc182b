//! Scenario configuration.
//!
//! A scenario is a flat UTF-8 document of `section.key = value` lines
//! (`#` starts a comment). [`parse_scenario`] turns a document into a
//! validated [`ScenarioConfig`]; [`write_scenario`] is its inverse, and the
//! pair round-trips bit-exactly because floats are written with 17
//! significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Scheme and stabilization constants, plus linear-solver settings.
///
/// `beta` (the interface thickness) is deliberately absent: it is recomputed
/// from the current mesh whenever the mesh changes, or pinned per scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericalParams {
    /// Advective CFL fraction.
    pub c_cfl: f64,
    /// Reinitialization speed as a fraction of the peak velocity.
    pub c_lambda: f64,
    /// Width factor for the regularized Heaviside (and the Dirac support).
    pub c_h: f64,
    /// Width factor for the regularized sign dead zone.
    pub c_s: f64,
    /// Refinement band width factor.
    pub c_r: f64,
    /// Coarsening band width factor; must be >= `c_r`.
    pub c_c: f64,
    /// Maximum refinement generation.
    pub r_max: u8,
    /// First-order viscosity coefficient.
    pub c_lin: f64,
    /// Entropy viscosity coefficient.
    pub c_ent: f64,
    /// Entropy exponent in E(v) = |v|^p.
    pub entropy_p: f64,
    /// Grad-div stabilization coefficient.
    pub c_stab: f64,
    /// Relative residual tolerance for iterative solves.
    pub solver_rel_tol: f64,
    /// Iteration cap for iterative solves.
    pub solver_max_iter: usize,
}

/// The constants used for every production run.
pub fn default_params() -> NumericalParams {
    NumericalParams {
        c_cfl: 0.25,
        c_lambda: 0.01,
        c_h: 1.25,
        c_s: 0.5,
        c_r: 2.0,
        c_c: 2.0,
        r_max: 2,
        c_lin: 0.1,
        c_ent: 0.1,
        entropy_p: 20.0,
        c_stab: 0.1,
        solver_rel_tol: 1e-8,
        solver_max_iter: 10_000,
    }
}

/// Shear-rate dependence of a phase's dynamic viscosity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViscosityModel {
    Newtonian { mu: f64 },
    /// Cross model: mu(g) = mu_inf + (mu0 - mu_inf) / (1 + (g/gamma_c)^n).
    Cross { mu0: f64, mu_inf: f64, gamma_c: f64, n: f64 },
}

impl ViscosityModel {
    /// Viscosity at shear rate `gamma` (the Frobenius norm of the symmetric
    /// velocity gradient).
    pub fn eval(&self, gamma: f64) -> f64 {
        match *self {
            ViscosityModel::Newtonian { mu } => mu,
            ViscosityModel::Cross { mu0, mu_inf, gamma_c, n } => {
                mu_inf + (mu0 - mu_inf) / (1.0 + (gamma / gamma_c).powf(n))
            }
        }
    }

    /// Zero-shear viscosity, used wherever only bounds are needed.
    pub fn mu_zero(&self) -> f64 {
        match *self {
            ViscosityModel::Newtonian { mu } => mu,
            ViscosityModel::Cross { mu0, .. } => mu0,
        }
    }

    /// Infinite-shear viscosity.
    pub fn mu_inf(&self) -> f64 {
        match *self {
            ViscosityModel::Newtonian { mu } => mu,
            ViscosityModel::Cross { mu_inf, .. } => mu_inf,
        }
    }
}

/// One fluid phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidPhase {
    pub rho: f64,
    pub viscosity: ViscosityModel,
}

/// Material description of the two phases. The plus phase occupies
/// `{phi > 0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub plus: FluidPhase,
    pub minus: FluidPhase,
    /// Surface tension coefficient.
    pub sigma: f64,
    /// Gravity vector.
    pub gravity: [f64; 2],
}

/// Sides of the rectangular domain, in the fixed order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

pub const SIDES: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Bottom => "bottom",
            Side::Top => "top",
        }
    }
}

/// Condition applied on the part of a side not covered by a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseBc {
    /// Velocity pinned to a constant vector. `inflow` marks the side as a
    /// level-set inflow boundary as well.
    Dirichlet { velocity: [f64; 2], inflow: bool },
    /// Traction-free outflow; nothing is imposed on the velocity.
    Open,
    /// Zero normal velocity, free tangential velocity.
    Slip,
}

/// An inflow segment on one side: Dirichlet velocity on `[lo, hi]` along the
/// side's running coordinate, and a level-set inflow boundary there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflowWindow {
    pub lo: f64,
    pub hi: f64,
    pub velocity: [f64; 2],
}

/// Boundary condition for one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideBc {
    pub base: BaseBc,
    pub window: Option<InflowWindow>,
}

impl Default for SideBc {
    fn default() -> Self {
        SideBc { base: BaseBc::Dirichlet { velocity: [0.0, 0.0], inflow: false }, window: None }
    }
}

/// Initial interface geometry. `signed_distance` is positive in the plus
/// phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelSetInit {
    /// Disk of radius `r` about `(cx, cy)`; positive inside.
    Circle { cx: f64, cy: f64, r: f64 },
    /// Half plane: d(x) = n . x - offset with unit normal `n` pointing into
    /// the plus phase.
    Halfplane { nx: f64, ny: f64, offset: f64 },
    /// Axis-aligned box; positive inside.
    Box { x0: f64, x1: f64, y0: f64, y1: f64 },
    /// Disk with a rectangular slot cut from its bottom edge toward the
    /// center; positive inside the slotted disk.
    SlottedCircle { cx: f64, cy: f64, r: f64, slot_w: f64, slot_h: f64 },
    /// Vertical fluid column of half-width `half_w` around `x = xc` hanging
    /// from the top of the domain down to `tip_y`, optionally joined with a
    /// fluid layer below `bath_y`.
    Jet { xc: f64, half_w: f64, tip_y: f64, bath_y: Option<f64> },
}

fn box_signed_distance(x: f64, y: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    // Positive inside. Exact outside; inside it is the distance to the
    // nearest face, which is all the interface filter needs.
    let dx = (x0 - x).max(x - x1);
    let dy = (y0 - y).max(y - y1);
    if dx <= 0.0 && dy <= 0.0 {
        -dx.max(dy)
    } else {
        -(dx.max(0.0).hypot(dy.max(0.0)))
    }
}

impl LevelSetInit {
    /// Signed distance to the interface, positive in the plus phase.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            LevelSetInit::Circle { cx, cy, r } => r - (x - cx).hypot(y - cy),
            LevelSetInit::Halfplane { nx, ny, offset } => {
                let len = nx.hypot(ny);
                (nx * x + ny * y) / len - offset
            }
            LevelSetInit::Box { x0, x1, y0, y1 } => box_signed_distance(x, y, x0, x1, y0, y1),
            LevelSetInit::SlottedCircle { cx, cy, r, slot_w, slot_h } => {
                let disk = r - (x - cx).hypot(y - cy);
                let slot = box_signed_distance(
                    x,
                    y,
                    cx - 0.5 * slot_w,
                    cx + 0.5 * slot_w,
                    cy - r,
                    cy - r + slot_h,
                );
                disk.min(-slot)
            }
            LevelSetInit::Jet { xc, half_w, tip_y, bath_y } => {
                let column = box_signed_distance(x, y, xc - half_w, xc + half_w, tip_y, f64::MAX / 4.0);
                match bath_y {
                    None => column,
                    Some(b) => column.max(b - y),
                }
            }
        }
    }
}

/// Analytic velocity driving a pure-transport scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransportVelocity {
    /// Rigid rotation `rate * (-(y-cy), x-cx)`.
    Rotation { cx: f64, cy: f64, rate: f64 },
    /// The deforming vortex on the unit square with time factor
    /// cos(pi t / period): the flow map returns to the identity at
    /// t = period.
    Vortex { period: f64 },
}

impl TransportVelocity {
    pub fn eval(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        match *self {
            TransportVelocity::Rotation { cx, cy, rate } => {
                [-rate * (y - cy), rate * (x - cx)]
            }
            TransportVelocity::Vortex { period } => {
                let pi = std::f64::consts::PI;
                let g = (pi * t / period).cos();
                let sx = (pi * x).sin();
                let sy = (pi * y).sin();
                [
                    -sx * sx * (2.0 * pi * y).sin() * g,
                    sy * sy * (2.0 * pi * x).sin() * g,
                ]
            }
        }
    }
}

/// Which level-set terms are active. Transport convergence studies switch the
/// stabilization and the reinitialization off independently; production runs
/// keep both on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSetOptions {
    pub stabilize: bool,
    pub reinit: bool,
}

impl Default for LevelSetOptions {
    fn default() -> Self {
        LevelSetOptions { stabilize: true, reinit: true }
    }
}

/// A fully validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub domain: [f64; 4], // x0, x1, y0, y1
    /// Side length of the root-grid cells.
    pub h0: f64,
    pub t_final: f64,
    pub dt_max: f64,
    /// Fixed time step; when set, the CFL bounds are not consulted.
    pub dt_fixed: Option<f64>,
    pub bc: [SideBc; 4], // indexed by SIDES order
    pub levelset_init: LevelSetInit,
    /// Whether the initial signed distance is passed through the tanh
    /// profile filter.
    pub tanh_filter: bool,
    pub levelset_opts: LevelSetOptions,
    /// Pinned interface thickness; `None` means `beta = min h_K`.
    pub beta_fixed: Option<f64>,
    /// Analytic velocity; `None` means the flow solver drives the level set.
    pub transport: Option<TransportVelocity>,
    pub fluid: PhysicalParams,
    /// Initialize the velocity to `velocity` wherever `y < below`.
    pub init_velocity_below: Option<(f64, [f64; 2])>,
    pub num: NumericalParams,
    pub output_every: usize,
    pub output_dir: Option<String>,
}

impl ScenarioConfig {
    pub fn side(&self, s: Side) -> &SideBc {
        match s {
            Side::Left => &self.bc[0],
            Side::Right => &self.bc[1],
            Side::Bottom => &self.bc[2],
            Side::Top => &self.bc[3],
        }
    }
}

/// Configuration failure: a malformed line, a missing key, or a violated
/// invariant.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing required key `{key}`")]
    Missing { key: String },
    #[error("invariant `{invariant}` violated: {msg}")]
    Validation { invariant: &'static str, msg: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Parse { line, msg: msg.into() }
}

fn invariant_err(invariant: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation { invariant, msg: msg.into() }
}

struct RawDoc {
    entries: BTreeMap<String, (usize, String)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl RawDoc {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(parse_err(line_no, "empty key"));
            }
            if value.is_empty() {
                return Err(parse_err(line_no, format!("empty value for `{key}`")));
            }
            if let Some((prev_line, _)) = entries.get(&key) {
                return Err(parse_err(
                    line_no,
                    format!("duplicate key `{key}` (first set on line {prev_line})"),
                ));
            }
            entries.insert(key, (line_no, value));
        }
        Ok(RawDoc { entries, used: Default::default() })
    }

    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| {
            self.used.borrow_mut().insert(key.to_string());
            (*l, v.as_str())
        })
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(line, format!("`{key}`: expected a number, got `{v}`"))),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| parse_err(line, format!("`{key}`: expected a nonnegative integer, got `{v}`"))),
        }
    }

    fn vec(&self, key: &str, n: usize) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => {
                let parts: Result<Vec<f64>, _> =
                    v.split(',').map(|p| p.trim().parse::<f64>()).collect();
                let parts = parts
                    .map_err(|_| parse_err(line, format!("`{key}`: expected {n} comma-separated numbers, got `{v}`")))?;
                if parts.len() != n {
                    return Err(parse_err(
                        line,
                        format!("`{key}`: expected {n} comma-separated numbers, got {}", parts.len()),
                    ));
                }
                Ok(Some(parts))
            }
        }
    }

    fn require_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.f64(key)?.ok_or_else(|| ConfigError::Missing { key: key.to_string() })
    }

    fn check_unknown(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        for (key, (line, _)) in &self.entries {
            if !used.contains(key) {
                return Err(parse_err(*line, format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }
}

fn parse_phase(doc: &RawDoc, prefix: &str) -> Result<FluidPhase, ConfigError> {
    let rho = doc.require_f64(&format!("{prefix}.rho"))?;
    let model = match doc.get(&format!("{prefix}.model")) {
        None => "newtonian".to_string(),
        Some((line, v)) => match v {
            "newtonian" | "cross" => v.to_string(),
            other => {
                return Err(parse_err(line, format!("`{prefix}.model`: expected newtonian|cross, got `{other}`")))
            }
        },
    };
    let viscosity = if model == "cross" {
        ViscosityModel::Cross {
            mu0: doc.require_f64(&format!("{prefix}.mu0"))?,
            mu_inf: doc.require_f64(&format!("{prefix}.mu_inf"))?,
            gamma_c: doc.require_f64(&format!("{prefix}.gamma_c"))?,
            n: doc.require_f64(&format!("{prefix}.n"))?,
        }
    } else {
        ViscosityModel::Newtonian { mu: doc.require_f64(&format!("{prefix}.mu"))? }
    };
    Ok(FluidPhase { rho, viscosity })
}

fn parse_side(doc: &RawDoc, side: Side) -> Result<SideBc, ConfigError> {
    let name = side.name();
    let velocity_line = doc.get(&format!("bc.{name}.velocity")).map(|(l, _)| l);
    let velocity = doc.vec(&format!("bc.{name}.velocity"), 2)?.map(|v| [v[0], v[1]]);
    let window = doc.vec(&format!("bc.{name}.window"), 2)?;
    let base = match doc.get(&format!("bc.{name}")) {
        None => BaseBc::Dirichlet { velocity: [0.0, 0.0], inflow: false },
        Some((line, v)) => match v {
            "dirichlet" => BaseBc::Dirichlet {
                velocity: if window.is_none() { velocity.unwrap_or([0.0, 0.0]) } else { [0.0, 0.0] },
                inflow: false,
            },
            "inflow" => {
                if window.is_some() {
                    return Err(parse_err(
                        line,
                        format!("`bc.{name} = inflow` covers the whole side; use a base of open/dirichlet with `bc.{name}.window` for a partial inflow"),
                    ));
                }
                BaseBc::Dirichlet {
                    velocity: velocity.ok_or_else(|| {
                        parse_err(line, format!("`bc.{name} = inflow` requires `bc.{name}.velocity`"))
                    })?,
                    inflow: true,
                }
            }
            "open" => BaseBc::Open,
            "slip" => BaseBc::Slip,
            other => {
                return Err(parse_err(
                    line,
                    format!("`bc.{name}`: expected dirichlet|open|slip|inflow, got `{other}`"),
                ))
            }
        },
    };
    let window = match window {
        None => None,
        Some(w) => Some(InflowWindow {
            lo: w[0],
            hi: w[1],
            velocity: velocity.ok_or_else(|| ConfigError::Missing {
                key: format!("bc.{name}.velocity (required by bc.{name}.window)"),
            })?,
        }),
    };
    if velocity.is_some() && window.is_none() && !matches!(base, BaseBc::Dirichlet { .. }) {
        return Err(parse_err(
            velocity_line.unwrap_or(0),
            format!("`bc.{name}.velocity` needs a dirichlet/inflow base or a `bc.{name}.window`"),
        ));
    }
    Ok(SideBc { base, window })
}

/// Parse and validate a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let doc = RawDoc::parse(text)?;

    let domain = [
        doc.require_f64("domain.x0")?,
        doc.require_f64("domain.x1")?,
        doc.require_f64("domain.y0")?,
        doc.require_f64("domain.y1")?,
    ];
    let h0 = doc.require_f64("mesh.h0")?;
    let mut num = default_params();
    if let Some(r) = doc.usize("mesh.r_max")? {
        if r > 30 {
            return Err(invariant_err("mesh.r_max <= 30", format!("got {r}")));
        }
        num.r_max = r as u8;
    }
    {
        let n = &mut num;
        let overrides: [(&str, &mut f64); 11] = [
            ("num.c_cfl", &mut n.c_cfl),
            ("num.c_lambda", &mut n.c_lambda),
            ("num.c_h", &mut n.c_h),
            ("num.c_s", &mut n.c_s),
            ("num.c_r", &mut n.c_r),
            ("num.c_c", &mut n.c_c),
            ("num.c_lin", &mut n.c_lin),
            ("num.c_ent", &mut n.c_ent),
            ("num.p", &mut n.entropy_p),
            ("num.c_stab", &mut n.c_stab),
            ("num.rel_tol", &mut n.solver_rel_tol),
        ];
        for (key, slot) in overrides {
            if let Some(v) = doc.f64(key)? {
                *slot = v;
            }
        }
    }
    if let Some(v) = doc.usize("num.max_iter")? {
        num.solver_max_iter = v;
    }

    let t_final = doc.require_f64("time.t_final")?;
    let dt_max = doc.require_f64("time.dt_max")?;
    let dt_fixed = doc.f64("time.dt_fixed")?;

    let bc = [
        parse_side(&doc, Side::Left)?,
        parse_side(&doc, Side::Right)?,
        parse_side(&doc, Side::Bottom)?,
        parse_side(&doc, Side::Top)?,
    ];

    let levelset_init = match doc.get("levelset.init") {
        None => return Err(ConfigError::Missing { key: "levelset.init".to_string() }),
        Some((line, v)) => match v {
            "circle" => {
                let c = doc
                    .vec("levelset.center", 2)?
                    .ok_or_else(|| parse_err(line, "circle init requires `levelset.center`"))?;
                LevelSetInit::Circle {
                    cx: c[0],
                    cy: c[1],
                    r: doc.require_f64("levelset.radius")?,
                }
            }
            "halfplane" => {
                let n = doc
                    .vec("levelset.normal", 2)?
                    .ok_or_else(|| parse_err(line, "halfplane init requires `levelset.normal`"))?;
                LevelSetInit::Halfplane {
                    nx: n[0],
                    ny: n[1],
                    offset: doc.require_f64("levelset.offset")?,
                }
            }
            "box" => {
                let b = doc
                    .vec("levelset.box", 4)?
                    .ok_or_else(|| parse_err(line, "box init requires `levelset.box`"))?;
                LevelSetInit::Box { x0: b[0], x1: b[1], y0: b[2], y1: b[3] }
            }
            "zalesak" => {
                let c = doc
                    .vec("levelset.center", 2)?
                    .ok_or_else(|| parse_err(line, "zalesak init requires `levelset.center`"))?;
                LevelSetInit::SlottedCircle {
                    cx: c[0],
                    cy: c[1],
                    r: doc.require_f64("levelset.radius")?,
                    slot_w: doc.require_f64("levelset.slot_width")?,
                    slot_h: doc.require_f64("levelset.slot_height")?,
                }
            }
            "jet" => LevelSetInit::Jet {
                xc: doc.require_f64("levelset.jet_x")?,
                half_w: doc.require_f64("levelset.jet_halfwidth")?,
                tip_y: doc.require_f64("levelset.jet_tip")?,
                bath_y: doc.f64("levelset.bath_height")?,
            },
            other => {
                return Err(parse_err(
                    line,
                    format!("`levelset.init`: expected circle|halfplane|box|zalesak|jet, got `{other}`"),
                ))
            }
        },
    };

    let tanh_filter = match doc.get("levelset.filter") {
        None => true,
        Some((_, "tanh")) => true,
        Some((_, "none")) => false,
        Some((line, other)) => {
            return Err(parse_err(line, format!("`levelset.filter`: expected tanh|none, got `{other}`")))
        }
    };
    let levelset_opts = LevelSetOptions {
        stabilize: match doc.get("levelset.stabilization") {
            None | Some((_, "entropy")) => true,
            Some((_, "none")) => false,
            Some((line, other)) => {
                return Err(parse_err(
                    line,
                    format!("`levelset.stabilization`: expected entropy|none, got `{other}`"),
                ))
            }
        },
        reinit: match doc.get("levelset.reinit") {
            None | Some((_, "on")) => true,
            Some((_, "off")) => false,
            Some((line, other)) => {
                return Err(parse_err(line, format!("`levelset.reinit`: expected on|off, got `{other}`")))
            }
        },
    };
    let beta_fixed = doc.f64("levelset.beta_fixed")?;

    let transport = match doc.get("velocity.model") {
        None | Some((_, "none")) => None,
        Some((_, "rotation")) => {
            let c = doc.vec("velocity.center", 2)?.unwrap_or(vec![0.0, 0.0]);
            Some(TransportVelocity::Rotation {
                cx: c[0],
                cy: c[1],
                rate: doc.f64("velocity.rate")?.unwrap_or(1.0),
            })
        }
        Some((_, "vortex")) => Some(TransportVelocity::Vortex {
            period: doc.require_f64("velocity.period")?,
        }),
        Some((line, other)) => {
            return Err(parse_err(
                line,
                format!("`velocity.model`: expected none|rotation|vortex, got `{other}`"),
            ))
        }
    };

    let fluid = if transport.is_some() {
        // Pure transport: material properties are unused; keep a neutral
        // single-phase fill so the struct stays total.
        let air = FluidPhase { rho: 1.0, viscosity: ViscosityModel::Newtonian { mu: 1.0 } };
        let _ = doc.f64("fluid.sigma")?;
        PhysicalParams { plus: air, minus: air, sigma: 0.0, gravity: [0.0, 0.0] }
    } else {
        PhysicalParams {
            plus: parse_phase(&doc, "fluid.plus")?,
            minus: parse_phase(&doc, "fluid.minus")?,
            sigma: doc.f64("fluid.sigma")?.unwrap_or(0.0),
            gravity: doc.vec("gravity", 2)?.map(|g| [g[0], g[1]]).unwrap_or([0.0, 0.0]),
        }
    };

    let init_velocity_below = match doc.vec("init.velocity_below", 3)? {
        None => None,
        Some(v) => Some((v[0], [v[1], v[2]])),
    };

    let output_every = doc.usize("output.every")?.unwrap_or(50);
    let output_dir = doc.get("output.dir").map(|(_, v)| v.to_string());

    doc.check_unknown()?;

    let cfg = ScenarioConfig {
        domain,
        h0,
        t_final,
        dt_max,
        dt_fixed,
        bc,
        levelset_init,
        tanh_filter,
        levelset_opts,
        beta_fixed,
        transport,
        fluid,
        init_velocity_below,
        num,
        output_every,
        output_dir,
    };
    validate(&cfg)?;
    Ok(cfg)
}

/// Check every invariant a scenario must satisfy. Errors name the violated
/// invariant.
pub fn validate(cfg: &ScenarioConfig) -> Result<(), ConfigError> {
    let [x0, x1, y0, y1] = cfg.domain;
    if !(x1 > x0) {
        return Err(invariant_err("domain.x1 > domain.x0", format!("{x0} .. {x1}")));
    }
    if !(y1 > y0) {
        return Err(invariant_err("domain.y1 > domain.y0", format!("{y0} .. {y1}")));
    }
    if !(cfg.h0 > 0.0) {
        return Err(invariant_err("mesh.h0 > 0", format!("{}", cfg.h0)));
    }
    for (extent, axis) in [(x1 - x0, "x"), (y1 - y0, "y")] {
        let n = extent / cfg.h0;
        if (n - n.round()).abs() > 1e-12 * n.max(1.0) || n.round() < 1.0 {
            return Err(invariant_err(
                "mesh.h0 divides the domain extents",
                format!("{axis} extent {extent} / h0 {} = {n}", cfg.h0),
            ));
        }
    }
    if !(cfg.t_final > 0.0) {
        return Err(invariant_err("time.t_final > 0", format!("{}", cfg.t_final)));
    }
    if !(cfg.dt_max > 0.0) {
        return Err(invariant_err("time.dt_max > 0", format!("{}", cfg.dt_max)));
    }
    if let Some(dt) = cfg.dt_fixed {
        if !(dt > 0.0) {
            return Err(invariant_err("time.dt_fixed > 0", format!("{dt}")));
        }
    }

    let n = &cfg.num;
    for (name, v) in [
        ("num.c_cfl > 0", n.c_cfl),
        ("num.c_lambda > 0", n.c_lambda),
        ("num.c_h > 0", n.c_h),
        ("num.c_s > 0", n.c_s),
        ("num.c_r > 0", n.c_r),
        ("num.c_c > 0", n.c_c),
        ("num.c_lin > 0", n.c_lin),
        ("num.c_ent > 0", n.c_ent),
        ("num.c_stab > 0", n.c_stab),
    ] {
        if !(v > 0.0) {
            return Err(invariant_err(name, format!("{v}")));
        }
    }
    if !(n.c_c >= n.c_r) {
        return Err(invariant_err("num.c_c >= num.c_r", format!("c_c {} < c_r {}", n.c_c, n.c_r)));
    }
    if !(n.entropy_p >= 1.0) {
        return Err(invariant_err("num.p >= 1", format!("{}", n.entropy_p)));
    }
    if !(n.solver_rel_tol > 0.0 && n.solver_rel_tol < 1.0) {
        return Err(invariant_err("num.rel_tol in (0, 1)", format!("{}", n.solver_rel_tol)));
    }
    if n.solver_max_iter == 0 {
        return Err(invariant_err("num.max_iter >= 1", "0".to_string()));
    }

    for phase in [&cfg.fluid.plus, &cfg.fluid.minus] {
        if !(phase.rho > 0.0) {
            return Err(invariant_err("fluid.rho > 0", format!("{}", phase.rho)));
        }
        match phase.viscosity {
            ViscosityModel::Newtonian { mu } => {
                if !(mu > 0.0) {
                    return Err(invariant_err("fluid.mu > 0", format!("{mu}")));
                }
            }
            ViscosityModel::Cross { mu0, mu_inf, gamma_c, n } => {
                for (name, v) in [
                    ("fluid.mu0 > 0", mu0),
                    ("fluid.mu_inf > 0", mu_inf),
                    ("fluid.gamma_c > 0", gamma_c),
                    ("fluid.n > 0", n),
                ] {
                    if !(v > 0.0) {
                        return Err(invariant_err(name, format!("{v}")));
                    }
                }
            }
        }
    }
    if !(cfg.fluid.sigma >= 0.0) {
        return Err(invariant_err("fluid.sigma >= 0", format!("{}", cfg.fluid.sigma)));
    }

    for (idx, side) in SIDES.iter().enumerate() {
        if let Some(w) = &cfg.bc[idx].window {
            let (lo, hi) = match side {
                Side::Left | Side::Right => (y0, y1),
                Side::Bottom | Side::Top => (x0, x1),
            };
            if !(w.lo < w.hi) {
                return Err(invariant_err(
                    "bc window is a nonempty interval",
                    format!("bc.{}.window = {}, {}", side.name(), w.lo, w.hi),
                ));
            }
            if w.lo < lo - 1e-12 || w.hi > hi + 1e-12 {
                return Err(invariant_err(
                    "bc window lies within its side",
                    format!("bc.{}.window = {}, {} outside {lo} .. {hi}", side.name(), w.lo, w.hi),
                ));
            }
        }
    }

    match cfg.levelset_init {
        LevelSetInit::Circle { r, .. } => {
            if !(r > 0.0) {
                return Err(invariant_err("levelset.radius > 0", format!("{r}")));
            }
        }
        LevelSetInit::SlottedCircle { r, slot_w, slot_h, .. } => {
            if !(r > 0.0 && slot_w > 0.0 && slot_h > 0.0) {
                return Err(invariant_err(
                    "zalesak shape parameters > 0",
                    format!("r {r}, slot {slot_w} x {slot_h}"),
                ));
            }
        }
        LevelSetInit::Jet { half_w, .. } => {
            if !(half_w > 0.0) {
                return Err(invariant_err("levelset.jet_halfwidth > 0", format!("{half_w}")));
            }
        }
        LevelSetInit::Halfplane { nx, ny, .. } => {
            if nx.hypot(ny) == 0.0 {
                return Err(invariant_err("levelset.normal is nonzero", "0, 0".to_string()));
            }
        }
        LevelSetInit::Box { x0, x1, y0, y1 } => {
            if !(x1 > x0 && y1 > y0) {
                return Err(invariant_err(
                    "levelset.box is a nonempty rectangle",
                    format!("{x0}, {x1}, {y0}, {y1}"),
                ));
            }
        }
    }

    if let Some(beta) = cfg.beta_fixed {
        if !(beta > 0.0) {
            return Err(invariant_err("levelset.beta_fixed > 0", format!("{beta}")));
        }
    }
    if cfg.output_every == 0 {
        return Err(invariant_err("output.every >= 1", "0".to_string()));
    }
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", ")
}

/// Serialize a scenario so that `parse_scenario(write_scenario(cfg)) == cfg`.
pub fn write_scenario(cfg: &ScenarioConfig) -> String {
    let mut out = String::new();
    let [x0, x1, y0, y1] = cfg.domain;
    let _ = writeln!(out, "domain.x0 = {}", fmt_f64(x0));
    let _ = writeln!(out, "domain.x1 = {}", fmt_f64(x1));
    let _ = writeln!(out, "domain.y0 = {}", fmt_f64(y0));
    let _ = writeln!(out, "domain.y1 = {}", fmt_f64(y1));
    let _ = writeln!(out, "mesh.h0 = {}", fmt_f64(cfg.h0));
    let _ = writeln!(out, "mesh.r_max = {}", cfg.num.r_max);
    let n = &cfg.num;
    for (key, v) in [
        ("num.c_cfl", n.c_cfl),
        ("num.c_lambda", n.c_lambda),
        ("num.c_h", n.c_h),
        ("num.c_s", n.c_s),
        ("num.c_r", n.c_r),
        ("num.c_c", n.c_c),
        ("num.c_lin", n.c_lin),
        ("num.c_ent", n.c_ent),
        ("num.p", n.entropy_p),
        ("num.c_stab", n.c_stab),
        ("num.rel_tol", n.solver_rel_tol),
    ] {
        let _ = writeln!(out, "{key} = {}", fmt_f64(v));
    }
    let _ = writeln!(out, "num.max_iter = {}", n.solver_max_iter);
    let _ = writeln!(out, "time.t_final = {}", fmt_f64(cfg.t_final));
    let _ = writeln!(out, "time.dt_max = {}", fmt_f64(cfg.dt_max));
    if let Some(dt) = cfg.dt_fixed {
        let _ = writeln!(out, "time.dt_fixed = {}", fmt_f64(dt));
    }

    for (idx, side) in SIDES.iter().enumerate() {
        let name = side.name();
        let bc = &cfg.bc[idx];
        match bc.base {
            BaseBc::Dirichlet { velocity, inflow } => {
                if inflow {
                    let _ = writeln!(out, "bc.{name} = inflow");
                    let _ = writeln!(out, "bc.{name}.velocity = {}", fmt_vec(&velocity));
                } else {
                    let _ = writeln!(out, "bc.{name} = dirichlet");
                    if bc.window.is_none() && velocity != [0.0, 0.0] {
                        let _ = writeln!(out, "bc.{name}.velocity = {}", fmt_vec(&velocity));
                    }
                }
            }
            BaseBc::Open => {
                let _ = writeln!(out, "bc.{name} = open");
            }
            BaseBc::Slip => {
                let _ = writeln!(out, "bc.{name} = slip");
            }
        }
        if let Some(w) = &bc.window {
            let _ = writeln!(out, "bc.{name}.window = {}", fmt_vec(&[w.lo, w.hi]));
            let _ = writeln!(out, "bc.{name}.velocity = {}", fmt_vec(&w.velocity));
        }
    }

    match cfg.levelset_init {
        LevelSetInit::Circle { cx, cy, r } => {
            let _ = writeln!(out, "levelset.init = circle");
            let _ = writeln!(out, "levelset.center = {}", fmt_vec(&[cx, cy]));
            let _ = writeln!(out, "levelset.radius = {}", fmt_f64(r));
        }
        LevelSetInit::Halfplane { nx, ny, offset } => {
            let _ = writeln!(out, "levelset.init = halfplane");
            let _ = writeln!(out, "levelset.normal = {}", fmt_vec(&[nx, ny]));
            let _ = writeln!(out, "levelset.offset = {}", fmt_f64(offset));
        }
        LevelSetInit::Box { x0, x1, y0, y1 } => {
            let _ = writeln!(out, "levelset.init = box");
            let _ = writeln!(out, "levelset.box = {}", fmt_vec(&[x0, x1, y0, y1]));
        }
        LevelSetInit::SlottedCircle { cx, cy, r, slot_w, slot_h } => {
            let _ = writeln!(out, "levelset.init = zalesak");
            let _ = writeln!(out, "levelset.center = {}", fmt_vec(&[cx, cy]));
            let _ = writeln!(out, "levelset.radius = {}", fmt_f64(r));
            let _ = writeln!(out, "levelset.slot_width = {}", fmt_f64(slot_w));
            let _ = writeln!(out, "levelset.slot_height = {}", fmt_f64(slot_h));
        }
        LevelSetInit::Jet { xc, half_w, tip_y, bath_y } => {
            let _ = writeln!(out, "levelset.init = jet");
            let _ = writeln!(out, "levelset.jet_x = {}", fmt_f64(xc));
            let _ = writeln!(out, "levelset.jet_halfwidth = {}", fmt_f64(half_w));
            let _ = writeln!(out, "levelset.jet_tip = {}", fmt_f64(tip_y));
            if let Some(b) = bath_y {
                let _ = writeln!(out, "levelset.bath_height = {}", fmt_f64(b));
            }
        }
    }
    if !cfg.tanh_filter {
        let _ = writeln!(out, "levelset.filter = none");
    }
    if !cfg.levelset_opts.stabilize {
        let _ = writeln!(out, "levelset.stabilization = none");
    }
    if !cfg.levelset_opts.reinit {
        let _ = writeln!(out, "levelset.reinit = off");
    }
    if let Some(beta) = cfg.beta_fixed {
        let _ = writeln!(out, "levelset.beta_fixed = {}", fmt_f64(beta));
    }

    match cfg.transport {
        None => {
            let plus = &cfg.fluid.plus;
            let minus = &cfg.fluid.minus;
            for (prefix, phase) in [("fluid.plus", plus), ("fluid.minus", minus)] {
                let _ = writeln!(out, "{prefix}.rho = {}", fmt_f64(phase.rho));
                match phase.viscosity {
                    ViscosityModel::Newtonian { mu } => {
                        let _ = writeln!(out, "{prefix}.mu = {}", fmt_f64(mu));
                    }
                    ViscosityModel::Cross { mu0, mu_inf, gamma_c, n } => {
                        let _ = writeln!(out, "{prefix}.model = cross");
                        let _ = writeln!(out, "{prefix}.mu0 = {}", fmt_f64(mu0));
                        let _ = writeln!(out, "{prefix}.mu_inf = {}", fmt_f64(mu_inf));
                        let _ = writeln!(out, "{prefix}.gamma_c = {}", fmt_f64(gamma_c));
                        let _ = writeln!(out, "{prefix}.n = {}", fmt_f64(n));
                    }
                }
            }
            let _ = writeln!(out, "fluid.sigma = {}", fmt_f64(cfg.fluid.sigma));
            let _ = writeln!(out, "gravity = {}", fmt_vec(&cfg.fluid.gravity));
        }
        Some(TransportVelocity::Rotation { cx, cy, rate }) => {
            let _ = writeln!(out, "velocity.model = rotation");
            let _ = writeln!(out, "velocity.center = {}", fmt_vec(&[cx, cy]));
            let _ = writeln!(out, "velocity.rate = {}", fmt_f64(rate));
        }
        Some(TransportVelocity::Vortex { period }) => {
            let _ = writeln!(out, "velocity.model = vortex");
            let _ = writeln!(out, "velocity.period = {}", fmt_f64(period));
        }
    }

    if let Some((below, v)) = cfg.init_velocity_below {
        let _ = writeln!(out, "init.velocity_below = {}", fmt_vec(&[below, v[0], v[1]]));
    }
    let _ = writeln!(out, "output.every = {}", cfg.output_every);
    if let Some(dir) = &cfg.output_dir {
        let _ = writeln!(out, "output.dir = {dir}");
    }
    out
}

/// Numerical overrides applied after parsing (CLI flags).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub t_final: Option<f64>,
    pub dt_max: Option<f64>,
    pub every: Option<usize>,
    pub out_dir: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(t) = self.t_final {
            cfg.t_final = t;
        }
        if let Some(dt) = self.dt_max {
            cfg.dt_max = dt;
            cfg.dt_fixed = None;
        }
        if let Some(e) = self.every {
            cfg.output_every = e;
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = Some(d.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_values() {
        let p = default_params();
        assert_eq!(p.c_cfl, 0.25);
        assert_eq!(p.c_lambda, 0.01);
        assert_eq!(p.c_h, 1.25);
        assert_eq!(p.c_s, 0.5);
        assert_eq!(p.c_r, 2.0);
        assert_eq!(p.c_c, 2.0);
        assert_eq!(p.r_max, 2);
        assert_eq!(p.c_lin, 0.1);
        assert_eq!(p.c_ent, 0.1);
        assert_eq!(p.entropy_p, 20.0);
        assert_eq!(p.c_stab, 0.1);
        assert_eq!(p.solver_rel_tol, 1e-8);
        assert_eq!(p.solver_max_iter, 10_000);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let text = "domain.x0 = 0\ndomain.x1 = oops\n";
        match parse_scenario(text) {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let mut text = crate::scenarios::builtin("rotating_circle").unwrap().to_string();
        let extra_line = text.lines().count() + 1;
        text.push_str("not.a.key = 1\n");
        match parse_scenario(&text) {
            Err(ConfigError::Parse { line, msg }) => {
                assert_eq!(line, extra_line);
                assert!(msg.contains("not.a.key"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn band_ordering_invariant_named() {
        let mut cfg = parse_scenario(crate::scenarios::builtin("rotating_circle").unwrap()).unwrap();
        cfg.num.c_c = 1.0;
        cfg.num.c_r = 2.0;
        match validate(&cfg) {
            Err(ConfigError::Validation { invariant, .. }) => {
                assert_eq!(invariant, "num.c_c >= num.c_r");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn entropy_exponent_invariant_named() {
        let mut cfg = parse_scenario(crate::scenarios::builtin("rotating_circle").unwrap()).unwrap();
        cfg.num.entropy_p = 0.5;
        match validate(&cfg) {
            Err(ConfigError::Validation { invariant, .. }) => assert_eq!(invariant, "num.p >= 1"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn rising_bubble_document_values() {
        let cfg = parse_scenario(crate::scenarios::builtin("bubble1").unwrap()).unwrap();
        assert_eq!(cfg.fluid.plus.rho, 1000.0);
        assert_eq!(cfg.fluid.minus.rho, 100.0);
        assert_eq!(cfg.fluid.plus.viscosity, ViscosityModel::Newtonian { mu: 10.0 });
        assert_eq!(cfg.fluid.minus.viscosity, ViscosityModel::Newtonian { mu: 1.0 });
        assert_eq!(cfg.fluid.sigma, 24.5);
        assert_eq!(cfg.fluid.gravity[1].abs(), 0.98);
        assert_eq!(cfg.domain, [0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn cross_model_values_eval() {
        let m = ViscosityModel::Cross { mu0: 5.7, mu_inf: 1e-3, gamma_c: 970.0, n: 3.0 };
        assert!((m.eval(0.0) - 5.7).abs() < 1e-14);
        assert!((m.eval(1e12) - 1e-3).abs() < 1e-9);
        let mid = m.eval(970.0);
        assert!((mid - 0.5 * (5.7 + 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_builtins() {
        for name in crate::scenarios::names() {
            let cfg = parse_scenario(crate::scenarios::builtin(name).unwrap())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = write_scenario(&cfg);
            let cfg2 = parse_scenario(&text).unwrap_or_else(|e| panic!("{name} rewrite: {e}"));
            assert_eq!(cfg, cfg2, "{name} does not round-trip");
        }
    }
}
