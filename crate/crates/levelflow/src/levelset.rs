//! Interface transport.
//!
//! The interface is the zero set of a scalar field carried by the flow.
//! Away from equilibrium the field is pushed toward the profile
//! `beta * tanh(d / beta)` by a forcing term active outside a small dead
//! zone around the interface; a nonlinear entropy-based viscosity keeps
//! the transport stable without smearing smooth regions. Time stepping is
//! s three-stage strong-stability-preserving Runge-Kutta scheme; every
//! stage is an explicit mass solve in increment form so solver error stays
//! far below the scheme error.

use crate::config::{LevelSetOptions, NumericalParams};
use crate::fem::{
    assemble_mass, solve_spd, BasisTable, ConstraintSet, Csr, Quadrature, SolveError, Space,
};
use crate::mesh::Mesh;

/// Gradient magnitudes below this are treated as zero when normalizing
/// directions.
pub const GRAD_FLOOR: f64 = 1e-14;

/// Equilibrium interface profile for a signed distance `d`.
pub fn tanh_profile(d: f64, beta: f64) -> f64 {
    beta * (d / beta).tanh()
}

/// Regularized sign: `+/-1` outside the dead zone `|s| <= beta*tanh(c_s)`,
/// zero inside it.
pub fn sign_h(s: f64, beta: f64, c_s: f64) -> f64 {
    let dead = beta * c_s.tanh();
    if s > dead {
        1.0
    } else if s < -dead {
        -1.0
    } else {
        0.0
    }
}

/// Reinitialization speed: a small fraction of the peak flow speed.
pub fn compute_lambda(c_lambda: f64, speeds: impl Iterator<Item = [f64; 2]>) -> f64 {
    c_lambda * speeds.map(|[a, b]| a.hypot(b)).fold(0.0, f64::max)
}

fn entropy(phi: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && (1.0..=64.0).contains(&p) {
        phi.abs().powi(p as i32)
    } else {
        phi.abs().powf(p)
    }
}

fn entropy_prime(phi: f64, p: f64) -> f64 {
    if phi == 0.0 {
        return 0.0;
    }
    let mag = if p.fract() == 0.0 && (2.0..=65.0).contains(&p) {
        p * phi.abs().powi(p as i32 - 1)
    } else {
        p * phi.abs().powf(p - 1.0)
    };
    mag * phi.signum()
}

/// Velocity sampled at quadrature points during transport assembly.
pub trait StageVelocity {
    /// Velocity at quadrature point `q` of leaf `ci`, located at `(x, y)`.
    fn at(&self, ci: usize, q: usize, x: f64, y: f64) -> [f64; 2];
}

/// A closed-form velocity field.
pub struct AnalyticVelocity<F: Fn(f64, f64) -> [f64; 2]>(pub F);

impl<F: Fn(f64, f64) -> [f64; 2]> StageVelocity for AnalyticVelocity<F> {
    fn at(&self, _ci: usize, _q: usize, x: f64, y: f64) -> [f64; 2] {
        (self.0)(x, y)
    }
}

/// A finite-element velocity with interleaved components, pre-tabulated on
/// the same quadrature rule the transport assembly uses.
pub struct FeVelocity<'a> {
    pub space: &'a Space,
    pub values: &'a [f64],
    pub table: &'a BasisTable,
}

impl StageVelocity for FeVelocity<'_> {
    fn at(&self, ci: usize, q: usize, _x: f64, _y: f64) -> [f64; 2] {
        let mut u = [0.0, 0.0];
        for (b, &node) in self.space.cell_nodes(ci).iter().enumerate() {
            let n = self.table.values[q][b];
            u[0] += self.values[2 * node] * n;
            u[1] += self.values[2 * node + 1] * n;
        }
        u
    }
}

/// Mesh-bound scratch for transport: the quadrature rule, basis tables and
/// the (hanging-condensed) mass matrix. Rebuild after every mesh change.
pub struct TransportWorkspace {
    pub quad: Quadrature,
    pub table: BasisTable,
    pub mass: Csr,
}

impl TransportWorkspace {
    pub fn new(mesh: &Mesh, space: &Space, cs: &ConstraintSet) -> TransportWorkspace {
        let quad = Quadrature::gauss(3);
        let table = BasisTable::new(space.degree, &quad);
        let mass = assemble_mass(mesh, space, cs, &quad);
        TransportWorkspace { quad, table, mass }
    }
}

/// Per-cell stabilization viscosities from the most recent stage build.
#[derive(Debug, Clone)]
pub struct StageViscosities {
    pub mu_stab: Vec<f64>,
    pub mu_lin: Vec<f64>,
    pub mu_ent: Vec<f64>,
}

impl StageViscosities {
    fn zeros(n: usize) -> StageViscosities {
        StageViscosities { mu_stab: vec![0.0; n], mu_lin: vec![0.0; n], mu_ent: vec![0.0; n] }
    }
}

#[derive(Clone, Copy)]
struct QpData {
    x: f64,
    y: f64,
    w: f64,
    phi: f64,
    grad: [f64; 2],
}

/// Evaluate field value, gradient and weight at every quadrature point of a
/// cell.
fn cell_qp_data(
    mesh: &Mesh,
    space: &Space,
    quad: &Quadrature,
    table: &BasisTable,
    phi: &[f64],
    ci: usize,
    out: &mut Vec<QpData>,
) {
    out.clear();
    let side = mesh.cell_side(ci);
    let area = side * side;
    let inv_h = 1.0 / side;
    let c = mesh.leaf(ci);
    let [ox, oy] = mesh.point(c.ax, c.ay);
    let nodes = space.cell_nodes(ci);
    for q in 0..quad.len() {
        let [px, py] = quad.points[q];
        let mut v = 0.0;
        let mut g = [0.0, 0.0];
        for (b, &node) in nodes.iter().enumerate() {
            let nv = phi[node];
            v += nv * table.values[q][b];
            g[0] += nv * table.grads[q][b][0] * inv_h;
            g[1] += nv * table.grads[q][b][1] * inv_h;
        }
        out.push(QpData {
            x: ox + px * side,
            y: oy + py * side,
            w: quad.weights[q] * area,
            phi: v,
            grad: g,
        });
    }
}

/// The transport operator at one point: advection plus, when enabled, the
/// profile-restoring forcing.
fn transport_value(
    d: &QpData,
    u: [f64; 2],
    lambda: f64,
    beta: f64,
    c_s: f64,
    reinit: bool,
) -> f64 {
    let adv = -(u[0] * d.grad[0] + u[1] * d.grad[1]);
    if !reinit || lambda == 0.0 {
        return adv;
    }
    let gnorm = d.grad[0].hypot(d.grad[1]);
    let shape = 1.0 - (d.phi / beta) * (d.phi / beta);
    adv + lambda * sign_h(d.phi, beta, c_s) * (shape - gnorm)
}

/// Weak-form right-hand side of the transport operator: entries are the
/// integrals of the operator against each (constraint-condensed) test
/// function.
#[allow(clippy::too_many_arguments)]
pub fn transport_rhs(
    mesh: &Mesh,
    space: &Space,
    cs: &ConstraintSet,
    quad: &Quadrature,
    table: &BasisTable,
    phi: &[f64],
    u: &dyn StageVelocity,
    lambda: f64,
    beta: f64,
    c_s: f64,
    reinit: bool,
) -> Vec<f64> {
    let nb = space.nodes_per_cell;
    let mut rhs = vec![0.0; space.n_nodes];
    let mut local = vec![0.0; nb];
    let mut qp = Vec::with_capacity(quad.len());
    for ci in 0..mesh.n_leaves() {
        cell_qp_data(mesh, space, quad, table, phi, ci, &mut qp);
        local.iter_mut().for_each(|v| *v = 0.0);
        for (q, d) in qp.iter().enumerate() {
            let uv = u.at(ci, q, d.x, d.y);
            let lw = transport_value(d, uv, lambda, beta, c_s, reinit) * d.w;
            for (b, lv) in local.iter_mut().enumerate() {
                *lv += lw * table.values[q][b];
            }
        }
        cs.distribute_rhs_local(space.cell_nodes(ci), &local, &mut rhs);
    }
    rhs
}

/// Per-cell supremum (over quadrature points) of the entropy residual of a
/// stage field against the step's start field.
#[allow(clippy::too_many_arguments)]
pub fn entropy_residual_sup(
    mesh: &Mesh,
    space: &Space,
    quad: &Quadrature,
    table: &BasisTable,
    phi_stage: &[f64],
    phi_old: &[f64],
    dt_eff: f64,
    u: &dyn StageVelocity,
    lambda: f64,
    beta: f64,
    num: &NumericalParams,
    reinit: bool,
) -> Vec<f64> {
    let p = num.entropy_p;
    let mut sup = vec![0.0; mesh.n_leaves()];
    let mut qp = Vec::with_capacity(quad.len());
    let mut qp_old = Vec::with_capacity(quad.len());
    for ci in 0..mesh.n_leaves() {
        cell_qp_data(mesh, space, quad, table, phi_stage, ci, &mut qp);
        cell_qp_data(mesh, space, quad, table, phi_old, ci, &mut qp_old);
        let mut m = 0.0f64;
        for (q, d) in qp.iter().enumerate() {
            let uv = u.at(ci, q, d.x, d.y);
            let de = (entropy(d.phi, p) - entropy(qp_old[q].phi, p)) / dt_eff;
            // The forcing enters the residual with the opposite sign of the
            // advection: the equation moves entropy only through those two.
            let transport = -transport_value(d, uv, lambda, beta, num.c_s, reinit);
            let r = de + transport * entropy_prime(d.phi, p);
            m = m.max(r.abs());
        }
        sup[ci] = m;
    }
    sup
}

/// Stabilization viscosities for one stage: an entropy-residual viscosity
/// capped by a first-order upwind viscosity, per cell.
#[allow(clippy::too_many_arguments)]
pub fn stage_viscosities(
    mesh: &Mesh,
    space: &Space,
    quad: &Quadrature,
    table: &BasisTable,
    phi_stage: &[f64],
    phi_old: &[f64],
    dt_eff: f64,
    u: &dyn StageVelocity,
    lambda: f64,
    beta: f64,
    num: &NumericalParams,
    reinit: bool,
) -> StageViscosities {
    let n_cells = mesh.n_leaves();
    let p = num.entropy_p;
    let mut qp = Vec::with_capacity(quad.len());

    // Mean entropy over the domain, then the global deviation scale.
    let mut e_int = 0.0;
    let mut area = 0.0;
    for ci in 0..n_cells {
        cell_qp_data(mesh, space, quad, table, phi_stage, ci, &mut qp);
        for d in &qp {
            e_int += d.w * entropy(d.phi, p);
            area += d.w;
        }
    }
    let e_mean = e_int / area;
    let mut e_dev = 0.0f64;
    for ci in 0..n_cells {
        cell_qp_data(mesh, space, quad, table, phi_stage, ci, &mut qp);
        for d in &qp {
            e_dev = e_dev.max((entropy(d.phi, p) - e_mean).abs());
        }
    }

    let r_sup = entropy_residual_sup(
        mesh, space, quad, table, phi_stage, phi_old, dt_eff, u, lambda, beta, num, reinit,
    );

    let mut out = StageViscosities::zeros(n_cells);
    for ci in 0..n_cells {
        cell_qp_data(mesh, space, quad, table, phi_stage, ci, &mut qp);
        let mut speed_sup = 0.0f64;
        for (q, d) in qp.iter().enumerate() {
            let uv = u.at(ci, q, d.x, d.y);
            let mut vx = uv[0];
            let mut vy = uv[1];
            if reinit && lambda != 0.0 {
                let gnorm = d.grad[0].hypot(d.grad[1]);
                if gnorm >= GRAD_FLOOR {
                    let s = lambda * sign_h(d.phi, beta, num.c_s) / gnorm;
                    vx += s * d.grad[0];
                    vy += s * d.grad[1];
                }
            }
            speed_sup = speed_sup.max(vx.hypot(vy));
        }
        let h = mesh.cell_diag(ci);
        let mu_lin = num.c_lin * h * speed_sup;
        let mu_ent = if e_dev > f64::MIN_POSITIVE {
            num.c_ent * h * h * r_sup[ci] / e_dev
        } else {
            0.0
        };
        out.mu_lin[ci] = mu_lin;
        out.mu_ent[ci] = mu_ent;
        out.mu_stab[ci] = mu_lin.min(mu_ent);
    }
    out
}

/// Weak form of the stabilizing diffusion: entries are
/// `integral(mu_K grad(phi) . grad(W))` per test function.
fn diffusion_rhs(
    mesh: &Mesh,
    space: &Space,
    cs: &ConstraintSet,
    quad: &Quadrature,
    table: &BasisTable,
    phi: &[f64],
    mu: &[f64],
) -> Vec<f64> {
    let nb = space.nodes_per_cell;
    let mut rhs = vec![0.0; space.n_nodes];
    let mut local = vec![0.0; nb];
    let mut qp = Vec::with_capacity(quad.len());
    for ci in 0..mesh.n_leaves() {
        if mu[ci] == 0.0 {
            continue;
        }
        cell_qp_data(mesh, space, quad, table, phi, ci, &mut qp);
        let inv_h = 1.0 / mesh.cell_side(ci);
        local.iter_mut().for_each(|v| *v = 0.0);
        for (q, d) in qp.iter().enumerate() {
            let w = d.w * mu[ci];
            for (b, lv) in local.iter_mut().enumerate() {
                let g = table.grads[q][b];
                *lv += w * (d.grad[0] * g[0] + d.grad[1] * g[1]) * inv_h;
            }
        }
        cs.distribute_rhs_local(space.cell_nodes(ci), &local, &mut rhs);
    }
    rhs
}

/// One transport step with the three-stage strong-stability-preserving
/// Runge-Kutta scheme. The three velocities sample the start, end, and
/// midpoint of the step. Returns the new field and the viscosities of the
/// final stage build (for diagnostics and output).
#[allow(clippy::too_many_arguments)]
pub fn ssprk3_step(
    mesh: &Mesh,
    space: &Space,
    cs: &ConstraintSet,
    ws: &TransportWorkspace,
    phi_n: &[f64],
    u_start: &dyn StageVelocity,
    u_end: &dyn StageVelocity,
    u_mid: &dyn StageVelocity,
    dt: f64,
    lambda: f64,
    beta: f64,
    num: &NumericalParams,
    opts: LevelSetOptions,
) -> Result<(Vec<f64>, StageViscosities), SolveError> {
    let n = space.n_nodes;
    let mass_solve = |rhs: &[f64]| -> Result<Vec<f64>, SolveError> {
        let mut d = vec![0.0; n];
        solve_spd(&ws.mass, rhs, &mut d, num.solver_rel_tol, num.solver_max_iter)?;
        Ok(d)
    };

    // Stage 1: pure operator application, no stabilization.
    let b1 = transport_rhs(
        mesh, space, cs, &ws.quad, &ws.table, phi_n, u_start, lambda, beta, num.c_s, opts.reinit,
    );
    let rhs1: Vec<f64> = b1.iter().map(|v| dt * v).collect();
    let mut d1 = mass_solve(&rhs1)?;
    cs.distribute(&mut d1);
    let phi1: Vec<f64> = phi_n.iter().zip(&d1).map(|(p, d)| p + d).collect();

    // Stage 2: convex combination plus a quarter step, stabilized.
    let visc2 = if opts.stabilize {
        Some(stage_viscosities(
            mesh, space, &ws.quad, &ws.table, &phi1, phi_n, dt, u_end, lambda, beta, num,
            opts.reinit,
        ))
    } else {
        None
    };
    let b2 = transport_rhs(
        mesh, space, cs, &ws.quad, &ws.table, &phi1, u_end, lambda, beta, num.c_s, opts.reinit,
    );
    let s2 = visc2
        .as_ref()
        .map(|v| diffusion_rhs(mesh, space, cs, &ws.quad, &ws.table, &phi1, &v.mu_stab));
    let rhs2: Vec<f64> = (0..n)
        .map(|i| 0.25 * dt * (b2[i] - s2.as_ref().map_or(0.0, |s| s[i])))
        .collect();
    let mut d2 = mass_solve(&rhs2)?;
    cs.distribute(&mut d2);
    let phi2: Vec<f64> = (0..n).map(|i| 0.75 * phi_n[i] + 0.25 * phi1[i] + d2[i]).collect();

    // Stage 3: midpoint build with an effective half step in the residual.
    let visc3 = if opts.stabilize {
        Some(stage_viscosities(
            mesh, space, &ws.quad, &ws.table, &phi2, phi_n, 0.5 * dt, u_mid, lambda, beta, num,
            opts.reinit,
        ))
    } else {
        None
    };
    let b3 = transport_rhs(
        mesh, space, cs, &ws.quad, &ws.table, &phi2, u_mid, lambda, beta, num.c_s, opts.reinit,
    );
    let s3 = visc3
        .as_ref()
        .map(|v| diffusion_rhs(mesh, space, cs, &ws.quad, &ws.table, &phi2, &v.mu_stab));
    let rhs3: Vec<f64> = (0..n)
        .map(|i| (2.0 / 3.0) * dt * (b3[i] - s3.as_ref().map_or(0.0, |s| s[i])))
        .collect();
    let mut d3 = mass_solve(&rhs3)?;
    cs.distribute(&mut d3);
    let phi3: Vec<f64> =
        (0..n).map(|i| phi_n[i] / 3.0 + 2.0 / 3.0 * phi2[i] + d3[i]).collect();

    let diag = visc3.unwrap_or_else(|| StageViscosities::zeros(mesh.n_leaves()));
    Ok((phi3, diag))
}

/// Largest stable transport step: a fraction of the smallest cell-crossing
/// time of the combined advection-plus-forcing speed. `None` when the
/// field is at rest everywhere (no speed to resolve).
#[allow(clippy::too_many_arguments)]
pub fn cfl_dt(
    mesh: &Mesh,
    space: &Space,
    quad: &Quadrature,
    table: &BasisTable,
    phi: &[f64],
    u: &dyn StageVelocity,
    lambda: f64,
    beta: f64,
    num: &NumericalParams,
    reinit: bool,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut qp = Vec::with_capacity(quad.len());
    for ci in 0..mesh.n_leaves() {
        cell_qp_data(mesh, space, quad, table, phi, ci, &mut qp);
        let mut speed = 0.0f64;
        for (q, d) in qp.iter().enumerate() {
            let uv = u.at(ci, q, d.x, d.y);
            let mut vx = uv[0];
            let mut vy = uv[1];
            if reinit && lambda != 0.0 {
                let gnorm = d.grad[0].hypot(d.grad[1]);
                if gnorm >= GRAD_FLOOR {
                    let s = lambda * sign_h(d.phi, beta, num.c_s) / gnorm;
                    vx += s * d.grad[0];
                    vy += s * d.grad[1];
                }
            }
            speed = speed.max(vx.hypot(vy));
        }
        if speed > 0.0 {
            let dt = num.c_cfl * mesh.cell_diag(ci) / speed;
            best = Some(best.map_or(dt, |b: f64| b.min(dt)));
        }
    }
    best
}
