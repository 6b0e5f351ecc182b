//! Incompressible flow solver: variable-step second-order backward
//! differentiation in time with an incremental pressure-correction split in
//! rotational form. Velocity lives in the biquadratic space, pressure and
//! pressure increment in the bilinear space.
//!
//! Each step runs three solves: a velocity prediction (momentum balance
//! with the old pressure and an explicit advection term), a pressure
//! increment from a singular Neumann Poisson problem (made compatible by an
//! oblique deflation against the lumped-mass vector, then mean-pinned), and
//! an update that folds the increment plus a divergence correction into the
//! pressure.

use crate::config::{BaseBc, ScenarioConfig, Side, SIDES};
use crate::fem::{
    add_hanging_node_constraints, assemble_mass, solve_general, solve_spd, BasisTable,
    ConstraintSet, Coo, Csr, Quadrature, SolveError, SolveStats, Space,
};
use crate::mesh::Mesh;

/// Weights of the variable-step two-step backward differentiation formula.
#[derive(Debug, Clone, Copy)]
pub struct Bdf2 {
    /// Ratio of the new step to the previous one (zero on the first step).
    pub eta: f64,
    /// Weight of the new value, 1/s.
    pub a0: f64,
    /// Weight of the previous value, 1/s.
    pub a1: f64,
    /// Weight of the value before that, 1/s.
    pub a2: f64,
}

/// Weights for a new step `dt_np1` following a step `dt_n`. `None` history
/// degenerates to backward Euler (first step of a run).
pub fn bdf2_coeffs(dt_np1: f64, dt_n: Option<f64>) -> Bdf2 {
    let eta = match dt_n {
        Some(prev) => dt_np1 / prev,
        None => 0.0,
    };
    let a0 = (1.0 + 2.0 * eta) / ((1.0 + eta) * dt_np1);
    let a1 = -(1.0 + eta) / dt_np1;
    let a2 = eta * eta / ((1.0 + eta) * dt_np1);
    Bdf2 { eta, a0, a1, a2 }
}

/// Second-order extrapolation of the velocity to the end of the new step:
/// `u* = u_n + eta (u_n - u_nm1)`.
pub fn extrapolate(eta: f64, u_n: &[f64], u_nm1: &[f64]) -> Vec<f64> {
    u_n.iter().zip(u_nm1).map(|(a, b)| a + eta * (a - b)).collect()
}

/// Material coefficients sampled at every quadrature point, laid out as
/// `value[cell * n_qp + q]`.
pub struct QpFields<'a> {
    pub rho: &'a [f64],
    pub mu: &'a [f64],
}

/// Surface-tension data sampled at every quadrature point (same layout as
/// [`QpFields`]): the regularized interface measure and the tangential
/// projector (stored as `[xx, xy, yy]`).
pub struct TensionQp<'a> {
    pub sigma: f64,
    pub delta: &'a [f64],
    pub proj: &'a [[f64; 3]],
}

/// Everything the velocity prediction needs besides the discretization.
pub struct PredictionProblem<'a> {
    pub coeffs: Bdf2,
    pub dt: f64,
    pub u_n: &'a [f64],
    pub u_nm1: &'a [f64],
    pub u_star: &'a [f64],
    pub p_n: &'a [f64],
    pub psi_n: &'a [f64],
    pub psi_nm1: &'a [f64],
    pub fields: QpFields<'a>,
    pub tension: Option<TensionQp<'a>>,
    /// Constant body acceleration, multiplied by the local density.
    pub gravity: [f64; 2],
    /// Extra force density (manufactured-solution tests), not density-scaled.
    pub body_force: Option<&'a dyn Fn(f64, f64) -> [f64; 2]>,
    pub c_stab: f64,
}

/// Mesh-bound scratch for the flow solver: quadrature, basis tables for
/// both spaces, and the pressure-space operators. Rebuild after every mesh
/// change.
pub struct NsWorkspace {
    pub quad: Quadrature,
    pub vtable: BasisTable,
    pub ptable: BasisTable,
    /// Pressure Laplacian, hanging-condensed, no pinning (singular).
    pub p_stiff: Csr,
    /// Pressure mass matrix, hanging-condensed.
    pub p_mass: Csr,
    /// Mass row sums masked to unconstrained dofs: the deflation direction.
    pub lumped: Vec<f64>,
    /// Indicator of unconstrained dofs: the null vector of the condensed
    /// Neumann operator.
    pub free: Vec<f64>,
    /// Sum of the masked lumped masses (equals the domain area).
    pub lumped_total: f64,
    pub area: f64,
}

impl NsWorkspace {
    pub fn new(mesh: &Mesh, vspace: &Space, pspace: &Space, pcs: &ConstraintSet) -> NsWorkspace {
        let quad = Quadrature::gauss(3);
        let vtable = BasisTable::new(vspace.degree, &quad);
        let ptable = BasisTable::new(pspace.degree, &quad);
        let p_stiff = assemble_scalar_stiffness(mesh, pspace, pcs, &quad);
        let p_mass = assemble_mass(mesh, pspace, pcs, &quad);
        let free = pcs.free_indicator();
        let ones = vec![1.0; pspace.n_nodes];
        let mut row_sums = vec![0.0; pspace.n_nodes];
        p_mass.mul_vec(&ones, &mut row_sums);
        let lumped: Vec<f64> =
            row_sums.iter().zip(&free).map(|(m, z)| m * z).collect();
        let lumped_total: f64 = lumped.iter().sum();
        NsWorkspace {
            quad,
            vtable,
            ptable,
            p_stiff,
            p_mass,
            lumped,
            free,
            lumped_total,
            area: mesh.total_area(),
        }
    }
}

/// Stiffness matrix of a scalar space (gradient-gradient form), condensed
/// through the given constraints and finalized with identity rows for
/// constrained dofs.
pub fn assemble_scalar_stiffness(
    mesh: &Mesh,
    space: &Space,
    cs: &ConstraintSet,
    quad: &Quadrature,
) -> Csr {
    let table = BasisTable::new(space.degree, quad);
    let nb = space.nodes_per_cell;
    let mut coo = Coo::new(space.n_nodes);
    let mut rhs = vec![0.0; space.n_nodes];
    let mut local = vec![0.0; nb * nb];
    let zero_rhs = vec![0.0; nb];
    for ci in 0..mesh.n_leaves() {
        local.iter_mut().for_each(|v| *v = 0.0);
        // Reference gradients divided by the cell side twice cancel the
        // cell area from the quadrature weight.
        for q in 0..quad.len() {
            let w = quad.weights[q];
            for a in 0..nb {
                let ga = table.grads[q][a];
                for b in 0..nb {
                    let gb = table.grads[q][b];
                    local[a * nb + b] += w * (ga[0] * gb[0] + ga[1] * gb[1]);
                }
            }
        }
        cs.distribute_local(space.cell_nodes(ci), &local, &zero_rhs, &mut coo, &mut rhs);
    }
    cs.finalize(&mut coo, &mut rhs);
    coo.into_csr()
}

/// Integral of a nodal field over the domain.
pub fn field_integral(
    mesh: &Mesh,
    space: &Space,
    quad: &Quadrature,
    table: &BasisTable,
    values: &[f64],
) -> f64 {
    let mut total = 0.0;
    for ci in 0..mesh.n_leaves() {
        let area = mesh.cell_side(ci) * mesh.cell_side(ci);
        let nodes = space.cell_nodes(ci);
        for q in 0..quad.len() {
            let mut v = 0.0;
            for (b, &node) in nodes.iter().enumerate() {
                v += values[node] * table.values[q][b];
            }
            total += quad.weights[q] * area * v;
        }
    }
    total
}

/// Velocity constraints for a scenario: hanging-node couplings on both
/// components, then slip sides (normal component pinned to zero), then
/// full velocity pins on closed sides and inflow windows. Later pins
/// override earlier ones so a full pin wins at corners.
pub fn velocity_constraints(mesh: &Mesh, vspace: &Space, cfg: &ScenarioConfig) -> ConstraintSet {
    let mut cs = ConstraintSet::new(2 * vspace.n_nodes);
    add_hanging_node_constraints(mesh, vspace, &mut cs, 2, 0);
    add_hanging_node_constraints(mesh, vspace, &mut cs, 2, 1);

    let normal_comp = |side: Side| match side {
        Side::Left | Side::Right => 0,
        Side::Bottom | Side::Top => 1,
    };
    // Slip first: a later full pin at a shared corner must take precedence.
    for side in SIDES {
        if matches!(cfg.side(side).base, BaseBc::Slip) {
            for node in vspace.boundary_nodes(mesh, side) {
                cs.set_pinned(2 * node + normal_comp(side), 0.0);
            }
        }
    }
    let span = (cfg.domain[1] - cfg.domain[0]).max(cfg.domain[3] - cfg.domain[2]);
    let tol = 1e-9 * span;
    for side in SIDES {
        let bc = cfg.side(side);
        let base_velocity = match bc.base {
            BaseBc::Dirichlet { velocity, .. } => Some(velocity),
            _ => None,
        };
        if base_velocity.is_none() && bc.window.is_none() {
            continue;
        }
        for node in vspace.boundary_nodes(mesh, side) {
            let [x, y] = vspace.node_pos(mesh, node);
            let along = match side {
                Side::Left | Side::Right => y,
                Side::Bottom | Side::Top => x,
            };
            let pin = match &bc.window {
                Some(w) if along >= w.lo - tol && along <= w.hi + tol => Some(w.velocity),
                _ => base_velocity,
            };
            if let Some(v) = pin {
                cs.set_pinned(2 * node, v[0]);
                cs.set_pinned(2 * node + 1, v[1]);
            }
        }
    }
    cs.close();
    cs
}

/// Solve the velocity prediction system. The matrix is the density-weighted
/// reaction term plus symmetric viscous, divergence-penalty, and implicit
/// tension forms; advection, old pressures, gravity, and the explicit
/// tension force make the right-hand side.
#[allow(clippy::too_many_arguments)]
pub fn velocity_prediction(
    mesh: &Mesh,
    vspace: &Space,
    pspace: &Space,
    vcs: &ConstraintSet,
    ws: &NsWorkspace,
    pr: &PredictionProblem,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let nvb = vspace.nodes_per_cell;
    let nloc = 2 * nvb;
    let nq = ws.quad.len();
    let n_dofs = 2 * vspace.n_nodes;
    let mut coo = Coo::new(n_dofs);
    let mut rhs = vec![0.0; n_dofs];
    let mut kloc = vec![0.0; nloc * nloc];
    let mut floc = vec![0.0; nloc];
    let mut dofs = vec![0usize; nloc];
    let mut ga = vec![[0.0f64; 2]; nvb];

    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        let inv_h = 1.0 / side;
        let vnodes = vspace.cell_nodes(ci);
        let pnodes = pspace.cell_nodes(ci);
        for (b, &n) in vnodes.iter().enumerate() {
            dofs[2 * b] = 2 * n;
            dofs[2 * b + 1] = 2 * n + 1;
        }
        kloc.iter_mut().for_each(|v| *v = 0.0);
        floc.iter_mut().for_each(|v| *v = 0.0);

        // Cell scale of the divergence penalty: the extrapolated speed
        // across the cell diagonal.
        let mut star_sup = 0.0f64;
        for q in 0..nq {
            let mut us = [0.0; 2];
            for (b, &n) in vnodes.iter().enumerate() {
                let nv = ws.vtable.values[q][b];
                us[0] += pr.u_star[2 * n] * nv;
                us[1] += pr.u_star[2 * n + 1] * nv;
            }
            star_sup = star_sup.max(us[0].hypot(us[1]));
        }
        let s_k = mesh.cell_diag(ci) * star_sup;

        let c = mesh.leaf(ci);
        let [ox, oy] = mesh.point(c.ax, c.ay);
        for q in 0..nq {
            let w = ws.quad.weights[q] * area;
            let x = ox + ws.quad.points[q][0] * side;
            let y = oy + ws.quad.points[q][1] * side;
            let rho = pr.fields.rho[ci * nq + q];
            let mu = pr.fields.mu[ci * nq + q];
            let gd = pr.c_stab * (mu + rho * s_k);

            // Field data at this point.
            let mut un = [0.0; 2];
            let mut unm1 = [0.0; 2];
            let mut us = [0.0; 2];
            let mut dun = [[0.0; 2]; 2]; // dun[i][k] = d u_n_i / d x_k
            for (b, &n) in vnodes.iter().enumerate() {
                let nv = ws.vtable.values[q][b];
                let g = ws.vtable.grads[q][b];
                ga[b] = [g[0] * inv_h, g[1] * inv_h];
                for i in 0..2 {
                    let v = pr.u_n[2 * n + i];
                    un[i] += v * nv;
                    dun[i][0] += v * ga[b][0];
                    dun[i][1] += v * ga[b][1];
                    unm1[i] += pr.u_nm1[2 * n + i] * nv;
                    us[i] += pr.u_star[2 * n + i] * nv;
                }
            }
            let mut p_sharp = 0.0;
            for (b, &n) in pnodes.iter().enumerate() {
                let nv = ws.ptable.values[q][b];
                p_sharp += (pr.p_n[n] + (4.0 / 3.0) * pr.psi_n[n]
                    - (1.0 / 3.0) * pr.psi_nm1[n])
                    * nv;
            }
            let tension = pr.tension.as_ref().filter(|t| t.sigma != 0.0).map(|t| {
                let k = ci * nq + q;
                (t.sigma * t.delta[k], t.proj[k])
            });

            for a in 0..nvb {
                let na = ws.vtable.values[q][a];
                let gax = ga[a][0];
                let gay = ga[a][1];
                for b in 0..nvb {
                    let nb = ws.vtable.values[q][b];
                    let gbx = ga[b][0];
                    let gby = ga[b][1];
                    let mass = w * rho * pr.coeffs.a0 * na * nb;
                    let lap = gax * gbx + gay * gby;
                    // Component block (i, j): reaction and viscous coupling
                    // plus the divergence penalty.
                    let mut k00 = mass + w * mu * (lap + gax * gbx) + w * gd * gax * gbx;
                    let k01 = w * mu * gbx * gay + w * gd * gax * gby;
                    let k10 = w * mu * gby * gax + w * gd * gay * gbx;
                    let mut k11 = mass + w * mu * (lap + gay * gby) + w * gd * gay * gby;
                    if let Some((sd, p)) = tension {
                        // Tangential-gradient coupling: same scalar form on
                        // both diagonal blocks, scaled by the step.
                        let pa = [p[0] * gax + p[1] * gay, p[1] * gax + p[2] * gay];
                        let t = pr.dt * sd * (pa[0] * gbx + pa[1] * gby);
                        k00 += t;
                        k11 += t;
                    }
                    kloc[(2 * a) * nloc + 2 * b] += k00;
                    kloc[(2 * a) * nloc + 2 * b + 1] += k01;
                    kloc[(2 * a + 1) * nloc + 2 * b] += k10;
                    kloc[(2 * a + 1) * nloc + 2 * b + 1] += k11;
                }

                // Right-hand side for test function (a, i).
                let adv = [
                    us[0] * dun[0][0] + us[1] * dun[0][1],
                    us[0] * dun[1][0] + us[1] * dun[1][1],
                ];
                let force = pr.body_force.map(|f| f(x, y)).unwrap_or([0.0, 0.0]);
                for i in 0..2 {
                    let mut f = -rho * (adv[i] + pr.coeffs.a1 * un[i] + pr.coeffs.a2 * unm1[i])
                        * na
                        + p_sharp * ga[a][i]
                        + rho * pr.gravity[i] * na
                        + force[i] * na;
                    if let Some((sd, p)) = tension {
                        let pg = match i {
                            0 => p[0] * gax + p[1] * gay,
                            _ => p[1] * gax + p[2] * gay,
                        };
                        f -= sd * pg;
                    }
                    floc[2 * a + i] += w * f;
                }
            }
        }
        vcs.distribute_local(&dofs, &kloc, &floc, &mut coo, &mut rhs);
    }
    vcs.finalize(&mut coo, &mut rhs);
    let mat = coo.into_csr();
    // Warm start from the previous velocity, zeroed on constrained dofs
    // (their solution values are restored by `distribute`).
    let freev = vcs.free_indicator();
    let mut u: Vec<f64> = pr.u_n.iter().zip(&freev).map(|(v, z)| v * z).collect();
    let stats = solve_general(&mat, &rhs, &mut u, rel_tol, max_iter)?;
    vcs.distribute(&mut u);
    Ok((u, stats))
}

/// Weak divergence of a velocity against the pressure test space:
/// `entry_a = integral(div(u) Q_a)`, constraint-condensed.
pub fn divergence_rhs(
    mesh: &Mesh,
    vspace: &Space,
    pspace: &Space,
    pcs: &ConstraintSet,
    ws: &NsWorkspace,
    u: &[f64],
) -> Vec<f64> {
    let nq = ws.quad.len();
    let npb = pspace.nodes_per_cell;
    let mut rhs = vec![0.0; pspace.n_nodes];
    let mut local = vec![0.0; npb];
    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        let inv_h = 1.0 / side;
        let vnodes = vspace.cell_nodes(ci);
        local.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..nq {
            let mut div = 0.0;
            for (b, &n) in vnodes.iter().enumerate() {
                let g = ws.vtable.grads[q][b];
                div += u[2 * n] * g[0] * inv_h + u[2 * n + 1] * g[1] * inv_h;
            }
            let w = ws.quad.weights[q] * area * div;
            for (a, lv) in local.iter_mut().enumerate() {
                *lv += w * ws.ptable.values[q][a];
            }
        }
        cs_distribute(pcs, pspace.cell_nodes(ci), &local, &mut rhs);
    }
    rhs
}

fn cs_distribute(pcs: &ConstraintSet, nodes: &[usize], local: &[f64], rhs: &mut [f64]) {
    pcs.distribute_rhs_local(nodes, local, rhs);
}

/// L2 norm of the divergence of a velocity field.
pub fn div_l2_norm(mesh: &Mesh, vspace: &Space, ws: &NsWorkspace, u: &[f64]) -> f64 {
    let nq = ws.quad.len();
    let mut total = 0.0;
    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        let inv_h = 1.0 / side;
        let vnodes = vspace.cell_nodes(ci);
        for q in 0..nq {
            let mut div = 0.0;
            for (b, &n) in vnodes.iter().enumerate() {
                let g = ws.vtable.grads[q][b];
                div += u[2 * n] * g[0] * inv_h + u[2 * n + 1] * g[1] * inv_h;
            }
            total += ws.quad.weights[q] * area * div * div;
        }
    }
    total.sqrt()
}

/// Solve the pressure-increment Poisson problem. The operator has pure
/// Neumann data and is singular with the unconstrained-dof indicator as
/// null vector; the right-hand side is made compatible by removing its
/// component along the lumped-mass direction, and the solution is pinned
/// to zero mean.
#[allow(clippy::too_many_arguments)]
pub fn pressure_correction(
    mesh: &Mesh,
    pspace: &Space,
    pcs: &ConstraintSet,
    ws: &NsWorkspace,
    div_rhs: &[f64],
    rho_min: f64,
    dt: f64,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let scale = -1.5 * rho_min / dt;
    let mut b: Vec<f64> = div_rhs.iter().map(|v| scale * v).collect();
    let before = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let misfit: f64 = b.iter().zip(&ws.free).map(|(v, z)| v * z).sum();
    let alpha = misfit / ws.lumped_total;
    for (bi, m) in b.iter_mut().zip(&ws.lumped) {
        *bi -= alpha * m;
    }
    let after = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // A load swallowed whole by the deflation (constant divergence) leaves
    // only roundoff; the solution is zero and iterating on noise fails.
    if after <= 1e-12 * before {
        return Ok((vec![0.0; pspace.n_nodes], SolveStats { iterations: 0, rel_residual: 0.0 }));
    }
    let mut psi = vec![0.0; pspace.n_nodes];
    let stats = solve_spd(&ws.p_stiff, &b, &mut psi, rel_tol, max_iter)?;
    pcs.distribute(&mut psi);
    let mean = field_integral(mesh, pspace, &ws.quad, &ws.ptable, &psi) / ws.area;
    psi.iter_mut().for_each(|v| *v -= mean);
    Ok((psi, stats))
}

/// Rotational pressure update: `P_{n+1} = P_n + Psi_{n+1}` minus the
/// mass-projected divergence scaled by the smallest viscosity.
pub fn pressure_update(
    pcs: &ConstraintSet,
    ws: &NsWorkspace,
    p_n: &[f64],
    psi_np1: &[f64],
    div_rhs: &[f64],
    mu_min: f64,
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, SolveError> {
    let b: Vec<f64> = div_rhs.iter().map(|v| -mu_min * v).collect();
    let mut d = vec![0.0; p_n.len()];
    solve_spd(&ws.p_mass, &b, &mut d, rel_tol, max_iter)?;
    pcs.distribute(&mut d);
    Ok((0..p_n.len()).map(|i| p_n[i] + psi_np1[i] + d[i]).collect())
}

/// Flow time-step bound: half the smallest cell diagonal divided by the
/// peak speed (the node spacing of the quadratic space), scaled by the
/// global step factor. `None` when the field is at rest.
pub fn cfl_dt_ns(mesh: &Mesh, u: &[f64], c_cfl: f64) -> Option<f64> {
    let mut umax = 0.0f64;
    for pair in u.chunks_exact(2) {
        umax = umax.max(pair[0].hypot(pair[1]));
    }
    if umax == 0.0 {
        return None;
    }
    Some(c_cfl * 0.5 * mesh.min_diag() / umax)
}
