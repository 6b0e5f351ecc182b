//! Two-phase coupling: material blending through a regularized Heaviside,
//! shear-thinning viscosity, surface-tension measure and projector fields,
//! and the orchestration of one full time step (interface transport, then
//! momentum/pressure solves, then mesh adaptation with field transfer).

use crate::config::{BaseBc, PhysicalParams, ScenarioConfig, SIDES};
use crate::fem::{
    add_hanging_node_constraints, BasisTable, ConstraintSet, Quadrature, SolveError, Space,
};
use crate::levelset::{
    cfl_dt, compute_lambda, ssprk3_step, tanh_profile, FeVelocity, StageViscosities,
    TransportWorkspace,
};
use crate::mesh::{AdaptReport, Mesh, MeshError};
use crate::nsolver::{
    bdf2_coeffs, cfl_dt_ns, divergence_rhs, div_l2_norm, extrapolate, pressure_correction,
    pressure_update, velocity_constraints, velocity_prediction, NsWorkspace, PredictionProblem,
    QpFields, TensionQp,
};

/// Gradient magnitudes below this make the interface direction undefined;
/// the projector falls back to the identity and the interface measure to
/// zero.
pub const PROJ_FLOOR: f64 = 1e-12;

/// Regularized Heaviside: `+/-1` outside the ramp `|s| <= beta*tanh(c_h)`,
/// linear in between.
pub fn heaviside_h(s: f64, beta: f64, c_h: f64) -> f64 {
    let ramp = beta * c_h.tanh();
    if s > ramp {
        1.0
    } else if s < -ramp {
        -1.0
    } else {
        s / ramp
    }
}

/// Frobenius norm of the symmetric velocity gradient at every quadrature
/// point (layout `value[cell * n_qp + q]`).
pub fn shear_rate_qp(
    mesh: &Mesh,
    vspace: &Space,
    quad: &Quadrature,
    vtable: &BasisTable,
    u: &[f64],
) -> Vec<f64> {
    let nq = quad.len();
    let mut out = vec![0.0; mesh.n_leaves() * nq];
    for ci in 0..mesh.n_leaves() {
        let inv_h = 1.0 / mesh.cell_side(ci);
        let vnodes = vspace.cell_nodes(ci);
        for q in 0..nq {
            let mut du = [[0.0f64; 2]; 2];
            for (b, &n) in vnodes.iter().enumerate() {
                let gx = vtable.grads[q][b][0] * inv_h;
                let gy = vtable.grads[q][b][1] * inv_h;
                du[0][0] += u[2 * n] * gx;
                du[0][1] += u[2 * n] * gy;
                du[1][0] += u[2 * n + 1] * gx;
                du[1][1] += u[2 * n + 1] * gy;
            }
            let e00 = du[0][0];
            let e11 = du[1][1];
            let e01 = 0.5 * (du[0][1] + du[1][0]);
            out[ci * nq + q] = (e00 * e00 + 2.0 * e01 * e01 + e11 * e11).sqrt();
        }
    }
    out
}

/// Density and viscosity at every quadrature point, with their extrema.
pub struct MaterialQp {
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho_min: f64,
    pub rho_max: f64,
    pub mu_min: f64,
    pub mu_max: f64,
}

/// Blend phase properties through the Heaviside of the interface field.
/// `gamma` (shear rate per quadrature point) feeds the plus-phase
/// viscosity model; the minus phase keeps its zero-shear value.
#[allow(clippy::too_many_arguments)]
pub fn blend_materials(
    mesh: &Mesh,
    sspace: &Space,
    quad: &Quadrature,
    stable: &BasisTable,
    phi: &[f64],
    gamma: Option<&[f64]>,
    phys: &PhysicalParams,
    beta: f64,
    c_h: f64,
) -> MaterialQp {
    let nq = quad.len();
    let n = mesh.n_leaves() * nq;
    let mut rho = vec![0.0; n];
    let mut mu = vec![0.0; n];
    let mu_minus = phys.minus.viscosity.eval(0.0);
    for ci in 0..mesh.n_leaves() {
        let snodes = sspace.cell_nodes(ci);
        for q in 0..nq {
            let mut p = 0.0;
            for (b, &node) in snodes.iter().enumerate() {
                p += phi[node] * stable.values[q][b];
            }
            let h = heaviside_h(p, beta, c_h);
            let wp = 0.5 * (1.0 + h);
            let wm = 0.5 * (1.0 - h);
            let k = ci * nq + q;
            let g = gamma.map_or(0.0, |g| g[k]);
            let mu_plus = phys.plus.viscosity.eval(g);
            rho[k] = phys.plus.rho * wp + phys.minus.rho * wm;
            mu[k] = mu_plus * wp + mu_minus * wm;
        }
    }
    let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().fold(init, |a, &b| f(a, b));
    MaterialQp {
        rho_min: fold(&rho, f64::INFINITY, f64::min),
        rho_max: fold(&rho, f64::NEG_INFINITY, f64::max),
        mu_min: fold(&mu, f64::INFINITY, f64::min),
        mu_max: fold(&mu, f64::NEG_INFINITY, f64::max),
        rho,
        mu,
    }
}

/// Regularized interface measure. The width is rescaled by the gradient's
/// 1-norm over 2-norm ratio so the measure integrates to one across the
/// interface regardless of its orientation.
pub fn dirac_eps(phi: f64, grad: [f64; 2], eps: f64) -> f64 {
    let l2 = grad[0].hypot(grad[1]);
    if l2 < PROJ_FLOOR {
        return 0.0;
    }
    let l1 = grad[0].abs() + grad[1].abs();
    let eps_t = eps * l1 / l2;
    if phi.abs() >= eps_t {
        0.0
    } else {
        (1.0 - phi.abs() / eps_t) / eps_t * l2
    }
}

/// Interface measure and tangential projector (`[xx, xy, yy]`) at every
/// quadrature point.
pub struct TensionData {
    pub delta: Vec<f64>,
    pub proj: Vec<[f64; 3]>,
}

pub fn tension_fields(
    mesh: &Mesh,
    sspace: &Space,
    quad: &Quadrature,
    stable: &BasisTable,
    phi: &[f64],
    eps: f64,
) -> TensionData {
    let nq = quad.len();
    let n = mesh.n_leaves() * nq;
    let mut delta = vec![0.0; n];
    let mut proj = vec![[1.0, 0.0, 1.0]; n];
    for ci in 0..mesh.n_leaves() {
        let inv_h = 1.0 / mesh.cell_side(ci);
        let snodes = sspace.cell_nodes(ci);
        for q in 0..nq {
            let mut p = 0.0;
            let mut g = [0.0, 0.0];
            for (b, &node) in snodes.iter().enumerate() {
                p += phi[node] * stable.values[q][b];
                g[0] += phi[node] * stable.grads[q][b][0] * inv_h;
                g[1] += phi[node] * stable.grads[q][b][1] * inv_h;
            }
            let k = ci * nq + q;
            let l2 = g[0].hypot(g[1]);
            if l2 >= PROJ_FLOOR {
                let inv2 = 1.0 / (l2 * l2);
                proj[k] = [
                    1.0 - g[0] * g[0] * inv2,
                    -g[0] * g[1] * inv2,
                    1.0 - g[1] * g[1] * inv2,
                ];
            }
            delta[k] = dirac_eps(p, g, eps);
        }
    }
    TensionData { delta, proj }
}

/// Kinetic energy `1/2 integral(rho |u|^2)` with the density given per
/// quadrature point.
pub fn kinetic_energy(
    mesh: &Mesh,
    vspace: &Space,
    quad: &Quadrature,
    vtable: &BasisTable,
    u: &[f64],
    rho: &[f64],
) -> f64 {
    let nq = quad.len();
    let mut total = 0.0;
    for ci in 0..mesh.n_leaves() {
        let area = mesh.cell_side(ci) * mesh.cell_side(ci);
        let vnodes = vspace.cell_nodes(ci);
        for q in 0..nq {
            let mut v = [0.0; 2];
            for (b, &n) in vnodes.iter().enumerate() {
                let nv = vtable.values[q][b];
                v[0] += u[2 * n] * nv;
                v[1] += u[2 * n + 1] * nv;
            }
            total += 0.5 * quad.weights[q] * area * rho[ci * nq + q] * (v[0] * v[0] + v[1] * v[1]);
        }
    }
    total
}

/// The interface profile a scenario starts from (and feeds through inflow
/// boundaries): the signed distance of the configured shape, optionally
/// filtered to the equilibrium tanh profile.
pub fn initial_profile<'a>(
    cfg: &'a ScenarioConfig,
    beta: f64,
) -> impl Fn(f64, f64) -> f64 + 'a {
    move |x, y| {
        let d = cfg.levelset_init.signed_distance(x, y);
        if cfg.tanh_filter {
            tanh_profile(d, beta)
        } else {
            d
        }
    }
}

/// Scalar-space nodes where the interface field is re-imposed after each
/// transport step: whole sides marked as inflow, plus inflow windows.
pub fn inflow_nodes(mesh: &Mesh, space: &Space, cfg: &ScenarioConfig) -> Vec<usize> {
    let span = (cfg.domain[1] - cfg.domain[0]).max(cfg.domain[3] - cfg.domain[2]);
    let tol = 1e-9 * span;
    let mut out = Vec::new();
    for side in SIDES {
        let bc = cfg.side(side);
        let whole_side = matches!(bc.base, BaseBc::Dirichlet { inflow: true, .. });
        if !whole_side && bc.window.is_none() {
            continue;
        }
        for node in space.boundary_nodes(mesh, side) {
            let [x, y] = space.node_pos(mesh, node);
            let along = match side {
                crate::config::Side::Left | crate::config::Side::Right => y,
                _ => x,
            };
            let take = whole_side
                || bc
                    .window
                    .as_ref()
                    .is_some_and(|w| along >= w.lo - tol && along <= w.hi + tol);
            if take {
                out.push(node);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Everything one simulation carries between steps. All fields live on the
/// current mesh; the workspaces are rebuilt whenever the mesh changes.
pub struct SimState {
    pub mesh: Mesh,
    /// Bilinear space: interface field, pressure, pressure increment.
    pub sspace: Space,
    /// Biquadratic space: velocity (interleaved components).
    pub vspace: Space,
    /// Hanging-node couplings of the scalar space.
    pub scs: ConstraintSet,
    /// Hanging-node couplings plus boundary pins of the velocity space.
    pub vcs: ConstraintSet,
    pub transport: TransportWorkspace,
    pub ns: NsWorkspace,
    pub phi: Vec<f64>,
    pub u_n: Vec<f64>,
    pub u_nm1: Vec<f64>,
    pub p_n: Vec<f64>,
    pub psi_n: Vec<f64>,
    pub psi_nm1: Vec<f64>,
    pub t: f64,
    pub step: usize,
    pub dt_prev: Option<f64>,
    pub beta: f64,
}

/// Per-step diagnostics handed to the metrics and output layers.
pub struct StepDiag {
    pub dt: f64,
    pub lambda: f64,
    pub viscosities: StageViscosities,
    pub div_norm: f64,
    pub prediction_iters: usize,
    pub poisson_iters: usize,
    /// Extrema of the blended density over the quadrature points.
    pub rho_range: (f64, f64),
    /// Extrema of the blended viscosity over the quadrature points.
    pub mu_range: (f64, f64),
}

fn beta_of(mesh: &Mesh, cfg: &ScenarioConfig) -> f64 {
    cfg.beta_fixed.unwrap_or_else(|| mesh.min_diag())
}

impl SimState {
    /// Build the initial state: adapt the mesh to the initial interface
    /// (iterating because the band width tracks the shrinking smallest
    /// cell), then interpolate the start fields.
    pub fn new(cfg: &ScenarioConfig) -> Result<SimState, MeshError> {
        let mut mesh = Mesh::build_uniform(cfg.domain, cfg.h0, cfg.num.r_max)?;
        if cfg.num.r_max > 0 {
            for _ in 0..cfg.num.r_max as usize + 2 {
                let beta = beta_of(&mesh, cfg);
                let profile = initial_profile(cfg, beta);
                let (next, report) =
                    mesh.adapt(|x, y| profile(x, y), beta, cfg.num.c_r, cfg.num.c_c);
                mesh = next;
                if !report.changed() {
                    break;
                }
            }
        }
        let beta = beta_of(&mesh, cfg);
        let sspace = Space::new(&mesh, 1);
        let vspace = Space::new(&mesh, 2);
        let mut scs = ConstraintSet::new(sspace.n_nodes);
        add_hanging_node_constraints(&mesh, &sspace, &mut scs, 1, 0);
        scs.close();
        let vcs = velocity_constraints(&mesh, &vspace, cfg);
        let transport = TransportWorkspace::new(&mesh, &sspace, &scs);
        let ns = NsWorkspace::new(&mesh, &vspace, &sspace, &scs);

        let profile = initial_profile(cfg, beta);
        let phi = sspace.interpolate(&mesh, &profile);
        let mut u0 = vec![0.0; 2 * vspace.n_nodes];
        if let Some((y_below, vel)) = cfg.init_velocity_below {
            let tol = 1e-9 * (cfg.domain[3] - cfg.domain[2]);
            for n in 0..vspace.n_nodes {
                let [_, y] = vspace.node_pos(&mesh, n);
                if y <= y_below + tol {
                    u0[2 * n] = vel[0];
                    u0[2 * n + 1] = vel[1];
                }
            }
        }
        vcs.distribute(&mut u0);
        let n_p = sspace.n_nodes;
        Ok(SimState {
            mesh,
            sspace,
            vspace,
            scs,
            vcs,
            transport,
            ns,
            u_nm1: u0.clone(),
            u_n: u0,
            phi,
            p_n: vec![0.0; n_p],
            psi_n: vec![0.0; n_p],
            psi_nm1: vec![0.0; n_p],
            t: 0.0,
            step: 0,
            dt_prev: None,
            beta,
        })
    }

    /// Stable step size for the coupled run: the smaller of the transport
    /// and flow bounds, capped by the configured maximum.
    pub fn choose_dt(&self, cfg: &ScenarioConfig) -> f64 {
        if let Some(fixed) = cfg.dt_fixed {
            return fixed;
        }
        let num = &cfg.num;
        let lambda = compute_lambda(num.c_lambda, node_speeds(&self.u_n));
        let uvel = FeVelocity {
            space: &self.vspace,
            values: &self.u_n,
            table: &self.ns.vtable,
        };
        let ls = cfl_dt(
            &self.mesh,
            &self.sspace,
            &self.transport.quad,
            &self.transport.table,
            &self.phi,
            &uvel,
            lambda,
            self.beta,
            num,
            cfg.levelset_opts.reinit,
        );
        let nsb = cfl_dt_ns(&self.mesh, &self.u_n, num.c_cfl);
        let mut dt = cfg.dt_max;
        if let Some(v) = ls {
            dt = dt.min(v);
        }
        if let Some(v) = nsb {
            dt = dt.min(v);
        }
        dt
    }

    /// One coupled step of size `dt`: transport the interface with
    /// extrapolated velocities, re-impose inflow data, blend materials,
    /// run the three flow solves, and rotate the histories. Mesh
    /// adaptation is separate (see [`adapt_and_transfer`](Self::adapt_and_transfer)).
    pub fn advance(&mut self, cfg: &ScenarioConfig, dt: f64) -> Result<StepDiag, SolveError> {
        let num = &cfg.num;
        let eta = self.dt_prev.map_or(0.0, |prev| dt / prev);
        let u_end = extrapolate(eta, &self.u_n, &self.u_nm1);
        let u_mid = extrapolate(0.5 * eta, &self.u_n, &self.u_nm1);
        let lambda = compute_lambda(num.c_lambda, node_speeds(&self.u_n));

        let vt = &self.ns.vtable;
        let (phi_new, viscosities) = ssprk3_step(
            &self.mesh,
            &self.sspace,
            &self.scs,
            &self.transport,
            &self.phi,
            &FeVelocity { space: &self.vspace, values: &self.u_n, table: vt },
            &FeVelocity { space: &self.vspace, values: &u_end, table: vt },
            &FeVelocity { space: &self.vspace, values: &u_mid, table: vt },
            dt,
            lambda,
            self.beta,
            num,
            cfg.levelset_opts,
        )?;
        let mut phi_new = phi_new;
        let profile = initial_profile(cfg, self.beta);
        for node in inflow_nodes(&self.mesh, &self.sspace, cfg) {
            let [x, y] = self.sspace.node_pos(&self.mesh, node);
            phi_new[node] = profile(x, y);
        }

        let gamma = shear_rate_qp(&self.mesh, &self.vspace, &self.ns.quad, &self.ns.vtable, &u_end);
        let mat = blend_materials(
            &self.mesh,
            &self.sspace,
            &self.ns.quad,
            &self.ns.ptable,
            &phi_new,
            Some(&gamma),
            &cfg.fluid,
            self.beta,
            num.c_h,
        );
        let eps = self.beta * num.c_h.tanh();
        let tension = if cfg.fluid.sigma > 0.0 {
            Some(tension_fields(&self.mesh, &self.sspace, &self.ns.quad, &self.ns.ptable, &phi_new, eps))
        } else {
            None
        };

        let coeffs = bdf2_coeffs(dt, self.dt_prev);
        let pr = PredictionProblem {
            coeffs,
            dt,
            u_n: &self.u_n,
            u_nm1: &self.u_nm1,
            u_star: &u_end,
            p_n: &self.p_n,
            psi_n: &self.psi_n,
            psi_nm1: &self.psi_nm1,
            fields: QpFields { rho: &mat.rho, mu: &mat.mu },
            tension: tension.as_ref().map(|t| TensionQp {
                sigma: cfg.fluid.sigma,
                delta: &t.delta,
                proj: &t.proj,
            }),
            gravity: cfg.fluid.gravity,
            body_force: None,
            c_stab: num.c_stab,
        };
        let (u_new, pred_stats) = velocity_prediction(
            &self.mesh,
            &self.vspace,
            &self.sspace,
            &self.vcs,
            &self.ns,
            &pr,
            num.solver_rel_tol,
            num.solver_max_iter,
        )?;
        let div = divergence_rhs(&self.mesh, &self.vspace, &self.sspace, &self.scs, &self.ns, &u_new);
        let (psi_new, poisson_stats) = pressure_correction(
            &self.mesh,
            &self.sspace,
            &self.scs,
            &self.ns,
            &div,
            mat.rho_min,
            dt,
            num.solver_rel_tol,
            num.solver_max_iter,
        )?;
        let p_new = pressure_update(
            &self.scs,
            &self.ns,
            &self.p_n,
            &psi_new,
            &div,
            mat.mu_min,
            num.solver_rel_tol,
            num.solver_max_iter,
        )?;
        let div_norm = div_l2_norm(&self.mesh, &self.vspace, &self.ns, &u_new);

        self.phi = phi_new;
        self.u_nm1 = std::mem::replace(&mut self.u_n, u_new);
        self.psi_nm1 = std::mem::replace(&mut self.psi_n, psi_new);
        self.p_n = p_new;
        self.t += dt;
        self.step += 1;
        self.dt_prev = Some(dt);
        Ok(StepDiag {
            dt,
            lambda,
            viscosities,
            div_norm,
            prediction_iters: pred_stats.iterations,
            poisson_iters: poisson_stats.iterations,
            rho_range: (mat.rho_min, mat.rho_max),
            mu_range: (mat.mu_min, mat.mu_max),
        })
    }

    /// Adapt the mesh to the current interface and carry every field over.
    /// Surviving nodes keep their values exactly; new nodes take the old
    /// field's interpolant. Returns what changed.
    pub fn adapt_and_transfer(&mut self, cfg: &ScenarioConfig) -> AdaptReport {
        if cfg.num.r_max == 0 {
            return AdaptReport::default();
        }
        let far = 2.0 * self.beta;
        let (new_mesh, report) = self.mesh.adapt(
            |x, y| self.sspace.eval(&self.mesh, &self.phi, x, y).unwrap_or(far),
            self.beta,
            cfg.num.c_r,
            cfg.num.c_c,
        );
        if !report.changed() {
            return report;
        }
        let sspace = Space::new(&new_mesh, 1);
        let vspace = Space::new(&new_mesh, 2);
        let mut scs = ConstraintSet::new(sspace.n_nodes);
        add_hanging_node_constraints(&new_mesh, &sspace, &mut scs, 1, 0);
        scs.close();
        let vcs = velocity_constraints(&new_mesh, &vspace, cfg);

        let scalar = |vals: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; sspace.n_nodes];
            for (i, &(gx, gy)) in sspace.node_coords.iter().enumerate() {
                out[i] = self.sspace.eval_at_units(&self.mesh, vals, gx, gy);
            }
            out
        };
        let vector = |vals: &[f64]| -> Vec<f64> {
            let comp: Vec<Vec<f64>> = (0..2)
                .map(|c| {
                    self.vspace
                        .node_coords
                        .iter()
                        .enumerate()
                        .map(|(n, _)| vals[2 * n + c])
                        .collect()
                })
                .collect();
            let mut out = vec![0.0; 2 * vspace.n_nodes];
            for (i, &(gx, gy)) in vspace.node_coords.iter().enumerate() {
                for c in 0..2 {
                    out[2 * i + c] =
                        self.vspace.eval_at_units(&self.mesh, &comp[c], gx, gy);
                }
            }
            out
        };
        let mut phi = scalar(&self.phi);
        let mut p_n = scalar(&self.p_n);
        let mut psi_n = scalar(&self.psi_n);
        let mut psi_nm1 = scalar(&self.psi_nm1);
        let mut u_n = vector(&self.u_n);
        let mut u_nm1 = vector(&self.u_nm1);
        scs.distribute(&mut phi);
        scs.distribute(&mut p_n);
        scs.distribute(&mut psi_n);
        scs.distribute(&mut psi_nm1);
        vcs.distribute(&mut u_n);
        vcs.distribute(&mut u_nm1);

        self.transport = TransportWorkspace::new(&new_mesh, &sspace, &scs);
        self.ns = NsWorkspace::new(&new_mesh, &vspace, &sspace, &scs);
        self.mesh = new_mesh;
        self.beta = beta_of(&self.mesh, cfg);
        self.sspace = sspace;
        self.vspace = vspace;
        self.scs = scs;
        self.vcs = vcs;
        self.phi = phi;
        self.p_n = p_n;
        self.psi_n = psi_n;
        self.psi_nm1 = psi_nm1;
        self.u_n = u_n;
        self.u_nm1 = u_nm1;
        report
    }
}

fn node_speeds(u: &[f64]) -> impl Iterator<Item = [f64; 2]> + '_ {
    u.chunks_exact(2).map(|p| [p[0], p[1]])
}
