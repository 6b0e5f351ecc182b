//! Shared helpers for the flow-solver order tests: a manufactured shear
//! solution with closed-form forcing, and a driver that advances one
//! BDF2 prediction-projection step with exact Dirichlet walls.

#![allow(dead_code)]

use levelflow::config::SIDES;
use levelflow::fem::{
    add_hanging_node_constraints, ConstraintSet, Space,
};
use levelflow::mesh::Mesh;
use levelflow::nsolver::{
    bdf2_coeffs, divergence_rhs, extrapolate, pressure_correction, pressure_update,
    velocity_prediction, NsWorkspace, PredictionProblem, QpFields,
};

pub const PI: f64 = std::f64::consts::PI;

/// Horizontal shear layer with a traveling-in-time amplitude. The velocity
/// depends on `y` only, so both the exact and the interpolated fields have
/// identically zero self-advection, and the forcing below balances the
/// momentum equation pointwise.
pub struct ShearCase {
    pub rho: f64,
    pub mu: f64,
    pub steady: bool,
}

impl ShearCase {
    pub fn amplitude(&self, t: f64) -> f64 {
        if self.steady {
            1.0
        } else {
            (2.0 * t).cos()
        }
    }

    fn amplitude_rate(&self, t: f64) -> f64 {
        if self.steady {
            0.0
        } else {
            -2.0 * (2.0 * t).sin()
        }
    }

    pub fn velocity(&self, _x: f64, y: f64, t: f64) -> [f64; 2] {
        [(PI * y).sin() * self.amplitude(t), 0.0]
    }

    pub fn pressure(&self, x: f64, y: f64, t: f64) -> f64 {
        (PI * x).cos() * (PI * y).sin() * self.amplitude(t)
    }

    /// Momentum force density balancing unsteady Stokes flow with the
    /// velocity and pressure above.
    pub fn force(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let f = (PI * y).sin();
        let g = self.amplitude(t);
        [
            self.rho * f * self.amplitude_rate(t) + self.mu * PI * PI * f * g
                - PI * (PI * x).sin() * (PI * y).sin() * g,
            PI * (PI * x).cos() * (PI * y).cos() * g,
        ]
    }
}

/// Uniform-grid discretization bundle for the flow solver.
pub struct FlowBench {
    pub mesh: Mesh,
    pub vspace: Space,
    pub pspace: Space,
    pub pcs: ConstraintSet,
    pub ws: NsWorkspace,
}

impl FlowBench {
    pub fn uniform(n: usize) -> FlowBench {
        let mesh = Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], 1.0 / n as f64, 0).unwrap();
        let vspace = Space::new(&mesh, 2);
        let pspace = Space::new(&mesh, 1);
        let mut pcs = ConstraintSet::new(pspace.n_nodes);
        add_hanging_node_constraints(&mesh, &pspace, &mut pcs, 1, 0);
        pcs.close();
        let ws = NsWorkspace::new(&mesh, &vspace, &pspace, &pcs);
        FlowBench { mesh, vspace, pspace, pcs, ws }
    }

    /// Velocity constraints pinning the exact solution on all four walls.
    pub fn exact_walls(&self, case: &ShearCase, t: f64) -> ConstraintSet {
        let mut cs = ConstraintSet::new(2 * self.vspace.n_nodes);
        add_hanging_node_constraints(&self.mesh, &self.vspace, &mut cs, 2, 0);
        add_hanging_node_constraints(&self.mesh, &self.vspace, &mut cs, 2, 1);
        for side in SIDES {
            for node in self.vspace.boundary_nodes(&self.mesh, side) {
                let [x, y] = self.vspace.node_pos(&self.mesh, node);
                let v = case.velocity(x, y, t);
                cs.set_pinned(2 * node, v[0]);
                cs.set_pinned(2 * node + 1, v[1]);
            }
        }
        cs.close();
        cs
    }

    pub fn interp_velocity(&self, case: &ShearCase, t: f64) -> Vec<f64> {
        let mut u = vec![0.0; 2 * self.vspace.n_nodes];
        for node in 0..self.vspace.n_nodes {
            let [x, y] = self.vspace.node_pos(&self.mesh, node);
            let v = case.velocity(x, y, t);
            u[2 * node] = v[0];
            u[2 * node + 1] = v[1];
        }
        u
    }

    pub fn interp_pressure(&self, case: &ShearCase, t: f64) -> Vec<f64> {
        (0..self.pspace.n_nodes)
            .map(|node| {
                let [x, y] = self.pspace.node_pos(&self.mesh, node);
                case.pressure(x, y, t)
            })
            .collect()
    }

    pub fn qp_constant(&self, v: f64) -> Vec<f64> {
        vec![v; self.mesh.n_leaves() * self.ws.quad.len()]
    }

    /// Continuous L2 distance between a discrete velocity and the exact one.
    pub fn velocity_error(&self, u: &[f64], case: &ShearCase, t: f64) -> f64 {
        self.velocity_l2(u, |x, y| case.velocity(x, y, t))
    }

    /// Continuous L2 norm of the difference of two discrete velocities.
    pub fn velocity_diff(&self, a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.velocity_l2(&d, |_, _| [0.0, 0.0])
    }

    fn velocity_l2(&self, u: &[f64], exact: impl Fn(f64, f64) -> [f64; 2]) -> f64 {
        let nq = self.ws.quad.len();
        let mut total = 0.0;
        for ci in 0..self.mesh.n_leaves() {
            let side = self.mesh.cell_side(ci);
            let area = side * side;
            let c = self.mesh.leaf(ci);
            let [ox, oy] = self.mesh.point(c.ax, c.ay);
            let nodes = self.vspace.cell_nodes(ci);
            for q in 0..nq {
                let x = ox + self.ws.quad.points[q][0] * side;
                let y = oy + self.ws.quad.points[q][1] * side;
                let mut uh = [0.0f64; 2];
                for (b, &node) in nodes.iter().enumerate() {
                    let nv = self.ws.vtable.values[q][b];
                    uh[0] += u[2 * node] * nv;
                    uh[1] += u[2 * node + 1] * nv;
                }
                let ue = exact(x, y);
                total += self.ws.quad.weights[q]
                    * area
                    * ((uh[0] - ue[0]).powi(2) + (uh[1] - ue[1]).powi(2));
            }
        }
        total.sqrt()
    }

    pub fn div_norm(&self, u: &[f64]) -> f64 {
        levelflow::nsolver::div_l2_norm(&self.mesh, &self.vspace, &self.ws, u)
    }
}

/// Rolling two-level state of the projection scheme.
pub struct FlowHistory {
    pub u_n: Vec<f64>,
    pub u_nm1: Vec<f64>,
    pub p_n: Vec<f64>,
    pub psi_n: Vec<f64>,
    pub psi_nm1: Vec<f64>,
    pub dt_prev: Option<f64>,
}

impl FlowHistory {
    /// Start from rest with zero pressure.
    pub fn at_rest(bench: &FlowBench) -> FlowHistory {
        FlowHistory {
            u_n: vec![0.0; 2 * bench.vspace.n_nodes],
            u_nm1: vec![0.0; 2 * bench.vspace.n_nodes],
            p_n: vec![0.0; bench.pspace.n_nodes],
            psi_n: vec![0.0; bench.pspace.n_nodes],
            psi_nm1: vec![0.0; bench.pspace.n_nodes],
            dt_prev: None,
        }
    }

    /// Start from the exact solution sampled at `t0`, `t0 - dt`, with
    /// matching pressure increments, so the very first step already runs
    /// the two-level formula.
    pub fn exact(bench: &FlowBench, case: &ShearCase, t0: f64, dt: f64) -> FlowHistory {
        let pm2 = bench.interp_pressure(case, t0 - 2.0 * dt);
        let pm1 = bench.interp_pressure(case, t0 - dt);
        let p0 = bench.interp_pressure(case, t0);
        FlowHistory {
            u_n: bench.interp_velocity(case, t0),
            u_nm1: bench.interp_velocity(case, t0 - dt),
            p_n: p0.clone(),
            psi_n: p0.iter().zip(&pm1).map(|(a, b)| a - b).collect(),
            psi_nm1: pm1.iter().zip(&pm2).map(|(a, b)| a - b).collect(),
            dt_prev: Some(dt),
        }
    }
}

/// One full step of the prediction-projection scheme with exact Dirichlet
/// walls and the manufactured forcing, advancing `h` from `t` to `t + dt`.
pub fn flow_step(
    bench: &FlowBench,
    case: &ShearCase,
    h: &mut FlowHistory,
    t: f64,
    dt: f64,
    c_stab: f64,
) {
    let coeffs = bdf2_coeffs(dt, h.dt_prev);
    let u_star = extrapolate(coeffs.eta, &h.u_n, &h.u_nm1);
    let vcs = bench.exact_walls(case, t + dt);
    let rho = bench.qp_constant(case.rho);
    let mu = bench.qp_constant(case.mu);
    let t_new = t + dt;
    let force = move |x: f64, y: f64| case.force(x, y, t_new);
    let pr = PredictionProblem {
        coeffs,
        dt,
        u_n: &h.u_n,
        u_nm1: &h.u_nm1,
        u_star: &u_star,
        p_n: &h.p_n,
        psi_n: &h.psi_n,
        psi_nm1: &h.psi_nm1,
        fields: QpFields { rho: &rho, mu: &mu },
        tension: None,
        gravity: [0.0, 0.0],
        body_force: Some(&force),
        c_stab,
    };
    let (u_new, _) = velocity_prediction(
        &bench.mesh,
        &bench.vspace,
        &bench.pspace,
        &vcs,
        &bench.ws,
        &pr,
        1e-11,
        40_000,
    )
    .expect("velocity prediction must converge");
    let div = divergence_rhs(&bench.mesh, &bench.vspace, &bench.pspace, &bench.pcs, &bench.ws, &u_new);
    let (psi_new, _) = pressure_correction(
        &bench.mesh,
        &bench.pspace,
        &bench.pcs,
        &bench.ws,
        &div,
        case.rho,
        dt,
        1e-11,
        40_000,
    )
    .expect("pressure correction must converge");
    let p_new = pressure_update(&bench.pcs, &bench.ws, &h.p_n, &psi_new, &div, case.mu, 1e-11, 40_000)
        .expect("pressure update must converge");

    h.u_nm1 = std::mem::replace(&mut h.u_n, u_new);
    h.psi_nm1 = std::mem::replace(&mut h.psi_n, psi_new);
    h.p_n = p_new;
    h.dt_prev = Some(dt);
}

/// March the steady case until the velocity stops changing; the return is
/// the settled velocity field.
pub fn march_to_steady(bench: &FlowBench, case: &ShearCase, dt: f64, max_steps: usize) -> Vec<f64> {
    let mut h = FlowHistory::at_rest(bench);
    let mut t = 0.0;
    for _ in 0..max_steps {
        let before = h.u_n.clone();
        flow_step(bench, case, &mut h, t, dt, 0.1);
        t += dt;
        let delta = h
            .u_n
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if delta < 1e-11 {
            return h.u_n;
        }
    }
    h.u_n
}
