//! Finite-element plumbing on the quadtree mesh: tensor-product Lagrange
//! spaces, hanging-node and boundary constraints, sparse assembly, and the
//! iterative linear solvers.
//!
//! Scalar unknowns use bilinear elements, the velocity uses biquadratic
//! elements on the same cells; that pairing keeps the discrete pressure
//! stable. Cells are squares, so reference gradients map to physical ones
//! by a single division by the cell side.

use crate::mesh::{Dir, Mesh, DIRS};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("linear solve stalled: {resid:.3e} relative residual after {iters} iterations")]
    NotConverged { iters: usize, resid: f64 },
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

/// Tensor-product Gauss rule on the unit square `[0,1]^2`.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// `n`-point-per-axis Gauss rule; `n` of 2 integrates cubics exactly,
    /// `n` of 3 integrates quintics.
    pub fn gauss(n: usize) -> Quadrature {
        let (pts, wts): (Vec<f64>, Vec<f64>) = match n {
            1 => (vec![0.5], vec![1.0]),
            2 => {
                let d = 0.5 / 3f64.sqrt();
                (vec![0.5 - d, 0.5 + d], vec![0.5, 0.5])
            }
            3 => {
                let d = 0.5 * 0.6f64.sqrt();
                (vec![0.5 - d, 0.5, 0.5 + d], vec![5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])
            }
            _ => panic!("unsupported Gauss rule with {n} points per axis"),
        };
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                points.push([pts[i], pts[j]]);
                weights.push(wts[i] * wts[j]);
            }
        }
        Quadrature { points, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Basis functions
// ---------------------------------------------------------------------------

fn lagrange_1d(degree: u8, t: f64) -> ([f64; 3], [f64; 3]) {
    match degree {
        1 => ([1.0 - t, t, 0.0], [-1.0, 1.0, 0.0]),
        2 => (
            [(2.0 * t - 1.0) * (t - 1.0), 4.0 * t * (1.0 - t), t * (2.0 * t - 1.0)],
            [4.0 * t - 3.0, 4.0 - 8.0 * t, 4.0 * t - 1.0],
        ),
        _ => panic!("unsupported element degree {degree}"),
    }
}

/// Values and reference gradients of all `(degree+1)^2` basis functions at
/// one reference point. Local ordering is row-major: index `j*(degree+1)+i`
/// is the node at `(i, j)` on the tensor grid.
pub fn shape_functions(degree: u8, p: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let (vx, dx) = lagrange_1d(degree, p[0]);
    let (vy, dy) = lagrange_1d(degree, p[1]);
    let w = degree as usize + 1;
    let mut vals = Vec::with_capacity(w * w);
    let mut grads = Vec::with_capacity(w * w);
    for j in 0..w {
        for i in 0..w {
            vals.push(vx[i] * vy[j]);
            grads.push([dx[i] * vy[j], vx[i] * dy[j]]);
        }
    }
    (vals, grads)
}

/// Basis values and reference gradients pre-evaluated at every point of a
/// quadrature rule.
#[derive(Debug, Clone)]
pub struct BasisTable {
    pub degree: u8,
    pub n_basis: usize,
    /// `values[q][b]`
    pub values: Vec<Vec<f64>>,
    /// `grads[q][b]` — gradients with respect to reference coordinates.
    pub grads: Vec<Vec<[f64; 2]>>,
}

impl BasisTable {
    pub fn new(degree: u8, quad: &Quadrature) -> BasisTable {
        let mut values = Vec::with_capacity(quad.len());
        let mut grads = Vec::with_capacity(quad.len());
        for &p in &quad.points {
            let (v, g) = shape_functions(degree, p);
            values.push(v);
            grads.push(g);
        }
        BasisTable { degree, n_basis: (degree as usize + 1).pow(2), values, grads }
    }
}

// ---------------------------------------------------------------------------
// Spaces
// ---------------------------------------------------------------------------

/// A scalar Lagrange space over the mesh leaves. The vector-valued velocity
/// space reuses a degree-2 `Space` with two interleaved components
/// (`dof = 2*node + component`).
#[derive(Debug, Clone)]
pub struct Space {
    pub degree: u8,
    pub n_nodes: usize,
    /// Lattice coordinates of each node.
    pub node_coords: Vec<(i64, i64)>,
    node_map: HashMap<(i64, i64), usize>,
    /// `(degree+1)^2` node ids per leaf, concatenated.
    cell_nodes: Vec<usize>,
    pub nodes_per_cell: usize,
}

impl Space {
    pub fn new(mesh: &Mesh, degree: u8) -> Space {
        assert!(degree == 1 || degree == 2, "unsupported element degree {degree}");
        let w = degree as usize + 1;
        let per_cell = w * w;
        let mut node_map: HashMap<(i64, i64), usize> = HashMap::new();
        let mut node_coords: Vec<(i64, i64)> = Vec::new();
        let mut cell_nodes = Vec::with_capacity(mesh.n_leaves() * per_cell);
        for ci in 0..mesh.n_leaves() {
            let c = mesh.leaf(ci);
            let s = mesh.side_units(c.level);
            let step = s / degree as i64;
            for j in 0..w as i64 {
                for i in 0..w as i64 {
                    let key = (c.ax + i * step, c.ay + j * step);
                    let id = *node_map.entry(key).or_insert_with(|| {
                        node_coords.push(key);
                        node_coords.len() - 1
                    });
                    cell_nodes.push(id);
                }
            }
        }
        Space {
            degree,
            n_nodes: node_coords.len(),
            node_coords,
            node_map,
            cell_nodes,
            nodes_per_cell: per_cell,
        }
    }

    /// Node ids of leaf `ci`, in local row-major order.
    pub fn cell_nodes(&self, ci: usize) -> &[usize] {
        &self.cell_nodes[ci * self.nodes_per_cell..(ci + 1) * self.nodes_per_cell]
    }

    pub fn node_at(&self, key: (i64, i64)) -> Option<usize> {
        self.node_map.get(&key).copied()
    }

    /// Physical position of a node.
    pub fn node_pos(&self, mesh: &Mesh, node: usize) -> [f64; 2] {
        let (gx, gy) = self.node_coords[node];
        mesh.point(gx, gy)
    }

    /// Interpolate a function into the nodal values (ignores constraints;
    /// call [`ConstraintSet::distribute`] afterwards to restore conformity).
    pub fn interpolate<F: FnMut(f64, f64) -> f64>(&self, mesh: &Mesh, mut f: F) -> Vec<f64> {
        (0..self.n_nodes)
            .map(|n| {
                let [x, y] = self.node_pos(mesh, n);
                f(x, y)
            })
            .collect()
    }

    /// Evaluate the field `values` at a physical point; `None` outside the
    /// domain.
    pub fn eval(&self, mesh: &Mesh, values: &[f64], x: f64, y: f64) -> Option<f64> {
        let ci = mesh.leaf_containing(x, y)?;
        Some(self.eval_in_cell(mesh, values, ci, self.local_coords(mesh, ci, x, y)))
    }

    /// Evaluate the field and its physical gradient at a point.
    pub fn eval_grad(&self, mesh: &Mesh, values: &[f64], x: f64, y: f64) -> Option<(f64, [f64; 2])> {
        let ci = mesh.leaf_containing(x, y)?;
        let t = self.local_coords(mesh, ci, x, y);
        let (v, g) = shape_functions(self.degree, t);
        let inv_h = 1.0 / mesh.cell_side(ci);
        let mut val = 0.0;
        let mut grad = [0.0, 0.0];
        for (b, &n) in self.cell_nodes(ci).iter().enumerate() {
            val += values[n] * v[b];
            grad[0] += values[n] * g[b][0] * inv_h;
            grad[1] += values[n] * g[b][1] * inv_h;
        }
        Some((val, grad))
    }

    /// Reference coordinates of a physical point inside leaf `ci`.
    pub fn local_coords(&self, mesh: &Mesh, ci: usize, x: f64, y: f64) -> [f64; 2] {
        let c = mesh.leaf(ci);
        let s = mesh.side_units(c.level) as f64;
        let ux = (x - mesh.x0) / mesh.unit;
        let uy = (y - mesh.y0) / mesh.unit;
        [
            ((ux - c.ax as f64) / s).clamp(0.0, 1.0),
            ((uy - c.ay as f64) / s).clamp(0.0, 1.0),
        ]
    }

    fn eval_in_cell(&self, _mesh: &Mesh, values: &[f64], ci: usize, t: [f64; 2]) -> f64 {
        let (v, _) = shape_functions(self.degree, t);
        self.cell_nodes(ci)
            .iter()
            .enumerate()
            .map(|(b, &n)| values[n] * v[b])
            .sum()
    }

    /// Evaluate the field exactly at a lattice point (used when carrying
    /// fields across a mesh change: surviving nodes reproduce their value
    /// to machine precision because the local coordinates are dyadic).
    pub fn eval_at_units(&self, mesh: &Mesh, values: &[f64], gx: i64, gy: i64) -> f64 {
        let ci = mesh
            .leaf_at_units(gx, gy)
            .expect("lattice point outside the mesh");
        let c = mesh.leaf(ci);
        let s = mesh.side_units(c.level) as f64;
        let t = [(gx - c.ax) as f64 / s, (gy - c.ay) as f64 / s];
        self.eval_in_cell(mesh, values, ci, t)
    }

    /// Nodes lying on one side of the domain boundary, with their positions.
    pub fn boundary_nodes(&self, mesh: &Mesh, side: crate::config::Side) -> Vec<usize> {
        use crate::config::Side;
        let w = mesh.width_units();
        let h = mesh.height_units();
        self.node_coords
            .iter()
            .enumerate()
            .filter(|(_, &(gx, gy))| match side {
                Side::Left => gx == 0,
                Side::Right => gx == w,
                Side::Bottom => gy == 0,
                Side::Top => gy == h,
            })
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Constraints
// ---------------------------------------------------------------------------

/// One algebraic constraint `x_slave = sum(w_m * x_m) + inhomogeneity`.
/// An empty master list is a pinned (Dirichlet) value.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub masters: Vec<(usize, f64)>,
    pub inhom: f64,
}

/// The constraints of a space: hanging-node couplings and pinned values.
/// Build, then [`close`](Self::close), then use for assembly and solution
/// post-processing.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    entries: Vec<Option<Constraint>>,
    closed: bool,
}

impl ConstraintSet {
    pub fn new(n_dofs: usize) -> ConstraintSet {
        ConstraintSet { entries: vec![None; n_dofs], closed: false }
    }

    pub fn n_dofs(&self) -> usize {
        self.entries.len()
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.entries[dof].is_some()
    }

    pub fn constraint(&self, dof: usize) -> Option<&Constraint> {
        self.entries[dof].as_ref()
    }

    /// Couple a hanging dof to its masters. Keeps an existing pin intact
    /// (pinned values take precedence over hanging couplings).
    pub fn add_hanging(&mut self, slave: usize, masters: Vec<(usize, f64)>) {
        assert!(!self.closed, "constraint set already closed");
        if self.entries[slave].is_none() {
            self.entries[slave] = Some(Constraint { masters, inhom: 0.0 });
        }
    }

    /// Pin a dof to a fixed value, overriding any hanging coupling.
    pub fn set_pinned(&mut self, dof: usize, value: f64) {
        assert!(!self.closed, "constraint set already closed");
        self.entries[dof] = Some(Constraint { masters: Vec::new(), inhom: value });
    }

    /// Resolve chains (masters that are themselves constrained) so that
    /// every master is free. Must be called before assembly.
    pub fn close(&mut self) {
        for _round in 0..64 {
            let mut any = false;
            for d in 0..self.entries.len() {
                let Some(c) = self.entries[d].clone() else { continue };
                if !c.masters.iter().any(|&(m, _)| self.entries[m].is_some()) {
                    continue;
                }
                any = true;
                let mut masters: HashMap<usize, f64> = HashMap::new();
                let mut inhom = c.inhom;
                for (m, w) in c.masters {
                    match &self.entries[m] {
                        None => *masters.entry(m).or_insert(0.0) += w,
                        Some(sub) => {
                            inhom += w * sub.inhom;
                            for &(mm, ww) in &sub.masters {
                                *masters.entry(mm).or_insert(0.0) += w * ww;
                            }
                        }
                    }
                }
                let mut masters: Vec<(usize, f64)> =
                    masters.into_iter().filter(|&(_, w)| w != 0.0).collect();
                masters.sort_by_key(|&(m, _)| m);
                self.entries[d] = Some(Constraint { masters, inhom });
            }
            if !any {
                self.closed = true;
                return;
            }
        }
        panic!("constraint chains did not resolve; the couplings contain a cycle");
    }

    /// Scatter a local matrix and right-hand side into global storage,
    /// redirecting constrained rows and columns to their masters and moving
    /// pinned values to the right-hand side. Constrained rows stay empty
    /// here; [`finalize`](Self::finalize) adds their identity diagonal.
    pub fn distribute_local(
        &self,
        dofs: &[usize],
        local_mat: &[f64],
        local_rhs: &[f64],
        coo: &mut Coo,
        rhs: &mut [f64],
    ) {
        debug_assert!(self.closed);
        let n = dofs.len();
        debug_assert_eq!(local_mat.len(), n * n);
        let scatter_row = |gi: usize, wi: f64, i: usize, coo: &mut Coo, rhs: &mut [f64]| {
            rhs[gi] += wi * local_rhs[i];
            for j in 0..n {
                let a = local_mat[i * n + j];
                if a == 0.0 {
                    continue;
                }
                match self.entries[dofs[j]].as_ref() {
                    None => coo.push(gi, dofs[j], wi * a),
                    Some(c) => {
                        for &(gj, wj) in &c.masters {
                            coo.push(gi, gj, wi * wj * a);
                        }
                        rhs[gi] -= wi * a * c.inhom;
                    }
                }
            }
        };
        for i in 0..n {
            match self.entries[dofs[i]].as_ref() {
                None => scatter_row(dofs[i], 1.0, i, coo, rhs),
                Some(c) => {
                    for &(gi, wi) in &c.masters {
                        scatter_row(gi, wi, i, coo, rhs);
                    }
                }
            }
        }
    }

    /// Scatter a local right-hand-side only (for re-used matrices).
    pub fn distribute_rhs_local(&self, dofs: &[usize], local_rhs: &[f64], rhs: &mut [f64]) {
        debug_assert!(self.closed);
        for (i, &d) in dofs.iter().enumerate() {
            match self.entries[d].as_ref() {
                None => rhs[d] += local_rhs[i],
                Some(c) => {
                    for &(gi, wi) in &c.masters {
                        rhs[gi] += wi * local_rhs[i];
                    }
                }
            }
        }
    }

    /// Identity rows for every constrained dof so the matrix stays regular;
    /// zero their right-hand side.
    pub fn finalize(&self, coo: &mut Coo, rhs: &mut [f64]) {
        for (d, e) in self.entries.iter().enumerate() {
            if e.is_some() {
                coo.push(d, d, 1.0);
                rhs[d] = 0.0;
            }
        }
    }

    /// Overwrite constrained entries of a solution vector from their
    /// masters and pinned values.
    pub fn distribute(&self, x: &mut [f64]) {
        debug_assert!(self.closed);
        for d in 0..self.entries.len() {
            if let Some(c) = &self.entries[d] {
                x[d] = c.inhom + c.masters.iter().map(|&(m, w)| w * x[m]).sum::<f64>();
            }
        }
    }

    /// Indicator of the unconstrained dofs (1 on free, 0 on constrained).
    pub fn free_indicator(&self) -> Vec<f64> {
        self.entries.iter().map(|e| if e.is_some() { 0.0 } else { 1.0 }).collect()
    }
}

// ---------------------------------------------------------------------------
// Hanging-node detection
// ---------------------------------------------------------------------------

/// Hanging-node couplings for a space on its mesh. For every coarse edge
/// shared with two finer cells, the finer cells' extra edge nodes are tied
/// to the coarse edge's own nodes: midpoints are averaged for degree 1;
/// quarter points follow the coarse edge's quadratic for degree 2.
pub fn hanging_node_constraints(mesh: &Mesh, space: &Space) -> ConstraintSet {
    let mut cs = ConstraintSet::new(space.n_nodes);
    add_hanging_node_constraints(mesh, space, &mut cs, 1, 0);
    cs
}

/// Same detection, but emitting constraints for interleaved vector dofs
/// (`dof = stride*node + comp`): call once per component.
pub fn add_hanging_node_constraints(
    mesh: &Mesh,
    space: &Space,
    cs: &mut ConstraintSet,
    stride: usize,
    comp: usize,
) {
    let dof = |node: usize| stride * node + comp;
    for ci in 0..mesh.n_leaves() {
        let c = mesh.leaf(ci);
        let s = mesh.side_units(c.level);
        for dir in DIRS {
            if mesh.edge_neighbors(ci, dir).len() != 2 {
                continue;
            }
            // Our edge from `a` to `b` hosts finer cells on the other side.
            let (a, b): ((i64, i64), (i64, i64)) = match dir {
                Dir::East => ((c.ax + s, c.ay), (c.ax + s, c.ay + s)),
                Dir::West => ((c.ax, c.ay), (c.ax, c.ay + s)),
                Dir::North => ((c.ax, c.ay + s), (c.ax + s, c.ay + s)),
                Dir::South => ((c.ax, c.ay), (c.ax + s, c.ay)),
            };
            let at = |fx: i64, fy: i64| -> Option<usize> {
                space.node_at((fx, fy))
            };
            let lerp = |t_num: i64, t_den: i64| -> (i64, i64) {
                (
                    a.0 + (b.0 - a.0) * t_num / t_den,
                    a.1 + (b.1 - a.1) * t_num / t_den,
                )
            };
            match space.degree {
                1 => {
                    let (v0, v1) = (at(a.0, a.1), at(b.0, b.1));
                    let (mx, my) = lerp(1, 2);
                    if let (Some(v0), Some(v1), Some(mid)) = (v0, v1, at(mx, my)) {
                        cs.add_hanging(dof(mid), vec![(dof(v0), 0.5), (dof(v1), 0.5)]);
                    }
                }
                2 => {
                    let v0 = at(a.0, a.1);
                    let (mx, my) = lerp(1, 2);
                    let vm = at(mx, my);
                    let v1 = at(b.0, b.1);
                    let (Some(v0), Some(vm), Some(v1)) = (v0, vm, v1) else { continue };
                    for (t_num, w) in [(1i64, [0.375, 0.75, -0.125]), (3, [-0.125, 0.75, 0.375])] {
                        let (qx, qy) = lerp(t_num, 4);
                        if let Some(q) = at(qx, qy) {
                            cs.add_hanging(
                                dof(q),
                                vec![(dof(v0), w[0]), (dof(vm), w[1]), (dof(v1), w[2])],
                            );
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse matrices
// ---------------------------------------------------------------------------

/// Triplet accumulation buffer.
#[derive(Debug, Clone)]
pub struct Coo {
    n: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl Coo {
    pub fn new(n: usize) -> Coo {
        Coo { n, entries: Vec::new() }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Coo {
        Coo { n, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, v: f64) {
        self.entries.push((row as u32, col as u32, v));
    }

    /// Compress into CSR, summing duplicate entries deterministically.
    pub fn into_csr(mut self) -> Csr {
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let n = self.n;
        let mut indptr = vec![0usize; n + 1];
        let mut indices: Vec<u32> = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Csr { n, indptr, indices, data }
    }
}

/// Compressed sparse row matrix (square).
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub data: Vec<f64>,
}

impl Csr {
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.data[k] * x[self.indices[k] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.indices[k] as usize == r {
                    d[r] = self.data[k];
                }
            }
        }
        d
    }
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients with Jacobi scaling, for symmetric
/// positive (semi-)definite systems. For consistent singular systems the
/// caller must orthogonalize `b` against the null space first.
pub fn solve_spd(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<SolveStats, SolveError> {
    let n = a.n;
    let mut inv_diag = a.diagonal();
    for d in &mut inv_diag {
        *d = if d.abs() > 0.0 { 1.0 / *d } else { 1.0 };
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, rel_residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let r_norm = norm(&r);
        if r_norm <= rel_tol * b_norm {
            return Ok(SolveStats { iterations: it, rel_residual: r_norm / b_norm });
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(SolveError::NotConverged { iters: it, resid: r_norm / b_norm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let resid = norm(&r) / b_norm;
    Err(SolveError::NotConverged { iters: max_iter, resid })
}

/// Restarted GMRES with left Jacobi preconditioning, for general matrices.
pub fn solve_general(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<SolveStats, SolveError> {
    const RESTART: usize = 50;
    let n = a.n;
    let mut inv_diag = a.diagonal();
    for d in &mut inv_diag {
        *d = if d.abs() > 0.0 { 1.0 / *d } else { 1.0 };
    }
    let precond = |v: &mut [f64]| {
        for i in 0..v.len() {
            v[i] *= inv_diag[i];
        }
    };
    let mut pb = b.to_vec();
    precond(&mut pb);
    let pb_norm = norm(&pb);
    if pb_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, rel_residual: 0.0 });
    }
    let mut total_iters = 0usize;
    let mut scratch = vec![0.0; n];
    loop {
        // r = M^-1 (b - A x)
        a.mul_vec(x, &mut scratch);
        let mut r: Vec<f64> = (0..n).map(|i| b[i] - scratch[i]).collect();
        precond(&mut r);
        let beta = norm(&r);
        if beta <= rel_tol * pb_norm {
            return Ok(SolveStats { iterations: total_iters, rel_residual: beta / pb_norm });
        }
        if total_iters >= max_iter {
            return Err(SolveError::NotConverged { iters: total_iters, resid: beta / pb_norm });
        }

        let m = RESTART.min(max_iter - total_iters);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut h = vec![0.0f64; (m + 1) * m]; // column-major: h[i + k*(m+1)]
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_done = 0usize;
        for k in 0..m {
            a.mul_vec(&basis[k], &mut scratch);
            let mut w = scratch.clone();
            precond(&mut w);
            for i in 0..=k {
                let hik = dot(&w, &basis[i]);
                h[i + k * (m + 1)] = hik;
                for j in 0..n {
                    w[j] -= hik * basis[i][j];
                }
            }
            let hk1 = norm(&w);
            h[k + 1 + k * (m + 1)] = hk1;
            // Apply the accumulated rotations to the new column.
            for i in 0..k {
                let (hi, hi1) = (h[i + k * (m + 1)], h[i + 1 + k * (m + 1)]);
                h[i + k * (m + 1)] = cs[i] * hi + sn[i] * hi1;
                h[i + 1 + k * (m + 1)] = -sn[i] * hi + cs[i] * hi1;
            }
            let (hk, hkk) = (h[k + k * (m + 1)], h[k + 1 + k * (m + 1)]);
            let denom = (hk * hk + hkk * hkk).sqrt();
            let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (hk / denom, hkk / denom) };
            cs[k] = c;
            sn[k] = s;
            h[k + k * (m + 1)] = c * hk + s * hkk;
            h[k + 1 + k * (m + 1)] = 0.0;
            g[k + 1] = -s * g[k];
            g[k] *= c;
            total_iters += 1;
            k_done = k + 1;
            let rel = g[k + 1].abs() / pb_norm;
            if rel <= rel_tol || hk1 == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hk1).collect());
        }
        // Back-substitute y from the triangular system and update x.
        let mut y = vec![0.0f64; k_done];
        for i in (0..k_done).rev() {
            let mut acc = g[i];
            for j in i + 1..k_done {
                acc -= h[i + j * (m + 1)] * y[j];
            }
            y[i] = acc / h[i + i * (m + 1)];
        }
        for (k, yk) in y.iter().enumerate() {
            for j in 0..n {
                x[j] += yk * basis[k][j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Integration helpers
// ---------------------------------------------------------------------------

/// Integrate `f(x, y)` over the whole mesh with the given rule.
pub fn integrate<F: FnMut(f64, f64) -> f64>(mesh: &Mesh, quad: &Quadrature, mut f: F) -> f64 {
    let mut acc = 0.0;
    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        let c = mesh.leaf(ci);
        let [ox, oy] = mesh.point(c.ax, c.ay);
        for (q, &[px, py]) in quad.points.iter().enumerate() {
            acc += quad.weights[q] * area * f(ox + px * side, oy + py * side);
        }
    }
    acc
}

/// L2 norm of the difference between a nodal field and a reference closure.
pub fn l2_error<F: FnMut(f64, f64) -> f64>(
    mesh: &Mesh,
    space: &Space,
    values: &[f64],
    quad: &Quadrature,
    mut exact: F,
) -> f64 {
    let table = BasisTable::new(space.degree, quad);
    let mut acc = 0.0;
    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        let c = mesh.leaf(ci);
        let [ox, oy] = mesh.point(c.ax, c.ay);
        let nodes = space.cell_nodes(ci);
        for q in 0..quad.len() {
            let [px, py] = quad.points[q];
            let mut v = 0.0;
            for (b, &nd) in nodes.iter().enumerate() {
                v += values[nd] * table.values[q][b];
            }
            let d = v - exact(ox + px * side, oy + py * side);
            acc += quad.weights[q] * area * d * d;
        }
    }
    acc.sqrt()
}

/// L2 norm of the difference of two nodal fields on the same space.
pub fn l2_diff(mesh: &Mesh, space: &Space, a: &[f64], b: &[f64], quad: &Quadrature) -> f64 {
    let table = BasisTable::new(space.degree, quad);
    let mut acc = 0.0;
    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        let nodes = space.cell_nodes(ci);
        for q in 0..quad.len() {
            let mut v = 0.0;
            for (bi, &nd) in nodes.iter().enumerate() {
                v += (a[nd] - b[nd]) * table.values[q][bi];
            }
            acc += quad.weights[q] * area * v * v;
        }
    }
    acc.sqrt()
}

/// Assemble the scalar mass matrix (with constraints condensed in).
pub fn assemble_mass(
    mesh: &Mesh,
    space: &Space,
    cs: &ConstraintSet,
    quad: &Quadrature,
) -> Csr {
    let nb = space.nodes_per_cell;
    let table = BasisTable::new(space.degree, quad);
    let mut coo = Coo::with_capacity(space.n_nodes, mesh.n_leaves() * nb * nb);
    let mut rhs = vec![0.0; space.n_nodes];
    let zero_rhs = vec![0.0; nb];
    let mut local = vec![0.0; nb * nb];
    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        local.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..quad.len() {
            let w = quad.weights[q] * area;
            for i in 0..nb {
                let wi = w * table.values[q][i];
                for j in 0..nb {
                    local[i * nb + j] += wi * table.values[q][j];
                }
            }
        }
        cs.distribute_local(space.cell_nodes(ci), &local, &zero_rhs, &mut coo, &mut rhs);
    }
    cs.finalize(&mut coo, &mut rhs);
    coo.into_csr()
}
