//! Finite-element space oracles on adapted meshes: polynomial reproduction,
//! continuity across hanging faces, mass bookkeeping under constraints, a
//! dense-factorization oracle for the nonsymmetric solver, and the
//! pure-Neumann Poisson contract.

use levelflow::fem::{
    add_hanging_node_constraints, assemble_mass, shape_functions, solve_general, solve_spd,
    BasisTable, ConstraintSet, Coo, Quadrature, Space,
};
use levelflow::mesh::{Dir, Mesh};
use levelflow::nsolver::assemble_scalar_stiffness;

struct SplitMix(u64);

impl SplitMix {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    }
}

/// 8x8 root grid refined twice around a circle: the canonical mesh with
/// hanging nodes on both axes.
fn banded_mesh() -> Mesh {
    let phi = |x: f64, y: f64| ((x - 0.5f64).powi(2) + (y - 0.5f64).powi(2)).sqrt() - 0.25;
    let root = Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], 0.125, 2).unwrap();
    let (mesh, report) = root.adapt(phi, 0.02, 2.0, 2.0);
    assert!(report.n_refined > 0);
    mesh
}

fn constrained_space(mesh: &Mesh, degree: u8) -> (Space, ConstraintSet) {
    let space = Space::new(mesh, degree);
    let mut cs = ConstraintSet::new(space.n_nodes);
    add_hanging_node_constraints(mesh, &space, &mut cs, 1, 0);
    cs.close();
    (space, cs)
}

/// Evaluate a scalar field inside one specific cell (no point-location),
/// so a face point can be probed from either side.
fn eval_in_cell(mesh: &Mesh, space: &Space, values: &[f64], ci: usize, x: f64, y: f64) -> f64 {
    let local = space.local_coords(mesh, ci, x, y);
    let (n, _) = shape_functions(space.degree, local);
    space
        .cell_nodes(ci)
        .iter()
        .zip(&n)
        .map(|(&node, &w)| values[node] * w)
        .sum()
}

#[test]
fn quadratic_fields_are_reproduced_exactly_on_adapted_meshes() {
    let mesh = banded_mesh();
    let (space, cs) = constrained_space(&mesh, 2);

    let fx = |x: f64, y: f64| x * x + x * y - 2.0 * y;
    let fy = |x: f64, y: f64| y * y - 3.0 * x + 0.5 * x * y;
    let mut ux = space.interpolate(&mesh, &mut |x, y| fx(x, y));
    let mut uy = space.interpolate(&mesh, &mut |x, y| fy(x, y));
    cs.distribute(&mut ux);
    cs.distribute(&mut uy);

    let mut rng = SplitMix(7);
    for _ in 0..500 {
        let x = rng.next_f64() + 0.5;
        let y = rng.next_f64() + 0.5;
        let vx = space.eval(&mesh, &ux, x, y).unwrap();
        let vy = space.eval(&mesh, &uy, x, y).unwrap();
        assert!((vx - fx(x, y)).abs() < 1e-10, "x-component off at ({x}, {y})");
        assert!((vy - fy(x, y)).abs() < 1e-10, "y-component off at ({x}, {y})");
    }

    // The classic spot check on the plain square function.
    let sq = space.interpolate(&mesh, &mut |x, _| x * x);
    let v = space.eval(&mesh, &sq, 0.3, 0.7).unwrap();
    assert!((v - 0.09).abs() < 1e-12);
}

#[test]
fn constrained_fields_are_continuous_across_hanging_faces() {
    let mesh = banded_mesh();
    for degree in [1u8, 2u8] {
        let (space, cs) = constrained_space(&mesh, degree);
        let mut rng = SplitMix(0xfeed + degree as u64);
        let mut values: Vec<f64> = (0..space.n_nodes).map(|_| rng.next_f64()).collect();
        cs.distribute(&mut values);

        let mut sampled = 0usize;
        for i in 0..mesh.n_leaves() {
            for dir in [Dir::East, Dir::North] {
                let nbrs = mesh.edge_neighbors(i, dir);
                if nbrs.len() != 2 {
                    continue; // only coarse-to-fine faces carry constraints
                }
                let c = mesh.leaf(i);
                let side = mesh.cell_side(i);
                let [ox, oy] = mesh.point(c.ax, c.ay);
                for k in 0..25 {
                    let t = (k as f64 + 0.5) / 25.0;
                    let (x, y) = match dir {
                        Dir::East => (ox + side, oy + t * side),
                        Dir::North => (ox + t * side, oy + side),
                        _ => unreachable!(),
                    };
                    let coarse = eval_in_cell(&mesh, &space, &values, i, x, y);
                    let fine_cell = nbrs
                        .iter()
                        .copied()
                        .find(|&j| {
                            let f = mesh.leaf(j);
                            let fs = mesh.cell_side(j);
                            let [fx, fy] = mesh.point(f.ax, f.ay);
                            x >= fx - 1e-12 && x <= fx + fs + 1e-12 && y >= fy - 1e-12 && y <= fy + fs + 1e-12
                        })
                        .expect("one fine neighbor must cover the sample point");
                    let fine = eval_in_cell(&mesh, &space, &values, fine_cell, x, y);
                    assert!(
                        (coarse - fine).abs() < 1e-10,
                        "degree-{degree} jump {:.3e} at ({x}, {y})",
                        (coarse - fine).abs()
                    );
                    sampled += 1;
                }
            }
        }
        assert!(sampled >= 1000, "expected at least 1000 face samples, got {sampled}");
    }
}

#[test]
fn hanging_mass_matrix_conserves_total_mass() {
    let mesh = banded_mesh();
    let (space, cs) = constrained_space(&mesh, 1);
    let quad = Quadrature::gauss(2);
    let mass = assemble_mass(&mesh, &space, &cs, &quad);

    // Condensation moves slave contributions onto masters with weights
    // summing to one, so the all-ones quadratic form still integrates the
    // constant function. The finalized identity rows of the constrained
    // dofs each add exactly one on top.
    let ones = vec![1.0; space.n_nodes];
    let mut row_sums = vec![0.0; space.n_nodes];
    mass.mul_vec(&ones, &mut row_sums);
    let total: f64 = row_sums.iter().sum();
    let n_constrained = (0..space.n_nodes).filter(|&d| cs.is_constrained(d)).count();
    assert!(n_constrained > 0, "mesh must actually have hanging nodes");
    let area = (total - n_constrained as f64).abs();
    assert!(
        (area - 1.0).abs() < 1e-12,
        "mass total {total} minus {n_constrained} identity rows should be the unit area"
    );
}

#[test]
fn general_solver_agrees_with_dense_factorization_oracle() {
    // Advection-diffusion on a coarse uniform grid: nonsymmetric, small
    // enough to factorize densely in the test itself.
    let mesh = Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], 0.125, 0).unwrap();
    let space = Space::new(&mesh, 1);
    let mut cs = ConstraintSet::new(space.n_nodes);
    // Dirichlet walls make the operator nonsingular.
    for side in [
        levelflow::config::Side::Left,
        levelflow::config::Side::Right,
        levelflow::config::Side::Bottom,
        levelflow::config::Side::Top,
    ] {
        for node in space.boundary_nodes(&mesh, side) {
            cs.set_pinned(node, 0.0);
        }
    }
    cs.close();

    let quad = Quadrature::gauss(2);
    let table = BasisTable::new(space.degree, &quad);
    let nb = space.nodes_per_cell;
    let nq = quad.len();
    let wind = [1.0, 0.3];
    let kappa = 0.05;

    let mut coo = Coo::new(space.n_nodes);
    let mut rhs = vec![0.0; space.n_nodes];
    let mut local = vec![0.0; nb * nb];
    let mut local_rhs = vec![0.0; nb];
    for ci in 0..mesh.n_leaves() {
        let side = mesh.cell_side(ci);
        let area = side * side;
        let inv_h = 1.0 / side;
        local.iter_mut().for_each(|v| *v = 0.0);
        local_rhs.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..nq {
            let w = quad.weights[q] * area;
            for a in 0..nb {
                let na = table.values[q][a];
                let ga = [table.grads[q][a][0] * inv_h, table.grads[q][a][1] * inv_h];
                local_rhs[a] += w * na; // unit source
                for b in 0..nb {
                    let nbv = table.values[q][b];
                    let gb = [table.grads[q][b][0] * inv_h, table.grads[q][b][1] * inv_h];
                    let diff = kappa * (ga[0] * gb[0] + ga[1] * gb[1]);
                    let conv = na * (wind[0] * gb[0] + wind[1] * gb[1]);
                    local[a * nb + b] += w * (diff + conv);
                }
            }
        }
        cs.distribute_local(space.cell_nodes(ci), &local, &local_rhs, &mut coo, &mut rhs);
    }
    cs.finalize(&mut coo, &mut rhs);
    let a = coo.into_csr();

    // Dense LU with partial pivoting as the oracle.
    let n = space.n_nodes;
    let mut dense = vec![0.0; n * n];
    for row in 0..n {
        for k in a.indptr[row]..a.indptr[row + 1] {
            dense[row * n + a.indices[k] as usize] += a.data[k];
        }
    }
    let mut piv_rhs = rhs.clone();
    for k in 0..n {
        let mut p = k;
        for r in k + 1..n {
            if dense[r * n + k].abs() > dense[p * n + k].abs() {
                p = r;
            }
        }
        if p != k {
            for c in 0..n {
                dense.swap(k * n + c, p * n + c);
            }
            piv_rhs.swap(k, p);
        }
        let pivot = dense[k * n + k];
        assert!(pivot.abs() > 1e-14, "oracle matrix must be nonsingular");
        for r in k + 1..n {
            let f = dense[r * n + k] / pivot;
            if f == 0.0 {
                continue;
            }
            for c in k..n {
                dense[r * n + c] -= f * dense[k * n + c];
            }
            piv_rhs[r] -= f * piv_rhs[k];
        }
    }
    let mut oracle = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = piv_rhs[k];
        for c in k + 1..n {
            s -= dense[k * n + c] * oracle[c];
        }
        oracle[k] = s / dense[k * n + k];
    }

    let mut x = vec![0.0; n];
    solve_general(&a, &rhs, &mut x, 1e-12, 2000).unwrap();
    let worst = x
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-9, "iterative vs dense mismatch {worst:.3e}");
}

#[test]
fn neumann_poisson_converges_and_stays_mean_zero() {
    // -u'' = pi^2 cos(pi x) with zero flux on all sides; the exact solution
    // cos(pi x) is mean-zero on the unit square.
    let mut errors = Vec::new();
    for n in [16usize, 32] {
        let h = 1.0 / n as f64;
        let mesh = Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], h, 0).unwrap();
        let (space, cs) = constrained_space(&mesh, 1);
        let quad = Quadrature::gauss(2);
        let stiff = assemble_scalar_stiffness(&mesh, &space, &cs, &quad);

        let table = BasisTable::new(space.degree, &quad);
        let nb = space.nodes_per_cell;
        let mut b = vec![0.0; space.n_nodes];
        let mut local = vec![0.0; nb];
        for ci in 0..mesh.n_leaves() {
            let side = mesh.cell_side(ci);
            let area = side * side;
            let c = mesh.leaf(ci);
            let [ox, oy] = mesh.point(c.ax, c.ay);
            local.iter_mut().for_each(|v| *v = 0.0);
            for q in 0..quad.len() {
                let x = ox + quad.points[q][0] * side;
                let _y = oy + quad.points[q][1] * side;
                let f = std::f64::consts::PI.powi(2) * (std::f64::consts::PI * x).cos();
                let w = quad.weights[q] * area * f;
                for a in 0..nb {
                    local[a] += w * table.values[q][a];
                }
            }
            cs.distribute_rhs_local(space.cell_nodes(ci), &local, &mut b);
        }

        let mut u = vec![0.0; space.n_nodes];
        solve_spd(&stiff, &b, &mut u, 1e-12, 4000).unwrap();
        cs.distribute(&mut u);

        // Pin the mean of the discrete solution to zero before comparing.
        let area_total = mesh.total_area();
        let mean = levelflow::nsolver::field_integral(&mesh, &space, &quad, &table, &u) / area_total;
        u.iter_mut().for_each(|v| *v -= mean);
        let mean_after = levelflow::nsolver::field_integral(&mesh, &space, &quad, &table, &u) / area_total;
        assert!(mean_after.abs() < 1e-10);

        let err = levelflow::fem::l2_error(&mesh, &space, &u, &quad, |x, _| {
            (std::f64::consts::PI * x).cos()
        });
        errors.push(err);
    }
    let ratio = errors[0] / errors[1];
    assert!(
        (3.5..=4.5).contains(&ratio),
        "second-order Neumann solve expected, got errors {errors:?} (ratio {ratio:.2})"
    );
}
