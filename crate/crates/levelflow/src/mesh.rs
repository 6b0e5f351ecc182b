//! Quadtree mesh over a rectangular domain.
//!
//! The domain is tiled by a uniform root grid of square cells of side `h0`;
//! each cell can be split into four children, recursively, up to
//! `max_level` generations. All geometry lives on an integer lattice whose
//! unit is `h0 / 2^(max_level + 1)`, so cell anchors, centers, and both the
//! corner and mid-edge nodes of every admissible cell are exact integers.
//! Only leaves are stored; ancestor lookup probes the leaf index level by
//! level.

use std::collections::HashMap;
use thiserror::Error;

/// Side of the largest-possible error when checking that `h0` tiles the
/// domain: extents within this relative tolerance of an integer multiple
/// are accepted.
const DIVISIBILITY_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("domain extent along {axis} is {extent}, not a positive multiple of h0 = {h0}")]
    NotDivisible { axis: char, extent: f64, h0: f64 },
    #[error("h0 must be positive, got {0}")]
    BadCellSize(f64),
}

/// One leaf cell: refinement generation and anchor (south-west corner) in
/// lattice units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub level: u8,
    pub ax: i64,
    pub ay: i64,
}

/// Compass direction of a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    East,
    West,
    North,
    South,
}

pub const DIRS: [Dir; 4] = [Dir::East, Dir::West, Dir::North, Dir::South];

/// What one adaptation pass did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdaptReport {
    /// Leaves split because they sit in the interface band.
    pub n_refined: usize,
    /// Sibling groups merged back into their parent.
    pub n_coarsened: usize,
    /// Extra splits needed to restore the one-hanging-node rule.
    pub n_balance_refinements: usize,
}

impl AdaptReport {
    pub fn changed(&self) -> bool {
        self.n_refined + self.n_coarsened + self.n_balance_refinements > 0
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub x0: f64,
    pub y0: f64,
    pub h0: f64,
    /// Root cells along x and y.
    pub nx: usize,
    pub ny: usize,
    /// Deepest admissible generation.
    pub max_level: u8,
    /// Physical length of one lattice unit.
    pub unit: f64,
    /// Lattice units per root-cell side: `2^(max_level + 1)`.
    pub root_side: i64,
    /// Leaves, sorted by (ay, ax).
    leaves: Vec<Cell>,
    index: HashMap<(u8, i64, i64), usize>,
}

impl PartialEq for Mesh {
    fn eq(&self, other: &Self) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.max_level == other.max_level
            && self.h0 == other.h0
            && self.x0 == other.x0
            && self.y0 == other.y0
            && self.leaves == other.leaves
    }
}

impl Mesh {
    /// Uniform root-grid mesh over `[x0, x1] x [y0, y1]` with cells of side
    /// `h0`, refinable `max_level` generations deep.
    pub fn build_uniform(domain: [f64; 4], h0: f64, max_level: u8) -> Result<Mesh, MeshError> {
        if !(h0 > 0.0) {
            return Err(MeshError::BadCellSize(h0));
        }
        let [x0, x1, y0, y1] = domain;
        let count = |extent: f64, axis: char| -> Result<usize, MeshError> {
            let n = extent / h0;
            let r = n.round();
            if r < 1.0 || (n - r).abs() > DIVISIBILITY_REL_TOL * n.abs().max(1.0) {
                return Err(MeshError::NotDivisible { axis, extent, h0 });
            }
            Ok(r as usize)
        };
        let nx = count(x1 - x0, 'x')?;
        let ny = count(y1 - y0, 'y')?;
        let root_side = 1i64 << (max_level as u32 + 1);
        let mut leaves = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                leaves.push(Cell {
                    level: 0,
                    ax: i as i64 * root_side,
                    ay: j as i64 * root_side,
                });
            }
        }
        Ok(Mesh::from_parts(x0, y0, h0, nx, ny, max_level, leaves))
    }

    fn from_parts(
        x0: f64,
        y0: f64,
        h0: f64,
        nx: usize,
        ny: usize,
        max_level: u8,
        mut leaves: Vec<Cell>,
    ) -> Mesh {
        leaves.sort_by_key(|c| (c.ay, c.ax));
        let root_side = 1i64 << (max_level as u32 + 1);
        let unit = h0 / root_side as f64;
        let index = leaves
            .iter()
            .enumerate()
            .map(|(i, c)| ((c.level, c.ax, c.ay), i))
            .collect();
        Mesh { x0, y0, h0, nx, ny, max_level, unit, root_side, leaves, index }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaves(&self) -> &[Cell] {
        &self.leaves
    }

    pub fn leaf(&self, i: usize) -> Cell {
        self.leaves[i]
    }

    /// Domain width in lattice units.
    pub fn width_units(&self) -> i64 {
        self.nx as i64 * self.root_side
    }

    /// Domain height in lattice units.
    pub fn height_units(&self) -> i64 {
        self.ny as i64 * self.root_side
    }

    /// Side of a cell at `level`, in lattice units.
    pub fn side_units(&self, level: u8) -> i64 {
        self.root_side >> level
    }

    /// Physical side length of leaf `i`.
    pub fn cell_side(&self, i: usize) -> f64 {
        self.unit * self.side_units(self.leaves[i].level) as f64
    }

    /// Cell size measure `h_K`: the diagonal of leaf `i`.
    pub fn cell_diag(&self, i: usize) -> f64 {
        self.cell_side(i) * std::f64::consts::SQRT_2
    }

    /// Smallest `h_K` over all leaves.
    pub fn min_diag(&self) -> f64 {
        let deepest = self.leaves.iter().map(|c| c.level).max().unwrap_or(0);
        self.unit * self.side_units(deepest) as f64 * std::f64::consts::SQRT_2
    }

    /// Physical position of a lattice point.
    pub fn point(&self, gx: i64, gy: i64) -> [f64; 2] {
        [self.x0 + gx as f64 * self.unit, self.y0 + gy as f64 * self.unit]
    }

    /// Physical center of leaf `i`.
    pub fn cell_center(&self, i: usize) -> [f64; 2] {
        let c = self.leaves[i];
        let half = self.side_units(c.level) / 2;
        self.point(c.ax + half, c.ay + half)
    }

    /// Leaf containing the lattice point `(gx, gy)`, treating each cell as
    /// half-open `[ax, ax+s) x [ay, ay+s)`. Points outside the domain give
    /// `None`; points on the east/north domain boundary are clamped inward.
    pub fn leaf_at_units(&self, gx: i64, gy: i64) -> Option<usize> {
        let w = self.width_units();
        let h = self.height_units();
        if gx < 0 || gy < 0 || gx > w || gy > h {
            return None;
        }
        let gx = gx.min(w - 1);
        let gy = gy.min(h - 1);
        for level in 0..=self.max_level {
            let s = self.side_units(level);
            let key = (level, gx & !(s - 1), gy & !(s - 1));
            if let Some(&i) = self.index.get(&key) {
                return Some(i);
            }
        }
        None
    }

    /// Leaf containing a physical point, or `None` outside the domain.
    /// Points within a relative roundoff of the boundary count as inside.
    pub fn leaf_containing(&self, x: f64, y: f64) -> Option<usize> {
        let locate = |v: f64, origin: f64, extent: i64| -> i64 {
            let u = (v - origin) / self.unit;
            let mut g = u.floor() as i64;
            let tol = 1e-9;
            if g == -1 && u > -tol {
                g = 0;
            }
            if g == extent && u < extent as f64 + tol {
                g = extent - 1;
            }
            g
        };
        let gx = locate(x, self.x0, self.width_units());
        let gy = locate(y, self.y0, self.height_units());
        self.leaf_at_units(gx.clamp(-2, self.width_units() + 2), gy.clamp(-2, self.height_units() + 2))
    }

    /// Leaves adjacent to leaf `i` across its `dir` edge. Empty on the
    /// domain boundary; on a balanced mesh the result has one or two
    /// entries (two when the neighbors are one generation finer).
    pub fn edge_neighbors(&self, i: usize, dir: Dir) -> Vec<usize> {
        let c = self.leaves[i];
        let s = self.side_units(c.level);
        let probes = match dir {
            Dir::East => [(c.ax + s, c.ay), (c.ax + s, c.ay + s / 2)],
            Dir::West => [(c.ax - 1, c.ay), (c.ax - 1, c.ay + s / 2)],
            Dir::North => [(c.ax, c.ay + s), (c.ax + s / 2, c.ay + s)],
            Dir::South => [(c.ax, c.ay - 1), (c.ax + s / 2, c.ay - 1)],
        };
        let mut out = Vec::with_capacity(2);
        for (px, py) in probes {
            // Probes that leave the lattice would otherwise be clamped back
            // into the boundary cell by the node-oriented lookup.
            if px < 0 || py < 0 || px >= self.width_units() || py >= self.height_units() {
                continue;
            }
            if let Some(j) = self.leaf_at_units(px, py) {
                if !out.contains(&j) {
                    out.push(j);
                }
            }
        }
        out
    }

    /// Total area of all leaves.
    pub fn total_area(&self) -> f64 {
        (0..self.n_leaves()).map(|i| {
            let s = self.cell_side(i);
            s * s
        }).sum()
    }

    /// Adapt the mesh to the interface indicator `phi` (evaluated at
    /// physical cell centers): refine every leaf with
    /// `|phi| <= beta * tanh(c_r)` below the depth cap, merge sibling
    /// groups whose four members all satisfy `|phi| >= beta * tanh(c_c)`,
    /// and keep the one-hanging-node rule. Sweeps repeat until nothing
    /// changes, so calling `adapt` again with the same field and `beta` is
    /// a no-op.
    pub fn adapt<F: FnMut(f64, f64) -> f64>(
        &self,
        mut phi: F,
        beta: f64,
        c_r: f64,
        c_c: f64,
    ) -> (Mesh, AdaptReport) {
        let refine_band = beta * c_r.tanh();
        let coarsen_band = beta * c_c.tanh();
        let mut mesh = self.clone();
        let mut report = AdaptReport::default();
        loop {
            let (next, n_refined, n_coarsened) =
                mesh.refine_coarsen_sweep(&mut phi, refine_band, coarsen_band);
            let mut next = next;
            let n_balanced = next.balance();
            report.n_refined += n_refined;
            report.n_coarsened += n_coarsened;
            report.n_balance_refinements += n_balanced;
            mesh = next;
            if n_refined + n_coarsened + n_balanced == 0 {
                break;
            }
        }
        (mesh, report)
    }

    /// One marking pass: split band leaves, merge fully-out-of-band sibling
    /// groups. Returns the resulting mesh and the (refined, merged) counts.
    fn refine_coarsen_sweep<F: FnMut(f64, f64) -> f64>(
        &self,
        phi: &mut F,
        refine_band: f64,
        coarsen_band: f64,
    ) -> (Mesh, usize, usize) {
        let n = self.n_leaves();
        let center_phi: Vec<f64> = (0..n)
            .map(|i| {
                let [x, y] = self.cell_center(i);
                phi(x, y)
            })
            .collect();

        let refine: Vec<bool> = (0..n)
            .map(|i| self.leaves[i].level < self.max_level && center_phi[i].abs() <= refine_band)
            .collect();

        let mut groups: HashMap<(u8, i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in self.leaves.iter().enumerate() {
            if c.level == 0 || refine[i] {
                continue;
            }
            if center_phi[i].abs() < coarsen_band {
                continue;
            }
            let sp = self.side_units(c.level - 1);
            groups
                .entry((c.level - 1, c.ax & !(sp - 1), c.ay & !(sp - 1)))
                .or_default()
                .push(i);
        }

        let effective_level = |i: usize| self.leaves[i].level + u8::from(refine[i]);
        let mut coarsen = vec![false; n];
        let mut n_coarsened = 0usize;
        for (&(plevel, pax, pay), members) in &groups {
            if members.len() != 4 {
                continue;
            }
            // Never merge a group whose parent would land back inside the
            // refinement band; the sweeps would oscillate otherwise.
            let sp = self.side_units(plevel);
            let [px, py] = self.point(pax + sp / 2, pay + sp / 2);
            if phi(px, py).abs() <= refine_band {
                continue;
            }
            // Probe just outside each edge of the parent at quarter points;
            // any leaf found deeper than plevel + 1 (counting refinements
            // marked in this same sweep) vetoes the merge.
            let q = sp / 4;
            let outside = [
                (pax + sp, pay + q),
                (pax + sp, pay + 3 * q),
                (pax - 1, pay + q),
                (pax - 1, pay + 3 * q),
                (pax + q, pay + sp),
                (pax + 3 * q, pay + sp),
                (pax + q, pay - 1),
                (pax + 3 * q, pay - 1),
            ];
            let safe = outside.iter().all(|&(qx, qy)| match self.leaf_at_units(qx, qy) {
                None => true,
                Some(j) => effective_level(j) <= plevel + 1,
            });
            if !safe {
                continue;
            }
            for &m in members {
                coarsen[m] = true;
            }
            n_coarsened += 1;
        }

        let mut new_leaves = Vec::with_capacity(n + 3 * refine.iter().filter(|r| **r).count());
        let mut emitted_parents: HashMap<(u8, i64, i64), ()> = HashMap::new();
        let mut n_refined = 0usize;
        for (i, c) in self.leaves.iter().enumerate() {
            if refine[i] {
                n_refined += 1;
                let half = self.side_units(c.level) / 2;
                for (dx, dy) in [(0, 0), (half, 0), (0, half), (half, half)] {
                    new_leaves.push(Cell { level: c.level + 1, ax: c.ax + dx, ay: c.ay + dy });
                }
            } else if coarsen[i] {
                let sp = self.side_units(c.level - 1);
                let key = (c.level - 1, c.ax & !(sp - 1), c.ay & !(sp - 1));
                if emitted_parents.insert(key, ()).is_none() {
                    new_leaves.push(Cell { level: key.0, ax: key.1, ay: key.2 });
                }
            } else {
                new_leaves.push(*c);
            }
        }

        let mesh =
            Mesh::from_parts(self.x0, self.y0, self.h0, self.nx, self.ny, self.max_level, new_leaves);
        (mesh, n_refined, n_coarsened)
    }

    /// Split leaves until no two edge-adjacent leaves differ by more than
    /// one generation. Returns the number of splits performed.
    fn balance(&mut self) -> usize {
        let mut total = 0usize;
        loop {
            let mut to_split: Vec<usize> = Vec::new();
            for i in 0..self.n_leaves() {
                let level = self.leaves[i].level;
                let violated = DIRS.iter().any(|&d| {
                    self.edge_neighbors(i, d)
                        .iter()
                        .any(|&j| self.leaves[j].level > level + 1)
                });
                if violated {
                    to_split.push(i);
                }
            }
            if to_split.is_empty() {
                break;
            }
            total += to_split.len();
            let mut leaves = std::mem::take(&mut self.leaves);
            // Split from the back so indices stay valid.
            for &i in to_split.iter().rev() {
                let c = leaves.swap_remove(i);
                let half = self.side_units(c.level) / 2;
                for (dx, dy) in [(0, 0), (half, 0), (0, half), (half, half)] {
                    leaves.push(Cell { level: c.level + 1, ax: c.ax + dx, ay: c.ay + dy });
                }
            }
            *self = Mesh::from_parts(self.x0, self.y0, self.h0, self.nx, self.ny, self.max_level, leaves);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square(h0: f64, max_level: u8) -> Mesh {
        Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], h0, max_level).unwrap()
    }

    #[test]
    fn uniform_mesh_counts_and_geometry() {
        let m = unit_square(0.25, 2);
        assert_eq!(m.n_leaves(), 16);
        assert_eq!(m.nx, 4);
        assert_eq!(m.ny, 4);
        assert!((m.cell_side(0) - 0.25).abs() < 1e-15);
        assert!((m.cell_diag(0) - 0.25 * 2f64.sqrt()).abs() < 1e-15);
        assert!((m.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_divisible_extent_rejected() {
        let err = Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], 0.3, 2).unwrap_err();
        assert!(matches!(err, MeshError::NotDivisible { axis: 'x', .. }));
    }

    #[test]
    fn divisibility_tolerates_roundoff() {
        // 0.1 is not binary-exact; ten of them must still tile [0, 1].
        let m = Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], 0.1, 1).unwrap();
        assert_eq!(m.n_leaves(), 100);
    }

    #[test]
    fn lattice_lookup_finds_unique_leaf() {
        let m = unit_square(0.5, 1);
        for i in 0..m.n_leaves() {
            let c = m.leaf(i);
            let s = m.side_units(c.level);
            assert_eq!(m.leaf_at_units(c.ax, c.ay), Some(i));
            assert_eq!(m.leaf_at_units(c.ax + s - 1, c.ay + s - 1), Some(i));
        }
        assert_eq!(m.leaf_at_units(-1, 0), None);
        assert_eq!(m.leaf_at_units(0, m.height_units() + 2), None);
    }

    #[test]
    fn refinement_reaches_min_size_after_full_depth() {
        let mut m = unit_square(0.25, 2);
        // A band through the whole domain refines everything it touches.
        for _ in 0..3 {
            let beta = m.min_diag();
            m = m.adapt(|_, y| y - 0.5, beta, 2.0, 2.0).0;
        }
        let min = m.min_diag();
        assert!((min - 0.25 * 2f64.sqrt() / 4.0).abs() < 1e-14, "min h_K = {min}");
        assert!((m.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adapt_is_idempotent_on_distance_field() {
        let phi = |x: f64, y: f64| 0.3 - ((x - 0.5f64).powi(2) + (y - 0.5f64).powi(2)).sqrt();
        let mut m = unit_square(0.125, 2);
        for _ in 0..3 {
            let beta = m.min_diag();
            m = m.adapt(phi, beta, 2.0, 2.0).0;
        }
        let beta = m.min_diag();
        let (m2, report) = m.adapt(phi, beta, 2.0, 2.0);
        assert!(!report.changed(), "second pass still changed the mesh: {report:?}");
        assert_eq!(m, m2);
    }

    #[test]
    fn balanced_after_adapt() {
        let phi = |x: f64, y: f64| 0.3 - ((x - 0.5f64).powi(2) + (y - 0.5f64).powi(2)).sqrt();
        let mut m = unit_square(0.25, 2);
        for _ in 0..3 {
            let beta = m.min_diag();
            m = m.adapt(phi, beta, 2.0, 2.0).0;
        }
        for i in 0..m.n_leaves() {
            for d in DIRS {
                for j in m.edge_neighbors(i, d) {
                    let li = m.leaf(i).level as i32;
                    let lj = m.leaf(j).level as i32;
                    assert!((li - lj).abs() <= 1, "leaves {i} and {j} differ by >1 generation");
                }
            }
        }
    }

    #[test]
    fn coarsening_recovers_root_grid_when_interface_leaves() {
        let near = |x: f64, y: f64| 0.3 - ((x - 0.5f64).powi(2) + (y - 0.5f64).powi(2)).sqrt();
        let far = |_: f64, _: f64| 1.0e3;
        let mut m = unit_square(0.25, 2);
        for _ in 0..3 {
            let beta = m.min_diag();
            m = m.adapt(near, beta, 2.0, 2.0).0;
        }
        assert!(m.n_leaves() > 16);
        // Once the indicator is far from zero everywhere, repeated passes
        // must walk the mesh all the way back to the root grid.
        for _ in 0..3 {
            let beta = m.min_diag();
            m = m.adapt(far, beta, 2.0, 2.0).0;
        }
        assert_eq!(m.n_leaves(), 16);
        assert!(m.leaves().iter().all(|c| c.level == 0));
    }
}
