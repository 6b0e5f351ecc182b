//! Scalar diagnostics of the evolving state: integrals over the positive
//! phase, interface extraction, distance measures, and time-series shape
//! analysis used by the scenario harness.

use crate::fem::{shape_functions, Space};
use crate::mesh::Mesh;

/// Number of subcell strips per direction used to sharpen phase integrals in
/// cells crossed by the interface.
const SUBCELLS: usize = 4;

/// One record of the per-step diagnostics series.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: f64,
    /// Centroid of the positive phase.
    pub x_c: f64,
    pub y_c: f64,
    /// Mean vertical velocity over the positive phase.
    pub u_c: f64,
    pub area_plus: f64,
    pub div_norm: f64,
    pub min_h: f64,
    pub n_cells: usize,
    pub dt: f64,
    /// Set when the positive phase vanished; the dependent fields are zeroed
    /// instead of carrying NaN.
    pub empty_plus: bool,
}

/// Integrals over the region where the level-set field is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMoments {
    pub area: f64,
    pub x_c: f64,
    pub y_c: f64,
    /// Mean of the sampled scalar (vertical velocity in the harness).
    pub u_c: f64,
    pub empty: bool,
}

fn bilinear(c: [f64; 4], s: f64, t: f64) -> f64 {
    c[0] * (1.0 - s) * (1.0 - t) + c[1] * s * (1.0 - t) + c[2] * (1.0 - s) * t + c[3] * s * t
}

/// Area, centroid, and mean of `sample` over `{phi > 0}`. The indicator is
/// sharp: cells crossed by the zero set are split into a 4x4 grid of
/// subcells, each counted entirely by the sign at its center. `sample` is
/// called with the leaf index and the physical evaluation point.
pub fn plus_phase_moments<F: FnMut(usize, f64, f64) -> f64>(
    mesh: &Mesh,
    space: &Space,
    phi: &[f64],
    mut sample: F,
) -> PhaseMoments {
    assert_eq!(space.degree, 1, "phase moments expect the scalar space");
    let mut area = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    let mut mu = 0.0;
    for ci in 0..mesh.n_leaves() {
        let nodes = space.cell_nodes(ci);
        let c = [phi[nodes[0]], phi[nodes[1]], phi[nodes[2]], phi[nodes[3]]];
        let hi = c.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        if hi <= 0.0 {
            continue;
        }
        let lo = c.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        let side = mesh.cell_side(ci);
        let cell = mesh.leaf(ci);
        let origin = mesh.point(cell.ax, cell.ay);
        if lo > 0.0 {
            // A bilinear field attains its extrema at the corners, so the
            // whole cell lies in the positive phase.
            let a = side * side;
            let xc = origin[0] + 0.5 * side;
            let yc = origin[1] + 0.5 * side;
            area += a;
            mx += xc * a;
            my += yc * a;
            // Midpoint rule on the same subcell grid keeps the sampled mean
            // consistent between interior and interface cells.
            let sub = side / SUBCELLS as f64;
            let sa = sub * sub;
            for sj in 0..SUBCELLS {
                for si in 0..SUBCELLS {
                    let x = origin[0] + (si as f64 + 0.5) * sub;
                    let y = origin[1] + (sj as f64 + 0.5) * sub;
                    mu += sample(ci, x, y) * sa;
                }
            }
        } else {
            let sub = side / SUBCELLS as f64;
            let sa = sub * sub;
            for sj in 0..SUBCELLS {
                for si in 0..SUBCELLS {
                    let s = (si as f64 + 0.5) / SUBCELLS as f64;
                    let t = (sj as f64 + 0.5) / SUBCELLS as f64;
                    if bilinear(c, s, t) <= 0.0 {
                        continue;
                    }
                    let x = origin[0] + (si as f64 + 0.5) * sub;
                    let y = origin[1] + (sj as f64 + 0.5) * sub;
                    area += sa;
                    mx += x * sa;
                    my += y * sa;
                    mu += sample(ci, x, y) * sa;
                }
            }
        }
    }
    if area == 0.0 {
        PhaseMoments { area: 0.0, x_c: 0.0, y_c: 0.0, u_c: 0.0, empty: true }
    } else {
        PhaseMoments { area, x_c: mx / area, y_c: my / area, u_c: mu / area, empty: false }
    }
}

/// Closure sampling the vertical component of an interleaved degree-2
/// velocity field, for use with [`plus_phase_moments`].
pub fn vertical_velocity_sampler<'a>(
    mesh: &'a Mesh,
    vspace: &'a Space,
    u: &'a [f64],
) -> impl FnMut(usize, f64, f64) -> f64 + 'a {
    move |ci, x, y| {
        let t = vspace.local_coords(mesh, ci, x, y);
        let (v, _) = shape_functions(vspace.degree, t);
        vspace
            .cell_nodes(ci)
            .iter()
            .enumerate()
            .map(|(b, &n)| u[2 * n + 1] * v[b])
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Zero contour and distances
// ---------------------------------------------------------------------------

/// Line segments approximating `{phi = 0}`, one or two per crossed cell
/// (marching squares with the center value deciding saddle cells).
pub fn zero_contour(mesh: &Mesh, space: &Space, phi: &[f64]) -> Vec<[[f64; 2]; 2]> {
    assert_eq!(space.degree, 1, "contour extraction expects the scalar space");
    let mut segments = Vec::new();
    for ci in 0..mesh.n_leaves() {
        let nodes = space.cell_nodes(ci);
        let c = [phi[nodes[0]], phi[nodes[1]], phi[nodes[2]], phi[nodes[3]]];
        let inside: Vec<bool> = c.iter().map(|&v| v > 0.0).collect();
        if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
            continue;
        }
        let side = mesh.cell_side(ci);
        let cell = mesh.leaf(ci);
        let o = mesh.point(cell.ax, cell.ay);
        let corner = |k: usize| -> [f64; 2] {
            let (i, j) = (k % 2, k / 2);
            [o[0] + i as f64 * side, o[1] + j as f64 * side]
        };
        // Edges as corner pairs: bottom, right, top, left.
        let edges = [(0usize, 1usize), (1, 3), (2, 3), (0, 2)];
        let mut hits: Vec<(usize, [f64; 2])> = Vec::with_capacity(4);
        for (e, &(a, b)) in edges.iter().enumerate() {
            if inside[a] != inside[b] {
                let t = c[a] / (c[a] - c[b]);
                let pa = corner(a);
                let pb = corner(b);
                hits.push((e, [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]));
            }
        }
        match hits.len() {
            2 => segments.push([hits[0].1, hits[1].1]),
            4 => {
                // Saddle: both diagonals have one sign. Connect crossings so
                // the side holding the cell center stays connected.
                let center_plus = 0.25 * (c[0] + c[1] + c[2] + c[3]) > 0.0;
                let bl_plus = inside[0];
                let by_edge = |e: usize| hits.iter().find(|h| h.0 == e).unwrap().1;
                let (bottom, right, top, left) = (by_edge(0), by_edge(1), by_edge(2), by_edge(3));
                if bl_plus == center_plus {
                    // The bottom-left corner connects through the center:
                    // isolate the other diagonal's corners.
                    segments.push([bottom, right]);
                    segments.push([left, top]);
                } else {
                    segments.push([bottom, left]);
                    segments.push([right, top]);
                }
            }
            _ => {}
        }
    }
    segments
}

/// Distance from a point to a line segment.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if denom > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    (dx * dx + dy * dy).sqrt()
}

/// Symmetric Hausdorff distance between a polyline contour and a circle.
pub fn hausdorff_contour_circle(
    contour: &[[[f64; 2]; 2]],
    center: [f64; 2],
    radius: f64,
    n_circle: usize,
) -> f64 {
    if contour.is_empty() {
        return f64::INFINITY;
    }
    let radial = |p: [f64; 2]| {
        let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
        (d - radius).abs()
    };
    let mut sup = 0.0f64;
    for seg in contour {
        let mid = [0.5 * (seg[0][0] + seg[1][0]), 0.5 * (seg[0][1] + seg[1][1])];
        sup = sup.max(radial(seg[0])).max(radial(seg[1])).max(radial(mid));
    }
    for k in 0..n_circle {
        let th = 2.0 * std::f64::consts::PI * k as f64 / n_circle as f64;
        let p = [center[0] + radius * th.cos(), center[1] + radius * th.sin()];
        let d = contour
            .iter()
            .map(|seg| point_segment_distance(p, seg[0], seg[1]))
            .fold(f64::INFINITY, f64::min);
        sup = sup.max(d);
    }
    sup
}

// ---------------------------------------------------------------------------
// Time-series shape
// ---------------------------------------------------------------------------

/// Trend summary of a smoothed series: counts of interior maxima and minima
/// plus whether the series ends on a rising stretch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesShape {
    pub maxima: usize,
    pub minima: usize,
    pub ends_rising: bool,
}

/// Centered moving average with the window shrunk near the ends.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Shape of `series` after smoothing. Direction changes smaller than
/// `tol_rel` times the series amplitude are ignored.
pub fn series_shape(series: &[f64], window: usize, tol_rel: f64) -> SeriesShape {
    let s = smooth(series, window);
    let amp = s.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = tol_rel * amp;
    #[derive(PartialEq, Clone, Copy)]
    enum Trend {
        Flat,
        Up,
        Down,
    }
    let mut trend = Trend::Flat;
    let mut maxima = 0;
    let mut minima = 0;
    for w in s.windows(2) {
        let d = w[1] - w[0];
        if d > tol {
            if trend == Trend::Down {
                minima += 1;
            }
            trend = Trend::Up;
        } else if d < -tol {
            if trend == Trend::Up {
                maxima += 1;
            }
            trend = Trend::Down;
        }
    }
    SeriesShape { maxima, minima, ends_rising: trend == Trend::Up }
}

// ---------------------------------------------------------------------------
// Topology probe
// ---------------------------------------------------------------------------

/// Whether `{phi > 0}` sampled on an `nx` by `ny` grid is one connected
/// component without holes (a hole shows up as a negative-phase component
/// that never reaches the domain boundary).
pub fn plus_region_simply_connected(
    mesh: &Mesh,
    space: &Space,
    phi: &[f64],
    nx: usize,
    ny: usize,
) -> bool {
    let x0 = mesh.x0;
    let y0 = mesh.y0;
    let w = mesh.width_units() as f64 * mesh.unit;
    let h = mesh.height_units() as f64 * mesh.unit;
    let mut mask = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) / nx as f64 * w;
            let y = y0 + (j as f64 + 0.5) / ny as f64 * h;
            mask[j * nx + i] = space.eval(mesh, phi, x, y).unwrap_or(-1.0) > 0.0;
        }
    }
    let mut label = vec![u32::MAX; nx * ny];
    let mut n_components = [0usize; 2];
    let mut touches_boundary: Vec<bool> = Vec::new();
    let mut component_sign: Vec<bool> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..nx * ny {
        if label[start] != u32::MAX {
            continue;
        }
        let id = component_sign.len() as u32;
        let sign = mask[start];
        component_sign.push(sign);
        touches_boundary.push(false);
        n_components[sign as usize] += 1;
        stack.push(start);
        label[start] = id;
        while let Some(k) = stack.pop() {
            let (i, j) = (k % nx, k / nx);
            if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                touches_boundary[id as usize] = true;
            }
            let mut visit = |n: usize| {
                if label[n] == u32::MAX && mask[n] == sign {
                    label[n] = id;
                    stack.push(n);
                }
            };
            if i > 0 {
                visit(k - 1);
            }
            if i + 1 < nx {
                visit(k + 1);
            }
            if j > 0 {
                visit(k - nx);
            }
            if j + 1 < ny {
                visit(k + nx);
            }
        }
    }
    let plus_components = n_components[1];
    let holes = component_sign
        .iter()
        .zip(&touches_boundary)
        .filter(|&(&sign, &touches)| !sign && !touches)
        .count();
    plus_components == 1 && holes == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Space;
    use crate::mesh::Mesh;

    fn disk(cx: f64, cy: f64, r: f64) -> impl Fn(f64, f64) -> f64 {
        move |x, y| r - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()
    }

    fn unit_mesh(n: usize) -> (Mesh, Space) {
        let mesh = Mesh::build_uniform([0.0, 1.0, 0.0, 1.0], 1.0 / n as f64, 0).unwrap();
        let space = Space::new(&mesh, 1);
        (mesh, space)
    }

    #[test]
    fn disk_area_and_centroid() {
        let (mesh, space) = unit_mesh(32);
        let phi = space.interpolate(&mesh, disk(0.5, 0.5, 0.25));
        let m = plus_phase_moments(&mesh, &space, &phi, |_, _, _| 0.0);
        let exact = std::f64::consts::PI / 16.0;
        assert!(!m.empty);
        assert!(
            (m.area - exact).abs() < 0.01 * exact,
            "area {} vs {exact}",
            m.area
        );
        assert!((m.x_c - 0.5).abs() < 5e-3 && (m.y_c - 0.5).abs() < 5e-3);
    }

    #[test]
    fn uniform_sample_has_unit_mean() {
        let (mesh, space) = unit_mesh(16);
        let phi = space.interpolate(&mesh, disk(0.5, 0.5, 0.3));
        let m = plus_phase_moments(&mesh, &space, &phi, |_, _, _| 1.0);
        assert!((m.u_c - 1.0).abs() < 1e-12, "mean {}", m.u_c);
    }

    #[test]
    fn half_plane_area_and_centroid_are_exact() {
        let (mesh, space) = unit_mesh(16);
        let phi = space.interpolate(&mesh, |_, y| 0.5 - y);
        let m = plus_phase_moments(&mesh, &space, &phi, |_, x, _| x);
        assert!((m.area - 0.5).abs() < 1e-12, "area {}", m.area);
        assert!((m.y_c - 0.25).abs() < 1e-12, "y_c {}", m.y_c);
        // The sampled field x has mean 1/2 over the lower half plane.
        assert!((m.u_c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vanished_phase_is_flagged_without_nans() {
        let (mesh, space) = unit_mesh(8);
        let phi = vec![-1.0; space.n_nodes];
        let m = plus_phase_moments(&mesh, &space, &phi, |_, _, _| f64::NAN);
        assert!(m.empty);
        assert_eq!((m.area, m.x_c, m.y_c, m.u_c), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn contour_tracks_a_circle() {
        let (mesh, space) = unit_mesh(64);
        let phi = space.interpolate(&mesh, disk(0.5, 0.5, 0.25));
        let contour = zero_contour(&mesh, &space, &phi);
        assert!(!contour.is_empty());
        let d = hausdorff_contour_circle(&contour, [0.5, 0.5], 0.25, 2048);
        assert!(d < 2e-3, "hausdorff {d}");
    }

    #[test]
    fn saddle_cell_yields_two_segments() {
        let (mesh, space) = unit_mesh(1);
        // Positive diagonal, negative anti-diagonal, zero-mean center.
        let mut phi = vec![0.0; space.n_nodes];
        for (n, &(gx, gy)) in space.node_coords.iter().enumerate() {
            let (i, j) = ((gx > 0) as i32, (gy > 0) as i32);
            phi[n] = if i == j { 1.0 } else { -1.0 };
        }
        let contour = zero_contour(&mesh, &space, &phi);
        assert_eq!(contour.len(), 2);
    }

    #[test]
    fn segment_distance_basics() {
        let d = point_segment_distance([0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-15);
        let d = point_segment_distance([2.0, 0.0], [-1.0, 0.0], [1.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-15);
        let d = point_segment_distance([3.0, 4.0], [0.0, 0.0], [0.0, 0.0]);
        assert!((d - 5.0).abs() < 1e-15);
    }

    #[test]
    fn series_shape_counts_turning_points() {
        let shape = series_shape(&[0.0, 1.0, 2.0, 3.0, 2.0, 1.0], 1, 1e-12);
        assert_eq!(shape, SeriesShape { maxima: 1, minima: 0, ends_rising: false });
        let shape = series_shape(&[0.0, 1.0, 2.0, 3.0], 1, 1e-12);
        assert_eq!(shape, SeriesShape { maxima: 0, minima: 0, ends_rising: true });
        let shape = series_shape(&[0.0, 2.0, 1.0, 3.0, 0.0], 1, 1e-12);
        assert_eq!(shape.maxima, 2);
        assert_eq!(shape.minima, 1);
        // Heavy smoothing merges the two bumps into one.
        let bumpy: Vec<f64> = (0..40)
            .map(|i| {
                let t = i as f64 / 39.0;
                (std::f64::consts::PI * t).sin() + 0.05 * (20.0 * t).sin()
            })
            .collect();
        let shape = series_shape(&bumpy, 9, 1e-3);
        assert_eq!(shape.maxima, 1);
    }

    #[test]
    fn topology_probe_distinguishes_disk_ring_and_pair() {
        let (mesh, space) = unit_mesh(32);
        let one = space.interpolate(&mesh, disk(0.5, 0.5, 0.3));
        assert!(plus_region_simply_connected(&mesh, &space, &one, 128, 128));
        let ring = space.interpolate(&mesh, |x, y| {
            0.1 - (((x - 0.5f64).powi(2) + (y - 0.5f64).powi(2)).sqrt() - 0.3).abs()
        });
        assert!(!plus_region_simply_connected(&mesh, &space, &ring, 128, 128));
        let pair = space.interpolate(&mesh, |x, y| {
            disk(0.25, 0.5, 0.12)(x, y).max(disk(0.75, 0.5, 0.12)(x, y))
        });
        assert!(!plus_region_simply_connected(&mesh, &space, &pair, 128, 128));
        let empty = vec![-1.0; space.n_nodes];
        assert!(!plus_region_simply_connected(&mesh, &space, &empty, 64, 64));
    }
}
