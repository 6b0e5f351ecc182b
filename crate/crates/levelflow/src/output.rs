//! File outputs: VTK snapshots for visualization and the per-step metrics
//! series as CSV. The CSV round-trips `f64` values exactly so archived runs
//! can be compared bit for bit.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::fem::Space;
use crate::mesh::Mesh;
use crate::metrics::MetricsRow;

/// Format a float with 17 significant digits, enough to reproduce the exact
/// bit pattern on read-back.
pub fn format_full(v: f64) -> String {
    format!("{v:.16e}")
}

pub const METRICS_HEADER: &str = "t,x_c,y_c,u_c,area_plus,div_norm,min_h,n_cells,dt,empty_plus";

pub fn format_metrics_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        format_full(row.t),
        format_full(row.x_c),
        format_full(row.y_c),
        format_full(row.u_c),
        format_full(row.area_plus),
        format_full(row.div_norm),
        format_full(row.min_h),
        row.n_cells,
        format_full(row.dt),
        row.empty_plus as u8,
    )
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", format_metrics_row(row))?;
    }
    w.flush()
}

pub fn read_metrics_csv(path: &Path) -> io::Result<Vec<MetricsRow>> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        other => return Err(bad(format!("unexpected metrics header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(format!("expected 10 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("bad float `{s}`: {e}")));
        rows.push(MetricsRow {
            t: num(f[0])?,
            x_c: num(f[1])?,
            y_c: num(f[2])?,
            u_c: num(f[3])?,
            area_plus: num(f[4])?,
            div_norm: num(f[5])?,
            min_h: num(f[6])?,
            n_cells: f[7].parse().map_err(|e| bad(format!("bad count `{}`: {e}", f[7])))?,
            dt: num(f[8])?,
            empty_plus: match f[9] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("bad flag `{other}`"))),
            },
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// VTK snapshots
// ---------------------------------------------------------------------------

/// Everything one VTK snapshot needs: nodal fields live on the degree-1
/// scalar space, cell fields carry one value per mesh leaf.
pub struct VtkSnapshot<'a> {
    pub mesh: &'a Mesh,
    pub space: &'a Space,
    pub phi: &'a [f64],
    /// Velocity sampled at the scalar nodes.
    pub velocity: &'a [[f64; 2]],
    pub pressure: &'a [f64],
    /// Named per-leaf scalars (stabilization viscosities, blended material
    /// properties, refinement generation).
    pub cell_scalars: &'a [(&'static str, Vec<f64>)],
}

/// Sample an interleaved degree-2 velocity at the nodes of the scalar space
/// (every corner-lattice point carries a velocity node).
pub fn velocity_at_scalar_nodes(sspace: &Space, vspace: &Space, u: &[f64]) -> Vec<[f64; 2]> {
    sspace
        .node_coords
        .iter()
        .map(|&key| {
            let n = vspace
                .node_at(key)
                .expect("scalar node missing from the velocity lattice");
            [u[2 * n], u[2 * n + 1]]
        })
        .collect()
}

/// Write a legacy-format ASCII VTK unstructured-grid snapshot.
pub fn write_vtk(path: &Path, snap: &VtkSnapshot) -> io::Result<()> {
    let mesh = snap.mesh;
    let space = snap.space;
    assert_eq!(space.degree, 1, "snapshots are written on the scalar space");
    assert_eq!(snap.phi.len(), space.n_nodes);
    assert_eq!(snap.velocity.len(), space.n_nodes);
    assert_eq!(snap.pressure.len(), space.n_nodes);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "levelflow snapshot")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", space.n_nodes)?;
    for n in 0..space.n_nodes {
        let [x, y] = space.node_pos(mesh, n);
        writeln!(w, "{:.9e} {:.9e} 0.0", x, y)?;
    }
    let nc = mesh.n_leaves();
    writeln!(w, "CELLS {} {}", nc, 5 * nc)?;
    for ci in 0..nc {
        let n = space.cell_nodes(ci);
        // VTK quads are counterclockwise: bottom-left, bottom-right,
        // top-right, top-left.
        writeln!(w, "4 {} {} {} {}", n[0], n[1], n[3], n[2])?;
    }
    writeln!(w, "CELL_TYPES {nc}")?;
    for _ in 0..nc {
        writeln!(w, "9")?;
    }
    writeln!(w, "POINT_DATA {}", space.n_nodes)?;
    writeln!(w, "SCALARS phi double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in snap.phi {
        writeln!(w, "{v:.9e}")?;
    }
    writeln!(w, "VECTORS velocity double")?;
    for v in snap.velocity {
        writeln!(w, "{:.9e} {:.9e} 0.0", v[0], v[1])?;
    }
    writeln!(w, "SCALARS pressure double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in snap.pressure {
        writeln!(w, "{v:.9e}")?;
    }
    if !snap.cell_scalars.is_empty() {
        writeln!(w, "CELL_DATA {nc}")?;
        for (name, values) in snap.cell_scalars {
            assert_eq!(values.len(), nc, "cell scalar `{name}` has wrong length");
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in values {
                writeln!(w, "{v:.9e}")?;
            }
        }
    }
    w.flush()
}
