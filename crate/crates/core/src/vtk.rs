//! Legacy-VTK ASCII writer for unstructured triangle grids.
//!
//! Emits the version-2.0 header, `UNSTRUCTURED_GRID` dataset and cell type 5
//! (triangle) so stock viewers open the files unmodified. Field snapshots are
//! appended as `POINT_DATA` sections after the grid.

use crate::geom::Vec2;
use crate::mesh::SimplexMesh;
use std::io::{self, Write};

pub enum VtkField<'a> {
    Vectors { name: &'a str, data: &'a [Vec2] },
    Scalars { name: &'a str, data: &'a [f64] },
}

fn fmt(v: f64) -> String {
    format!("{:.10e}", v)
}

/// Write the grid section (header, points, cells, cell types).
pub fn write_mesh<W: Write>(mut w: W, mesh: &SimplexMesh, title: &str) -> io::Result<()> {
    writeln!(w, "# vtk DataFile Version 2.0")?;
    writeln!(w, "{title}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", mesh.n_nodes())?;
    for p in &mesh.node_coords {
        writeln!(w, "{} {} 0.0", fmt(p.x), fmt(p.y))?;
    }
    writeln!(w, "CELLS {} {}", mesh.n_elements(), 4 * mesh.n_elements())?;
    for tri in &mesh.elements {
        writeln!(w, "3 {} {} {}", tri[0], tri[1], tri[2])?;
    }
    writeln!(w, "CELL_TYPES {}", mesh.n_elements())?;
    for _ in 0..mesh.n_elements() {
        writeln!(w, "5")?;
    }
    Ok(())
}

/// Append nodal fields as a POINT_DATA section.
pub fn write_point_data<W: Write>(
    mut w: W,
    mesh: &SimplexMesh,
    fields: &[VtkField],
) -> io::Result<()> {
    if fields.is_empty() {
        return Ok(());
    }
    writeln!(w, "POINT_DATA {}", mesh.n_nodes())?;
    for field in fields {
        match field {
            VtkField::Vectors { name, data } => {
                assert_eq!(data.len(), mesh.n_nodes());
                writeln!(w, "VECTORS {name} double")?;
                for v in *data {
                    writeln!(w, "{} {} 0.0", fmt(v.x), fmt(v.y))?;
                }
            }
            VtkField::Scalars { name, data } => {
                assert_eq!(data.len(), mesh.n_nodes());
                writeln!(w, "SCALARS {name} double")?;
                writeln!(w, "LOOKUP_TABLE default")?;
                for s in *data {
                    writeln!(w, "{}", fmt(*s))?;
                }
            }
        }
    }
    Ok(())
}

/// Complete snapshot: grid plus nodal fields, written to `path`.
pub fn write_snapshot(
    path: &std::path::Path,
    mesh: &SimplexMesh,
    title: &str,
    fields: &[VtkField],
) -> io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_mesh(&mut w, mesh, title)?;
    write_point_data(&mut w, mesh, fields)?;
    w.flush()
}
