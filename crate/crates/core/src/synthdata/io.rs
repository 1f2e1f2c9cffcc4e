//! ASCII `.xyz` / `.normals` readers and writers.
//!
//! One "x y z" triple per line, 9 significant digits, the `.normals` file
//! parallel to the `.xyz` file.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::PointCloud;

fn write_triples(path: &Path, rows: &[Vector3<f64>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in rows {
        writeln!(w, "{:.9e} {:.9e} {:.9e}", v.x, v.y, v.z).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_triples(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut vals = [0.0f64; 3];
        let mut fields = trimmed.split_whitespace();
        for slot in vals.iter_mut() {
            let field = fields.next().ok_or_else(|| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: "expected 3 coordinates".into(),
            })?;
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("invalid number '{}'", field),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: format!("non-finite coordinate '{}'", field),
                });
            }
            *slot = v;
        }
        if fields.next().is_some() {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: "trailing fields after 3 coordinates".into(),
            });
        }
        rows.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(rows)
}

fn xyz_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".xyz");
    PathBuf::from(p)
}

fn normals_path(prefix: &Path) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".normals");
    PathBuf::from(p)
}

/// Writes `<prefix>.xyz` and, when annotated normals are present,
/// `<prefix>.normals`.
pub fn write_cloud(cloud: &PointCloud, path_prefix: &Path) -> Result<()> {
    write_triples(&xyz_path(path_prefix), &cloud.points)?;
    if let Some(normals) = &cloud.gt_normals {
        write_triples(&normals_path(path_prefix), normals)?;
    }
    Ok(())
}

/// Reads `<prefix>.xyz` plus `<prefix>.normals` if it exists.
pub fn read_cloud(path_prefix: &Path) -> Result<PointCloud> {
    let xyz = xyz_path(path_prefix);
    let points = read_triples(&xyz)?;
    if points.is_empty() {
        return Err(Error::EmptyInput("cloud file has no points"));
    }
    let name = path_prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut cloud = PointCloud::new(name, points);
    let npath = normals_path(path_prefix);
    if npath.exists() {
        let normals = read_triples(&npath)?;
        if normals.len() != cloud.points.len() {
            return Err(Error::LengthMismatch {
                what: format!("{} lines vs {} lines", xyz.display(), npath.display()),
                left: cloud.points.len(),
                right: normals.len(),
            });
        }
        cloud.gt_normals = Some(normals);
    }
    Ok(cloud)
}

/// Writes a plain list of unit normals (one triple per line).
pub fn write_normals(normals: &[Vector3<f64>], path: &Path) -> Result<()> {
    write_triples(path, normals)
}

/// Reads a normals file written by [`write_normals`].
pub fn read_normals(path: &Path) -> Result<Vec<Vector3<f64>>> {
    read_triples(path)
}

/// One real per line, aligned with the `.xyz` file (per-point error export).
pub fn write_scalar_column(values: &[f64], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        writeln!(w, "{:.9e}", v).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
