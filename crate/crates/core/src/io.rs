//! Matrix files (dense CSV and `i j [weight]` edge lists) and report
//! serialisation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{max_asymmetry, AdjacencyMatrix};

const SYMMETRY_TOL: f64 = 1e-12;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    File::create(path).map_err(io_err(path))
}

/// Square matrix from a headerless comma-separated file, one row per line.
pub fn read_dense_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut cols = None;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if cols.is_some_and(|c| c != record.len()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "ragged row".into(),
            });
        }
        cols = Some(record.len());
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("'{field}' is not a number"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows != cols {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: rows,
            msg: format!("matrix is {rows}x{cols}, not square"),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Dense CSV with shortest round-trip float formatting.
pub fn write_dense_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(create(path)?));
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Adjacency matrix from `i j [weight]` lines with 0-based indices.
/// Blank lines and `#` comments are skipped, repeated or reversed pairs
/// are idempotent and a zero weight means no edge. `d` defaults to one more
/// than the largest index seen.
pub fn load_edge_list(path: &Path, d: Option<usize>) -> Result<AdjacencyMatrix> {
    let file = File::open(path).map_err(io_err(path))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut edges = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(io_err(path))?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|f| !f.is_empty())
            .collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(
                line_no,
                format!("expected 'i j [weight]', found '{content}'"),
            ));
        }
        let index = |f: &str| {
            f.parse::<usize>()
                .map_err(|_| parse_err(line_no, format!("'{f}' is not a node index")))
        };
        let (i, j) = (index(fields[0])?, index(fields[1])?);
        if i == j {
            return Err(parse_err(line_no, format!("self-loop on node {i}")));
        }
        let weight = match fields.get(2) {
            Some(f) => f
                .parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("'{f}' is not a weight")))?,
            None => 1.0,
        };
        edges.push((line_no, i, j, weight));
    }
    let d = d.unwrap_or_else(|| edges.iter().map(|e| e.1.max(e.2) + 1).max().unwrap_or(0));
    let mut x = DMatrix::zeros(d, d);
    for (line, i, j, w) in edges {
        for idx in [i, j] {
            if idx >= d {
                return Err(Error::IndexOutOfRange {
                    path: path.to_path_buf(),
                    line,
                    index: idx,
                    d,
                });
            }
        }
        if w != 0.0 {
            x[(i, j)] = 1.0;
            x[(j, i)] = 1.0;
        }
    }
    AdjacencyMatrix::new(x)
}

pub fn write_edge_list(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for i in 0..x.nrows() {
        for j in (i + 1)..x.ncols() {
            if x[(i, j)] != 0.0 {
                writeln!(w, "{i} {j}").map_err(io_err(path))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

/// Whether `path` looks like an edge list rather than a dense CSV.
pub fn is_edge_list(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("txt" | "edges" | "edgelist" | "el")
    )
}

/// Symmetric matrix from either format. Dense files may hold a
/// probability matrix as well as an adjacency matrix.
pub fn load_matrix(path: &Path, d: Option<usize>) -> Result<DMatrix<f64>> {
    let m = if is_edge_list(path) {
        load_edge_list(path, d)?.into_inner()
    } else {
        read_dense_csv(path)?
    };
    if let Some(d) = d {
        if m.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: format!("{d} nodes in {}", path.display()),
                found: m.nrows().to_string(),
            });
        }
    }
    let asym = max_asymmetry(&m);
    if asym > SYMMETRY_TOL * m.amax().max(1.0) {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    Ok((&m + m.transpose()) * 0.5)
}

pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(create(path)?));
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        path: PathBuf::from(path),
        line: e.line(),
        msg: e.to_string(),
    })
}
