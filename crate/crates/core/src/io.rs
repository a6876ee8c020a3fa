//! Reading and writing embedding artifacts.
//!
//! Binary is the canonical interchange format (exact round-trip); CSV is a
//! convenience importer. Layouts:
//!
//! * Embeddings: magic `EMB1`, `u32` LE sample count N, `u32` LE dimension
//!   D, then N*D `f32` LE values row-major.
//! * Labels (sidecar, path = embedding path + `.lab`): magic `LAB1`,
//!   `u32` LE N, then N `i64` LE values, -1 = unlabeled.
//! * CSV: one sample per line; with labels, the first field is the integer
//!   label and the remaining fields are the coordinates.

use crate::embedding::EmbeddingSet;
use crate::error::CdaError;
use crate::Result;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// On-disk representation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const LAB_MAGIC: &[u8; 4] = b"LAB1";

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Sidecar label path for an embedding path (`x.emb` -> `x.emb.lab`).
pub fn label_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".lab");
    std::path::PathBuf::from(os)
}

/// Loads an embedding set; for `Format::Binary` a sidecar label file is
/// loaded when present, for `Format::Csv` pass `labeled` to declare the
/// leading label column.
pub fn load_embeddings(path: &Path, format: Format, labeled: bool) -> Result<EmbeddingSet> {
    match format {
        Format::Binary => load_binary(path),
        Format::Csv => load_csv(path, labeled),
    }
}

/// Saves an embedding set; labels, when present, go to the sidecar `.lab`
/// file (binary) or the leading CSV column.
pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Binary => save_binary(set, path),
        Format::Csv => save_csv(set, path),
    }
}

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    offset: &mut usize,
    what: &str,
) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        CdaError::format(
            "EMB1",
            path_str(path),
            format!("truncated at byte {}: expected {what}", *offset),
        )
    })?;
    *offset += buf.len();
    Ok(())
}

fn load_binary(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| CdaError::io(path_str(path), e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0usize;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, path, &mut offset, "magic")?;
    if &magic != EMB_MAGIC {
        return Err(CdaError::format(
            "EMB1",
            path_str(path),
            format!("bad magic at byte 0: {magic:?}"),
        ));
    }
    let mut u32buf = [0u8; 4];
    read_exact_at(&mut r, &mut u32buf, path, &mut offset, "sample count")?;
    let n = u32::from_le_bytes(u32buf) as usize;
    read_exact_at(&mut r, &mut u32buf, path, &mut offset, "dimension")?;
    let d = u32::from_le_bytes(u32buf) as usize;
    if d == 0 {
        return Err(CdaError::format(
            "EMB1",
            path_str(path),
            "dimension must be positive (byte 8)",
        ));
    }
    let mut data = vec![0f32; n * d];
    let mut fbuf = [0u8; 4];
    for (i, v) in data.iter_mut().enumerate() {
        read_exact_at(&mut r, &mut fbuf, path, &mut offset, "float value")?;
        let x = f32::from_le_bytes(fbuf);
        if !x.is_finite() {
            return Err(CdaError::format(
                "EMB1",
                path_str(path),
                format!(
                    "non-finite value at byte {}, row {}, column {}",
                    offset - 4,
                    i / d,
                    i % d
                ),
            ));
        }
        *v = x;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)
        .map_err(|e| CdaError::io(path_str(path), e))?
        != 0
    {
        return Err(CdaError::format(
            "EMB1",
            path_str(path),
            format!("trailing bytes after byte {offset}"),
        ));
    }

    let labels = {
        let lp = label_path(path);
        if lp.exists() {
            Some(load_labels(&lp)?)
        } else {
            None
        }
    };
    if let Some(ref l) = labels {
        if l.len() != n {
            return Err(CdaError::format(
                "LAB1",
                path_str(&label_path(path)),
                format!("label count {} does not match sample count {n}", l.len()),
            ));
        }
    }
    EmbeddingSet::from_rows(d, data, labels)
}

fn save_binary(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CdaError::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CdaError::io(path_str(path), e);
    w.write_all(EMB_MAGIC).map_err(io_err)?;
    w.write_all(&(set.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(set.dim() as u32).to_le_bytes())
        .map_err(io_err)?;
    for v in set.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    if let Some(labels) = set.labels() {
        save_labels(labels, &label_path(path))?;
    }
    Ok(())
}

/// Loads a `LAB1` label file.
pub fn load_labels(path: &Path) -> Result<Vec<i64>> {
    let file = File::open(path).map_err(|e| CdaError::io(path_str(path), e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0usize;
    let err = |offset: usize, what: &str| {
        CdaError::format(
            "LAB1",
            path_str(path),
            format!("truncated at byte {offset}: expected {what}"),
        )
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| err(offset, "magic"))?;
    offset += 4;
    if &magic != LAB_MAGIC {
        return Err(CdaError::format(
            "LAB1",
            path_str(path),
            format!("bad magic at byte 0: {magic:?}"),
        ));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| err(offset, "count"))?;
    offset += 4;
    let n = u32::from_le_bytes(u32buf) as usize;
    let mut labels = Vec::with_capacity(n);
    let mut i64buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut i64buf)
            .map_err(|_| err(offset, "label"))?;
        offset += 8;
        let v = i64::from_le_bytes(i64buf);
        if v < -1 {
            return Err(CdaError::format(
                "LAB1",
                path_str(path),
                format!("label {v} at byte {} is below the -1 sentinel", offset - 8),
            ));
        }
        labels.push(v);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)
        .map_err(|e| CdaError::io(path_str(path), e))?
        != 0
    {
        return Err(CdaError::format(
            "LAB1",
            path_str(path),
            format!("trailing bytes after byte {offset}"),
        ));
    }
    Ok(labels)
}

/// Writes a `LAB1` label file.
pub fn save_labels(labels: &[i64], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CdaError::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CdaError::io(path_str(path), e);
    w.write_all(LAB_MAGIC).map_err(io_err)?;
    w.write_all(&(labels.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for &l in labels {
        w.write_all(&l.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn load_csv(path: &Path, labeled: bool) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| CdaError::io(path_str(path), e))?;
    let mut content = String::new();
    BufReader::new(file)
        .read_to_string(&mut content)
        .map_err(|e| CdaError::io(path_str(path), e))?;
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        if labeled {
            let f = fields.next().unwrap_or("");
            let lab: i64 = f.parse().map_err(|_| {
                CdaError::format(
                    "CSV",
                    path_str(path),
                    format!("bad label {f:?} at line {}", lineno + 1),
                )
            })?;
            if lab < -1 {
                return Err(CdaError::format(
                    "CSV",
                    path_str(path),
                    format!(
                        "label {lab} at line {} is below the -1 sentinel",
                        lineno + 1
                    ),
                ));
            }
            labels.push(lab);
        }
        let mut row = Vec::new();
        for f in fields {
            let v: f32 = f.parse().map_err(|_| {
                CdaError::format(
                    "CSV",
                    path_str(path),
                    format!("bad float {f:?} at line {}", lineno + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(CdaError::format(
                    "CSV",
                    path_str(path),
                    format!("non-finite value at line {}", lineno + 1),
                ));
            }
            row.push(v);
        }
        match dim {
            None => {
                if row.is_empty() {
                    return Err(CdaError::format(
                        "CSV",
                        path_str(path),
                        format!("no coordinates at line {}", lineno + 1),
                    ));
                }
                dim = Some(row.len());
            }
            Some(d) if d != row.len() => {
                return Err(CdaError::format(
                    "CSV",
                    path_str(path),
                    format!(
                        "row length mismatch at line {}: expected {d} fields, found {}",
                        lineno + 1,
                        row.len()
                    ),
                ));
            }
            _ => {}
        }
        data.extend_from_slice(&row);
    }
    let dim = dim.ok_or_else(|| CdaError::format("CSV", path_str(path), "empty file"))?;
    EmbeddingSet::from_rows(dim, data, if labeled { Some(labels) } else { None })
}

fn save_csv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CdaError::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CdaError::io(path_str(path), e);
    for (i, row) in set.rows().enumerate() {
        let mut line = String::new();
        if let Some(labels) = set.labels() {
            line.push_str(&labels[i].to_string());
            line.push(',');
        }
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.8e}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
