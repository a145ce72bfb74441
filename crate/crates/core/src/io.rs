//! Binary matrix format and dataset persistence.
//!
//! A matrix block is two little-endian `u64` values `(rows, cols)` followed by
//! `rows * cols` little-endian IEEE-754 `f64` values in row-major order.
//! A dataset file is one JSON header line (config plus the SHA-256 of the
//! subspace block) followed by the subspace block and then, for each task, an
//! `(n + 1) x (d + 1)` block of `(x, y)` rows (query last) and a `1 x d` block
//! holding the task mean.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::taskgen::{Example, Label, MetaConfig, MetaTrainSet, Prompt, Subspace};

pub fn write_matrix<W: Write>(out: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn matrix_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * m.len());
    write_matrix(&mut buf, m).expect("writing to a Vec cannot fail");
    buf
}

fn read_u64<R: Read>(input: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_matrix<R: Read>(input: &mut R) -> Result<DMatrix<f64>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated matrix block: {e}"));
    let rows = read_u64(input).map_err(fmt)? as usize;
    let cols = read_u64(input).map_err(fmt)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= (1 << 32))
        .ok_or_else(|| Error::Format(format!("implausible matrix shape {rows}x{cols}")))?;
    let mut raw = vec![0u8; 8 * len];
    input.read_exact(&mut raw).map_err(fmt)?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

pub fn write_matrix_file(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, matrix_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_file(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(&mut BufReader::new(file))
}

/// Hex SHA-256 of the subspace matrix block.
pub fn subspace_checksum(subspace: &Subspace) -> String {
    hex::encode(Sha256::digest(matrix_bytes(subspace.p())))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    config: MetaConfig,
    subspace_checksum: String,
}

pub fn write_dataset<W: Write>(out: &mut W, train: &MetaTrainSet) -> Result<()> {
    let header = DatasetHeader {
        config: train.config().clone(),
        subspace_checksum: subspace_checksum(train.subspace()),
    };
    let io = |e| Error::Format(format!("write failed: {e}"));
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    write_matrix(out, train.subspace().p()).map_err(io)?;
    let d = train.config().d;
    for prompt in train.prompts() {
        let n = prompt.context().len();
        let mut rows = DMatrix::zeros(n + 1, d + 1);
        let all = prompt
            .context()
            .iter()
            .map(|ex| (&ex.x, ex.y))
            .chain(std::iter::once((prompt.query_x(), prompt.query_label())));
        for (i, (x, y)) in all.enumerate() {
            rows.view_mut((i, 0), (1, d)).copy_from(&x.transpose());
            rows[(i, d)] = y.as_f64();
        }
        write_matrix(out, &rows).map_err(io)?;
        write_matrix(out, &DMatrix::from_row_slice(1, d, prompt.mu().as_slice())).map_err(io)?;
    }
    Ok(())
}

pub fn write_dataset_file(path: &Path, train: &MetaTrainSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(&mut out, train)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset<R: BufRead>(input: &mut R) -> Result<MetaTrainSet> {
    let mut line = String::new();
    input
        .read_line(&mut line)
        .map_err(|e| Error::Format(format!("missing header: {e}")))?;
    let header: DatasetHeader = serde_json::from_str(line.trim_end())?;
    header.config.validate()?;
    let p = read_matrix(input)?;
    let subspace = Subspace::new(p)?;
    if subspace_checksum(&subspace) != header.subspace_checksum {
        return Err(Error::Format("subspace checksum mismatch".into()));
    }
    let d = header.config.d;
    let mut prompts = Vec::with_capacity(header.config.b);
    for _ in 0..header.config.b {
        let rows = read_matrix(input)?;
        let mu = read_matrix(input)?;
        if rows.ncols() != d + 1 || rows.nrows() < 2 || mu.shape() != (1, d) {
            return Err(Error::Format("task block has wrong shape".into()));
        }
        let mut examples = (0..rows.nrows())
            .map(|i| {
                let x = DVector::from_iterator(d, rows.row(i).iter().take(d).copied());
                Label::try_from_f64(rows[(i, d)]).map(|y| Example { x, y })
            })
            .collect::<Result<Vec<_>>>()?;
        let query = examples.pop().expect("at least two rows");
        let mu = DVector::from_iterator(d, mu.iter().copied());
        prompts.push(Prompt::new(examples, query.x, query.y, mu)?);
    }
    MetaTrainSet::new(prompts, subspace, header.config)
}

pub fn read_dataset_file(path: &Path) -> Result<MetaTrainSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut BufReader::new(file))
}
