//! Matrix files.
//!
//! Binary (`LMAT`): magic `b"LMAT"`, `u32` version 1, `u64` rows, `u64` cols,
//! then `rows * cols` little-endian `f64` in row-major order.
//!
//! Text: first line `# rows cols`, then one comma-separated row per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

pub const LMAT_MAGIC: &[u8; 4] = b"LMAT";
pub const LMAT_VERSION: u32 = 1;
const LMAT_HEADER_LEN: u64 = 4 + 4 + 8 + 8;

pub fn write_lmat<W: Write>(w: &mut W, m: &DenseMatrix) -> io::Result<()> {
    w.write_all(LMAT_MAGIC)?;
    w.write_all(&LMAT_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_lmat_header<R: Read>(r: &mut R) -> Result<(usize, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LMAT_MAGIC {
        return Err(Error::Format("missing LMAT magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != LMAT_VERSION {
        return Err(Error::Format(format!("unsupported LMAT version {version}")));
    }
    let rows = usize::try_from(read_u64(r)?).map_err(|_| Error::Format("row count".into()))?;
    let cols = usize::try_from(read_u64(r)?).map_err(|_| Error::Format("column count".into()))?;
    Ok((rows, cols))
}

fn read_f64_row<R: Read>(r: &mut R, cols: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; cols * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_lmat<R: Read>(r: &mut R) -> Result<DenseMatrix> {
    let (rows, cols) = read_lmat_header(r)?;
    let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 28));
    for _ in 0..rows {
        data.extend(read_f64_row(r, cols)?);
    }
    DenseMatrix::new(rows, cols, data)
}

fn fmt_f64(x: f64) -> String {
    // shortest representation that parses back to the same bits
    format!("{x:?}")
}

pub fn write_csv<W: Write>(w: &mut W, m: &DenseMatrix) -> io::Result<()> {
    writeln!(w, "# {} {}", m.rows(), m.cols())?;
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

fn parse_csv_header(line: &str) -> Result<(usize, usize)> {
    let rest = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("CSV matrix must start with `# rows cols`".into()))?;
    let dims: Vec<usize> = rest
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("bad CSV header: {e}")))?;
    match dims.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Format("CSV header needs exactly `rows cols`".into())),
    }
}

fn parse_csv_row(line: &str, cols: usize, lineno: usize) -> Result<Vec<f64>> {
    let row: Vec<f64> = line
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
    if row.len() != cols {
        return Err(Error::Format(format!(
            "line {lineno}: expected {cols} values, found {}",
            row.len()
        )));
    }
    Ok(row)
}

pub fn read_csv<R: BufRead>(r: R) -> Result<DenseMatrix> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV matrix".into()))??;
    let (rows, cols) = parse_csv_header(&header)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        data.extend(parse_csv_row(&line, cols, i + 2)?);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Format(format!(
            "header says {rows} rows, found {seen}"
        )));
    }
    DenseMatrix::new(rows, cols, data)
}

fn is_lmat(path: &Path) -> Result<bool> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    match f.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == LMAT_MAGIC),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Reads either format, detected from the leading magic bytes.
pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    if is_lmat(path)? {
        read_lmat(&mut BufReader::new(File::open(path)?))
    } else {
        read_csv(BufReader::new(File::open(path)?))
    }
}

/// Writes CSV when the extension is `.csv`, LMAT otherwise.
pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        write_csv(&mut w, m)?;
    } else {
        write_lmat(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

enum RowFormat {
    Lmat,
    Csv,
}

/// Reads a matrix file one row at a time, never holding more than one row.
pub struct MatrixFileRows {
    reader: BufReader<File>,
    format: RowFormat,
    rows: usize,
    cols: usize,
    next: usize,
    lineno: usize,
}

impl MatrixFileRows {
    pub fn open(path: &Path) -> Result<Self> {
        let lmat = is_lmat(path)?;
        let mut reader = BufReader::new(File::open(path)?);
        let (format, (rows, cols), lineno) = if lmat {
            (RowFormat::Lmat, read_lmat_header(&mut reader)?, 0)
        } else {
            let mut header = String::new();
            reader.read_line(&mut header)?;
            (RowFormat::Csv, parse_csv_header(&header)?, 1)
        };
        Ok(Self {
            reader,
            format,
            rows,
            cols,
            next: 0,
            lineno,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn next_row(&mut self) -> Option<Result<Vec<f64>>> {
        if self.next >= self.rows {
            return None;
        }
        self.next += 1;
        let row = match self.format {
            RowFormat::Lmat => read_f64_row(&mut self.reader, self.cols).map_err(Error::from),
            RowFormat::Csv => loop {
                let mut line = String::new();
                self.lineno += 1;
                match self.reader.read_line(&mut line) {
                    Ok(0) => break Err(Error::Format("CSV ended before header row count".into())),
                    Ok(_) if line.trim().is_empty() => continue,
                    Ok(_) => break parse_csv_row(&line, self.cols, self.lineno),
                    Err(e) => break Err(e.into()),
                }
            },
        };
        Some(row.and_then(|r| {
            if let Some(c) = r.iter().position(|x| !x.is_finite()) {
                Err(Error::NonFinite {
                    row: self.next - 1,
                    col: c,
                })
            } else {
                Ok(r)
            }
        }))
    }

    pub fn rewind(&mut self) -> Result<()> {
        self.next = 0;
        match self.format {
            RowFormat::Lmat => {
                self.reader.seek(SeekFrom::Start(LMAT_HEADER_LEN))?;
            }
            RowFormat::Csv => {
                self.reader.seek(SeekFrom::Start(0))?;
                let mut header = String::new();
                self.reader.read_line(&mut header)?;
                self.lineno = 1;
            }
        }
        Ok(())
    }
}
