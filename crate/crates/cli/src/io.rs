//! Atomic file output: CSV tables, PGM image grids and raw bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use neural_pca::Matrix;

use crate::error::CliError;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Other(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner()
            .map_err(|e| CliError::Other(format!("csv: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn matrix_table(m: &Matrix, prefix: &str) -> Table {
    let names: Vec<String> = (0..m.cols()).map(|j| format!("{prefix}{j}")).collect();
    let mut t = Table {
        header: names,
        rows: Vec::new(),
    };
    for r in 0..m.rows() {
        t.push(m.row(r).iter().map(|v| fmt_f64(*v)).collect());
    }
    t
}

/// Binary PGM (P5) tiling of square images, `per_row` across, with a
/// one-pixel black gutter. Values are clamped to [0, 1) before scaling.
pub fn pgm_grid(images: &Matrix, side: usize, per_row: usize) -> Result<Vec<u8>, CliError> {
    if side * side != images.cols() {
        return Err(CliError::Other(format!(
            "{} pixels per row is not a {side}x{side} image",
            images.cols()
        )));
    }
    let count = images.rows();
    let per_row = per_row.clamp(1, count.max(1));
    let grid_rows = count.div_ceil(per_row).max(1);
    let w = per_row * (side + 1) + 1;
    let h = grid_rows * (side + 1) + 1;
    let mut px = vec![0u8; w * h];
    for i in 0..count {
        let (gr, gc) = (i / per_row, i % per_row);
        let (oy, ox) = (1 + gr * (side + 1), 1 + gc * (side + 1));
        let img = images.row(i);
        for y in 0..side {
            for x in 0..side {
                let v = (img[y * side + x] * 256.0).floor().clamp(0.0, 255.0);
                px[(oy + y) * w + ox + x] = v as u8;
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456789.123] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn pgm_header_and_size() {
        let imgs = Matrix::filled(3, 4, 0.5);
        let bytes = pgm_grid(&imgs, 2, 2).unwrap();
        let header = b"P5\n7 7\n255\n";
        assert!(bytes.starts_with(header));
        assert_eq!(bytes.len(), header.len() + 49);
        assert!(bytes[header.len()..].contains(&128));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let mut t = Table::new(&["x"]);
        t.push(vec!["1".into()]);
        t.write(&p).unwrap();
        t.push(vec!["2".into()]);
        t.write(&p).unwrap();
        assert_eq!(Table::read(&p).unwrap(), t);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
