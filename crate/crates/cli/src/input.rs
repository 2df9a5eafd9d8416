//! Sample matrices from comma-separated files.

use std::path::Path;

use amd_core::{AmdError, Result};
use ndarray::Array2;

/// One sample per row, numeric columns, optional single header row.
///
/// The first record is treated as a header when any of its fields fails to
/// parse as a number.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AmdError::Io(format!("{}: {e}", path.display())))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AmdError::Input(format!("{}: {e}", path.display())))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(AmdError::Input(format!("{}: line {}: non-numeric field", path.display(), i + 1)));
            }
        }
    }

    let Some(width) = rows.first().map(Vec::len) else {
        return Err(AmdError::Input(format!("{}: no data rows", path.display())));
    };
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(AmdError::Dimension(format!(
            "{}: ragged rows (row {} has {} columns, expected {width})",
            path.display(),
            bad + 1,
            rows[bad].len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AmdError::Input(format!("{}: non-finite value", path.display())));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, width), rows.into_iter().flatten().collect())
        .map_err(|e| AmdError::Dimension(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn header_is_detected() {
        let f = file("a,b\n1,2\n3.5,-4e-1\n");
        let m = read_matrix(f.path()).unwrap();
        assert_eq!(m, ndarray::array![[1.0, 2.0], [3.5, -0.4]]);
        let f = file("1,2\n3,4\n");
        assert_eq!(read_matrix(f.path()).unwrap().nrows(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_matrix(file("1,2\n3\n").path()).is_err());
        assert!(read_matrix(file("1,2\nx,4\n").path()).is_err());
        assert!(read_matrix(file("a,b\n").path()).is_err());
        assert!(read_matrix(file("1,nan\n").path()).is_err());
        assert!(read_matrix(Path::new("/nonexistent/file.csv")).is_err());
    }
}
