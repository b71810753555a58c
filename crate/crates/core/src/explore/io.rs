use std::path::Path;

use crate::error::{Error, Result};
use crate::explore::CellResult;
use crate::report::format_float;

pub const GRID_CSV: &str = "sweep_grid.csv";
pub const SUMMARY_JSON: &str = "sweep_summary.json";

const HEADER: [&str; 4] = ["subunit", "W", "F", "rel_accuracy"];

/// Write `subunit,W,F,rel_accuracy` rows with pinned float text.
pub fn write_grid_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for c in cells {
        append_cell(&mut w, c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn append_cell<W: std::io::Write>(w: &mut csv::Writer<W>, c: &CellResult) -> Result<()> {
    w.write_record([
        c.subunit.clone(),
        c.word_size.to_string(),
        c.frac_bits.to_string(),
        format_float(c.rel_accuracy),
    ])?;
    Ok(())
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<CellResult>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()? != HEADER.as_slice() {
        return Err(Error::Sweep(format!("{}: unexpected header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(GRID_CSV);
        let cells = vec![
            CellResult {
                subunit: "conv".into(),
                word_size: 8,
                frac_bits: 4,
                rel_accuracy: 0.1 + 0.2,
            },
            CellResult {
                subunit: "fc, last".into(),
                word_size: 12,
                frac_bits: 0,
                rel_accuracy: 1.0,
            },
        ];
        write_grid_csv(&path, &cells).unwrap();
        assert_eq!(read_grid_csv(&path).unwrap(), cells);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(
            text.starts_with("subunit,W,F,rel_accuracy\nconv,8,4,3.0000000000000004e-1\n"),
            "{text}"
        );
    }
}
