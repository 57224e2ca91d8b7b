use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AgeGrid, DeathDensityPanel, DeathDensitySeries, Sex, YearRange};
use crate::error::{Error, Result};

/// JSON manifest of the canonical on-disk panel layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelManifest {
    pub grid: AgeGrid,
    pub years: YearRange,
    pub radix: f64,
    pub groups: Vec<String>,
    pub national: Option<String>,
    pub series: Vec<SeriesEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub group: String,
    pub sex: Sex,
    pub file: String,
}

/// Writes `manifest.json` plus one `<group>_<sex>.csv` matrix per series.
pub fn write_panel_dir(panel: &DeathDensityPanel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for ((group, sex), series) in panel.iter() {
        let file = format!("{group}_{sex}.csv");
        write_matrix_csv(
            &dir.join(&file),
            series.years(),
            panel.grid(),
            series.values(),
        )?;
        entries.push(SeriesEntry {
            group: group.clone(),
            sex: *sex,
            file,
        });
    }
    let manifest = PanelManifest {
        grid: panel.grid(),
        years: panel.years(),
        radix: panel.radix(),
        groups: panel.groups().to_vec(),
        national: panel.national().map(str::to_string),
        series: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_panel_dir(dir: &Path) -> Result<DeathDensityPanel> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PanelManifest = serde_json::from_str(&text)?;
    let mut series = BTreeMap::new();
    for entry in &manifest.series {
        let values = read_matrix_csv(&dir.join(&entry.file), manifest.grid.len())?;
        let s = DeathDensitySeries::new(manifest.grid, manifest.years.first, values, manifest.radix)?;
        series.insert((entry.group.clone(), entry.sex), s);
    }
    DeathDensityPanel::new(manifest.groups, manifest.national, series)
}

/// Header `year,<age...>`, one row per year.
pub(crate) fn write_matrix_csv(
    path: &Path,
    years: YearRange,
    grid: AgeGrid,
    values: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["year".to_string()];
    header.extend(grid.ages().map(|a| a.to_string()));
    w.write_record(&header)?;
    for (i, year) in years.years().enumerate() {
        let mut rec = vec![year.to_string()];
        rec.extend(values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_matrix_csv(path: &Path, ncols: usize) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut data = Vec::new();
    let mut nrows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != ncols + 1 {
            return Err(Error::Shape(format!(
                "{}: expected {} columns, found {}",
                path.display(),
                ncols + 1,
                rec.len()
            )));
        }
        for field in rec.iter().skip(1) {
            data.push(field.parse::<f64>().map_err(|e| Error::Parse {
                line: nrows as u64 + 2,
                message: format!("{}: {e}", path.display()),
            })?);
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_round_trip() {
        let grid = AgeGrid::new(0, 3).unwrap();
        let a = DMatrix::from_row_slice(2, 3, &[1e4, 2e4, 7e4, 1.0 / 3.0 * 1e5, 1.0 / 3.0 * 1e5, 1e5 - 2.0 / 3.0 * 1e5]);
        let mut series = BTreeMap::new();
        series.insert(("01".to_string(), Sex::Female), DeathDensitySeries::new(grid, 1990, a.clone(), 1e5).unwrap());
        series.insert(("01".to_string(), Sex::Male), DeathDensitySeries::new(grid, 1990, a, 1e5).unwrap());
        let panel = DeathDensityPanel::new(vec!["01".into()], None, series).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_panel_dir(&panel, dir.path()).unwrap();
        assert!(dir.path().join("01_F.csv").exists());
        let back = read_panel_dir(dir.path()).unwrap();
        assert_eq!(back, panel);
    }
}
