use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AgeGrid, DeathDensityPanel, DeathDensitySeries, Sex, DEFAULT_RADIX};
use crate::error::{Error, Result};

/// Header names of the five required columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub group: String,
    pub sex: String,
    pub year: String,
    pub age: String,
    pub deaths: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            group: "group".into(),
            sex: "sex".into(),
            year: "year".into(),
            age: "age".into(),
            deaths: "deaths".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub columns: ColumnMapping,
    /// `None` sniffs tab vs comma from the header line.
    pub delimiter: Option<char>,
    pub radix: f64,
    /// Declared group order; groups are sorted by identifier when absent.
    pub group_order: Option<Vec<String>>,
    /// Identifier of the national aggregate, if the input carries one.
    pub national: Option<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            columns: ColumnMapping::default(),
            delimiter: None,
            radix: DEFAULT_RADIX,
            group_order: None,
            national: None,
        }
    }
}

type Cells = BTreeMap<(String, Sex), BTreeMap<(i32, i32), f64>>;

/// Reads a long-format table with one row per (group, sex, year, age) and builds a validated panel.
///
/// Rows are rescaled so every year sums to the radix. Row order in the input
/// does not affect the result.
pub fn load_panel<R: Read>(mut source: R, options: &LoadOptions) -> Result<DeathDensityPanel> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<input>", e))?;
    let delimiter = match options.delimiter {
        Some(c) => c as u8,
        None => {
            let header = text.lines().next().unwrap_or("");
            if header.contains('\t') {
                b'\t'
            } else {
                b','
            }
        }
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c = &options.columns;
    let (ig, is, iy, ia, id) = (col(&c.group)?, col(&c.sex)?, col(&c.year)?, col(&c.age)?, col(&c.deaths)?);

    let mut cells: Cells = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_err = |what: &str, raw: &str| Error::Parse {
            line,
            message: format!("cannot parse {what} from `{raw}`"),
        };
        let group = field(ig).to_string();
        let sex: Sex = field(is).parse().map_err(|_| parse_err("sex", field(is)))?;
        let year: i32 = field(iy).parse().map_err(|_| parse_err("year", field(iy)))?;
        let age: i32 = parse_age(field(ia)).ok_or_else(|| parse_err("age", field(ia)))?;
        let deaths: f64 = field(id).parse().map_err(|_| parse_err("deaths", field(id)))?;
        if !deaths.is_finite() {
            return Err(parse_err("a finite death count", field(id)));
        }
        if deaths < 0.0 {
            return Err(Error::NegativeCount { line, value: deaths });
        }
        let slot = cells.entry((group.clone(), sex)).or_default();
        if slot.insert((year, age), deaths).is_some() {
            return Err(Error::DuplicateCell {
                group,
                sex,
                year,
                age,
                line,
            });
        }
    }
    build_panel(cells, options)
}

/// Accepts plain integers and the open-ended top age written as e.g. `110+`.
fn parse_age(raw: &str) -> Option<i32> {
    raw.trim_end_matches('+').parse().ok()
}

fn build_panel(cells: Cells, options: &LoadOptions) -> Result<DeathDensityPanel> {
    if cells.is_empty() {
        return Err(Error::Invalid("input has no data rows".into()));
    }
    let mut years = BTreeSet::new();
    let mut ages = BTreeSet::new();
    for slot in cells.values() {
        for (y, a) in slot.keys() {
            years.insert(*y);
            ages.insert(*a);
        }
    }
    let years: Vec<i32> = years.into_iter().collect();
    if let Some(w) = years.windows(2).find(|w| w[1] != w[0] + 1) {
        return Err(Error::NonContiguousYears(format!(
            "gap between {} and {}",
            w[0], w[1]
        )));
    }
    let ages: Vec<i32> = ages.into_iter().collect();
    let grid = AgeGrid::from_ages(&ages)?;
    let first_year = years[0];

    let mut series = BTreeMap::new();
    for ((group, sex), slot) in cells {
        let mut m = DMatrix::zeros(years.len(), grid.len());
        for (i, &year) in years.iter().enumerate() {
            for (j, age) in grid.ages().enumerate() {
                match slot.get(&(year, age)) {
                    Some(v) => m[(i, j)] = *v,
                    None => {
                        return Err(Error::MissingCell {
                            group,
                            sex,
                            year,
                            age,
                        })
                    }
                }
            }
        }
        let s = DeathDensitySeries::from_counts(grid, first_year, m, options.radix)?;
        series.insert((group, sex), s);
    }

    let present: BTreeSet<String> = series.keys().map(|(g, _)| g.clone()).collect();
    let groups = match &options.group_order {
        Some(order) => {
            let declared: BTreeSet<&String> = order.iter().collect();
            if let Some(g) = present.iter().find(|g| !declared.contains(g)) {
                return Err(Error::Invalid(format!(
                    "group {g} is not listed in the declared group order"
                )));
            }
            order.iter().filter(|g| present.contains(*g)).cloned().collect()
        }
        None => present.into_iter().collect(),
    };
    DeathDensityPanel::new(groups, options.national.clone(), series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &str, i32, i32, f64)]) -> String {
        let mut s = String::from("group,sex,year,age,deaths\n");
        for (g, x, y, a, d) in rows {
            s.push_str(&format!("{g},{x},{y},{a},{d}\n"));
        }
        s
    }

    fn small_rows() -> Vec<(&'static str, &'static str, i32, i32, f64)> {
        vec![
            ("01", "F", 2000, 0, 20000.0),
            ("01", "F", 2000, 1, 30000.0),
            ("01", "F", 2000, 2, 50000.0),
            ("01", "F", 2001, 0, 10000.0),
            ("01", "F", 2001, 1, 40000.0),
            ("01", "F", 2001, 2, 50000.0),
        ]
    }

    #[test]
    fn identity_ingestion() {
        let p = load_panel(table(&small_rows()).as_bytes(), &LoadOptions::default()).unwrap();
        let s = p.series("01", Sex::Female).unwrap();
        assert_eq!(s.values().row(0).iter().copied().collect::<Vec<_>>(), vec![20000.0, 30000.0, 50000.0]);
        assert_eq!(s.years().first, 2000);
        assert_eq!(s.grid().len(), 3);
    }

    #[test]
    fn rescales_short_rows() {
        let mut rows = small_rows();
        rows[0].4 = 19000.0; // year 2000 sums to 99,000
        let p = load_panel(table(&rows).as_bytes(), &LoadOptions::default()).unwrap();
        let row = p.series("01", Sex::Female).unwrap().values().row(0).into_owned();
        let f = 1e5 / 99000.0;
        assert!((row[0] - 19000.0 * f).abs() < 1e-9);
        assert!((row[2] - 50000.0 * f).abs() < 1e-9);
        assert!((row.sum() - 1e5).abs() < 1e-9);
    }

    #[test]
    fn missing_cell_named() {
        let mut rows = small_rows();
        rows.remove(5);
        let err = load_panel(table(&rows).as_bytes(), &LoadOptions::default()).unwrap_err();
        match err {
            Error::MissingCell { group, sex, year, age } => {
                assert_eq!((group.as_str(), sex, year, age), ("01", Sex::Female, 2001, 2));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn negative_count_rejected_with_line() {
        let mut rows = small_rows();
        rows[3].4 = -1.0;
        let err = load_panel(table(&rows).as_bytes(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NegativeCount { line: 5, .. }), "{err}");
    }

    #[test]
    fn non_contiguous_years_rejected() {
        let rows: Vec<_> = small_rows()
            .into_iter()
            .map(|mut r| {
                if r.2 == 2001 {
                    r.2 = 2003;
                }
                r
            })
            .collect();
        let err = load_panel(table(&rows).as_bytes(), &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonContiguousYears(_)));
    }

    #[test]
    fn tab_delimited_and_custom_columns() {
        let text = "pref\tgender\tyr\tx\tdx\n01\tMale\t2000\t0\t1\n01\tMale\t2000\t1\t1\n01\tMale\t2000\t2+\t2\n";
        let opts = LoadOptions {
            columns: ColumnMapping {
                group: "pref".into(),
                sex: "gender".into(),
                year: "yr".into(),
                age: "x".into(),
                deaths: "dx".into(),
            },
            ..Default::default()
        };
        let p = load_panel(text.as_bytes(), &opts).unwrap();
        let s = p.series("01", Sex::Male).unwrap();
        assert_eq!(s.values()[(0, 2)], 50000.0);
    }

    #[test]
    fn declared_group_order() {
        let mut rows = small_rows();
        rows.extend(small_rows().into_iter().map(|mut r| {
            r.0 = "00";
            r
        }));
        let opts = LoadOptions {
            group_order: Some(vec!["01".into(), "00".into()]),
            national: Some("00".into()),
            ..Default::default()
        };
        let p = load_panel(table(&rows).as_bytes(), &opts).unwrap();
        assert_eq!(p.groups(), &["01".to_string(), "00".to_string()]);
        assert_eq!(p.subnational_groups(), vec!["01".to_string()]);
        let p = load_panel(table(&rows).as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(p.groups(), &["00".to_string(), "01".to_string()]);
    }
}
