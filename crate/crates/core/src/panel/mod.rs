//! Panels of life-table death counts indexed by group, sex, year and age.

mod load;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use load::{load_panel, ColumnMapping, LoadOptions};
pub use store::{read_panel_dir, write_panel_dir, PanelManifest};

/// Life-table cohort size.
pub const DEFAULT_RADIX: f64 = 1e5;

/// Relative deviation from the radix above which rescaling is logged.
pub const RESCALE_WARN_TOLERANCE: f64 = 5e-3;

/// Relative tolerance on row sums for a validated series.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

impl Sex {
    pub const BOTH: [Sex; 2] = [Sex::Female, Sex::Male];

    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" | "women" => Ok(Sex::Female),
            "m" | "male" | "men" => Ok(Sex::Male),
            other => Err(Error::Invalid(format!("unknown sex `{other}`"))),
        }
    }
}

/// Contiguous single-year age grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeGrid {
    first: i32,
    len: usize,
}

impl AgeGrid {
    pub fn new(first: i32, len: usize) -> Result<Self> {
        if len < 3 {
            return Err(Error::Invalid(format!(
                "age grid needs at least 3 ages, got {len}"
            )));
        }
        Ok(Self { first, len })
    }

    /// Builds a grid from an arbitrary list of ages, which must be contiguous once sorted.
    pub fn from_ages(ages: &[i32]) -> Result<Self> {
        let mut sorted = ages.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let first = *sorted
            .first()
            .ok_or_else(|| Error::Invalid("no ages".into()))?;
        if let Some(w) = sorted.windows(2).find(|w| w[1] != w[0] + 1) {
            return Err(Error::NonContiguousAges(format!(
                "gap between {} and {}",
                w[0], w[1]
            )));
        }
        Self::new(first, sorted.len())
    }

    pub fn first(&self) -> i32 {
        self.first
    }

    pub fn last(&self) -> i32 {
        self.first + self.len as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ages(&self) -> impl Iterator<Item = i32> + '_ {
        self.first..=self.last()
    }

    pub fn index_of(&self, age: i32) -> Option<usize> {
        (age >= self.first && age <= self.last()).then(|| (age - self.first) as usize)
    }
}

/// Contiguous calendar-year range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub first: i32,
    pub len: usize,
}

impl YearRange {
    pub fn new(first: i32, len: usize) -> Self {
        Self { first, len }
    }

    pub fn last(&self) -> i32 {
        self.first + self.len as i32 - 1
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.first..=self.last()
    }

    pub fn index_of(&self, year: i32) -> Option<usize> {
        (year >= self.first && year <= self.last()).then(|| (year - self.first) as usize)
    }
}

/// Death counts for one (group, sex): a years × ages matrix whose rows sum to the radix.
#[derive(Debug, Clone, PartialEq)]
pub struct DeathDensitySeries {
    grid: AgeGrid,
    years: YearRange,
    values: DMatrix<f64>,
    radix: f64,
}

impl DeathDensitySeries {
    /// Validates an already-normalised matrix.
    pub fn new(grid: AgeGrid, first_year: i32, values: DMatrix<f64>, radix: f64) -> Result<Self> {
        let series = Self::unchecked(grid, first_year, values, radix)?;
        for (i, row) in series.values.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                return Err(Error::ZeroRow {
                    year: first_year + i as i32,
                });
            }
            if ((sum - radix) / radix).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "row for year {} sums to {sum}, expected radix {radix}",
                    first_year + i as i32
                )));
            }
        }
        Ok(series)
    }

    /// Rescales every row to sum to the radix.
    pub fn from_counts(
        grid: AgeGrid,
        first_year: i32,
        mut values: DMatrix<f64>,
        radix: f64,
    ) -> Result<Self> {
        for (i, mut row) in values.row_iter_mut().enumerate() {
            let year = first_year + i as i32;
            let sum: f64 = row.iter().sum();
            if sum.is_nan() || sum <= 0.0 {
                return Err(Error::ZeroRow { year });
            }
            let rel = ((sum - radix) / radix).abs();
            if rel > RESCALE_WARN_TOLERANCE {
                log::warn!("year {year}: counts sum to {sum}, rescaling to radix {radix}");
            }
            if sum != radix {
                row *= radix / sum;
            }
        }
        Self::unchecked(grid, first_year, values, radix)
    }

    fn unchecked(grid: AgeGrid, first_year: i32, values: DMatrix<f64>, radix: f64) -> Result<Self> {
        if !(radix > 0.0 && radix.is_finite()) {
            return Err(Error::Invalid(format!("radix must be positive, got {radix}")));
        }
        if values.ncols() != grid.len() {
            return Err(Error::Shape(format!(
                "{} columns for an age grid of {}",
                values.ncols(),
                grid.len()
            )));
        }
        if values.nrows() == 0 {
            return Err(Error::Invalid("series has no years".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("death counts"));
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Invalid(format!("negative death count {v}")));
        }
        Ok(Self {
            grid,
            years: YearRange::new(first_year, values.nrows()),
            values,
            radix,
        })
    }

    pub fn grid(&self) -> AgeGrid {
        self.grid
    }

    pub fn years(&self) -> YearRange {
        self.years
    }

    pub fn radix(&self) -> f64 {
        self.radix
    }

    /// Years × ages counts.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_years(&self) -> usize {
        self.values.nrows()
    }

    /// Restricts to the years `first..=last`.
    pub fn slice_years(&self, first: i32, last: i32) -> Result<Self> {
        let (Some(a), Some(b)) = (self.years.index_of(first), self.years.index_of(last)) else {
            return Err(Error::Invalid(format!(
                "years {first}..={last} outside {}..={}",
                self.years.first,
                self.years.last()
            )));
        };
        if b < a {
            return Err(Error::Invalid(format!("empty year range {first}..={last}")));
        }
        Ok(Self {
            grid: self.grid,
            years: YearRange::new(first, b - a + 1),
            values: self.values.rows(a, b - a + 1).into_owned(),
            radix: self.radix,
        })
    }

    /// Probabilities over ages: each row divided by the radix.
    pub fn normalize_to_probability(&self) -> DMatrix<f64> {
        normalize_to_probability(&self.values, self.radix)
    }
}

/// Divides every entry by the radix.
pub fn normalize_to_probability(values: &DMatrix<f64>, radix: f64) -> DMatrix<f64> {
    values / radix
}

/// A full panel: every (group, sex) series shares one grid and year range.
#[derive(Debug, Clone, PartialEq)]
pub struct DeathDensityPanel {
    groups: Vec<String>,
    national: Option<String>,
    grid: AgeGrid,
    years: YearRange,
    radix: f64,
    series: BTreeMap<(String, Sex), DeathDensitySeries>,
}

impl DeathDensityPanel {
    /// Assembles a panel; `groups` fixes the group order and must cover every series key.
    pub fn new(
        groups: Vec<String>,
        national: Option<String>,
        series: BTreeMap<(String, Sex), DeathDensitySeries>,
    ) -> Result<Self> {
        let first = series
            .values()
            .next()
            .ok_or_else(|| Error::Invalid("panel has no series".into()))?;
        let (grid, years, radix) = (first.grid, first.years, first.radix);
        for ((g, s), ser) in &series {
            if ser.grid != grid || ser.years != years || ser.radix != radix {
                return Err(Error::Shape(format!(
                    "series ({g}, {s}) does not share the panel's grid, years and radix"
                )));
            }
            if !groups.contains(g) {
                return Err(Error::Invalid(format!("group {g} missing from group order")));
            }
        }
        for g in &groups {
            if !Sex::BOTH.iter().any(|s| series.contains_key(&(g.clone(), *s))) {
                return Err(Error::Invalid(format!("group {g} has no series")));
            }
        }
        if let Some(n) = &national {
            if !groups.contains(n) {
                return Err(Error::Invalid(format!("national group {n} not in panel")));
            }
        }
        Ok(Self {
            groups,
            national,
            grid,
            years,
            radix,
            series,
        })
    }

    /// All groups in declared order, national included.
    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    /// Groups that are modelled: everything except the national aggregate.
    pub fn subnational_groups(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|g| Some(*g) != self.national.as_ref())
            .cloned()
            .collect()
    }

    pub fn national(&self) -> Option<&str> {
        self.national.as_deref()
    }

    pub fn grid(&self) -> AgeGrid {
        self.grid
    }

    pub fn years(&self) -> YearRange {
        self.years
    }

    pub fn radix(&self) -> f64 {
        self.radix
    }

    pub fn sexes(&self) -> Vec<Sex> {
        Sex::BOTH
            .into_iter()
            .filter(|s| self.series.keys().any(|(_, k)| k == s))
            .collect()
    }

    pub fn series(&self, group: &str, sex: Sex) -> Option<&DeathDensitySeries> {
        self.series.get(&(group.to_string(), sex))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, Sex), &DeathDensitySeries)> {
        self.series.iter()
    }

    /// Restricts every series to `first..=last`.
    pub fn slice_years(&self, first: i32, last: i32) -> Result<Self> {
        let series = self
            .series
            .iter()
            .map(|(k, s)| Ok((k.clone(), s.slice_years(first, last)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::new(self.groups.clone(), self.national.clone(), series)
    }

    /// Errors naming every missing (group, sex) cell among the modelled groups.
    pub fn require_complete(&self) -> Result<()> {
        let missing: Vec<String> = self
            .subnational_groups()
            .iter()
            .flat_map(|g| Sex::BOTH.iter().map(move |s| (g.clone(), *s)))
            .filter(|k| !self.series.contains_key(k))
            .map(|(g, s)| format!("({g}, {s})"))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompletePanel(format!("missing {}", missing.join(", "))))
        }
    }
}

/// Disjoint, contiguous train / validation / test year blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub train: YearRange,
    pub validation: YearRange,
    pub test: YearRange,
}

/// Splits `years` into three contiguous blocks with sizes rounded from cumulative proportions.
pub fn split_years(years: YearRange, proportions: [f64; 3]) -> Result<SampleSplit> {
    if proportions.iter().any(|p| p.is_nan() || *p <= 0.0) {
        return Err(Error::Split("proportions must be positive".into()));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("proportions sum to {total}, not 1")));
    }
    let n = years.len as f64;
    let train_end = (n * proportions[0]).round() as usize;
    let val_end = (n * (proportions[0] + proportions[1])).round() as usize;
    let (n_train, n_val, n_test) = (train_end, val_end.saturating_sub(train_end), years.len.saturating_sub(val_end));
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Split(format!(
            "{} years cannot be split into three nonempty sets ({n_train}/{n_val}/{n_test})",
            years.len
        )));
    }
    Ok(SampleSplit {
        train: YearRange::new(years.first, n_train),
        validation: YearRange::new(years.first + n_train as i32, n_val),
        test: YearRange::new(years.first + val_end as i32, n_test),
    })
}
