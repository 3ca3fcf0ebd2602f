//! Country time series: raw cumulative counts to normalized `I`/`R`
//! observations with chronological splits.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use chrono::NaiveDate;
use episurr_core::obs::{train_count, ObservationSeries, ObservedSeries, Split};
use serde::{Deserialize, Serialize};

/// Fraction of the trained time range covered by the pre-lockdown window.
pub const WINDOW_FILL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRow {
    pub date: NaiveDate,
    pub confirmed: u64,
    pub recovered: u64,
    pub deaths: u64,
}

/// Cumulative counts per day, as exported with header
/// `date,confirmed,recovered,deaths`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawSeries {
    pub rows: Vec<RawRow>,
}

impl RawSeries {
    pub fn read_csv(path: &Path) -> Result<RawSeries> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let rows = r
            .deserialize()
            .enumerate()
            .map(|(i, rec)| rec.with_context(|| format!("{} line {}", path.display(), i + 2)))
            .collect::<Result<Vec<RawRow>>>()?;
        let raw = RawSeries { rows };
        raw.check_dates()?;
        Ok(raw)
    }

    fn check_dates(&self) -> Result<()> {
        ensure!(!self.rows.is_empty(), "raw series is empty");
        for w in self.rows.windows(2) {
            ensure!(w[1].date > w[0].date, "dates must be strictly increasing: {} follows {}", w[1].date, w[0].date);
        }
        Ok(())
    }

    /// Rows where a cumulative count drops, as `(date, column)`. These are
    /// reported, never corrected.
    pub fn monotonicity_violations(&self) -> Vec<(NaiveDate, &'static str)> {
        let mut out = Vec::new();
        for w in self.rows.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if b.confirmed < a.confirmed {
                out.push((b.date, "confirmed"));
            }
            if b.recovered < a.recovered {
                out.push((b.date, "recovered"));
            }
            if b.deaths < a.deaths {
                out.push((b.date, "deaths"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryConfig {
    pub name: String,
    pub population: f64,
    pub lockdown_end: NaiveDate,
    #[serde(default = "default_undercount")]
    pub undercount_factor: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Day mapped to `t = 0`; the first data row when absent.
    #[serde(default)]
    pub series_start: Option<NaiveDate>,
    /// Days per model time unit; when absent, chosen so the pre-lockdown
    /// window fills `WINDOW_FILL` of the trained range.
    #[serde(default)]
    pub time_unit_days: Option<f64>,
}

fn default_undercount() -> f64 {
    10.0
}

fn default_train_fraction() -> f64 {
    0.8
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid preset date")
}

impl CountryConfig {
    fn preset(name: &str, population: f64, lockdown_end: NaiveDate) -> Self {
        CountryConfig {
            name: name.into(),
            population,
            lockdown_end,
            undercount_factor: default_undercount(),
            train_fraction: default_train_fraction(),
            series_start: None,
            time_unit_days: None,
        }
    }

    pub fn switzerland() -> Self {
        Self::preset("Switzerland", 8.5e6, date(2020, 4, 27))
    }

    pub fn spain() -> Self {
        Self::preset("Spain", 4.7e7, date(2020, 5, 4))
    }

    pub fn italy() -> Self {
        Self::preset("Italy", 6e7, date(2020, 5, 4))
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "switzerland" | "ch" => Some(Self::switzerland()),
            "spain" | "es" => Some(Self::spain()),
            "italy" | "it" => Some(Self::italy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.population > 0.0, "{}: population must be positive", self.name);
        ensure!(self.undercount_factor > 0.0, "{}: undercount factor must be positive", self.name);
        ensure!(
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            "{}: train fraction must lie in (0, 1), got {}",
            self.name,
            self.train_fraction
        );
        if let Some(d) = self.time_unit_days {
            ensure!(d > 0.0, "{}: time_unit_days must be positive", self.name);
        }
        Ok(())
    }
}

/// Normalized `I` and `R` (recovered plus deaths), before any split.
pub fn build_compartments(raw: &RawSeries, cfg: &CountryConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let negative: Vec<String> = raw
        .rows
        .iter()
        .filter(|r| r.recovered + r.deaths > r.confirmed)
        .map(|r| r.date.to_string())
        .collect();
    if !negative.is_empty() {
        bail!("negative active infections (recovered + deaths > confirmed) on {}", negative.join(", "));
    }
    let k = cfg.undercount_factor / cfg.population;
    let mut infected = Vec::with_capacity(raw.rows.len());
    let mut removed = Vec::with_capacity(raw.rows.len());
    for r in &raw.rows {
        let i = k * (r.confirmed - r.recovered - r.deaths) as f64;
        let rem = k * (r.recovered + r.deaths) as f64;
        if i + rem > 1.0 {
            bail!(
                "{}: normalized infected + removed is {} on {} (check population and undercount factor)",
                cfg.name,
                i + rem,
                r.date
            );
        }
        infected.push(i);
        removed.push(rem);
    }
    Ok((infected, removed))
}

/// Model-time mapping `t = (date - start) / days_per_unit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub start: NaiveDate,
    pub days_per_unit: f64,
}

impl TimeMap {
    /// Resolves the mapping from the config, filling defaults from the data
    /// and the surrogate's trained horizon `t_max`.
    pub fn resolve(raw: &RawSeries, cfg: &CountryConfig, t_max: f64) -> Result<TimeMap> {
        let first = raw.rows.first().context("raw series is empty")?.date;
        let start = cfg.series_start.unwrap_or(first);
        ensure!(start <= first, "series_start {start} is after the first data date {first}");
        let days_per_unit = match cfg.time_unit_days {
            Some(d) => d,
            None => {
                let span = (cfg.lockdown_end - start).num_days();
                ensure!(span > 0, "lockdown end {} is not after the series start {start}", cfg.lockdown_end);
                span as f64 / (WINDOW_FILL * t_max)
            }
        };
        Ok(TimeMap { start, days_per_unit })
    }

    pub fn to_model(&self, date: NaiveDate) -> Result<f64> {
        let days = (date - self.start).num_days();
        ensure!(days >= 0, "date {date} precedes the series start {}", self.start);
        Ok(days as f64 / self.days_per_unit)
    }

    pub fn to_days(&self, t: f64) -> f64 {
        t * self.days_per_unit
    }

    /// Converts a rate per model time unit to a rate per day.
    pub fn per_day(&self, rate: f64) -> f64 {
        rate / self.days_per_unit
    }
}

/// Tags pre-lockdown points train/validation chronologically and the rest holdout.
pub fn split_tags(dates: &[NaiveDate], cfg: &CountryConfig) -> Result<Vec<Split>> {
    let pre = dates.iter().filter(|d| **d <= cfg.lockdown_end).count();
    ensure!(pre >= 5, "{}: need at least 5 points up to the lockdown end {}, found {pre}", cfg.name, cfg.lockdown_end);
    let k = train_count(pre, cfg.train_fraction);
    Ok(dates
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if *d > cfg.lockdown_end {
                Split::Holdout
            } else if i < k {
                Split::Train
            } else {
                Split::Validation
            }
        })
        .collect())
}

/// Everything the fitter needs from one country file.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub obs: ObservationSeries,
    pub dates: Vec<NaiveDate>,
    pub time_map: TimeMap,
    pub warnings: Vec<String>,
}

pub fn prepare(raw: &RawSeries, cfg: &CountryConfig, t_max: f64) -> Result<Prepared> {
    raw.check_dates()?;
    let (infected, removed) = build_compartments(raw, cfg)?;
    let time_map = TimeMap::resolve(raw, cfg, t_max)?;
    let dates: Vec<NaiveDate> = raw.rows.iter().map(|r| r.date).collect();
    let times = dates.iter().map(|d| time_map.to_model(*d)).collect::<Result<Vec<_>>>()?;
    let split = split_tags(&dates, cfg)?;
    let warnings = raw
        .monotonicity_violations()
        .into_iter()
        .map(|(d, col)| format!("cumulative {col} decreases on {d}"))
        .collect();
    Ok(Prepared {
        obs: ObservationSeries {
            times,
            series: vec![
                ObservedSeries { name: "I".into(), values: infected },
                ObservedSeries { name: "R".into(), values: removed },
            ],
            split,
        },
        dates,
        time_map,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(d: u32, c: u64, r: u64, x: u64) -> RawRow {
        RawRow { date: date(2020, 3, d), confirmed: c, recovered: r, deaths: x }
    }

    fn cfg(n: f64, factor: f64) -> CountryConfig {
        CountryConfig { undercount_factor: factor, ..CountryConfig::preset("Test", n, date(2020, 3, 20)) }
    }

    #[test]
    fn undercount_arithmetic() {
        let raw = RawSeries { rows: vec![row(1, 2000, 800, 200)] };
        let (i, r) = build_compartments(&raw, &cfg(1e7, 10.0)).unwrap();
        assert!((i[0] - 1e-3).abs() < 1e-18);
        assert!((r[0] - 1e-3).abs() < 1e-18);
        let raw = RawSeries { rows: vec![row(1, 0, 0, 0), row(2, 50, 0, 0)] };
        let (i, r) = build_compartments(&raw, &cfg(1e5, 1.0)).unwrap();
        assert_eq!(r, [0.0, 0.0]);
        assert_eq!(i, [0.0, 5e-4]);
    }

    #[test]
    fn overflow_and_negative_active_are_errors() {
        let raw = RawSeries { rows: vec![row(1, 200, 0, 0)] };
        assert!(build_compartments(&raw, &cfg(1000.0, 10.0)).is_err());
        let raw = RawSeries { rows: vec![row(1, 10, 8, 3)] };
        let err = build_compartments(&raw, &cfg(1e6, 10.0)).unwrap_err().to_string();
        assert!(err.contains("2020-03-01"), "{err}");
    }

    #[test]
    fn time_mapping() {
        let raw = RawSeries { rows: (1..=30).map(|d| row(d, 0, 0, 0)).collect() };
        let mut c = cfg(1e6, 10.0);
        c.time_unit_days = Some(1.0);
        let m = TimeMap::resolve(&raw, &c, 20.0).unwrap();
        assert_eq!(m.to_model(date(2020, 3, 1)).unwrap(), 0.0);
        assert_eq!(m.to_model(date(2020, 3, 21)).unwrap(), 20.0);
        c.time_unit_days = Some(3.0);
        let m = TimeMap::resolve(&raw, &c, 20.0).unwrap();
        assert_eq!(m.to_model(date(2020, 3, 1) + chrono::Days::new(60)).unwrap(), 20.0);
        assert!(m.to_model(date(2020, 2, 28)).is_err());
        // Default: lockdown window fills 90% of [0, 20].
        c.time_unit_days = None;
        let m = TimeMap::resolve(&raw, &c, 20.0).unwrap();
        assert!((m.to_model(c.lockdown_end).unwrap() - 18.0).abs() < 1e-12);
    }

    #[test]
    fn split_around_lockdown() {
        let dates: Vec<NaiveDate> = (1..=25).map(|d| date(2020, 3, d)).collect();
        let tags = split_tags(&dates, &cfg(1e6, 10.0)).unwrap();
        assert_eq!(tags.iter().filter(|s| **s == Split::Train).count(), 16);
        assert_eq!(tags.iter().filter(|s| **s == Split::Validation).count(), 4);
        assert!(tags[20..].iter().all(|s| *s == Split::Holdout));
        assert!(split_tags(&dates[..4], &cfg(1e6, 10.0)).is_err());
    }
}
