//! Observation series: times, observed compartments, and split tags.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelDef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Holdout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Validation),
            "holdout" => Some(Split::Holdout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSeries {
    /// Model compartment name (`S`, `I`, `R`, `P`).
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries {
    pub times: Vec<f64>,
    pub series: Vec<ObservedSeries>,
    pub split: Vec<Split>,
}

/// Number of training points when `n` points are split chronologically.
/// At least one point lands on each side.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    let k = libm::round(n as f64 * train_fraction) as usize;
    k.clamp(1, n.saturating_sub(1).max(1))
}

impl ObservationSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mask(&self) -> Vec<&str> {
        self.series.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ObservedSeries> {
        self.series.iter().find(|s| s.name.eq_ignore_ascii_case(name))
    }

    /// Keeps only the named compartments.
    pub fn restrict(&self, names: &[&str]) -> Result<ObservationSeries> {
        let mut series = Vec::with_capacity(names.len());
        for n in names {
            let s = self
                .get(n)
                .ok_or_else(|| Error::Config(format!("compartment `{n}` is not observed")))?;
            series.push(s.clone());
        }
        Ok(ObservationSeries {
            times: self.times.clone(),
            series,
            split: self.split.clone(),
        })
    }

    /// Tags the first `train_fraction` of the points train and the rest
    /// validation, in time order. Holdout tags are left untouched and the
    /// fraction applies to the non-holdout points.
    pub fn with_chronological_split(mut self, train_fraction: f64) -> ObservationSeries {
        let active: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] != Split::Holdout).collect();
        let k = train_count(active.len(), train_fraction);
        for (rank, &i) in active.iter().enumerate() {
            self.split[i] = if rank < k { Split::Train } else { Split::Validation };
        }
        self
    }

    /// Structural checks against a model.
    pub fn validate(&self, model: &ModelDef) -> Result<()> {
        if self.split.len() != self.len() {
            return Err(Error::Shape("split tags and times differ in length".into()));
        }
        if self.series.is_empty() {
            return Err(Error::Config("no compartment is observed".into()));
        }
        for s in &self.series {
            if model.compartment_index(&s.name).is_none() {
                return Err(Error::Config(format!("{} has no compartment `{}`", model.id, s.name)));
            }
            if s.values.len() != self.len() {
                return Err(Error::Shape(format!("series `{}` has {} values for {} times", s.name, s.values.len(), self.len())));
            }
            if let Some(v) = s.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("series `{}` holds {v}, outside [0, 1]", s.name)));
            }
        }
        Ok(())
    }
}
