//! CSV exchange formats: trajectories, observations, loss traces, plot data.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use episurr_core::fit::FitResult;
use episurr_core::obs::{ObservationSeries, ObservedSeries, Split};
use episurr_core::oracle::Trajectory;

fn num(v: f64) -> String {
    // Shortest representation that parses back to the same value.
    format!("{v:?}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// `t,<compartments...>`
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(traj.compartments.iter().cloned());
    w.write_record(&header)?;
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let mut row = vec![num(*t)];
        row.extend(s.iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    ensure!(header.get(0) == Some("t"), "{}: first column must be `t`", path.display());
    let compartments: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        times.push(vals[0]);
        states.push(vals[1..].to_vec());
    }
    Ok(Trajectory { compartments, times, states, slopes: Vec::new() })
}

/// `t,split,<observed compartments...>`
pub fn write_observations(path: &Path, obs: &ObservationSeries) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string(), "split".to_string()];
    header.extend(obs.series.iter().map(|s| s.name.clone()));
    w.write_record(&header)?;
    for i in 0..obs.len() {
        let mut row = vec![num(obs.times[i]), obs.split[i].name().to_string()];
        row.extend(obs.series.iter().map(|s| num(s.values[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<ObservationSeries> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let t_col = header.iter().position(|h| h == "t").with_context(|| format!("{}: no `t` column", path.display()))?;
    let split_col = header.iter().position(|h| h == "split");
    let value_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != t_col && Some(*i) != split_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    ensure!(!value_cols.is_empty(), "{}: no observed compartment columns", path.display());
    let mut times = Vec::new();
    let mut split = Vec::new();
    let mut values = vec![Vec::new(); value_cols.len()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let parse = |i: usize| -> Result<f64> {
            let f = rec.get(i).unwrap_or("");
            f.trim().parse().with_context(|| format!("{} line {line}: `{f}` is not a number", path.display()))
        };
        times.push(parse(t_col)?);
        split.push(match split_col {
            Some(c) => {
                let s = rec.get(c).unwrap_or("");
                match Split::parse(s.trim()) {
                    Some(s) => s,
                    None => bail!("{} line {line}: unknown split tag `{s}`", path.display()),
                }
            }
            None => Split::Train,
        });
        for (k, (c, _)) in value_cols.iter().enumerate() {
            values[k].push(parse(*c)?);
        }
    }
    Ok(ObservationSeries {
        times,
        series: value_cols
            .into_iter()
            .zip(values)
            .map(|((_, name), values)| ObservedSeries { name, values })
            .collect(),
        split,
    })
}

/// `iteration,loss`
pub fn write_loss(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), num(*l)])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format `compartment,t,observed,predicted,split`, one row per
/// observation of each observed compartment.
pub fn write_plot_data(path: &Path, obs: &ObservationSeries, fit: &FitResult, predicted: &Trajectory) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["compartment", "t", "observed", "predicted", "split"])?;
    for s in &obs.series {
        let k = fit
            .trajectory
            .compartments
            .iter()
            .position(|c| c.eq_ignore_ascii_case(&s.name))
            .with_context(|| format!("fitted model has no compartment `{}`", s.name))?;
        for i in 0..obs.len() {
            let t = obs.times[i];
            let p = predicted.at(t)[k];
            w.write_record([s.name.clone(), num(t), num(s.values[i]), num(p), obs.split[i].name().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
