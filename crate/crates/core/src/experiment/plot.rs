use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::CSV_HEADER;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    /// `(round, mean accuracy)`
    pub points: Vec<(f64, f64)>,
}

/// Line-chart description of a metrics CSV: mean accuracy per round for
/// every phase present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

pub fn chart_from_csv(title: &str, text: &str) -> Result<Chart> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::InvalidArgument("not a metrics CSV".into()));
    }
    let mut sums: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("malformed metrics row {}: {line}", n + 2));
        if cols.len() != 7 {
            return Err(bad());
        }
        let round: usize = cols[0].parse().map_err(|_| bad())?;
        let acc: f64 = cols[3].parse().map_err(|_| bad())?;
        if acc.is_nan() {
            continue;
        }
        let e = sums.entry(cols[1].to_string()).or_default().entry(round).or_insert((0.0, 0));
        e.0 += acc;
        e.1 += 1;
    }
    Ok(Chart {
        title: title.to_string(),
        x_label: "round".into(),
        y_label: "mean accuracy".into(),
        series: sums
            .into_iter()
            .map(|(name, by_round)| Series {
                name,
                points: by_round.into_iter().map(|(r, (s, c))| (r as f64, s / c as f64)).collect(),
            })
            .collect(),
    })
}
