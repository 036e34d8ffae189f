//! CSV readers/writers for observations, sites, and forecasts.
//!
//! Observation files carry one row per (timestamp, site, height) with the
//! header `timestamp,site_id,height_m,wind_speed_mps`; timestamps are
//! ISO-8601 UTC and missing values are encoded as an empty speed field.
//! Site files carry `site_id,lat,lon`.

use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};

use crate::domain::{HeightLevels, ObservationPanel, SiteSet};
use crate::error::{MideError, Result};

pub fn format_unix(unix: i64) -> String {
    let dt: DateTime<Utc> = Utc.timestamp_opt(unix, 0).unwrap();
    dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn parse_unix(text: &str) -> Result<i64> {
    DateTime::parse_from_rfc3339(text)
        .map(|dt| dt.timestamp())
        .map_err(|e| MideError::Data(format!("bad timestamp '{text}': {e}")))
}

/// Reads `site_id,lat,lon` and projects to the planar frame.
pub fn read_sites_csv(path: &Path) -> Result<SiteSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| MideError::Data(format!("cannot open sites file {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| MideError::Data(format!("sites header: {e}")))?
        .clone();
    let expect = ["site_id", "lat", "lon"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(MideError::Data(format!(
            "sites file {} must have header site_id,lat,lon",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (ln, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MideError::Data(format!("sites row {}: {e}", ln + 2)))?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let lat: f64 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| MideError::Data(format!("sites row {} lat: {e}", ln + 2)))?;
        let lon: f64 = rec
            .get(2)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| MideError::Data(format!("sites row {} lon: {e}", ln + 2)))?;
        rows.push((id, lat, lon));
    }
    SiteSet::from_latlon(&rows)
}

/// Writes the canonical observation CSV (row order: time, then site in set
/// order, then height ascending). Missing entries get an empty speed field.
pub fn write_observation_csv(
    panel: &ObservationPanel,
    sites: &SiteSet,
    heights: &HeightLevels,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("timestamp,site_id,height_m,wind_speed_mps\n");
    for t in 0..panel.len_t() {
        let stamp = format_unix(panel.times()[t]);
        for (j, site) in sites.sites().iter().enumerate() {
            for (g, h) in heights.values().iter().enumerate() {
                match panel.value(t, j, g) {
                    Some(v) => {
                        out.push_str(&format!("{stamp},{},{h},{v}\n", site.id));
                    }
                    None => {
                        out.push_str(&format!("{stamp},{},{h},\n", site.id));
                    }
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| MideError::io(path.display().to_string(), e))
}

/// Reads an observation CSV onto the (sites x heights) grid. Rows may appear
/// in any order; the distinct timestamps must form a uniform grid. Entries
/// absent from the file are treated as missing, as are empty speed fields.
pub fn read_observation_csv(
    path: &Path,
    sites: &SiteSet,
    heights: &HeightLevels,
) -> Result<ObservationPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| MideError::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| MideError::Data(format!("observation header: {e}")))?
        .clone();
    let expect = ["timestamp", "site_id", "height_m", "wind_speed_mps"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(MideError::Data(format!(
            "observation file {} must have header timestamp,site_id,height_m,wind_speed_mps",
            path.display()
        )));
    }

    struct Row {
        unix: i64,
        j: usize,
        g: usize,
        value: Option<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut times: Vec<i64> = Vec::new();
    for (ln, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MideError::Data(format!("observation row {}: {e}", ln + 2)))?;
        let unix = parse_unix(rec.get(0).unwrap_or("").trim())?;
        let site_id = rec.get(1).unwrap_or("").trim();
        let j = sites.index_of(site_id).ok_or_else(|| {
            MideError::Data(format!(
                "observation row {}: unknown site_id '{site_id}'",
                ln + 2
            ))
        })?;
        let height: f64 = rec
            .get(2)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| MideError::Data(format!("observation row {} height: {e}", ln + 2)))?;
        let g = heights.index_of(height).ok_or_else(|| {
            MideError::Data(format!(
                "observation row {}: height {height} not in the configured levels",
                ln + 2
            ))
        })?;
        let speed_field = rec.get(3).unwrap_or("").trim();
        let value = if speed_field.is_empty() {
            None
        } else {
            let v: f64 = speed_field.parse().map_err(|e| {
                MideError::Data(format!("observation row {} speed: {e}", ln + 2))
            })?;
            Some(v)
        };
        times.push(unix);
        rows.push(Row { unix, j, g, value });
    }
    if rows.is_empty() {
        return Err(MideError::Data(format!(
            "observation file {} has no data rows",
            path.display()
        )));
    }
    times.sort_unstable();
    times.dedup();
    let step = if times.len() >= 2 {
        times[1] - times[0]
    } else {
        600
    };
    if step <= 0 || times.windows(2).any(|w| w[1] - w[0] != step) {
        return Err(MideError::Data(
            "observation timestamps do not form a uniform grid".into(),
        ));
    }
    let t0 = times[0];
    let t_len = times.len();
    let (n, p) = (sites.n(), heights.p());
    let mut values = vec![0.0; t_len * n * p];
    let mut mask = vec![false; t_len * n * p];
    for row in rows {
        let t = ((row.unix - t0) / step) as usize;
        let flat = (t * n + row.j) * p + row.g;
        if let Some(v) = row.value {
            values[flat] = v;
            mask[flat] = true;
        }
    }
    ObservationPanel::new(times, n, p, values, mask)
}

/// One emitted forecast row.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub issue_unix: i64,
    pub horizon_steps: usize,
    pub site_id: String,
    pub height_m: f64,
    pub mean_mps: f64,
    pub lo95_mps: f64,
    pub hi95_mps: f64,
}

/// Writes `issue_time,horizon_steps,site_id,height_m,mean_mps,lo95_mps,hi95_mps`.
pub fn write_forecast_csv(rows: &[ForecastRow], path: &Path) -> Result<()> {
    let mut out = String::from("issue_time,horizon_steps,site_id,height_m,mean_mps,lo95_mps,hi95_mps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            format_unix(r.issue_unix),
            r.horizon_steps,
            r.site_id,
            r.height_m,
            r.mean_mps,
            r.lo95_mps,
            r.hi95_mps
        ));
    }
    std::fs::write(path, out).map_err(|e| MideError::io(path.display().to_string(), e))
}
