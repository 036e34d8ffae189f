//! On-disk weather-map streams.
//!
//! A stream is a directory holding one `<ISO8601>.f32` file per time step
//! (little-endian float32, channel-major row-major, C*H*W values) and a
//! `stream.json` sidecar describing channels, raster geometry, bounding box
//! (planar km), and the step in seconds.

use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};

use crate::error::{MideError, Result};

/// Sidecar metadata (`stream.json`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamMeta {
    pub channels: Vec<String>,
    pub width: usize,
    pub height: usize,
    /// [x0, y0, x1, y1] in the same planar km frame as site coordinates.
    pub bbox: [f64; 4],
    pub step_seconds: i64,
}

impl StreamMeta {
    pub fn values_per_map(&self) -> usize {
        self.channels.len() * self.width * self.height
    }

    pub fn pixel_size_km(&self) -> (f64, f64) {
        (
            (self.bbox[2] - self.bbox[0]) / self.width as f64,
            (self.bbox[3] - self.bbox[1]) / self.height as f64,
        )
    }
}

/// One raster frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherMap {
    pub timestamp: i64,
    /// Channel-major row-major float32 grid, C*H*W values.
    pub data: Vec<f32>,
}

/// A time-ordered sequence of frames sharing one geometry.
#[derive(Debug, Clone)]
pub struct WeatherMapStream {
    pub meta: StreamMeta,
    pub maps: Vec<WeatherMap>,
}

fn format_timestamp(unix: i64) -> String {
    let dt: DateTime<Utc> = Utc.timestamp_opt(unix, 0).unwrap();
    dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn parse_timestamp(stem: &str) -> Result<i64> {
    DateTime::parse_from_rfc3339(stem)
        .map(|dt| dt.timestamp())
        .map_err(|e| MideError::Data(format!("bad timestamp file name {stem}: {e}")))
}

impl WeatherMapStream {
    pub fn new(meta: StreamMeta, maps: Vec<WeatherMap>) -> Result<Self> {
        let want = meta.values_per_map();
        for m in &maps {
            if m.data.len() != want {
                return Err(MideError::Shape(format!(
                    "map at {} has {} values, expected {}",
                    format_timestamp(m.timestamp),
                    m.data.len(),
                    want
                )));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(MideError::Data(format!(
                    "map at {} contains non-finite values",
                    format_timestamp(m.timestamp)
                )));
            }
        }
        if maps.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(MideError::Data(
                "weather maps must be strictly increasing in time".into(),
            ));
        }
        Ok(WeatherMapStream { meta, maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Index of the map in force at `t_unix`: the latest frame with
    /// timestamp at or before `t_unix` (hourly maps are step-held across
    /// the observation steps they cover). `None` before the first frame.
    pub fn map_index_at(&self, t_unix: i64) -> Option<usize> {
        match self
            .maps
            .binary_search_by_key(&t_unix, |m| m.timestamp)
        {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }

    /// Context window of `len` map indices ending at `idx`, padded by
    /// repeating the earliest frame at the stream head.
    pub fn window_ending_at(&self, idx: usize, len: usize) -> Vec<usize> {
        (0..len)
            .map(|k| idx.saturating_sub(len - 1 - k))
            .collect()
    }

    /// Per-channel (mean, std) over the frames in `range`.
    pub fn channel_stats(&self, range: std::ops::Range<usize>) -> Vec<(f64, f64)> {
        let c = self.meta.channels.len();
        let plane = self.meta.width * self.meta.height;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            let mut count = 0usize;
            for m in &self.maps[range.clone()] {
                for &v in &m.data[ch * plane..(ch + 1) * plane] {
                    sum += v as f64;
                    sumsq += (v as f64) * (v as f64);
                    count += 1;
                }
            }
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            let var = if count > 0 {
                (sumsq / count as f64 - mean * mean).max(0.0)
            } else {
                1.0
            };
            out.push((mean, var.sqrt()));
        }
        out
    }

    /// Writes `stream.json` plus one `.f32` file per frame into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| MideError::io(dir.display().to_string(), e))?;
        let meta_path = dir.join("stream.json");
        let meta_json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| MideError::Data(format!("stream meta serialization: {e}")))?;
        std::fs::write(&meta_path, meta_json)
            .map_err(|e| MideError::io(meta_path.display().to_string(), e))?;
        for m in &self.maps {
            let path = dir.join(format!("{}.f32", format_timestamp(m.timestamp)));
            let mut bytes = Vec::with_capacity(m.data.len() * 4);
            for v in &m.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            std::fs::write(&path, bytes)
                .map_err(|e| MideError::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    /// Reads a stream directory written by [`WeatherMapStream::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("stream.json");
        let meta_text = std::fs::read_to_string(&meta_path)
            .map_err(|e| MideError::io(meta_path.display().to_string(), e))?;
        let meta: StreamMeta = serde_json::from_str(&meta_text)
            .map_err(|e| MideError::Data(format!("bad stream.json: {e}")))?;
        let mut maps = Vec::new();
        let entries =
            std::fs::read_dir(dir).map_err(|e| MideError::io(dir.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| MideError::io(dir.display().to_string(), e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("f32") {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| MideError::Data(format!("bad map file name {path:?}")))?;
            let timestamp = parse_timestamp(stem)?;
            let bytes =
                std::fs::read(&path).map_err(|e| MideError::io(path.display().to_string(), e))?;
            if bytes.len() % 4 != 0 {
                return Err(MideError::Data(format!(
                    "map file {path:?} length {} not a multiple of 4",
                    bytes.len()
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            maps.push(WeatherMap { timestamp, data });
        }
        maps.sort_by_key(|m| m.timestamp);
        if maps.is_empty() {
            return Err(MideError::Data(format!(
                "no .f32 maps found in {}",
                dir.display()
            )));
        }
        WeatherMapStream::new(meta, maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stream() -> WeatherMapStream {
        let meta = StreamMeta {
            channels: vec!["scalar".into(), "u".into()],
            width: 3,
            height: 2,
            bbox: [0.0, 0.0, 30.0, 20.0],
            step_seconds: 3600,
        };
        let maps = (0..4)
            .map(|i| WeatherMap {
                timestamp: 1_600_000_000 + i * 3600,
                data: (0..12).map(|k| (i * 100 + k) as f32 * 0.25).collect(),
            })
            .collect();
        WeatherMapStream::new(meta, maps).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let stream = sample_stream();
        stream.write_dir(dir.path()).unwrap();
        let back = WeatherMapStream::read_dir(dir.path()).unwrap();
        assert_eq!(back.meta, stream.meta);
        assert_eq!(back.maps.len(), stream.maps.len());
        for (a, b) in back.maps.iter().zip(&stream.maps) {
            assert_eq!(a.timestamp, b.timestamp);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn step_held_lookup() {
        let s = sample_stream();
        let t0 = s.maps[0].timestamp;
        assert_eq!(s.map_index_at(t0 - 1), None);
        assert_eq!(s.map_index_at(t0), Some(0));
        assert_eq!(s.map_index_at(t0 + 599), Some(0));
        assert_eq!(s.map_index_at(t0 + 3600), Some(1));
        assert_eq!(s.map_index_at(t0 + 3 * 3600 + 50_000), Some(3));
    }

    #[test]
    fn window_pads_at_stream_head() {
        let s = sample_stream();
        assert_eq!(s.window_ending_at(0, 3), vec![0, 0, 0]);
        assert_eq!(s.window_ending_at(1, 3), vec![0, 0, 1]);
        assert_eq!(s.window_ending_at(3, 3), vec![1, 2, 3]);
    }

    #[test]
    fn channel_stats_are_plausible() {
        let s = sample_stream();
        let stats = s.channel_stats(0..s.len());
        assert_eq!(stats.len(), 2);
        assert!(stats[0].0 < stats[1].0); // channel 1 values sit above channel 0
        assert!(stats[0].1 > 0.0);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let meta = StreamMeta {
            channels: vec!["a".into()],
            width: 2,
            height: 2,
            bbox: [0.0, 0.0, 1.0, 1.0],
            step_seconds: 60,
        };
        let maps = vec![WeatherMap {
            timestamp: 0,
            data: vec![0.0; 3],
        }];
        assert!(WeatherMapStream::new(meta, maps).is_err());
    }
}
