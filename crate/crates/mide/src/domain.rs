//! Index spaces, vectorization conventions, and core containers.
//!
//! The latent state stacks height blocks of sites (height-major): entry
//! `p * n + j` is site `j` at height index `p`. Observation vectors follow
//! the same ordering, so a fully observed panel with `m = n` and `G = P`
//! has the identity observation map.

use nalgebra::{DMatrix, DVector};

use crate::error::{MideError, Result};
use crate::linalg;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A measurement site in a local planar projection (km east/north).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Site {
    pub id: String,
    pub coords: [f64; 2],
}

/// Ordered collection of sites with unique ids and finite coordinates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SiteSet {
    sites: Vec<Site>,
}

impl SiteSet {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        if sites.is_empty() {
            return Err(MideError::Config("site set must be nonempty".into()));
        }
        for s in &sites {
            if !s.coords[0].is_finite() || !s.coords[1].is_finite() {
                return Err(MideError::Config(format!(
                    "site {} has non-finite coordinates",
                    s.id
                )));
            }
        }
        for i in 0..sites.len() {
            for j in (i + 1)..sites.len() {
                if sites[i].id == sites[j].id {
                    return Err(MideError::Config(format!(
                        "duplicate site id: {}",
                        sites[i].id
                    )));
                }
            }
        }
        Ok(SiteSet { sites })
    }

    /// Builds a planar site set from (id, lat, lon) rows using an
    /// equirectangular projection about the centroid. The kernel subtracts
    /// coordinates, which requires a Euclidean plane; km units keep the
    /// length-scale parameters interpretable.
    pub fn from_latlon(rows: &[(String, f64, f64)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(MideError::Config("site set must be nonempty".into()));
        }
        let lat0 = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        let lon0 = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
        let cos_lat0 = lat0.to_radians().cos();
        let sites = rows
            .iter()
            .map(|(id, lat, lon)| Site {
                id: id.clone(),
                coords: [
                    EARTH_RADIUS_KM * (lon - lon0).to_radians() * cos_lat0,
                    EARTH_RADIUS_KM * (lat - lat0).to_radians(),
                ],
            })
            .collect();
        SiteSet::new(sites)
    }

    pub fn n(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn coords(&self, j: usize) -> [f64; 2] {
        self.sites[j].coords
    }

    pub fn ids(&self) -> Vec<&str> {
        self.sites.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    /// Symmetric Euclidean distance matrix (km) with an exactly zero diagonal.
    pub fn pairwise_distances(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let a = self.coords(i);
                let b = self.coords(j);
                let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                d[(i, j)] = dist;
                d[(j, i)] = dist;
            }
        }
        d
    }

    pub fn max_pairwise_distance(&self) -> f64 {
        self.pairwise_distances().iter().cloned().fold(0.0, f64::max)
    }
}

/// Strictly increasing measurement altitudes in meters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeightLevels {
    heights: Vec<f64>,
}

impl HeightLevels {
    pub fn new(heights: Vec<f64>) -> Result<Self> {
        if heights.is_empty() {
            return Err(MideError::Config("height list must be nonempty".into()));
        }
        if heights.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MideError::Config(
                "heights must be strictly increasing".into(),
            ));
        }
        Ok(HeightLevels { heights })
    }

    pub fn p(&self) -> usize {
        self.heights.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.heights
    }

    pub fn index_of(&self, h: f64) -> Option<usize> {
        self.heights.iter().position(|&x| (x - h).abs() < 1e-9)
    }
}

/// Bijective map between (height index, site index) and the flat latent
/// index `p * n + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentIndexer {
    n_sites: usize,
    n_heights: usize,
}

/// Builds the indexer for a site set and height list.
pub fn build_indexer(sites: &SiteSet, heights: &HeightLevels) -> LatentIndexer {
    LatentIndexer {
        n_sites: sites.n(),
        n_heights: heights.p(),
    }
}

impl LatentIndexer {
    pub fn new(n_sites: usize, n_heights: usize) -> Result<Self> {
        if n_sites == 0 || n_heights == 0 {
            return Err(MideError::Config(
                "indexer requires nonempty sites and heights".into(),
            ));
        }
        Ok(LatentIndexer { n_sites, n_heights })
    }

    pub fn flat(&self, p: usize, j: usize) -> usize {
        debug_assert!(p < self.n_heights && j < self.n_sites);
        p * self.n_sites + j
    }

    pub fn invert(&self, k: usize) -> (usize, usize) {
        debug_assert!(k < self.dim());
        (k / self.n_sites, k % self.n_sites)
    }

    pub fn dim(&self) -> usize {
        self.n_sites * self.n_heights
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_heights(&self) -> usize {
        self.n_heights
    }
}

/// Wind-speed observations on a uniform time grid, indexed (t, site, height),
/// with an observed/missing mask. Raw speeds must be nonnegative wherever
/// observed.
#[derive(Debug, Clone)]
pub struct ObservationPanel {
    times: Vec<i64>,
    step_seconds: i64,
    n_sites: usize,
    n_heights: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ObservationPanel {
    pub fn new(
        times: Vec<i64>,
        n_sites: usize,
        n_heights: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(MideError::Data("panel has no time steps".into()));
        }
        let step_seconds = if times.len() >= 2 {
            times[1] - times[0]
        } else {
            600
        };
        if step_seconds <= 0 {
            return Err(MideError::Data("timestamps must be strictly increasing".into()));
        }
        if times
            .windows(2)
            .any(|w| w[1] - w[0] != step_seconds)
        {
            return Err(MideError::Data(
                "timestamps must form a uniform grid".into(),
            ));
        }
        let want = times.len() * n_sites * n_heights;
        if values.len() != want || mask.len() != want {
            return Err(MideError::Shape(format!(
                "panel arrays have length {}/{} but shape implies {}",
                values.len(),
                mask.len(),
                want
            )));
        }
        for (i, (&v, &m)) in values.iter().zip(&mask).enumerate() {
            if m && !(v.is_finite() && v >= 0.0) {
                return Err(MideError::Data(format!(
                    "observed wind speed at flat index {i} is {v}, must be finite and >= 0"
                )));
            }
        }
        Ok(ObservationPanel {
            times,
            step_seconds,
            n_sites,
            n_heights,
            values,
            mask,
        })
    }

    pub fn len_t(&self) -> usize {
        self.times.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_heights(&self) -> usize {
        self.n_heights
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn step_seconds(&self) -> i64 {
        self.step_seconds
    }

    fn idx(&self, t: usize, j: usize, g: usize) -> usize {
        (t * self.n_sites + j) * self.n_heights + g
    }

    pub fn is_observed(&self, t: usize, j: usize, g: usize) -> bool {
        self.mask[self.idx(t, j, g)]
    }

    pub fn value(&self, t: usize, j: usize, g: usize) -> Option<f64> {
        let i = self.idx(t, j, g);
        if self.mask[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    /// Hours since the first timestamp for step `t`.
    pub fn hours_at(&self, t: usize) -> f64 {
        (self.times[t] - self.times[0]) as f64 / 3600.0
    }

    /// A contiguous time slice `[start, end)` as a new panel.
    pub fn slice(&self, start: usize, end: usize) -> Result<ObservationPanel> {
        if start >= end || end > self.len_t() {
            return Err(MideError::Shape(format!(
                "invalid panel slice [{start}, {end}) of {}",
                self.len_t()
            )));
        }
        let a = self.idx(start, 0, 0);
        let b = self.idx(end - 1, self.n_sites - 1, self.n_heights - 1) + 1;
        ObservationPanel::new(
            self.times[start..end].to_vec(),
            self.n_sites,
            self.n_heights,
            self.values[a..b].to_vec(),
            self.mask[a..b].to_vec(),
        )
    }

    /// Mean of the observed raw values at step `t`, or `None` if fully masked.
    pub fn spatial_mean(&self, t: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..self.n_sites {
            for g in 0..self.n_heights {
                if let Some(v) = self.value(t, j, g) {
                    sum += v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    }

    /// Observation map for step `t` in latent (height-major) order.
    pub fn observation_map(&self, t: usize, indexer: &LatentIndexer) -> ObservationMap {
        let mut selected = Vec::new();
        for p in 0..self.n_heights {
            for j in 0..self.n_sites {
                if self.is_observed(t, j, p) {
                    selected.push(indexer.flat(p, j));
                }
            }
        }
        ObservationMap {
            selected,
            latent_dim: indexer.dim(),
        }
    }
}

/// Mean and covariance of the latent Gaussian state.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(MideError::Shape(format!(
                "belief covariance {}x{} does not match mean length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetry within 1e-10 relative and PSD down to `-1e-8 * trace / dim`.
    pub fn validate(&self) -> Result<()> {
        linalg::check_covariance(&self.cov, 1e-10, 1e-8)
    }
}

/// Selection matrix mapping the latent vector to the observed components,
/// stored sparsely as the ascending list of selected latent indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMap {
    selected: Vec<usize>,
    latent_dim: usize,
}

/// Builds the observation map for one time step from a mask in latent order
/// (`mask[p * n + j]` true means observed).
pub fn observation_map(mask_latent_order: &[bool], indexer: &LatentIndexer) -> ObservationMap {
    debug_assert_eq!(mask_latent_order.len(), indexer.dim());
    ObservationMap {
        selected: (0..indexer.dim())
            .filter(|&k| mask_latent_order[k])
            .collect(),
        latent_dim: indexer.dim(),
    }
}

impl ObservationMap {
    pub fn full(latent_dim: usize) -> Self {
        ObservationMap {
            selected: (0..latent_dim).collect(),
            latent_dim,
        }
    }

    pub fn from_selected(selected: Vec<usize>, latent_dim: usize) -> Result<Self> {
        if selected.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MideError::Shape(
                "observation map indices must be strictly ascending".into(),
            ));
        }
        if selected.iter().any(|&k| k >= latent_dim) {
            return Err(MideError::Shape(
                "observation map index out of range".into(),
            ));
        }
        Ok(ObservationMap {
            selected,
            latent_dim,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.selected.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// True when every time step component is masked: the filter skips the
    /// update at such steps.
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.selected.len() == self.latent_dim
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// `H v`.
    pub fn select_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.selected.len(), self.selected.iter().map(|&k| v[k]))
    }

    /// `H M` (selected rows).
    pub fn select_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.selected.len(), m.ncols());
        for (r, &k) in self.selected.iter().enumerate() {
            out.row_mut(r).copy_from(&m.row(k));
        }
        out
    }

    /// `M H'` (selected columns).
    pub fn select_cols(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), self.selected.len());
        for (c, &k) in self.selected.iter().enumerate() {
            out.column_mut(c).copy_from(&m.column(k));
        }
        out
    }

    /// `H M H'` (selected rows and columns).
    pub fn select_rows_cols(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.selected.len();
        let mut out = DMatrix::zeros(d, d);
        for (r, &kr) in self.selected.iter().enumerate() {
            for (c, &kc) in self.selected.iter().enumerate() {
                out[(r, c)] = m[(kr, kc)];
            }
        }
        out
    }

    /// `H' v` (scatter back into latent space, zeros elsewhere).
    pub fn lift_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.latent_dim);
        for (r, &k) in self.selected.iter().enumerate() {
            out[k] = v[r];
        }
        out
    }

    /// Dense 0/1 selection matrix (tests and inspection).
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.selected.len(), self.latent_dim);
        for (r, &k) in self.selected.iter().enumerate() {
            h[(r, k)] = 1.0;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_sites() -> SiteSet {
        SiteSet::new(vec![
            Site { id: "a".into(), coords: [0.0, 0.0] },
            Site { id: "b".into(), coords: [3.0, 4.0] },
            Site { id: "c".into(), coords: [10.0, 0.0] },
        ])
        .unwrap()
    }

    #[test]
    fn indexer_layout_matches_height_major_convention() {
        let idx = LatentIndexer::new(1, 1).unwrap();
        assert_eq!(idx.flat(0, 0), 0);

        let idx = LatentIndexer::new(3, 3).unwrap();
        // Height 2 (1-based), site 1 (1-based) => flat 3 (0-based p=1, j=0).
        assert_eq!(idx.flat(1, 0), 3);
        // Flat 8 => height 3, site 3 (1-based), i.e. (2, 2) zero-based.
        assert_eq!(idx.invert(8), (2, 2));
    }

    #[test]
    fn duplicate_site_ids_rejected() {
        let err = SiteSet::new(vec![
            Site { id: "x".into(), coords: [0.0, 0.0] },
            Site { id: "x".into(), coords: [1.0, 0.0] },
        ]);
        assert!(matches!(err, Err(MideError::Config(_))));
    }

    #[test]
    fn distances_basic_cases() {
        let sites = three_sites();
        let d = sites.pairwise_distances();
        assert_eq!(d[(0, 0)], 0.0);
        assert!((d[(0, 1)] - 5.0).abs() < 1e-12); // 3-4-5 triangle
        assert_eq!(d[(0, 1)], d[(1, 0)]);
    }

    #[test]
    fn latlon_projection_reproduces_buoy_separation() {
        // E05 Hudson North and E06 Hudson South metocean buoy positions;
        // their separation is roughly 77 km.
        let sites = SiteSet::from_latlon(&[
            ("E05N".into(), 39.9686, -72.7173),
            ("E06".into(), 39.5465, -73.4295),
        ])
        .unwrap();
        let d = sites.pairwise_distances()[(0, 1)];
        assert!((d - 77.0).abs() < 3.0, "distance {d} not ~77 km");
    }

    #[test]
    fn observation_map_full_is_identity() {
        let idx = LatentIndexer::new(3, 3).unwrap();
        let map = observation_map(&vec![true; 9], &idx);
        assert!(map.is_identity());
        assert_eq!(map.matrix(), DMatrix::<f64>::identity(9, 9));
    }

    #[test]
    fn observation_map_single_missing_drops_one_row() {
        let idx = LatentIndexer::new(3, 3).unwrap();
        let mut mask = vec![true; 9];
        mask[idx.flat(1, 2)] = false; // site 3 missing at height 2
        let map = observation_map(&mask, &idx);
        assert_eq!(map.n_obs(), 8);
        let h = map.matrix();
        assert_eq!(h.nrows(), 8);
        assert_eq!(h.ncols(), 9);
        // Each remaining row still selects exactly one latent entry.
        for r in 0..8 {
            assert_eq!(h.row(r).iter().sum::<f64>(), 1.0);
        }
        assert!(h.column(idx.flat(1, 2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observation_map_all_missing_is_empty() {
        let idx = LatentIndexer::new(3, 3).unwrap();
        let map = observation_map(&vec![false; 9], &idx);
        assert!(map.is_empty());
        assert_eq!(map.matrix().nrows(), 0);
    }

    #[test]
    fn panel_rejects_irregular_grid() {
        let res = ObservationPanel::new(
            vec![0, 600, 1800],
            1,
            1,
            vec![1.0; 3],
            vec![true; 3],
        );
        assert!(res.is_err());
    }

    #[test]
    fn panel_accessors() {
        let panel = ObservationPanel::new(
            vec![0, 600],
            2,
            1,
            vec![1.0, 2.0, 3.0, 0.0],
            vec![true, true, true, false],
        )
        .unwrap();
        assert_eq!(panel.value(0, 1, 0), Some(2.0));
        assert_eq!(panel.value(1, 1, 0), None);
        assert_eq!(panel.spatial_mean(0), Some(1.5));
        assert_eq!(panel.hours_at(1), 1.0 / 6.0);
    }

    proptest! {
        #[test]
        fn indexer_round_trip(n in 1usize..8, p in 1usize..8, k in 0usize..64) {
            let idx = LatentIndexer::new(n, p).unwrap();
            let k = k % idx.dim();
            let (pp, jj) = idx.invert(k);
            prop_assert_eq!(idx.flat(pp, jj), k);
        }

        #[test]
        fn selection_times_transpose_is_identity(mask in proptest::collection::vec(any::<bool>(), 12)) {
            let idx = LatentIndexer::new(4, 3).unwrap();
            let map = observation_map(&mask, &idx);
            let h = map.matrix();
            let prod = &h * h.transpose();
            prop_assert_eq!(prod, DMatrix::<f64>::identity(map.n_obs(), map.n_obs()));
        }

        #[test]
        fn distances_satisfy_triangle_inequality(
            coords in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..6)
        ) {
            let sites = SiteSet::new(
                coords.iter().enumerate()
                    .map(|(i, &(x, y))| Site { id: format!("s{i}"), coords: [x, y] })
                    .collect(),
            ).unwrap();
            let d = sites.pairwise_distances();
            let n = sites.n();
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        prop_assert!(d[(i, j)] <= d[(i, k)] + d[(k, j)] + 1e-9);
                    }
                }
            }
        }
    }
}
