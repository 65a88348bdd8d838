//! Time grids, process tracks and deterministic Brownian ensembles.
//!
//! Randomness is keyed per path: every path owns a ChaCha8 stream selected by
//! `(seed, path, stream)`, and the cipher counter advances with the step
//! index. A path therefore has the same values whichever worker produced it
//! and however many paths the run contains.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{LabError, Result};

/// Uniform discretisation `t_i = i·Δ`, `Δ = horizon / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LabError::config(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(LabError::config("grid needs at least one step"));
        }
        Ok(TimeGrid {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node time; the last node is exactly the horizon.
    pub fn node(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }

    /// Index of the node at time `t`; `t` must sit on the grid.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let x = t / self.dt;
        let i = x.round();
        if !(0.0..=self.n_steps as f64).contains(&i) || (x - i).abs() > 1e-7 * x.abs().max(1.0) {
            return Err(LabError::config(format!(
                "time {t} is not a node of the grid (Δ = {}, horizon = {})",
                self.dt, self.horizon
            )));
        }
        Ok(i as usize)
    }

    /// Number of whole steps needed to cover a duration `d` (at least one for `d > 0`).
    pub fn steps_covering(&self, d: f64) -> usize {
        let x = d / self.dt;
        let r = x.round();
        if (x - r).abs() < 1e-9 * x.max(1.0) {
            r as usize
        } else {
            x.ceil() as usize
        }
    }

    /// Grid with every other node; requires an even step count.
    pub fn coarsen(&self) -> Result<TimeGrid> {
        if self.n_steps % 2 != 0 || self.n_steps < 2 {
            return Err(LabError::config(format!(
                "cannot halve a grid with {} steps",
                self.n_steps
            )));
        }
        TimeGrid::new(self.horizon, self.n_steps / 2)
    }
}

pub fn build_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, n_steps)
}

/// One labelled process sampled on the grid for a block of paths, row-major
/// `n_paths × n_nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessTrack {
    label: String,
    n_paths: usize,
    n_nodes: usize,
    values: Vec<f64>,
    stop_index: Option<Vec<usize>>,
}

impl ProcessTrack {
    pub fn zeros(label: impl Into<String>, n_paths: usize, n_nodes: usize) -> Self {
        ProcessTrack {
            label: label.into(),
            n_paths,
            n_nodes,
            values: vec![0.0; n_paths * n_nodes],
            stop_index: None,
        }
    }

    pub fn constant(label: impl Into<String>, n_paths: usize, n_nodes: usize, c: f64) -> Self {
        ProcessTrack {
            label: label.into(),
            n_paths,
            n_nodes,
            values: vec![c; n_paths * n_nodes],
            stop_index: None,
        }
    }

    pub fn from_values(
        label: impl Into<String>,
        n_paths: usize,
        n_nodes: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let label = label.into();
        if values.len() != n_paths * n_nodes {
            return Err(LabError::config(format!(
                "track '{label}' has {} values, expected {n_paths} x {n_nodes}",
                values.len()
            )));
        }
        Ok(ProcessTrack {
            label,
            n_paths,
            n_nodes,
            values,
            stop_index: None,
        })
    }

    pub fn from_rows(label: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_paths = rows.len();
        let n_nodes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_nodes) {
            return Err(LabError::config("ragged rows"));
        }
        Self::from_values(label, n_paths, n_nodes, rows.concat())
    }

    /// Builds a track by evaluating `f(path_row, node)`.
    pub fn from_fn(
        label: impl Into<String>,
        n_paths: usize,
        n_nodes: usize,
        f: impl Fn(usize, usize) -> f64 + Sync,
    ) -> Self {
        let mut t = Self::zeros(label, n_paths, n_nodes);
        if n_nodes > 0 {
            t.values
                .par_chunks_mut(n_nodes)
                .enumerate()
                .for_each(|(p, row)| {
                    for (i, v) in row.iter_mut().enumerate() {
                        *v = f(p, i);
                    }
                });
        }
        t
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_paths, self.n_nodes)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.n_nodes..(p + 1) * self.n_nodes]
    }

    pub fn row_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.values[p * self.n_nodes..(p + 1) * self.n_nodes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_nodes.max(1))
    }

    pub fn par_rows_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        let w = self.n_nodes.max(1);
        self.values.par_chunks_mut(w)
    }

    pub fn get(&self, p: usize, i: usize) -> f64 {
        self.values[p * self.n_nodes + i]
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.column(self.n_nodes - 1)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.get(p, i)).collect()
    }

    /// Per-path stopping indices: the track is constant from this node on.
    pub fn stop_index(&self) -> Option<&[usize]> {
        self.stop_index.as_deref()
    }

    pub fn with_stop_index(mut self, stops: Vec<usize>) -> Result<Self> {
        if stops.len() != self.n_paths {
            return Err(LabError::config(format!(
                "track '{}' stop index has {} entries for {} paths",
                self.label,
                stops.len(),
                self.n_paths
            )));
        }
        self.stop_index = Some(stops);
        Ok(self)
    }

    pub fn same_shape(&self, other: &ProcessTrack) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LabError::ShapeMismatch {
                left: self.label.clone(),
                left_shape: self.shape(),
                right: other.label.clone(),
                right_shape: other.shape(),
            });
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(LabError::NonFinite {
                what: self.label.clone(),
                path: k / self.n_nodes,
                node: k % self.n_nodes,
            }),
        }
    }

    /// Checks that flagged-stopped rows are constant after their stopping index.
    pub fn check_stopped(&self) -> Result<()> {
        let Some(stops) = &self.stop_index else {
            return Ok(());
        };
        for (p, &s) in stops.iter().enumerate() {
            let row = self.row(p);
            if s < row.len() {
                if let Some(i) = row[s..].iter().position(|v| *v != row[s]) {
                    return Err(LabError::Consistency(format!(
                        "track '{}' moves after its stop at path {p}, node {}",
                        self.label,
                        s + i
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn map(&self, label: impl Into<String>, f: impl Fn(f64) -> f64 + Sync) -> ProcessTrack {
        ProcessTrack {
            label: label.into(),
            n_paths: self.n_paths,
            n_nodes: self.n_nodes,
            values: self.values.par_iter().map(|v| f(*v)).collect(),
            stop_index: None,
        }
    }

    pub fn zip_with(
        &self,
        other: &ProcessTrack,
        label: impl Into<String>,
        f: impl Fn(f64, f64) -> f64 + Sync,
    ) -> Result<ProcessTrack> {
        self.same_shape(other)?;
        Ok(ProcessTrack {
            label: label.into(),
            n_paths: self.n_paths,
            n_nodes: self.n_nodes,
            values: self
                .values
                .par_iter()
                .zip(other.values.par_iter())
                .map(|(a, b)| f(*a, *b))
                .collect(),
            stop_index: None,
        })
    }
}

/// Independent random substreams of one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Brownian = 0,
    Auxiliary = 1,
    SecondDriver = 2,
    Bridge = 3,
}

const STREAM_BITS: u32 = 4;

/// The generator of `(seed, path, stream)`.
pub fn path_rng(seed: u64, path: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((path as u64) << STREAM_BITS) | stream as u64);
    rng
}

/// Writes `n` Brownian increments of variance `dt` for a global path index.
/// With antithetic pairing an odd path replays its even partner negated.
pub fn fill_increments(
    out: &mut [f64],
    seed: u64,
    path: usize,
    stream: Stream,
    dt: f64,
    antithetic: bool,
) {
    let (source, sign) = if antithetic && path % 2 == 1 {
        (path - 1, -1.0)
    } else {
        (path, 1.0)
    };
    let mut rng = path_rng(seed, source, stream);
    let scale = sign * dt.sqrt();
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

/// A block of paths `path_offset .. path_offset + n_paths` with named tracks.
#[derive(Debug, Clone)]
pub struct Ensemble {
    grid: TimeGrid,
    seed: u64,
    antithetic: bool,
    path_offset: usize,
    n_paths: usize,
    tracks: BTreeMap<String, ProcessTrack>,
}

impl Ensemble {
    pub fn empty(grid: TimeGrid, seed: u64, antithetic: bool, paths: Range<usize>) -> Self {
        Ensemble {
            grid,
            seed,
            antithetic,
            path_offset: paths.start,
            n_paths: paths.len(),
            tracks: BTreeMap::new(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn antithetic(&self) -> bool {
        self.antithetic
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn path_offset(&self) -> usize {
        self.path_offset
    }

    /// Global index of row `p`.
    pub fn path_index(&self, p: usize) -> usize {
        self.path_offset + p
    }

    /// Antithetic partner row of `p` inside this block, if present.
    pub fn pair_of(&self, p: usize) -> Option<usize> {
        if !self.antithetic {
            return None;
        }
        let g = self.path_index(p);
        let partner = g ^ 1;
        (partner >= self.path_offset && partner < self.path_offset + self.n_paths)
            .then(|| partner - self.path_offset)
    }

    pub fn get(&self, label: &str) -> Result<&ProcessTrack> {
        self.tracks
            .get(label)
            .ok_or_else(|| LabError::config(format!("ensemble has no track '{label}'")))
    }

    pub fn take(&mut self, label: &str) -> Result<ProcessTrack> {
        self.tracks
            .remove(label)
            .ok_or_else(|| LabError::config(format!("ensemble has no track '{label}'")))
    }

    pub fn insert(&mut self, track: ProcessTrack) -> Result<()> {
        if track.shape() != (self.n_paths, self.grid.n_nodes()) {
            return Err(LabError::ShapeMismatch {
                left: track.label.clone(),
                left_shape: track.shape(),
                right: "ensemble".into(),
                right_shape: (self.n_paths, self.grid.n_nodes()),
            });
        }
        self.tracks.insert(track.label.clone(), track);
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.tracks.keys().map(String::as_str)
    }

    /// Same paths on the grid with every other node, for the Brownian pair
    /// `label` / `d{label}`: levels subsampled, increments summed in pairs.
    pub fn coarsen_brownian(&self, label: &str) -> Result<Ensemble> {
        let grid = self.grid.coarsen()?;
        let level = self.get(label)?;
        let inc = self.get(&format!("d{label}"))?;
        let n = grid.n_nodes();
        let mut w = ProcessTrack::zeros(label, self.n_paths, n);
        let mut dw = ProcessTrack::zeros(format!("d{label}"), self.n_paths, n);
        for p in 0..self.n_paths {
            let (lr, ir) = (level.row(p), inc.row(p));
            let wr = w.row_mut(p);
            for j in 0..n {
                wr[j] = lr[2 * j];
            }
            let dr = dw.row_mut(p);
            for j in 0..grid.n_steps() {
                dr[j] = ir[2 * j] + ir[2 * j + 1];
            }
        }
        let mut out = Ensemble {
            grid,
            seed: self.seed,
            antithetic: self.antithetic,
            path_offset: self.path_offset,
            n_paths: self.n_paths,
            tracks: BTreeMap::new(),
        };
        out.insert(w)?;
        out.insert(dw)?;
        Ok(out)
    }
}

/// Brownian levels `label` (starting at 0) and forward increments
/// `d{label}` (last column 0) for the global paths in `paths`.
pub fn sample_brownian_paths(
    grid: &TimeGrid,
    paths: Range<usize>,
    seed: u64,
    antithetic: bool,
    stream: Stream,
    label: &str,
) -> Result<Ensemble> {
    let n_paths = paths.len();
    let n_nodes = grid.n_nodes();
    let dt = grid.dt();
    let offset = paths.start;
    let mut inc = ProcessTrack::zeros(format!("d{label}"), n_paths, n_nodes);
    let mut lev = ProcessTrack::zeros(label, n_paths, n_nodes);
    inc.par_rows_mut()
        .zip(lev.par_rows_mut())
        .enumerate()
        .for_each(|(p, (drow, wrow))| {
            fill_increments(
                &mut drow[..n_nodes - 1],
                seed,
                offset + p,
                stream,
                dt,
                antithetic,
            );
            let mut acc = 0.0;
            for i in 0..n_nodes - 1 {
                acc += drow[i];
                wrow[i + 1] = acc;
            }
        });
    let mut ens = Ensemble::empty(*grid, seed, antithetic, paths);
    ens.insert(lev)?;
    ens.insert(inc)?;
    Ok(ens)
}

/// Brownian ensemble with tracks `W` and `dW` for paths `0..n_paths`.
pub fn sample_brownian(
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<Ensemble> {
    if n_paths == 0 {
        return Err(LabError::config("n_paths must be at least 1"));
    }
    sample_brownian_paths(grid, 0..n_paths, seed, antithetic, Stream::Brownian, "W")
}

/// Default number of paths per work unit for chunked studies.
pub fn default_chunk(n_nodes: usize) -> usize {
    // about 16 MB per track
    ((2 << 20) / n_nodes.max(1)).clamp(16, 4096)
}

/// Evaluates `f` on consecutive path ranges in parallel and concatenates the
/// per-path outputs in path order. Chunks start at even indices so antithetic
/// pairs never straddle a boundary.
pub fn par_map_chunks<T, F>(n_paths: usize, chunk: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<Vec<T>> + Sync,
{
    let chunk = (chunk.max(2) + 1) & !1;
    let ranges: Vec<Range<usize>> = (0..n_paths)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(n_paths))
        .collect();
    let parts: Vec<Vec<T>> = ranges
        .into_par_iter()
        .map(|r| {
            let len = r.len();
            let out = f(r)?;
            if out.len() != len {
                return Err(LabError::Consistency(format!(
                    "chunk produced {} results for {len} paths",
                    out.len()
                )));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean, variance};

    #[test]
    fn grid_nodes_are_exact() {
        let g = build_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = build_grid(2.0, 1).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 2.0]);
        let g = build_grid(1.0, 4096).unwrap();
        assert_eq!(g.dt(), 1.0 / 4096.0);
        assert_eq!(g.node(4096), 1.0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(build_grid(0.0, 4).is_err());
        assert!(build_grid(-1.0, 4).is_err());
        assert!(build_grid(f64::NAN, 4).is_err());
        assert!(build_grid(1.0, 0).is_err());
    }

    #[test]
    fn grid_index_lookup() {
        let g = build_grid(8.0, 4096).unwrap();
        assert_eq!(g.index_at(1.0).unwrap(), 512);
        assert!(g.index_at(1.0 + 1e-3).is_err());
        assert_eq!(g.steps_covering(g.dt() * 10.0), 10);
        assert_eq!(g.steps_covering(g.dt() * 10.5), 11);
    }

    #[test]
    fn antithetic_pair_is_mirrored() {
        let g = build_grid(1.0, 64).unwrap();
        let e = sample_brownian(&g, 2, 7, true).unwrap();
        let w = e.get("W").unwrap();
        for i in 0..g.n_nodes() {
            assert_eq!(w.get(1, i), -w.get(0, i));
        }
        assert_eq!(e.pair_of(0), Some(1));
    }

    #[test]
    fn paths_do_not_depend_on_ensemble_size() {
        let g = build_grid(1.0, 32).unwrap();
        let small = sample_brownian(&g, 3, 11, false).unwrap();
        let large = sample_brownian(&g, 10, 11, false).unwrap();
        for p in 0..3 {
            assert_eq!(small.get("W").unwrap().row(p), large.get("W").unwrap().row(p));
        }
        let block = sample_brownian_paths(&g, 5..8, 11, false, Stream::Brownian, "W").unwrap();
        for p in 0..3 {
            assert_eq!(block.get("W").unwrap().row(p), large.get("W").unwrap().row(p + 5));
        }
    }

    #[test]
    fn terminal_moments() {
        let n = 100_000;
        let g = build_grid(1.0, 8).unwrap();
        let e = sample_brownian(&g, n, 2024, false).unwrap();
        let wt = e.get("W").unwrap().terminal();
        let m = mean(&wt);
        assert!(m.abs() < 3.0 / (n as f64).sqrt(), "mean {m}");
        let v = variance(&wt);
        assert!((v - 1.0).abs() < 0.02, "variance {v}");
    }

    #[test]
    fn chunked_map_keeps_order() {
        let out = par_map_chunks(101, 10, |r| Ok(r.collect::<Vec<_>>())).unwrap();
        assert_eq!(out, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn coarsening_sums_increments() {
        let g = build_grid(1.0, 8).unwrap();
        let e = sample_brownian(&g, 4, 3, false).unwrap();
        let c = e.coarsen_brownian("W").unwrap();
        assert_eq!(c.grid().n_steps(), 4);
        let (w, dw) = (c.get("W").unwrap(), c.get("dW").unwrap());
        for p in 0..4 {
            for j in 0..4 {
                let lhs = w.get(p, j) + dw.get(p, j);
                assert!((lhs - w.get(p, j + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stopped_track_check() {
        let t = ProcessTrack::from_rows("D", &[vec![1.0, 0.5, 0.0, 0.0]])
            .unwrap()
            .with_stop_index(vec![2])
            .unwrap();
        assert!(t.check_stopped().is_ok());
        let bad = ProcessTrack::from_rows("D", &[vec![1.0, 0.5, 0.0, 0.1]])
            .unwrap()
            .with_stop_index(vec![2])
            .unwrap();
        assert!(bad.check_stopped().is_err());
    }
}
