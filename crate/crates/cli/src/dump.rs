//! CSV track dumps: one row per (path, node) and one row per node of the
//! cross-path means.

use std::path::{Path, PathBuf};

use insiderlab::calculus::stochastic_exponential;
use insiderlab::density_lab::simulate_lab_range;
use insiderlab::engine::{sample_brownian_paths, ProcessTrack, Stream, TimeGrid};
use insiderlab::factorization::FactorizationMode;
use insiderlab::honest_time::simulate_honest_time_range;

use crate::config::{RunConfig, Scenario};
use crate::error::{CliError, CliResult};

pub const TRACKS_FILE: &str = "tracks.csv";
pub const NODE_MEANS_FILE: &str = "node_means.csv";

/// Tracks of the first `output.dump_paths` paths of the configured scenario.
pub fn dump_tracks(config: &RunConfig) -> CliResult<Vec<ProcessTrack>> {
    let e = &config.engine;
    let n = config.output.dump_paths.min(e.n_paths);
    if n == 0 {
        return Ok(Vec::new());
    }
    let grid = config.grid()?;
    let tracks = match config.scenario() {
        Scenario::HonestTime(s) => {
            let p = simulate_honest_time_range(s, &grid, 0..n, e.seed, e.antithetic)?;
            vec![p.x, p.s, p.w, p.w_hat, p.alpha]
        }
        Scenario::DensityLab(s) => {
            let p = simulate_lab_range(s, &grid, 0..n, e.seed, e.antithetic)?;
            vec![p.b, p.x, p.d, p.g, p.alpha, p.m, p.r, p.r_plus]
        }
        Scenario::Factorization(s) => {
            let mut w1 =
                sample_brownian_paths(&grid, 0..n, e.seed, e.antithetic, Stream::Brownian, "W1")?;
            let mut w2 = sample_brownian_paths(
                &grid,
                0..n,
                e.seed,
                e.antithetic,
                Stream::SecondDriver,
                "W2",
            )?;
            let w1 = w1.take("W1")?;
            let w2 = w2.take("W2")?;
            let mut out = Vec::new();
            if let FactorizationMode::IndependentDrivers { sigma_u, sigma_z } = s.mode {
                let u = stochastic_exponential(&w1.map("A", |v| sigma_u * v))?.with_label("U");
                let z = stochastic_exponential(&w2.map("B", |v| sigma_z * v))?.with_label("Z");
                let uz = u.zip_with(&z, "UZ", |a, b| a * b)?;
                out.extend([u, z, uz]);
            }
            out.insert(0, w2);
            out.insert(0, w1);
            out
        }
    };
    Ok(tracks)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Consistency(format!("csv encoding of {}: {other:?}", path.display())),
    }
}

/// Writes `path,node,t,<labels...>`.
pub fn write_tracks(path: &Path, grid: &TimeGrid, tracks: &[ProcessTrack]) -> CliResult<()> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    let mut header = vec!["path".to_string(), "node".into(), "t".into()];
    header.extend(tracks.iter().map(|t| t.label().to_string()));
    w.write_record(&header).map_err(&err)?;
    let n_paths = tracks.first().map_or(0, |t| t.n_paths());
    for p in 0..n_paths {
        for i in 0..grid.n_nodes() {
            let mut row = vec![p.to_string(), i.to_string(), grid.node(i).to_string()];
            row.extend(tracks.iter().map(|t| t.get(p, i).to_string()));
            w.write_record(&row).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes `node,t,<labels...>` with the cross-path mean of every track.
pub fn write_node_means(path: &Path, grid: &TimeGrid, tracks: &[ProcessTrack]) -> CliResult<()> {
    let err = csv_err(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    let mut header = vec!["node".to_string(), "t".into()];
    header.extend(tracks.iter().map(|t| t.label().to_string()));
    w.write_record(&header).map_err(&err)?;
    for i in 0..grid.n_nodes() {
        let mut row = vec![i.to_string(), grid.node(i).to_string()];
        for t in tracks {
            let mean = t.column(i).iter().sum::<f64>() / t.n_paths().max(1) as f64;
            row.push(mean.to_string());
        }
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes both dump files into `dir`; nothing when dumps are disabled.
pub fn write_dumps(config: &RunConfig, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let tracks = dump_tracks(config)?;
    if tracks.is_empty() {
        return Ok(Vec::new());
    }
    let grid = config.grid()?;
    let full = dir.join(TRACKS_FILE);
    let means = dir.join(NODE_MEANS_FILE);
    write_tracks(&full, &grid, &tracks)?;
    write_node_means(&means, &grid, &tracks)?;
    Ok(vec![full, means])
}
