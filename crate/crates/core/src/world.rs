//! Coverage-control environment: importance density field, single-integrator
//! robots with square field-of-view sensing, and the range-limited
//! communication graph.

use std::collections::VecDeque;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::{clamp_norm, scalar::dist2, Point, Scalar};

/// Scenario parameters. Lengths are in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub side_length: f64,
    /// Meters per grid cell.
    pub resolution: f64,
    pub num_robots: usize,
    pub num_features: usize,
    pub sigma_range: [f64; 2],
    pub peak_range: [f64; 2],
    /// Gaussian features are cut off beyond this many standard deviations.
    pub truncation: f64,
    /// Side of the square sensed around each robot.
    pub sensor_fov: f64,
    /// Side of the square local map each robot observes.
    pub local_map_span: f64,
    pub comm_radius: f64,
    /// Speed bound, meters per step.
    pub u_max: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            side_length: 1024.0,
            resolution: 1.0,
            num_robots: 32,
            num_features: 32,
            sigma_range: [40.0, 60.0],
            peak_range: [0.6, 1.0],
            truncation: 2.0,
            sensor_fov: 64.0,
            local_map_span: 256.0,
            comm_radius: 256.0,
            u_max: 5.0,
            dt: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Small world used for tests and quick experiments: 256 m at 4 m per
    /// cell, four robots and four features.
    pub fn desk() -> Self {
        Self { side_length: 256.0, resolution: 4.0, num_robots: 4, num_features: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.side_length > 0.0 && self.resolution > 0.0) {
            return bad("side_length and resolution must be positive");
        }
        let cells = self.side_length / self.resolution;
        if (cells - cells.round()).abs() > 1e-9 {
            return bad("side_length must be divisible by resolution");
        }
        if !(self.sensor_fov > 0.0 && self.sensor_fov <= self.local_map_span && self.local_map_span <= self.side_length) {
            return bad("require 0 < sensor_fov <= local_map_span <= side_length");
        }
        if !(self.sigma_range[0] > 0.0 && self.sigma_range[0] <= self.sigma_range[1]) {
            return bad("require 0 < sigma_min <= sigma_max");
        }
        let [p0, p1] = self.peak_range;
        if !(p0 > 0.0 && p0 <= p1 && p1 <= 1.0) {
            return bad("peak_range must lie within (0, 1] with min <= max");
        }
        if !(self.truncation > 0.0 && self.u_max >= 0.0 && self.dt > 0.0 && self.comm_radius >= 0.0) {
            return bad("truncation and dt must be positive; u_max and comm_radius non-negative");
        }
        if self.num_robots == 0 {
            return bad("num_robots must be at least 1");
        }
        Ok(())
    }

    /// Cells per side.
    pub fn grid_cells(&self) -> usize {
        (self.side_length / self.resolution).round() as usize
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One isotropic, truncated Gaussian bump of importance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFeature {
    pub mean: [f64; 2],
    pub sigma: f64,
    /// Value at the mean.
    pub peak: f64,
}

impl GaussianFeature {
    /// Draws the means uniformly over the world, `sigma ~ U(sigma_range)` and
    /// `peak ~ U(peak_range)`.
    pub fn sample<R: Rng + ?Sized>(config: &WorldConfig, rng: &mut R) -> Self {
        let side = config.side_length;
        let uni = |rng: &mut R, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let mean = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        let sigma = uni(rng, config.sigma_range);
        let peak = uni(rng, config.peak_range);
        Self { mean, sigma, peak }
    }
}

/// Importance density sampled at the centers of a square grid of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceField<S> {
    cells: usize,
    resolution: S,
    values: Vec<S>,
}

impl<S: Scalar> ImportanceField<S> {
    pub fn zeros(config: &WorldConfig) -> Self {
        let n = config.grid_cells();
        Self { cells: n, resolution: S::of(config.resolution), values: vec![S::zero(); n * n] }
    }

    /// Builds a field from raw row-major cell values (`values[iy * n + ix]`).
    pub fn from_values(config: &WorldConfig, values: Vec<S>) -> Result<Self> {
        let n = config.grid_cells();
        if values.len() != n * n {
            return Err(Error::Shape(format!("field needs {} values, got {}", n * n, values.len())));
        }
        if values.iter().any(|v| !(*v >= S::zero())) {
            return Err(contract_err!("importance values must be non-negative"));
        }
        Ok(Self { cells: n, resolution: S::of(config.resolution), values })
    }

    /// Samples `num_features` features and sums them.
    pub fn generate<R: Rng + ?Sized>(config: &WorldConfig, rng: &mut R) -> Self {
        let features: Vec<_> = (0..config.num_features).map(|_| GaussianFeature::sample(config, rng)).collect();
        Self::from_features(config, &features)
    }

    /// Sums truncated Gaussians (no renormalization), clamped to be non-negative.
    pub fn from_features(config: &WorldConfig, features: &[GaussianFeature]) -> Self {
        let mut field = Self::zeros(config);
        let n = field.cells;
        let res = config.resolution;
        for f in features {
            let cutoff = config.truncation * f.sigma;
            let inv = 1.0 / (2.0 * f.sigma * f.sigma);
            let lo = |c: f64| (((c - cutoff) / res - 0.5).floor().max(0.0)) as usize;
            let hi = |c: f64| ((((c + cutoff) / res - 0.5).ceil() + 1.0).max(0.0) as usize).min(n);
            for iy in lo(f.mean[1])..hi(f.mean[1]) {
                let vy = (iy as f64 + 0.5) * res;
                for ix in lo(f.mean[0])..hi(f.mean[0]) {
                    let vx = (ix as f64 + 0.5) * res;
                    let d2 = (vx - f.mean[0]).powi(2) + (vy - f.mean[1]).powi(2);
                    if d2 <= cutoff * cutoff {
                        field.values[iy * n + ix] += S::of(f.peak * (-d2 * inv).exp());
                    }
                }
            }
        }
        for v in &mut field.values {
            *v = v.max(S::zero());
        }
        field
    }

    /// Reads point features from CSV rows `x,y[,sigma][,peak]`. A header line
    /// is skipped if present. Missing sigma/peak default to the midpoints of
    /// the configured ranges.
    pub fn from_point_csv<Rd: Read>(config: &WorldConfig, reader: Rd) -> Result<Self> {
        Ok(Self::from_features(config, &read_point_features(config, reader)?))
    }

    pub fn from_point_csv_file(config: &WorldConfig, path: &Path) -> Result<Self> {
        Self::from_point_csv(config, std::fs::File::open(path)?)
    }

    /// Cells per side.
    #[inline]
    pub fn cells(&self) -> usize {
        self.cells
    }

    #[inline]
    pub fn resolution(&self) -> S {
        self.resolution
    }

    #[inline]
    pub fn values(&self) -> &[S] {
        &self.values
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> S {
        self.values[iy * self.cells + ix]
    }

    #[inline]
    pub fn cell_center(&self, idx: usize) -> Point<S> {
        let half = S::of(0.5);
        [
            (S::of_usize(idx % self.cells) + half) * self.resolution,
            (S::of_usize(idx / self.cells) + half) * self.resolution,
        ]
    }

    pub fn cell_area(&self) -> S {
        self.resolution * self.resolution
    }

    /// Index of the cell whose center is closest to the maximum value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn scaled(&self, k: S) -> Self {
        Self { cells: self.cells, resolution: self.resolution, values: self.values.iter().map(|&v| v * k).collect() }
    }

    pub fn max_value(&self) -> S {
        self.values.iter().copied().fold(S::zero(), S::max)
    }

    /// Cell index containing `p`, clamped to the grid.
    pub fn cell_of(&self, p: Point<S>) -> (usize, usize) {
        let n = self.cells as isize;
        let ix = (p[0] / self.resolution).floor().to_isize().unwrap_or(0).clamp(0, n - 1);
        let iy = (p[1] / self.resolution).floor().to_isize().unwrap_or(0).clamp(0, n - 1);
        (ix as usize, iy as usize)
    }
}

fn read_point_features<Rd: Read>(config: &WorldConfig, reader: Rd) -> Result<Vec<GaussianFeature>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let default_sigma = 0.5 * (config.sigma_range[0] + config.sigma_range[1]);
    let default_peak = 0.5 * (config.peak_range[0] + config.peak_range[1]);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let nums: Vec<Option<f64>> = rec.iter().map(|f| f.parse::<f64>().ok()).collect();
        if line == 0 && nums.first().copied().flatten().is_none() {
            continue;
        }
        if rec.len() < 2 || rec.len() > 4 || nums.iter().any(Option::is_none) {
            return Err(Error::Format(format!("point CSV line {}: expected x,y[,sigma][,peak]", line + 1)));
        }
        let v: Vec<f64> = nums.into_iter().flatten().collect();
        let f = GaussianFeature {
            mean: [v[0], v[1]],
            sigma: v.get(2).copied().unwrap_or(default_sigma),
            peak: v.get(3).copied().unwrap_or(default_peak),
        };
        if !(f.sigma > 0.0 && f.peak >= 0.0) {
            return Err(Error::Format(format!("point CSV line {}: sigma must be > 0 and peak >= 0", line + 1)));
        }
        out.push(f);
    }
    Ok(out)
}

/// Robot positions plus each robot's private exploration history.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState<S> {
    config: WorldConfig,
    positions: Vec<Point<S>>,
    explored: Vec<Vec<bool>>,
    known: Vec<Vec<S>>,
    t: usize,
}

impl<S: Scalar> SwarmState<S> {
    /// Places robots at `positions` (clamped into the world) and performs the
    /// initial sensing pass.
    pub fn new(config: &WorldConfig, positions: Vec<Point<S>>, field: &ImportanceField<S>) -> Result<Self> {
        if positions.is_empty() {
            return Err(contract_err!("a swarm needs at least one robot"));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(contract_err!("robot positions must be finite"));
        }
        let n = config.grid_cells();
        if field.cells() != n {
            return Err(Error::Shape(format!("field has {} cells per side, config {}", field.cells(), n)));
        }
        let side = S::of(config.side_length);
        let positions = positions.into_iter().map(|p| clamp_box(p, side)).collect::<Vec<_>>();
        let r = positions.len();
        let mut s = Self {
            config: config.clone(),
            positions,
            explored: vec![vec![false; n * n]; r],
            known: vec![vec![S::zero(); n * n]; r],
            t: 0,
        };
        s.sense(field);
        Ok(s)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn positions(&self) -> &[Point<S>] {
        &self.positions
    }

    pub fn num_robots(&self) -> usize {
        self.positions.len()
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn explored(&self, robot: usize) -> &[bool] {
        &self.explored[robot]
    }

    /// The robot's own map: true importance on cells it has sensed, 0 elsewhere.
    pub fn known_idf(&self, robot: usize) -> &[S] {
        &self.known[robot]
    }

    pub fn explored_count(&self, robot: usize) -> usize {
        self.explored[robot].iter().filter(|&&e| e).count()
    }

    /// Applies velocity `actions` for one time step: each action is scaled
    /// into the speed bound, positions are integrated and clamped to the
    /// world, then every robot senses at its new position.
    pub fn step(&mut self, actions: &[Point<S>], field: &ImportanceField<S>) -> Result<()> {
        if actions.len() != self.positions.len() {
            return Err(Error::Shape(format!("{} actions for {} robots", actions.len(), self.positions.len())));
        }
        if actions.iter().flatten().any(|v| v.is_nan()) {
            return Err(contract_err!("NaN action"));
        }
        let (u_max, dt, side) = (S::of(self.config.u_max), S::of(self.config.dt), S::of(self.config.side_length));
        for (p, &u) in self.positions.iter_mut().zip(actions) {
            let u = clamp_norm(finite_or_clamped(u, u_max), u_max);
            *p = clamp_box([p[0] + dt * u[0], p[1] + dt * u[1]], side);
        }
        self.t += 1;
        self.sense(field);
        Ok(())
    }

    /// Marks the field-of-view square around each robot as explored and copies
    /// the true importance there into that robot's map.
    pub fn sense(&mut self, field: &ImportanceField<S>) {
        let n = field.cells();
        let res = S::of(self.config.resolution);
        let half = S::of(self.config.sensor_fov / 2.0);
        let span = |c: S| -> (usize, usize) {
            let lo = ((c - half) / res - S::of(0.5)).ceil().max(S::zero());
            let hi = ((c + half) / res - S::of(0.5)).ceil().max(S::zero());
            (lo.to_usize().unwrap_or(0).min(n), hi.to_usize().unwrap_or(0).min(n))
        };
        for (r, p) in self.positions.iter().enumerate() {
            let (x0, x1) = span(p[0]);
            let (y0, y1) = span(p[1]);
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let idx = iy * n + ix;
                    self.explored[r][idx] = true;
                    self.known[r][idx] = field.values()[idx];
                }
            }
        }
    }
}

/// Infinite components are treated as saturating in their direction.
fn finite_or_clamped<S: Scalar>(u: Point<S>, u_max: S) -> Point<S> {
    if u[0].is_finite() && u[1].is_finite() {
        return u;
    }
    let f = |v: S| if v.is_infinite() { v.signum() * u_max } else { S::zero() };
    if u[0].is_infinite() || u[1].is_infinite() {
        [f(u[0]), f(u[1])]
    } else {
        u
    }
}

fn clamp_box<S: Scalar>(p: Point<S>, side: S) -> Point<S> {
    [p[0].max(S::zero()).min(side), p[1].max(S::zero()).min(side)]
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]` used to draw start positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Rect {
    pub fn square(side: f64) -> Self {
        Self { x: [0.0, side], y: [0.0, side] }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x[0] && p[0] <= self.x[1] && p[1] >= self.y[0] && p[1] <= self.y[1]
    }

    /// `n` independent uniform points in the rectangle.
    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point<S>> {
        let uni = |rng: &mut R, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        (0..n).map(|_| [S::of(uni(rng, self.x)), S::of(uni(rng, self.y))]).collect()
    }
}

/// Communication graph: an edge joins two distinct robots at most `radius` apart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    neighbors: Vec<Vec<usize>>,
    component: Vec<usize>,
    num_components: usize,
}

impl CommGraph {
    pub fn build<S: Scalar>(positions: &[Point<S>], radius: S) -> Self {
        let n = positions.len();
        let r2 = radius * radius;
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if dist2(positions[i], positions[j]) <= r2 {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        let mut component = vec![usize::MAX; n];
        let mut label = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            component[start] = label;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &v in &neighbors[u] {
                    if component[v] == usize::MAX {
                        component[v] = label;
                        queue.push_back(v);
                    }
                }
            }
            label += 1;
        }
        Self { neighbors, component, num_components: label }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// One-hop neighbors of `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn component(&self, i: usize) -> usize {
        self.component[i]
    }

    pub fn components(&self) -> &[usize] {
        &self.component
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}
