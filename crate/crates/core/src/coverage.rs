//! Grid Voronoi tessellation and the coverage cost.
//!
//! The tessellation is evaluated on the same cell grid as the importance
//! field, so the cost of a tessellation and the direct per-cell minimum over
//! robots are the same sum.

use crate::error::{contract_err, Result};
use crate::scalar::dist2;
use crate::world::ImportanceField;
use crate::{Point, Scalar};

/// Square cell grid geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid<S> {
    pub cells: usize,
    pub resolution: S,
}

impl<S: Scalar> Grid<S> {
    pub fn of_field(field: &ImportanceField<S>) -> Self {
        Self { cells: field.cells(), resolution: field.resolution() }
    }

    #[inline]
    pub fn center(&self, idx: usize) -> Point<S> {
        let half = S::of(0.5);
        [
            (S::of_usize(idx % self.cells) + half) * self.resolution,
            (S::of_usize(idx / self.cells) + half) * self.resolution,
        ]
    }

    pub fn len(&self) -> usize {
        self.cells * self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells == 0
    }
}

/// Nearest robot for `p`, lowest index on ties, with its squared distance.
#[inline]
fn nearest<S: Scalar>(positions: &[Point<S>], p: Point<S>) -> (usize, S) {
    let mut best = 0;
    let mut best_d = dist2(positions[0], p);
    for (i, &x) in positions.iter().enumerate().skip(1) {
        let d = dist2(x, p);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Assignment of every grid cell to its nearest robot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tessellation<S> {
    grid: Grid<S>,
    positions: Vec<Point<S>>,
    owner: Vec<u32>,
}

impl<S: Scalar> Tessellation<S> {
    pub fn new(positions: &[Point<S>], grid: Grid<S>) -> Result<Self> {
        if positions.is_empty() {
            return Err(contract_err!("tessellation needs at least one robot"));
        }
        let owner = (0..grid.len()).map(|c| nearest(positions, grid.center(c)).0 as u32).collect();
        Ok(Self { grid, positions: positions.to_vec(), owner })
    }

    pub fn grid(&self) -> Grid<S> {
        self.grid
    }

    pub fn positions(&self) -> &[Point<S>] {
        &self.positions
    }

    #[inline]
    pub fn owner(&self, cell: usize) -> usize {
        self.owner[cell] as usize
    }

    /// Importance mass of each robot's cell.
    pub fn masses(&self, field: &ImportanceField<S>) -> Vec<S> {
        let mut m = vec![S::zero(); self.positions.len()];
        for (c, &phi) in field.values().iter().enumerate() {
            m[self.owner[c] as usize] += phi;
        }
        let area = field.cell_area();
        m.iter_mut().for_each(|v| *v *= area);
        m
    }

    /// Importance-weighted centroid of each robot's cell. A cell with zero mass
    /// yields the robot's own position.
    pub fn weighted_centroids(&self, field: &ImportanceField<S>) -> Vec<Point<S>> {
        weighted_centroids_of(&self.owner, &self.positions, self.grid, field.values())
    }

    /// Σ over cells of squared distance to the owning robot times importance,
    /// times cell area.
    pub fn cost(&self, field: &ImportanceField<S>) -> S {
        let mut total = S::zero();
        for (c, &phi) in field.values().iter().enumerate() {
            if phi == S::zero() {
                continue;
            }
            total += dist2(self.positions[self.owner[c] as usize], self.grid.center(c)) * phi;
        }
        total * field.cell_area()
    }
}

fn weighted_centroids_of<S: Scalar>(owner: &[u32], positions: &[Point<S>], grid: Grid<S>, phi: &[S]) -> Vec<Point<S>> {
    let n = positions.len();
    let mut mass = vec![S::zero(); n];
    let mut mx = vec![S::zero(); n];
    let mut my = vec![S::zero(); n];
    for (c, &w) in phi.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let o = owner[c] as usize;
        let p = grid.center(c);
        mass[o] += w;
        mx[o] += w * p[0];
        my[o] += w * p[1];
    }
    (0..n)
        .map(|i| if mass[i] > S::zero() { [mx[i] / mass[i], my[i] / mass[i]] } else { positions[i] })
        .collect()
}

pub fn tessellate<S: Scalar>(positions: &[Point<S>], grid: Grid<S>) -> Result<Tessellation<S>> {
    Tessellation::new(positions, grid)
}

/// Coverage cost of `positions` on `field`. Zero for an empty swarm is not
/// defined; at least one robot is required.
pub fn coverage_cost<S: Scalar>(positions: &[Point<S>], field: &ImportanceField<S>) -> Result<S> {
    if positions.is_empty() {
        return Err(contract_err!("coverage cost needs at least one robot"));
    }
    let grid = Grid::of_field(field);
    let mut total = S::zero();
    for (c, &phi) in field.values().iter().enumerate() {
        if phi == S::zero() {
            continue;
        }
        total += nearest(positions, grid.center(c)).1 * phi;
    }
    Ok(total * field.cell_area())
}

/// Weighted centroid of robot `robot`'s cell in the tessellation induced by
/// `positions`, under an arbitrary per-cell weight map.
pub fn centroid_for<S: Scalar>(positions: &[Point<S>], robot: usize, grid: Grid<S>, weights: &[S]) -> Point<S> {
    let mut mass = S::zero();
    let (mut mx, mut my) = (S::zero(), S::zero());
    for (c, &w) in weights.iter().enumerate() {
        if w == S::zero() {
            continue;
        }
        let p = grid.center(c);
        if nearest(positions, p).0 == robot {
            mass += w;
            mx += w * p[0];
            my += w * p[1];
        }
    }
    if mass > S::zero() {
        [mx / mass, my / mass]
    } else {
        positions[robot]
    }
}
