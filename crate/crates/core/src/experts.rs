//! Voronoi baselines: the clairvoyant (centralized, full field) expert and
//! the decentralized variant that only knows one-hop neighbors and its own
//! sensing history.
//!
//! Both are one discrete Lloyd step per environment step: head for the
//! importance-weighted centroid of the robot's cell, at most `u_max`.

use crate::coverage::{centroid_for, Grid, Tessellation};
use crate::error::Result;
use crate::world::{CommGraph, ImportanceField, SwarmState};
use crate::{clamp_norm, Point, Scalar};

fn chase<S: Scalar>(from: Point<S>, to: Point<S>, u_max: S, dt: S) -> Point<S> {
    clamp_norm([(to[0] - from[0]) / dt, (to[1] - from[1]) / dt], u_max)
}

/// Velocity of every robot toward its weighted centroid under the true field.
pub fn clairvoyant_action<S: Scalar>(
    positions: &[Point<S>],
    field: &ImportanceField<S>,
    u_max: S,
    dt: S,
) -> Result<Vec<Point<S>>> {
    let tess = Tessellation::new(positions, Grid::of_field(field))?;
    let centroids = tess.weighted_centroids(field);
    Ok(positions.iter().zip(centroids).map(|(&x, c)| chase(x, c, u_max, dt)).collect())
}

/// Decentralized CVT: robot `i` tessellates with its own and its one-hop
/// neighbors' positions, weighted by its own known importance map.
pub fn dcvt_action<S: Scalar>(state: &SwarmState<S>, graph: &CommGraph) -> Vec<Point<S>> {
    let cfg = state.config();
    let grid = Grid { cells: cfg.grid_cells(), resolution: S::of(cfg.resolution) };
    let (u_max, dt) = (S::of(cfg.u_max), S::of(cfg.dt));
    let all = state.positions();
    (0..all.len())
        .map(|i| {
            let mut local = Vec::with_capacity(graph.neighbors(i).len() + 1);
            local.push(all[i]);
            local.extend(graph.neighbors(i).iter().map(|&j| all[j]));
            let c = centroid_for(&local, 0, grid, state.known_idf(i));
            chase(all[i], c, u_max, dt)
        })
        .collect()
}
