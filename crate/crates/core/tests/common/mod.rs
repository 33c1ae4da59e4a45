//! Independent oracles shared by the integration tests. Nothing here calls
//! the routine it is used to check.

#![allow(dead_code)]

use madp::ndtensor::{Tape, Tensor, Var};
use madp::rng::{keyed_rng, Stream};
use madp::world::{ImportanceField, Rect, WorldConfig};
use madp::Point;
use rand::seq::SliceRandom;
use rand::Rng;

/// Coverage cost straight from the definition: every cell's importance
/// times the squared distance of its center to the nearest robot, times the
/// cell area.
pub fn brute_cost(positions: &[Point<f64>], field: &ImportanceField<f64>) -> f64 {
    let n = field.cells();
    let res = field.resolution();
    let mut total = 0.0;
    for iy in 0..n {
        for ix in 0..n {
            let c = [(ix as f64 + 0.5) * res, (iy as f64 + 0.5) * res];
            let d = positions
                .iter()
                .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                .fold(f64::INFINITY, f64::min);
            total += field.values()[iy * n + ix] * d;
        }
    }
    total * res * res
}

/// Connected-component labels by breadth-first search over the
/// `distance ≤ radius` graph, computed from scratch.
pub fn bfs_components(positions: &[Point<f64>], radius: f64) -> Vec<usize> {
    let n = positions.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([s]);
        label[s] = next;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                let d = ((positions[i][0] - positions[j][0]).powi(2) + (positions[i][1] - positions[j][1]).powi(2)).sqrt();
                if label[j] == usize::MAX && d <= radius {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    label
}

/// Random field and uniform positions on the small world.
pub fn desk_instance(seed: u64, n: usize) -> (WorldConfig, ImportanceField<f64>, Vec<Point<f64>>) {
    let cfg = WorldConfig { num_robots: n, ..WorldConfig::desk() };
    let mut rng = keyed_rng(seed, Stream::Field, &[0xACCE]);
    let field = ImportanceField::generate(&cfg, &mut rng);
    let pos = Rect::square(cfg.side_length).sample(n, &mut rng);
    (cfg, field, pos)
}

/// Central-difference check of the tape gradient of `f` with respect to
/// every input. Returns the worst relative error over inputs, measured as
/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` per input tensor.
pub fn gradcheck(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).expect("scalar output");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let eval = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs);
        t.value(o).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut na2 = 0.0;
        let mut nf2 = 0.0;
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = g.data()[e];
            diff2 += (a - fd) * (a - fd);
            na2 += a * a;
            nf2 += fd * fd;
        }
        let denom = na2.sqrt().max(nf2.sqrt());
        if denom > 1e-10 {
            worst = worst.max(diff2.sqrt() / denom);
        }
    }
    worst
}

/// Uniform entries in `±[lo, hi]` with random sign, keeping inputs away from
/// the kink of piecewise-linear functions.
pub fn away_from_zero<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

pub fn uniform<R: Rng>(shape: &[usize], a: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

/// Two-sample energy statistic for 1-D samples, `2E|X−Y| − E|X−X'| − E|Y−Y'|`,
/// via sorted prefix sums in `O(n log n)`.
pub fn energy_statistic(x: &[f64], y: &[f64]) -> f64 {
    // Σ_{i<j} |a_i − a_j| for sorted a
    fn within(a: &[f64]) -> f64 {
        let mut prefix = 0.0;
        let mut s = 0.0;
        for (i, &v) in a.iter().enumerate() {
            s += v * i as f64 - prefix;
            prefix += v;
        }
        s
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = xs.iter().chain(&ys).copied().collect();
    all.sort_by(f64::total_cmp);
    let (wx, wy, wall) = (within(&xs), within(&ys), within(&all));
    let between = wall - wx - wy;
    let (n, m) = (x.len() as f64, y.len() as f64);
    2.0 * between / (n * m) - 2.0 * wx / (n * n) - 2.0 * wy / (m * m)
}

/// Permutation p-value of the energy statistic.
pub fn energy_test_p_value(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> f64 {
    let observed = energy_statistic(x, y);
    let mut pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let mut rng = keyed_rng(seed, Stream::Shuffle, &[0xE7E7]);
    let mut at_least = 0;
    for _ in 0..permutations {
        pooled.shuffle(&mut rng);
        let (a, b) = pooled.split_at(x.len());
        if energy_statistic(a, b) >= observed {
            at_least += 1;
        }
    }
    (at_least + 1) as f64 / (permutations + 1) as f64
}

/// Sample mean and unbiased variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

/// Inverse of a permutation.
pub fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}
