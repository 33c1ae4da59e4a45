//! Acceptance suite: one check per criterion, each printing a PASS/FAIL
//! line. Runs without the libtest harness so the lines are always shown.
//!
//! Set `MADP_ACCEPTANCE_ONLY=3,7` to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use common::*;
use madp::coverage::{coverage_cost, tessellate, Grid};
use madp::diffusion::{
    ddim_sample_with, draw_loss_inputs, ExecutionMode, KeyedNoise, MadpModel, ModelConfig, NoiseSchedule,
    SamplerSettings,
};
use madp::evalharness::{
    environment, init_scenarios, run_seeds, scalability_grid, sigma_sweep, write_grid_csv, write_init_csv,
    write_sigma_csv, ClairvoyantPolicy, DcvtPolicy, MadpPolicy, Policy, RandomPolicy, Scenario,
};
use madp::experts::{clairvoyant_action, dcvt_action};
use madp::ndtensor::{Conv2dSpec, ParamStore, Tape, Tensor, Var};
use madp::perception::PerceptionConfig;
use madp::rng::{keyed_rng, normal_vec, Stream};
use madp::stformer::{build_mask, rope_phases, AttentionMask, Decoder, Encoder, STConfig};
use madp::train::{evaluation_loss, generate_dataset, GenerateConfig, TrainConfig, Trainer};
use madp::world::{CommGraph, Rect, SwarmState, WorldConfig};
use madp::Point;
use rand::seq::SliceRandom;
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_voronoi_cost_oracle() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let n = 1 + (seed as usize % 8);
        let (_, field, pos) = desk_instance(seed, n);
        let tess = tessellate(&pos, Grid::of_field(&field)).map_err(|e| e.to_string())?;
        let oracle = brute_cost(&pos, &field);
        for got in [tess.cost(&field), coverage_cost(&pos, &field).map_err(|e| e.to_string())?] {
            worst = worst.max((got - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-12, format!("relative error {worst:e}"))?;
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("100 instances, max rel err {worst:.1e}, {secs:.2}s"))
}

fn c2_lloyd_descent() -> Check {
    let mut worst_increase = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let (cfg, field, pos) = desk_instance(1000 + seed, 4);
        let mut state = SwarmState::new(&cfg, pos, &field).map_err(|e| e.to_string())?;
        let mut prev = coverage_cost(state.positions(), &field).map_err(|e| e.to_string())?;
        for _ in 0..200 {
            let u = clairvoyant_action(state.positions(), &field, cfg.u_max, cfg.dt).map_err(|e| e.to_string())?;
            state.step(&u, &field).map_err(|e| e.to_string())?;
            let c = coverage_cost(state.positions(), &field).map_err(|e| e.to_string())?;
            worst_increase = worst_increase.max(c - prev);
            prev = c;
        }
    }
    ensure(worst_increase <= 1e-9, format!("cost rose by {worst_increase:e}"))?;
    Ok(format!("20 seeds x 200 steps, largest step change {worst_increase:.3e}"))
}

fn c3_forward_marginals() -> Check {
    let s = NoiseSchedule::<f64>::linear(1000, 0.9999, 0.98).map_err(|e| e.to_string())?;
    let u0 = Tensor::new(&[1, 2], vec![0.6, -0.3]).unwrap();
    let draws = 100_000;
    let mut report = Vec::new();
    for k in [1, 500, 1000] {
        let mut rng = keyed_rng(11, Stream::LossNoise, &[k as u64]);
        let mut cols = [Vec::with_capacity(draws), Vec::with_capacity(draws)];
        for _ in 0..draws {
            let eps = Tensor::new(&[1, 2], normal_vec(&mut rng, 2)).unwrap();
            let uk = s.forward_sample(&u0, k, &eps).map_err(|e| e.to_string())?;
            cols[0].push(uk.data()[0]);
            cols[1].push(uk.data()[1]);
        }
        let ab = s.alpha_bar(k);
        let var = 1.0 - ab;
        for (c, v) in cols.iter().enumerate() {
            let (m, v_hat) = mean_var(v);
            let want = ab.sqrt() * u0.data()[c];
            let se_m = (var / draws as f64).sqrt();
            let se_v = var * (2.0 / (draws - 1) as f64).sqrt();
            let (zm, zv) = ((m - want).abs() / se_m, (v_hat - var).abs() / se_v);
            ensure(zm <= 3.0 && zv <= 3.0, format!("k={k} coord {c}: mean z {zm:.2}, var z {zv:.2}"))?;
            report.push(zm.max(zv));
        }
    }
    let worst = report.iter().copied().fold(0.0, f64::max);
    Ok(format!("k in {{1, 500, 1000}}, 1e5 draws, worst z-score {worst:.2}"))
}

fn c4_ddim() -> Check {
    // bit reproducibility of the deterministic path through the network
    let model = MadpModel::<f64>::new(ModelConfig::desk(), 3).map_err(|e| e.to_string())?;
    let pos: Vec<Point<f64>> = vec![[20.0, 40.0], [100.0, 90.0], [200.0, 10.0]];
    let tokens = uniform(&[3, 34], 1.0, &mut keyed_rng(4, Stream::Init, &[]));
    let mask = AttentionMask::full(3);
    let noise = KeyedNoise { seed: 5, t: 0, ids: vec![0, 1, 2] };
    let settings = SamplerSettings { steps: 20, eta: 0.0, mode: ExecutionMode::Centralized, clip: Some(1.0) };
    let a = model.sample(&tokens, &pos, &mask, &noise, &settings).map_err(|e| e.to_string())?;
    let b = model.sample(&tokens, &pos, &mask, &noise, &settings).map_err(|e| e.to_string())?;
    ensure(a == b, "eta = 0 sampling is not reproducible")?;
    // a different prior must change the result, otherwise the check is vacuous
    let other = KeyedNoise { seed: 6, ..noise.clone() };
    let c = model.sample(&tokens, &pos, &mask, &other, &settings).map_err(|e| e.to_string())?;
    ensure(a != c, "sampler ignores its prior")?;

    // analytic toy: U0 ~ N(m, s^2) in one dimension
    let sched = NoiseSchedule::<f64>::linear(1000, 0.9999, 0.98).map_err(|e| e.to_string())?;
    let (m, sd) = (0.5, 0.3);
    let eps_star = |u: f64, k: usize| {
        let ab = sched.alpha_bar(k);
        (1.0 - ab).sqrt() * (u - ab.sqrt() * m) / (ab * sd * sd + 1.0 - ab)
    };
    let n = 10_000;
    let prior = Tensor::new(&[n, 1], normal_vec(&mut keyed_rng(1, Stream::Prior, &[]), n)).unwrap();
    let subset = sched.ddim_subset(1000).map_err(|e| e.to_string())?;
    let mut noise_rng = keyed_rng(1, Stream::SamplerNoise, &[]);
    let ddim = ddim_sample_with(
        &sched,
        &subset,
        1.0,
        prior,
        |_| Tensor::new(&[n, 1], normal_vec(&mut noise_rng, n)).unwrap(),
        |u, k| Ok(u.map(|x| eps_star(x, k))),
    )
    .map_err(|e| e.to_string())?;
    let eta0 = |seed| {
        let prior = Tensor::new(&[n, 1], normal_vec(&mut keyed_rng(seed, Stream::Prior, &[]), n)).unwrap();
        ddim_sample_with(&sched, &subset, 0.0, prior, |_| unreachable!(), |u, k| Ok(u.map(|x| eps_star(x, k)))).unwrap()
    };
    ensure(eta0(2) == eta0(2), "toy eta = 0 run not reproducible")?;

    // ancestral sampler written from the posterior q(U_{k-1} | U_k, U0)
    let mut rng = keyed_rng(2, Stream::Prior, &[0xA]);
    let mut ancestral = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: f64 = normal_vec::<f64, _>(&mut rng, 1)[0];
        for k in (1..=1000).rev() {
            let (ab, ab_prev, a) = (sched.alpha_bar(k), sched.alpha_bar(k - 1), sched.alpha(k));
            let beta = 1.0 - a;
            let x0 = (x - (1.0 - ab).sqrt() * eps_star(x, k)) / ab.sqrt();
            let mean = ab_prev.sqrt() * beta / (1.0 - ab) * x0 + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * x;
            let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
            let z: f64 = normal_vec::<f64, _>(&mut rng, 1)[0];
            x = mean + var.sqrt() * z;
        }
        ancestral.push(x);
    }
    let p = energy_test_p_value(ddim.data(), &ancestral, 499, 7);
    ensure(p > 0.01, format!("energy test p = {p:.4}"))?;
    let (dm, dv) = mean_var(ddim.data());
    Ok(format!("eta=0 bit-identical; eta=1 vs ancestral energy p = {p:.3} (DDIM mean {dm:.3}, sd {:.3})", dv.sqrt()))
}

struct EquivarianceFixture {
    store: ParamStore<f64>,
    enc: Encoder,
    dec: Decoder,
    cfg: STConfig,
}

fn equivariance_fixture() -> EquivarianceFixture {
    let cfg = STConfig::desk();
    let mut rng = keyed_rng(21, Stream::Init, &[]);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", 34, &cfg, &mut rng).unwrap();
    let dec = Decoder::new(&mut store, "dec", 2, &cfg, &mut rng).unwrap();
    EquivarianceFixture { store, enc, dec, cfg }
}

fn rows_permuted(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

fn c5_equivariance() -> Check {
    let fx = equivariance_fixture();
    let mut worst = [0.0f64; 4];
    let radius = 256.0;
    for &n in &[1usize, 2, 4, 8, 32] {
        for trial in 0..50u64 {
            let mut rng = keyed_rng(trial, Stream::Validation, &[n as u64]);
            let pos: Vec<Point<f64>> =
                (0..n).map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]).collect();
            let comm = rng.random_range(40.0..200.0);
            let graph = CommGraph::build(&pos, comm);
            let mask = build_mask(&pos, &graph, radius).unwrap();
            let tokens = uniform(&[n, 34], 1.0, &mut rng);
            let u = uniform(&[n, 2], 2.0, &mut rng);
            let k = rng.random_range(1..=1000usize);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let ppos: Vec<_> = perm.iter().map(|&i| pos[i]).collect();
            let pgraph = CommGraph::build(&ppos, comm);
            let pmask = build_mask(&ppos, &pgraph, radius).unwrap();

            let run = |tok: &Tensor<f64>, pos: &[Point<f64>], mask: &AttentionMask, u: &Tensor<f64>| {
                let mut tape = Tape::new();
                let p = fx.store.bind(&mut tape, false);
                let rope = rope_phases(pos, fx.cfg.head_dim, fx.cfg.rope_period).unwrap();
                let t = tape.constant(tok.clone());
                let mut attn = Vec::new();
                let c = fx.enc.forward(&mut tape, &p, t, &rope, mask, Some(&mut attn)).unwrap();
                let uv = tape.constant(u.clone());
                let e = fx.dec.forward(&mut tape, &p, uv, c, &rope, mask, &vec![k; pos.len()]).unwrap();
                let attn: Vec<Tensor<f64>> = attn.iter().map(|&a| tape.value(a).clone()).collect();
                (tape.value(c).clone(), tape.value(e).clone(), attn)
            };
            let (c, e, attn) = run(&tokens, &pos, &mask, &u);
            let (pc, pe, _) = run(&rows_permuted(&tokens, &perm), &ppos, &pmask, &rows_permuted(&u, &perm));
            worst[0] = worst[0].max(pc.max_abs_diff(&rows_permuted(&c, &perm)));
            worst[1] = worst[1].max(pe.max_abs_diff(&rows_permuted(&e, &perm)));

            // experts
            let (cfg, field, _) = desk_instance(trial, n);
            let ca = clairvoyant_action(&pos, &field, cfg.u_max, cfg.dt).unwrap();
            let pca = clairvoyant_action(&ppos, &field, cfg.u_max, cfg.dt).unwrap();
            let state = SwarmState::new(&cfg, pos.clone(), &field).unwrap();
            let pstate = SwarmState::new(&cfg, ppos.clone(), &field).unwrap();
            let da = dcvt_action(&state, &CommGraph::build(&pos, cfg.comm_radius));
            let pda = dcvt_action(&pstate, &CommGraph::build(&ppos, cfg.comm_radius));
            for (i, &j) in perm.iter().enumerate() {
                for (a, b) in [(pca[i], ca[j]), (pda[i], da[j])] {
                    worst[2] = worst[2].max((a[0] - b[0]).abs().max((a[1] - b[1]).abs()));
                }
            }

            // shift: every attention matrix is unchanged
            let shift = rng.random_range(-500.0..500.0);
            let spos: Vec<_> = pos.iter().map(|p| [p[0] + shift, p[1] + shift]).collect();
            let (_, _, sattn) = run(&tokens, &spos, &mask, &u);
            for (a, b) in attn.iter().zip(&sattn) {
                worst[3] = worst[3].max(a.max_abs_diff(b));
            }
        }
    }
    let names = ["encoder perm", "decoder perm", "expert perm", "attention shift"];
    for (w, name) in worst.iter().zip(names) {
        ensure(*w <= 1e-9, format!("{name}: deviation {w:e}"))?;
    }
    Ok(format!(
        "250 configs; max deviations enc {:.1e}, dec {:.1e}, experts {:.1e}, shift {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn c6_gradients() -> Check {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let h = 1e-5;
    let mut record = |name: &'static str, e: f64| {
        if let Some(w) = worst.iter_mut().find(|w| w.0 == name) {
            w.1 = w.1.max(e);
        } else {
            worst.push((name, e));
        }
    };
    // projects an output onto a fixed random tensor to get a scalar
    fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
        let w = uniform(tape.shape(out), 1.0, &mut keyed_rng(seed, Stream::Validation, &[0xF0]));
        let w = tape.constant(w);
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    }
    for trial in 0..100u64 {
        let mut rng = keyed_rng(trial, Stream::Init, &[0x6A]);
        let (m, n, k) = (rng.random_range(1..5usize), rng.random_range(1..5usize), rng.random_range(1..5usize));
        let a = uniform(&[m, n], 1.0, &mut rng);
        let b = uniform(&[m, n], 1.0, &mut rng);
        let bmat = uniform(&[n, k], 1.0, &mut rng);
        let row = uniform(&[n], 1.0, &mut rng);
        let side = uniform(&[m, k], 1.0, &mut rng);
        let s = trial;

        record("add", gradcheck(&[a.clone(), b.clone()], h, |t, v| { let o = t.add(v[0], v[1]).unwrap(); project(t, o, s) }));
        record("sub", gradcheck(&[a.clone(), b.clone()], h, |t, v| { let o = t.sub(v[0], v[1]).unwrap(); project(t, o, s) }));
        record("mul", gradcheck(&[a.clone(), b.clone()], h, |t, v| { let o = t.mul(v[0], v[1]).unwrap(); project(t, o, s) }));
        record("scale", gradcheck(std::slice::from_ref(&a), h, |t, v| { let o = t.scale(v[0], -1.7); project(t, o, s) }));
        record("add_row", gradcheck(&[a.clone(), row.clone()], h, |t, v| { let o = t.add_row(v[0], v[1]).unwrap(); project(t, o, s) }));
        record("matmul", gradcheck(&[a.clone(), bmat.clone()], h, |t, v| { let o = t.matmul(v[0], v[1]).unwrap(); project(t, o, s) }));
        record("transpose", gradcheck(std::slice::from_ref(&a), h, |t, v| { let o = t.transpose(v[0]).unwrap(); project(t, o, s) }));
        record("reshape", gradcheck(std::slice::from_ref(&a), h, |t, v| { let o = t.reshape(v[0], &[n, m]).unwrap(); project(t, o, s) }));
        let (r0, c0) = (rng.random_range(0..m), rng.random_range(0..n));
        record("slice", gradcheck(std::slice::from_ref(&a), h, |t, v| {
            let x = t.slice(v[0], 0, r0, m - r0).unwrap();
            let y = t.slice(x, 1, c0, n - c0).unwrap();
            project(t, y, s)
        }));
        record("concat", gradcheck(&[a.clone(), b.clone(), side], h, |t, v| {
            let x = t.concat(&[v[0], v[1]], 0).unwrap();
            let y = t.concat(&[v[0], v[2]], 1).unwrap();
            let (px, py) = (project(t, x, s), project(t, y, s + 1));
            t.add(px, py).unwrap()
        }));
        let away = away_from_zero(&[m, n], 1e-2, 2.0, &mut rng);
        record("leaky_relu", gradcheck(&[away], h, |t, v| { let o = t.leaky_relu(v[0]); project(t, o, s) }));
        let wide = uniform(&[m, n + 1], 2.0, &mut rng);
        let (g, bias) = (uniform(&[n + 1], 1.5, &mut rng), uniform(&[n + 1], 1.0, &mut rng));
        record("layer_norm", gradcheck(&[wide, g, bias], h, |t, v| { let o = t.layer_norm(v[0], v[1], v[2]).unwrap(); project(t, o, s) }));
        let mask: Vec<bool> = (0..m * n).map(|i| i % n == i / n % n || rng.random::<f64>() < 0.6).collect();
        record("softmax", gradcheck(&[uniform(&[m, n], 3.0, &mut rng)], h, |t, v| {
            let o = t.softmax_rows(v[0], Some(&mask)).unwrap();
            project(t, o, s)
        }));
        let (bb, c, o) = (rng.random_range(1..3usize), rng.random_range(1..4usize), rng.random_range(1..4usize));
        let kk = rng.random_range(1..4usize);
        let (hh, ww) = (rng.random_range(kk..7usize), rng.random_range(kk..7usize));
        let spec = Conv2dSpec { stride: rng.random_range(1..3), padding: rng.random_range(0..2) };
        let (x, w, cb) = (uniform(&[bb, c, hh, ww], 1.0, &mut rng), uniform(&[o, c, kk, kk], 1.0, &mut rng), uniform(&[o], 1.0, &mut rng));
        record("conv2d", gradcheck(&[x.clone(), w, cb], h, |t, v| { let y = t.conv2d(v[0], v[1], v[2], spec).unwrap(); project(t, y, s) }));
        record("mean_pool", gradcheck(&[x], h, |t, v| { let y = t.mean_pool(v[0]).unwrap(); project(t, y, s) }));
        let pos: Vec<Point<f64>> = (0..m).map(|_| [rng.random_range(-50.0..300.0), rng.random_range(-50.0..300.0)]).collect();
        let basis = rope_phases(&pos, 8, 256.0).unwrap();
        record("rope", gradcheck(&[uniform(&[m, 8], 1.0, &mut rng)], h, |t, v| {
            let o = t.rope(v[0], basis.cos.clone(), basis.sin.clone()).unwrap();
            project(t, o, s)
        }));
        record("sum", gradcheck(std::slice::from_ref(&a), h, |t, v| { let x = t.mul(v[0], v[0]).unwrap(); t.sum(x) }));
        record("mean", gradcheck(std::slice::from_ref(&a), h, |t, v| { let x = t.mul(v[0], v[0]).unwrap(); t.mean(x) }));
        record("mse", gradcheck(&[a.clone(), b.clone()], h, |t, v| t.mse(v[0], v[1]).unwrap()));
    }

    // full DDPM loss through CNN, encoder and decoder
    let mut mc = ModelConfig::desk();
    mc.perception = PerceptionConfig { channels: [3, 3, 4], token_dim: 6, ..PerceptionConfig::default() };
    mc.transformer = STConfig { layers: 2, heads: 2, head_dim: 4, ..STConfig::desk() };
    let world = WorldConfig { num_robots: 3, ..WorldConfig::desk() };
    let gen = GenerateConfig { examples: 2, rollout_steps: 30, rows_per_rollout: 2, seed: 9, ..GenerateConfig::default() };
    let ds = generate_dataset(&world, &gen).map_err(|e| e.to_string())?;
    let batch = ds.batch(&[0, 1], 256.0).map_err(|e| e.to_string())?;
    let mut loss_worst: f64 = 0.0;
    let (mut checked, mut redraws) = (0, 0u64);
    'points: while checked < 100 {
        let point = checked + redraws;
        let mut model = MadpModel::<f64>::new(mc.clone(), point).map_err(|e| e.to_string())?;
        let mut rng = keyed_rng(point, Stream::LossNoise, &[0x77]);
        // Zero biases on mostly-empty maps put many pre-activations exactly
        // on the leaky-relu kink; check at a generic point instead.
        let biases: Vec<_> = model.store().ids().filter(|&id| model.store().name(id).ends_with("bias")).collect();
        for id in biases {
            for x in model.store_mut().get_mut(id).data_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
        let (steps, eps) = draw_loss_inputs(model.schedule(), &batch.sizes, 2, &mut rng);
        let ids: Vec<_> = model.store().ids().collect();
        let loss_at = |offset: &dyn Fn(usize, usize) -> f64| {
            let mut m = model.clone();
            for &id in &ids {
                for (e, x) in m.store_mut().get_mut(id).data_mut().iter_mut().enumerate() {
                    *x += offset(id.0, e);
                }
            }
            let mut tape = Tape::new();
            let p = m.store().bind(&mut tape, false);
            let l = m.loss_with(&mut tape, &p, &batch, &steps, &eps).unwrap();
            tape.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape, true);
        let l = model.loss_with(&mut tape, &p, &batch, &steps, &eps).map_err(|e| e.to_string())?;
        tape.backward(l).map_err(|e| e.to_string())?;
        let grads = p.grads(&tape);

        // Central difference along `dir`. A leaky-relu kink inside the
        // stencil makes the h and h/2 differences disagree far beyond their
        // O(h^2) truncation error; such a point says nothing about the
        // gradient and is replaced by a fresh one.
        let probe = |dir: &[Vec<f64>]| -> Option<f64> {
            let central = |h: f64| (loss_at(&|i, e| h * dir[i][e]) - loss_at(&|i, e| -h * dir[i][e])) / (2.0 * h);
            let (fd, fd_half) = (central(h), central(h / 2.0));
            if (fd - fd_half).abs() > 1e-5 * fd.abs() + 1e-9 {
                return None;
            }
            let analytic: f64 = grads.iter().zip(dir).flat_map(|(g, d)| g.data().iter().zip(d)).map(|(g, d)| g * d).sum();
            let denom = analytic.abs().max(fd.abs());
            Some(if denom > 1e-8 { (analytic - fd).abs() / denom } else { 0.0 })
        };
        let gnorm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        // normalized gradient plus a random unit vector, then a single coordinate
        let noise: Vec<Vec<f64>> = grads.iter().map(|g| normal_vec::<f64, _>(&mut rng, g.len())).collect();
        let nnorm = noise.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let mixed: Vec<Vec<f64>> = grads
            .iter()
            .zip(&noise)
            .map(|(g, n)| g.data().iter().zip(n).map(|(g, n)| g / gnorm + n / nnorm).collect())
            .collect();
        let id = rng.random_range(0..grads.len());
        let e = rng.random_range(0..grads[id].len());
        let coord: Vec<Vec<f64>> =
            grads.iter().enumerate().map(|(i, g)| (0..g.len()).map(|j| f64::from(u8::from(i == id && j == e))).collect()).collect();
        let mut errs = Vec::with_capacity(2);
        for dir in [mixed, coord] {
            match probe(&dir) {
                Some(err) => errs.push(err),
                None => {
                    redraws += 1;
                    if redraws > 100 {
                        return Err("too many evaluation points straddle a kink".into());
                    }
                    continue 'points;
                }
            }
        }
        loss_worst = errs.into_iter().fold(loss_worst, f64::max);
        checked += 1;
    }
    record("ddpm_loss", loss_worst);

    let bad: Vec<String> = worst.iter().filter(|w| w.1.is_nan() || w.1 >= 1e-4).map(|w| format!("{} {:.1e}", w.0, w.1)).collect();
    ensure(bad.is_empty(), format!("failing: {}", bad.join(", ")))?;
    let top = worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("ops recorded");
    Ok(format!("{} operations x 100 trials, worst rel err {:.1e} in {} ({redraws} loss evaluation points redrawn at kinks)", worst.len(), top.1, top.0))
}

fn c7_mask_semantics() -> Check {
    for trial in 0..100u64 {
        let mut rng = keyed_rng(trial, Stream::InitialPositions, &[0x7]);
        let n = rng.random_range(1..=16usize);
        let pos: Vec<Point<f64>> = (0..n).map(|_| [rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)]).collect();
        let comm = rng.random_range(10.0..150.0);
        let r_att = rng.random_range(10.0..250.0);
        let mask = build_mask(&pos, &CommGraph::build(&pos, comm), r_att).map_err(|e| e.to_string())?;
        let comp = bfs_components(&pos, comm);
        for i in 0..n {
            for j in 0..n {
                let d = ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt();
                let want = i == j || (d <= r_att && comp[i] == comp[j]);
                ensure(mask.get(i, j) == want, format!("trial {trial}: entry ({i},{j}) is {}", mask.get(i, j)))?;
            }
        }
    }
    Ok("100 random graphs, all entries equal the brute-force mask".into())
}

fn c8_desk_learning() -> Check {
    let start = Instant::now();
    let world = WorldConfig::desk();
    let ds = generate_dataset(&world, &GenerateConfig::desk()).map_err(|e| e.to_string())?;
    let mcfg = ModelConfig::desk();
    let tcfg = TrainConfig::desk();
    let outcome = Trainer::new(mcfg, tcfg.clone())
        .map_err(|e| e.to_string())?
        .run(&ds, None, |_| {})
        .map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();

    // zero-prediction loss on exactly the validation draws
    let val = &ds.splits.val;
    let mut baseline = 0.0;
    for (b, chunk) in val.chunks(tcfg.batch_size).enumerate() {
        let sizes = vec![world.num_robots; chunk.len()];
        let mut rng = keyed_rng(tcfg.seed, Stream::Validation, &[b as u64]);
        let (_, eps) = draw_loss_inputs(outcome.model.schedule(), &sizes, 2, &mut rng);
        baseline += eps.data().iter().map(|e| e * e).sum::<f64>() / eps.len() as f64 * chunk.len() as f64;
    }
    baseline /= val.len() as f64;
    let val_loss = evaluation_loss(&outcome.model, &ds, val, tcfg.batch_size, tcfg.seed).map_err(|e| e.to_string())?;
    let reduction = 1.0 - val_loss / baseline;

    let seeds: Vec<u64> = (1000..1020).collect();
    let madp = MadpPolicy::new(Arc::new(outcome.model));
    let mean_final = |p: &dyn Policy| -> Result<f64, String> {
        let r = run_seeds(p, &world, Scenario::Uniform, 150, &seeds, 1).map_err(|e| e.to_string())?;
        Ok(r.iter().map(|r| r.final_normalized()).sum::<f64>() / r.len() as f64)
    };
    let m = mean_final(&madp)?;
    let rnd = mean_final(&RandomPolicy)?;
    let clv = mean_final(&ClairvoyantPolicy)?;
    let summary = format!(
        "train {train_secs:.0}s ({} epochs), val loss {val_loss:.4} vs baseline {baseline:.4} ({:.0}% lower); \
         final cost madp {m:.4}, random {rnd:.4}, clairvoyant {clv:.4}",
        outcome.history.len(),
        100.0 * reduction
    );
    ensure(train_secs < 1800.0, format!("training exceeded 30 min; {summary}"))?;
    ensure(reduction >= 0.30, format!("validation loss not 30% below baseline; {summary}"))?;
    ensure(m <= 0.8 * rnd, format!("not 20% better than random; {summary}"))?;
    ensure(m <= 2.0 * clv, format!("more than 2x the clairvoyant cost; {summary}"))?;
    Ok(summary)
}

fn c9_decentralized_equivalence() -> Check {
    let world = WorldConfig { comm_radius: 400.0, ..WorldConfig::desk() };
    let mut mc = ModelConfig::desk();
    mc.transformer.attention_radius = 400.0;
    let model = MadpModel::<f64>::new(mc, 17).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for seed in 0..5u64 {
        let (field, state) = environment(&world, Scenario::Uniform, seed).map_err(|e| e.to_string())?;
        let graph = CommGraph::build(state.positions(), world.comm_radius);
        ensure(graph.num_components() == 1, "swarm not fully connected")?;
        for eta in [0.0, 1.0] {
            let s = |mode| SamplerSettings { steps: 10, eta, mode, clip: Some(1.0) };
            let c = model.act(&state, &graph, 100 + seed, &s(ExecutionMode::Centralized)).map_err(|e| e.to_string())?;
            let d = model.act(&state, &graph, 100 + seed, &s(ExecutionMode::Decentralized)).map_err(|e| e.to_string())?;
            ensure(c == d, format!("seed {seed}, eta {eta}: {c:?} != {d:?}"))?;
            checked += 1;
        }
        let _ = field;
    }
    Ok(format!("{checked} swarms (eta 0 and 1), actions bit-identical"))
}

fn c10_harness() -> Check {
    let world = WorldConfig::desk();
    let seeds: Vec<u64> = (0..20).collect();
    let steps = 150;
    let policies: [&dyn Policy; 2] = [&ClairvoyantPolicy, &DcvtPolicy];

    let ranges = [[40.0, 60.0], [20.0, 30.0], [60.0, 80.0], [50.0, 50.0]];
    let sigma = sigma_sweep(&policies, &world, &ranges, &seeds, steps, 1).map_err(|e| e.to_string())?;
    ensure(sigma.len() == ranges.len() * 2, "sigma sweep row count")?;
    ensure(sigma.iter().any(|r| r.sigma_range == [40.0, 60.0]), "in-distribution range missing")?;
    for pair in sigma.chunks(2) {
        ensure(pair.iter().all(|r| r.stats.n == 20 && r.stats.q1 <= r.stats.median && r.stats.median <= r.stats.q3), "box stats")?;
        ensure(
            pair[0].stats.mean <= pair[1].stats.mean,
            format!("sigma {:?}: clairvoyant {:.4} > dcvt {:.4}", pair[0].sigma_range, pair[0].stats.mean, pair[1].stats.mean),
        )?;
    }
    let mut buf = Vec::new();
    write_sigma_csv(&mut buf, &sigma).map_err(|e| e.to_string())?;
    let text = String::from_utf8(buf).unwrap();
    ensure(text.lines().count() == 1 + sigma.len() && text.lines().all(|l| l.split(',').count() == 13), "sigma CSV shape")?;

    ensure(Scenario::Square.rect(1024.0) == Rect { x: [115.25, 217.25], y: [115.25, 217.25] }, "square geometry")?;
    ensure(Scenario::Line.rect(1024.0) == Rect { x: [0.0, 1024.0], y: [96.0, 352.0] }, "line geometry")?;
    for sc in Scenario::ALL {
        for &s in &seeds {
            let (_, st) = environment(&world, sc, s).map_err(|e| e.to_string())?;
            ensure(st.positions().iter().all(|&p| sc.rect(world.side_length).contains(p)), "start outside scenario")?;
        }
    }
    let init = init_scenarios(&policies, &world, &Scenario::ALL, &seeds, steps, 1).map_err(|e| e.to_string())?;
    ensure(init.len() == 6, "init row count")?;
    for pair in init.chunks(2) {
        ensure(
            pair[0].mean <= pair[1].mean,
            format!("{}: clairvoyant {:.4} > dcvt {:.4}", pair[0].scenario.name(), pair[0].mean, pair[1].mean),
        )?;
    }
    let mut buf = Vec::new();
    write_init_csv(&mut buf, &init).map_err(|e| e.to_string())?;
    ensure(String::from_utf8(buf).unwrap().lines().count() == 7, "init CSV shape")?;

    let robots = [2, 4, 8];
    let features = [2, 4, 8];
    let grid = scalability_grid(&ClairvoyantPolicy, &DcvtPolicy, &world, &robots, &features, &seeds, steps, 1)
        .map_err(|e| e.to_string())?;
    ensure(grid.len() == 9, "grid cell count")?;
    for c in &grid {
        ensure(
            c.percent_difference >= 0.0,
            format!("N={} F={}: clairvoyant {:.4} > dcvt {:.4}", c.num_robots, c.num_features, c.policy_mean, c.baseline_mean),
        )?;
    }
    let mut buf = Vec::new();
    write_grid_csv(&mut buf, &grid).map_err(|e| e.to_string())?;
    let text = String::from_utf8(buf).unwrap();
    ensure(
        text.lines().next() == Some("num_robots,num_features,policy_mean,baseline_mean,percent_difference")
            && text.lines().count() == 10,
        "grid CSV shape",
    )?;
    let min_gap = grid.iter().map(|c| c.percent_difference).fold(f64::INFINITY, f64::min);
    Ok(format!("4 sigma ranges, 3 scenarios, 3x3 grid; clairvoyant <= dcvt everywhere (min grid gap {min_gap:.1}%)"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "Voronoi cost oracle", c1_voronoi_cost_oracle),
        (2, "Lloyd descent", c2_lloyd_descent),
        (3, "forward-process marginals", c3_forward_marginals),
        (4, "DDIM determinism and equivalence", c4_ddim),
        (5, "equivariance suite", c5_equivariance),
        (6, "gradient audit", c6_gradients),
        (7, "mask semantics", c7_mask_semantics),
        (8, "desk-scale learning", c8_desk_learning),
        (9, "decentralized/centralized equivalence", c9_decentralized_equivalence),
        (10, "experiment-harness fidelity", c10_harness),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("MADP_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {id:2} ({name}) [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:2} ({name}) [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
