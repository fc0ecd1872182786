//! Randomized invariants of the scan plumbing, SSM, gates, blocks and
//! checkpoint format.

mod common;

use common::uniform_vec;
use evmamba::blocks::{evss_block, inres_block, se_gate_values, se_gate, BlockConfig, EvssWeights, InResWeights, SeWeights};
use evmamba::checkpoint::{decode, encode};
use evmamba::conv::Conv2d;
use evmamba::params::{Binder, Init};
use evmamba::scan::{build_plan, es2d, gather, scatter, Direction, GroupScan, Merge};
use evmamba::ssm::{select_params, selective_scan, step_sizes, SsmParams, TimeInvariant};
use evmamba::tensor::softmax_rows;
use evmamba::{Graph, ParamStore, Precision, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    t(shape, uniform_vec(rng, shape.iter().product(), lo, hi))
}

fn graph() -> Graph {
    Graph::inference(Precision::Double)
}

fn random_ssm(g: &Graph, rng: &mut ChaCha8Rng, d: usize, n: usize, a_log: (f64, f64)) -> SsmParams {
    SsmParams::from_tensors(
        g,
        rand_t(rng, &[d, n], a_log.0, a_log.1),
        rand_t(rng, &[d, n], -1.0, 1.0),
        rand_t(rng, &[d, n], -1.0, 1.0),
        rand_t(rng, &[d, d], -1.0, 1.0),
        rand_t(rng, &[d], -1.0, 1.0),
    )
    .unwrap()
}

/// `(H, W, p)` with `1 ≤ p ≤ min(H, W)`.
fn grid() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(h, w)| (Just(h), Just(w), 1..=h.min(w).min(4)))
}

fn rot180(x: &Tensor) -> Tensor {
    let hw = x.shape()[1] * x.shape()[2];
    Tensor::from_fn(x.shape(), |i| x.data()[(i / hw) * hw + hw - 1 - i % hw]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn groups_partition_grid_with_ceil_sizes((h, w, p) in grid()) {
        let plan = build_plan(h, w, p).unwrap();
        prop_assert_eq!(plan.groups.len(), p * p);
        let mut seen = vec![0u8; h * w];
        for g in &plan.groups {
            let (m, n) = g.offset;
            prop_assert_eq!(g.len(), (h - m).div_ceil(p) * (w - n).div_ceil(p));
            for &i in &g.indices {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&k| k == 1));
        prop_assert_eq!(plan.total_tokens(), h * w);
    }

    #[test]
    fn gather_inverts_scatter((h, w, p) in grid(), c in 1usize..=3, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = rand_t(&mut rng, &[c, h, w], -1e6, 1e6);
        let plan = build_plan(h, w, p).unwrap();
        let groups = scatter(&x, &plan).unwrap();
        prop_assert_eq!(gather(&groups, &plan).unwrap(), x);

        // permuted group contents survive gather then scatter unchanged
        let permuted: Vec<Tensor> = groups
            .iter()
            .map(|g| {
                let mut v = g.to_vec();
                v.shuffle(&mut rng);
                t(g.shape(), v)
            })
            .collect();
        let again = scatter(&gather(&permuted, &plan).unwrap(), &plan).unwrap();
        prop_assert_eq!(again, permuted);
    }

    #[test]
    fn reversed_direction_reverses_traversal((h, w, p) in grid()) {
        let plan = build_plan(h, w, p).unwrap();
        for g in &plan.groups {
            for dir in Direction::ALL {
                let mut rev = g.traversal_along(dir.reversed());
                rev.reverse();
                prop_assert_eq!(rev, g.traversal_along(dir));
            }
        }
    }

    #[test]
    fn time_invariant_scan_is_reversal_symmetric(d in 1usize..=3, n in 1usize..=3, l in 1usize..=16, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let ti = TimeInvariant::new(
            rand_t(&mut rng, &[d, n], 0.0, 0.95),
            rand_t(&mut rng, &[d, n], -1.0, 1.0),
            rand_t(&mut rng, &[d, n], -1.0, 1.0),
        )
        .unwrap();
        let x = uniform_vec(&mut rng, l * d, -1.0, 1.0);
        let reverse = |v: &[f64]| -> Vec<f64> { v.chunks(d).rev().flatten().copied().collect() };
        let g = graph();
        let dp = ti.repeat(&g, l).unwrap();
        let h0 = g.constant(Tensor::zeros(&[d, n]).unwrap());
        // scanning the reversed sequence equals scanning backwards along the original
        let backward = selective_scan(&g, &g.constant(t(&[l, d], reverse(&x))), &dp, &h0).unwrap();
        let mut state = vec![0.0; d * n];
        let (a, b, c) = (ti.a_bar.data(), ti.b_bar.data(), ti.c.data());
        let mut expected = vec![0.0; l * d];
        for step in (0..l).rev() {
            for ch in 0..d {
                let mut y = 0.0;
                for s in 0..n {
                    let i = ch * n + s;
                    state[i] = a[i] * state[i] + b[i] * x[step * d + ch];
                    y += c[i] * state[i];
                }
                expected[step * d + ch] = y;
            }
        }
        prop_assert!(common::max_abs_diff(&reverse(backward.data()), &expected) < 1e-12);
    }

    #[test]
    fn backward_row_scan_is_rotated_forward_scan(h in 1usize..=6, w in 1usize..=6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let g = graph();
        let ssm = random_ssm(&g, &mut rng, 2, 2, (-1.0, 1.0));
        let x = rand_t(&mut rng, &[2, h, w], -1.0, 1.0);
        let forward = build_plan(h, w, 1).unwrap();
        let mut backward = forward.clone();
        backward.groups[0].direction = Direction::RowBackward;
        let yb = es2d(&g, &g.constant(x.clone()), &ssm, &backward, GroupScan::Single, Merge::Sum).unwrap();
        let yf = es2d(&g, &g.constant(rot180(&x)), &ssm, &forward, GroupScan::Single, Merge::Sum).unwrap();
        prop_assert_eq!(yb.into_value(), rot180(yf.value()));
    }

    #[test]
    fn memoryless_skip_scan_is_pointwise((h, w, p) in grid(), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let g = graph();
        // Δ ≥ softplus(−3) here, so A = −exp(12) underflows Ā = exp(ΔA) to exactly zero
        let ssm = random_ssm(&g, &mut rng, 2, 2, (12.0, 12.0));
        let x = rand_t(&mut rng, &[2, h, w], -1.0, 1.0);
        let plan = build_plan(h, w, p).unwrap();
        let y = es2d(&g, &g.constant(x.clone()), &ssm, &plan, GroupScan::Single, Merge::Sum).unwrap();
        let pixel = rng.gen_range(0..h * w);
        let mut bumped = x.to_vec();
        bumped[pixel] += 0.5;
        bumped[h * w + pixel] -= 0.25;
        let z = es2d(&g, &g.constant(t(&[2, h, w], bumped)), &ssm, &plan, GroupScan::Single, Merge::Sum).unwrap();
        for i in 0..2 * h * w {
            if i % (h * w) != pixel {
                prop_assert_eq!(y.data()[i], z.data()[i], "position {} changed", i);
            }
        }
    }

    #[test]
    fn skip_scan_steps_equal_pixels((h, w, p) in grid()) {
        let g = graph();
        let ssm = random_ssm(&g, &mut common::rng(1), 2, 2, (-1.0, 1.0));
        let x = g.constant(Tensor::zeros(&[2, h, w]).unwrap());
        let plan = build_plan(h, w, p).unwrap();
        es2d(&g, &x, &ssm, &plan, GroupScan::Single, Merge::Sum).unwrap();
        prop_assert_eq!(g.scan_steps(), (h * w) as u64);
    }

    #[test]
    fn selection_keeps_steps_positive_and_decay_contractive(d in 1usize..=4, n in 1usize..=4, l in 1usize..=16, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let g = graph();
        let ssm = random_ssm(&g, &mut rng, d, n, (-3.0, 3.0));
        let x = g.constant(rand_t(&mut rng, &[l, d], -3.0, 3.0));
        let delta = step_sizes(&g, &x, &ssm).unwrap();
        prop_assert!(delta.data().iter().all(|&v| v > 0.0));
        let dp = select_params(&g, &x, &ssm).unwrap();
        prop_assert!(dp.a_bar.data().iter().all(|&a| a.abs() < 1.0));
    }

    #[test]
    fn hidden_state_stays_bounded(d in 1usize..=3, n in 1usize..=3, l in 1usize..=24, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let g = graph();
        let ssm = random_ssm(&g, &mut rng, d, n, (-2.0, 2.0));
        let x = rand_t(&mut rng, &[l, d], -1.0, 1.0);
        let h0 = uniform_vec(&mut rng, d * n, -1.0, 1.0);
        let dp = select_params(&g, &g.constant(x.clone()), &ssm).unwrap();
        let (a, b) = (dp.a_bar.data(), dp.b_bar.data());
        let drive = (0..l * d * n).map(|i| (b[i] * x.data()[i / n]).abs()).fold(0.0, f64::max);
        let a_max = a.iter().copied().fold(0.0, f64::max);
        let h0_max = h0.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let bound = h0_max.max(drive / (1.0 - a_max));
        let mut h = h0;
        for step in 0..l {
            for i in 0..d * n {
                let k = step * d * n + i;
                h[i] = a[k] * h[i] + b[k] * x.data()[step * d + i / n];
                prop_assert!(h[i].abs() <= bound * (1.0 + 1e-12), "|h| {} exceeds {}", h[i].abs(), bound);
            }
        }
    }

    #[test]
    fn zero_input_and_state_give_zero_output(d in 1usize..=4, n in 1usize..=4, l in 1usize..=16, seed in any::<u64>()) {
        let g = graph();
        let ssm = random_ssm(&g, &mut common::rng(seed), d, n, (-1.0, 1.0));
        let x = g.constant(Tensor::zeros(&[l, d]).unwrap());
        let dp = select_params(&g, &x, &ssm).unwrap();
        let y = selective_scan(&g, &x, &dp, &g.constant(Tensor::zeros(&[d, n]).unwrap())).unwrap();
        prop_assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_is_a_distribution(k in 1usize..=12, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let z = rand_t(&mut rng, &[k], -40.0, 40.0);
        let g = graph();
        let p = g.softmax(&g.constant(z.clone())).unwrap();
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let rows = softmax_rows(&z.reshape(&[1, k]).unwrap());
        prop_assert!((rows.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pointwise_conv_is_per_pixel_matmul(cout in 1usize..=4, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = rand_t(&mut rng, &[3, 8, 8], -1.0, 1.0);
        let w = rand_t(&mut rng, &[cout, 3, 1, 1], -1.0, 1.0);
        let g = graph();
        let y = g.conv2d(&g.constant(x.clone()), &g.constant(w.clone()), None, Conv2d::same(1)).unwrap();
        let expected: Vec<f64> = (0..cout * 64)
            .map(|i| (0..3).map(|c| w.data()[(i / 64) * 3 + c] * x.data()[c * 64 + i % 64]).sum())
            .collect();
        prop_assert!(common::max_abs_diff(y.data(), &expected) < 1e-6);
    }

    #[test]
    fn identity_matmul_is_exact(m in 1usize..=5, k in 1usize..=5, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        // integers are exactly representable
        let a = Tensor::from_fn(&[m, k], |_| rng.gen_range(-50i32..=50) as f64).unwrap();
        let eye = |n: usize| Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap();
        let g = graph();
        let av = g.constant(a.clone());
        prop_assert_eq!(g.matmul(&g.constant(eye(m)), &av).unwrap().into_value(), a.clone());
        prop_assert_eq!(g.matmul(&av, &g.constant(eye(k))).unwrap().into_value(), a);
    }

    #[test]
    fn se_gate_is_bounded(c in 1usize..=8, hw in 1usize..=9, scale in 0.1f64..20.0, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut store = ParamStore::new();
        let sq = 4;
        store.insert("se.w1", rand_t(&mut rng, &[sq, c], -scale, scale));
        store.insert("se.b1", rand_t(&mut rng, &[sq], -scale, scale));
        store.insert("se.w2", rand_t(&mut rng, &[c, sq], -scale, scale));
        store.insert("se.b2", rand_t(&mut rng, &[c], -scale, scale));
        let x = rand_t(&mut rng, &[c, hw, 1], -3.0, 3.0);
        let g = graph();
        let b = Binder::frozen(&g, &store);
        let w = SeWeights::bind(&b, "se").unwrap();
        let xv = g.constant(x.clone());
        let gate = se_gate_values(&g, &xv, &w).unwrap();
        prop_assert!(gate.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let y = se_gate(&g, &xv, &w).unwrap();
        prop_assert!(y.value().max_abs() <= x.max_abs());
    }

    #[test]
    fn evss_preserves_shape(
        c in prop::sample::select(vec![4usize, 8]),
        h in 2usize..=9,
        w in 2usize..=9,
        p in 1usize..=3,
        es2d_on in any::<bool>(),
        fusion in any::<bool>(),
        all_dirs in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut cfg = BlockConfig::evss(c);
        cfg.state_dim = 2;
        cfg.skip_step = p;
        cfg.es2d = es2d_on;
        cfg.fusion = fusion;
        cfg.group_scan = if all_dirs { GroupScan::AllDirections } else { GroupScan::Single };
        let mut store = ParamStore::new();
        let mut rng = common::rng(seed);
        EvssWeights::init(&mut Init { store: &mut store, rng: &mut rng }, "e", &cfg).unwrap();
        let g = graph();
        let b = Binder::frozen(&g, &store);
        let x = g.constant(rand_t(&mut rng, &[c, h, w], -1.0, 1.0));
        let y = evss_block(&g, &x, &cfg, &EvssWeights::bind(&b, "e", &cfg).unwrap()).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.value().all_finite());
    }

    #[test]
    fn inres_with_zero_residual_is_identity(c in 1usize..=6, h in 1usize..=7, w in 1usize..=7, seed in any::<u64>()) {
        let cfg = BlockConfig::inres(c, c, 1);
        let mut store = ParamStore::new();
        let mut rng = common::rng(seed);
        InResWeights::init(&mut Init { store: &mut store, rng: &mut rng }, "r", &cfg).unwrap();
        let project = store.get("r.project.weight").unwrap().map(|_| 0.0);
        store.insert("r.project.weight", project);
        let bias = store.get("r.project.bias").unwrap().map(|_| 0.0);
        store.insert("r.project.bias", bias);
        let x = rand_t(&mut rng, &[c, h, w], -1.0, 1.0);
        let g = graph();
        let b = Binder::frozen(&g, &store);
        let y = inres_block(&g, &g.constant(x.clone()), &cfg, &InResWeights::bind(&b, "r").unwrap()).unwrap();
        prop_assert_eq!(y.into_value(), x);
    }

    #[test]
    fn checkpoint_bytes_round_trip(count in 1usize..=6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut store = ParamStore::new();
        for i in 0..count {
            let rank = rng.gen_range(1..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
            store.insert(format!("layer{i}.w"), rand_t(&mut rng, &shape, -1e3, 1e3));
        }
        let bytes = encode(&store).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        prop_assert_eq!(back, store.quantized_f32());
    }
}
