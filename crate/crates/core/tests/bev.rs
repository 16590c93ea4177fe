mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segchange::bev::{
    attention_exact, convert_grid, convert_linear, linear_weights, max_row_sum_deviation, project,
    transformer_weights, AttnStats, BevMode, BevParams, TokenGrid,
};
use segchange::nn::{module_rng, ParamStore};

use common::*;

fn setup(mode: BevMode, d_in: usize, d: usize, da: usize, seed: u64) -> (ParamStore, BevParams) {
    let mut store = ParamStore::new(DType::F64);
    let params = BevParams::new(&mut store, "bev", mode, d_in, d, da, &mut module_rng(seed, "bev")).unwrap();
    randomize(&store, 1.0, seed);
    (store, params)
}

fn grid(b: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    TokenGrid::new(rand_tensor(&[b, n, d], rng), n, 1).unwrap()
}

fn mat(t: &Tensor) -> Vec<f64> {
    to_vec(t)
}

/// Double-loop reference for the additive weights of one batch element.
fn additive_oracle(z: &[f64], n: usize, d: usize, w_a: &[f64], w1: &[f64], w2: &[f64]) -> Vec<f64> {
    let da = w_a.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let mut scores = vec![0.0; n];
        for (j, s) in scores.iter_mut().enumerate() {
            for k in 0..da {
                let mut h = 0.0;
                for c in 0..d {
                    h += w1[k * d + c] * z[i * d + c] + w2[k * d + c] * z[j * d + c];
                }
                *s += w_a[k] * h.max(0.0);
            }
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = e.iter().sum();
        for j in 0..n {
            a[i * n + j] = e[j] / total;
        }
    }
    a
}

#[test]
fn exact_attention_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let da = rng.gen_range(1..=8);
        let (_s, p) = setup(BevMode::AdditiveExact, d, d, da, case);
        let z = grid(1, n, d, &mut rng);
        let a = attention_exact(&p, &z, &mut AttnStats::default()).unwrap();
        let w = p.additive.as_ref().unwrap();
        let want = additive_oracle(
            &mat(z.tokens()),
            n,
            d,
            &mat(w.w_a.as_tensor()),
            &mat(w.w_a1.as_tensor()),
            &mat(w.w_a2.as_tensor()),
        );
        for (g, w) in mat(&a).iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "case {case}: {g} vs {w}");
        }
    }
}

#[test]
fn linear_path_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d, da) = (6, 3, 4);
    let (_s, p) = setup(BevMode::AdditiveLinear, d, d, da, 2);
    let z = grid(1, n, d, &mut rng);
    let out = convert_linear(&p, &z, &mut AttnStats::default()).unwrap();
    let w = p.additive.as_ref().unwrap();
    let (zv, wa, w1, w2, wo) = (
        mat(z.tokens()),
        mat(w.w_a.as_tensor()),
        mat(w.w_a1.as_tensor()),
        mat(w.w_a2.as_tensor()),
        mat(w.w_out.as_tensor()),
    );
    let lin = |m: &[f64], x: &[f64], rows: usize| -> Vec<f64> {
        (0..rows).map(|r| (0..x.len()).map(|c| m[r * x.len() + c] * x[c]).sum()).collect()
    };
    let scores: Vec<f64> = (0..n)
        .map(|j| {
            let h = lin(&w2, &zv[j * d..(j + 1) * d], da);
            h.iter().zip(&wa).map(|(h, a)| a * h.max(0.0)).sum()
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let tot: f64 = e.iter().sum();
    let mut g = vec![0.0; d];
    for j in 0..n {
        for c in 0..d {
            g[c] += e[j] / tot * zv[j * d + c];
        }
    }
    let g2 = lin(&w2, &g, da);
    let got = mat(out.tokens());
    for i in 0..n {
        let zi = &zv[i * d..(i + 1) * d];
        let h: Vec<f64> = lin(&w1, zi, da).iter().zip(&g2).map(|(a, b)| (a + b).max(0.0)).collect();
        let delta = lin(&wo, &h, d);
        for c in 0..d {
            assert!((got[i * d + c] - (zi[c] + delta[c])).abs() < 1e-12);
        }
    }
}

#[test]
fn score_counters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (mode, expect) in [
        (BevMode::AdditiveExact, 2 * 9 * 9),
        (BevMode::Transformer, 2 * 9 * 9),
        (BevMode::AdditiveLinear, 2 * 9),
        (BevMode::None, 0),
    ] {
        let (_s, p) = setup(mode, 4, 4, 3, 0);
        let mut stats = AttnStats::default();
        convert_grid(&p, &grid(2, 9, 4, &mut rng), &mut stats).unwrap();
        assert_eq!(stats.score_evals, expect, "{mode}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in BevMode::ALL {
        let (store, p) = setup(mode, 3, 4, 3, 9);
        let x = rand_var(&[2, 8, 3], &mut rng);
        let mut vars = store_vars(&store);
        vars.push(("input".into(), x.clone()));
        let f = || {
            let g = TokenGrid::new(x.as_tensor().clone(), 4, 2).unwrap();
            weighted_sum(convert_grid(&p, &g, &mut AttnStats::default()).unwrap().tokens(), 1)
        };
        let r = gradcheck(&vars, f, 12, 4);
        assert!(r.max_rel < GRAD_TOL, "{mode}: {} ({})", r.max_rel, r.worst);
    }
}

#[test]
fn large_inputs_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for mode in [BevMode::AdditiveExact, BevMode::AdditiveLinear, BevMode::Transformer] {
        let (_s, p) = setup(mode, 4, 4, 4, 1);
        let big = (rand_tensor(&[1, 10, 4], &mut rng) * 1e3).unwrap();
        let out = convert_grid(&p, &TokenGrid::new(big, 10, 1).unwrap(), &mut AttnStats::default()).unwrap();
        assert!(to_vec(out.tokens()).iter().all(|v| v.is_finite()), "{mode}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, n in 1usize..12, d in 1usize..6, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_s, p) = setup(BevMode::AdditiveExact, d, d, 3, seed);
        let (_t, pt) = setup(BevMode::Transformer, d, d, 3, seed);
        let (_l, pl) = setup(BevMode::AdditiveLinear, d, d, 3, seed);
        let z = TokenGrid::new((rand_tensor(&[1, n, d], &mut rng) * scale).unwrap(), n, 1).unwrap();
        let mut st = AttnStats::default();
        prop_assert!(max_row_sum_deviation(&attention_exact(&p, &z, &mut st).unwrap()).unwrap() < 1e-6);
        prop_assert!(max_row_sum_deviation(&transformer_weights(&pt, &z, &mut st).unwrap()).unwrap() < 1e-6);
        prop_assert!(max_row_sum_deviation(&linear_weights(&pl, &z, &mut st).unwrap()).unwrap() < 1e-6);
    }

    #[test]
    fn converters_commute_with_token_permutation(seed in 0u64..1000, n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let idx = Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), n, &Device::Cpu).unwrap();
        let x = rand_tensor(&[1, n, 3], &mut rng);
        let xp = x.index_select(&idx, 1).unwrap();
        for mode in BevMode::ALL {
            let (_s, p) = setup(mode, 3, 3, 2, seed);
            let y = convert_grid(&p, &TokenGrid::new(x.clone(), n, 1).unwrap(), &mut AttnStats::default()).unwrap();
            let yp = convert_grid(&p, &TokenGrid::new(xp.clone(), n, 1).unwrap(), &mut AttnStats::default()).unwrap();
            let want = to_vec(&y.tokens().index_select(&idx, 1).unwrap());
            for (a, b) in to_vec(yp.tokens()).iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-10, "{mode}");
            }
        }
    }
}

#[test]
fn projection_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_s, p) = setup(BevMode::AdditiveLinear, 2, 3, 2, 0);
    let x = grid(1, 1, 2, &mut rng);
    let z = to_vec(project(&p, &x).unwrap().tokens());
    let pr = p.projection.as_ref().unwrap();
    let (w, b, xv) = (mat(pr.w_z.as_tensor()), mat(pr.b_z.as_tensor()), to_vec(x.tokens()));
    for r in 0..3 {
        let want = w[r * 2] * xv[0] + w[r * 2 + 1] * xv[1] + b[r];
        assert!((z[r] - want).abs() < 1e-14);
    }
}
