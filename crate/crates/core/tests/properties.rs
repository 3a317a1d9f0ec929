use gnnad_core::anomgen::{inject, AnomalyConfig};
use gnnad_core::autodiff::{finite_diff_check, forward, Tape};
use gnnad_core::detector::{
    evaluate, global_threshold_flags, positivity_filter_flags, sensor_threshold_flags, Confusion,
};
use gnnad_core::gdn::{
    attention_forward, cosine_similarities, learn_adjacency, topk_adjacency, Adjacency,
    GdnHyperparams, GdnParams,
};
use gnnad_core::series::fit_scaling;
use gnnad_core::{Matrix, MultivariateSeries};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn grads_of(
    graph: impl Fn(&mut Tape, &[gnnad_core::autodiff::Var], &[gnnad_core::autodiff::Var]) -> gnnad_core::Result<gnnad_core::autodiff::Var>,
    params: &[Matrix],
) -> Vec<Matrix> {
    forward(graph, params, &[]).unwrap().param_gradients().unwrap()
}

/// Independent top-K: repeated arg-max with lowest-index tie-break.
fn topk_oracle(e: &Matrix, k: usize) -> Vec<bool> {
    let n = e.rows();
    let mut out = vec![false; n * n];
    for j in 0..n {
        out[j * n + j] = true;
        let mut taken = vec![false; n];
        taken[j] = true;
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if taken[i] {
                    continue;
                }
                match best {
                    Some(b) if e[(j, i)] <= e[(j, b)] => {}
                    _ => best = Some(i),
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            out[j * n + b] = true;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_is_linear(p in matrix(2, 3), x in matrix(3, 2), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let f = |t: &mut Tape, ps: &[_], _: &[_]| {
            let xv = t.leaf(x.clone());
            let y = t.matmul(ps[0], xv)?;
            t.sum_squares(y)
        };
        let g = |t: &mut Tape, ps: &[_], _: &[_]| {
            let xv = t.leaf(x.clone());
            let y = t.matmul(ps[0], xv)?;
            let y = t.leaky_relu(y, 0.2)?;
            t.sum(y)
        };
        let combo = |t: &mut Tape, ps: &[_], is: &[_]| {
            let fv = f(t, ps, is)?;
            let gv = g(t, ps, is)?;
            let fa = t.scale(fv, a)?;
            let gb = t.scale(gv, b)?;
            t.add(fa, gb)
        };
        let params = [p];
        let gf = grads_of(f, &params);
        let gg = grads_of(g, &params);
        let gc = grads_of(combo, &params);
        let expect = Matrix::from_fn(2, 3, |r, c| a * gf[0][(r, c)] + b * gg[0][(r, c)]);
        prop_assert!(close(&gc[0], &expect, 1e-12));
    }

    #[test]
    fn fan_out_matches_duplicated_subgraph(p in matrix(3, 3), x in matrix(3, 1)) {
        // shared: h = P x used twice; duplicated: two leaves holding P
        let shared = |t: &mut Tape, ps: &[_], _: &[_]| {
            let xv = t.leaf(x.clone());
            let h = t.matmul(ps[0], xv)?;
            let m = t.mul(h, h)?;
            t.sum(m)
        };
        let dup = |t: &mut Tape, ps: &[_], _: &[_]| {
            let xv = t.leaf(x.clone());
            let h1 = t.matmul(ps[0], xv)?;
            let h2 = t.matmul(ps[1], xv)?;
            let m = t.mul(h1, h2)?;
            t.sum(m)
        };
        let g_shared = grads_of(shared, std::slice::from_ref(&p));
        let g_dup = grads_of(dup, &[p.clone(), p]);
        let sum = Matrix::from_fn(3, 3, |r, c| g_dup[0][(r, c)] + g_dup[1][(r, c)]);
        prop_assert!(close(&g_shared[0], &sum, 1e-12));
    }

    #[test]
    fn three_layer_gradients_match_finite_differences(
        w1 in matrix(4, 3), w2 in matrix(4, 4), w3 in matrix(1, 4), x in matrix(3, 2), b in matrix(1, 2)
    ) {
        let graph = |t: &mut Tape, ps: &[_], is: &[_]| {
            let h = t.matmul(ps[0], is[0])?;
            let h = t.leaky_relu(h, 0.2)?;
            let h = t.matmul(ps[1], h)?;
            let h = t.leaky_relu(h, 0.2)?;
            let h = t.matmul(ps[2], h)?;
            let h = t.add_row(h, ps[3])?;
            t.sum_squares(h)
        };
        let report = finite_diff_check(graph, &[w1, w2, w3, b], &[x], 1e-5, 1e-4).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }

    #[test]
    fn attention_rows_are_stochastic(n in 3usize..9, k_frac in 0.0f64..1.0, seed in 0u64..10_000) {
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let hp = GdnHyperparams { window: 2, embed_dim: 3, top_k: k, hidden_width: 4, seed, ..Default::default() };
        let p = GdnParams::init(n, &hp).unwrap();
        let adj = learn_adjacency(&p, &hp).unwrap();
        for j in 0..n {
            prop_assert_eq!(adj.out_degree(j), k);
            prop_assert!(adj.get(j, j));
        }
        let x = Matrix::from_fn(n, 2, |r, c| ((r * 7 + c * 3 + seed as usize) % 11) as f64 / 5.0 - 1.0);
        let (_, alpha) = attention_forward(&p, &adj, &x, 0.2).unwrap();
        for i in 0..n {
            let s: f64 = alpha.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            for j in 0..n {
                prop_assert!(alpha[(i, j)] >= 0.0);
                if !adj.get(j, i) {
                    prop_assert_eq!(alpha[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn topk_matches_argmax_oracle(n in 2usize..9, k_frac in 0.0f64..1.0, raw in prop::collection::vec(0u8..4, 64)) {
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        // coarse values force ties
        let e = Matrix::from_fn(n, n, |r, c| if r == c { 0.0 } else { f64::from(raw[r * 8 + c]) / 4.0 });
        let a = topk_adjacency(&e, k, None).unwrap();
        prop_assert_eq!(a.entries(), &topk_oracle(&e, k)[..]);
    }

    #[test]
    fn similarities_ignore_embedding_scale(v in matrix(5, 3), c in 0.01f64..100.0) {
        prop_assume!((0..5).all(|i| v.row(i).iter().any(|x| x.abs() > 1e-3)));
        let e1 = cosine_similarities(&v, None).unwrap();
        let e2 = cosine_similarities(&v.map(|x| c * x), None).unwrap();
        prop_assert!(e1.max_abs_diff(&e2) < 1e-12);
        prop_assert!(e1.as_slice().iter().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert_eq!(topk_adjacency(&e1, 2, None).unwrap(), topk_adjacency(&e2, 2, None).unwrap());
    }

    #[test]
    fn raising_tau_never_adds_flags(val in matrix(30, 4), test in matrix(20, 4), t1 in 1.0f64..100.0, t2 in 1.0f64..100.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let adj = ring(4);
        let f_lo = sensor_threshold_flags(&test, &val, &adj, lo).unwrap();
        let f_hi = sensor_threshold_flags(&test, &val, &adj, hi).unwrap();
        prop_assert!(f_hi.sensor.iter().zip(&f_lo.sensor).all(|(&h, &l)| !h || l));
        prop_assert_eq!(f_hi.network, gnnad_core::detector::network_flags(&f_hi.sensor, 4));
    }

    #[test]
    fn rule_inclusions(val in matrix(30, 4), test in matrix(20, 4), raw in matrix(20, 4), tau in 1.0f64..100.0) {
        let adj = ring(4);
        let global = global_threshold_flags(&test, &val, None).unwrap();
        let plus = sensor_threshold_flags(&test, &val, &adj, tau).unwrap();
        let plus_plus = positivity_filter_flags(&raw, &plus).unwrap();
        // κ_i never exceeds the global maximum
        prop_assert!(global.network.iter().zip(&plus.network).all(|(&g, &p)| !g || p));
        prop_assert!(plus.sensor.iter().zip(&plus_plus.sensor).all(|(&p, &q)| !p || q));
    }

    #[test]
    fn test_permutation_permutes_flags(val in matrix(25, 3), test in matrix(12, 3), shift in 1usize..12) {
        let perm: Vec<usize> = (0..12).map(|r| (r + shift) % 12).collect();
        let permuted = Matrix::from_fn(12, 3, |r, c| test[(perm[r], c)]);
        let adj = ring(3);
        let a = global_threshold_flags(&test, &val, None).unwrap();
        let b = global_threshold_flags(&permuted, &val, None).unwrap();
        let c = sensor_threshold_flags(&test, &val, &adj, 90.0).unwrap();
        let d = sensor_threshold_flags(&permuted, &val, &adj, 90.0).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            prop_assert_eq!(b.network[r], a.network[src]);
            prop_assert_eq!(d.network[r], c.network[src]);
        }
    }

    #[test]
    fn confusion_identities(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let (flags, labels): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let r = evaluate(&flags, &labels, None).unwrap();
        let c: Confusion = r.confusion;
        prop_assert_eq!(c.total(), flags.len());
        prop_assert_eq!(c.tp + c.fn_, labels.iter().filter(|&&l| l).count());
        if c.tp + c.fn_ > 0 {
            prop_assert_eq!((r.metrics.recall.value * (c.tp + c.fn_) as f64).round() as usize, c.tp);
        }
    }

    #[test]
    fn drift_cells_move_and_runs_repeat(seed in 0u64..1000) {
        let clean = MultivariateSeries::from_values(Matrix::from_fn(120, 4, |r, c| (r as f64 * 0.1 + c as f64).sin())).unwrap();
        let cfg = AnomalyConfig { n_drift: 4, n_var: 0, lambda_drift: 6.0, lambda_var: 1.0, delta: 0.5, zeta: 1.0, seed };
        let (out, records) = inject(&clean, &cfg).unwrap();
        let labels = out.sensor_labels().unwrap();
        for (idx, &l) in labels.iter().enumerate() {
            let d = out.values().as_slice()[idx] - clean.values().as_slice()[idx];
            prop_assert_eq!(l, d.abs() > 0.0);
        }
        prop_assert_eq!(inject(&clean, &cfg).unwrap(), (out, records));
    }

    #[test]
    fn scaling_round_trips(v in matrix(15, 3)) {
        let s = MultivariateSeries::from_values(v).unwrap();
        let stats = fit_scaling(&s).unwrap();
        let scaled = stats.apply(&s).unwrap();
        prop_assert!(scaled.values().as_slice().iter().all(|x| (-1e-12..=1.0 + 1e-12).contains(x)));
        let back = stats.invert(&scaled).unwrap();
        prop_assert!(back.values().max_abs_diff(s.values()) < 1e-12);
    }
}

/// Each sensor's in-neighborhood is itself and its predecessor.
fn ring(n: usize) -> Adjacency {
    let mut e = vec![false; n * n];
    for i in 0..n {
        e[i * n + i] = true;
        e[i * n + (i + 1) % n] = true;
    }
    Adjacency::from_entries(n, e).unwrap()
}
