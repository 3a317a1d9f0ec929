use gnnad_core::anomgen::{inject, AnomalyConfig, AnomalyKind};
use gnnad_core::rng::stream_rng;
use gnnad_core::simgen::{
    build_river_network, default_ma_weights, euclidean_covariance, flow_connected,
    sample_field_series, sample_locations, simulate_on_layout, stream_distance, tailup_covariance,
    KernelKind, KernelParams, Placement, RiverNetwork, SimConfig, SpatialLayout,
};
use gnnad_core::{Matrix, MultivariateSeries};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn shreve_oracle(net: &RiverNetwork, s: usize) -> u32 {
    let kids = net.children(s);
    if kids.is_empty() {
        1
    } else {
        kids.iter().map(|&c| shreve_oracle(net, c)).sum()
    }
}

/// All-pairs distances between segment end nodes. Node `s` is the upstream
/// end of segment `s`; node `n` is the river mouth.
fn node_distances(net: &RiverNetwork) -> Vec<Vec<f64>> {
    let n = net.n_segments();
    let mut d = vec![vec![f64::INFINITY; n + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for (s, seg) in net.segments().iter().enumerate() {
        let down = seg.parent.unwrap_or(n);
        d[s][down] = seg.length;
        d[down][s] = seg.length;
    }
    for k in 0..=n {
        for i in 0..=n {
            for j in 0..=n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

fn ends(net: &RiverNetwork, p: &Placement) -> [(usize, f64); 2] {
    let seg = &net.segments()[p.segment];
    let down = seg.parent.unwrap_or(net.n_segments());
    [(down, p.offset), (p.segment, seg.length - p.offset)]
}

fn distance_oracle(net: &RiverNetwork, d: &[Vec<f64>], a: &Placement, b: &Placement) -> f64 {
    if a.segment == b.segment {
        return (a.offset - b.offset).abs();
    }
    let mut best = f64::INFINITY;
    for (na, da) in ends(net, a) {
        for (nb, db) in ends(net, b) {
            best = best.min(da + d[na][nb] + db);
        }
    }
    best
}

fn to_mouth(net: &RiverNetwork, d: &[Vec<f64>], p: &Placement) -> f64 {
    let mouth = net.n_segments();
    ends(net, p)
        .iter()
        .map(|&(node, off)| off + d[node][mouth])
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn shreve_orders_match_recursion(seed in 0u64..100_000, depth in 1usize..7) {
        let net = build_river_network(10, 0.8, depth, seed).unwrap();
        for s in 0..net.n_segments() {
            prop_assert_eq!(net.segments()[s].shreve_order, shreve_oracle(&net, s));
        }
        let leaves = (0..net.n_segments()).filter(|&s| net.children(s).is_empty()).count() as u32;
        prop_assert_eq!(net.segments()[net.outlet()].shreve_order, leaves);
    }

    #[test]
    fn stream_distance_matches_shortest_paths(seed in 0u64..100_000) {
        let net = build_river_network(12, 0.8, 5, seed).unwrap();
        let d = node_distances(&net);
        let ps = net.placements();
        for a in ps {
            for b in ps {
                let h = stream_distance(&net, a, b).unwrap();
                prop_assert!((h - distance_oracle(&net, &d, a, b)).abs() < 1e-9);
                // flow-connected pairs are exactly those whose path runs
                // straight down to the mouth
                let straight = (h - (to_mouth(&net, &d, a) - to_mouth(&net, &d, b)).abs()).abs() < 1e-9;
                prop_assert_eq!(flow_connected(&net, a, b).unwrap(), straight);
            }
        }
    }

    #[test]
    fn tailup_covariance_respects_flow(seed in 0u64..100_000, sigma2 in 0.5f64..5.0, alpha in 1.0f64..15.0) {
        let net = build_river_network(15, 0.8, 5, seed).unwrap();
        let params = KernelParams::new(sigma2, alpha, 0.0).unwrap();
        let cov = tailup_covariance(&net, &params).unwrap();
        let ps = net.placements();
        for i in 0..ps.len() {
            prop_assert!((cov[(i, i)] - sigma2).abs() < 1e-12);
            for j in 0..ps.len() {
                if !flow_connected(&net, &ps[i], &ps[j]).unwrap() {
                    prop_assert_eq!(cov[(i, j)], 0.0);
                } else {
                    prop_assert!(cov[(i, j)] > 0.0 && cov[(i, j)] <= sigma2 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn euclidean_covariance_is_psd(seed in 0u64..100_000, sigma2 in 0.5f64..5.0, alpha in 0.05f64..15.0) {
        let loc = sample_locations(20, seed).unwrap();
        let cov = euclidean_covariance(&loc.coords, &KernelParams::new(sigma2, alpha, 0.0).unwrap()).unwrap();
        prop_assert!(cov.is_symmetric(0.0));
        let m = DMatrix::from_row_slice(20, 20, cov.as_slice());
        let min = m.symmetric_eigenvalues().min();
        prop_assert!(min > -1e-8 * sigma2, "min eigenvalue {}", min);
    }
}

fn sample_cov(rows: &[Vec<f64>]) -> Matrix {
    let n = rows[0].len();
    let m = rows.len() as f64;
    let mean: Vec<f64> = (0..n).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / m).collect();
    Matrix::from_fn(n, n, |i, j| {
        rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (m - 1.0)
    })
}

#[test]
fn field_series_has_target_covariance() {
    let loc = sample_locations(4, 3).unwrap();
    let params = KernelParams::new(2.0, 0.5, 0.0).unwrap();
    let cov = euclidean_covariance(&loc.coords, &params).unwrap();
    let mut rng = stream_rng(8, 1);
    let x = sample_field_series(&cov, 2.0, 40_000, &default_ma_weights(3), &mut rng).unwrap();
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    let diff = sample_cov(&rows).max_abs_diff(&cov);
    assert!(diff < 0.05 * 2.0, "max deviation {diff}");
}

#[test]
fn response_covariance_is_random_effect_plus_nugget() {
    let layout = SpatialLayout::river(5, 0.8, 4, 21).unwrap();
    let re = KernelParams::new(2.0, 3.0, 0.3).unwrap();
    for kind in [KernelKind::Euclidean, KernelKind::Tailup] {
        let draws: Vec<Vec<f64>> = (0..3000)
            .map(|seed| {
                let cfg = SimConfig {
                    n_sensors: 5,
                    n_ticks: 4,
                    beta0: 0.0,
                    beta1: 0.0,
                    random_effect: Some(re),
                    kernel_kind: kind,
                    seed,
                    ..SimConfig::default()
                };
                simulate_on_layout(&cfg, &layout).unwrap().values().row(0).to_vec()
            })
            .collect();
        let mut target = layout.random_effect_covariance(kind, &re).unwrap();
        for i in 0..5 {
            target[(i, i)] += re.nugget_sigma02;
        }
        let diff = sample_cov(&draws).max_abs_diff(&target);
        assert!(diff < 0.12 * re.sigma2, "{kind:?}: max deviation {diff}");
    }
}

#[test]
fn variability_noise_has_requested_spread() {
    let zeros = MultivariateSeries::from_values(Matrix::zeros(10_000, 20)).unwrap();
    let cfg = AnomalyConfig {
        n_drift: 0,
        n_var: 1000,
        lambda_drift: 1.0,
        lambda_var: 10.0,
        delta: 1.0,
        zeta: 12.0,
        seed: 77,
    };
    let (out, records) = inject(&zeros, &cfg).unwrap();
    // keep cells touched by exactly one anomaly
    let mut cover = vec![0u32; 10_000 * 20];
    for r in &records {
        assert_eq!(r.kind, AnomalyKind::Variability);
        for k in 0..r.realized_length(10_000) {
            cover[(r.start_tick - 1 + k) * 20 + r.sensor] += 1;
        }
    }
    let added: Vec<f64> = out
        .values()
        .as_slice()
        .iter()
        .zip(&cover)
        .filter(|(_, &c)| c == 1)
        .map(|(&v, _)| v)
        .collect();
    assert!(added.len() > 9_000);
    let sd = gnnad_core::stats::variance(&added).sqrt();
    assert!((11.5..=12.5).contains(&sd), "sd {sd}");
}
