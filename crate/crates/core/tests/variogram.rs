mod common;

use std::collections::BTreeMap;

use common::{blank, field};
use nalgebra::{DMatrix, DVector};
use st_impute::variogram::{
    detect_range, empirical_semivariogram, grid_coords, least_squares, location_residuals, Residuals,
};
use st_impute::Rng;

fn random_residuals(k: usize, l: usize, missing: f64, seed: u64) -> Residuals {
    let mut rng = Rng::new(seed);
    Residuals {
        num_locations: k,
        num_times: l,
        values: (0..k * l)
            .map(|_| (!rng.bernoulli(missing)).then(|| rng.normal()))
            .collect(),
        skipped: Vec::new(),
    }
}

#[test]
fn exact_linear_target_leaves_no_residual() {
    let mut ds = blank(3, 3, 40, 2);
    let mut rng = Rng::new(1);
    for s in 0..9 {
        let (a, b, c) = (rng.normal(), rng.normal(), rng.normal());
        for t in 0..40 {
            let i = s * 40 + t;
            ds.x[i * 2] = rng.normal();
            ds.x[i * 2 + 1] = rng.normal();
            ds.y[i] = a + b * ds.x[i * 2] + c * ds.x[i * 2 + 1];
        }
    }
    let res = location_residuals(&ds, None).unwrap();
    assert!(res.skipped.is_empty());
    let worst = res.values.iter().map(|v| v.unwrap().abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn intercept_only_fit_subtracts_visible_mean() {
    let mut ds = blank(1, 2, 6, 0);
    ds.y = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut visible = vec![true; 12];
    visible[5] = false;
    visible[6..].fill(false);
    let res = location_residuals(&ds, Some(&visible)).unwrap();
    let want = [-2.0, -1.0, 0.0, 1.0, 2.0];
    for t in 0..5 {
        assert!((res.values[t].unwrap() - want[t]).abs() < 1e-12);
    }
    assert_eq!(res.values[5], None);
    assert_eq!(res.skipped, vec![1]);
}

#[test]
fn least_squares_matches_qr() {
    let mut rng = Rng::new(2);
    let design = DMatrix::from_fn(50, 4, |_, c| if c == 0 { 1.0 } else { rng.normal() });
    let y = DVector::from_fn(50, |_, _| rng.normal());
    let (beta, ridged) = least_squares(&design, &y);
    assert!(!ridged);
    let qr = design.clone().qr();
    let qty = qr.q().transpose() * &y;
    let oracle = qr.r().solve_upper_triangular(&qty).unwrap();
    assert!((beta - oracle).amax() < 1e-8);
}

#[test]
fn collinear_design_falls_back_to_ridge() {
    let mut rng = Rng::new(3);
    let col: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
    let design = DMatrix::from_fn(20, 3, |r, c| match c {
        0 => 1.0,
        _ => col[r],
    });
    let y = DVector::from_fn(20, |r, _| 2.0 * col[r] + 1.0);
    let (beta, ridged) = least_squares(&design, &y);
    assert!(ridged);
    assert!((&design * beta - y).amax() < 1e-6);
}

#[test]
fn constant_residuals_give_zero_semivariance() {
    let res = Residuals {
        num_locations: 36,
        num_times: 3,
        values: vec![Some(0.7); 108],
        skipped: Vec::new(),
    };
    let vg = empirical_semivariogram(&res, &grid_coords(6, 6), 1.0, 1.0, None).unwrap();
    assert!(vg.gamma.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn white_residuals_sit_at_their_variance() {
    let sigma = 1.5;
    let mut res = random_residuals(100, 200, 0.0, 4);
    res.values.iter_mut().for_each(|v| *v = v.map(|x| x * sigma));
    let vg = empirical_semivariogram(&res, &grid_coords(10, 10), 1.0, 1.0, Some(5.0)).unwrap();
    for (lag, g) in vg.populated() {
        assert!((g / (sigma * sigma) - 1.0).abs() < 0.05, "lag {lag}: {g}");
    }
}

#[test]
fn doubling_residuals_quadruples_semivariance() {
    let res = random_residuals(49, 6, 0.2, 5);
    let mut doubled = res.clone();
    doubled.values.iter_mut().for_each(|v| *v = v.map(|x| 2.0 * x));
    let coords = grid_coords(7, 7);
    let a = empirical_semivariogram(&res, &coords, 1.0, 1.0, None).unwrap();
    let b = empirical_semivariogram(&doubled, &coords, 1.0, 1.0, None).unwrap();
    assert_eq!(a.pairs, b.pairs);
    for (x, y) in a.gamma.iter().zip(&b.gamma) {
        if let (Some(x), Some(y)) = (x, y) {
            assert!((y - 4.0 * x).abs() <= 1e-12 * y.abs());
        }
    }
}

#[test]
fn matches_quadratic_brute_force() {
    let (k, l) = (30, 7);
    let mut rng = Rng::new(6);
    let coords: Vec<[f64; 2]> = (0..k).map(|_| [rng.uniform() * 8.0, rng.uniform() * 8.0]).collect();
    let res = random_residuals(k, l, 0.25, 7);
    let (cell, width, max_lag) = (0.5, 0.75, 3.0);
    let vg = empirical_semivariogram(&res, &coords, cell, width, Some(max_lag)).unwrap();

    let mut acc: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
    for t in 0..l {
        for i in 0..k {
            for j in 0..k {
                if i >= j {
                    continue;
                }
                let d = cell * ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
                if d > max_lag {
                    continue;
                }
                if let (Some(a), Some(b)) = (res.values[i * l + t], res.values[j * l + t]) {
                    let e = acc.entry((d / width).floor() as usize).or_default();
                    e.0 += (a - b) * (a - b);
                    e.1 += 1;
                }
            }
        }
    }
    assert_eq!(vg.num_bins(), 5);
    for b in 0..vg.num_bins() {
        match acc.get(&b) {
            Some(&(sum, n)) => {
                assert_eq!(vg.pairs[b], n);
                assert!((vg.gamma[b].unwrap() - sum / (2.0 * n as f64)).abs() < 1e-12);
            }
            None => assert_eq!(vg.gamma[b], None),
        }
    }
}

#[test]
fn smooth_field_range_grows_with_length_scale() {
    let range = |scale: f64| {
        let ds = st_impute::synthgen::synth_field(&st_impute::synthgen::FieldSpec {
            height: 32,
            width: 32,
            num_times: 60,
            phi: 0.3,
            length_scale: scale,
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        let res = location_residuals(&ds, None).unwrap();
        let vg = empirical_semivariogram(&res, &grid_coords(32, 32), 1.0, 1.0, Some(16.0)).unwrap();
        detect_range(&vg, 0.05).unwrap().range_km
    };
    let (short, long) = (range(1.0), range(3.0));
    assert!(short < long, "{short} vs {long}");
}

#[test]
fn residuals_respect_visibility() {
    let ds = field(4, 4, 30, 9);
    let mut visible = vec![true; 16 * 30];
    visible[3] = false;
    let res = location_residuals(&ds, Some(&visible)).unwrap();
    assert_eq!(res.values[3], None);
    assert!(res.values.iter().enumerate().all(|(i, v)| v.is_some() == visible[i]));
}
