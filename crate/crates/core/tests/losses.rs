mod common;

use adafuse_core::graph::Graph;
use adafuse_core::losses::{
    bce_sum, edge_loss, pseudo_switch_target, switch_loss, total_loss, LossConfig, LossError, EPS,
};
use adafuse_core::model::{FusionMode, PredictionVars};
use adafuse_core::tensor::Tensor;
use common::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn bce_and_switch_loss_match_scalar_oracle() {
    let mut r = rng(1);
    for _ in 0..20 {
        let s = uniform(&mut r, &[3, 1, 4, 4], 0.0, 1.0);
        let y = binary(&mut r, &[3, 1, 4, 4], 0.4);
        let soft = uniform(&mut r, &[3, 1, 4, 4], 0.0, 1.0);
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let l = bce_sum(&mut g, sv, &y).unwrap();
        assert!(close(g.value(l).item(), ce_ref(s.data(), y.data()), 1e-12));
        let l = switch_loss(&mut g, sv, &soft).unwrap();
        assert!(close(g.value(l).item(), ce_ref(s.data(), soft.data()), 1e-12));
    }
}

#[test]
fn bce_is_clamped_at_saturation() {
    let mut g = Graph::new();
    let s = g.param(t(&[1, 1, 1, 2], &[0.0, 1.0]));
    let l = bce_sum(&mut g, s, &t(&[1, 1, 1, 2], &[1.0, 0.0])).unwrap();
    let v = g.value(l).item();
    assert!(v.is_finite());
    // 1 − (1 − ε) is not exactly ε in floating point.
    assert!(close(v, -2.0 * EPS.ln(), 1e-8));
}

#[test]
fn edge_loss_matches_oracle_and_worked_example() {
    let mut r = rng(2);
    for n in 1..4 {
        let s = uniform(&mut r, &[n, 1, 4, 4], 0.0, 1.0);
        let y = binary(&mut r, &[n, 1, 4, 4], 0.5);
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let l = edge_loss(&mut g, sv, &y).unwrap();
        assert!(close(g.value(l).item(), edge_ref(&s, &y), 1e-12));
    }

    // A single bright pixel in the corner of a 2×2 map, against an empty mask:
    // one unit step along each axis.
    let mut g = Graph::new();
    let s = g.param(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let l = edge_loss(&mut g, s, &Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    assert_eq!(g.value(l).item(), 2.0);

    // Averaging is over the batch, not over pixels.
    let mut g = Graph::new();
    let s = g.param(t(&[2, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
    let l = edge_loss(&mut g, s, &Tensor::zeros(&[2, 1, 2, 2])).unwrap();
    assert_eq!(g.value(l).item(), 2.0);
}

#[test]
fn pseudo_target_matches_oracle() {
    let mut r = rng(3);
    let s = uniform(&mut r, &[2, 1, 4, 4], 0.0, 1.0);
    let y = binary(&mut r, &[2, 1, 4, 4], 0.5);
    let got = pseudo_switch_target(&s, &y).unwrap();
    assert_eq!(got.data(), pseudo_target_ref(s.data(), y.data()).as_slice());
    assert!(pseudo_switch_target(&s, &s).is_err());
}

/// A prediction whose maps are graph leaves, so their gradients are visible.
struct Leaves {
    g: Graph,
    pred: PredictionVars,
}

fn leaves(mode: FusionMode, rgb: &Tensor, depth: &Tensor, sw: &Tensor, fused: &Tensor) -> Leaves {
    let mut g = Graph::new();
    let r = mode.has_rgb().then(|| g.param(rgb.clone()));
    let d = mode.has_depth().then(|| g.param(depth.clone()));
    let s = (mode == FusionMode::Switch).then(|| g.param(sw.clone()));
    let f = match mode {
        FusionMode::RgbOnly => r.unwrap(),
        FusionMode::DepthOnly => d.unwrap(),
        _ => g.param(fused.clone()),
    };
    Leaves {
        g,
        pred: PredictionVars {
            rgb: r,
            depth: d,
            switch: s,
            fused: f,
        },
    }
}

#[test]
fn switch_target_is_detached() {
    let mut r = rng(4);
    let s_rgb = uniform(&mut r, &[1, 1, 4, 4], 0.05, 0.95);
    let sw = uniform(&mut r, &[1, 1, 4, 4], 0.05, 0.95);
    let y = binary(&mut r, &[1, 1, 4, 4], 0.5);
    let mut g = Graph::new();
    let rv = g.param(s_rgb.clone());
    let swv = g.param(sw.clone());
    let target = pseudo_switch_target(g.value(rv), &y).unwrap();
    let l = switch_loss(&mut g, swv, &target).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(rv).is_none_or(|gr| gr.data().iter().all(|&v| v == 0.0)));
    assert!(grads.get(swv).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn soft_cross_entropy_is_minimised_at_the_target() {
    for target in [0.1, 0.37, 0.5, 0.9] {
        let loss = |p: f64| {
            let mut g = Graph::new();
            let v = g.constant(t(&[1], &[p]));
            let l = switch_loss(&mut g, v, &t(&[1], &[target])).unwrap();
            g.value(l).item()
        };
        let best = (1..1000)
            .map(|k| k as f64 / 1000.0)
            .min_by(|a, b| loss(*a).partial_cmp(&loss(*b)).unwrap())
            .unwrap();
        assert!((best - target).abs() <= 1e-3, "target {target}: argmin {best}");
    }
}

#[test]
fn total_loss_is_the_sum_of_oracle_terms() {
    let mut r = rng(5);
    let shape = [2, 1, 4, 4];
    let rgb = uniform(&mut r, &shape, 0.0, 1.0);
    let depth = uniform(&mut r, &shape, 0.0, 1.0);
    let sw = uniform(&mut r, &shape, 0.0, 1.0);
    let fused = uniform(&mut r, &shape, 0.0, 1.0);
    let y = binary(&mut r, &shape, 0.4);

    let sal_rgb = ce_ref(rgb.data(), y.data());
    let sal_d = ce_ref(depth.data(), y.data());
    let sal_f = ce_ref(fused.data(), y.data());
    let l_sw = ce_ref(sw.data(), &pseudo_target_ref(rgb.data(), y.data()));
    let l_edge = edge_ref(&fused, &y);

    let cases = [
        (FusionMode::Switch, true, [sal_rgb, sal_d, sal_f, l_sw, l_edge]),
        (FusionMode::Switch, false, [sal_rgb, sal_d, sal_f, l_sw, 0.0]),
        (FusionMode::Concat1x1, true, [sal_rgb, sal_d, sal_f, 0.0, l_edge]),
        (FusionMode::RgbOnly, true, [sal_rgb, 0.0, 0.0, 0.0, 0.0]),
        (FusionMode::DepthOnly, true, [0.0, sal_d, 0.0, 0.0, 0.0]),
    ];
    for (mode, edge, want) in cases {
        let mut l = leaves(mode, &rgb, &depth, &sw, &fused);
        let b = total_loss(&mut l.g, &l.pred, &y, LossConfig::new(mode, edge)).unwrap().breakdown;
        let got = [b.l_sal_rgb, b.l_sal_d, b.l_sal_fused, b.l_sw, b.l_edge];
        for (k, (g, w)) in got.iter().zip(&want).enumerate() {
            if *w == 0.0 {
                assert_eq!(*g, 0.0, "{mode} edge={edge} term {k}");
            } else {
                assert!(close(*g, *w, 1e-12), "{mode} edge={edge} term {k}: {g} vs {w}");
            }
        }
        assert!(close(b.total, want.iter().sum(), 1e-12));
    }
}

#[test]
fn perfect_predictions_reach_the_clamp_floor() {
    let mut r = rng(6);
    let y = binary(&mut r, &[2, 1, 4, 4], 0.5);
    let target = y.clone();
    let mut l = leaves(FusionMode::Switch, &y, &y, &Tensor::full(&[2, 1, 4, 4], 1.0), &y);
    let b = total_loss(&mut l.g, &l.pred, &target, LossConfig::new(FusionMode::Switch, true))
        .unwrap()
        .breakdown;
    let floor = 32.0 * -(1.0 - EPS).ln();
    for v in [b.l_sal_rgb, b.l_sal_d, b.l_sal_fused, b.l_sw] {
        assert!(close(v, floor, 1e-9), "{v} vs {floor}");
    }
    assert_eq!(b.l_edge, 0.0);
}

#[test]
fn mode_contracts_are_enforced() {
    let z = Tensor::full(&[1, 1, 4, 4], 0.5);
    let y = Tensor::zeros(&[1, 1, 4, 4]);
    let mut l = leaves(FusionMode::RgbOnly, &z, &z, &z, &z);
    let err = total_loss(&mut l.g, &l.pred, &y, LossConfig::new(FusionMode::Switch, true)).unwrap_err();
    assert!(matches!(err, LossError::MissingMap(_)));

    let mut l = leaves(FusionMode::Switch, &z, &z, &z, &z);
    assert!(total_loss(&mut l.g, &l.pred, &z, LossConfig::new(FusionMode::Switch, true)).is_err());
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let mut r = rng(7);
    let shape = [2, 1, 4, 4];
    let maps: Vec<Tensor> = (0..4).map(|_| uniform(&mut r, &shape, 0.05, 0.95)).collect();
    let y = binary(&mut r, &shape, 0.5);
    let target = pseudo_switch_target(&maps[0], &y).unwrap();
    let cfg = LossConfig::new(FusionMode::Switch, true);

    let eval = |m: &[Tensor]| {
        let mut g = Graph::new();
        let v: Vec<_> = m.iter().map(|t| g.param(t.clone())).collect();
        let pred = PredictionVars {
            rgb: Some(v[0]),
            depth: Some(v[1]),
            switch: Some(v[2]),
            fused: v[3],
        };
        // Same terms as the total, with the switch target held fixed.
        let mut parts = vec![
            bce_sum(&mut g, v[0], &y).unwrap(),
            bce_sum(&mut g, v[1], &y).unwrap(),
            bce_sum(&mut g, v[3], &y).unwrap(),
            switch_loss(&mut g, v[2], &target).unwrap(),
            edge_loss(&mut g, v[3], &y).unwrap(),
        ];
        let mut total = parts.remove(0);
        for p in parts {
            total = g.add(total, p).unwrap();
        }
        let b = total_loss(&mut g, &pred, &y, cfg).unwrap();
        assert!(close(g.value(b.total).item(), g.value(total).item(), 1e-12));
        (g, v, b.total)
    };
    let (g, v, total) = eval(&maps);
    let grads = g.backward(total).unwrap();
    for k in 0..4 {
        let numeric = numeric_grad(&maps[k], 1e-6, |probe| {
            let mut m = maps.clone();
            m[k] = probe.clone();
            let mut g = Graph::new();
            let c: Vec<_> = m.iter().map(|t| g.constant(t.clone())).collect();
            let terms = [
                bce_sum(&mut g, c[0], &y).unwrap(),
                bce_sum(&mut g, c[1], &y).unwrap(),
                bce_sum(&mut g, c[3], &y).unwrap(),
                switch_loss(&mut g, c[2], &target).unwrap(),
                edge_loss(&mut g, c[3], &y).unwrap(),
            ];
            terms.iter().map(|&v| g.value(v).item()).sum()
        });
        assert_close(grads.get(v[k]).unwrap(), &numeric, 1e-6, 1e-8, &format!("map {k}"));
    }
}
