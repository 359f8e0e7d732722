//! Property tests for the module-level invariants: backward linearity,
//! metric symmetries, task disjointness, the synthetic generator's causal
//! structure, and dual nonnegativity.

mod common;

use feed_core::data::{
    generate_synthetic, sample_tasks, DomainDataset, Example, SynthSpec, TaskMode,
};
use feed_core::fairmetrics::{delta_dp, delta_eo, delta_eopp};
use feed_core::meta::{dual_update, DualState};
use feed_core::nn::ParamStore;
use feed_core::{Graph, Tensor};
use proptest::prelude::*;

fn rate(preds: &[u8], y: &[u8], z: &[i8], group: i8, label: u8) -> Option<f64> {
    let mut hit = 0usize;
    let mut tot = 0usize;
    for i in 0..preds.len() {
        if z[i] == group && y[i] == label {
            tot += 1;
            if preds[i] == 1 {
                hit += 1;
            }
        }
    }
    (tot > 0).then(|| hit as f64 / tot as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// grad(a*L1 + b*L2) = a*grad(L1) + b*grad(L2), elementwise.
    #[test]
    fn backward_is_linear(
        values in proptest::collection::vec(-2.0f64..2.0, 6),
        c1 in proptest::collection::vec(-1.0f64..1.0, 6),
        c2 in proptest::collection::vec(-1.0f64..1.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let p = Tensor::matrix(2, 3, values).unwrap();
        let w1 = Tensor::matrix(2, 3, c1).unwrap();
        let w2 = Tensor::matrix(2, 3, c2).unwrap();

        let grad_of = |weights: &Tensor, scale: Option<(f64, &Tensor, f64)>| {
            let mut g = Graph::new();
            let pp = g.param("p", &p).unwrap();
            let l1 = {
                let m = g.mul(&pp, weights).unwrap();
                g.sum(&m).unwrap()
            };
            match scale {
                None => g.backward(&l1).unwrap(),
                Some((sa, w2, sb)) => {
                    let m2 = g.mul(&pp, w2).unwrap();
                    let l2 = g.l1_norm(&m2).unwrap();
                    let s1 = g.scalar_mul(&l1, sa).unwrap();
                    let s2 = g.scalar_mul(&l2, sb).unwrap();
                    let total = g.add(&s1, &s2).unwrap();
                    g.backward(&total).unwrap()
                }
            }
        };

        let combined = grad_of(&w1, Some((a, &w2, b)));
        let g1 = grad_of(&w1, None);
        let g2 = {
            let mut g = Graph::new();
            let pp = g.param("p", &p).unwrap();
            let m2 = g.mul(&pp, &w2).unwrap();
            let l2 = g.l1_norm(&m2).unwrap();
            g.backward(&l2).unwrap()
        };
        for i in 0..6 {
            let lhs = combined.get("p").unwrap().data()[i];
            let rhs = a * g1.get("p").unwrap().data()[i] + b * g2.get("p").unwrap().data()[i];
            prop_assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
        }
    }

    /// The metrics depend only on the multiset of (pred, y, z) triples.
    #[test]
    fn metrics_are_permutation_invariant(
        triples in proptest::collection::vec((0u8..2, 0u8..2, prop_oneof![Just(-1i8), Just(1i8)]), 8..40),
        seed in 0u64..1000,
    ) {
        let preds: Vec<u8> = triples.iter().map(|t| t.0).collect();
        let y: Vec<u8> = triples.iter().map(|t| t.1).collect();
        let z: Vec<i8> = triples.iter().map(|t| t.2).collect();
        let mut order: Vec<usize> = (0..triples.len()).collect();
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        order.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
        let p2: Vec<u8> = order.iter().map(|i| preds[*i]).collect();
        let y2: Vec<u8> = order.iter().map(|i| y[*i]).collect();
        let z2: Vec<i8> = order.iter().map(|i| z[*i]).collect();
        prop_assert_eq!(delta_dp(&preds, &z).ok(), delta_dp(&p2, &z2).ok());
        prop_assert_eq!(delta_eopp(&preds, &y, &z).ok(), delta_eopp(&p2, &y2, &z2).ok());
        prop_assert_eq!(delta_eo(&preds, &y, &z).ok(), delta_eo(&p2, &y2, &z2).ok());
    }

    /// Half the max gap never exceeds EO, which never exceeds the max gap.
    #[test]
    fn delta_eo_bounded_by_component_gaps(
        triples in proptest::collection::vec((0u8..2, 0u8..2, prop_oneof![Just(-1i8), Just(1i8)]), 8..60),
    ) {
        let preds: Vec<u8> = triples.iter().map(|t| t.0).collect();
        let y: Vec<u8> = triples.iter().map(|t| t.1).collect();
        let z: Vec<i8> = triples.iter().map(|t| t.2).collect();
        if let Ok(eo) = delta_eo(&preds, &y, &z) {
            let tpr_gap = (rate(&preds, &y, &z, -1, 1).unwrap()
                - rate(&preds, &y, &z, 1, 1).unwrap())
            .abs();
            let fpr_gap = (rate(&preds, &y, &z, -1, 0).unwrap()
                - rate(&preds, &y, &z, 1, 0).unwrap())
            .abs();
            let m = tpr_gap.max(fpr_gap);
            prop_assert!(eo <= m + 1e-15);
            prop_assert!(eo >= 0.5 * m - 1e-15);
        }
    }

    /// Projected dual ascent never leaves the nonnegative orthant.
    #[test]
    fn duals_stay_nonnegative(
        l1 in 0.0f64..5.0,
        l2 in 0.0f64..5.0,
        inv in -2.0f64..2.0,
        fair in -2.0f64..2.0,
        eta in 0.0f64..3.0,
    ) {
        let d = DualState::new(l1, l2, 0.05, 0.05, eta).unwrap();
        let u = dual_update(&d, inv, fair);
        prop_assert!(u.lambda_inv >= 0.0);
        prop_assert!(u.lambda_fair >= 0.0);
    }

    /// Support and query halves never share a record.
    #[test]
    fn tasks_have_disjoint_halves(seed in 0u64..500, n_sup in 2usize..10, n_qry in 2usize..10) {
        let examples: Vec<Example> = (0..64)
            .map(|i| Example::new(vec![i as f64, (i * 7 % 13) as f64], if i % 2 == 0 { 1 } else { -1 }, (i % 2) as u8))
            .collect();
        let ds = DomainDataset::new("p".into(), 2, examples).unwrap();
        let tasks = sample_tasks(&[ds], 4, n_sup, n_qry, TaskMode::Pooled, seed).unwrap();
        for t in tasks {
            for s in &t.support {
                prop_assert!(!t.query.contains(s));
            }
        }
    }
}

/// Plain hand-rolled logistic regression, independent of the tensor stack,
/// used as the oracle for the generator's causal structure.
fn logistic_fit_accuracy(features: &[Vec<f64>], labels: &[u8]) -> f64 {
    let dim = features[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let lr = 0.5;
    let n = features.len() as f64;
    for _ in 0..200 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in features.iter().zip(labels) {
            let m: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-m).exp());
            let err = p - *y as f64;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi / n;
            }
            gb += err / n;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        b -= lr * gb;
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(x, y)| {
            let m: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
            (m >= 0.0) as u8 == **y
        })
        .count();
    correct as f64 / features.len() as f64
}

#[test]
fn content_is_the_label_bearing_factor() {
    let spec = SynthSpec::default_demo();
    let data = generate_synthetic(&spec, 3000, 41).unwrap();
    for ds in &data {
        let truth = ds.truth.as_ref().unwrap();
        let labels: Vec<u8> = ds.examples.iter().map(|e| e.y).collect();
        let by_content = logistic_fit_accuracy(&truth.content, &labels);
        let by_style = logistic_fit_accuracy(&truth.style, &labels);
        assert!(
            by_content >= by_style,
            "domain {}: content acc {by_content} < style acc {by_style}",
            ds.domain
        );
        assert!(by_content > 0.6, "content should carry real signal");
    }
}

#[test]
fn label_law_is_identical_across_domains() {
    // Same weight vector object in every domain, plus the sample-based check
    // that P(y=1 | margin bucket) curves agree across domains within 0.05.
    let spec = SynthSpec::default_demo();
    let data = generate_synthetic(&spec, 30_000, 43).unwrap();
    let w0 = &data[0].truth.as_ref().unwrap().label_weights;
    for ds in &data {
        assert_eq!(&ds.truth.as_ref().unwrap().label_weights, w0);
    }
    let norm: f64 = w0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let edges: Vec<f64> = [-1.5, -0.75, 0.0, 0.75, 1.5]
        .iter()
        .map(|e| e * norm)
        .collect();
    let bucket = |margin: f64| -> usize {
        edges.iter().filter(|e| margin > **e).count()
    };
    let mut curves: Vec<Vec<(usize, usize)>> = Vec::new();
    for ds in &data {
        let truth = ds.truth.as_ref().unwrap();
        let mut counts = vec![(0usize, 0usize); edges.len() + 1];
        for (c, ex) in truth.content.iter().zip(&ds.examples) {
            let margin: f64 = w0.iter().zip(c).map(|(w, cv)| w * cv).sum();
            let b = bucket(margin);
            counts[b].1 += 1;
            counts[b].0 += ex.y as usize;
        }
        curves.push(counts);
    }
    for b in 0..=edges.len() {
        let rates: Vec<f64> = curves
            .iter()
            .map(|c| c[b].0 as f64 / c[b].1.max(1) as f64)
            .collect();
        let spread = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - rates.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            spread < 0.05,
            "bucket {b}: P(y=1|bucket) spread {spread} across domains"
        );
    }
}

#[test]
fn identical_seeds_give_bit_identical_training() {
    // Two runs with the same seed and op sequence produce bit-identical
    // parameter trajectories.
    use feed_core::{GradientMap, Optimizer};
    let run = || {
        let mut store = ParamStore::new();
        store.insert("w".into(), Tensor::row(vec![0.5, -0.25, 1.5]));
        let mut opt = Optimizer::adam(1e-2).unwrap();
        for step in 0..50 {
            let mut g = Graph::new();
            let w = g.param("w", store.get("w").unwrap()).unwrap();
            let x = g
                .constant(&Tensor::row(vec![
                    (step as f64 * 0.1).sin(),
                    (step as f64 * 0.2).cos(),
                    0.3,
                ]))
                .unwrap();
            let prod = g.mul(&w, &x).unwrap();
            let loss = g.l1_norm(&prod).unwrap();
            let grads: GradientMap = g.backward(&loss).unwrap();
            opt.step(&mut store, &grads).unwrap();
        }
        store
    };
    let a = run();
    let b = run();
    assert!(a.bits_eq(&b));
}
