mod common;

use common::*;
use omoe::eval::{
    average_precision, evaluate, gaussian_blur, gaussian_kernel, inspect_routing, perturb, perturb_eval, report,
    report_csv, EvalOptions, Perturbation, Predictions,
};
use omoe::model::OmniModel;
use omoe::synthdata::{FakeMode, Label, SyntheticSample};
use omoe::Error;
use proptest::prelude::*;

fn routed_model() -> OmniModel {
    let mut m = random_model(tiny_backbone_config(), 2, 2, 21);
    m.trained.universal = true;
    m.trained.semantic = vec![true; 2];
    m
}

#[test]
fn ap_reference_cases() {
    let ap = average_precision(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
    assert!((ap - 0.8333333333333334).abs() < 1e-12);
    assert_eq!(average_precision(&[0.9, 0.7, 0.4, 0.2], &[true, true, false, false]), Some(1.0));
    assert_eq!(average_precision(&[0.3; 10], &[true, false].repeat(5)), Some(0.5));
}

#[test]
fn perfect_and_constant_classifiers() {
    let data: Vec<SyntheticSample> = (0..8)
        .map(|i| SyntheticSample {
            image: vec![0.0; 4],
            domain: 0,
            label: if i % 2 == 0 { Label::Real } else { Label::Fake },
            fake_mode: if i % 2 == 0 { FakeMode::None } else { FakeMode::Semantic },
        })
        .collect();
    let perfect = Predictions {
        fake_prob: data.iter().map(|s| if s.label == Label::Fake { 0.9 } else { 0.1 }).collect(),
        predicted: data.iter().map(|s| s.label).collect(),
        routes: None,
    };
    let r = report(&data, &perfect, 1).unwrap();
    assert_eq!(r.overall_accuracy, 1.0);
    assert_eq!(r.domains[0].average_precision, Some(1.0));
    let constant = Predictions {
        fake_prob: vec![0.5; 8],
        predicted: vec![Label::Fake; 8],
        routes: None,
    };
    let r = report(&data, &constant, 1).unwrap();
    assert_eq!(r.overall_accuracy, 0.5);
    assert_eq!(r.domains[0].average_precision, Some(0.5));
    assert!(matches!(report(&[], &constant, 1), Err(Error::InvalidInput(_))));
}

#[test]
fn empty_dataset_is_invalid_input() {
    let model = routed_model();
    assert!(matches!(evaluate(&model, &[], EvalOptions::new(1)), Err(Error::InvalidInput(_))));
}

#[test]
fn evaluation_is_deterministic_and_blur_zero_is_identity() {
    let model = routed_model();
    let data = mixed_batch(&tiny_generator(2), 12, 3);
    let a = evaluate(&model, &data, EvalOptions::new(1)).unwrap();
    let b = evaluate(&model, &data, EvalOptions::new(1)).unwrap();
    assert_eq!(a, b);
    let z = perturb_eval(&model, &data, Perturbation::Blur { sigma: 0.0 }, EvalOptions::new(1)).unwrap();
    assert_eq!(z, a);
    let n = perturb_eval(&model, &data, Perturbation::Noise { std: 0.0, seed: 1 }, EvalOptions::new(1)).unwrap();
    assert_eq!(n, a);
    let csv = report_csv(&a);
    assert!(csv.starts_with("domain,n_real,n_fake,real_acc,fake_acc,accuracy,ap\n"));
    assert_eq!(csv.lines().count(), 1 + 2 + 3);
    let routing = a.routing_accuracy.unwrap();
    let diag: usize = (0..2).map(|d| a.confusion[d][d]).sum();
    assert_eq!(diag as f64 / a.n as f64, routing);
}

#[test]
fn negative_blur_is_invalid_input() {
    let data = mixed_batch(&tiny_generator(2), 1, 0);
    assert!(matches!(perturb(&data, Perturbation::Blur { sigma: -0.5 }), Err(Error::InvalidInput(_))));
    assert!(matches!(gaussian_blur(&[0.0; 4], 2, -1.0), Err(Error::InvalidInput(_))));
    assert!(matches!(
        perturb(&data, Perturbation::Noise { std: -1.0, seed: 0 }),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn impulse_blur_matches_the_closed_form_kernel() {
    let side = 16;
    let c = 8;
    let mut img = vec![0.0; side * side];
    img[c * side + c] = 1.0;
    let out = gaussian_blur(&img, side, 1.0).unwrap();
    let g = |d: i64| (-(d * d) as f64 / 2.0).exp();
    let norm: f64 = (-3..=3).map(g).sum();
    for y in 0..side as i64 {
        for x in 0..side as i64 {
            let (dy, dx) = (y - c as i64, x - c as i64);
            let want = if dy.abs() <= 3 && dx.abs() <= 3 {
                g(dy) * g(dx) / (norm * norm)
            } else {
                0.0
            };
            assert!((out[(y * 16 + x) as usize] - want).abs() < 1e-10);
        }
    }
    assert_eq!(gaussian_kernel(1.0).len(), 7);
    assert_eq!(gaussian_kernel(0.5).len(), 5);
}

#[test]
fn reflect_padding_mirrors_without_repeating_the_edge() {
    // Impulse at the corner: the tap at distance 1 lands on pixel 1 twice
    // (once directly, once mirrored from index -1).
    let side = 8;
    let mut img = vec![0.0; side * side];
    img[0] = 1.0;
    let out = gaussian_blur(&img, side, 1.0).unwrap();
    let k = gaussian_kernel(1.0);
    // Row 0 after the horizontal pass: out[x] = Σ_t k[t]·img[reflect(x+t-3)].
    let row0: Vec<f64> = (0..side as i64)
        .map(|x| {
            (0..7)
                .map(|t| {
                    let i = x + t - 3;
                    let m = if i < 0 { -i } else if i >= side as i64 { 2 * (side as i64 - 1) - i } else { i };
                    if m == 0 {
                        k[t as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();
    for y in 0..side {
        for x in 0..side {
            assert!((out[y * side + x] - row0[y] * row0[x]).abs() < 1e-12);
        }
    }
}

#[test]
fn routing_table_echoes_the_router() {
    let model = routed_model();
    let header = "index,domain,y_e,gate0,gate1,selected,argmax,correct\n";
    assert_eq!(inspect_routing(&model, &[], 1).unwrap(), header);
    let data = mixed_batch(&tiny_generator(2), 5, 9);
    let csv = inspect_routing(&model, &data, 2).unwrap();
    let routes = model.route_images(&images(&data), 2).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), data.len());
    for ((row, r), s) in rows.iter().zip(&routes).zip(&data) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1].parse::<usize>().unwrap(), s.domain);
        let gates: Vec<f64> = f[3..5].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(gates, r.gates);
        assert!((gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(f[5], r.selected.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";"));
        assert_eq!(f[7], (r.argmax() == s.domain).to_string());
    }
}

fn sample_strategy() -> impl Strategy<Value = (Vec<SyntheticSample>, Predictions)> {
    proptest::collection::vec((0usize..3, any::<bool>(), any::<bool>(), 0.0f64..1.0), 1..40).prop_map(|rows| {
        let data = rows
            .iter()
            .map(|&(d, fake, _, _)| SyntheticSample {
                image: vec![],
                domain: d,
                label: if fake { Label::Fake } else { Label::Real },
                fake_mode: if fake { FakeMode::Artifact } else { FakeMode::None },
            })
            .collect();
        let pred = Predictions {
            fake_prob: rows.iter().map(|r| r.3).collect(),
            predicted: rows.iter().map(|r| if r.2 { Label::Fake } else { Label::Real }).collect(),
            routes: None,
        };
        (data, pred)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn report_rates_are_consistent((data, pred) in sample_strategy()) {
        let r = report(&data, &pred, 3).unwrap();
        for d in &r.domains {
            let n = (d.n_real + d.n_fake) as f64;
            let real = d.real_accuracy.unwrap_or(0.0) * d.n_real as f64;
            let fake = d.fake_accuracy.unwrap_or(0.0) * d.n_fake as f64;
            prop_assert!(((real + fake) / n - d.accuracy).abs() < 1e-12);
            for v in [d.real_accuracy, d.fake_accuracy, d.average_precision, Some(d.accuracy)].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        prop_assert!((0.0..=1.0).contains(&r.overall_accuracy));
        prop_assert_eq!(r.domains.iter().map(|d| d.n_real + d.n_fake).sum::<usize>(), data.len());
    }

    #[test]
    fn ap_is_invariant_under_monotone_transforms(
        rows in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..40),
        a in 0.1f64..5.0,
        b in -3.0f64..3.0,
    ) {
        let s: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let t: Vec<f64> = s.iter().map(|x| (a * x).exp() + b).collect();
        let (p, q) = (average_precision(&s, &y), average_precision(&t, &y));
        prop_assert_eq!(p.is_some(), y.iter().any(|&v| v));
        if let (Some(p), Some(q)) = (p, q) {
            prop_assert!((p - q).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass(v in 0.0f64..1.0, sigma in 0.0f64..2.0) {
        let side = 8;
        let out = gaussian_blur(&vec![v; side * side], side, sigma).unwrap();
        prop_assert!(out.iter().all(|x| (x - v).abs() < 1e-12));
        let k = gaussian_kernel(sigma);
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
    }
}
