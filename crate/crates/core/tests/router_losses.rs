mod common;

use common::*;
use omoe::decomp::{decompose, init_pool, ExpertKind, LayerId, Proj};
use omoe::losses::{
    balance_tape, loss_balance, loss_cls, loss_gating, loss_orth, loss_orth_in_pool, orth_tape, prior_bases,
    stage1_objective, stage2_objective, Basis, BatchRoutingStats, LossConfig,
};
use omoe::numcore::tape::softmax_rows;
use omoe::numcore::{grad, rng, svd, Matrix};
use omoe::router::{route, route_batch, top_k, GatingNet, RouterOutput};
use omoe::Error;
use proptest::prelude::*;

fn stats(f: &[f64], p: &[f64]) -> BatchRoutingStats {
    BatchRoutingStats {
        f: f.to_vec(),
        p: p.to_vec(),
        batch_size: 4,
    }
}

#[test]
fn uniform_logits_tie_to_the_lowest_index() {
    let o = RouterOutput::from_logits(&[0.0, 0.0, 0.0], 1).unwrap();
    for g in &o.gates {
        assert!((g - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(o.selected, vec![0]);
}

#[test]
fn two_expert_hand_softmax() {
    let o = RouterOutput::from_logits(&[2.0, 0.0], 1).unwrap();
    let e2 = 2f64.exp();
    assert!((o.gates[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
    assert!((o.gates[0] - 0.881).abs() < 1e-3);
    assert_eq!(o.selected, vec![0]);
}

#[test]
fn full_top_k_selects_everything() {
    let o = RouterOutput::from_logits(&[0.3, -1.0, 2.0, 0.1], 4).unwrap();
    let mut s = o.selected.clone();
    s.sort();
    assert_eq!(s, vec![0, 1, 2, 3]);
}

#[test]
fn top_k_out_of_range() {
    let net = GatingNet::new(4, 3, 2, &mut rng::seeded(1));
    assert!(matches!(route(&[0.0; 4], &net, 0), Err(Error::InvalidTopK { .. })));
    assert!(matches!(route(&[0.0; 4], &net, 3), Err(Error::InvalidTopK { .. })));
    assert!(matches!(route_batch(&Matrix::zeros(0, 4), &net, 1), Err(Error::InvalidInput(_))));
}

#[test]
fn batch_fractions_count_argmax_routes() {
    // Features chosen so the second layer's logits are dominated by a bias.
    let mut net = GatingNet::new(2, 2, 2, &mut rng::seeded(2));
    net.w1 = Matrix::identity(2);
    net.w2 = Matrix::identity(2).scale(10.0);
    let f = Matrix::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let (outs, st) = route_batch(&f, &net, 1).unwrap();
    assert_eq!(outs.iter().map(RouterOutput::argmax).collect::<Vec<_>>(), vec![0, 0, 0, 1]);
    assert_eq!(st.f, vec![0.75, 0.25]);
    let single = route_batch(&Matrix::new(1, 2, vec![0.0, 1.0]).unwrap(), &net, 1).unwrap().1;
    assert_eq!(single.f, vec![0.0, 1.0]);
}

#[test]
fn uniform_gates_give_uniform_p() {
    let outs: Vec<RouterOutput> = (0..5).map(|_| RouterOutput::from_logits(&[1.0; 4], 2).unwrap()).collect();
    let st = BatchRoutingStats::from_outputs(&outs).unwrap();
    for p in &st.p {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn balance_unit_values() {
    assert!((loss_balance(&stats(&[0.5, 0.5], &[0.5, 0.5])) - 1.0).abs() < 1e-12);
    assert!((loss_balance(&stats(&[0.25; 4], &[0.25; 4])) - 1.0).abs() < 1e-12);
    assert!((loss_balance(&stats(&[1.0, 0.0], &[1.0, 0.0])) - 2.0).abs() < 1e-12);
    let gates = Matrix::new(4, 2, vec![0.8, 0.2, 0.6, 0.4, 0.7, 0.3, 0.3, 0.7]).unwrap();
    let logits = gates.map(f64::ln);
    let st = BatchRoutingStats::from_logits_and_gates(&logits, &gates).unwrap();
    assert_eq!(st.f, vec![0.75, 0.25]);
    assert!((st.p[0] - 0.6).abs() < 1e-12 && (st.p[1] - 0.4).abs() < 1e-12);
    assert!((loss_balance(&st) - 1.1).abs() < 1e-12);
}

#[test]
fn classification_and_gating_hand_values() {
    let ln2 = std::f64::consts::LN_2;
    assert!((loss_cls(&Matrix::row_vector(&[0.0, 0.0]), &[1]).unwrap() - ln2).abs() < 1e-9);
    let v = loss_cls(&Matrix::row_vector(&[10.0, -10.0]), &[0]).unwrap();
    assert!((v - (-20f64).exp().ln_1p()).abs() < 1e-9);
    assert!((v - 2.06e-9).abs() < 1e-11);
    assert!((loss_gating(&Matrix::row_vector(&[0.0, 0.0]), &[0]).unwrap() - ln2).abs() < 1e-9);
    let g = loss_gating(&Matrix::row_vector(&[5.0, 0.0, 0.0]), &[0]).unwrap();
    assert!((g - (1.0 + 2.0 * (-5f64).exp()).ln()).abs() < 1e-9);
    assert!((g - 0.0134).abs() < 1e-4);
    assert!(loss_gating(&Matrix::row_vector(&[0.0, 0.0]), &[2]).is_err());
}

#[test]
fn classification_loss_decreases_with_margin() {
    let mut last = f64::INFINITY;
    for m in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0] {
        let v = loss_cls(&Matrix::row_vector(&[m, -m]), &[0]).unwrap();
        assert!(v < last || m == 0.0);
        assert!(v >= 0.0);
        last = v;
    }
    assert!(last < 1e-20);
}

#[test]
fn orthogonality_unit_values() {
    let q = svd(&random_matrix(8, 8, 3)).unwrap().u;
    let (a, b) = (q.columns(0, 3), q.columns(3, 6));
    let same = [Basis { u: a.clone(), v: a.clone() }];
    assert!((loss_orth(&a, &a, &same).unwrap() - 6.0).abs() < 1e-10);
    let orth = [Basis { u: b.clone(), v: b.clone() }];
    assert!(loss_orth(&a, &a, &orth).unwrap() < 1e-20);
    let bad = [Basis {
        u: Matrix::zeros(7, 3),
        v: a.clone(),
    }];
    assert!(matches!(loss_orth(&a, &a, &bad), Err(Error::InvalidInput(_))));
}

#[test]
fn orthogonality_at_pool_init() {
    let layer = LayerId {
        block: 0,
        proj: Proj::Key,
    };
    let r = 3;
    let d = decompose(&random_matrix(10, 9, 4), r, layer).unwrap();
    let pool = init_pool(&d, 2).unwrap();
    // Universal against the principal block only.
    assert!(loss_orth_in_pool(ExpertKind::Universal, &pool, &d, true).unwrap() < 1e-16);
    // Semantic 0: principal (0) plus the universal copy (2r).
    let l0 = loss_orth_in_pool(ExpertKind::Semantic(0), &pool, &d, true).unwrap();
    assert!((l0 - 2.0 * r as f64).abs() < 1e-9);
    assert!(loss_orth_in_pool(ExpertKind::Semantic(0), &pool, &d, false).unwrap() < 1e-16);
    let l1 = loss_orth_in_pool(ExpertKind::Semantic(1), &pool, &d, true).unwrap();
    assert!((l1 - 4.0 * r as f64).abs() < 1e-9);
    assert_eq!(prior_bases(ExpertKind::Semantic(1), &pool, &d, true).unwrap().len(), 3);
}

#[test]
fn stage_objectives_are_weighted_sums() {
    let zero = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
    assert_eq!(stage1_objective(0.5, 8.0, &zero), 0.5);
    assert_eq!(stage2_objective(0.5, 3.0, 2.0, &zero), 0.5);
    assert!((stage1_objective(0.5, 8.0, &LossConfig::SMALL) - 0.58).abs() < 1e-15);
    assert!((stage2_objective(0.5, 1.0, 1.0, &LossConfig::SMALL) - 0.7).abs() < 1e-15);
    assert!(LossConfig { lambda1: -1.0, ..zero }.validate().is_err());
}

#[test]
fn orthogonality_gradient_matches_finite_differences() {
    let u = random_matrix(7, 2, 10);
    let v = random_matrix(6, 2, 11);
    let prior = vec![
        Basis {
            u: random_matrix(7, 3, 12),
            v: random_matrix(6, 3, 13),
        },
        Basis {
            u: random_matrix(7, 2, 14),
            v: random_matrix(6, 2, 15),
        },
    ];
    let params = vec![u, v];
    let (val, g) = grad(&params, |t, p| Ok(orth_tape(t, p[0], p[1], &prior).unwrap())).unwrap();
    assert!((val - loss_orth(&params[0], &params[1], &prior).unwrap()).abs() < 1e-12);
    let err = fd_max_error(&params, &g, |p| loss_orth(&p[0], &p[1], &prior).unwrap());
    assert!(err < FD_TOL, "{err:e}");
}

#[test]
fn balance_gradient_flows_through_p_only() {
    let logits = random_matrix(5, 3, 20);
    let g0 = softmax_rows(&logits);
    let f = BatchRoutingStats::from_logits_and_gates(&logits, &g0).unwrap().f;
    let (val, g) = grad(&[logits.clone()], |t, p| {
        let gates = t.softmax_rows(p[0]);
        Ok(balance_tape(t, gates, &f))
    })
    .unwrap();
    let st = BatchRoutingStats::from_logits_and_gates(&logits, &g0).unwrap();
    assert!((val - loss_balance(&st)).abs() < 1e-12);
    let err = fd_max_error(&[logits], &g, |p| {
        let gates = softmax_rows(&p[0]);
        let mut st = BatchRoutingStats::from_logits_and_gates(&p[0], &gates).unwrap();
        st.f = f.clone();
        loss_balance(&st)
    });
    assert!(err < FD_TOL, "{err:e}");
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gates_form_a_simplex(z in logits_strategy(), k in 1usize..8) {
        let k = k.min(z.len());
        let o = RouterOutput::from_logits(&z, k).unwrap();
        prop_assert!((o.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(o.gates.iter().all(|g| (0.0..=1.0).contains(g)));
        prop_assert_eq!(o.selected.len(), k);
        prop_assert_eq!(&o.selected, &top_k(&o.gates, k));
        // Every selected gate is at least every unselected one.
        let min_sel = o.selected.iter().map(|&i| o.gates[i]).fold(f64::INFINITY, f64::min);
        for i in (0..z.len()).filter(|i| !o.selected.contains(i)) {
            prop_assert!(o.gates[i] <= min_sel);
        }
    }

    #[test]
    fn shifting_logits_changes_nothing(z in logits_strategy(), c in -50.0f64..50.0, k in 1usize..8) {
        let k = k.min(z.len());
        let a = RouterOutput::from_logits(&z, k).unwrap();
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let b = RouterOutput::from_logits(&shifted, k).unwrap();
        for (x, y) in a.gates.iter().zip(&b.gates) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn raising_a_logit_keeps_it_selected(z in logits_strategy(), k in 1usize..8, i in 0usize..8, up in 0.0f64..5.0) {
        let k = k.min(z.len());
        let i = i % z.len();
        let a = RouterOutput::from_logits(&z, k).unwrap();
        let mut z2 = z.clone();
        z2[i] += up;
        let b = RouterOutput::from_logits(&z2, k).unwrap();
        if a.selected.contains(&i) {
            prop_assert!(b.selected.contains(&i));
        }
    }

    #[test]
    fn batch_stats_are_distributions(seed in any::<u64>(), b in 1usize..20, n in 1usize..5, k in 1usize..5) {
        let k = k.min(n);
        let net = GatingNet::new(6, 4, n, &mut rng::seeded(seed));
        let f = random_matrix(b, 6, seed ^ 1).scale(3.0);
        let (outs, st) = route_batch(&f, &net, k).unwrap();
        prop_assert_eq!(outs.len(), b);
        prop_assert!((st.f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((st.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(st.f.iter().chain(&st.p).all(|x| (0.0..=1.0).contains(x)));
        for (i, o) in outs.iter().enumerate() {
            prop_assert_eq!(o, &route(f.row(i), &net, k).unwrap());
        }
    }

    #[test]
    fn balance_is_permutation_invariant(seed in any::<u64>(), b in 1usize..12, n in 2usize..6, rot in 1usize..6) {
        let logits = random_matrix(b, n, seed).scale(2.0);
        let st = BatchRoutingStats::from_logits_and_gates(&logits, &softmax_rows(&logits)).unwrap();
        // Rotate the expert axis; ties in argmax are avoided by continuous draws.
        let rot = rot % n;
        let perm = Matrix::from_fn(b, n, |r, c| logits[(r, (c + rot) % n)]);
        let sp = BatchRoutingStats::from_logits_and_gates(&perm, &softmax_rows(&perm)).unwrap();
        for c in 0..n {
            prop_assert!((sp.f[c] - st.f[(c + rot) % n]).abs() < 1e-12);
            prop_assert!((sp.p[c] - st.p[(c + rot) % n]).abs() < 1e-12);
        }
        prop_assert!((loss_balance(&sp) - loss_balance(&st)).abs() < 1e-12);
        prop_assert!(loss_balance(&st) >= 0.0);
    }

    #[test]
    fn orthogonality_terms_are_symmetric(seed in any::<u64>(), rows in 2usize..9, r1 in 1usize..4, r2 in 1usize..4) {
        let (ui, vi) = (random_matrix(rows, r1, seed), random_matrix(rows + 1, r1, seed ^ 2));
        let (uj, vj) = (random_matrix(rows, r2, seed ^ 3), random_matrix(rows + 1, r2, seed ^ 4));
        let ij = loss_orth(&ui, &vi, &[Basis { u: uj.clone(), v: vj.clone() }]).unwrap();
        let ji = loss_orth(&uj, &vj, &[Basis { u: ui, v: vi }]).unwrap();
        prop_assert!((ij - ji).abs() < 1e-12 * (1.0 + ij));
        prop_assert!(ij >= 0.0);
    }

    #[test]
    fn cross_entropy_losses_are_nonnegative(seed in any::<u64>(), b in 1usize..10, c in 2usize..5) {
        let z = random_matrix(b, c, seed).scale(10.0);
        let labels: Vec<usize> = (0..b).map(|i| (i + seed as usize) % c).collect();
        prop_assert!(loss_cls(&z, &labels).unwrap() >= 0.0);
        prop_assert!(loss_gating(&z, &labels).unwrap() >= 0.0);
    }
}
