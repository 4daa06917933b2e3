use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_params, Tensor};
use crate::backbone::BackboneConfig;

const LN2: f64 = std::f64::consts::LN_2;

fn tokens(rng: &mut ChaCha8Rng, q: usize, d: usize) -> Tensor {
    let v = (0..q * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![q, d], v).unwrap()
}

fn block(experts: usize, seed: u64) -> (ParamStore, MoeBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = MoeBlock::new(&mut store, &mut rng, "blk", 16, 4, experts, ParamGroup::Detection);
    (store, b)
}

#[test]
fn top1_picks_largest_and_breaks_ties_low() {
    assert_eq!(top1(&[2.0, -1.0]), 0);
    assert_eq!(top1(&[0.1, 0.9]), 1);
    assert_eq!(top1(&[0.25; 4]), 0);
    assert_eq!(top1(&[0.1, 0.4, 0.4, 0.1]), 1);
    let d = GateDecision::from_probs(vec![0.25; 4], 4);
    assert_eq!(d.selected, vec![0]);
}

proptest! {
    #[test]
    fn routing_is_shift_invariant(logits in prop::collection::vec(-5.0f64..5.0, 4), c in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.constant(1, 4, logits.clone()).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        let b = tape.constant(1, 4, shifted).unwrap();
        let pa = tape.softmax(a, Axis::Cols);
        let pb = tape.softmax(b, Axis::Cols);
        prop_assert_eq!(top1(tape.value(pa)), top1(tape.value(pb)));
        prop_assert_eq!(top1(tape.value(pa)), top1(&logits));
    }

    #[test]
    fn gates_are_on_the_simplex(seed in 0u64..200) {
        for experts in [2, 4] {
            let (store, b) = block(experts, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut tape = Tape::inference(&store);
            let x = tape.leaf(&tokens(&mut rng, 7, 16)).unwrap();
            let out = b.forward(&mut tape, x, false).unwrap();
            for i in 0..7 {
                let row = out.decision.token_probs(i);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert_eq!(out.decision.selected[i], top1(row));
            }
            let mean = out.decision.mean_probs();
            prop_assert!((mean.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            if experts != 2 {
                continue;
            }
            let mut t2 = Tape::inference(&store);
            let probs = t2.leaf(&Tensor::new(vec![7, experts], out.decision.probs.clone()).unwrap()).unwrap();
            let (m, _) = apg_loss(&mut t2, probs, 1.0).unwrap();
            prop_assert!((t2.value(m).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn single_token_attention_passes_values_through() {
    let (store, b) = block(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::inference(&store);
    let a = tape.leaf(&tokens(&mut rng, 1, 16)).unwrap();
    let out = b.attention.forward(&mut tape, a).unwrap();
    let v = b.attention.wv.forward(&mut tape, a).unwrap();
    let cat = tape.concat_cols(&[v, v, v, v]).unwrap();
    let expect = b.attention.wo.forward(&mut tape, cat).unwrap();
    for (x, y) in tape.value(out).iter().zip(tape.value(expect)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (store, b) = block(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = tokens(&mut rng, 5, 16);
    let perm = [3, 0, 4, 1, 2];
    let mut tape = Tape::inference(&store);
    let a = tape.leaf(&x).unwrap();
    let pa = tape.gather_rows(a, &perm).unwrap();
    let out = b.attention.forward(&mut tape, a).unwrap();
    let pout = b.attention.forward(&mut tape, pa).unwrap();
    for (k, &src) in perm.iter().enumerate() {
        for (x, y) in tape.row(pout, k).iter().zip(tape.row(out, src)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_experts_leave_tokens_unchanged() {
    let (mut store, b) = block(4, 5);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains(".expert"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.param_mut(id).tensor.values_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::inference(&store);
    let x = tape.leaf(&tokens(&mut rng, 6, 16)).unwrap();
    let (probs, dec) = b.route_top1(&mut tape, x).unwrap();
    let out = b.expert_transform(&mut tape, x, &dec, probs, false).unwrap();
    assert_eq!(tape.shape(out), (6, 16));
    assert_eq!(tape.value(out), tape.value(x));
}

#[test]
fn residual_decomposition() {
    let (store, b) = block(4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::inference(&store);
    let x = tape.leaf(&tokens(&mut rng, 6, 16)).unwrap();
    let (probs, dec) = b.route_top1(&mut tape, x).unwrap();
    let out = b.expert_transform(&mut tape, x, &dec, probs, false).unwrap();
    let diff = tape.sub(out, x).unwrap();
    let normed = b.ln_in.forward(&mut tape, x).unwrap();
    for i in 0..6 {
        let e = &b.experts[dec.selected[i]];
        let xi = tape.slice_rows(normed, i, 1).unwrap();
        let h = e.fc1.forward(&mut tape, xi).unwrap();
        let h = tape.gelu(h);
        let h = e.fc2.forward(&mut tape, h).unwrap();
        let h = b.ln_out.forward(&mut tape, h).unwrap();
        for (u, v) in tape.row(diff, i).iter().zip(tape.value(h)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn unselected_experts_get_exactly_zero_gradient() {
    let (mut store, b) = block(4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = tokens(&mut rng, 3, 16).with_grad();
    let (grads, dec, xv) = {
        let mut tape = Tape::with_params(&store);
        let xv = tape.leaf(&x).unwrap();
        let (probs, dec) = b.route_top1(&mut tape, xv).unwrap();
        let out = b.expert_transform(&mut tape, xv, &dec, probs, false).unwrap();
        let loss = tape.sum(out);
        (tape.backward(loss).unwrap(), dec, xv)
    };
    assert!(grads.get(xv).unwrap().iter().any(|g| *g != 0.0));
    store.accumulate(&grads).unwrap();
    assert!(dec.selected.iter().collect::<std::collections::BTreeSet<_>>().len() < 4);
    for e in 0..4 {
        let w = b.expert_weight(e);
        let g = store.tensor(w).grad().unwrap();
        if dec.selected.contains(&e) {
            assert!(g.iter().any(|v| *v != 0.0), "expert {e}");
        } else {
            assert!(g.iter().all(|v| *v == 0.0), "expert {e}");
        }
    }
    // Without gate scaling the gate sits off the gradient path entirely.
    let gate = store.tensor(b.gate.w).grad().unwrap();
    assert!(gate.iter().all(|v| *v == 0.0));
}

#[test]
fn gate_scaling_gives_the_gate_a_gradient() {
    let (mut store, b) = block(4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = tokens(&mut rng, 3, 16);
    let grads = {
        let mut tape = Tape::with_params(&store);
        let xv = tape.leaf(&x).unwrap();
        let out = b.forward(&mut tape, xv, true).unwrap();
        let loss = tape.sum(out.out);
        let sq = tape.mul(loss, loss).unwrap();
        tape.backward(sq).unwrap()
    };
    store.accumulate(&grads).unwrap();
    assert!(store.tensor(b.gate.w).grad().unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn apg_examples() {
    let mut tape = Tape::new();
    let sure_fake = tape.constant(3, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let (m, l) = apg_loss(&mut tape, sure_fake, 1.0).unwrap();
    assert_eq!(tape.value(m), &[0.0, 1.0]);
    assert!(tape.scalar(l).abs() < 1e-11);
    let uniform = tape.constant(2, 2, vec![0.5; 4]).unwrap();
    for y in [0.0, 1.0] {
        let (_, l) = apg_loss(&mut tape, uniform, y).unwrap();
        assert!((tape.scalar(l) - LN2).abs() < 1e-15);
    }
    // A saturated wrong gate is clamped rather than infinite.
    let (_, l) = apg_loss(&mut tape, sure_fake, 0.0).unwrap();
    assert!((tape.scalar(l) - (-PROB_FLOOR.ln())).abs() < 1e-9);
}

#[test]
fn mgap_single_token_and_duplication() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = Mgap::new(&mut store, &mut rng, "mgap", 16);
    let x = tokens(&mut rng, 5, 16);
    let mut tape = Tape::inference(&store);
    let one = tape.leaf(&tokens(&mut rng, 1, 16)).unwrap();
    let o = m.forward(&mut tape, one).unwrap();
    assert_eq!(tape.value(o.weights), &[1.0]);
    for (a, b) in tape.value(o.pooled).iter().zip(tape.value(one)) {
        assert!((a - b).abs() < 1e-15);
    }

    let xv = tape.leaf(&x).unwrap();
    let doubled = tape.concat_rows(&[xv, xv]).unwrap();
    let a = m.forward(&mut tape, xv).unwrap();
    let b = m.forward(&mut tape, doubled).unwrap();
    assert!((tape.value(a.weights).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((tape.value(a.probs).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (u, v) in tape.value(a.pooled).iter().zip(tape.value(b.pooled)) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn acl_matches_an_independent_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut tape = Tape::new();
    let pr = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
    let l = acl_loss(&mut tape, pr, 0.0).unwrap();
    assert!(tape.scalar(l).abs() < 1e-11);
    let half = tape.constant(1, 2, vec![0.5, 0.5]).unwrap();
    let l = acl_loss(&mut tape, half, 1.0).unwrap();
    assert!((tape.scalar(l) - LN2).abs() < 1e-15);
    for _ in 0..100 {
        let p: f64 = rng.random_range(0.001..0.999);
        let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
        let probs = tape.constant(1, 2, vec![1.0 - p, p]).unwrap();
        let l = acl_loss(&mut tape, probs, y).unwrap();
        let got = tape.scalar(l);
        let want = if y == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn pmoe_loss_is_the_mean_of_enabled_terms() {
    let mut tape = Tape::new();
    let mut c = |v: f64| tape.constant(1, 1, vec![v]).unwrap();
    let (z, l, a, b) = (c(0.0), c(LN2), c(0.2), c(0.6));
    let check = |tape: &mut Tape, x, y, want: f64| {
        let v = pmoe_loss(tape, Some(x), Some(y)).unwrap().unwrap();
        assert!((tape.scalar(v) - want).abs() < 1e-15);
    };
    check(&mut tape, z, z, 0.0);
    check(&mut tape, l, l, LN2);
    check(&mut tape, a, b, 0.4);
    let only = pmoe_loss(&mut tape, None, Some(b)).unwrap().unwrap();
    assert_eq!(tape.scalar(only), 0.6);
    assert!(pmoe_loss(&mut tape, None, None).unwrap().is_none());
}

#[test]
fn entropy_examples() {
    let mut tape = Tape::new();
    let one_hot = tape.constant(2, 4, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let h = entropy_regularizer(&mut tape, one_hot).unwrap();
    assert_eq!(tape.scalar(h), 0.0);
    let uniform = tape.constant(3, 4, vec![0.25; 12]).unwrap();
    let h = entropy_regularizer(&mut tape, uniform).unwrap();
    let h = tape.scalar(h);
    assert!((h - 4f64.ln()).abs() < 1e-15);
    assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    assert_eq!(entropy(&[1.0, 0.0]), 0.0);
}

#[test]
fn contextualization_splits_back() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let bb = Backbone::new(&BackboneConfig::default(), &mut store, &mut rng).unwrap();
    let a_id = artifact_tokens(&mut store, &mut rng, 32, 64).unwrap();
    assert!(artifact_tokens(&mut store, &mut rng, 0, 64).is_err());
    let mut tape = Tape::inference(&store);
    let f_c = tape.leaf(&tokens(&mut rng, 36, 64)).unwrap();
    let a = tape.param(a_id);
    let (f, a2) = contextualize_with_artifacts(&mut tape, &bb, f_c, Some(a), 3).unwrap();
    let a2 = a2.unwrap();
    assert_eq!(tape.rows(f), 36);
    assert_eq!(tape.rows(a2), 32);
    assert_ne!(tape.value(a2), tape.value(a));
    let (alone, none) = contextualize_with_artifacts(&mut tape, &bb, f_c, None, 3).unwrap();
    assert!(none.is_none());
    // Causal attention: the stream cannot see tokens appended after it.
    assert_eq!(tape.value(alone), tape.value(f));
    let narrow = tape.leaf(&tokens(&mut rng, 2, 16)).unwrap();
    assert!(contextualize_with_artifacts(&mut tape, &bb, f_c, Some(narrow), 3).is_err());
}

#[test]
fn stage_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let parts = StageParts {
        detection: true,
        attribution: true,
        mgap: true,
    };
    let stage = PmoeStage::new(&mut store, &mut rng, "s", 16, 4, parts);
    let a = store.add("a", normal(&mut rng, vec![6, 16], 1.0), ParamGroup::Artifact, true, true);
    let loss_of = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let _ = store;
        let x = tape.param(a);
        let o = stage.forward(tape, x, true)?;
        let (_, apg) = apg_loss(tape, o.detection.as_ref().unwrap().probs, 1.0)?;
        let acl = acl_loss(tape, o.mgap.as_ref().unwrap().probs, 1.0)?;
        let ent = entropy_regularizer(tape, o.attribution.as_ref().unwrap().probs)?;
        let pm = pmoe_loss(tape, Some(apg), Some(acl))?.unwrap();
        let head = tape.mean(o.out);
        tape.add_scalars(&[pm, ent, head])
    };
    let grads = {
        let mut tape = Tape::with_params(&store);
        let l = loss_of(&mut tape, &store).unwrap();
        tape.backward(l).unwrap()
    };
    store.accumulate(&grads).unwrap();
    let mut probes = Vec::new();
    for (id, p) in store.iter() {
        for k in 0..3.min(p.tensor.len()) {
            probes.push((id, (k * 7) % p.tensor.len()));
        }
    }
    let results = check_params(&mut store, &probes, 1e-6, |s| {
        let mut tape = Tape::inference(s);
        let l = loss_of(&mut tape, s)?;
        Ok(tape.scalar(l))
    })
    .unwrap();
    let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "worst {worst}: {:?}", results.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)));
}
