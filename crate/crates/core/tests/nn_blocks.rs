use atok_autodiff::{grad_check_many, Graph, Tensor, Var};
use atok_core::nn::{apply_rope, Attention, AttentionMaskKind, Block, BlockConfig, RopeConfig, Stack};
use atok_core::params::{Bound, ParamBuilder, ParamStore};
use atok_core::rng::{seeded, stream};
use proptest::prelude::*;

fn store_with<M>(seed: u64, std: f64, build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> M) -> (ParamStore<f64>, M) {
    let mut store = ParamStore::new();
    let mut rng = seeded(seed, stream::INIT);
    let m = build(&mut ParamBuilder::new(&mut store, &mut rng, std));
    (store, m)
}

fn stack(seed: u64, cfg: &BlockConfig, depth: usize) -> (ParamStore<f64>, Stack) {
    store_with(seed, 0.3, |pb| Stack::new(pb, "s", &vec![cfg.clone(); depth]))
}

fn input(b: usize, s: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[b, s, w], |i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
}

fn run_stack(store: &ParamStore<f64>, st: &Stack, x: &Tensor<f64>, mask: AttentionMaskKind, rope: Option<&RopeConfig>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let table = rope.map(|r| r.table());
    let o = st.forward(&mut g, &p, xv, mask, table.as_ref(), None).unwrap();
    (g.value(o.out).clone(), o.attn_weights.iter().map(|&a| g.value(a).clone()).collect())
}

fn rotate(cfg: &RopeConfig, x: &[f64], heads: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(vec![heads, cfg.len(), cfg.head_dim], x.to_vec()).unwrap()).unwrap();
    let y = apply_rope(&mut g, v, &cfg.table()).unwrap();
    g.value(y).data().to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_is_an_isometry(x in prop::collection::vec(-2.0f64..2.0, 24), p in 0usize..50, r in 0usize..20, c in 0usize..20) {
        for cfg in [RopeConfig::one_d(8, [p, p + 3, 0]).unwrap(), RopeConfig::two_d(8, [(r, c), (c, r), (0, 0)]).unwrap()] {
            let y = rotate(&cfg, &x, 1);
            for (xs, ys) in x.chunks(8).zip(y.chunks(8)) {
                prop_assert!((dot(xs, xs).sqrt() - dot(ys, ys).sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rope_scores_depend_on_relative_position(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        p1 in 0usize..30, p2 in 0usize..30, shift in 0usize..30,
    ) {
        let score = |cfg: RopeConfig| {
            let mut x = q.clone();
            x.extend(&k);
            let y = rotate(&cfg, &x, 1);
            dot(&y[..8], &y[8..])
        };
        let base = score(RopeConfig::one_d(8, [p1, p2]).unwrap());
        prop_assert!((base - score(RopeConfig::one_d(8, [p1 + shift, p2 + shift]).unwrap())).abs() < 1e-5);
        let grid = score(RopeConfig::two_d(8, [(p1, p2), (p2, p1)]).unwrap());
        prop_assert!((grid - score(RopeConfig::two_d(8, [(p1 + shift, p2), (p2 + shift, p1)]).unwrap())).abs() < 1e-5);
        prop_assert!((grid - score(RopeConfig::two_d(8, [(p1, p2 + shift), (p2, p1 + shift)]).unwrap())).abs() < 1e-5);
    }

    #[test]
    fn causal_outputs_ignore_future_inputs(seed in 0u64..1000, i in 0usize..5, delta in -3.0f64..3.0) {
        let cfg = BlockConfig::new(8, 2).with_qk_norm(true);
        let (store, st) = stack(seed, &cfg, 2);
        let rope = RopeConfig::one_d(4, 0..6).unwrap();
        let x = input(2, 6, 8, seed);
        let (base, _) = run_stack(&store, &st, &x, AttentionMaskKind::Causal, Some(&rope));
        let mut xp = x.clone();
        for (n, v) in xp.data_mut().iter_mut().enumerate() {
            if (n / 8) % 6 > i {
                *v += delta * ((n % 5) as f64 - 2.0);
            }
        }
        let (pert, _) = run_stack(&store, &st, &xp, AttentionMaskKind::Causal, Some(&rope));
        for b in 0..2 {
            let lo = (b * 6) * 8;
            let hi = (b * 6 + i + 1) * 8;
            prop_assert_eq!(&base.data()[lo..hi], &pert.data()[lo..hi]);
        }
    }
}

#[test]
fn causal_gradients_vanish_for_future_inputs() {
    let cfg = BlockConfig::new(8, 2);
    let (store, st) = stack(3, &cfg, 2);
    for i in 0..4 {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g).unwrap();
        let x = g.param(input(1, 5, 8, 1)).unwrap();
        let o = st.forward(&mut g, &p, x, AttentionMaskKind::Causal, None, None).unwrap();
        let row = g.slice(o.out, 1, i, 1).unwrap();
        let l = g.sum(row).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad_data(x).unwrap();
        assert!(grad[(i + 1) * 8..].iter().all(|&v| v == 0.0), "position {i} leaks gradient to the future");
        assert!(grad[..(i + 1) * 8].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = BlockConfig::new(8, 2).with_qk_norm(true);
    let (store, st) = stack(5, &cfg, 2);
    for mask in [AttentionMaskKind::Causal, AttentionMaskKind::Bidirectional] {
        let (_, maps) = run_stack(&store, &st, &input(2, 5, 8, 9), mask, None);
        for m in maps {
            for (r, row) in m.data().chunks(5).enumerate() {
                let q = r % 5;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&w| w >= 0.0));
                if mask == AttentionMaskKind::Causal {
                    assert!(row[q + 1..].iter().all(|&w| w == 0.0));
                }
            }
        }
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let cfg = BlockConfig::new(8, 2);
    let (store, st) = stack(2, &cfg, 1);
    let x = Tensor::from_fn(&[1, 4, 8], |i| (i % 8) as f64 * 0.1 - 0.3);
    let (_, maps) = run_stack(&store, &st, &x, AttentionMaskKind::Bidirectional, None);
    assert!(maps[0].data().iter().all(|&w| (w - 0.25).abs() < 1e-6));
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let cfg = BlockConfig::new(8, 2).with_qk_norm(true);
    let (store, attn) = store_with(4, 0.3, |pb| Attention::new(pb, "a", &cfg));
    let x = input(1, 1, 8, 2);
    let expected = x.data().to_vec();
    let matvec = |v: &[f64], w: &Tensor<f64>| -> Vec<f64> { (0..8).map(|o| (0..8).map(|i| v[i] * w.data()[i * 8 + o]).sum()).collect() };
    let expected = matvec(&matvec(&expected, store.get(attn.wv.w)), store.get(attn.wo.w));
    for mask in [AttentionMaskKind::Causal, AttentionMaskKind::Bidirectional] {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let o = attn.forward(&mut g, &p, xv, mask, None, None).unwrap();
        for (a, b) in g.value(o.out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_output_projections_make_a_block_the_identity() {
    let cfg = BlockConfig::new(8, 2);
    let (mut store, block) = store_with(1, 0.3, |pb| Block::new(pb, "b", &cfg));
    *store.get_mut(block.attn.wo.w) = Tensor::zeros(&[8, 8]);
    *store.get_mut(block.mlp.fc2.w) = Tensor::zeros(&[cfg.hidden(), 8]);
    let x = input(2, 3, 8, 4);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let o = block.forward(&mut g, &p, xv, AttentionMaskKind::Causal, None, None).unwrap();
    assert_eq!(g.value(o.out), &x);
}

#[test]
fn truncated_input_reproduces_the_causal_prefix() {
    let cfg = BlockConfig::new(8, 2).with_qk_norm(true);
    let (store, st) = stack(8, &cfg, 3);
    let x = input(1, 7, 8, 3);
    let full_rope = RopeConfig::one_d(4, 0..7).unwrap();
    let (full, _) = run_stack(&store, &st, &x, AttentionMaskKind::Causal, Some(&full_rope));
    for n in 1..7 {
        let xs = Tensor::new(vec![1, n, 8], x.data()[..n * 8].to_vec()).unwrap();
        let (part, _) = run_stack(&store, &st, &xs, AttentionMaskKind::Causal, Some(&full_rope.slice(0, n)));
        for (a, b) in part.data().iter().zip(&full.data()[..n * 8]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn one_block_gradients_match_central_differences() {
    let cfg = BlockConfig::new(8, 2).with_qk_norm(true);
    let (store, st) = stack(6, &cfg, 1);
    let rope = RopeConfig::one_d(4, 0..3).unwrap();
    let table = rope.table::<f64>();
    let target = input(1, 3, 8, 11);
    let mut points: Vec<Tensor<f64>> = store.tensors().to_vec();
    points.push(input(1, 3, 8, 5));
    for mask in [AttentionMaskKind::Causal, AttentionMaskKind::Bidirectional] {
        let err = grad_check_many(
            |g, vs: &[Var]| {
                let (params, x) = vs.split_at(vs.len() - 1);
                let p = Bound::from_vars(params.to_vec());
                let o = st.forward(g, &p, x[0], mask, Some(&table), None).map_err(|e| match e {
                    atok_core::Error::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                let t = g.constant(target.clone())?;
                g.mse(o.out, t)
            },
            &points,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{mask:?}: relative error {err}");
    }
}
