use super::*;
use crate::attention::PosEmb;
use crate::gradcheck::grad_check;

fn tiny(shift: ShiftSpec) -> ModelConfig {
    ModelConfig {
        vocab: 16,
        layers: 1,
        attn: AttnConfig::new(8, 1, 1, shift),
        ffn_hidden: 12,
        ffn_enabled: true,
        max_len: 32,
        tie_embeddings: false,
        init_std: 0.3,
        norm_eps: 1e-6,
    }
}

#[test]
fn parameter_count_matches_formula() {
    let m = Model::<f32>::build(&tiny(ShiftSpec::VANILLA), &mut RngStream::new(1)).unwrap();
    let (v, d, f) = (16, 8, 12);
    let non_emb = 4 * d * d + 3 * d * f + 3 * d;
    let c = m.count_params();
    assert_eq!(c.non_embedding, non_emb);
    assert_eq!(c.total, non_emb + 2 * v * d);
    assert_eq!(c.shift_scalars, 0);
}

#[test]
fn shift_adds_four_scalars_per_kv_head_and_nothing_else() {
    let mut van = ModelConfig::toy_depth(3, ShiftSpec::VANILLA);
    van.attn = AttnConfig::new(128, 4, 2, ShiftSpec::VANILLA);
    let mut kv = van.clone();
    kv.attn = AttnConfig::new(128, 4, 2, ShiftSpec::KV_SHIFT);
    let a = Model::<f32>::build(&van, &mut RngStream::new(5)).unwrap();
    let b = Model::<f32>::build(&kv, &mut RngStream::new(5)).unwrap();
    assert_eq!(b.count_params().total - a.count_params().total, 4 * 2 * 3);
    assert_eq!(b.count_params().shift_scalars, 4 * 2 * 3);
    let pa: Vec<_> = a.params().into_iter().map(|(n, _, t)| (n, t.clone())).collect();
    for (n, k, t) in b.params() {
        if k == ParamKind::Shift {
            continue;
        }
        let other = &pa.iter().find(|(m, _)| *m == n).unwrap().1;
        assert_eq!(other, t, "{n}");
    }
}

#[test]
fn paper_toy_has_about_twenty_million_non_embedding_parameters() {
    let cfg = ModelConfig::paper_toy(ShiftSpec::VANILLA);
    let mut c = cfg.clone();
    c.init_std = 0.0;
    let m = Model::<f32>::build(&c, &mut RngStream::new(0)).unwrap();
    let n = m.count_params().non_embedding as f64;
    assert!((n - 20e6).abs() <= 2e6, "{n}");
}

#[test]
fn same_seed_same_model() {
    let cfg = tiny(ShiftSpec::KV_SHIFT);
    let a = Model::<f32>::build(&cfg, &mut RngStream::new(9)).unwrap();
    let b = Model::<f32>::build(&cfg, &mut RngStream::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn logits_are_causal() {
    let m = Model::<f64>::build(&tiny(ShiftSpec::KV_SHIFT), &mut RngStream::new(2)).unwrap();
    let a = m.forward_lm(&[vec![1, 2, 3, 4, 5, 6]]).unwrap();
    let b = m.forward_lm(&[vec![1, 2, 3, 9, 5, 6]]).unwrap();
    assert_eq!(&a.data()[..3 * 16], &b.data()[..3 * 16]);
    assert_ne!(&a.data()[3 * 16..4 * 16], &b.data()[3 * 16..4 * 16]);
}

#[test]
fn out_of_range_id_reports_position() {
    let m = Model::<f32>::build(&tiny(ShiftSpec::VANILLA), &mut RngStream::new(2)).unwrap();
    match m.forward_lm(&[vec![1, 2, 16]]) {
        Err(Error::Input { position, .. }) => assert_eq!(position, 2),
        r => panic!("{r:?}"),
    }
}

#[test]
fn fresh_model_loss_is_near_log_vocab() {
    let cfg = ModelConfig::toy_depth(2, ShiftSpec::KV_SHIFT);
    let m = Model::<f32>::build(&cfg, &mut RngStream::new(3)).unwrap();
    let mut rng = RngStream::new(4);
    let seqs: Vec<Vec<usize>> = (0..4).map(|_| (0..64).map(|_| rng.below(512) as usize).collect()).collect();
    let layout = Arc::new(SeqLayout::uniform(4, 64));
    let mut g = Graph::new();
    let vars = m.record(&mut g);
    let flat = seqs.concat();
    let tr = m.forward(&mut g, &vars, &flat, &layout, None).unwrap();
    let targets: Vec<Option<usize>> = (0..flat.len()).map(|i| (i % 64 != 63).then(|| flat[i + 1])).collect();
    let loss = g.cross_entropy(tr.logits, &targets).unwrap();
    let l = g.scalar_value(loss) as f64;
    assert!((l - libm::log(512.0)).abs() < 0.05, "{l}");
}

#[test]
fn full_model_gradients() {
    for (shift, tie) in [
        (ShiftSpec::KV_SHIFT, false),
        (ShiftSpec { window: 2, variant: ShiftVariant::Gate }, true),
    ] {
        let mut cfg = tiny(ShiftSpec::KV_SHIFT);
        cfg.attn = AttnConfig::new(8, 2, 1, shift);
        cfg.tie_embeddings = tie;
        if shift.variant == ShiftVariant::Gate {
            cfg.attn.shift.window = 1;
        }
        let m = Model::<f64>::build(&cfg, &mut RngStream::new(7)).unwrap();
        let params: Vec<Tensor<f64>> = m.params().into_iter().map(|(_, _, t)| t.clone()).collect();
        let tokens = [3usize, 1, 4, 1, 5, 9, 2, 6];
        let layout = Arc::new(SeqLayout::from_lengths(&[5, 3]));
        let targets: Vec<Option<usize>> = vec![Some(1), Some(4), Some(1), Some(5), None, Some(6), Some(5), None];
        let rep = grad_check(
            |g, p| {
                let vars = m.record(g).rebind(p)?;
                let tr = m.forward(g, &vars, &tokens, &layout, None)?;
                g.cross_entropy(tr.logits, &targets)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}

#[test]
fn stepwise_decode_matches_prefill() {
    let variants = [ShiftVariant::Free, ShiftVariant::Clamp01, ShiftVariant::Gate];
    for variant in variants {
        for window in 0..=3 {
            if variant == ShiftVariant::Gate && window != 1 {
                continue;
            }
            for pos in [PosEmb::Rope { base: 100_000.0 }, PosEmb::Alibi { slope: 0.05 }] {
                let mut cfg = tiny(ShiftSpec { window, variant });
                cfg.attn.kv_heads = 1;
                cfg.attn.heads = 2;
                cfg.attn.pos_emb = pos;
                cfg.layers = 2;
                cfg.init_std = 0.5;
                let m = Model::<f32>::build(&cfg, &mut RngStream::new(window as u64)).unwrap();
                let mut rng = RngStream::new(77);
                let toks: Vec<usize> = (0..16).map(|_| rng.below(16) as usize).collect();
                let (full, _) = m.prefill(&toks).unwrap();
                let (pre, mut st) = m.prefill(&toks[..4]).unwrap();
                assert_eq!(&pre[..], &full[..4 * 16]);
                let mut worst = 0.0f32;
                for (t, &tok) in toks.iter().enumerate().skip(4) {
                    let row = m.step(&mut st, tok).unwrap();
                    for (a, b) in row.iter().zip(&full[t * 16..(t + 1) * 16]) {
                        worst = worst.max((a - b).abs());
                    }
                }
                assert!(worst <= 1e-5, "{variant:?} w={window} {pos:?}: {worst}");
                let mut empty = m.prefill(&[]).unwrap().1;
                let first = m.step(&mut empty, toks[0]).unwrap();
                assert!(first.iter().zip(&full[..16]).all(|(a, b)| (a - b).abs() <= 1e-5));
            }
        }
    }
}
