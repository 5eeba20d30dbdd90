use super::*;
use crate::gradcheck::grad_check;
use proptest::prelude::*;

fn seq(b: usize, l: usize, d: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
    Tensor::from_fn(&[b, l, d], f)
}

#[test]
fn shift_by_one_moves_rows_down() {
    let x = seq(1, 3, 2, |i| [1.0, 2.0, 3.0, 4.0, 5.0, 6.0][i]);
    let y = shift_seq(&x, 1).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn shift_by_length_is_a_range_error() {
    let x = seq(1, 3, 1, |i| i as f64);
    assert!(matches!(shift_seq(&x, 3), Err(Error::Range(_))));
}

#[test]
fn mix_shift_example() {
    let x = seq(1, 3, 1, |i| [1.0, 2.0, 4.0][i]);
    let y = mix_shift(&x, &[0.5, 0.5]).unwrap();
    assert_eq!(y.data(), &[0.5, 1.5, 3.0]);
}

#[test]
fn constant_rows_are_preserved_past_the_window() {
    let x = seq(2, 6, 3, |_| 1.7);
    let y = mix_shift(&x, &[0.2, 0.5, 0.3]).unwrap();
    for b in 0..2 {
        for t in 2..6 {
            for k in 0..3 {
                assert!((y.at(&[b, t, k]) - 1.7).abs() < 1e-12);
            }
        }
    }
}

fn small_cfg(shift: ShiftSpec, pos: PosEmb) -> AttnConfig {
    let mut c = AttnConfig::new(8, 2, 2, shift);
    c.pos_emb = pos;
    c
}

fn run(
    cfg: &AttnConfig,
    w: &AttnWeights<f64>,
    s: &ShiftParams<f64>,
    x: &Tensor<f64>,
    lens: &[usize],
) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let vars = AttnVars::record(&mut g, w, s);
    let layout = Arc::new(SeqLayout::from_lengths(lens));
    let pos = layout.positions();
    let tr = kv_shift_attention(&mut g, xv, &vars, cfg, s.variant, &layout, &pos, None, AttnSite::default()).unwrap();
    g.value(tr.out).to_vec()
}

#[test]
fn identity_coefficients_match_vanilla() {
    let mut rng = RngStream::new(3);
    let van = small_cfg(ShiftSpec::VANILLA, PosEmb::Rope { base: 100_000.0 });
    let kv = small_cfg(ShiftSpec::KV_SHIFT, PosEmb::Rope { base: 100_000.0 });
    let w = AttnWeights::<f64>::init(&van, 0.3, &mut rng);
    let x = Tensor::randn(&[9, 8], 1.0, &mut rng);
    let a = run(&van, &w, &ShiftParams::vanilla(), &x, &[4, 5]);
    let b = run(&kv, &w, &ShiftParams::fixed(2, [1.0, 0.0], [1.0, 0.0]), &x, &[4, 5]);
    let diff = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn single_token_attends_to_scaled_value() {
    let mut rng = RngStream::new(4);
    let cfg = small_cfg(ShiftSpec::KV_SHIFT, PosEmb::None);
    let w = AttnWeights::<f64>::init(&cfg, 0.3, &mut rng);
    let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let van = run(&cfg, &w, &ShiftParams::vanilla(), &x, &[1]);
    let out = run(&cfg, &w, &ShiftParams::fixed(2, [0.3, 0.7], [0.25, 0.75]), &x, &[1]);
    for (a, b) in van.iter().zip(&out) {
        assert!((0.25 * a - b).abs() < 1e-12);
    }
}

#[test]
fn output_is_causal() {
    let mut rng = RngStream::new(5);
    let cfg = small_cfg(ShiftSpec { window: 2, variant: ShiftVariant::Free }, PosEmb::Rope { base: 100_000.0 });
    let w = AttnWeights::<f64>::init(&cfg, 0.3, &mut rng);
    let s = init_shift_params(&cfg, &mut rng);
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let mut y = x.clone();
    y.data_mut()[5 * 8..].iter_mut().for_each(|v| *v += 3.0);
    let a = run(&cfg, &w, &s, &x, &[6]);
    let b = run(&cfg, &w, &s, &y, &[6]);
    assert_eq!(&a[..5 * 8], &b[..5 * 8]);
    assert_ne!(&a[5 * 8..], &b[5 * 8..]);
}

#[test]
fn init_sums_to_one() {
    let mut rng = RngStream::new(6);
    for w in 1..=3 {
        let cfg = AttnConfig::new(8, 2, 2, ShiftSpec { window: w, variant: ShiftVariant::Free });
        let s = init_shift_params::<f64>(&cfg, &mut rng);
        for t in [s.alphas.as_ref().unwrap(), s.betas.as_ref().unwrap()] {
            assert_eq!(t.shape(), &[2, w + 1]);
            for h in 0..2 {
                let row = &t.data()[h * (w + 1)..(h + 1) * (w + 1)];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[..w].iter().all(|&c| (0.0..1.0).contains(&c)));
            }
        }
    }
}

#[test]
fn gate_zero_is_half() {
    let mut s = ShiftParams::<f64> {
        window: 1,
        variant: ShiftVariant::Gate,
        alphas: Some(Tensor::zeros(&[2])),
        betas: None,
    };
    assert_eq!(s.key_coeffs(2), vec![0.5, 0.5, 0.5, 0.5]);
    assert_eq!(s.value_coeffs(2), vec![1.0, 0.0, 1.0, 0.0]);
    constrain_shift_params(&mut s);
    assert_eq!(s.alphas.unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn clamp_variant_projects_into_unit_interval() {
    let mk = |variant| ShiftParams::<f64> {
        window: 1,
        variant,
        alphas: Some(Tensor::new(&[1, 2], vec![-0.2, 1.3]).unwrap()),
        betas: Some(Tensor::new(&[1, 2], vec![-0.15, 0.4]).unwrap()),
    };
    let mut c = mk(ShiftVariant::Clamp01);
    constrain_shift_params(&mut c);
    assert_eq!(c.alphas.unwrap().data(), &[0.0, 1.0]);
    assert_eq!(c.betas.unwrap().data(), &[0.0, 0.4]);
    let mut f = mk(ShiftVariant::Free);
    constrain_shift_params(&mut f);
    assert_eq!(f.betas.unwrap().data(), &[-0.15, 0.4]);
}

#[test]
fn ablation_keeps_the_other_side_stream() {
    let mut both = AttnConfig::new(8, 2, 2, ShiftSpec::KV_SHIFT);
    let full = init_shift_params::<f64>(&both, &mut RngStream::new(9));
    both.k_shift_enabled = false;
    let v_only = init_shift_params::<f64>(&both, &mut RngStream::new(9));
    assert!(v_only.alphas.is_none());
    assert_eq!(v_only.betas, full.betas);
}

#[test]
fn config_validation() {
    let mut c = AttnConfig::new(8, 2, 2, ShiftSpec { window: 2, variant: ShiftVariant::Gate });
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.shift.window = 4;
    c.shift.variant = ShiftVariant::Free;
    assert!(c.validate().is_err());
    assert!(AttnConfig::new(8, 3, 3, ShiftSpec::VANILLA).validate().is_err());
    assert!(AttnConfig::new(8, 4, 3, ShiftSpec::VANILLA).validate().is_err());
    assert!(AttnConfig::new(8, 4, 2, ShiftSpec::KV_SHIFT).validate().is_ok());
}

#[test]
fn gradients_of_all_attention_parameters() {
    let mut rng = RngStream::new(11);
    for (variant, pos) in [
        (ShiftVariant::Free, PosEmb::Rope { base: 100.0 }),
        (ShiftVariant::Gate, PosEmb::Alibi { slope: 0.4 }),
    ] {
        let mut cfg = AttnConfig::new(8, 4, 2, ShiftSpec { window: 1, variant });
        cfg.pos_emb = pos;
        let w = AttnWeights::<f64>::init(&cfg, 0.4, &mut rng);
        let s = init_shift_params::<f64>(&cfg, &mut rng);
        let x = Tensor::randn(&[7, 8], 1.0, &mut rng);
        let params = vec![
            w.wq.clone(),
            w.wk.clone(),
            w.wv.clone(),
            w.wo.clone(),
            s.alphas.clone().unwrap(),
            s.betas.clone().unwrap(),
        ];
        let layout = Arc::new(SeqLayout::from_lengths(&[3, 4]));
        let pos_ix = layout.positions();
        let rep = grad_check(
            |g, p| {
                let xv = g.input(&x);
                let vars = AttnVars {
                    wq: p[0],
                    wk: p[1],
                    wv: p[2],
                    wo: p[3],
                    alphas: Some(p[4]),
                    betas: Some(p[5]),
                };
                let tr = kv_shift_attention(g, xv, &vars, &cfg, variant, &layout, &pos_ix, None, AttnSite::default())?;
                let sq = g.square(tr.out);
                Ok(g.sum(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{variant:?}: {rep:?}");
    }
}

#[test]
fn non_finite_input_names_the_layer() {
    let mut rng = RngStream::new(12);
    let cfg = small_cfg(ShiftSpec::KV_SHIFT, PosEmb::None);
    let w = AttnWeights::<f64>::init(&cfg, 0.3, &mut rng);
    let mut x = Tensor::<f64>::zeros(&[2, 8]);
    x.data_mut()[9] = f64::NAN;
    let mut g = Graph::new();
    let xv = g.input(&x);
    let vars = AttnVars::record(&mut g, &w, &ShiftParams::vanilla());
    let layout = Arc::new(SeqLayout::uniform(1, 2));
    let err = kv_shift_attention(&mut g, xv, &vars, &cfg, ShiftVariant::Free, &layout, &[0, 1], None, AttnSite { layer: 3 })
        .unwrap_err();
    match err {
        Error::Numeric { location } => assert!(location.contains("layer 3")),
        e => panic!("{e:?}"),
    }
}

#[test]
fn decode_matches_full_forward() {
    let mut rng = RngStream::new(13);
    for pos in [PosEmb::Rope { base: 100_000.0 }, PosEmb::Alibi { slope: 0.2 }] {
        let mut cfg = AttnConfig::new(8, 4, 2, ShiftSpec { window: 2, variant: ShiftVariant::Free });
        cfg.pos_emb = pos;
        let w = AttnWeights::<f64>::init(&cfg, 0.4, &mut rng);
        let s = init_shift_params::<f64>(&cfg, &mut rng);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let full = run(&cfg, &w, &s, &x, &[6]);
        let mut cache = LayerCache::new(&cfg);
        for t in 0..6 {
            let y = cache.attend(&cfg, &s, &w, &x.data()[t * 8..(t + 1) * 8], t).unwrap();
            for (a, b) in y.iter().zip(&full[t * 8..(t + 1) * 8]) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(cache.retained_raw_rows(), (t + 1).min(2));
        }
    }
}

#[test]
fn decode_rejects_mismatched_cache() {
    let cfg = AttnConfig::new(8, 2, 2, ShiftSpec::KV_SHIFT);
    let other = AttnConfig::new(8, 2, 1, ShiftSpec::KV_SHIFT);
    let w = AttnWeights::<f64>::init(&cfg, 0.3, &mut RngStream::new(1));
    let mut cache = LayerCache::<f64>::new(&other);
    let r = cache.attend(&cfg, &ShiftParams::fixed(2, [1.0, 0.0], [1.0, 0.0]), &w, &[0.0; 8], 0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mixing_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let x = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
        let c = [0.3, -0.7];
        let comb = Tensor::from_fn(&[2, 5, 3], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = mix_shift(&comb, &c).unwrap();
        let mx = mix_shift(&x, &c).unwrap();
        let my = mix_shift(&y, &c).unwrap();
        for i in 0..30 {
            prop_assert!((lhs.data()[i] - (a * mx.data()[i] + b * my.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn first_row_only_sees_itself(c0 in -2.0f64..2.0, c1 in -2.0f64..2.0, seed in 0u64..1000) {
        let x = Tensor::<f64>::randn(&[1, 4, 2], 1.0, &mut RngStream::new(seed));
        let y = mix_shift(&x, &[c0, c1]).unwrap();
        prop_assert!((y.data()[0] - c0 * x.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_convex_weights(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let cfg = small_cfg(ShiftSpec::KV_SHIFT, PosEmb::Alibi { slope: 0.1 });
        let w = AttnWeights::<f64>::init(&cfg, 0.5, &mut rng);
        let s = init_shift_params::<f64>(&cfg, &mut rng);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let vars = AttnVars::record(&mut g, &w, &s);
        let layout = Arc::new(SeqLayout::uniform(1, 5));
        let tr = kv_shift_attention(&mut g, xv, &vars, &cfg, s.variant, &layout, &layout.positions(), None, AttnSite::default()).unwrap();
        let p = g.value(tr.probs);
        for head in 0..2 {
            for i in 0..5 {
                let row = &p[head * 25 + i * 5..head * 25 + i * 5 + 5];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
