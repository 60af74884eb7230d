use mag_core::encoder::{
    checkpoint, count_parameters, multi_head_attention, ClsPosition, EncoderConfig, EncoderModel,
    Injection, LayerVars, ModelInput,
};
use mag_core::fusion::InputFusion;
use mag_core::gradcheck::check_gradients;
use mag_core::mag::MagParams;
use mag_core::tensor::{Graph, Tensor};
use mag_core::{Dropout, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(injection: Injection) -> EncoderConfig {
    EncoderConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 20,
        max_len: 10,
        d_a: 3,
        d_v: 2,
        injection,
        hidden_dropout_p: 0.0,
        ..EncoderConfig::default()
    }
}

fn random_input(cfg: &EncoderConfig, n: usize, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelInput {
        tokens: (0..n).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect(),
        acoustic: (0..n * cfg.d_a).map(|_| rng.random_range(-1.0..1.0)).collect(),
        visual: (0..n * cfg.d_v).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn embed(model: &EncoderModel, tokens: &[u32]) -> Tensor {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g, false);
    let e = model.embed(&mut g, &b, tokens).unwrap();
    g.value(e).clone()
}

#[test]
fn empty_sequence_embeds_to_single_cls_row() {
    let model = EncoderModel::new(small(Injection::None), 1).unwrap();
    let e = embed(&model, &[]);
    assert_eq!(e.shape(), &[1, 8]);
    let p = model.params();
    let want: Vec<f64> = (0..8)
        .map(|j| {
            p.get("embed.token").unwrap().get(20, j)
                + p.get("embed.segment").unwrap().get(0, j)
                + p.get("embed.position").unwrap().get(0, j)
        })
        .collect();
    assert_eq!(e.data(), want.as_slice());
    let pred = model.predict(&ModelInput::text_only(vec![], 3, 2)).unwrap();
    assert!(pred.is_finite());
}

#[test]
fn repeated_token_rows_differ_by_position_embedding() {
    let model = EncoderModel::new(small(Injection::None), 2).unwrap();
    let e = embed(&model, &[7, 3, 7]);
    let pos = model.params().get("embed.position").unwrap();
    // CLS in front: word 0 at row 1, word 2 at row 3.
    for j in 0..8 {
        let lhs = e.get(3, j) - e.get(1, j);
        let rhs = pos.get(3, j) - pos.get(1, j);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn embedding_is_deterministic_per_seed() {
    let a = embed(&EncoderModel::new(small(Injection::None), 9).unwrap(), &[1, 2, 3]);
    let b = embed(&EncoderModel::new(small(Injection::None), 9).unwrap(), &[1, 2, 3]);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let c = embed(&EncoderModel::new(small(Injection::None), 10).unwrap(), &[1, 2, 3]);
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn embed_rejects_overlong_and_out_of_vocab() {
    let model = EncoderModel::new(small(Injection::None), 2).unwrap();
    let mut g = Graph::new();
    let b = model.params().bind(&mut g, false);
    assert!(model.embed(&mut g, &b, &[1; 10]).is_err());
    assert!(model.embed(&mut g, &b, &[1; 9]).is_ok());
    assert!(model.embed(&mut g, &b, &[20]).is_err());
}

#[test]
fn encoder_layer_preserves_shape_and_is_deterministic_in_eval() {
    let model = EncoderModel::new(small(Injection::None), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::matrix(5, 8, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let run = || {
        let mut g = Graph::new();
        let b = model.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = model.run_layer(&mut g, &b, 1, xv, &mut Dropout::new(Mode::Eval)).unwrap();
        g.value(y).clone()
    };
    let y1 = run();
    assert_eq!(y1.shape(), x.shape());
    assert_eq!(y1, run());
}

#[test]
fn attention_core_is_row_permutation_equivariant() {
    let model = EncoderModel::new(small(Injection::None), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let attend = |x: &[Vec<f64>]| {
        let mut g = Graph::new();
        let b = model.params().bind(&mut g, false);
        let xv = g.constant(Tensor::from_rows(x).unwrap());
        let w = LayerVars::from_bound(1, &b).unwrap();
        let y = multi_head_attention(&mut g, xv, &w, &model.layer_settings(), &mut Dropout::new(Mode::Eval)).unwrap();
        g.value(y).clone()
    };
    let y = attend(&rows);
    let yp = attend(&permuted);
    for (k, &i) in perm.iter().enumerate() {
        for j in 0..8 {
            assert!((yp.get(k, j) - y.get(i, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn language_only_model_gives_finite_output() {
    let cfg = small(Injection::None);
    let model = EncoderModel::new(cfg.clone(), 7).unwrap();
    for seed in 0..5 {
        let p = model.predict(&random_input(&cfg, 6, seed)).unwrap();
        assert!(p.is_finite());
    }
}

#[test]
fn forward_rejects_nonverbal_length_mismatch() {
    let cfg = small(Injection::Layer(1));
    let model = EncoderModel::new(cfg.clone(), 7).unwrap();
    let mut input = random_input(&cfg, 4, 1);
    input.acoustic.truncate(3 * cfg.d_a);
    assert!(model.predict(&input).is_err());
}

#[test]
fn gate_at_layer_j_is_an_extra_layer_norm_under_zero_nonverbal_input() {
    for j in 1..=3 {
        let cfg_j = small(Injection::Layer(j));
        let with_gate = EncoderModel::new(cfg_j.clone(), 11).unwrap();
        let language_only = with_gate.transfer(small(Injection::None), 0).unwrap();
        let input = ModelInput::text_only(vec![3, 1, 4, 1, 5], cfg_j.d_a, cfg_j.d_v);

        let gated = with_gate.hidden_states(&input).unwrap();
        let plain = language_only.hidden_states(&input).unwrap();
        for depth in 0..j {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&gated[depth]), bits(&plain[depth]), "depth {depth} before j={j}");
        }

        // language-only stack with one LayerNorm (gain 1, bias 0) inserted at j
        let mut g = Graph::new();
        let b = language_only.params().bind(&mut g, false);
        let mut dropout = Dropout::new(Mode::Eval);
        let mut x = language_only.embed(&mut g, &b, &input.tokens).unwrap();
        let gain = g.constant(Tensor::ones(1, 8));
        let bias = g.constant(Tensor::zeros(1, 8));
        let mut oracle = vec![g.value(x).clone()];
        for l in 1..=3 {
            x = language_only.run_layer(&mut g, &b, l, x, &mut dropout).unwrap();
            if l == j {
                x = g.layer_norm(x, gain, bias, cfg_j.ln_eps).unwrap();
            }
            oracle.push(g.value(x).clone());
        }
        for depth in j..=3 {
            let diff = gated[depth].max_abs_diff(&oracle[depth]);
            assert!(diff <= 1e-6, "depth {depth}, j={j}: diff {diff:e}");
        }
    }
}

#[test]
fn cls_end_mirrors_cls_front() {
    // With the sequence, its features and the position table all mirrored,
    // XLNet-style CLS at index N sees exactly what BERT-style CLS at 0 sees.
    let n = 5;
    let front_cfg = EncoderConfig {
        max_len: n + 1,
        ..small(Injection::Layer(2))
    };
    let end_cfg = EncoderConfig {
        cls_position: ClsPosition::End,
        ..front_cfg.clone()
    };
    let front = EncoderModel::new(front_cfg.clone(), 21).unwrap();
    let mut end = front.transfer(end_cfg, 0).unwrap();
    let pos = front.params().get("embed.position").unwrap();
    let mirrored: Vec<Vec<f64>> = (0..=n).rev().map(|i| pos.row_slice(i).to_vec()).collect();
    *end.params_mut().get_mut("embed.position").unwrap() = Tensor::from_rows(&mirrored).unwrap();

    let input = random_input(&front_cfg, n, 3);
    let rev_rows = |flat: &[f64], w: usize| -> Vec<f64> {
        flat.chunks(w).rev().flatten().copied().collect()
    };
    let reversed = ModelInput {
        tokens: input.tokens.iter().rev().copied().collect(),
        acoustic: rev_rows(&input.acoustic, front_cfg.d_a),
        visual: rev_rows(&input.visual, front_cfg.d_v),
    };
    assert_eq!(front.cls_row(n), 0);
    assert_eq!(end.cls_row(n), n);
    let a = front.predict(&input).unwrap();
    let b = end.predict(&reversed).unwrap();
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn parameter_counts() {
    let zero_layers = EncoderConfig {
        n_layers: 0,
        injection: Injection::None,
        ..EncoderConfig::default()
    };
    let m = EncoderModel::new(zero_layers, 0).unwrap();
    let c = count_parameters(&m);
    assert_eq!(c.encoder_layers, 0);
    assert_eq!(c.total, c.embeddings + c.head);
    assert_eq!(c.embeddings, 257 * 32 + 32 + 24 * 32);
    assert_eq!(c.head, 33);

    let gated = EncoderModel::new(EncoderConfig::default(), 0).unwrap();
    let c = count_parameters(&gated);
    assert_eq!(c.mag, 2914);
    assert_eq!(c.mag, MagParams::count_for(32, 5, 7));
    let all = EncoderModel::new(
        EncoderConfig {
            injection: Injection::All,
            ..EncoderConfig::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(count_parameters(&all).mag, 5 * 2914);
    let shared = EncoderModel::new(
        EncoderConfig {
            injection: Injection::All,
            share_mag: true,
            ..EncoderConfig::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(count_parameters(&shared).mag, 2914);

    let four = count_parameters(&EncoderModel::new(EncoderConfig::default(), 0).unwrap());
    let eight = count_parameters(
        &EncoderModel::new(
            EncoderConfig {
                n_layers: 8,
                ..EncoderConfig::default()
            },
            0,
        )
        .unwrap(),
    );
    assert_eq!(eight.encoder_layers, 2 * four.encoder_layers);
    assert_eq!(eight.per_layer, four.per_layer);
    // 4 attention projections + biases, FFN, two LayerNorms
    assert_eq!(four.per_layer, 4 * (32 * 32 + 32) + (32 * 64 + 64) + (64 * 32 + 32) + 4 * 32);

    let add = count_parameters(
        &EncoderModel::new(
            EncoderConfig {
                injection: Injection::None,
                input_fusion: InputFusion::Add,
                ..EncoderConfig::default()
            },
            0,
        )
        .unwrap(),
    );
    assert_eq!(add.fusion, (5 + 7) * 32);
}

#[test]
fn batched_predictions_match_single() {
    let cfg = small(Injection::All);
    let model = EncoderModel::new(cfg.clone(), 17).unwrap();
    let inputs: Vec<ModelInput> = (0..6).map(|s| random_input(&cfg, 2 + s as usize % 5, s)).collect();
    let batched = model.predict_batch(&inputs).unwrap();
    for (input, b) in inputs.iter().zip(&batched) {
        assert!((model.predict(input).unwrap() - b).abs() <= 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let model = EncoderModel::new(small(Injection::All), 23).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let loaded = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), model);
    assert!(checkpoint::from_bytes(b"{\"format\":\"other\"}").is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_len: 8,
        d_a: 3,
        d_v: 2,
        injection: Injection::Layer(1),
        hidden_dropout_p: 0.0,
        ..EncoderConfig::default()
    };
    let mut seed = 0;
    loop {
        seed += 1;
        assert!(seed < 200, "no kink-free sample found");
        let mut model = EncoderModel::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in model.params_mut().iter_mut() {
            if name.ends_with("b_h") || name.ends_with(".b_v") && name.starts_with("mag") {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let input = random_input(&cfg, 4, seed);
        let report = check_gradients(model.params(), 1e-5, |g, b| {
            Ok(model.forward(g, b, &input, Mode::Eval)?.prediction)
        })
        .unwrap();
        if report.kink_margin < 1e-3 {
            continue;
        }
        let worst = report.worst().unwrap();
        assert!(worst.max_rel_error <= 1e-4, "{}: {:e}", worst.name, worst.max_rel_error);
        break;
    }
}
