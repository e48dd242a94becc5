use recid_core::backbone::*;
use recid_core::corpus::*;
use recid_core::methods::*;
use recid_core::templates::*;

const H: f64 = 1e-5;

fn example(text: &str, label: u8) -> RecExample {
    RecExample {
        conversation_id: "c".into(),
        target_index: 1,
        history: vec![HistoryTurn { speaker: Speaker::User, text: text.into() }],
        label,
        topic: None,
        language: Language::En,
    }
}

/// BCE of one example through the prompt path, plus the gradient for every
/// prefix matrix.
fn prefix_loss(b: &EncoderBackbone, r: &RenderedPrompt, pp: &PrefixParams, label: u8) -> (f64, Vec<Matrix>) {
    let net = b.net();
    let bind = bind_verbalizer(&Verbalizer::default(), b.tokenizer()).unwrap();
    let mut tape = Tape::frozen(&net.params);
    let (slots, vars) = pp.on_tape(&mut tape, net.num_layers(), true);
    let h = net.forward_with_prefix(&mut tape, &r.token_ids, &slots).unwrap();
    let row = tape.rows(h, r.mask_position, 1);
    let l = net.token_logits(&mut tape, row, &bind.token_ids).unwrap();
    let lv = tape.value(l).clone();
    let probs = class_probs_from_logits(lv[(0, 0)], lv[(0, 1)]).unwrap();
    let seed = bce_grad_logits(lv[(0, 0)], lv[(0, 1)], label).unwrap();
    let grads = tape.backward_with(l, Matrix::from_shape_vec((1, 2), seed.to_vec()).unwrap());
    let loss = bce_loss(&[probs], &[label]).unwrap();
    (loss, vars.iter().map(|v| grads.leaf(*v).cloned().unwrap()).collect())
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-300)
}

fn tiny_with_std(std: f64) -> EncoderBackbone {
    let net = Transformer::random(tiny_config(false), TINY_DEFAULT_SEED, std).unwrap();
    EncoderBackbone::new("tiny", net, std::sync::Arc::new(tiny_tokenizer())).unwrap()
}

/// Per prefix vector: (relative error against central differences, analytic norm).
fn prefix_check(b: &EncoderBackbone) -> Vec<(usize, usize, f64, f64)> {
    let t = TemplateRegistry::default().get("sentinel-en").unwrap().clone();
    let mut out = Vec::new();
    for (text, label) in [("hello suggest you", 1), ("i like to see", 0)] {
        let r = render(&t, &example(text, label), b.tokenizer(), 64).unwrap();
        let mut pp = PrefixParams::new(&PrefixConfig { length: 3, ..Default::default() }, b, 1).unwrap();
        for v in &mut pp.vectors {
            v.mapv_inplace(|x| x * 25.0);
        }
        let (_, analytic) = prefix_loss(b, &r, &pp, label);
        for (m, g) in analytic.iter().enumerate() {
            for row in 0..pp.length {
                let fd: Vec<f64> = (0..b.hidden_size())
                    .map(|col| {
                        let mut plus = pp.clone();
                        plus.vectors[m][(row, col)] += H;
                        let mut minus = pp.clone();
                        minus.vectors[m][(row, col)] -= H;
                        (prefix_loss(b, &r, &plus, label).0 - prefix_loss(b, &r, &minus, label).0) / (2.0 * H)
                    })
                    .collect();
                let an = g.row(row).to_vec();
                let norm = an.iter().map(|x| x * x).sum::<f64>().sqrt();
                out.push((m, row, rel(&an, &fd), norm));
            }
        }
    }
    out
}

#[test]
fn prefix_gradients_match_finite_differences() {
    // With init std 0.2 attention stays soft and every prefix vector gets a
    // gradient well above finite-difference noise.
    for (layer, row, err, norm) in prefix_check(&tiny_with_std(0.2)) {
        assert!(norm > 1e-3, "layer {layer} vector {row}: gradient norm {norm:.2e} too small to check");
        assert!(err < 1e-5, "layer {layer} vector {row}: relative error {err:.2e}");
    }
}

#[test]
fn prefix_gradients_on_default_backbone() {
    // The default init saturates attention, so deeper prefix gradients can be
    // ~1e-8 where central differences carry ~1e-11 absolute noise. Vectors
    // with a usable gradient must match; the rest must be near zero.
    let checks = prefix_check(&tiny_backbone(TINY_DEFAULT_SEED));
    assert!(checks.iter().any(|c| c.3 > 1e-3));
    for (layer, row, err, norm) in checks {
        if norm > 1e-4 {
            assert!(err < 1e-5, "layer {layer} vector {row}: relative error {err:.2e}");
        } else {
            assert!(norm < 1e-4 && err * norm < 1e-9, "layer {layer} vector {row}");
        }
    }
}

#[test]
fn loss_gradient_wrt_logits_matches_finite_differences() {
    for (l0, l1) in [(0.3, -1.2), (4.0, 4.0), (-7.5, 2.25), (6.0, -3.0)] {
        for y in [0u8, 1] {
            let f = |a: f64, b: f64| bce_loss(&[class_probs_from_logits(a, b).unwrap()], &[y]).unwrap();
            let g = bce_grad_logits(l0, l1, y).unwrap();
            let fd = [(f(l0 + H, l1) - f(l0 - H, l1)) / (2.0 * H), (f(l0, l1 + H) - f(l0, l1 - H)) / (2.0 * H)];
            assert!(rel(&g, &fd) < 1e-6, "({l0},{l1}) y={y}: {g:?} vs {fd:?}");
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // Hard prompt training updates the backbone; spot-check a few entries of
    // tensors in each part of the network.
    let b = tiny_backbone(TINY_DEFAULT_SEED);
    let t = TemplateRegistry::default().get("sentinel-en").unwrap().clone();
    let r = render(&t, &example("you suggest", 1), b.tokenizer(), 64).unwrap();
    let bind = bind_verbalizer(&Verbalizer::default(), b.tokenizer()).unwrap();
    let loss_grads = |net: &Transformer| -> (f64, Gradients) {
        let mut tape = Tape::new(&net.params);
        let h = net.forward_plain(&mut tape, &r.token_ids).unwrap();
        let row = tape.rows(h, r.mask_position, 1);
        let l = net.token_logits(&mut tape, row, &bind.token_ids).unwrap();
        let lv = tape.value(l).clone();
        let p = class_probs_from_logits(lv[(0, 0)], lv[(0, 1)]).unwrap();
        let seed = bce_grad_logits(lv[(0, 0)], lv[(0, 1)], 1).unwrap();
        let grads = tape.backward_with(l, Matrix::from_shape_vec((1, 2), seed.to_vec()).unwrap());
        (bce_loss(&[p], &[1]).unwrap(), grads)
    };
    let net = b.net().clone();
    let (_, grads) = loss_grads(&net);
    for name in [
        "embeddings.word_embeddings",
        "embeddings.layer_norm.weight",
        "encoder.layer.0.attention.query.weight",
        "encoder.layer.1.intermediate.bias",
        "encoder.layer.1.output.layer_norm.bias",
        "mlm.transform.weight",
        "mlm.bias",
    ] {
        let id = net.params.id(name).unwrap();
        let g = grads.param(id).expect("trainable").clone();
        let shape = g.dim();
        let mut an = Vec::new();
        let mut fd = Vec::new();
        for k in 0..6 {
            let (i, j) = ((k * 7) % shape.0, (k * 5 + 4) % shape.1);
            let mut plus = net.clone();
            plus.params.get_mut(id)[(i, j)] += H;
            let mut minus = net.clone();
            minus.params.get_mut(id)[(i, j)] -= H;
            fd.push((loss_grads(&plus).0 - loss_grads(&minus).0) / (2.0 * H));
            an.push(g[(i, j)]);
        }
        let e = rel(&an, &fd);
        assert!(e < 1e-5, "{name}: {e:.2e} {an:?} {fd:?}");
    }
}
