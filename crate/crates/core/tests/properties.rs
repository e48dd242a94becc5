use proptest::prelude::*;
use recid_core::backbone::{tiny_tokenizer, Tokenizer};
use recid_core::corpus::*;
use recid_core::evaluation::*;
use recid_core::methods::*;
use recid_core::templates::*;

const WORDS: [&str; 8] = ["hello", "hi", "i", "you", "like", "want", "to", "see"];
const TOPICS: [&str; 4] = ["Greetings", "Movie recommendation", "Chat about stars", "Music recommendation"];

fn conversation() -> impl Strategy<Value = Conversation> {
    (any::<bool>(), prop::collection::vec((0usize..4, prop::collection::vec(0usize..8, 1..5)), 1..12)).prop_map(
        |(system_first, turns)| {
            let mut utterances: Vec<Utterance> = turns
                .into_iter()
                .enumerate()
                .map(|(i, (topic, words))| Utterance {
                    speaker: if (i % 2 == 0) == system_first { Speaker::System } else { Speaker::User },
                    text: words.iter().map(|w| WORDS[*w]).collect::<Vec<_>>().join(" "),
                    turn_index: i,
                    topic: Some(TOPICS[topic].into()),
                    raw_label: None,
                })
                .collect();
            if !utterances.iter().any(|u| u.speaker == Speaker::System) {
                utterances.push(Utterance {
                    speaker: Speaker::System,
                    text: "hi".into(),
                    turn_index: utterances.len(),
                    topic: Some("Greetings".into()),
                    raw_label: None,
                });
            }
            Conversation {
                id: "c".into(),
                language: Language::En,
                domain_tag: "t".into(),
                utterances,
                profile: None,
                context: None,
            }
        },
    )
}

fn labels_strategy(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    n.prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))
}

proptest! {
    #[test]
    fn examples_follow_system_turns(conv in conversation()) {
        let exs = make_examples(&conv, LabelSource::Topic).unwrap();
        prop_assert_eq!(exs.len(), conv.system_turns());
        for ex in &exs {
            prop_assert_eq!(conv.utterances[ex.target_index].speaker, Speaker::System);
            prop_assert_eq!(ex.history.len(), ex.target_index);
            let topic = conv.utterances[ex.target_index].topic.as_deref().unwrap();
            prop_assert_eq!(ex.label, u8::from(topic.contains("recommendation")));
        }
    }

    #[test]
    fn collapse_keeps_positives_and_breaks_negative_runs(conv in conversation()) {
        let exs = make_examples(&conv, LabelSource::Topic).unwrap();
        let out = collapse_consecutive_negatives(&exs);
        prop_assert_eq!(out.iter().filter(|e| e.label == 1).count(), exs.iter().filter(|e| e.label == 1).count());
        prop_assert!(out.windows(2).all(|w| !(w[0].label == 0 && w[1].label == 0)));
        prop_assert_eq!(collapse_consecutive_negatives(&out), out);
    }

    #[test]
    fn first_positive_is_idempotent_and_keeps_negatives(conv in conversation()) {
        let exs = make_examples(&conv, LabelSource::Topic).unwrap();
        let out = retain_first_positive_per_topic(&exs).unwrap();
        prop_assert_eq!(out.iter().filter(|e| e.label == 0).count(), exs.iter().filter(|e| e.label == 0).count());
        for w in out.windows(2) {
            prop_assert!(!(w[0].label == 1 && w[1].label == 1 && w[0].topic == w[1].topic));
        }
        prop_assert_eq!(retain_first_positive_per_topic(&out).unwrap(), out);
    }

    #[test]
    fn splits_are_disjoint_and_complete(n in 1usize..60, seed in any::<u64>()) {
        let pool: Vec<Conversation> = (0..n).map(|i| {
            let mut c = conversation_fixed();
            c.id = format!("c{i}");
            c
        }).collect();
        let parts = split_by_conversation(pool, SplitRatios::default(), seed);
        let mut ids: Vec<String> = parts.iter().flatten().map(|c| c.id.clone()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }

    #[test]
    fn render_fits_and_keeps_newest_turns(conv in conversation(), max_len in 5usize..60) {
        let tok = tiny_tokenizer();
        let t = TemplateRegistry::default().get("sentinel-en").unwrap().clone();
        for ex in make_examples(&conv, LabelSource::Topic).unwrap() {
            let r = render(&t, &ex, &tok, max_len).unwrap();
            prop_assert!(r.token_ids.len() <= max_len);
            prop_assert_eq!(r.token_ids.iter().filter(|i| **i == tok.special().mask).count(), 1);
            prop_assert_eq!(r.token_ids[r.mask_position], tok.special().mask);
            prop_assert!(r.dropped_history_turns <= ex.history.len());
            // Rendering with one more token of room never drops more turns.
            let wider = render(&t, &ex, &tok, max_len + 1).unwrap();
            prop_assert!(wider.dropped_history_turns <= r.dropped_history_turns);
        }
    }

    #[test]
    fn metrics_match_brute_force((preds, golds) in labels_strategy(1..200)) {
        let m = compute_metrics(&preds, &golds).unwrap();
        let count = |p: u8, g: u8| preds.iter().zip(&golds).filter(|(a, b)| **a == p && **b == g).count() as f64;
        let (tp, fp, fn_, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        prop_assert_eq!(m.accuracy, (tp + tn) / preds.len() as f64);
        prop_assert_eq!((m.precision, m.recall, m.f1), (p, r, f));
        for name in METRIC_NAMES {
            let v = m.get(name).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_example_order((preds, golds) in labels_strategy(1..100), rot in 0usize..100) {
        let k = rot % preds.len();
        let mut p2 = preds.clone();
        let mut g2 = golds.clone();
        p2.rotate_left(k);
        g2.rotate_left(k);
        prop_assert_eq!(compute_metrics(&preds, &golds).unwrap(), compute_metrics(&p2, &g2).unwrap());
    }

    #[test]
    fn loss_matches_loop_reference(rows in prop::collection::vec((0.0f64..=1.0, 0u8..2), 1..50)) {
        let probs: Vec<ClassProbs> = rows.iter().map(|(p1, _)| ClassProbs { p0: 1.0 - p1, p1: *p1 }).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let mut sum = 0.0;
        for (p, y) in probs.iter().zip(&labels) {
            let q = if *y == 1 { p.p1 } else { p.p0 };
            sum -= q.max(1e-12).ln();
        }
        let want = sum / rows.len() as f64;
        let got = bce_loss(&probs, &labels).unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn class_probs_shift_invariant(l0 in -30.0f64..30.0, l1 in -30.0f64..30.0, c in -100.0f64..100.0) {
        let a = class_probs_from_logits(l0, l1).unwrap();
        let b = class_probs_from_logits(l0 + c, l1 + c).unwrap();
        prop_assert!((a.p1 - b.p1).abs() < 1e-12);
        prop_assert!((a.p0 + a.p1 - 1.0).abs() < 1e-15);
        prop_assert_eq!(a.label(), u8::from(l1 > l0));
    }

    #[test]
    fn balanced_sampler_is_exact(pos in 20usize..60, neg in 20usize..60, half in 1usize..20, seed in any::<u64>()) {
        let pool = DatasetSplit::new(SplitName::Train, (0..pos + neg).map(|i| RecExample {
            conversation_id: format!("c{i}"),
            target_index: 1,
            history: vec![HistoryTurn { speaker: Speaker::User, text: "hi".into() }],
            label: u8::from(i < pos),
            topic: None,
            language: Language::En,
        }).collect());
        let spec = FewShotSpec { n: 2 * half, balanced: true, seed, epoch_multiplier: None };
        let s = sample_few_shot(&pool, &spec).unwrap();
        prop_assert_eq!((s.len(), s.positives()), (2 * half, half));
        prop_assert_eq!(sample_few_shot(&pool, &spec).unwrap(), s);
    }
}

fn conversation_fixed() -> Conversation {
    Conversation {
        id: String::new(),
        language: Language::En,
        domain_tag: "t".into(),
        utterances: vec![
            Utterance { speaker: Speaker::User, text: "hi".into(), turn_index: 0, topic: None, raw_label: None },
            Utterance { speaker: Speaker::System, text: "hello".into(), turn_index: 1, topic: None, raw_label: None },
        ],
        profile: None,
        context: None,
    }
}
