use std::sync::Arc;

use anticipate_core::corpus::{top_objects, WindowConfig};
use anticipate_core::metrics::{derive_verb_noun, topk_hit, Marginal};
use anticipate_core::model::{Channel, ModalitySpec, Model, ModelConfig, SegmentInput, Stage};
use anticipate_core::objectives::contrastive_loss;
use anticipate_core::synthworld::{build_world, WorldConfig};
use anticipate_core::text::embed_text;
use anticipate_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn unit_rows(raw: &[f64], d: usize) -> Vec<f64> {
    raw.chunks(d)
        .flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            r.iter().map(move |x| x / n).collect::<Vec<_>>()
        })
        .collect()
}

fn tiny_model(seed: u64) -> Model<f32> {
    let config = ModelConfig {
        dim: 16,
        heads: 2,
        fuser_layers: 1,
        decoder_layers: 2,
        contrast_dim: 8,
        buckets: 64,
        classes: 6,
        max_len: 12,
        modalities: vec![ModalitySpec::dense("rgb", 4), ModalitySpec::text("act_text")],
        ..ModelConfig::default()
    };
    Model::new(config, seed).unwrap()
}

fn segment(rgb: Vec<f32>, words: &[String]) -> SegmentInput {
    SegmentInput {
        steps: words.len(),
        channels: vec![
            Some(Channel::Dense(Arc::new(rgb))),
            Some(Channel::Text(words.iter().map(|w| Arc::new(embed_text(w, 64))).collect())),
        ],
    }
}

fn z_hat(model: &Model<f32>, seg: &SegmentInput) -> Vec<f32> {
    let tape = Tape::new();
    let out = model.forward(&model.ctx(&tape), &[seg], Stage::Finetune).unwrap();
    tape.value(out.z_hat).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_covers_steps_and_ends_before_the_gap(tau_a in 0u32..5, tau_o in 1u32..20, fps in 1u32..4, start in 0usize..200) {
        let w = WindowConfig { tau_a: tau_a as f64, tau_o: tau_o as f64, fps: fps as f64 };
        prop_assert_eq!(w.steps(), (tau_o * fps) as usize);
        match w.frames(start) {
            Some(r) => {
                prop_assert_eq!(r.len(), w.steps());
                prop_assert_eq!(r.end + (tau_a * fps) as usize, start);
                prop_assert!(start >= w.min_start_frame());
            }
            None => prop_assert!(start < w.min_start_frame()),
        }
    }

    #[test]
    fn top_objects_ignore_input_order(scores in prop::collection::vec(0.0f32..1.0, 0..12), seed in any::<u64>()) {
        let named: Vec<(String, f32)> = scores.iter().enumerate().map(|(i, &s)| (format!("obj{i}"), s)).collect();
        let mut shuffled = named.clone();
        let mut rng = anticipate_core::rng::stream(seed, 0);
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let a = top_objects(&named, 0.15, 5);
        prop_assert_eq!(&a, &top_objects(&shuffled, 0.15, 5));
        prop_assert!(a.len() <= 5);
    }

    #[test]
    fn topk_is_monotone_in_k(scores in prop::collection::vec(-3.0f64..3.0, 1..16), pick in any::<prop::sample::Index>()) {
        let target = pick.index(scores.len());
        let mut was = false;
        for k in 1..=scores.len() {
            let hit = topk_hit(&scores, target, k).unwrap();
            prop_assert!(hit || !was);
            was = hit;
        }
        prop_assert!(was);
    }

    #[test]
    fn top1_ignores_monotone_transforms(scores in prop::collection::vec(-3.0f64..3.0, 2..16), pick in any::<prop::sample::Index>()) {
        let target = pick.index(scores.len());
        let moved: Vec<f64> = scores.iter().map(|x| 2.0 * x.exp() + 1.0).collect();
        for k in [1, 2] {
            prop_assert_eq!(topk_hit(&scores, target, k).unwrap(), topk_hit(&moved, target, k).unwrap());
        }
    }

    #[test]
    fn contrastive_loss_ignores_pair_order(raw in prop::collection::vec(-1.0f64..1.0, 48), seed in any::<u64>(), log_tau in -2.5f64..0.0) {
        let (b, d) = (4, 6);
        let v = unit_rows(&raw[..b * d], d);
        let t = unit_rows(&raw[b * d..], d);
        let mut order: Vec<usize> = (0..b).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut anticipate_core::rng::stream(seed, 0));
        let permute = |x: &[f64]| order.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
        let loss = |v: Vec<f64>, t: Vec<f64>| {
            let tape = Tape::<f64>::new();
            let vv = tape.constant(Tensor::from_vec(vec![b, d], v));
            let tt = tape.constant(Tensor::from_vec(vec![b, d], t));
            let lt = tape.constant(Tensor::from_vec(vec![1], vec![log_tau]));
            let l = contrastive_loss(&tape, vv, tt, lt).unwrap();
            tape.value(l.cross).item()
        };
        let a = loss(v.clone(), t.clone());
        let p = loss(permute(&v), permute(&t));
        prop_assert!((a - p).abs() < 1e-12, "{} vs {}", a, p);
    }

    #[test]
    fn verb_noun_marginals_are_distributions(scores in prop::collection::vec(-5.0f32..5.0, 24)) {
        let world = build_world(&WorldConfig::default(), 7).unwrap();
        let (v, n) = derive_verb_noun(&scores, &world.vocab, Marginal::Sum);
        prop_assert_eq!(v.len(), 6);
        prop_assert_eq!(n.len(), 4);
        for p in [&v, &n] {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
        // The max variant is bounded by the marginal, entry by entry.
        let (vm, nm) = derive_verb_noun(&scores, &world.vocab, Marginal::Max);
        for (m, s) in vm.iter().zip(&v).chain(nm.iter().zip(&n)) {
            prop_assert!(*m <= *s + 1e-15 && *m > 0.0);
        }
    }
}

#[test]
fn future_frames_never_move_past_predictions() {
    use rand::Rng as _;
    let model = tiny_model(11);
    let mut rng = anticipate_core::rng::stream(5, 9);
    let (steps, d) = (10, 16);
    for trial in 0..100 {
        let rgb: Vec<f32> = (0..steps * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let words: Vec<String> = (0..steps).map(|i| format!("take plate {}", (i + trial) % 3)).collect();
        let t = rng.gen_range(0..steps - 1);
        let base = z_hat(&model, &segment(rgb.clone(), &words));

        let mut rgb2 = rgb.clone();
        for x in &mut rgb2[(t + 1) * 4..] {
            *x += rng.gen_range(-3.0..3.0);
        }
        let mut words2 = words.clone();
        for w in &mut words2[t + 1..] {
            *w = format!("cut knife {}", rng.gen_range(0..100));
        }
        let moved = z_hat(&model, &segment(rgb2, &words2));
        assert_eq!(&base[..(t + 1) * d], &moved[..(t + 1) * d], "trial {trial}, t = {t}");
        assert_ne!(&base[(t + 1) * d..], &moved[(t + 1) * d..]);
    }
}
