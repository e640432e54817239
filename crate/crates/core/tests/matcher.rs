mod common;

use common::{per_pair_logits, random_model, random_vec, small_task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rematch::autodiff::GradientSet;
use rematch::matcher::{assemble, assemble_with_slot, Label, LayoutElem, MatchingMode, SegmentKind, Slot};
use rematch::params::Session;
use rematch::sequence::Element;
use rematch::synth::World;
use rematch::trainer::{total_loss_graph, TrainConfig};

#[test]
fn unified_pass_matches_per_pair_passes() {
    for seed in 0..6u64 {
        let model = random_model(seed, 2);
        let world = World::new(&small_task(seed)).unwrap();
        let inst = world.instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<Vec<f32>> = (0..3).map(|_| random_vec(&mut rng, 16)).collect();
        let z = [&z[0][..], &z[1][..], &z[2][..]];
        for mode in [MatchingMode::Full, MatchingMode::FeatOnly] {
            for slot in [Slot::One, Slot::Two] {
                let layout = assemble_with_slot(&inst.query, &inst.positive, &inst.hard_negative, mode, 160, slot).unwrap();
                let unified = model.match_logits(&layout, z).unwrap();
                let pairs = per_pair_logits(&model, &layout, z);
                assert_eq!(pairs.len(), unified.rows());
                for (a, row) in pairs.iter().enumerate() {
                    for (u, p) in unified.row(a).iter().zip(row) {
                        assert!((u - p).abs() <= 1e-5, "seed {seed} {mode:?} {slot:?} answer {a}: {u} vs {p}");
                    }
                }
            }
        }
    }
}

#[test]
fn zeroing_a_segment_only_moves_its_answers() {
    let model = random_model(11, 2);
    let world = World::new(&small_task(11)).unwrap();
    let inst = world.instance(0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z: Vec<Vec<f32>> = (0..3).map(|_| random_vec(&mut rng, 16)).collect();
    let z = [&z[0][..], &z[1][..], &z[2][..]];
    let layout = assemble_with_slot(&inst.query, &inst.positive, &inst.hard_negative, MatchingMode::Full, 160, Slot::One).unwrap();
    let base = model.match_logits(&layout, z).unwrap();
    let content = [
        SegmentKind::QueryRaw,
        SegmentKind::QueryFeat,
        SegmentKind::Doc1Raw,
        SegmentKind::Doc1Feat,
        SegmentKind::Doc2Raw,
        SegmentKind::Doc2Feat,
    ];
    for kind in content {
        let mut probe = layout.clone();
        let span = *probe.span(kind).unwrap();
        for e in &mut probe.elements[span.start..span.start + span.len] {
            *e = match e {
                LayoutElem::Plain(Element::Vector(v)) => LayoutElem::Plain(Element::Vector(vec![0.0; v.len()])),
                _ => LayoutElem::Plain(Element::Token(0)),
            };
        }
        let moved = model.match_logits(&probe, z).unwrap();
        for (a, v) in layout.views.iter().enumerate() {
            let touches = v.query_segment() == kind || v.doc_segment() == kind;
            let same = base.row(a) == moved.row(a);
            assert_eq!(same, !touches, "{kind:?} answer {a}");
        }
    }
}

#[test]
fn slot_assignment_is_fair() {
    let world = World::new(&small_task(2)).unwrap();
    let inst = world.instance(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let mut ones = 0;
    for _ in 0..n {
        let l = assemble(&inst.query, &inst.positive, &inst.hard_negative, MatchingMode::Full, 160, &mut rng).unwrap();
        ones += (l.positive_slot == Slot::One) as usize;
        assert_eq!(l.labels.iter().filter(|&&x| x == Label::Yes).count(), 4);
    }
    let f = ones as f64 / n as f64;
    assert!((f - 0.5).abs() <= 0.015, "{f}");
}

fn grad_norm(g: &GradientSet<f32>, name: &str) -> f64 {
    g.get(name).map_or(0.0, |t| t.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
}

#[test]
fn matching_loss_reaches_tokens_and_projector() {
    let model = random_model(4, 2);
    let world = World::new(&small_task(4)).unwrap();
    let data: Vec<_> = (0..3).map(|i| world.instance(i)).collect();
    let batch: Vec<_> = data.iter().collect();
    for mode in [MatchingMode::Full, MatchingMode::FeatOnly] {
        let cfg = TrainConfig {
            matching_mode: mode,
            ..TrainConfig::new(model.config.clone(), 1, 4)
        };
        let mut sess = Session::new(&model.params);
        let vars = total_loss_graph(&mut sess, &cfg, &batch, 0).unwrap();
        let g = sess.tape.backward(vars.qdm.unwrap()).unwrap().into_params();
        for name in ["lt.query", "lt.doc", "proj.1.w", "proj.2.w", "lm_head.w"] {
            assert!(grad_norm(&g, name) > 0.0, "{mode:?}: no matching gradient on {name}");
        }
    }
}
