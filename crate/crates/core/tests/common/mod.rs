#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rematch::backbone::{Backbone, BackboneConfig, InputElem, SeqInput};
use rematch::mask::AttentionMask;
use rematch::matcher::{LayoutElem, MatchLayout, SegmentKind};
use rematch::model::{Model, ModelConfig};
use rematch::params::Session;
use rematch::sequence::Element;
use rematch::synth::TaskConfig;

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 160,
        ..BackboneConfig::default()
    }
}

pub fn small_task(seed: u64) -> TaskConfig {
    TaskConfig {
        text_len: 5,
        n_patches: 3,
        patch_dim: 16,
        ..TaskConfig::with_seed(seed)
    }
}

/// Fresh model with every tensor (biases and norms included) jittered.
pub fn random_model(seed: u64, k: usize) -> Model {
    let mut m = Model::init(
        ModelConfig {
            backbone: small_backbone(),
            k,
            chat_wrap: false,
        },
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for (_, t) in m.params.iter_mut() {
        for x in t.data_mut() {
            *x += 0.1 * rng.sample::<f32, _>(StandardNormal);
        }
    }
    m
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn elem(e: &LayoutElem, z: [&[f32]; 3]) -> InputElem<f32> {
    use rematch::matcher::FeatureRef;
    match e {
        LayoutElem::Plain(Element::Token(t)) => InputElem::Token(*t),
        LayoutElem::Plain(Element::Vector(v)) => InputElem::Value(v.clone()),
        LayoutElem::Feature(FeatureRef::Query) => InputElem::Value(z[0].to_vec()),
        LayoutElem::Feature(FeatureRef::Positive) => InputElem::Value(z[1].to_vec()),
        LayoutElem::Feature(FeatureRef::Negative) => InputElem::Value(z[2].to_vec()),
    }
}

/// Answer logits from one forward per answer, each over only the prompt,
/// the answer's query segment, its doc segment and the answer itself.
/// Elements keep their original position ids; content segments see the
/// prompt and themselves causally, the answer sees everything present.
pub fn per_pair_logits(model: &Model, layout: &MatchLayout, z: [&[f32]; 3]) -> Vec<Vec<f32>> {
    let cfg = &model.config.backbone;
    let mut out = Vec::new();
    for (a, view) in layout.views.iter().enumerate() {
        let parts = [
            SegmentKind::Prompt,
            view.query_segment(),
            view.doc_segment(),
            SegmentKind::Answer(a),
        ];
        let mut keep = Vec::new();
        let mut part_of = Vec::new();
        for (p, kind) in parts.iter().enumerate() {
            let span = layout.span(*kind).expect("segment present");
            for i in span.start..span.start + span.len {
                keep.push(i);
                part_of.push(p);
            }
        }
        let n = keep.len();
        let mut mask = AttentionMask::diagonal(n);
        for i in 0..n {
            for j in 0..i {
                let ok = part_of[j] == part_of[i] || part_of[j] == 0 || part_of[i] == 3;
                mask.set(i, j, ok);
            }
        }
        let elems = keep.iter().map(|&i| elem(&layout.elements[i], z)).collect();
        let input = SeqInput::with_mask(elems, keep.clone(), mask);
        let mut sess = Session::new(&model.params);
        let bb = Backbone::new(cfg);
        let packed = bb.forward_packed(&mut sess, &[input]).unwrap();
        let last = sess.tape.gather_rows(packed.hidden, vec![n - 1]).unwrap();
        let logits = bb.logits(&mut sess, last).unwrap();
        out.push(sess.tape.value(logits).data().to_vec());
    }
    out
}
