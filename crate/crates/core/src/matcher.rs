//! Multi-view query/document matching.
//!
//! One sequence per instance holds a prompt, the raw and projected-feature
//! views of the query and of two document slots, then one placeholder per
//! (query view, doc slot, doc view) combination. The unified mask lets each
//! placeholder see the prompt plus exactly its own query and doc segment,
//! so all answers come out of a single forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, InputElem, SeqInput};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::model::{Model, PROJECTOR};
use crate::params::Session;
use crate::sequence::{Element, TokenSequence};
use crate::tensor::{Scalar, Tensor};
use crate::vocab;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    #[default]
    Full,
    FeatOnly,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Raw,
    Feat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewPair {
    pub query_view: View,
    pub doc_slot: Slot,
    pub doc_view: View,
}

impl ViewPair {
    /// `4 * [query feat] + 2 * [slot two] + [doc feat]`.
    pub fn canonical_index(&self) -> usize {
        4 * (self.query_view == View::Feat) as usize
            + 2 * (self.doc_slot == Slot::Two) as usize
            + (self.doc_view == View::Feat) as usize
    }

    pub fn query_segment(&self) -> SegmentKind {
        match self.query_view {
            View::Raw => SegmentKind::QueryRaw,
            View::Feat => SegmentKind::QueryFeat,
        }
    }

    pub fn doc_segment(&self) -> SegmentKind {
        match (self.doc_slot, self.doc_view) {
            (Slot::One, View::Raw) => SegmentKind::Doc1Raw,
            (Slot::One, View::Feat) => SegmentKind::Doc1Feat,
            (Slot::Two, View::Raw) => SegmentKind::Doc2Raw,
            (Slot::Two, View::Feat) => SegmentKind::Doc2Feat,
        }
    }
}

/// Answered combinations in canonical order; empty when matching is off.
pub fn lightweight_views(mode: MatchingMode) -> Vec<ViewPair> {
    let views: &[View] = match mode {
        MatchingMode::Full => &[View::Raw, View::Feat],
        MatchingMode::FeatOnly => &[View::Feat],
        MatchingMode::Off => return Vec::new(),
    };
    let mut out = Vec::new();
    for &query_view in views {
        for doc_slot in [Slot::One, Slot::Two] {
            for &doc_view in views {
                out.push(ViewPair {
                    query_view,
                    doc_slot,
                    doc_view,
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Prompt,
    QueryRaw,
    QueryFeat,
    Doc1Raw,
    Doc1Feat,
    Doc2Raw,
    Doc2Feat,
    Answer(usize),
}

impl SegmentKind {
    pub fn name(&self) -> String {
        match self {
            SegmentKind::Prompt => "prompt".into(),
            SegmentKind::QueryRaw => "q_raw".into(),
            SegmentKind::QueryFeat => "q_feat".into(),
            SegmentKind::Doc1Raw => "d1_raw".into(),
            SegmentKind::Doc1Feat => "d1_feat".into(),
            SegmentKind::Doc2Raw => "d2_raw".into(),
            SegmentKind::Doc2Feat => "d2_feat".into(),
            SegmentKind::Answer(i) => format!("answer_{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn token(self) -> u32 {
        match self {
            Label::Yes => vocab::YES,
            Label::No => vocab::NO,
        }
    }
}

/// Which projected fused embedding a feature element stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureRef {
    Query,
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayoutElem {
    Plain(Element),
    Feature(FeatureRef),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchLayout {
    pub elements: Vec<LayoutElem>,
    pub segments: Vec<Span>,
    pub positive_slot: Slot,
    /// Answer `i` scores `views[i]`.
    pub views: Vec<ViewPair>,
    pub labels: Vec<Label>,
}

impl MatchLayout {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn span(&self, kind: SegmentKind) -> Option<&Span> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn answer_positions(&self) -> Vec<usize> {
        (0..self.views.len())
            .map(|a| self.span(SegmentKind::Answer(a)).expect("answer span").start)
            .collect()
    }

    /// Segment index of every position.
    pub fn segment_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (s, span) in self.segments.iter().enumerate() {
            out[span.range()].fill(s);
        }
        out
    }
}

fn raw_segment(open: u32, seq: &TokenSequence, close: u32) -> Vec<LayoutElem> {
    let mut v = vec![LayoutElem::Plain(Element::Token(open))];
    v.extend(seq.elements.iter().cloned().map(LayoutElem::Plain));
    v.push(LayoutElem::Plain(Element::Token(close)));
    v
}

fn feat_segment(open: u32, feat: FeatureRef, close: u32) -> Vec<LayoutElem> {
    vec![
        LayoutElem::Plain(Element::Token(open)),
        LayoutElem::Plain(Element::Token(vocab::FEAT_START)),
        LayoutElem::Feature(feat),
        LayoutElem::Plain(Element::Token(vocab::FEAT_END)),
        LayoutElem::Plain(Element::Token(close)),
    ]
}

/// Builds the matching sequence with `d+` in a uniformly random slot.
pub fn assemble(
    query: &TokenSequence,
    positive: &TokenSequence,
    negative: &TokenSequence,
    mode: MatchingMode,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<MatchLayout> {
    let slot = if rng.random::<bool>() { Slot::One } else { Slot::Two };
    assemble_with_slot(query, positive, negative, mode, max_len, slot)
}

pub fn assemble_with_slot(
    query: &TokenSequence,
    positive: &TokenSequence,
    negative: &TokenSequence,
    mode: MatchingMode,
    max_len: usize,
    positive_slot: Slot,
) -> Result<MatchLayout> {
    let views = lightweight_views(mode);
    if views.is_empty() {
        return Err(Error::Contract("matching is off; nothing to assemble".into()));
    }
    let full = mode == MatchingMode::Full;
    let (d1, f1, d2, f2) = match positive_slot {
        Slot::One => (positive, FeatureRef::Positive, negative, FeatureRef::Negative),
        Slot::Two => (negative, FeatureRef::Negative, positive, FeatureRef::Positive),
    };
    let prompt = vocab::MATCH_PROMPT_TOKENS
        .iter()
        .map(|&t| LayoutElem::Plain(Element::Token(t)))
        .collect();
    let mut parts: Vec<(SegmentKind, Vec<LayoutElem>)> = vec![(SegmentKind::Prompt, prompt)];
    if full {
        parts.push((SegmentKind::QueryRaw, raw_segment(vocab::QUERY_OPEN, query, vocab::QUERY_CLOSE)));
    }
    parts.push((
        SegmentKind::QueryFeat,
        feat_segment(vocab::QUERY_OPEN, FeatureRef::Query, vocab::QUERY_CLOSE),
    ));
    if full {
        parts.push((SegmentKind::Doc1Raw, raw_segment(vocab::DOC_OPEN, d1, vocab::DOC_CLOSE)));
    }
    parts.push((SegmentKind::Doc1Feat, feat_segment(vocab::DOC_OPEN, f1, vocab::DOC_CLOSE)));
    if full {
        parts.push((SegmentKind::Doc2Raw, raw_segment(vocab::DOC_OPEN, d2, vocab::DOC_CLOSE)));
    }
    parts.push((SegmentKind::Doc2Feat, feat_segment(vocab::DOC_OPEN, f2, vocab::DOC_CLOSE)));
    for a in 0..views.len() {
        parts.push((
            SegmentKind::Answer(a),
            vec![LayoutElem::Plain(Element::Token(vocab::ANSWER))],
        ));
    }

    let total: usize = parts.iter().map(|(_, p)| p.len()).sum();
    if total > max_len {
        return Err(Error::Capacity { len: total, max: max_len });
    }
    let mut elements = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(parts.len());
    for (kind, p) in parts {
        segments.push(Span {
            kind,
            start: elements.len(),
            len: p.len(),
        });
        elements.extend(p);
    }
    let labels = views
        .iter()
        .map(|v| if v.doc_slot == positive_slot { Label::Yes } else { Label::No })
        .collect();
    Ok(MatchLayout {
        elements,
        segments,
        positive_slot,
        views,
        labels,
    })
}

/// Visibility for a layout: the prompt is causal; each content segment is
/// causal within itself and sees the prompt; each answer sees the prompt,
/// its query segment, its doc segment and itself.
pub fn build_unified_mask(layout: &MatchLayout) -> Result<AttentionMask> {
    let seg = layout.segment_of();
    let kinds: Vec<SegmentKind> = layout.segments.iter().map(|s| s.kind).collect();
    AttentionMask::from_fn(layout.len(), |i, j| {
        let (si, sj) = (seg[i], seg[j]);
        if si == sj {
            return j <= i;
        }
        if kinds[sj] == SegmentKind::Prompt {
            return true;
        }
        match kinds[si] {
            SegmentKind::Answer(a) => {
                let v = &layout.views[a];
                kinds[sj] == v.query_segment() || kinds[sj] == v.doc_segment()
            }
            _ => false,
        }
    })
}

/// Checks a mask against the visibility rules, block by block.
pub fn validate_mask(layout: &MatchLayout, mask: &AttentionMask) -> Result<()> {
    if mask.len() != layout.len() {
        return Err(Error::shape("validate_mask", &[mask.len()], &[layout.len()]));
    }
    let fail = |what: String| Err(Error::Contract(format!("mask rule violated: {what}")));
    for a in &layout.segments {
        for b in &layout.segments {
            let expect_block: Option<bool> = match (a.kind, b.kind) {
                (x, y) if x == y => None,
                (_, SegmentKind::Prompt) => Some(true),
                (SegmentKind::Answer(i), other) => {
                    let v = layout.views[i];
                    Some(other == v.query_segment() || other == v.doc_segment())
                }
                _ => Some(false),
            };
            for i in a.range() {
                for j in b.range() {
                    let expect = expect_block.unwrap_or(j <= i);
                    if mask.allows(i, j) != expect {
                        return fail(format!("{} -> {} at ({i}, {j})", a.kind.name(), b.kind.name()));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Backbone input for a layout; features resolve through `feature`.
pub fn layout_input<T: Scalar>(
    layout: &MatchLayout,
    mut feature: impl FnMut(FeatureRef) -> InputElem<T>,
) -> Result<SeqInput<T>> {
    let elems = layout
        .elements
        .iter()
        .map(|e| match e {
            LayoutElem::Plain(Element::Token(t)) => InputElem::Token(*t),
            LayoutElem::Plain(Element::Vector(v)) => InputElem::Value(v.iter().map(|&x| T::of(x as f64)).collect()),
            LayoutElem::Feature(f) => feature(*f),
        })
        .collect();
    let mask = build_unified_mask(layout)?;
    Ok(SeqInput::with_mask(elems, (0..layout.len()).collect(), mask))
}

/// Two-layer GELU projector applied row-wise to fused embeddings.
pub fn project<T: Scalar>(sess: &mut Session<'_, T>, fused: Var) -> Result<Var> {
    let h = sess.linear(fused, PROJECTOR[0])?;
    let h = sess.tape.gelu(h);
    sess.linear(h, PROJECTOR[1])
}

/// Vocabulary logits at every answer position, stacked in input order:
/// `[sum of answer counts, vocab]`.
pub fn answer_logits<T: Scalar>(
    sess: &mut Session<'_, T>,
    cfg: &BackboneConfig,
    layouts: &[MatchLayout],
    inputs: &[SeqInput<T>],
) -> Result<Var> {
    let backbone = Backbone::new(cfg);
    let packed = backbone.forward_packed(sess, inputs)?;
    let idx: Vec<usize> = layouts
        .iter()
        .enumerate()
        .flat_map(|(s, l)| l.answer_positions().into_iter().map(move |p| (s, p)))
        .map(|(s, p)| packed.row(s, p))
        .collect();
    let rows = sess.tape.gather_rows(packed.hidden, idx)?;
    backbone.logits(sess, rows)
}

/// Mean over answer positions of `-log softmax(logits)[label token]`.
pub fn qdm_loss_graph<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[Label]) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let ids: Vec<usize> = labels.iter().map(|l| l.token() as usize).collect();
    let picked = tape.pick(logp, ids)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}

/// Matching loss from plain answer logits, evaluated in `f64`.
pub fn qdm_loss(answer_logits: &Tensor<f32>, labels: &[Label]) -> Result<f64> {
    if answer_logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("qdm_loss", answer_logits.shape(), &[labels.len()]));
    }
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(answer_logits.cast());
    let loss = qdm_loss_graph(&mut tape, l, labels)?;
    Ok(tape.value(loss).item())
}

impl Model {
    /// Projects one fused embedding.
    pub fn project(&self, fused: &[f32]) -> Result<Vec<f32>> {
        let mut sess = Session::new(&self.params);
        let x = sess.tape.leaf(Tensor::new(vec![1, fused.len()], fused.to_vec())?);
        let z = project(&mut sess, x)?;
        Ok(sess.tape.value(z).data().to_vec())
    }

    /// Answer logits of one layout given projected features `[z_q, z+, z-]`.
    pub fn match_logits(&self, layout: &MatchLayout, z: [&[f32]; 3]) -> Result<Tensor<f32>> {
        let mut sess = Session::new(&self.params);
        let input = layout_input(layout, |f| {
            let v = match f {
                FeatureRef::Query => z[0],
                FeatureRef::Positive => z[1],
                FeatureRef::Negative => z[2],
            };
            InputElem::Value(v.to_vec())
        })?;
        let logits = answer_logits(&mut sess, &self.config.backbone, std::slice::from_ref(layout), &[input])?;
        Ok(sess.tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seqs() -> (TokenSequence, TokenSequence, TokenSequence) {
        let q = TokenSequence::from_tokens(&[vocab::QUERY_TASK, 70, 71]);
        let mut p = TokenSequence::new(vec![Element::Vector(vec![0.5; 8])]);
        p.elements.push(Element::Token(130));
        let p = TokenSequence::new(p.elements);
        let n = TokenSequence::new(vec![Element::Vector(vec![-0.5; 8]), Element::Token(131)]);
        (q, p, n)
    }

    #[test]
    fn canonical_order() {
        let v = lightweight_views(MatchingMode::Full);
        assert_eq!(v.len(), 8);
        for (i, p) in v.iter().enumerate() {
            assert_eq!(p.canonical_index(), i);
        }
        assert_eq!(lightweight_views(MatchingMode::FeatOnly).len(), 2);
        assert!(lightweight_views(MatchingMode::Off).is_empty());
    }

    #[test]
    fn structure_and_labels() {
        let (q, p, n) = seqs();
        let l = assemble_with_slot(&q, &p, &n, MatchingMode::Full, 512, Slot::One).unwrap();
        assert_eq!(l.segments.len(), 15);
        let yes: Vec<bool> = l.labels.iter().map(|&x| x == Label::Yes).collect();
        // ans1 ans1 ans2 ans2 pattern
        assert_eq!(yes, [true, true, false, false, true, true, false, false]);
        let flipped = assemble_with_slot(&q, &p, &n, MatchingMode::Full, 512, Slot::Two).unwrap();
        for (a, b) in l.labels.iter().zip(&flipped.labels) {
            assert_ne!(a, b);
        }
        let f = assemble_with_slot(&q, &p, &n, MatchingMode::FeatOnly, 512, Slot::Two).unwrap();
        assert_eq!(f.segments.len(), 6);
        assert!(f.span(SegmentKind::QueryRaw).is_none());
        assert_eq!(f.labels, [Label::No, Label::Yes]);
    }

    #[test]
    fn capacity_and_off() {
        let (q, p, n) = seqs();
        assert!(matches!(
            assemble_with_slot(&q, &p, &n, MatchingMode::Full, 20, Slot::One),
            Err(Error::Capacity { .. })
        ));
        assert!(assemble_with_slot(&q, &p, &n, MatchingMode::Off, 512, Slot::One).is_err());
    }

    #[test]
    fn mask_rules() {
        let (q, p, n) = seqs();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [MatchingMode::Full, MatchingMode::FeatOnly] {
            let l = assemble(&q, &p, &n, mode, 512, &mut rng).unwrap();
            let m = build_unified_mask(&l).unwrap();
            validate_mask(&l, &m).unwrap();
            let ans = l.answer_positions();
            for &a in &ans {
                for &b in &ans {
                    assert_eq!(m.allows(a, b), a == b);
                }
            }
        }
        let l = assemble_with_slot(&q, &p, &n, MatchingMode::Full, 512, Slot::One).unwrap();
        let m = build_unified_mask(&l).unwrap();
        let (qr, dr) = (l.span(SegmentKind::QueryRaw).unwrap(), l.span(SegmentKind::Doc1Raw).unwrap());
        for i in qr.range() {
            for j in dr.range() {
                assert!(!m.allows(i, j) && !m.allows(j, i));
            }
        }
        let mut broken = m.clone();
        broken.set(ans_last(&l), qr.start, !m.allows(ans_last(&l), qr.start));
        assert!(validate_mask(&l, &broken).is_err());
    }

    fn ans_last(l: &MatchLayout) -> usize {
        *l.answer_positions().last().unwrap()
    }

    #[test]
    fn qdm_uniform_and_margin() {
        let v = 20;
        let labels = vec![Label::Yes, Label::No];
        let loss = qdm_loss(&Tensor::zeros(&[2, v]), &labels).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-9);
        let mut t = Tensor::zeros(&[2, v]);
        t.data_mut()[vocab::YES as usize] = 60.0;
        t.data_mut()[v + vocab::NO as usize] = 60.0;
        assert!(qdm_loss(&t, &labels).unwrap() < 1e-20);
    }

    #[test]
    fn zero_projector_gives_zero() {
        let mut m = Model::init(
            crate::model::ModelConfig {
                backbone: BackboneConfig::tiny(),
                k: 2,
                chat_wrap: false,
            },
            1,
        )
        .unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("proj.") {
                t.data_mut().fill(0.0);
            }
        }
        let z = m.project(&[1.0; 8]).unwrap();
        assert_eq!(z, vec![0.0; 8]);
    }
}
