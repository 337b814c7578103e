//! Stage 1 of reference resolution: find referring-expression spans.
//!
//! Two detectors run side by side. The model enumerates all short spans and
//! scores each one independently from its boundary token embeddings — no
//! contextual encoder, no cross-span interaction. The rule detector matches
//! contextual entity texts against the utterance so that name-only references
//! ("call customer support") are caught without the model ever seeing
//! entities.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, Adam, CheckpointError, CheckpointHeader, LayoutBuilder, Slot};
use crate::text::{self, Vocabulary};
use crate::types::{Entity, Mention, Provenance};
use crate::TrainError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_span_len: usize,
    pub max_positions: usize,
    pub tau: f64,
}

impl Default for MdConfig {
    fn default() -> Self {
        MdConfig { embed_dim: 64, hidden: 64, max_span_len: 5, max_positions: 40, tau: 0.5 }
    }
}

/// All (start, end) pairs with `0 <= start < end <= n` and length at most
/// `max_len`, in lexicographic order.
pub fn enumerate_spans(n: usize, max_len: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for start in 0..n {
        for end in (start + 1)..=n.min(start + max_len) {
            spans.push((start, end));
        }
    }
    spans
}

// ============================================================================
// Model
// ============================================================================

/// Span classifier: boundary embeddings (+ learned position encodings) are
/// concatenated and fed through one hidden layer to a sigmoid logit.
#[derive(Debug, Clone)]
pub struct MdModel {
    pub config: MdConfig,
    pub vocab: Vocabulary,
    pub params: Vec<f64>,
    emb: Slot,
    pos: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

struct SpanScoreCache {
    hidden: Vec<f64>,
    score: f64,
}

impl MdModel {
    pub fn new(config: MdConfig, vocab: Vocabulary, seed: u64) -> MdModel {
        let mut lb = LayoutBuilder::default();
        let d = config.embed_dim;
        let h = config.hidden;
        let emb = lb.matrix(vocab.len(), d);
        let pos = lb.matrix(config.max_positions, d);
        let w1 = lb.matrix(h, 2 * d);
        let b1 = lb.slot(h);
        let w2 = lb.matrix(1, h);
        let b2 = lb.slot(1);
        let mut params = vec![0.0; lb.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::init_uniform(&mut rng, &mut params, emb, 0.1);
        nn::init_uniform(&mut rng, &mut params, pos, 0.05);
        nn::init_xavier(&mut rng, &mut params, w1, h, 2 * d);
        nn::init_xavier(&mut rng, &mut params, w2, 1, h);
        MdModel { config, vocab, params, emb, pos, w1, b1, w2, b2 }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Boundary token representation: embedding plus position encoding.
    fn token_vec(&self, id: usize, position: usize) -> Vec<f64> {
        let d = self.config.embed_dim;
        let p = position.min(self.config.max_positions - 1);
        let e = &self.params[self.emb.offset + id * d..self.emb.offset + (id + 1) * d];
        let pe = &self.params[self.pos.offset + p * d..self.pos.offset + (p + 1) * d];
        e.iter().zip(pe).map(|(a, b)| a + b).collect()
    }

    fn score_span_cached(&self, ids: &[usize], span: (usize, usize)) -> SpanScoreCache {
        let d = self.config.embed_dim;
        let h = self.config.hidden;
        let (s, e) = span;
        let mut feat = self.token_vec(ids[s], s);
        feat.extend(self.token_vec(ids[e - 1], e - 1));
        let mut hidden = vec![0.0; h];
        nn::dense_forward(&self.params, self.w1, self.b1, h, 2 * d, &feat, &mut hidden);
        for v in &mut hidden {
            *v = nn::relu(*v);
        }
        let logit = nn::dot(nn::view(&self.params, self.w2), &hidden) + self.params[self.b2.offset];
        SpanScoreCache { hidden, score: nn::sigmoid(logit) }
    }

    /// Scores each span independently; permuting the span list permutes the
    /// scores identically.
    pub fn score_spans(&self, ids: &[usize], spans: &[(usize, usize)]) -> Vec<f64> {
        spans.iter().map(|&sp| self.score_span_cached(ids, sp).score).collect()
    }

    /// Model-based detection: every enumerated span at or above the
    /// threshold, overlaps permitted.
    pub fn detect(&self, tokens: &[String]) -> Vec<Mention> {
        let ids = self.vocab.encode(tokens);
        let spans = enumerate_spans(ids.len(), self.config.max_span_len);
        let mut out = Vec::new();
        for (span, score) in spans.iter().zip(self.score_spans(&ids, &spans)) {
            if score >= self.config.tau {
                out.push(Mention {
                    start: span.0,
                    end: span.1,
                    text: text::detokenize(&tokens[span.0..span.1]),
                    provenance: Provenance::Model,
                    score,
                    rule_candidate_entity: None,
                });
            }
        }
        out
    }

    /// Accumulate BCE gradient for one example; returns the mean span loss.
    fn backward_example(&self, ids: &[usize], gold: &HashSet<(usize, usize)>, grad: &mut [f64]) -> f64 {
        let d = self.config.embed_dim;
        let h = self.config.hidden;
        let spans = enumerate_spans(ids.len(), self.config.max_span_len);
        if spans.is_empty() {
            return 0.0;
        }
        let scale = 1.0 / spans.len() as f64;
        let mut loss = 0.0;
        for &span in &spans {
            let cache = self.score_span_cached(ids, span);
            let y = if gold.contains(&span) { 1.0 } else { 0.0 };
            let s = cache.score.clamp(1e-12, 1.0 - 1e-12);
            loss -= scale * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            let dlogit = scale * (cache.score - y);

            // Output layer.
            for (k, hv) in cache.hidden.iter().enumerate() {
                grad[self.w2.offset + k] += dlogit * hv;
            }
            grad[self.b2.offset] += dlogit;

            // Hidden layer (ReLU mask is hidden > 0).
            let w2 = nn::view(&self.params, self.w2);
            let mut dfeat = vec![0.0; 2 * d];
            let mut dh = vec![0.0; h];
            for k in 0..h {
                if cache.hidden[k] > 0.0 {
                    dh[k] = dlogit * w2[k];
                }
            }
            let (s_idx, e_idx) = (span.0, span.1 - 1);
            let mut feat = self.token_vec(ids[s_idx], s_idx);
            feat.extend(self.token_vec(ids[e_idx], e_idx));
            nn::dense_backward(
                &self.params,
                grad,
                self.w1,
                self.b1,
                h,
                2 * d,
                &feat,
                &dh,
                &mut dfeat,
            );

            // Embedding + position rows for both boundaries.
            for (boundary, df) in [(s_idx, &dfeat[..d]), (e_idx, &dfeat[d..])] {
                let id = ids[boundary];
                let p = boundary.min(self.config.max_positions - 1);
                for k in 0..d {
                    grad[self.emb.offset + id * d + k] += df[k];
                    grad[self.pos.offset + p * d + k] += df[k];
                }
            }
        }
        loss
    }

    pub fn loss_example(&self, ids: &[usize], gold: &HashSet<(usize, usize)>) -> f64 {
        let spans = enumerate_spans(ids.len(), self.config.max_span_len);
        if spans.is_empty() {
            return 0.0;
        }
        let scale = 1.0 / spans.len() as f64;
        let mut loss = 0.0;
        for &span in &spans {
            let s = self.score_span_cached(ids, span).score.clamp(1e-12, 1.0 - 1e-12);
            let y = if gold.contains(&span) { 1.0 } else { 0.0 };
            loss -= scale * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        loss
    }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let header = CheckpointHeader {
            kind: "md".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab_hash: self.vocab.hash(),
            param_count: self.params.len(),
        };
        std::fs::write(vocab_path(path), self.vocab.to_lines())?;
        nn::save_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<MdModel, CheckpointError> {
        let (header, params) = nn::load_checkpoint(path)?;
        if header.kind != "md" {
            return Err(CheckpointError::KindMismatch { expected: "md".into(), found: header.kind });
        }
        let config: MdConfig = serde_json::from_value(header.config)
            .map_err(|e| CheckpointError::Malformed(format!("bad md config: {e}")))?;
        let vocab_lines = std::fs::read_to_string(vocab_path(path))?;
        let vocab = Vocabulary::from_lines(&vocab_lines);
        if vocab.hash() != header.vocab_hash {
            return Err(CheckpointError::VocabMismatch {
                expected: header.vocab_hash,
                found: vocab.hash(),
            });
        }
        let mut model = MdModel::new(config, vocab, 0);
        if model.params.len() != params.len() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} params, checkpoint holds {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }
}

/// Sidecar vocabulary file: `<checkpoint>.vocab`.
pub fn vocab_path(ckpt: &Path) -> std::path::PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(".vocab");
    os.into()
}

// ============================================================================
// Rule-based detection
// ============================================================================

/// Match entity texts against the utterance as whole-token subsequences.
/// Longest match at each position wins and each token position feeds at most
/// one rule mention.
pub fn detect_rules(tokens: &[String], entities: &[Entity]) -> Vec<Mention> {
    // (normalized entity tokens, entity id), deterministic order.
    let mut needles: Vec<(Vec<String>, &str)> = Vec::new();
    for e in entities {
        for t in &e.texts {
            let nt = text::normalize_tokens(t);
            if !nt.is_empty() {
                needles.push((nt, e.id.as_str()));
            }
        }
    }

    let mut out = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let mut best: Option<(usize, &str)> = None; // (match length, entity id)
        for (needle, id) in &needles {
            let len = needle.len();
            if pos + len <= tokens.len()
                && best.map_or(true, |(b, _)| len > b)
                && needle.iter().zip(&tokens[pos..pos + len]).all(|(a, b)| a == b)
            {
                best = Some((len, id));
            }
        }
        if let Some((len, id)) = best {
            out.push(Mention {
                start: pos,
                end: pos + len,
                text: text::detokenize(&tokens[pos..pos + len]),
                provenance: Provenance::Rule,
                score: 1.0,
                rule_candidate_entity: Some(id.to_string()),
            });
            pos += len;
        } else {
            pos += 1;
        }
    }
    out
}

/// Union of model and rule mentions. Exact-duplicate spans collapse to the
/// rule variant (it carries the entity link); output sorted by (start, end).
pub fn merge_mentions(model: Vec<Mention>, rule: Vec<Mention>) -> Vec<Mention> {
    let rule_spans: HashSet<(usize, usize)> = rule.iter().map(Mention::span).collect();
    let mut out: Vec<Mention> =
        model.into_iter().filter(|m| !rule_spans.contains(&m.span())).collect();
    out.extend(rule);
    out.sort_by_key(|m| (m.start, m.end));
    out
}

// ============================================================================
// Training
// ============================================================================

/// One line of the detector training format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdRecord {
    pub utterance: String,
    pub spans: Vec<SpanRef>,
    #[serde(default)]
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRef {
    pub start: usize,
    pub end: usize,
}

pub struct MdExample {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub gold: HashSet<(usize, usize)>,
}

impl MdExample {
    pub fn from_record(rec: &MdRecord, vocab: &Vocabulary) -> MdExample {
        let tokens = text::normalize_tokens(&rec.utterance);
        MdExample {
            ids: vocab.encode(&tokens),
            tokens,
            gold: rec.spans.iter().map(|s| (s.start, s.end)).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early once validation F1 reaches this value (checked per epoch).
    pub target_f1: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 12, lr: 3e-3, batch_size: 32, seed: 17, target_f1: Some(0.995) }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PrCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PrCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MdTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

/// Span-level micro precision/recall of the model detector on a dataset.
pub fn evaluate_spans(model: &MdModel, examples: &[MdExample]) -> PrCounts {
    let mut counts = PrCounts::default();
    for ex in examples {
        let spans = enumerate_spans(ex.ids.len(), model.config.max_span_len);
        let scores = model.score_spans(&ex.ids, &spans);
        let predicted: HashSet<(usize, usize)> = spans
            .into_iter()
            .zip(scores)
            .filter(|(_, s)| *s >= model.config.tau)
            .map(|(sp, _)| sp)
            .collect();
        counts.tp += predicted.intersection(&ex.gold).count();
        counts.fp += predicted.difference(&ex.gold).count();
        counts.fn_ += ex.gold.difference(&predicted).count();
    }
    counts
}

pub fn train_md(
    model: &mut MdModel,
    train: &[MdExample],
    val: &[MdExample],
    opts: &TrainOptions,
) -> Result<MdTrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = Adam::new(model.params.len(), opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut report = MdTrainReport {
        epoch_losses: Vec::new(),
        val_precision: 0.0,
        val_recall: 0.0,
        val_f1: 0.0,
    };

    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let ex = &train[i];
                epoch_loss += model.backward_example(&ex.ids, &ex.gold, &mut grad);
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            nn::clip_global_norm(&mut grad, 5.0);
            opt.step(&mut model.params, &grad);
        }
        report.epoch_losses.push(epoch_loss / train.len() as f64);

        let counts = evaluate_spans(model, val);
        report.val_precision = counts.precision();
        report.val_recall = counts.recall();
        report.val_f1 = counts.f1();
        if opts.target_f1.is_some_and(|t| report.val_f1 >= t) {
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EntityCategory, EntityLocation, EntitySource};
    use std::collections::BTreeMap;

    fn vocab_from(texts: &[&str]) -> Vocabulary {
        let tokenized: Vec<Vec<String>> = texts.iter().map(|t| text::normalize_tokens(t)).collect();
        Vocabulary::build(tokenized.iter().map(|t| t.as_slice()), 1)
    }

    fn screen_entity(id: &str, display: &str) -> Entity {
        Entity {
            id: id.into(),
            category: EntityCategory::Business,
            texts: vec![display.into()],
            location: EntityLocation::ScreenBox(
                crate::types::BoundingBox::new(0.1, 0.1, 0.3, 0.1).unwrap(),
            ),
            source: EntitySource::Screen,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn enumerate_spans_counts() {
        assert_eq!(enumerate_spans(5, 5).len(), 15); // n(n+1)/2
        // Brute-force oracle for the capped case.
        let brute = (0..5)
            .flat_map(|i| (i + 1..=5).map(move |j| (i, j)))
            .filter(|(i, j)| j - i <= 2)
            .count();
        assert_eq!(enumerate_spans(5, 2).len(), brute);
        assert_eq!(brute, 9);
        assert!(enumerate_spans(0, 5).is_empty());
    }

    #[test]
    fn enumerate_spans_is_lexicographic() {
        let spans = enumerate_spans(4, 3);
        let mut sorted = spans.clone();
        sorted.sort();
        assert_eq!(spans, sorted);
    }

    #[test]
    fn span_scores_are_independent_of_span_order() {
        let vocab = vocab_from(&["how big is this house"]);
        let model = MdModel::new(MdConfig::default(), vocab, 3);
        let ids = model.vocab.encode(&text::normalize_tokens("how big is this house"));
        let spans = enumerate_spans(ids.len(), 5);
        let mut reversed = spans.clone();
        reversed.reverse();
        let a = model.score_spans(&ids, &spans);
        let mut b = model.score_spans(&ids, &reversed);
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn detect_is_deterministic() {
        let vocab = vocab_from(&["share this number with john"]);
        let model = MdModel::new(MdConfig::default(), vocab, 5);
        let tokens = text::normalize_tokens("share this number with john");
        assert_eq!(model.detect(&tokens), model.detect(&tokens));
    }

    #[test]
    fn detect_rules_matches_entity_text() {
        let tokens = text::normalize_tokens("call customer support");
        let entities = vec![screen_entity("e1", "Customer Support")];
        let mentions = detect_rules(&tokens, &entities);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].text, "customer support");
        assert_eq!(mentions[0].rule_candidate_entity.as_deref(), Some("e1"));
        assert_eq!(mentions[0].score, 1.0);
    }

    #[test]
    fn detect_rules_empty_when_no_entity_text_occurs() {
        let tokens = text::normalize_tokens("what time is it");
        let entities = vec![screen_entity("e1", "Customer Support")];
        assert!(detect_rules(&tokens, &entities).is_empty());
    }

    #[test]
    fn detect_rules_prefers_longest_match() {
        let tokens = text::normalize_tokens("call customer support now");
        let entities =
            vec![screen_entity("short", "Support"), screen_entity("long", "Customer Support")];
        let mentions = detect_rules(&tokens, &entities);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].rule_candidate_entity.as_deref(), Some("long"));
        assert_eq!((mentions[0].start, mentions[0].end), (1, 3));
    }

    #[test]
    fn merge_keeps_rule_variant_on_duplicate_span() {
        let model_m = Mention {
            start: 0,
            end: 2,
            text: "customer support".into(),
            provenance: Provenance::Model,
            score: 0.8,
            rule_candidate_entity: None,
        };
        let rule_m = Mention {
            start: 0,
            end: 2,
            text: "customer support".into(),
            provenance: Provenance::Rule,
            score: 1.0,
            rule_candidate_entity: Some("e1".into()),
        };
        let merged = merge_mentions(vec![model_m], vec![rule_m.clone()]);
        assert_eq!(merged, vec![rule_m]);
    }

    #[test]
    fn merge_keeps_overlapping_distinct_spans() {
        let a = Mention {
            start: 0,
            end: 2,
            text: "a b".into(),
            provenance: Provenance::Model,
            score: 0.7,
            rule_candidate_entity: None,
        };
        let b = Mention {
            start: 1,
            end: 3,
            text: "b c".into(),
            provenance: Provenance::Rule,
            score: 1.0,
            rule_candidate_entity: Some("x".into()),
        };
        let merged = merge_mentions(vec![a.clone()], vec![b.clone()]);
        assert_eq!(merged, vec![a, b]);
    }

    #[test]
    fn one_example_overfit_loss_decreases() {
        let vocab = vocab_from(&["share this number with john"]);
        let mut model = MdModel::new(MdConfig::default(), vocab, 11);
        let rec = MdRecord {
            utterance: "share this number with john".into(),
            spans: vec![SpanRef { start: 1, end: 3 }],
            entities: vec![],
        };
        let ex = MdExample::from_record(&rec, &model.vocab);
        let mut opt = Adam::new(model.params.len(), 1e-2);
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(model.loss_example(&ex.ids, &ex.gold));
            let mut grad = vec![0.0; model.params.len()];
            model.backward_example(&ex.ids, &ex.gold, &mut grad);
            opt.step(&mut model.params, &grad);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss must strictly decrease: {losses:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_three_tokens() {
        let vocab = vocab_from(&["call this one"]);
        let mut model = MdModel::new(
            MdConfig { embed_dim: 6, hidden: 5, max_span_len: 3, max_positions: 8, tau: 0.5 },
            vocab,
            23,
        );
        let rec = MdRecord {
            utterance: "call this one".into(),
            spans: vec![SpanRef { start: 1, end: 3 }],
            entities: vec![],
        };
        let ex = MdExample::from_record(&rec, &model.vocab);
        let mut grad = vec![0.0; model.params.len()];
        model.backward_example(&ex.ids, &ex.gold, &mut grad);

        let config = model.config.clone();
        let vocab2 = model.vocab.clone();
        let (emb, pos, w1, b1, w2, b2) =
            (model.emb, model.pos, model.w1, model.b1, model.w2, model.b2);
        let loss = |p: &[f64]| {
            let probe = MdModel {
                config: config.clone(),
                vocab: vocab2.clone(),
                params: p.to_vec(),
                emb,
                pos,
                w1,
                b1,
                w2,
                b2,
            };
            probe.loss_example(&ex.ids, &ex.gold)
        };
        let worst = nn::gradient_check(&mut model.params, &grad, loss, 1e-5, 1e-7);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let vocab = vocab_from(&["call the second one"]);
        let model = MdModel::new(MdConfig::default(), vocab, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("md.ckpt");
        model.save(&path).unwrap();
        let loaded = MdModel::load(&path).unwrap();
        let tokens = text::normalize_tokens("call the second one");
        let ids = model.vocab.encode(&tokens);
        let spans = enumerate_spans(ids.len(), 5);
        let a = model.score_spans(&ids, &spans);
        let b = loaded.score_spans(&ids, &spans);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "f32 round trip drift too large");
        }
    }

    #[test]
    fn full_scale_parameter_budget() {
        // At the published scale the detector stays near 116k parameters;
        // vocabulary is the dominant term.
        let tokens: Vec<Vec<String>> =
            (0..1650).map(|i| vec![format!("tok{i}"), format!("tok{i}")]).collect();
        let vocab = Vocabulary::build(tokens.iter().map(|t| t.as_slice()), 2);
        let model = MdModel::new(MdConfig::default(), vocab, 1);
        assert!(
            (100_000..140_000).contains(&model.param_count()),
            "got {}",
            model.param_count()
        );
    }
}
