//! Stage 2 of reference resolution: link each detected mention to entities.
//!
//! High-precision rules run first — rule-detector passthrough, ordinal and
//! spatial references over presented lists, and keyword/category matches from
//! the request verb. Whenever a rule produces a resolution the neural scorer
//! is skipped entirely; an invocation counter makes that observable.
//!
//! The model scores a (mention, entity) pair through three modules —
//! category, location, and text — whose outputs are mixed by weights computed
//! from the request tokens, so the same network handles "this number"
//! (category), "the bottom one" (location), and "the one on homestead road"
//! (text).

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::mention_detector::{vocab_path, PrCounts, SpanRef, TrainOptions};
use crate::nn::{self, Adam, CheckpointError, CheckpointHeader, LayoutBuilder, Slot};
use crate::text::{self, Vocabulary};
use crate::types::{
    Entity, EntityCategory, EntityLocation, EntityMatch, Mention, Resolution, ResolverKind,
};
use crate::TrainError;

/// Fixed width of the location feature vector, independent of source.
pub const LOC_DIM: usize = 20;

/// Entity location flattened for the location module:
/// `[x, y, w, h, cx, cy]` for screens, normalized index plus first/last flags
/// plus a clipped one-hot for lists, and a trailing background flag.
pub fn location_features(entity: &Entity) -> Vec<f64> {
    let mut f = vec![0.0; LOC_DIM];
    match &entity.location {
        EntityLocation::ScreenBox(b) => {
            let (cx, cy) = b.center();
            f[0] = b.x;
            f[1] = b.y;
            f[2] = b.w;
            f[3] = b.h;
            f[4] = cx;
            f[5] = cy;
        }
        EntityLocation::ListIndex { index, list_length } => {
            f[6] = *index as f64 / *list_length as f64;
            f[7] = if *index == 1 { 1.0 } else { 0.0 };
            f[8] = if index == list_length { 1.0 } else { 0.0 };
            f[9 + (index.min(&10) - 1)] = 1.0;
        }
        EntityLocation::None => {
            f[19] = 1.0;
        }
    }
    f
}

// ============================================================================
// Rule-based resolution
// ============================================================================

#[derive(Debug, Clone)]
pub struct RuleOptions {
    /// Resolve "the top/bottom/left/right one" against screen entities by
    /// extremal box center. Off by default; list ordinals are always on.
    pub enable_screen_spatial: bool,
}

impl Default for RuleOptions {
    fn default() -> Self {
        RuleOptions { enable_screen_spatial: false }
    }
}

/// Counts resolver activity so gating contracts are checkable exactly.
/// Safe under concurrent increments.
#[derive(Debug, Default)]
pub struct InvocationCounters {
    pub resolver_calls: AtomicU64,
    pub model_calls: AtomicU64,
}

impl InvocationCounters {
    pub fn snapshot(&self) -> (u64, u64) {
        (self.resolver_calls.load(Ordering::SeqCst), self.model_calls.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OrdinalTarget {
    Absolute(usize),
    Last,
}

struct OrdinalPattern {
    regex: Regex,
    target: OrdinalTarget,
}

fn ordinal_patterns() -> &'static [OrdinalPattern] {
    static PATTERNS: OnceLock<Vec<OrdinalPattern>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let words = [
            ("first", 1),
            ("second", 2),
            ("third", 3),
            ("fourth", 4),
            ("fifth", 5),
            ("sixth", 6),
            ("seventh", 7),
            ("eighth", 8),
            ("ninth", 9),
            ("tenth", 10),
        ];
        let mut out = Vec::new();
        out.push(OrdinalPattern {
            regex: Regex::new(r"\b(\d+)\s*(?:st|nd|rd|th)\b").unwrap(),
            target: OrdinalTarget::Absolute(0), // index parsed from capture
        });
        for (w, n) in words {
            out.push(OrdinalPattern {
                regex: Regex::new(&format!(r"\b{w}\b")).unwrap(),
                target: OrdinalTarget::Absolute(n),
            });
        }
        out.push(OrdinalPattern {
            regex: Regex::new(r"\blast\b").unwrap(),
            target: OrdinalTarget::Last,
        });
        out.push(OrdinalPattern {
            regex: Regex::new(r"\btop(?:most)?\b").unwrap(),
            target: OrdinalTarget::Absolute(1),
        });
        out.push(OrdinalPattern {
            regex: Regex::new(r"\bbottom(?:most)?\b").unwrap(),
            target: OrdinalTarget::Last,
        });
        out
    })
}

/// Longest regex match over the mention text wins.
fn match_ordinal(mention_text: &str) -> Option<OrdinalTarget> {
    let mut best: Option<(usize, OrdinalTarget)> = None;
    for pat in ordinal_patterns() {
        if let Some(caps) = pat.regex.captures(mention_text) {
            let m = caps.get(0).unwrap();
            let len = m.len();
            let target = match pat.target {
                OrdinalTarget::Absolute(0) => {
                    let n: usize = caps.get(1).and_then(|c| c.as_str().parse().ok())?;
                    OrdinalTarget::Absolute(n)
                }
                t => t,
            };
            if best.map_or(true, |(l, _)| len > l) {
                best = Some((len, target));
            }
        }
    }
    best.map(|(_, t)| t)
}

/// Request-verb keyword sets and the entity categories they imply.
const KEYWORD_RULES: &[(&[&str], &[EntityCategory])] = &[
    (&["play"], &[EntityCategory::Music, EntityCategory::Movie]),
    (&["pause"], &[EntityCategory::Music, EntityCategory::Movie]),
    (&["resume"], &[EntityCategory::Music, EntityCategory::Movie]),
    (&["call"], &[EntityCategory::PhoneNumber, EntityCategory::Business]),
    (&["dial"], &[EntityCategory::PhoneNumber, EntityCategory::Business]),
    (&["stop"], &[EntityCategory::Alarm, EntityCategory::Timer]),
    (&["switch", "off"], &[EntityCategory::Alarm, EntityCategory::Timer]),
    (&["snooze"], &[EntityCategory::Alarm, EntityCategory::Timer]),
];

fn rule_resolution(mention: &Mention, entity_id: &str) -> Resolution {
    Resolution {
        mention: mention.clone(),
        matches: vec![EntityMatch { entity_id: entity_id.to_string(), score: 1.0 }],
        resolver: ResolverKind::Rule,
    }
}

/// Rule-based resolver. Returns `None` when no rule fires or the firing rule
/// is ambiguous; callers fall back to the model.
pub fn resolve_rules(
    mention: &Mention,
    entities: &[Entity],
    request_tokens: &[String],
    opts: &RuleOptions,
) -> Option<Resolution> {
    // (1) Rule-detector passthrough: the mention already names its entity.
    if let Some(id) = &mention.rule_candidate_entity {
        if entities.iter().any(|e| &e.id == id) {
            return Some(rule_resolution(mention, id));
        }
    }

    // (2) Ordinal / spatial references over presented lists.
    if let Some(target) = match_ordinal(&mention.text) {
        let hits: Vec<&Entity> = entities
            .iter()
            .filter(|e| match (&e.location, target) {
                (EntityLocation::ListIndex { index, .. }, OrdinalTarget::Absolute(n)) => {
                    *index == n
                }
                (EntityLocation::ListIndex { index, list_length }, OrdinalTarget::Last) => {
                    index == list_length
                }
                _ => false,
            })
            .collect();
        if let [only] = hits.as_slice() {
            return Some(rule_resolution(mention, &only.id));
        }

        // Flag-gated extension: spatial words against screen boxes.
        if opts.enable_screen_spatial {
            if let Some(res) = resolve_screen_spatial(mention, entities) {
                return Some(res);
            }
        }
    } else if opts.enable_screen_spatial {
        if let Some(res) = resolve_screen_spatial(mention, entities) {
            return Some(res);
        }
    }

    // (3) Keyword/category from the request verb; fires only when exactly one
    // live entity matches the keyword's category set.
    for (keyword, categories) in KEYWORD_RULES {
        let present = keyword.iter().all(|k| request_tokens.iter().any(|t| t == k));
        if !present {
            continue;
        }
        let hits: Vec<&Entity> =
            entities.iter().filter(|e| categories.contains(&e.category)).collect();
        if let [only] = hits.as_slice() {
            return Some(rule_resolution(mention, &only.id));
        }
        break; // keyword found but ambiguous or empty: defer to the model
    }

    None
}

fn resolve_screen_spatial(mention: &Mention, entities: &[Entity]) -> Option<Resolution> {
    let screens: Vec<(&Entity, (f64, f64))> = entities
        .iter()
        .filter_map(|e| match &e.location {
            EntityLocation::ScreenBox(b) => Some((e, b.center())),
            _ => None,
        })
        .collect();
    if screens.is_empty() {
        return None;
    }
    let text = format!(" {} ", mention.text);
    let pick = |key: fn(&(f64, f64)) -> f64, max: bool| -> Option<&Entity> {
        let mut best: Option<(&Entity, f64)> = None;
        let mut tied = false;
        for (e, c) in &screens {
            let v = key(c);
            match best {
                None => best = Some((e, v)),
                Some((_, bv)) => {
                    if (max && v > bv) || (!max && v < bv) {
                        best = Some((e, v));
                        tied = false;
                    } else if v == bv {
                        tied = true;
                    }
                }
            }
        }
        if tied {
            None
        } else {
            best.map(|(e, _)| e)
        }
    };
    let target = if text.contains(" top ") || text.contains(" topmost ") {
        pick(|c| c.1, false)
    } else if text.contains(" bottom ") || text.contains(" bottommost ") {
        pick(|c| c.1, true)
    } else if text.contains(" left ") || text.contains(" leftmost ") {
        pick(|c| c.0, false)
    } else if text.contains(" right ") || text.contains(" rightmost ") {
        pick(|c| c.0, true)
    } else {
        None
    };
    target.map(|e| rule_resolution(mention, &e.id))
}

/// Full per-mention resolution: rules first, the model only when they stay
/// silent. Counter increments record exactly which path ran.
pub fn resolve(
    mention: &Mention,
    entities: &[Entity],
    request_tokens: &[String],
    model: &MrModel,
    opts: &RuleOptions,
    counters: &InvocationCounters,
) -> Resolution {
    counters.resolver_calls.fetch_add(1, Ordering::SeqCst);
    if entities.is_empty() {
        return Resolution { mention: mention.clone(), matches: vec![], resolver: ResolverKind::Rule };
    }
    if let Some(res) = resolve_rules(mention, entities, request_tokens, opts) {
        return res;
    }
    counters.model_calls.fetch_add(1, Ordering::SeqCst);
    model.resolve_model(mention, entities, request_tokens)
}

// ============================================================================
// Model
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrConfig {
    pub embed_dim: usize,
    pub repr_dim: usize,
    pub cat_dim: usize,
    pub hidden: usize,
    pub tau: f64,
}

impl Default for MrConfig {
    fn default() -> Self {
        MrConfig { embed_dim: 64, repr_dim: 64, cat_dim: 32, hidden: 64, tau: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct MrModel {
    pub config: MrConfig,
    pub vocab: Vocabulary,
    pub params: Vec<f64>,
    emb: Slot,
    w_m: Slot,
    b_m: Slot,
    w_r: Slot,
    b_r: Slot,
    cat_emb: Slot,
    cat_w1: Slot,
    cat_b1: Slot,
    cat_v: Slot,
    cat_c: Slot,
    loc_w1: Slot,
    loc_b1: Slot,
    loc_v: Slot,
    loc_c: Slot,
    txt_w1: Slot,
    txt_b1: Slot,
    txt_v: Slot,
    txt_c: Slot,
    wh_w: Slot,
    wh_b: Slot,
}

/// Mention/request representation reused across candidate entities.
struct ReprCache {
    mention_ids: Vec<usize>,
    request_ids: Vec<usize>,
    mention_mean: Vec<f64>,
    request_mean: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    m2: Vec<f64>,
    weights: Vec<f64>, // softmax over the three module logits
}

struct ModuleCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    score: f64,
}

struct EntityCache {
    cat: ModuleCache,
    loc: ModuleCache,
    txt: ModuleCache,
    txt_ids: Vec<usize>,
    score: f64,
}

/// Per-candidate features the model consumes.
#[derive(Debug, Clone)]
pub struct EntityInput {
    pub category: EntityCategory,
    pub loc: Vec<f64>,
    pub txt_ids: Vec<usize>,
}

impl MrModel {
    pub fn new(config: MrConfig, vocab: Vocabulary, seed: u64) -> MrModel {
        let d = config.embed_dim;
        let r = config.repr_dim;
        let c = config.cat_dim;
        let h = config.hidden;
        let m2 = 2 * r;
        let mut lb = LayoutBuilder::default();
        let emb = lb.matrix(vocab.len(), d);
        let w_m = lb.matrix(r, d);
        let b_m = lb.slot(r);
        let w_r = lb.matrix(r, d);
        let b_r = lb.slot(r);
        let cat_emb = lb.matrix(EntityCategory::ALL.len(), c);
        let cat_w1 = lb.matrix(h, m2 + c);
        let cat_b1 = lb.slot(h);
        let cat_v = lb.slot(h);
        let cat_c = lb.slot(1);
        let loc_w1 = lb.matrix(h, m2 + LOC_DIM);
        let loc_b1 = lb.slot(h);
        let loc_v = lb.slot(h);
        let loc_c = lb.slot(1);
        let txt_w1 = lb.matrix(h, m2 + d);
        let txt_b1 = lb.slot(h);
        let txt_v = lb.slot(h);
        let txt_c = lb.slot(1);
        let wh_w = lb.matrix(3, r);
        let wh_b = lb.slot(3);

        let mut params = vec![0.0; lb.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::init_uniform(&mut rng, &mut params, emb, 0.1);
        nn::init_xavier(&mut rng, &mut params, w_m, r, d);
        nn::init_xavier(&mut rng, &mut params, w_r, r, d);
        nn::init_uniform(&mut rng, &mut params, cat_emb, 0.1);
        nn::init_xavier(&mut rng, &mut params, cat_w1, h, m2 + c);
        nn::init_xavier(&mut rng, &mut params, cat_v, 1, h);
        nn::init_xavier(&mut rng, &mut params, loc_w1, h, m2 + LOC_DIM);
        nn::init_xavier(&mut rng, &mut params, loc_v, 1, h);
        nn::init_xavier(&mut rng, &mut params, txt_w1, h, m2 + d);
        nn::init_xavier(&mut rng, &mut params, txt_v, 1, h);
        nn::init_xavier(&mut rng, &mut params, wh_w, 3, r);

        MrModel {
            config,
            vocab,
            params,
            emb,
            w_m,
            b_m,
            w_r,
            b_r,
            cat_emb,
            cat_w1,
            cat_b1,
            cat_v,
            cat_c,
            loc_w1,
            loc_b1,
            loc_v,
            loc_c,
            txt_w1,
            txt_b1,
            txt_v,
            txt_c,
            wh_w,
            wh_b,
        }
    }

    /// All-zero parameters; every module score is exactly 0.5 and the weight
    /// head is uniform. Useful as a neutral baseline in tests.
    pub fn zero_init(config: MrConfig, vocab: Vocabulary) -> MrModel {
        let mut m = MrModel::new(config, vocab, 0);
        m.params.iter_mut().for_each(|p| *p = 0.0);
        m
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn entity_input(&self, entity: &Entity) -> EntityInput {
        let mut txt_tokens = Vec::new();
        for t in &entity.texts {
            txt_tokens.extend(text::normalize_tokens(t));
        }
        EntityInput {
            category: entity.category,
            loc: location_features(entity),
            txt_ids: self.vocab.encode(&txt_tokens),
        }
    }

    fn mean_embedding(&self, ids: &[usize]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let mut out = vec![0.0; d];
        if ids.is_empty() {
            return out;
        }
        for &id in ids {
            let row = &self.params[self.emb.offset + id * d..self.emb.offset + (id + 1) * d];
            nn::add_assign(&mut out, row);
        }
        let inv = 1.0 / ids.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    fn repr_cache(&self, mention_ids: &[usize], request_ids: &[usize]) -> ReprCache {
        let r = self.config.repr_dim;
        let d = self.config.embed_dim;
        let mention_mean = self.mean_embedding(mention_ids);
        let request_mean = self.mean_embedding(request_ids);
        let mut u = vec![0.0; r];
        let mut v = vec![0.0; r];
        nn::dense_forward(&self.params, self.w_m, self.b_m, r, d, &mention_mean, &mut u);
        nn::dense_forward(&self.params, self.w_r, self.b_r, r, d, &request_mean, &mut v);
        u.iter_mut().for_each(|x| *x = x.tanh());
        v.iter_mut().for_each(|x| *x = x.tanh());
        let mut m2 = u.clone();
        m2.extend_from_slice(&v);
        let mut weights = vec![0.0; 3];
        nn::dense_forward(&self.params, self.wh_w, self.wh_b, 3, r, &v, &mut weights);
        nn::softmax_in_place(&mut weights);
        ReprCache {
            mention_ids: mention_ids.to_vec(),
            request_ids: request_ids.to_vec(),
            mention_mean,
            request_mean,
            u,
            v,
            m2,
            weights,
        }
    }

    fn module_forward(
        &self,
        w1: Slot,
        b1: Slot,
        v2: Slot,
        c2: Slot,
        m2: &[f64],
        extra: &[f64],
    ) -> ModuleCache {
        let h = self.config.hidden;
        let mut input = Vec::with_capacity(m2.len() + extra.len());
        input.extend_from_slice(m2);
        input.extend_from_slice(extra);
        let mut hidden = vec![0.0; h];
        nn::dense_forward(&self.params, w1, b1, h, input.len(), &input, &mut hidden);
        hidden.iter_mut().for_each(|x| *x = nn::relu(*x));
        let logit = nn::dot(nn::view(&self.params, v2), &hidden) + self.params[c2.offset];
        ModuleCache { input, hidden, score: nn::sigmoid(logit) }
    }

    fn entity_cache(&self, repr: &ReprCache, input: &EntityInput) -> EntityCache {
        let c = self.config.cat_dim;
        let cat_row = &self.params[self.cat_emb.offset + input.category.index() * c
            ..self.cat_emb.offset + (input.category.index() + 1) * c];
        let cat = self.module_forward(
            self.cat_w1,
            self.cat_b1,
            self.cat_v,
            self.cat_c,
            &repr.m2,
            &cat_row.to_vec(),
        );
        let loc =
            self.module_forward(self.loc_w1, self.loc_b1, self.loc_v, self.loc_c, &repr.m2, &input.loc);
        let txt_mean = self.mean_embedding(&input.txt_ids);
        let txt =
            self.module_forward(self.txt_w1, self.txt_b1, self.txt_v, self.txt_c, &repr.m2, &txt_mean);
        let score =
            repr.weights[0] * cat.score + repr.weights[1] * loc.score + repr.weights[2] * txt.score;
        EntityCache { cat, loc, txt, txt_ids: input.txt_ids.clone(), score }
    }

    // ------------------------------------------------------------------
    // Public scoring surface
    // ------------------------------------------------------------------

    /// Compatibility of the mention with the entity's category.
    pub fn score_category(
        &self,
        mention_tokens: &[String],
        request_tokens: &[String],
        entity: &Entity,
    ) -> f64 {
        let repr = self.repr_cache(&self.vocab.encode(mention_tokens), &self.vocab.encode(request_tokens));
        self.entity_cache(&repr, &self.entity_input(entity)).cat.score
    }

    /// Compatibility of the mention with the entity's location features.
    pub fn score_location(
        &self,
        mention_tokens: &[String],
        request_tokens: &[String],
        entity: &Entity,
    ) -> f64 {
        let repr = self.repr_cache(&self.vocab.encode(mention_tokens), &self.vocab.encode(request_tokens));
        self.entity_cache(&repr, &self.entity_input(entity)).loc.score
    }

    /// Compatibility of the mention with the entity's surface texts.
    pub fn score_text(
        &self,
        mention_tokens: &[String],
        request_tokens: &[String],
        entity: &Entity,
    ) -> f64 {
        let repr = self.repr_cache(&self.vocab.encode(mention_tokens), &self.vocab.encode(request_tokens));
        self.entity_cache(&repr, &self.entity_input(entity)).txt.score
    }

    /// Convex mix of the three module scores with weights computed from the
    /// request tokens.
    pub fn aggregate(
        &self,
        request_tokens: &[String],
        s_cat: f64,
        s_loc: f64,
        s_txt: f64,
    ) -> f64 {
        let ids = self.vocab.encode(request_tokens);
        let repr = self.repr_cache(&[], &ids);
        repr.weights[0] * s_cat + repr.weights[1] * s_loc + repr.weights[2] * s_txt
    }

    /// The weight simplex for a request; always sums to 1.
    pub fn module_weights(&self, request_tokens: &[String]) -> Vec<f64> {
        self.repr_cache(&[], &self.vocab.encode(request_tokens)).weights
    }

    /// Score every entity; those at or above the threshold become matches.
    pub fn resolve_model(
        &self,
        mention: &Mention,
        entities: &[Entity],
        request_tokens: &[String],
    ) -> Resolution {
        let mention_tokens = text::normalize_tokens(&mention.text);
        let repr =
            self.repr_cache(&self.vocab.encode(&mention_tokens), &self.vocab.encode(request_tokens));
        let mut matches = Vec::new();
        for e in entities {
            let cache = self.entity_cache(&repr, &self.entity_input(e));
            if cache.score >= self.config.tau {
                matches.push(EntityMatch { entity_id: e.id.clone(), score: cache.score });
            }
        }
        Resolution { mention: mention.clone(), matches, resolver: ResolverKind::Model }
    }

    // ------------------------------------------------------------------
    // Training
    // ------------------------------------------------------------------

    fn example_forward(&self, ex: &MrExample) -> (ReprCache, Vec<EntityCache>) {
        let repr = self.repr_cache(&ex.mention_ids, &ex.request_ids);
        let caches = ex.candidates.iter().map(|c| self.entity_cache(&repr, c)).collect();
        (repr, caches)
    }

    pub fn loss_example(&self, ex: &MrExample) -> f64 {
        let (_, caches) = self.example_forward(ex);
        let scale = 1.0 / caches.len() as f64;
        caches
            .iter()
            .zip(&ex.labels)
            .map(|(c, &y)| {
                let s = c.score.clamp(1e-9, 1.0 - 1e-9);
                -scale * (y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum()
    }

    fn backward_example(&self, ex: &MrExample, grad: &mut [f64]) -> f64 {
        let d = self.config.embed_dim;
        let r = self.config.repr_dim;
        let h = self.config.hidden;
        let c_dim = self.config.cat_dim;
        let m2_len = 2 * r;
        let (repr, caches) = self.example_forward(ex);
        let scale = 1.0 / caches.len() as f64;

        let mut loss = 0.0;
        let mut d_m2 = vec![0.0; m2_len];
        let mut d_weights = vec![0.0; 3];

        for (cache, &y) in caches.iter().zip(&ex.labels) {
            let s = cache.score.clamp(1e-9, 1.0 - 1e-9);
            loss -= scale * (y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            let ds = scale * ((1.0 - y) / (1.0 - s) - y / s);

            let module_scores = [cache.cat.score, cache.loc.score, cache.txt.score];
            for k in 0..3 {
                d_weights[k] += ds * module_scores[k];
            }

            for (k, (module, (w1, b1, v2, c2))) in [
                (&cache.cat, (self.cat_w1, self.cat_b1, self.cat_v, self.cat_c)),
                (&cache.loc, (self.loc_w1, self.loc_b1, self.loc_v, self.loc_c)),
                (&cache.txt, (self.txt_w1, self.txt_b1, self.txt_v, self.txt_c)),
            ]
            .into_iter()
            .enumerate()
            {
                let ds_k = ds * repr.weights[k];
                let dz = ds_k * module.score * (1.0 - module.score);
                for (j, hv) in module.hidden.iter().enumerate() {
                    grad[v2.offset + j] += dz * hv;
                }
                grad[c2.offset] += dz;
                let v2_view = nn::view(&self.params, v2);
                let mut dh = vec![0.0; h];
                for j in 0..h {
                    if module.hidden[j] > 0.0 {
                        dh[j] = dz * v2_view[j];
                    }
                }
                let mut dinput = vec![0.0; module.input.len()];
                nn::dense_backward(
                    &self.params,
                    grad,
                    w1,
                    b1,
                    h,
                    module.input.len(),
                    &module.input,
                    &dh,
                    &mut dinput,
                );
                nn::add_assign(&mut d_m2, &dinput[..m2_len]);
                match k {
                    0 => {
                        // category embedding row
                        let idx = ex.candidates
                            [caches.iter().position(|c| std::ptr::eq(c, cache)).unwrap()]
                        .category
                        .index();
                        let row = &mut grad[self.cat_emb.offset + idx * c_dim
                            ..self.cat_emb.offset + (idx + 1) * c_dim];
                        nn::add_assign(row, &dinput[m2_len..]);
                    }
                    2 => {
                        // text mean feeds the shared embedding table
                        if !cache.txt_ids.is_empty() {
                            let inv = 1.0 / cache.txt_ids.len() as f64;
                            for &id in &cache.txt_ids {
                                for j in 0..d {
                                    grad[self.emb.offset + id * d + j] +=
                                        dinput[m2_len + j] * inv;
                                }
                            }
                        }
                    }
                    _ => {} // location features carry no parameters
                }
            }
        }

        // Weight head softmax.
        let mut d_logits = vec![0.0; 3];
        nn::softmax_backward(&repr.weights, &d_weights, &mut d_logits);
        let mut d_v = vec![0.0; r];
        nn::dense_backward(&self.params, grad, self.wh_w, self.wh_b, 3, r, &repr.v, &d_logits, &mut d_v);

        // Split m2 gradient into the two tanh branches.
        let mut d_u = d_m2[..r].to_vec();
        for (k, dv) in d_v.iter_mut().enumerate() {
            *dv += d_m2[r + k];
        }
        for k in 0..r {
            d_u[k] *= 1.0 - repr.u[k] * repr.u[k];
        }
        let mut d_v_pre = d_v;
        for k in 0..r {
            d_v_pre[k] *= 1.0 - repr.v[k] * repr.v[k];
        }

        let mut d_mention_mean = vec![0.0; d];
        let mut d_request_mean = vec![0.0; d];
        nn::dense_backward(
            &self.params,
            grad,
            self.w_m,
            self.b_m,
            r,
            d,
            &repr.mention_mean,
            &d_u,
            &mut d_mention_mean,
        );
        nn::dense_backward(
            &self.params,
            grad,
            self.w_r,
            self.b_r,
            r,
            d,
            &repr.request_mean,
            &d_v_pre,
            &mut d_request_mean,
        );

        for (ids, dmean) in [(&repr.mention_ids, &d_mention_mean), (&repr.request_ids, &d_request_mean)]
        {
            if ids.is_empty() {
                continue;
            }
            let inv = 1.0 / ids.len() as f64;
            for &id in ids.iter() {
                for j in 0..d {
                    grad[self.emb.offset + id * d + j] += dmean[j] * inv;
                }
            }
        }

        loss
    }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let header = CheckpointHeader {
            kind: "mr".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab_hash: self.vocab.hash(),
            param_count: self.params.len(),
        };
        std::fs::write(vocab_path(path), self.vocab.to_lines())?;
        nn::save_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<MrModel, CheckpointError> {
        let (header, params) = nn::load_checkpoint(path)?;
        if header.kind != "mr" {
            return Err(CheckpointError::KindMismatch { expected: "mr".into(), found: header.kind });
        }
        let config: MrConfig = serde_json::from_value(header.config)
            .map_err(|e| CheckpointError::Malformed(format!("bad mr config: {e}")))?;
        let vocab_lines = std::fs::read_to_string(vocab_path(path))?;
        let vocab = Vocabulary::from_lines(&vocab_lines);
        if vocab.hash() != header.vocab_hash {
            return Err(CheckpointError::VocabMismatch {
                expected: header.vocab_hash,
                found: vocab.hash(),
            });
        }
        let mut model = MrModel::new(config, vocab, 0);
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

// ============================================================================
// Training data
// ============================================================================

/// One line of the resolver training format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrRecord {
    pub request: String,
    pub mention: SpanRef,
    pub candidates: Vec<Entity>,
    pub gold_ids: Vec<String>,
}

pub struct MrExample {
    pub request_ids: Vec<usize>,
    pub mention_ids: Vec<usize>,
    pub candidates: Vec<EntityInput>,
    pub labels: Vec<f64>,
    pub candidate_ids: Vec<String>,
    pub gold_ids: HashSet<String>,
}

impl MrExample {
    pub fn from_record(rec: &MrRecord, model: &MrModel) -> Result<MrExample, TrainError> {
        if rec.candidates.is_empty() {
            return Err(TrainError::InvalidExample("example has no candidates".into()));
        }
        let tokens = text::normalize_tokens(&rec.request);
        if rec.mention.end > tokens.len() || rec.mention.start >= rec.mention.end {
            return Err(TrainError::InvalidExample(format!(
                "mention span {:?} out of bounds for request {:?}",
                rec.mention, rec.request
            )));
        }
        let mention_tokens = &tokens[rec.mention.start..rec.mention.end];
        let gold_ids: HashSet<String> = rec.gold_ids.iter().cloned().collect();
        Ok(MrExample {
            request_ids: model.vocab.encode(&tokens),
            mention_ids: model.vocab.encode(mention_tokens),
            candidates: rec.candidates.iter().map(|e| model.entity_input(e)).collect(),
            labels: rec
                .candidates
                .iter()
                .map(|e| if gold_ids.contains(&e.id) { 1.0 } else { 0.0 })
                .collect(),
            candidate_ids: rec.candidates.iter().map(|e| e.id.clone()).collect(),
            gold_ids,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MrTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
}

/// Micro P/R over per-entity threshold decisions of the model alone.
pub fn evaluate_mr_model(model: &MrModel, examples: &[MrExample]) -> PrCounts {
    let mut counts = PrCounts::default();
    for ex in examples {
        let (repr, caches) = model.example_forward(ex);
        let _ = repr;
        for ((cache, label), _id) in caches.iter().zip(&ex.labels).zip(&ex.candidate_ids) {
            let predicted = cache.score >= model.config.tau;
            let gold = *label > 0.5;
            match (predicted, gold) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    counts
}

pub fn train_mr(
    model: &mut MrModel,
    train: &[MrExample],
    val: &[MrExample],
    opts: &TrainOptions,
) -> Result<MrTrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = Adam::new(model.params.len(), opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut report =
        MrTrainReport { epoch_losses: Vec::new(), val_precision: 0.0, val_recall: 0.0, val_f1: 0.0 };

    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                epoch_loss += model.backward_example(&train[i], &mut grad);
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            nn::clip_global_norm(&mut grad, 5.0);
            opt.step(&mut model.params, &grad);
        }
        report.epoch_losses.push(epoch_loss / train.len() as f64);

        let counts = evaluate_mr_model(model, val);
        report.val_precision = counts.precision();
        report.val_recall = counts.recall();
        report.val_f1 = counts.f1();
        if opts.target_f1.is_some_and(|t| report.val_f1 >= t) {
            break;
        }
    }
    Ok(report)
}
