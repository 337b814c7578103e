//! Domain types shared by every stage of the pipeline, plus the append-only
//! dialog context store that produces immutable [`ContextSnapshot`]s.

use std::collections::BTreeMap;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default turn window: three user/agent exchanges.
pub const DEFAULT_TURN_WINDOW: usize = 6;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("turn ordinal {got} is not greater than last ordinal {last}")]
    NonMonotonicOrdinal { got: u64, last: u64 },
    #[error("duplicate entity id: {0}")]
    DuplicateEntityId(String),
    #[error("invalid entity {id}: {reason}")]
    InvalidEntity { id: String, reason: String },
    #[error("invalid bounding box: {0}")]
    InvalidBoundingBox(String),
    #[error("turn references unregistered entity id: {0}")]
    UnknownPresentedEntity(String),
}

// ============================================================================
// Entities
// ============================================================================

/// Axis-aligned box in screen-fraction coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ContextError> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        let ok = self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= 1.0
            && self.y + self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(ContextError::InvalidBoundingBox(format!(
                "x={} y={} w={} h={}",
                self.x, self.y, self.w, self.h
            )))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Where an entity lives: on screen, at a position in a presented list, or
/// nowhere in particular (background tasks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityLocation {
    ScreenBox(BoundingBox),
    ListIndex { index: usize, list_length: usize },
    None,
}

impl EntityLocation {
    pub fn validate(&self) -> Result<(), ContextError> {
        match self {
            EntityLocation::ScreenBox(b) => b.validate(),
            EntityLocation::ListIndex { index, list_length } => {
                if *index >= 1 && index <= list_length {
                    Ok(())
                } else {
                    Err(ContextError::InvalidBoundingBox(format!(
                        "list_index {index} out of range for list_length {list_length}"
                    )))
                }
            }
            EntityLocation::None => Ok(()),
        }
    }

    pub fn list_index(&self) -> Option<usize> {
        match self {
            EntityLocation::ListIndex { index, .. } => Some(*index),
            _ => None,
        }
    }
}

/// Closed category taxonomy for candidate referents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityCategory {
    PhoneNumber,
    Email,
    Address,
    Url,
    Business,
    Person,
    Music,
    Movie,
    Alarm,
    Timer,
    Notification,
    Other,
}

impl EntityCategory {
    pub const ALL: [EntityCategory; 12] = [
        EntityCategory::PhoneNumber,
        EntityCategory::Email,
        EntityCategory::Address,
        EntityCategory::Url,
        EntityCategory::Business,
        EntityCategory::Person,
        EntityCategory::Music,
        EntityCategory::Movie,
        EntityCategory::Alarm,
        EntityCategory::Timer,
        EntityCategory::Notification,
        EntityCategory::Other,
    ];

    /// Stable index into [`Self::ALL`], used as an embedding row.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }
}

/// Which modality contributed the entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntitySource {
    Screen,
    Conversational,
    Background,
}

/// A candidate referent: a screen item, a list item, or a background task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub category: EntityCategory,
    /// Display text first, aliases after. Never empty.
    pub texts: Vec<String>,
    pub location: EntityLocation,
    pub source: EntitySource,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Entity {
    pub fn validate(&self) -> Result<(), ContextError> {
        if self.texts.is_empty() {
            return Err(ContextError::InvalidEntity {
                id: self.id.clone(),
                reason: "texts must be non-empty".into(),
            });
        }
        self.location.validate().map_err(|e| ContextError::InvalidEntity {
            id: self.id.clone(),
            reason: e.to_string(),
        })?;
        if self.source == EntitySource::Screen
            && !matches!(self.location, EntityLocation::ScreenBox(_))
        {
            return Err(ContextError::InvalidEntity {
                id: self.id.clone(),
                reason: "screen entity requires a screen_box location".into(),
            });
        }
        Ok(())
    }

    pub fn display_text(&self) -> &str {
        &self.texts[0]
    }
}

// ============================================================================
// Dialog
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub speaker: Speaker,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub presented_entity_ids: Vec<String>,
    pub ordinal: u64,
}

/// Immutable view handed to the pipeline: recent turns, live candidate
/// referents, and the utterance to understand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub turns: Vec<ConversationTurn>,
    pub entities: Vec<Entity>,
    pub current_utterance: String,
}

impl ContextSnapshot {
    /// Snapshot with no context at all, just the request.
    pub fn bare(current_utterance: impl Into<String>) -> Self {
        ContextSnapshot {
            turns: Vec::new(),
            entities: Vec::new(),
            current_utterance: current_utterance.into(),
        }
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }
}

/// Append-only per-session context store. Single-writer; snapshots are
/// deep copies and stay valid across later mutations.
#[derive(Debug, Clone)]
pub struct DialogStore {
    window: usize,
    turns: Vec<ConversationTurn>,
    entities: Vec<Entity>,
    last_ordinal: u64,
}

impl Default for DialogStore {
    fn default() -> Self {
        Self::new(DEFAULT_TURN_WINDOW)
    }
}

impl DialogStore {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "turn window must be at least 1");
        DialogStore { window, turns: Vec::new(), entities: Vec::new(), last_ordinal: 0 }
    }

    pub fn append_turn(&mut self, turn: ConversationTurn) -> Result<(), ContextError> {
        if !self.turns.is_empty() && turn.ordinal <= self.last_ordinal {
            return Err(ContextError::NonMonotonicOrdinal {
                got: turn.ordinal,
                last: self.last_ordinal,
            });
        }
        for id in &turn.presented_entity_ids {
            if !self.entities.iter().any(|e| &e.id == id) {
                return Err(ContextError::UnknownPresentedEntity(id.clone()));
            }
        }
        self.last_ordinal = turn.ordinal;
        self.turns.push(turn);
        if self.turns.len() > self.window {
            let excess = self.turns.len() - self.window;
            self.turns.drain(..excess);
        }
        Ok(())
    }

    pub fn register_entities(&mut self, entities: Vec<Entity>) -> Result<(), ContextError> {
        let mut seen: HashSet<&str> = self.entities.iter().map(|e| e.id.as_str()).collect();
        for e in &entities {
            e.validate()?;
            if !seen.insert(e.id.as_str()) {
                return Err(ContextError::DuplicateEntityId(e.id.clone()));
            }
        }
        self.entities.extend(entities);
        Ok(())
    }

    /// Drop all live entities (e.g. the screen changed or a task ended).
    pub fn clear_entities(&mut self) {
        self.entities.clear();
    }

    pub fn snapshot(&self, current_utterance: impl Into<String>) -> ContextSnapshot {
        ContextSnapshot {
            turns: self.turns.clone(),
            entities: self.entities.clone(),
            current_utterance: current_utterance.into(),
        }
    }

    pub fn turns(&self) -> &[ConversationTurn] {
        &self.turns
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }
}

// ============================================================================
// Pipeline products
// ============================================================================

/// Who produced a mention span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Model,
    Rule,
}

/// A token span in the current utterance flagged as a referring expression.
/// `start` is inclusive, `end` exclusive, both token indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub provenance: Provenance,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_candidate_entity: Option<String>,
}

impl Mention {
    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Which resolver path produced a resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolverKind {
    Rule,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity_id: String,
    pub score: f64,
}

/// A mention paired with zero or more matched entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub mention: Mention,
    pub matches: Vec<EntityMatch>,
    pub resolver: ResolverKind,
}

/// Three-way rewrite classification: anaphora/ellipsis, correction by
/// repetition, or nothing to rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewriteClass {
    #[serde(rename = "AER")]
    Aer,
    #[serde(rename = "CbR")]
    Cbr,
    None,
}

impl RewriteClass {
    pub const ALL: [RewriteClass; 3] = [RewriteClass::Aer, RewriteClass::Cbr, RewriteClass::None];

    pub fn index(self) -> usize {
        match self {
            RewriteClass::Aer => 0,
            RewriteClass::Cbr => 1,
            RewriteClass::None => 2,
        }
    }

    pub fn from_index(i: usize) -> RewriteClass {
        Self::ALL[i]
    }
}

impl std::fmt::Display for RewriteClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RewriteClass::Aer => write!(f, "AER"),
            RewriteClass::Cbr => write!(f, "CbR"),
            RewriteClass::None => write!(f, "None"),
        }
    }
}

/// What the pipeline hands downstream for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderstandingOutput {
    pub original_utterance: String,
    pub rewritten_utterance: String,
    pub rewrite_class: RewriteClass,
    pub resolutions: Vec<Resolution>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn background_alarm(id: &str) -> Entity {
        Entity {
            id: id.into(),
            category: EntityCategory::Alarm,
            texts: vec!["Morning Alarm".into()],
            location: EntityLocation::None,
            source: EntitySource::Background,
            metadata: BTreeMap::from([("firing".to_string(), "true".to_string())]),
        }
    }

    fn turn(ordinal: u64, speaker: Speaker, text: &str) -> ConversationTurn {
        ConversationTurn {
            speaker,
            utterance: text.into(),
            presented_entity_ids: vec![],
            ordinal,
        }
    }

    #[test]
    fn append_turn_base_case() {
        let mut store = DialogStore::default();
        store.append_turn(turn(1, Speaker::User, "hello")).unwrap();
        assert_eq!(store.turns().len(), 1);
    }

    #[test]
    fn append_turn_evicts_oldest_beyond_window() {
        let mut store = DialogStore::new(3);
        for i in 1..=4 {
            store.append_turn(turn(i, Speaker::User, &format!("t{i}"))).unwrap();
        }
        assert_eq!(store.turns().len(), 3);
        assert_eq!(store.turns()[0].ordinal, 2);
    }

    #[test]
    fn append_turn_rejects_non_monotonic_ordinal() {
        let mut store = DialogStore::default();
        store.append_turn(turn(5, Speaker::User, "a")).unwrap();
        let err = store.append_turn(turn(3, Speaker::User, "b")).unwrap_err();
        assert!(matches!(err, ContextError::NonMonotonicOrdinal { got: 3, last: 5 }));
    }

    #[test]
    fn register_entities_exposes_list_in_snapshot() {
        let mut store = DialogStore::default();
        let shops: Vec<Entity> = (1..=3)
            .map(|i| Entity {
                id: format!("shop-{i}"),
                category: EntityCategory::Business,
                texts: vec![format!("Coffee Shop {i}")],
                location: EntityLocation::ListIndex { index: i, list_length: 3 },
                source: EntitySource::Conversational,
                metadata: BTreeMap::new(),
            })
            .collect();
        store.register_entities(shops).unwrap();
        let snap = store.snapshot("call the second one");
        assert_eq!(snap.entities.len(), 3);
        assert!(snap.entities.iter().all(|e| e.source == EntitySource::Conversational));
    }

    #[test]
    fn register_rejects_screen_entity_without_box() {
        let mut store = DialogStore::default();
        let bad = Entity {
            id: "s1".into(),
            category: EntityCategory::PhoneNumber,
            texts: vec!["555-0100".into()],
            location: EntityLocation::None,
            source: EntitySource::Screen,
            metadata: BTreeMap::new(),
        };
        assert!(store.register_entities(vec![bad]).is_err());
    }

    #[test]
    fn register_rejects_duplicate_id() {
        let mut store = DialogStore::default();
        store.register_entities(vec![background_alarm("a1")]).unwrap();
        let err = store.register_entities(vec![background_alarm("a1")]).unwrap_err();
        assert!(matches!(err, ContextError::DuplicateEntityId(_)));
    }

    #[test]
    fn register_background_alarm_with_metadata() {
        let mut store = DialogStore::default();
        store.register_entities(vec![background_alarm("a1")]).unwrap();
        let snap = store.snapshot("switch it off");
        assert_eq!(snap.entities[0].metadata.get("firing").map(String::as_str), Some("true"));
    }

    #[test]
    fn snapshot_is_immutable_under_later_mutation() {
        let mut store = DialogStore::default();
        store.append_turn(turn(1, Speaker::User, "a")).unwrap();
        store.append_turn(turn(2, Speaker::Agent, "b")).unwrap();
        let snap = store.snapshot("c");
        assert_eq!(snap.turns.len(), 2);
        let before = snap.clone();
        store.append_turn(turn(3, Speaker::User, "d")).unwrap();
        store.register_entities(vec![background_alarm("a1")]).unwrap();
        assert_eq!(snap, before);
    }

    #[test]
    fn snapshot_of_empty_store() {
        let store = DialogStore::default();
        let snap = store.snapshot("what time is it");
        assert!(snap.turns.is_empty());
        assert!(snap.entities.is_empty());
        assert_eq!(snap.current_utterance, "what time is it");
    }

    #[test]
    fn bounding_box_invariants() {
        assert!(BoundingBox::new(0.0, 0.0, 0.5, 0.5).is_ok());
        assert!(BoundingBox::new(0.6, 0.0, 0.5, 0.5).is_err()); // x + w > 1
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 0.5).is_err()); // zero width
        assert!(BoundingBox::new(-0.1, 0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn list_index_bounds() {
        assert!(EntityLocation::ListIndex { index: 1, list_length: 1 }.validate().is_ok());
        assert!(EntityLocation::ListIndex { index: 0, list_length: 3 }.validate().is_err());
        assert!(EntityLocation::ListIndex { index: 4, list_length: 3 }.validate().is_err());
    }

    #[test]
    fn turn_referencing_unknown_entity_rejected() {
        let mut store = DialogStore::default();
        let mut t = turn(1, Speaker::Agent, "here are some options");
        t.presented_entity_ids.push("ghost".into());
        assert!(store.append_turn(t).is_err());
    }

    #[test]
    fn json_round_trip_core_types() {
        let e = background_alarm("a1");
        let js = serde_json::to_string(&e).unwrap();
        let back: Entity = serde_json::from_str(&js).unwrap();
        assert_eq!(e, back);

        let out = UnderstandingOutput {
            original_utterance: "how far away is it".into(),
            rewritten_utterance: "how far away is columbus".into(),
            rewrite_class: RewriteClass::Aer,
            resolutions: vec![Resolution {
                mention: Mention {
                    start: 4,
                    end: 5,
                    text: "it".into(),
                    provenance: Provenance::Model,
                    score: 0.91,
                    rule_candidate_entity: None,
                },
                matches: vec![EntityMatch { entity_id: "e1".into(), score: 0.8 }],
                resolver: ResolverKind::Model,
            }],
        };
        let js = serde_json::to_string(&out).unwrap();
        assert!(js.contains("\"rewrite_class\":\"AER\""));
        let back: UnderstandingOutput = serde_json::from_str(&js).unwrap();
        assert_eq!(out, back);
    }

    #[test]
    fn location_json_shape() {
        let js = serde_json::to_string(&EntityLocation::ListIndex { index: 2, list_length: 3 })
            .unwrap();
        assert_eq!(js, r#"{"list_index":{"index":2,"list_length":3}}"#);
        let js = serde_json::to_string(&EntityLocation::None).unwrap();
        assert_eq!(js, r#""none""#);
    }
}
