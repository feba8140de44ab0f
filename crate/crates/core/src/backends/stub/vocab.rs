//! Word lists shared by the stub captioner and the stub perturber, so the
//! perturber can locate the caption's subject, object, and so on.

pub const SUBJECTS: &[&str] = &[
    "man", "woman", "child", "boy", "girl", "dog", "horse", "player", "person", "athlete",
];
pub const VERBS: &[&str] = &[
    "holding", "pulling", "carrying", "watching", "pushing", "chasing", "riding", "painting",
];
pub const OBJECTS: &[&str] = &[
    "ball", "table", "sled", "chair", "bicycle", "rope", "bag", "box", "kite", "bench",
];
pub const ADJECTIVES: &[&str] = &[
    "red", "blue", "small", "large", "wooden", "old", "bright", "green", "yellow", "shiny",
];
pub const BACKGROUNDS: &[&str] = &[
    "park", "kitchen", "street", "forest", "beach", "garden", "field", "city", "yard", "market",
];
pub const WEATHER: &[&str] = &["sunny", "cloudy", "snowy", "rainy", "foggy", "windy"];
pub const DOMAINS: &[&str] = &[
    "photo", "painting", "sketch", "drawing", "watercolor", "cartoon", "rendering",
];

/// Extra substitutes the perturber may propose, including near-synonyms
/// and label-adjacent words that the semantic gates should catch.
pub const SUBJECT_EXTRAS: &[&str] = &["guy", "puppy", "cat", "kid", "monkey"];
pub const OBJECT_EXTRAS: &[&str] = &["desk", "belt", "cap", "beam", "pizza"];
pub const ADJECTIVE_EXTRAS: &[&str] = &["crimson", "big", "tiny", "striped"];

/// Every word the stubs know, deduplicated, in a fixed order.
pub fn all_words() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for list in [
        SUBJECTS,
        VERBS,
        OBJECTS,
        ADJECTIVES,
        BACKGROUNDS,
        WEATHER,
        DOMAINS,
        SUBJECT_EXTRAS,
        OBJECT_EXTRAS,
        ADJECTIVE_EXTRAS,
    ] {
        for w in list {
            if !out.contains(w) {
                out.push(w);
            }
        }
    }
    out
}
