//! Synthetic generator documents and the malformed variants a generator
//! typically emits.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const OBJECTS: [&str; 10] = ["backpack", "handbag", "shoes", "hat", "street", "car", "bicycle", "umbrella", "phone", "dog"];
const ATTRIBUTES: [&str; 12] = [
    "red", "blue jacket", "black trousers", "white sneakers", "short hair", "long brown hair", "striped shirt",
    "gray", "green t-shirt", "leather", "sunglasses", "yellow",
];
const RELATIONS: [&str; 6] = ["carrying", "wearing", "holding", "walking on", "next to", "riding"];

/// A valid document: a person plus 1-4 objects, every object linked.
pub fn random_document(rng: &mut ChaCha8Rng) -> Value {
    let mut objects: Vec<&str> = OBJECTS.to_vec();
    objects.shuffle(rng);
    objects.truncate(rng.gen_range(1..=4));
    let attrs = |rng: &mut ChaCha8Rng| -> Vec<&str> {
        let mut a: Vec<&str> = ATTRIBUTES.to_vec();
        a.shuffle(rng);
        a.truncate(rng.gen_range(0..=3));
        a
    };
    let mut nodes = vec![json!({"id": "person", "attributes": attrs(rng)})];
    let mut edges = Vec::new();
    for o in &objects {
        nodes.push(json!({"id": o, "attributes": attrs(rng)}));
        let relation = RELATIONS[rng.gen_range(0..RELATIONS.len())];
        edges.push(json!({"source": "person", "target": o, "relation": relation}));
    }
    json!({"nodes": nodes, "edges": edges})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Fences,
    TrailingCommas,
    BadEscapes,
    SmartQuotes,
    RestructuredEdges,
}

pub const ALL: [Corruption; 5] = [
    Corruption::Fences,
    Corruption::TrailingCommas,
    Corruption::BadEscapes,
    Corruption::SmartQuotes,
    Corruption::RestructuredEdges,
];

fn restructure(doc: &Value, rng: &mut ChaCha8Rng) -> Value {
    let mut doc = doc.clone();
    let edges = doc["edges"].as_array_mut().expect("edges array");
    for e in edges.iter_mut() {
        let (s, t, r) = (e["source"].clone(), e["target"].clone(), e["relation"].clone());
        *e = match rng.gen_range(0..3) {
            0 => json!({"from": s, "to": t, "label": r}),
            1 => json!({"subject": s, "predicate": r, "object": t}),
            _ => json!([s, r, t]),
        };
    }
    if rng.gen_bool(0.3) {
        let obj = doc.as_object_mut().expect("object");
        let edges = obj.shift_remove("edges").expect("edges");
        obj.insert("relations".into(), edges);
    }
    doc
}

/// Applies a text-level corruption outside string literals (commas) or
/// inside them (escapes, quotes).
fn corrupt_text(text: &str, how: Corruption, rng: &mut ChaCha8Rng) -> String {
    match how {
        Corruption::Fences => {
            let lead = ["Here is the scene graph:\n", "Sure! ", ""][rng.gen_range(0..3)];
            format!("{lead}```json\n{text}\n```\nLet me know if anything is missing.")
        }
        Corruption::TrailingCommas => {
            let mut out = String::new();
            let mut in_str = false;
            let mut inserted = false;
            let chars: Vec<char> = text.chars().collect();
            for (i, &c) in chars.iter().enumerate() {
                if c == '"' && (i == 0 || chars[i - 1] != '\\') {
                    in_str = !in_str;
                }
                if !in_str && (c == ']' || c == '}') && i > 0 && !matches!(chars[i - 1], '[' | '{') {
                    let last = i + 1 == chars.len();
                    if !last && (rng.gen_bool(0.5) || !inserted) {
                        let trimmed = out.trim_end().len();
                        out.insert(trimmed, ',');
                        inserted = true;
                    }
                }
                out.push(c);
            }
            out
        }
        Corruption::BadEscapes => {
            let mut out = String::new();
            let mut in_str = false;
            let mut inserted = false;
            for c in text.chars() {
                if c == '"' {
                    in_str = !in_str;
                } else if in_str && (c == ' ' || c == '_' || c == '-' || "acdeghijklmopqsvwxyz".contains(c)) && (rng.gen_bool(0.1) || !inserted) {
                    out.push('\\');
                    inserted = true;
                }
                out.push(c);
            }
            out
        }
        Corruption::SmartQuotes => {
            let mut open = true;
            text.chars()
                .map(|c| {
                    if c == '"' {
                        let q = if open { '\u{201C}' } else { '\u{201D}' };
                        open = !open;
                        q
                    } else {
                        c
                    }
                })
                .collect()
        }
        Corruption::RestructuredEdges => unreachable!("structural"),
    }
}

/// A malformed variant of `doc` with one to three corruptions.
pub fn malformed(doc: &Value, rng: &mut ChaCha8Rng) -> (String, Vec<Corruption>) {
    let mut kinds: Vec<Corruption> = ALL.to_vec();
    kinds.shuffle(rng);
    kinds.truncate(rng.gen_range(1..=3));
    // Structure first, then text damage; fences always last.
    kinds.sort_by_key(|k| match k {
        Corruption::RestructuredEdges => 0,
        Corruption::Fences => 2,
        _ => 1,
    });
    let mut value = doc.clone();
    if kinds.contains(&Corruption::RestructuredEdges) {
        value = restructure(&value, rng);
    }
    let mut text = if rng.gen_bool(0.5) {
        serde_json::to_string_pretty(&value).unwrap()
    } else {
        serde_json::to_string(&value).unwrap()
    };
    for &k in &kinds {
        if k != Corruption::RestructuredEdges {
            text = corrupt_text(&text, k, rng);
        }
    }
    (text, kinds)
}
