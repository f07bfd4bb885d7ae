//! JSONL ingestion and export.
//!
//! Each input line is an object with `desired_label`, `harmful_label` and
//! either `text` (hashed into a bag of words) or `x` (a ready feature
//! vector, as written by [`export_jsonl`]). Labels may be any JSON scalar and
//! are mapped to dense indices in first-seen order.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde_json::{json, Value};

use super::{Example, Split, TaskDataset};
use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// L2-normalized hashed bag of words: token `t` counts into bucket
/// `fnv1a64(t) % dim`. Text without tokens maps to the zero vector.
pub fn hash_text(text: &str, dim: usize) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    for t in tokenize(text) {
        x[(fnv1a64(t.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    x
}

fn label_key(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn dense(map: &mut IndexMap<String, usize>, key: String) -> usize {
    let next = map.len();
    *map.entry(key).or_insert(next)
}

pub fn load_jsonl(path: &Path, hash_dim: usize) -> Result<TaskDataset> {
    if hash_dim == 0 {
        return Err(Error::Config("hash_dim must be positive".into()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut desired = IndexMap::new();
    let mut harmful = IndexMap::new();
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Jsonl { line: line_no, message };
        let v: Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
        let label = |field: &str| {
            obj.get(field)
                .ok_or_else(|| err(format!("missing field `{field}`")))
                .and_then(|v| label_key(v).ok_or_else(|| err(format!("`{field}` must be a string, number or boolean"))))
        };
        let yd = label("desired_label")?;
        let yh = label("harmful_label")?;
        let x = match (obj.get("text"), obj.get("x")) {
            (Some(Value::String(t)), _) => hash_text(t, hash_dim),
            (Some(_), _) => return Err(err("`text` must be a string".into())),
            (None, Some(Value::Array(xs))) => xs
                .iter()
                .map(Value::as_f64)
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("`x` must be an array of numbers".into()))?,
            (None, _) => return Err(err("missing field `text`".into())),
        };
        if let Some(first) = examples.first().map(|e: &Example| e.x.len()) {
            if x.len() != first {
                return Err(err(format!("input has {} entries, earlier lines have {first}", x.len())));
            }
        }
        examples.push(Example { x, y_desired: dense(&mut desired, yd), y_harmful: dense(&mut harmful, yh) });
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("{} contains no examples", path.display())));
    }
    // A task with a single observed class still needs two logits.
    TaskDataset::new(examples, desired.len().max(2), harmful.len().max(2), Split::Full)
}

/// Writes one `{"x": [...], "desired_label": i, "harmful_label": j}` line per example.
pub fn export_jsonl(ds: &TaskDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for ex in ds.examples() {
        let line = json!({ "x": ex.x, "desired_label": ex.y_desired, "harmful_label": ex.y_harmful });
        writeln!(out, "{line}").expect("writing to a String cannot fail");
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Replaces gendered pronouns with "they"/"their", leaving everything else
/// untouched. "her" becomes "their" when a word follows it (the possessive
/// reading, as in "her thesis") and "they" otherwise.
pub fn censor_pronouns(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(|c: char| c.is_alphanumeric()) {
        out.push_str(&rest[..start]);
        rest = &rest[start..];
        let end = rest.find(|c: char| !c.is_alphanumeric()).unwrap_or(rest.len());
        let (word, tail) = rest.split_at(end);
        let replacement = match word.to_lowercase().as_str() {
            "he" | "she" | "him" => Some("they"),
            "his" | "hers" => Some("their"),
            "her" => {
                let next = tail.trim_start_matches([' ', '\t']);
                Some(if next.starts_with(char::is_alphanumeric) && next.len() < tail.len() { "their" } else { "they" })
            }
            _ => None,
        };
        out.push_str(replacement.unwrap_or(word));
        rest = tail;
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn tokenizer_splits_on_punctuation() {
        assert_eq!(tokenize("Dr. Smith's  lab, 2nd-floor!"), vec!["dr", "smith", "s", "lab", "2nd", "floor"]);
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn empty_text_is_zero_vector() {
        assert_eq!(hash_text("", 8), vec![0.0; 8]);
        assert_eq!(hash_text("a b", 8), hash_text("A, B", 8));
    }

    #[test]
    fn censoring() {
        assert_eq!(censor_pronouns("She wrote her thesis"), "they wrote their thesis");
        assert_eq!(censor_pronouns("The theory holds"), "The theory holds");
        assert_eq!(censor_pronouns("HE said his was better than hers."), "they said their was better than their.");
        assert_eq!(censor_pronouns("We thanked her."), "We thanked they.");
        assert_eq!(censor_pronouns("the\nshe-wolf"), "the\nthey-wolf");
        let t = "Him, her; HIS (hers) she";
        assert_eq!(censor_pronouns(&censor_pronouns(t)), censor_pronouns(t));
    }
}
