//! Prompt sets: data model, validation, file format, bundled fixtures.
//!
//! The file format is line-delimited JSON, one prompt per line, with the
//! fields `(set_id, language, subject, relation, object, prompt_text)`.
//! The mask placeholder in prompt text is the literal model-family mask
//! token string (`[MASK]` for the shipped model families).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskedLm;
use crate::util::SkipRecord;

pub const DEFAULT_MASK_TOKEN: &str = "[MASK]";

/// A (subject, relation, object) triple in one language; the object is the
/// expected single-token answer for every prompt of the fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub language: String,
}

/// A fact plus its masked prompt templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub set_id: String,
    pub fact: Fact,
    pub prompts: Vec<String>,
}

/// On-disk row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PromptRow {
    set_id: String,
    language: String,
    subject: String,
    relation: String,
    object: String,
    prompt_text: String,
}

/// Outcome of loading a prompt file.
#[derive(Debug, Clone, Default)]
pub struct PromptLoad {
    pub sets: Vec<PromptSet>,
    pub rejected: Vec<SkipRecord>,
}

fn validate_row(row: &PromptRow, mask_token: &str) -> std::result::Result<(), String> {
    for (name, value) in [
        ("set_id", &row.set_id),
        ("language", &row.language),
        ("subject", &row.subject),
        ("relation", &row.relation),
        ("object", &row.object),
    ] {
        if value.trim().is_empty() {
            return Err(format!("empty {name}"));
        }
    }
    match row.prompt_text.matches(mask_token).count() {
        1 => Ok(()),
        n => Err(format!("expected exactly one {mask_token}, found {n}")),
    }
}

fn load_rows(reader: impl BufRead, mask_token: &str) -> Result<PromptLoad> {
    let mut out = PromptLoad::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::Format(format!("line {line_no}: {e}")))?;
        if text.trim().is_empty() {
            continue;
        }
        let row: PromptRow = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(SkipRecord {
                    line: line_no,
                    reason: format!("invalid record: {e}"),
                });
                continue;
            }
        };
        if let Err(reason) = validate_row(&row, mask_token) {
            out.rejected.push(SkipRecord {
                line: line_no,
                reason,
            });
            continue;
        }
        let fact = Fact {
            subject: row.subject,
            relation: row.relation,
            object: row.object,
            language: row.language,
        };
        match out.sets.iter_mut().find(|s| s.set_id == row.set_id) {
            Some(set) => {
                if set.fact != fact {
                    out.rejected.push(SkipRecord {
                        line: line_no,
                        reason: format!("fact fields disagree with earlier rows of {}", row.set_id),
                    });
                    continue;
                }
                set.prompts.push(row.prompt_text);
            }
            None => out.sets.push(PromptSet {
                set_id: row.set_id,
                fact,
                prompts: vec![row.prompt_text],
            }),
        }
    }
    Ok(out)
}

/// Load and validate a prompt file, rejecting malformed rows individually.
pub fn load_prompts(path: impl AsRef<Path>) -> Result<PromptLoad> {
    load_prompts_with_mask(path, DEFAULT_MASK_TOKEN)
}

pub fn load_prompts_with_mask(path: impl AsRef<Path>, mask_token: &str) -> Result<PromptLoad> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Load(format!("cannot open prompt file {}: {e}", path.display())))?;
    load_rows(std::io::BufReader::new(file), mask_token)
}

/// Canonical serialization: one compact JSON row per prompt, set order and
/// prompt order preserved. Loading then re-serializing is lossless.
pub fn save_prompts(sets: &[PromptSet], mut writer: impl Write) -> Result<()> {
    for set in sets {
        for prompt in &set.prompts {
            let row = PromptRow {
                set_id: set.set_id.clone(),
                language: set.fact.language.clone(),
                subject: set.fact.subject.clone(),
                relation: set.fact.relation.clone(),
                object: set.fact.object.clone(),
                prompt_text: prompt.clone(),
            };
            let json = serde_json::to_string(&row)
                .map_err(|e| Error::Format(format!("cannot serialize prompt row: {e}")))?;
            writeln!(writer, "{json}")
                .map_err(|e| Error::Format(format!("cannot write prompt row: {e}")))?;
        }
    }
    Ok(())
}

pub fn save_prompts_to_file(sets: &[PromptSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    save_prompts(sets, std::io::BufWriter::new(file))
}

// ---------------------------------------------------------------------------
// Bundled fixtures
// ---------------------------------------------------------------------------

const FIXTURES: &[(&str, &str)] = &[
    (
        "france-capital-en-1",
        include_str!("../fixtures/prompts/france-capital-en-1.jsonl"),
    ),
    (
        "france-capital-en-2",
        include_str!("../fixtures/prompts/france-capital-en-2.jsonl"),
    ),
    (
        "france-capitale-fr",
        include_str!("../fixtures/prompts/france-capitale-fr.jsonl"),
    ),
    (
        "germany-capital-en",
        include_str!("../fixtures/prompts/germany-capital-en.jsonl"),
    ),
    (
        "cow-eats-grass-en",
        include_str!("../fixtures/prompts/cow-eats-grass-en.jsonl"),
    ),
];

/// Names of the bundled prompt sets.
pub fn builtin_names() -> Vec<&'static str> {
    FIXTURES.iter().map(|(name, _)| *name).collect()
}

/// Raw bytes of a bundled fixture file.
pub fn builtin_raw(name: &str) -> Option<&'static str> {
    FIXTURES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

/// A bundled prompt set by name.
pub fn builtin(name: &str) -> Option<PromptSet> {
    let text = builtin_raw(name)?;
    let load = load_rows(std::io::Cursor::new(text), DEFAULT_MASK_TOKEN).ok()?;
    debug_assert!(load.rejected.is_empty(), "bundled fixture failed validation");
    load.sets.into_iter().find(|s| s.set_id == name)
}

/// All bundled prompt sets.
pub fn builtin_all() -> Vec<PromptSet> {
    builtin_names()
        .into_iter()
        .filter_map(builtin)
        .collect()
}

// ---------------------------------------------------------------------------
// Model-aware validation
// ---------------------------------------------------------------------------

/// One prompt that failed validation against a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFailure {
    /// Index into the set's prompt list.
    pub prompt_index: usize,
    pub prompt_text: String,
    pub reason: String,
}

/// Per-prompt validation outcome for one set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub set_id: String,
    pub checked: usize,
    pub failures: Vec<PromptFailure>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check every prompt of a set against a model: the mask must be unique
/// under the model's mask token and the fact's object must tokenize to a
/// single vocabulary id.
pub fn validate_prompt<M: MaskedLm + ?Sized>(model: &M, set: &PromptSet) -> ValidationReport {
    let mut failures = Vec::new();
    for (prompt_index, prompt_text) in set.prompts.iter().enumerate() {
        if let Err(e) = model.tokenize(prompt_text, &set.fact.object) {
            let reason = match &e {
                Error::PromptStructure(_) => {
                    let n = prompt_text.matches(&model.info().mask_token).count();
                    if n > 1 {
                        "multiple masks".to_string()
                    } else {
                        e.to_string()
                    }
                }
                _ => e.to_string(),
            };
            failures.push(PromptFailure {
                prompt_index,
                prompt_text: prompt_text.clone(),
                reason,
            });
        }
    }
    ValidationReport {
        set_id: set.set_id.clone(),
        checked: set.prompts.len(),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToyModel, ToyModelSpec};

    #[test]
    fn builtin_fixture_names_and_sizes() {
        assert_eq!(builtin_names().len(), 5);
        for name in builtin_names() {
            let set = builtin(name).unwrap();
            assert_eq!(set.prompts.len(), 7, "{name}");
            assert_eq!(set.set_id, name);
        }
    }

    #[test]
    fn france_fixture_text_is_verbatim() {
        let set = builtin("france-capital-en-1").unwrap();
        assert_eq!(
            set.prompts[0],
            "Sarah was visiting [MASK], the capital of france"
        );
        assert_eq!(set.fact.object, "Paris");
        assert_eq!(set.fact.language, "en");
    }

    #[test]
    fn french_fixture_language_and_text() {
        let set = builtin("france-capitale-fr").unwrap();
        assert_eq!(set.fact.language, "fr");
        assert_eq!(
            set.prompts[0],
            "Sarah était en visite à [MASK], la capitale de la France"
        );
        assert_eq!(set.fact.relation, "capitale");
    }

    #[test]
    fn fixtures_round_trip_byte_for_byte() {
        for name in builtin_names() {
            let raw = builtin_raw(name).unwrap();
            let load = load_rows(std::io::Cursor::new(raw), DEFAULT_MASK_TOKEN).unwrap();
            assert!(load.rejected.is_empty(), "{name}");
            let mut buf = Vec::new();
            save_prompts(&load.sets, &mut buf).unwrap();
            assert_eq!(String::from_utf8(buf).unwrap(), raw, "{name}");
        }
    }

    #[test]
    fn loader_rejects_maskless_and_double_mask_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"set_id":"s","language":"en","subject":"A","relation":"r","object":"B","prompt_text":"fine [MASK] here"}}"#).unwrap();
        writeln!(f, r#"{{"set_id":"s","language":"en","subject":"A","relation":"r","object":"B","prompt_text":"no mask"}}"#).unwrap();
        writeln!(f, r#"{{"set_id":"s","language":"en","subject":"A","relation":"r","object":"B","prompt_text":"[MASK] and [MASK]"}}"#).unwrap();
        writeln!(f, "garbage").unwrap();
        f.flush().unwrap();
        let load = load_prompts(f.path()).unwrap();
        assert_eq!(load.sets.len(), 1);
        assert_eq!(load.sets[0].prompts.len(), 1);
        assert_eq!(load.rejected.len(), 3);
    }

    #[test]
    fn loader_rejects_fact_disagreement_within_a_set() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"set_id":"s","language":"en","subject":"A","relation":"r","object":"B","prompt_text":"x [MASK]"}}"#).unwrap();
        writeln!(f, r#"{{"set_id":"s","language":"en","subject":"A","relation":"r","object":"C","prompt_text":"y [MASK]"}}"#).unwrap();
        f.flush().unwrap();
        let load = load_prompts(f.path()).unwrap();
        assert_eq!(load.sets[0].prompts.len(), 1);
        assert_eq!(load.rejected.len(), 1);
        assert!(load.rejected[0].reason.contains("disagree"));
    }

    #[test]
    fn validate_prompt_reports_multi_mask_and_multi_token_object() {
        let model = ToyModel::build(&ToyModelSpec::new(1, 2, 8)).unwrap();
        let set = PromptSet {
            set_id: "s".into(),
            fact: Fact {
                subject: "A".into(),
                relation: "r".into(),
                object: "ab".into(), // splits into two toy tokens
                language: "en".into(),
            },
            prompts: vec![
                "a [MASK]".into(),
                "[MASK] b [MASK]".into(),
            ],
        };
        let report = validate_prompt(&model, &set);
        assert_eq!(report.checked, 2);
        assert_eq!(report.failures.len(), 2);
        assert!(report.failures[0].reason.contains("pieces"));
        assert_eq!(report.failures[1].reason, "multiple masks");

        let clean = PromptSet {
            fact: Fact {
                object: "c".into(),
                ..set.fact.clone()
            },
            prompts: vec!["a [MASK]".into()],
            set_id: "s2".into(),
        };
        assert!(validate_prompt(&model, &clean).is_clean());
    }
}
