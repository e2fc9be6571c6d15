//! Number-agreement attribution: good-form vs bad-form maps, attractor
//! strata, and decided/undecided neuron counts.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{layer_stats, LayerStats};
use crate::attribution::{attribute_prompt, AttributionConfig, AttributionMap};
use crate::error::{Error, Result};
use crate::model::MaskedLm;
use crate::selection::NeuronSet;

/// One number-agreement example: a masked verb position with the correct and
/// incorrect number forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementExample {
    pub example_id: String,
    /// Masked template; the mask sits at the verb position.
    pub sentence: String,
    pub good_form: String,
    pub bad_form: String,
    /// Intervening nouns whose number differs from the subject's.
    pub n_attractors: u32,
}

/// Attribution maps for the good and bad form of one example, computed on
/// the identical tokenized prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarRecord {
    pub example_id: String,
    pub n_attractors: u32,
    pub good_map: AttributionMap,
    pub bad_map: AttributionMap,
}

/// Per-layer counts of neurons selected for both forms ("undecided") and
/// for exactly one form ("decided").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecidedUndecidedCounts {
    pub common: Vec<usize>,
    pub distinct: Vec<usize>,
}

pub use crate::util::SkipRecord;

/// Outcome of loading an agreement dataset.
#[derive(Debug, Clone, Default)]
pub struct DatasetLoad {
    pub examples: Vec<AgreementExample>,
    pub skipped: Vec<SkipRecord>,
}

/// Raw ingestion record: line-delimited JSON.
///
/// Either `sentence` already contains the mask placeholder, or `mask_index`
/// names the whitespace-token to replace with it.
#[derive(Debug, Deserialize, Serialize)]
struct IngestRow {
    #[serde(default)]
    id: Option<String>,
    sentence: String,
    #[serde(default)]
    mask_index: Option<usize>,
    good: String,
    bad: String,
    n_attractors: u32,
}

fn mask_count(sentence: &str, mask_token: &str) -> usize {
    sentence.matches(mask_token).count()
}

fn row_to_example(
    row: IngestRow,
    line: usize,
    mask_token: &str,
) -> std::result::Result<AgreementExample, String> {
    let sentence = match row.mask_index {
        Some(idx) => {
            let mut words: Vec<&str> = row.sentence.split_whitespace().collect();
            if idx >= words.len() {
                return Err(format!("mask_index {idx} out of range"));
            }
            words[idx] = mask_token;
            words.join(" ")
        }
        None => row.sentence,
    };
    match mask_count(&sentence, mask_token) {
        1 => {}
        n => return Err(format!("expected exactly one {mask_token}, found {n}")),
    }
    if row.good.trim().is_empty() || row.bad.trim().is_empty() {
        return Err("empty verb form".into());
    }
    if row.good == row.bad {
        return Err("good and bad forms are identical".into());
    }
    Ok(AgreementExample {
        example_id: row.id.unwrap_or_else(|| format!("ex{line}")),
        sentence,
        good_form: row.good,
        bad_form: row.bad,
        n_attractors: row.n_attractors,
    })
}

/// Load a line-delimited agreement dataset.
///
/// Malformed rows are skipped with a per-row reason. When a model is given,
/// examples whose good or bad form is not a single vocabulary token are also
/// skipped rather than approximated.
pub fn load_agreement_dataset(
    path: impl AsRef<Path>,
    model: Option<&dyn MaskedLm>,
) -> Result<DatasetLoad> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Load(format!("cannot open agreement dataset {}: {e}", path.display())))?;
    let mask_token = model.map_or("[MASK]".to_string(), |m| m.info().mask_token.clone());

    let mut out = DatasetLoad::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let row: IngestRow = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                out.skipped.push(SkipRecord {
                    line: line_no,
                    reason: format!("invalid record: {e}"),
                });
                continue;
            }
        };
        let example = match row_to_example(row, line_no, &mask_token) {
            Ok(ex) => ex,
            Err(reason) => {
                out.skipped.push(SkipRecord {
                    line: line_no,
                    reason,
                });
                continue;
            }
        };
        if let Some(model) = model {
            let single = |form: &str| match model.tokenize(&example.sentence, form) {
                Ok(_) => Ok(()),
                Err(e) => Err(e.to_string()),
            };
            if let Err(reason) = single(&example.good_form).and_then(|_| single(&example.bad_form))
            {
                out.skipped.push(SkipRecord {
                    line: line_no,
                    reason,
                });
                continue;
            }
        }
        out.examples.push(example);
    }
    Ok(out)
}

/// Convert the public corpus's tab-separated layout into the ingestion
/// format.
///
/// Expected columns per line: `n_attractors<TAB>tag<TAB>sentence with
/// ***mask***<TAB>good<TAB>bad`. Returns the number of converted rows plus
/// the rejects.
pub fn convert_agreement_tsv(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
) -> Result<(usize, Vec<SkipRecord>)> {
    let input = input.as_ref();
    let output = output.as_ref();
    let file = std::fs::File::open(input)
        .map_err(|e| Error::Load(format!("cannot open corpus {}: {e}", input.display())))?;
    let mut writer = std::io::BufWriter::new(
        std::fs::File::create(output).map_err(|e| Error::io(output, e))?,
    );

    let mut converted = 0usize;
    let mut skipped = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::io(input, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = text.split('\t').collect();
        if cols.len() != 5 {
            skipped.push(SkipRecord {
                line: line_no,
                reason: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
            continue;
        }
        let n_attractors: u32 = match cols[0].trim().parse() {
            Ok(n) => n,
            Err(_) => {
                skipped.push(SkipRecord {
                    line: line_no,
                    reason: format!("bad attractor count {:?}", cols[0]),
                });
                continue;
            }
        };
        if !cols[2].contains("***mask***") {
            skipped.push(SkipRecord {
                line: line_no,
                reason: "sentence lacks ***mask*** placeholder".into(),
            });
            continue;
        }
        let row = IngestRow {
            id: Some(format!("lgd{line_no}")),
            sentence: cols[2].replace("***mask***", "[MASK]"),
            mask_index: None,
            good: cols[3].trim().to_string(),
            bad: cols[4].trim().to_string(),
            n_attractors,
        };
        let json = serde_json::to_string(&row)
            .map_err(|e| Error::Format(format!("cannot serialize row: {e}")))?;
        writeln!(writer, "{json}").map_err(|e| Error::io(output, e))?;
        converted += 1;
    }
    Ok((converted, skipped))
}

/// Attribute both verb forms on the identical tokenized prompt.
pub fn attribute_pair<M: MaskedLm + ?Sized>(
    model: &M,
    example: &AgreementExample,
    config: &AttributionConfig,
) -> Result<GrammarRecord> {
    if example.good_form == example.bad_form {
        return Err(Error::InvalidArgument(
            "good and bad forms are identical".into(),
        ));
    }
    let good_prompt = model.tokenize(&example.sentence, &example.good_form)?;
    let bad_prompt = model.tokenize(&example.sentence, &example.bad_form)?;
    debug_assert_eq!(good_prompt.token_ids, bad_prompt.token_ids);
    debug_assert_eq!(good_prompt.mask_position, bad_prompt.mask_position);

    let good_map = attribute_prompt(
        model,
        &good_prompt,
        &format!("{}/good", example.example_id),
        config,
    )?;
    let bad_map = attribute_prompt(
        model,
        &bad_prompt,
        &format!("{}/bad", example.example_id),
        config,
    )?;
    Ok(GrammarRecord {
        example_id: example.example_id.clone(),
        n_attractors: example.n_attractors,
        good_map,
        bad_map,
    })
}

/// Layer statistics for one attractor stratum, split by target polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub n_examples: usize,
    pub good: LayerStats,
    pub bad: LayerStats,
}

/// Group records by attractor count and compute per-polarity layer stats.
///
/// `strata = None` keeps every stratum present in the records; an explicit
/// list requesting an absent stratum is an error.
pub fn stratify_stats(
    records: &[GrammarRecord],
    strata: Option<&[u32]>,
) -> Result<BTreeMap<u32, StratumStats>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "stratify_stats needs at least one record".into(),
        ));
    }
    let mut groups: BTreeMap<u32, Vec<&GrammarRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.n_attractors).or_default().push(r);
    }
    let wanted: Vec<u32> = match strata {
        Some(list) => {
            for s in list {
                if !groups.contains_key(s) {
                    return Err(Error::InvalidArgument(format!(
                        "no examples with {s} attractors"
                    )));
                }
            }
            list.to_vec()
        }
        None => groups.keys().copied().collect(),
    };

    let mut out = BTreeMap::new();
    for stratum in wanted {
        let group = &groups[&stratum];
        let good_maps: Vec<&AttributionMap> = group.iter().map(|r| &r.good_map).collect();
        let bad_maps: Vec<&AttributionMap> = group.iter().map(|r| &r.bad_map).collect();
        out.insert(
            stratum,
            StratumStats {
                n_examples: group.len(),
                good: layer_stats(&good_maps)?,
                bad: layer_stats(&bad_maps)?,
            },
        );
    }
    Ok(out)
}

/// Per-layer counts of neurons common to both forms and of neurons distinct
/// to one form (symmetric difference).
pub fn common_distinct(
    good_set: &NeuronSet,
    bad_set: &NeuronSet,
    layer_count: usize,
) -> Result<DecidedUndecidedCounts> {
    let mut common = vec![0usize; layer_count];
    let mut distinct = vec![0usize; layer_count];
    for n in good_set.intersection(bad_set).refs() {
        if n.layer >= layer_count {
            return Err(Error::LayerOutOfRange {
                layer: n.layer,
                layer_count,
            });
        }
        common[n.layer] += 1;
    }
    for n in good_set.symmetric_difference(bad_set).refs() {
        if n.layer >= layer_count {
            return Err(Error::LayerOutOfRange {
                layer: n.layer,
                layer_count,
            });
        }
        distinct[n.layer] += 1;
    }
    Ok(DecidedUndecidedCounts { common, distinct })
}
