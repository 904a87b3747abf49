//! Evaluation corpora: utterances grouped by speaker and by a factor of
//! interest, plus JSON Lines / CSV ingestion.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::alignment::{align, tokenize, ErrorCounts};
use crate::error::{Error, Result};

/// A categorical factor with `l >= 2` distinct levels, one of which is the
/// reference for dummy coding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFactor {
    name: String,
    levels: Vec<String>,
    reference_level: usize,
}

impl GroupFactor {
    pub fn new(name: impl Into<String>, levels: Vec<String>, reference_level: usize) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::InvalidFactor(format!(
                "need at least two levels, got {}",
                levels.len()
            )));
        }
        let distinct: BTreeSet<&String> = levels.iter().collect();
        if distinct.len() != levels.len() {
            return Err(Error::InvalidFactor("levels must be distinct".into()));
        }
        if reference_level >= levels.len() {
            return Err(Error::InvalidFactor(format!(
                "reference level {reference_level} out of range"
            )));
        }
        Ok(Self {
            name: name.into(),
            levels,
            reference_level,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn reference_level(&self) -> usize {
        self.reference_level
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    pub fn resolve(&self, label: &str) -> Result<usize> {
        self.level_index(label)
            .ok_or_else(|| Error::UnknownLevel(label.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    /// Index into the corpus factor's levels.
    pub level: usize,
    pub errors: u64,
    pub ref_words: u64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    factor: GroupFactor,
    covariate_names: Vec<String>,
    utterances: Vec<Utterance>,
}

impl Corpus {
    /// Validates level indices, exposures, covariate dimension, and that
    /// every level has at least one utterance.
    pub fn new(
        factor: GroupFactor,
        covariate_names: Vec<String>,
        utterances: Vec<Utterance>,
    ) -> Result<Self> {
        let dim = covariate_names.len();
        let mut per_level = vec![0usize; factor.len()];
        for u in &utterances {
            if u.level >= factor.len() {
                return Err(Error::InvalidUtterance(format!(
                    "utterance {:?} has level index {} but the factor has {} levels",
                    u.id,
                    u.level,
                    factor.len()
                )));
            }
            if u.ref_words == 0 {
                return Err(Error::InvalidUtterance(format!(
                    "utterance {:?} has an empty reference",
                    u.id
                )));
            }
            if u.covariates.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "utterance {:?} has {} covariates, corpus has {dim}",
                    u.id,
                    u.covariates.len()
                )));
            }
            if u.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidUtterance(format!(
                    "utterance {:?} has a non-finite covariate",
                    u.id
                )));
            }
            per_level[u.level] += 1;
        }
        if let Some(empty) = per_level.iter().position(|&n| n == 0) {
            return Err(Error::EmptyLevel(factor.levels[empty].clone()));
        }
        Ok(Self {
            factor,
            covariate_names,
            utterances,
        })
    }

    pub fn factor(&self) -> &GroupFactor {
        &self.factor
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_owned()))
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Same data with a different reference level.
    pub fn with_reference_level(&self, label: &str) -> Result<Self> {
        let reference = self.factor.resolve(label)?;
        let mut out = self.clone();
        out.factor.reference_level = reference;
        Ok(out)
    }

    /// Speaker ids in first-appearance order.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for u in &self.utterances {
            if seen.insert(u.speaker.as_str(), ()).is_none() {
                out.push(u.speaker.as_str());
            }
        }
        out
    }

    /// Checks that each speaker belongs to exactly one factor level.
    pub fn check_speaker_level_factor(&self) -> Result<()> {
        let mut level_of: HashMap<&str, usize> = HashMap::new();
        for u in &self.utterances {
            let first = *level_of.entry(u.speaker.as_str()).or_insert(u.level);
            if first != u.level {
                return Err(Error::SpeakerInTwoGroups {
                    speaker: u.speaker.clone(),
                    first: self.factor.levels[first].clone(),
                    second: self.factor.levels[u.level].clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// `None` picks by file extension (`.csv` or JSON Lines).
    pub format: Option<InputFormat>,
    /// Lowercase and collapse whitespace before aligning.
    pub normalize: bool,
    /// Record field holding the factor label.
    pub group_field: String,
    /// Declared level order; labels outside it are errors. When absent,
    /// levels are taken in first-appearance order.
    pub levels: Option<Vec<String>>,
    pub reference_level: Option<String>,
    /// Reject speakers that appear under two labels.
    pub require_speaker_level_factor: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: None,
            normalize: true,
            group_field: "group".into(),
            levels: None,
            reference_level: None,
            require_speaker_level_factor: true,
        }
    }
}

/// A record dropped at load time because its reference was empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRecord {
    pub line: usize,
    pub id: String,
    pub counts: ErrorCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    /// Per-utterance edit breakdown, parallel to `corpus.utterances()`.
    pub counts: Vec<ErrorCounts>,
    pub excluded: Vec<ExcludedRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schema {
    Text,
    Counts,
}

impl Schema {
    fn describe(self) -> &'static str {
        match self {
            Schema::Text => "ref/hyp",
            Schema::Counts => "errors/words",
        }
    }
}

struct RawRecord {
    line: usize,
    id: Option<String>,
    speaker: String,
    group: String,
    schema: Schema,
    counts: ErrorCounts,
    covariates: Vec<f64>,
}

pub fn load_corpus(path: impl AsRef<Path>, options: &LoadOptions) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let format = options.format.unwrap_or_else(|| InputFormat::from_path(path));
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records = match format {
        InputFormat::Jsonl => read_jsonl(BufReader::new(file), path, options)?,
        InputFormat::Csv => read_csv(file, options)?,
    };
    assemble(records, options)
}

/// Parses JSON Lines from any reader; used by `load_corpus` and by callers
/// that already hold the text in memory.
pub fn parse_jsonl(text: &str, options: &LoadOptions) -> Result<LoadedCorpus> {
    let records = read_jsonl(text.as_bytes(), Path::new("<memory>"), options)?;
    assemble(records, options)
}

fn read_jsonl(reader: impl BufRead, path: &Path, options: &LoadOptions) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        let Value::Object(map) = value else {
            return Err(Error::MalformedRecord {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        out.push(json_record(line_no, &map, options)?);
    }
    Ok(out)
}

fn json_scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn json_required(map: &Map<String, Value>, key: &str, line: usize) -> Result<String> {
    map.get(key)
        .and_then(json_scalar_string)
        .ok_or_else(|| Error::MalformedRecord {
            line,
            message: format!("missing or non-scalar field {key:?}"),
        })
}

fn json_count(map: &Map<String, Value>, key: &str, line: usize) -> Result<u64> {
    map.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::MalformedRecord {
            line,
            message: format!("field {key:?} must be a non-negative integer"),
        })
}

fn json_record(line: usize, map: &Map<String, Value>, options: &LoadOptions) -> Result<RawRecord> {
    let has_text = map.contains_key("ref") || map.contains_key("hyp");
    let has_counts = map.contains_key("errors") || map.contains_key("words");
    let (schema, counts) = match (has_text, has_counts) {
        (true, true) => {
            return Err(Error::MalformedRecord {
                line,
                message: "record has both ref/hyp and errors/words".into(),
            })
        }
        (false, false) => {
            return Err(Error::MalformedRecord {
                line,
                message: "record needs either ref+hyp or errors+words".into(),
            })
        }
        (true, false) => {
            let reference = map.get("ref").and_then(Value::as_str);
            let hypothesis = map.get("hyp").and_then(Value::as_str);
            let (Some(r), Some(h)) = (reference, hypothesis) else {
                return Err(Error::MalformedRecord {
                    line,
                    message: "ref and hyp must both be strings".into(),
                });
            };
            let counts = align(&tokenize(r, options.normalize), &tokenize(h, options.normalize));
            (Schema::Text, counts)
        }
        (false, true) => {
            let errors = json_count(map, "errors", line)?;
            let words = json_count(map, "words", line)?;
            (Schema::Counts, ErrorCounts::from_totals(errors, words))
        }
    };
    let covariates = match map.get("cov") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| Error::NonNumericCovariate {
                    line,
                    value: v.to_string(),
                })
            })
            .collect::<Result<_>>()?,
        Some(other) => {
            return Err(Error::NonNumericCovariate {
                line,
                value: other.to_string(),
            })
        }
    };
    Ok(RawRecord {
        line,
        id: map.get("id").and_then(json_scalar_string),
        speaker: json_required(map, "speaker", line)?,
        group: json_required(map, &options.group_field, line)?,
        schema,
        counts,
        covariates,
    })
}

fn read_csv(file: File, options: &LoadOptions) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRecord {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut cov_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("cov_")?.parse::<usize>().ok().map(|k| (k, i)))
        .collect();
    cov_cols.sort_unstable();
    if cov_cols.iter().enumerate().any(|(expected, &(k, _))| k != expected) {
        return Err(Error::MalformedRecord {
            line: 1,
            message: "covariate columns must be cov_0..cov_{d-1} without gaps".into(),
        });
    }
    let (id_col, speaker_col, group_col) = (col("id"), col("speaker"), col(&options.group_field));
    let (ref_col, hyp_col, err_col, words_col) = (col("ref"), col("hyp"), col("errors"), col("words"));
    let missing = |name: &str| Error::MalformedRecord {
        line: 1,
        message: format!("missing column {name:?}"),
    };
    let speaker_col = speaker_col.ok_or_else(|| missing("speaker"))?;
    let group_col = group_col.ok_or_else(|| missing(&options.group_field))?;

    let mut out = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::MalformedRecord {
            line: idx + 2,
            message: e.to_string(),
        })?;
        let line = row.position().map_or(idx + 2, |p| p.line() as usize);
        let cell = |c: Option<usize>| c.and_then(|i| row.get(i)).filter(|s| !s.is_empty());
        let text = (cell(ref_col), cell(hyp_col));
        let nums = (cell(err_col), cell(words_col));
        let has_text = ref_col.is_some() && hyp_col.is_some() && (text.0.is_some() || text.1.is_some());
        let has_counts = nums.0.is_some() || nums.1.is_some();
        let (schema, counts) = match (has_text, has_counts) {
            (true, true) | (false, false) => {
                return Err(Error::MalformedRecord {
                    line,
                    message: "row needs exactly one of ref+hyp or errors+words".into(),
                })
            }
            (true, false) => {
                let r = text.0.unwrap_or("");
                let h = text.1.unwrap_or("");
                (
                    Schema::Text,
                    align(&tokenize(r, options.normalize), &tokenize(h, options.normalize)),
                )
            }
            (false, true) => {
                let parse = |s: Option<&str>, name: &str| -> Result<u64> {
                    s.and_then(|v| v.parse::<u64>().ok())
                        .ok_or_else(|| Error::MalformedRecord {
                            line,
                            message: format!("{name} must be a non-negative integer"),
                        })
                };
                (
                    Schema::Counts,
                    ErrorCounts::from_totals(parse(nums.0, "errors")?, parse(nums.1, "words")?),
                )
            }
        };
        let covariates = cov_cols
            .iter()
            .map(|&(_, i)| {
                let raw = row.get(i).unwrap_or("");
                raw.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::NonNumericCovariate {
                        line,
                        value: raw.to_owned(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let speaker = cell(Some(speaker_col)).ok_or_else(|| Error::MalformedRecord {
            line,
            message: "empty speaker".into(),
        })?;
        let group = cell(Some(group_col)).ok_or_else(|| Error::MalformedRecord {
            line,
            message: "empty group".into(),
        })?;
        out.push(RawRecord {
            line,
            id: cell(id_col).map(str::to_owned),
            speaker: speaker.to_owned(),
            group: group.to_owned(),
            schema,
            counts,
            covariates,
        });
    }
    Ok(out)
}

fn assemble(records: Vec<RawRecord>, options: &LoadOptions) -> Result<LoadedCorpus> {
    let schema = records.first().map(|r| r.schema);
    let dim = records.first().map_or(0, |r| r.covariates.len());

    let mut levels: Vec<String> = options.levels.clone().unwrap_or_default();
    let declared = options.levels.is_some();
    let mut utterances = Vec::with_capacity(records.len());
    let mut counts = Vec::with_capacity(records.len());
    let mut excluded = Vec::new();
    let mut speaker_group: HashMap<String, String> = HashMap::new();

    for rec in records {
        let first_schema = schema.expect("non-empty");
        if rec.schema != first_schema {
            return Err(Error::MixedSchema {
                line: rec.line,
                expected: first_schema.describe(),
                found: rec.schema.describe(),
            });
        }
        if rec.covariates.len() != dim {
            return Err(Error::CovariateDimension {
                line: rec.line,
                expected: dim,
                found: rec.covariates.len(),
            });
        }
        let empty_reference = rec.counts.ref_words == 0;
        let level = match levels.iter().position(|l| *l == rec.group) {
            Some(i) => i,
            None if declared => {
                return Err(Error::UnknownGroupLabel {
                    line: rec.line,
                    label: rec.group,
                })
            }
            // Excluded records do not introduce levels.
            None if empty_reference => usize::MAX,
            None => {
                levels.push(rec.group.clone());
                levels.len() - 1
            }
        };
        if options.require_speaker_level_factor {
            match speaker_group.get(&rec.speaker) {
                Some(g) if *g != rec.group => {
                    return Err(Error::SpeakerInTwoGroups {
                        speaker: rec.speaker,
                        first: g.clone(),
                        second: rec.group,
                    })
                }
                Some(_) => {}
                None => {
                    speaker_group.insert(rec.speaker.clone(), rec.group.clone());
                }
            }
        }
        let id = rec.id.unwrap_or_else(|| format!("line-{}", rec.line));
        if empty_reference {
            excluded.push(ExcludedRecord {
                line: rec.line,
                id,
                counts: rec.counts,
            });
            continue;
        }
        counts.push(rec.counts);
        utterances.push(Utterance {
            id,
            speaker: rec.speaker,
            level,
            errors: rec.counts.total(),
            ref_words: rec.counts.ref_words,
            covariates: rec.covariates,
        });
    }

    let reference = match &options.reference_level {
        Some(label) => levels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLevel(label.clone()))?,
        None => 0,
    };
    let factor = GroupFactor::new(options.group_field.clone(), levels, reference)?;
    let covariate_names = (0..dim).map(|i| format!("cov_{i}")).collect();
    let corpus = Corpus::new(factor, covariate_names, utterances)?;
    Ok(LoadedCorpus {
        corpus,
        counts,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: String,
    pub utterances: usize,
    pub speakers: usize,
    pub words: u64,
    pub errors: u64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub factor: String,
    pub levels: Vec<LevelSummary>,
    pub total: LevelSummary,
}

/// Per-level utterance, speaker, word and error counts with empirical WER.
pub fn summarize(corpus: &Corpus) -> CorpusSummary {
    let factor = corpus.factor();
    let mut rows: Vec<(usize, BTreeSet<&str>, u64, u64)> =
        vec![(0, BTreeSet::new(), 0, 0); factor.len()];
    let mut all_speakers = BTreeSet::new();
    for u in corpus.utterances() {
        let row = &mut rows[u.level];
        row.0 += 1;
        row.1.insert(u.speaker.as_str());
        row.2 += u.ref_words;
        row.3 += u.errors;
        all_speakers.insert(u.speaker.as_str());
    }
    let make = |level: String, utterances, speakers, words: u64, errors: u64| LevelSummary {
        level,
        utterances,
        speakers,
        words,
        errors,
        wer: if words == 0 { 0.0 } else { errors as f64 / words as f64 },
    };
    let levels = rows
        .iter()
        .zip(factor.levels())
        .map(|((n, spk, w, e), name)| make(name.clone(), *n, spk.len(), *w, *e))
        .collect::<Vec<_>>();
    let total = make(
        "total".into(),
        corpus.len(),
        all_speakers.len(),
        levels.iter().map(|l| l.words).sum(),
        levels.iter().map(|l| l.errors).sum(),
    );
    CorpusSummary {
        factor: factor.name().to_owned(),
        levels,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> LoadOptions {
        LoadOptions::default()
    }

    #[test]
    fn text_record_is_aligned() {
        let loaded = parse_jsonl(
            r#"{"id":"u1","ref":"play music","hyp":"play music","speaker":"s1","group":"male"}
{"id":"u2","ref":"call mom","hyp":"call tom","speaker":"s2","group":"female"}"#,
            &opts(),
        )
        .unwrap();
        let u = &loaded.corpus.utterances()[0];
        assert_eq!((u.errors, u.ref_words), (0, 2));
        assert_eq!(loaded.corpus.utterances()[1].errors, 1);
        assert_eq!(loaded.counts[1].substitutions, 1);
    }

    #[test]
    fn count_record_passes_through() {
        let loaded = parse_jsonl(
            "{\"id\":\"a\",\"errors\":3,\"words\":10,\"speaker\":\"s1\",\"group\":\"x\"}\n\
             {\"id\":\"b\",\"errors\":0,\"words\":4,\"speaker\":\"s2\",\"group\":\"y\"}\n",
            &opts(),
        )
        .unwrap();
        let u = &loaded.corpus.utterances()[0];
        assert_eq!((u.errors, u.ref_words), (3, 10));
    }

    #[test]
    fn empty_reference_is_excluded_and_reported() {
        let loaded = parse_jsonl(
            r#"{"id":"e","ref":"","hyp":"x","speaker":"s1","group":"a"}
{"id":"k","ref":"hello there","hyp":"hello","speaker":"s1","group":"a"}
{"id":"m","ref":"yes","hyp":"yes","speaker":"s2","group":"b"}"#,
            &opts(),
        )
        .unwrap();
        assert_eq!(loaded.excluded.len(), 1);
        assert_eq!(loaded.excluded[0].id, "e");
        assert_eq!(loaded.excluded[0].counts.insertions, 1);
        assert_eq!(loaded.corpus.len(), 2);
    }

    #[test]
    fn mixed_schema_is_an_error() {
        let err = parse_jsonl(
            r#"{"ref":"a","hyp":"a","speaker":"s1","group":"a"}
{"errors":1,"words":3,"speaker":"s2","group":"b"}"#,
            &opts(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MixedSchema { line: 2, .. }));
    }

    #[test]
    fn unknown_label_with_declared_levels() {
        let options = LoadOptions {
            levels: Some(vec!["male".into(), "female".into()]),
            ..opts()
        };
        let err = parse_jsonl(
            r#"{"errors":1,"words":3,"speaker":"s1","group":"male"}
{"errors":1,"words":3,"speaker":"s2","group":"other"}"#,
            &options,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownGroupLabel { line: 2, .. }));
    }

    #[test]
    fn non_numeric_covariate() {
        let err = parse_jsonl(
            r#"{"errors":1,"words":3,"speaker":"s1","group":"a","cov":[1.0,"x"]}"#,
            &opts(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonNumericCovariate { line: 1, .. }));
    }

    #[test]
    fn covariate_dimension_fixed() {
        let err = parse_jsonl(
            r#"{"errors":1,"words":3,"speaker":"s1","group":"a","cov":[1.0,2.0]}
{"errors":1,"words":3,"speaker":"s2","group":"b","cov":[1.0]}"#,
            &opts(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::CovariateDimension { line: 2, expected: 2, found: 1 }
        ));
    }

    #[test]
    fn speaker_under_two_groups() {
        let text = r#"{"errors":1,"words":3,"speaker":"s1","group":"a"}
{"errors":1,"words":3,"speaker":"s1","group":"b"}"#;
        assert!(matches!(
            parse_jsonl(text, &opts()).unwrap_err(),
            Error::SpeakerInTwoGroups { .. }
        ));
        let relaxed = LoadOptions {
            require_speaker_level_factor: false,
            ..opts()
        };
        let loaded = parse_jsonl(text, &relaxed).unwrap();
        assert!(loaded.corpus.check_speaker_level_factor().is_err());
    }

    #[test]
    fn reference_level_selection() {
        let options = LoadOptions {
            reference_level: Some("b".into()),
            ..opts()
        };
        let loaded = parse_jsonl(
            r#"{"errors":1,"words":3,"speaker":"s1","group":"a"}
{"errors":1,"words":3,"speaker":"s2","group":"b"}"#,
            &options,
        )
        .unwrap();
        assert_eq!(loaded.corpus.factor().reference_level(), 1);
    }

    #[test]
    fn factor_validation() {
        assert!(GroupFactor::new("g", vec!["a".into()], 0).is_err());
        assert!(GroupFactor::new("g", vec!["a".into(), "a".into()], 0).is_err());
        assert!(GroupFactor::new("g", vec!["a".into(), "b".into()], 2).is_err());
    }

    #[test]
    fn corpus_requires_every_level() {
        let f = GroupFactor::new("g", vec!["a".into(), "b".into()], 0).unwrap();
        let u = Utterance {
            id: "1".into(),
            speaker: "s".into(),
            level: 0,
            errors: 0,
            ref_words: 1,
            covariates: vec![],
        };
        assert!(matches!(
            Corpus::new(f, vec![], vec![u]),
            Err(Error::EmptyLevel(l)) if l == "b"
        ));
    }

    #[test]
    fn summary_single_utterance_per_level() {
        let loaded = parse_jsonl(
            r#"{"errors":3,"words":12,"speaker":"s1","group":"a"}
{"errors":1,"words":4,"speaker":"s2","group":"b"}"#,
            &opts(),
        )
        .unwrap();
        let s = summarize(&loaded.corpus);
        assert_eq!(s.levels[0].wer, 0.25);
        assert_eq!(s.total.utterances, 2);
        assert_eq!(s.total.speakers, 2);
        assert_eq!(s.total.wer, 0.25);
    }

    #[test]
    fn summary_symmetric_halves() {
        let loaded = parse_jsonl(
            r#"{"errors":2,"words":10,"speaker":"s1","group":"a"}
{"errors":2,"words":10,"speaker":"s2","group":"b"}
{"errors":0,"words":5,"speaker":"s1","group":"a"}
{"errors":0,"words":5,"speaker":"s2","group":"b"}"#,
            &opts(),
        )
        .unwrap();
        let s = summarize(&loaded.corpus);
        let (a, b) = (&s.levels[0], &s.levels[1]);
        assert_eq!(
            (a.utterances, a.speakers, a.words, a.errors, a.wer),
            (b.utterances, b.speakers, b.words, b.errors, b.wer)
        );
    }
}
