//! Controlled vocabulary of finding terms and the parsers for finding codes
//! and patient corpora.
//!
//! A finding code is a slash-separated sequence of vocabulary terms such as
//! `infiltrate/lung/upper lobe/left/patchy/mild`. The first segment names the
//! element being described; every following segment is routed by its
//! vocabulary category, anatomy terms into `locations` and attribute terms
//! into `attributes`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Code that marks a study without findings.
pub const NORMAL_SENTINEL: &str = "normal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Anatomy,
    Disease,
    Sign,
    Object,
    AttrDegree,
    AttrDescriptive,
    AttrPositional,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Anatomy,
        Category::Disease,
        Category::Sign,
        Category::Object,
        Category::AttrDegree,
        Category::AttrDescriptive,
        Category::AttrPositional,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Anatomy => "anatomy",
            Category::Disease => "disease",
            Category::Sign => "sign",
            Category::Object => "object",
            Category::AttrDegree => "attr_degree",
            Category::AttrDescriptive => "attr_descriptive",
            Category::AttrPositional => "attr_positional",
        }
    }

    pub fn is_attribute(self) -> bool {
        matches!(
            self,
            Category::AttrDegree | Category::AttrDescriptive | Category::AttrPositional
        )
    }

    /// Categories that may head a finding code.
    pub fn is_element(self) -> bool {
        matches!(
            self,
            Category::Anatomy | Category::Disease | Category::Sign | Category::Object
        )
    }

    fn requires_region(self) -> bool {
        matches!(self, Category::Anatomy | Category::Disease | Category::Sign)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Category::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub category: Category,
    pub body_region: Option<String>,
}

/// Lowercases and trims a term name so lookups are insensitive to casing and
/// stray whitespace.
pub fn normalize_term(raw: &str) -> String {
    raw.trim().to_lowercase()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabularyError {
    #[error("line {line}: expected `name,category,body_region`, found {found} field(s)")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: empty term name")]
    EmptyName { line: usize },
    #[error("line {line}: term name `{name}` contains a reserved character")]
    ReservedCharacter { line: usize, name: String },
    #[error("line {line}: duplicate term `{name}` (first defined on line {first})")]
    Duplicate {
        line: usize,
        name: String,
        first: usize,
    },
    #[error("line {line}: unknown category `{label}`")]
    UnknownCategory { line: usize, label: String },
    #[error("line {line}: {category} term `{name}` requires a body region")]
    MissingRegion {
        line: usize,
        name: String,
        category: Category,
    },
    #[error("line {line}: attribute term `{name}` must not carry a body region")]
    UnexpectedRegion { line: usize, name: String },
}

/// An ordered set of terms with a case-insensitive name index.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    terms: Vec<Term>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    /// Builds a vocabulary from already-normalized terms, checking every term
    /// invariant. Line numbers in errors are 1-based term positions.
    pub fn from_terms(terms: Vec<Term>) -> Result<Self, VocabularyError> {
        let mut vocab = Vocabulary::default();
        for (i, term) in terms.into_iter().enumerate() {
            vocab.insert(i + 1, term)?;
        }
        Ok(vocab)
    }

    fn insert(&mut self, line: usize, mut term: Term) -> Result<(), VocabularyError> {
        term.name = normalize_term(&term.name);
        term.body_region = term
            .body_region
            .map(|r| r.trim().to_string())
            .filter(|r| !r.is_empty());
        if term.name.is_empty() {
            return Err(VocabularyError::EmptyName { line });
        }
        let reserved = |s: &str| s.contains(['/', ',', ';', '|']);
        if reserved(&term.name) || term.body_region.as_deref().is_some_and(reserved) {
            return Err(VocabularyError::ReservedCharacter {
                line,
                name: term.name,
            });
        }
        if term.category.requires_region() && term.body_region.is_none() {
            return Err(VocabularyError::MissingRegion {
                line,
                name: term.name,
                category: term.category,
            });
        }
        if term.category.is_attribute() && term.body_region.is_some() {
            return Err(VocabularyError::UnexpectedRegion {
                line,
                name: term.name,
            });
        }
        if let Some(&first) = self.index.get(&term.name) {
            return Err(VocabularyError::Duplicate {
                line,
                name: term.name,
                first: first + 1,
            });
        }
        self.index.insert(term.name.clone(), self.terms.len());
        self.terms.push(term);
        Ok(())
    }

    /// Parses the vocabulary file format: one `name,category,body_region`
    /// line per term, `#` comment lines and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, VocabularyError> {
        let mut vocab = Vocabulary::default();
        let mut first_line: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            if fields.len() != 3 {
                return Err(VocabularyError::FieldCount {
                    line,
                    found: fields.len(),
                });
            }
            let category = fields[1]
                .parse::<Category>()
                .map_err(|label| VocabularyError::UnknownCategory { line, label })?;
            let term = Term {
                name: fields[0].to_string(),
                category,
                body_region: Some(fields[2].to_string()),
            };
            let name = normalize_term(fields[0]);
            vocab.insert(line, term).map_err(|e| match e {
                VocabularyError::Duplicate { line, name, .. } => VocabularyError::Duplicate {
                    first: first_line[&name],
                    line,
                    name,
                },
                other => other,
            })?;
            first_line.insert(name, line);
        }
        Ok(vocab)
    }

    /// Canonical text form; `parse(render())` reproduces the vocabulary.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(&t.name);
            out.push(',');
            out.push_str(t.category.label());
            out.push(',');
            if let Some(r) = &t.body_region {
                out.push_str(r);
            }
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn lookup(&self, name: &str) -> Option<&Term> {
        self.index
            .get(&normalize_term(name))
            .map(|&i| &self.terms[i])
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeError {
    #[error("empty finding code")]
    Empty,
    #[error("empty segment at position {position}")]
    EmptySegment { position: usize },
    #[error("unknown term `{term}` at position {position}")]
    UnknownTerm { term: String, position: usize },
    #[error("`{term}` is a {category} term and cannot head a finding code")]
    AttributeElement { term: String, category: Category },
    #[error("`{term}` at position {position} is a {category} term and cannot qualify an element")]
    MisplacedElement {
        term: String,
        position: usize,
        category: Category,
    },
}

/// One parsed finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingCode {
    pub element: Term,
    pub locations: Vec<Term>,
    pub attributes: Vec<Term>,
    pub raw: String,
}

impl FindingCode {
    /// Joins element, locations and attributes with `/` in stored order.
    pub fn render(&self) -> String {
        std::iter::once(&self.element)
            .chain(&self.locations)
            .chain(&self.attributes)
            .map(|t| t.name.as_str())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        std::iter::once(&self.element)
            .chain(&self.locations)
            .chain(&self.attributes)
    }
}

pub fn parse_code_sequence(raw: &str, vocab: &Vocabulary) -> Result<FindingCode, CodeError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(CodeError::Empty);
    }
    let mut element = None;
    let mut locations = Vec::new();
    let mut attributes = Vec::new();
    for (position, segment) in raw.split('/').enumerate() {
        if segment.trim().is_empty() {
            return Err(CodeError::EmptySegment { position });
        }
        let term = vocab
            .lookup(segment)
            .ok_or_else(|| CodeError::UnknownTerm {
                term: normalize_term(segment),
                position,
            })?
            .clone();
        if position == 0 {
            if !term.category.is_element() {
                return Err(CodeError::AttributeElement {
                    category: term.category,
                    term: term.name,
                });
            }
            element = Some(term);
        } else if term.category == Category::Anatomy {
            locations.push(term);
        } else if term.category.is_attribute() {
            attributes.push(term);
        } else {
            return Err(CodeError::MisplacedElement {
                category: term.category,
                term: term.name,
                position,
            });
        }
    }
    Ok(FindingCode {
        element: element.expect("first segment always visited"),
        locations,
        attributes,
        raw: raw.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub image_refs: Vec<String>,
    pub findings: Vec<FindingCode>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: expected `patient_id | image_refs | codes`, found {found} field(s)")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: empty patient id")]
    EmptyPatientId { line: usize },
    #[error("line {line}: patient `{patient_id}` has no image references")]
    NoImages { line: usize, patient_id: String },
    #[error("line {line}: patient `{patient_id}` has no codes (use `normal` for a study without findings)")]
    NoCodes { line: usize, patient_id: String },
    #[error("line {line}: patient `{patient_id}` mixes `normal` with finding codes")]
    NormalWithFindings { line: usize, patient_id: String },
    #[error("line {line}: patient `{patient_id}`, code {code_index}: {source}")]
    Code {
        line: usize,
        patient_id: String,
        code_index: usize,
        source: CodeError,
    },
    #[error("line {line}: duplicate patient id `{patient_id}` (first on line {first})")]
    DuplicatePatient {
        line: usize,
        patient_id: String,
        first: usize,
    },
    #[error(
        "patient `{patient_id}` references term `{term}` that differs from the corpus vocabulary"
    )]
    ForeignTerm { patient_id: String, term: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocabulary: Vocabulary,
    pub records: Vec<PatientRecord>,
}

impl Corpus {
    /// Parses the corpus file format, one `patient_id | img[,img] | code[;code]`
    /// record per line.
    pub fn parse(text: &str, vocabulary: Vocabulary) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('|').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(CorpusError::FieldCount {
                    line,
                    found: fields.len(),
                });
            }
            let patient_id = fields[0].to_string();
            if patient_id.is_empty() {
                return Err(CorpusError::EmptyPatientId { line });
            }
            if let Some(&first) = seen.get(&patient_id) {
                return Err(CorpusError::DuplicatePatient {
                    line,
                    patient_id,
                    first,
                });
            }
            let image_refs: Vec<String> = fields[1]
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if image_refs.is_empty() {
                return Err(CorpusError::NoImages { line, patient_id });
            }
            let codes: Vec<&str> = fields[2]
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .collect();
            if codes.is_empty() {
                return Err(CorpusError::NoCodes { line, patient_id });
            }
            let has_normal = codes
                .iter()
                .any(|c| c.eq_ignore_ascii_case(NORMAL_SENTINEL));
            let findings = if has_normal {
                if codes.len() > 1 {
                    return Err(CorpusError::NormalWithFindings { line, patient_id });
                }
                Vec::new()
            } else {
                codes
                    .iter()
                    .enumerate()
                    .map(|(code_index, code)| {
                        parse_code_sequence(code, &vocabulary).map_err(|source| CorpusError::Code {
                            line,
                            patient_id: patient_id.clone(),
                            code_index,
                            source,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?
            };
            seen.insert(patient_id.clone(), line);
            records.push(PatientRecord {
                patient_id,
                image_refs,
                findings,
            });
        }
        Ok(Corpus {
            vocabulary,
            records,
        })
    }

    /// Canonical text form of the records.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let codes = if r.findings.is_empty() {
                NORMAL_SENTINEL.to_string()
            } else {
                r.findings
                    .iter()
                    .map(FindingCode::render)
                    .collect::<Vec<_>>()
                    .join(";")
            };
            out.push_str(&format!(
                "{} | {} | {}\n",
                r.patient_id,
                r.image_refs.join(","),
                codes
            ));
        }
        out
    }

    /// Checks that every referenced term is the vocabulary's own definition.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for r in &self.records {
            for term in r.findings.iter().flat_map(FindingCode::terms) {
                if self.vocabulary.lookup(&term.name) != Some(term) {
                    return Err(CorpusError::ForeignTerm {
                        patient_id: r.patient_id.clone(),
                        term: term.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn finding_count(&self) -> usize {
        self.records.iter().map(|r| r.findings.len()).sum()
    }

    pub fn patient_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Vocabulary {
        path: PathBuf,
        source: VocabularyError,
    },
    #[error("{}: {source}", path.display())]
    Corpus { path: PathBuf, source: CorpusError },
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary, LoadError> {
    let path = path.as_ref();
    Vocabulary::parse(&read(path)?).map_err(|source| LoadError::Vocabulary {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Corpus, LoadError> {
    let path = path.as_ref();
    Corpus::parse(&read(path)?, vocab.clone()).map_err(|source| LoadError::Corpus {
        path: path.to_path_buf(),
        source,
    })
}
