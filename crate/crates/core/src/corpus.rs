//! Image/text corpus and deterministic noun extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ImageId, LandmarkId, ReconstructionId};

/// One corpus record. Field order is the on-disk order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDoc {
    pub image_id: ImageId,
    pub landmark_id: LandmarkId,
    pub caption: String,
    /// Landmark root first, leaf category last.
    pub category_path: Vec<String>,
    pub registered: bool,
    pub reconstruction_id: Option<ReconstructionId>,
}

impl ImageDoc {
    pub fn leaf_category(&self) -> &str {
        self.category_path.last().map(String::as_str).unwrap_or("")
    }

    fn validate(&self, locator: &str) -> Result<()> {
        let schema = |message: &str| Error::Schema {
            locator: locator.to_owned(),
            message: message.to_owned(),
        };
        if self.category_path.is_empty() {
            return Err(schema("category_path is empty"));
        }
        if self.category_path[0] != self.landmark_id.0 {
            return Err(schema("category_path root does not match landmark_id"));
        }
        if self.reconstruction_id.is_some() && !self.registered {
            return Err(schema("reconstruction_id set on an unregistered image"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    docs: Vec<ImageDoc>,
    by_id: BTreeMap<ImageId, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<ImageDoc>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            let locator = format!("#{} ({})", i + 1, d.image_id);
            d.validate(&locator)?;
            if by_id.insert(d.image_id.clone(), i).is_some() {
                return Err(Error::Schema {
                    locator,
                    message: "duplicate image_id".into(),
                });
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn docs(&self) -> &[ImageDoc] {
        &self.docs
    }

    pub fn get(&self, id: &ImageId) -> Option<&ImageDoc> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn landmarks(&self) -> BTreeSet<&LandmarkId> {
        self.docs.iter().map(|d| &d.landmark_id).collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut docs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: ImageDoc = serde_json::from_str(line).map_err(|e| Error::Schema {
                locator: format!("line {}", i + 1),
                message: e.to_string(),
            })?;
            docs.push(doc);
        }
        Self::new(docs)
    }

    pub fn to_jsonl(&self) -> String {
        write_jsonl_string(&self.docs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_jsonl())
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_jsonl(&text)
}

/// Serialize records one JSON object per line.
pub fn write_jsonl_string<T: Serialize>(records: &[T]) -> String {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("in-memory serialization");
        buf.push(b'\n');
    }
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Write a file, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Lowercase, split on anything that is not alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Something that finds nouns in a token stream.
pub trait NounTagger: Send + Sync {
    /// Nouns among `tokens` with their positions, in token order. The
    /// returned noun is the canonical form (which may differ from the token,
    /// e.g. after plural folding).
    fn tag(&self, tokens: &[String]) -> Vec<(String, usize)>;
}

/// Word-list tagger: a noun list plus an entity blocklist that wins on overlap.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounLexicon {
    pub nouns: BTreeSet<String>,
    pub entity_blocklist: BTreeSet<String>,
    /// Match `xs` to noun `x` when `xs` itself is not a listed noun.
    #[serde(default)]
    pub fold_plural: bool,
}

impl NounLexicon {
    pub fn new<I, J, S, T>(nouns: I, blocklist: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        Self {
            nouns: nouns.into_iter().map(|s| s.as_ref().to_lowercase()).collect(),
            entity_blocklist: blocklist
                .into_iter()
                .map(|s| s.as_ref().to_lowercase())
                .collect(),
            fold_plural: false,
        }
    }

    pub fn with_plural_folding(mut self, fold: bool) -> Self {
        self.fold_plural = fold;
        self
    }

    fn canonical(&self, token: &str) -> Option<String> {
        if self.entity_blocklist.contains(token) {
            return None;
        }
        if self.nouns.contains(token) {
            return Some(token.to_owned());
        }
        if self.fold_plural {
            if let Some(stem) = token.strip_suffix('s') {
                if self.nouns.contains(stem) && !self.entity_blocklist.contains(stem) {
                    return Some(stem.to_owned());
                }
            }
        }
        None
    }

    pub fn load(nouns_path: &Path, blocklist_path: &Path) -> Result<Self> {
        Ok(Self::new(read_word_list(nouns_path)?, read_word_list(blocklist_path)?))
    }

    pub fn save(&self, nouns_path: &Path, blocklist_path: &Path) -> Result<()> {
        let join = |s: &BTreeSet<String>| s.iter().map(|w| format!("{w}\n")).collect::<String>();
        write_text(nouns_path, &join(&self.nouns))?;
        write_text(blocklist_path, &join(&self.entity_blocklist))
    }
}

impl NounTagger for NounLexicon {
    fn tag(&self, tokens: &[String]) -> Vec<(String, usize)> {
        tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| self.canonical(t).map(|n| (n, i)))
            .collect()
    }
}

/// One word per line; blank lines and `#` comments ignored.
pub fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_word_list(&text))
}

pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// Nouns of `text` with their token positions; duplicates kept.
pub fn extract_nouns(text: &str, tagger: &dyn NounTagger) -> Vec<(String, usize)> {
    tagger.tag(&tokenize(text))
}
