use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use crate::embedding::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Document>,
    pub dev: Option<Vec<Document>>,
    pub test: Vec<Document>,
    /// Sorted label names; index = class id.
    pub labels: Vec<String>,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?} (train, dev, test)"))),
        }
    }
}

impl Dataset {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn split(&self, split: Split) -> Result<&[Document]> {
        match split {
            Split::Train => Ok(&self.train),
            Split::Test => Ok(&self.test),
            Split::Dev => self
                .dev
                .as_deref()
                .ok_or_else(|| Error::Dataset("dataset has no dev split".into())),
        }
    }

    /// Checks label coverage and id uniqueness across splits.
    pub fn validate(&self) -> Result<()> {
        let known: HashSet<&str> = self.labels.iter().map(String::as_str).collect();
        let mut ids = HashSet::new();
        let splits = [Some(&self.train), self.dev.as_ref(), Some(&self.test)];
        for docs in splits.into_iter().flatten() {
            for d in docs {
                if !known.contains(d.label.as_str()) {
                    return Err(Error::Dataset(format!(
                        "document {} has label {:?} which does not occur in the training split",
                        d.id, d.label
                    )));
                }
                if !ids.insert(d.id.as_str()) {
                    return Err(Error::Dataset(format!("duplicate document id {}", d.id)));
                }
            }
        }
        Ok(())
    }
}

/// Parses `label<TAB>text` lines. Ids are `<split>-<line number>`.
pub fn parse_tsv(content: &str, source_name: &str, split: Split, max_len: usize) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (n, line) in content.lines().enumerate() {
        let lineno = n + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: lineno,
            message,
        };
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `label<TAB>text`, found no tab".into()))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(parse_err("empty label".into()));
        }
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(parse_err("document has no tokens".into()));
        }
        tokens.truncate(max_len);
        docs.push(Document {
            id: format!("{}-{lineno}", split.name()),
            tokens,
            label: label.to_string(),
        });
    }
    Ok(docs)
}

pub fn load_split(path: &Path, split: Split, max_len: usize) -> Result<Vec<Document>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&content, &path.display().to_string(), split, max_len)
}

/// Loads `train.tsv`, `test.tsv` and, when present, `dev.tsv` from `dir`.
/// The label set comes from the training split.
pub fn load_dataset(dir: &Path, max_len: usize) -> Result<Dataset> {
    let train = load_split(&dir.join("train.tsv"), Split::Train, max_len)?;
    let test = load_split(&dir.join("test.tsv"), Split::Test, max_len)?;
    let dev_path = dir.join("dev.tsv");
    let dev = if dev_path.exists() {
        Some(load_split(&dev_path, Split::Dev, max_len)?)
    } else {
        None
    };
    from_splits(train, dev, test, format!("tsv:{}", dir.display()))
}

pub fn from_splits(train: Vec<Document>, dev: Option<Vec<Document>>, test: Vec<Document>, provenance: String) -> Result<Dataset> {
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let labels: Vec<String> = train
        .iter()
        .map(|d| d.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ds = Dataset {
        train,
        dev,
        test,
        labels,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes documents back out as `label<TAB>space-joined tokens`.
pub fn to_tsv(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&d.label);
        out.push('\t');
        out.push_str(&d.tokens.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_fixture() {
        let train = parse_tsv("pos\tGreat Movie!\nneg\tterrible , boring\n", "train.tsv", Split::Train, 400).unwrap();
        let ds = from_splits(train, None, vec![], "mem".into()).unwrap();
        assert_eq!(ds.labels, vec!["neg", "pos"]);
        assert_eq!(ds.train[0].tokens, vec!["great", "movie", "!"]);
        assert_eq!(ds.train[0].id, "train-1");
    }

    #[test]
    fn missing_tab_names_line() {
        let err = parse_tsv("pos\tok\nno tab here\n", "train.tsv", Split::Train, 400).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn test_only_label_is_rejected() {
        let train = parse_tsv("a\tx\n", "t", Split::Train, 400).unwrap();
        let test = parse_tsv("b\ty\n", "t", Split::Test, 400).unwrap();
        assert!(matches!(from_splits(train, None, test, String::new()), Err(Error::Dataset(_))));
    }

    #[test]
    fn truncation_and_determinism() {
        let text = "a\tone two three four five\n";
        let docs = parse_tsv(text, "t", Split::Train, 3).unwrap();
        assert_eq!(docs[0].tokens.len(), 3);
        assert_eq!(parse_tsv(text, "t", Split::Train, 3).unwrap(), docs);
    }

    #[test]
    fn empty_document_is_parse_error() {
        assert!(matches!(parse_tsv("a\t   \n", "t", Split::Train, 3), Err(Error::Parse { .. })));
    }
}
