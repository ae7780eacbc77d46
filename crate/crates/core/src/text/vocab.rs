use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_file, Error, Result};

/// Name of the extra class that absorbs regions matching no real category.
pub const OPEN_SET_NAME: &str = "something else";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub super_category: Option<String>,
}

impl Category {
    pub fn new(name: impl Into<String>, super_category: Option<&str>) -> Self {
        Self {
            name: name.into(),
            super_category: super_category.map(str::to_owned),
        }
    }
}

/// Ordered category list. When `open_set` is set the open-set class is the
/// implicit final entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    categories: Vec<Category>,
    #[serde(default = "default_true")]
    open_set: bool,
}

fn default_true() -> bool {
    true
}

impl Vocabulary {
    pub fn new(categories: Vec<Category>, open_set: bool) -> Result<Self> {
        let vocab = Self {
            categories,
            open_set,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.name.trim().is_empty() {
                return Err(Error::InvalidArgument("category names must be non-empty".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate category `{}`", c.name)));
            }
            if self.open_set && c.name == OPEN_SET_NAME {
                return Err(Error::InvalidArgument(format!(
                    "`{OPEN_SET_NAME}` is reserved for the open-set entry"
                )));
            }
        }
        if self.categories.is_empty() {
            return Err(Error::InvalidArgument("vocabulary has no categories".into()));
        }
        Ok(())
    }

    /// Load a vocabulary from JSON (`{"categories": [...], "open_set": bool}`)
    /// or from plain text with one `name[,super_category]` per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let vocab: Vocabulary = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
            let categories = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|line| match line.split_once(',') {
                    Some((name, sup)) => Category::new(name.trim(), Some(sup.trim())),
                    None => Category::new(line, None),
                })
                .collect();
            Vocabulary {
                categories,
                open_set: true,
            }
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn includes_open_set(&self) -> bool {
        self.open_set
    }

    /// Number of entries including the open-set class.
    pub fn len(&self) -> usize {
        self.categories.len() + usize::from(self.open_set)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry names in matrix-row order, open-set last.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.categories.iter().map(|c| c.name.clone()).collect();
        if self.open_set {
            names.push(OPEN_SET_NAME.to_owned());
        }
        names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.categories.iter().any(|c| c.name == name)
    }

    /// Stable content hash (hex) of the vocabulary.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("vocabulary serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_empty_names() {
        let dup = vec![Category::new("dog", None), Category::new("dog", None)];
        assert!(Vocabulary::new(dup, true).is_err());
        assert!(Vocabulary::new(vec![Category::new(" ", None)], true).is_err());
        assert!(Vocabulary::new(vec![Category::new(OPEN_SET_NAME, None)], true).is_err());
        assert!(Vocabulary::new(vec![Category::new(OPEN_SET_NAME, None)], false).is_ok());
    }

    #[test]
    fn open_set_entry_is_last() {
        let v = Vocabulary::new(vec![Category::new("cat", None), Category::new("dog", None)], true)
            .unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.names(), vec!["cat", "dog", OPEN_SET_NAME]);
    }

    #[test]
    fn text_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        std::fs::write(&path, "# comment\ndog, animal\ncar\n\n").unwrap();
        let v = Vocabulary::from_file(&path).unwrap();
        assert_eq!(v.categories()[0], Category::new("dog", Some("animal")));
        assert_eq!(v.categories()[1], Category::new("car", None));
        assert!(v.includes_open_set());
    }

    #[test]
    fn hash_depends_on_content() {
        let a = Vocabulary::new(vec![Category::new("cat", None)], true).unwrap();
        let b = Vocabulary::new(vec![Category::new("cat", None)], false).unwrap();
        assert_eq!(a.content_hash(), a.clone().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
