use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Prompt rendered for the open-set entry under every template.
pub const OPEN_SET_PROMPT: &str = "a photo of something else";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTemplate {
    /// `a photo of a {super category} such as {category}`
    Phrase1,
    /// `this is a {category} of a {super category}`
    Phrase2,
    /// `a photo of {category}`
    Phrase3,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 3] = [Self::Phrase1, Self::Phrase2, Self::Phrase3];

    pub fn pattern(self) -> &'static str {
        match self {
            Self::Phrase1 => "a photo of a {super category} such as {category}",
            Self::Phrase2 => "this is a {category} of a {super category}",
            Self::Phrase3 => "a photo of {category}",
        }
    }

    pub fn needs_super_category(self) -> bool {
        !matches!(self, Self::Phrase3)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Phrase1 => "phrase1",
            Self::Phrase2 => "phrase2",
            Self::Phrase3 => "phrase3",
        }
    }

    pub fn render(self, category: &str, super_category: Option<&str>) -> Result<String> {
        let pattern = self.pattern().replace("{category}", category);
        if self.needs_super_category() {
            let sup = super_category.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "template {} needs a super category for `{category}`",
                    self.as_str()
                ))
            })?;
            Ok(pattern.replace("{super category}", sup))
        } else {
            Ok(pattern)
        }
    }
}

impl std::fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "phrase1" | "1" => Ok(Self::Phrase1),
            "phrase2" | "2" => Ok(Self::Phrase2),
            "phrase3" | "3" => Ok(Self::Phrase3),
            other => Err(Error::InvalidArgument(format!("unknown template `{other}`"))),
        }
    }
}

/// One prompt per vocabulary entry, in vocabulary order.
pub fn build_prompts(vocab: &Vocabulary, template: PromptTemplate) -> Result<Vec<String>> {
    let mut prompts = vocab
        .categories()
        .iter()
        .map(|c| template.render(&c.name, c.super_category.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    if vocab.includes_open_set() {
        prompts.push(OPEN_SET_PROMPT.to_owned());
    }
    Ok(prompts)
}
