use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    render_prompt, EmbeddingCache, PromptError, PromptKind, PromptTemplate, Result,
    SyntheticEncoder,
};
use crate::tensor::Tensor;

/// Where text embeddings come from.
#[derive(Debug)]
pub enum TextSource {
    Cache(EmbeddingCache),
    Synthetic(SyntheticEncoder),
}

impl TextSource {
    pub fn dim(&self) -> usize {
        match self {
            Self::Cache(c) => c.dim,
            Self::Synthetic(e) => e.config().dim,
        }
    }

    /// Whether the Simple prompt of `class` can be embedded.
    pub fn has_class(&self, class: &str) -> bool {
        match self {
            Self::Cache(c) => c.get(class).is_some(),
            Self::Synthetic(_) => true,
        }
    }

    /// Embedding of a rendered template. A cache looks a Spatial prompt up
    /// by its full text and falls back to the class entry.
    pub fn embed(&self, t: &PromptTemplate) -> Result<Vec<f64>> {
        match self {
            Self::Synthetic(e) => {
                let b = match t.kind {
                    PromptKind::Simple => None,
                    PromptKind::Spatial => Some(t.bbox.as_ref().ok_or(PromptError::MissingBox)?),
                };
                Ok(e.encode(&t.class_token, b))
            }
            Self::Cache(c) => {
                let hit = match t.kind {
                    PromptKind::Simple => None,
                    PromptKind::Spatial => c.get(&render_prompt(t)?),
                };
                hit.or_else(|| c.get(&t.class_token))
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| PromptError::MissingClass(t.class_token.clone()))
            }
        }
    }
}

/// Simple-prompt embeddings of the ID classes, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct IdBank {
    pub classes: Vec<String>,
    pub embeddings: Tensor,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    classes: Vec<String>,
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl IdBank {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BankFile {
            classes: self.classes.clone(),
            dim: self.dim(),
            rows: (0..self.len())
                .map(|i| self.embeddings.row(i).to_vec())
                .collect(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &file)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: BankFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_classes(&file.classes)?;
        if file.rows.len() != file.classes.len() || file.rows.iter().any(|r| r.len() != file.dim) {
            return Err(PromptError::InvalidCache(
                "bank rows do not match classes and dim".into(),
            ));
        }
        let embeddings =
            Tensor::from_rows(&file.rows).map_err(|e| PromptError::InvalidCache(e.to_string()))?;
        Ok(Self {
            classes: file.classes,
            embeddings,
        })
    }
}

fn check_classes(classes: &[String]) -> Result<()> {
    if classes.is_empty() {
        return Err(PromptError::EmptyClassList);
    }
    let mut seen = HashSet::new();
    for c in classes {
        if !seen.insert(c.as_str()) {
            return Err(PromptError::DuplicateClass(c.clone()));
        }
    }
    Ok(())
}

/// Embeds the Simple prompt of every class, in list order.
pub fn build_id_bank(classes: &[String], source: &TextSource) -> Result<IdBank> {
    check_classes(classes)?;
    let rows = classes
        .iter()
        .map(|c| source.embed(&PromptTemplate::simple(c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let embeddings =
        Tensor::from_rows(&rows).map_err(|e| PromptError::InvalidCache(e.to_string()))?;
    Ok(IdBank {
        classes: classes.to_vec(),
        embeddings,
    })
}

/// One class per line; surrounding whitespace and blank lines are ignored.
pub fn read_class_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    check_classes(&classes)?;
    Ok(classes)
}

pub fn write_class_list(path: impl AsRef<Path>, classes: &[String]) -> Result<()> {
    check_classes(classes)?;
    let mut text = classes.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
