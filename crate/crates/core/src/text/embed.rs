use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bpe::BpeTokenizer;
use super::prompt::{build_prompts, PromptTemplate, OPEN_SET_PROMPT};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::linalg::normalize_rows;
use crate::runtime::{EmbeddingInput, Session};

const CACHE_SCHEMA_VERSION: u32 = 1;

/// L2-normalized text embeddings, one row per vocabulary entry (open-set last).
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingMatrix {
    pub names: Vec<String>,
    pub open_set: bool,
    pub template: PromptTemplate,
    pub rows: DMatrix<f64>,
}

impl TextEmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn open_set_index(&self) -> Option<usize> {
        self.open_set.then(|| self.len() - 1)
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CacheHeader {
    schema_version: u32,
    rows: usize,
    cols: usize,
    dtype: String,
    template: PromptTemplate,
    key: String,
    text_model: String,
    names: Vec<String>,
    open_set: bool,
}

/// Cache key covering everything the matrix depends on.
pub fn cache_key(vocab: &Vocabulary, template: PromptTemplate, text_model: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(vocab).expect("vocabulary serializes"));
    h.update(template.as_str());
    h.update(OPEN_SET_PROMPT);
    h.update(text_model);
    hex::encode(&h.finalize()[..8])
}

pub fn cache_file_name(vocab: &Vocabulary, template: PromptTemplate, text_model: &str) -> String {
    format!("{}.{}.emb", cache_key(vocab, template, text_model), template)
}

/// Embed every prompt of `vocab` with the text encoder, normalizing each row.
/// With `cache_dir` set, matrices are read from and written to
/// `<key>.<template>.emb` files there.
pub fn embed_vocabulary(
    session: &mut Session<'_>,
    tokenizer: &BpeTokenizer,
    vocab: &Vocabulary,
    template: PromptTemplate,
    cache_dir: Option<&Path>,
) -> Result<TextEmbeddingMatrix> {
    let text_model = session.handle().graph_id().to_owned();
    let cache_path = cache_dir.map(|d| d.join(cache_file_name(vocab, template, &text_model)));
    if let Some(path) = &cache_path {
        if path.exists() {
            match read_cache(path) {
                Ok((header, matrix)) if header.text_model == text_model && header.names == vocab.names() => {
                    log::debug!("text embedding cache hit: {}", path.display());
                    return Ok(matrix);
                }
                Ok(_) => log::warn!("stale embedding cache {}, recomputing", path.display()),
                Err(e) => log::warn!("unreadable embedding cache {}: {e}", path.display()),
            }
        }
    }

    let context_length = session.handle().sidecar().context_length.ok_or_else(|| {
        Error::InvalidArgument("text encoder sidecar has no context_length".into())
    })?;
    let prompts = build_prompts(vocab, template)?;
    let mut rows = Vec::with_capacity(prompts.len());
    for prompt in &prompts {
        let tokens = tokenizer.tokenize(prompt, context_length)?;
        rows.push(session.run_embedding(EmbeddingInput::Tokens(&tokens.ids))?);
    }
    let dim = rows.first().map_or(0, Vec::len);
    let mut matrix = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j] as f64);
    normalize_rows(&mut matrix);
    let result = TextEmbeddingMatrix {
        names: vocab.names(),
        open_set: vocab.includes_open_set(),
        template,
        rows: matrix,
    };

    if let Some(path) = &cache_path {
        let key = cache_key(vocab, template, &text_model);
        write_cache(path, &key, &text_model, &result)?;
    }
    Ok(result)
}

fn write_cache(path: &Path, key: &str, text_model: &str, m: &TextEmbeddingMatrix) -> Result<()> {
    let header = CacheHeader {
        schema_version: CACHE_SCHEMA_VERSION,
        rows: m.rows.nrows(),
        cols: m.rows.ncols(),
        dtype: "f64le".into(),
        template: m.template,
        key: key.to_owned(),
        text_model: text_model.to_owned(),
        names: m.names.clone(),
        open_set: m.open_set,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(4 + header.len() + m.rows.len() * 8);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for i in 0..m.rows.nrows() {
        for j in 0..m.rows.ncols() {
            bytes.extend_from_slice(&m.rows[(i, j)].to_le_bytes());
        }
    }

    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Concurrent writers produce identical bytes; the rename makes each write atomic.
    let tmp = tmp_path(path);
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp.{}.{:?}", std::process::id(), std::thread::current().id()));
    path.with_file_name(name)
}

fn read_cache(path: &Path) -> Result<(CacheHeader, TextEmbeddingMatrix)> {
    let bytes = crate::error::read_file(path)?;
    let bad = |msg: &str| Error::InvalidArgument(format!("{}: {msg}", path.display()));
    if bytes.len() < 4 {
        return Err(bad("truncated header"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let header_bytes = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CacheHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::json(path, e))?;
    if header.schema_version != CACHE_SCHEMA_VERSION || header.dtype != "f64le" {
        return Err(bad("unsupported cache version"));
    }
    let body = &bytes[4 + hlen..];
    if body.len() != header.rows * header.cols * 8 || header.names.len() != header.rows {
        return Err(bad("matrix size does not match header"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let rows = DMatrix::from_row_slice(header.rows, header.cols, &values);
    let matrix = TextEmbeddingMatrix {
        names: header.names.clone(),
        open_set: header.open_set,
        template: header.template,
        rows,
    };
    Ok((header, matrix))
}
