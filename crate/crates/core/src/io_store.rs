//! On-disk formats: the `UEMB` embedding store, its JSON Lines sidecar,
//! encoder parameter files, and the one-word summary prompt template.
//!
//! Store layout (all little-endian):
//!
//! ```text
//! offset 0   magic   b"UEMB"
//!        4   version u32 = 1
//!        8   count   u64
//!       16   dim     u32
//!       20   dtype   u8   0 = f32, 1 = f64
//!       21   count × dim values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Projection, RawItem, TrainingExample};
use crate::error::{Error, Result};
use crate::math::Embedding;
use crate::modality::ModalitySignature;

pub const MAGIC: [u8; 4] = *b"UEMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(Error::UnsupportedDtype(c)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense row-major matrix as stored in a `UEMB` file. Values are held as
/// f64; with [`Dtype::F32`] they are rounded to f32 when written.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, dtype: Dtype) -> Self {
        Self {
            dim,
            dtype,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, dtype: Dtype, rows: &[R]) -> Result<Self> {
        let mut s = Self::new(dim, dtype);
        for r in rows {
            s.push(r.as_ref())?;
        }
        Ok(s)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<usize> {
        if row.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "row of length {} in a store of dim {}",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        Ok(self.count() - 1)
    }

    pub fn count(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1))
    }

    pub fn embedding(&self, i: usize) -> Result<Embedding> {
        Embedding::new(self.row(i).to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * self.dtype.width());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.dtype.code());
        for &v in &self.data {
            match self.dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    /// Parse a store, failing on the first field that does not conform.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let mut take = |field: &'static str, n: usize| -> Result<&[u8]> {
            let rest = &bytes[at.min(bytes.len())..];
            if rest.len() < n {
                return Err(Error::TruncatedPayload {
                    field,
                    expected: n as u64,
                    found: rest.len() as u64,
                });
            }
            at += n;
            Ok(&rest[..n])
        };
        let magic: [u8; 4] = take("magic", 4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(take("version", 4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let count = u64::from_le_bytes(take("count", 8)?.try_into().expect("8 bytes"));
        let dim = u32::from_le_bytes(take("dim", 4)?.try_into().expect("4 bytes")) as u64;
        let dtype = Dtype::from_code(take("dtype", 1)?[0])?;
        let body = &bytes[HEADER_LEN..];
        let expected = count
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(dtype.width() as u64))
            .ok_or(Error::TruncatedPayload {
                field: "payload",
                expected: u64::MAX,
                found: body.len() as u64,
            })?;
        if (body.len() as u64) < expected {
            return Err(Error::TruncatedPayload {
                field: "payload",
                expected,
                found: body.len() as u64,
            });
        }
        if body.len() as u64 > expected {
            return Err(Error::TrailingBytes(body.len() as u64 - expected));
        }
        let data = match dtype {
            Dtype::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok(Self {
            dim: dim as usize,
            dtype,
            data,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_store(path: &Path, store: &EmbeddingStore) -> Result<()> {
    write_file(path, &store.to_bytes())
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::from_bytes(&read_file(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Candidate,
}

/// One line of the sidecar describing a store row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub id: String,
    pub row: u64,
    pub signature: ModalitySignature,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_id: Option<String>,
    #[serde(default)]
    pub hard_negative_ids: Vec<String>,
}

pub fn sidecar_to_string(records: &[SidecarRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse JSON Lines, checking every row index against `count`.
pub fn parse_sidecar(text: &str, count: u64) -> Result<Vec<SidecarRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line = i + 1;
            let r: SidecarRecord = serde_json::from_str(l).map_err(|e| Error::Sidecar {
                line,
                message: e.to_string(),
            })?;
            if r.row >= count {
                return Err(Error::SidecarRowOutOfRange {
                    line,
                    row: r.row,
                    count,
                });
            }
            Ok(r)
        })
        .collect()
}

pub fn write_sidecar(path: &Path, records: &[SidecarRecord]) -> Result<()> {
    write_file(path, sidecar_to_string(records)?.as_bytes())
}

pub fn read_sidecar(path: &Path, count: u64) -> Result<Vec<SidecarRecord>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Sidecar {
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    parse_sidecar(&text, count)
}

/// `<base>.uemb` and `<base>.jsonl`.
pub fn bundle_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("uemb"), base.with_extension("jsonl"))
}

pub fn write_bundle(base: &Path, store: &EmbeddingStore, records: &[SidecarRecord]) -> Result<()> {
    if let Some((line, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.row >= store.count() as u64)
    {
        return Err(Error::SidecarRowOutOfRange {
            line: line + 1,
            row: r.row,
            count: store.count() as u64,
        });
    }
    let (s, j) = bundle_paths(base);
    write_store(&s, store)?;
    write_sidecar(&j, records)
}

pub fn read_bundle(base: &Path) -> Result<(EmbeddingStore, Vec<SidecarRecord>)> {
    let (s, j) = bundle_paths(base);
    let store = read_store(&s)?;
    let records = read_sidecar(&j, store.count() as u64)?;
    Ok((store, records))
}

/// Flatten training examples into a store of raw features plus sidecar.
/// Query rows carry `positive_id` and `hard_negative_ids`; positives and
/// hard negatives are candidate rows named `<id>/pos` and `<id>/neg<k>`.
pub fn examples_to_bundle(
    examples: &[TrainingExample],
    dtype: Dtype,
) -> Result<(EmbeddingStore, Vec<SidecarRecord>)> {
    let dim = examples
        .first()
        .map(|e| e.query.features.len())
        .ok_or(Error::EmptyInput("training examples"))?;
    let mut store = EmbeddingStore::new(dim, dtype);
    let mut records = Vec::new();
    for ex in examples {
        let pos_id = format!("{}/pos", ex.id);
        let neg_ids: Vec<String> = (0..ex.hard_negatives.len())
            .map(|k| format!("{}/neg{k}", ex.id))
            .collect();
        records.push(SidecarRecord {
            id: ex.id.clone(),
            row: store.push(&ex.query.features)? as u64,
            signature: ex.query.signature,
            role: Role::Query,
            positive_id: Some(pos_id.clone()),
            hard_negative_ids: neg_ids.clone(),
        });
        let candidates =
            std::iter::once((&ex.positive, pos_id)).chain(ex.hard_negatives.iter().zip(neg_ids));
        for (item, id) in candidates {
            records.push(SidecarRecord {
                id,
                row: store.push(&item.features)? as u64,
                signature: item.signature,
                role: Role::Candidate,
                positive_id: None,
                hard_negative_ids: Vec::new(),
            });
        }
    }
    Ok((store, records))
}

/// Inverse of [`examples_to_bundle`]: one example per query record.
pub fn bundle_to_examples(
    store: &EmbeddingStore,
    records: &[SidecarRecord],
) -> Result<Vec<TrainingExample>> {
    let by_id: BTreeMap<&str, &SidecarRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let item = |id: &str, line_of: &str| -> Result<RawItem> {
        let r = by_id.get(id).ok_or_else(|| Error::Sidecar {
            line: 0,
            message: format!("{line_of} refers to unknown id {id}"),
        })?;
        Ok(RawItem {
            features: store.row(r.row as usize).to_vec(),
            signature: r.signature,
        })
    };
    records
        .iter()
        .filter(|r| r.role == Role::Query)
        .map(|q| {
            let pos = q.positive_id.as_deref().ok_or_else(|| Error::Sidecar {
                line: 0,
                message: format!("query {} has no positive_id", q.id),
            })?;
            Ok(TrainingExample {
                id: q.id.clone(),
                query: item(&q.id, &q.id)?,
                positive: item(pos, &q.id)?,
                hard_negatives: q
                    .hard_negative_ids
                    .iter()
                    .map(|h| item(h, &q.id))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// JSON header stored beside `params.uemb`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub f: usize,
    pub d: usize,
    /// One store row per signature, in this order: `W` row-major then `b`.
    pub signatures: Vec<ModalitySignature>,
    pub seed: u64,
}

/// Writes `<base>.json` (header) and `<base>.uemb` (f64 rows).
pub fn write_params(base: &Path, params: &EncoderParams, seed: u64) -> Result<()> {
    let header = ParamsHeader {
        f: params.f,
        d: params.d,
        signatures: params.signatures(),
        seed,
    };
    let mut store = EmbeddingStore::new(params.d * params.f + params.d, Dtype::F64);
    for p in params.projections.values() {
        let row: Vec<f64> = p.weight.iter().chain(&p.bias).copied().collect();
        store.push(&row)?;
    }
    write_file(
        &base.with_extension("json"),
        serde_json::to_string_pretty(&header)?.as_bytes(),
    )?;
    write_store(&base.with_extension("uemb"), &store)
}

pub fn read_params(base: &Path) -> Result<(EncoderParams, ParamsHeader)> {
    let header: ParamsHeader = serde_json::from_slice(&read_file(&base.with_extension("json"))?)?;
    let store = read_store(&base.with_extension("uemb"))?;
    let width = header.d * header.f + header.d;
    if store.dim != width || store.count() != header.signatures.len() {
        return Err(Error::ShapeMismatch(format!(
            "params store is {}x{}, header implies {}x{width}",
            store.count(),
            store.dim,
            header.signatures.len()
        )));
    }
    let projections = header
        .signatures
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let row = store.row(i);
            let (w, b) = row.split_at(header.d * header.f);
            (
                s,
                Projection {
                    weight: w.to_vec(),
                    bias: b.to_vec(),
                },
            )
        })
        .collect();
    let params = EncoderParams::new(header.f, header.d, projections)?;
    Ok((params, header))
}

/// The one-word summary prompt: a placeholder line per vision input
/// (`<image>`, `<video>`), the text line if any, then
/// `Summarize above <modalities> in one word:`.
///
/// `<modalities>` names the inputs present in the order image, video, text
/// as "image", "video", "sentence", joined with " and ".
pub fn build_eol_prompt(has_image: bool, has_video: bool, text: Option<&str>) -> Result<String> {
    if !has_image && !has_video && text.is_none() {
        return Err(Error::EmptyInput(
            "prompt needs at least one of image, video, text",
        ));
    }
    let mut lines = Vec::new();
    let mut words = Vec::new();
    if has_image {
        lines.push("<image>");
        words.push("image");
    }
    if has_video {
        lines.push("<video>");
        words.push("video");
    }
    if let Some(t) = text {
        lines.push(t);
        words.push("sentence");
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out.push_str(&format!(
        "Summarize above {} in one word:",
        words.join(" and ")
    ));
    Ok(out)
}

/// Placeholder used for the text line when no text content is given.
pub const TEXT_PLACEHOLDER: &str = "<text>";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_is_header_only() {
        let b = EmbeddingStore::new(3, Dtype::F32).to_bytes();
        assert_eq!(b.len(), 21);
        assert_eq!(&b[..4], b"UEMB");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..16], &[0; 8]);
        assert_eq!(&b[16..20], &[3, 0, 0, 0]);
        assert_eq!(b[20], 0);
        let back = EmbeddingStore::from_bytes(&b).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim, 3);
    }

    #[test]
    fn single_row_payload() {
        let s = EmbeddingStore::from_rows(3, Dtype::F32, &[[1.0, 0.0, 0.0]]).unwrap();
        let b = s.to_bytes();
        assert_eq!(&b[21..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
    }

    #[test]
    fn malformed_headers_name_the_field() {
        let good = EmbeddingStore::from_rows(2, Dtype::F32, &[[1.0, 2.0]])
            .unwrap()
            .to_bytes();

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(
            EmbeddingStore::from_bytes(&b),
            Err(Error::BadMagic(_))
        ));

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(
            EmbeddingStore::from_bytes(&b),
            Err(Error::VersionMismatch(2))
        ));

        let mut b = good.clone();
        b[20] = 9;
        assert!(matches!(
            EmbeddingStore::from_bytes(&b),
            Err(Error::UnsupportedDtype(9))
        ));

        for (cut, field) in [
            (2, "magic"),
            (6, "version"),
            (12, "count"),
            (18, "dim"),
            (20, "dtype"),
            (25, "payload"),
        ] {
            match EmbeddingStore::from_bytes(&good[..cut]) {
                Err(Error::TruncatedPayload { field: f, .. }) => assert_eq!(f, field),
                other => panic!("cut {cut}: {other:?}"),
            }
        }

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(
            EmbeddingStore::from_bytes(&b),
            Err(Error::TrailingBytes(1))
        ));
    }

    #[test]
    fn sidecar_rows_are_checked() {
        let text = "{\"id\":\"a\",\"row\":0,\"signature\":\"text+video\",\"role\":\"query\",\"positive_id\":\"b\",\"hard_negative_ids\":[]}\n\
                    {\"id\":\"b\",\"row\":5,\"signature\":\"video\",\"role\":\"candidate\",\"hard_negative_ids\":[]}\n";
        assert!(matches!(
            parse_sidecar(text, 2),
            Err(Error::SidecarRowOutOfRange {
                line: 2,
                row: 5,
                count: 2
            })
        ));
        let ok = parse_sidecar(text, 6).unwrap();
        assert_eq!(sidecar_to_string(&ok).unwrap(), text);
        assert!(matches!(
            parse_sidecar("{\"id\":1}\n", 1),
            Err(Error::Sidecar { line: 1, .. })
        ));
    }

    #[test]
    fn prompts() {
        assert_eq!(
            build_eol_prompt(false, true, Some(TEXT_PLACEHOLDER)).unwrap(),
            "<video>\n<text>\nSummarize above video and sentence in one word:"
        );
        assert_eq!(
            build_eol_prompt(false, false, Some("<text>")).unwrap(),
            "<text>\nSummarize above sentence in one word:"
        );
        assert_eq!(
            build_eol_prompt(true, false, None).unwrap(),
            "<image>\nSummarize above image in one word:"
        );
        assert_eq!(
            build_eol_prompt(true, true, Some("a cat")).unwrap(),
            "<image>\n<video>\na cat\nSummarize above image and video and sentence in one word:"
        );
        assert!(matches!(
            build_eol_prompt(false, false, None),
            Err(Error::EmptyInput(_))
        ));
    }
}
