//! Line-delimited dataset manifests.
//!
//! A dataset directory holds `manifest.jsonl` and an `images/` subtree. The
//! first manifest line is a header carrying the class table, the row count and
//! a content hash over every row; each following line describes one image by
//! relative path, class index and the hash of its pixels. Synthetic rows add
//! generation provenance.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Image, LabeledImageDataset, LabeledItem, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FORMAT: &str = "datadream-manifest";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Labeled,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub kind: DatasetKind,
    #[serde(default)]
    pub split: Option<Split>,
    pub class_names: Vec<String>,
    pub rows: usize,
    /// Images per class for synthetic sets.
    #[serde(default)]
    pub per_class: Option<usize>,
    /// Set when a synthetic run stopped before producing every image.
    #[serde(default)]
    pub partial: bool,
    pub content_hash: String,
}

impl ManifestHeader {
    pub fn labeled(ds: &LabeledImageDataset, content_hash: String) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: DatasetKind::Labeled,
            split: Some(ds.split),
            class_names: ds.class_names().to_vec(),
            rows: ds.len(),
            per_class: None,
            partial: false,
            content_hash,
        }
    }
}

/// Where a synthetic image came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_hash: String,
    pub bank_hash: String,
    pub regime: String,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    pub method: String,
}

impl Provenance {
    pub fn is_complete(&self) -> bool {
        !(self.generator_hash.is_empty()
            || self.bank_hash.is_empty()
            || self.regime.is_empty()
            || self.method.is_empty()
            || self.steps == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub class: usize,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub(crate) fn labeled_rows(ds: &LabeledImageDataset) -> Vec<ManifestRow> {
    ds.items()
        .iter()
        .map(|it| ManifestRow {
            path: it.path.clone(),
            class: it.label,
            sha256: it.image.content_hash(),
            provenance: None,
        })
        .collect()
}

/// Hash over the header (minus its own hash field) and every row in order.
pub fn content_hash(header: &ManifestHeader, rows: &[ManifestRow]) -> String {
    let mut h = Sha256::new();
    let mut bare = header.clone();
    bare.content_hash.clear();
    bare.rows = rows.len();
    h.update(serde_json::to_vec(&bare).expect("header serializes"));
    for row in rows {
        h.update(b"\n");
        h.update(serde_json::to_vec(row).expect("row serializes"));
    }
    hex::encode(h.finalize())
}

/// Writes the manifest file, filling in the row count and content hash.
pub fn write_manifest(dir: &Path, mut header: ManifestHeader, rows: &[ManifestRow]) -> Result<ManifestHeader> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    header.rows = rows.len();
    header.content_hash = content_hash(&header, rows);
    let path = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))?;
    Ok(header)
}

/// Reads and hash-checks a manifest.
pub fn read_manifest(dir: &Path) -> Result<(ManifestHeader, Vec<ManifestRow>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header: ManifestHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| Error::integrity("header", "empty manifest"))?,
    )
    .map_err(|e| Error::integrity("header", e.to_string()))?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("not a dataset manifest: {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "manifest version {} unsupported (expected {VERSION})",
            header.version
        )));
    }
    let mut rows = Vec::with_capacity(header.rows);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(line).map_err(|e| Error::integrity(format!("row {i}"), e.to_string()))?;
        rows.push(row);
    }
    if rows.len() != header.rows {
        return Err(Error::integrity(
            "header",
            format!("header declares {} rows, found {}", header.rows, rows.len()),
        ));
    }
    let actual = content_hash(&header, &rows);
    if actual != header.content_hash {
        return Err(Error::integrity(
            "manifest",
            format!("content hash mismatch: header {} vs rows {actual}", header.content_hash),
        ));
    }
    Ok((header, rows))
}

pub(crate) fn write_image(dir: &Path, rel: &str, image: &Image) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, image.encode_png()?).map_err(|e| Error::io(&path, e))
}

/// Loads the image of `row`, checking it decodes and matches its hash.
pub(crate) fn read_image(dir: &Path, row: &ManifestRow) -> Result<Image> {
    let path = dir.join(&row.path);
    let bytes = fs::read(&path).map_err(|_| Error::integrity(&row.path, "image file missing"))?;
    let image = Image::decode(&bytes).map_err(|e| Error::integrity(&row.path, format!("decode failed: {e}")))?;
    if image.content_hash() != row.sha256 {
        return Err(Error::integrity(&row.path, "pixel hash does not match manifest"));
    }
    Ok(image)
}

pub fn save_labeled(ds: &LabeledImageDataset, dir: &Path) -> Result<ManifestHeader> {
    for item in ds.items() {
        write_image(dir, &item.path, &item.image)?;
    }
    write_manifest(dir, ManifestHeader::labeled(ds, String::new()), &labeled_rows(ds))
}

pub fn load_labeled(dir: &Path) -> Result<LabeledImageDataset> {
    let (header, rows) = read_manifest(dir)?;
    if header.kind != DatasetKind::Labeled {
        return Err(Error::Format("expected a labeled dataset manifest".into()));
    }
    let mut ds = LabeledImageDataset::new(header.split.unwrap_or(Split::Train), header.class_names);
    for row in &rows {
        if row.class >= ds.num_classes() {
            return Err(Error::integrity(&row.path, format!("class {} outside class table", row.class)));
        }
        let image = read_image(dir, row)?;
        ds.push_item(LabeledItem {
            image,
            label: row.class,
            path: row.path.clone(),
        });
    }
    Ok(ds)
}

/// Checks that every referenced image exists, decodes and matches its hash.
pub fn verify_dir(dir: &Path) -> Result<ManifestHeader> {
    let (header, rows) = read_manifest(dir)?;
    for row in &rows {
        read_image(dir, row)?;
        if header.kind == DatasetKind::Synthetic {
            match &row.provenance {
                Some(p) if p.is_complete() => {}
                _ => return Err(Error::integrity(&row.path, "incomplete provenance")),
            }
        }
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::super::procedural::{make_procedural, FineGrain, ProceduralSpec, Style};
    use super::*;

    fn small() -> LabeledImageDataset {
        make_procedural(&ProceduralSpec {
            classes: 2,
            per_class: 6,
            resolution: 8,
            seed: 11,
            fine_grain: FineGrain::High,
            style: Style::Varied,
        })
        .unwrap()
        .train
    }

    #[test]
    fn round_trip_preserves_hash_and_order() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let header = save_labeled(&ds, dir.path()).unwrap();
        assert_eq!(header.content_hash, ds.content_hash());
        let back = load_labeled(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), ds.content_hash());
        verify_dir(dir.path()).unwrap();
    }

    #[test]
    fn edited_row_is_integrity_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_labeled(&ds, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let edited = text.replacen("\"class\":0", "\"class\":1", 1);
        assert_ne!(text, edited);
        fs::write(&path, edited).unwrap();
        assert!(matches!(load_labeled(dir.path()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn swapped_image_is_integrity_error_naming_row() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_labeled(&ds, dir.path()).unwrap();
        let a = &ds.items()[0];
        let b = &ds.items()[1];
        fs::copy(dir.path().join(&b.path), dir.path().join(&a.path)).unwrap();
        match verify_dir(dir.path()) {
            Err(Error::Integrity { record, .. }) => assert_eq!(record, a.path),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = LabeledImageDataset::new(Split::Test, vec!["a".into(), "b".into()]);
        let dir = tempfile::tempdir().unwrap();
        let header = save_labeled(&ds, dir.path()).unwrap();
        assert_eq!(header.rows, 0);
        let back = load_labeled(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.content_hash(), ds.content_hash());
    }
}
