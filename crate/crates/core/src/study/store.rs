//! Append-only JSON-lines log.
//!
//! Every line is one record tagged with `type` and `schema`. A trailing
//! line without its newline is what an interrupted append leaves behind;
//! it is ignored on replay and cut off when the store is opened for writing.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::design::{PresentationItem, Rendition};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, RleMask};

pub const STORE_SCHEMA_VERSION: u32 = 1;

/// Ground truth for one subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectTruth {
    pub subject_id: String,
    /// Empty for healthy subjects.
    pub nodule_mask: BinaryMask,
}

impl SubjectTruth {
    pub fn is_diseased(&self) -> bool {
        !self.nodule_mask.is_empty()
    }
}

/// Ordinal ratings. Quality and confidence run 1 to 6, artifacts 1 to 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scores {
    pub quality: u8,
    pub confidence: u8,
    pub artifacts: u8,
}

impl Scores {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: u8, max: u8| {
            if (1..=max).contains(&v) {
                Ok(())
            } else {
                Err(Error::OutOfRange(format!(
                    "{name} must be in 1..={max}, got {v}"
                )))
            }
        };
        check("quality", self.quality, 6)?;
        check("confidence", self.confidence, 6)?;
        check("artifacts", self.artifacts, 4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub reader_id: String,
    pub item_id: String,
    pub scores: Scores,
    /// Empty when the reader saw no nodule.
    pub mask: BinaryMask,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

impl Annotation {
    pub fn new(reader_id: &str, item_id: &str, scores: Scores, mask: BinaryMask) -> Self {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Annotation {
            reader_id: reader_id.into(),
            item_id: item_id.into(),
            scores,
            mask,
            timestamp_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Record {
    Subject {
        schema: u32,
        subject_id: String,
        nodule_mask: RleMask,
    },
    Presentation {
        schema: u32,
        reader_id: String,
        position: usize,
        #[serde(flatten)]
        item: PresentationItem,
    },
    Annotation {
        schema: u32,
        reader_id: String,
        item_id: String,
        #[serde(flatten)]
        scores: Scores,
        mask: RleMask,
        timestamp_ms: u64,
    },
}

impl Record {
    fn schema(&self) -> u32 {
        match self {
            Record::Subject { schema, .. }
            | Record::Presentation { schema, .. }
            | Record::Annotation { schema, .. } => *schema,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotated: usize,
    pub total: usize,
}

/// In-memory index over the log plus the append handle.
#[derive(Debug)]
pub struct StudyStore {
    path: PathBuf,
    file: Option<File>,
    subjects: BTreeMap<String, SubjectTruth>,
    /// Presentation order per reader.
    readers: BTreeMap<String, Vec<PresentationItem>>,
    items: HashMap<(String, String), usize>,
    annotations: BTreeMap<(String, String), Annotation>,
}

impl StudyStore {
    /// Writes a new log holding the subjects and every reader's presentation
    /// list. Fails if `path` exists.
    pub fn create(
        path: &Path,
        subjects: &[SubjectTruth],
        presentations: &[(String, Vec<PresentationItem>)],
    ) -> Result<Self> {
        let mut store = StudyStore::empty(path);
        let mut lines = Vec::new();
        for s in subjects {
            let rec = Record::Subject {
                schema: STORE_SCHEMA_VERSION,
                subject_id: s.subject_id.clone(),
                nodule_mask: s.nodule_mask.to_rle(),
            };
            store.apply(rec.clone())?;
            lines.push(rec);
        }
        for (reader, items) in presentations {
            if items.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "reader {reader} has no items"
                )));
            }
            for (position, item) in items.iter().enumerate() {
                let rec = Record::Presentation {
                    schema: STORE_SCHEMA_VERSION,
                    reader_id: reader.clone(),
                    position,
                    item: item.clone(),
                };
                store.apply(rec.clone())?;
                lines.push(rec);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        for rec in &lines {
            serde_json::to_writer(&mut buf, rec)?;
            buf.push(b'\n');
        }
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        file.sync_all().map_err(|e| Error::io(path, e))?;
        store.file = Some(file);
        Ok(store)
    }

    /// Replays the log and opens it for appending. A torn final line is
    /// truncated away.
    pub fn open(path: &Path) -> Result<Self> {
        let (store, valid_len) = Self::replay(path)?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let on_disk = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if on_disk != valid_len {
            file.set_len(valid_len).map_err(|e| Error::io(path, e))?;
            file.sync_all().map_err(|e| Error::io(path, e))?;
        }
        Ok(StudyStore {
            file: Some(file),
            ..store
        })
    }

    /// Read-only replay; the file is left untouched.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::replay(path)?.0)
    }

    fn empty(path: &Path) -> Self {
        StudyStore {
            path: path.to_path_buf(),
            file: None,
            subjects: BTreeMap::new(),
            readers: BTreeMap::new(),
            items: HashMap::new(),
            annotations: BTreeMap::new(),
        }
    }

    fn replay(path: &Path) -> Result<(Self, u64)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut store = StudyStore::empty(path);
        let mut offset = 0usize;
        let mut line_no = 0;
        while offset < bytes.len() {
            let Some(len) = bytes[offset..].iter().position(|&b| b == b'\n') else {
                break;
            };
            line_no += 1;
            let line = &bytes[offset..offset + len];
            let rec: Record = serde_json::from_slice(line)
                .map_err(|e| Error::format(path, format!("line {line_no}: {e}")))?;
            if rec.schema() != STORE_SCHEMA_VERSION {
                return Err(Error::format(
                    path,
                    format!("line {line_no}: unsupported schema {}", rec.schema()),
                ));
            }
            store
                .apply(rec)
                .map_err(|e| Error::format(path, format!("line {line_no}: {e}")))?;
            offset += len + 1;
        }
        Ok((store, offset as u64))
    }

    fn apply(&mut self, rec: Record) -> Result<()> {
        match rec {
            Record::Subject {
                subject_id,
                nodule_mask,
                ..
            } => {
                if self.subjects.contains_key(&subject_id) {
                    return Err(Error::Conflict(format!(
                        "subject {subject_id} listed twice"
                    )));
                }
                let nodule_mask = nodule_mask.decode()?;
                self.subjects.insert(
                    subject_id.clone(),
                    SubjectTruth {
                        subject_id,
                        nodule_mask,
                    },
                );
            }
            Record::Presentation {
                reader_id,
                position,
                item,
                ..
            } => {
                if !self.subjects.contains_key(&item.subject_id) {
                    return Err(Error::NotFound(format!("subject {}", item.subject_id)));
                }
                let list = self.readers.entry(reader_id.clone()).or_default();
                if position != list.len() {
                    return Err(Error::InvalidArgument(format!(
                        "presentation position {position} out of sequence for reader {reader_id}"
                    )));
                }
                let key = (reader_id, item.item_id.clone());
                if self.items.contains_key(&key) {
                    return Err(Error::Conflict(format!(
                        "item {} listed twice",
                        item.item_id
                    )));
                }
                self.items.insert(key, position);
                list.push(item);
            }
            Record::Annotation {
                reader_id,
                item_id,
                scores,
                mask,
                timestamp_ms,
                ..
            } => {
                let ann = Annotation {
                    reader_id,
                    item_id,
                    scores,
                    mask: mask.decode()?,
                    timestamp_ms,
                };
                self.check_annotation(&ann)?;
                self.annotations
                    .insert((ann.reader_id.clone(), ann.item_id.clone()), ann);
            }
        }
        Ok(())
    }

    fn check_annotation(&self, ann: &Annotation) -> Result<()> {
        ann.scores.validate()?;
        let item = self.item(&ann.reader_id, &ann.item_id).ok_or_else(|| {
            Error::NotFound(format!(
                "reader {} has no item {}",
                ann.reader_id, ann.item_id
            ))
        })?;
        let truth = &self.subjects[&item.subject_id].nodule_mask;
        if !ann.mask.same_shape(truth) {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, image is {}x{}",
                ann.mask.width(),
                ann.mask.height(),
                truth.width(),
                truth.height()
            )));
        }
        if self
            .annotations
            .contains_key(&(ann.reader_id.clone(), ann.item_id.clone()))
        {
            return Err(Error::Conflict(format!(
                "reader {} already annotated item {}",
                ann.reader_id, ann.item_id
            )));
        }
        Ok(())
    }

    /// Validates, appends and syncs the record, then updates the index.
    pub fn record_annotation(&mut self, ann: Annotation) -> Result<()> {
        self.check_annotation(&ann)?;
        let file = self
            .file
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("store was loaded read-only".into()))?;
        let rec = Record::Annotation {
            schema: STORE_SCHEMA_VERSION,
            reader_id: ann.reader_id.clone(),
            item_id: ann.item_id.clone(),
            scores: ann.scores,
            mask: ann.mask.to_rle(),
            timestamp_ms: ann.timestamp_ms,
        };
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        file.write_all(&line)
            .map_err(|e| Error::io(&self.path, e))?;
        file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        self.annotations
            .insert((ann.reader_id.clone(), ann.item_id.clone()), ann);
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn subjects(&self) -> impl Iterator<Item = &SubjectTruth> {
        self.subjects.values()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectTruth> {
        self.subjects.get(id)
    }

    pub fn reader_ids(&self) -> impl Iterator<Item = &str> {
        self.readers.keys().map(String::as_str)
    }

    /// The reader's items in presentation order.
    pub fn presentation(&self, reader_id: &str) -> Option<&[PresentationItem]> {
        self.readers.get(reader_id).map(Vec::as_slice)
    }

    pub fn item(&self, reader_id: &str, item_id: &str) -> Option<&PresentationItem> {
        let pos = self
            .items
            .get(&(reader_id.to_string(), item_id.to_string()))?;
        Some(&self.readers[reader_id][*pos])
    }

    pub fn annotation(&self, reader_id: &str, item_id: &str) -> Option<&Annotation> {
        self.annotations
            .get(&(reader_id.to_string(), item_id.to_string()))
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.values()
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.len()
    }

    /// First item in the reader's order without an annotation.
    pub fn next_item(&self, reader_id: &str) -> Option<&PresentationItem> {
        self.readers
            .get(reader_id)?
            .iter()
            .find(|i| self.annotation(reader_id, &i.item_id).is_none())
    }

    pub fn progress(&self, reader_id: &str) -> Option<Progress> {
        let items = self.readers.get(reader_id)?;
        let annotated = items
            .iter()
            .filter(|i| self.annotation(reader_id, &i.item_id).is_some())
            .count();
        Some(Progress {
            annotated,
            total: items.len(),
        })
    }

    /// Annotations keyed by reader, subject, views and rendition.
    pub fn index(&self) -> BTreeMap<(String, String, usize, Rendition), &Annotation> {
        self.annotations
            .values()
            .map(|a| {
                let item = self
                    .item(&a.reader_id, &a.item_id)
                    .expect("annotations reference known items");
                (
                    (
                        a.reader_id.clone(),
                        item.subject_id.clone(),
                        item.views,
                        item.rendition,
                    ),
                    a,
                )
            })
            .collect()
    }
}
