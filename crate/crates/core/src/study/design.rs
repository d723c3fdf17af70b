use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// View levels shown to readers. The 512-view level is not part of the study.
pub const STUDY_VIEW_LEVELS: [usize; 5] = [16, 32, 64, 128, 256];

/// Letters without vowels or digits, so an identifier can never spell a view
/// count or a rendition name.
pub const ITEM_ID_ALPHABET: &[u8] = b"bcdfghjklmnpqrstvwxz";

/// 30 symbols over a 20-letter alphabet is just under 130 bits.
pub const ITEM_ID_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rendition {
    Sparse,
    Processed,
}

impl Rendition {
    pub const ALL: [Rendition; 2] = [Rendition::Sparse, Rendition::Processed];

    pub fn as_str(self) -> &'static str {
        match self {
            Rendition::Sparse => "sparse",
            Rendition::Processed => "processed",
        }
    }
}

/// One image shown to one reader.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentationItem {
    pub item_id: String,
    pub subject_id: String,
    pub views: usize,
    pub rendition: Rendition,
    pub image: PathBuf,
}

/// Rendered images available for one subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectRenditions {
    pub subject_id: String,
    pub images: BTreeMap<(usize, Rendition), PathBuf>,
}

pub fn new_item_id(rng: &mut impl Rng) -> String {
    (0..ITEM_ID_LEN)
        .map(|_| ITEM_ID_ALPHABET[rng.random_range(0..ITEM_ID_ALPHABET.len())] as char)
        .collect()
}

/// Reader session token: 32 random bytes as lowercase hex.
pub fn new_session_token(rng: &mut impl Rng) -> String {
    let bytes: [u8; 32] = rng.random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every subject at every study level in both renditions, in an order
/// shuffled by `seed`. Item identifiers come from the same generator.
pub fn build_presentation_set(
    subjects: &[SubjectRenditions],
    seed: u64,
) -> Result<Vec<PresentationItem>> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no subjects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(subjects.len() * STUDY_VIEW_LEVELS.len() * 2);
    for s in subjects {
        for views in STUDY_VIEW_LEVELS {
            for rendition in Rendition::ALL {
                let image = s.images.get(&(views, rendition)).ok_or_else(|| {
                    Error::NotFound(format!(
                        "subject {} has no {} image at {views} views",
                        s.subject_id,
                        rendition.as_str()
                    ))
                })?;
                items.push(PresentationItem {
                    item_id: new_item_id(&mut rng),
                    subject_id: s.subject_id.clone(),
                    views,
                    rendition,
                    image: image.clone(),
                });
            }
        }
    }
    items.shuffle(&mut rng);
    Ok(items)
}
