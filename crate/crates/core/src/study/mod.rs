//! Blinded reader study: presentation sets, the annotation log and the
//! analysis report.

mod analysis;
mod design;
mod store;

pub use analysis::{analyze, CellSummary, LevelTest, Measure, StudyReport};
pub use design::{
    build_presentation_set, new_item_id, new_session_token, PresentationItem, Rendition,
    SubjectRenditions, ITEM_ID_ALPHABET, ITEM_ID_LEN, STUDY_VIEW_LEVELS,
};
pub use store::{Annotation, Progress, Scores, StudyStore, SubjectTruth, STORE_SCHEMA_VERSION};
