use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::design::{Rendition, STUDY_VIEW_LEVELS};
use super::store::StudyStore;
use crate::error::{Error, Result};
use crate::metrics::{
    classify, clustered_wilcoxon, diagnostic_stats, dice, mean_ci, ConfusionCounts,
    DiagnosticStats, MeanCi, PairedSample,
};

const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Quality,
    Confidence,
    Artifacts,
    Dice,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::Quality,
        Measure::Confidence,
        Measure::Artifacts,
        Measure::Dice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Quality => "quality",
            Measure::Confidence => "confidence",
            Measure::Artifacts => "artifacts",
            Measure::Dice => "dice",
        }
    }
}

/// Pooled results for one view level and rendition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub views: usize,
    pub rendition: Rendition,
    /// Annotations pooled over readers and subjects.
    pub n: usize,
    pub quality: Option<MeanCi>,
    pub confidence: Option<MeanCi>,
    pub artifacts: Option<MeanCi>,
    /// Diseased subjects only; a missed nodule counts as zero.
    pub dice: Option<MeanCi>,
    pub confusion: ConfusionCounts,
    pub stats: DiagnosticStats,
}

impl CellSummary {
    pub fn measure(&self, m: Measure) -> Option<&MeanCi> {
        match m {
            Measure::Quality => self.quality.as_ref(),
            Measure::Confidence => self.confidence.as_ref(),
            Measure::Artifacts => self.artifacts.as_ref(),
            Measure::Dice => self.dice.as_ref(),
        }
    }
}

/// Processed against sparse at one view level, clustered by subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTest {
    pub views: usize,
    pub measure: Measure,
    pub n_pairs: usize,
    /// Mean of processed minus sparse over the pairs.
    pub mean_difference: Option<f64>,
    pub statistic: Option<f64>,
    /// `None` when the test is undefined (all differences zero or fewer
    /// than two clusters).
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub partial: bool,
    pub readers: usize,
    pub subjects: usize,
    pub annotations: usize,
    pub expected_annotations: usize,
    pub cells: Vec<CellSummary>,
    pub tests: Vec<LevelTest>,
}

impl StudyReport {
    pub fn cell(&self, views: usize, rendition: Rendition) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.views == views && c.rendition == rendition)
    }

    pub fn test(&self, views: usize, measure: Measure) -> Option<&LevelTest> {
        self.tests
            .iter()
            .find(|t| t.views == views && t.measure == measure)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `views,rendition,measure,n,mean,ci_low,ci_high`
    pub fn means_csv(&self) -> String {
        let mut out = String::from("views,rendition,measure,n,mean,ci_low,ci_high\n");
        for c in &self.cells {
            for m in Measure::ALL {
                if let Some(s) = c.measure(m) {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        c.views,
                        c.rendition.as_str(),
                        m.as_str(),
                        s.n,
                        s.mean,
                        opt(s.ci_low),
                        opt(s.ci_high)
                    ));
                }
            }
        }
        out
    }

    /// `views,rendition,tp,fp,tn,fn,sensitivity,specificity,f1,npv`
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("views,rendition,tp,fp,tn,fn,sensitivity,specificity,f1,npv\n");
        for c in &self.cells {
            let k = &c.confusion;
            let s = &c.stats;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                c.views,
                c.rendition.as_str(),
                k.tp,
                k.fp,
                k.tn,
                k.fn_,
                opt(s.sensitivity),
                opt(s.specificity),
                opt(s.f1),
                opt(s.npv)
            ));
        }
        out
    }

    /// `views,measure,n_pairs,mean_difference,statistic,p_value`
    pub fn tests_csv(&self) -> String {
        let mut out = String::from("views,measure,n_pairs,mean_difference,statistic,p_value\n");
        for t in &self.tests {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.views,
                t.measure.as_str(),
                t.n_pairs,
                opt(t.mean_difference),
                opt(t.statistic),
                opt(t.p_value)
            ));
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Observation {
    reader: String,
    subject: String,
    values: BTreeMap<Measure, f64>,
}

/// Summarises the store. Without `partial`, every presented item must
/// carry an annotation.
pub fn analyze(store: &StudyStore, partial: bool) -> Result<StudyReport> {
    let expected: usize = store
        .reader_ids()
        .map(|r| store.presentation(r).map_or(0, |p| p.len()))
        .sum();
    let annotations = store.annotation_count();
    if annotations == 0 {
        return Err(Error::InvalidArgument(
            "the store holds no annotations".into(),
        ));
    }
    if !partial && annotations < expected {
        return Err(Error::InvalidArgument(format!(
            "{annotations} of {expected} items annotated; pass the partial flag to analyze anyway"
        )));
    }

    let mut cells_obs: BTreeMap<(usize, Rendition), Vec<Observation>> = BTreeMap::new();
    let mut confusion: BTreeMap<(usize, Rendition), ConfusionCounts> = BTreeMap::new();
    for ((reader, subject, views, rendition), ann) in store.index() {
        let truth = store
            .subject(&subject)
            .expect("presentations reference known subjects");
        let mut values = BTreeMap::new();
        values.insert(Measure::Quality, ann.scores.quality as f64);
        values.insert(Measure::Confidence, ann.scores.confidence as f64);
        values.insert(Measure::Artifacts, ann.scores.artifacts as f64);
        if truth.is_diseased() {
            values.insert(Measure::Dice, dice(&ann.mask, &truth.nodule_mask)?);
        }
        confusion
            .entry((views, rendition))
            .or_default()
            .add(classify(&ann.mask, &truth.nodule_mask)?);
        cells_obs
            .entry((views, rendition))
            .or_default()
            .push(Observation {
                reader,
                subject,
                values,
            });
    }

    let mut cells = Vec::new();
    for views in STUDY_VIEW_LEVELS {
        for rendition in Rendition::ALL {
            let obs = cells_obs
                .get(&(views, rendition))
                .map_or(&[][..], Vec::as_slice);
            let summary = |m: Measure| {
                let v: Vec<f64> = obs
                    .iter()
                    .filter_map(|o| o.values.get(&m).copied())
                    .collect();
                mean_ci(&v, CI_LEVEL)
            };
            let counts = confusion
                .get(&(views, rendition))
                .copied()
                .unwrap_or_default();
            cells.push(CellSummary {
                views,
                rendition,
                n: obs.len(),
                quality: summary(Measure::Quality),
                confidence: summary(Measure::Confidence),
                artifacts: summary(Measure::Artifacts),
                dice: summary(Measure::Dice),
                confusion: counts,
                stats: diagnostic_stats(&counts),
            });
        }
    }

    let mut tests = Vec::new();
    for views in STUDY_VIEW_LEVELS {
        let sparse: BTreeMap<(&str, &str), &Observation> = cells_obs
            .get(&(views, Rendition::Sparse))
            .into_iter()
            .flatten()
            .map(|o| ((o.reader.as_str(), o.subject.as_str()), o))
            .collect();
        for measure in Measure::ALL {
            let mut pairs = Vec::new();
            for p in cells_obs
                .get(&(views, Rendition::Processed))
                .into_iter()
                .flatten()
            {
                let Some(s) = sparse.get(&(p.reader.as_str(), p.subject.as_str())) else {
                    continue;
                };
                if let (Some(&a), Some(&b)) = (p.values.get(&measure), s.values.get(&measure)) {
                    pairs.push(PairedSample::new(p.subject.clone(), a, b));
                }
            }
            let mean_difference = (!pairs.is_empty()).then(|| {
                pairs.iter().map(PairedSample::difference).sum::<f64>() / pairs.len() as f64
            });
            let result = clustered_wilcoxon(&pairs).ok();
            tests.push(LevelTest {
                views,
                measure,
                n_pairs: pairs.len(),
                mean_difference,
                statistic: result.map(|r| r.statistic),
                p_value: result.map(|r| r.p_value),
            });
        }
    }

    Ok(StudyReport {
        partial: annotations < expected,
        readers: store.reader_ids().count(),
        subjects: store.subjects().count(),
        annotations,
        expected_annotations: expected,
        cells,
        tests,
    })
}
