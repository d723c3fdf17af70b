use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparse_ct_core::io::{read_mask, read_raw_image, write_raw_image};
use sparse_ct_core::metrics::{mean_ci, mse, ssim, SsimConfig};
use sparse_ct_core::nn::{
    load_checkpoint, make_residual_pairs, postprocess, save_checkpoint, train, ResidualPair,
};
use sparse_ct_core::phantom::{
    generate_phantom, plan_cohort, read_manifest, write_manifest, write_slice, ManifestEntry, Split,
};
use sparse_ct_core::study::{
    analyze, build_presentation_set, new_session_token, Rendition, StudyStore, SubjectRenditions,
    SubjectTruth, STUDY_VIEW_LEVELS,
};
use sparse_ct_core::tomo::{RampFilter, WindowSpec};
use sparse_ct_core::{BinaryMask, Error as CoreError};
use sparse_ct_service::{write_tokens, TokenFile};

use crate::config::PipelineConfig;

/// File layout under the work directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Layout {
            root: cfg.work_dir.clone(),
        }
    }

    pub fn phantoms(&self) -> PathBuf {
        self.root.join("phantoms")
    }

    pub fn phantom_manifest(&self) -> PathBuf {
        self.phantoms().join("manifest.json")
    }

    pub fn sim(&self) -> PathBuf {
        self.root.join("sim")
    }

    pub fn sim_manifest(&self) -> PathBuf {
        self.sim().join("manifest.json")
    }

    pub fn processed(&self, subject: &str, views: usize) -> PathBuf {
        self.sim()
            .join(subject)
            .join(format!("processed_{views}.raw"))
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn checkpoint(&self, views: usize) -> PathBuf {
        self.models().join(format!("unet_{views}.ckpt"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                CoreError::Conflict(format!(
                    "{} is locked by another run ({e}); remove {} if no run is active",
                    dir.display(),
                    path.display()
                ))
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Simulated files of one subject, relative to the simulation directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEntry {
    pub subject_id: String,
    pub split: Split,
    pub diseased: bool,
    pub full: PathBuf,
    pub levels: Vec<SimLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLevel {
    pub views: usize,
    pub sparse: PathBuf,
    pub residual: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub full_views: usize,
    pub filter: RampFilter,
    pub entries: Vec<SimEntry>,
}

impl SimEntry {
    pub fn level(&self, views: usize) -> Option<&SimLevel> {
        self.levels.iter().find(|l| l.views == views)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(|e| CoreError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn phantom(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let dir = layout.phantoms();
    let _lock = DirLock::acquire(&dir)?;
    let members = plan_cohort(&cfg.phantom.cohort())?;
    let mut manifest = Vec::with_capacity(members.len());
    for m in &members {
        let slice = generate_phantom(&m.spec)?;
        let file = PathBuf::from(format!("{}.raw", m.subject_id));
        let mask = write_slice(&dir.join(&file), &slice)?;
        manifest.push(ManifestEntry {
            subject_id: m.subject_id.clone(),
            slice_path: file,
            mask_path: mask.map(|p| PathBuf::from(p.file_name().expect("mask file name"))),
            split: m.split,
            diseased: slice.is_diseased(),
        });
    }
    write_manifest(&layout.phantom_manifest(), &manifest)?;
    println!("wrote {} phantoms to {}", manifest.len(), dir.display());
    Ok(())
}

pub fn simulate(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let phantoms = read_manifest(&layout.phantom_manifest())?;
    let dir = layout.sim();
    let _lock = DirLock::acquire(&dir)?;
    let levels = cfg.simulate.sparse_levels();
    let mut entries = Vec::with_capacity(phantoms.len());
    for p in &phantoms {
        let slice = read_raw_image(&layout.phantoms().join(&p.slice_path))?;
        let (full, pairs) = make_residual_pairs(
            &slice,
            cfg.simulate.full_views,
            &levels,
            cfg.simulate.filter,
            WindowSpec::LUNG,
        )?;
        let sub = PathBuf::from(&p.subject_id);
        let full_path = sub.join("full.raw");
        write_raw_image(&dir.join(&full_path), &full)?;
        let mut sim_levels = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let sparse = sub.join(format!("sparse_{}.raw", pair.views));
            let residual = sub.join(format!("residual_{}.raw", pair.views));
            write_raw_image(&dir.join(&sparse), &pair.input)?;
            write_raw_image(&dir.join(&residual), &pair.label)?;
            sim_levels.push(SimLevel {
                views: pair.views,
                sparse,
                residual,
            });
        }
        entries.push(SimEntry {
            subject_id: p.subject_id.clone(),
            split: p.split,
            diseased: p.diseased,
            full: full_path,
            levels: sim_levels,
        });
        eprintln!("simulated {}", p.subject_id);
    }
    let manifest = SimManifest {
        full_views: cfg.simulate.full_views,
        filter: cfg.simulate.filter,
        entries,
    };
    write_json(&layout.sim_manifest(), &manifest)?;
    println!(
        "simulated {} subjects at levels {:?} (full {})",
        manifest.entries.len(),
        levels,
        cfg.simulate.full_views
    );
    Ok(())
}

fn sim_manifest(layout: &Layout) -> Result<SimManifest> {
    read_json(&layout.sim_manifest())
}

fn level(e: &SimEntry, views: usize) -> Result<&SimLevel> {
    e.level(views).ok_or_else(|| {
        CoreError::NotFound(format!("{} has no {views}-view simulation", e.subject_id)).into()
    })
}

fn pairs_for(
    layout: &Layout,
    m: &SimManifest,
    split: Split,
    views: usize,
) -> Result<Vec<ResidualPair>> {
    m.entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let full = read_raw_image(&layout.sim().join(&e.full))?;
            let sparse = read_raw_image(&layout.sim().join(&level(e, views)?.sparse))?;
            Ok(ResidualPair::new(sparse, &full, views)?)
        })
        .collect()
}

pub fn train_models(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let manifest = sim_manifest(&layout)?;
    let _lock = DirLock::acquire(&layout.models())?;
    for &views in &cfg.model_levels {
        let train_set = pairs_for(&layout, &manifest, Split::Train, views)?;
        let val_set = pairs_for(&layout, &manifest, Split::Validation, views)?;
        eprintln!(
            "training {views}-view network on {} pairs ({} validation)",
            train_set.len(),
            val_set.len()
        );
        let (params, history) = train(&train_set, &val_set, &cfg.train, &cfg.model)?;
        let best = history.best().expect("training ran at least one epoch");
        save_checkpoint(
            &layout.checkpoint(views),
            &params,
            &cfg.model,
            best.epoch,
            best.val_loss,
            Some(views),
        )?;
        write_text(
            &layout.models().join(format!("history_{views}.csv")),
            &history.to_csv(),
        )?;
        println!(
            "views {views}: best epoch {} of {}, validation loss {:.3e}{}",
            best.epoch,
            history.epochs.len(),
            best.val_loss,
            if history.stopped_early {
                " (stopped early)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

pub fn infer(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let manifest = sim_manifest(&layout)?;
    let _lock = DirLock::acquire(&layout.sim())?;
    let mut count = 0;
    for &views in &cfg.model_levels {
        let (header, params) = load_checkpoint(&layout.checkpoint(views))?;
        for e in manifest
            .entries
            .iter()
            .filter(|e| cfg.evaluate.splits.contains(&e.split))
        {
            let sparse = read_raw_image(&layout.sim().join(&level(e, views)?.sparse))?;
            let out = postprocess(&sparse, &params, &header.config)?;
            write_raw_image(&layout.processed(&e.subject_id, views), &out)?;
            count += 1;
        }
    }
    println!("post-processed {count} images");
    Ok(())
}

/// One image compared against its full-view reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subject_id: String,
    pub split: Split,
    pub views: usize,
    pub rendition: Rendition,
    pub mse: f64,
    pub ssim: f64,
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let manifest = sim_manifest(&layout)?;
    let _lock = DirLock::acquire(&layout.reports())?;
    let ssim_cfg = SsimConfig::default();
    let mut rows = Vec::new();
    for e in manifest
        .entries
        .iter()
        .filter(|e| cfg.evaluate.splits.contains(&e.split))
    {
        let full = read_raw_image(&layout.sim().join(&e.full))?;
        for l in &e.levels {
            let sparse = read_raw_image(&layout.sim().join(&l.sparse))?;
            let processed_path = layout.processed(&e.subject_id, l.views);
            let mut images = vec![(Rendition::Sparse, sparse)];
            if processed_path.exists() {
                images.push((Rendition::Processed, read_raw_image(&processed_path)?));
            }
            for (rendition, img) in images {
                rows.push(EvalRow {
                    subject_id: e.subject_id.clone(),
                    split: e.split,
                    views: l.views,
                    rendition,
                    mse: mse(&img, &full)?,
                    ssim: ssim(&img, &full, &ssim_cfg)?,
                });
            }
        }
    }
    if rows.is_empty() {
        bail!(CoreError::NotFound(
            "no images in the evaluated splits".into()
        ));
    }
    let mut csv = String::from("subject_id,split,views,rendition,mse,ssim\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{:e},{}\n",
            r.subject_id,
            split_name(r.split),
            r.views,
            r.rendition.as_str(),
            r.mse,
            r.ssim
        ));
    }
    write_text(&layout.reports().join("evaluation.csv"), &csv)?;
    write_json(&layout.reports().join("evaluation.json"), &rows)?;
    print!("{}", table4(&rows));
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

/// Mean MSE and SSIM with 95% intervals per view level and rendition.
fn table4(rows: &[EvalRow]) -> String {
    let mut groups: BTreeMap<(usize, Rendition), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.views, r.rendition)).or_default();
        g.0.push(r.mse);
        g.1.push(r.ssim);
    }
    let mut out = String::from(
        "views,rendition,n,mse_mean,mse_ci_low,mse_ci_high,ssim_mean,ssim_ci_low,ssim_ci_high\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for ((views, rendition), (m, s)) in groups {
        let m = mean_ci(&m, 0.95).expect("group is non-empty");
        let s = mean_ci(&s, 0.95).expect("group is non-empty");
        out.push_str(&format!(
            "{views},{},{},{},{},{},{},{},{}\n",
            rendition.as_str(),
            m.n,
            m.mean,
            opt(m.ci_low),
            opt(m.ci_high),
            s.mean,
            opt(s.ci_low),
            opt(s.ci_high)
        ));
    }
    out
}

pub fn study_init(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let manifest = sim_manifest(&layout)?;
    let phantoms = read_manifest(&layout.phantom_manifest())?;
    let service = cfg.service_resolved();
    let dir = service
        .store
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let _lock = DirLock::acquire(&dir)?;

    let sim_root = fs::canonicalize(layout.sim())
        .with_context(|| format!("resolving {}", layout.sim().display()))?;
    let mut subjects = Vec::new();
    let mut truths = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == Split::Test) {
        let mut images = BTreeMap::new();
        for views in STUDY_VIEW_LEVELS {
            let sparse = sim_root.join(&level(e, views)?.sparse);
            let processed = sim_root.join(format!("{}/processed_{views}.raw", e.subject_id));
            for path in [&sparse, &processed] {
                if !path.exists() {
                    bail!(CoreError::NotFound(format!(
                        "{} is missing",
                        path.display()
                    )));
                }
            }
            images.insert((views, Rendition::Sparse), sparse);
            images.insert((views, Rendition::Processed), processed);
        }
        subjects.push(SubjectRenditions {
            subject_id: e.subject_id.clone(),
            images,
        });
        truths.push(SubjectTruth {
            subject_id: e.subject_id.clone(),
            nodule_mask: truth_mask(&layout, &phantoms, e, cfg.phantom.size)?,
        });
    }
    if subjects.is_empty() {
        bail!(CoreError::NotFound("no test subjects for the study".into()));
    }
    let mut readers = Vec::with_capacity(cfg.study.readers);
    for r in 0..cfg.study.readers {
        let seed = service.presentation_seed.wrapping_add(r as u64);
        readers.push((
            format!("reader-{}", r + 1),
            build_presentation_set(&subjects, seed)?,
        ));
    }
    StudyStore::create(&service.store, &truths, &readers)?;

    let mut rng = rand::rng();
    let tokens: TokenFile = readers
        .iter()
        .map(|(id, _)| (id.clone(), new_session_token(&mut rng)))
        .collect();
    write_tokens(&service.tokens, &tokens)?;
    restrict_permissions(&service.tokens)?;
    println!(
        "study with {} subjects, {} readers x {} items; tokens in {}",
        subjects.len(),
        readers.len(),
        readers[0].1.len(),
        service.tokens.display()
    );
    Ok(())
}

#[cfg(unix)]
fn restrict_permissions(path: &Path) -> Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(0o600))
        .with_context(|| format!("restricting {}", path.display()))
}

#[cfg(not(unix))]
fn restrict_permissions(_path: &Path) -> Result<()> {
    Ok(())
}

fn truth_mask(
    layout: &Layout,
    phantoms: &[ManifestEntry],
    e: &SimEntry,
    size: usize,
) -> Result<BinaryMask> {
    let p = phantoms
        .iter()
        .find(|p| p.subject_id == e.subject_id)
        .ok_or_else(|| CoreError::NotFound(format!("phantom {} not in manifest", e.subject_id)))?;
    match &p.mask_path {
        Some(m) => Ok(read_mask(&layout.phantoms().join(m))?),
        None => Ok(BinaryMask::empty(size, size)),
    }
}

pub fn study_serve(cfg: &PipelineConfig) -> Result<()> {
    let service = cfg.service_resolved();
    let dir = service
        .store
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let _lock = DirLock::acquire(&dir)?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(sparse_ct_service::serve(&service))?;
    Ok(())
}

pub fn study_analyze(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let store = StudyStore::load(&cfg.service_resolved().store)?;
    let report = analyze(&store, cfg.study.partial)?;
    let dir = layout.reports();
    let _lock = DirLock::acquire(&dir)?;
    write_text(&dir.join("study.json"), &(report.to_json()? + "\n"))?;
    write_text(&dir.join("study_means.csv"), &report.means_csv())?;
    write_text(
        &dir.join("study_diagnostics.csv"),
        &report.diagnostics_csv(),
    )?;
    write_text(&dir.join("study_tests.csv"), &report.tests_csv())?;
    println!(
        "{} of {} annotations from {} readers; reports in {}",
        report.annotations,
        report.expected_annotations,
        report.readers,
        dir.display()
    );
    Ok(())
}

pub fn report(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let dir = layout.reports();
    let eval_path = dir.join("evaluation.json");
    let store_path = cfg.service_resolved().store;
    if !eval_path.exists() && !store_path.exists() {
        bail!(CoreError::NotFound(
            "nothing to report: run evaluate or set up a study first".into()
        ));
    }
    let _lock = DirLock::acquire(&dir)?;
    if eval_path.exists() {
        let rows: Vec<EvalRow> = read_json(&eval_path)?;
        let t4 = table4(&rows);
        write_text(&dir.join("table4.csv"), &t4)?;
        print!("{t4}");
    }
    let store = match store_path.exists() {
        true => Some(StudyStore::load(&store_path)?),
        false => None,
    };
    if store.as_ref().is_some_and(|s| s.annotation_count() == 0) {
        eprintln!("study has no annotations yet; skipping table5.csv");
    }
    if let Some(store) = store.filter(|s| s.annotation_count() > 0) {
        let study = analyze(&store, cfg.study.partial)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut t5 = String::from(
            "views,rendition,n,tp,fp,tn,fn,sensitivity,specificity,f1,npv,dice_n,dice_mean\n",
        );
        for c in &study.cells {
            let k = &c.confusion;
            t5.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.views,
                c.rendition.as_str(),
                c.n,
                k.tp,
                k.fp,
                k.tn,
                k.fn_,
                opt(c.stats.sensitivity),
                opt(c.stats.specificity),
                opt(c.stats.f1),
                opt(c.stats.npv),
                c.dice.as_ref().map(|d| d.n).unwrap_or(0),
                opt(c.dice.as_ref().map(|d| d.mean)),
            ));
        }
        write_text(&dir.join("table5.csv"), &t5)?;
        print!("{t5}");
    }
    Ok(())
}
