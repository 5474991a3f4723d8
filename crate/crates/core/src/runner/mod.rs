//! Config-driven, resumable experiment pipeline: data → train → segment →
//! evaluate, each stage persisted under one run directory and keyed by a hash
//! of the settings it depends on.
//!
//! Run directory layout:
//!
//! ```text
//! config.json  manifest.json
//! data/healthy/<site>/   data/lesion/<site>/
//! train/state/  train/rounds.csv  train/loss_log.csv
//! segment/<site>/<slice>.pbm  segment/components.csv
//! evaluate/metrics.csv  per_slice.csv  ssim.csv  buckets.csv
//!          metrics.json  report.md  embeddings.csv
//! ```

mod config;
mod report;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{DataSpec, ExperimentConfig, MetricOptions, SiteSpec, StageHashes};
pub use report::{
    compare_reports, Comparison, ComparisonCell, ComparisonRow, DatasetMetrics, MetricsReport, SliceScores,
    SIGNIFICANCE,
};

use crate::error::{ensure, Error, Result};
use crate::federation::{participants, FederationState, Strategy};
use crate::grid::BinaryMask;
use crate::metrics::{
    dice, export_embeddings, shape_appearance_similarity, ssim, stratified_dice, write_embeddings_csv, EmbeddingRecord,
    MeanStd,
};
use crate::model::{Autoencoder, ModelParams};
use crate::phantom::{generate_phantom_client, inject_lesions, load_dataset, read_mask, save_dataset, write_mask};
use crate::phantom::{ClientDataset, ScanSlice};
use crate::seeds::{derive_seed, derive_seed_str};
use crate::segment::{segment_slice, SegmentStatus};

/// Precision of every pipeline stage.
pub type Real = f32;

pub const STAGES: [&str; 4] = ["data", "train", "segment", "evaluate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    pub complete: bool,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub data_hash: String,
    pub code_version: String,
    pub label: String,
    pub stages: BTreeMap<String, StageRecord>,
    /// Run directory the manifest was loaded from.
    #[serde(skip)]
    pub root: PathBuf,
}

impl RunManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Self = serde_json::from_slice(&bytes)?;
        m.root = root.to_path_buf();
        Ok(m)
    }

    fn save(&self) -> Result<()> {
        let path = self.root.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    /// Marked complete and every listed artifact still exists.
    pub fn is_complete(&self, stage: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|s| s.complete && s.artifacts.iter().all(|a| self.root.join(a).exists()))
    }

    pub fn artifact_paths(&self) -> Vec<PathBuf> {
        self.stages
            .values()
            .flat_map(|s| s.artifacts.iter().map(|a| self.root.join(a)))
            .collect()
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn reconstruct(params: &ModelParams<Real>, slice: &ScanSlice<Real>) -> Result<Vec<Real>> {
    Ok(Autoencoder::for_params(params)?
        .reconstruct(params, &slice.to_tensor())?
        .data)
}

/// Drives the stages of one run directory.
#[derive(Debug)]
pub struct Runner {
    config: ExperimentConfig,
    hashes: StageHashes,
    manifest: RunManifest,
    resume_partial: bool,
}

impl Runner {
    /// Opens (or creates) a run directory. An existing manifest written for a
    /// different configuration is refused.
    pub fn open(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let hashes = config.stage_hashes()?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let manifest = if root.join("manifest.json").exists() {
            let m = RunManifest::load(root)?;
            ensure!(
                m.config_hash == hashes.config,
                State,
                "{} holds a run of a different configuration; refusing to resume",
                root.display()
            );
            m
        } else {
            let m = RunManifest {
                config_hash: hashes.config.clone(),
                data_hash: hashes.data.clone(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                label: config.label(),
                stages: BTreeMap::new(),
                root: root.to_path_buf(),
            };
            write_file(&root.join("config.json"), serde_json::to_vec_pretty(&config)?)?;
            m.save()?;
            m
        };
        Ok(Self {
            config,
            hashes,
            manifest,
            resume_partial: true,
        })
    }

    /// Whether an interrupted training stage continues from its last
    /// checkpoint (the default) or restarts from scratch.
    pub fn set_resume(&mut self, resume: bool) {
        self.resume_partial = resume;
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn root(&self) -> &Path {
        &self.manifest.root
    }

    fn stage_hash(&self, stage: &str) -> &str {
        match stage {
            "data" => &self.hashes.data,
            "train" => &self.hashes.train,
            "segment" => &self.hashes.segment,
            _ => &self.hashes.evaluate,
        }
    }

    /// Marks `stage` and everything downstream as incomplete.
    fn begin(&mut self, stage: &str) -> Result<Instant> {
        let from = STAGES.iter().position(|s| *s == stage).expect("known stage");
        for s in &STAGES[from..] {
            if let Some(r) = self.manifest.stages.get_mut(*s) {
                r.complete = false;
            }
        }
        self.manifest.save()?;
        log::info!("stage {stage}: running");
        Ok(Instant::now())
    }

    fn finish(&mut self, stage: &str, artifacts: Vec<String>, started: Instant) -> Result<()> {
        let record = StageRecord {
            hash: self.stage_hash(stage).to_string(),
            complete: true,
            artifacts,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.manifest.stages.insert(stage.to_string(), record);
        self.manifest.save()?;
        log::info!("stage {stage}: done");
        Ok(())
    }

    fn done(&self, stage: &str) -> bool {
        self.manifest.is_complete(stage)
            && self
                .manifest
                .stages
                .get(stage)
                .is_some_and(|s| s.hash == self.stage_hash(stage))
    }

    /// Generates every site's healthy data and the lesioned test splits.
    pub fn data(&mut self) -> Result<()> {
        if self.done("data") {
            return Ok(());
        }
        let started = self.begin("data")?;
        let spec = self.config.data.clone();
        let seed = self.config.seed;
        let data_dir = self.root().join("data");
        reset_dir(&data_dir)?;
        let mut artifacts = Vec::new();
        for (site, lesioned) in spec.clients.iter().map(|c| (c, true)).chain([(&spec.unseen, false)]) {
            let healthy: ClientDataset<Real> = generate_phantom_client(
                &site.id,
                derive_seed_str(seed, "data", &site.id),
                &site.profile,
                spec.counts,
                spec.size,
            )?;
            save_dataset(&healthy, &data_dir.join("healthy").join(&site.id))?;
            artifacts.push(format!("data/healthy/{}/manifest.json", site.id));
            if lesioned {
                let l = inject_lesions(&healthy, derive_seed_str(seed, "lesion", &site.id), &spec.lesions)?;
                save_dataset(&l, &data_dir.join("lesion").join(&site.id))?;
                artifacts.push(format!("data/lesion/{}/manifest.json", site.id));
            }
        }
        self.finish("data", artifacts, started)
    }

    fn load_site(&self, kind: &str, id: &str) -> Result<ClientDataset<Real>> {
        load_dataset(&self.root().join("data").join(kind).join(id))
    }

    fn load_sites(&self, kind: &str) -> Result<Vec<ClientDataset<Real>>> {
        self.config
            .data
            .clients
            .iter()
            .map(|c| self.load_site(kind, &c.id))
            .collect()
    }

    /// Runs (or resumes) the federation, checkpointing after every round.
    pub fn train(&mut self) -> Result<FederationState<Real>> {
        self.data()?;
        let state_dir = self.root().join("train").join("state");
        if self.done("train") {
            return FederationState::load(&state_dir);
        }
        let started = self.begin("train")?;
        let fed = self.config.effective_federation();
        let clients = self.load_sites("healthy")?;
        let parts = participants(&clients, fed.strategy);
        if !self.resume_partial && state_dir.exists() {
            log::info!("discarding the partial checkpoint in {}", state_dir.display());
            fs::remove_dir_all(&state_dir).map_err(|e| Error::io(&state_dir, e))?;
        }
        let mut state = if state_dir.join("history.json").exists() {
            let s = FederationState::<Real>::load(&state_dir)?;
            ensure!(
                s.strategy == fed.strategy && s.rounds_done() <= fed.rounds,
                State,
                "checkpoint in {} does not belong to this run",
                state_dir.display()
            );
            log::info!("resuming training after round {}", s.rounds_done());
            s
        } else {
            FederationState::initial(&parts, &self.config.arch, &fed)?
        };
        let seeds = BTreeMap::from([("global".to_string(), self.config.seed)]);
        while state.rounds_done() < fed.rounds {
            state.step_round(&parts, &fed)?;
            state.save(&state_dir, &seeds)?;
            self.write_training_logs(&state)?;
        }
        state.save(&state_dir, &seeds)?;
        self.write_training_logs(&state)?;
        self.finish(
            "train",
            vec![
                "train/state/history.json".into(),
                "train/state/global.ckpt".into(),
                "train/rounds.csv".into(),
                "train/loss_log.csv".into(),
            ],
            started,
        )?;
        Ok(state)
    }

    fn write_training_logs(&self, state: &FederationState<Real>) -> Result<()> {
        let mut rounds = String::from("round,val_rec,checksum\n");
        let mut losses = String::from("round,client,L_Rec,SCL,LOL,total\n");
        for r in &state.history {
            let _ = writeln!(rounds, "{},{},{}", r.round, r.val_rec, r.checksum);
            for c in &r.clients {
                let l = &c.loss;
                let _ = writeln!(
                    losses,
                    "{},{},{},{},{},{}",
                    r.round, c.client_id, l.rec, l.scl, l.lol, l.total
                );
            }
        }
        let dir = self.root().join("train");
        write_file(&dir.join("rounds.csv"), rounds)?;
        write_file(&dir.join("loss_log.csv"), losses)
    }

    /// Model evaluated on a training site's own data: the site's retained
    /// parameters (shared leaves plus whatever the strategy keeps private).
    fn site_model(state: &FederationState<Real>, site: &str) -> Result<ModelParams<Real>> {
        ensure!(state.rounds_done() > 0, State, "no federation round has completed");
        match state.strategy {
            Strategy::Centralized => state.build_inference_model(),
            _ => state
                .client_model(site)
                .cloned()
                .ok_or_else(|| Error::State(format!("no model for site '{site}'"))),
        }
    }

    /// Models evaluated on the held-out site; local-only training contributes
    /// every site's model and the metrics are averaged across them.
    fn unseen_models(state: &FederationState<Real>) -> Result<Vec<ModelParams<Real>>> {
        if state.strategy == Strategy::LocalOnly {
            ensure!(state.rounds_done() > 0, State, "no federation round has completed");
            return Ok(state.clients.iter().map(|c| c.params.clone()).collect());
        }
        Ok(vec![state.build_inference_model()?])
    }

    /// Segments every lesioned test slice and stores the masks as PBM.
    pub fn segment(&mut self) -> Result<()> {
        let state = self.train()?;
        if self.done("segment") {
            return Ok(());
        }
        let started = self.begin("segment")?;
        let dir = self.root().join("segment");
        reset_dir(&dir)?;
        let mut table = String::from("dataset,slice_id,status,label,area,row_min,col_min,row_max,col_max\n");
        let mut artifacts = vec!["segment/components.csv".to_string()];
        for site in self.load_sites("lesion")? {
            let params = Self::site_model(&state, &site.client_id)?;
            for s in &site.test {
                let seg = segment_slice(&params, s, &self.config.postprocess)?;
                let rel = format!("segment/{}/{}.pbm", site.client_id, s.slice_id);
                let path = self.root().join(&rel);
                if let Some(d) = path.parent() {
                    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                write_mask(&path, &seg.mask)?;
                artifacts.push(rel);
                let status = match seg.status {
                    SegmentStatus::Ok => "ok",
                    SegmentStatus::EmptyBrainMask => "empty_brain_mask",
                };
                if seg.components.is_empty() {
                    let _ = writeln!(table, "{},{},{status},,,,,,", site.client_id, s.slice_id);
                }
                for c in &seg.components {
                    let (r0, c0, r1, c1) = c.bbox;
                    let _ = writeln!(
                        table,
                        "{},{},{status},{},{},{r0},{c0},{r1},{c1}",
                        site.client_id, s.slice_id, c.label, c.area
                    );
                }
            }
        }
        write_file(&dir.join("components.csv"), table)?;
        self.finish("segment", artifacts, started)
    }

    /// Embeddings of every healthy test slice: training sites through their
    /// own models, the held-out site through the inference model.
    fn embeddings(&self, state: &FederationState<Real>) -> Result<Vec<EmbeddingRecord>> {
        ensure!(
            state.strategy.disentangled(),
            Config,
            "strategy {} has no appearance path to export",
            state.strategy
        );
        let range = self.config.metrics.embedding_gamma_range;
        let seed = derive_seed(self.config.seed, "embeddings", 0);
        let mut out = Vec::new();
        for site in self.load_sites("healthy")? {
            let params = Self::site_model(state, &site.client_id)?;
            out.extend(export_embeddings(&params, std::slice::from_ref(&site), range, seed)?);
        }
        let unseen = self.load_site("healthy", &self.config.data.unseen.id)?;
        let params = state.build_inference_model()?;
        out.extend(export_embeddings(&params, &[unseen], range, seed)?);
        Ok(out)
    }

    /// Writes the embedding CSV to `path` (training first if needed).
    pub fn export_embeddings(&mut self, path: &Path) -> Result<Vec<EmbeddingRecord>> {
        let state = self.train()?;
        let records = self.embeddings(&state)?;
        if let Some(d) = path.parent() {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        write_embeddings_csv(&records, path)?;
        Ok(records)
    }

    /// Scores the stored masks and reconstructions and writes the report.
    pub fn evaluate(&mut self) -> Result<MetricsReport> {
        self.segment()?;
        let dir = self.root().join("evaluate");
        if self.done("evaluate") {
            return load_report(&self.manifest).map(|(r, _)| r);
        }
        let state = self.train()?;
        let started = self.begin("evaluate")?;
        reset_dir(&dir)?;
        let opts = self.config.metrics.clone();

        let mut per_slice = String::from("dataset,slice_id,lesion_area_mm2,dice\n");
        let mut ssim_rows = String::from("dataset,slice_id,ssim\n");
        let mut datasets = Vec::new();
        let mut pairs: Vec<(BinaryMask, BinaryMask)> = Vec::new();
        let mut healthy_ssim = Vec::new();
        for (lesioned, healthy) in self.load_sites("lesion")?.into_iter().zip(self.load_sites("healthy")?) {
            let id = lesioned.client_id.clone();
            let mut scores = Vec::with_capacity(lesioned.test.len());
            for s in &lesioned.test {
                let pred = read_mask(
                    &self
                        .root()
                        .join("segment")
                        .join(&id)
                        .join(format!("{}.pbm", s.slice_id)),
                )?;
                let gt = s
                    .lesion_mask
                    .clone()
                    .ok_or_else(|| Error::State(format!("slice {id}/{} has no lesion mask", s.slice_id)))?;
                let d = dice(&pred, &gt)?;
                let _ = writeln!(
                    per_slice,
                    "{id},{},{},{d}",
                    s.slice_id,
                    gt.count() as f64 * opts.pixel_area_mm2
                );
                scores.push(d);
                pairs.push((pred, gt));
            }
            let params = Self::site_model(&state, &id)?;
            let mut site_ssim = Vec::with_capacity(healthy.test.len());
            for s in &healthy.test {
                let v = ssim(&s.pixels, &reconstruct(&params, s)?, s.height, s.width)? as f64;
                let _ = writeln!(ssim_rows, "{id},{},{v}", s.slice_id);
                site_ssim.push(v);
            }
            healthy_ssim.extend_from_slice(&site_ssim);
            datasets.push(DatasetMetrics {
                dataset: id,
                dice: MeanStd::of(&scores).ok_or_else(|| Error::State("empty test split".into()))?,
                ssim: mean(&site_ssim),
            });
        }

        let unseen = self.load_site("healthy", &self.config.data.unseen.id)?;
        let models = Self::unseen_models(&state)?;
        let mut unseen_ssim = Vec::with_capacity(unseen.test.len());
        for s in &unseen.test {
            let mut acc = 0.0;
            for p in &models {
                acc += ssim(&s.pixels, &reconstruct(p, s)?, s.height, s.width)? as f64;
            }
            let v = acc / models.len() as f64;
            let _ = writeln!(ssim_rows, "{},{},{v}", unseen.client_id, s.slice_id);
            unseen_ssim.push(v);
        }

        let mut artifacts: Vec<String> = [
            "metrics.csv",
            "per_slice.csv",
            "ssim.csv",
            "buckets.csv",
            "metrics.json",
            "report.md",
        ]
        .iter()
        .map(|f| format!("evaluate/{f}"))
        .collect();
        let similarity = if state.strategy.disentangled() {
            let records = self.embeddings(&state)?;
            write_embeddings_csv(&records, &dir.join("embeddings.csv"))?;
            artifacts.push("evaluate/embeddings.csv".into());
            Some(shape_appearance_similarity(&records)?)
        } else {
            None
        };

        let report = MetricsReport {
            label: self.config.label(),
            mean_dice: mean(&datasets.iter().map(|d| d.dice.mean).collect::<Vec<_>>()),
            datasets,
            ssim_healthy: mean(&healthy_ssim),
            ssim_unseen: mean(&unseen_ssim),
            similarity,
            buckets: stratified_dice(&pairs, &opts.bucket_thresholds_mm2, opts.pixel_area_mm2)?,
        };
        report.validate()?;
        write_file(&dir.join("metrics.csv"), report.to_csv())?;
        write_file(&dir.join("per_slice.csv"), per_slice)?;
        write_file(&dir.join("ssim.csv"), ssim_rows)?;
        write_file(&dir.join("buckets.csv"), report.buckets_csv())?;
        write_file(&dir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
        write_file(&dir.join("report.md"), report.to_markdown())?;
        self.finish("evaluate", artifacts, started)?;
        Ok(report)
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Runs every stage not yet complete in `root` and returns the manifest.
pub fn run_experiment(config: ExperimentConfig, root: &Path) -> Result<RunManifest> {
    let mut runner = Runner::open(config, root)?;
    runner.evaluate()?;
    Ok(runner.manifest().clone())
}

/// Reads a completed run's report and per-slice DICE scores.
pub fn load_report(manifest: &RunManifest) -> Result<(MetricsReport, Vec<SliceScores>)> {
    ensure!(
        manifest.is_complete("evaluate"),
        State,
        "run {} has not finished evaluation",
        manifest.root.display()
    );
    let dir = manifest.root.join("evaluate");
    let path = dir.join("metrics.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let report: MetricsReport = serde_json::from_slice(&bytes)?;
    let mut by_dataset: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(dir.join("per_slice.csv"))?;
    for row in rdr.records() {
        let row = row?;
        let value: f64 = row[3].parse().map_err(|_| Error::Format {
            path: dir.join("per_slice.csv"),
            msg: format!("bad DICE value '{}'", &row[3]),
        })?;
        by_dataset.entry(row[0].to_string()).or_default().push(value);
    }
    let scores = report
        .datasets
        .iter()
        .map(|d| SliceScores {
            dataset: d.dataset.clone(),
            dice: by_dataset.remove(&d.dataset).unwrap_or_default(),
        })
        .collect();
    Ok((report, scores))
}

/// Comparison table of finished runs over identical data.
pub fn compare_strategies(manifests: &[RunManifest], baseline: &str) -> Result<Comparison> {
    ensure!(!manifests.is_empty(), Input, "no runs to compare");
    let data_hash = &manifests[0].data_hash;
    for m in manifests {
        ensure!(
            &m.data_hash == data_hash,
            Input,
            "run {} was generated from different data; comparison refused",
            m.root.display()
        );
    }
    let runs = manifests.iter().map(load_report).collect::<Result<Vec<_>>>()?;
    compare_reports(&runs, baseline)
}

#[cfg(test)]
mod tests;
