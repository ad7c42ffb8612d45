//! A project directory: config, corpus, annotation store, eval runs, exports.
//!
//! Both the CLI and the HTTP service go through [`Project`], so every entry
//! point composes the same module operations.
//!
//! ```text
//! crcal.json            config
//! corpus.jsonl          filtered records (path configurable)
//! rounds/, labels.*     annotation store
//! runs/run-000001.json  eval runs
//! reports/              calibration reports
//! exports/              alpaca files + metadata
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    system_clock, AnnotationRound, AnnotationStore, Clock, ItemsPage, Label, LabelValue, Progress,
    RoundDiff, RoundStatus,
};
use crate::calibration::{build_calibration_report, CalibrationReport, ModelCard, Verdict};
use crate::config::ProjectConfig;
use crate::corpus::{self, PreprocessedRecord, QuestionFilter, QuestionScores};
use crate::error::{Error, Result};
use crate::evalharness::{self, EvalRun, Metric, RunStatus};
use crate::exporter::{self, ExportMetadata, ExportOptions};
use crate::gateway::{self, EndpointClient, Gateway};

pub const RUNS_DIR: &str = "runs";
pub const REPORTS_DIR: &str = "reports";
pub const EXPORTS_DIR: &str = "exports";

#[derive(Debug)]
struct RunStore {
    dir: PathBuf,
    next_id: Mutex<u64>,
}

impl RunStore {
    fn open(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        let store = Self {
            dir,
            next_id: Mutex::new(1),
        };
        let mut max = 0;
        for mut run in store.list()? {
            max = max.max(run.run_id);
            if run.status == RunStatus::Running {
                // the process that owned it is gone
                run.status = RunStatus::Failed;
                run.error = Some("interrupted before completion".into());
                store.save(&run)?;
            }
        }
        *store.next_id.lock().expect("run id lock") = max + 1;
        Ok(store)
    }

    fn allocate(&self) -> u64 {
        let mut next = self.next_id.lock().expect("run id lock");
        let id = *next;
        *next += 1;
        id
    }

    fn path(&self, run_id: u64) -> PathBuf {
        self.dir.join(format!("run-{run_id:06}.json"))
    }

    fn save(&self, run: &EvalRun) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(run)?;
        bytes.push(b'\n');
        crate::annotation::write_atomic(&self.path(run.run_id), &bytes)
    }

    fn load(&self, run_id: u64) -> Result<EvalRun> {
        match std::fs::read(self.path(run_id)) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::NotFound(format!("eval run {run_id}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self) -> Result<Vec<EvalRun>> {
        let mut runs = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                runs.push(serde_json::from_slice::<EvalRun>(&std::fs::read(&path)?)?);
            }
        }
        runs.sort_by_key(|r| r.run_id);
        Ok(runs)
    }
}

/// An eval run that has been registered and is ready to execute.
#[derive(Debug)]
pub struct PendingEval {
    pub run: EvalRun,
    round: AnnotationRound,
    records: Vec<PreprocessedRecord>,
    client: Arc<EndpointClient>,
}

impl PendingEval {
    pub fn run_id(&self) -> u64 {
        self.run.run_id
    }

    pub fn endpoint_name(&self) -> &str {
        &self.client.endpoint().name
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub records: Vec<PreprocessedRecord>,
    pub scores: QuestionScores,
}

pub struct Project {
    root: PathBuf,
    config: ProjectConfig,
    store: RwLock<AnnotationStore>,
    gateway: Gateway,
    runs: RunStore,
    clock: Clock,
}

impl std::fmt::Debug for Project {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Project").field("root", &self.root).finish()
    }
}

impl Project {
    /// Open the project whose config file is `config_path`.
    pub fn open(config_path: &Path) -> Result<Self> {
        let config = ProjectConfig::load(config_path)?;
        let root = config_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Self::with_config(root, config, system_clock())
    }

    pub fn with_config(root: impl Into<PathBuf>, config: ProjectConfig, clock: Clock) -> Result<Self> {
        let root = root.into();
        config.validate()?;
        let corpus_path = root.join(&config.corpus);
        let items = match std::fs::File::open(&corpus_path) {
            Ok(f) => corpus::read_records(f)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let store = AnnotationStore::open_with(&root, items, config.annotation.conflict_rule, clock.clone())?;
        Ok(Self {
            gateway: Gateway::new(&config.endpoints)?,
            runs: RunStore::open(root.join(RUNS_DIR))?,
            store: RwLock::new(store),
            clock,
            root,
            config,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, AnnotationStore> {
        self.store.read().expect("store lock poisoned")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, AnnotationStore> {
        self.store.write().expect("store lock poisoned")
    }

    pub fn model(&self, name: &str) -> Result<&ModelCard> {
        self.config
            .models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::NotFound(format!("model {name}")))
    }

    pub fn list_rounds(&self) -> Vec<AnnotationRound> {
        self.read().rounds()
    }

    pub fn round(&self, round_id: u64) -> Result<AnnotationRound> {
        self.read().round(round_id).cloned()
    }

    pub fn create_round(&self, prompt_template: &str, parent: Option<u64>) -> Result<AnnotationRound> {
        self.write().create_round(prompt_template, parent)
    }

    pub fn items_page(&self, round_id: u64, cursor: usize, limit: usize) -> Result<ItemsPage> {
        self.read().items_page(round_id, cursor, limit)
    }

    pub fn submit_label(&self, round_id: u64, item_id: i64, value: LabelValue, annotator: &str) -> Result<Label> {
        self.write().submit_label(round_id, item_id, value, annotator)
    }

    pub fn progress(&self, round_id: u64) -> Result<Progress> {
        self.read().progress(round_id)
    }

    pub fn diff_rounds(&self, a: u64, b: u64) -> Result<RoundDiff> {
        self.read().diff_rounds(a, b)
    }

    pub fn export_round(&self, round_id: u64) -> Result<Vec<PreprocessedRecord>> {
        self.read().export_round(round_id)
    }

    pub fn compact(&self) -> Result<()> {
        self.read().compact()
    }

    /// Register a run: persist it as `running` and move an open round to
    /// `evaluating`.
    pub fn prepare_eval(&self, round_id: u64, model_name: &str, option_seed: Option<u64>) -> Result<PendingEval> {
        let model = self.model(model_name)?.clone();
        let client = self.gateway.client(&model.endpoint)?;
        let (round, records) = {
            let mut store = self.write();
            let round = store.round(round_id)?.clone();
            let records = store.export_round(round_id)?;
            if records.is_empty() {
                return Err(Error::Validation(format!("round {round_id} has no labeled records")));
            }
            let round = if round.status == RoundStatus::Open {
                store.set_status(round_id, RoundStatus::Evaluating)?
            } else {
                round
            };
            (round, records)
        };
        let run = EvalRun::running(
            self.runs.allocate(),
            round_id,
            model,
            option_seed,
            (self.clock)(),
        );
        self.runs.save(&run)?;
        Ok(PendingEval {
            run,
            round,
            records,
            client,
        })
    }

    /// Execute a prepared run and persist the outcome, including failures.
    pub async fn finish_eval(&self, pending: PendingEval) -> Result<EvalRun> {
        let PendingEval {
            run,
            round,
            records,
            client,
        } = pending;
        let fallback = run.clone();
        match evalharness::run_eval(run, &round, &records, &client).await {
            Ok(mut done) => {
                done.finished_at = Some((self.clock)());
                self.runs.save(&done)?;
                Ok(done)
            }
            Err(e) => {
                let mut failed = fallback;
                failed.status = RunStatus::Failed;
                failed.error = Some(e.to_string());
                failed.finished_at = Some((self.clock)());
                self.runs.save(&failed)?;
                Err(e)
            }
        }
    }

    pub async fn run_eval(&self, round_id: u64, model_name: &str, option_seed: Option<u64>) -> Result<EvalRun> {
        let pending = self.prepare_eval(round_id, model_name, option_seed)?;
        self.finish_eval(pending).await
    }

    /// Persist a run computed elsewhere (e.g. imported results).
    pub fn import_run(&self, mut run: EvalRun) -> Result<EvalRun> {
        self.round(run.round_id)?;
        run.run_id = self.runs.allocate();
        self.runs.save(&run)?;
        Ok(run)
    }

    pub fn get_run(&self, run_id: u64) -> Result<EvalRun> {
        self.runs.load(run_id)
    }

    pub fn runs_for_round(&self, round_id: u64) -> Result<Vec<EvalRun>> {
        self.round(round_id)?;
        Ok(self
            .runs
            .list()?
            .into_iter()
            .filter(|r| r.round_id == round_id)
            .collect())
    }

    /// Build the report, store it under `reports/` and mark the round
    /// calibrated or rejected.
    pub fn calibrate(&self, round_id: u64, metric: Option<Metric>) -> Result<CalibrationReport> {
        let mut options = self.config.calibration.clone();
        if let Some(m) = metric {
            options.metric = m;
        }
        let runs = self.runs_for_round(round_id)?;
        let report = build_calibration_report(round_id, &runs, &options)?;
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        crate::annotation::write_atomic(
            &self
                .root
                .join(REPORTS_DIR)
                .join(format!("round-{round_id:06}-{}.json", options.metric)),
            &bytes,
        )?;
        let status = match report.verdict {
            Verdict::Calibrated => RoundStatus::Calibrated,
            Verdict::NotCalibrated => RoundStatus::Rejected,
        };
        self.write().set_status(round_id, status)?;
        Ok(report)
    }

    fn export_template(&self) -> Result<(String, Option<&'static str>)> {
        match &self.config.export.template_path {
            Some(p) => Ok((std::fs::read_to_string(self.root.join(p))?, None)),
            None => Ok((
                exporter::CANONICAL_INSTRUCTION_TEMPLATE.to_owned(),
                Some(exporter::CANONICAL_TEMPLATE_VERSION),
            )),
        }
    }

    /// Write the alpaca export of a calibrated round under `exports/`.
    pub fn export(&self, round_id: u64, seed: Option<u64>, holdout: Option<usize>) -> Result<ExportMetadata> {
        let round = self.round(round_id)?;
        if round.status != RoundStatus::Calibrated {
            return Err(Error::State(format!(
                "round {round_id} is {:?}; only calibrated rounds are exported",
                round.status
            )));
        }
        let seed = seed.unwrap_or(self.config.export.seed);
        let records = self.export_round(round_id)?;
        let (template, version) = self.export_template()?;
        exporter::write_export(
            &self.root.join(EXPORTS_DIR),
            &format!("round-{round_id:06}-seed-{seed}"),
            &records,
            &ExportOptions {
                round_id,
                template: &template,
                template_version: version,
                seed,
                holdout,
            },
        )
    }

    /// Table of every run of the round.
    pub fn report_table(&self, round_id: u64) -> Result<String> {
        Ok(evalharness::render_table(&self.runs_for_round(round_id)?))
    }
}

/// Score every record with one endpoint; unparseable replies land in `unscored`.
pub async fn score_records(
    client: &EndpointClient,
    records: &[PreprocessedRecord],
) -> Result<(BTreeMap<i64, u8>, BTreeSet<i64>)> {
    let parallel = client.endpoint().max_in_flight.max(1) as usize;
    let mut results = futures::stream::iter(records)
        .map(|r| async move { (r.id, gateway::score_question(client, r).await) })
        .buffer_unordered(parallel);
    let mut scores = BTreeMap::new();
    let mut unscored = BTreeSet::new();
    while let Some((id, res)) = results.next().await {
        match res {
            Ok(s) => {
                scores.insert(id, s);
            }
            Err(Error::ScoringParse(reply)) => {
                tracing::warn!(id, reply, "unscored record");
                unscored.insert(id);
            }
            Err(Error::Validation(msg)) => {
                tracing::warn!(id, msg, "unscored record");
                unscored.insert(id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((scores, unscored))
}

/// Score with both endpoints and apply the question filter. Scorer B's
/// verdict is its score compared against the same throttle.
pub async fn filter_records(
    records: &[PreprocessedRecord],
    scorer_a: &EndpointClient,
    scorer_b: &EndpointClient,
    filter: &QuestionFilter,
) -> Result<FilterOutcome> {
    let (a, mut unscored) = score_records(scorer_a, records).await?;
    let (b_scores, b_unscored) = score_records(scorer_b, records).await?;
    unscored.extend(b_unscored);
    let scores = QuestionScores {
        a,
        b: b_scores
            .into_iter()
            .map(|(id, s)| (id, s >= filter.throttle))
            .collect(),
        unscored,
    };
    let records = filter.apply(records, &scores)?;
    Ok(FilterOutcome { records, scores })
}
