//! Pipeline stages behind the subcommands. Each stage reads what earlier
//! stages left under the output directory and writes its own outputs to a
//! temporary path first, renaming them into place once complete.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sela_core::adapt::{
    evaluate_scene, pretrain, run_protocol, stored_parameters, AdaptedState, EpochLog, Method,
    PretrainCorpus, PretrainOutcome, ProtocolConfig, SessionLog, PRETRAINED,
};
use sela_core::lora::{merge, AdapterSet, LoraConfig};
use sela_core::metrics::{
    aggregate, read_results_csv, read_trajectory_csv, write_results_csv, write_trajectory_csv,
    AggregateReport, MetricRecord, ParamAccounting, TrajectoryRow,
};
use sela_core::model::{FrontEnd, GruEnhancerParams, ModelCheckpoint, ModelDims};
use sela_core::scenes::{
    build_scene, export_corpus, ingest_wav_dir, load_corpus, sequence_scenes, IngestLayout,
    SceneDataset, SceneManifest, ScheduleMode, MANIFEST_FILE,
};
use sela_core::{Error, Result};

use crate::config::{grid_lora, RunConfig};

const RUN_META: &str = "run.toml";

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("checkpoint.bin")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain").join("epochs.csv")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("adapt")
    }

    pub fn session_log(&self) -> PathBuf {
        self.runs().join("session.jsonl")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Runs `write` against a temporary sibling of `path`, then renames it over
/// `path`. Works for files and directories.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let tmp = temp_path(path);
    remove_path(&tmp)?;
    write(&tmp)?;
    remove_path(path)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn remove_path(path: &Path) -> Result<()> {
    let res = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        return Ok(());
    };
    res.map_err(|e| Error::io(path, e))
}

/// Builds the scene corpus, from synthesis or from a directory of
/// recordings, and exports it with its manifest.
pub fn synth_data(
    cfg: &RunConfig,
    layout: &Layout,
    wav_dir: Option<&Path>,
) -> Result<SceneManifest> {
    let scenes = match wav_dir {
        Some(dir) => ingest_wav_dir(
            dir,
            &IngestLayout {
                snr_ranges: cfg.corpus.snr_ranges.iter().map(|&[a, b]| (a, b)).collect(),
                sizes: cfg.corpus.sizes,
                seed: cfg.corpus.seed,
            },
        )?,
        None => cfg
            .scene_specs()
            .iter()
            .map(build_scene)
            .collect::<Result<Vec<_>>>()?,
    };
    let mut manifest = None;
    write_atomic(&layout.corpus(), |tmp| {
        manifest = Some(export_corpus(&scenes, tmp)?);
        Ok(())
    })?;
    Ok(manifest.expect("export ran"))
}

fn load_scenes(layout: &Layout) -> Result<Vec<SceneDataset>> {
    let dir = layout.corpus();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Contract(format!(
            "no scene corpus at {}; run synth-data first",
            dir.display()
        )));
    }
    load_corpus(&dir)
}

fn load_base(layout: &Layout, dims: ModelDims) -> Result<GruEnhancerParams> {
    let path = layout.checkpoint();
    if !path.exists() {
        return Err(Error::Contract(format!(
            "no checkpoint at {}; run pretrain first",
            path.display()
        )));
    }
    let base = ModelCheckpoint::read(&path)?.load()?;
    if base.dims() != dims {
        return Err(Error::Contract(format!(
            "checkpoint dims {:?} differ from configured {dims:?}",
            base.dims()
        )));
    }
    Ok(base)
}

/// Supervised pretraining on a freshly synthesized corpus. Requires the
/// scene corpus so that a pipeline cannot skip `synth-data`.
pub fn pretrain_stage(
    cfg: &RunConfig,
    layout: &Layout,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    if !layout.corpus().join(MANIFEST_FILE).exists() {
        return Err(Error::Contract(
            "no scene corpus; run synth-data first".into(),
        ));
    }
    let corpus = PretrainCorpus::synthesize(&cfg.pretrain.corpus)?;
    let init = GruEnhancerParams::init(
        cfg.model.dims,
        &mut ChaCha8Rng::seed_from_u64(cfg.model.init_seed),
    )?;
    let front = FrontEnd::new(cfg.model.dims.bands)?;
    let outcome = pretrain(init, &corpus, &cfg.pretrain.train, &front, on_epoch)?;
    write_atomic(&layout.checkpoint(), |tmp| outcome.checkpoint.write(tmp))?;
    write_atomic(&layout.pretrain_log(), |tmp| {
        let mut w = csv::Writer::from_path(tmp).map_err(|e| csv_error(tmp, e))?;
        for e in &outcome.epochs {
            w.serialize(e).map_err(|e| csv_error(tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(tmp, e))
    })?;
    Ok(outcome)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Reads the per-epoch log written by [`pretrain_stage`].
pub fn read_pretrain_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

/// What one adaptation run was, stored next to its states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    /// Method column of the result rows: `lora`, `remixit`, or an ablation
    /// label such as `lora-r16-s1`.
    pub label: String,
    pub method: Method,
    pub mode: ScheduleMode,
    pub updates: usize,
    pub lora: Option<LoraConfig>,
    pub dims: ModelDims,
    /// Fingerprint of the pretrained model the run started from.
    pub base: String,
    pub scenes: Vec<usize>,
    pub adaptable: usize,
    pub stored: usize,
}

impl RunMeta {
    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.label, self.mode)
    }

    pub fn accounting(&self) -> ParamAccounting {
        ParamAccounting {
            method: self.label.clone(),
            adaptable: self.adaptable,
            total: self.dims.param_count(),
        }
    }
}

/// Options of the `adapt` subcommand on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct AdaptRequest {
    /// Overrides the configured methods when non-empty.
    pub methods: Vec<Method>,
    /// Overrides the configured modes when non-empty.
    pub modes: Vec<ScheduleMode>,
    pub updates: Option<usize>,
    pub jobs: usize,
    /// Extra LoRA runs, one per `(rank, scale)`.
    pub rank_scale_grid: Vec<(usize, f64)>,
}

struct Variant {
    label: String,
    method: Method,
    lora: LoraConfig,
}

fn scale_label(scale: f64) -> String {
    if scale.fract() == 0.0 {
        format!("{scale:.0}")
    } else {
        scale.to_string()
    }
}

/// Adaptable parameter count of a method at `dims`.
pub fn adaptable_params(method: Method, dims: ModelDims, lora: &LoraConfig) -> usize {
    match method {
        Method::Lora => lora.adaptable_count(dims),
        Method::Remixit => dims.param_count(),
    }
}

/// Runs the protocol for every requested method and mode and stores
/// trajectories and final states, one directory per run.
pub fn adapt_stage(cfg: &RunConfig, layout: &Layout, req: &AdaptRequest) -> Result<Vec<RunMeta>> {
    let scenes = load_scenes(layout)?;
    let base = load_base(layout, cfg.model.dims)?;
    let front = FrontEnd::new(cfg.model.dims.bands)?;
    let mut session = cfg.adapt.session.clone();
    if let Some(n) = req.updates {
        session.updates = n;
    }
    let methods = if req.methods.is_empty() {
        cfg.adapt.methods.clone()
    } else {
        req.methods.clone()
    };
    let modes = if req.modes.is_empty() {
        cfg.adapt.modes.clone()
    } else {
        req.modes.clone()
    };
    let mut variants: Vec<Variant> = methods
        .iter()
        .map(|&m| Variant {
            label: m.as_str().into(),
            method: m,
            lora: session.lora.clone(),
        })
        .collect();
    for &(rank, scale) in &req.rank_scale_grid {
        let lora = grid_lora(&session.lora, rank, scale);
        lora.validate(cfg.model.dims)?;
        variants.push(Variant {
            label: format!("lora-r{rank}-s{}", scale_label(scale)),
            method: Method::Lora,
            lora,
        });
    }
    create_dir(&layout.runs())?;
    let log = SessionLog::open(&layout.session_log())?;
    let specs: Vec<_> = scenes.iter().map(|s| s.spec.clone()).collect();
    let mut metas = Vec::new();
    for &mode in &modes {
        let schedule = sequence_scenes(&specs, mode, cfg.adapt.schedule_seed)?;
        for v in &variants {
            let mut adapt = session.clone();
            adapt.lora = v.lora.clone();
            let pcfg = ProtocolConfig {
                methods: vec![v.method],
                adapt,
                jobs: req.jobs.max(1),
            };
            let result = run_protocol(&schedule, &scenes, &base, &pcfg, &front, Some(&log))?;
            let meta = RunMeta {
                label: v.label.clone(),
                method: v.method,
                mode,
                updates: session.updates,
                lora: (v.method == Method::Lora).then(|| v.lora.clone()),
                dims: cfg.model.dims,
                base: base.fingerprint(),
                scenes: schedule.order.clone(),
                adaptable: adaptable_params(v.method, cfg.model.dims, &v.lora),
                stored: stored_parameters(v.method, cfg.model.dims, &v.lora),
            };
            let trajectory: Vec<TrajectoryRow> = result
                .trajectory
                .into_iter()
                .map(|mut row| {
                    row.method = v.label.clone();
                    row
                })
                .collect();
            write_atomic(&layout.runs().join(meta.dir_name()), |dir| {
                create_dir(&dir.join("states"))?;
                for ((_, scene), state) in &result.states {
                    match state {
                        AdaptedState::Lora(a) => a.write(&state_path(dir, *scene, Method::Lora))?,
                        AdaptedState::Full(p) => ModelCheckpoint::save(p, 0).write(&state_path(
                            dir,
                            *scene,
                            Method::Remixit,
                        ))?,
                    }
                }
                write_trajectory_csv(&dir.join("trajectory.csv"), &trajectory)?;
                let text = toml::to_string(&meta).expect("run meta serializes");
                fs::write(dir.join(RUN_META), text).map_err(|e| Error::io(dir, e))
            })?;
            metas.push(meta);
        }
    }
    Ok(metas)
}

fn state_path(dir: &Path, scene: usize, method: Method) -> PathBuf {
    let ext = match method {
        Method::Lora => "lora",
        Method::Remixit => "ckpt",
    };
    dir.join("states").join(format!("scene_{scene:03}.{ext}"))
}

/// Every stored run, sorted by directory name.
pub fn list_runs(layout: &Layout) -> Result<Vec<(PathBuf, RunMeta)>> {
    let dir = layout.runs();
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut runs = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let meta_path = path.join(RUN_META);
        if !meta_path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: RunMeta = toml::from_str(&text).map_err(|e| Error::Format {
            path: meta_path.clone(),
            detail: e.to_string(),
        })?;
        runs.push((path, meta));
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(runs)
}

/// Applies `f` to every item using up to `jobs` threads, keeping order.
fn par_map<T: Sync, U: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Evaluates the pretrained model and every stored run on every scene test
/// set and writes `results.csv`.
pub fn eval_stage(cfg: &RunConfig, layout: &Layout, jobs: usize) -> Result<Vec<MetricRecord>> {
    let scenes = load_scenes(layout)?;
    let base = load_base(layout, cfg.model.dims)?;
    let front = FrontEnd::new(cfg.model.dims.bands)?;
    let runs = list_runs(layout)?;
    if runs.is_empty() {
        return Err(Error::Contract(
            "no adaptation runs; run adapt first".into(),
        ));
    }
    let mut modes: Vec<ScheduleMode> = runs.iter().map(|(_, m)| m.mode).collect();
    modes.sort_by_key(|m| m.as_str());
    modes.dedup();
    let mut records = Vec::new();
    for &mode in &modes {
        for rows in par_map(&scenes, jobs, |s| {
            evaluate_scene(&front, &base, s, PRETRAINED, mode)
        })? {
            records.extend(rows);
        }
    }
    for (dir, meta) in &runs {
        if meta.base != base.fingerprint() {
            return Err(Error::Contract(format!(
                "{} was adapted from a different checkpoint",
                dir.display()
            )));
        }
        let evaluated = par_map(&scenes, jobs, |s| {
            let idx = s.spec.index;
            let params = match meta.method {
                Method::Lora => merge(
                    &base,
                    &AdapterSet::read(&state_path(dir, idx, Method::Lora))?,
                )?,
                Method::Remixit => {
                    ModelCheckpoint::read(&state_path(dir, idx, Method::Remixit))?.load()?
                }
            };
            evaluate_scene(&front, &params, s, &meta.label, meta.mode)
        })?;
        for rows in evaluated {
            records.extend(rows);
        }
    }
    records.sort_by(|a, b| {
        (&a.method, &a.mode, a.scene_id, a.pair_id)
            .cmp(&(&b.method, &b.mode, b.scene_id, b.pair_id))
    });
    write_atomic(&layout.results(), |tmp| write_results_csv(tmp, &records))?;
    Ok(records)
}

/// Aggregates `results.csv` and the run trajectories into the report grid.
pub fn report_stage(layout: &Layout) -> Result<AggregateReport> {
    let path = layout.results();
    if !path.exists() {
        return Err(Error::Contract("no results.csv; run eval first".into()));
    }
    let records = read_results_csv(&path)?;
    let runs = list_runs(layout)?;
    let mut accounting: Vec<ParamAccounting> = Vec::new();
    for (_, meta) in &runs {
        if !accounting.iter().any(|a| a.method == meta.label) {
            accounting.push(meta.accounting());
        }
    }
    let mut report = aggregate(&records)?.with_accounting(accounting);
    for (dir, meta) in &runs {
        let rows = read_trajectory_csv(&dir.join("trajectory.csv"))?;
        report.add_trajectories(&rows, meta.mode.as_str());
    }
    let text = report.to_text();
    write_atomic(&layout.report_text(), |tmp| {
        fs::write(tmp, &text).map_err(|e| Error::io(tmp, e))
    })?;
    write_atomic(&layout.report_csv(), |tmp| report.write_csv(tmp))?;
    Ok(report)
}
