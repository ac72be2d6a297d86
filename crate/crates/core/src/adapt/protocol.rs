use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::session::{adapt_scene_lora, adapt_scene_remixit, AdaptSessionResult, Probe};
use super::{AdaptConfig, Method, PRETRAINED};
use crate::error::{Error, Result};
use crate::lora::{init_adapters, merge, transition, AdapterSet, LoraConfig, TransitionMode};
use crate::metrics::{si_sdr, snr_db, MetricRecord, TrajectoryRow};
use crate::model::{FrontEnd, GruEnhancerParams, ModelDims};
use crate::scenes::{SceneDataset, SceneSchedule, ScheduleMode};
use crate::seed::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub methods: Vec<Method>,
    pub adapt: AdaptConfig,
    /// Upper bound on scenes adapted concurrently in isolated mode.
    pub jobs: usize,
}

/// Final state of one adapted scene.
#[derive(Debug, Clone)]
pub enum AdaptedState {
    Lora(AdapterSet),
    Full(GruEnhancerParams),
}

#[derive(Debug, Clone, Default)]
pub struct ProtocolResult {
    pub sessions: Vec<AdaptSessionResult>,
    pub records: Vec<MetricRecord>,
    pub trajectory: Vec<TrajectoryRow>,
    /// Keyed by (method, scene index).
    pub states: BTreeMap<(Method, usize), AdaptedState>,
}

/// One line of the append-only session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub scene: usize,
    pub method: String,
    pub mode: String,
    pub update_idx: usize,
    pub loss: f64,
    pub probe_delta_snr_db: f64,
    pub wall_ms: f64,
}

/// JSON-lines log opened in append mode.
#[derive(Debug)]
pub struct SessionLog {
    file: Mutex<File>,
}

impl SessionLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, record: &UpdateRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let mut f = self.file.lock().expect("log lock");
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(Path::new("session log"), e))
    }
}

/// Parameters each method keeps in storage during adaptation: the backbone
/// plus adapters, or the student plus a frozen teacher copy.
pub fn stored_parameters(method: Method, dims: ModelDims, lora: &LoraConfig) -> usize {
    match method {
        Method::Lora => dims.param_count() + lora.adaptable_count(dims),
        Method::Remixit => 2 * dims.param_count(),
    }
}

/// SI-SDR and SNR of `params` on every test pair of `scene`.
pub fn evaluate_scene(
    front: &FrontEnd,
    params: &GruEnhancerParams,
    scene: &SceneDataset,
    method: &str,
    mode: ScheduleMode,
) -> Result<Vec<MetricRecord>> {
    let noisy: Vec<_> = scene.test_pairs.iter().map(|p| p.noisy.clone()).collect();
    let out = front.enhance_batch(&noisy, params, None)?;
    scene
        .test_pairs
        .iter()
        .zip(&out)
        .map(|(p, o)| {
            Ok(MetricRecord {
                scene_id: scene.spec.index,
                method: method.to_string(),
                mode: mode.as_str().to_string(),
                snr_lo: scene.spec.snr_lo,
                snr_hi: scene.spec.snr_hi,
                pair_id: p.id,
                si_sdr_db: si_sdr(o.samples(), p.clean.samples())?,
                snr_db: snr_db(o.samples(), p.clean.samples())?,
            })
        })
        .collect()
}

struct SceneOutcome {
    session: AdaptSessionResult,
    records: Vec<MetricRecord>,
    state: AdaptedState,
}

struct Ctx<'a> {
    front: &'a FrontEnd,
    base: &'a GruEnhancerParams,
    cfg: &'a ProtocolConfig,
    mode: ScheduleMode,
    log: Option<&'a SessionLog>,
}

impl Ctx<'_> {
    fn fresh_adapters(&self, scene: usize) -> Result<AdapterSet> {
        let mut rng = substream(self.cfg.adapt.seed, "lora-init", &[scene as u64]);
        init_adapters(&self.cfg.adapt.lora, self.base.dims(), scene, &mut rng)
    }

    /// Adapts `state` on `scene` in place and evaluates the result.
    fn run_scene(
        &self,
        method: Method,
        scene: &SceneDataset,
        state: &mut AdaptedState,
    ) -> Result<SceneOutcome> {
        let adapt = &self.cfg.adapt;
        let idx = scene.spec.index;
        let mut rng = substream(adapt.seed, method.as_str(), &[idx as u64]);
        let probe = Probe::new(self.front, self.base, scene, adapt.probe_pairs)?;
        let (session, params) = match state {
            AdaptedState::Lora(adapters) => {
                let s = adapt_scene_lora(
                    self.front, self.base, adapters, scene, adapt, &probe, &mut rng,
                )?;
                (s, merge(self.base, adapters)?)
            }
            AdaptedState::Full(student) => {
                let s = adapt_scene_remixit(
                    self.front, student, self.base, scene, adapt, &probe, &mut rng,
                )?;
                (s, student.clone())
            }
        };
        if let Some(log) = self.log {
            for u in 0..session.losses.len() {
                log.append(&UpdateRecord {
                    scene: idx,
                    method: method.as_str().into(),
                    mode: self.mode.as_str().into(),
                    update_idx: u + 1,
                    loss: session.losses[u],
                    probe_delta_snr_db: session.probe_delta_snr[u],
                    wall_ms: session.wall_ms[u],
                })?;
            }
        }
        let records = evaluate_scene(self.front, &params, scene, method.as_str(), self.mode)?;
        Ok(SceneOutcome {
            session,
            records,
            state: state.clone(),
        })
    }

    fn isolated(&self, method: Method, order: &[&SceneDataset]) -> Result<Vec<SceneOutcome>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<SceneOutcome>>>> =
            order.iter().map(|_| Mutex::new(None)).collect();
        let work = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            if i >= order.len() {
                break;
            }
            let scene = order[i];
            let outcome = (|| {
                let mut state = match method {
                    Method::Lora => AdaptedState::Lora(self.fresh_adapters(scene.spec.index)?),
                    Method::Remixit => AdaptedState::Full(self.base.clone()),
                };
                self.run_scene(method, scene, &mut state)
            })();
            *slots[i].lock().expect("slot") = Some(outcome);
        };
        let jobs = self.cfg.jobs.clamp(1, order.len().max(1));
        if jobs == 1 {
            work();
        } else {
            std::thread::scope(|s| {
                for _ in 0..jobs {
                    s.spawn(work);
                }
            });
        }
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .expect("slot")
                    .expect("every scene processed")
            })
            .collect()
    }

    fn sequential(&self, method: Method, order: &[&SceneDataset]) -> Result<Vec<SceneOutcome>> {
        let mut out = Vec::with_capacity(order.len());
        let mut state: Option<AdaptedState> = None;
        for scene in order {
            let mut current = match (state.take(), method) {
                (None, Method::Lora) => AdaptedState::Lora(self.fresh_adapters(scene.spec.index)?),
                (None, Method::Remixit) => AdaptedState::Full(self.base.clone()),
                (Some(AdaptedState::Lora(a)), _) => {
                    let mut rng = substream(
                        self.cfg.adapt.seed,
                        "lora-transition",
                        &[scene.spec.index as u64],
                    );
                    AdaptedState::Lora(transition(&a, TransitionMode::Carry, &mut rng)?)
                }
                (Some(full), _) => full,
            };
            let outcome = self.run_scene(method, scene, &mut current)?;
            state = Some(current);
            out.push(outcome);
        }
        Ok(out)
    }
}

/// Adapts and evaluates every scene of `schedule` with each configured
/// method, and evaluates the never-adapted model on every scene. Isolated
/// mode starts each scene from the pretrained state; sequential mode
/// carries adapters or the student across scenes in schedule order. RNG
/// streams are keyed by method and scene index, so isolated results do not
/// depend on the visiting order.
pub fn run_protocol(
    schedule: &SceneSchedule,
    scenes: &[SceneDataset],
    base: &GruEnhancerParams,
    cfg: &ProtocolConfig,
    front: &FrontEnd,
    log: Option<&SessionLog>,
) -> Result<ProtocolResult> {
    cfg.adapt.validate()?;
    let by_index: BTreeMap<usize, &SceneDataset> =
        scenes.iter().map(|s| (s.spec.index, s)).collect();
    let order = schedule
        .order
        .iter()
        .map(|i| {
            by_index
                .get(i)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("schedule names unknown scene {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut frozen = base.clone();
    frozen.set_trainable(false);
    let base_hash = frozen.fingerprint();
    let ctx = Ctx {
        front,
        base: &frozen,
        cfg,
        mode: schedule.mode,
        log,
    };

    let mut result = ProtocolResult::default();
    for scene in by_index.values() {
        result.records.extend(evaluate_scene(
            front,
            &frozen,
            scene,
            PRETRAINED,
            schedule.mode,
        )?);
    }
    for &method in &cfg.methods {
        let outcomes = match schedule.mode {
            ScheduleMode::Isolated => ctx.isolated(method, &order)?,
            ScheduleMode::Sequential => ctx.sequential(method, &order)?,
        };
        for o in outcomes {
            for (u, (loss, delta)) in o
                .session
                .losses
                .iter()
                .zip(&o.session.probe_delta_snr)
                .enumerate()
            {
                result.trajectory.push(TrajectoryRow {
                    scene_id: o.session.scene,
                    method: method.as_str().into(),
                    update_idx: u + 1,
                    loss: *loss,
                    probe_delta_snr_db: *delta,
                });
            }
            result.records.extend(o.records);
            result.states.insert((method, o.session.scene), o.state);
            result.sessions.push(o.session);
        }
    }
    if frozen.fingerprint() != base_hash {
        return Err(Error::Contract("backbone changed during adaptation".into()));
    }
    sort_rows(&mut result);
    Ok(result)
}

fn sort_rows(result: &mut ProtocolResult) {
    result.records.sort_by(|a, b| {
        (&a.method, &a.mode, a.scene_id, a.pair_id)
            .cmp(&(&b.method, &b.mode, b.scene_id, b.pair_id))
    });
    result.records.dedup();
    result.trajectory.sort_by(|a, b| {
        (&a.method, a.scene_id, a.update_idx).cmp(&(&b.method, b.scene_id, b.update_idx))
    });
}

/// Combines results of separate runs, dropping duplicate baseline rows.
pub fn merge_results(parts: Vec<ProtocolResult>) -> ProtocolResult {
    let mut out = ProtocolResult::default();
    for p in parts {
        out.sessions.extend(p.sessions);
        out.records.extend(p.records);
        out.trajectory.extend(p.trajectory);
        out.states.extend(p.states);
    }
    sort_rows(&mut out);
    out
}
