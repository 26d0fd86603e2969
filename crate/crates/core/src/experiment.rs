//! Split planning, the vanilla → FT1 → FT2 protocol and cross-validation.
//!
//! Random streams: cross-validation repeat `r` draws its permuted plan and
//! then a 64-bit run seed from `Prng::child(base, r)`, where `base` is the
//! first output of `Prng::from_seed(seed)` (so nearby seeds do not share
//! repeats). Within a run, phase `k`
//! (0 = initial training, 1 = first fine-tune, …) uses
//! `Prng::child(run_seed, k << 32)`; the initial phase first draws the
//! network initialization seed from its stream and then shuffles with it.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{ImageId, LabeledImage, SessionCorpus};
use crate::error::{Error, Result};
use crate::network::{build_default_network, FreezeMode, NetworkSpec, ParameterSet};
use crate::optim::{accuracy, train_phase, AdamState, EpochStats, TrainConfig, LR_FINE_TUNE, LR_INITIAL};
use crate::rng::Prng;

pub const INTRA_ROUNDS: usize = 5;
pub const INTER_SESSIONS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Units are rounds of one session.
    #[serde(alias = "intra")]
    IntraSession,
    /// Units are whole sessions.
    #[serde(alias = "inter")]
    InterSession,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" | "intra_session" => Ok(SplitMode::IntraSession),
            "inter" | "inter_session" => Ok(SplitMode::InterSession),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected intra or inter)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub train_units: Vec<u32>,
    pub ft_phases: Vec<Vec<u32>>,
    pub eval_unit: u32,
}

impl SplitPlan {
    /// Every unit of the plan in role order: training, each fine-tune phase, evaluation.
    pub fn units(&self) -> Vec<u32> {
        let mut all = self.train_units.clone();
        all.extend(self.ft_phases.iter().flatten());
        all.push(self.eval_unit);
        all
    }

    /// Roles must be non-empty and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.train_units.is_empty() || self.ft_phases.iter().any(|p| p.is_empty()) {
            return Err(Error::Plan("every role needs at least one unit".into()));
        }
        let units = self.units();
        let distinct: HashSet<u32> = units.iter().copied().collect();
        if distinct.len() != units.len() {
            return Err(Error::Plan(format!("units {units:?} are not pairwise disjoint")));
        }
        Ok(())
    }

    /// Relabels units through `perm`, where `perm[i]` replaces the i-th
    /// smallest unit of the plan.
    pub fn relabel(&self, perm: &[u32]) -> Result<SplitPlan> {
        let mut sorted = self.units();
        sorted.sort_unstable();
        if perm.len() != sorted.len() {
            return Err(Error::Plan(format!("permutation of {} units for a plan of {}", perm.len(), sorted.len())));
        }
        let map = |u: &u32| perm[sorted.binary_search(u).expect("unit belongs to plan")];
        let plan = SplitPlan {
            mode: self.mode,
            train_units: self.train_units.iter().map(map).collect(),
            ft_phases: self.ft_phases.iter().map(|p| p.iter().map(map).collect()).collect(),
            eval_unit: map(&self.eval_unit),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Rounds 1–2 train, rounds 3 and 4 fine-tune in turn, round 5 evaluates.
pub fn make_intra_plan(rounds_available: usize) -> Result<SplitPlan> {
    if rounds_available != INTRA_ROUNDS {
        return Err(Error::Plan(format!(
            "intra-session plan needs exactly {INTRA_ROUNDS} rounds in the session, found {rounds_available}"
        )));
    }
    Ok(SplitPlan {
        mode: SplitMode::IntraSession,
        train_units: vec![1, 2],
        ft_phases: vec![vec![3], vec![4]],
        eval_unit: 5,
    })
}

/// Sessions 1–4 train, sessions 5 and 6 fine-tune in turn, session 7 evaluates.
pub fn make_inter_plan(sessions_available: usize) -> Result<SplitPlan> {
    if sessions_available != INTER_SESSIONS {
        return Err(Error::Plan(format!(
            "inter-session plan needs exactly {INTER_SESSIONS} sessions, found {sessions_available}"
        )));
    }
    Ok(SplitPlan {
        mode: SplitMode::InterSession,
        train_units: vec![1, 2, 3, 4],
        ft_phases: vec![vec![5], vec![6]],
        eval_unit: 7,
    })
}

/// Reassigns units to roles with a uniformly random permutation, keeping each
/// role's size.
pub fn permute_plan(plan: &SplitPlan, rng: &mut Prng) -> SplitPlan {
    let mut perm = plan.units();
    perm.sort_unstable();
    rng.shuffle(&mut perm);
    plan.relabel(&perm).expect("a permutation of a valid plan is valid")
}

/// Like [`permute_plan`] but the evaluation unit stays fixed.
pub fn permute_plan_fixed_eval(plan: &SplitPlan, rng: &mut Prng) -> SplitPlan {
    let mut others: Vec<u32> = plan.units().into_iter().filter(|&u| u != plan.eval_unit).collect();
    others.sort_unstable();
    let mut shuffled = others.clone();
    rng.shuffle(&mut shuffled);
    let map = |u: &u32| shuffled[others.binary_search(u).expect("unit belongs to plan")];
    SplitPlan {
        mode: plan.mode,
        train_units: plan.train_units.iter().map(map).collect(),
        ft_phases: plan.ft_phases.iter().map(|p| p.iter().map(map).collect()).collect(),
        eval_unit: plan.eval_unit,
    }
}

fn default_epochs_initial() -> usize {
    20
}
fn default_epochs_ft() -> usize {
    10
}
fn default_lr_initial() -> f32 {
    LR_INITIAL
}
fn default_lr_ft() -> f32 {
    LR_FINE_TUNE
}
fn default_batch() -> usize {
    32
}
fn default_freeze() -> FreezeMode {
    FreezeMode::FreezeConvSections
}
fn default_repeats() -> usize {
    5
}
fn default_seed() -> u64 {
    1
}
fn default_session() -> u32 {
    1
}
fn default_true() -> bool {
    true
}
const FAST_EPOCHS_INITIAL: usize = 1;
const FAST_EPOCHS_FT: usize = 90;
const FAST_BATCH: usize = 16;

fn default_mode() -> SplitMode {
    SplitMode::InterSession
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_mode")]
    pub mode: SplitMode,
    #[serde(default = "default_epochs_initial")]
    pub epochs_initial: usize,
    #[serde(default = "default_epochs_ft")]
    pub epochs_per_ft: usize,
    #[serde(default = "default_lr_initial")]
    pub lr_initial: f32,
    #[serde(default = "default_lr_ft")]
    pub lr_ft: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_freeze")]
    pub freeze_mode: FreezeMode,
    #[serde(default = "default_repeats")]
    pub cv_repeats: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Session whose rounds form the units of an intra-session experiment.
    #[serde(default = "default_session")]
    pub intra_session: u32,
    /// Whether cross-validation also moves the evaluation unit.
    #[serde(default = "default_true")]
    pub randomize_eval: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: default_mode(),
            epochs_initial: default_epochs_initial(),
            epochs_per_ft: default_epochs_ft(),
            lr_initial: default_lr_initial(),
            lr_ft: default_lr_ft(),
            batch_size: default_batch(),
            freeze_mode: default_freeze(),
            cv_repeats: default_repeats(),
            seed: default_seed(),
            intra_session: default_session(),
            randomize_eval: default_true(),
        }
    }
}

impl ExperimentConfig {
    /// Short schedule for the 64×64 fast corpus profile.
    ///
    /// Both modes take the same number of optimizer steps per phase. An
    /// inter-session run trains on 4 sessions (20 rounds) and fine-tunes on
    /// whole sessions, an intra-session run trains on 2 rounds and fine-tunes
    /// on single rounds, so intra epochs are 10× (initial) and 5× (per
    /// fine-tune phase) the inter ones.
    pub fn fast_profile(mode: SplitMode) -> Self {
        let (epochs_initial, epochs_per_ft) = match mode {
            SplitMode::InterSession => (FAST_EPOCHS_INITIAL, FAST_EPOCHS_FT),
            SplitMode::IntraSession => (10 * FAST_EPOCHS_INITIAL, 5 * FAST_EPOCHS_FT),
        };
        ExperimentConfig {
            mode,
            epochs_initial,
            epochs_per_ft,
            batch_size: FAST_BATCH,
            cv_repeats: 5,
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_ft < self.lr_initial) {
            return bad(format!("lr_ft ({}) must be below lr_initial ({})", self.lr_ft, self.lr_initial));
        }
        if !(self.lr_ft >= 0.0) {
            return bad(format!("lr_ft ({}) must be non-negative", self.lr_ft));
        }
        if self.cv_repeats == 0 {
            return bad("cv_repeats must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        Ok(())
    }

    /// The unpermuted plan for this mode and corpus.
    pub fn base_plan(&self, corpus: &SessionCorpus) -> Result<SplitPlan> {
        match self.mode {
            SplitMode::IntraSession => {
                let session = corpus.session(self.intra_session).ok_or_else(|| {
                    Error::Plan(format!(
                        "intra-session experiment uses session {}, corpus has {}",
                        self.intra_session,
                        corpus.sessions().len()
                    ))
                })?;
                make_intra_plan(session.rounds.len())
            }
            SplitMode::InterSession => make_inter_plan(corpus.sessions().len()),
        }
    }

    fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
        }
    }
}

/// Images of one role, resolved against a corpus.
pub fn unit_images<'a>(
    corpus: &'a SessionCorpus,
    mode: SplitMode,
    intra_session: u32,
    units: &[u32],
) -> Result<Vec<&'a LabeledImage>> {
    let mut out = Vec::new();
    for &u in units {
        match mode {
            SplitMode::IntraSession => {
                let round = corpus.round(intra_session, u).ok_or_else(|| {
                    Error::Plan(format!("round {u} of session {intra_session} not in corpus"))
                })?;
                out.extend(round.images.iter());
            }
            SplitMode::InterSession => {
                let session = corpus
                    .session(u)
                    .ok_or_else(|| Error::Plan(format!("session {u} not in corpus")))?;
                out.extend(session.rounds.iter().flat_map(|r| r.images.iter()));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Plan("no units selected".into()));
    }
    Ok(out)
}

/// A plan resolved to concrete images.
#[derive(Debug)]
pub struct PlanData<'a> {
    pub train: Vec<&'a LabeledImage>,
    pub ft: Vec<Vec<&'a LabeledImage>>,
    pub eval: Vec<&'a LabeledImage>,
}

impl<'a> PlanData<'a> {
    pub fn resolve(corpus: &'a SessionCorpus, plan: &SplitPlan, intra_session: u32) -> Result<Self> {
        plan.validate()?;
        let get = |units: &[u32]| unit_images(corpus, plan.mode, intra_session, units);
        let data = PlanData {
            train: get(&plan.train_units)?,
            ft: plan.ft_phases.iter().map(|p| get(p)).collect::<Result<_>>()?,
            eval: get(&[plan.eval_unit])?,
        };
        data.check_leakage()?;
        Ok(data)
    }

    /// Fails if any evaluation image also appears in a training or fine-tuning role.
    pub fn check_leakage(&self) -> Result<()> {
        let seen: HashSet<ImageId> = self
            .train
            .iter()
            .chain(self.ft.iter().flatten())
            .map(|i| i.id())
            .collect();
        match self.eval.iter().find(|i| seen.contains(&i.id())) {
            Some(img) => Err(Error::Leakage(format!("{:?}", img.id()))),
            None => Ok(()),
        }
    }
}

/// Random stream for phase `phase` of a protocol run.
pub fn phase_rng(run_seed: u64, phase: usize) -> Prng {
    Prng::child(run_seed, (phase as u64) << 32)
}

/// Initial training: fresh default network, everything trainable, `lr_initial`.
pub fn initial_phase(
    config: &ExperimentConfig,
    input_shape: [usize; 3],
    class_count: usize,
    run_seed: u64,
    data: &[&LabeledImage],
) -> Result<(NetworkSpec, ParameterSet, Vec<EpochStats>)> {
    let mut rng = phase_rng(run_seed, 0);
    let (spec, mut params) = build_default_network(input_shape, class_count, rng.next_u64())?;
    let mut state = AdamState::new(&params, config.lr_initial);
    let trace = train_phase(
        &spec,
        &mut params,
        &mut state,
        data,
        config.train_config(config.epochs_initial),
        &mut rng,
    )?;
    Ok((spec, params, trace))
}

/// Fine-tune phase `phase` (1-based): apply the freeze mode, fresh Adam state at
/// `lr_ft`, train on `data`.
pub fn fine_tune_phase(
    config: &ExperimentConfig,
    spec: &NetworkSpec,
    params: &mut ParameterSet,
    run_seed: u64,
    phase: usize,
    data: &[&LabeledImage],
) -> Result<Vec<EpochStats>> {
    let mut rng = phase_rng(run_seed, phase);
    params.set_freeze_boundary(config.freeze_mode);
    let mut state = AdamState::new(params, config.lr_ft);
    train_phase(
        spec,
        params,
        &mut state,
        data,
        config.train_config(config.epochs_per_ft),
        &mut rng,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub phase: String,
    pub accuracy: f64,
    pub params: ParameterSet,
}

/// Full record of one protocol execution.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub spec: NetworkSpec,
    pub phases: Vec<PhaseOutcome>,
}

impl ProtocolRun {
    pub fn accuracies(&self) -> Vec<f64> {
        self.phases.iter().map(|p| p.accuracy).collect()
    }
}

pub fn phase_name(index: usize) -> String {
    if index == 0 {
        "vanilla".into()
    } else {
        format!("ft{index}")
    }
}

/// Trains the vanilla model on the plan's training units, then fine-tunes it
/// on each fine-tune unit in turn, evaluating on the held-out unit after
/// every phase.
pub fn run_protocol(
    config: &ExperimentConfig,
    corpus: &SessionCorpus,
    plan: &SplitPlan,
    run_seed: u64,
) -> Result<ProtocolRun> {
    config.validate()?;
    let data = PlanData::resolve(corpus, plan, config.intra_session)?;
    let (h, w) = corpus.resolution();
    let (spec, mut params, _) =
        initial_phase(config, [1, h, w], crate::data::CLASS_COUNT, run_seed, &data.train)?;
    let mut phases = vec![PhaseOutcome {
        phase: phase_name(0),
        accuracy: accuracy(&spec, &params, &data.eval)?,
        params: params.clone(),
    }];
    for (k, ft) in data.ft.iter().enumerate() {
        fine_tune_phase(config, &spec, &mut params, run_seed, k + 1, ft)?;
        phases.push(PhaseOutcome {
            phase: phase_name(k + 1),
            accuracy: accuracy(&spec, &params, &data.eval)?,
            params: params.clone(),
        });
    }
    Ok(ProtocolRun { spec, phases })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator) across repeats.
    pub std: f64,
    /// False when there is a single repeat; `std` is then reported as 0.
    pub std_defined: bool,
}

impl PhaseReport {
    pub fn from_accuracies(phase: impl Into<String>, accuracies: Vec<f64>) -> Self {
        let (mean, std, std_defined) = mean_and_sample_std(&accuracies);
        PhaseReport {
            phase: phase.into(),
            accuracies,
            mean,
            std,
            std_defined,
        }
    }
}

/// Mean and n − 1 standard deviation, summing in list order.
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0, false);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, false);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt(), true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub repeat: usize,
    pub run_seed: u64,
    pub plan: SplitPlan,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub mode: SplitMode,
    pub repeats: Vec<RepeatRecord>,
    pub phases: Vec<PhaseReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CvTiming {
    pub total_seconds: f64,
    pub per_repeat_seconds: Vec<f64>,
}

/// Runs the protocol `cv_repeats` times on independently permuted plans and
/// aggregates accuracy per phase in repeat order.
pub fn cross_validate(config: &ExperimentConfig, corpus: &SessionCorpus) -> Result<(CvReport, CvTiming)> {
    cross_validate_with(config, corpus, |_, _| Ok(()))
}

/// [`cross_validate`] with a hook observing every finished run.
pub fn cross_validate_with(
    config: &ExperimentConfig,
    corpus: &SessionCorpus,
    mut on_run: impl FnMut(&RepeatRecord, &ProtocolRun) -> Result<()>,
) -> Result<(CvReport, CvTiming)> {
    config.validate()?;
    let base = config.base_plan(corpus)?;
    let started = Instant::now();
    let mut timing = CvTiming::default();
    let mut repeats = Vec::with_capacity(config.cv_repeats);
    let stream_base = Prng::from_seed(config.seed).next_u64();
    for r in 0..config.cv_repeats {
        let t0 = Instant::now();
        let mut rng = Prng::child(stream_base, r as u64);
        let plan = if config.randomize_eval {
            permute_plan(&base, &mut rng)
        } else {
            permute_plan_fixed_eval(&base, &mut rng)
        };
        let run_seed = rng.next_u64();
        let run = run_protocol(config, corpus, &plan, run_seed)?;
        let record = RepeatRecord {
            repeat: r,
            run_seed,
            plan,
            accuracies: run.accuracies(),
        };
        on_run(&record, &run)?;
        repeats.push(record);
        timing.per_repeat_seconds.push(t0.elapsed().as_secs_f64());
    }
    timing.total_seconds = started.elapsed().as_secs_f64();
    let phase_count = base.ft_phases.len() + 1;
    let phases = (0..phase_count)
        .map(|k| PhaseReport::from_accuracies(phase_name(k), repeats.iter().map(|r| r.accuracies[k]).collect()))
        .collect();
    Ok((
        CvReport {
            mode: config.mode,
            repeats,
            phases,
        },
        timing,
    ))
}
