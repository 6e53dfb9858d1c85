//! Pretraining and the alternating two-step optimization.
//!
//! Step A updates `F` and `C_N` on the supervised loss over the augmented
//! pool. Step B updates `F` alone on `M_s + lambda (M_c - M_d)`; it borrows
//! `C_N` immutably, so the classifier freeze holds by construction.
//! Prototypes and pseudo-labels are refreshed once per epoch (per episode
//! in episodic mode).

use std::time::Instant;

use log::{debug, warn};
use ndarray::{ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Serialize;

use crate::align::{self, AlignmentSwitches, AlignmentTerms, PseudoLabels};
use crate::augment::{
    build_augmented_pool, propagated_samples, AugmentationConfig, AugmentedPool, AugmentedSample,
    PoolFlags, Provenance,
};
use crate::dataset::{apply_split, Domain, EmbeddingDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport, OverallMode};
use crate::graph::{self, GraphConfig, SigmaMode};
use crate::network::{
    classifier_loss, init_params, supervised_loss, AdamConfig, ClassifierParams, GeneratorParams,
    ModelState, NetworkDims, OptimizerState,
};
use crate::rng::{self, FktRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Global,
    Episodic,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global" => Ok(TrainMode::Global),
            "episodic" => Ok(TrainMode::Episodic),
            other => Err(format!("unknown mode `{other}` (global | episodic)")),
        }
    }
}

/// How Step A and Step B interleave within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alternation {
    /// A, B, A, B, ...
    #[default]
    Iteration,
    /// all A iterations, then all B iterations
    Epoch,
}

impl std::str::FromStr for Alternation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "iteration" => Ok(Alternation::Iteration),
            "epoch" => Ok(Alternation::Epoch),
            other => Err(format!("unknown alternation `{other}` (iteration | epoch)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    /// Majority-class rows per class, without replacement within an epoch.
    pub p: usize,
    /// Minority-class rows per class, with replacement.
    pub q: usize,
    /// Target rows per episode.
    pub e_t: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            p: 4,
            q: 4,
            e_t: 64,
        }
    }
}

impl EpisodeSpec {
    /// `e_s = |Q^m| p + |Q^f| q`.
    pub fn source_size(&self, majority_classes: usize, minority_classes: usize) -> usize {
        majority_classes * self.p + minority_classes * self.q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub mix_count: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    pub tau: f64,
    pub mode: TrainMode,
    pub episode: EpisodeSpec,
    /// Defaults to `max(1, n_t / e_t)`.
    pub episodes_per_epoch: Option<usize>,
    pub alternation: Alternation,
    pub row_normalize: bool,
    pub sigma: SigmaMode,
    pub ep_minority_only: bool,
    pub confidence_threshold: Option<f64>,
    pub hidden: usize,
    pub feature: usize,
    pub cls_hidden: usize,
    pub overall: OverallMode,
    /// Evaluate every this many epochs (and always at the last one).
    pub eval_every: usize,
    pub record_timing: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lambda: 0.1,
            lr: 1e-3,
            pretrain_lr: 1e-4,
            pretrain_epochs: 2000,
            epochs: 30,
            iters_per_epoch: 1,
            mix_count: 5,
            beta_a: 2.0,
            beta_b: 2.0,
            tau: 10.0,
            mode: TrainMode::Global,
            episode: EpisodeSpec::default(),
            episodes_per_epoch: None,
            alternation: Alternation::Iteration,
            row_normalize: true,
            sigma: SigmaMode::VarSquaredDistance,
            ep_minority_only: false,
            confidence_threshold: None,
            hidden: crate::network::DEFAULT_HIDDEN,
            feature: crate::network::DEFAULT_FEATURE,
            cls_hidden: crate::network::DEFAULT_CLS_HIDDEN,
            overall: OverallMode::SampleWeighted,
            eval_every: 1,
            record_timing: false,
            threads: 1,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return bad("Beta parameters must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.iters_per_epoch == 0 || self.eval_every == 0 {
            return bad("iters_per_epoch and eval_every must be at least 1".into());
        }
        if self.mode == TrainMode::Episodic
            && (self.episode.p == 0 || self.episode.q == 0 || self.episode.e_t == 0)
        {
            return bad("episode sizes p, q, e_t must be at least 1".into());
        }
        if self.hidden == 0 || self.feature == 0 || self.cls_hidden == 0 {
            return bad("network widths must be positive".into());
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            alpha: self.alpha,
            sigma: self.sigma,
            row_normalize: self.row_normalize,
            ep_minority_only: self.ep_minority_only,
            threads: self.threads,
        }
    }

    pub fn augmentation_config(&self) -> AugmentationConfig {
        AugmentationConfig {
            beta_a: self.beta_a,
            beta_b: self.beta_b,
            mix_count: self.mix_count,
            row_normalize: self.row_normalize,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            tau: self.tau,
            deploy_mode: false,
            overall: self.overall,
        }
    }

    pub fn dims(&self, input: usize, classes: usize) -> NetworkDims {
        NetworkDims {
            input,
            hidden: self.hidden,
            feature: self.feature,
            cls_hidden: self.cls_hidden,
            classes,
        }
    }
}

/// Component switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_cpa: bool,
    pub use_cpa_intra: bool,
    pub use_cpa_inter: bool,
    pub use_cda: bool,
    pub use_cda_s: bool,
    pub use_cda_t: bool,
    pub use_cda_mix: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_cpa: true,
            use_cpa_intra: true,
            use_cpa_inter: true,
            use_cda: true,
            use_cda_s: true,
            use_cda_t: true,
            use_cda_mix: true,
        }
    }

    pub fn source_only() -> Self {
        Self {
            use_cpa: false,
            use_cda: false,
            ..Self::full()
        }
        .normalized()
    }

    pub fn without_cpa() -> Self {
        Self {
            use_cpa: false,
            ..Self::full()
        }
        .normalized()
    }

    pub fn without_cda() -> Self {
        Self {
            use_cda: false,
            ..Self::full()
        }
        .normalized()
    }

    /// Parent switches turned off clear their sub-switches.
    pub fn normalized(mut self) -> Self {
        if !self.use_cpa {
            self.use_cpa_intra = false;
            self.use_cpa_inter = false;
        }
        if !self.use_cda {
            self.use_cda_s = false;
            self.use_cda_t = false;
            self.use_cda_mix = false;
        }
        self
    }

    pub fn pool_flags(&self) -> PoolFlags {
        let f = self.normalized();
        PoolFlags {
            ep: f.use_cda_s,
            kp: f.use_cda_t,
            mix: f.use_cda_mix,
        }
    }

    pub fn switches(&self) -> AlignmentSwitches {
        let f = self.normalized();
        AlignmentSwitches {
            intra: f.use_cpa_intra,
            inter: f.use_cpa_inter,
        }
    }

    fn any_synthetic(&self) -> bool {
        let p = self.pool_flags();
        p.ep || p.kp || p.mix
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub m_s: f64,
    pub m_c: Option<f64>,
    pub m_d: Option<f64>,
    pub objective: f64,
    pub a_f: Option<f64>,
    pub a_m: Option<f64>,
    pub a_o: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub pretrain_losses: Vec<f64>,
    pub final_metrics: Option<MetricsReport>,
    /// Propagation graphs constructed during training.
    pub graph_builds: usize,
    /// Log-clamp activations in the supervised loss.
    pub clamp_warnings: usize,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Source rows after the minority subsampling, plus the target domain.
#[derive(Debug, Clone)]
pub struct Task {
    pub source: EmbeddingDataset,
    pub source_labels: Vec<usize>,
    /// Positions of minority-class rows within `source`.
    pub minority_rows: Vec<usize>,
    pub target: EmbeddingDataset,
    pub split: SplitSpec,
}

impl Task {
    pub fn new(
        source: &EmbeddingDataset,
        target: &EmbeddingDataset,
        split: &SplitSpec,
        seed: u64,
    ) -> Result<Self> {
        if source.domain() != Domain::Source || target.domain() != Domain::Target {
            return Err(Error::invalid("expected a source and a target dataset"));
        }
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: source.dim(),
                found: target.dim(),
            });
        }
        if source.class_count() != target.class_count() {
            return Err(Error::DimensionMismatch {
                expected: source.class_count(),
                found: target.class_count(),
            });
        }
        let kept = apply_split(source, split, seed)?.kept_rows();
        let source = source.select(&kept)?;
        let source_labels = source.dense_labels().expect("source is fully labeled");
        let minority_rows = source_labels
            .iter()
            .enumerate()
            .filter(|(_, &c)| split.is_minority(c))
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            source,
            source_labels,
            minority_rows,
            target: target.clone(),
            split: split.clone(),
        })
    }

    pub fn classes(&self) -> usize {
        self.source.class_count()
    }
}

pub fn init_model(task: &Task, hp: &Hyperparams) -> Result<ModelState> {
    let dims = hp.dims(task.source.dim(), task.classes());
    let (gen, cls) = init_params(&dims, hp.seed)?;
    let mut model = ModelState::new(
        dims,
        gen,
        cls,
        task.split.minority_classes().to_vec(),
        hp.seed,
    );
    refresh_prototypes(
        &mut model,
        &AugmentedPool::real_only(
            task.source.embeddings().to_owned(),
            task.source_labels.clone(),
        ),
    );
    Ok(model)
}

/// Full-batch Adam on the real source rows. Returns the per-epoch losses.
pub fn pretrain(
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    gen: &mut GeneratorParams,
    cls: &mut ClassifierParams,
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut opt = OptimizerState::new(gen, cls, AdamConfig::with_lr(lr));
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let out = supervised_loss(z, labels, gen, cls)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "pretraining loss at epoch {epoch}"
            )));
        }
        opt.step_generator(gen, &out.grad_gen)?;
        opt.step_classifier(cls, &out.grad_cls)?;
        losses.push(out.loss);
    }
    Ok(losses)
}

pub fn pretrain_model(task: &Task, model: &mut ModelState, hp: &Hyperparams) -> Result<Vec<f64>> {
    let losses = pretrain(
        task.source.embeddings(),
        &task.source_labels,
        &mut model.generator,
        &mut model.classifier,
        hp.pretrain_epochs,
        hp.pretrain_lr,
    )?;
    refresh_prototypes(
        model,
        &AugmentedPool::real_only(
            task.source.embeddings().to_owned(),
            task.source_labels.clone(),
        ),
    );
    Ok(losses)
}

/// One Adam update of `F` and `C_N` on `M_s` over the pool. Returns the
/// loss at the pre-step parameters and the number of clamped samples.
pub fn step_a(
    pool: &AugmentedPool,
    gen: &mut GeneratorParams,
    cls: &mut ClassifierParams,
    opt: &mut OptimizerState,
) -> Result<(f64, usize)> {
    let out = supervised_loss(pool.embeddings.view(), &pool.labels, gen, cls)?;
    opt.step_generator(gen, &out.grad_gen)?;
    opt.step_classifier(cls, &out.grad_cls)?;
    Ok((out.loss, out.clamped))
}

/// Value and gradients of `M_s + lambda (M_c - M_d)` at one snapshot.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub m_s: f64,
    pub terms: AlignmentTerms,
    pub objective: f64,
    pub grad_gen: GeneratorParams,
    pub grad_cls: ClassifierParams,
    pub clamped: usize,
}

pub fn objective(
    pool: &AugmentedPool,
    target_z: ArrayView2<'_, f64>,
    pseudo: &PseudoLabels,
    gen: &GeneratorParams,
    cls: &ClassifierParams,
    lambda: f64,
    switches: AlignmentSwitches,
) -> Result<ObjectiveEval> {
    let z = pool.embeddings.view();
    let src_trace = gen.trace(z);
    let ce = classifier_loss(cls, src_trace.features(), &pool.labels, true);
    if !ce.loss.is_finite() {
        return Err(Error::NonFinite("supervised loss".into()));
    }
    let mut d_source = ce.d_features;
    let active = lambda > 0.0 && (switches.intra || switches.inter);
    let (terms, grad_target) = if active {
        let tgt_trace = gen.trace(target_z);
        let al = align::alignment(
            src_trace.features(),
            &pool.labels,
            &pool.provenance,
            tgt_trace.features(),
            pseudo,
            cls.output_dim(),
            switches,
        )?;
        d_source.scaled_add(lambda, &al.d_source);
        let d_target = al.d_target * lambda;
        let g = gen.backprop(target_z, &tgt_trace, d_target.view());
        (al.terms, Some(g))
    } else {
        (
            AlignmentTerms {
                m_c: None,
                m_d: None,
                active_classes: Vec::new(),
                active_pairs: 0,
            },
            None,
        )
    };
    let mut grad_gen = gen.backprop(z, &src_trace, d_source.view());
    if let Some(g) = grad_target {
        grad_gen.add_scaled(1.0, &g);
    }
    let objective = ce.loss + lambda * terms.combined();
    Ok(ObjectiveEval {
        m_s: ce.loss,
        terms,
        objective,
        grad_gen,
        grad_cls: ce.grad_cls.expect("requested"),
        clamped: ce.clamped,
    })
}

/// One Adam update of `F` only on the full objective. `C_N` is read-only.
#[allow(clippy::too_many_arguments)]
pub fn step_b(
    pool: &AugmentedPool,
    target_z: ArrayView2<'_, f64>,
    pseudo: &PseudoLabels,
    gen: &mut GeneratorParams,
    cls: &ClassifierParams,
    opt: &mut OptimizerState,
    lambda: f64,
    switches: AlignmentSwitches,
) -> Result<ObjectiveEval> {
    let eval = objective(pool, target_z, pseudo, gen, cls, lambda, switches)?;
    if !eval.objective.is_finite() {
        return Err(Error::NonFinite("step B objective".into()));
    }
    opt.step_generator(gen, &eval.grad_gen)?;
    Ok(eval)
}

fn refresh_prototypes(model: &mut ModelState, pool: &AugmentedPool) {
    let feats = model.generator.features(pool.embeddings.view());
    model.prototypes = align::amended_prototypes(
        feats.view(),
        &pool.labels,
        &pool.provenance,
        model.dims.classes,
    );
}

/// Per-epoch bookkeeping shared by both modes.
struct EpochStats {
    m_s: f64,
    terms: Option<AlignmentTerms>,
    objective: f64,
}

struct Trainer<'a> {
    task: &'a Task,
    hp: &'a Hyperparams,
    flags: AblationFlags,
    opt: OptimizerState,
    report: TrainReport,
}

impl<'a> Trainer<'a> {
    fn alignment_active(&self) -> bool {
        let s = self.flags.switches();
        self.hp.lambda > 0.0 && (s.intra || s.inter)
    }

    /// Refresh prototypes and pseudo-labels, then run the A/B schedule.
    fn optimize_on(
        &mut self,
        model: &mut ModelState,
        pool: &AugmentedPool,
        target_z: ArrayView2<'_, f64>,
    ) -> Result<EpochStats> {
        refresh_prototypes(model, pool);
        let active = self.alignment_active();
        let pseudo = if active {
            let tf = model.generator.features(target_z);
            Some(align::pseudo_labels(
                tf.view(),
                &model.prototypes,
                self.hp.tau,
                self.hp.confidence_threshold,
            )?)
        } else {
            None
        };
        let switches = self.flags.switches();
        let mut last_a = 0.0;
        let mut last_b: Option<ObjectiveEval> = None;
        let iters = self.hp.iters_per_epoch;
        let mut run_b = |s: &mut Self, model: &mut ModelState| -> Result<()> {
            if let Some(pseudo) = &pseudo {
                let out = step_b(
                    pool,
                    target_z,
                    pseudo,
                    &mut model.generator,
                    &model.classifier,
                    &mut s.opt,
                    s.hp.lambda,
                    switches,
                )?;
                s.report.clamp_warnings += out.clamped;
                model.step += 1;
                last_b = Some(out);
            }
            Ok(())
        };
        match self.hp.alternation {
            Alternation::Iteration => {
                for _ in 0..iters {
                    let (loss, clamped) = step_a(
                        pool,
                        &mut model.generator,
                        &mut model.classifier,
                        &mut self.opt,
                    )?;
                    self.report.clamp_warnings += clamped;
                    model.step += 1;
                    last_a = loss;
                    run_b(self, model)?;
                }
            }
            Alternation::Epoch => {
                for _ in 0..iters {
                    let (loss, clamped) = step_a(
                        pool,
                        &mut model.generator,
                        &mut model.classifier,
                        &mut self.opt,
                    )?;
                    self.report.clamp_warnings += clamped;
                    model.step += 1;
                    last_a = loss;
                }
                for _ in 0..iters {
                    run_b(self, model)?;
                }
            }
        }
        Ok(match last_b {
            Some(b) => EpochStats {
                m_s: b.m_s,
                objective: b.objective,
                terms: Some(b.terms),
            },
            None => EpochStats {
                m_s: last_a,
                objective: last_a,
                terms: None,
            },
        })
    }

    fn record(
        &mut self,
        model: &ModelState,
        epoch: usize,
        stats: EpochStats,
        started: Instant,
    ) -> Result<()> {
        let last = epoch == self.hp.epochs;
        let metrics = if self.task.target.is_fully_labeled()
            && (last || epoch.is_multiple_of(self.hp.eval_every))
        {
            Some(evaluate(
                model,
                &self.task.target,
                &self.task.split.minority_mask(),
                &self.hp.eval_options(),
            )?)
        } else {
            None
        };
        let wall_ms = if self.hp.record_timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        debug!(
            "epoch {epoch}: m_s={:.5} objective={:.5}",
            stats.m_s, stats.objective
        );
        self.report.epochs.push(EpochRecord {
            epoch,
            m_s: stats.m_s,
            m_c: stats.terms.as_ref().and_then(|t| t.m_c),
            m_d: stats.terms.as_ref().and_then(|t| t.m_d),
            objective: stats.objective,
            a_f: metrics.as_ref().and_then(|m| m.a_f),
            a_m: metrics.as_ref().and_then(|m| m.a_m),
            a_o: metrics.as_ref().map(|m| m.a_o),
            wall_ms,
        });
        if last {
            self.report.final_metrics = metrics;
        }
        Ok(())
    }

    fn propagated(
        &mut self,
        source_z: ArrayView2<'_, f64>,
        labels: &[usize],
        minority_rows: &[usize],
        target_z: ArrayView2<'_, f64>,
    ) -> Result<(Vec<AugmentedSample>, Vec<AugmentedSample>)> {
        let (ep, kp, builds) = propagate_seeds(
            source_z,
            labels,
            minority_rows,
            target_z,
            self.hp,
            self.flags,
        )?;
        self.report.graph_builds += builds;
        Ok((ep, kp))
    }

    fn run_global(&mut self, model: &mut ModelState) -> Result<()> {
        let task = self.task;
        let source_z = task.source.embeddings();
        let target_z = task.target.embeddings();
        let (ep, kp) =
            self.propagated(source_z, &task.source_labels, &task.minority_rows, target_z)?;
        let aug = self.hp.augmentation_config();
        let mut mix_rng = rng::stream(self.hp.seed, Stream::Mixup);
        for epoch in 1..=self.hp.epochs {
            let started = Instant::now();
            let pool = build_augmented_pool(
                source_z,
                &task.source_labels,
                &ep,
                &kp,
                &aug,
                &mut mix_rng,
                self.flags.pool_flags(),
            )?;
            let stats = self.optimize_on(model, &pool, target_z)?;
            refresh_prototypes(model, &pool);
            self.record(model, epoch, stats, started)?;
        }
        Ok(())
    }

    fn run_episodic(&mut self, model: &mut ModelState) -> Result<()> {
        let task = self.task;
        let spec = self.hp.episode;
        let n_t = task.target.len();
        let episodes = self
            .hp
            .episodes_per_epoch
            .unwrap_or_else(|| (n_t / spec.e_t).max(1));
        let e_s = spec.source_size(task.split.majority_classes().len(), task.split.ways());
        debug!(
            "episodic training: {episodes} episodes of e_s={e_s}, e_t={}",
            spec.e_t
        );
        let by_class: Vec<Vec<usize>> = (0..task.classes())
            .map(|c| task.source.rows_of_class(c))
            .collect();
        let aug = self.hp.augmentation_config();
        let mut rng = rng::stream(self.hp.seed, Stream::Episode);
        let mut mix_rng = rng::stream(self.hp.seed, Stream::Mixup);
        let source_z = task.source.embeddings();
        let target_z = task.target.embeddings();

        for epoch in 1..=self.hp.epochs {
            let started = Instant::now();
            let mut queues: Vec<Vec<usize>> = by_class
                .iter()
                .map(|rows| {
                    let mut r = rows.clone();
                    r.shuffle(&mut rng);
                    r
                })
                .collect();
            let mut epoch_synthetic: Vec<AugmentedSample> = Vec::new();
            let mut stats = None;
            for _ in 0..episodes {
                let rows = sample_episode_sources(task, &by_class, &mut queues, spec, &mut rng);
                let tgt_rows = if n_t <= spec.e_t {
                    (0..n_t).collect::<Vec<_>>()
                } else {
                    let mut v = index::sample(&mut rng, n_t, spec.e_t).into_vec();
                    v.sort_unstable();
                    v
                };
                let ep_src = source_z.select(Axis(0), &rows);
                let ep_labels: Vec<usize> = rows.iter().map(|&r| task.source_labels[r]).collect();
                let ep_minority: Vec<usize> = ep_labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| task.split.is_minority(c))
                    .map(|(i, _)| i)
                    .collect();
                let ep_tgt = target_z.select(Axis(0), &tgt_rows);
                let (mut ep, mut kp) =
                    self.propagated(ep_src.view(), &ep_labels, &ep_minority, ep_tgt.view())?;
                // seed rows refer to the full source from here on
                for s in ep.iter_mut().chain(kp.iter_mut()) {
                    s.seed_row = rows[s.seed_row];
                }
                let pool = build_augmented_pool(
                    ep_src.view(),
                    &ep_labels,
                    &ep,
                    &kp,
                    &aug,
                    &mut mix_rng,
                    self.flags.pool_flags(),
                )?;
                stats = Some(self.optimize_on(model, &pool, ep_tgt.view())?);
                epoch_synthetic.extend(synthetic_of(&pool));
            }
            // evaluation prototypes: all real rows plus this epoch's synthetic samples
            let mut full =
                AugmentedPool::real_only(source_z.to_owned(), task.source_labels.clone());
            full.extend(&epoch_synthetic);
            refresh_prototypes(model, &full);
            self.record(model, epoch, stats.expect("at least one episode"), started)?;
        }
        Ok(())
    }
}

/// EP and KP samples for the minority seeds, plus the number of graphs
/// built (zero when nothing is needed).
fn propagate_seeds(
    source_z: ArrayView2<'_, f64>,
    labels: &[usize],
    minority_rows: &[usize],
    target_z: ArrayView2<'_, f64>,
    hp: &Hyperparams,
    flags: AblationFlags,
) -> Result<(Vec<AugmentedSample>, Vec<AugmentedSample>, usize)> {
    if minority_rows.is_empty() || !flags.any_synthetic() {
        return Ok((Vec::new(), Vec::new(), 0));
    }
    let gcfg = hp.graph_config();
    let ep = graph::propagate_within_source(source_z, minority_rows, &gcfg)?;
    let minority_z = source_z.select(Axis(0), minority_rows);
    let kp = graph::propagate_cross_domain(minority_z.view(), target_z, &gcfg)?;
    Ok((
        propagated_samples(ep.view(), minority_rows, labels, Provenance::EpSource),
        propagated_samples(kp.view(), minority_rows, labels, Provenance::KpCross),
        2,
    ))
}

/// The global-mode augmented pool over raw embeddings, as used in the
/// first training epoch.
pub fn augment_task(task: &Task, hp: &Hyperparams, flags: AblationFlags) -> Result<AugmentedPool> {
    hp.validate()?;
    let flags = flags.normalized();
    let (ep, kp, _) = propagate_seeds(
        task.source.embeddings(),
        &task.source_labels,
        &task.minority_rows,
        task.target.embeddings(),
        hp,
        flags,
    )?;
    let mut rng = rng::stream(hp.seed, Stream::Mixup);
    build_augmented_pool(
        task.source.embeddings(),
        &task.source_labels,
        &ep,
        &kp,
        &hp.augmentation_config(),
        &mut rng,
        flags.pool_flags(),
    )
}

fn synthetic_of(pool: &AugmentedPool) -> Vec<AugmentedSample> {
    (0..pool.len())
        .filter(|&i| pool.provenance[i] != Provenance::Real)
        .map(|i| AugmentedSample {
            embedding: pool.embeddings.row(i).to_owned(),
            label: pool.labels[i],
            provenance: pool.provenance[i],
            seed_row: pool.seed_rows[i].expect("synthetic rows carry a seed"),
            gamma: pool.gammas[i],
        })
        .collect()
}

/// `p` rows per majority class drawn from per-epoch shuffled queues
/// (refilled when exhausted) and `q` rows per minority class with
/// replacement.
fn sample_episode_sources(
    task: &Task,
    by_class: &[Vec<usize>],
    queues: &mut [Vec<usize>],
    spec: EpisodeSpec,
    rng: &mut FktRng,
) -> Vec<usize> {
    let mut rows = Vec::new();
    for (c, class_rows) in by_class.iter().enumerate() {
        if class_rows.is_empty() {
            continue;
        }
        if task.split.is_minority(c) {
            for _ in 0..spec.q {
                rows.push(class_rows[rng.random_range(0..class_rows.len())]);
            }
        } else {
            for _ in 0..spec.p.min(class_rows.len()) {
                if queues[c].is_empty() {
                    queues[c] = class_rows.clone();
                    queues[c].shuffle(rng);
                }
                rows.push(queues[c].pop().expect("refilled"));
            }
        }
    }
    rows
}

/// Post-pretraining optimization of an initialized model.
pub fn train_from(
    task: &Task,
    model: &mut ModelState,
    hp: &Hyperparams,
    flags: AblationFlags,
) -> Result<TrainReport> {
    hp.validate()?;
    let flags = flags.normalized();
    if task.minority_rows.is_empty() && flags.any_synthetic() {
        warn!("no minority rows; augmentation produces no samples");
    }
    let mut trainer = Trainer {
        task,
        hp,
        flags,
        opt: OptimizerState::new(
            &model.generator,
            &model.classifier,
            AdamConfig::with_lr(hp.lr),
        ),
        report: TrainReport::default(),
    };
    match hp.mode {
        TrainMode::Global => trainer.run_global(model)?,
        TrainMode::Episodic => trainer.run_episodic(model)?,
    }
    Ok(trainer.report)
}

/// Split, initialize, pretrain, and train.
pub fn train(
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    split: &SplitSpec,
    hp: &Hyperparams,
    flags: AblationFlags,
) -> Result<(ModelState, TrainReport)> {
    hp.validate()?;
    let task = Task::new(source, target, split, hp.seed)?;
    let mut model = init_model(&task, hp)?;
    let pretrain_losses = pretrain_model(&task, &mut model, hp)?;
    let mut report = train_from(&task, &mut model, hp, flags)?;
    report.pretrain_losses = pretrain_losses;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_source_size() {
        let spec = EpisodeSpec {
            p: 4,
            q: 2,
            e_t: 64,
        };
        assert_eq!(spec.source_size(40, 25), 210);
    }

    #[test]
    fn flag_normalization() {
        let f = AblationFlags::source_only();
        assert_eq!(f.pool_flags(), PoolFlags::NONE);
        assert!(!f.switches().intra && !f.switches().inter);
        let f = AblationFlags {
            use_cpa_inter: false,
            ..AblationFlags::full()
        };
        assert!(f.switches().intra && !f.switches().inter);
        let f = AblationFlags::without_cda();
        assert!(!f.use_cda_s && !f.use_cda_t && !f.use_cda_mix && f.use_cpa);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        for hp in [
            Hyperparams {
                alpha: 1.0,
                ..Default::default()
            },
            Hyperparams {
                lambda: -0.1,
                ..Default::default()
            },
            Hyperparams {
                lr: 0.0,
                ..Default::default()
            },
            Hyperparams {
                tau: 0.0,
                ..Default::default()
            },
            Hyperparams {
                mode: TrainMode::Episodic,
                episode: EpisodeSpec { p: 0, q: 1, e_t: 1 },
                ..Default::default()
            },
        ] {
            assert!(hp.validate().is_err(), "{hp:?}");
        }
    }

    #[test]
    fn defaults_follow_published_settings() {
        let hp = Hyperparams::default();
        assert_eq!(
            (hp.alpha, hp.lambda, hp.lr, hp.pretrain_lr),
            (0.2, 0.1, 1e-3, 1e-4)
        );
        assert_eq!((hp.mix_count, hp.beta_a, hp.beta_b), (5, 2.0, 2.0));
        assert_eq!((hp.pretrain_epochs, hp.epochs), (2000, 30));
        assert_eq!((hp.hidden, hp.feature, hp.cls_hidden), (1024, 512, 512));
    }
}
