//! Teacher-forced training: per-module flow-matching pretraining, then joint
//! finetuning on the combined objective.
//!
//! Every random choice is drawn from a stream keyed by `(seed, purpose, module,
//! step)`. Module `m` at step `s` therefore sees the same batch whether it is
//! trained alone or jointly with the other modules, and the items behind a
//! step's batches are shared across modules.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Item};
use crate::error::{check_len, Error, Result};
use crate::objective::{self, CoordPair, FlowSample, JointBatch};
use crate::optim::{clip_grad, Optimizer, OptimizerKind};
use crate::rng::{self, TAG_COORD_BATCH, TAG_EVAL, TAG_INIT, TAG_ITEMS, TAG_MODULE_BATCH};
use crate::schedule::{PatchId, ScheduleSpec};
use crate::velocity::{init_params, ArchOptions, ArchSpec, VelocityParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lambda_module: f64,
    pub lambda_coor: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Keep modules `1..M` fixed during finetuning.
    pub freeze_lower: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            optimizer: OptimizerKind::default(),
            batch_size: 64,
            pretrain_steps: 2000,
            finetune_steps: 500,
            lambda_module: 1.0,
            lambda_coor: 0.1,
            seed: 0,
            grad_clip: Some(10.0),
            freeze_lower: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.lambda_module >= 0.0) || !(self.lambda_coor >= 0.0) {
            return Err(Error::InvalidParameter(
                "lambda_module and lambda_coor must be >= 0".into(),
            ));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "grad_clip must be > 0, got {clip}"
                )));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_module_total: f64,
    pub l_coor_total: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::InvalidParameter(format!(
                    "history step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Step-wise sum of independent per-module histories of equal length.
    pub fn merge(parts: &[TrainHistory]) -> Result<TrainHistory> {
        let Some(first) = parts.first() else {
            return Ok(TrainHistory::default());
        };
        let mut out = TrainHistory::default();
        for (idx, rec) in first.records.iter().enumerate() {
            let mut merged = StepRecord {
                grad_norm: 0.0,
                l_module_total: 0.0,
                l_coor_total: 0.0,
                total: 0.0,
                ..*rec
            };
            let mut sq = 0.0;
            for part in parts {
                let r = part
                    .records
                    .get(idx)
                    .filter(|r| r.step == rec.step)
                    .ok_or_else(|| {
                        Error::InvalidParameter("histories do not share steps".into())
                    })?;
                merged.l_module_total += r.l_module_total;
                merged.l_coor_total += r.l_coor_total;
                merged.total += r.total;
                merged.seconds = merged.seconds.max(r.seconds);
                sq += r.grad_norm * r.grad_norm;
            }
            merged.grad_norm = sq.sqrt();
            out.push(merged)?;
        }
        Ok(out)
    }

    /// CSV with columns `step,l_module_total,l_coor_total,total,grad_norm,seconds`.
    /// Without `wall_clock` the seconds column is written as 0 so that reruns
    /// are byte-identical.
    pub fn to_csv(&self, wall_clock: bool) -> String {
        let mut out = String::from("step,l_module_total,l_coor_total,total,grad_norm,seconds\n");
        for r in &self.records {
            let seconds = if wall_clock { r.seconds } else { 0.0 };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.l_module_total, r.l_coor_total, r.total, r.grad_norm, seconds
            );
        }
        out
    }
}

/// Schedule plus the architecture of every scaled module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    schedule: ScheduleSpec,
    archs: Vec<ArchSpec>,
}

impl ModelLayout {
    pub fn new(schedule: ScheduleSpec, opts: ArchOptions) -> Result<Self> {
        let archs = (1..=schedule.modules())
            .map(|m| ArchSpec::for_module(&schedule, m, opts))
            .collect::<Result<_>>()?;
        Ok(ModelLayout { schedule, archs })
    }

    /// Layout matching an existing parameter list.
    pub fn from_params(schedule: ScheduleSpec, params: &[VelocityParams]) -> Result<Self> {
        let layout = ModelLayout {
            schedule,
            archs: params.iter().map(|p| *p.arch()).collect(),
        };
        layout.check_params(params)?;
        Ok(layout)
    }

    pub fn schedule(&self) -> &ScheduleSpec {
        &self.schedule
    }

    pub fn arch(&self, m: usize) -> Result<&ArchSpec> {
        self.schedule.patch_tokens(m)?;
        Ok(&self.archs[m - 1])
    }

    pub fn archs(&self) -> &[ArchSpec] {
        &self.archs
    }

    pub fn class_conditional(&self) -> bool {
        self.archs.iter().any(|a| a.num_classes > 0)
    }

    pub fn check_params(&self, params: &[VelocityParams]) -> Result<()> {
        check_len(
            "module parameter list",
            self.schedule.modules(),
            params.len(),
        )?;
        for (m, p) in params.iter().enumerate() {
            let expected = ArchSpec::for_module(
                &self.schedule,
                m + 1,
                ArchOptions {
                    hidden_width: p.arch().hidden_width,
                    hidden_layers: p.arch().hidden_layers,
                    t_embed_dim: p.arch().t_embed_dim,
                    num_classes: p.arch().num_classes,
                },
            )?;
            if *p.arch() != expected || *p.arch() != self.archs[m] {
                return Err(Error::Structure(format!(
                    "module {} parameters do not fit the schedule",
                    m + 1
                )));
            }
        }
        Ok(())
    }

    pub fn init_module(&self, m: usize, seed: u64) -> Result<VelocityParams> {
        init_params(self.arch(m)?, rng::derive_seed(seed, TAG_INIT, m as u64, 0))
    }

    pub fn init_all(&self, seed: u64) -> Result<Vec<VelocityParams>> {
        (1..=self.schedule.modules())
            .map(|m| self.init_module(m, seed))
            .collect()
    }
}

fn normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Teacher-forced flow-matching samples for module `m`, one per item.
///
/// Module 1 draws its patch index from `1..=k` (the first token is produced by
/// module 1 with an empty context); larger modules draw from `2..=k` because
/// their first patch is the output of the smaller modules.
pub fn samples_for_items(
    schedule: &ScheduleSpec,
    m: usize,
    items: &[&Item],
    rng: &mut ChaCha8Rng,
    class_conditional: bool,
) -> Result<Vec<FlowSample>> {
    let c = schedule.c();
    let first = if m == 1 { 1 } else { 2 };
    items
        .iter()
        .map(|item| {
            let i = rng.random_range(first..=schedule.k());
            let t: f64 = rng.random();
            let (start, end) = schedule.patch_range(PatchId::new(m, i))?;
            let x = item.tokens[(start - 1) * c..end * c].to_vec();
            let eps = normals(rng, x.len());
            let prefix = item.tokens[..(start - 1) * c].to_vec();
            FlowSample::new(
                x,
                eps,
                t,
                prefix,
                i,
                class_conditional.then_some(item.class_id),
            )
        })
        .collect()
}

/// Coordination pairs for module `m >= 2`, one per item: fresh `t` and noise
/// over the first `k^(m-1)` tokens.
pub fn coord_pairs_for_items(
    schedule: &ScheduleSpec,
    m: usize,
    items: &[&Item],
    rng: &mut ChaCha8Rng,
    class_conditional: bool,
) -> Result<Vec<CoordPair>> {
    let len = schedule.patch_tokens(m)? * schedule.c();
    items
        .iter()
        .map(|item| {
            let t: f64 = rng.random();
            let eps = normals(rng, len);
            CoordPair::new(
                schedule,
                m,
                item.tokens[..len].to_vec(),
                eps,
                t,
                class_conditional.then_some(item.class_id),
            )
        })
        .collect()
}

/// Draws `batch_size` items uniformly (with replacement) and builds module
/// `m`'s teacher-forced batch from them.
pub fn make_batch(
    dataset: &Dataset,
    schedule: &ScheduleSpec,
    m: usize,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    class_conditional: bool,
) -> Result<Vec<FlowSample>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    dataset.check_schedule(schedule)?;
    let items: Vec<&Item> = (0..batch_size)
        .map(|_| &dataset.items()[rng.random_range(0..dataset.len())])
        .collect();
    samples_for_items(schedule, m, &items, rng, class_conditional)
}

fn step_items(dataset: &Dataset, seed: u64, step: usize, batch_size: usize) -> Vec<&Item> {
    let mut rng = rng::stream(seed, TAG_ITEMS, step as u64, 0);
    (0..batch_size)
        .map(|_| &dataset.items()[rng.random_range(0..dataset.len())])
        .collect()
}

fn check_inputs(layout: &ModelLayout, dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    dataset.check_schedule(layout.schedule())
}

/// Module `m`'s flow-matching batch at a given stream step.
pub fn module_batch(
    layout: &ModelLayout,
    dataset: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    step: usize,
) -> Result<Vec<FlowSample>> {
    let items = step_items(dataset, cfg.seed, step, cfg.batch_size);
    let mut rng = rng::stream(cfg.seed, TAG_MODULE_BATCH, m as u64, step as u64);
    samples_for_items(
        layout.schedule(),
        m,
        &items,
        &mut rng,
        layout.class_conditional(),
    )
}

/// Pretrains module `m` alone on its flow-matching loss.
pub fn pretrain_module(
    layout: &ModelLayout,
    m: usize,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(VelocityParams, TrainHistory)> {
    check_inputs(layout, dataset, cfg)?;
    let mut params = layout.init_module(m, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params.weights().len())?;
    let mut history = TrainHistory::default();
    let clock = Instant::now();
    for step in 0..cfg.pretrain_steps {
        let batch = module_batch(layout, dataset, cfg, m, step)?;
        let (loss, mut grad) = objective::module_loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                module: m,
                step,
                loss,
            });
        }
        let grad_norm = clip_grad(&mut grad, cfg.grad_clip);
        opt.step(params.weights_mut(), &grad)?;
        history.push(StepRecord {
            step,
            l_module_total: loss,
            l_coor_total: 0.0,
            total: loss,
            grad_norm,
            seconds: clock.elapsed().as_secs_f64(),
        })?;
    }
    Ok((params, history))
}

/// Pretrains every module; the history is the step-wise sum over modules.
pub fn pretrain_all(
    layout: &ModelLayout,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<VelocityParams>, TrainHistory)> {
    let mut params = Vec::new();
    let mut histories = Vec::new();
    for m in 1..=layout.schedule().modules() {
        let (p, h) = pretrain_module(layout, m, dataset, cfg)?;
        params.push(p);
        histories.push(h);
    }
    Ok((params, TrainHistory::merge(&histories)?))
}

/// Joint batch of finetuning step `step` (streams continue after pretraining).
pub fn finetune_batch(
    layout: &ModelLayout,
    dataset: &Dataset,
    cfg: &TrainConfig,
    step: usize,
) -> Result<JointBatch> {
    let schedule = layout.schedule();
    let key = cfg.pretrain_steps + step;
    let items = step_items(dataset, cfg.seed, key, cfg.batch_size);
    let conditional = layout.class_conditional();
    let mut batch = JointBatch::default();
    for m in 1..=schedule.modules() {
        let mut rng = rng::stream(cfg.seed, TAG_MODULE_BATCH, m as u64, key as u64);
        batch.module.push(samples_for_items(
            schedule,
            m,
            &items,
            &mut rng,
            conditional,
        )?);
        if m == 1 {
            batch.coord.push(Vec::new());
        } else {
            let mut rng = rng::stream(cfg.seed, TAG_COORD_BATCH, m as u64, key as u64);
            batch.coord.push(coord_pairs_for_items(
                schedule,
                m,
                &items,
                &mut rng,
                conditional,
            )?);
        }
    }
    Ok(batch)
}

/// Joint finetuning on `λ_module Σ L_module + λ_coor Σ L_coor`.
pub fn finetune_all(
    layout: &ModelLayout,
    mut params: Vec<VelocityParams>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<VelocityParams>, TrainHistory)> {
    check_inputs(layout, dataset, cfg)?;
    layout.check_params(&params)?;
    let modules = layout.schedule().modules();
    let mut opts = params
        .iter()
        .map(|p| Optimizer::new(cfg.optimizer, cfg.lr, p.weights().len()))
        .collect::<Result<Vec<_>>>()?;
    let mut history = TrainHistory::default();
    let clock = Instant::now();
    for step in 0..cfg.finetune_steps {
        let batch = finetune_batch(layout, dataset, cfg, step)?;
        let loss = objective::total_loss(
            layout.schedule(),
            &params,
            &batch,
            cfg.lambda_module,
            cfg.lambda_coor,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                module: 0,
                step,
                loss: loss.total,
            });
        }
        let mut sq = 0.0;
        for (idx, mut grad) in loss.grads.into_iter().enumerate() {
            if cfg.freeze_lower && idx + 1 < modules {
                continue;
            }
            let norm = clip_grad(&mut grad, cfg.grad_clip);
            sq += norm * norm;
            opts[idx].step(params[idx].weights_mut(), &grad)?;
        }
        history.push(StepRecord {
            step,
            l_module_total: loss.module_terms.iter().sum(),
            l_coor_total: loss.coord_terms.iter().sum(),
            total: loss.total,
            grad_norm: sq.sqrt(),
            seconds: clock.elapsed().as_secs_f64(),
        })?;
    }
    Ok((params, history))
}

/// Fixed coordination pairs over the first `count` items of `dataset`, for
/// tracking the coordination loss across training. `eval[m - 1]` holds module
/// `m`'s pairs.
pub fn coord_eval_pairs(
    layout: &ModelLayout,
    dataset: &Dataset,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<CoordPair>>> {
    dataset.check_schedule(layout.schedule())?;
    if dataset.is_empty() || count == 0 {
        return Err(Error::Empty("coordination evaluation items"));
    }
    let items: Vec<&Item> = dataset.items().iter().take(count).collect();
    let mut out = vec![Vec::new()];
    for m in 2..=layout.schedule().modules() {
        let mut rng = rng::stream(seed, TAG_EVAL, m as u64, 0);
        out.push(coord_pairs_for_items(
            layout.schedule(),
            m,
            &items,
            &mut rng,
            layout.class_conditional(),
        )?);
    }
    Ok(out)
}

/// `Σ_{m≥2} L_coor,m` on fixed pairs.
pub fn coord_loss_total(
    layout: &ModelLayout,
    params: &[VelocityParams],
    pairs: &[Vec<CoordPair>],
) -> Result<f64> {
    layout.check_params(params)?;
    let mut total = 0.0;
    for (idx, batch) in pairs.iter().enumerate().skip(1) {
        total += objective::coord_loss(layout.schedule(), &params[idx - 1], &params[idx], batch)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_iid_gauss;
    use crate::schedule::Ordering;
    use rand::SeedableRng;

    fn setup() -> (ModelLayout, Dataset) {
        let s = ScheduleSpec::new(4, 2, 2, Ordering::Morton).unwrap();
        let layout = ModelLayout::new(
            s,
            ArchOptions {
                hidden_width: 8,
                hidden_layers: 1,
                t_embed_dim: 4,
                num_classes: 0,
            },
        )
        .unwrap();
        let ds = gen_iid_gauss(&s, 20, 1).unwrap();
        (layout, ds)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            pretrain_steps: 5,
            finetune_steps: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn module_one_prefixes_are_short() {
        let (layout, ds) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_batch(&ds, layout.schedule(), 1, &mut rng, 200, false).unwrap();
        let mut seen = [false; 4];
        for s in &batch {
            let tokens = s.prefix().len() / 2;
            assert!(tokens <= 3);
            assert_eq!(tokens, s.patch_pos() - 1);
            seen[tokens] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn larger_modules_skip_first_patch() {
        let (layout, ds) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = make_batch(&ds, layout.schedule(), 2, &mut rng, 200, false).unwrap();
        assert!(batch.iter().all(|s| s.patch_pos() >= 2));
        assert!(batch.iter().all(|s| s.x().len() == 8));
    }

    #[test]
    fn make_batch_is_deterministic() {
        let (layout, ds) = setup();
        let a = make_batch(
            &ds,
            layout.schedule(),
            2,
            &mut ChaCha8Rng::seed_from_u64(5),
            16,
            false,
        )
        .unwrap();
        let b = make_batch(
            &ds,
            layout.schedule(),
            2,
            &mut ChaCha8Rng::seed_from_u64(5),
            16,
            false,
        )
        .unwrap();
        assert_eq!(a, b);
        let empty = Dataset::new(layout.schedule(), vec![], None).unwrap();
        assert!(matches!(
            make_batch(
                &empty,
                layout.schedule(),
                1,
                &mut ChaCha8Rng::seed_from_u64(5),
                4,
                false
            ),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn zero_steps_returns_init() {
        let (layout, ds) = setup();
        let cfg = TrainConfig {
            pretrain_steps: 0,
            ..small_cfg()
        };
        let (p, h) = pretrain_module(&layout, 2, &ds, &cfg).unwrap();
        assert_eq!(p, layout.init_module(2, cfg.seed).unwrap());
        assert!(h.is_empty());

        let init = layout.init_all(3).unwrap();
        let cfg = TrainConfig {
            finetune_steps: 0,
            ..small_cfg()
        };
        let (after, _) = finetune_all(&layout, init.clone(), &ds, &cfg).unwrap();
        assert_eq!(after, init);
    }

    #[test]
    fn pretraining_is_reproducible() {
        let (layout, ds) = setup();
        let cfg = small_cfg();
        let (a, ha) = pretrain_module(&layout, 1, &ds, &cfg).unwrap();
        let (b, hb) = pretrain_module(&layout, 1, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.to_csv(false), hb.to_csv(false));
        assert_eq!(ha.len(), 5);
    }

    #[test]
    fn freezing_keeps_lower_modules() {
        let (layout, ds) = setup();
        let init = layout.init_all(0).unwrap();
        let cfg = TrainConfig {
            freeze_lower: true,
            ..small_cfg()
        };
        let (after, _) = finetune_all(&layout, init.clone(), &ds, &cfg).unwrap();
        assert_eq!(after[0], init[0]);
        assert_ne!(after[1], init[1]);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let (layout, _) = setup();
        let other = ScheduleSpec::new(4, 3, 2, Ordering::Morton).unwrap();
        let ds = gen_iid_gauss(&other, 4, 0).unwrap();
        assert!(matches!(
            pretrain_module(&layout, 1, &ds, &small_cfg()),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn history_rejects_non_monotone_steps() {
        let rec = StepRecord {
            step: 3,
            l_module_total: 1.0,
            l_coor_total: 0.0,
            total: 1.0,
            grad_norm: 0.5,
            seconds: 0.25,
        };
        let mut h = TrainHistory::default();
        h.push(rec).unwrap();
        assert!(h.push(rec).is_err());
        assert_eq!(
            h.to_csv(false),
            "step,l_module_total,l_coor_total,total,grad_norm,seconds\n3,1,0,1,0.5,0\n"
        );
        assert!(h.to_csv(true).ends_with(",0.25\n"));
    }

    #[test]
    fn invalid_config() {
        let (layout, ds) = setup();
        for cfg in [
            TrainConfig {
                lr: 0.0,
                ..small_cfg()
            },
            TrainConfig {
                batch_size: 0,
                ..small_cfg()
            },
            TrainConfig {
                lambda_coor: -1.0,
                ..small_cfg()
            },
            TrainConfig {
                grad_clip: Some(0.0),
                ..small_cfg()
            },
        ] {
            assert!(matches!(
                pretrain_module(&layout, 1, &ds, &cfg),
                Err(Error::InvalidParameter(_))
            ));
        }
    }
}
