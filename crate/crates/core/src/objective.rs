//! Flow-matching, coordination and combined training objectives.
//!
//! A patch `x` and noise `eps` define the straight path
//! `y_t = (1 - t)·x + t·eps`, whose velocity `eps - x` is the regression target
//! of the per-module loss. The coordination loss asks module `m`, looking at
//! its first patch with no context, to reproduce the concatenated velocities
//! module `m - 1` assigns to the same tokens patch by patch. The smaller module
//! is the teacher: its output is a fixed target and receives no gradient.

use crate::error::{check_len, Error, Result};
use crate::schedule::{PatchId, ScheduleSpec};
use crate::velocity::{self, Evaluator, Regression, VelocityInput, VelocityParams};

pub fn interpolate(x: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("interpolation noise", x.len(), eps.len())?;
    check_time(t)?;
    Ok(x.iter()
        .zip(eps)
        .map(|(&xi, &ei)| (1.0 - t) * xi + t * ei)
        .collect())
}

/// `d y_t / dt = eps - x`, independent of `t`.
pub fn target_velocity(x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_len("target velocity noise", x.len(), eps.len())?;
    Ok(x.iter().zip(eps).map(|(&xi, &ei)| ei - xi).collect())
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("time {t} not in [0, 1]")))
    }
}

/// One teacher-forced flow-matching training item.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    x: Vec<f64>,
    eps: Vec<f64>,
    target: Vec<f64>,
    input: VelocityInput,
}

impl FlowSample {
    pub fn new(
        x: Vec<f64>,
        eps: Vec<f64>,
        t: f64,
        prefix: Vec<f64>,
        patch_pos: usize,
        class_id: Option<u32>,
    ) -> Result<Self> {
        let y = interpolate(&x, &eps, t)?;
        let target = target_velocity(&x, &eps)?;
        Ok(FlowSample {
            x,
            eps,
            target,
            input: VelocityInput {
                y,
                t,
                prefix,
                patch_pos,
                class_id,
            },
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn y(&self) -> &[f64] {
        &self.input.y
    }

    pub fn t(&self) -> f64 {
        self.input.t
    }

    pub fn prefix(&self) -> &[f64] {
        &self.input.prefix
    }

    pub fn patch_pos(&self) -> usize {
        self.input.patch_pos
    }

    pub fn class_id(&self) -> Option<u32> {
        self.input.class_id
    }

    pub fn input(&self) -> &VelocityInput {
        &self.input
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn regression(&self) -> Regression<'_> {
        Regression {
            input: &self.input,
            target: &self.target,
        }
    }
}

fn regressions(samples: &[FlowSample]) -> Result<Vec<Regression<'_>>> {
    if samples.is_empty() {
        return Err(Error::Empty("flow-matching samples"));
    }
    Ok(samples.iter().map(FlowSample::regression).collect())
}

/// Monte-Carlo flow-matching loss of one module.
pub fn module_loss(params: &VelocityParams, samples: &[FlowSample]) -> Result<f64> {
    velocity::loss(params, &regressions(samples)?)
}

pub fn module_loss_and_grad(
    params: &VelocityParams,
    samples: &[FlowSample],
) -> Result<(f64, Vec<f64>)> {
    velocity::loss_and_grad(params, &regressions(samples)?)
}

/// Inputs for one coordination term between modules `m - 1` and `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordPair {
    m: usize,
    x_prefix: Vec<f64>,
    eps: Vec<f64>,
    t: f64,
    class_id: Option<u32>,
}

impl CoordPair {
    /// `x_prefix` and `eps` cover the first `k^(m-1)` tokens.
    pub fn new(
        schedule: &ScheduleSpec,
        m: usize,
        x_prefix: Vec<f64>,
        eps: Vec<f64>,
        t: f64,
        class_id: Option<u32>,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidParameter(format!(
                "coordination needs module m >= 2, got {m}"
            )));
        }
        let len = schedule.patch_tokens(m)? * schedule.c();
        check_len("coordination prefix", len, x_prefix.len())?;
        check_len("coordination noise", len, eps.len())?;
        check_time(t)?;
        Ok(CoordPair {
            m,
            x_prefix,
            eps,
            t,
            class_id,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn x_prefix(&self) -> &[f64] {
        &self.x_prefix
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn class_id(&self) -> Option<u32> {
        self.class_id
    }

    /// Module `m`'s first-patch input: the shared interpolant, empty prefix.
    pub fn student_input(&self) -> Result<VelocityInput> {
        Ok(VelocityInput {
            y: interpolate(&self.x_prefix, &self.eps, self.t)?,
            t: self.t,
            prefix: Vec::new(),
            patch_pos: 1,
            class_id: self.class_id,
        })
    }
}

fn check_coord_params(
    schedule: &ScheduleSpec,
    m: usize,
    teacher: &VelocityParams,
    student: &VelocityParams,
) -> Result<()> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "coordination needs module m >= 2, got {m}"
        )));
    }
    let c = schedule.c();
    let expect = |what, params: &VelocityParams, module| -> Result<()> {
        let arch = params.arch();
        if arch.c != c
            || arch.patch_tokens != schedule.patch_tokens(module)?
            || arch.num_patches() != schedule.k()
        {
            return Err(Error::Structure(format!(
                "{what} network does not match module {module} of the schedule"
            )));
        }
        Ok(())
    };
    expect("teacher", teacher, m - 1)?;
    expect("student", student, m)
}

/// Concatenated module `m - 1` velocities over the first `k^(m-1)` tokens.
///
/// Each patch `i` of module `m - 1` sees its slice of the shared interpolant
/// and the true tokens preceding it.
pub fn coord_target(
    schedule: &ScheduleSpec,
    teacher: &VelocityParams,
    pair: &CoordPair,
) -> Result<Vec<f64>> {
    let m = pair.m;
    let c = schedule.c();
    let y = interpolate(&pair.x_prefix, &pair.eps, pair.t)?;
    let mut eval = Evaluator::new(teacher);
    let mut out = Vec::with_capacity(y.len());
    for i in 1..=schedule.k() {
        let (start, end) = schedule.patch_range(PatchId::new(m - 1, i))?;
        let input = VelocityInput {
            y: y[(start - 1) * c..end * c].to_vec(),
            t: pair.t,
            prefix: pair.x_prefix[..(start - 1) * c].to_vec(),
            patch_pos: i,
            class_id: pair.class_id,
        };
        out.extend_from_slice(eval.eval(&input)?);
    }
    Ok(out)
}

/// Coordination loss against precomputed (frozen) teacher targets.
pub fn coord_loss_frozen(
    student: &VelocityParams,
    inputs: &[VelocityInput],
    targets: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    if inputs.is_empty() {
        return Err(Error::Empty("coordination pairs"));
    }
    check_len("coordination targets", inputs.len(), targets.len())?;
    let batch: Vec<_> = inputs
        .iter()
        .zip(targets)
        .map(|(input, target)| Regression { input, target })
        .collect();
    velocity::loss_and_grad(student, &batch)
}

/// Teacher targets and student inputs for a batch of pairs.
pub fn coord_problem(
    schedule: &ScheduleSpec,
    teacher: &VelocityParams,
    student: &VelocityParams,
    pairs: &[CoordPair],
) -> Result<(Vec<VelocityInput>, Vec<Vec<f64>>)> {
    let first = pairs.first().ok_or(Error::Empty("coordination pairs"))?;
    check_coord_params(schedule, first.m, teacher, student)?;
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.m != first.m {
            return Err(Error::InvalidParameter(
                "coordination batch mixes modules".into(),
            ));
        }
        targets.push(coord_target(schedule, teacher, pair)?);
        inputs.push(pair.student_input()?);
    }
    Ok((inputs, targets))
}

/// Coordination loss and its gradient with respect to the student (module `m`) only.
pub fn coord_loss_and_grad(
    schedule: &ScheduleSpec,
    teacher: &VelocityParams,
    student: &VelocityParams,
    pairs: &[CoordPair],
) -> Result<(f64, Vec<f64>)> {
    let (inputs, targets) = coord_problem(schedule, teacher, student, pairs)?;
    coord_loss_frozen(student, &inputs, &targets)
}

pub fn coord_loss(
    schedule: &ScheduleSpec,
    teacher: &VelocityParams,
    student: &VelocityParams,
    pairs: &[CoordPair],
) -> Result<f64> {
    let (inputs, targets) = coord_problem(schedule, teacher, student, pairs)?;
    let batch: Vec<_> = inputs
        .iter()
        .zip(&targets)
        .map(|(input, target)| Regression { input, target })
        .collect();
    velocity::loss(student, &batch)
}

/// Per-module flow-matching batches plus coordination pairs.
///
/// `coord[m - 1]` holds the pairs for module `m`; `coord[0]` is always empty.
#[derive(Debug, Clone, Default)]
pub struct JointBatch {
    pub module: Vec<Vec<FlowSample>>,
    pub coord: Vec<Vec<CoordPair>>,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub module_terms: Vec<f64>,
    /// `coord_terms[0]` is the (undefined, zero) first-module term.
    pub coord_terms: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

impl TotalLoss {
    pub fn module_sum(&self) -> f64 {
        self.module_terms.iter().sum()
    }

    pub fn coord_sum(&self) -> f64 {
        self.coord_terms.iter().sum()
    }
}

/// `λ_module · Σ_m L_module,m + λ_coor · Σ_{m≥2} L_coor,m` with per-module gradients.
pub fn total_loss(
    schedule: &ScheduleSpec,
    params: &[VelocityParams],
    batch: &JointBatch,
    lambda_module: f64,
    lambda_coor: f64,
) -> Result<TotalLoss> {
    if !(lambda_module >= 0.0) || !(lambda_coor >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "loss coefficients must be non-negative, got lambda_module={lambda_module}, lambda_coor={lambda_coor}"
        )));
    }
    let modules = schedule.modules();
    check_len("module parameter list", modules, params.len())?;
    check_len("module batches", modules, batch.module.len())?;
    check_len("coordination batches", modules, batch.coord.len())?;
    if !batch.coord[0].is_empty() {
        return Err(Error::InvalidParameter(
            "module 1 has no coordination term".into(),
        ));
    }

    let mut module_terms = Vec::with_capacity(modules);
    let mut coord_terms = vec![0.0; modules];
    let mut grads = Vec::with_capacity(modules);
    for (idx, (p, samples)) in params.iter().zip(&batch.module).enumerate() {
        let (l, g) = module_loss_and_grad(p, samples)?;
        let mut g: Vec<f64> = g.into_iter().map(|v| lambda_module * v).collect();
        let pairs = &batch.coord[idx];
        if !pairs.is_empty() {
            if pairs.iter().any(|pair| pair.m != idx + 1) {
                return Err(Error::InvalidParameter(format!(
                    "coordination pairs for module {} carry another module index",
                    idx + 1
                )));
            }
            let (lc, gc) = coord_loss_and_grad(schedule, &params[idx - 1], p, pairs)?;
            for (gi, ci) in g.iter_mut().zip(gc) {
                *gi += lambda_coor * ci;
            }
            coord_terms[idx] = lc;
        }
        module_terms.push(l);
        grads.push(g);
    }
    let total = lambda_module * module_terms.iter().sum::<f64>()
        + lambda_coor * coord_terms.iter().sum::<f64>();
    Ok(TotalLoss {
        total,
        module_terms,
        coord_terms,
        grads,
    })
}
