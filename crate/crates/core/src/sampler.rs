//! Nested generation and the token-by-token baseline.
//!
//! Nested generation first solves the single first token with module 1 and
//! an empty context, then for every module `m = 1..=M` solves patches
//! `i = 2..=k` in order, each conditioned on everything produced so far. Each
//! patch solve integrates the velocity field from noise at `t = 1` to `t = 0`
//! with `S` explicit Euler steps, so one sample costs `((k-1)·M + 1)·S`
//! velocity evaluations against `n·S` for the baseline.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Item};
use crate::error::{check_len, Error, Result};
use crate::rng::{self, TAG_SAMPLE};
use crate::schedule::{PatchId, ScheduleSpec};
use crate::trainer::ModelLayout;
use crate::velocity::{ArchSpec, Evaluator, VelocityInput, VelocityParams};

/// `n·c` values in schedule order.
pub type TokenSeq = Vec<f64>;

/// Integrates `dy/dt = v(y, t)` from `t = 1` (`y = eps`) down to `t = 0`.
///
/// Step `s = S-1, ..., 0` evaluates the field at `t = (s+1)/S` and moves
/// `y ← y - v/S`. Exactly `steps` evaluations.
pub fn euler_solve<F>(mut velocity: F, eps: &[f64], steps: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64, &mut [f64]) -> Result<()>,
{
    if steps == 0 {
        return Err(Error::InvalidParameter("ODE steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut y = eps.to_vec();
    let mut v = vec![0.0; y.len()];
    for s in (0..steps).rev() {
        let t = (s + 1) as f64 / steps as f64;
        velocity(&y, t, &mut v)?;
        for (yi, vi) in y.iter_mut().zip(&v) {
            *yi -= dt * vi;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ODE state at t = {} after step {}",
                s as f64 / steps as f64,
                steps - s
            )));
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModuleNfe {
    pub module: usize,
    pub patches: usize,
    pub velocity_calls: usize,
}

/// Function-evaluation accounting for one generated sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NfeReport {
    pub velocity_calls: usize,
    pub patches_generated: usize,
    pub per_module: Vec<ModuleNfe>,
}

impl NfeReport {
    fn with_modules(modules: usize) -> Self {
        NfeReport {
            per_module: (1..=modules)
                .map(|module| ModuleNfe {
                    module,
                    ..Default::default()
                })
                .collect(),
            ..Default::default()
        }
    }

    pub fn accumulate(&mut self, other: &NfeReport) {
        self.velocity_calls += other.velocity_calls;
        self.patches_generated += other.patches_generated;
        if self.per_module.len() < other.per_module.len() {
            self.per_module
                .resize(other.per_module.len(), ModuleNfe::default());
        }
        for (a, b) in self.per_module.iter_mut().zip(&other.per_module) {
            a.module = b.module;
            a.patches += b.patches;
            a.velocity_calls += b.velocity_calls;
        }
    }

    /// CSV with columns `module,patches,velocity_calls`; the last row is `total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("module,patches,velocity_calls\n");
        for m in &self.per_module {
            let _ = writeln!(out, "{},{},{}", m.module, m.patches, m.velocity_calls);
        }
        let _ = writeln!(
            out,
            "total,{},{}",
            self.patches_generated, self.velocity_calls
        );
        out
    }
}

fn normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Nested generation against an arbitrary field `field(m, input, out)`.
///
/// Noise for each patch is drawn from `rng` in generation order.
pub fn generate_with<F>(
    schedule: &ScheduleSpec,
    steps: usize,
    class_id: Option<u32>,
    rng: &mut ChaCha8Rng,
    mut field: F,
) -> Result<(TokenSeq, NfeReport)>
where
    F: FnMut(usize, &VelocityInput, &mut [f64]) -> Result<()>,
{
    let c = schedule.c();
    let mut tokens: TokenSeq = Vec::with_capacity(schedule.n() * c);
    let mut report = NfeReport::with_modules(schedule.modules());
    for patch in schedule.generation_order() {
        let (start, end) = schedule.patch_range(patch)?;
        debug_assert_eq!(tokens.len(), (start - 1) * c);
        let eps = normals(rng, (end - start + 1) * c);
        let mut input = VelocityInput {
            y: Vec::new(),
            t: 1.0,
            prefix: tokens[..(start - 1) * c].to_vec(),
            patch_pos: patch.i,
            class_id,
        };
        let mut calls = 0;
        let x = euler_solve(
            |y, t, out| {
                calls += 1;
                input.y.clear();
                input.y.extend_from_slice(y);
                input.t = t;
                field(patch.m, &input, out)
            },
            &eps,
            steps,
        )?;
        tokens.extend_from_slice(&x);
        let entry = &mut report.per_module[patch.m - 1];
        entry.patches += 1;
        entry.velocity_calls += calls;
        report.patches_generated += 1;
        report.velocity_calls += calls;
    }
    Ok((tokens, report))
}

#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub schedule: ScheduleSpec,
    pub params: &'a [VelocityParams],
    pub class_id: Option<u32>,
    pub seed: u64,
    pub ode_steps: usize,
}

/// One nested sample from trained module fields.
pub fn generate(req: &SampleRequest<'_>) -> Result<(TokenSeq, NfeReport)> {
    ModelLayout::from_params(req.schedule, req.params)?;
    let mut evals: Vec<Evaluator<'_>> = req.params.iter().map(Evaluator::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    generate_with(
        &req.schedule,
        req.ode_steps,
        req.class_id,
        &mut rng,
        |m, input, out| {
            out.copy_from_slice(evals[m - 1].eval(input)?);
            Ok(())
        },
    )
}

/// Token-by-token generation with a single-token field of prefix capacity `n - 1`.
pub fn generate_vanilla_ar(
    schedule: &ScheduleSpec,
    token_model: &VelocityParams,
    class_id: Option<u32>,
    seed: u64,
    steps: usize,
) -> Result<(TokenSeq, NfeReport)> {
    let arch = token_model.arch();
    let expected = ArchSpec::token_model(
        schedule,
        crate::velocity::ArchOptions {
            hidden_width: arch.hidden_width,
            hidden_layers: arch.hidden_layers,
            t_embed_dim: arch.t_embed_dim,
            num_classes: arch.num_classes,
        },
    )?;
    if *arch != expected {
        return Err(Error::Structure(
            "token model does not match the schedule (needs 1 token per step, n - 1 prefix)".into(),
        ));
    }
    let c = schedule.c();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = Evaluator::new(token_model);
    let mut tokens: TokenSeq = Vec::with_capacity(schedule.n() * c);
    let mut calls = 0;
    for j in 1..=schedule.n() {
        let eps = normals(&mut rng, c);
        let mut input = VelocityInput {
            y: Vec::new(),
            t: 1.0,
            prefix: tokens.clone(),
            patch_pos: j,
            class_id,
        };
        let x = euler_solve(
            |y, t, out| {
                calls += 1;
                input.y.clear();
                input.y.extend_from_slice(y);
                input.t = t;
                out.copy_from_slice(eval.eval(&input)?);
                Ok(())
            },
            &eps,
            steps,
        )?;
        tokens.extend_from_slice(&x);
    }
    let report = NfeReport {
        velocity_calls: calls,
        patches_generated: schedule.n(),
        per_module: vec![ModuleNfe {
            module: 1,
            patches: schedule.n(),
            velocity_calls: calls,
        }],
    };
    Ok((tokens, report))
}

/// Class assignment for batch generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassPolicy {
    None,
    Fixed(u32),
    /// Uniform over `0..num_classes`, drawn per sample.
    Uniform(u32),
}

/// Seed of sample `index` within a batch seeded by `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, TAG_SAMPLE, index as u64, 0)
}

fn sample_class(policy: ClassPolicy, seed: u64, index: usize) -> Result<Option<u32>> {
    Ok(match policy {
        ClassPolicy::None => None,
        ClassPolicy::Fixed(c) => Some(c),
        ClassPolicy::Uniform(0) => {
            return Err(Error::InvalidParameter(
                "uniform class policy over zero classes".into(),
            ))
        }
        ClassPolicy::Uniform(n) => {
            Some(rng::stream(seed, TAG_SAMPLE, index as u64, 1).random_range(0..n))
        }
    })
}

/// `count` independent nested samples. Sample `j` depends only on
/// `(seed, j)`, so the result does not depend on `jobs`.
pub fn generate_many(
    schedule: &ScheduleSpec,
    params: &[VelocityParams],
    count: usize,
    seed: u64,
    ode_steps: usize,
    classes: ClassPolicy,
    jobs: usize,
) -> Result<(Dataset, NfeReport)> {
    ModelLayout::from_params(*schedule, params)?;
    let one = |j: usize| -> Result<(Item, NfeReport)> {
        let class_id = sample_class(classes, seed, j)?;
        let req = SampleRequest {
            schedule: *schedule,
            params,
            class_id,
            seed: sample_seed(seed, j),
            ode_steps,
        };
        let (tokens, report) = generate(&req)?;
        Ok((
            Item {
                class_id: class_id.unwrap_or(0),
                tokens,
            },
            report,
        ))
    };
    let jobs = jobs.clamp(1, count.max(1));
    let results: Vec<Result<(Item, NfeReport)>> = if jobs == 1 {
        (0..count).map(one).collect()
    } else {
        let chunk = count.div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let one = &one;
                    scope.spawn(move || {
                        (w * chunk..((w + 1) * chunk).min(count))
                            .map(one)
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sampling worker panicked"))
                .collect()
        })
    };
    let mut items = Vec::with_capacity(count);
    let mut total = NfeReport::with_modules(schedule.modules());
    for r in results {
        let (item, report) = r?;
        total.accumulate(&report);
        items.push(item);
    }
    Ok((Dataset::new(schedule, items, None)?, total))
}

/// Checks that `tokens` has the right length for `schedule`.
pub fn check_sequence(schedule: &ScheduleSpec, tokens: &[f64]) -> Result<()> {
    check_len("token sequence", schedule.n() * schedule.c(), tokens.len())
}

/// Patch ids and their token ranges in generation order.
pub fn write_plan(schedule: &ScheduleSpec) -> Result<Vec<(PatchId, (usize, usize))>> {
    schedule
        .generation_order()
        .into_iter()
        .map(|p| Ok((p, schedule.patch_range(p)?)))
        .collect()
}
