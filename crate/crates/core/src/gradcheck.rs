//! Randomized comparison of analytic loss gradients against central
//! differences, for both the per-module regression loss and the
//! coordination loss.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Item;
use crate::error::Result;
use crate::objective;
use crate::rng::{self, TAG_GRADCHECK};
use crate::schedule::{Ordering, ScheduleSpec};
use crate::trainer::{coord_pairs_for_items, samples_for_items};
use crate::velocity::{self, init_params, ArchOptions, ArchSpec, VelocityParams};

pub const FD_STEP: f64 = 1e-5;
/// Weights checked per case; larger networks are subsampled uniformly.
pub const MAX_CHECKED_WEIGHTS: usize = 600;
pub const WIDTHS: [usize; 2] = [16, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Module,
    /// Module `m` is the teacher, `m + 1` the student.
    Coord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub index: usize,
    pub kind: LossKind,
    pub m: usize,
    pub k: usize,
    pub c: usize,
    pub width: usize,
    pub num_weights: usize,
    pub checked: usize,
    pub loss: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckCase> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

type LossFn = Box<dyn Fn(&[f64]) -> Result<f64>>;

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Case `index` cycles through loss kind, module size `m ∈ {1, 2}` and
/// width; everything else is drawn from the case's own stream.
pub fn grad_check_case(seed: u64, index: usize) -> Result<GradCheckCase> {
    let mut rng = rng::stream(seed, TAG_GRADCHECK, index as u64, 0);
    let kind = if index.is_multiple_of(2) {
        LossKind::Module
    } else {
        LossKind::Coord
    };
    let m = 1 + (index / 2) % 2;
    let width = WIDTHS[(index / 4) % 2];
    let k = rng.random_range(2..=4);
    let c = rng.random_range(1..=2);
    let ordering = if k == 4 {
        Ordering::Morton
    } else {
        Ordering::Raster
    };
    let modules = match kind {
        LossKind::Module => 2,
        LossKind::Coord => m + 1,
    };
    let schedule = ScheduleSpec::new(k, modules, c, ordering)?;
    let num_classes = if rng.random_bool(0.5) { 3 } else { 0 };
    let opts = ArchOptions {
        hidden_width: width,
        hidden_layers: rng.random_range(1..=2),
        t_embed_dim: [2, 4, 8][rng.random_range(0..3)],
        num_classes,
    };
    let init = |m: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<VelocityParams> {
        let arch = ArchSpec::for_module(&schedule, m, opts)?;
        let mut p = init_params(&arch, rng.random())?;
        for r in arch.bias_ranges() {
            for w in &mut p.weights_mut()[r] {
                *w = 0.1 * normal(rng);
            }
        }
        Ok(p)
    };
    let items: Vec<Item> = (0..3)
        .map(|_| Item {
            class_id: if num_classes > 0 {
                rng.random_range(0..num_classes as u32)
            } else {
                0
            },
            tokens: (0..schedule.n() * c).map(|_| normal(&mut rng)).collect(),
        })
        .collect();
    let refs: Vec<&Item> = items.iter().collect();
    let conditional = num_classes > 0;

    let (params, loss, analytic, loss_at): (VelocityParams, f64, Vec<f64>, LossFn) = match kind {
        LossKind::Module => {
            let params = init(m, &mut rng)?;
            let batch = samples_for_items(&schedule, m, &refs, &mut rng, conditional)?;
            let (loss, grad) = objective::module_loss_and_grad(&params, &batch)?;
            let arch = *params.arch();
            let f = move |w: &[f64]| {
                objective::module_loss(&VelocityParams::new(arch, w.to_vec())?, &batch)
            };
            (params, loss, grad, Box::new(f))
        }
        LossKind::Coord => {
            let teacher = init(m, &mut rng)?;
            let student = init(m + 1, &mut rng)?;
            let pairs = coord_pairs_for_items(&schedule, m + 1, &refs, &mut rng, conditional)?;
            let (loss, grad) =
                objective::coord_loss_and_grad(&schedule, &teacher, &student, &pairs)?;
            let arch = *student.arch();
            let f = move |w: &[f64]| {
                objective::coord_loss(
                    &schedule,
                    &teacher,
                    &VelocityParams::new(arch, w.to_vec())?,
                    &pairs,
                )
            };
            (student, loss, grad, Box::new(f))
        }
    };

    let total = params.weights().len();
    let mut indices: Vec<usize> = if total <= MAX_CHECKED_WEIGHTS {
        (0..total).collect()
    } else {
        index::sample(&mut rng, total, MAX_CHECKED_WEIGHTS).into_vec()
    };
    indices.sort_unstable();
    let numeric = velocity::central_difference_at(params.weights(), &indices, FD_STEP, loss_at)?;
    let picked: Vec<f64> = indices.iter().map(|&j| analytic[j]).collect();
    Ok(GradCheckCase {
        index,
        kind,
        m,
        k,
        c,
        width,
        num_weights: total,
        checked: indices.len(),
        loss,
        max_rel_err: velocity::max_relative_error(&picked, &numeric),
    })
}

pub fn grad_check_suite(seed: u64, cases: usize) -> Result<GradCheckReport> {
    Ok(GradCheckReport {
        cases: (0..cases)
            .map(|j| grad_check_case(seed, j))
            .collect::<Result<_>>()?,
    })
}
