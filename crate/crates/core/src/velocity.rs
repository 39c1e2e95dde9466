//! Conditional velocity field `v(y_t, t | prefix)` for one scaled module.
//!
//! The field is a fully connected tanh network over the concatenated feature
//! vector
//!
//! ```text
//! [ y (patch_tokens·c) | time embedding (t_embed_dim) | padded prefix (max_prefix·c)
//!   | prefix mask (max_prefix) | patch position one-hot (num_patches) | class one-hot (num_classes) ]
//! ```
//!
//! followed by `hidden_layers` tanh layers of width `hidden_width` and a linear
//! head producing `patch_tokens·c` outputs.
//!
//! # Weight layout
//!
//! Weights are one flat `f64` vector: layer 0 weight matrix (row-major,
//! `out × in`), layer 0 bias, layer 1 weight matrix, layer 1 bias, and so on up
//! to the output head. Checkpoints store exactly this vector.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schedule::ScheduleSpec;

/// Width/depth knobs shared by every module of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchOptions {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub t_embed_dim: usize,
    pub num_classes: usize,
}

impl Default for ArchOptions {
    fn default() -> Self {
        ArchOptions {
            hidden_width: 128,
            hidden_layers: 2,
            t_embed_dim: 8,
            num_classes: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub patch_tokens: usize,
    pub c: usize,
    pub max_prefix: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub t_embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    rows: usize,
    cols: usize,
    offset: usize,
}

impl LayerShape {
    fn bias_offset(&self) -> usize {
        self.offset + self.rows * self.cols
    }

    fn end(&self) -> usize {
        self.bias_offset() + self.rows
    }
}

impl ArchSpec {
    /// Architecture of scaled module `m`: patches of `k^(m-1)` tokens,
    /// conditioned on at most `k^(m-1)·(k-1)` tokens.
    pub fn for_module(schedule: &ScheduleSpec, m: usize, opts: ArchOptions) -> Result<Self> {
        let patch_tokens = schedule.patch_tokens(m)?;
        let arch = ArchSpec {
            patch_tokens,
            c: schedule.c(),
            max_prefix: patch_tokens * (schedule.k() - 1),
            hidden_width: opts.hidden_width,
            hidden_layers: opts.hidden_layers,
            t_embed_dim: opts.t_embed_dim,
            num_classes: opts.num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Single-token model with a prefix capacity of `n - 1` tokens, used by the
    /// token-by-token baseline.
    pub fn token_model(schedule: &ScheduleSpec, opts: ArchOptions) -> Result<Self> {
        let arch = ArchSpec {
            patch_tokens: 1,
            c: schedule.c(),
            max_prefix: schedule.n() - 1,
            hidden_width: opts.hidden_width,
            hidden_layers: opts.hidden_layers,
            t_embed_dim: opts.t_embed_dim,
            num_classes: opts.num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("patch_tokens", self.patch_tokens),
            ("c", self.c),
            ("hidden_width", self.hidden_width),
            ("t_embed_dim", self.t_embed_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        if !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "t_embed_dim must be even (sin/cos pairs), got {}",
                self.t_embed_dim
            )));
        }
        if !self.max_prefix.is_multiple_of(self.patch_tokens) {
            return Err(Error::InvalidParameter(format!(
                "max_prefix {} is not a multiple of patch_tokens {}",
                self.max_prefix, self.patch_tokens
            )));
        }
        Ok(())
    }

    /// Patch positions addressable by the one-hot encoding.
    pub fn num_patches(&self) -> usize {
        self.max_prefix / self.patch_tokens + 1
    }

    pub fn output_dim(&self) -> usize {
        self.patch_tokens * self.c
    }

    pub fn input_dim(&self) -> usize {
        self.output_dim()
            + self.t_embed_dim
            + self.max_prefix * self.c
            + self.max_prefix
            + self.num_patches()
            + self.num_classes
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 2);
        dims.push(self.input_dim());
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.output_dim());
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let shape = LayerShape {
                    rows: w[1],
                    cols: w[0],
                    offset,
                };
                offset = shape.end();
                shape
            })
            .collect()
    }

    /// `(rows, cols)` of every weight matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers().iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn num_weights(&self) -> usize {
        self.layers().last().map_or(0, LayerShape::end)
    }

    /// Flat index ranges of the bias vectors.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers()
            .iter()
            .map(|l| l.bias_offset()..l.end())
            .collect()
    }

    /// Flat index ranges of the weight matrices.
    pub fn matrix_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers()
            .iter()
            .map(|l| l.offset..l.bias_offset())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityParams {
    arch: ArchSpec,
    weights: Vec<f64>,
}

impl VelocityParams {
    pub fn new(arch: ArchSpec, weights: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len("velocity weights", arch.num_weights(), weights.len())?;
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!(
                "weight {pos} is {}",
                weights[pos]
            )));
        }
        Ok(VelocityParams { arch, weights })
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        Self::new(arch, vec![0.0; arch.num_weights()])
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable access for optimizers; callers keep values finite.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }
}

/// Uniform(±1/sqrt(fan_in)) weights, zero biases.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<VelocityParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![0.0; arch.num_weights()];
    for layer in arch.layers() {
        let scale = 1.0 / (layer.cols as f64).sqrt();
        for w in &mut weights[layer.offset..layer.bias_offset()] {
            *w = rng.random_range(-scale..scale);
        }
    }
    VelocityParams::new(*arch, weights)
}

/// One evaluation point of a velocity field.
///
/// `prefix` holds the unpadded conditioning tokens (`prefix_len · c` floats);
/// padding and mask are produced when features are assembled, so padded
/// entries are zero by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityInput {
    pub y: Vec<f64>,
    pub t: f64,
    pub prefix: Vec<f64>,
    /// 1-based patch position within the module.
    pub patch_pos: usize,
    pub class_id: Option<u32>,
}

impl VelocityInput {
    /// Builds an input from the explicit padded representation, rejecting
    /// masks that are not a run of leading ones and non-zero padding.
    pub fn from_padded(
        arch: &ArchSpec,
        y: Vec<f64>,
        t: f64,
        padded_prefix: &[f64],
        mask: &[f64],
        patch_pos: usize,
        class_id: Option<u32>,
    ) -> Result<Self> {
        check_len(
            "padded prefix",
            arch.max_prefix * arch.c,
            padded_prefix.len(),
        )?;
        check_len("prefix mask", arch.max_prefix, mask.len())?;
        let len = mask.iter().take_while(|&&v| v == 1.0).count();
        if mask[len..].iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidParameter(
                "prefix mask must be leading ones followed by zeros".into(),
            ));
        }
        let split = len * arch.c;
        if padded_prefix[split..].iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidParameter(
                "padded prefix entries must be exactly zero".into(),
            ));
        }
        let input = VelocityInput {
            y,
            t,
            prefix: padded_prefix[..split].to_vec(),
            patch_pos,
            class_id,
        };
        input.validate(arch)?;
        Ok(input)
    }

    pub fn prefix_tokens(&self, c: usize) -> usize {
        self.prefix.len() / c
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        check_len("velocity input y", arch.output_dim(), self.y.len())?;
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::OutOfRange(format!("time {} not in [0, 1]", self.t)));
        }
        if self.patch_pos == 0 || self.patch_pos > arch.num_patches() {
            return Err(Error::OutOfRange(format!(
                "patch position {} not in 1..={}",
                self.patch_pos,
                arch.num_patches()
            )));
        }
        let expected_prefix = (self.patch_pos - 1) * arch.patch_tokens * arch.c;
        check_len("velocity input prefix", expected_prefix, self.prefix.len())?;
        if let Some(class) = self.class_id {
            if class as usize >= arch.num_classes {
                return Err(Error::OutOfRange(format!(
                    "class {class} but the model has {} classes",
                    arch.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `(sin(2^j π t), cos(2^j π t))` for `j = 0..dim/2`.
pub fn time_embedding(t: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    let mut freq = std::f64::consts::PI;
    for pair in out.chunks_exact_mut(2) {
        let (s, c) = (freq * t).sin_cos();
        pair[0] = s;
        pair[1] = c;
        freq *= 2.0;
    }
}

fn write_features(arch: &ArchSpec, input: &VelocityInput, out: &mut [f64]) {
    out.fill(0.0);
    let mut at = 0;
    out[..input.y.len()].copy_from_slice(&input.y);
    at += arch.output_dim();
    time_embedding(
        input.t,
        arch.t_embed_dim,
        &mut out[at..at + arch.t_embed_dim],
    );
    at += arch.t_embed_dim;
    out[at..at + input.prefix.len()].copy_from_slice(&input.prefix);
    at += arch.max_prefix * arch.c;
    let prefix_tokens = input.prefix_tokens(arch.c);
    out[at..at + prefix_tokens].fill(1.0);
    at += arch.max_prefix;
    out[at + input.patch_pos - 1] = 1.0;
    at += arch.num_patches();
    if let Some(class) = input.class_id {
        out[at + class as usize] = 1.0;
    }
}

/// Feature vector fed to the network's first layer.
pub fn features(arch: &ArchSpec, input: &VelocityInput) -> Result<Vec<f64>> {
    input.validate(arch)?;
    let mut out = vec![0.0; arch.input_dim()];
    write_features(arch, input, &mut out);
    Ok(out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Reusable activation buffers for one network.
struct Workspace {
    layers: Vec<LayerShape>,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(arch: &ArchSpec) -> Self {
        let layers = arch.layers();
        let mut acts = vec![vec![0.0; arch.input_dim()]];
        acts.extend(layers.iter().map(|l| vec![0.0; l.rows]));
        let widest = layers.iter().map(|l| l.rows.max(l.cols)).max().unwrap_or(0);
        Workspace {
            layers,
            acts,
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }

    fn forward(&mut self, weights: &[f64]) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let input = &head[l];
            let output = &mut tail[0];
            let bias = &weights[layer.bias_offset()..layer.end()];
            for (o, out) in output.iter_mut().enumerate() {
                let row =
                    &weights[layer.offset + o * layer.cols..layer.offset + (o + 1) * layer.cols];
                let z = bias[o] + dot(row, input);
                *out = if l == last { z } else { z.tanh() };
            }
        }
    }

    fn output(&self) -> &[f64] {
        self.acts.last().expect("network has an output layer")
    }

    /// Accumulates `d loss / d weights` into `grad` given `d loss / d output`.
    fn backward(&mut self, weights: &[f64], d_output: &[f64], grad: &mut [f64]) {
        self.delta.clear();
        self.delta.extend_from_slice(d_output);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &self.acts[l];
            for (o, &d) in self.delta.iter().enumerate() {
                let start = layer.offset + o * layer.cols;
                axpy(d, input, &mut grad[start..start + layer.cols]);
                grad[layer.bias_offset() + o] += d;
            }
            if l == 0 {
                break;
            }
            self.delta_prev.clear();
            self.delta_prev.resize(layer.cols, 0.0);
            for (o, &d) in self.delta.iter().enumerate() {
                let start = layer.offset + o * layer.cols;
                axpy(d, &weights[start..start + layer.cols], &mut self.delta_prev);
            }
            for (dp, a) in self.delta_prev.iter_mut().zip(input) {
                *dp *= 1.0 - a * a;
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
    }
}

pub fn forward(params: &VelocityParams, input: &VelocityInput) -> Result<Vec<f64>> {
    let arch = &params.arch;
    input.validate(arch)?;
    let mut ws = Workspace::new(arch);
    write_features(arch, input, &mut ws.acts[0]);
    ws.forward(&params.weights);
    Ok(ws.output().to_vec())
}

/// Evaluator that reuses its buffers across calls.
pub struct Evaluator<'a> {
    params: &'a VelocityParams,
    ws: Workspace,
}

impl<'a> Evaluator<'a> {
    pub fn new(params: &'a VelocityParams) -> Self {
        Evaluator {
            params,
            ws: Workspace::new(&params.arch),
        }
    }

    pub fn eval(&mut self, input: &VelocityInput) -> Result<&[f64]> {
        let arch = &self.params.arch;
        input.validate(arch)?;
        write_features(arch, input, &mut self.ws.acts[0]);
        self.ws.forward(&self.params.weights);
        Ok(self.ws.output())
    }
}

/// A regression pair: network input and the velocity it should produce.
#[derive(Debug, Clone, Copy)]
pub struct Regression<'a> {
    pub input: &'a VelocityInput,
    pub target: &'a [f64],
}

fn check_batch(arch: &ArchSpec, batch: &[Regression<'_>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("regression batch"));
    }
    for item in batch {
        item.input.validate(arch)?;
        check_len("regression target", arch.output_dim(), item.target.len())?;
    }
    Ok(())
}

/// Mean squared error over batch items and output components.
pub fn loss(params: &VelocityParams, batch: &[Regression<'_>]) -> Result<f64> {
    let arch = &params.arch;
    check_batch(arch, batch)?;
    let mut ws = Workspace::new(arch);
    let mut total = 0.0;
    for item in batch {
        write_features(arch, item.input, &mut ws.acts[0]);
        ws.forward(&params.weights);
        total += ws
            .output()
            .iter()
            .zip(item.target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>();
    }
    Ok(total / (batch.len() * arch.output_dim()) as f64)
}

/// Loss and its exact gradient, accumulated over the batch in order.
pub fn loss_and_grad(params: &VelocityParams, batch: &[Regression<'_>]) -> Result<(f64, Vec<f64>)> {
    let arch = &params.arch;
    check_batch(arch, batch)?;
    let mut ws = Workspace::new(arch);
    let mut grad = vec![0.0; params.weights.len()];
    let scale = 1.0 / (batch.len() * arch.output_dim()) as f64;
    let mut total = 0.0;
    let mut d_out = vec![0.0; arch.output_dim()];
    for item in batch {
        write_features(arch, item.input, &mut ws.acts[0]);
        ws.forward(&params.weights);
        for ((d, o), t) in d_out.iter_mut().zip(ws.output()).zip(item.target) {
            let r = o - t;
            total += r * r;
            *d = 2.0 * r * scale;
        }
        ws.backward(&params.weights, &d_out, &mut grad);
    }
    Ok((total * scale, grad))
}

/// Central differences `(f(w + h e_j) - f(w - h e_j)) / 2h` for every coordinate.
pub fn central_difference<F>(weights: &[f64], h: f64, f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let all: Vec<usize> = (0..weights.len()).collect();
    central_difference_at(weights, &all, h, f)
}

/// Central differences for the listed weight indices only, in list order.
pub fn central_difference_at<F>(
    weights: &[f64],
    indices: &[usize],
    h: f64,
    mut f: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut w = weights.to_vec();
    let mut grad = Vec::with_capacity(indices.len());
    for &j in indices {
        if j >= w.len() {
            return Err(Error::OutOfRange(format!(
                "weight index {j} of {}",
                w.len()
            )));
        }
        let orig = w[j];
        w[j] = orig + h;
        let plus = f(&w)?;
        w[j] = orig - h;
        let minus = f(&w)?;
        w[j] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

pub fn finite_diff_grad(
    params: &VelocityParams,
    batch: &[Regression<'_>],
    h: f64,
) -> Result<Vec<f64>> {
    check_batch(&params.arch, batch)?;
    let mut probe = params.clone();
    central_difference(params.weights(), h, |w| {
        probe.weights.copy_from_slice(w);
        loss(&probe, batch)
    })
}

/// `|a - b| / max(|a|, |b|, 1e-8)`, maximized over components.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Ordering;
    use rand_distr::{Distribution, StandardNormal};

    fn small_arch(hidden_layers: usize) -> ArchSpec {
        ArchSpec {
            patch_tokens: 2,
            c: 1,
            max_prefix: 2,
            hidden_width: 5,
            hidden_layers,
            t_embed_dim: 2,
            num_classes: 2,
        }
    }

    fn random_input(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> VelocityInput {
        let pos = rng.random_range(1..=arch.num_patches());
        let t = rng.random_range(0.0..=1.0);
        let plen = (pos - 1) * arch.patch_tokens * arch.c;
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        VelocityInput {
            y: (0..arch.output_dim()).map(|_| normal()).collect(),
            t,
            prefix: (0..plen).map(|_| normal()).collect(),
            patch_pos: pos,
            class_id: None,
        }
    }

    #[test]
    fn module_arch_dimensions() {
        let s = ScheduleSpec::new(4, 2, 2, Ordering::Morton).unwrap();
        let a1 = ArchSpec::for_module(&s, 1, ArchOptions::default()).unwrap();
        assert_eq!(
            (a1.patch_tokens, a1.max_prefix, a1.num_patches()),
            (1, 3, 4)
        );
        assert_eq!(a1.input_dim(), 2 + 8 + 6 + 3 + 4);
        let a2 = ArchSpec::for_module(&s, 2, ArchOptions::default()).unwrap();
        assert_eq!(
            (a2.patch_tokens, a2.max_prefix, a2.num_patches()),
            (4, 12, 4)
        );
        assert_eq!(a2.output_dim(), 8);
        let v = ArchSpec::token_model(&s, ArchOptions::default()).unwrap();
        assert_eq!((v.max_prefix, v.num_patches()), (15, 16));
    }

    #[test]
    fn weight_count_matches_layout() {
        let arch = small_arch(2);
        let d_in = arch.input_dim();
        let expected = 5 * d_in + 5 + 5 * 5 + 5 + 2 * 5 + 2;
        assert_eq!(arch.num_weights(), expected);
        assert_eq!(arch.layer_shapes(), vec![(5, d_in), (5, 5), (2, 5)]);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let arch = small_arch(2);
        let a = init_params(&arch, 1).unwrap();
        let b = init_params(&arch, 1).unwrap();
        let c = init_params(&arch, 2).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
        for r in arch.bias_ranges() {
            assert!(a.weights()[r].iter().all(|&w| w == 0.0));
        }
        for (r, (_, cols)) in arch.matrix_ranges().into_iter().zip(arch.layer_shapes()) {
            let bound = 1.0 / (cols as f64).sqrt();
            assert!(a.weights()[r].iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let arch = small_arch(2);
        let params = VelocityParams::zeros(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_input(&arch, &mut rng);
        assert_eq!(forward(&params, &input).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn forward_is_pure() {
        let arch = small_arch(2);
        let params = init_params(&arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_input(&arch, &mut rng);
        assert_eq!(
            forward(&params, &input).unwrap(),
            forward(&params, &input).unwrap()
        );
    }

    #[test]
    fn linear_identity_selects_y() {
        let arch = small_arch(0);
        let mut w = vec![0.0; arch.num_weights()];
        let cols = arch.input_dim();
        for o in 0..arch.output_dim() {
            w[o * cols + o] = 1.0;
        }
        let params = VelocityParams::new(arch, w).unwrap();
        let input = VelocityInput {
            y: vec![0.25, -1.5],
            t: 0.3,
            prefix: vec![7.0, 8.0],
            patch_pos: 2,
            class_id: Some(1),
        };
        assert_eq!(forward(&params, &input).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn feature_layout() {
        let arch = small_arch(1);
        let input = VelocityInput {
            y: vec![1.0, 2.0],
            t: 0.0,
            prefix: vec![3.0, 4.0],
            patch_pos: 2,
            class_id: Some(1),
        };
        let f = features(&arch, &input).unwrap();
        // y | sin cos | prefix(2) | mask(2) | pos(2) | class(2)
        assert_eq!(
            f,
            vec![1.0, 2.0, 0.0, 1.0, 3.0, 4.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn validation_errors() {
        let arch = small_arch(1);
        let params = init_params(&arch, 0).unwrap();
        let ok = VelocityInput {
            y: vec![0.0; 2],
            t: 0.5,
            prefix: vec![],
            patch_pos: 1,
            class_id: None,
        };
        assert!(forward(&params, &ok).is_ok());
        let bad_y = VelocityInput {
            y: vec![0.0; 3],
            ..ok.clone()
        };
        assert!(matches!(
            forward(&params, &bad_y),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad_t = VelocityInput {
            t: 1.5,
            ..ok.clone()
        };
        assert!(matches!(
            forward(&params, &bad_t),
            Err(Error::OutOfRange(_))
        ));
        let bad_prefix = VelocityInput {
            prefix: vec![1.0],
            ..ok.clone()
        };
        assert!(matches!(
            forward(&params, &bad_prefix),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad_class = VelocityInput {
            class_id: Some(2),
            ..ok.clone()
        };
        assert!(matches!(
            forward(&params, &bad_class),
            Err(Error::OutOfRange(_))
        ));
        let bad_pos = VelocityInput { patch_pos: 3, ..ok };
        assert!(matches!(
            forward(&params, &bad_pos),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn padded_inputs_are_validated() {
        let arch = small_arch(1);
        let good =
            VelocityInput::from_padded(&arch, vec![0.0; 2], 0.1, &[5.0, 6.0], &[1.0, 1.0], 2, None)
                .unwrap();
        assert_eq!(good.prefix, vec![5.0, 6.0]);
        let empty =
            VelocityInput::from_padded(&arch, vec![0.0; 2], 0.1, &[0.0, 0.0], &[0.0, 0.0], 1, None)
                .unwrap();
        assert!(empty.prefix.is_empty());
        // non-zero padding
        assert!(VelocityInput::from_padded(
            &arch,
            vec![0.0; 2],
            0.1,
            &[0.0, 0.5],
            &[0.0, 0.0],
            1,
            None
        )
        .is_err());
        // mask with a hole
        assert!(VelocityInput::from_padded(
            &arch,
            vec![0.0; 2],
            0.1,
            &[0.0, 0.0],
            &[0.0, 1.0],
            1,
            None
        )
        .is_err());
    }

    #[test]
    fn zero_network_loss_hand_value() {
        let arch = ArchSpec {
            patch_tokens: 1,
            c: 2,
            max_prefix: 0,
            hidden_width: 3,
            hidden_layers: 1,
            t_embed_dim: 2,
            num_classes: 0,
        };
        let params = VelocityParams::zeros(arch).unwrap();
        // x = (1, 0), eps = (0, 1): target eps - x = (-1, 1)
        let input = VelocityInput {
            y: vec![0.5, 0.5],
            t: 0.5,
            prefix: vec![],
            patch_pos: 1,
            class_id: None,
        };
        let target = [-1.0, 1.0];
        let batch = [Regression {
            input: &input,
            target: &target,
        }];
        let (l, _) = loss_and_grad(&params, &batch).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let arch = small_arch(2);
        let params = init_params(&arch, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs: Vec<_> = (0..4).map(|_| random_input(&arch, &mut rng)).collect();
        let targets: Vec<_> = inputs
            .iter()
            .map(|i| forward(&params, i).unwrap())
            .collect();
        let batch: Vec<_> = inputs
            .iter()
            .zip(&targets)
            .map(|(input, target)| Regression { input, target })
            .collect();
        let (l, g) = loss_and_grad(&params, &batch).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = init_params(&small_arch(1), 0).unwrap();
        assert!(matches!(loss_and_grad(&params, &[]), Err(Error::Empty(_))));
        assert!(matches!(loss(&params, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn quadratic_central_difference() {
        let g = central_difference(&[3.0], 1e-5, |w| Ok(w[0] * w[0])).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert!(central_difference(&[3.0], 0.0, |w| Ok(w[0])).is_err());
        assert!(central_difference(&[3.0], -1.0, |w| Ok(w[0])).is_err());
    }

    #[test]
    fn tiny_net_gradient_matches_finite_differences() {
        // y, sin, cos, position, 3 classes -> 1 tanh unit -> 1 output: 10 weights
        let arch = ArchSpec {
            patch_tokens: 1,
            c: 1,
            max_prefix: 0,
            hidden_width: 1,
            hidden_layers: 1,
            t_embed_dim: 2,
            num_classes: 3,
        };
        assert_eq!(arch.num_weights(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = init_params(&arch, 12).unwrap();
        for w in params.weights_mut() {
            *w += rng.random_range(-0.5..0.5);
        }
        let inputs: Vec<_> = (0..3u32)
            .map(|i| VelocityInput {
                class_id: Some(i),
                ..random_input(&arch, &mut rng)
            })
            .collect();
        let targets: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let batch: Vec<_> = inputs
            .iter()
            .zip(&targets)
            .map(|(input, target)| Regression { input, target })
            .collect();
        let (_, analytic) = loss_and_grad(&params, &batch).unwrap();
        let numeric = finite_diff_grad(&params, &batch, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        assert!(finite_diff_grad(&params, &batch, 0.0).is_err());
    }

    #[test]
    fn outputs_bounded_by_head_norm() {
        let arch = small_arch(2);
        let params = init_params(&arch, 13).unwrap();
        let head = arch.layers().last().copied().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let mut input = random_input(&arch, &mut rng);
            for v in input.y.iter_mut().chain(input.prefix.iter_mut()) {
                *v *= 1e6;
            }
            let out = forward(&params, &input).unwrap();
            for (o, value) in out.iter().enumerate() {
                let row = &params.weights()
                    [head.offset + o * head.cols..head.offset + (o + 1) * head.cols];
                let bound: f64 = row.iter().map(|w| w.abs()).sum::<f64>()
                    + params.weights()[head.bias_offset() + o].abs();
                assert!(value.is_finite() && value.abs() <= bound + 1e-12);
            }
        }
    }
}
