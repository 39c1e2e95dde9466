//! Checkpoints and run configuration.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "NSTR" | version u32 | k u32 | M u32 | c u32 | ordering u32 | modules u32
//! per module: patch_tokens, c, max_prefix, hidden_width, hidden_layers,
//!             t_embed_dim, num_classes (u32 each) | weight count u64
//! weights of module 1, 2, ... as f64
//! CRC32 (IEEE) of every preceding byte, u32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::data::HierParams;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::schedule::{Ordering, ScheduleSpec};
use crate::trainer::{ModelLayout, TrainConfig};
use crate::velocity::{ArchOptions, ArchSpec, VelocityParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NSTR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(schedule: &ScheduleSpec, params: &[VelocityParams]) -> Result<Vec<u8>> {
    ModelLayout::from_params(*schedule, params)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    codec::put_u32(&mut buf, CHECKPOINT_VERSION);
    for v in [schedule.k(), schedule.modules(), schedule.c()] {
        codec::put_u32(&mut buf, codec::to_u32(v, "schedule field")?);
    }
    codec::put_u32(&mut buf, schedule.ordering().code());
    codec::put_u32(&mut buf, codec::to_u32(params.len(), "module count")?);
    for p in params {
        let a = p.arch();
        for v in [
            a.patch_tokens,
            a.c,
            a.max_prefix,
            a.hidden_width,
            a.hidden_layers,
            a.t_embed_dim,
            a.num_classes,
        ] {
            codec::put_u32(&mut buf, codec::to_u32(v, "architecture field")?);
        }
        codec::put_u64(&mut buf, p.weights().len() as u64);
    }
    for p in params {
        codec::put_f64s(&mut buf, p.weights());
    }
    let crc = crc32fast::hash(&buf);
    codec::put_u32(&mut buf, crc);
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ScheduleSpec, Vec<VelocityParams>)> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "checkpoint too short ({} bytes)",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader::new(body, "checkpoint");
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let (k, modules, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let ordering = Ordering::from_code(r.u32()?)?;
    let schedule = ScheduleSpec::new(k, modules, c, ordering)
        .map_err(|e| Error::Structure(format!("checkpoint schedule is invalid: {e}")))?;
    let count = r.u32()? as usize;
    if count != modules {
        return Err(Error::Structure(format!(
            "checkpoint lists {count} modules for a schedule with M = {modules}"
        )));
    }
    let mut archs = Vec::with_capacity(count);
    for m in 1..=count {
        let mut f = [0usize; 7];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let arch = ArchSpec {
            patch_tokens: f[0],
            c: f[1],
            max_prefix: f[2],
            hidden_width: f[3],
            hidden_layers: f[4],
            t_embed_dim: f[5],
            num_classes: f[6],
        };
        let opts = ArchOptions {
            hidden_width: arch.hidden_width,
            hidden_layers: arch.hidden_layers,
            t_embed_dim: arch.t_embed_dim,
            num_classes: arch.num_classes,
        };
        let expected = ArchSpec::for_module(&schedule, m, opts)
            .map_err(|e| Error::Structure(format!("module {m}: {e}")))?;
        if arch != expected {
            return Err(Error::Structure(format!(
                "module {m} architecture does not fit the schedule"
            )));
        }
        let weights = r.u64()?;
        if weights != arch.num_weights() as u64 {
            return Err(Error::Structure(format!(
                "module {m} stores {weights} weights, architecture needs {}",
                arch.num_weights()
            )));
        }
        archs.push(arch);
    }
    let mut params = Vec::with_capacity(count);
    for arch in archs {
        let w = r.f64s(arch.num_weights())?;
        params.push(VelocityParams::new(arch, w)?);
    }
    r.finish()?;
    ModelLayout::from_params(schedule, &params)?;
    Ok((schedule, params))
}

pub fn save_checkpoint(
    path: &Path,
    schedule: &ScheduleSpec,
    params: &[VelocityParams],
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(schedule, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ScheduleSpec, Vec<VelocityParams>)> {
    decode_checkpoint(&codec::read_file(path)?)
}

/// Loads a checkpoint and requires it to match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ScheduleSpec) -> Result<Vec<VelocityParams>> {
    let (schedule, params) = load_checkpoint(path)?;
    if schedule != *expected {
        return Err(Error::Structure(format!(
            "checkpoint has k={}, M={}, c={}, {:?}; run expects k={}, M={}, c={}, {:?}",
            schedule.k(),
            schedule.modules(),
            schedule.c(),
            schedule.ordering(),
            expected.k(),
            expected.modules(),
            expected.c(),
            expected.ordering()
        )));
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub k: usize,
    pub modules: usize,
    pub token_dim: usize,
    pub ordering: Ordering,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            k: 4,
            modules: 2,
            token_dim: 2,
            ordering: Ordering::Morton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub t_embed_dim: usize,
    pub class_conditional: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchOptions::default();
        ModelSection {
            hidden_width: a.hidden_width,
            hidden_layers: a.hidden_layers,
            t_embed_dim: a.t_embed_dim,
            class_conditional: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub optimizer: OptimizerName,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lambda_module: f64,
    pub lambda_coor: f64,
    pub seed: u64,
    /// Gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub freeze_lower: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            optimizer: OptimizerName::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: t.batch_size,
            pretrain_steps: t.pretrain_steps,
            finetune_steps: t.finetune_steps,
            lambda_module: t.lambda_module,
            lambda_coor: t.lambda_coor,
            seed: t.seed,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            freeze_lower: t.freeze_lower,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorName {
    HierQuadrant,
    IidGauss,
}

impl GeneratorName {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorName::HierQuadrant => "hier-quadrant",
            GeneratorName::IidGauss => "iid-gauss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub generator: GeneratorName,
    /// Training items; `held_out` more are generated after them.
    pub num_items: usize,
    pub held_out: usize,
    pub seed: u64,
    pub num_classes: usize,
    /// One scale per tree depth; empty means 0.5 at every depth.
    pub sigma_level: Vec<f64>,
    pub sigma_leaf: f64,
    pub class_mean_radius: f64,
    /// Empty means evenly spaced on a circle of `class_mean_radius`.
    pub class_means: Vec<Vec<f64>>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            generator: GeneratorName::HierQuadrant,
            num_items: 5000,
            held_out: 1000,
            seed: 0,
            num_classes: 4,
            sigma_level: Vec::new(),
            sigma_leaf: 0.3,
            class_mean_radius: 3.0,
            class_means: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub ode_steps: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            ode_steps: 50,
            num_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub sampler: SamplerSection,
}

impl RunConfig {
    pub fn schedule(&self) -> Result<ScheduleSpec> {
        let s = &self.schedule;
        ScheduleSpec::new(s.k, s.modules, s.token_dim, s.ordering)
    }

    /// Class count seen by the velocity networks (0 when unconditional).
    pub fn num_classes(&self) -> usize {
        if !self.model.class_conditional {
            0
        } else {
            match self.data.generator {
                GeneratorName::HierQuadrant => self.data.num_classes,
                GeneratorName::IidGauss => 1,
            }
        }
    }

    pub fn arch_options(&self) -> ArchOptions {
        ArchOptions {
            hidden_width: self.model.hidden_width,
            hidden_layers: self.model.hidden_layers,
            t_embed_dim: self.model.t_embed_dim,
            num_classes: self.num_classes(),
        }
    }

    pub fn layout(&self) -> Result<ModelLayout> {
        ModelLayout::new(self.schedule()?, self.arch_options())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            optimizer: match t.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::Adam {
                    beta1: t.adam_beta1,
                    beta2: t.adam_beta2,
                    eps: t.adam_eps,
                },
            },
            batch_size: t.batch_size,
            pretrain_steps: t.pretrain_steps,
            finetune_steps: t.finetune_steps,
            lambda_module: t.lambda_module,
            lambda_coor: t.lambda_coor,
            seed: t.seed,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            freeze_lower: t.freeze_lower,
        }
    }

    pub fn hier_params(&self) -> HierParams {
        HierParams {
            num_classes: self.data.num_classes,
            sigma_level: self.data.sigma_level.clone(),
            sigma_leaf: self.data.sigma_leaf,
            class_means: self.data.class_means.clone(),
        }
    }

    /// Fills the derived defaults that depend on other keys.
    pub fn materialize(&mut self) {
        if self.data.sigma_level.is_empty() {
            self.data.sigma_level = vec![0.5; self.schedule.modules];
        }
        if self.data.class_means.is_empty() {
            self.data.class_means = HierParams::circle_means(
                self.data.num_classes,
                self.schedule.token_dim,
                self.data.class_mean_radius,
            );
        }
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule()?;
        self.layout()?;
        self.train_config().validate()?;
        if self.train.grad_clip < 0.0 || !self.train.grad_clip.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "grad_clip must be >= 0, got {}",
                self.train.grad_clip
            )));
        }
        if self.data.generator == GeneratorName::HierQuadrant {
            self.hier_params().validate(&schedule)?;
        }
        if self.sampler.ode_steps == 0 {
            return Err(Error::InvalidParameter("ode_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// The fully materialized document, loadable by [`parse_config`].
    pub fn echo(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(format!("# nestar {}\n{body}", env!("CARGO_PKG_VERSION")))
    }
}

/// Parses, defaults and validates a TOML run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    cfg.materialize();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = codec::read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> (ScheduleSpec, Vec<VelocityParams>) {
        let cfg = parse_config("[model]\nhidden_width = 4\nhidden_layers = 1\nt_embed_dim = 2\n")
            .unwrap();
        let layout = cfg.layout().unwrap();
        (*layout.schedule(), layout.init_all(3).unwrap())
    }

    #[test]
    fn checkpoint_round_trip_is_canonical() {
        let (s, p) = params();
        let bytes = encode_checkpoint(&s, &p).unwrap();
        let (s2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(s, s2);
        assert_eq!(p, p2);
        assert_eq!(encode_checkpoint(&s2, &p2).unwrap(), bytes);
        assert_eq!(&bytes[..4], b"NSTR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let (s, p) = params();
        let bytes = encode_checkpoint(&s, &p).unwrap();
        for pos in [0, 5, 30, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(
                matches!(decode_checkpoint(&bad), Err(Error::Checksum { .. })),
                "pos {pos}"
            );
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(&[]).is_err());
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn structural_errors_behind_valid_crc() {
        let (s, p) = params();
        let bytes = encode_checkpoint(&s, &p).unwrap();
        let body = bytes[..bytes.len() - 4].to_vec();

        let mut v = body.clone();
        v[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&reseal(v)),
            Err(Error::Format(_))
        ));

        // module count 3 against M = 2
        let mut v = body.clone();
        v[24..28].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&reseal(v)),
            Err(Error::Structure(_))
        ));

        // module 1's max_prefix field
        let mut v = body.clone();
        v[36..40].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&reseal(v)),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.schedule.k, 4);
        assert_eq!(cfg.train.lambda_module, 1.0);
        assert_eq!(cfg.train.lambda_coor, 0.1);
        assert_eq!(cfg.sampler.ode_steps, 50);
        assert_eq!(cfg.data.sigma_level, vec![0.5, 0.5]);
        assert_eq!(cfg.data.class_means.len(), 4);
        assert_eq!(cfg.train_config().grad_clip, Some(10.0));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("[train]\nlamda_coor = 0.2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lamda_coor"), "{err}");
        let err = parse_config("[sampling]\n").unwrap_err();
        assert!(err.to_string().contains("sampling"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = parse_config("[train]\nlr = 0.1\nbatch_size = \"x\"\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn invalid_values() {
        assert!(matches!(
            parse_config("[train]\nlambda_coor = -1.0\n"),
            Err(Error::InvalidParameter(_))
        ));
        assert!(parse_config("[schedule]\nk = 3\n").is_err());
        assert!(parse_config(
            "[schedule]\nk = 3\nordering = \"raster\"\n[data]\ngenerator = \"iid-gauss\"\n"
        )
        .is_ok());
        assert!(parse_config("[sampler]\node_steps = 0\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse_config(
            "[train]\nlambda_coor = 0.25\noptimizer = \"sgd\"\n[data]\nclass_mean_radius = 2.5\n",
        )
        .unwrap();
        let echo = cfg.echo().unwrap();
        assert!(echo.starts_with("# nestar "));
        let again = parse_config(&echo).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.echo().unwrap(), echo);
    }
}
