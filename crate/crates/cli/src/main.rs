use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use nestar::data::{self, Dataset};
use nestar::gradcheck::{self, LossKind};
use nestar::metrics::{self, Bandwidth, MetricsTable, MmdConfig, RadiusPolicy, SUBSTITUTE_NOTE};
use nestar::persistence::{self, GeneratorName, RunConfig};
use nestar::sampler::{self, ClassPolicy};
use nestar::trainer::{self, ModelLayout};
use nestar::velocity::{init_params, ArchOptions, ArchSpec};
use nestar::{Error, Ordering, Result, ScheduleSpec};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "nestar",
    version,
    about = "Nested autoregressive flow-matching experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and held-out datasets.
    GenData(Common),
    /// Pretrain every module on its own flow-matching loss.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Record elapsed seconds in history.csv (otherwise 0).
        #[arg(long)]
        wall_clock: bool,
    },
    /// Jointly finetune a checkpoint with the coordination loss.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Items for the fixed coordination-loss probe (defaults to --data).
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        eval_items: usize,
        #[arg(long)]
        wall_clock: bool,
    },
    /// Generate sequences from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_samples: Option<usize>,
        /// Euler steps per patch.
        #[arg(long)]
        steps: Option<usize>,
        /// Fixed class id for every sample.
        #[arg(long)]
        class: Option<u32>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// MMD and mode coverage of samples against a reference dataset.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fixed kernel bandwidth instead of the median heuristic.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Compare analytic gradients with central differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120)]
        cases: usize,
    },
    /// Patch and evaluation counts of nested versus token-by-token generation.
    CountNfe {
        #[arg(long)]
        k: usize,
        #[arg(long = "M")]
        modules: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Also run both samplers on zero fields and count calls.
        #[arg(long)]
        measure: bool,
    },
    /// Wall-clock time per sample, nested versus token-by-token.
    Bench {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long = "M", default_value_t = 3)]
        modules: usize,
        #[arg(long, default_value_t = 2)]
        c: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => persistence::load_config(p),
        None => persistence::parse_config(""),
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.echo"), cfg.echo()?)?;
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(c) => gen_data(c),
        Command::Train {
            common,
            data,
            wall_clock,
        } => train(common, &data, wall_clock),
        Command::Finetune {
            common,
            data,
            checkpoint,
            heldout,
            eval_items,
            wall_clock,
        } => finetune(
            common,
            &data,
            &checkpoint,
            heldout.as_deref(),
            eval_items,
            wall_clock,
        ),
        Command::Sample {
            checkpoint,
            config,
            out,
            seed,
            num_samples,
            steps,
            class,
            jobs,
        } => sample(
            &checkpoint,
            config.as_deref(),
            out.as_deref(),
            seed,
            num_samples,
            steps,
            class,
            jobs,
        ),
        Command::Eval {
            samples,
            reference,
            config,
            out,
            bandwidth,
        } => eval(
            &samples,
            &reference,
            config.as_deref(),
            out.as_deref(),
            bandwidth,
        ),
        Command::CheckGrad { seed, cases } => check_grad(seed, cases),
        Command::CountNfe {
            k,
            modules,
            steps,
            measure,
        } => count_nfe(k, modules, steps, measure),
        Command::Bench {
            k,
            modules,
            c,
            steps,
            width,
            samples,
            seed,
            out,
        } => bench(k, modules, c, steps, width, samples, seed, out.as_deref()),
    }
}

fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let schedule = cfg.schedule()?;
    let total = cfg.data.num_items + cfg.data.held_out;
    match cfg.data.generator {
        GeneratorName::HierQuadrant => {
            data::gen_hier_quadrant(&schedule, &cfg.hier_params(), total, cfg.data.seed)
        }
        GeneratorName::IidGauss => data::gen_iid_gauss(&schedule, total, cfg.data.seed),
    }
}

fn gen_data(c: Common) -> Result<ExitCode> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.data.seed = seed;
    }
    let all = generate_dataset(&cfg)?;
    let (train, heldout) = all.split_at(cfg.data.num_items)?;
    prepare_out(&c.out, &cfg)?;
    data::save_dataset(&train, &c.out.join("data.nsds"))?;
    if !heldout.is_empty() {
        data::save_dataset(&heldout, &c.out.join("heldout.nsds"))?;
    }
    println!(
        "{}: {} training items, {} held-out items",
        cfg.data.generator.as_str(),
        train.len(),
        heldout.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(c: Common, data_path: &Path, wall_clock: bool) -> Result<ExitCode> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    let layout = cfg.layout()?;
    let dataset = data::load_dataset_for(data_path, layout.schedule())?;
    let (params, history) = trainer::pretrain_all(&layout, &dataset, &cfg.train_config())?;
    prepare_out(&c.out, &cfg)?;
    persistence::save_checkpoint(&c.out.join("checkpoint.nstr"), layout.schedule(), &params)?;
    fs::write(c.out.join("history.csv"), history.to_csv(wall_clock))?;
    if let Some(last) = history.records().last() {
        println!(
            "pretrained {} modules, final summed loss {:.6}",
            params.len(),
            last.total
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn finetune(
    c: Common,
    data_path: &Path,
    checkpoint: &Path,
    heldout: Option<&Path>,
    eval_items: usize,
    wall_clock: bool,
) -> Result<ExitCode> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    let layout = cfg.layout()?;
    let schedule = *layout.schedule();
    let dataset = data::load_dataset_for(data_path, &schedule)?;
    let params = persistence::load_checkpoint_for(checkpoint, &schedule)?;
    layout.check_params(&params)?;
    let probe = match heldout {
        Some(p) => data::load_dataset_for(p, &schedule)?,
        None => dataset.clone(),
    };
    let tcfg = cfg.train_config();
    let mut table = MetricsTable::default();
    table
        .meta("generator", cfg.data.generator.as_str())
        .meta("train_seed", tcfg.seed)
        .meta("config_hash", metrics::config_hash(&cfg.echo()?));
    let pairs = if schedule.modules() > 1 {
        Some(trainer::coord_eval_pairs(
            &layout, &probe, eval_items, tcfg.seed,
        )?)
    } else {
        None
    };
    let before = match &pairs {
        Some(p) => Some(trainer::coord_loss_total(&layout, &params, p)?),
        None => None,
    };
    let (params, history) = trainer::finetune_all(&layout, params, &dataset, &tcfg)?;
    if let (Some(p), Some(before)) = (&pairs, before) {
        let after = trainer::coord_loss_total(&layout, &params, p)?;
        table
            .row("coord_loss_start", before)
            .row("coord_loss_end", after)
            .row("coord_loss_drop", 1.0 - after / before);
        println!("coordination loss {before:.6} -> {after:.6}");
    }
    if let Some(last) = history.records().last() {
        table
            .row("module_loss_final", last.l_module_total)
            .row("total_loss_final", last.total);
    }
    prepare_out(&c.out, &cfg)?;
    persistence::save_checkpoint(&c.out.join("checkpoint.nstr"), &schedule, &params)?;
    fs::write(c.out.join("history.csv"), history.to_csv(wall_clock))?;
    fs::write(c.out.join("metrics.csv"), table.to_csv())?;
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    checkpoint: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    num_samples: Option<usize>,
    steps: Option<usize>,
    class: Option<u32>,
    jobs: usize,
) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    let (schedule, params) = if config.is_some() {
        let schedule = cfg.schedule()?;
        (
            schedule,
            persistence::load_checkpoint_for(checkpoint, &schedule)?,
        )
    } else {
        let (schedule, params) = persistence::load_checkpoint(checkpoint)?;
        cfg.schedule.k = schedule.k();
        cfg.schedule.modules = schedule.modules();
        cfg.schedule.token_dim = schedule.c();
        cfg.schedule.ordering = schedule.ordering();
        (schedule, params)
    };
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
    if let Some(n) = num_samples {
        cfg.sampler.num_samples = n;
    }
    if let Some(s) = steps {
        cfg.sampler.ode_steps = s;
    }
    let num_classes = params[0].arch().num_classes as u32;
    let policy = match (class, num_classes) {
        (Some(c), n) if c < n => ClassPolicy::Fixed(c),
        (Some(c), n) => {
            return Err(Error::OutOfRange(format!(
                "class {c} but the model knows {n} classes"
            )))
        }
        (None, 0) => ClassPolicy::None,
        (None, n) => ClassPolicy::Uniform(n),
    };
    let (samples, report) = sampler::generate_many(
        &schedule,
        &params,
        cfg.sampler.num_samples,
        cfg.sampler.seed,
        cfg.sampler.ode_steps,
        policy,
        jobs,
    )?;
    if let Some(out) = out {
        prepare_out(out, &cfg)?;
        data::save_dataset(&samples, &out.join("samples.nsds"))?;
        fs::write(out.join("nfe.csv"), report.to_csv())?;
    }
    println!(
        "{} samples, {} velocity evaluations ({} per sample)",
        samples.len(),
        report.velocity_calls,
        report.velocity_calls / samples.len().max(1)
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(
    samples: &Path,
    reference: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    bandwidth: Option<f64>,
) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let gen = data::load_dataset(samples)?;
    let reference = data::load_dataset(reference)?;
    if gen.fingerprint() != reference.fingerprint() {
        return Err(Error::Structure(
            "samples and reference use different schedules".into(),
        ));
    }
    let schedule = gen.fingerprint().schedule()?;
    let mmd_cfg = MmdConfig {
        bandwidth: bandwidth.map_or(Bandwidth::MedianHeuristic, Bandwidth::Fixed),
    };
    let gv = gen.flat_vectors();
    let rv = reference.flat_vectors();
    let mut table = MetricsTable::default();
    table
        .meta("generator", cfg.data.generator.as_str())
        .meta("data_seed", cfg.data.seed)
        .meta("sampler_seed", cfg.sampler.seed)
        .meta("config_hash", metrics::config_hash(&cfg.echo()?))
        .meta("note", SUBSTITUTE_NOTE);
    let score = metrics::mmd(&gv, &rv, &mmd_cfg)?;
    table.row("mmd2", score);
    println!("mmd2 {score:.6e}");
    if rv.len() >= 2 {
        let half = rv.len() / 2;
        let base = metrics::mmd(&rv[..half], &rv[half..], &mmd_cfg)?;
        table
            .row("mmd2_reference_halves", base)
            .row("mmd2_ratio", score / base);
        println!(
            "mmd2 between reference halves {base:.6e} (ratio {:.3})",
            score / base
        );
    }
    if cfg.data.generator == GeneratorName::HierQuadrant && cfg.schedule()? == schedule {
        let n = schedule.n();
        let centers: Vec<Vec<f64>> = cfg
            .data
            .class_means
            .iter()
            .map(|m| m.iter().copied().cycle().take(n * m.len()).collect())
            .collect();
        let cov = metrics::mode_coverage(&gv, &centers, RadiusPolicy::Nearest)?;
        table
            .row("coverage", cov.coverage)
            .row("entropy", cov.entropy);
        println!(
            "coverage {:.3}, entropy {:.4} nats, counts {:?}",
            cov.coverage, cov.entropy, cov.counts
        );
    }
    if let Some(out) = out {
        prepare_out(out, &cfg)?;
        fs::write(out.join("metrics.csv"), table.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn check_grad(seed: u64, cases: usize) -> Result<ExitCode> {
    let report = gradcheck::grad_check_suite(seed, cases)?;
    for kind in [LossKind::Module, LossKind::Coord] {
        for m in [1, 2] {
            let sel: Vec<_> = report
                .cases
                .iter()
                .filter(|c| c.kind == kind && c.m == m)
                .collect();
            if sel.is_empty() {
                continue;
            }
            let worst = sel.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            println!(
                "{:?} loss, m={m}: {} cases, max relative error {worst:.3e}",
                kind,
                sel.len()
            );
        }
    }
    let worst = report.max_rel_err();
    println!(
        "max relative error {worst:.3e} over {} cases",
        report.cases.len()
    );
    if worst < GRAD_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error[gradient-mismatch]: max relative error {worst:.3e} >= {GRAD_TOLERANCE:e}");
        Ok(ExitCode::from(1))
    }
}

fn nfe_schedule(k: usize, modules: usize, c: usize) -> Result<ScheduleSpec> {
    let ordering = if k == 4 {
        Ordering::Morton
    } else {
        Ordering::Raster
    };
    ScheduleSpec::new(k, modules, c, ordering)
}

fn count_nfe(k: usize, modules: usize, steps: usize, measure: bool) -> Result<ExitCode> {
    let n = u32::try_from(modules)
        .ok()
        .and_then(|m| k.checked_pow(m))
        .ok_or_else(|| Error::Overflow(format!("{k}^{modules} does not fit")))?;
    let row = metrics::complexity_report(k, modules, steps, n)?;
    println!("{}", metrics::ComplexityRow::CSV_HEADER);
    println!("{}", row.csv_row());
    println!("{row}");
    if measure {
        let schedule = nfe_schedule(k, modules, 1)?;
        let mut rng = nestar::rng::stream(0, nestar::rng::TAG_SAMPLE, 0, 0);
        let (_, nested) = sampler::generate_with(&schedule, steps, None, &mut rng, |_, _, out| {
            out.fill(0.0);
            Ok(())
        })?;
        let arch = ArchSpec::token_model(
            &schedule,
            ArchOptions {
                hidden_width: 1,
                hidden_layers: 1,
                t_embed_dim: 2,
                num_classes: 0,
            },
        )?;
        let token_model = init_params(&arch, 0)?;
        let (_, vanilla) = sampler::generate_vanilla_ar(&schedule, &token_model, None, 0, steps)?;
        println!(
            "measured: nested {} calls, token-by-token {} calls",
            nested.velocity_calls, vanilla.velocity_calls
        );
        if nested.velocity_calls != row.nested_nfe() || vanilla.velocity_calls != row.vanilla_nfe()
        {
            return Err(Error::Structure(
                "measured evaluation counts disagree with the formula".into(),
            ));
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn bench(
    k: usize,
    modules: usize,
    c: usize,
    steps: usize,
    width: usize,
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    if samples == 0 {
        return Err(Error::InvalidParameter("--samples must be >= 1".into()));
    }
    let schedule = nfe_schedule(k, modules, c)?;
    let opts = ArchOptions {
        hidden_width: width,
        hidden_layers: 2,
        t_embed_dim: 8,
        num_classes: 0,
    };
    let layout = ModelLayout::new(schedule, opts)?;
    let params = layout.init_all(seed)?;
    let token_model = init_params(&ArchSpec::token_model(&schedule, opts)?, seed)?;

    let clock = Instant::now();
    let (_, nested) = sampler::generate_many(
        &schedule,
        &params,
        samples,
        seed,
        steps,
        ClassPolicy::None,
        1,
    )?;
    let nested_ms = clock.elapsed().as_secs_f64() * 1e3 / samples as f64;
    let clock = Instant::now();
    let mut vanilla_calls = 0;
    for j in 0..samples {
        let (_, r) = sampler::generate_vanilla_ar(
            &schedule,
            &token_model,
            None,
            sampler::sample_seed(seed, j),
            steps,
        )?;
        vanilla_calls += r.velocity_calls;
    }
    let vanilla_ms = clock.elapsed().as_secs_f64() * 1e3 / samples as f64;

    let mut csv = String::from("method,n,ode_steps,nfe_per_sample,ms_per_sample\n");
    csv.push_str(&format!(
        "nested,{},{steps},{},{nested_ms:.3}\n",
        schedule.n(),
        nested.velocity_calls / samples
    ));
    csv.push_str(&format!(
        "token-by-token,{},{steps},{},{vanilla_ms:.3}\n",
        schedule.n(),
        vanilla_calls / samples
    ));
    print!("{csv}");
    println!("speedup {:.2}x", vanilla_ms / nested_ms);
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.csv"), csv)?;
    }
    Ok(ExitCode::SUCCESS)
}
