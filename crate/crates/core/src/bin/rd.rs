//! Command-line driver: dataset generation plus one subcommand per pipeline
//! phase. Machine-readable JSON goes to stdout; logs go to stderr (level via
//! the RD_LOG env var). Exit codes: 0 success, 2 usage, 3 config violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use replay_distill::config::{self, ExperimentConfig};
use replay_distill::data;
use replay_distill::error::{Error, Result};
use replay_distill::mae::MaeModel;
use replay_distill::pipeline::{self, Classifier, TrainConfig};

#[derive(Parser)]
#[command(
    name = "rd",
    about = "Continual masked-autoencoder pretraining with latent replay distillation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed override; defaults to the first entry of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, buffers, and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dual-window dataset.
    GenData(Common),
    /// Train the first stage (initial self-supervised pretraining).
    Pretrain(Common),
    /// Sample the replay buffer from the first-stage encoder.
    SampleBuffer(Common),
    /// Train the remaining stages with replay distillation.
    Cssl(Common),
    /// Fine-tune the classification probe on the final encoder.
    Finetune(Common),
    /// Score the fine-tuned classifier on the test split.
    Evaluate(Common),
    /// Everything above, for every configured seed, with aggregation.
    RunAll(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RD_LOG")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Pretrain(c) => pretrain(c),
        Command::SampleBuffer(c) => sample_buffer(c),
        Command::Cssl(c) => cssl(c),
        Command::Finetune(c) => finetune(c),
        Command::Evaluate(c) => evaluate(c),
        Command::RunAll(c) => run_all(c),
    };
    match result {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(err @ Error::Config { .. }) => {
            eprintln!("error: {err}");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn setup(common: &Common) -> Result<(ExperimentConfig, u64)> {
    let cfg = config::load_config(&common.config)?;
    let seed = common.seed.unwrap_or(cfg.seeds[0]);
    Ok((cfg, seed))
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<data::Dataset> {
    data::ingest(
        Path::new(&cfg.data.dir),
        Some((cfg.model.image_h, cfg.model.image_w)),
    )
}

fn gen_data(common: &Common) -> Result<serde_json::Value> {
    let (cfg, seed) = setup(common)?;
    let mut spec = cfg.data.synth_spec(&cfg.model);
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let _ = seed;
    let dir = Path::new(&cfg.data.dir);
    data::generate_synth(&spec, dir, common.force)?;
    Ok(json!({
        "dataset_dir": dir,
        "images": spec.n_images * 2,
        "classes": spec.n_classes,
        "seed": spec.seed,
    }))
}

fn run_stage_range(common: &Common, range: std::ops::Range<usize>) -> Result<serde_json::Value> {
    let (cfg, seed) = setup(common)?;
    let dataset = load_dataset(&cfg)?;
    let (train, _) = pipeline::split_train_test(&dataset, cfg.eval.test_fraction);
    let tc = TrainConfig::from(&cfg.train);
    std::fs::create_dir_all(pipeline::seed_dir(&common.out, seed))?;
    let mut checkpoints = Vec::new();
    let mut rows = Vec::new();
    for i in range {
        let plan = pipeline::stage_plan(&cfg, i, seed, &common.out);
        if let Some(init) = &plan.init_from {
            if !init.join("arch.json").exists() {
                return Err(Error::config(
                    format!("/stages/{}", i - 1),
                    format!("missing checkpoint {} (run earlier stages first)", init.display()),
                ));
            }
        }
        let (_, stage_rows) = pipeline::run_stage(&plan, &tc, &cfg.model, &train)?;
        checkpoints.push(plan.checkpoint_out.clone());
        rows.extend(stage_rows);
    }
    let last = rows.last().map(|r| json!({"l_ssl": r.l_ssl, "l_fd": r.l_fd}));
    Ok(json!({"seed": seed, "checkpoints": checkpoints, "final_epoch": last}))
}

fn pretrain(common: &Common) -> Result<serde_json::Value> {
    run_stage_range(common, 0..1)
}

fn cssl(common: &Common) -> Result<serde_json::Value> {
    let (cfg, _) = setup(common)?;
    if cfg.stages.len() < 2 {
        return Err(Error::config("/stages", "cssl needs at least two stages"));
    }
    run_stage_range(common, 1..cfg.stages.len())
}

fn sample_buffer(common: &Common) -> Result<serde_json::Value> {
    let (cfg, seed) = setup(common)?;
    let plan = pipeline::stage_plan(&cfg, 0, seed, &common.out);
    if !plan.checkpoint_out.join("arch.json").exists() {
        return Err(Error::config(
            "/stages/0",
            format!(
                "missing stage checkpoint {} (run pretrain first)",
                plan.checkpoint_out.display()
            ),
        ));
    }
    let Some(out) = plan.buffer_out.clone() else {
        return Err(Error::config(
            "/stages/0/buffer_out",
            "first stage declares no buffer output",
        ));
    };
    let model = MaeModel::load(&plan.checkpoint_out)?;
    let dataset = load_dataset(&cfg)?;
    let (train, _) = pipeline::split_train_test(&dataset, cfg.eval.test_fraction);
    let domain = train.filter_domain(plan.domain);
    let (per_image, pooled) = pipeline::extract_features(&model, &domain.images)?;
    let buf = replay_distill::buffer::sample_buffer(
        &per_image,
        &pooled,
        cfg.train.alpha,
        cfg.train.beta,
        plan.stage_index,
        seed,
    )?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    replay_distill::buffer::save(&buf, &out)?;
    Ok(json!({
        "seed": seed,
        "buffer": out,
        "entries": buf.len(),
        "tokens": buf.tokens(),
        "embed_dim": buf.embed_dim(),
    }))
}

fn finetune(common: &Common) -> Result<serde_json::Value> {
    let (cfg, seed) = setup(common)?;
    let last = cfg.stages.len() - 1;
    let plan = pipeline::stage_plan(&cfg, last, seed, &common.out);
    if !plan.checkpoint_out.join("arch.json").exists() {
        return Err(Error::config(
            format!("/stages/{last}"),
            format!(
                "missing stage checkpoint {} (run the training stages first)",
                plan.checkpoint_out.display()
            ),
        ));
    }
    let model = MaeModel::load(&plan.checkpoint_out)?;
    let dataset = load_dataset(&cfg)?;
    let (train, _) = pipeline::split_train_test(&dataset, cfg.eval.test_fraction);
    let ft_train = match cfg.eval.domain {
        Some(d) => train.filter_domain(d),
        None => train,
    };
    let (clf, best_epoch) = pipeline::finetune_probe(&model, &ft_train, &cfg.finetune, seed)?;
    let dir = pipeline::seed_dir(&common.out, seed).join("classifier");
    clf.save(&dir)?;
    Ok(json!({"seed": seed, "classifier": dir, "best_epoch": best_epoch}))
}

fn evaluate(common: &Common) -> Result<serde_json::Value> {
    let (cfg, seed) = setup(common)?;
    let dir = pipeline::seed_dir(&common.out, seed).join("classifier");
    if !dir.join("classes.json").exists() {
        return Err(Error::config(
            "/finetune",
            format!("missing classifier {} (run finetune first)", dir.display()),
        ));
    }
    let clf = Classifier::load(&dir)?;
    let dataset = load_dataset(&cfg)?;
    let (_, test) = pipeline::split_train_test(&dataset, cfg.eval.test_fraction);
    let test = match cfg.eval.domain {
        Some(d) => test.filter_domain(d),
        None => test,
    };
    let mut report = pipeline::evaluate(&clf, &test)?;
    report.seeds = vec![seed];
    Ok(serde_json::to_value(&report)?)
}

fn run_all(common: &Common) -> Result<serde_json::Value> {
    let (cfg, _) = setup(common)?;
    let report = pipeline::run_experiment(&cfg, &common.out)?;
    Ok(serde_json::to_value(&report)?)
}
