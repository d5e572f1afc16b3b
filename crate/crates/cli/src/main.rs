use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mdmil_core::bagstore::{gen_synthetic, DatasetManifest, FeatureBag, Split};
use mdmil_core::config::Config;
use mdmil_core::memloss::{check_loss_gradients, LossCheck};
use mdmil_core::trainer::{argmax, fit, write_epoch_log, Method, Model};

const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "mdmil", version, about = "Multiplex-detection multiple instance learning")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic bag dataset with a stratified manifest.
    GenSynthetic,
    /// Train a model and keep the checkpoint with the best validation AUC.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-bag attention CSVs for one split.
    AttentionExport {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare loss gradients with finite differences on a tiny model.
    Gradcheck,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn manifest(cfg: &Config) -> Result<DatasetManifest> {
    let path = cfg.manifest.as_ref().context("data.manifest is not set")?;
    Ok(DatasetManifest::read_csv(path, 0)?)
}

fn checkpoint_path(cfg: &Config, out: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit
        .cloned()
        .or_else(|| cfg.train.checkpoint.clone())
        .unwrap_or_else(|| out.join("model.ckpt"))
}

fn load_model(cfg: &Config, m: &DatasetManifest, path: &Path) -> Result<Model> {
    let mdm = cfg.mdm_for(m.feature_dim, m.num_classes);
    Model::load(cfg.train.method, mdm, cfg.iqgm, path).with_context(|| format!("loading {}", path.display()))
}

fn gen(cfg: &Config, out: &Path) -> Result<()> {
    let ds = gen_synthetic(&cfg.synth, out)?;
    println!(
        "wrote {} bags to {} (train {}, val {}, test {})",
        ds.bags.len(),
        ds.manifest_path.display(),
        ds.manifest.count(Split::Train),
        ds.manifest.count(Split::Val),
        ds.manifest.count(Split::Test)
    );
    Ok(())
}

fn train(cfg: &Config, out: &Path) -> Result<()> {
    let m = manifest(cfg)?;
    let train_bags = m.load_split(Split::Train)?;
    let val_bags = m.load_split(Split::Val)?;
    let mut tcfg = cfg.train.clone();
    tcfg.checkpoint = Some(checkpoint_path(cfg, out, None));
    let mdm = cfg.mdm_for(m.feature_dim, m.num_classes);
    let outcome = fit(&mdm, &cfg.iqgm, &cfg.loss, &tcfg, &train_bags, &val_bags)?;
    let log_path = out.join("epoch_log.csv");
    write_epoch_log(&outcome.log, &log_path)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {} val_acc {} val_auc {}; checkpoint {}; log {}",
        outcome.best_epoch,
        best.val_acc,
        best.val_auc,
        tcfg.checkpoint.as_ref().expect("set above").display(),
        log_path.display()
    );
    Ok(())
}

fn eval(cfg: &Config, out: &Path, split: &str, ckpt: Option<&PathBuf>) -> Result<()> {
    let m = manifest(cfg)?;
    let split: Split = split.parse()?;
    let model = load_model(cfg, &m, &checkpoint_path(cfg, out, ckpt))?;
    let report = model.evaluate(&m.load_split(split)?)?;
    report.write_metrics_csv(out.join("metrics.csv"))?;
    report.write_predictions_csv(out.join("predictions.csv"))?;
    println!(
        "split {split}: bags {} accuracy {:.4} auc {:.4}",
        report.predictions.len(),
        report.accuracy,
        report.auc
    );
    Ok(())
}

fn export_bag(model: &Model, bag: &FeatureBag, path: &Path) -> Result<()> {
    let (record, probs) = model.attention(bag)?;
    let c = argmax(&probs);
    let (mt1, mt2, combined, norm) = (
        record.mt1_mean(),
        record.mt2_mean(),
        record.combined_mean(),
        record.normalized(),
    );
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance_index", "mt1", "mt2", "combined", "normalized"])?;
    for i in 0..bag.num_instances() {
        w.write_record([
            i.to_string(),
            mt1.get(c, i).to_string(),
            mt2.get(c, i).to_string(),
            combined.get(c, i).to_string(),
            norm.get(c, i).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn attention_export(cfg: &Config, out: &Path, split: &str, ckpt: Option<&PathBuf>) -> Result<()> {
    if cfg.train.method != Method::Mdmil {
        bail!("attention export needs train.method = mdmil");
    }
    let m = manifest(cfg)?;
    let split: Split = split.parse()?;
    let model = load_model(cfg, &m, &checkpoint_path(cfg, out, ckpt))?;
    let dir = out.join("attention");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let bags = m.load_split(split)?;
    for bag in &bags {
        export_bag(&model, bag, &dir.join(format!("{}.csv", bag.id)))?;
    }
    println!("wrote {} attention files to {}", bags.len(), dir.display());
    Ok(())
}

fn gradcheck(cfg: &Config) -> Result<bool> {
    let base = LossCheck::default();
    let setup = LossCheck {
        mdm: mdmil_core::mdm::MdmConfig {
            alpha: cfg.mdm.alpha,
            alpha_mode: cfg.mdm.alpha_mode,
            alpha_hi: cfg.mdm.alpha_hi,
            alpha_lo: cfg.mdm.alpha_lo,
            ..base.mdm.clone()
        },
        tau: cfg.loss.tau,
        alpha_loss: cfg.loss.alpha_cl,
        seed: cfg.train.seed,
        ..base
    };
    let report = check_loss_gradients(&setup)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<24} {:>6} {:>12} {:>12}  status", "block", "numel", "max_abs", "max_rel")?;
    let mut ok = true;
    for b in &report {
        let pass = b.max_rel_error < GRADCHECK_THRESHOLD;
        ok &= pass;
        writeln!(
            stdout,
            "{:<24} {:>6} {:>12.3e} {:>12.3e}  {}",
            b.name,
            b.numel,
            b.max_abs_error,
            b.max_rel_error,
            if pass { "pass" } else { "FAIL" }
        )?;
    }
    writeln!(stdout, "{}", if ok { "all blocks pass" } else { "some blocks fail" })?;
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(true);
    }
    let Some(command) = &cli.command else {
        bail!("no subcommand given");
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match command {
        Command::GenSynthetic => gen(&cfg, &cli.out)?,
        Command::Train => train(&cfg, &cli.out)?,
        Command::Eval { split, checkpoint } => eval(&cfg, &cli.out, split, checkpoint.as_ref())?,
        Command::AttentionExport { split, checkpoint } => {
            attention_export(&cfg, &cli.out, split, checkpoint.as_ref())?
        }
        Command::Gradcheck => return gradcheck(&cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
