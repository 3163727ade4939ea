use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nma_core::baselines::{tune_wvcg, BanditConfig, CtrSource, Mechanism};
use nma_core::eval::{
    self, ic_regret, run_ablations, sha256_file, sha256_hex, summarize, sweep, IcTestConfig, MetricsReport, RunSummary,
    SweepParam, Variant,
};
use nma_core::par::ExecMode;
use nma_core::synth::{self, Dataset, GenSpec};
use nma_core::train::{self, NmaModel, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "nma", version, about = "Learned multi-slot ad auctions on synthetic logs")]
struct Cli {
    /// Key-value config file (TOML). Generation spec for gen-data, training config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test JSONL and the click-model sidecar.
    GenData {
        /// Generation spec; overrides --config.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model; writes final.json, loss_curve.csv and summary.json.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Also evaluate on the test split after every epoch.
        #[arg(long)]
        eval_each_epoch: bool,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Extra mechanisms to score alongside the trained one.
        #[arg(long, value_delimiter = ',')]
        also: Vec<String>,
    },
    /// Empirical incentive-compatibility regret.
    IcTest {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "gfp,vcg_oracle,nma")]
        mechanisms: Vec<String>,
        #[arg(long, default_value_t = 2000)]
        auctions: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Compare mechanisms, training one model per seed.
    Compare {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',', default_value = "gfp,gsp,vcg,wvcg,nma")]
        mechanisms: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Ablation table over several seeds.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Sensitivity sweep of one loss weight.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_parser = parse_param)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
}

#[derive(Args)]
struct DataArg {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
}

fn parse_param(s: &str) -> std::result::Result<SweepParam, String> {
    match s {
        "alpha_ce" | "alpha1" => Ok(SweepParam::AlphaCe),
        "alpha_list" | "alpha2" => Ok(SweepParam::AlphaList),
        other => Err(format!("unknown sweep parameter `{other}` (alpha_ce or alpha_list)")),
    }
}

struct Ctx {
    config_text: Option<String>,
    seed: u64,
    out: PathBuf,
    mode: ExecMode,
}

impl Ctx {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config_text {
            Some(t) => TrainConfig::from_toml(t)?,
            None => TrainConfig::default(),
        };
        c.seed = self.seed;
        Ok(c)
    }

    fn summary(&self, command: &str, checkpoint: Option<&Path>, results: serde_json::Value) -> Result<()> {
        let s = RunSummary {
            command: command.into(),
            seed: self.seed,
            config_sha256: self.config_text.as_deref().map(|t| sha256_hex(t.as_bytes())),
            checkpoint_sha256: checkpoint.map(sha256_file).transpose()?,
            results,
        };
        s.write(&self.out.join("summary.json"))?;
        Ok(())
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn tuned_wvcg(ctr: CtrSource, ds: &Dataset, ctx: &Ctx) -> Result<Mechanism> {
    let bandit = BanditConfig {
        seed: ctx.seed,
        ..BanditConfig::default()
    };
    let tuned = tune_wvcg(&ds.train, &ctr, &ds.model, &bandit, ctx.mode)?;
    log::info!("wvcg weights {:?} (fallback: {})", tuned.weights, tuned.fell_back);
    Ok(Mechanism::wvcg(ctr, tuned.weights))
}

/// Builds a mechanism by name. `vcg` and `wvcg` run on the trained model's
/// CTRs; the `_oracle` forms use the click model's true probabilities.
fn mechanism(name: &str, ds: &Dataset, model: Option<&Arc<NmaModel>>, ctx: &Ctx) -> Result<Mechanism> {
    let oracle = Arc::new(ds.model.clone());
    let need = |what: &str| -> Result<Arc<NmaModel>> {
        model.cloned().with_context(|| format!("mechanism `{what}` needs a trained checkpoint"))
    };
    Ok(match name {
        "gfp" => Mechanism::Gfp,
        "gsp" => Mechanism::Gsp,
        "vcg" => Mechanism::model_vcg(need(name)?),
        "vcg_oracle" => Mechanism::vcg(oracle),
        "vcg_pointwise" => Mechanism::wvcg(CtrSource::Pointwise, vec![1.0; ds.model.position.len()]).with_name("vcg_pointwise"),
        "wvcg" => tuned_wvcg(CtrSource::Model(need(name)?), ds, ctx)?,
        "wvcg_oracle" => tuned_wvcg(CtrSource::Oracle(oracle), ds, ctx)?.with_name("wvcg_oracle"),
        "nma" => Mechanism::nma(need(name)?),
        other => bail!("unknown mechanism `{other}`"),
    })
}

/// SWMR reference: VCG on the model's CTRs, or the oracle optimum without one.
fn reference(model: Option<&Arc<NmaModel>>) -> Option<Mechanism> {
    model.map(|m| Mechanism::model_vcg(Arc::clone(m)))
}

fn run(cli: Cli) -> Result<()> {
    let config_path = match &cli.cmd {
        Command::GenData { spec: Some(p) } => Some(p.clone()),
        _ => cli.config.clone(),
    };
    let config_text = config_path
        .map(|p| fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let ctx = Ctx {
        config_text,
        seed: cli.seed,
        out: cli.out.clone(),
        mode: if cli.sequential { ExecMode::Sequential } else { ExecMode::default() },
    };
    fs::create_dir_all(&ctx.out)?;

    match cli.cmd {
        Command::GenData { .. } => {
            let spec = match &ctx.config_text {
                Some(t) => GenSpec::from_toml(t)?,
                None => GenSpec::default(),
            };
            let ds = synth::generate(&spec, ctx.seed, ctx.mode)?;
            ds.save(&ctx.out)?;
            println!("wrote {} train / {} test instances to {}", ds.train.len(), ds.test.len(), ctx.out.display());
            ctx.summary("gen-data", None, json!({"train": ds.train.len(), "test": ds.test.len()}))?;
        }
        Command::Train { data, eval_each_epoch } => {
            let ds = load_data(&data.data)?;
            let cfg = ctx.train_config()?;
            let oracle = ds.model.clone();
            let test = ds.test.clone();
            let mode = ctx.mode;
            let hook = move |m: &NmaModel| -> nma_core::Result<(f64, f64)> {
                let m = Arc::new(m.clone());
                let vcg = Mechanism::model_vcg(Arc::clone(&m));
                let r = eval::evaluate(&Mechanism::nma(m), Some(&vcg), &test, &oracle, mode)?;
                Ok((r.rpm, r.swpm))
            };
            let opts = TrainOptions {
                mode: ctx.mode,
                checkpoint_dir: Some(ctx.out.join("checkpoints")),
                eval: if eval_each_epoch { Some(&hook) } else { None },
            };
            let out = train::train(&ds.train, &cfg, &opts)?;
            let ckpt = ctx.out.join("final.json");
            out.model.save(&ckpt)?;
            train::write_curve(&ctx.out.join("loss_curve.csv"), &out.curve)?;
            fs::write(ctx.out.join("train_config.toml"), cfg.to_toml())?;
            let last = out.curve.last().map(|r| r.loss);
            println!("trained {} epochs; final loss {:?}; checkpoint {}", out.curve.len(), last, ckpt.display());
            ctx.summary("train", Some(&ckpt), json!({"epochs": out.curve.len(), "final_loss": last}))?;
        }
        Command::Eval { data, checkpoint, also } => {
            let ds = load_data(&data.data)?;
            let model = Arc::new(NmaModel::load(ctx.train_config()?, &checkpoint)?);
            let auc = eval::ctr_auc(&model, &ds.test, ctx.mode)?;
            println!("AUC list-wise {:.5}  point-wise {:.5}", auc.listwise, auc.pointwise);
            let vcg = reference(Some(&model));
            let nma = Mechanism::nma(Arc::clone(&model));
            let mut reports = vec![eval::evaluate(&nma, vcg.as_ref(), &ds.test, &ds.model, ctx.mode)?];
            for name in &also {
                let mech = mechanism(name, &ds, Some(&model), &ctx)?;
                reports.push(eval::evaluate(&mech, vcg.as_ref(), &ds.test, &ds.model, ctx.mode)?);
            }
            eval::write_metrics_csv(&ctx.out.join("metrics.csv"), &reports)?;
            print_reports(&reports);
            ctx.summary("eval", Some(&checkpoint), json!({"auc": auc, "metrics": reports}))?;
        }
        Command::IcTest {
            data,
            checkpoint,
            mechanisms,
            auctions,
            repeats,
        } => {
            let ds = load_data(&data.data)?;
            let model = match &checkpoint {
                Some(p) => Some(Arc::new(NmaModel::load(ctx.train_config()?, p)?)),
                None => None,
            };
            let cfg = IcTestConfig {
                auctions,
                repeats,
                seed: ctx.seed,
                ..IcTestConfig::default()
            };
            let mut reports = Vec::new();
            let mut w = csv::Writer::from_path(ctx.out.join("ic_regret.csv"))?;
            w.write_record([
                "mechanism",
                "icr_mean",
                "icr_std",
                "icr_welfare_mean",
                "icr_welfare_std",
                "icr_belief_mean",
                "icr_belief_std",
                "max_regret",
            ])?;
            for name in &mechanisms {
                let mech = mechanism(name, &ds, model.as_ref(), &ctx)?;
                let r = ic_regret(&mech, &cfg, &ds.test, &ds.model, ctx.mode)?;
                let fmt = |v: Option<(f64, f64)>| v.map_or(("undefined".into(), "".into()), |(m, s)| (format!("{m}"), format!("{s}")));
                let (m, s) = fmt(r.icr);
                let (wm, ws) = fmt(r.icr_welfare);
                let (bm, bs) = fmt(r.icr_belief);
                println!("{:<6} IC-R {m} ± {s}  (regret/value {wm} ± {ws}; under own CTRs {bm} ± {bs})", r.mechanism);
                w.write_record([r.mechanism.clone(), m, s, wm, ws, bm, bs, format!("{}", r.max_regret)])?;
                reports.push(r);
            }
            w.flush()?;
            ctx.summary("ic-test", checkpoint.as_deref(), serde_json::to_value(&reports)?)?;
        }
        Command::Compare { data, mechanisms, seeds } => {
            let ds = load_data(&data.data)?;
            let base = ctx.train_config()?;
            let mut per_seed: Vec<MetricsReport> = Vec::new();
            for s in 0..seeds {
                let seed = ctx.seed + s;
                let seed_ctx = Ctx {
                    config_text: None,
                    seed,
                    out: ctx.out.clone(),
                    mode: ctx.mode,
                };
                let model = if mechanisms.iter().any(|m| matches!(m.as_str(), "nma" | "vcg" | "wvcg")) {
                    let cfg = TrainConfig { seed, ..base.clone() };
                    let out = train::train(&ds.train, &cfg, &TrainOptions { mode: ctx.mode, ..Default::default() })?;
                    Some(Arc::new(out.model))
                } else {
                    None
                };
                let vcg = reference(model.as_ref());
                for name in &mechanisms {
                    let mech = mechanism(name, &ds, model.as_ref(), &seed_ctx)?;
                    per_seed.push(eval::evaluate(&mech, vcg.as_ref(), &ds.test, &ds.model, ctx.mode)?);
                }
            }
            eval::write_metrics_csv(&ctx.out.join("compare_per_seed.csv"), &per_seed)?;
            let summaries: Vec<_> = mechanisms
                .iter()
                .map(|m| summarize(&per_seed.iter().filter(|r| &r.mechanism == m).cloned().collect::<Vec<_>>()))
                .collect();
            for s in &summaries {
                println!(
                    "{:<6} CTR {:.5}±{:.5}  RPM {:.3}±{:.3}  SWPM {:.3}±{:.3}  SWMR {:.4}±{:.4}  clamp {:.4}",
                    s.mechanism, s.ctr.0, s.ctr.1, s.rpm.0, s.rpm.1, s.swpm.0, s.swpm.1, s.swmr.0, s.swmr.1, s.clamp_frequency.0
                );
            }
            ctx.summary("compare", None, serde_json::to_value(&summaries)?)?;
        }
        Command::Ablate { data, seeds } => {
            let ds = load_data(&data.data)?;
            let base = ctx.train_config()?;
            let seed_list: Vec<u64> = (0..seeds).map(|s| ctx.seed + s).collect();
            let rows = run_ablations(&ds.train, &ds.test, &ds.model, &base, &seed_list, &BanditConfig::default(), ctx.mode)?;
            let mut w = csv::Writer::from_path(ctx.out.join("ablation.csv"))?;
            w.write_record(["variant", "seed", "ctr", "rpm", "swpm", "swmr"])?;
            for r in &rows {
                w.write_record([
                    r.variant.label().to_string(),
                    r.seed.to_string(),
                    format!("{}", r.metrics.ctr),
                    format!("{}", r.metrics.rpm),
                    format!("{}", r.metrics.swpm),
                    format!("{}", r.metrics.swmr),
                ])?;
            }
            w.flush()?;
            let summaries: Vec<_> = Variant::ALL
                .iter()
                .map(|v| {
                    let reports: Vec<_> = rows.iter().filter(|r| r.variant == *v).map(|r| r.metrics.clone()).collect();
                    summarize(&reports)
                })
                .collect();
            for s in &summaries {
                println!(
                    "{:<11} CTR {:.5}  RPM {:.3}  SWPM {:.3}  SWMR {:.4}",
                    s.mechanism, s.ctr.0, s.rpm.0, s.swpm.0, s.swmr.0
                );
            }
            ctx.summary("ablate", None, serde_json::to_value(&summaries)?)?;
        }
        Command::Sweep { data, param, grid } => {
            if grid.is_empty() {
                bail!("--grid needs at least one value");
            }
            let ds = load_data(&data.data)?;
            let base = ctx.train_config()?;
            let points = sweep(param, &grid, &ds.train, &ds.test, &ds.model, &base, ctx.mode)?;
            eval::write_sweep_csv(&ctx.out.join(format!("sweep_{}.csv", param.name())), param, &points)?;
            for p in &points {
                println!("{} = {}: RPM {:.4} SWPM {:.4} SWMR {:.4}", param.name(), p.value, p.metrics.rpm, p.metrics.swpm, p.metrics.swmr);
            }
            ctx.summary("sweep", None, serde_json::to_value(&points)?)?;
        }
    }
    Ok(())
}

fn print_reports(reports: &[MetricsReport]) {
    for r in reports {
        println!(
            "{:<6} CTR {:.5}  RPM {:.4}  SWPM {:.4}  SWMR {:.4}  clamp {:.4}",
            r.mechanism, r.ctr, r.rpm, r.swpm, r.swmr, r.clamp_frequency
        );
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
