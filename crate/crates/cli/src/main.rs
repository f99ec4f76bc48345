use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use onda_core::harness::{
    aggregate, evaluate_levels, online_rows, pretrain, run_baseline, run_offline, run_onda,
    run_supervised, static_row, write_online_run, write_table, BaselineKind, Mode, Pretrained,
    ResultTable, RunConfig,
};
use onda_core::policy::PolicyKind;
use onda_core::segnet::{load_checkpoint_expecting, save_checkpoint, ModelCheckpoint};
use onda_core::storm::{make_streams, miou, Benchmark};

const SOURCE_FILE: &str = "source.onda";

#[derive(Parser)]
#[command(
    name = "onda",
    version,
    about = "Online domain adaptation on the storm benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and its prototype bank.
    Pretrain(Common),
    /// Online adaptation along a schedule.
    Adapt(Common),
    /// Test-time adaptation baseline along a schedule.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "bn_adapt")]
        kind: String,
    },
    /// Offline adaptation on all target frames at once.
    Offline(Common),
    /// Supervised fine-tuning on labeled target frames.
    Supervised(Common),
    /// Mean table over finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Full,
    Compact,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; overrides --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    profile: Profile,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// cs, scs, cds, hs, static or dynamic.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    buffer: Option<usize>,
    /// Preset name or path to a schedule JSON file.
    #[arg(long)]
    schedule: Option<String>,
    /// Source checkpoint from a previous `pretrain`; trained afresh when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Train offline or supervised models on one level only.
    #[arg(long)]
    level: Option<usize>,
}

impl Common {
    fn config(&self, mode: Mode) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => match self.profile {
                Profile::Full => RunConfig::full(),
                Profile::Compact => RunConfig::compact(),
            },
        }
        .with_seed(self.seed);
        cfg.mode = mode;
        if let Some(p) = &self.policy {
            cfg.policy.kind = p.parse::<PolicyKind>()?;
        }
        if let Some(b) = self.buffer {
            cfg.buffer = b;
        }
        if let Some(s) = &self.schedule {
            cfg.schedule = s.clone();
        }
        if self.level.is_some() {
            cfg.level = self.level;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn bench_for(cfg: &RunConfig) -> Result<Benchmark> {
    Ok(make_streams(&cfg.schedule()?, cfg.seeds.data, cfg.stream))
}

fn level_mious(model: &ModelCheckpoint, bench: &Benchmark) -> Result<Vec<f64>> {
    evaluate_levels(model, bench)?
        .iter()
        .map(|c| Ok(miou(c)?.miou))
        .collect()
}

fn source(common: &Common, cfg: &RunConfig, bench: &Benchmark) -> Result<Pretrained> {
    match &common.checkpoint {
        Some(path) => {
            let (model, bank) = load_checkpoint_expecting(path, &cfg.arch)
                .with_context(|| format!("loading {}", path.display()))?;
            let Some(bank) = bank else {
                bail!("{} has no prototype bank", path.display());
            };
            let source_val_miou = level_mious(&model, bench)?[0];
            Ok(Pretrained {
                model,
                bank,
                source_val_miou,
                loss_trace: Vec::new(),
            })
        }
        None => {
            eprintln!("pretraining source model (seed {})", cfg.seeds.model);
            Ok(pretrain(cfg, bench)?)
        }
    }
}

fn start(common: &Common, mode: Mode) -> Result<(RunConfig, Benchmark)> {
    let cfg = common.config(mode)?;
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("config.json"), cfg.to_json())?;
    let bench = bench_for(&cfg)?;
    Ok((cfg, bench))
}

fn table_with_source(bench: &Benchmark, pre: &Pretrained) -> Result<ResultTable> {
    let levels = bench.val.len();
    let mut table = ResultTable::new(levels);
    table.push(static_row("source", &level_mious(&pre.model, bench)?))?;
    Ok(table)
}

fn cmd_pretrain(common: &Common) -> Result<()> {
    let (cfg, bench) = start(common, Mode::Pretrain)?;
    let pre = pretrain(&cfg, &bench)?;
    save_checkpoint(common.out.join(SOURCE_FILE), &pre.model, Some(&pre.bank))?;
    std::fs::write(
        common.out.join("pretrain.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "source_val_miou": pre.source_val_miou,
            "loss_trace": pre.loss_trace,
        }))?,
    )?;
    let table = table_with_source(&bench, &pre)?;
    write_table(&common.out, &table)?;
    println!("source val mIoU {:.2}", pre.source_val_miou * 100.0);
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_adapt(common: &Common) -> Result<()> {
    let (cfg, bench) = start(common, Mode::Onda)?;
    let pre = source(common, &cfg, &bench)?;
    let run = run_onda(&cfg, &bench, &pre, None)?;
    let mut table = table_with_source(&bench, &pre)?;
    for row in online_rows(
        &format!("onda-{:?}", cfg.policy.kind).to_lowercase(),
        &run,
        bench.val.len(),
    ) {
        table.push(row)?;
    }
    write_online_run(&common.out, &run, &table)?;
    println!(
        "{} switch events, {} promotions",
        run.events.len(),
        run.promotions.len()
    );
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_baseline(common: &Common, kind: &str) -> Result<()> {
    let kind: BaselineKind = kind.parse()?;
    let mode = match kind {
        BaselineKind::BnAdapt => Mode::BnAdapt,
        _ => Mode::EntropyMin,
    };
    let (mut cfg, bench) = start(common, mode)?;
    cfg.baseline = Some(kind);
    let pre = source(common, &cfg, &bench)?;
    let run = run_baseline(&cfg, &bench, &pre, kind)?;
    let mut table = table_with_source(&bench, &pre)?;
    let name = serde_json::to_value(kind)?
        .as_str()
        .unwrap_or("baseline")
        .to_string();
    for row in online_rows(&name, &run, bench.val.len()) {
        table.push(row)?;
    }
    write_online_run(&common.out, &run, &table)?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_trained(common: &Common, mode: Mode) -> Result<()> {
    let (cfg, bench) = start(common, mode)?;
    let pre = source(common, &cfg, &bench)?;
    let (model, name) = match mode {
        Mode::Offline => (run_offline(&cfg, &bench, &pre)?, "offline"),
        _ => (run_supervised(&cfg, &bench, &pre.model)?, "supervised"),
    };
    let suffix = cfg.level.map_or("all".to_string(), |l| format!("L{l}"));
    let mut table = table_with_source(&bench, &pre)?;
    table.push(static_row(
        &format!("{name}-{suffix}"),
        &level_mious(&model, &bench)?,
    ))?;
    save_checkpoint(common.out.join(format!("{name}.onda")), &model, None)?;
    write_table(&common.out, &table)?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
    let table = aggregate(&dirs)?;
    write_table(out, &table)?;
    print!("{}", table.to_text());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::Adapt(c) => cmd_adapt(&c),
        Command::Baseline { common, kind } => cmd_baseline(&common, &kind),
        Command::Offline(c) => cmd_trained(&c, Mode::Offline),
        Command::Supervised(c) => cmd_trained(&c, Mode::Supervised),
        Command::Report { runs, out } => cmd_report(&runs, &out),
    }
}
