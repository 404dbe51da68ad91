use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use flotapinn::data::{export_csv, import_csv, Column, Split};
use flotapinn::preprocess::{iqr_filter, write_stats_csv};
use flotapinn::simulator::{simulate, SimConfig};
use flotapinn::train::{
    evaluate, preset_configs, run_benchmark, train_model, write_benchmark, write_run, BenchmarkTable, DataPaths,
    ModelKind, Preset, Splits, TrainConfig, TrainedModel,
};

#[derive(Parser, Debug)]
#[command(name = "flotapinn", version, about = "Flotation grade soft sensors: simulate, filter, train, compare")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    #[value(name = "cell1-paper")]
    Cell1Paper,
    #[value(name = "cell2-paper")]
    Cell2Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Cell1Paper => Preset::Cell1Paper,
            PresetArg::Cell2Paper => Preset::Cell2Paper,
        }
    }
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON config; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test CSVs and the planted parameters.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// IQR-filter a CSV (or the three split CSVs of a directory).
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(short, long = "out")]
        out: PathBuf,
    },
    /// Train one model on the splits in a directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<String>,
        /// Directory holding train.csv, val.csv and test.csv.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Train all seven model kinds and write the comparison table.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Directory of already filtered splits; simulated and filtered in-process when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Score a checkpoint on a CSV.
    Evaluate {
        /// Checkpoint JSON.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long = "out")]
        out: PathBuf,
    },
    /// Render a benchmark directory as a Markdown table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(short, long = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn sim_config(common: &Common) -> Result<SimConfig> {
    let seed = common.seed.unwrap_or(0);
    let mut c = match &common.config {
        Some(p) => SimConfig::from_json(&read(p)?)?,
        None => match Preset::from(common.preset) {
            Preset::Desk => SimConfig::desk(seed),
            _ => SimConfig::paper_scale(seed),
        },
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    Ok(c)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { common } => {
            let config = sim_config(&common)?;
            create_dir(&common.out)?;
            let out = simulate(&config)?;
            out.write(&common.out)?;
            println!(
                "simulated {}/{}/{} rows (seed {}, outliers {:?}) -> {}",
                out.train.dataset.len(),
                out.val.dataset.len(),
                out.test.dataset.len(),
                config.seed,
                out.truth.outlier_counts,
                common.out.display()
            );
        }
        Command::Preprocess { input, out } => {
            create_dir(&out)?;
            let files: Vec<(String, PathBuf)> = if input.is_dir() {
                Split::ALL
                    .iter()
                    .map(|s| (s.name().to_string(), input.join(format!("{}.csv", s.name()))))
                    .collect()
            } else {
                let stem = input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "data".into());
                vec![(stem, input.clone())]
            };
            let mut summary = Vec::new();
            for (name, path) in files {
                let d = import_csv(&path)?;
                let rep = iqr_filter(&d, &Column::FILTERABLE)?;
                let target = out.join(format!("{name}.csv"));
                if target.canonicalize().ok() == path.canonicalize().ok() {
                    bail!("refusing to overwrite the input {}", path.display());
                }
                export_csv(&rep.dataset, &target)?;
                write_stats_csv(&rep.stats, &out.join(format!("{name}_stats.csv")))?;
                summary.push(format!("{name}: removed {} of {}", rep.removed.len(), d.len()));
            }
            println!("{} -> {}", summary.join(", "), out.display());
        }
        Command::Train { common, kind, input } => {
            let mut config = match &common.config {
                Some(p) => serde_json::from_str::<TrainConfig>(&read(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => {
                    let Some(k) = &kind else {
                        bail!("--kind is required without --config");
                    };
                    let k = ModelKind::from_name(k).with_context(|| format!("unknown model kind `{k}`"))?;
                    TrainConfig::preset(common.preset.into(), k, 0)
                }
            };
            if let Some(k) = &kind {
                config.kind = ModelKind::from_name(k).with_context(|| format!("unknown model kind `{k}`"))?;
            }
            if let Some(s) = common.seed {
                config.seed = s;
            }
            let paths = match (&input, &config.data) {
                (Some(dir), _) => DataPaths::in_dir(dir),
                (None, Some(p)) => p.clone(),
                (None, None) => bail!("no data: pass --in DIR or set `data` in the config"),
            };
            let data = Splits::load(&paths)?;
            let (rep, model) = train_model(&config, &data)?;
            create_dir(&common.out)?;
            write_run(&rep, &model, &common.out, config.kind.name())?;
            println!(
                "{}: val C_f MSE {:.6}, test C_f MSE {:.6} MRE {:.4}, {} steps, {:.1}s -> {}",
                config.kind.name(),
                rep.val.c_f.mse,
                rep.test.c_f.mse,
                rep.test.c_f.mre,
                rep.steps,
                rep.wall_clock_secs,
                common.out.display()
            );
        }
        Command::Benchmark { common, input } => {
            let seed = common.seed.unwrap_or(0);
            let configs: Vec<TrainConfig> = match &common.config {
                Some(p) => {
                    let mut cs: Vec<TrainConfig> = serde_json::from_str(&read(p)?)
                        .with_context(|| format!("parsing {} as a list of train configs", p.display()))?;
                    if let Some(s) = common.seed {
                        cs.iter_mut().for_each(|c| c.seed = s);
                    }
                    cs
                }
                None => preset_configs(common.preset.into(), seed),
            };
            create_dir(&common.out)?;
            let data = match &input {
                Some(dir) => Splits::load(&DataPaths::in_dir(dir))?,
                None => {
                    let sim = simulate(&sim_config(&common)?)?;
                    let raw = Splits {
                        train: sim.train.dataset.clone(),
                        val: sim.val.dataset.clone(),
                        test: sim.test.dataset.clone(),
                    };
                    let (filtered, reports) = raw.filtered()?;
                    let data_dir = common.out.join("data");
                    sim.write(&data_dir)?;
                    for (split, rep) in Split::ALL.iter().zip(&reports) {
                        export_csv(&rep.dataset, &data_dir.join(format!("{}_filtered.csv", split.name())))?;
                        write_stats_csv(&rep.stats, &data_dir.join(format!("{}_stats.csv", split.name())))?;
                    }
                    filtered
                }
            };
            let run = run_benchmark(&configs, &data, seed);
            write_benchmark(&run, &common.out)?;
            let failed: Vec<_> = run.table.rows.iter().filter(|r| r.status != "ok").collect();
            let best = run
                .table
                .rows
                .iter()
                .filter(|r| r.status == "ok")
                .min_by(|a, b| a.test_mse.total_cmp(&b.test_mse));
            println!(
                "benchmark: {} rows, {} failed, best test C_f MSE {} -> {}",
                run.table.rows.len(),
                failed.len(),
                best.map_or("n/a".into(), |r| format!("{} {:.6}", r.model, r.test_mse)),
                common.out.display()
            );
            if !failed.is_empty() {
                bail!(
                    "failed runs: {}",
                    failed.iter().map(|r| format!("{} ({})", r.model, r.status)).collect::<Vec<_>>().join("; ")
                );
            }
        }
        Command::Evaluate { input, data, out } => {
            let model = TrainedModel::load(&input)?;
            let d = import_csv(&data)?;
            let m = evaluate(&model, &d)?;
            create_dir(&out)?;
            let path = out.join("metrics.json");
            std::fs::write(&path, serde_json::to_string_pretty(&m)?)
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "n {}: C_f MSE {:.6} MRE {:.4}, C_p MSE {:.6} MRE {:.4} -> {}",
                m.n,
                m.c_f.mse,
                m.c_f.mre,
                m.c_p.mse,
                m.c_p.mre,
                path.display()
            );
        }
        Command::Report { input, out } => {
            let path = if input.is_dir() { input.join("benchmark.json") } else { input };
            let table: BenchmarkTable =
                serde_json::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
            let md = render_table(&table);
            create_dir(&out)?;
            let target = out.join("report.md");
            std::fs::write(&target, &md).with_context(|| format!("writing {}", target.display()))?;
            print!("{md}");
        }
    }
    Ok(())
}

fn render_table(t: &BenchmarkTable) -> String {
    let mut s = format!(
        "Seed {}. Metrics are for C_f (g/t).\n\n| model | val MSE | val MRE | test MSE | test MRE | status |\n|---|---|---|---|---|---|\n",
        t.seed
    );
    for r in &t.rows {
        s.push_str(&format!(
            "| {} | {:.6} | {:.4} | {:.6} | {:.4} | {} |\n",
            r.model, r.val_mse, r.val_mre, r.test_mse, r.test_mre, r.status
        ));
    }
    s
}
