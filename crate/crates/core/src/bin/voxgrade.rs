use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use voxgrade_core::config::RunConfig;
use voxgrade_core::ensemble::Strategy;
use voxgrade_core::error::{Error, Result};
use voxgrade_core::features::{parse_channels, ClassLabel};
use voxgrade_core::graph::EdgeMode;
use voxgrade_core::metrics::EvalReport;
use voxgrade_core::phantom::{age_balance, generate_cohort, SubjectRecord};
use voxgrade_core::pipeline::{
    compare_to_baseline, evaluate_protocol, evaluation_tasks, group_maps,
    load_features_and_metadata, run_grade, run_train_ensemble, split_features,
    train_classifier_bundle,
};
use voxgrade_core::report::write_report;
use voxgrade_core::rng::{derive_seed, fnv1a64};

#[derive(Parser)]
#[command(
    name = "voxgrade",
    version,
    about = "Patch-ensemble voxel grading of 3D volumes with graph-convolutional classification"
)]
struct Cli {
    /// Cap worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled cohort with class-conditional atrophy.
    PhantomGen {
        /// Output cohort directory (or set VOXGRADE_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the root seed of the run configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Remove the disease signal entirely (leakage control cohort).
        #[arg(long)]
        null_signal: bool,
        /// Training subjects per class.
        #[arg(long)]
        train: Option<usize>,
        /// Test subjects per class.
        #[arg(long)]
        test: Option<usize>,
        /// Progressor subjects per class (sMCI/pMCI analog).
        #[arg(long)]
        progress: Option<usize>,
    },
    /// Train the grading ensemble on a cohort's training split.
    TrainEnsemble {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// collective: one specialist per patch; individual: one pooled model.
        #[arg(long, default_value = "collective")]
        strategy: String,
        /// Keep finished checkpoints and train only missing patches.
        #[arg(long)]
        resume: bool,
    },
    /// Grade every cohort subject and emit grading maps plus features.csv.
    Grade {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip writing per-subject grading maps.
        #[arg(long)]
        no_maps: bool,
    },
    /// Train one graph classifier on the training split of a features table.
    TrainClassifier {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// fully_one | correlation | volume_diff
        #[arg(long)]
        edge_mode: Option<String>,
        /// Comma-separated node channels, e.g. "dg,age".
        #[arg(long)]
        channels: Option<String>,
    },
    /// Repeated-training evaluation protocol with optional baseline comparison.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Previous report.json to compare against (one-sided Wilcoxon).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        edge_mode: Option<String>,
        #[arg(long)]
        channels: Option<String>,
    },
    /// Median cosine similarity of per-subject grading vectors from two
    /// ensembles over the test split.
    Consistency {
        #[arg(long)]
        manifest_a: PathBuf,
        #[arg(long)]
        manifest_b: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Group-average maps, structure ranking, connectivity tables and slice
    /// images for graded test subjects.
    Report {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        /// Directory holding <id>_grading.nii maps.
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated axial slice indices (default: the middle slice).
        #[arg(long)]
        slices: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore the error if a pool already exists (tests share a process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// --out with the documented VOXGRADE_OUT_DIR fallback (paths only).
fn resolve_out(out: Option<PathBuf>) -> Result<PathBuf> {
    match out {
        Some(p) => Ok(p),
        None => match std::env::var_os("VOXGRADE_OUT_DIR") {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::config("no output directory: pass --out or set VOXGRADE_OUT_DIR")),
        },
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.resolve();
    }
    Ok(cfg)
}

fn hash_cohort(out: &Path, records: &[SubjectRecord]) -> Result<u64> {
    let mut bytes = Vec::new();
    for r in records {
        let (vol, seg) = voxgrade_core::pipeline::subject_paths(out, &r.subject_id)?;
        bytes.extend_from_slice(&fnv1a64(&std::fs::read(vol)?).to_le_bytes());
        bytes.extend_from_slice(&fnv1a64(&std::fs::read(seg)?).to_le_bytes());
    }
    Ok(fnv1a64(&bytes))
}

fn count_by(records: &[SubjectRecord], split: &str, label: ClassLabel) -> usize {
    records
        .iter()
        .filter(|r| r.split == split && r.label == label)
        .count()
}

fn age_stats(records: &[SubjectRecord], split: &str, label: ClassLabel) -> Option<(f64, f64)> {
    let ages: Vec<f64> = records
        .iter()
        .filter(|r| r.split == split && r.label == label)
        .map(|r| r.age)
        .collect();
    if ages.is_empty() {
        return None;
    }
    let n = ages.len() as f64;
    let mean = ages.iter().sum::<f64>() / n;
    let var = ages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn print_cohort_summary(records: &[SubjectRecord]) {
    let mut splits: Vec<String> = records.iter().map(|r| r.split.clone()).collect();
    splits.sort();
    splits.dedup();
    let ps = age_balance(records);
    println!("split      CN   AD   sMCI pMCI  ages                                    t-test p");
    for split in &splits {
        let labels = [ClassLabel::Cn, ClassLabel::Ad, ClassLabel::Smci, ClassLabel::Pmci];
        let counts: Vec<String> = labels
            .iter()
            .map(|&l| format!("{:<4}", count_by(records, split, l)))
            .collect();
        let pairs: Vec<String> = labels
            .iter()
            .filter_map(|&l| age_stats(records, split, l).map(|(m, s)| format!("{l} {m:.1}+-{s:.1}")))
            .collect();
        let p = ps
            .iter()
            .find(|(s, _)| s == split)
            .map(|(_, p)| format!("{p:.3}"))
            .unwrap_or_else(|| "-".into());
        println!("{split:<10} {} {:<38} {p}", counts.join(" "), pairs.join("  "));
    }
}

#[derive(Serialize, Deserialize)]
struct BaselineComparison {
    baseline: String,
    task: String,
    /// One-sided Wilcoxon p for "ours > baseline" on per-repetition BACC.
    wilcoxon_bacc_p: f64,
    wilcoxon_auc_p: f64,
}

#[derive(Serialize, Deserialize)]
struct EvaluateOutput {
    seed: u64,
    edge_mode: EdgeMode,
    channels: Vec<voxgrade_core::features::FeatureChannel>,
    report: EvalReport,
    comparisons: Vec<BaselineComparison>,
}

fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("task,repetition,bacc,auc\n");
    for t in &report.tasks {
        for (i, (b, a)) in t.bacc.iter().zip(&t.auc).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", t.dataset, i, b, a));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PhantomGen {
            out,
            config,
            seed,
            null_signal,
            train,
            test,
            progress,
        } => {
            let out = resolve_out(out)?;
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(n) = train {
                cfg.cohort.train_per_class = n;
            }
            if let Some(n) = test {
                cfg.cohort.test_per_class = n;
            }
            if let Some(n) = progress {
                cfg.cohort.progress_per_class = n;
            }
            if null_signal {
                cfg.phantom = cfg.phantom.null_signal();
            }
            cfg.validate()?;
            let records = generate_cohort(&cfg.phantom, &cfg.cohort, &out)?;
            cfg.write_resolved(&out)?;
            print_cohort_summary(&records);
            println!("subjects: {}", records.len());
            println!("cohort hash: {:016x}", hash_cohort(&out, &records)?);
            println!("wrote cohort to {}", out.display());
            Ok(())
        }
        Command::TrainEnsemble {
            cohort,
            out,
            config,
            seed,
            strategy,
            resume,
        } => {
            let out = resolve_out(out)?;
            let cfg = load_config(config.as_deref(), seed)?;
            let strategy = match strategy.as_str() {
                "collective" => Strategy::Collective,
                "individual" => Strategy::Individual,
                other => return Err(Error::config(format!("unknown strategy {other:?}"))),
            };
            let manifest = run_train_ensemble(&cohort, &out, &cfg, strategy, resume)?;
            for e in &manifest.entries {
                println!(
                    "patch {:>3} origin ({:>2},{:>2},{:>2}) alpha {:.4}",
                    e.patch_index, e.origin.0, e.origin.1, e.origin.2, e.alpha
                );
            }
            let mean_alpha: f64 =
                manifest.entries.iter().map(|e| e.alpha).sum::<f64>() / manifest.entries.len() as f64;
            println!(
                "trained {} patch models, mean alpha {mean_alpha:.4}",
                manifest.entries.len()
            );
            println!("manifest: {}", out.join("manifest.json").display());
            Ok(())
        }
        Command::Grade {
            manifest,
            cohort,
            out,
            config,
            no_maps,
        } => {
            let out = resolve_out(out)?;
            let cfg = load_config(config.as_deref(), None)?;
            let vectors = run_grade(&manifest, &cohort, &out, !no_maps)?;
            cfg.write_resolved(&out)?;
            println!("graded {} subjects", vectors.len());
            println!("features: {}", out.join("features.csv").display());
            if !no_maps {
                println!("maps: {}", out.join("maps").display());
            }
            Ok(())
        }
        Command::TrainClassifier {
            features,
            metadata,
            out,
            config,
            seed,
            edge_mode,
            channels,
        } => {
            let out = resolve_out(out)?;
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(e) = edge_mode {
                cfg.edge_mode = EdgeMode::parse(&e)?;
            }
            if let Some(c) = channels {
                cfg.channels = parse_channels(&c)?;
            }
            cfg.validate()?;
            let (vectors, records) = load_features_and_metadata(&features, &metadata)?;
            let train = split_features(&vectors, &records, "train")?;
            let bundle = train_classifier_bundle(
                &train,
                &cfg.classifier,
                &cfg.channels,
                cfg.edge_mode,
                derive_seed(cfg.seed, "classifier-single", 0),
            )?;
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("classifier.dgck");
            bundle.save(&ckpt)?;
            cfg.write_resolved(&out)?;
            println!(
                "trained classifier on {} subjects ({} structures, edges {})",
                train.len(),
                bundle.structures,
                bundle.edge_mode.as_str()
            );
            println!("checkpoint: {}", ckpt.display());
            Ok(())
        }
        Command::Evaluate {
            features,
            metadata,
            out,
            config,
            seed,
            repetitions,
            baseline,
            edge_mode,
            channels,
        } => {
            let out = resolve_out(out)?;
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(e) = edge_mode {
                cfg.edge_mode = EdgeMode::parse(&e)?;
            }
            if let Some(c) = channels {
                cfg.channels = parse_channels(&c)?;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            cfg.validate()?;
            let (vectors, records) = load_features_and_metadata(&features, &metadata)?;
            let train = split_features(&vectors, &records, "train")?;
            let tasks = evaluation_tasks(&vectors, &records);
            let report = evaluate_protocol(
                &train,
                &tasks,
                &cfg.classifier,
                &cfg.channels,
                cfg.edge_mode,
                cfg.seed,
                cfg.repetitions,
            )?;
            for t in &report.tasks {
                println!(
                    "task {:>8}: mean BACC {:.4}  mean AUC {:.4}  ({} repetitions)",
                    t.dataset, t.mean_bacc, t.mean_auc, report.repetitions
                );
            }
            let mut comparisons = Vec::new();
            if let Some(base_path) = baseline {
                let base: EvaluateOutput = serde_json::from_slice(&std::fs::read(&base_path)?)
                    .map_err(|e| Error::format(format!("bad baseline report: {e}")))?;
                for t in &report.tasks {
                    if let Some(bt) = base.report.task(&t.dataset) {
                        let p_bacc = compare_to_baseline(&t.bacc, &bt.bacc)?;
                        let p_auc = compare_to_baseline(&t.auc, &bt.auc)?;
                        println!(
                            "task {:>8}: one-sided Wilcoxon vs baseline  BACC p = {p_bacc:.4}  AUC p = {p_auc:.4}",
                            t.dataset
                        );
                        comparisons.push(BaselineComparison {
                            baseline: base_path.display().to_string(),
                            task: t.dataset.clone(),
                            wilcoxon_bacc_p: p_bacc,
                            wilcoxon_auc_p: p_auc,
                        });
                    }
                }
            }
            std::fs::create_dir_all(&out)?;
            let output = EvaluateOutput {
                seed: cfg.seed,
                edge_mode: cfg.edge_mode,
                channels: cfg.channels.clone(),
                report: report.clone(),
                comparisons,
            };
            std::fs::write(
                out.join("report.json"),
                serde_json::to_string_pretty(&output).expect("serializable report"),
            )?;
            write_report_csv(&out.join("report.csv"), &report)?;
            cfg.write_resolved(&out)?;
            println!("report: {}", out.join("report.json").display());
            Ok(())
        }
        Command::Consistency {
            manifest_a,
            manifest_b,
            cohort,
            out,
            config,
        } => {
            let out = resolve_out(out)?;
            let cfg = load_config(config.as_deref(), None)?;
            let (median, sims) =
                voxgrade_core::pipeline::consistency_run(&manifest_a, &manifest_b, &cohort)?;
            std::fs::create_dir_all(&out)?;
            #[derive(Serialize)]
            struct ConsistencyOutput {
                median_cosine: f64,
                per_subject: Vec<(String, f64)>,
            }
            std::fs::write(
                out.join("consistency.json"),
                serde_json::to_string_pretty(&ConsistencyOutput {
                    median_cosine: median,
                    per_subject: sims,
                })
                .expect("serializable"),
            )?;
            cfg.write_resolved(&out)?;
            println!("median cosine similarity: {median:.4}");
            Ok(())
        }
        Command::Report {
            features,
            metadata,
            maps,
            out,
            config,
            slices,
        } => {
            let out = resolve_out(out)?;
            let cfg = load_config(config.as_deref(), None)?;
            let (vectors, records) = load_features_and_metadata(&features, &metadata)?;
            let test = split_features(&vectors, &records, "test")?;
            if test.is_empty() {
                return Err(Error::data("no test subjects to report on"));
            }
            let ids: Vec<String> = test.iter().map(|v| v.subject_id.clone()).collect();
            let groups = group_maps(&maps, &records, &ids)?;
            let depth = groups
                .first()
                .map(|(_, m)| m.dims().2)
                .ok_or_else(|| Error::data("no grading maps found"))?;
            let slice_list: Vec<usize> = match slices {
                Some(s) => s
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::config(format!("bad slice index {x:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => vec![depth / 2],
            };
            write_report(&out, &groups, &test, &records, &slice_list, 10, 25)?;
            cfg.write_resolved(&out)?;
            println!("wrote report artifacts to {}", out.display());
            for (label, _) in &groups {
                println!("  group_{label}_grading.nii");
            }
            println!("  top_structures.csv, top_pairs.csv, adjacency_*.csv");
            Ok(())
        }
    }
}
