use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tagat_core::graph::{build_all, GraphOptions, DEFAULT_DENSITY};
use tagat_core::io::{
    graph_file_name, load_checkpoint, load_graph_dir, load_scans, save_checkpoint, save_graph, task_map,
    write_json, write_scan_csv, Checkpoint, CheckpointMeta, GraphEntry, GraphIndex, GraphSet, Manifest, RngState,
    ScanEntry, GRAPH_INDEX_FILE, MANIFEST_VERSION,
};
use tagat_core::math::DEFAULT_NEGATIVE_SLOPE;
use tagat_core::train::{
    cross_validate, evaluate_fold, model_grad_check, resolve_partitions, train_fold, CrossValidation, FoldReport,
    FoldSpec, PartitionMap, MODEL_GRADCHECK_EPS,
};
use tagat_core::{
    generate_population, DType, Example, LossWeights, ModelConfig, Real, Report, SynthConfig, TaGat, TrainConfig,
};

/// Relative-error threshold for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "tagat", version, about = "Task-aware graph attention network on brain connectomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population as CSV scans plus a manifest.
    Synth(SynthArgs),
    /// Build connectome graphs for every scan in a manifest.
    BuildGraphs(BuildArgs),
    /// Train one leave-one-task-out fold and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its fold's test partition.
    Eval(EvalArgs),
    /// Cross-validate over all five partitions.
    Loto(LotoArgs),
    /// Finite-difference check of the full objective on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    subjects: usize,
    #[arg(long, default_value_t = 3)]
    tasks: usize,
    #[arg(long, default_value_t = 20)]
    rois: usize,
    #[arg(long, default_value_t = 100)]
    timepoints: usize,
    #[arg(long, default_value_t = 1.0)]
    gender_effect: f64,
    #[arg(long, default_value_t = 1.0)]
    cog_effect: f64,
    #[arg(long, default_value_t = 1.0)]
    task_effect: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DENSITY)]
    density: f64,
    /// Ridge added to the covariance diagonal; default 1e-3·trace/N per scan.
    #[arg(long)]
    ridge: Option<f64>,
    /// Zero the self-correlation entry of each node feature row.
    #[arg(long)]
    drop_diagonal: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Hyper {
    #[arg(long, default_value_t = 50.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4e-6)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    step_epochs: usize,
    #[arg(long, default_value_t = 0.4)]
    gamma: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = DType::F32)]
    precision: DType,
    /// GAT, memory-bank and projection width.
    #[arg(long, default_value_t = 2048)]
    width: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1024, 128, 16])]
    mlp_hidden: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
}

impl Hyper {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            step_epochs: self.step_epochs,
            gamma: self.gamma,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            seed: self.seed,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            precision: self.precision,
        }
    }

    fn model_config(&self, d_in: usize, num_tasks: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_h: self.width,
            d_mem: self.width,
            d_proj: self.width,
            num_tasks,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden.clone(),
            dropout: self.dropout,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long)]
    heldout_task: String,
    #[arg(long)]
    test_partition: u8,
    #[arg(long)]
    ckpt: PathBuf,
    /// Also evaluate the fold and write its report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Continue from a checkpoint of the same fold up to `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct LotoArgs {
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long, required_unless_present = "all_tasks", conflicts_with = "all_tasks")]
    heldout_task: Option<String>,
    /// Hold out every task in turn.
    #[arg(long)]
    all_tasks: bool,
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = MODEL_GRADCHECK_EPS)]
    eps: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<tagat_core::Error>())
                .map_or("Error", tagat_core::Error::kind);
            eprintln!("{}", json!({"error": {"kind": kind, "message": format!("{err:#}")}}));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::BuildGraphs(a) => build_graphs(a),
        Command::Train(a) => match a.hyper.precision {
            DType::F32 => train::<f32>(a),
            DType::F64 => train::<f64>(a),
        },
        Command::Eval(a) => eval(a),
        Command::Loto(a) => match a.hyper.precision {
            DType::F32 => loto::<f32>(a),
            DType::F64 => loto::<f64>(a),
        },
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let config = SynthConfig {
        n_subjects: a.subjects,
        n_tasks: a.tasks,
        n_rois: a.rois,
        timepoints: a.timepoints,
        gender_effect: a.gender_effect,
        cog_effect: a.cog_effect,
        task_effect: a.task_effect,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    let pop = generate_population(&config).context("generating population")?;
    let mut scans = Vec::with_capacity(pop.scans.len());
    for s in &pop.scans {
        let rel = format!("scans/{}_{}.csv", s.subject_id, s.task.name);
        write_scan_csv(&a.out.join(&rel), &s.data)?;
        scans.push(ScanEntry {
            subject_id: s.subject_id.clone(),
            task: s.task.name.clone(),
            path: rel,
            gender: s.gender,
            cog_score: s.cog_score,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        roi_count: config.n_rois,
        tasks: task_map(&pop.tasks),
        scans,
        partitions: Some(pop.partitions),
    };
    let path = a.out.join("manifest.json");
    write_json(&path, &manifest)?;
    println!("{}", json!({"manifest": path, "scans": manifest.scans.len()}));
    Ok(())
}

fn build_graphs(a: BuildArgs) -> anyhow::Result<()> {
    let (manifest, tasks, scans) =
        load_scans(&a.manifest).with_context(|| format!("loading --manifest {}", a.manifest.display()))?;
    let opts = GraphOptions {
        density: a.density,
        ridge: a.ridge,
        drop_diagonal: a.drop_diagonal,
    };
    let graphs = build_all(&scans, &opts).context("building graphs (--density/--ridge)")?;
    let mut entries = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let name = graph_file_name(&g.subject_id, &g.task.name);
        save_graph(&a.out.join(&name), g)?;
        entries.push(GraphEntry {
            subject_id: g.subject_id.clone(),
            task: g.task.name.clone(),
            path: name,
        });
    }
    let index = GraphIndex {
        version: MANIFEST_VERSION,
        roi_count: manifest.roi_count,
        tasks: task_map(&tasks),
        density: a.density,
        ridge: a.ridge,
        drop_diagonal: a.drop_diagonal,
        graphs: entries,
        partitions: manifest.partitions,
    };
    write_json(&a.out.join(GRAPH_INDEX_FILE), &index)?;
    let edges = graphs.first().map_or(0, |g| g.graph.edges.len());
    println!("{}", json!({"graphs": graphs.len(), "edges_per_graph": edges, "out": a.out}));
    Ok(())
}

struct Loaded<T: Real> {
    set: GraphSet,
    examples: Vec<Example<T>>,
    partitions: PartitionMap,
}

fn load<T: Real>(dir: &Path) -> anyhow::Result<Loaded<T>> {
    let set = load_graph_dir(dir).with_context(|| format!("loading --graphs {}", dir.display()))?;
    let examples = Example::prepare(&set.graphs)?;
    let partitions = resolve_partitions(
        set.graphs.iter().map(|g| g.subject_id.as_str()),
        set.index.partitions.as_ref(),
    )?;
    Ok(Loaded {
        set,
        examples,
        partitions,
    })
}

fn train<T: Real>(a: TrainArgs) -> anyhow::Result<()> {
    let data = load::<T>(&a.graphs)?;
    let held_out = data.set.tasks.by_name(&a.heldout_task).context("--heldout-task")?;
    let fold = FoldSpec {
        held_out,
        test_partition: a.test_partition,
        partitions: data.partitions.clone(),
    };
    fold.validate().context("--test-partition")?;
    let train_config = a.hyper.train_config();
    let mut model_config = a.hyper.model_config(data.set.index.roi_count, data.set.tasks.len());

    let resume = match &a.resume {
        None => None,
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading --resume {}", path.display()))?;
            if ckpt.meta.held_out_task != a.heldout_task || ckpt.meta.test_partition != a.test_partition {
                bail!(
                    "--resume checkpoint belongs to fold ({}, {}), not ({}, {})",
                    ckpt.meta.held_out_task,
                    ckpt.meta.test_partition,
                    a.heldout_task,
                    a.test_partition
                );
            }
            model_config = ckpt.meta.model.clone();
            Some(ckpt.restore::<T>().context("restoring --resume checkpoint")?)
        }
    };

    let run = train_fold(&data.examples, &fold, &model_config, &train_config, resume)?;
    let meta = CheckpointMeta {
        model: model_config,
        train: train_config.clone(),
        dtype: T::DTYPE,
        rng: RngState {
            seed: train_config.seed,
            next_epoch: run.state.next_epoch,
        },
        tasks: data.set.tasks.clone(),
        held_out_task: fold.held_out.name.clone(),
        test_partition: fold.test_partition,
        exposure: run.state.exposure.clone(),
        integrity: Some(run.integrity.clone()),
    };
    save_checkpoint(&a.ckpt, &Checkpoint::capture(meta, &run.model, &run.state))
        .with_context(|| format!("writing --ckpt {}", a.ckpt.display()))?;
    if let Some(path) = &a.report {
        let report = FoldReport {
            held_out_task: fold.held_out.name.clone(),
            test_partition: fold.test_partition,
            cells: evaluate_fold(&run.model, &data.examples, &data.set.tasks, &fold)?,
            integrity: run.integrity.clone(),
            final_epoch: run.history.last().copied(),
        };
        write_json(path, &report)?;
    }
    let last = run.history.last();
    println!(
        "{}",
        json!({
            "ckpt": a.ckpt,
            "epochs_run": run.history.len(),
            "next_epoch": run.state.next_epoch,
            "final_loss": last.map(|e| e.total),
            "held_out_exposures": run.integrity.held_out_exposures,
            "subject_overlap": run.integrity.subject_overlap,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.ckpt).with_context(|| format!("loading --ckpt {}", a.ckpt.display()))?;
    match ckpt.meta.dtype {
        DType::F32 => eval_at::<f32>(&a, &ckpt),
        DType::F64 => eval_at::<f64>(&a, &ckpt),
    }
}

fn eval_at<T: Real>(a: &EvalArgs, ckpt: &Checkpoint) -> anyhow::Result<()> {
    let (model, _): (TaGat<T>, _) = ckpt.restore()?;
    let data = load::<T>(&a.graphs)?;
    if data.set.tasks != ckpt.meta.tasks {
        bail!("--graphs task list {:?} differs from the checkpoint's", data.set.tasks.names());
    }
    let fold = FoldSpec {
        held_out: data.set.tasks.by_name(&ckpt.meta.held_out_task)?,
        test_partition: ckpt.meta.test_partition,
        partitions: data.partitions,
    };
    let cells = evaluate_fold(&model, &data.examples, &data.set.tasks, &fold)?;
    let report = json!({
        "label": tagat_core::train::report_label(&ckpt.meta.train.weights),
        "held_out_task": fold.held_out.name,
        "test_partition": fold.test_partition,
        "cells": cells,
        "integrity": ckpt.meta.integrity,
    });
    write_json(&a.report, &report)?;
    println!("{}", json!({"report": a.report, "cells": cells.len()}));
    Ok(())
}

fn loto<T: Real>(a: LotoArgs) -> anyhow::Result<()> {
    let data = load::<T>(&a.graphs)?;
    let held_out: Vec<_> = match &a.heldout_task {
        Some(name) => vec![data.set.tasks.by_name(name).context("--heldout-task")?],
        None => data.set.tasks.iter().collect(),
    };
    let train_config = a.hyper.train_config();
    let model_config = a.hyper.model_config(data.set.index.roi_count, data.set.tasks.len());
    let runs = held_out
        .iter()
        .map(|task| {
            cross_validate(&data.examples, &data.set.tasks, task, &data.partitions, &model_config, &train_config)
                .with_context(|| format!("cross-validating with '{}' held out", task.name))
        })
        .collect::<anyhow::Result<Vec<CrossValidation>>>()?;
    let report = Report::new(model_config, train_config, runs);
    write_json(&a.report, &report)?;
    println!(
        "{}",
        json!({"report": a.report, "label": report.label, "runs": report.runs.len()})
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let r = model_grad_check(a.seed, a.eps)?;
    println!(
        "{}",
        json!({
            "max_rel_error": r.max_rel_error,
            "coordinates": r.coordinates,
            "worst": {"tensor": r.worst.0, "index": r.worst.1, "analytic": r.analytic, "numeric": r.numeric},
            "tolerance": GRADCHECK_TOLERANCE,
        })
    );
    if r.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(anyhow!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        ));
    }
    Ok(())
}
