//! Command-line harness: dataset generation, teacher/student training,
//! distillation, evaluation, ablations, gradient checking, and attention
//! dumps. All outputs are CSV files and checkpoints under the output
//! directory; every command is deterministic in its config and seed.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use d3etr_core::eval::{evaluate_model, EvalResult};
use d3etr_core::losses::LossReport;
use d3etr_core::nn::{init_params, ModelConfig};
use d3etr_core::params::ParamStore;
use d3etr_core::scenes::{split, DatasetSpec};
use d3etr_core::train::{
    distill_student, dump_attention, gradcheck_objective, inherit_init, materialize_scenes,
    run_ablation, standard_ablation_grid, train_detector, train_teacher, ablation_csv,
    RunConfig, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "d3etr", about = "Desk-scale decoder distillation harness")]
struct Cli {
    /// Run configuration JSON (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and CSVs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset spec JSON; overrides the config's embedded spec.
    #[arg(long, global = true)]
    data_spec: Option<PathBuf>,
    /// Teacher checkpoint path.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    /// Initialize the student from the teacher's parameters.
    #[arg(long, global = true)]
    inherit: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the dataset spec and report the train/val split sizes.
    GenData,
    /// Train the teacher with detection losses only.
    TrainTeacher,
    /// Train a baseline student (no distillation).
    TrainStudent,
    /// Distill the student from a trained teacher.
    Distill,
    /// Evaluate a checkpoint on the validation split.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Which architecture the checkpoint belongs to.
        #[arg(long, value_enum, default_value_t = Arch::Student)]
        arch: Arch,
    },
    /// Run the matching-strategy and decoder-depth ablation grid.
    Ablate,
    /// Finite-difference check of the full objective on a tiny model.
    Gradcheck,
    /// Dump per-layer, per-head attention maps of a checkpoint to CSV.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Arch::Student)]
        arch: Arch,
        /// Scene index to run.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Filename prefix (e.g. "teacher_").
        #[arg(long, default_value = "")]
        prefix: String,
    },
}

fn load_run_config(cli: &Cli) -> Result<RunConfig, Box<dyn Error>> {
    let mut run: RunConfig = match &cli.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    if let Some(path) = &cli.data_spec {
        run.data = DatasetSpec::load(path)?;
    }
    if cli.inherit {
        run.inherit = true;
    }
    run.out_dir = Some(cli.out.clone());
    if let Some(t) = &cli.teacher {
        run.teacher_ckpt = Some(t.clone());
    }
    Ok(run)
}

fn write_metrics(path: &Path, metrics: &[EvalResult]) -> Result<(), Box<dyn Error>> {
    let mut body = String::from(EvalResult::CSV_HEADER);
    body.push('\n');
    for (epoch, m) in metrics.iter().enumerate() {
        body.push_str(&m.csv_row(epoch));
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn write_losses(path: &Path, rows: &[LossReport]) -> Result<(), Box<dyn Error>> {
    let mut body = String::from(LossReport::CSV_HEADER);
    body.push('\n');
    for (step, r) in rows.iter().enumerate() {
        body.push_str(&r.csv_row(step));
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn write_instability(path: &Path, outcome: &TrainOutcome) -> Result<(), Box<dyn Error>> {
    let mut body = String::from("epoch,adaptive_churn,aux_churn\n");
    for (epoch, (a, x)) in
        outcome.adaptive_churn.iter().zip(&outcome.aux_churn).enumerate()
    {
        body.push_str(&format!("{epoch},{a},{x}\n"));
    }
    std::fs::write(path, body)?;
    Ok(())
}

fn write_outcome(
    out: &Path,
    stem: &str,
    outcome: &TrainOutcome,
) -> Result<PathBuf, Box<dyn Error>> {
    std::fs::create_dir_all(out)?;
    let ckpt = out.join(format!("{stem}.ckpt"));
    outcome.params.save(&ckpt)?;
    write_metrics(&out.join("metrics.csv"), &outcome.metrics)?;
    write_losses(&out.join("losses.csv"), &outcome.loss_rows)?;
    write_instability(&out.join("instability.csv"), outcome)?;
    Ok(ckpt)
}

fn scenes_for(run: &RunConfig) -> Result<(Vec<d3etr_core::scenes::SceneSample>, Vec<d3etr_core::scenes::SceneSample>), Box<dyn Error>> {
    let (train_idx, val_idx) = split(&run.data);
    Ok((materialize_scenes(&run.data, &train_idx)?, materialize_scenes(&run.data, &val_idx)?))
}

fn load_teacher(run: &RunConfig) -> Result<ParamStore, Box<dyn Error>> {
    let path = run
        .teacher_ckpt
        .as_ref()
        .ok_or("a teacher checkpoint is required (--teacher <ckpt>)")?;
    Ok(ParamStore::load(path)?)
}

fn arch_config(run: &RunConfig, arch: Arch) -> ModelConfig {
    match arch {
        Arch::Teacher => run.teacher,
        Arch::Student => run.student,
    }
}

/// Tiny configuration for gradient checking: 2 decoder layers, 3 queries,
/// 2 classes, a 4×4 grid.
fn gradcheck_run(seed: u64) -> RunConfig {
    let data = DatasetSpec {
        n_scenes: 8,
        grid_h: 4,
        grid_w: 4,
        c_in: 2,
        n_classes: 2,
        max_objects: 2,
        seed,
        ..DatasetSpec::default()
    };
    let teacher = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_queries: 3,
        n_classes: 2,
        grid_h: 4,
        grid_w: 4,
        c_in: 2,
        ffn_dim: 16,
    };
    RunConfig { teacher, student: teacher, data, seed, ..RunConfig::default() }
}

fn real_main() -> Result<ExitCode, Box<dyn Error>> {
    let cli = Cli::parse();
    let run = load_run_config(&cli)?;
    let out = cli.out.clone();

    match cli.cmd {
        Cmd::GenData => {
            run.data.validate()?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("data_spec.json");
            run.data.save(&path)?;
            let (train_idx, val_idx) = split(&run.data);
            println!(
                "wrote {} ({} train / {} val scenes)",
                path.display(),
                train_idx.len(),
                val_idx.len()
            );
        }
        Cmd::TrainTeacher => {
            run.validate()?;
            let (train, val) = scenes_for(&run)?;
            let outcome = train_teacher(&run, &train, &val)?;
            let ckpt = write_outcome(&out, "teacher", &outcome)?;
            let last = outcome.metrics.last().copied().unwrap_or_default();
            println!("teacher: {} (ap50 {:.4}, map {:.4})", ckpt.display(), last.ap50, last.map);
        }
        Cmd::TrainStudent => {
            run.validate()?;
            let (train, val) = scenes_for(&run)?;
            let init = if run.inherit && run.teacher_ckpt.is_some() {
                let teacher = load_teacher(&run)?;
                let mut ps = init_params(&run.student, run.seed)?;
                inherit_init(&mut ps, &teacher)?;
                Some(ps)
            } else {
                None
            };
            let outcome = train_detector(
                &run.student,
                &run.optim,
                &run.loss,
                run.seed,
                init,
                &train,
                &val,
            )?;
            let ckpt = write_outcome(&out, "student_baseline", &outcome)?;
            let last = outcome.metrics.last().copied().unwrap_or_default();
            println!("student: {} (ap50 {:.4}, map {:.4})", ckpt.display(), last.ap50, last.map);
        }
        Cmd::Distill => {
            run.validate()?;
            let teacher = load_teacher(&run)?;
            let (train, val) = scenes_for(&run)?;
            let outcome = distill_student(&run, &teacher, &train, &val)?;
            let ckpt = write_outcome(&out, "student_distilled", &outcome)?;
            let last = outcome.metrics.last().copied().unwrap_or_default();
            println!(
                "distilled: {} (ap50 {:.4}, map {:.4}, aux constraint mismatches {})",
                ckpt.display(),
                last.ap50,
                last.map,
                outcome.aux_constraint_mismatches
            );
        }
        Cmd::Eval { ckpt, arch } => {
            let store = ParamStore::load(&ckpt)?;
            let cfg = arch_config(&run, arch);
            let (_, val) = scenes_for(&run)?;
            let r = evaluate_model(&store, &cfg, &val)?;
            println!("{}", EvalResult::CSV_HEADER);
            println!("{}", r.csv_row(0));
        }
        Cmd::Ablate => {
            run.validate()?;
            let teacher = load_teacher(&run)?;
            let (train, val) = scenes_for(&run)?;
            let grid = standard_ablation_grid(&run);
            let rows = run_ablation(&run, &teacher, &grid, &train, &val)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("ablation.csv");
            std::fs::write(&path, ablation_csv(&rows))?;
            println!("wrote {}", path.display());
        }
        Cmd::Gradcheck => {
            let run = if cli.config.is_some() { run } else { gradcheck_run(cli.seed.unwrap_or(0)) };
            let scene = d3etr_core::scenes::generate_scene(&run.data, 0)?;
            let report = gradcheck_objective(&run, &scene)?;
            for (name, err) in &report.per_param {
                println!("{name}: {err:.3e}");
            }
            println!(
                "max relative error {:.3e} ({}) — {}",
                report.max_rel_err,
                report.worst,
                if report.pass { "PASS" } else { "FAIL" }
            );
            if !report.pass {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::DumpAttn { ckpt, arch, scene, prefix } => {
            let store = ParamStore::load(&ckpt)?;
            let cfg = arch_config(&run, arch);
            let sample = d3etr_core::scenes::generate_scene(&run.data, scene)?;
            let paths = dump_attention(&store, &cfg, &sample, &out, &prefix)?;
            println!("wrote {} attention maps to {}", paths.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
