//! Command-line entry point: phantom generation, training, tiled inference,
//! evaluation, gradient checking and the deep-stack shape trace.
//!
//! Exit codes: 0 on success, 1 for usage/configuration/format errors, 2 for
//! numeric failures (non-finite losses, failed gradient checks). Every run
//! writes `manifest.json` (full effective configuration, seed, version,
//! command line) into the output directory, enough to reproduce its outputs
//! bitwise.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ansg_core::autograd::ParamSet;
use ansg_core::check::{format_entry, standard_gradcheck_suite};
use ansg_core::data::{generate_phantom, read_stack, write_pgm, write_stack, ImageStack};
use ansg_core::metrics::{
    connected_components, pixel_error, Connectivity, ForegroundContingency, Labeling,
};
use ansg_core::pipeline::segment_stack;
use ansg_core::tensor::Tensor;
use ansg_core::training::{
    load_checkpoint, save_checkpoint, train_loop, write_loss_trace, TrainState,
};
use ansg_core::{Error, Result};
use clap::{Parser, Subcommand};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "ansg",
    version,
    about = "Anisotropic z-stack segmentation: multi-scale 2D features with bi-directional slice context"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "ansg-out")]
    out: PathBuf,
    /// Overrides the training mode: fcn_only, rnn_only or end_to_end.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Overrides the training iteration count.
    #[arg(long, global = true)]
    iters: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generates a synthetic tubular phantom stack (ZSTK plus PGM previews).
    GenData,
    /// Trains in the configured mode and writes checkpoint plus loss trace.
    Train {
        /// Warm-start parameter values from a checkpoint (iteration and
        /// optimizer state restart from zero).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Segments a stack into per-voxel probabilities (ZSTK plus previews).
    Infer {
        /// Input stack; falls back to `data.eval_stack` from the config.
        #[arg(long)]
        stack: Option<PathBuf>,
        /// Trained parameters; seeded initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scores a probability stack against ground truth; prints CSV.
    Eval {
        /// Labeled ground-truth stack.
        #[arg(long)]
        stack: PathBuf,
        /// Probability stack produced by `infer`.
        #[arg(long)]
        probs: PathBuf,
        /// Evaluate every n-th slice (1-based); overrides the config.
        #[arg(long)]
        mask_stride: Option<usize>,
    },
    /// Runs the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck,
    /// Prints the deep-stack shape trace and the checkpoint chain.
    Shapes,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numeric(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        config::parse_mode(mode)?; // validate early
        cfg.training.mode = mode.clone();
    }
    if let Some(iters) = cli.iters {
        cfg.training.iterations = iters;
    }

    std::fs::create_dir_all(&cli.out)?;
    write_manifest(&cli.out, &cli, &cfg)?;

    match &cli.command {
        Command::GenData => gen_data(&cli.out, &cfg),
        Command::Train { checkpoint } => train(&cli.out, &cfg, checkpoint.as_deref()),
        Command::Infer { stack, checkpoint } => {
            infer(&cli.out, &cfg, stack.as_deref(), checkpoint.as_deref())
        }
        Command::Eval {
            stack,
            probs,
            mask_stride,
        } => eval(&cfg, stack, probs, *mask_stride),
        Command::Gradcheck => gradcheck(),
        Command::Shapes => shapes(&cfg),
    }
}

fn write_manifest(out: &Path, cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let manifest = serde_json::json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "command": format!("{:?}", cli.command),
        "seed": cfg.seed,
        "config": cfg,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Usage(format!("manifest serialization failed: {e}")))?;
    std::fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

fn write_previews(out: &Path, prefix: &str, stack: &ImageStack) -> Result<()> {
    for z in 0..stack.n_z {
        write_pgm(
            &stack.slices[z],
            stack.n_x,
            stack.n_y,
            &out.join(format!("{prefix}_z{z:03}.pgm")),
        )?;
    }
    Ok(())
}

fn gen_data(out: &Path, cfg: &RunConfig) -> Result<()> {
    let phantom_cfg = cfg.data.phantom.to_config(cfg.seed);
    let stack = generate_phantom(&phantom_cfg)?;
    let path = out.join("phantom.zstk");
    write_stack(&stack, &path)?;
    write_previews(out, "image", &stack)?;
    if let Some(labels) = &stack.labels {
        for (z, slice) in labels.iter().enumerate() {
            let values: Vec<f32> = slice.iter().map(|&l| l as f32).collect();
            write_pgm(
                &values,
                stack.n_x,
                stack.n_y,
                &out.join(format!("label_z{z:03}.pgm")),
            )?;
        }
    }
    println!(
        "wrote {} ({}x{}x{} voxels, scale {:?})",
        path.display(),
        stack.n_z,
        stack.n_x,
        stack.n_y,
        stack.voxel_scale
    );
    Ok(())
}

fn load_train_stack(cfg: &RunConfig) -> Result<ImageStack> {
    match &cfg.data.train_stack {
        Some(path) => read_stack(path),
        None => generate_phantom(&cfg.data.phantom.to_config(cfg.seed)),
    }
}

fn train(out: &Path, cfg: &RunConfig, warm_start: Option<&Path>) -> Result<()> {
    let stack = load_train_stack(cfg)?;
    let mut ps = ParamSet::<f32>::new();
    let model = cfg.build_model(&mut ps)?;
    let mut state = TrainState::new(ps, cfg.seed);
    if let Some(path) = warm_start {
        load_checkpoint(path, &mut state)?;
        // A warm start reuses values only; the new phase trains afresh.
        state.iteration = 0;
        state.seed = cfg.seed;
        for t in state.m.iter_mut().chain(state.v.iter_mut()) {
            *t = Tensor::zeros(t.shape());
        }
    }

    let train_cfg = cfg.training.to_config(cfg.seed)?;
    let out_dir = out.to_path_buf();
    let trace = train_loop(&model, &mut state, &stack, &train_cfg, |state, it| {
        save_checkpoint(state, &out_dir.join(format!("checkpoint_{it:06}.ansg")))
    })?;

    save_checkpoint(&state, &out.join("checkpoint.ansg"))?;
    write_loss_trace(&trace, &out.join("loss_trace.csv"))?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "trained {} iterations ({}): loss {:.4} -> {:.4}",
            trace.len(),
            cfg.training.mode,
            first.loss,
            last.loss
        );
    } else {
        println!("trained 0 iterations; parameters unchanged");
    }
    println!("checkpoint: {}", out.join("checkpoint.ansg").display());
    Ok(())
}

fn infer(
    out: &Path,
    cfg: &RunConfig,
    stack_path: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let path = stack_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.eval_stack.clone())
        .ok_or_else(|| {
            Error::Usage("no input stack: pass --stack or set data.eval_stack".into())
        })?;
    let stack = read_stack(&path)?;

    let mut ps = ParamSet::<f32>::new();
    let model = cfg.build_model(&mut ps)?;
    let mut state = TrainState::new(ps, cfg.seed);
    if let Some(ckpt) = checkpoint {
        load_checkpoint(ckpt, &mut state)?;
    } else {
        println!("note: no checkpoint given, segmenting with seeded initial parameters");
    }

    let pipe_cfg = cfg.pipeline.to_config()?;
    let inference_path = cfg.pipeline.inference_path()?;
    let probs = segment_stack(&stack, &state.params, &model, &pipe_cfg, inference_path)?;

    // Foreground channel as a plain stack.
    let plane = stack.n_x * stack.n_y;
    let fg_slices: Vec<Vec<f32>> = probs
        .iter()
        .map(|p| p.data()[plane..2 * plane].to_vec())
        .collect();
    let mut prob_stack =
        ImageStack::new(stack.n_z, stack.n_x, stack.n_y, stack.voxel_scale, fg_slices)?;
    prob_stack.slice_mask = stack.slice_mask.clone();
    let out_path = out.join("probabilities.zstk");
    write_stack(&prob_stack, &out_path)?;
    write_previews(out, "prob", &prob_stack)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    stack_path: &Path,
    probs_path: &Path,
    mask_stride: Option<usize>,
) -> Result<()> {
    let gt = read_stack(stack_path)?;
    let probs = read_stack(probs_path)?;
    let labels = gt
        .labels
        .as_ref()
        .ok_or_else(|| Error::Usage("ground-truth stack carries no labels".into()))?;
    if (probs.n_z, probs.n_x, probs.n_y) != (gt.n_z, gt.n_x, gt.n_y) {
        return Err(Error::Dimension(format!(
            "probability stack {}x{}x{} does not match ground truth {}x{}x{}",
            probs.n_z, probs.n_x, probs.n_y, gt.n_z, gt.n_x, gt.n_y
        )));
    }

    let stride = mask_stride.unwrap_or(cfg.metrics.mask_stride);
    let mask: Option<Vec<bool>> = if stride > 0 {
        Some((0..gt.n_z).map(|z| (z + 1) % stride == 0).collect())
    } else {
        gt.slice_mask.clone()
    };

    let connectivity = match cfg.metrics.connectivity {
        4 => Connectivity::Four,
        8 => Connectivity::Eight,
        other => {
            return Err(Error::Config(format!(
                "connectivity must be 4 or 8, got {other}"
            )))
        }
    };

    // Two-channel maps for the pixel error.
    let prob_maps: Vec<Tensor<f32>> = probs
        .slices
        .iter()
        .map(|fg| {
            let mut data = Vec::with_capacity(2 * fg.len());
            data.extend(fg.iter().map(|&p| 1.0 - p));
            data.extend_from_slice(fg);
            Tensor::new(vec![2, gt.n_x, gt.n_y], data)
        })
        .collect::<Result<_>>()?;
    let err = pixel_error(&prob_maps, labels, mask.as_deref())?;

    let mut table = ForegroundContingency::new();
    for z in 0..gt.n_z {
        if mask.as_ref().is_some_and(|m| !m[z]) {
            continue;
        }
        let binary: Vec<u8> = probs.slices[z]
            .iter()
            .map(|&p| u8::from(f64::from(p) >= cfg.metrics.threshold))
            .collect();
        let pred = connected_components(&binary, gt.n_x, gt.n_y, connectivity);
        let gt_l: Labeling = connected_components(&labels[z], gt.n_x, gt.n_y, connectivity);
        table.add_slice(&pred, &gt_l)?;
    }
    let v_rand = table.rand_score()?;
    let v_info = table.info_score()?;

    println!("stack,pixel_error,v_rand,v_info");
    println!(
        "{},{:.6},{:.6},{:.6}",
        stack_path.display(),
        err,
        v_rand,
        v_info
    );
    Ok(())
}

fn gradcheck() -> Result<()> {
    let entries = standard_gradcheck_suite()?;
    let mut failed = Vec::new();
    for entry in &entries {
        println!("{}", format_entry(entry));
        if !entry.report.passed() {
            failed.push(entry.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", entries.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient checks failed: {}",
            failed.join(", ")
        )))
    }
}

fn shapes(cfg: &RunConfig) -> Result<()> {
    let kunet = cfg.fcn.to_config()?;
    let stack = cfg.rnn.to_config(kunet.out_channels())?;
    let pipe = cfg.pipeline.to_config()?;
    pipe.validate_for(&stack)?;
    let window = pipe.tile + pipe.margin;

    println!("deep stack layer trace for a {window}x{window} input window:");
    for (label, shape) in stack.shape_trace(window)? {
        println!("  {label:28} {}x{}x{}", shape[0], shape[1], shape[2]);
    }
    println!("chain: {}", stack.shape_chain(window)?);
    println!("tile margin: {}", stack.margin(window)?);
    Ok(())
}
