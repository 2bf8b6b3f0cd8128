use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use panolabel::pipeline::{
    self, load_scene, run, stage_associate, stage_fit, stage_graph, stage_metrics,
    stage_propagate, stage_render, stage_superface, write_scene_dir, PipelineConfig,
};
use panolabel::synth::{
    generate_scene, make_trajectory, render_gt_frames, CorruptionSpec, SceneSpec,
};
use panolabel::Error;

#[derive(Parser)]
#[command(name = "panolabel", version, about = "3D panoptic label fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with corrupted input masks
    Synth {
        /// Output scene directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        things: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 160)]
        width: u32,
        #[arg(long, default_value_t = 120)]
        height: u32,
        /// Also write per-pixel feature maps (large)
        #[arg(long)]
        features: bool,
        #[arg(long, default_value_t = 0.0)]
        p_drop: f64,
        #[arg(long, default_value_t = 0.0)]
        p_flip: f64,
        #[arg(long, default_value_t = 0.0)]
        p_partial: f64,
        #[arg(long, default_value_t = 0)]
        erode: u32,
        /// Permute surviving 2D mask ids per frame
        #[arg(long)]
        permute: bool,
    },
    /// Check a config and scene directory without running anything
    Validate(ConfigArg),
    /// Run all stages (resumable; use --force to redo)
    Run {
        #[command(flatten)]
        args: StageArgs,
        /// Stop after labeling: skip field fitting and rendering
        #[arg(long)]
        skip_field: bool,
    },
    /// Cluster mesh faces into superfaces
    Superface(StageArgs),
    /// Build the superpoint voting graph and cut it into 3D instances
    Graph(StageArgs),
    /// Assign global ids, vote classes and write corrected frame labels
    Associate(StageArgs),
    /// Fill unknown pixels from features with a trained classifier
    Propagate(StageArgs),
    /// Fit the voxel panoptic field
    Fit(StageArgs),
    /// Render color/depth/label images from the fitted field
    Render(StageArgs),
    /// Evaluate corrected labels against ground truth
    Metrics(StageArgs),
}

#[derive(clap::Args)]
struct ConfigArg {
    /// key=value config file; paths resolve relative to it
    #[arg(long)]
    config: PathBuf,
}

#[derive(clap::Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Redo the stage even if its artifact exists
    #[arg(long)]
    force: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Synth {
            out,
            seed,
            things,
            frames,
            width,
            height,
            features,
            p_drop,
            p_flip,
            p_partial,
            erode,
            permute,
        } => {
            let mut scene = generate_scene(&SceneSpec {
                room: (4.0, 4.0, 2.5),
                n_things: things,
                seed,
            })?;
            make_trajectory(&mut scene, frames, width, height);
            let rendered = render_gt_frames(&scene, width, height, features);
            let spec = CorruptionSpec {
                p_drop,
                p_flip,
                permute_ids: permute,
                erode_px: erode,
                p_partial,
            };
            write_scene_dir(&out, &scene, &rendered, &spec)?;
            println!("wrote scene with {} frames to {}", rendered.len(), out.display());
            Ok(())
        }
        Command::Validate(a) => {
            let cfg = PipelineConfig::load(&a.config)?;
            let problems = cfg.validate();
            if problems.is_empty() {
                println!("ok");
                Ok(())
            } else {
                for p in &problems {
                    eprintln!("{p}");
                }
                Err(Error::Config(format!("{} problem(s)", problems.len())))
            }
        }
        Command::Run { args: a, skip_field } => {
            let mut cfg = PipelineConfig::load(&a.config)?;
            cfg.skip_field |= skip_field;
            let reports = run(&cfg, a.force)?;
            for r in &reports {
                if r.skipped {
                    println!("{:<10} skipped", r.name);
                } else {
                    println!("{:<10} {:.2}s", r.name, r.seconds);
                }
            }
            Ok(())
        }
        Command::Superface(a) => single_stage(&a, |cfg, scene| stage_superface(cfg, scene)),
        Command::Graph(a) => single_stage(&a, |cfg, scene| {
            let bufs: Vec<_> = scene
                .frames
                .iter()
                .map(|f| panolabel::rasterizer::rasterize(&scene.mesh, f))
                .collect();
            stage_graph(cfg, scene, &bufs)
        }),
        Command::Associate(a) => single_stage(&a, |cfg, scene| {
            let bufs: Vec<_> = scene
                .frames
                .iter()
                .map(|f| panolabel::rasterizer::rasterize(&scene.mesh, f))
                .collect();
            stage_associate(cfg, scene, &bufs)
        }),
        Command::Propagate(a) => single_stage(&a, |cfg, scene| stage_propagate(cfg, scene)),
        Command::Fit(a) => single_stage(&a, |cfg, scene| stage_fit(cfg, scene)),
        Command::Render(a) => single_stage(&a, |cfg, scene| stage_render(cfg, scene)),
        Command::Metrics(a) => single_stage(&a, |cfg, scene| {
            let m = stage_metrics(cfg, scene)?;
            println!(
                "pq {:.4}  sq {:.4}  rq {:.4}  miou {:.4}  macc {:.4}  mcov {:.4}  mwcov {:.4}",
                m.pq, m.sq, m.rq, m.miou, m.macc, m.mcov, m.mwcov
            );
            Ok(())
        }),
    }
}

fn single_stage<F>(args: &StageArgs, f: F) -> Result<(), Error>
where
    F: FnOnce(&PipelineConfig, &pipeline::Scene) -> Result<(), Error>,
{
    let cfg = PipelineConfig::load(&args.config)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let scene = load_scene(&cfg)?;
    f(&cfg, &scene)
}
