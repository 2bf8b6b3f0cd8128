//! Stage orchestration over an on-disk scene directory: superface
//! clustering, instance graph voting, 2D/3D association, label propagation,
//! field fitting, rendering and evaluation. Stages are resumable: a stage
//! whose primary artifact already exists is skipped unless forced.
//!
//! Scene layout:
//! ```text
//! scene/
//!   mesh.ply          trajectory.txt    classes.json
//!   frames/NNNNNN.{lbl,depth.pgm,color.ppm[,fmap]}
//!   gt/NNNNNN.lbl     gt.json           (optional, for evaluation)
//! out/
//!   superfaces.bin  clusters.bin  instances.json
//!   corrected/  propagated/  field.bin  renders/  metrics.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::associate::{
    assign_global_ids, correct_labels, match_frame, project_labels, vote_class, FrameMatch,
    InstanceMap,
};
use crate::field::{
    fit, load_field, pixel_ray, render_frame, save_field, FitOpts, LossWeights, RenderOpts,
    TrainRay, VoxelField, FIELD_FEAT_DIM,
};
use crate::instgraph::{
    accumulate_frame, cut_and_cluster, load_clusters, overlaps, save_clusters, DeductionRule,
    SceneGraph,
};
use crate::metrics::{coverage_metrics, panoptic_quality_scene, semantic_metrics};
use crate::propagate::{encode_pixel, fit_pca, train_classifier, propagate, TrainOpts};
use crate::rasterizer::{rasterize, IdBuffer};
use crate::scene_io::{
    load_depth_pgm, load_feature_map, load_label_image, load_mesh, load_ppm, load_trajectory,
    save_depth_pgm, save_label_image, save_ppm, ClassTable, Config, Frame, LabelImage, TriMesh,
};
use crate::superface::{
    build_normal_graph, load_segmentation, save_segmentation, segment, superpoints,
};
use crate::{Error, Result, UNKNOWN};

/// All tunables of a run, parsed and range-checked from a key=value config.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub scene_dir: PathBuf,
    pub out_dir: PathBuf,
    // superfaces
    pub k: f64,
    pub min_size: usize,
    // instance graph
    pub theta: f64,
    pub deduction_rule: DeductionRule,
    // association
    pub iou: f64,
    // propagation
    pub pca_dim: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub clf_lr: f64,
    pub clf_batch: usize,
    pub use_position: bool,
    pub train_pixels: usize,
    // field
    pub grid: usize,
    pub xi: f64,
    pub beta: f64,
    pub n_samples: usize,
    pub trunc_cells: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub max_rays: usize,
    pub render_stride: usize,
    /// End after association + propagation: no field fit, no renders.
    pub skip_field: bool,
    pub seed: u64,
    pub threads: usize,
}

impl PipelineConfig {
    /// Parse from a config file; relative scene_dir resolves against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Config::load(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_config(&cfg, &base)
    }

    pub fn from_config(cfg: &Config, base: &Path) -> Result<Self> {
        let resolve = |p: &str| -> PathBuf {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        let scene_dir = resolve(cfg.get("scene_dir").unwrap_or("."));
        let out_dir = cfg
            .get("out_dir")
            .map(resolve)
            .unwrap_or_else(|| scene_dir.join("out"));
        let rule = match cfg.get("deduction_rule").unwrap_or("all_visible") {
            "all_visible" => DeductionRule::AllVisible,
            "other_masks" => DeductionRule::OtherMasksOnly,
            other => {
                return Err(Error::Config(format!(
                    "deduction_rule must be all_visible or other_masks, got {other}"
                )))
            }
        };
        let out = Self {
            scene_dir,
            out_dir,
            k: cfg.get_f64("k", 0.05)?,
            min_size: cfg.get_usize("min_size", 20)?,
            theta: cfg.get_f64("theta", 0.3)?,
            deduction_rule: rule,
            iou: cfg.get_f64("iou", 0.25)?,
            pca_dim: cfg.get_usize("pca_dim", 64)?,
            epochs: cfg.get_usize("epochs", 50)?,
            hidden: cfg.get_usize("hidden", 0)?,
            clf_lr: cfg.get_f64("clf_lr", 0.1)?,
            clf_batch: cfg.get_usize("clf_batch", 4096)?,
            use_position: cfg.get_bool("use_position", true)?,
            train_pixels: cfg.get_usize("train_pixels", 50_000)?,
            grid: cfg.get_usize("grid", 32)?,
            xi: cfg.get_f64("xi", 20.0)?,
            beta: cfg.get_f64("beta", 5.0)?,
            n_samples: cfg.get_usize("n_samples", 64)?,
            trunc_cells: cfg.get_f64("trunc_cells", 4.0)?,
            stage1_iters: cfg.get_usize("stage1_iters", 2000)?,
            stage2_iters: cfg.get_usize("stage2_iters", 1000)?,
            batch_rays: cfg.get_usize("batch_rays", 256)?,
            lr: cfg.get_f64("lr", 0.02)?,
            max_rays: cfg.get_usize("max_rays", 150_000)?,
            render_stride: cfg.get_usize("render_stride", 8)?,
            skip_field: cfg.get_bool("skip_field", false)?,
            seed: cfg.get_u64("seed", 0)?,
            threads: cfg.get_usize("threads", 1)?,
        };
        let problems = out.validate();
        if let Some(p) = problems.first() {
            return Err(Error::Config(p.clone()));
        }
        Ok(out)
    }

    /// Range and path diagnostics; empty means runnable.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut range = |name: &str, v: f64, lo: f64, hi: f64| {
            if !(v > lo && v <= hi) {
                out.push(format!("{name} = {v} out of range ({lo}, {hi}]"));
            }
        };
        range("k", self.k, 0.0, 1e9);
        range("theta", self.theta, 0.0, 1.0);
        range("iou", self.iou, 0.0, 1.0);
        range("xi", self.xi, 0.0, 1e6);
        range("beta", self.beta, 0.0, 1e6);
        range("trunc_cells", self.trunc_cells, 0.0, 1e6);
        range("lr", self.lr, 0.0, 1e6);
        range("clf_lr", self.clf_lr, 0.0, 1e6);
        if self.n_samples < 2 {
            out.push(format!("n_samples = {} must be >= 2", self.n_samples));
        }
        if self.grid < 2 {
            out.push(format!("grid = {} must be >= 2", self.grid));
        }
        if self.pca_dim == 0 {
            out.push("pca_dim must be >= 1".into());
        }
        if self.batch_rays == 0 || self.clf_batch == 0 {
            out.push("batch sizes must be >= 1".into());
        }
        if self.render_stride == 0 {
            out.push("render_stride must be >= 1".into());
        }
        if self.threads == 0 {
            out.push("threads must be >= 1".into());
        }
        if !self.scene_dir.is_dir() {
            out.push(format!("scene_dir {} is not a directory", self.scene_dir.display()));
        } else {
            for f in ["mesh.ply", "trajectory.txt", "classes.json"] {
                if !self.scene_dir.join(f).is_file() {
                    out.push(format!("missing {}", self.scene_dir.join(f).display()));
                }
            }
            if !self.scene_dir.join("frames").is_dir() {
                out.push(format!(
                    "missing {}",
                    self.scene_dir.join("frames").display()
                ));
            }
        }
        out
    }

    fn p_superfaces(&self) -> PathBuf {
        self.out_dir.join("superfaces.bin")
    }
    fn p_clusters(&self) -> PathBuf {
        self.out_dir.join("clusters.bin")
    }
    fn p_instances(&self) -> PathBuf {
        self.out_dir.join("instances.json")
    }
    fn p_corrected(&self) -> PathBuf {
        self.out_dir.join("corrected")
    }
    fn p_propagated(&self) -> PathBuf {
        self.out_dir.join("propagated")
    }
    fn p_field(&self) -> PathBuf {
        self.out_dir.join("field.bin")
    }
    fn p_renders(&self) -> PathBuf {
        self.out_dir.join("renders")
    }
    fn p_metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.json")
    }
}

/// The loaded scene: mesh, classes and fully-populated frames.
pub struct Scene {
    pub mesh: TriMesh,
    pub classes: ClassTable,
    pub frames: Vec<Frame>,
}

fn frame_stem(id: u32) -> String {
    format!("{id:06}")
}

pub fn load_scene(cfg: &PipelineConfig) -> Result<Scene> {
    let mesh = load_mesh(&cfg.scene_dir.join("mesh.ply"))?;
    let classes: ClassTable =
        serde_json::from_str(&std::fs::read_to_string(cfg.scene_dir.join("classes.json"))?)
            .map_err(|e| Error::Format(format!("classes.json: {e}")))?;
    let traj = load_trajectory(&cfg.scene_dir.join("trajectory.txt"))?;
    let fdir = cfg.scene_dir.join("frames");
    let mut frames = Vec::with_capacity(traj.len());
    for entry in traj {
        let stem = frame_stem(entry.frame_id);
        let labels = load_label_image(&fdir.join(format!("{stem}.lbl")))
            .map_err(|e| Error::Data(format!("frame {stem} labels: {e}")))?;
        let mut frame = Frame::new(
            entry.frame_id,
            entry.intrinsics,
            entry.pose,
            labels.width,
            labels.height,
        )?;
        frame.labels = Some(labels);
        let depth_path = fdir.join(format!("{stem}.depth.pgm"));
        if depth_path.is_file() {
            frame.depth = Some(load_depth_pgm(&depth_path)?);
        }
        let color_path = fdir.join(format!("{stem}.color.ppm"));
        if color_path.is_file() {
            frame.color = Some(load_ppm(&color_path)?);
        }
        let fmap_path = fdir.join(format!("{stem}.fmap"));
        if fmap_path.is_file() {
            frame.features = Some(load_feature_map(&fmap_path)?);
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::Data("trajectory has no frames".into()));
    }
    Ok(Scene {
        mesh,
        classes,
        frames,
    })
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub name: &'static str,
    pub skipped: bool,
    pub seconds: f64,
}

/// Run one stage with presence-based skipping and timing.
fn stage<F: FnOnce() -> Result<()>>(
    name: &'static str,
    artifact: &Path,
    force: bool,
    reports: &mut Vec<StageReport>,
    f: F,
) -> Result<()> {
    if !force && artifact.exists() {
        log::info!("stage {name}: {} exists, skipping", artifact.display());
        reports.push(StageReport {
            name,
            skipped: true,
            seconds: 0.0,
        });
        return Ok(());
    }
    let t = Instant::now();
    f().map_err(|e| {
        Error::Data(format!(
            "stage {name} failed (artifact {}): {e}",
            artifact.display()
        ))
    })?;
    let seconds = t.elapsed().as_secs_f64();
    log::info!("stage {name}: finished in {seconds:.2}s");
    reports.push(StageReport {
        name,
        skipped: false,
        seconds,
    });
    Ok(())
}

/// Per-frame id buffers, rasterized once and shared by graph + association.
fn rasterize_all(scene: &Scene) -> Vec<IdBuffer> {
    scene
        .frames
        .iter()
        .map(|f| rasterize(&scene.mesh, f))
        .collect()
}

pub fn stage_superface(cfg: &PipelineConfig, scene: &Scene) -> Result<()> {
    let edges = build_normal_graph(&scene.mesh);
    let seg = segment(scene.mesh.faces.len(), &edges, cfg.k, cfg.min_size);
    log::info!("superfaces: {}", seg.count());
    save_segmentation(&cfg.p_superfaces(), &seg)
}

pub fn stage_graph(cfg: &PipelineConfig, scene: &Scene, idbufs: &[IdBuffer]) -> Result<()> {
    let seg = load_segmentation(&cfg.p_superfaces())?;
    let mut graph = SceneGraph::new(seg.count());
    for (frame, idbuf) in scene.frames.iter().zip(idbufs) {
        let labels = frame.labels.as_ref().unwrap();
        let table = overlaps(idbuf, &seg, labels, &scene.classes);
        accumulate_frame(&mut graph, &table, cfg.theta, cfg.deduction_rule);
    }
    let clusters = cut_and_cluster(&graph);
    log::info!("instance clusters: {}", clusters.count());
    save_clusters(&cfg.p_clusters(), &clusters)
}

pub fn stage_associate(cfg: &PipelineConfig, scene: &Scene, idbufs: &[IdBuffer]) -> Result<()> {
    let seg = load_segmentation(&cfg.p_superfaces())?;
    let clusters = load_clusters(&cfg.p_clusters())?;
    let points = superpoints(&scene.mesh, &seg)?;
    let areas: Vec<f64> = points.iter().map(|p| p.area).collect();
    let mut imap = assign_global_ids(&clusters, &areas);
    let mut frame_data: Vec<(u32, &LabelImage, Vec<FrameMatch>)> = Vec::new();
    for (frame, idbuf) in scene.frames.iter().zip(idbufs) {
        let labels = frame.labels.as_ref().unwrap();
        let matches = match_frame(&imap, idbuf, &seg, labels, &scene.classes, cfg.iou);
        frame_data.push((frame.id, labels, matches));
    }
    vote_class(&mut imap, &frame_data);
    std::fs::create_dir_all(cfg.p_corrected())?;
    let mut fresh = imap.instances.len() as u32 + 1;
    for ((frame_id, labels, matches), idbuf) in frame_data.iter().zip(idbufs) {
        let mut corrected = correct_labels(&imap, labels, &scene.classes, matches, &mut fresh);
        if !corrected.flagged.is_empty() {
            log::debug!("frame {frame_id}: {} unmatched masks kept", corrected.flagged.len());
        }
        project_labels(&imap, idbuf, &seg, &scene.classes, &mut corrected.labels);
        save_label_image(
            &cfg.p_corrected().join(format!("{}.lbl", frame_stem(*frame_id))),
            &corrected.labels,
        )?;
    }
    imap.save_json(&cfg.p_instances())
}

/// Load the best available labels for a frame: propagated, else corrected,
/// else raw input.
pub fn best_labels(cfg: &PipelineConfig, frame: &Frame) -> Result<LabelImage> {
    let stem = frame_stem(frame.id);
    for dir in [cfg.p_propagated(), cfg.p_corrected()] {
        let p = dir.join(format!("{stem}.lbl"));
        if p.is_file() {
            return load_label_image(&p);
        }
    }
    Ok(frame.labels.clone().unwrap())
}

pub fn stage_propagate(cfg: &PipelineConfig, scene: &Scene) -> Result<()> {
    let with_features: Vec<usize> = (0..scene.frames.len())
        .filter(|&i| scene.frames[i].features.is_some())
        .collect();
    std::fs::create_dir_all(cfg.p_propagated())?;
    if with_features.is_empty() {
        log::info!("propagate: no feature maps, copying corrected labels");
        for frame in &scene.frames {
            let labels = best_labels(cfg, frame)?;
            save_label_image(
                &cfg.p_propagated().join(format!("{}.lbl", frame_stem(frame.id))),
                &labels,
            )?;
        }
        return Ok(());
    }
    // PCA over a deterministic pixel subsample of all feature maps
    let dim = scene.frames[with_features[0]].features.as_ref().unwrap().dim as usize;
    let total_px: usize = with_features
        .iter()
        .map(|&i| scene.frames[i].pixel_count())
        .sum();
    let stride = (total_px / cfg.train_pixels.max(1)).max(1);
    let mut sample = Vec::new();
    for &i in &with_features {
        let fm = scene.frames[i].features.as_ref().unwrap();
        for px in (0..scene.frames[i].pixel_count()).step_by(stride) {
            sample.extend_from_slice(fm.pixel(px));
        }
    }
    let pca = fit_pca(&sample, dim, cfg.pca_dim.min(dim))?;
    // training set: labeled pixels of the corrected frames
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut corrected: BTreeMap<usize, LabelImage> = BTreeMap::new();
    for &i in &with_features {
        let frame = &scene.frames[i];
        let labels = best_labels(cfg, frame)?;
        let fm = frame.features.as_ref().unwrap();
        for px in 0..frame.pixel_count() {
            if labels.class_id[px] != UNKNOWN {
                xs.push(encode_pixel(&pca, frame, fm, px, cfg.use_position)?);
                ys.push(labels.class_id[px]);
            }
        }
        corrected.insert(i, labels);
    }
    if xs.len() > cfg.train_pixels {
        // deterministic thinning
        let keep = cfg.train_pixels;
        let step = xs.len() as f64 / keep as f64;
        let (mut txs, mut tys) = (Vec::with_capacity(keep), Vec::with_capacity(keep));
        for j in 0..keep {
            let at = (j as f64 * step) as usize;
            txs.push(xs[at].clone());
            tys.push(ys[at]);
        }
        xs = txs;
        ys = tys;
    }
    let opts = TrainOpts {
        lr: cfg.clf_lr,
        batch: cfg.clf_batch,
        epochs: cfg.epochs,
        hidden: cfg.hidden,
        seed: cfg.seed,
    };
    let (clf, history) = train_classifier(&xs, &ys, &opts)?;
    log::info!(
        "classifier: {} samples, loss {:.4} -> {:.4}",
        xs.len(),
        history.first().unwrap(),
        history.last().unwrap()
    );
    for frame in &scene.frames {
        let idx = scene
            .frames
            .iter()
            .position(|f| f.id == frame.id)
            .unwrap();
        let mut labels = match corrected.remove(&idx) {
            Some(l) => l,
            None => best_labels(cfg, frame)?,
        };
        if let Some(fm) = frame.features.as_ref() {
            let filled = propagate(&mut labels, frame, fm, &pca, &clf, cfg.use_position)?;
            log::debug!("frame {}: filled {filled} pixels", frame.id);
        }
        save_label_image(
            &cfg.p_propagated().join(format!("{}.lbl", frame_stem(frame.id))),
            &labels,
        )?;
    }
    Ok(())
}

pub fn stage_fit(cfg: &PipelineConfig, scene: &Scene) -> Result<()> {
    // field over the mesh bounds, padded by one voxel
    let (lo, hi) = scene.mesh.bounds();
    let extent = hi - lo;
    let voxel = extent.max() / (cfg.grid as f64 - 3.0);
    let origin = lo - nalgebra::Vector3::repeat(voxel);
    let dims = [
        ((extent.x / voxel).ceil() as usize + 3).max(2),
        ((extent.y / voxel).ceil() as usize + 3).max(2),
        ((extent.z / voxel).ceil() as usize + 3).max(2),
    ];
    let imap = InstanceMap::load_json(&cfg.p_instances())?;
    let k_sem = scene.classes.len() + 1;
    let k_inst = imap.instances.len() + 1;

    // reduced per-pixel feature targets
    let with_features: Vec<usize> = (0..scene.frames.len())
        .filter(|&i| scene.frames[i].features.is_some())
        .collect();
    let feat_pca = if with_features.is_empty() {
        None
    } else {
        let dim = scene.frames[with_features[0]].features.as_ref().unwrap().dim as usize;
        let total: usize = with_features
            .iter()
            .map(|&i| scene.frames[i].pixel_count())
            .sum();
        let stride = (total / cfg.train_pixels.max(1)).max(1);
        let mut sample = Vec::new();
        for &i in &with_features {
            let fm = scene.frames[i].features.as_ref().unwrap();
            for px in (0..scene.frames[i].pixel_count()).step_by(stride) {
                sample.extend_from_slice(fm.pixel(px));
            }
        }
        Some(fit_pca(&sample, dim, FIELD_FEAT_DIM.min(dim))?)
    };
    let k_feat = feat_pca.as_ref().map(|p| p.out_dim()).unwrap_or(0);

    let mut field = VoxelField::new(origin, voxel, dims, k_sem, k_inst, k_feat)?;

    // supervised rays from every frame, deterministically subsampled
    let total_px: usize = scene.frames.iter().map(|f| f.pixel_count()).sum();
    let stride = (total_px / cfg.max_rays.max(1)).max(1);
    let mut rays: Vec<TrainRay> = Vec::new();
    for frame in &scene.frames {
        let labels = best_labels(cfg, frame)?;
        let mut supervised = frame.clone();
        supervised.labels = Some(labels);
        let fm = supervised.features.clone();
        for px in (0..frame.pixel_count()).step_by(stride) {
            let feat_target = match (&feat_pca, &fm) {
                (Some(pca), Some(fm)) => Some(pca.project(fm.pixel(px))?),
                _ => None,
            };
            if let Some(ray) = pixel_ray(&supervised, px, feat_target.as_deref(), &field) {
                rays.push(ray);
            }
        }
    }
    log::info!("fit: {} rays, grid {dims:?}, voxel {voxel:.3}", rays.len());
    let render = RenderOpts {
        n_samples: cfg.n_samples,
        xi: cfg.xi,
        beta: cfg.beta,
        trunc_cells: cfg.trunc_cells,
    };
    let stage1 = FitOpts {
        iters: cfg.stage1_iters,
        batch_rays: cfg.batch_rays,
        lr: cfg.lr,
        seed: cfg.seed,
        render: render.clone(),
        weights: LossWeights::geometry(),
    };
    let h1 = fit(&mut field, &rays, &stage1)?;
    if let (Some(a), Some(b)) = (h1.first(), h1.last()) {
        log::info!("fit stage 1: loss {a:.4} -> {b:.4}");
    }
    let stage2 = FitOpts {
        iters: cfg.stage2_iters,
        seed: cfg.seed ^ 1,
        weights: LossWeights::default(),
        ..stage1
    };
    let h2 = fit(&mut field, &rays, &stage2)?;
    if let (Some(a), Some(b)) = (h2.first(), h2.last()) {
        log::info!("fit stage 2: loss {a:.4} -> {b:.4}");
    }
    save_field(&cfg.p_field(), &field)
}

pub fn stage_render(cfg: &PipelineConfig, scene: &Scene) -> Result<()> {
    let field = load_field(&cfg.p_field())?;
    std::fs::create_dir_all(cfg.p_renders())?;
    let opts = RenderOpts {
        n_samples: cfg.n_samples,
        xi: cfg.xi,
        beta: cfg.beta,
        trunc_cells: cfg.trunc_cells,
    };
    for frame in scene.frames.iter().step_by(cfg.render_stride) {
        let r = render_frame(&field, frame, &opts);
        let stem = frame_stem(frame.id);
        save_ppm(&cfg.p_renders().join(format!("{stem}.color.ppm")), &r.color)?;
        save_depth_pgm(&cfg.p_renders().join(format!("{stem}.depth.pgm")), &r.depth)?;
        save_label_image(&cfg.p_renders().join(format!("{stem}.lbl")), &r.labels)?;
    }
    Ok(())
}

/// Everything `stage_metrics` reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub miou: f64,
    pub macc: f64,
    pub mcov: f64,
    pub mwcov: f64,
    pub n_pred_instances: usize,
}

pub fn stage_metrics(cfg: &PipelineConfig, scene: &Scene) -> Result<SceneMetrics> {
    let gt_dir = cfg.scene_dir.join("gt");
    if !gt_dir.is_dir() {
        return Err(Error::Data(format!(
            "no ground truth at {}",
            gt_dir.display()
        )));
    }
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for frame in &scene.frames {
        pred.push(best_labels(cfg, frame)?);
        gt.push(load_label_image(
            &gt_dir.join(format!("{}.lbl", frame_stem(frame.id))),
        )?);
    }
    let pred_refs: Vec<&LabelImage> = pred.iter().collect();
    let gt_refs: Vec<&LabelImage> = gt.iter().collect();
    let pan = panoptic_quality_scene(&pred_refs, &gt_refs, &scene.classes)?;
    let sem = semantic_metrics(&pred_refs, &gt_refs)?;
    let cov = coverage_metrics(&pred_refs, &gt_refs)?;
    let imap = InstanceMap::load_json(&cfg.p_instances()).unwrap_or_default();
    let m = SceneMetrics {
        pq: pan.pq,
        sq: pan.sq,
        rq: pan.rq,
        miou: sem.miou,
        macc: sem.macc,
        mcov: cov.mcov,
        mwcov: cov.mwcov,
        n_pred_instances: imap.instances.len(),
    };
    std::fs::write(
        cfg.p_metrics(),
        serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(m)
}

/// Run the full pipeline; stages whose artifacts exist are skipped unless
/// `force`.
pub fn run(cfg: &PipelineConfig, force: bool) -> Result<Vec<StageReport>> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let scene = load_scene(cfg)?;
    let mut reports = Vec::new();
    stage("superface", &cfg.p_superfaces(), force, &mut reports, || {
        stage_superface(cfg, &scene)
    })?;
    // rasterization shared by graph + associate; skip if both are done
    let need_raster = force
        || !cfg.p_clusters().exists()
        || !cfg.p_instances().exists();
    let idbufs = if need_raster {
        rasterize_all(&scene)
    } else {
        Vec::new()
    };
    stage("graph", &cfg.p_clusters(), force, &mut reports, || {
        stage_graph(cfg, &scene, &idbufs)
    })?;
    stage("associate", &cfg.p_instances(), force, &mut reports, || {
        stage_associate(cfg, &scene, &idbufs)
    })?;
    stage("propagate", &cfg.p_propagated(), force, &mut reports, || {
        stage_propagate(cfg, &scene)
    })?;
    if !cfg.skip_field {
        stage("fit", &cfg.p_field(), force, &mut reports, || {
            stage_fit(cfg, &scene)
        })?;
        stage("render", &cfg.p_renders(), force, &mut reports, || {
            stage_render(cfg, &scene)
        })?;
    }
    if cfg.scene_dir.join("gt").is_dir() {
        stage("metrics", &cfg.p_metrics(), force, &mut reports, || {
            stage_metrics(cfg, &scene).map(|_| ())
        })?;
    }
    Ok(reports)
}

/// Write a generated scene (with corrupted input labels and published ground
/// truth) as an on-disk scene directory plus a ready-to-run config file.
pub fn write_scene_dir(
    dir: &Path,
    scene: &crate::synth::SynthScene,
    frames: &[Frame],
    spec: &crate::synth::CorruptionSpec,
) -> Result<()> {
    use crate::scene_io::{save_mesh, save_trajectory, TrajectoryEntry};
    use crate::synth::{corrupt_frame, GroundTruth};

    std::fs::create_dir_all(dir.join("frames"))?;
    std::fs::create_dir_all(dir.join("gt"))?;
    save_mesh(&dir.join("mesh.ply"), &scene.mesh)?;
    let entries: Vec<TrajectoryEntry> = frames
        .iter()
        .map(|f| TrajectoryEntry {
            frame_id: f.id,
            intrinsics: f.intrinsics,
            pose: f.pose,
        })
        .collect();
    save_trajectory(&dir.join("trajectory.txt"), &entries)?;
    std::fs::write(
        dir.join("classes.json"),
        serde_json::to_string_pretty(&scene.classes).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let mut gt = GroundTruth {
        seed: scene.seed,
        instance_class: scene.instance_class.clone(),
        classes: scene.classes.clone(),
        frames: BTreeMap::new(),
    };
    for frame in frames {
        let stem = frame_stem(frame.id);
        let labels = frame.labels.as_ref().unwrap();
        save_label_image(&dir.join("gt").join(format!("{stem}.lbl")), labels)?;
        let (corrupted, rec) = corrupt_frame(labels, &scene.classes, spec, scene.seed, frame.id);
        save_label_image(&dir.join("frames").join(format!("{stem}.lbl")), &corrupted)?;
        gt.frames.insert(frame.id, rec);
        if let Some(d) = frame.depth.as_ref() {
            save_depth_pgm(&dir.join("frames").join(format!("{stem}.depth.pgm")), d)?;
        }
        if let Some(c) = frame.color.as_ref() {
            save_ppm(&dir.join("frames").join(format!("{stem}.color.ppm")), c)?;
        }
        if let Some(fm) = frame.features.as_ref() {
            crate::scene_io::save_feature_map(
                &dir.join("frames").join(format!("{stem}.fmap")),
                fm,
            )?;
        }
    }
    std::fs::write(
        dir.join("gt.json"),
        serde_json::to_string_pretty(&gt).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    // a default config so the scene is directly runnable
    let mut cfg = Config::default();
    cfg.set("scene_dir", ".");
    cfg.set("seed", scene.seed);
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, make_trajectory, render_gt_frames, CorruptionSpec, SceneSpec};
    use tempfile::tempdir;

    fn make_scene_dir(dir: &Path, seed: u64, with_features: bool) {
        let mut scene = generate_scene(&SceneSpec {
            room: (4.0, 4.0, 2.5),
            n_things: 3,
            seed,
        })
        .unwrap();
        make_trajectory(&mut scene, 8, 64, 48);
        let frames = render_gt_frames(&scene, 64, 48, with_features);
        let spec = CorruptionSpec {
            permute_ids: true,
            ..Default::default()
        };
        write_scene_dir(dir, &scene, &frames, &spec).unwrap();
    }

    fn tiny_config(dir: &Path) -> PipelineConfig {
        let mut c = Config::default();
        c.set("scene_dir", dir.display());
        c.set("min_size", 1);
        c.set("grid", 12);
        c.set("stage1_iters", 30);
        c.set("stage2_iters", 20);
        c.set("batch_rays", 32);
        c.set("n_samples", 16);
        c.set("max_rays", 4000);
        c.set("epochs", 10);
        c.set("train_pixels", 4000);
        c.set("render_stride", 8);
        PipelineConfig::from_config(&c, Path::new(".")).unwrap()
    }

    #[test]
    fn full_run_produces_all_artifacts() {
        let tmp = tempdir().unwrap();
        make_scene_dir(tmp.path(), 5, false);
        let cfg = tiny_config(tmp.path());
        let reports = run(&cfg, false).unwrap();
        assert!(reports.iter().all(|r| !r.skipped));
        for p in [
            cfg.p_superfaces(),
            cfg.p_clusters(),
            cfg.p_instances(),
            cfg.p_field(),
            cfg.p_metrics(),
        ] {
            assert!(p.exists(), "{}", p.display());
        }
        assert!(cfg.p_corrected().join("000000.lbl").is_file());
        assert!(cfg.p_renders().join("000000.color.ppm").is_file());
        let m: SceneMetrics =
            serde_json::from_str(&std::fs::read_to_string(cfg.p_metrics()).unwrap()).unwrap();
        // permutation-only corruption must be essentially undone
        assert!(m.pq > 0.9, "pq {}", m.pq);
    }

    #[test]
    fn second_run_skips_completed_stages() {
        let tmp = tempdir().unwrap();
        make_scene_dir(tmp.path(), 6, false);
        let cfg = tiny_config(tmp.path());
        run(&cfg, false).unwrap();
        let reports = run(&cfg, false).unwrap();
        assert!(reports.iter().all(|r| r.skipped), "{reports:?}");
    }

    #[test]
    fn validate_reports_bad_ranges_and_paths() {
        let mut c = Config::default();
        c.set("scene_dir", "/definitely/not/here");
        c.set("theta", "1.5");
        assert!(matches!(
            PipelineConfig::from_config(&c, Path::new(".")),
            Err(Error::Config(_))
        ));
        let mut c2 = Config::default();
        c2.set("scene_dir", "/definitely/not/here");
        let cfg = PipelineConfig::from_config(&c2, Path::new("."));
        // path problems surface in validate(), range problems at parse
        match cfg {
            Err(Error::Config(msg)) => assert!(msg.contains("not a directory"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn run_with_features_propagates_partial_labels() {
        let tmp = tempdir().unwrap();
        // partial-class omission plus features to recover from
        let mut scene = generate_scene(&SceneSpec {
            room: (4.0, 4.0, 2.5),
            n_things: 2,
            seed: 9,
        })
        .unwrap();
        make_trajectory(&mut scene, 6, 64, 48);
        let frames = render_gt_frames(&scene, 64, 48, true);
        let spec = CorruptionSpec {
            p_partial: 0.4,
            ..Default::default()
        };
        write_scene_dir(tmp.path(), &scene, &frames, &spec).unwrap();
        let mut cfg = tiny_config(tmp.path());
        cfg.epochs = 50;
        cfg.train_pixels = 20_000;
        run(&cfg, false).unwrap();
        let m: SceneMetrics =
            serde_json::from_str(&std::fs::read_to_string(cfg.p_metrics()).unwrap()).unwrap();
        // propagation fills omitted classes back in
        assert!(m.macc > 0.9, "macc {}", m.macc);
    }
}
