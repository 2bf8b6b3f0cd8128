//! Dense voxel panoptic field: one multi-channel grid holding SDF, color,
//! semantic logits, instance logits and a reduced feature embedding, sampled
//! trilinearly and fitted by volume-rendering losses with hand-written
//! reverse-mode gradients.
//!
//! Rays are parameterized by arc length along a *unit* direction; depth
//! targets must be converted from z-depth before supervision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene_io::{ColorImage, DepthImage, Frame, LabelImage};
use crate::{Error, Result, UNKNOWN, UNLABELED};

const FIELD_MAGIC: &[u8; 4] = b"PFLD";
const FIELD_VERSION: u32 = 1;

/// Default reduced feature width stored in the field.
pub const FIELD_FEAT_DIM: usize = 8;

/// Multi-channel voxel grid over an axis-aligned box. `dims` counts grid
/// points per axis; cell size is `voxel`. Channel order per grid point:
/// sdf, rgb, semantic logits, instance logits, features.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    pub dims: [usize; 3],
    pub origin: Point3<f64>,
    pub voxel: f64,
    pub k_sem: usize,
    pub k_inst: usize,
    pub k_feat: usize,
    pub data: Vec<f64>,
}

impl VoxelField {
    pub fn new(
        origin: Point3<f64>,
        voxel: f64,
        dims: [usize; 3],
        k_sem: usize,
        k_inst: usize,
        k_feat: usize,
    ) -> Result<Self> {
        if voxel <= 0.0 || dims.iter().any(|&d| d < 2) {
            return Err(Error::Config(format!(
                "field needs voxel > 0 and >= 2 grid points per axis, got {voxel} {dims:?}"
            )));
        }
        let channels = 4 + k_sem + k_inst + k_feat;
        let n = dims[0] * dims[1] * dims[2] * channels;
        let mut field = Self {
            dims,
            origin,
            voxel,
            k_sem,
            k_inst,
            k_feat,
            data: vec![0.0; n],
        };
        // start outside the surface everywhere
        let init_sdf = 4.0 * voxel;
        let c = field.channels();
        for i in (0..field.data.len()).step_by(c) {
            field.data[i] = init_sdf;
        }
        Ok(field)
    }

    pub fn channels(&self) -> usize {
        4 + self.k_sem + self.k_inst + self.k_feat
    }

    pub const CH_SDF: usize = 0;
    pub const CH_COLOR: usize = 1;
    pub fn ch_sem(&self) -> usize {
        4
    }
    pub fn ch_inst(&self) -> usize {
        4 + self.k_sem
    }
    pub fn ch_feat(&self) -> usize {
        4 + self.k_sem + self.k_inst
    }

    /// World-space bounds of the grid.
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let hi = self.origin
            + Vector3::new(
                (self.dims[0] - 1) as f64,
                (self.dims[1] - 1) as f64,
                (self.dims[2] - 1) as f64,
            ) * self.voxel;
        (self.origin, hi)
    }

    fn grid_index(&self, x: usize, y: usize, z: usize) -> usize {
        ((z * self.dims[1] + y) * self.dims[0] + x) * self.channels()
    }

    /// Trilinear interpolation stencil at a world point: 8 grid-point base
    /// offsets (in data indices, channel 0) and corner weights. Points
    /// outside the box are clamped; the flag reports clamping.
    pub fn stencil(&self, p: &Point3<f64>) -> (Stencil, bool) {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut clamped = false;
        for a in 0..3 {
            let mut g = (p[a] - self.origin[a]) / self.voxel;
            let top = (self.dims[a] - 1) as f64;
            if g < 0.0 {
                g = 0.0;
                clamped = true;
            } else if g > top {
                g = top;
                clamped = true;
            }
            let i = (g.floor() as usize).min(self.dims[a] - 2);
            idx[a] = i;
            frac[a] = g - i as f64;
        }
        let mut corners = [(0usize, 0.0f64); 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
            corners[c] = (
                self.grid_index(idx[0] + dx, idx[1] + dy, idx[2] + dz),
                w,
            );
        }
        (Stencil { corners, idx, frac }, clamped)
    }

    /// Trilinear sample of one channel.
    pub fn sample_channel(&self, st: &Stencil, ch: usize) -> f64 {
        st.corners
            .iter()
            .map(|&(base, w)| self.data[base + ch] * w)
            .sum()
    }

    pub fn sdf(&self, p: &Point3<f64>) -> f64 {
        let (st, _) = self.stencil(p);
        self.sample_channel(&st, Self::CH_SDF)
    }

    /// Analytic gradient of the trilinear SDF at a point (not renormalized).
    pub fn sdf_normal(&self, p: &Point3<f64>) -> Vector3<f64> {
        let (st, _) = self.stencil(p);
        self.channel_gradient(&st, Self::CH_SDF)
    }

    /// Spatial gradient of a trilinearly interpolated channel.
    pub fn channel_gradient(&self, st: &Stencil, ch: usize) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for c in 0..8 {
            let v = self.data[st.corners[c].0 + ch];
            let dw = st.weight_gradient(c, self.voxel);
            g += dw * v;
        }
        g
    }
}

/// Interpolation stencil: 8 corner (data base index, weight) pairs plus the
/// local cell coordinates for weight gradients.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub corners: [(usize, f64); 8],
    pub idx: [usize; 3],
    pub frac: [f64; 3],
}

impl Stencil {
    /// d(weight of corner c)/dp, world units.
    pub fn weight_gradient(&self, c: usize, voxel: f64) -> Vector3<f64> {
        let s = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let f = |a: usize| {
            if s[a] == 1 {
                self.frac[a]
            } else {
                1.0 - self.frac[a]
            }
        };
        let df = |a: usize| if s[a] == 1 { 1.0 } else { -1.0 };
        Vector3::new(
            df(0) * f(1) * f(2),
            f(0) * df(1) * f(2),
            f(0) * f(1) * df(2),
        ) / voxel
    }
}

pub fn save_field(path: &Path, field: &VoxelField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&FIELD_VERSION.to_le_bytes())?;
    for d in field.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for a in 0..3 {
        w.write_all(&field.origin[a].to_le_bytes())?;
    }
    w.write_all(&field.voxel.to_le_bytes())?;
    for k in [field.k_sem, field.k_inst, field.k_feat] {
        w.write_all(&(k as u32).to_le_bytes())?;
    }
    w.write_all(&(field.data.len() as u64).to_le_bytes())?;
    for v in &field.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_field(path: &Path) -> Result<VoxelField> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::Format(format!("bad field magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != FIELD_VERSION {
        return Err(Error::Format(format!("unsupported field version {version}")));
    }
    let dims = [
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    ];
    let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        r.read_exact(&mut u64buf)?;
        Ok(f64::from_le_bytes(u64buf))
    };
    let origin = Point3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
    let voxel = read_f64(&mut r)?;
    let mut u32buf2 = [0u8; 4];
    let mut read_u32b = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf2)?;
        Ok(u32::from_le_bytes(u32buf2))
    };
    let k_sem = read_u32b(&mut r)? as usize;
    let k_inst = read_u32b(&mut r)? as usize;
    let k_feat = read_u32b(&mut r)? as usize;
    let mut lenbuf = [0u8; 8];
    r.read_exact(&mut lenbuf)?;
    let len = u64::from_le_bytes(lenbuf) as usize;
    let want = dims[0] * dims[1] * dims[2] * (4 + k_sem + k_inst + k_feat);
    if len != want {
        return Err(Error::Format(format!(
            "field payload length {len} does not match header ({want})"
        )));
    }
    let mut data = vec![0.0f64; len];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::Format("non-finite field value".into()));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(VoxelField {
        dims,
        origin,
        voxel,
        k_sem,
        k_inst,
        k_feat,
        data,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Opacity of the interval between consecutive SDF samples under an
/// S-density with temperature `xi`, clamped at zero.
pub fn alpha(s_cur: f64, s_next: f64, xi: f64) -> f64 {
    let phi_cur = sigmoid(xi * s_cur);
    let phi_next = sigmoid(xi * s_next);
    ((phi_cur - phi_next) / phi_cur).max(0.0)
}

/// Supervision targets for one ray. `depth` is along-ray distance (z-depth
/// times the direction stretch), `feat` must match the field's feature width.
#[derive(Debug, Clone, Default)]
pub struct RayTarget {
    pub depth: Option<f64>,
    pub color: Option<[f64; 3]>,
    pub sem: Option<u32>,
    pub inst: Option<u32>,
    pub feat: Option<Vec<f64>>,
}

/// Per-term loss weights.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub sdf: f64,
    pub eik: f64,
    pub depth: f64,
    pub color: f64,
    pub sem: f64,
    pub inst: f64,
    pub feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sdf: 1.0,
            eik: 1.0,
            depth: 1.0,
            color: 1.0,
            sem: 1.0,
            inst: 1.0,
            feat: 1.0,
        }
    }
}

impl LossWeights {
    /// Geometry-only weights for the first fitting stage.
    pub fn geometry() -> Self {
        Self {
            sem: 0.0,
            inst: 0.0,
            feat: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOpts {
    pub n_samples: usize,
    pub xi: f64,
    pub beta: f64,
    /// SDF truncation band, in voxel cells.
    pub trunc_cells: f64,
}

impl Default for RenderOpts {
    fn default() -> Self {
        Self {
            n_samples: 64,
            xi: 20.0,
            beta: 5.0,
            trunc_cells: 4.0,
        }
    }
}

/// Entry/exit parameters of a ray against an axis-aligned box, clipped to
/// t >= 0.
pub fn ray_box(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    lo: &Point3<f64>,
    hi: &Point3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Everything rendered along one ray. Sample `i` carries composite weight
/// `weights[i]` for `i < n-1`; `trans_end` is the leftover transmittance.
#[derive(Debug, Clone)]
pub struct RayRender {
    pub ts: Vec<f64>,
    pub sdf: Vec<f64>,
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub trans_end: f64,
    pub depth: f64,
    pub color: [f64; 3],
    pub sem: Vec<f64>,
    pub inst: Vec<f64>,
    pub feat: Vec<f64>,
}

/// Stratified sample parameters over [t0, t1]; `jitter` of 0.5 everywhere
/// gives deterministic midpoints.
pub fn stratified_ts(t0: f64, t1: f64, n: usize, jitter: impl FnMut(usize) -> f64) -> Vec<f64> {
    let mut jitter = jitter;
    let step = (t1 - t0) / n as f64;
    (0..n).map(|i| t0 + (i as f64 + jitter(i)) * step).collect()
}

/// Volume-render a ray through the field. `dir` must be unit length.
pub fn render_ray(
    field: &VoxelField,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    ts: &[f64],
    opts: &RenderOpts,
) -> RayRender {
    let n = ts.len();
    let mut stencils = Vec::with_capacity(n);
    let mut sdf = Vec::with_capacity(n);
    for &t in ts {
        let p = origin + dir * t;
        let (st, _) = field.stencil(&p);
        sdf.push(field.sample_channel(&st, VoxelField::CH_SDF));
        stencils.push(st);
    }
    let mut alphas = Vec::with_capacity(n.saturating_sub(1));
    let mut weights = Vec::with_capacity(n.saturating_sub(1));
    let mut trans = 1.0f64;
    for i in 0..n.saturating_sub(1) {
        let a = alpha(sdf[i], sdf[i + 1], opts.xi);
        alphas.push(a);
        weights.push(trans * a);
        trans *= 1.0 - a;
    }
    let mut depth = 0.0;
    let mut color = [0.0f64; 3];
    let mut sem = vec![0.0f64; field.k_sem];
    let mut inst = vec![0.0f64; field.k_inst];
    let mut feat = vec![0.0f64; field.k_feat];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let st = &stencils[i];
        depth += w * ts[i];
        for c in 0..3 {
            color[c] += w * field.sample_channel(st, VoxelField::CH_COLOR + c);
        }
        for c in 0..field.k_sem {
            sem[c] += w * field.sample_channel(st, field.ch_sem() + c);
        }
        for c in 0..field.k_inst {
            inst[c] += w * field.sample_channel(st, field.ch_inst() + c);
        }
        for c in 0..field.k_feat {
            feat[c] += w * field.sample_channel(st, field.ch_feat() + c);
        }
    }
    RayRender {
        ts: ts.to_vec(),
        sdf,
        alphas,
        weights,
        trans_end: trans,
        depth,
        color,
        sem,
        inst,
        feat,
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Sparse gradient accumulator over the field parameters.
pub struct GradBuffer {
    values: Vec<f64>,
    stamp: Vec<u32>,
    epoch: u32,
    touched: Vec<usize>,
}

impl GradBuffer {
    pub fn new(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            stamp: vec![0; n],
            epoch: 1,
            touched: Vec::new(),
        }
    }

    pub fn add(&mut self, i: usize, v: f64) {
        if self.stamp[i] != self.epoch {
            self.stamp[i] = self.epoch;
            self.values[i] = 0.0;
            self.touched.push(i);
        }
        self.values[i] += v;
    }

    pub fn get(&self, i: usize) -> f64 {
        if self.stamp[i] == self.epoch {
            self.values[i]
        } else {
            0.0
        }
    }

    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    pub fn scale(&mut self, s: f64) {
        for i in 0..self.touched.len() {
            let idx = self.touched[i];
            self.values[idx] *= s;
        }
    }

    pub fn clear(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.fill(0);
            self.epoch = 1;
        }
        self.touched.clear();
    }
}

/// Loss of one ray against its targets; when `grad` is given, accumulates
/// d(loss)/d(field parameters) into it. Returns the weighted total loss.
pub fn ray_loss(
    field: &VoxelField,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    ts: &[f64],
    target: &RayTarget,
    weights_cfg: &LossWeights,
    opts: &RenderOpts,
    mut grad: Option<&mut GradBuffer>,
) -> f64 {
    let n = ts.len();
    if n < 2 {
        return 0.0;
    }
    let render = render_ray(field, origin, dir, ts, opts);
    let stencils: Vec<Stencil> = ts
        .iter()
        .map(|&t| field.stencil(&(origin + dir * t)).0)
        .collect();
    let trunc = opts.trunc_cells * field.voxel;

    let mut loss = 0.0;
    // d(loss)/d(weight_i) and d(loss)/d(sampled channel value at i)
    let mut dw = vec![0.0f64; n - 1];
    // per-sample channel-value cotangents, only for channels we touched
    let mut dval: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n - 1];
    // direct per-sample SDF cotangents (sdf + eikonal supervision)
    let mut dsdf = vec![0.0f64; n];

    // rendered depth, normalized by accumulated opacity so partially
    // transparent rays compare a proper expectation instead of a biased sum
    if let (Some(d_gt), true) = (target.depth, weights_cfg.depth > 0.0) {
        let acc = 1.0 - render.trans_end;
        if acc > 1e-6 {
            let d_hat = render.depth / acc;
            let diff = d_hat - d_gt;
            loss += weights_cfg.depth * diff.abs();
            let sign = if diff >= 0.0 { 1.0 } else { -1.0 };
            for i in 0..n - 1 {
                dw[i] += weights_cfg.depth * sign * (ts[i] - d_hat) / acc;
            }
        }
    }
    // rendered color
    if let (Some(c_gt), true) = (target.color, weights_cfg.color > 0.0) {
        for c in 0..3 {
            let diff = render.color[c] - c_gt[c];
            loss += weights_cfg.color * diff * diff;
            for i in 0..n - 1 {
                if render.weights[i] == 0.0 {
                    continue;
                }
                let v = field.sample_channel(&stencils[i], VoxelField::CH_COLOR + c);
                dw[i] += weights_cfg.color * 2.0 * diff * v;
                dval[i].push((
                    VoxelField::CH_COLOR + c,
                    weights_cfg.color * 2.0 * diff * render.weights[i],
                ));
            }
        }
    }
    // rendered semantic / instance logits, softmax cross-entropy
    let ce = |logits: &[f64],
                  slot: usize,
                  ch0: usize,
                  w_term: f64,
                  dw: &mut [f64],
                  dval: &mut [Vec<(usize, f64)>]| {
        let probs = softmax(logits);
        let mut term = -probs[slot].max(1e-300).ln() * w_term;
        if !term.is_finite() {
            term = 0.0;
        }
        for (c, &p) in probs.iter().enumerate() {
            let dlogit = w_term * (p - if c == slot { 1.0 } else { 0.0 });
            for i in 0..n - 1 {
                if render.weights[i] == 0.0 {
                    continue;
                }
                let v = field.sample_channel(&stencils[i], ch0 + c);
                dw[i] += dlogit * v;
                dval[i].push((ch0 + c, dlogit * render.weights[i]));
            }
        }
        term
    };
    if let (Some(class), true) = (target.sem, weights_cfg.sem > 0.0) {
        let slot = class as usize;
        if slot < field.k_sem {
            loss += ce(
                &render.sem,
                slot,
                field.ch_sem(),
                weights_cfg.sem,
                &mut dw,
                &mut dval,
            );
        }
    }
    if let (Some(id), true) = (target.inst, weights_cfg.inst > 0.0) {
        let slot = id as usize;
        if slot < field.k_inst {
            loss += ce(
                &render.inst,
                slot,
                field.ch_inst(),
                weights_cfg.inst,
                &mut dw,
                &mut dval,
            );
        }
    }
    // rendered feature embedding
    if let (Some(f_gt), true) = (target.feat.as_ref(), weights_cfg.feat > 0.0) {
        for c in 0..field.k_feat.min(f_gt.len()) {
            let diff = render.feat[c] - f_gt[c];
            loss += weights_cfg.feat * diff * diff;
            for i in 0..n - 1 {
                if render.weights[i] == 0.0 {
                    continue;
                }
                let v = field.sample_channel(&stencils[i], field.ch_feat() + c);
                dw[i] += weights_cfg.feat * 2.0 * diff * v;
                dval[i].push((
                    field.ch_feat() + c,
                    weights_cfg.feat * 2.0 * diff * render.weights[i],
                ));
            }
        }
    }
    // truncated SDF supervision along rays with depth
    if let (Some(d_gt), true) = (target.depth, weights_cfg.sdf > 0.0) {
        let mut supervised = Vec::new();
        for i in 0..n {
            let b = d_gt - ts[i];
            if b < -trunc {
                continue; // far behind the surface: unobserved
            }
            supervised.push((i, b));
        }
        if !supervised.is_empty() {
            let inv = weights_cfg.sdf / supervised.len() as f64;
            for (i, b) in supervised {
                let s = render.sdf[i];
                if b.abs() <= trunc {
                    loss += inv * (s - b).abs();
                    dsdf[i] += inv * if s >= b { 1.0 } else { -1.0 };
                } else {
                    // free space: punish negative sdf and overshoot past b
                    let e = (-opts.beta * s).exp() - 1.0;
                    let lin = s - b;
                    let m = e.max(lin).max(0.0);
                    loss += inv * m;
                    if m > 0.0 {
                        if e >= lin {
                            dsdf[i] += inv * -opts.beta * (-opts.beta * s).exp();
                        } else {
                            dsdf[i] += inv;
                        }
                    }
                }
            }
        }
    }
    // eikonal term at sample points
    if weights_cfg.eik > 0.0 {
        let inv = weights_cfg.eik / n as f64;
        for i in 0..n {
            let g = field.channel_gradient(&stencils[i], VoxelField::CH_SDF);
            let norm = g.norm();
            let diff = norm - 1.0;
            loss += inv * diff * diff;
            if let Some(gbuf) = grad.as_deref_mut() {
                if norm > 1e-12 {
                    let scale = inv * 2.0 * diff / norm;
                    for c in 0..8 {
                        let dwv = stencils[i].weight_gradient(c, field.voxel);
                        gbuf.add(stencils[i].corners[c].0, scale * g.dot(&dwv));
                    }
                }
            }
        }
    }

    let Some(gbuf) = grad else {
        return loss;
    };

    // weights -> alphas (reverse scan with suffix accumulator)
    // w_i = T_i a_i, T_{i+1} = T_i (1 - a_i)
    // dL/da_i = g_i T_i - sum_{k>i} g_k w_k / (1 - a_i)
    let mut dalpha = vec![0.0f64; n - 1];
    let mut suffix = 0.0f64; // sum_{k>i} g_k w_k
    let mut trans = vec![1.0f64; n - 1];
    for i in 1..n - 1 {
        trans[i] = trans[i - 1] * (1.0 - render.alphas[i - 1]);
    }
    for i in (0..n - 1).rev() {
        let denom = (1.0 - render.alphas[i]).max(1e-12);
        dalpha[i] = dw[i] * trans[i] - suffix / denom;
        suffix += dw[i] * render.weights[i];
    }
    // alphas -> sdf samples
    for i in 0..n - 1 {
        if dalpha[i] == 0.0 {
            continue;
        }
        let phi_c = sigmoid(opts.xi * render.sdf[i]);
        let phi_n = sigmoid(opts.xi * render.sdf[i + 1]);
        let raw = (phi_c - phi_n) / phi_c;
        if raw <= 0.0 {
            continue; // clamped: zero subgradient
        }
        let dphi_c = opts.xi * phi_c * (1.0 - phi_c);
        let dphi_n = opts.xi * phi_n * (1.0 - phi_n);
        dsdf[i] += dalpha[i] * phi_n * dphi_c / (phi_c * phi_c);
        dsdf[i + 1] += dalpha[i] * (-dphi_n / phi_c);
    }
    // scatter per-sample cotangents to grid corners
    for i in 0..n {
        let st = &stencils[i];
        if dsdf[i] != 0.0 {
            for &(base, w) in &st.corners {
                gbuf.add(base + VoxelField::CH_SDF, dsdf[i] * w);
            }
        }
        if i < n - 1 {
            for &(ch, cot) in &dval[i] {
                for &(base, w) in &st.corners {
                    gbuf.add(base + ch, cot * w);
                }
            }
        }
    }
    loss
}

/// A ready-to-train ray with its supervision.
#[derive(Debug, Clone)]
pub struct TrainRay {
    pub origin: Point3<f64>,
    pub dir: Vector3<f64>,
    pub target: RayTarget,
}

/// Build the supervised ray for one frame pixel, or None when the pixel
/// carries no signal at all.
pub fn pixel_ray(
    frame: &Frame,
    px: usize,
    feat_target: Option<&[f64]>,
    field: &VoxelField,
) -> Option<TrainRay> {
    let w = frame.width as usize;
    let (u, v) = ((px % w) as f64 + 0.5, (px / w) as f64 + 0.5);
    let intr = frame.intrinsics;
    let cam_dir = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    let stretch = cam_dir.norm();
    let dir = frame.pose.dir_to_world(&cam_dir) / stretch;
    let origin = frame.pose.center();

    let depth = frame.depth.as_ref().and_then(|d| {
        let z = d.data[px] as f64;
        (z > 0.0 && z.is_finite()).then_some(z * stretch)
    });
    let color = frame.color.as_ref().map(|c| {
        let rgb = c.rgb_f32(px);
        [rgb[0] as f64, rgb[1] as f64, rgb[2] as f64]
    });
    let (sem, inst) = match frame.labels.as_ref() {
        Some(l) => (
            (l.class_id[px] != UNKNOWN).then_some(l.class_id[px]),
            (l.instance_id[px] != UNLABELED).then_some(l.instance_id[px]),
        ),
        None => (None, None),
    };
    let feat = feat_target.map(|f| f.to_vec());
    if depth.is_none() && color.is_none() && sem.is_none() && inst.is_none() && feat.is_none() {
        return None;
    }
    // drop rays that never touch the field
    let (lo, hi) = field.bounds();
    ray_box(&origin, &dir, &lo, &hi)?;
    Some(TrainRay {
        origin,
        dir,
        target: RayTarget {
            depth,
            color,
            sem,
            inst,
            feat,
        },
    })
}

#[derive(Debug, Clone)]
pub struct FitOpts {
    pub iters: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub seed: u64,
    pub render: RenderOpts,
    pub weights: LossWeights,
}

impl Default for FitOpts {
    fn default() -> Self {
        Self {
            iters: 2000,
            batch_rays: 256,
            lr: 0.02,
            seed: 0,
            render: RenderOpts::default(),
            weights: LossWeights::default(),
        }
    }
}

/// Adam state over touched parameters only: dense first/second moment
/// buffers, sparse updates.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u32>,
    step: u32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
            step: 0,
            lr,
        }
    }

    fn apply(&mut self, params: &mut [f64], grads: &GradBuffer) {
        self.step += 1;
        for &i in grads.touched() {
            let g = grads.get(i);
            // catch up decay since this parameter was last touched
            let lag = self.step - self.t[i];
            if lag > 1 {
                self.m[i] *= Self::B1.powi(lag as i32 - 1);
                self.v[i] *= Self::B2.powi(lag as i32 - 1);
            }
            self.t[i] = self.step;
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / (1.0 - Self::B1.powi(self.step as i32));
            let vh = self.v[i] / (1.0 - Self::B2.powi(self.step as i32));
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Fit the field to a set of supervised rays by stochastic gradient descent.
/// Returns the per-iteration mean batch loss. Aborts with a divergence error
/// when the loss turns non-finite.
pub fn fit(field: &mut VoxelField, rays: &[TrainRay], opts: &FitOpts) -> Result<Vec<f64>> {
    if rays.is_empty() {
        return Err(Error::Data("no supervised rays to fit".into()));
    }
    let (lo, hi) = field.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf17);
    let mut grads = GradBuffer::new(field.data.len());
    let mut adam = Adam::new(field.data.len(), opts.lr);
    let mut history = Vec::with_capacity(opts.iters);
    for iter in 0..opts.iters {
        // cosine decay keeps the L1 terms from random-walking once converged
        let progress = iter as f64 / opts.iters as f64;
        adam.lr = opts.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        grads.clear();
        let mut batch_loss = 0.0;
        let mut used = 0;
        for _ in 0..opts.batch_rays {
            let ray = &rays[rng.gen_range(0..rays.len())];
            let Some((t0, t1)) = ray_box(&ray.origin, &ray.dir, &lo, &hi) else {
                continue;
            };
            let ts = stratified_ts(t0, t1, opts.render.n_samples, |_| rng.gen_range(0.0..1.0));
            batch_loss += ray_loss(
                field,
                &ray.origin,
                &ray.dir,
                &ts,
                &ray.target,
                &opts.weights,
                &opts.render,
                Some(&mut grads),
            );
            used += 1;
        }
        if used == 0 {
            return Err(Error::Data("no rays intersect the field bounds".into()));
        }
        batch_loss /= used as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at iteration {iter}"
            )));
        }
        // gradient of the batch mean
        grads.scale(1.0 / used as f64);
        adam.apply(&mut field.data, &grads);
        history.push(batch_loss);
        if !field.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite field parameter at iteration {iter}"
            )));
        }
    }
    Ok(history)
}

/// Rendered outputs for a full frame: color, z-depth, argmax semantic and
/// instance labels at deterministic midpoint samples.
pub struct FrameRender {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub labels: LabelImage,
}

pub fn render_frame(field: &VoxelField, frame: &Frame, opts: &RenderOpts) -> FrameRender {
    let (w, h) = (frame.width as usize, frame.height as usize);
    let n = w * h;
    let mut color = vec![0u8; 3 * n];
    let mut depth = vec![0.0f32; n];
    let mut labels = LabelImage::empty(frame.width, frame.height);
    let mut score = vec![0.0f32; n];
    let (lo, hi) = field.bounds();
    let intr = frame.intrinsics;
    let origin = frame.pose.center();
    for px in 0..n {
        let (u, v) = ((px % w) as f64 + 0.5, (px / w) as f64 + 0.5);
        let cam_dir = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
        let stretch = cam_dir.norm();
        let dir = frame.pose.dir_to_world(&cam_dir) / stretch;
        let Some((t0, t1)) = ray_box(&origin, &dir, &lo, &hi) else {
            continue;
        };
        let ts = stratified_ts(t0, t1, opts.n_samples, |_| 0.5);
        let r = render_ray(field, &origin, &dir, &ts, opts);
        for c in 0..3 {
            color[3 * px + c] = (r.color[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        let acc = 1.0 - r.trans_end;
        if acc > 1e-6 {
            depth[px] = (r.depth / acc / stretch) as f32;
        }
        if acc > 0.5 {
            if let Some((slot, &top)) = argmax(&r.sem) {
                // logits are opacity-weighted; renormalize before argmax
                let _ = top;
                labels.class_id[px] = slot as u32;
            }
            if let Some((slot, _)) = argmax(&r.inst) {
                labels.instance_id[px] = slot as u32;
            }
            score[px] = acc as f32;
        }
    }
    labels.score = Some(score);
    FrameRender {
        color: ColorImage {
            width: frame.width,
            height: frame.height,
            data: color,
        },
        depth: DepthImage {
            width: frame.width,
            height: frame.height,
            data: depth,
        },
        labels,
    }
}

fn argmax(v: &[f64]) -> Option<(usize, &f64)> {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
}
