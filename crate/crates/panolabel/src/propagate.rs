//! Label propagation: high-dimensional per-pixel features are reduced with
//! PCA, optionally concatenated with a positional encoding of the
//! back-projected 3D point, and fed to a small softmax classifier trained on
//! the labeled pixels. Prediction fills *only* unknown pixels; known labels
//! are never rewritten.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene_io::{FeatureMap, Frame, LabelImage};
use crate::{Error, Result, UNKNOWN};

pub const PCA_DIM: usize = 64;
/// sin/cos frequency bands per spatial axis → 4 * 2 * 3 = 24 extra inputs.
pub const POS_BANDS: usize = 4;
pub const POS_ENC_DIM: usize = POS_BANDS * 2 * 3;

const PCA_TOL: f64 = 1e-7;
const PCA_MAX_ITERS: usize = 1000;

/// A fitted linear projection: centered data times orthonormal components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca {
    pub in_dim: usize,
    pub mean: Vec<f64>,
    /// Row-major, `out_dim` rows of length `in_dim`. Rank-deficient inputs
    /// leave trailing rows zero.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Arity(format!(
                "expected {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let centered: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .map(|(&v, &m)| v as f64 - m)
            .collect();
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// PCA by power iteration with deflation on the covariance matrix.
/// `data` is a flat row-major sample buffer.
pub fn fit_pca(data: &[f32], in_dim: usize, out_dim: usize) -> Result<Pca> {
    if in_dim == 0 || data.len() % in_dim != 0 || data.is_empty() {
        return Err(Error::Data(format!(
            "feature buffer of {} values is not a multiple of dim {in_dim}",
            data.len()
        )));
    }
    let n = data.len() / in_dim;
    let mut mean = vec![0.0f64; in_dim];
    for row in data.chunks_exact(in_dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // covariance, in_dim x in_dim
    let mut cov = DMatrix::<f64>::zeros(in_dim, in_dim);
    for row in data.chunks_exact(in_dim) {
        for i in 0..in_dim {
            let di = row[i] as f64 - mean[i];
            for j in i..in_dim {
                cov[(i, j)] += di * (row[j] as f64 - mean[j]);
            }
        }
    }
    for i in 0..in_dim {
        for j in i..in_dim {
            cov[(i, j)] /= n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }

    let trace: f64 = (0..in_dim).map(|i| cov[(i, i)]).sum();
    let floor = 1e-12 * trace.max(1e-30);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    let mut rank = out_dim;
    for k in 0..out_dim {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9ca0 + k as u64);
        let mut v: Vec<f64> = (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERS {
            let mut next = vec![0.0f64; in_dim];
            for i in 0..in_dim {
                let mut s = 0.0;
                for j in 0..in_dim {
                    s += cov[(i, j)] * v[j];
                }
                next[i] = s;
            }
            // keep the iterate in the orthogonal complement of the accepted
            // components: deflation alone leaves O(tol) contamination
            for prev in &components {
                let proj = dot(&next, prev.as_slice());
                for (n, p) in next.iter_mut().zip(prev.iter()) {
                    *n -= proj * p;
                }
            }
            let new_lambda = dot(&next, &v);
            let norm = normalize(&mut next);
            if norm <= floor {
                lambda = 0.0;
                break;
            }
            v = next;
            if (new_lambda - lambda).abs() <= PCA_TOL * new_lambda.abs().max(1.0) {
                lambda = new_lambda;
                break;
            }
            lambda = new_lambda;
        }
        if lambda <= floor {
            rank = k;
            break;
        }
        // sign convention: largest-magnitude entry positive
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if v[lead] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        // deflate
        for i in 0..in_dim {
            for j in 0..in_dim {
                cov[(i, j)] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda);
        components.push(v);
    }
    if rank < out_dim {
        log::warn!(
            "feature covariance rank {rank} < requested {out_dim}; zero-padding remaining components"
        );
        while components.len() < out_dim {
            components.push(vec![0.0; in_dim]);
            eigenvalues.push(0.0);
        }
    }
    Ok(Pca {
        in_dim,
        mean,
        components,
        eigenvalues,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Sin/cos positional encoding of a 3D point at `POS_BANDS` octave
/// frequencies.
pub fn positional_encoding(p: &[f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(POS_ENC_DIM);
    for band in 0..POS_BANDS {
        let f = std::f64::consts::PI * (1u64 << band) as f64;
        for &x in p {
            out.push((f * x).sin());
            out.push((f * x).cos());
        }
    }
    out
}

/// Back-project pixel `px` of a frame to a world point, if depth is present
/// and valid.
pub fn backproject(frame: &Frame, px: usize) -> Option<[f64; 3]> {
    let depth = frame.depth.as_ref()?;
    let z = depth.data[px] as f64;
    if !(z > 0.0) || !z.is_finite() {
        return None;
    }
    let (w, intr) = (frame.width as usize, frame.intrinsics);
    let (u, v) = ((px % w) as f64 + 0.5, (px / w) as f64 + 0.5);
    let cam = nalgebra::Point3::new((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z);
    let world = frame.pose.camera_to_world(&cam);
    Some([world.x, world.y, world.z])
}

/// Softmax classifier with an optional single tanh hidden layer. Depth 0 is
/// plain multinomial logistic regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub in_dim: usize,
    pub hidden: usize,
    /// Output index → class id.
    pub class_ids: Vec<u32>,
    /// w1: hidden x in (or classes x in when hidden == 0), row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// w2: classes x hidden; empty when hidden == 0.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Classifier {
    fn init(in_dim: usize, hidden: usize, class_ids: Vec<u32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5);
        let k = class_ids.len();
        let (r1, r2) = if hidden == 0 {
            (k * in_dim, 0)
        } else {
            (hidden * in_dim, k * hidden)
        };
        let scale1 = (1.0 / in_dim as f64).sqrt();
        let scale2 = if hidden > 0 { (1.0 / hidden as f64).sqrt() } else { 0.0 };
        Self {
            in_dim,
            hidden,
            w1: (0..r1).map(|_| rng.gen_range(-scale1..scale1)).collect(),
            b1: vec![0.0; if hidden == 0 { k } else { hidden }],
            w2: (0..r2).map(|_| rng.gen_range(-scale2..scale2)).collect(),
            b2: if hidden == 0 { Vec::new() } else { vec![0.0; k] },
            class_ids,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Raw logits plus (when hidden) the pre-activation hidden state reused
    /// by the backward pass.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.n_classes();
        if self.hidden == 0 {
            let logits = (0..k)
                .map(|c| dot(&self.w1[c * self.in_dim..(c + 1) * self.in_dim], x) + self.b1[c])
                .collect();
            (logits, Vec::new())
        } else {
            let h: Vec<f64> = (0..self.hidden)
                .map(|j| {
                    (dot(&self.w1[j * self.in_dim..(j + 1) * self.in_dim], x) + self.b1[j]).tanh()
                })
                .collect();
            let logits = (0..k)
                .map(|c| dot(&self.w2[c * self.hidden..(c + 1) * self.hidden], &h) + self.b2[c])
                .collect();
            (logits, h)
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Arity(format!(
                "expected {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(self.forward(x).0)
    }

    /// Argmax class id with its softmax confidence.
    pub fn predict(&self, x: &[f64]) -> Result<(u32, f64)> {
        let logits = self.logits(x)?;
        let probs = softmax(&logits);
        let (best, &p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        Ok((self.class_ids[best], p))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// 0 = logistic regression; otherwise hidden layer width.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch: 4096,
            epochs: 50,
            hidden: 0,
            seed: 0,
        }
    }
}

struct Grads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Mean cross-entropy over a batch plus parameter gradients. `targets` holds
/// output indices (not class ids).
fn loss_and_grads(clf: &Classifier, xs: &[&[f64]], targets: &[usize]) -> (f64, Grads) {
    let k = clf.n_classes();
    let mut g = Grads {
        w1: vec![0.0; clf.w1.len()],
        b1: vec![0.0; clf.b1.len()],
        w2: vec![0.0; clf.w2.len()],
        b2: vec![0.0; clf.b2.len()],
    };
    let mut loss = 0.0;
    let inv_n = 1.0 / xs.len() as f64;
    for (x, &t) in xs.iter().zip(targets) {
        let (logits, h) = clf.forward(x);
        let probs = softmax(&logits);
        loss -= probs[t].max(1e-300).ln() * inv_n;
        // dL/dlogit_c = (p_c - [c == t]) / n
        let dlogit: Vec<f64> = (0..k)
            .map(|c| (probs[c] - if c == t { 1.0 } else { 0.0 }) * inv_n)
            .collect();
        if clf.hidden == 0 {
            for c in 0..k {
                g.b1[c] += dlogit[c];
                for (gw, &xi) in g.w1[c * clf.in_dim..(c + 1) * clf.in_dim]
                    .iter_mut()
                    .zip(*x)
                {
                    *gw += dlogit[c] * xi;
                }
            }
        } else {
            let mut dh = vec![0.0f64; clf.hidden];
            for c in 0..k {
                g.b2[c] += dlogit[c];
                for j in 0..clf.hidden {
                    g.w2[c * clf.hidden + j] += dlogit[c] * h[j];
                    dh[j] += dlogit[c] * clf.w2[c * clf.hidden + j];
                }
            }
            for j in 0..clf.hidden {
                let dpre = dh[j] * (1.0 - h[j] * h[j]);
                g.b1[j] += dpre;
                for (gw, &xi) in g.w1[j * clf.in_dim..(j + 1) * clf.in_dim]
                    .iter_mut()
                    .zip(*x)
                {
                    *gw += dpre * xi;
                }
            }
        }
    }
    (loss, g)
}

/// Mini-batch gradient descent on masked cross-entropy. Returns the trained
/// classifier and the full-dataset loss after each epoch (entry 0 is the
/// pre-training loss).
pub fn train_classifier(
    xs: &[Vec<f64>],
    labels: &[u32],
    opts: &TrainOpts,
) -> Result<(Classifier, Vec<f64>)> {
    if xs.len() != labels.len() || xs.is_empty() {
        return Err(Error::Data(format!(
            "{} samples vs {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let in_dim = xs[0].len();
    if xs.iter().any(|x| x.len() != in_dim) {
        return Err(Error::Arity(format!(
            "inconsistent sample widths: expected {in_dim}"
        )));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &y in labels {
        if y == UNKNOWN {
            return Err(Error::Data("unknown class in training labels".into()));
        }
        *counts.entry(y).or_default() += 1;
    }
    let class_ids: Vec<u32> = counts.keys().copied().collect();
    if class_ids.len() < 2 {
        return Err(Error::Data("need at least two labeled classes".into()));
    }
    let index_of: BTreeMap<u32, usize> = class_ids
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let targets: Vec<usize> = labels.iter().map(|y| index_of[y]).collect();

    let mut clf = Classifier::init(in_dim, opts.hidden, class_ids, opts.seed);
    let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let mut history = vec![loss_and_grads(&clf, &refs, &targets).0];

    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5f3759);
    for _epoch in 0..opts.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(opts.batch.max(1)) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let bt: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (_, g) = loss_and_grads(&clf, &bx, &bt);
            step(&mut clf.w1, &g.w1, opts.lr);
            step(&mut clf.b1, &g.b1, opts.lr);
            step(&mut clf.w2, &g.w2, opts.lr);
            step(&mut clf.b2, &g.b2, opts.lr);
        }
        history.push(loss_and_grads(&clf, &refs, &targets).0);
    }
    Ok((clf, history))
}

fn step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Classifier input for one pixel: projected features, plus positional
/// encoding when the frame has valid depth there.
pub fn encode_pixel(
    pca: &Pca,
    frame: &Frame,
    features: &FeatureMap,
    px: usize,
    with_position: bool,
) -> Result<Vec<f64>> {
    let mut x = pca.project(features.pixel(px))?;
    if with_position {
        if let Some(p) = backproject(frame, px) {
            x.extend(positional_encoding(&p));
        } else {
            x.extend(std::iter::repeat(0.0).take(POS_ENC_DIM));
        }
    }
    Ok(x)
}

/// Fill unknown class labels from the classifier; known labels are left
/// untouched. Confidence is written to the score channel of filled pixels.
/// Returns the number of filled pixels.
pub fn propagate(
    labels: &mut LabelImage,
    frame: &Frame,
    features: &FeatureMap,
    pca: &Pca,
    clf: &Classifier,
    with_position: bool,
) -> Result<usize> {
    if features.width != labels.width || features.height != labels.height {
        return Err(Error::Data("feature map / label image size mismatch".into()));
    }
    let want = pca.out_dim() + if with_position { POS_ENC_DIM } else { 0 };
    if clf.in_dim != want {
        return Err(Error::Arity(format!(
            "classifier expects {} inputs, encoding provides {want}",
            clf.in_dim
        )));
    }
    let mut filled = 0;
    if labels.score.is_none() {
        labels.score = Some(vec![0.0; labels.len()]);
    }
    for px in 0..labels.len() {
        if labels.class_id[px] != UNKNOWN {
            continue;
        }
        let x = encode_pixel(pca, frame, features, px, with_position)?;
        let (class, conf) = clf.predict(&x)?;
        labels.class_id[px] = class;
        labels.score.as_mut().unwrap()[px] = conf as f32;
        filled += 1;
    }
    Ok(filled)
}
