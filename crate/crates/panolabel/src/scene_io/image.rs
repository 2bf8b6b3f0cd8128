use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::{Error, Result, UNKNOWN, UNLABELED};

/// Per-pixel instance/class labels. 0 is the UNLABELED/UNKNOWN sentinel;
/// valid ids start at 1. Stuff pixels carry a class with instance 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub instance_id: Vec<u32>,
    pub class_id: Vec<u32>,
    pub score: Option<Vec<f32>>,
}

impl LabelImage {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            instance_id: vec![UNLABELED; n],
            class_id: vec![UNKNOWN; n],
            score: None,
        }
    }

    pub fn len(&self) -> usize {
        self.instance_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_id.is_empty()
    }

    /// Pixel indices of each distinct instance id, in id order.
    pub fn instance_masks(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (px, &id) in self.instance_id.iter().enumerate() {
            if id != UNLABELED {
                m.entry(id).or_default().push(px);
            }
        }
        m
    }

    /// Majority class of an instance's pixels (first on count tie).
    pub fn instance_class(&self, id: u32) -> u32 {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (px, &iid) in self.instance_id.iter().enumerate() {
            if iid == id {
                *counts.entry(self.class_id[px]).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .max_by_key(|&(cid, n)| (n, std::cmp::Reverse(cid)))
            .map(|(cid, _)| cid)
            .unwrap_or(UNKNOWN)
    }
}

/// `.lbl` layered label image: magic "PLBL", u32 version=1, u32 width, u32
/// height, u32 layer_count; per layer u32 instance_id, u32 class_id, f32
/// score, then width*height u8 mask (row-major, 1 = inside). Overlaps
/// resolve to the highest-score layer, ties to the lower instance id.
pub fn load_label_image(path: &Path) -> Result<LabelImage> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    let magic = r.take(4)?;
    if magic != b"PLBL" {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::Format(format!(
            "{}: unsupported .lbl version {version}",
            path.display()
        )));
    }
    let width = r.u32()?;
    let height = r.u32()?;
    let layer_count = r.u32()?;
    let n = width as usize * height as usize;

    let mut out = LabelImage::empty(width, height);
    let mut score = vec![0.0f32; n];
    for li in 0..layer_count {
        let inst = r.u32()?;
        let class = r.u32()?;
        let s = r.f32()?;
        if !s.is_finite() {
            return Err(Error::Format(format!(
                "{}: layer {li} has non-finite score",
                path.display()
            )));
        }
        if inst != UNLABELED && class == UNKNOWN {
            return Err(Error::Format(format!(
                "{}: layer {li} has instance {inst} with UNKNOWN class",
                path.display()
            )));
        }
        let mask = r.take(n)?;
        for (px, &m) in mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let labeled = out.class_id[px] != UNKNOWN || out.instance_id[px] != UNLABELED;
            let take = if !labeled {
                true
            } else if s > score[px] {
                true
            } else {
                s == score[px] && inst < out.instance_id[px]
            };
            if take {
                out.instance_id[px] = inst;
                out.class_id[px] = class;
                score[px] = s;
            }
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            r.remaining()
        )));
    }
    out.score = Some(score);
    Ok(out)
}

/// Writes one layer per distinct (instance, class, score) pixel group, in
/// sorted order, so that save ∘ load is exact on the integer payloads.
pub fn save_label_image(path: &Path, img: &LabelImage) -> Result<()> {
    let n = img.width as usize * img.height as usize;
    if img.instance_id.len() != n || img.class_id.len() != n {
        return Err(Error::Arity(format!(
            "label payload {} != {}x{}",
            img.instance_id.len(),
            img.width,
            img.height
        )));
    }
    let mut groups: BTreeMap<(u32, u32, u32), Vec<usize>> = BTreeMap::new();
    for px in 0..n {
        let inst = img.instance_id[px];
        let class = img.class_id[px];
        if inst == UNLABELED && class == UNKNOWN {
            continue;
        }
        let s = img.score.as_ref().map(|s| s[px]).unwrap_or(1.0);
        groups.entry((inst, class, s.to_bits())).or_default().push(px);
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"PLBL");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&img.width.to_le_bytes());
    out.extend_from_slice(&img.height.to_le_bytes());
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for ((inst, class, sbits), pixels) in groups {
        out.extend_from_slice(&inst.to_le_bytes());
        out.extend_from_slice(&class.to_le_bytes());
        out.extend_from_slice(&sbits.to_le_bytes());
        let mut mask = vec![0u8; n];
        for px in pixels {
            mask[px] = 1;
        }
        out.extend_from_slice(&mask);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Dense per-pixel feature vectors, row-major, constant dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: u32,
    pub height: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn pixel(&self, px: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.data[px * d..(px + 1) * d]
    }
}

/// `.fmap`: magic "PFMP", u32 width, u32 height, u32 dim, then
/// width*height*dim f32 row-major.
pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4)? != b"PFMP" {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let width = r.u32()?;
    let height = r.u32()?;
    let dim = r.u32()?;
    let n = width as usize * height as usize * dim as usize;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "{}: non-finite feature value",
                path.display()
            )));
        }
        data.push(v);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            r.remaining()
        )));
    }
    Ok(FeatureMap {
        width,
        height,
        dim,
        data,
    })
}

pub fn save_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    let n = fm.width as usize * fm.height as usize * fm.dim as usize;
    if fm.data.len() != n {
        return Err(Error::Arity(format!(
            "feature payload {} != {}x{}x{}",
            fm.data.len(),
            fm.width,
            fm.height,
            fm.dim
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * n);
    out.extend_from_slice(b"PFMP");
    out.extend_from_slice(&fm.width.to_le_bytes());
    out.extend_from_slice(&fm.height.to_le_bytes());
    out.extend_from_slice(&fm.dim.to_le_bytes());
    for v in &fm.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-pixel depth in meters, 0 = invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

/// 16-bit binary PGM, millimeters, 0 = invalid. Samples are MSB-first per
/// the Netpbm convention.
pub fn load_depth_pgm(path: &Path) -> Result<DepthImage> {
    let bytes = std::fs::read(path)?;
    let (width, height, maxval, data_off) = parse_pnm_header(&bytes, b"P5", path)?;
    if maxval != 65535 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PGM, maxval {maxval}",
            path.display()
        )));
    }
    let n = width as usize * height as usize;
    if bytes.len() - data_off != 2 * n {
        return Err(Error::Format(format!(
            "{}: payload {} bytes, expected {}",
            path.display(),
            bytes.len() - data_off,
            2 * n
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let mm = u16::from_be_bytes([bytes[data_off + 2 * i], bytes[data_off + 2 * i + 1]]);
        data.push(mm as f32 / 1000.0);
    }
    Ok(DepthImage {
        width,
        height,
        data,
    })
}

pub fn save_depth_pgm(path: &Path, img: &DepthImage) -> Result<()> {
    let n = img.width as usize * img.height as usize;
    if img.data.len() != n {
        return Err(Error::Arity("depth payload size mismatch".into()));
    }
    let mut out = Vec::with_capacity(32 + 2 * n);
    write!(out, "P5\n{} {}\n65535\n", img.width, img.height)?;
    for &m in &img.data {
        let mm = (m * 1000.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// 8-bit RGB image (PPM P6 on disk).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>, // rgb triplets, row-major
}

impl ColorImage {
    pub fn rgb_f32(&self, px: usize) -> [f32; 3] {
        [
            self.data[3 * px] as f32 / 255.0,
            self.data[3 * px + 1] as f32 / 255.0,
            self.data[3 * px + 2] as f32 / 255.0,
        ]
    }
}

pub fn load_ppm(path: &Path) -> Result<ColorImage> {
    let bytes = std::fs::read(path)?;
    let (width, height, maxval, data_off) = parse_pnm_header(&bytes, b"P6", path)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "{}: expected 8-bit PPM",
            path.display()
        )));
    }
    let n = 3 * width as usize * height as usize;
    if bytes.len() - data_off != n {
        return Err(Error::Format(format!("{}: bad PPM payload", path.display())));
    }
    Ok(ColorImage {
        width,
        height,
        data: bytes[data_off..].to_vec(),
    })
}

pub fn save_ppm(path: &Path, img: &ColorImage) -> Result<()> {
    let n = 3 * img.width as usize * img.height as usize;
    if img.data.len() != n {
        return Err(Error::Arity("color payload size mismatch".into()));
    }
    let mut out = Vec::with_capacity(32 + n);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.extend_from_slice(&img.data);
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8], path: &Path) -> Result<(u32, u32, u32, usize)> {
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(Error::Format(format!("{}: bad PNM magic", path.display())));
    }
    let mut fields = Vec::new();
    let mut i = 2;
    while fields.len() < 3 && i < bytes.len() {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            break;
        }
        let v: u32 = std::str::from_utf8(&bytes[start..i])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad PNM header", path.display())))?;
        fields.push(v);
    }
    if fields.len() != 3 || i >= bytes.len() {
        return Err(Error::Format(format!(
            "{}: truncated PNM header",
            path.display()
        )));
    }
    // single whitespace byte after maxval
    i += 1;
    Ok((fields[0], fields[1], fields[2], i))
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            off: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Parse {
                msg: format!("truncated ({} bytes needed)", n),
                offset: format!("{} byte {}", self.path.display(), self.off),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.off
    }
}
