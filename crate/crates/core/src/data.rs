//! Dataset ingestion, normalization, augmentation (QuarterBlack /
//! CenterBlack), complexity injection (label noise, training-fraction
//! subsetting) and segmentation-mask ingestion.
//!
//! Every stochastic operation draws from a SplitMix64 stream derived from
//! `(global_seed, sample_index, op_id)`, so corruption patterns reproduce
//! bit-for-bit. Corruptions are applied to the training split only.

use crate::error::{Error, Result};
use crate::rng::{op_ids, SplitMix64};
use crate::tensor::Tensor;
use serde::Deserialize;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Images as [3,H,W] tensors with pixel values in [0,1] before
/// normalization, plus integer class labels.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Keeps only the given classes and remaps their labels to 0..n in the
    /// order given. Used to split one labeled set into disjoint tasks.
    pub fn take_classes(&self, classes: &[usize]) -> ImageDataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (img, &lab) in self.images.iter().zip(&self.labels) {
            if let Some(new) = classes.iter().position(|&c| c == lab) {
                images.push(img.clone());
                labels.push(new);
            }
        }
        ImageDataset {
            images,
            labels,
            class_names: classes
                .iter()
                .map(|&c| self.class_names[c].clone())
                .collect(),
            split: self.split,
        }
    }
}

// ----------------------------------------------------------------------------
// Loaders
// ----------------------------------------------------------------------------

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// CIFAR-10 binary layout: records of 3073 bytes, one label byte followed by
/// 3072 channel-major pixel bytes (32x32x3).
pub fn load_cifar10_binary(path: &Path) -> Result<ImageDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    const REC: usize = 3073;
    if bytes.len() % REC != 0 {
        return Err(Error::TruncatedFile(format!(
            "{} bytes is not a multiple of {REC}",
            bytes.len()
        )));
    }
    let n = bytes.len() / REC;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(REC) {
        let label = rec[0];
        if label > 9 {
            return Err(Error::LabelOutOfRange(label as u32, 10));
        }
        labels.push(label as usize);
        let data: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, 32, 32], data));
    }
    Ok(ImageDataset {
        images,
        labels,
        class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        split: Split::Train,
    })
}

fn read_be_u32(bytes: &[u8], pos: usize) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile("IDX header".into()))
}

/// IDX image + label pair (MNIST-style). Grayscale pixels are replicated to
/// three channels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let mut ib = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut ib)?;
    let mut lb = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lb)?;

    if read_be_u32(&ib, 0)? != 0x0000_0803 {
        return Err(Error::Format("bad IDX image magic".into()));
    }
    if read_be_u32(&lb, 0)? != 0x0000_0801 {
        return Err(Error::Format("bad IDX label magic".into()));
    }
    let n = read_be_u32(&ib, 4)? as usize;
    let h = read_be_u32(&ib, 8)? as usize;
    let w = read_be_u32(&ib, 12)? as usize;
    if read_be_u32(&lb, 4)? as usize != n {
        return Err(Error::Format("IDX image/label count mismatch".into()));
    }
    if ib.len() != 16 + n * h * w {
        return Err(Error::TruncatedFile(format!(
            "IDX images: expected {} bytes, got {}",
            16 + n * h * w,
            ib.len()
        )));
    }
    if lb.len() != 8 + n {
        return Err(Error::TruncatedFile(format!(
            "IDX labels: expected {} bytes, got {}",
            8 + n,
            lb.len()
        )));
    }
    let k = *lb[8..].iter().max().unwrap_or(&0) as usize + 1;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let raw = &ib[16 + i * h * w..16 + (i + 1) * h * w];
        let gray: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
        images.push(Tensor::new(vec![3, h, w], data));
        labels.push(lb[8 + i] as usize);
    }
    Ok(ImageDataset {
        images,
        labels,
        class_names: (0..k).map(|c| c.to_string()).collect(),
        split: Split::Train,
    })
}

// ----------------------------------------------------------------------------
// Per-image transforms
// ----------------------------------------------------------------------------

/// CIFAR-10 per-channel normalization constants.
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2471, 0.2435, 0.2616];

/// out[c] = (in[c] - mu[c]) / sigma[c].
pub fn normalize(img: &Tensor, mu: &[f64; 3], sigma: &[f64; 3]) -> Result<Tensor> {
    if img.shape.len() != 3 || img.shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "normalize expects [3,H,W], got {:?}",
            img.shape
        )));
    }
    for &s in sigma {
        if s <= 0.0 {
            return Err(Error::ZeroSigma(s));
        }
    }
    let hw = img.shape[1] * img.shape[2];
    let mut data = img.data.clone();
    for c in 0..3 {
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = (*v - mu[c]) / sigma[c];
        }
    }
    Ok(Tensor::new(img.shape.clone(), data))
}

pub fn denormalize(img: &Tensor, mu: &[f64; 3], sigma: &[f64; 3]) -> Result<Tensor> {
    for &s in sigma {
        if s <= 0.0 {
            return Err(Error::ZeroSigma(s));
        }
    }
    let hw = img.shape[1] * img.shape[2];
    let mut data = img.data.clone();
    for c in 0..3 {
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = *v * sigma[c] + mu[c];
        }
    }
    Ok(Tensor::new(img.shape.clone(), data))
}

/// Bilinear resize with half-pixel centers (corner-aligned false).
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c_n, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut out = vec![0.0; c_n * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for c in 0..c_n {
        let plane = &img.data[c * h * w..(c + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v = plane[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + plane[y0 * w + x1] * (1.0 - wy) * wx
                    + plane[y1 * w + x0] * wy * (1.0 - wx)
                    + plane[y1 * w + x1] * wy * wx;
                out[(c * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    Tensor::new(vec![c_n, out_h, out_w], out)
}

/// With probability `prob`, reverses the column order of every row.
pub fn horizontal_flip(img: &Tensor, prob: f64, rng: &mut SplitMix64) -> Tensor {
    if !rng.bernoulli(prob) {
        return img.clone();
    }
    flip_columns(img)
}

fn flip_columns(img: &Tensor) -> Tensor {
    let (c_n, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut data = img.data.clone();
    for c in 0..c_n {
        for y in 0..h {
            let row = &mut data[(c * h + y) * w..(c * h + y + 1) * w];
            row.reverse();
        }
    }
    Tensor::new(img.shape.clone(), data)
}

/// Blacks out one uniformly chosen quadrant; exactly 25% of pixel positions
/// are zeroed in all channels.
pub fn quarter_black(img: &Tensor, rng: &mut SplitMix64) -> Result<Tensor> {
    let (c_n, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    if h % 2 != 0 {
        return Err(Error::OddDimension(h));
    }
    if w % 2 != 0 {
        return Err(Error::OddDimension(w));
    }
    let quadrant = rng.gen_range(4);
    let (y0, x0) = match quadrant {
        0 => (0, 0),
        1 => (0, w / 2),
        2 => (h / 2, 0),
        _ => (h / 2, w / 2),
    };
    let mut data = img.data.clone();
    for c in 0..c_n {
        for y in y0..y0 + h / 2 {
            for x in x0..x0 + w / 2 {
                data[(c * h + y) * w + x] = 0.0;
            }
        }
    }
    Ok(Tensor::new(img.shape.clone(), data))
}

/// Blacks a centered square whose side is drawn uniformly from the integers
/// in [min_side, max_side]; offset is floor((S - x) / 2).
pub fn center_black(
    img: &Tensor,
    min_side: usize,
    max_side: usize,
    rng: &mut SplitMix64,
) -> Result<Tensor> {
    let (c_n, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let s = h.min(w);
    if min_side == 0 || min_side > max_side || max_side > s {
        return Err(Error::InvalidRange(min_side, max_side));
    }
    let x = min_side + rng.gen_range(max_side - min_side + 1);
    let oy = (h - x) / 2;
    let ox = (w - x) / 2;
    let mut data = img.data.clone();
    for c in 0..c_n {
        for y in oy..oy + x {
            for px in ox..ox + x {
                data[(c * h + y) * w + px] = 0.0;
            }
        }
    }
    Ok(Tensor::new(img.shape.clone(), data))
}

// ----------------------------------------------------------------------------
// Dataset-level complexity injection
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    CenterBlack,
    QuarterBlack,
    LabelNoise,
}

/// Which corruption to apply, to what fraction of training samples, with
/// what (CenterBlack) side range.
#[derive(Debug, Clone)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub apply_fraction: f64,
    /// CenterBlack side range; the reference operating point is [200, 224] on
    /// 224-pixel inputs.
    pub side_range: (usize, usize),
    pub seed: u64,
}

/// Reassigns round(fraction * N) labels, chosen without replacement, to a
/// uniformly random *different* class.
pub fn apply_label_noise(
    ds: &ImageDataset,
    fraction: f64,
    seed: u64,
) -> Result<ImageDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidProbability(fraction));
    }
    let k = ds.num_classes();
    if k < 2 {
        return Err(Error::SingleClass);
    }
    let n = ds.len();
    let m = (fraction * n as f64).round() as usize;
    let mut pick = SplitMix64::stream(seed, 0, op_ids::LABEL_NOISE);
    let mut idx: Vec<usize> = (0..n).collect();
    pick.shuffle(&mut idx);
    let mut labels = ds.labels.clone();
    for &i in idx.iter().take(m) {
        let mut r = SplitMix64::stream(seed, i as u64, op_ids::LABEL_NOISE);
        // uniform over the k-1 other classes
        let offset = 1 + r.gen_range(k - 1);
        labels[i] = (ds.labels[i] + offset) % k;
    }
    Ok(ImageDataset {
        images: ds.images.clone(),
        labels,
        class_names: ds.class_names.clone(),
        split: ds.split,
    })
}

/// Stratified subsetting: per class, round(fraction * n_class) samples are
/// retained (chosen without replacement), keeping the original order.
pub fn subset_training_fraction(
    ds: &ImageDataset,
    fraction: f64,
    seed: u64,
) -> Result<ImageDataset> {
    if fraction <= 0.0 || fraction > 1.0 {
        return Err(Error::InvalidProbability(fraction));
    }
    let k = ds.num_classes();
    let mut keep: Vec<usize> = Vec::new();
    for class in 0..k {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let m = (fraction * members.len() as f64).round() as usize;
        if m == 0 {
            return Err(Error::EmptyResult(format!(
                "class {class} rounds to zero samples at fraction {fraction}"
            )));
        }
        let mut shuffled = members.clone();
        let mut rng = SplitMix64::stream(seed, class as u64, op_ids::SUBSET);
        rng.shuffle(&mut shuffled);
        keep.extend(shuffled.into_iter().take(m));
    }
    keep.sort_unstable();
    Ok(ImageDataset {
        images: keep.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: keep.iter().map(|&i| ds.labels[i].clone()).collect(),
        class_names: ds.class_names.clone(),
        split: ds.split,
    })
}

/// Applies a corruption spec to the training split, image corruptions hit a
/// `apply_fraction` of samples chosen by per-sample Bernoulli draws.
pub fn apply_corruption(ds: &ImageDataset, spec: &CorruptionSpec) -> Result<ImageDataset> {
    if ds.split != Split::Train {
        return Err(Error::InvalidMask(
            "corruptions apply to the training split only".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.apply_fraction) {
        return Err(Error::InvalidProbability(spec.apply_fraction));
    }
    match spec.kind {
        CorruptionKind::LabelNoise => apply_label_noise(ds, spec.apply_fraction, spec.seed),
        CorruptionKind::CenterBlack | CorruptionKind::QuarterBlack => {
            let op = if spec.kind == CorruptionKind::CenterBlack {
                op_ids::CENTER_BLACK
            } else {
                op_ids::QUARTER_BLACK
            };
            let mut images = Vec::with_capacity(ds.len());
            for (i, img) in ds.images.iter().enumerate() {
                let mut rng = SplitMix64::stream(spec.seed, i as u64, op);
                if rng.bernoulli(spec.apply_fraction) {
                    let corrupted = match spec.kind {
                        CorruptionKind::CenterBlack => {
                            center_black(img, spec.side_range.0, spec.side_range.1, &mut rng)?
                        }
                        _ => quarter_black(img, &mut rng)?,
                    };
                    images.push(corrupted);
                } else {
                    images.push(img.clone());
                }
            }
            Ok(ImageDataset {
                images,
                labels: ds.labels.clone(),
                class_names: ds.class_names.clone(),
                split: ds.split,
            })
        }
    }
}

// ----------------------------------------------------------------------------
// Segmentation masks (COCO-subset polygon JSON)
// ----------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SegmentationMask {
    pub width: usize,
    pub height: usize,
    /// Row-major foreground flags, width * height entries.
    pub foreground: Vec<bool>,
    pub polygons: Vec<Vec<(f64, f64)>>,
}

impl SegmentationMask {
    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&b| b).count()
    }

    /// Valid for fg/bg analysis only when both regions are non-empty.
    pub fn validate(&self) -> Result<()> {
        let fg = self.foreground_count();
        if fg == 0 {
            return Err(Error::InvalidMask("no foreground pixels".into()));
        }
        if fg == self.foreground.len() {
            return Err(Error::InvalidMask("no background pixels".into()));
        }
        Ok(())
    }

    pub fn from_polygons(
        width: usize,
        height: usize,
        polygons: Vec<Vec<(f64, f64)>>,
    ) -> Result<SegmentationMask> {
        for poly in &polygons {
            if poly.len() < 3 {
                return Err(Error::MalformedPolygon(poly.len()));
            }
        }
        let mut foreground = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if polygons.iter().any(|p| point_in_polygon_evenodd(p, px, py)) {
                    foreground[y * width + x] = true;
                }
            }
        }
        Ok(SegmentationMask {
            width,
            height,
            foreground,
            polygons,
        })
    }
}

/// Even-odd ray-crossing test at a point.
pub fn point_in_polygon_evenodd(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Deserialize)]
struct CocoFile {
    #[allow(dead_code)]
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    #[allow(dead_code)]
    id: u64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    segmentation: Vec<Vec<f64>>,
}

/// Loads and rasterizes the polygon annotations for one image id.
/// Foreground means inside any polygon, by the even-odd rule evaluated at
/// pixel centers.
pub fn load_coco_mask(
    json_path: &Path,
    image_id: u64,
    width: usize,
    height: usize,
) -> Result<SegmentationMask> {
    let text = std::fs::read_to_string(json_path)?;
    let file: CocoFile = serde_json::from_str(&text)?;
    let mut polygons = Vec::new();
    for ann in file.annotations.iter().filter(|a| a.image_id == image_id) {
        for seg in &ann.segmentation {
            if seg.len() < 6 || seg.len() % 2 != 0 {
                return Err(Error::MalformedPolygon(seg.len() / 2));
            }
            polygons.push(seg.chunks_exact(2).map(|c| (c[0], c[1])).collect());
        }
    }
    if polygons.is_empty() {
        return Err(Error::MissingAnnotation(image_id));
    }
    SegmentationMask::from_polygons(width, height, polygons)
}

// ----------------------------------------------------------------------------
// PPM export (visual inspection of corruptions)
// ----------------------------------------------------------------------------

/// Binary PPM (P6), pixels clamped to [0,1] and scaled to bytes.
pub fn write_ppm(img: &Tensor, path: &Path) -> Result<()> {
    if img.shape.len() != 3 || img.shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "write_ppm expects [3,H,W], got {:?}",
            img.shape
        )));
    }
    let (h, w) = (img.shape[1], img.shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ----------------------------------------------------------------------------
// Synthetic image set (procedural textures, used for desk-scale experiments)
// ----------------------------------------------------------------------------

/// Procedural texture classes: each class is an oriented grating with a
/// class-specific color profile, plus per-sample phase jitter and noise.
/// Deterministic in (seed, sample index).
pub fn synthetic_dataset(
    num_classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
    split: Split,
) -> ImageDataset {
    let split_salt = match split {
        Split::Train => 0u64,
        Split::Val => 1_000_000u64,
    };
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for s in 0..per_class {
            let sample_index = split_salt + (class * per_class + s) as u64;
            let mut rng = SplitMix64::stream(seed, sample_index, op_ids::SYNTHETIC);
            images.push(synthetic_image(class, num_classes, side, &mut rng));
            labels.push(class);
        }
    }
    ImageDataset {
        images,
        labels,
        class_names: (0..num_classes).map(|c| format!("texture{c}")).collect(),
        split,
    }
}

fn synthetic_image(class: usize, num_classes: usize, side: usize, rng: &mut SplitMix64) -> Tensor {
    let theta = std::f64::consts::PI * class as f64 / num_classes as f64;
    let freq = 3.0 + (class % 3) as f64 * 1.5;
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    // per-class channel mix, fixed for the class
    let mix = [
        0.5 + 0.5 * ((class * 7 + 1) as f64).sin(),
        0.5 + 0.5 * ((class * 13 + 2) as f64).sin(),
        0.5 + 0.5 * ((class * 29 + 3) as f64).sin(),
    ];
    let mut data = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 * ct + y as f64 * st) / side as f64;
            let wave = (std::f64::consts::TAU * freq * u + phase).sin();
            for c in 0..3 {
                let noise = rng.uniform(-0.08, 0.08);
                let v = 0.5 + 0.35 * wave * mix[c] + noise;
                data[(c * side + y) * side + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, side, side], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join("dtkd_data_test");
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn cifar_loader_roundtrip() {
        // two hand-built records
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(255u8).take(3072));
        bytes.push(7u8);
        bytes.extend(std::iter::repeat(0u8).take(3072));
        let path = tmpdir().join("cifar.bin");
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_binary(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.images[0].data[0], 1.0); // byte 255 -> 1.0
        assert_eq!(ds.images[1].data[0], 0.0);

        // empty file -> empty dataset
        let empty = tmpdir().join("empty.bin");
        std::fs::write(&empty, b"").unwrap();
        assert_eq!(load_cifar10_binary(&empty).unwrap().len(), 0);

        // truncated
        let cut = tmpdir().join("cut.bin");
        std::fs::write(&cut, &bytes[..100]).unwrap();
        assert!(matches!(
            load_cifar10_binary(&cut),
            Err(Error::TruncatedFile(_))
        ));

        // label out of range
        let mut bad = vec![11u8];
        bad.extend(std::iter::repeat(0u8).take(3072));
        let badp = tmpdir().join("bad.bin");
        std::fs::write(&badp, &bad).unwrap();
        assert!(matches!(
            load_cifar10_binary(&badp),
            Err(Error::LabelOutOfRange(11, 10))
        ));
    }

    fn write_idx(images: &[Vec<u8>], labels: &[u8], h: usize, w: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let d = tmpdir();
        let ip = d.join(format!("img_{}.idx", images.len()));
        let lp = d.join(format!("lab_{}.idx", images.len()));
        let mut ib = Vec::new();
        ib.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        ib.extend_from_slice(&(images.len() as u32).to_be_bytes());
        ib.extend_from_slice(&(h as u32).to_be_bytes());
        ib.extend_from_slice(&(w as u32).to_be_bytes());
        for img in images {
            ib.extend_from_slice(img);
        }
        let mut lb = Vec::new();
        lb.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        std::fs::write(&ip, ib).unwrap();
        std::fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_loader() {
        let (ip, lp) = write_idx(&[vec![0, 64, 128, 255]], &[5], 2, 2);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.images[0].shape, vec![3, 2, 2]);
        // equal channels
        let d = &ds.images[0].data;
        assert_eq!(&d[0..4], &d[4..8]);
        assert_eq!(&d[0..4], &d[8..12]);
        assert_eq!(ds.labels[0], 5);

        // 28x28 fixture
        let (ip, lp) = write_idx(&[vec![7u8; 28 * 28]], &[0], 28, 28);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images[0].shape, vec![3, 28, 28]);

        // wrong magic
        let d = tmpdir();
        let badp = d.join("badmagic.idx");
        std::fs::write(&badp, 0x0000_0805u32.to_be_bytes()).unwrap();
        assert!(matches!(load_idx(&badp, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn normalize_cases() {
        let mu = CIFAR10_MEAN;
        let sigma = CIFAR10_STD;
        let mut img = Tensor::zeros(vec![3, 2, 2]);
        for c in 0..3 {
            for i in 0..4 {
                img.data[c * 4 + i] = mu[c];
            }
        }
        let out = normalize(&img, &mu, &sigma).unwrap();
        assert!(out.data.iter().all(|&v| v.abs() < 1e-15));

        // identity with mu=0 sigma=1
        let id = normalize(&img, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(id.data, img.data);

        // normalize then denormalize recovers the input
        let mut rng = SplitMix64::new(3);
        let img = Tensor::uniform_init(vec![3, 4, 4], 0.5, &mut rng);
        let back = denormalize(&normalize(&img, &mu, &sigma).unwrap(), &mu, &sigma).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(matches!(
            normalize(&img, &mu, &[0.1, 0.0, 0.1]),
            Err(Error::ZeroSigma(_))
        ));
    }

    #[test]
    fn bilinear_cases() {
        let mut rng = SplitMix64::new(4);
        let img = Tensor::uniform_init(vec![3, 5, 5], 0.5, &mut rng);
        let same = resize_bilinear(&img, 5, 5);
        for (a, b) in img.data.iter().zip(&same.data) {
            assert!((a - b).abs() < 1e-12);
        }

        let constant = Tensor::filled(vec![3, 3, 3], 0.7);
        let up = resize_bilinear(&constant, 7, 9);
        assert!(up.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // 2x2 checkerboard to 4x4 with half-pixel centers: the four interior
        // samples land at fractional offsets 0.25/0.75 of the source cell
        let cb = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let up = resize_bilinear(&cb, 4, 4);
        for &(y, x, want) in &[
            (1usize, 1usize, 0.375),
            (2, 2, 0.375),
            (1, 2, 0.625),
            (2, 1, 0.625),
        ] {
            assert!(
                (up.data[y * 4 + x] - want).abs() < 1e-12,
                "at ({y},{x}): {}",
                up.data[y * 4 + x]
            );
        }
    }

    #[test]
    fn horizontal_flip_cases() {
        let img = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]);
        let mut rng = SplitMix64::new(1);
        let same = horizontal_flip(&img, 0.0, &mut rng);
        assert_eq!(same.data, img.data);

        let flipped = flip_columns(&img);
        assert_eq!(flipped.data, vec![2.0, 1.0]);
        assert_eq!(flip_columns(&flipped).data, img.data);
    }

    #[test]
    fn quarter_black_properties() {
        let img = Tensor::filled(vec![3, 224, 224], 1.0);
        let mut rng = SplitMix64::new(0);
        let out = quarter_black(&img, &mut rng).unwrap();
        let total: f64 = out.data.iter().sum();
        assert_eq!(total, (3 * 224 * 224 - 3 * 112 * 112) as f64);

        // same seed -> same quadrant
        let mut r1 = SplitMix64::new(123);
        let mut r2 = SplitMix64::new(123);
        let a = quarter_black(&img, &mut r1).unwrap();
        let b = quarter_black(&img, &mut r2).unwrap();
        assert_eq!(a.data, b.data);

        // the four quadrant choices together cover the whole image
        let small = Tensor::filled(vec![1, 4, 4], 1.0);
        let mut covered = vec![false; 16];
        let mut seen = std::collections::HashSet::new();
        let mut seed = 0u64;
        while seen.len() < 4 {
            let mut r = SplitMix64::new(seed);
            let out = quarter_black(&small, &mut r).unwrap();
            let zeros: Vec<usize> = (0..16).filter(|&i| out.data[i] == 0.0).collect();
            if seen.insert(zeros.clone()) {
                for i in zeros {
                    covered[i] = true;
                }
            }
            seed += 1;
        }
        assert!(covered.iter().all(|&b| b));

        let odd = Tensor::filled(vec![1, 3, 3], 1.0);
        let mut r = SplitMix64::new(0);
        assert!(matches!(
            quarter_black(&odd, &mut r),
            Err(Error::OddDimension(3))
        ));
    }

    #[test]
    fn center_black_properties() {
        let img = Tensor::filled(vec![3, 224, 224], 1.0);
        // x = S blacks everything
        let mut rng = SplitMix64::new(0);
        let out = center_black(&img, 224, 224, &mut rng).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));

        // x = 200: rows/cols 12..=211
        let mut rng = SplitMix64::new(0);
        let out = center_black(&img, 200, 200, &mut rng).unwrap();
        for y in 0..224 {
            for x in 0..224 {
                let expect_black = (12..212).contains(&y) && (12..212).contains(&x);
                let v = out.data[y * 224 + x];
                assert_eq!(v == 0.0, expect_black, "pixel ({y},{x})");
            }
        }
        let zeroed = out.data.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeroed, 3 * 200 * 200);

        let mut rng = SplitMix64::new(0);
        assert!(matches!(
            center_black(&img, 100, 300, &mut rng),
            Err(Error::InvalidRange(100, 300))
        ));
    }

    #[test]
    fn label_noise_properties() {
        let ds = synthetic_dataset(4, 25, 8, 1, Split::Train);
        let same = apply_label_noise(&ds, 0.0, 9).unwrap();
        assert_eq!(same.labels, ds.labels);

        let all = apply_label_noise(&ds, 1.0, 9).unwrap();
        assert!(all
            .labels
            .iter()
            .zip(&ds.labels)
            .all(|(a, b)| a != b));

        let half = apply_label_noise(&ds, 0.5, 9).unwrap();
        let changed = half
            .labels
            .iter()
            .zip(&ds.labels)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 50);

        // deterministic under the same seed
        let again = apply_label_noise(&ds, 0.5, 9).unwrap();
        assert_eq!(half.labels, again.labels);
    }

    #[test]
    fn subset_fraction_properties() {
        let ds = synthetic_dataset(10, 50, 8, 2, Split::Train);
        let full = subset_training_fraction(&ds, 1.0, 3).unwrap();
        assert_eq!(full.labels, ds.labels);

        let tenth = subset_training_fraction(&ds, 0.1, 3).unwrap();
        for class in 0..10 {
            let n = tenth.labels.iter().filter(|&&l| l == class).count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn corruption_determinism() {
        let ds = synthetic_dataset(3, 10, 16, 5, Split::Train);
        let spec = CorruptionSpec {
            kind: CorruptionKind::QuarterBlack,
            apply_fraction: 0.5,
            side_range: (0, 0),
            seed: 77,
        };
        let a = apply_corruption(&ds, &spec).unwrap();
        let b = apply_corruption(&ds, &spec).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data, y.data);
        }

        let mut val = ds.clone();
        val.split = Split::Val;
        assert!(apply_corruption(&val, &spec).is_err());
    }

    #[test]
    fn coco_mask_cases() {
        let d = tmpdir();
        // square covering the left half of an 8x6 image
        let json = serde_json::json!({
            "images": [{"id": 1, "width": 8, "height": 6, "file_name": "a.png"}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1,
                 "segmentation": [[0.0,0.0, 4.0,0.0, 4.0,6.0, 0.0,6.0]]}
            ]
        });
        let p = d.join("coco.json");
        std::fs::write(&p, json.to_string()).unwrap();
        let mask = load_coco_mask(&p, 1, 8, 6).unwrap();
        assert_eq!(mask.foreground_count(), 4 * 6);
        mask.validate().unwrap();

        assert!(matches!(
            load_coco_mask(&p, 99, 8, 6),
            Err(Error::MissingAnnotation(99))
        ));

        // full-cover polygon is a degenerate mask for analysis
        let full = SegmentationMask::from_polygons(
            4,
            4,
            vec![vec![(-1.0, -1.0), (5.0, -1.0), (5.0, 5.0), (-1.0, 5.0)]],
        )
        .unwrap();
        assert!(matches!(full.validate(), Err(Error::InvalidMask(_))));

        // triangle (0,0) (4,0) (0,4) on 4x4: compare against brute force
        let tri = vec![(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
        let mask = SegmentationMask::from_polygons(4, 4, vec![tri.clone()]).unwrap();
        let mut brute = 0;
        for y in 0..4 {
            for x in 0..4 {
                // center inside iff strictly below the hypotenuse x + y = 4
                if (x as f64 + 0.5) + (y as f64 + 0.5) < 4.0 {
                    brute += 1;
                }
            }
        }
        assert_eq!(mask.foreground_count(), brute);

        assert!(matches!(
            SegmentationMask::from_polygons(4, 4, vec![vec![(0.0, 0.0), (1.0, 1.0)]]),
            Err(Error::MalformedPolygon(2))
        ));
    }

    #[test]
    fn augmentations_preserve_shape() {
        let mut rng = SplitMix64::new(8);
        let img = Tensor::uniform_init(vec![3, 8, 8], 0.5, &mut rng);
        assert_eq!(quarter_black(&img, &mut rng).unwrap().shape, img.shape);
        assert_eq!(
            center_black(&img, 2, 6, &mut rng).unwrap().shape,
            img.shape
        );
        assert_eq!(horizontal_flip(&img, 1.0, &mut rng).shape, img.shape);
    }

    #[test]
    fn ppm_writer() {
        let img = Tensor::filled(vec![3, 2, 2], 1.0);
        let p = tmpdir().join("img.ppm");
        write_ppm(&img, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
        assert!(bytes[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn synthetic_is_deterministic_and_classes_disjoint() {
        let a = synthetic_dataset(4, 5, 8, 3, Split::Train);
        let b = synthetic_dataset(4, 5, 8, 3, Split::Train);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data, y.data);
        }
        let val = synthetic_dataset(4, 5, 8, 3, Split::Val);
        assert_ne!(a.images[0].data, val.images[0].data);

        let sub = a.take_classes(&[1, 3]);
        assert_eq!(sub.len(), 10);
        assert!(sub.labels.iter().all(|&l| l < 2));
    }
}
