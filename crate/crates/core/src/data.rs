//! Datasets: the two-folder PNG layout, bilinear preprocessing, a seeded
//! synthetic stand-in, and stratified k-fold planning.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UNINFECTED: usize = 0;
pub const PARASITIZED: usize = 1;
pub const CLASS_DIRS: [&str; 2] = ["Uninfected", "Parasitized"];

/// Default side length of synthetic images.
pub const SYNTH_SIZE: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, h, w)`, RGB in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub source: String,
    /// `(1, 1, h, w)` indicator of stained regions, known only for synthetic samples.
    pub mask: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub uninfected: usize,
    pub parasitized: usize,
    pub skipped: Vec<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub report: LoadReport,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn find_class_dir(root: &Path, expected: &'static str) -> Result<PathBuf> {
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir()
            && entry
                .file_name()
                .to_string_lossy()
                .eq_ignore_ascii_case(expected)
        {
            return Ok(entry.path());
        }
    }
    Err(Error::MissingClassDir {
        root: root.to_path_buf(),
        expected,
    })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.to_string_lossy().eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn tensor_to_image(t: &Tensor) -> RgbImage {
    let [_, _, h, w] = t.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (t.at([0, c, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Reads `Parasitized/` and `Uninfected/` (any letter case) under `root`.
/// Undecodable files are skipped and listed in the report. When `resize` is
/// given each image is preprocessed while loading.
pub fn load_dataset_with(root: &Path, resize: Option<usize>) -> Result<Dataset> {
    let mut jobs = Vec::new();
    for (label, name) in CLASS_DIRS.iter().enumerate() {
        let dir = find_class_dir(root, name)?;
        jobs.extend(png_files(&dir)?.into_iter().map(|p| (p, label)));
    }
    jobs.sort();
    let decoded: Vec<(PathBuf, usize, Option<Tensor>)> = jobs
        .into_par_iter()
        .map(|(path, label)| {
            let t = image::open(&path).ok().map(|img| {
                let t = image_to_tensor(&img.to_rgb8());
                match resize {
                    Some(s) => preprocess(&t, s),
                    None => t,
                }
            });
            (path, label, t)
        })
        .collect();
    let mut report = LoadReport::default();
    let mut samples = Vec::with_capacity(decoded.len());
    for (path, label, image) in decoded {
        match image {
            Some(image) => {
                if label == PARASITIZED {
                    report.parasitized += 1;
                } else {
                    report.uninfected += 1;
                }
                samples.push(Sample {
                    image,
                    label,
                    source: path.to_string_lossy().into_owned(),
                    mask: None,
                });
            }
            None => {
                log::warn!("skipping undecodable image {}", path.display());
                report.skipped.push(path);
            }
        }
    }
    Ok(Dataset { samples, report })
}

/// Decodes one image file as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(image_to_tensor(&image::open(path)?.to_rgb8()))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_with(root, None)
}

/// Bilinear resize of every plane of `(n, c, h, w)` to `target × target`
/// using half-pixel centres and edge clamping. Convex weights keep values
/// inside the input range.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = input.shape();
    if (h, w) == (out_h, out_w) {
        return input.clone();
    }
    let axis = |o: usize, out: usize, len: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, out_h, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, out_w, w)).collect();
    Tensor::from_fn([n, c, out_h, out_w], |[b, ch, y, x]| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let p = |yy, xx| input.at([b, ch, yy, xx]);
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Resizes an image tensor to the square model input.
pub fn preprocess(image: &Tensor, target: usize) -> Tensor {
    resize_bilinear(image, target, target)
}

/// Per-channel standardization fitted on training images only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Standardizer {
    pub fn fit(images: &[&Tensor]) -> Result<Self> {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for t in images {
            let [_, c, h, w] = t.shape();
            if c != 3 {
                return Err(Error::dim(
                    "standardize",
                    "channels",
                    format!("expected 3, got {c}"),
                ));
            }
            for ch in 0..3 {
                for &v in t.plane(0, ch) {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::Contract(
                "cannot fit standardization on no pixels".into(),
            ));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        Tensor::from_fn(t.shape(), |i| (t.at(i) - self.mean[i[1]]) / self.std[i[1]])
    }
}

/// Geometry and colours of the synthetic cell images.
pub mod synth {
    pub const BACKGROUND: [f64; 3] = [0.08, 0.06, 0.07];
    pub const DISC: [f64; 3] = [0.86, 0.70, 0.74];
    pub const BLOB: [f64; 3] = [0.36, 0.14, 0.46];
    pub const NOISE: f64 = 0.03;
    pub const DISC_RADIUS: (f64, f64) = (0.32, 0.42);
    pub const BLOB_RADIUS: (f64, f64) = (0.08, 0.13);
    pub const MAX_BLOBS: usize = 3;
}

fn synth_sample(index: usize, label: usize, size: usize, rng: &mut ChaCha8Rng) -> Sample {
    let s = size as f64;
    let cx = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let cy = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let r = rng.gen_range(synth::DISC_RADIUS.0..synth::DISC_RADIUS.1) * s;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.04..0.04));
    let mut blobs = Vec::new();
    if label == PARASITIZED {
        for _ in 0..rng.gen_range(1..=synth::MAX_BLOBS) {
            let br = rng.gen_range(synth::BLOB_RADIUS.0..synth::BLOB_RADIUS.1) * s;
            let reach = (r - br).max(0.0) * 0.8;
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = reach * rng.gen::<f64>().sqrt();
            blobs.push((cx + dist * angle.cos(), cy + dist * angle.sin(), br));
        }
    }
    let mut image = Tensor::zeros([1, 3, size, size]);
    let mut mask = Tensor::zeros([1, 1, size, size]);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_disc = (px - cx).hypot(py - cy) <= r;
            let in_blob = in_disc
                && blobs
                    .iter()
                    .any(|&(bx, by, br)| (px - bx).hypot(py - by) <= br);
            let base = if in_blob {
                synth::BLOB
            } else if in_disc {
                synth::DISC
            } else {
                synth::BACKGROUND
            };
            for c in 0..3 {
                let tinted = if in_disc { base[c] + tint[c] } else { base[c] };
                let v = tinted + rng.gen_range(-1.0..1.0) * synth::NOISE;
                image.set([0, c, y, x], v.clamp(0.0, 1.0));
            }
            if in_blob {
                mask.set([0, 0, y, x], 1.0);
            }
        }
    }
    Sample {
        image,
        label,
        source: format!("synth_{index:05}"),
        mask: Some(mask),
    }
}

/// `n` synthetic samples of side `size`, alternating labels 0, 1, 0, ….
/// Parasitized samples carry one to three dark stained blobs inside a pale
/// cell disc; uninfected samples show a clean disc.
pub fn synth_dataset_sized(n: usize, seed: u64, size: usize) -> Result<Vec<Sample>> {
    if !n.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "synthetic dataset size must be even, got {n}"
        )));
    }
    if size < 8 {
        return Err(Error::Contract(format!(
            "synthetic image side must be at least 8, got {size}"
        )));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_sample(i, i % 2, size, &mut rng)
        })
        .collect())
}

pub fn synth_dataset(n: usize, seed: u64) -> Result<Vec<Sample>> {
    synth_dataset_sized(n, seed, SYNTH_SIZE)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub width: usize,
    pub height: usize,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes samples as PNGs in the loader's layout plus `manifest.csv`.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<Vec<ManifestRow>> {
    for name in CLASS_DIRS {
        fs::create_dir_all(root.join(name))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = Path::new(CLASS_DIRS[s.label]).join(format!("{}.png", s.source));
        tensor_to_image(&s.image).save(root.join(&rel))?;
        let [_, _, h, w] = s.image.shape();
        rows.push(ManifestRow {
            path: rel.to_string_lossy().into_owned(),
            label: s.label,
            width: w,
            height: h,
        });
    }
    write_manifest(&root.join("manifest.csv"), &rows)?;
    Ok(rows)
}

/// Fold index of every sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// Held-out indices of fold `i`, ascending.
    pub fn fold(&self, i: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&j| self.assignments[j] == i)
            .collect()
    }

    /// Indices of every fold except `i`, ascending.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&j| self.assignments[j] != i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Stratified split: each class is shuffled, the classes are concatenated
/// and the result is dealt round-robin, so both fold sizes and per-class
/// counts differ by at most one between folds.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Contract(format!("k must be at least 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds dataset size {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(labels.len());
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut assignments = vec![0; labels.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

/// Stacks preprocessed images into one `(n, 3, size, size)` batch.
pub fn batch_images(samples: &[&Sample], size: usize) -> Result<Tensor> {
    let planes: Vec<Tensor> = samples.iter().map(|s| preprocess(&s.image, size)).collect();
    Tensor::stack(&planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_upsample_matches_hand_values() {
        let t = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = resize_bilinear(&t, 4, 4);
        // source coordinates per output index: 0, 0.25, 0.75, 1 (clamped)
        let row0 = [0.0, 0.25, 0.75, 1.0];
        for (x, want) in row0.iter().enumerate() {
            assert!((r.at([0, 0, 0, x]) - want).abs() < 1e-15);
        }
        let want_11 = 0.75 * (0.75 * 0.0 + 0.25 * 1.0) + 0.25 * (0.75 * 1.0 + 0.25 * 0.0);
        assert!((r.at([0, 0, 1, 1]) - want_11).abs() < 1e-15);
    }

    #[test]
    fn fold_sizes_eleven_into_five() {
        let labels: Vec<usize> = (0..11).map(|i| i % 2).collect();
        let plan = kfold_split(&labels, 5, 0).unwrap();
        let mut sizes = plan.sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn odd_synth_size_is_rejected() {
        assert!(matches!(synth_dataset(3, 0), Err(Error::Contract(_))));
    }
}
