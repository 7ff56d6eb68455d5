//! Directory datasets: `root/<class_name>/<image>.ppm`, plus an optional
//! `manifest.tsv` of ground-truth boxes.

use crate::kernels;
use crate::pnm::{self, RawImage};
use crate::ran::BBox;
use crate::synth::{Dataset, Sample};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: no class directories")]
    Empty(PathBuf),
    #[error("{0}: class directory holds no .ppm images")]
    EmptyClass(PathBuf),
    #[error("{path}: line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `[3, H, W]` floats in `[0, 1]` from 8-bit RGB.
pub fn image_to_tensor(img: &RawImage) -> Tensor<f32> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let src = if img.channels == 3 { (y * w + x) * 3 + c } else { y * w + x };
                data[(c * h + y) * w + x] = img.pixels[src] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("valid shape")
}

pub fn tensor_to_image(t: &Tensor<f32>) -> RawImage {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let mut pixels = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = t.data()[(c * h + y) * w + x];
                pixels[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    RawImage {
        width: w,
        height: h,
        channels: 3,
        pixels,
    }
}

fn resize_to(t: Tensor<f32>, size: usize) -> Tensor<f32> {
    let s = t.shape().to_vec();
    if s[1] == size && s[2] == size {
        return t;
    }
    let data = kernels::bilinear_resize(3, s[1], s[2], size, size, t.data());
    Tensor::new(&[3, size, size], data).expect("valid shape")
}

fn scale_box(b: BBox, from: (usize, usize), size: usize) -> BBox {
    let sx = |v: usize| v * size / from.1;
    let sy = |v: usize| v * size / from.0;
    BBox {
        x0: sx(b.x0),
        y0: sy(b.y0),
        x1: (b.x1 * size).div_ceil(from.1).max(sx(b.x0) + 1),
        y1: (b.y1 * size).div_ceil(from.0).max(sy(b.y0) + 1),
    }
}

fn read_manifest(path: &Path) -> Result<HashMap<String, BBox>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut boxes = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if i == 0 && cols.first() == Some(&"filename") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| DatasetError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if cols.len() != 6 {
            return Err(bad("expected 6 tab-separated columns"));
        }
        let n: Vec<usize> = cols[2..]
            .iter()
            .map(|c| c.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("non-integer box coordinate"))?;
        boxes.insert(
            cols[0].to_string(),
            BBox {
                x0: n[0],
                y0: n[1],
                x1: n[2],
                y1: n[3],
            },
        );
    }
    Ok(boxes)
}

/// Loads every `.ppm` under `root/<class>/`, labelling classes in sorted
/// name order and resizing images to `size x size`.
pub fn load_directory_dataset(root: &Path, size: usize) -> Result<Dataset, DatasetError> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(root)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }
    let manifest_path = root.join("manifest.tsv");
    let manifest = if manifest_path.exists() {
        read_manifest(&manifest_path)?
    } else {
        HashMap::new()
    };
    let mut samples = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(dir.clone()));
        }
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for file in files {
            let raw = pnm::read(&file).map_err(io_err(&file))?;
            let key = format!(
                "{class_name}/{}",
                file.file_name().unwrap_or_default().to_string_lossy()
            );
            let object_box = manifest
                .get(&key)
                .map(|b| scale_box(*b, (raw.height, raw.width), size));
            samples.push(Sample {
                image: resize_to(image_to_tensor(&raw), size),
                label,
                object_box,
                part_centers: Vec::new(),
            });
        }
        names.push(class_name);
    }
    Ok(Dataset {
        samples,
        num_classes: names.len(),
        class_names: names,
    })
}

/// Writes a dataset in the layout [`load_directory_dataset`] reads, with a
/// `manifest.tsv` listing `filename, label, x0, y0, x1, y1`.
pub fn write_dataset(root: &Path, data: &Dataset) -> Result<(), DatasetError> {
    let mut manifest = String::from("filename\tlabel\tx0\ty0\tx1\ty1\n");
    for name in &data.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for (i, s) in data.samples.iter().enumerate() {
        let rel = format!("{}/{i:06}.ppm", data.class_names[s.label]);
        let path = root.join(&rel);
        pnm::write(&path, &tensor_to_image(&s.image)).map_err(io_err(&path))?;
        if let Some(b) = s.object_box {
            manifest.push_str(&format!(
                "{rel}\t{}\t{}\t{}\t{}\t{}\n",
                s.label, b.x0, b.y0, b.x1, b.y1
            ));
        }
    }
    let mpath = root.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))
}
