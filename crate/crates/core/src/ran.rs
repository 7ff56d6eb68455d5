//! Region attending network: backbone + spatial pooling + linear head, and
//! the class-activation attention path that turns its features into a crop.
//!
//! The attention path (CAM onward) works on plain tensors outside the tape,
//! so nothing downstream of the crop can push gradient back into this net.

use crate::kernels;
use crate::nn::{Backbone, LinearLayer};
use crate::params::ParamStore;
use crate::pnm::{self, RawImage};
use crate::scalar::Scalar;
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::{argmax, invalid, Result, Tensor, TensorError};
use std::collections::VecDeque;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RanModel {
    pub backbone: Backbone,
    /// `W[k, c]`, shape `[C', K]`.
    pub head: LinearLayer,
    pub num_classes: usize,
    pub gap_mode: PoolMode,
}

#[derive(Debug, Clone, Copy)]
pub struct RanOutput {
    /// `[B, C', Hf, Wf]`
    pub features: Var,
    /// `A_g`, `[B, C']`
    pub pooled: Var,
    /// `[B, K]`
    pub logits: Var,
}

/// Runs a batch `[B, 3, H, W]` through the network.
pub fn ran_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    model: &RanModel,
    images: Var,
) -> Result<RanOutput> {
    let features = model.backbone.forward(tape, store, images)?;
    let pooled = tape.global_pool(features, model.gap_mode)?;
    let logits = model.head.forward(tape, store, pooled)?;
    Ok(RanOutput {
        features,
        pooled,
        logits,
    })
}

/// Class activation map on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap<T> {
    /// `[Hf, Wf]`
    pub values: Tensor<T>,
    pub class_index: usize,
    /// `(H, W)` of the image the features came from.
    pub source_shape: (usize, usize),
}

impl<T: Scalar> CamMap<T> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// `cam[x, y] = sum_k head_weight[k, c] * features[k, x, y]`.
pub fn compute_cam<T: Scalar>(
    features: &Tensor<T>,
    head_weight: &Tensor<T>,
    class_index: usize,
    source_shape: (usize, usize),
) -> Result<CamMap<T>> {
    let fs = features.shape();
    let ws = head_weight.shape();
    if fs.len() != 3 || ws.len() != 2 || fs[0] != ws[0] {
        return Err(TensorError::ShapeMismatch {
            op: "compute_cam",
            left: fs.to_vec(),
            right: ws.to_vec(),
        });
    }
    let (channels, hf, wf, k) = (fs[0], fs[1], fs[2], ws[1]);
    if class_index >= k {
        return Err(TensorError::LabelOutOfRange {
            label: class_index,
            classes: k,
        });
    }
    let area = hf * wf;
    let mut acc = vec![0f64; area];
    for ch in 0..channels {
        let w = head_weight.data()[ch * k + class_index].to_f64();
        for (a, v) in acc.iter_mut().zip(&features.data()[ch * area..(ch + 1) * area]) {
            *a += w * v.to_f64();
        }
    }
    let values = Tensor::new(&[hf, wf], acc.into_iter().map(T::from_f64).collect())?;
    Ok(CamMap {
        values,
        class_index,
        source_shape,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub bits: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub tau: f64,
}

impl BinaryMask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Min-max normalises the CAM to `[0, 1]` and keeps cells `>= tau`.
/// A flat CAM selects every cell.
pub fn threshold_mask<T: Scalar>(cam: &CamMap<T>, tau: f64) -> BinaryMask {
    let vals = cam.values.to_f64_vec();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bits = if max > min {
        vals.iter().map(|v| (v - min) / (max - min) >= tau).collect()
    } else {
        vec![true; vals.len()]
    };
    BinaryMask {
        bits,
        height: cam.height(),
        width: cam.width(),
        tau,
    }
}

/// Axis-aligned box in input pixels, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_valid_within(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = (ix * iy) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Maps a box given in a `from`-sized frame into a `to`-sized frame that
    /// spans `self`.
    pub fn compose(&self, inner: &BBox, from: (usize, usize)) -> BBox {
        let sy = self.height() as f64 / from.0 as f64;
        let sx = self.width() as f64 / from.1 as f64;
        let y0 = self.y0 + (inner.y0 as f64 * sy).floor() as usize;
        let x0 = self.x0 + (inner.x0 as f64 * sx).floor() as usize;
        let y1 = (self.y0 + (inner.y1 as f64 * sy).ceil() as usize).clamp(y0 + 1, self.y1);
        let x1 = (self.x0 + (inner.x1 as f64 * sx).ceil() as usize).clamp(x0 + 1, self.x1);
        BBox { x0, y0, x1, y1 }
    }
}

/// Tight box of the largest 4-connected component, scaled from the mask
/// grid to `input_shape = (H, W)` with outward rounding. Ties go to the
/// component met first in row-major scan order; an empty mask yields the
/// full image.
pub fn largest_component_bbox(mask: &BinaryMask, input_shape: (usize, usize)) -> BBox {
    let (hf, wf) = (mask.height, mask.width);
    let (h, w) = input_shape;
    let mut seen = vec![false; hf * wf];
    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    let mut queue = VecDeque::new();
    for start in 0..hf * wf {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut count = 0;
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(cell) = queue.pop_front() {
            count += 1;
            let (y, x) = (cell / wf, cell % wf);
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y + 1);
            x1 = x1.max(x + 1);
            let mut visit = |n: usize| {
                if mask.bits[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if y > 0 {
                visit(cell - wf);
            }
            if y + 1 < hf {
                visit(cell + wf);
            }
            if x > 0 {
                visit(cell - 1);
            }
            if x + 1 < wf {
                visit(cell + 1);
            }
        }
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, (y0, x0, y1, x1)));
        }
    }
    match best {
        None => BBox::full(h, w),
        Some((_, (y0, x0, y1, x1))) => BBox {
            x0: x0 * w / wf,
            y0: y0 * h / hf,
            x1: (x1 * w).div_ceil(wf).min(w),
            y1: (y1 * h).div_ceil(hf).min(h),
        },
    }
}

/// Cuts `bbox` out of `[C, H, W]` and resizes it bilinearly to `out`.
pub fn crop_and_zoom<T: Scalar>(
    image: &Tensor<T>,
    bbox: &BBox,
    out: (usize, usize),
) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(invalid("crop_and_zoom", format!("need [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if !bbox.is_valid_within(h, w) {
        return Err(invalid(
            "crop_and_zoom",
            format!("box {bbox:?} outside {h}x{w} image"),
        ));
    }
    if out.0 == 0 || out.1 == 0 {
        return Err(invalid("crop_and_zoom", "output size must be positive"));
    }
    let (bh, bw) = (bbox.height(), bbox.width());
    let mut crop = Vec::with_capacity(c * bh * bw);
    for ch in 0..c {
        for y in bbox.y0..bbox.y1 {
            let row = (ch * h + y) * w;
            crop.extend_from_slice(&image.data()[row + bbox.x0..row + bbox.x1]);
        }
    }
    let data = kernels::bilinear_resize(c, bh, bw, out.0, out.1, &crop);
    Tensor::new(&[c, out.0, out.1], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassChoice {
    /// Ground-truth label; used while training.
    Label(usize),
    /// Arg-max of the logits; used at inference.
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub region: Tensor<T>,
    pub bbox: BBox,
    pub cam: CamMap<T>,
    pub mask: BinaryMask,
}

/// CAM, threshold, box and crop for one image given its detached features.
pub fn locate_region<T: Scalar>(
    image: &Tensor<T>,
    features: &Tensor<T>,
    head_weight: &Tensor<T>,
    class_index: usize,
    tau: f64,
    out: (usize, usize),
) -> Result<Attention<T>> {
    let s = image.shape();
    let source = (s[1], s[2]);
    let cam = compute_cam(features, head_weight, class_index, source)?;
    let mask = threshold_mask(&cam, tau);
    let bbox = largest_component_bbox(&mask, source);
    let region = crop_and_zoom(image, &bbox, out)?;
    Ok(Attention {
        region,
        bbox,
        cam,
        mask,
    })
}

/// Full attention path for a single `[3, H, W]` image.
pub fn attend<T: Scalar>(
    image: &Tensor<T>,
    store: &ParamStore<T>,
    model: &RanModel,
    class_choice: ClassChoice,
    tau: f64,
    out: (usize, usize),
) -> Result<(Attention<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let batch = image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?;
    let x = tape.constant(batch);
    let ran = ran_forward(&mut tape, store, model, x)?;
    let logits = tape.value(ran.logits).clone().reshape(&[model.num_classes])?;
    let class_index = match class_choice {
        ClassChoice::Label(c) => c,
        ClassChoice::Predicted => argmax(logits.data()),
    };
    let fs = tape.shape(ran.features).to_vec();
    let features = tape.value(ran.features).clone().reshape(&fs[1..])?;
    let head_weight = store.get(model.head.weight);
    let att = locate_region(image, &features, head_weight, class_index, tau, out)?;
    Ok((att, logits))
}

fn to_gray(values: &[f64]) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| {
            if max > min {
                (255.0 * (v - min) / (max - min)).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Writes `<name>_cam.pgm`, `<name>_mask.pgm` and `<name>.bbox` into `dir`.
pub fn export_attention<T: Scalar>(
    dir: &Path,
    name: &str,
    cam: &CamMap<T>,
    mask: &BinaryMask,
    bbox: &BBox,
) -> io::Result<()> {
    pnm::write(
        &dir.join(format!("{name}_cam.pgm")),
        &RawImage {
            width: cam.width(),
            height: cam.height(),
            channels: 1,
            pixels: to_gray(&cam.values.to_f64_vec()),
        },
    )?;
    pnm::write(
        &dir.join(format!("{name}_mask.pgm")),
        &RawImage {
            width: mask.width,
            height: mask.height,
            channels: 1,
            pixels: mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        },
    )?;
    std::fs::write(
        dir.join(format!("{name}.bbox")),
        format!("{} {} {} {}\n", bbox.x0, bbox.y0, bbox.x1, bbox.y1),
    )
}

/// Parses a `.bbox` sidecar.
pub fn read_bbox(path: &Path) -> io::Result<BBox> {
    let text = std::fs::read_to_string(path)?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
    match nums[..] {
        [x0, y0, x1, y1] => Ok(BBox { x0, y0, x1, y1 }),
        _ => Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: expected four coordinates", path.display()),
        )),
    }
}
