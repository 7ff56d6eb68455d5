//! Deterministic fine-grained toy dataset.
//!
//! Every object is a horizontal body bar with a row of glyph parts on top,
//! left to right. Classes share a base template and differ in one or two
//! part attributes (glyph shape, stripes, size). Objects land at random
//! positions and scales on a noisy background with low-contrast grey
//! clutter; a part is occasionally occluded.

use crate::par;
use crate::ran::BBox;
use crate::tensor::{invalid, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub parts_min: usize,
    pub parts_max: usize,
    /// Part attributes changed per class relative to the base template.
    pub subtlety: usize,
    /// Mean number of clutter glyphs per image.
    pub clutter: usize,
    /// Probability that one part is not drawn.
    pub occlusion: f64,
    pub orientation: Orientation,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            image_size: 64,
            parts_min: 3,
            parts_max: 5,
            subtlety: 1,
            clutter: 12,
            occlusion: 0.1,
            orientation: Orientation::Horizontal,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(invalid("synth", m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.image_size < 32 {
            return fail(format!("image size {} below 32", self.image_size));
        }
        if self.parts_min == 0 || self.parts_min > self.parts_max {
            return fail(format!("bad part range {}..={}", self.parts_min, self.parts_max));
        }
        // widest object: parts_max slots of at least 8 px each
        if self.parts_max * 8 > self.image_size - 4 {
            return fail(format!(
                "{} parts do not fit a {} px image",
                self.parts_max, self.image_size
            ));
        }
        if self.subtlety == 0 || self.subtlety > 2 {
            return fail(format!("subtlety must be 1 or 2, got {}", self.subtlety));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return fail(format!("occlusion probability {} outside [0, 1]", self.occlusion));
        }
        if self.train_per_class == 0 {
            return fail("train_per_class must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Square,
    Disk,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

const GLYPHS: [Glyph; 6] = [
    Glyph::Square,
    Glyph::Disk,
    Glyph::Triangle,
    Glyph::Cross,
    Glyph::Diamond,
    Glyph::Ring,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartAttrs {
    pub glyph: Glyph,
    pub striped: bool,
    pub large: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTemplate {
    pub parts: Vec<PartAttrs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub object_box: Option<BBox>,
    /// Centres of the drawn parts, left to right (top to bottom when
    /// vertical).
    pub part_centers: Vec<(f64, f64)>,
}

pub type SynthSample = Sample;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples, keeping class metadata.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TEMPLATE_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 1 << 32;
const TEST_STREAM: u64 = 2 << 32;

fn mutate(attrs: &mut PartAttrs, rng: &mut impl Rng) {
    match rng.gen_range(0..3) {
        0 => {
            let others: Vec<Glyph> = GLYPHS.iter().copied().filter(|g| *g != attrs.glyph).collect();
            attrs.glyph = *others.choose(rng).expect("non-empty");
        }
        1 => attrs.striped = !attrs.striped,
        _ => attrs.large = !attrs.large,
    }
}

/// Base template plus one distinct mutation set per class.
pub fn class_templates(spec: &SynthSpec) -> Result<Vec<ClassTemplate>> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, TEMPLATE_STREAM);
    let n = rng.gen_range(spec.parts_min..=spec.parts_max);
    let base = ClassTemplate {
        parts: (0..n)
            .map(|_| PartAttrs {
                glyph: *GLYPHS.choose(&mut rng).expect("non-empty"),
                striped: rng.gen_bool(0.3),
                large: rng.gen_bool(0.5),
            })
            .collect(),
    };
    let mut classes: Vec<ClassTemplate> = Vec::with_capacity(spec.num_classes);
    let mut attempts = 0;
    while classes.len() < spec.num_classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(invalid(
                "synth",
                format!("cannot derive {} distinct classes from {n} parts", spec.num_classes),
            ));
        }
        let mut t = base.clone();
        let mut touched = Vec::new();
        while touched.len() < spec.subtlety {
            let j = rng.gen_range(0..n);
            if !touched.contains(&j) || n < spec.subtlety {
                touched.push(j);
                mutate(&mut t.parts[j], &mut rng);
            }
        }
        if t != base && !classes.contains(&t) {
            classes.push(t);
        }
    }
    Ok(classes)
}

struct Canvas {
    size: usize,
    pixels: Vec<f32>,
    bounds: Option<(usize, usize, usize, usize)>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, rgb: [f64; 3], object: bool) {
        let s = self.size;
        for (c, v) in rgb.iter().enumerate() {
            self.pixels[(c * s + y) * s + x] = v.clamp(0.0, 1.0) as f32;
        }
        if object {
            let b = self.bounds.get_or_insert((x, y, x + 1, y + 1));
            *b = (b.0.min(x), b.1.min(y), b.2.max(x + 1), b.3.max(y + 1));
        }
    }

    /// Rasterises a glyph centred at `(cx, cy)` with half-size `r`.
    #[allow(clippy::too_many_arguments)]
    fn glyph(
        &mut self,
        glyph: Glyph,
        cx: f64,
        cy: f64,
        r: f64,
        rgb: [f64; 3],
        striped: bool,
        object: bool,
    ) {
        let s = self.size as f64;
        let (xa, xb) = ((cx - r).floor().max(0.0), (cx + r).ceil().min(s));
        let (ya, yb) = ((cy - r).floor().max(0.0), (cy + r).ceil().min(s));
        for y in ya as usize..yb as usize {
            for x in xa as usize..xb as usize {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let inside = match glyph {
                    Glyph::Square => dx.abs() <= r && dy.abs() <= r,
                    Glyph::Disk => dx * dx + dy * dy <= r * r,
                    Glyph::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                    Glyph::Cross => {
                        dx.abs() <= r && dy.abs() <= r && (dx.abs() <= r / 3.0 || dy.abs() <= r / 3.0)
                    }
                    Glyph::Diamond => dx.abs() + dy.abs() <= r,
                    Glyph::Ring => {
                        let d2 = dx * dx + dy * dy;
                        d2 <= r * r && d2 >= 0.3 * r * r
                    }
                };
                if inside {
                    let band = ((dy + r) / 2.0).floor() as i64 % 2 == 1;
                    let c = if striped && band {
                        [rgb[0] * 0.35, rgb[1] * 0.35, rgb[2] * 0.35]
                    } else {
                        rgb
                    };
                    self.put(x, y, c, object);
                }
            }
        }
    }
}

const BODY_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.55, 0.90],
    [0.25, 0.75, 0.30],
    [0.80, 0.35, 0.80],
];
const PART_COLOR: [f64; 3] = [0.95, 0.95, 0.95];

/// Renders one sample of class `label`.
pub fn render_sample(
    spec: &SynthSpec,
    template: &ClassTemplate,
    label: usize,
    rng: &mut impl Rng,
) -> Sample {
    let size = spec.image_size;
    let sf = size as f64;
    let mut canvas = Canvas {
        size,
        pixels: vec![0.0; 3 * size * size],
        bounds: None,
    };
    let base = rng.gen_range(0.12..0.32);
    let tint: [f64; 3] = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), 0.0];
    for y in 0..size {
        for x in 0..size {
            let grad = 0.06 * (y as f64 / sf - 0.5);
            let noise = rng.gen_range(-0.04..0.04);
            let v = base + grad + noise;
            canvas.put(x, y, [v + tint[0], v + tint[1], v + tint[2]], false);
        }
    }
    let clutter = rng.gen_range(spec.clutter / 2..=spec.clutter + spec.clutter / 2);
    for _ in 0..clutter {
        let g = GLYPHS[rng.gen_range(0..3)];
        let grey = base + rng.gen_range(-0.14..0.14);
        let (cx, cy) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
        let r = rng.gen_range(1.5..3.5);
        canvas.glyph(g, cx, cy, r, [grey, grey, grey], false, false);
    }

    let n = template.parts.len();
    let width = rng.gen_range(0.55..0.8) * sf;
    let slot = (width / n as f64).max(8.0);
    let width = slot * n as f64;
    let body_h = rng.gen_range(0.9..1.3) * slot;
    let part_r = 0.48 * slot;
    let height = body_h + 2.0 * part_r;
    let x0 = rng.gen_range(1.0..(sf - width - 1.0).max(1.5));
    let y0 = rng.gen_range(1.0..(sf - height - 1.0).max(1.5));
    let body = BODY_COLORS[rng.gen_range(0..BODY_COLORS.len())];
    let body_top = y0 + 2.0 * part_r * 0.75;
    for y in body_top.floor() as usize..((body_top + body_h).ceil() as usize).min(size) {
        for x in x0.floor() as usize..((x0 + width).ceil() as usize).min(size) {
            canvas.put(x, y, body, true);
        }
    }
    let occluded = if rng.gen_bool(spec.occlusion) {
        Some(rng.gen_range(0..n))
    } else {
        None
    };
    let mut centers = Vec::with_capacity(n);
    for (j, attrs) in template.parts.iter().enumerate() {
        if Some(j) == occluded {
            continue;
        }
        let r = if attrs.large { part_r } else { part_r * 0.62 };
        let cx = x0 + slot * (j as f64 + 0.5);
        let cy = body_top - r * 0.35;
        canvas.glyph(attrs.glyph, cx, cy, r, PART_COLOR, attrs.striped, true);
        centers.push((cx, cy));
    }
    let (bx0, by0, bx1, by1) = canvas.bounds.expect("object drawn");
    let mut object_box = BBox {
        x0: bx0,
        y0: by0,
        x1: bx1,
        y1: by1,
    };
    let mut pixels = canvas.pixels;
    if spec.orientation == Orientation::Vertical {
        let mut t = vec![0.0; pixels.len()];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    t[(c * size + x) * size + y] = pixels[(c * size + y) * size + x];
                }
            }
        }
        pixels = t;
        object_box = BBox {
            x0: by0,
            y0: bx0,
            x1: by1,
            y1: bx1,
        };
        centers = centers.into_iter().map(|(x, y)| (y, x)).collect();
    }
    Sample {
        image: Tensor::new(&[3, size, size], pixels).expect("valid shape"),
        label,
        object_box: Some(object_box),
        part_centers: centers,
    }
}

fn render_split(spec: &SynthSpec, templates: &[ClassTemplate], per_class: usize, stream: u64) -> Vec<Sample> {
    let k = spec.num_classes;
    par::map_range(per_class * k, |i| {
        let label = i % k;
        let mut rng = rng_for(spec.seed, stream + i as u64);
        render_sample(spec, &templates[label], label, &mut rng)
    })
}

/// `(train, test)`; sample `i` of a split has label `i % K` and draws its
/// randomness from a stream keyed by `(seed, split, i)`.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    let templates = class_templates(spec)?;
    let names: Vec<String> = (0..spec.num_classes).map(|c| format!("class{c:03}")).collect();
    let wrap = |samples| Dataset {
        samples,
        num_classes: spec.num_classes,
        class_names: names.clone(),
    };
    let train = render_split(spec, &templates, spec.train_per_class, TRAIN_STREAM);
    let test = render_split(spec, &templates, spec.test_per_class, TEST_STREAM);
    Ok((wrap(train), wrap(test)))
}

/// Shuffled minibatches of `0..len`; the order is a pure function of
/// `(seed, epoch)` and the last partial batch is kept.
pub fn iterate_batches(len: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = rng_for(seed ^ 0x5eed_ba7c, epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
