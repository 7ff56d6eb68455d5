//! The assembled recognizer: a region attending network, one or more part
//! sequence stages each looking at the previous stage's attended crop, and
//! a final classifier over the concatenated descriptors.

use crate::config::{Ablation, ModelConfig};
use crate::nn::{Backbone, LinearLayer, LstmCell};
use crate::params::ParamStore;
use crate::psn::{check_seq_len, psn_forward, PartBranch, PsnModel, PsnOutput};
use crate::ran::{crop_and_zoom, locate_region, ran_forward, BBox, RanModel, RanOutput};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, invalid, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BACKBONE_STREAM: u64 = 11;
const LSTM_STREAM: u64 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct ReapsModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ran: RanModel,
    pub psn_stages: Vec<PsnModel>,
    /// Over `concat(A_g, P_g, flatten(P_P))` for every stage.
    pub joint_head: LinearLayer,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<T: Scalar> ReapsModel<T> {
    /// Builds a freshly initialised model. All backbones start from the same
    /// weights; heads start at zero.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let c = config;
        if c.num_classes < 2 {
            return Err(invalid("model", "need at least two classes"));
        }
        if c.hidden == 0 || !c.hidden.is_multiple_of(2) {
            return Err(invalid("model", format!("hidden size {} must be even", c.hidden)));
        }
        if c.stages == 0 || c.channels.is_empty() {
            return Err(invalid("model", "need at least one stage and one conv block"));
        }
        let stride = 1usize << (c.channels.len() - 1);
        for (what, size) in [("image_size", c.image_size), ("crop_size", c.crop_size)] {
            if size % stride != 0 || size < stride {
                return Err(invalid(
                    "model",
                    format!("{what} {size} not divisible by backbone stride {stride}"),
                ));
            }
        }
        let part_branch = c.ablation != Ablation::WoPart;
        if part_branch {
            check_seq_len(c.seq_len, c.crop_size / stride)?;
        }

        let mut params = ParamStore::new();
        let k = c.num_classes;
        let backbone = Backbone::build(&mut params, "ran", 3, &c.channels, &mut rng(seed, BACKBONE_STREAM));
        let feat = backbone.out_channels;
        let head = LinearLayer::zeros(&mut params, "ran.head", feat, k);
        let ran = RanModel {
            backbone,
            head,
            num_classes: k,
            gap_mode: c.gap_mode,
        };
        let mut joint_dim = feat;
        let mut psn_stages = Vec::with_capacity(c.stages);
        for s in 0..c.stages {
            let p = format!("psn{s}");
            let backbone =
                Backbone::build(&mut params, &p, 3, &c.channels, &mut rng(seed, BACKBONE_STREAM));
            let u2 = c.hidden / 2;
            let mut lrng = rng(seed, LSTM_STREAM + s as u64);
            let part = if part_branch {
                Some(PartBranch {
                    lstm_fwd: LstmCell::build(&mut params, &format!("{p}.lstm_fwd"), feat, u2, &mut lrng),
                    lstm_bwd: LstmCell::build(&mut params, &format!("{p}.lstm_bwd"), feat, u2, &mut lrng),
                    part_head: LinearLayer::zeros(
                        &mut params,
                        &format!("{p}.part_head"),
                        c.seq_len * c.hidden,
                        k,
                    ),
                })
            } else {
                None
            };
            let global_head = LinearLayer::zeros(&mut params, &format!("{p}.global_head"), feat, k);
            joint_dim += feat + if part_branch { c.seq_len * c.hidden } else { 0 };
            psn_stages.push(PsnModel {
                backbone,
                part,
                global_head,
                seq_len: c.seq_len,
                hidden: c.hidden,
                gap_mode: c.gap_mode,
            });
        }
        let joint_head = LinearLayer::zeros(&mut params, "joint_head", joint_dim, k);
        Ok(Self {
            config: c.clone(),
            params,
            ran,
            psn_stages,
            joint_head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ReapsModel<U> {
        ReapsModel {
            config: self.config.clone(),
            params: self.params.cast(),
            ran: self.ran.clone(),
            psn_stages: self.psn_stages.clone(),
            joint_head: self.joint_head.clone(),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_head.in_dim
    }

    /// Whether `name` belongs to the region attending network.
    pub fn is_ran_param(name: &str) -> bool {
        name.starts_with("ran.")
    }
}

/// Which class drives each image's attention map.
#[derive(Debug, Clone, Copy)]
pub enum ClassSource<'a> {
    Labels(&'a [usize]),
    Predicted,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub psn: PsnOutput,
    /// Attended boxes in the frame of this stage's input image.
    pub boxes: Vec<BBox>,
    /// The same boxes mapped into original-image pixels.
    pub boxes_in_image: Vec<BBox>,
    /// `[B, 3, crop, crop]` constant.
    pub regions: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub ran: RanOutput,
    pub stages: Vec<StageOutput>,
    /// Detached joint representation `F`, `[B, joint_dim]`.
    pub joint: Var,
    pub final_logits: Var,
}

fn rows<T: Scalar>(t: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    t.index_outer(b)
}

/// `concat(A_g, P_g, flatten(P_P), ...)` along the feature axis, cut off
/// from the graph so the final classifier never trains the trunks.
pub fn joint_representation<T: Scalar>(
    tape: &mut Tape<T>,
    global_ran: Var,
    stages: &[(Var, Option<Var>)],
) -> Result<Var> {
    let batch = tape.shape(global_ran)[0];
    let mut parts = vec![tape.detach(global_ran)];
    for &(pooled, part) in stages {
        parts.push(tape.detach(pooled));
        if let Some(p) = part {
            let n = tape.value(p).numel() / batch;
            let flat = tape.reshape(p, &[batch, n])?;
            parts.push(tape.detach(flat));
        }
    }
    tape.concat(&parts, 1)
}

pub fn final_classify<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ReapsModel<T>,
    joint: Var,
) -> Result<Var> {
    model.joint_head.forward(tape, &model.params, joint)
}

/// Batched forward pass over `images [B, 3, H, W]`.
///
/// `fixed_boxes[stage][b]`, when given, replaces the attention boxes; the
/// gradient checker uses it to hold the discrete crop still.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ReapsModel<T>,
    images: &Tensor<T>,
    classes: ClassSource<'_>,
    tau: f64,
    fixed_boxes: Option<&[Vec<BBox>]>,
) -> Result<ForwardOutput> {
    let s = images.shape().to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(invalid("forward", format!("expected [B, 3, H, W], got {s:?}")));
    }
    let batch = s[0];
    if let ClassSource::Labels(l) = classes {
        if l.len() != batch {
            return Err(invalid("forward", "one label per image required"));
        }
    }
    let store = &model.params;
    let crop = model.config.crop_size;
    let x = tape.constant(images.clone());
    let ran = ran_forward(tape, store, &model.ran, x)?;

    let mut prev_images = images.clone();
    let mut prev_features = tape.value(ran.features).clone();
    let mut prev_head = store.get(model.ran.head.weight).clone();
    let mut prev_logits = tape.value(ran.logits).clone();
    let mut prev_frames: Vec<BBox> = vec![BBox::full(s[2], s[3]); batch];
    let mut stages = Vec::with_capacity(model.psn_stages.len());

    for (si, psn_model) in model.psn_stages.iter().enumerate() {
        let ps = prev_images.shape().to_vec();
        let (ih, iw) = (ps[2], ps[3]);
        let mut regions = Vec::with_capacity(batch);
        let mut boxes = Vec::with_capacity(batch);
        for b in 0..batch {
            let image = rows(&prev_images, b)?;
            let (bbox, region) = if model.config.ablation == Ablation::WoAttend {
                let full = BBox::full(ih, iw);
                (full, crop_and_zoom(&image, &full, (crop, crop))?)
            } else if let Some(fixed) = fixed_boxes {
                let bbox = fixed[si][b];
                (bbox, crop_and_zoom(&image, &bbox, (crop, crop))?)
            } else {
                let class = match classes {
                    ClassSource::Labels(l) => l[b],
                    ClassSource::Predicted => {
                        let k = prev_logits.shape()[1];
                        argmax(&prev_logits.data()[b * k..(b + 1) * k])
                    }
                };
                let feats = rows(&prev_features, b)?;
                let att = locate_region(&image, &feats, &prev_head, class, tau, (crop, crop))?;
                (att.bbox, att.region)
            };
            boxes.push(bbox);
            regions.push(region);
        }
        let region_batch = Tensor::stack(&regions)?;
        let region_var = tape.constant(region_batch.clone());
        let psn = psn_forward(tape, store, psn_model, region_var)?;
        let boxes_in_image: Vec<BBox> = prev_frames
            .iter()
            .zip(&boxes)
            .map(|(frame, b)| frame.compose(b, (ih, iw)))
            .collect();
        prev_frames = boxes_in_image.clone();
        prev_images = region_batch;
        prev_features = tape.value(psn.features).clone();
        prev_head = store.get(psn_model.global_head.weight).clone();
        prev_logits = tape.value(psn.logits_global).clone();
        stages.push(StageOutput {
            psn,
            boxes,
            boxes_in_image,
            regions: region_var,
        });
    }

    let descriptors: Vec<(Var, Option<Var>)> = stages
        .iter()
        .map(|st| (st.psn.pooled, st.psn.parts.map(|p| p.0)))
        .collect();
    let joint = joint_representation(tape, ran.pooled, &descriptors)?;
    let final_logits = final_classify(tape, model, joint)?;
    Ok(ForwardOutput {
        ran,
        stages,
        joint,
        final_logits,
    })
}

/// Per-stage result for a single image at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub bbox: BBox,
    pub bbox_in_image: BBox,
    pub logits_global: Vec<f64>,
    pub logits_part: Option<Vec<f64>>,
}

/// Runs one `[3, H, W]` image through every stage, attending with each
/// stage's predicted class.
pub fn run_stages<T: Scalar>(
    image: &Tensor<T>,
    model: &ReapsModel<T>,
    tau: f64,
) -> Result<(Vec<StageResult>, Vec<f64>)> {
    let s = image.shape();
    let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut tape = Tape::new();
    let out = forward(&mut tape, model, &batch, ClassSource::Predicted, tau, None)?;
    let stages = out
        .stages
        .iter()
        .map(|st| StageResult {
            bbox: st.boxes[0],
            bbox_in_image: st.boxes_in_image[0],
            logits_global: tape.value(st.psn.logits_global).to_f64_vec(),
            logits_part: st.psn.logits_part.map(|v| tape.value(v).to_f64_vec()),
        })
        .collect();
    Ok((stages, tape.value(out.final_logits).to_f64_vec()))
}
