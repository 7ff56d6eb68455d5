//! The gradient-check suite run by `reaps gradcheck` and the test targets.

use crate::config::{FinalHeadMode, ModelConfig, TrainConfig};
use crate::gradcheck::{gradcheck, gradcheck_params, random_projection, random_tensor, GradcheckReport};
use crate::model::ReapsModel;
use crate::nn::LstmCell;
use crate::params::{ParamId, ParamStore};
use crate::psn::{bilstm_map, serialize_features, PartBranch};
use crate::nn::LinearLayer;
use crate::ran::BBox;
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::{Result, Tensor};
use crate::train::forward_train_with;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const GRAPH_TOL: f64 = 1e-3;
pub const EPS: f64 = 1e-6;
/// Larger step for the whole model, whose loss is big enough that a 1e-6
/// step leaves differences near rounding noise.
pub const GRAPH_EPS: f64 = 1e-5;

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn unary(name: &str, shape: &[usize], seed: u64, op: Unary) -> Result<GradcheckReport> {
    let x = random_tensor(shape, seed, 1.0);
    gradcheck(
        name,
        |t, v| {
            let y = op(t, v[0])?;
            random_projection(t, y, seed + 1000)
        },
        &[x],
        EPS,
        PRIMITIVE_TOL,
    )
}

fn binary(
    name: &str,
    shapes: [&[usize]; 2],
    seed: u64,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let a = random_tensor(shapes[0], seed, 1.0);
    let b = random_tensor(shapes[1], seed + 1, 1.0);
    gradcheck(
        name,
        |t, v| {
            let y = op(t, v[0], v[1])?;
            random_projection(t, y, seed + 1000)
        },
        &[a, b],
        EPS,
        PRIMITIVE_TOL,
    )
}

fn conv(name: &str, input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize, seed: u64) -> Result<GradcheckReport> {
    let x = random_tensor(&input, seed, 1.0);
    let w = random_tensor(&kernel, seed + 1, 1.0);
    let b = random_tensor(&[kernel[0]], seed + 2, 1.0);
    gradcheck(
        name,
        move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            random_projection(t, y, seed + 1000)
        },
        &[x, w, b],
        EPS,
        PRIMITIVE_TOL,
    )
}

fn lstm_store(input_dim: usize, hidden: usize, seed: u64) -> (ParamStore<f64>, LstmCell, LstmCell) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = LstmCell::build(&mut store, "f", input_dim, hidden, &mut rng);
    let b = LstmCell::build(&mut store, "b", input_dim, hidden, &mut rng);
    for id in [f.bias, b.bias] {
        *store.get_mut(id) = random_tensor(&[4 * hidden], seed + id.index() as u64, 0.5).with_grad();
    }
    (store, f, b)
}

fn all_ids(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.ids().collect()
}

/// Four unrolled LSTM steps from zero state, with respect to the weights.
pub fn lstm_unrolled_check(steps: usize) -> Result<GradcheckReport> {
    let (store, cell, _) = lstm_store(3, 2, 31);
    let xs: Vec<Tensor<f64>> = (0..steps).map(|s| random_tensor(&[2, 3], 40 + s as u64, 1.0)).collect();
    let ids = [cell.w_input, cell.w_hidden, cell.bias];
    gradcheck_params(
        &format!("lstm_{steps}_steps"),
        |t, s| {
            let mut h = t.constant(Tensor::zeros(&[2, 2]));
            let mut c = t.constant(Tensor::zeros(&[2, 2]));
            for x in &xs {
                let xv = t.constant(x.clone());
                (h, c) = cell.step(t, s, xv, h, c)?;
            }
            let hc = t.concat(&[h, c], 1)?;
            random_projection(t, hc, 77)
        },
        &store,
        &ids,
        EPS,
        PRIMITIVE_TOL,
    )
}

/// Every differentiable primitive and the composite part-sequence path.
/// `inject_fault` appends a deliberately wrong backward rule, which must be
/// reported as a failure.
pub fn primitive_suite(inject_fault: bool) -> Result<Vec<GradcheckReport>> {
    let mut r = vec![
        conv("conv2d_s1_p1", [2, 3, 5, 6], [4, 3, 3, 3], 1, 1, 1)?,
        conv("conv2d_s2_p0", [1, 2, 7, 7], [3, 2, 3, 3], 2, 0, 2)?,
        conv("conv2d_1x1", [2, 4, 3, 3], [2, 4, 1, 1], 1, 0, 3)?,
        unary("relu", &[2, 3, 4, 4], 4, |t, x| Ok(t.relu(x)))?,
        unary("max_pool2d", &[2, 3, 6, 6], 5, |t, x| t.max_pool2d(x, 2, 2))?,
        unary("global_pool_sum", &[2, 3, 4, 5], 6, |t, x| t.global_pool(x, PoolMode::Sum))?,
        unary("global_pool_mean", &[2, 3, 4, 5], 7, |t, x| t.global_pool(x, PoolMode::Mean))?,
        unary("avg_pool_rect", &[2, 3, 4, 8], 8, |t, x| t.avg_pool_rect(x, 4, 2))?,
        binary("linear_no_bias", [&[3, 5], &[5, 4]], 9, |t, x, w| t.linear(x, w, None))?,
    ];
    let x = random_tensor(&[3, 5], 10, 1.0);
    let w = random_tensor(&[5, 4], 11, 1.0);
    let b = random_tensor(&[4], 12, 1.0);
    r.push(gradcheck(
        "linear",
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            random_projection(t, y, 13)
        },
        &[x, w, b],
        EPS,
        PRIMITIVE_TOL,
    )?);
    r.push(binary("add", [&[3, 4], &[3, 4]], 14, |t, a, b| t.add(a, b))?);
    r.push(binary("mul", [&[3, 4], &[3, 4]], 15, |t, a, b| t.mul(a, b))?);
    r.push(unary("scale", &[3, 4], 16, |t, x| Ok(t.scale(x, -2.5)))?);
    r.push(unary("sigmoid", &[3, 4], 17, |t, x| Ok(t.sigmoid(x)))?);
    r.push(unary("tanh", &[3, 4], 18, |t, x| Ok(t.tanh(x)))?);
    let logits = random_tensor(&[4, 5], 19, 2.0);
    r.push(gradcheck(
        "softmax_cross_entropy",
        |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]),
        &[logits],
        EPS,
        PRIMITIVE_TOL,
    )?);
    r.push(unary("bilinear_up", &[1, 2, 3, 4], 20, |t, x| t.bilinear_resize(x, 7, 9))?);
    r.push(unary("bilinear_down", &[1, 2, 8, 6], 21, |t, x| t.bilinear_resize(x, 3, 5))?);
    r.push(unary("reshape", &[2, 3, 4], 22, |t, x| t.reshape(x, &[6, 4]))?);
    r.push(unary("transpose_last2", &[2, 3, 4], 23, |t, x| t.transpose_last2(x))?);
    r.push(unary("narrow", &[3, 6], 24, |t, x| t.narrow(x, 1, 2, 3))?);
    r.push(binary("concat", [&[2, 3], &[2, 4]], 25, |t, a, b| t.concat(&[a, b], 1))?);
    r.push(unary("serialize_features", &[2, 3, 2, 8], 26, |t, x| {
        Ok(serialize_features(t, x, 4)?.0)
    })?);
    r.push(lstm_unrolled_check(4)?);

    let (mut store, f, b) = lstm_store(3, 2, 27);
    let head = LinearLayer::zeros(&mut store, "head", 8, 2);
    let branch = PartBranch {
        lstm_fwd: f,
        lstm_bwd: b,
        part_head: head,
    };
    let seq = random_tensor(&[2, 2, 3], 28, 1.0);
    let ids = all_ids(&store);
    r.push(gradcheck_params(
        "bilstm_map",
        |t, s| {
            let y = t.constant(seq.clone());
            let p = bilstm_map(t, s, &branch, crate::psn::PartSequence(y))?;
            random_projection(t, p.0, 29)
        },
        &store,
        &ids,
        EPS,
        PRIMITIVE_TOL,
    )?);

    if inject_fault {
        let x = random_tensor(&[5], 30, 1.0);
        r.push(gradcheck(
            "injected_fault",
            |t, v| {
                let y = t.custom(
                    v[0],
                    |x| x.iter().map(|a| a * a).collect(),
                    Box::new(|x, _, g| x.iter().zip(g).map(|(a, g)| a * g).collect()),
                )?;
                Ok(t.sum(y))
            },
            &[x],
            EPS,
            PRIMITIVE_TOL,
        )?);
    }
    Ok(r)
}

/// A two-stage model small enough for element-wise finite differences.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        crop_size: 16,
        channels: vec![4, 4],
        seq_len: 4,
        hidden: 4,
        num_classes: 3,
        stages: 2,
        ..ModelConfig::default()
    }
}

/// Model with every parameter, heads included, set to small random values.
pub fn randomized_tiny_model(seed: u64) -> Result<ReapsModel<f64>> {
    let mut model = ReapsModel::<f64>::new(&tiny_model_config(), seed)?;
    for id in all_ids(&model.params) {
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = random_tensor(&shape, seed * 1000 + id.index() as u64, 0.4).with_grad();
    }
    Ok(model)
}

/// End-to-end checks on the tiny model with the attention boxes held fixed:
/// the weighted branch objective against every parameter, and the final
/// classification loss against the final head.
pub fn model_suite() -> Result<Vec<GradcheckReport>> {
    let model = randomized_tiny_model(3)?;
    let images = random_tensor(&[2, 3, 16, 16], 90, 1.0);
    let labels = [2usize, 0];
    let boxes = vec![
        vec![BBox { x0: 2, y0: 3, x1: 14, y1: 12 }, BBox { x0: 0, y0: 0, x1: 9, y1: 16 }],
        vec![BBox { x0: 1, y0: 1, x1: 15, y1: 13 }, BBox { x0: 4, y0: 2, x1: 16, y1: 10 }],
    ];
    let cfg = TrainConfig {
        lambda1: 0.7,
        lambda2: 1.3,
        lambda3: 0.9,
        final_head_mode: FinalHeadMode::Post,
        ..TrainConfig::default()
    };
    let run = |t: &mut Tape<f64>, s: &ParamStore<f64>, final_only: bool| -> Result<Var> {
        let mut m = model.clone();
        m.params = s.clone();
        let st = forward_train_with(t, &m, &images, &labels, &cfg, Some(&boxes))
            .map_err(|e| crate::tensor::invalid("gradcheck", e.to_string()))?;
        Ok(if final_only {
            st.final_loss
        } else {
            st.total.expect("nonzero weights")
        })
    };
    let ids = all_ids(&model.params);
    let head = [model.joint_head.weight, model.joint_head.bias];
    Ok(vec![
        gradcheck_params("full_graph_branches", |t, s| run(t, s, false), &model.params, &ids, GRAPH_EPS, GRAPH_TOL)?,
        gradcheck_params("full_graph_final_head", |t, s| run(t, s, true), &model.params, &head, GRAPH_EPS, GRAPH_TOL)?,
    ])
}
