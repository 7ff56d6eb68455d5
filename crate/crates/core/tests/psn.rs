//! Part sequence network: serialization, the bi-directional LSTM and the
//! part head.

use proptest::prelude::*;
use reaps::checks::randomized_tiny_model;
use reaps::gradcheck::random_tensor;
use reaps::params::ParamStore;
use reaps::psn::{bilstm_map, part_logits, psn_forward, serialize_features, PartBranch, PartRepresentation, PartSequence};
use reaps::synth::generate_dataset;
use reaps::train::{make_batch, Trainer};
use reaps::{Ablation, ReapsModel, RunConfig, Tape, Tensor, Var};

fn branch_and_store() -> (PartBranch, ParamStore<f64>) {
    let m = randomized_tiny_model(4).unwrap();
    (m.psn_stages[0].part.clone().unwrap(), m.params)
}

fn run_cell(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    cell: &reaps::nn::LstmCell,
    steps: &[Tensor<f64>],
) -> Vec<Vec<f64>> {
    let b = steps[0].shape()[0];
    let mut h = tape.constant(Tensor::zeros(&[b, cell.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[b, cell.hidden]));
    let mut out = Vec::new();
    for s in steps {
        let x = tape.constant(s.clone());
        (h, c) = cell.step(tape, store, x, h, c).unwrap();
        out.push(tape.data(h).to_vec());
    }
    out
}

fn step_slices(seq: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let s = seq.shape();
    let (b, n, c) = (s[0], s[1], s[2]);
    (0..n)
        .map(|t| {
            let mut v = Vec::with_capacity(b * c);
            for bi in 0..b {
                v.extend_from_slice(&seq.data()[(bi * n + t) * c..(bi * n + t + 1) * c]);
            }
            Tensor::new(&[b, c], v).unwrap()
        })
        .collect()
}

fn bilstm(store: &ParamStore<f64>, branch: &PartBranch, seq: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(seq.clone());
    let p = bilstm_map(&mut tape, store, branch, PartSequence(s)).unwrap();
    tape.data(p.0).to_vec()
}

#[test]
fn directions_match_single_cell_unrolls() {
    let (branch, store) = branch_and_store();
    let (b, n, c) = (2, 4, branch.lstm_fwd.input_dim);
    let seq = random_tensor(&[b, n, c], 31, 1.0);
    let got = bilstm(&store, &branch, &seq);
    let u = branch.lstm_fwd.hidden;

    let mut tape = Tape::new();
    let steps = step_slices(&seq);
    let fwd = run_cell(&mut tape, &store, &branch.lstm_fwd, &steps);
    let reversed: Vec<_> = steps.iter().rev().cloned().collect();
    let mut bwd = run_cell(&mut tape, &store, &branch.lstm_bwd, &reversed);
    bwd.reverse();
    for bi in 0..b {
        for t in 0..n {
            let row = &got[(bi * n + t) * 2 * u..(bi * n + t + 1) * 2 * u];
            assert_eq!(&row[..u], &fwd[t][bi * u..(bi + 1) * u]);
            assert_eq!(&row[u..], &bwd[t][bi * u..(bi + 1) * u]);
        }
    }
}

#[test]
fn backward_direction_sees_the_last_step_first() {
    let (branch, store) = branch_and_store();
    let c = branch.lstm_fwd.input_dim;
    let seq = random_tensor(&[1, 4, c], 32, 1.0);
    let mut changed = seq.clone();
    for v in &mut changed.data_mut()[3 * c..] {
        *v += 0.5;
    }
    let a = bilstm(&store, &branch, &seq);
    let b = bilstm(&store, &branch, &changed);
    let u = branch.lstm_fwd.hidden;
    // the forward half of earlier steps cannot see the last input
    for t in 0..3 {
        assert_eq!(&a[t * 2 * u..t * 2 * u + u], &b[t * 2 * u..t * 2 * u + u]);
        assert_ne!(&a[t * 2 * u + u..(t + 1) * 2 * u], &b[t * 2 * u + u..(t + 1) * 2 * u]);
    }
}

#[test]
fn zero_parts_give_the_head_bias() {
    let (branch, mut store) = branch_and_store();
    let bias = random_tensor(&[3], 40, 1.0);
    *store.get_mut(branch.part_head.bias) = bias.clone();
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::zeros(&[2, 4, 2 * branch.lstm_fwd.hidden]));
    let logits = part_logits(&mut tape, &store, &branch, PartRepresentation(p)).unwrap();
    assert_eq!(tape.data(logits), [bias.data(), bias.data()].concat().as_slice());
}

#[test]
fn one_hot_parts_select_a_weight_row() {
    let (branch, store) = branch_and_store();
    let d = 4 * 2 * branch.lstm_fwd.hidden;
    let w = store.get(branch.part_head.weight).data().to_vec();
    let bias = store.get(branch.part_head.bias).data().to_vec();
    let k = bias.len();
    for j in [0, d / 2, d - 1] {
        let mut v = vec![0.0; d];
        v[j] = 1.0;
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[1, 4, d / 4], v).unwrap());
        let logits = part_logits(&mut tape, &store, &branch, PartRepresentation(p)).unwrap();
        let want: Vec<f64> = (0..k).map(|c| w[j * k + c] + bias[c]).collect();
        assert_eq!(tape.data(logits), want.as_slice());
    }
}

#[test]
fn wo_part_is_backbone_pool_and_head() {
    let mut model = randomized_tiny_model(6).unwrap();
    model.psn_stages[0].part = None;
    let psn = &model.psn_stages[0];
    let x = random_tensor(&[2, 3, 16, 16], 61, 1.0);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = psn_forward(&mut tape, &model.params, psn, xv).unwrap();
    assert!(out.parts.is_none() && out.logits_part.is_none());

    let mut by_hand = Tape::new();
    let xv = by_hand.constant(x);
    let f = psn.backbone.forward(&mut by_hand, &model.params, xv).unwrap();
    let pooled = by_hand.global_pool(f, psn.gap_mode).unwrap();
    let w = by_hand.param(&model.params, psn.global_head.weight);
    let b = by_hand.param(&model.params, psn.global_head.bias);
    let logits = by_hand.linear(pooled, w, Some(b)).unwrap();
    let bits = |t: &Tape<f64>, v: Var| t.data(v).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&tape, out.logits_global), bits(&by_hand, logits));
}

fn nonzero_grads(ablation: Ablation) -> Vec<(String, bool)> {
    let mut cfg = RunConfig::from_text(
        "image_size = 32\ncrop_size = 32\nchannels = 4,8\nseq_len = 4\nhidden = 8\n\
         num_classes = 3\nparts_min = 2\nparts_max = 3\ntrain_per_class = 4\n\
         test_per_class = 1\nbatch_size = 6\n",
    )
    .unwrap();
    cfg.model.ablation = ablation;
    let (data, _) = generate_dataset(&cfg.synth).unwrap();
    let mut t = Trainer::new(ReapsModel::new(&cfg.model, 2).unwrap(), cfg.train.clone()).unwrap();
    let (x, y) = make_batch(&data, &(0..6).collect::<Vec<_>>()).unwrap();
    // heads start at zero, so the first step only moves the heads
    t.step(&x, &y).unwrap();
    let (x, y) = make_batch(&data, &(6..12).collect::<Vec<_>>()).unwrap();
    t.step(&x, &y).unwrap();
    t.model
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with("psn"))
        .map(|(_, n, p)| (n.to_string(), p.grad.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0))))
        .collect()
}

#[test]
fn every_psn_parameter_learns() {
    let grads = nonzero_grads(Ablation::Full);
    assert!(grads.iter().any(|(n, _)| n.contains("lstm")));
    assert!(grads.iter().any(|(n, _)| n.contains("part_head")));
    for (name, nonzero) in grads {
        assert!(nonzero, "{name} got no gradient");
    }
    let grads = nonzero_grads(Ablation::WoPart);
    assert!(grads.iter().all(|(n, _)| !n.contains("lstm") && !n.contains("part_head")));
    for (name, nonzero) in grads {
        assert!(nonzero, "{name} got no gradient");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn serialization_preserves_channel_mass(
        b in 1usize..3,
        c in 1usize..5,
        h in 1usize..5,
        (n, slab) in (1usize..5, 1usize..4),
        seed in 0u64..1000,
    ) {
        let w = n * slab;
        let x = random_tensor(&[b, c, h, w], seed, 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let seq = serialize_features(&mut tape, xv, n).unwrap();
        let y = tape.data(seq.0);
        for bi in 0..b {
            for ch in 0..c {
                let plane: f64 = x.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w].iter().sum();
                let steps: f64 = (0..n).map(|i| y[(bi * n + i) * c + ch]).sum();
                prop_assert!((steps * (h * slab) as f64 - plane).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bilstm_rows_do_not_interact(seed in 0u64..1000, split in 1usize..3) {
        let (branch, store) = branch_and_store();
        let (b, n, c) = (3, 4, branch.lstm_fwd.input_dim);
        let seq = random_tensor(&[b, n, c], seed, 1.5);
        let all = bilstm(&store, &branch, &seq);
        let row = n * c;
        let first = Tensor::new(&[split, n, c], seq.data()[..split * row].to_vec()).unwrap();
        let rest = Tensor::new(&[b - split, n, c], seq.data()[split * row..].to_vec()).unwrap();
        let joined = [bilstm(&store, &branch, &first), bilstm(&store, &branch, &rest)].concat();
        prop_assert_eq!(all, joined);
    }
}
