//! Finite-difference checks and closed-form cases for the backward rules.

use reaps::checks::{self, GRAPH_TOL, PRIMITIVE_TOL};
use reaps::gradcheck::{gradcheck, random_tensor};
use reaps::nn::LstmCell;
use reaps::params::ParamStore;
use reaps::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_passes() {
    let reports = checks::primitive_suite(false).unwrap();
    for r in &reports {
        assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err());
        assert_eq!(r.tol, PRIMITIVE_TOL);
    }
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    for want in [
        "relu",
        "max_pool2d",
        "global_pool_sum",
        "linear_no_bias",
        "softmax_cross_entropy",
        "bilinear_up",
        "serialize_features",
        "lstm_4_steps",
        "bilstm_map",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
}

#[test]
fn injected_fault_is_caught() {
    let reports = checks::primitive_suite(true).unwrap();
    let bad: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    assert_eq!(bad, vec!["injected_fault".to_string()]);
}

#[test]
fn tiny_model_graph_passes() {
    let model = checks::randomized_tiny_model(3).unwrap();
    assert!(model.params.num_scalars() <= 5000, "{}", model.params.num_scalars());
    for r in checks::model_suite().unwrap() {
        assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err());
        assert_eq!(r.tol, GRAPH_TOL);
    }
}

#[test]
fn composite_of_three_layers() {
    let x = random_tensor(&[2, 3], 1, 1.0);
    let w1 = random_tensor(&[3, 4], 2, 1.0);
    let w2 = random_tensor(&[4, 2], 3, 1.0);
    let r = gradcheck(
        "composite",
        |t, v| {
            let h = t.linear(v[0], v[1], None)?;
            let h = t.tanh(h);
            let y = t.linear(h, v[2], None)?;
            t.softmax_cross_entropy(y, &[1, 0])
        },
        &[x, w1, w2],
        1e-6,
        PRIMITIVE_TOL,
    )
    .unwrap();
    assert!(r.passed(), "{:e}", r.max_rel_err());
}

#[test]
fn lstm_with_zero_parameters_halves_the_cell() {
    let mut store = ParamStore::<f64>::new();
    let cell = LstmCell::build(&mut store, "l", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
    for id in [cell.w_input, cell.w_hidden, cell.bias] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let v = [0.8, -1.5, 0.0, 3.0];
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[1, 3], 5, 1.0));
    let h = tape.constant(random_tensor(&[1, 4], 6, 1.0));
    let c = tape.constant(Tensor::new(&[1, 4], v.to_vec()).unwrap());
    let (h2, c2) = cell.step(&mut tape, &store, x, h, c).unwrap();
    for (i, vi) in v.iter().enumerate() {
        assert!((tape.data(c2)[i] - 0.5 * vi).abs() < 1e-15);
        assert!((tape.data(h2)[i] - 0.5 * (0.5 * vi).tanh()).abs() < 1e-15);
    }
}
