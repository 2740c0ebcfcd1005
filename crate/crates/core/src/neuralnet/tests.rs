use ndarray::{Array2, Array3};

use super::*;

fn tiny_lstm() -> NetworkSpec {
    NetworkSpec::lstm_stack(1, &[1], 1, Activation::Linear, 0.0, 0.0)
}

#[test]
fn one_cell_lstm_matches_hand_computation() {
    let spec = tiny_lstm();
    // W (4), R (4), b (4), dense W (1), dense b (1)
    let mut params = vec![0.0; spec.param_count()];
    assert_eq!(params.len(), 14);
    params[..4].fill(1.0);
    params[12] = 1.0;
    let net = Network::from_params(spec, params).unwrap();
    let x = Array3::from_elem((1, 1, 1), 1.0);
    let pass = net.forward(x.view(), Mode::Eval, false).unwrap();
    let s1 = 1.0 / (1.0 + (-1.0f64).exp());
    let expected = s1 * (s1 * 1.0f64.tanh()).tanh();
    assert!((pass.penultimate[[0, 0]] - expected).abs() < 1e-10);
    assert!((pass.output[[0, 0]] - expected).abs() < 1e-10);
}

#[test]
fn zero_parameters_give_zero_hidden_state() {
    let spec = NetworkSpec::lstm_stack(5, &[3, 2], 1, Activation::Sigmoid, 0.0, 0.0);
    let mut params = vec![0.0; spec.param_count()];
    let last = params.len() - 1;
    params[last] = 0.7;
    let net = Network::from_params(spec, params).unwrap();
    let x = Array3::from_shape_fn((4, 5, 1), |(b, t, _)| (b * 5 + t) as f64 - 3.0);
    let pass = net.forward(x.view(), Mode::Eval, false).unwrap();
    assert!(pass.penultimate.iter().all(|&h| h == 0.0));
    assert!(pass.output.iter().all(|&y| (y - sigmoid(0.7)).abs() < 1e-15));
}

#[test]
fn default_embedder_penultimate_shape() {
    let net = Network::init(NetworkSpec::default_embedder(1, Activation::Linear), 3).unwrap();
    let x = Array3::zeros((32, 60, 1));
    let pass = net.forward(x.view(), Mode::Eval, false).unwrap();
    assert_eq!(pass.penultimate.dim(), (32, 200));
    assert_eq!(pass.output.dim(), (32, 1));
}

#[test]
fn init_sets_forget_bias_and_bounds() {
    let spec = NetworkSpec::lstm_stack(4, &[3], 2, Activation::Linear, 0.0, 0.0);
    let net = Network::init(spec.clone(), 11).unwrap();
    let l = &spec.layout()[0];
    let b = &net.params()[l.b..l.end];
    assert_eq!(&b[..3], &[0.0; 3]);
    assert_eq!(&b[3..6], &[1.0; 3]);
    assert_eq!(&b[6..], &[0.0; 6]);
    assert!(net.params()[l.w..l.r.unwrap()].iter().all(|w| w.abs() <= 1.0));
    let bound = 1.0 / 3f64.sqrt();
    assert!(net.params()[l.r.unwrap()..l.b].iter().all(|w| w.abs() <= bound));
    assert_eq!(Network::init(spec.clone(), 11).unwrap(), net);
    assert_ne!(Network::init(spec, 12).unwrap().params(), net.params());
}

#[test]
fn shape_mismatch_reports_expected_and_actual() {
    let net = Network::init(tiny_lstm(), 0).unwrap();
    let err = net.forward(Array3::zeros((2, 3, 1)).view(), Mode::Eval, false).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[batch, 1, 1]") && msg.contains("[2, 3, 1]"), "{msg}");
}

#[test]
fn stale_cache_is_rejected() {
    let mut net = Network::init(tiny_lstm(), 0).unwrap();
    let pass = net.forward(Array3::ones((2, 1, 1)).view(), Mode::Eval, true).unwrap();
    net.params_mut()[0] += 0.1;
    let grad = OutputGrad::Activation(Array2::ones((2, 1)));
    let err = net.backward(pass.cache.as_ref().unwrap(), &grad).unwrap_err();
    assert!(matches!(err, PhaseError::StaleCache { .. }));
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradient() {
    let net = Network::init(NetworkSpec::lstm_stack(4, &[3, 2], 2, Activation::Linear, 0.3, 0.3), 5).unwrap();
    let x = Array3::from_shape_fn((3, 4, 1), |(b, t, _)| (b as f64 - t as f64) * 0.3);
    let pass = net.forward(x.view(), Mode::Train { dropout_seed: 9 }, true).unwrap();
    let g = net
        .backward(pass.cache.as_ref().unwrap(), &OutputGrad::Activation(Array2::zeros((3, 2))))
        .unwrap();
    assert!(g.iter().all(|&v| v == 0.0));

    let (loss, grad) = loss_and_grad(Loss::Mse, Activation::Linear, &pass, pass.output.view()).unwrap();
    assert_eq!(loss, 0.0);
    let g = net.backward(pass.cache.as_ref().unwrap(), &grad).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_is_deterministic_and_train_mode_depends_on_seed() {
    let net = Network::init(NetworkSpec::lstm_stack(6, &[4, 4], 1, Activation::Linear, 0.5, 0.5), 1).unwrap();
    let x = Array3::from_shape_fn((2, 6, 1), |(b, t, _)| ((b + t) as f64).sin());
    let e1 = net.forward(x.view(), Mode::Eval, false).unwrap().output;
    let e2 = net.forward(x.view(), Mode::Eval, false).unwrap().output;
    assert_eq!(e1, e2);
    let t1 = net.forward(x.view(), Mode::Train { dropout_seed: 1 }, false).unwrap().output;
    let t2 = net.forward(x.view(), Mode::Train { dropout_seed: 1 }, false).unwrap().output;
    let t3 = net.forward(x.view(), Mode::Train { dropout_seed: 2 }, false).unwrap().output;
    assert_eq!(t1, t2);
    assert_ne!(t1, t3);
}

#[test]
fn recurrent_mask_is_shared_across_steps() {
    let m = dropout_mask(3, 5, 0.5, 4, "recurrent", 0);
    assert_eq!(m.dim(), (3, 5));
    assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    assert_eq!(m, dropout_mask(3, 5, 0.5, 4, "recurrent", 0));
}

#[test]
fn bce_logit_form_is_stable() {
    assert!((bce_from_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
    assert!(bce_from_logit(800.0, 1.0).abs() < 1e-12);
    assert!((bce_from_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = [0.0];
    let mut s = AdamState::default();
    adam_step(&mut p, &[1.0], &mut s, 0.1).unwrap();
    assert!((p[0] + 0.1).abs() < 1e-8);
    let mut q = [0.5, -2.0];
    let mut s = AdamState::default();
    for _ in 0..5 {
        adam_step(&mut q, &[0.0, 0.0], &mut s, 0.1).unwrap();
    }
    assert_eq!(q, [0.5, -2.0]);
}

#[test]
fn rmsprop_first_step_matches_hand_value() {
    let mut p = [0.0];
    let mut s = RmsPropState::default();
    rmsprop_step(&mut p, &[1.0], &mut s, 0.1).unwrap();
    assert!((p[0] + 0.1 / (0.1f64.sqrt() + 1e-8)).abs() < 1e-14);
    let mut q = [3.0];
    rmsprop_step(&mut q, &[0.0], &mut RmsPropState::default(), 0.1).unwrap();
    assert_eq!(q, [3.0]);
}

#[test]
fn optimizers_reject_non_finite_gradients() {
    let mut p = [0.0];
    assert!(matches!(
        adam_step(&mut p, &[f64::NAN], &mut AdamState::default(), 0.1),
        Err(PhaseError::Numeric(_))
    ));
    assert!(matches!(
        rmsprop_step(&mut p, &[f64::INFINITY], &mut RmsPropState::default(), 0.1),
        Err(PhaseError::Numeric(_))
    ));
}

fn separable(n: usize) -> SeqDataset {
    let x = Array3::from_shape_fn((n, 2, 1), |(i, t, _)| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (1.0 + 0.1 * ((i * 7 + t * 3) % 5) as f64)
    });
    let y = Array2::from_shape_fn((n, 1), |(i, _)| if i % 2 == 0 { 1.0 } else { 0.0 });
    SeqDataset::new(x, y).unwrap()
}

fn dense_classifier() -> NetworkSpec {
    NetworkSpec {
        input_dim: 1,
        seq_len: 2,
        layers: vec![
            LayerSpec::Dense { units: 4, activation: Activation::Relu },
            LayerSpec::Dense { units: 1, activation: Activation::Sigmoid },
        ],
        dropout_rate: 0.0,
        recurrent_dropout_rate: 0.0,
    }
}

#[test]
fn separable_toy_reaches_low_bce() {
    let data = separable(64);
    let mut config = TrainConfig::classification(200, 3);
    config.optimizer = Optimizer::Adam;
    config.learning_rate = 0.01;
    config.batch_size = 16;
    let net = Network::init(dense_classifier(), 3).unwrap();
    let (best, history) = train(&net, &config, &data, &data).unwrap();
    assert_eq!(history.train_loss.len(), 200);
    assert_eq!(history.valid_loss.len(), 200);
    let min = history.valid_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(history.valid_loss[history.selected_epoch], min);
    assert!(history.valid_loss[..history.selected_epoch].iter().all(|&v| v > min));
    assert!(min < 0.1, "best validation BCE {min}");
    assert_eq!(train::dataset_loss(&best, Loss::Bce, &data).unwrap(), min);
}

#[test]
fn single_epoch_selects_epoch_zero_and_is_reproducible() {
    let data = separable(20);
    let config = TrainConfig::classification(1, 8);
    let net = Network::init(dense_classifier(), 1).unwrap();
    let (a, h) = train(&net, &config, &data, &data).unwrap();
    let (b, _) = train(&net, &config, &data, &data).unwrap();
    assert_eq!(h.selected_epoch, 0);
    assert_eq!(a.params(), b.params());
}

#[test]
fn upsampling_requires_both_classes() {
    let mut data = separable(10);
    data.targets.fill(0.0);
    let net = Network::init(dense_classifier(), 1).unwrap();
    let err = train(&net, &TrainConfig::classification(1, 0), &data, &data).unwrap_err();
    assert!(matches!(err, PhaseError::Data(_)));
}

#[test]
fn balanced_batches_hold_equal_class_counts() {
    let data = separable(41);
    let config = TrainConfig {
        batch_size: 8,
        ..TrainConfig::classification(1, 2)
    };
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..41).partition(|i| i % 2 == 0);
    let batches = train::epoch_batches(&config, &data, &pos, &neg, 0);
    let covered: usize = batches.iter().map(|b| b.len() / 2).sum();
    assert_eq!(covered, neg.len());
    for b in batches {
        let p = b.iter().filter(|&&i| data.targets[[i, 0]] == 1.0).count();
        assert_eq!(2 * p, b.len());
    }
}
