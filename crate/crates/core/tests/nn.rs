use kfprune::nn::{Architecture, Model, Sgd};
use kfprune::pipeline::stream_rng;
use kfprune::verify::{gradient_check, gradient_nets};
use kfprune::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

fn dense(text: &str, weights: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)>) -> Model {
    let parts = weights
        .into_iter()
        .map(|(shape, w, m)| (Tensor::new(shape.clone(), w).unwrap(), Tensor::new(shape, m).unwrap()))
        .collect();
    Model::from_parts(Architecture::parse(text).unwrap(), parts).unwrap()
}

fn random_batch(model: &Model, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = stream_rng(seed, 99, 0);
    let x: Vec<f64> = (0..n * model.input_len()).map(|_| rng.sample(StandardNormal)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..model.num_classes())).collect();
    (Tensor::new(vec![n, model.input_len()], x).unwrap(), labels)
}

#[test]
fn dense_forward_examples() {
    let id = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let x = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let m = dense("input 2; dense 2 2", vec![(vec![2, 3], id.clone(), vec![1.0; 6])]);
    assert_eq!(m.infer(&x).unwrap().data(), &[3.0, 4.0]);
    let m = dense("input 2; dense 2 2", vec![(vec![2, 3], vec![0.0; 6], vec![0.0; 6])]);
    assert_eq!(m.infer(&x).unwrap().data(), &[0.0, 0.0]);
    let m = dense(
        "input 2; dense 2 1",
        vec![(vec![1, 3], vec![0.5, 0.0, 0.1], vec![1.0, 0.0, 1.0])],
    );
    let y = m.infer(&Tensor::new(vec![1, 2], vec![2.0, 4.0]).unwrap()).unwrap();
    assert!((y.data()[0] - 1.1).abs() < 1e-15);
}

#[test]
fn from_parts_projects_onto_the_mask() {
    let parts = vec![(
        Tensor::new(vec![1, 3], vec![0.5, -0.25, 0.1]).unwrap(),
        Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap(),
    )];
    let m = Model::from_parts(Architecture::parse("input 2; dense 2 1").unwrap(), parts).unwrap();
    assert_eq!(m.layer(0).weights.data(), &[0.5, 0.0, 0.1]);
}

#[test]
fn small_dense_net_matches_central_differences() {
    let m = Model::new(Architecture::parse("input 3; dense 3 4; relu; dense 4 2").unwrap(), 7).unwrap();
    let (x, y) = random_batch(&m, 5, 1);
    assert!(gradient_check(&m, &x, &y, 1e-5, 1e-4).unwrap() <= 1e-6);
}

#[test]
fn every_layer_kind_matches_central_differences() {
    for (name, arch) in gradient_nets() {
        let m = Model::new(arch, 3).unwrap();
        assert!(m.total_params() <= 200, "{name}");
        let (x, y) = random_batch(&m, 4, 2);
        let err = gradient_check(&m, &x, &y, 1e-5, 1e-4).unwrap();
        assert!(err <= 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn masked_gradients_are_zero() {
    let mut m = Model::new(Architecture::parse("input 3; dense 3 4; relu; dense 4 2").unwrap(), 5).unwrap();
    for q in [0, 5, 9] {
        m.layer_mut(0).kill(q);
    }
    m.layer_mut(2).kill(3);
    let (x, y) = random_batch(&m, 6, 3);
    m.forward(&x).unwrap();
    let grads = m.backward(&y).unwrap().grads;
    for (l, q) in [(0, 0), (0, 5), (0, 9), (2, 3)] {
        assert_eq!(grads[l].as_ref().unwrap().data()[q], 0.0);
    }
}

#[test]
fn single_sample_gradient_is_an_outer_product() {
    let mut m = Model::new(Architecture::parse("input 3; dense 3 4; relu; dense 4 2").unwrap(), 11).unwrap();
    let (x, y) = random_batch(&m, 1, 4);
    m.forward(&x).unwrap();
    let out = m.backward(&y).unwrap();
    for l in m.param_layers() {
        let cap = out.capture.layers[l].as_ref().unwrap();
        let (rows, cols) = (m.layer(l).rows(), m.layer(l).cols());
        let g = out.grads[l].as_ref().unwrap().data();
        for i in 0..rows {
            for j in 0..cols {
                let outer = cap.preact_grads[i] * cap.activations[j];
                assert!((g[i * cols + j] - outer).abs() < 1e-14);
            }
        }
        assert_eq!(cap.activations[cols - 1], 1.0);
    }
}

#[test]
fn full_extent_conv_equals_dense() {
    let conv = Model::new(
        Architecture::parse("input 2 3 3; conv2d 2 4 3 3; relu; flatten; dense 4 3").unwrap(),
        21,
    )
    .unwrap();
    // Conv rows are (c, ky, kx, 1) which is exactly the CHW flattening order.
    let parts: Vec<(Tensor, Tensor)> = conv
        .param_layers()
        .into_iter()
        .map(|l| (conv.layer(l).weights.clone(), conv.layer(l).mask.clone()))
        .collect();
    let dense = Model::from_parts(
        Architecture::parse("input 18; dense 18 4; relu; dense 4 3").unwrap(),
        parts,
    )
    .unwrap();
    let (x, _) = random_batch(&conv, 7, 5);
    let a = conv.infer(&x).unwrap();
    let b = dense.infer(&x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() <= 1e-12);
    }
}

#[test]
fn sgd_examples() {
    let mut m = dense("input 1; dense 1 1", vec![(vec![1, 2], vec![2.0, 0.0], vec![1.0, 1.0])]);
    let g = vec![Some(Tensor::new(vec![1, 2], vec![0.5, 0.0]).unwrap())];
    Sgd::new(1.0, 0.0).unwrap().step(&mut m, &g).unwrap();
    assert_eq!(m.layer(0).weights.data()[0], 1.5);

    let mut m = dense("input 1; dense 1 1", vec![(vec![1, 2], vec![0.0, 0.0], vec![1.0, 1.0])]);
    let g = vec![Some(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())];
    let mut sgd = Sgd::new(0.1, 0.9).unwrap();
    sgd.step(&mut m, &g).unwrap();
    assert!((sgd.velocity()[0][0] - 1.0).abs() < 1e-15);
    assert!((m.layer(0).weights.data()[0] + 0.1).abs() < 1e-15);
    sgd.step(&mut m, &g).unwrap();
    assert!((sgd.velocity()[0][0] - 1.9).abs() < 1e-15);
    assert!((m.layer(0).weights.data()[0] + 0.29).abs() < 1e-15);
}

#[test]
fn sgd_keeps_masked_entries_at_zero() {
    let mut m = dense("input 1; dense 1 1", vec![(vec![1, 2], vec![0.0, 0.3], vec![0.0, 1.0])]);
    let g = vec![Some(Tensor::new(vec![1, 2], vec![5.0, 1.0]).unwrap())];
    let mut sgd = Sgd::new(0.5, 0.9).unwrap();
    for _ in 0..5 {
        sgd.step(&mut m, &g).unwrap();
        assert_eq!(m.layer(0).weights.data()[0], 0.0);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let mut m = Model::new(Architecture::preset("mlp-4-8-3").unwrap(), 9).unwrap();
        let mut sgd = Sgd::new(0.1, 0.9).unwrap();
        for s in 0..20 {
            let (x, y) = random_batch(&m, 8, s);
            m.forward(&x).unwrap();
            let g = m.backward(&y).unwrap().grads;
            sgd.step(&mut m, &g).unwrap();
        }
        m.flat_weights()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn capture_rows_scale_with_locations() {
    let mut m = Model::new(
        Architecture::parse("input 1 6 6; conv2d 1 2 3 3 stride=1; relu; flatten; dense 32 3").unwrap(),
        1,
    )
    .unwrap();
    let (x, y) = random_batch(&m, 3, 8);
    m.forward(&x).unwrap();
    let cap = m.backward(&y).unwrap().capture;
    assert_eq!(cap.layers[0].as_ref().unwrap().rows, 3 * 16);
    assert_eq!(cap.layers[3].as_ref().unwrap().rows, 3);
    assert!(cap.layers[1].is_none() && cap.layers[2].is_none());
}
