use avsol_core::tensor::gradcheck::grad_check;
use avsol_core::tensor::{Graph, ParamStore, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn softmax_of_constant_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[7], 3.25));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }
}

#[test]
fn max_global_of_scaled_one_hot() {
    let mut g = Graph::<f64>::new();
    let mut data = vec![0.0; 6];
    data[4] = 2.5;
    let x = g.input(Tensor::new(vec![2, 3], data).unwrap().with_grad(true));
    let m = g.max_global(x).unwrap();
    assert_eq!(g.value(m).item(), Some(2.5));
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn identity_kernel_conv2d_keeps_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let input = random(&mut rng, &[1, 5, 6]);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let x = g.input(input.clone());
    let w = g.input(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
    let y = g.conv2d(x, w).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn conv_zero_kernel_and_superposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x1, x2) = (random(&mut rng, &[2, 3, 4, 4]), random(&mut rng, &[2, 3, 4, 4]));
    let (k1, k2) = (random(&mut rng, &[3, 2, 3, 3, 3]), random(&mut rng, &[3, 2, 3, 3, 3]));
    let conv = |x: &Tensor<f64>, k: &Tensor<f64>| {
        let mut g = Graph::new();
        let (x, k) = (g.input(x.clone()), g.input(k.clone()));
        let y = g.conv3d(x, k).unwrap();
        g.value(y).data().to_vec()
    };
    assert!(conv(&x1, &Tensor::zeros(&[3, 2, 3, 3, 3])).iter().all(|&v| v == 0.0));
    let sum = |a: &Tensor<f64>, b: &Tensor<f64>| {
        Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
    };
    let lhs = conv(&sum(&x1, &x2), &k1);
    let rhs: Vec<f64> = conv(&x1, &k1).iter().zip(conv(&x2, &k1)).map(|(a, b)| a + b).collect();
    lhs.iter().zip(&rhs).for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
    let lhs = conv(&x1, &sum(&k1, &k2));
    let rhs: Vec<f64> = conv(&x1, &k1).iter().zip(conv(&x1, &k2)).map(|(a, b)| a + b).collect();
    lhs.iter().zip(&rhs).for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
}

#[test]
fn mean_backward_is_exactly_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[3, 4]).with_grad(true));
    let m = g.mean(x, 1).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.25));
}

#[test]
fn sum_of_parameter_has_unit_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let s = g.sum(w).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(id).unwrap(), &[1.0; 4]);
}

#[test]
fn bce_of_sigmoid_has_canonical_gradient() {
    let xs = vec![-2.0, -0.3, 0.0, 1.7];
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(xs.clone()).with_grad(true));
    let p = g.sigmoid(x).unwrap();
    let l = g.bce_loss(p, &[1.0; 4]).unwrap();
    g.backward(l).unwrap();
    for (gx, x) in g.grad(x).unwrap().iter().zip(xs) {
        let s = 1.0 / (1.0 + (-x).exp());
        assert!((gx - (s - 1.0)).abs() < 1e-12);
    }
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(vec![0.2, 0.4]).with_grad(true));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::BackwardAlreadyRan)));
    let mut other = Graph::<f64>::new();
    assert!(matches!(other.backward(s), Err(TensorError::DetachedGraph)));
}

#[test]
fn shape_and_range_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[3, 2]));
    match g.add(a, b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!((op, lhs, rhs), ("add", vec![2, 3], vec![3, 2]));
        }
        other => panic!("unexpected {other:?}"),
    }
    let p = g.input(Tensor::from_vec(vec![1.0, 0.5]));
    assert!(matches!(
        g.bce_loss(p, &[1.0, 0.0]),
        Err(TensorError::PredictionOutOfRange { .. })
    ));
}

#[test]
fn random_three_layer_composition_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&mut rng, &[4, 5]),
        random(&mut rng, &[5, 3]),
        random(&mut rng, &[3, 2]),
        random(&mut rng, &[2]),
    ];
    let report = grad_check(&inputs, 1e-5, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.tanh(h)?;
        let h = g.matmul(h, v[2])?;
        let h = g.sigmoid(h)?;
        let o = g.matmul(h, v[3])?;
        g.sum(o)
    })
    .unwrap();
    assert!(report.max_relative_error <= 1e-6, "{report:?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(values));
        let y = g.softmax(x, 0).unwrap();
        let out = g.value(y).data();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|&v| v > 0.0));
    }
}
