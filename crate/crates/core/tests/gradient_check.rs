use became_core::nn::{self, Activation, Batch, LinearSpec, NetworkSpec};
use became_core::params::ParamVector;
use became_core::seed;
use ndarray::Array2;
use rand::Rng;

fn numeric_grad(spec: &NetworkSpec, params: &ParamVector, batch: &Batch<'_>, h: f64) -> Vec<f64> {
    let loss = |p: &ParamVector| nn::cross_entropy(&nn::forward(spec, p, batch).unwrap().logits, batch.labels);
    (0..params.len())
        .map(|j| {
            let mut up = params.clone();
            up.values_mut()[j] += h;
            let mut down = params.clone();
            down.values_mut()[j] -= h;
            (loss(&up) - loss(&down)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let scale: f64 = a.iter().zip(b).map(|(x, y)| x * x + y * y).sum();
    if scale == 0.0 {
        0.0
    } else {
        (diff / scale).sqrt()
    }
}

#[test]
fn backprop_matches_central_differences() {
    let mut rng = seed::rng(11, 0, 0);
    for case in 0..60 {
        let input = rng.random_range(1..=5);
        let act = [Activation::Tanh, Activation::Identity][case % 2];
        let mut layers = Vec::new();
        let mut width = input;
        for _ in 0..rng.random_range(0..=3) {
            let output = rng.random_range(1..=5);
            layers.push(LinearSpec {
                input: width,
                output,
                bias: rng.random_bool(0.5),
                activation: act,
            });
            width = output;
        }
        let heads = vec![rng.random_range(2..=4), rng.random_range(2..=4)];
        let spec = NetworkSpec::new(input, layers, heads.clone()).unwrap();
        let mut params = spec.init_params(&mut rng);
        params.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        let task = rng.random_range(1..=2);
        let n = rng.random_range(1..=4);
        let x = Array2::from_shape_fn((n, input), |_| rng.random_range(-1.5..1.5));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..heads[task - 1])).collect();
        let batch = Batch::new(x.view(), &y, task);
        let (_, grad) = nn::loss_and_grad(&spec, &params, &batch).unwrap();
        let err = relative_error(grad.values(), &numeric_grad(&spec, &params, &batch, 1e-5));
        assert!(err <= 1e-6, "case {case}: relative error {err:e}");
    }
}

#[test]
fn inactive_head_gets_zero_gradient() {
    let spec = NetworkSpec::mlp(3, &[4], Activation::Tanh, true, vec![2, 3]).unwrap();
    let params = spec.init_params(&mut seed::rng(1, 0, 0));
    let x = Array2::from_elem((2, 3), 0.5);
    let (_, grad) = nn::loss_and_grad(&spec, &params, &Batch::new(x.view(), &[0, 1], 1)).unwrap();
    for seg in spec.layout().segments() {
        if seg.kind.head_task() == Some(2) {
            assert!(grad.segment(seg).iter().all(|&g| g == 0.0), "{}", seg.name);
        }
    }
}
