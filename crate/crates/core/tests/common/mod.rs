//! Fixtures shared by the integration test targets: finite-difference
//! checkers and the hand-built swap oracle network.
#![allow(dead_code)]

use gensense::baseline::{Checkpoint, CheckpointMeta};
use gensense::genunits::{build_generative_unit, objective, objective_and_grads, GenerativeNetwork, RegKind, RegularizationSpec};
use gensense::nn::{cross_entropy, eval_network, LabeledBatch, Layer, LayerParams, NetworkSpec, Net, Parameters, Params};
use gensense::prng::SplitMix64;
use gensense::susceptibility::{MaskRule, SignificanceMask};
use gensense::Tensor;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
/// Gradient entries smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

pub fn batch(shape: [usize; 3], n: usize, classes: usize, rng: &mut SplitMix64) -> LabeledBatch {
    let [c, h, w] = shape;
    let inputs = random_tensor(&[n, c, h, w], rng);
    LabeledBatch::new(inputs, (0..n).map(|_| rng.below(classes as u64) as usize).collect()).unwrap()
}

pub fn loss(spec: &NetworkSpec, params: &Params, batch: &LabeledBatch) -> f64 {
    let (logits, _) = eval_network(spec, params, &batch.inputs, &[]).unwrap();
    cross_entropy(&logits, &batch.labels).unwrap()
}

/// Worst relative error over every parameter and every input entry.
pub fn check_network(layers: Vec<Layer>, input: [usize; 3], seed: u64) -> f64 {
    let classes = 3;
    let spec = NetworkSpec::new(layers, input, classes).unwrap();
    let mut rng = SplitMix64::new(seed);
    let mut params = Params::init(&spec, &mut rng).unwrap();
    // non-zero biases so their gradients are exercised away from init
    for slot in params.layers.iter_mut().flatten() {
        slot.bias = random_tensor(slot.bias.shape(), &mut rng).map(|v| 0.1 * v);
    }
    let data = batch(input, 3, classes, &mut rng);
    let net = Net::new(&spec, &params).unwrap();
    let (_, grads) = net.loss_and_grads(&data).unwrap();
    let acts = net.trace(&data.inputs, 0).unwrap();
    let (_, grad_logits) = gensense::nn::cross_entropy_grad(acts.last().unwrap(), &data.labels).unwrap();
    let input_grad = net.backward_trace(&acts, 0, grad_logits, None, true).unwrap().unwrap();

    let mut worst = 0.0f64;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();
    for (k, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = params.tensors()[k].data()[i];
            params.tensors_mut()[k].data_mut()[i] = orig + EPS;
            let up = loss(&spec, &params, &data);
            params.tensors_mut()[k].data_mut()[i] = orig - EPS;
            let down = loss(&spec, &params, &data);
            params.tensors_mut()[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * EPS)));
        }
    }
    let mut shifted = data.clone();
    for i in 0..data.inputs.len() {
        let orig = data.inputs.data()[i];
        shifted.inputs.data_mut()[i] = orig + EPS;
        let up = loss(&spec, &params, &shifted);
        shifted.inputs.data_mut()[i] = orig - EPS;
        let down = loss(&spec, &params, &shifted);
        shifted.inputs.data_mut()[i] = orig;
        worst = worst.max(rel_err(input_grad.data()[i], (up - down) / (2.0 * EPS)));
    }
    worst
}

pub fn gen_net(seed: u64, layer: usize, channels: &[usize]) -> GenerativeNetwork {
    let spec = NetworkSpec::new(
        vec![
            Layer::conv_same(4, 3),
            Layer::Relu,
            Layer::conv_same(5, 3),
            Layer::MaxPool { kernel: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense { out_dim: 40 },
            Layer::Relu,
            Layer::Dense { out_dim: 3 },
        ],
        [1, 6, 6],
        3,
    )
    .unwrap();
    let mut rng = SplitMix64::new(seed);
    let params = Params::init(&spec, &mut rng).unwrap();
    let baseline = Checkpoint {
        spec,
        params,
        meta: CheckpointMeta { seed, epochs: 0, final_train_loss: 0.0, dataset_id: "fd".into() },
    };
    let channels_at = baseline.spec.output_shape(layer).unwrap()[0];
    let mut selected = vec![false; channels_at];
    for &c in channels {
        selected[c] = true;
    }
    let mask = SignificanceMask { layer_index: layer, selected, rule: MaskRule::TopK(channels.len()) };
    let mut unit = build_generative_unit(&baseline, &mask, 3, &mut rng).unwrap();
    // a trained-looking unit: the zero second conv would hide half the gradient paths
    unit.conv2.weight = random_tensor(unit.conv2.weight.shape(), &mut rng).map(|v| 0.5 * v);
    unit.conv2.bias = random_tensor(unit.conv2.bias.shape(), &mut rng).map(|v| 0.1 * v);
    unit.conv1.bias = random_tensor(unit.conv1.bias.shape(), &mut rng).map(|v| 0.1 * v);
    GenerativeNetwork::new(baseline, vec![unit]).unwrap()
}

pub fn check_objective(mut gen: GenerativeNetwork, reg: RegularizationSpec, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let data = batch([1, 6, 6], 4, 3, &mut rng);
    let (_, grads) = objective_and_grads(&gen, &data, reg).unwrap();
    let mut worst = 0.0f64;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();
    for (k, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let orig = gen.units.tensors()[k].data()[i];
            gen.units.tensors_mut()[k].data_mut()[i] = orig + EPS;
            let up = objective(&gen, &data, reg).unwrap();
            gen.units.tensors_mut()[k].data_mut()[i] = orig - EPS;
            let down = objective(&gen, &data, reg).unwrap();
            gen.units.tensors_mut()[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * EPS)));
        }
    }
    worst
}


/// Worst relative error per case over every layer kind, the units and the
/// regularized objective.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let head = |mut l: Vec<Layer>| {
        l.extend([Layer::Flatten, Layer::Dense { out_dim: 3 }]);
        l
    };
    let mut out = vec![
        (
            "dense+flatten".to_string(),
            check_network(vec![Layer::Flatten, Layer::Dense { out_dim: 4 }, Layer::Dense { out_dim: 3 }], [2, 3, 2], 1),
        ),
        (
            "relu".to_string(),
            check_network(
                vec![Layer::Flatten, Layer::Dense { out_dim: 6 }, Layer::Relu, Layer::Dense { out_dim: 3 }],
                [1, 3, 3],
                2,
            ),
        ),
    ];
    for (k, (kernel, stride, pad)) in [(3, 1, 1), (3, 2, 1), (2, 1, 0), (5, 3, 2)].into_iter().enumerate() {
        let conv = Layer::Conv { out_channels: 2, kernel, stride, pad };
        out.push((format!("conv k{kernel} s{stride} p{pad}"), check_network(head(vec![conv]), [2, 6, 7], 10 + k as u64)));
    }
    for (kernel, stride) in [(2, 2), (3, 1)] {
        let layers = head(vec![Layer::conv_same(2, 3), Layer::MaxPool { kernel, stride }]);
        out.push((format!("maxpool {kernel}/{stride}"), check_network(layers, [1, 6, 6], 20 + kernel as u64)));
    }
    let no_reg = RegularizationSpec::new(RegKind::L2, 0.0).unwrap();
    out.push(("generative unit".to_string(), check_objective(gen_net(40, 2, &[0, 2, 4]), no_reg, 41)));
    for (kind, lambda) in [(RegKind::L2, 0.3), (RegKind::L1, 0.05)] {
        let reg = RegularizationSpec::new(kind, lambda).unwrap();
        out.push((format!("objective {kind}"), check_objective(gen_net(50, 2, &[1, 3]), reg, 51)));
    }
    out
}

/// One-hot image in, one-hot logits out. At layer 0, channel 0 copies the
/// input and channel 1 is the constant 1, so swapping channel 0 for a
/// blank degraded input leaves only chance accuracy. The eval set holds
/// every class twice.
pub fn oracle(classes: usize) -> (Checkpoint, LabeledBatch) {
    let spec = NetworkSpec::new(
        vec![Layer::conv_same(2, 1), Layer::Flatten, Layer::Dense { out_dim: classes }],
        [1, 1, classes],
        classes,
    )
    .unwrap();
    let mut dense = vec![0.0; classes * 2 * classes];
    for k in 0..classes {
        dense[k * 2 * classes + k] = 1.0;
    }
    let params = Params {
        layers: vec![
            Some(LayerParams {
                weight: Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
            }),
            None,
            Some(LayerParams {
                weight: Tensor::new(vec![classes, 2 * classes], dense).unwrap(),
                bias: Tensor::zeros(&[classes]),
            }),
        ],
    };
    let ckpt = Checkpoint {
        spec,
        params,
        meta: CheckpointMeta { seed: 0, epochs: 0, final_train_loss: 0.0, dataset_id: "oracle".into() },
    };
    let n = 2 * classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = vec![0.0; n * classes];
    for (i, &l) in labels.iter().enumerate() {
        x[i * classes + l] = 1.0;
    }
    let batch = LabeledBatch::new(Tensor::new(vec![n, 1, 1, classes], x).unwrap(), labels).unwrap();
    (ckpt, batch)
}

/// Brute force: argmax of the oracle logits after zeroing the swapped
/// channels, ties to the lowest class.
pub fn oracle_brute_force(classes: usize, swapped: &[usize]) -> f64 {
    let n = 2 * classes;
    let mut correct = 0;
    for i in 0..n {
        let label = i % classes;
        let copy_kept = !swapped.contains(&0);
        let logits: Vec<f64> = (0..classes).map(|k| if copy_kept && k == label { 1.0 } else { 0.0 }).collect();
        let best = (0..classes).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
        correct += usize::from(best == label);
    }
    correct as f64 / n as f64
}

/// Random reference-architecture checkpoint on small images.
pub fn random_checkpoint(classes: usize, seed: u64) -> Checkpoint {
    let spec = NetworkSpec::reference([1, 12, 12], classes).unwrap();
    let params = Params::init(&spec, &mut SplitMix64::new(seed)).unwrap();
    Checkpoint { spec, params, meta: CheckpointMeta { seed, epochs: 0, final_train_loss: 0.0, dataset_id: "random".into() } }
}
