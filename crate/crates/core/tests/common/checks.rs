//! Check runners shared by the unit-style integration tests and the
//! acceptance report. Each returns the worst error it saw.

use dhsl::data::Dataset;
use dhsl::kernels::{avgpool_backward, avgpool_forward, conv2d_backward, conv2d_forward, maxpool_backward, maxpool_forward};
use dhsl::layers::{AvgPoolLayer, BatchNormLayer, ConvLayer, Layer, MaxPoolLayer, Mode, StackConfig};
use dhsl::model::{HeadMode, Model, PairBatch};
use dhsl::similarity::{
    diff_backward, diff_forward, hybrid_score, logistic_loss, mult_backward, mult_forward, HybridWeights, PairFeatureZ,
    PairLabel,
};
use dhsl::trainer::{mine_hard_negatives, PairIndex, PairSampler};
use dhsl::{Dims, Tensor4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Input and parameter gradients of `layer` under `L = r . forward(x)`.
pub fn layer_error(mut layer: Layer<f64>, input: &Tensor4<f64>, mode: Mode, groups: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = layer.forward(input, mode, groups).unwrap();
    let r = random_tensor(out.dims(), &mut rng);
    let template = layer.clone();
    layer.zero_grad();
    layer.forward(input, mode, groups).unwrap();
    let grad_in = layer.backward(&r).unwrap();

    let objective = |l: &mut Layer<f64>, x: &Tensor4<f64>| dot(l.forward(x, mode, groups).unwrap().data(), r.data());
    let coords = sample_coords(input.dims().len(), 60);
    let numeric = numeric_gradient(input.data(), &coords, |x| {
        let x = Tensor4::from_vec(input.dims(), x.to_vec()).unwrap();
        objective(&mut template.clone(), &x)
    });
    let analytic: Vec<f64> = coords.iter().map(|&i| grad_in.data()[i]).collect();
    let mut worst = max_relative_error(&analytic, &numeric);

    let grads: Vec<Vec<f64>> = layer.params_mut().iter().map(|p| p.grad.to_vec()).collect();
    for (k, grad) in grads.iter().enumerate() {
        let values = template.clone().params_mut()[k].value.to_vec();
        let coords = sample_coords(values.len(), 40);
        let numeric = numeric_gradient(&values, &coords, |v| {
            let mut l = template.clone();
            l.params_mut()[k].value.copy_from_slice(v);
            objective(&mut l, input)
        });
        let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

pub fn conv_layer(k: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, seed: u64) -> Layer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = ConvLayer::new("C", k, c_in, c_out, stride, pad).unwrap();
    l.filters = random_tensor(l.filters.dims(), &mut rng);
    l.bias = random_vec(c_out, &mut rng);
    Layer::Conv(l)
}

pub fn bn_layer(channels: usize, relu: bool, seed: u64) -> Layer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = BatchNormLayer::new("B", channels, relu);
    l.gamma = (0..channels).map(|_| rng.random_range(0.5..1.5)).collect();
    l.beta = random_vec(channels, &mut rng);
    l.running_mean = random_vec(channels, &mut rng);
    l.running_var = (0..channels).map(|_| rng.random_range(0.5..2.0)).collect();
    Layer::BatchNorm(l)
}

/// Distinct values spaced well beyond the finite-difference step, so no
/// pooling window sits near a tie.
pub fn separated_tensor(dims: Dims, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..dims.len()).map(|i| i as f64 * 0.01 - 0.5).collect();
    values.shuffle(&mut rng);
    Tensor4::from_vec(dims, values).unwrap()
}

pub const CONV_SHAPES: [(usize, usize, usize); 4] = [(3, 1, 1), (3, 2, 0), (2, 1, 0), (3, 2, 1)];

pub fn conv_error(case: usize) -> f64 {
    let (k, stride, pad) = CONV_SHAPES[case];
    let mut rng = ChaCha8Rng::seed_from_u64(1 + case as u64);
    let input = random_tensor(Dims::new(2, 6, 5, 3), &mut rng);
    layer_error(conv_layer(k, 3, 4, stride, pad, case as u64), &input, Mode::Train, 1, 10 + case as u64)
}

pub const BN_SETTINGS: [(bool, Mode, usize); 6] = [
    (false, Mode::Train, 1),
    (false, Mode::Train, 2),
    (true, Mode::Train, 1),
    (true, Mode::Train, 2),
    (false, Mode::Infer, 1),
    (true, Mode::Infer, 1),
];

pub fn bn_error(case: usize) -> f64 {
    let (relu, mode, groups) = BN_SETTINGS[case];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_tensor(Dims::new(4, 3, 3, 3), &mut rng);
    layer_error(bn_layer(3, relu, case as u64), &input, mode, groups, 20 + case as u64)
}

pub const MAXPOOL_SHAPES: [(usize, usize, usize); 3] = [(3, 2, 1), (2, 2, 0), (3, 1, 1)];

pub fn maxpool_error(case: usize) -> f64 {
    let (k, stride, pad) = MAXPOOL_SHAPES[case];
    let input = separated_tensor(Dims::new(2, 7, 6, 2), case as u64);
    layer_error(Layer::MaxPool(MaxPoolLayer::new("M", k, stride, pad)), &input, Mode::Train, 1, 30)
}

pub const AVGPOOL_SHAPES: [(usize, usize, usize); 3] = [(1, 4, 1), (2, 2, 2), (3, 2, 1)];

pub fn avgpool_error(case: usize) -> f64 {
    let (kh, kw, stride) = AVGPOOL_SHAPES[case];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random_tensor(Dims::new(2, 5, 4, 3), &mut rng);
    layer_error(Layer::AvgPool(AvgPoolLayer::new("A", kh, kw, stride)), &input, Mode::Train, 1, 40)
}

/// Feature pairs whose coordinates differ by at least 0.05.
pub fn feature_pair<R: Rng>(d: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let x1 = random_vec(d, rng);
    let x2 = x1
        .iter()
        .map(|&a| {
            let gap: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { a + gap } else { a - gap }
        })
        .collect();
    (x1, x2)
}

type PairForward = fn(&[f64], &[f64]) -> dhsl::Result<Vec<f64>>;
type PairBackward = fn(&[f64], &[f64], &[f64]) -> dhsl::Result<(Vec<f64>, Vec<f64>)>;

fn pairwise_error(forward: PairForward, backward: PairBackward, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let (x1, x2) = feature_pair(d, &mut rng);
    let r = random_vec(d, &mut rng);
    let (g1, g2) = backward(&x1, &x2, &r).unwrap();
    let all: Vec<usize> = (0..d).collect();
    let n1 = numeric_gradient(&x1, &all, |x| dot(&forward(x, &x2).unwrap(), &r));
    let n2 = numeric_gradient(&x2, &all, |x| dot(&forward(&x1, x).unwrap(), &r));
    max_relative_error(&g1, &n1).max(max_relative_error(&g2, &n2))
}

pub fn diff_error(seed: u64) -> f64 {
    pairwise_error(diff_forward, diff_backward, seed)
}

pub fn mult_error(seed: u64) -> f64 {
    pairwise_error(mult_forward, mult_backward, seed)
}

/// Gradients of the regularized logistic loss w.r.t. the weights and each
/// sample's `z`.
pub fn loss_error(alpha: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let w = HybridWeights::new(random_vec(d, &mut rng), random_vec(d, &mut rng)).unwrap();
    let batch: Vec<(PairFeatureZ<f64>, PairLabel)> = (0..6)
        .map(|k| {
            let (x1, x2) = feature_pair(d, &mut rng);
            let label = if k % 2 == 0 { PairLabel::Same } else { PairLabel::Different };
            (PairFeatureZ::from_pair(&x1, &x2).unwrap(), label)
        })
        .collect();
    let out = logistic_loss(&w, &batch, alpha).unwrap();

    let all: Vec<usize> = (0..2 * d).collect();
    let numeric_w = numeric_gradient(&w.concat(), &all, |v| {
        let w = HybridWeights::new(v[..d].to_vec(), v[d..].to_vec()).unwrap();
        logistic_loss(&w, &batch, alpha).unwrap().loss
    });
    let mut worst = max_relative_error(&out.grad_w.concat(), &numeric_w);
    for (k, (z, _)) in batch.iter().enumerate() {
        let numeric_z = numeric_gradient(&z.z(), &all, |v| {
            let mut b = batch.clone();
            b[k].0 = PairFeatureZ { diff: v[..d].to_vec(), mult: v[d..].to_vec() };
            logistic_loss(&w, &b, alpha).unwrap().loss
        });
        worst = worst.max(max_relative_error(&out.grad_z[k].z(), &numeric_z));
    }
    worst
}

/// Tiny `8x6` network with `d = 16` and every learnable value random.
pub fn tiny_model(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(StackConfig::tiny(8, 6, [3, 4, 16]), HeadMode::Hybrid).unwrap();
    for p in model.params_mut() {
        let fresh = random_vec(p.value.len(), &mut rng);
        p.value.copy_from_slice(&fresh);
    }
    model
}

/// Worst relative error per learnable tensor of the tiny network, loss
/// taken end to end through both branches, the head and the regularizer.
pub fn end_to_end_errors(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = tiny_model(seed + 1);
    let dims = model.extractor().input_dims(4);
    let labels = vec![PairLabel::Same, PairLabel::Different, PairLabel::Same, PairLabel::Different];
    let batch = PairBatch::new(random_tensor(dims, &mut rng), random_tensor(dims, &mut rng), labels).unwrap();
    let alpha = 5e-2;

    model.forward_backward(&batch, alpha, Mode::Train).unwrap();
    let grads: Vec<(String, Vec<f64>)> = model.params_mut().iter().map(|p| (p.name.clone(), p.grad.to_vec())).collect();
    let template = model.clone();
    grads
        .iter()
        .enumerate()
        .map(|(k, (name, grad))| {
            let values = model.params_mut()[k].value.to_vec();
            let coords = sample_coords(values.len(), 16);
            let numeric = numeric_gradient(&values, &coords, |v| {
                let mut m = template.clone();
                m.params_mut()[k].value.copy_from_slice(v);
                m.loss(&batch, alpha, Mode::Train).unwrap()
            });
            let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
            (name.clone(), max_relative_error(&analytic, &numeric))
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Brute-force gradients of `sum(r * conv(x))` w.r.t. input, filters, bias.
pub fn conv_backward_oracle(
    input: &Tensor4<f64>,
    filters: &Tensor4<f64>,
    r: &Tensor4<f64>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = input.dims();
    let f = filters.dims();
    let o = r.dims();
    let mut gi = vec![0.0; d.len()];
    let mut gf = vec![0.0; f.len()];
    let mut gb = vec![0.0; f.c];
    for n in 0..d.n {
        for oy in 0..o.h {
            for ox in 0..o.w {
                for co in 0..f.c {
                    let g = r.get(n, oy, ox, co);
                    gb[co] += g;
                    for ky in 0..f.n {
                        for kx in 0..f.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            for ci in 0..f.w {
                                gi[d.index(n, iy, ix, ci)] += g * filters.get(ky, kx, ci, co);
                                gf[f.index(ky, kx, ci, co)] += g * input.get(n, iy, ix, ci);
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gf, gb)
}

/// Worst absolute deviation of forward and backward convolution from the
/// loop oracles over `instances` random geometries.
pub fn conv_oracle_error(instances: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..k);
        let dims = Dims::new(rng.random_range(1..=3), rng.random_range(k..=7), rng.random_range(k..=6), rng.random_range(1..=4));
        let c_out = rng.random_range(1..=5);
        let input = random_tensor(dims, &mut rng);
        let filters = random_tensor(Dims::new(k, k, dims.c, c_out), &mut rng);
        let bias = random_vec(c_out, &mut rng);

        let got = conv2d_forward(&input, &filters, &bias, stride, pad).unwrap();
        let want = conv_oracle(&input, &filters, &bias, stride, pad);
        if got.dims() != want.dims() {
            return f64::INFINITY;
        }
        worst = worst.max(max_abs_diff(got.data(), want.data()));

        let r = random_tensor(got.dims(), &mut rng);
        let grads = conv2d_backward(&input, &filters, &r, stride, pad).unwrap();
        let (gi, gf, gb) = conv_backward_oracle(&input, &filters, &r, stride, pad);
        worst = worst
            .max(max_abs_diff(grads.input.data(), &gi))
            .max(max_abs_diff(grads.filters.data(), &gf))
            .max(max_abs_diff(&grads.bias, &gb));
    }
    worst
}

/// As [`conv_oracle_error`] for max pooling; a differing argmax counts as
/// an infinite error. Inputs are coarse so that ties occur.
pub fn maxpool_oracle_error(instances: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = rng.random_range(2..=3);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..k);
        let dims = Dims::new(rng.random_range(1..=3), rng.random_range(k..=8), rng.random_range(k..=7), rng.random_range(1..=3));
        let input = Tensor4::from_vec(dims, (0..dims.len()).map(|_| rng.random_range(0..5) as f64).collect()).unwrap();

        let (got, arg) = maxpool_forward(&input, k, k, stride, pad).unwrap();
        let (want, want_arg) = maxpool_oracle(&input, k, stride, pad);
        if got.dims() != want.dims() || arg.indices != want_arg {
            return f64::INFINITY;
        }
        worst = worst.max(max_abs_diff(got.data(), want.data()));

        let r = random_tensor(got.dims(), &mut rng);
        let gi = maxpool_backward(&arg, &r).unwrap();
        let mut expect = vec![0.0; dims.len()];
        for (o, &i) in want_arg.iter().enumerate() {
            expect[i] += r.data()[o];
        }
        worst = worst.max(max_abs_diff(gi.data(), &expect));
    }
    worst
}

/// As [`conv_oracle_error`] for average pooling; the backward pass is
/// checked as the adjoint of the forward map.
pub fn avgpool_oracle_error(instances: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let kh = rng.random_range(1..=3);
        let kw = rng.random_range(1..=4);
        let stride = rng.random_range(1..=2);
        let dims = Dims::new(rng.random_range(1..=3), rng.random_range(kh..=6), rng.random_range(kw..=6), rng.random_range(1..=3));
        let input = random_tensor(dims, &mut rng);

        let got = avgpool_forward(&input, kh, kw, stride).unwrap();
        let want = avgpool_oracle(&input, kh, kw, stride);
        if got.dims() != want.dims() {
            return f64::INFINITY;
        }
        worst = worst.max(max_abs_diff(got.data(), want.data()));

        // <A x, r> == <x, A^T r>
        let r = random_tensor(got.dims(), &mut rng);
        let gi = avgpool_backward(&r, kh, kw, stride, dims).unwrap();
        worst = worst.max((dot(got.data(), r.data()) - dot(input.data(), gi.data())).abs());
    }
    worst
}

/// Stable full sort: score descending, pool position ascending.
pub fn full_sort_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.truncate(k);
    idx
}

/// Mined negatives next to the full-sort selection from the same pool,
/// scoring every pair one image at a time.
pub fn mining_vs_full_sort(
    model: &mut Model<f32>,
    ds: &Dataset,
    sampler: &PairSampler,
    pool_size: usize,
    keep: usize,
    seed: u64,
) -> (Vec<PairIndex>, Vec<PairIndex>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replay = rng.clone();
    let mined = mine_hard_negatives(model, ds, sampler, pool_size, keep, &mut rng).unwrap();

    let pool: Vec<_> = (0..pool_size).map(|_| sampler.negative(&mut replay).unwrap()).collect();
    let scores: Vec<f64> = pool
        .iter()
        .map(|p| {
            let a = model.extract(&ds.batch(&[p.first]).unwrap()).unwrap();
            let b = model.extract(&ds.batch(&[p.second]).unwrap()).unwrap();
            hybrid_score(model.head(), a.row(0), b.row(0)).unwrap() as f64
        })
        .collect();
    let expected = full_sort_top_k(&scores, keep).into_iter().map(|i| pool[i]).collect();
    (mined, expected)
}
