#![allow(dead_code)]

use mucsi_core::autodiff::{Graph, Mat, Var};
use mucsi_core::channel::AngleDelayCsi;
use mucsi_core::codec::{self, CodecConfig, ModelParams, Noiseless, Variant};
use mucsi_core::nn::{self, CrossMode, LayerParams};
use mucsi_core::rng::stream;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn randn(r: usize, c: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error over the tensors of a layer, central differences
/// with step `h`.
pub fn check_layer(mut p: LayerParams, loss: impl Fn(&mut Graph, &nn::LayerVars) -> Var, h: f64) -> (f64, &'static str) {
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let l = loss(&mut g, &vars);
    g.backward(l);
    let analytic: Vec<Mat> = vars.to_array().iter().map(|&v| g.grad(v).cloned().unwrap()).collect();
    let eval = |p: &LayerParams| {
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let l = loss(&mut g, &vars);
        g.value(l)[[0, 0]]
    };
    let mut worst = (0.0, "");
    for (ti, name) in LayerParams::TENSOR_NAMES.iter().enumerate() {
        let shape = analytic[ti].dim();
        let mut fd = Mat::zeros(shape);
        for idx in 0..shape.0 * shape.1 {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let orig = p.tensors()[ti][[r, c]];
            p.tensors_mut()[ti][[r, c]] = orig + h;
            let up = eval(&p);
            p.tensors_mut()[ti][[r, c]] = orig - h;
            let down = eval(&p);
            p.tensors_mut()[ti][[r, c]] = orig;
            fd[[r, c]] = (up - down) / (2.0 * h);
        }
        let e = rel_err(&fd, &analytic[ti]);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}

/// Worst tensor error of the joint block (`mode`) on random tokens.
pub fn rca_block_error(seed: u64, n: usize, d: usize, heads: usize, mode: CrossMode, h: f64) -> (f64, &'static str) {
    let mut rng = stream(seed, &[1]);
    let p = LayerParams::init(d, heads, &mut rng);
    let x1 = randn(2 * n, d, &mut rng);
    let x2 = randn(2 * n, d, &mut rng);
    let target = randn(2 * n, d, &mut rng);
    check_layer(
        p,
        |g, v| {
            let a = g.constant(x1.clone());
            let b = g.constant(x2.clone());
            let t = g.constant(target.clone());
            let y = nn::rca_block_graph(g, a, b, v, n, mode);
            let diff = g.sub(y, t);
            g.sum_sq(diff)
        },
        h,
    )
}

pub fn transformer_layer_error(seed: u64, n: usize, d: usize, heads: usize, h: f64) -> (f64, &'static str) {
    let mut rng = stream(seed, &[2]);
    let p = LayerParams::init(d, heads, &mut rng);
    let x = randn(2 * n, d, &mut rng);
    let target = randn(2 * n, d, &mut rng);
    check_layer(
        p,
        |g, v| {
            let a = g.constant(x.clone());
            let t = g.constant(target.clone());
            let y = nn::transformer_layer_graph(g, a, v, n);
            let diff = g.sub(y, t);
            g.sum_sq(diff)
        },
        h,
    )
}

fn random_csi(n_delay: usize, n_tx: usize, rng: &mut impl Rng) -> AngleDelayCsi {
    let mut h = AngleDelayCsi::zeros(n_delay, n_tx);
    h.h.iter_mut()
        .for_each(|z| *z = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    h
}

fn pipeline_loss(params: &ModelParams, cfg: &CodecConfig, groups: &[Vec<AngleDelayCsi>], trainable: bool) -> (Graph, codec::ModelVars, Var) {
    let mut g = Graph::new();
    let mv = params.bind(&mut g, trainable);
    let targets: Vec<Var> = (0..groups[0].len())
        .map(|u| g.constant(codec::stack_tokens(groups.iter().map(|grp| &grp[u]))))
        .collect();
    let fwd = codec::forward(&mut g, &mv, cfg, &targets, &mut Noiseless).unwrap();
    let l = codec::sum_squared_error(&mut g, &fwd.recon, &targets);
    (g, mv, l)
}

pub fn toy_gradcheck_codec(variant: Variant) -> CodecConfig {
    CodecConfig {
        d_model: 8,
        heads: 2,
        l1: 1,
        l2: 1,
        l3: 1,
        k_feedback: 8,
        n_tx: 4,
        n_delay: 4,
        variant,
    }
}

/// Worst tensor error of the full 2-user pipeline (noiseless link), every
/// parameter perturbed.
pub fn end_to_end_error(variant: Variant, seed: u64, h: f64) -> (f64, String) {
    let cfg = toy_gradcheck_codec(variant);
    let mut rng = stream(seed, &[3]);
    let groups: Vec<Vec<AngleDelayCsi>> = (0..2).map(|_| (0..2).map(|_| random_csi(4, 4, &mut rng)).collect()).collect();
    let mut params = ModelParams::init(&cfg, seed).unwrap();
    let (mut g, mv, l) = pipeline_loss(&params, &cfg, &groups, true);
    g.backward(l);
    let analytic = params.grads(&g, &mv);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let flat = params.to_flat();
    let mut fd_flat = vec![0.0; flat.len()];
    let mut work = flat.clone();
    let loss_at = |params: &ModelParams| {
        let (g, _, l) = pipeline_loss(params, &cfg, &groups, false);
        g.value(l)[[0, 0]]
    };
    for i in 0..flat.len() {
        work[i] = flat[i] + h;
        params.load_flat(&work).unwrap();
        let up = loss_at(&params);
        work[i] = flat[i] - h;
        params.load_flat(&work).unwrap();
        let down = loss_at(&params);
        work[i] = flat[i];
        fd_flat[i] = (up - down) / (2.0 * h);
    }
    let mut worst = (0.0, String::new());
    let mut off = 0;
    for (name, a) in names.iter().zip(&analytic) {
        let fd = Mat::from_shape_vec(a.dim(), fd_flat[off..off + a.len()].to_vec()).unwrap();
        off += a.len();
        let e = rel_err(&fd, a);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}
