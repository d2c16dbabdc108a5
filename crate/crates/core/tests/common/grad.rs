//! Central finite-difference checks in double precision.

use ntl_core::netcore::layers::{self, Mode};
use ntl_core::netcore::{NetConfig, NetInput, Network, ParamSet, Tensor};
use ntl_core::profile::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, FLOOR)`, maximized over entries. The floor keeps
/// round-off on exactly-zero gradients from counting as error.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Numeric gradient of `f` with respect to every entry of `x`.
pub fn numeric(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data[i];
            probe.data[i] = orig + STEP;
            let up = f(&probe);
            probe.data[i] = orig - STEP;
            let down = f(&probe);
            probe.data[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Worst relative error over one layer kind's input and parameter gradients
/// for a 5×5 input drawn from `seed`.
pub fn check_layer(kind: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, s) = (2, 3, 5);
    let x = random(&[n, c, s, s], &mut rng);
    match kind {
        "conv3" | "conv1" => {
            let k = if kind == "conv3" { 3 } else { 1 };
            let w = random(&[4, c, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let r = random(&[n, 4, s, s], &mut rng);
            let (mut dw, mut db) = (Tensor::zeros(&w.shape), Tensor::zeros(&b.shape));
            let dx = layers::conv_backward(&x, &w, k, &r, &mut dw, &mut db, "conv").unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&layers::conv_forward(x, w, b, k, "conv").unwrap(), &r);
            max_rel_error(&dx.data, &numeric(&x, |p| loss(p, &w, &b)))
                .max(max_rel_error(&dw.data, &numeric(&w, |p| loss(&x, p, &b))))
                .max(max_rel_error(&db.data, &numeric(&b, |p| loss(&x, &w, p))))
        }
        "lrelu" => {
            let r = random(&x.shape, &mut rng);
            let y = layers::lrelu_forward(&x, 0.1);
            let dx = layers::lrelu_backward(&y, &r, 0.1);
            max_rel_error(&dx.data, &numeric(&x, |p| dot(&layers::lrelu_forward(p, 0.1), &r)))
        }
        "batchnorm" => {
            let g = random(&[c], &mut rng);
            let b = random(&[c], &mut rng);
            let r = random(&x.shape, &mut rng);
            let (_, cache) = layers::bn_forward_train(&x, &g, &b, 1e-5, "bn").unwrap();
            let (mut dg, mut db) = (Tensor::zeros(&[c]), Tensor::zeros(&[c]));
            let dx = layers::bn_backward(&cache, &g, &r, &mut dg, &mut db, "bn").unwrap();
            let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
                dot(&layers::bn_forward_train(x, g, b, 1e-5, "bn").unwrap().0, &r)
            };
            max_rel_error(&dx.data, &numeric(&x, |p| loss(p, &g, &b)))
                .max(max_rel_error(&dg.data, &numeric(&g, |p| loss(&x, p, &b))))
                .max(max_rel_error(&db.data, &numeric(&b, |p| loss(&x, &g, p))))
        }
        "maxpool" => {
            let (y, arg) = layers::maxpool_forward(&x, "pool").unwrap();
            let r = random(&y.shape, &mut rng);
            let dx = layers::scatter_backward(&arg, &r, &x.shape);
            max_rel_error(&dx.data, &numeric(&x, |p| dot(&layers::maxpool_forward(p, "pool").unwrap().0, &r)))
        }
        "dropout" | "noise" => {
            let r = random(&x.shape, &mut rng);
            let run = |p: &Tensor<f64>| {
                let mut local = ChaCha8Rng::seed_from_u64(seed + 100);
                if kind == "dropout" {
                    layers::dropout_forward(p, 0.5, &mut local)
                } else {
                    (layers::noise_forward(p, 0.15, &mut local), vec![1.0; p.len()])
                }
            };
            let (_, mask) = run(&x);
            let dx = layers::mask_backward(&mask, &r);
            max_rel_error(&dx.data, &numeric(&x, |p| dot(&run(p).0, &r)))
        }
        "roi_pool" => {
            let boxes: Vec<BBox> = (0..n * c)
                .map(|_| {
                    let (x0, y0) = (rng.gen_range(0..40u16), rng.gen_range(0..40u16));
                    BBox { x0, y0, x1: x0 + rng.gen_range(2..10), y1: y0 + rng.gen_range(2..10) }
                })
                .collect();
            let fm = Tensor::from_vec(&[n * c, 1, s, s], x.data.clone()).unwrap();
            let (y, arg) = layers::roi_pool_forward(&fm, &boxes, 50, 3, "roi").unwrap();
            let r = random(&y.shape, &mut rng);
            let dx = layers::scatter_backward(&arg, &r, &fm.shape);
            max_rel_error(&dx.data, &numeric(&fm, |p| dot(&layers::roi_pool_forward(p, &boxes, 50, 3, "roi").unwrap().0, &r)))
        }
        "dense" => {
            let x = random(&[n, 6], &mut rng);
            let w = random(&[2, 6], &mut rng);
            let b = random(&[2], &mut rng);
            let r = random(&[n, 2], &mut rng);
            let (mut dw, mut db) = (Tensor::zeros(&w.shape), Tensor::zeros(&b.shape));
            let dx = layers::dense_backward(&x, &w, &r, &mut dw, &mut db, "dense").unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&layers::dense_forward(x, w, b, "dense").unwrap(), &r);
            max_rel_error(&dx.data, &numeric(&x, |p| loss(p, &w, &b)))
                .max(max_rel_error(&dw.data, &numeric(&w, |p| loss(&x, p, &b))))
                .max(max_rel_error(&db.data, &numeric(&b, |p| loss(&x, &w, p))))
        }
        other => panic!("no check for layer kind {other}"),
    }
}

pub const LAYER_KINDS: [&str; 10] =
    ["conv3", "conv1", "lrelu", "batchnorm", "maxpool", "dropout", "noise", "roi_pool", "dense", "softmax"];

/// Softmax has no stand-alone backward in the library; this checks the
/// Jacobian-vector product the trainer applies to probability gradients.
pub fn check_softmax(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random(&[4, 2], &mut rng);
    let r = random(&[4, 2], &mut rng);
    let p = layers::softmax(&z);
    let mut analytic = vec![0.0; 8];
    for row in 0..4 {
        let pr = &p.data[row * 2..row * 2 + 2];
        let gr = &r.data[row * 2..row * 2 + 2];
        let d: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for c in 0..2 {
            analytic[row * 2 + c] = pr[c] * (gr[c] - d);
        }
    }
    max_rel_error(&analytic, &numeric(&z, |q| dot(&layers::softmax(q), &r)))
}

pub fn check_kind(kind: &str, seed: u64) -> f64 {
    if kind == "softmax" {
        check_softmax(seed)
    } else {
        check_layer(kind, seed)
    }
}

/// The reduced end-to-end network: two channels, 12×12 input, half widths.
pub fn reduced_config() -> NetConfig {
    NetConfig { input_size: 12, channels: 2, ..NetConfig::default() }.scaled_widths(2)
}

/// Worst relative error over a sample of every parameter tensor of the
/// reduced network in train mode, with mean cross-entropy on the logits plus a
/// random projection of the embedding.
pub fn check_network(seed: u64, per_tensor: usize) -> f64 {
    let net = Network::new(reduced_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParamSet<f64> = net.init_params(&mut rng);
    let samples = 3;
    let s = net.config.input_size;
    let images = random(&[samples * 2, 1, s, s], &mut rng);
    let boxes: Vec<BBox> = (0..samples * 2)
        .map(|_| {
            let (x0, y0) = (rng.gen_range(0..8u16), rng.gen_range(0..8u16));
            BBox { x0, y0, x1: x0 + rng.gen_range(2..4), y1: y0 + rng.gen_range(2..4) }
        })
        .collect();
    let input = NetInput { images, boxes, samples };
    let labels: Vec<usize> = (0..samples).map(|i| i % 2).collect();
    let r_emb = random(&[samples, net.config.embedding_dim()], &mut rng);
    let noise_seed = seed + 1000;
    let loss = |p: &ParamSet<f64>| {
        let mut local = ChaCha8Rng::seed_from_u64(noise_seed);
        let (out, _) = net.forward(p, &input, Mode::Train, &mut local, false).unwrap();
        let p = layers::softmax(&out.logits);
        let xent: f64 = labels.iter().enumerate().map(|(i, &y)| -p.data[i * 2 + y].ln()).sum::<f64>() / samples as f64;
        xent + dot(&out.embedding, &r_emb)
    };
    let mut local = ChaCha8Rng::seed_from_u64(noise_seed);
    let (out, tape) = net.forward(&params, &input, Mode::Train, &mut local, true).unwrap();
    let mut r_logits = layers::softmax(&out.logits);
    for (i, &y) in labels.iter().enumerate() {
        r_logits.data[i * 2 + y] -= 1.0;
    }
    r_logits.data.iter_mut().for_each(|g| *g /= samples as f64);
    let grads = net.backward(&params, tape.unwrap(), &r_logits, Some(&r_emb)).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, g) in &grads {
        let len = g.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, per_tensor).into_vec()
        };
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for i in picks {
            let orig = probe.params[name].data[i];
            probe.params.get_mut(name).unwrap().data[i] = orig + STEP;
            let up = loss(&probe);
            probe.params.get_mut(name).unwrap().data[i] = orig - STEP;
            let down = loss(&probe);
            probe.params.get_mut(name).unwrap().data[i] = orig;
            a.push(g.data[i]);
            num.push((up - down) / (2.0 * STEP));
        }
        let e = max_rel_error(&a, &num);
        if std::env::var("GRAD_DEBUG").is_ok() && e > 1e-5 {
            eprintln!("{name}: {e:e} {a:?} {num:?}");
        }
        worst = worst.max(e);
    }
    worst
}
