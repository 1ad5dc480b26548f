//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use lsnb::data::{split, synth_generate, Sample, SplitSamples, SynthConfig};
use lsnb::model::{HeadSpec, Layer, ModelSpec};
use lsnb::training::{fit, Monitor, PlateauSchedule, TrainConfig};
use lsnb::{Model, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f64 = 1e-3;


pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Distinct values spaced 0.02 apart in random order, so no max-pool window
/// holds a near tie and no entry sits within the step of a relu kink.
pub fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.02).collect();
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-8)
}

/// Builds a scalar from `inputs` with `f`, then compares the tape gradient of
/// every input entry against a central difference.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[which]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

pub fn random_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn random_static(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0f64..2.0).floor(), rng.random_range(0..6) as f64 / 5.0]
}

/// Small fusion model exercising conv, pool, relu, flatten, dense, concat.
pub fn fd_spec() -> ModelSpec {
    ModelSpec {
        input_shape: [3, 16, 16],
        static_dim: 3,
        head: HeadSpec {
            name: "head".into(),
            in_features: 12,
        },
        image_branch: vec![
            Layer::Conv { name: "c1".into(), filters: 4, kernel: 3, stride: 1, padding: 1 },
            Layer::Relu,
            Layer::MaxPool { window: 2 },
            Layer::Conv { name: "c2".into(), filters: 4, kernel: 3, stride: 1, padding: 0 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Dropout { rate: 0.4 },
            Layer::Dense { name: "fc".into(), units: 8 },
            Layer::Relu,
        ],
        static_branch: Some(vec![Layer::Dense { name: "fs".into(), units: 4 }, Layer::Relu]),
    }
}

/// Op-by-op re-statement of `fd_spec`, returning the logit together with the
/// activation pattern (relu signs and pool-window winners) at this point.
pub fn mirror(model: &Model, image: &Tensor, stat: &[f64; 3]) -> (f64, Vec<bool>, Vec<usize>) {
    let mut tape = Tape::new();
    let p = |tape: &mut Tape, name: &str| tape.constant(model.param(name).unwrap().clone());
    let x = tape.constant(image.clone());
    let (w, b) = (p(&mut tape, "c1.weight"), p(&mut tape, "c1.bias"));
    let z1 = tape.conv2d(x, w, b, 1, 1).unwrap();
    let a1 = tape.relu(z1).unwrap();
    let m1 = tape.max_pool2d(a1, 2).unwrap();
    let (w, b) = (p(&mut tape, "c2.weight"), p(&mut tape, "c2.bias"));
    let z2 = tape.conv2d(m1, w, b, 1, 0).unwrap();
    let a2 = tape.relu(z2).unwrap();
    let f = tape.flatten(a2).unwrap();
    let (w, b) = (p(&mut tape, "fc.weight"), p(&mut tape, "fc.bias"));
    let z3 = tape.linear(f, w, b).unwrap();
    let a3 = tape.relu(z3).unwrap();
    let s = tape.constant(Tensor::from_vec(stat.to_vec()));
    let (w, b) = (p(&mut tape, "fs.weight"), p(&mut tape, "fs.bias"));
    let z4 = tape.linear(s, w, b).unwrap();
    let a4 = tape.relu(z4).unwrap();
    let cat = tape.concat(a3, a4).unwrap();
    let (w, b) = (p(&mut tape, "head.weight"), p(&mut tape, "head.bias"));
    let out = tape.linear(cat, w, b).unwrap();

    let signs = [z1, z2, z3, z4].iter().flat_map(|&z| tape.value(z).data().iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect();
    let act = tape.value(a1);
    let (c, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    let mut winners = Vec::new();
    for ch in 0..c {
        for i in (0..h).step_by(2) {
            for j in (0..w).step_by(2) {
                let cells = [(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)];
                let vals: Vec<f64> = cells.iter().map(|&(r, q)| act.at(&[ch, r, q])).collect();
                let best = (0..4).fold(0, |b, k| if vals[k] > vals[b] { k } else { b });
                winners.push(best);
            }
        }
    }
    (tape.value(out).data()[0], signs, winners)
}

/// Mann–Whitney concordance by enumerating every positive/negative pair.
pub fn concordance(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Average precision by brute force: for each distinct score taken as the
/// threshold (highest first), count the predicted-positive set from scratch.
pub fn enumerated_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// A random instance with both classes and deliberate score ties.
pub fn instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = rng.random_range(2..=max_n);
        let levels = rng.random_range(2..=n.max(2));
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

/// t_{p, ν} by bisection on the CDF, integrated with Simpson's rule after the
/// substitution x = √ν·tan θ, under which the density is ∝ cos^{ν−1} θ.
pub fn t_quantile_oracle(p: f64, df: f64) -> f64 {
    let simpson = |a: f64, b: f64| {
        let n = 4000;
        let h = (b - a) / n as f64;
        let f = |x: f64| x.cos().max(0.0).powf(df - 1.0);
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    let total = simpson(-half, half);
    let cdf = |t: f64| simpson(-half, (t / df.sqrt()).atan()) / total;
    let (mut lo, mut hi) = (0.0, 1000.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Replays validation losses through the default schedule; returns the
/// stopping epoch, best epoch and the learning rate used in each epoch.
pub fn replay(losses: &[f64]) -> (usize, usize, Vec<f64>) {
    let cfg = TrainConfig::default();
    let mut s = PlateauSchedule::new(
        Monitor::ValidLoss,
        cfg.learning_rate,
        cfg.lr_decay_factor,
        cfg.lr_patience,
        cfg.early_stop_patience,
        cfg.min_delta,
    );
    let mut used = Vec::new();
    for (i, &loss) in losses.iter().take(cfg.max_epochs).enumerate() {
        used.push(s.lr());
        if s.observe(i + 1, loss).stop {
            return (i + 1, s.best_epoch(), used);
        }
    }
    (used.len(), s.best_epoch(), used)
}

pub fn linear_model(h: usize, w: usize, seed: u64) -> Model {
    let spec = ModelSpec {
        input_shape: [3, h, w],
        static_dim: 3,
        head: HeadSpec {
            name: "head".into(),
            in_features: 1,
        },
        image_branch: vec![Layer::Flatten, Layer::Dense { name: "fc".into(), units: 1 }],
        static_branch: None,
    };
    let mut model = Model::build(spec, seed).unwrap();
    model.param_mut("fc.bias").unwrap()[0] = 0.3;
    model.param_mut("head.bias").unwrap()[0] = -0.2;
    model
}

pub fn random_sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Sample {
    let image = Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    Sample::new("x", image, [0.4, 1.0, 0.2], 1).unwrap()
}

pub fn toy_spec() -> ModelSpec {
    ModelSpec {
        input_shape: [3, 16, 16],
        static_dim: 3,
        head: HeadSpec {
            name: "head".into(),
            in_features: 12,
        },
        image_branch: vec![
            Layer::Conv { name: "c1".into(), filters: 6, kernel: 3, stride: 1, padding: 1 },
            Layer::Relu,
            Layer::MaxPool { window: 2 },
            Layer::Conv { name: "c2".into(), filters: 6, kernel: 3, stride: 1, padding: 1 },
            Layer::Relu,
            Layer::MaxPool { window: 2 },
            Layer::Flatten,
            Layer::Dense { name: "fc".into(), units: 8 },
            Layer::Relu,
        ],
        static_branch: Some(vec![Layer::Dense { name: "fs".into(), units: 4 }, Layer::Relu]),
    }
}

/// Gradient of the BCE loss through the composed model, checked against
/// central differences at random points. Finite differences are only
/// meaningful where the function is smooth across the whole stencil, so a
/// drawn point is kept only if no ±h perturbation of any coordinate changes
/// a relu sign or a pool winner; every coordinate of a kept point is checked.
/// Returns (points kept, points drawn, worst relative error).
pub fn fusion_fd(points: usize) -> (usize, u64, f64) {
    let spec = fd_spec();
    let mut worst_overall = 0.0f64;
    let mut kept = 0;
    let mut draws = 0u64;
    while kept < points {
        assert!(draws < 20 * points as u64, "only {kept} smooth points in {draws} draws");
        let seed = draws;
        draws += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut model = Model::build(spec.clone(), seed).unwrap();
        let names: Vec<String> = model.params().keys().cloned().collect();
        for name in &names {
            if name.ends_with(".bias") {
                for v in model.param_mut(name).unwrap() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let image = random_image(&mut rng, &[3, 16, 16]);
        let stat = random_static(&mut rng);
        let label = (seed % 2) as f64;

        let (mirror_logit, signs, winners) = mirror(&model, &image, &stat);
        assert_eq!(mirror_logit.to_bits(), model.logit(&image, &stat).unwrap().to_bits());

        // Loss at a perturbed point, or None if the stencil left the smooth piece.
        let loss = |m: &Model, img: &Tensor| -> Option<f64> {
            let (_, s, w) = mirror(m, img, &stat);
            if s != signs || w != winners {
                return None;
            }
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, false);
            let x = tape.constant(img.clone());
            let st = tape.constant(Tensor::from_vec(stat.to_vec()));
            let z = m.forward_on(&mut tape, &bound, x, st, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let l = tape.bce_with_logits(z, label).unwrap();
            Some(tape.value(l).data()[0])
        };

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let x = tape.param(image.clone());
        let s = tape.constant(Tensor::from_vec(stat.to_vec()));
        let z = model.forward_on(&mut tape, &bound, x, s, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = tape.bce_with_logits(z, label).unwrap();
        let grads = tape.backward(l).unwrap();

        let mut pairs = Vec::new();
        let mut smooth = true;
        'params: for name in &names {
            let analytic = grads.wrt(bound.get(name));
            for i in 0..analytic.len() {
                let mut plus = model.clone();
                plus.param_mut(name).unwrap()[i] += H;
                let mut minus = model.clone();
                minus.param_mut(name).unwrap()[i] -= H;
                match (loss(&plus, &image), loss(&minus, &image)) {
                    (Some(a), Some(b)) => pairs.push((analytic[i], (a - b) / (2.0 * H))),
                    _ => {
                        smooth = false;
                        break 'params;
                    }
                }
            }
        }
        if smooth {
            let analytic = grads.wrt(x);
            for i in 0..image.len() {
                let mut plus = image.clone();
                plus.data_mut()[i] += H;
                let mut minus = image.clone();
                minus.data_mut()[i] -= H;
                match (loss(&model, &plus), loss(&model, &minus)) {
                    (Some(a), Some(b)) => pairs.push((analytic[i], (a - b) / (2.0 * H))),
                    _ => {
                        smooth = false;
                        break;
                    }
                }
            }
        }
        if !smooth {
            continue;
        }
        let worst = pairs.iter().fold(0.0f64, |m, &(a, n)| m.max(rel_err(a, n)));
        worst_overall = worst_overall.max(worst);
        kept += 1;
    }
    (kept, draws, worst_overall)
}

/// The toy CNN trained on 16×16 synthetic lesions, with its data split.
pub fn trained_toy() -> (Model, SplitSamples) {
    let samples = synth_generate(400, 0.3, 5, &SynthConfig { image_size: 16, ..Default::default() }).unwrap();
    let data = split(&samples, 5).unwrap().materialize(&samples).unwrap();
    let mut model = Model::build(toy_spec(), 5).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.003,
        max_epochs: 6,
        seed: 5,
        ..Default::default()
    };
    fit(&mut model, &data.train, &data.valid, &cfg, None).unwrap();
    (model, data)
}
