//! Central finite-difference gradient checks shared by the gradient suite
//! and the acceptance gate.
#![allow(dead_code)]

use fairprobe::model::{HeadConfig, Mode, ModelParams};
use fairprobe::rng::{seeded, Rng};
use fairprobe::ssl::NtXent;
use fairprobe::tensorcore::{ArrayF, Function, ParamId, Tape, Var};
use fairprobe::Result;
use rand::Rng as _;

pub const STEP: f64 = 1e-6;

/// `sum(w * x)` with fixed weights, turning any output into a scalar with a
/// non-uniform upstream gradient.
#[derive(Debug)]
pub struct WeightedSum {
    pub weights: Vec<f64>,
}

impl Function for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        let s = inputs[0].data().iter().zip(&self.weights).map(|(x, w)| x * w).sum();
        Ok(ArrayF::scalar(s))
    }

    fn backward(&self, inputs: &[&ArrayF], _: &ArrayF, g: &ArrayF, _: &[bool]) -> Vec<Option<ArrayF>> {
        let s = g.data()[0];
        let data = self.weights.iter().map(|w| w * s).collect();
        vec![Some(ArrayF::new(inputs[0].shape().to_vec(), data).unwrap())]
    }
}

/// `|a - n| / (|a| + |n|)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na + nn < 1e-12 {
        0.0
    } else {
        diff / (na + nn)
    }
}

pub fn random_array(shape: &[usize], rng: &mut Rng) -> ArrayF {
    let n = shape.iter().product();
    ArrayF::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar_loss<F>(build: &F, inputs: &[ArrayF], weights: &mut Option<Vec<f64>>, rng: &mut Rng) -> (Tape, Vec<Var>, Var)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let len = tape.value(out).len();
    let loss = if len == 1 {
        out
    } else {
        let w = weights.get_or_insert_with(|| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
        tape.apply(Box::new(WeightedSum { weights: w.clone() }), &[out]).unwrap()
    };
    (tape, vars, loss)
}

/// Largest relative error between backward and central differences over
/// every input of `build`.
pub fn check_primitive<F>(build: F, inputs: &[ArrayF], rng: &mut Rng) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let (tape, vars, loss) = scalar_loss(&build, inputs, &mut weights, rng);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).unwrap().data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs[i].len() {
            let mut eval = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                let mut data = perturbed[i].data().to_vec();
                data[k] += delta;
                perturbed[i] = ArrayF::new(perturbed[i].shape().to_vec(), data).unwrap();
                let (t, _, l) = scalar_loss(&build, &perturbed, &mut weights, rng);
                t.value(l).item().unwrap()
            };
            numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub enum Objective {
    CrossEntropy(Vec<usize>),
    Contrastive(f64),
}

fn model_loss(model: &ModelParams, x: &ArrayF, objective: &Objective, dropout_seed: u64) -> (Tape, Var) {
    let mut tape = Tape::new();
    let mut rng = seeded(dropout_seed);
    let enc = model.encode(&mut tape, x, Mode::Train, &mut rng).unwrap();
    let out = model.apply_head(&mut tape, enc.embedding).unwrap();
    let loss = match objective {
        Objective::CrossEntropy(labels) => tape.softmax_cross_entropy(out, labels).unwrap(),
        Objective::Contrastive(t) => tape.apply(Box::new(NtXent { temperature: *t }), &[out]).unwrap(),
    };
    (tape, loss)
}

pub fn parameter_ids(model: &ModelParams) -> Vec<ParamId> {
    let mut ids: Vec<ParamId> = (0..model.num_blocks()).flat_map(|b| model.block_params(b)).collect();
    if let Some(h) = model.head() {
        ids.extend(h.layer_ids().iter().flat_map(|&(w, b)| [w, b]));
    }
    ids
}

/// Relative error and norm of the parameter gradient of a full encoder +
/// head forward pass, dropout active with a fixed mask stream.
pub fn check_model(model: &mut ModelParams, x: &ArrayF, objective: &Objective, dropout_seed: u64) -> (f64, f64) {
    model.store_mut().zero_grad();
    let (tape, loss) = model_loss(model, x, objective, dropout_seed);
    tape.backward_into(loss, model.store_mut()).unwrap();
    let ids = parameter_ids(model);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        analytic.extend_from_slice(model.store().get(id).grad().data());
        let original = model.store().get(id).value().clone();
        for k in 0..original.len() {
            let mut eval = |delta: f64| {
                let mut data = original.data().to_vec();
                data[k] += delta;
                let shape = original.shape().to_vec();
                model.store_mut().get_mut(id).set_value(ArrayF::new(shape, data).unwrap()).unwrap();
                let (t, l) = model_loss(model, x, objective, dropout_seed);
                t.value(l).item().unwrap()
            };
            let (up, down) = (eval(STEP), eval(-STEP));
            numeric.push((up - down) / (2.0 * STEP));
        }
        model.store_mut().get_mut(id).set_value(original).unwrap();
    }
    model.store_mut().zero_grad();
    let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    (relative_error(&analytic, &numeric), norm)
}

/// Replaces every parameter (biases included) with uniform noise so no unit
/// starts exactly at a ReLU kink or at zero.
pub fn randomize(model: &mut ModelParams, rng: &mut Rng) {
    for id in parameter_ids(model) {
        let shape = model.store().get(id).value().shape().to_vec();
        model.store_mut().get_mut(id).set_value(random_array(&shape, rng)).unwrap();
    }
}

pub fn small_head(kind_projection: bool) -> HeadConfig {
    if kind_projection {
        HeadConfig {
            kind: fairprobe::model::HeadKind::Projection,
            units: vec![5, 4],
        }
    } else {
        HeadConfig {
            kind: fairprobe::model::HeadKind::Classification,
            units: vec![5, 2],
        }
    }
}

pub const TOLERANCE: f64 = 1e-4;

/// Below this gradient norm central differences only measure roundoff, so
/// such draws (mostly dead ReLU stacks with a flat loss) are redrawn.
pub const MIN_GRADIENT_NORM: f64 = 1e-4;

/// Runs `instances` random checks of every primitive, the NT-Xent loss and
/// both encoder + head composites. Returns `(name, instances, worst error)`.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(&'static str, usize, f64)> {
    use fairprobe::model::{build_encoder, EncoderConfig};
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, n: usize, f: &mut dyn FnMut(&mut Rng) -> f64| {
        let worst = (0..n).map(|_| f(&mut rng)).fold(0.0, f64::max);
        out.push((name, n, worst));
    };
    run("conv1d", instances, &mut |rng| {
        let (b, t, ci, k, co) = (rng.random_range(1..3), rng.random_range(3..7), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let inputs = [random_array(&[b, t, ci], rng), random_array(&[k, ci, co], rng), random_array(&[co], rng)];
        check_primitive(|tp, v| tp.conv1d(v[0], v[1], v[2]), &inputs, rng)
    });
    run("dense", instances, &mut |rng| {
        let (b, i, o) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [random_array(&[b, i], rng), random_array(&[i, o], rng), random_array(&[o], rng)];
        check_primitive(|tp, v| tp.dense(v[0], v[1], v[2]), &inputs, rng)
    });
    run("relu", instances, &mut |rng| {
        let inputs = [random_array(&[3, 4], rng)];
        check_primitive(|tp, v| tp.relu(v[0]), &inputs, rng)
    });
    run("dropout", instances, &mut |rng| {
        let inputs = [random_array(&[2, 6], rng)];
        let s: u64 = rng.random();
        check_primitive(move |tp, v| tp.dropout(v[0], 0.3, true, &mut seeded(s)), &inputs, rng)
    });
    run("global_max_pool", instances, &mut |rng| {
        let inputs = [random_array(&[2, rng.random_range(1..6), 3], rng)];
        check_primitive(|tp, v| tp.global_max_pool(v[0]), &inputs, rng)
    });
    run("softmax_cross_entropy", instances, &mut |rng| {
        let b = rng.random_range(1..5);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let inputs = [random_array(&[b, 3], rng)];
        check_primitive(move |tp, v| tp.softmax_cross_entropy(v[0], &labels), &inputs, rng)
    });
    run("sum", instances, &mut |rng| {
        let inputs = [random_array(&[2, 3], rng)];
        check_primitive(|tp, v| tp.sum(v[0]), &inputs, rng)
    });
    run("nt_xent", instances, &mut |rng| {
        let pairs = rng.random_range(1..4);
        let tau = rng.random_range(0.1..1.0);
        let inputs = [random_array(&[2 * pairs, 3], rng)];
        check_primitive(move |tp, v| tp.apply(Box::new(NtXent { temperature: tau }), &[v[0]]), &inputs, rng)
    });
    let enc = EncoderConfig {
        kernel_sizes: vec![3, 2, 2],
        filters: vec![3, 3, 3],
        dropout_rate: 0.2,
        timesteps: 8,
        channels: 2,
    };
    run("encoder+classification head", instances, &mut |rng| loop {
        let mut model = build_encoder(&enc, rng.random()).unwrap();
        model.attach_head(&small_head(false), rng.random()).unwrap();
        randomize(&mut model, rng);
        let x = random_array(&[3, 8, 2], rng);
        let labels = (0..3).map(|_| rng.random_range(0..2)).collect();
        let (err, norm) = check_model(&mut model, &x, &Objective::CrossEntropy(labels), rng.random());
        if norm >= MIN_GRADIENT_NORM {
            break err;
        }
    });
    run("encoder+projection head+nt_xent", instances.div_ceil(4), &mut |rng| loop {
        let mut model = build_encoder(&enc, rng.random()).unwrap();
        model.attach_head(&small_head(true), rng.random()).unwrap();
        randomize(&mut model, rng);
        let x = random_array(&[4, 8, 2], rng);
        let (err, norm) = check_model(&mut model, &x, &Objective::Contrastive(0.5), rng.random());
        if norm >= MIN_GRADIENT_NORM {
            break err;
        }
    });
    out
}
