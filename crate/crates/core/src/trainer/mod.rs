//! Forward and backward passes, momentum SGD, and fine-tuning.
//!
//! Training always happens inside the current parametrization: the weights
//! of group members are updated directly and ranks never change.

pub mod data;
mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelgraph::{ActShape, LayerKind, ModelGraph};
pub use data::{from_bytes, gen_synthetic, gen_synthetic_bytes, Batch, Dataset, SyntheticSpec};
use ops::Geom;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Stop after this many epochs without a better eval accuracy.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub eval_loss: Vec<f64>,
    pub eval_accuracy: Vec<f64>,
    /// 1-based epoch whose weights were returned; 0 means the starting weights.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// Gradient of one layer's weight and bias, in the layer's storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Per-layer gradients, aligned with `ModelGraph::layers`; `None` for layers
/// without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

/// Activations kept by [`forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub batch: usize,
    /// Input activation of every layer.
    pub inputs: Vec<Vec<f64>>,
    /// Per-sample shape of every layer input.
    pub shapes: Vec<ActShape>,
    pub logits: Vec<f64>,
    pool_args: Vec<Option<Vec<usize>>>,
}

fn spatial(s: ActShape) -> (usize, usize, usize) {
    match s {
        ActShape::Spatial { h, w, c } => (h, w, c),
        ActShape::Flat { n } => (1, 1, n),
    }
}

fn geom(n: usize, input: ActShape, output: ActShape) -> Geom {
    let (h, w, _) = spatial(input);
    let (ho, wo, _) = spatial(output);
    Geom { n, h, w, ho, wo }
}

fn check_input(g: &ModelGraph, x: &[f64], n: usize) -> Result<()> {
    let per = g.input_act().numel();
    if x.len() != n * per {
        return Err(Error::ShapeMismatch(format!(
            "batch of {n} needs {} inputs, got {}",
            n * per,
            x.len()
        )));
    }
    Ok(())
}

fn layer_forward(kind: &LayerKind, x: &[f64], n: usize, input: ActShape, output: ActShape) -> (Vec<f64>, Option<Vec<usize>>) {
    match kind {
        LayerKind::Conv2d(c) => (ops::conv_forward(c, x, geom(n, input, output)), None),
        LayerKind::Fc(fc) => (ops::fc_forward(fc, x, n), None),
        LayerKind::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), None),
        LayerKind::MaxPool2d { size, stride } => {
            let (_, _, c) = spatial(input);
            let (y, arg) = ops::maxpool_forward(x, geom(n, input, output), c, *size, *stride);
            (y, Some(arg))
        }
        LayerKind::Flatten | LayerKind::SoftmaxXentHead => (x.to_vec(), None),
    }
}

/// Logits for a batch of `n` NHWC inputs.
pub fn forward(g: &ModelGraph, x: &[f64], n: usize) -> Result<Vec<f64>> {
    check_input(g, x, n)?;
    let outs = g.infer_shapes()?;
    let mut shape = g.input_act();
    let mut act = x.to_vec();
    for (layer, &out) in g.layers().iter().zip(&outs) {
        act = layer_forward(&layer.kind, &act, n, shape, out).0;
        shape = out;
    }
    Ok(act)
}

/// Forward pass that keeps every layer input.
pub fn forward_cached(g: &ModelGraph, x: &[f64], n: usize) -> Result<Trace> {
    check_input(g, x, n)?;
    let outs = g.infer_shapes()?;
    let mut shape = g.input_act();
    let mut act = x.to_vec();
    let mut inputs = Vec::with_capacity(outs.len());
    let mut shapes = Vec::with_capacity(outs.len());
    let mut pool_args = Vec::with_capacity(outs.len());
    for (layer, &out) in g.layers().iter().zip(&outs) {
        let (y, arg) = layer_forward(&layer.kind, &act, n, shape, out);
        inputs.push(std::mem::replace(&mut act, y));
        shapes.push(shape);
        pool_args.push(arg);
        shape = out;
    }
    Ok(Trace {
        batch: n,
        inputs,
        shapes,
        logits: act,
        pool_args,
    })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_xent(logits: &[f64], targets: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if logits.len() != n * classes {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {n} samples of {classes} classes",
            logits.len()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::InvalidParameter(format!("target {t} with {classes} classes")));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[t];
        for (k, gk) in grad[i * classes..(i + 1) * classes].iter_mut().enumerate() {
            *gk = ((row[k] - m).exp() / z - if k == t { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

fn classes_of(g: &ModelGraph) -> Result<usize> {
    match g.output_shape()? {
        ActShape::Flat { n } => Ok(n),
        s => Err(Error::ShapeMismatch(format!("model output {s} is not a logit vector"))),
    }
}

/// Mean cross-entropy of a batch and the gradient of every weight and bias.
pub fn loss_and_grad(g: &ModelGraph, batch: &Batch) -> Result<(f64, Gradients)> {
    let classes = classes_of(g)?;
    let n = batch.len();
    let trace = forward_cached(g, &batch.inputs, n)?;
    let (loss, mut dy) = softmax_xent(&trace.logits, &batch.targets, classes)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let outs = g.infer_shapes()?;
    let mut grads: Vec<Option<ParamGrad>> = vec![None; g.layers().len()];
    for (i, layer) in g.layers().iter().enumerate().rev() {
        let x = &trace.inputs[i];
        let input = trace.shapes[i];
        dy = match &layer.kind {
            LayerKind::Conv2d(c) => {
                let (dx, dw, db) = ops::conv_backward(c, x, &dy, geom(n, input, outs[i]));
                grads[i] = Some(ParamGrad { weight: dw, bias: db });
                dx
            }
            LayerKind::Fc(fc) => {
                let (dx, dw, db) = ops::fc_backward(fc, x, &dy, n);
                grads[i] = Some(ParamGrad { weight: dw, bias: db });
                dx
            }
            LayerKind::Relu => dy.iter().zip(x).map(|(&gy, &v)| if v > 0.0 { gy } else { 0.0 }).collect(),
            LayerKind::MaxPool2d { .. } => {
                let arg = trace.pool_args[i].as_ref().expect("pool layers record argmax");
                ops::maxpool_backward(&dy, arg, x.len())
            }
            LayerKind::Flatten | LayerKind::SoftmaxXentHead => dy,
        };
    }
    Ok((loss, Gradients { layers: grads }))
}

/// Momentum SGD with optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: TrainConfig,
    velocity: Vec<Option<ParamGrad>>,
}

impl Sgd {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ·v + (∇ + λ·w)`, `w ← w − lr·v`.
    pub fn step(&mut self, g: &mut ModelGraph, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != g.layers().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} layers",
                grads.layers.len(),
                g.layers().len()
            )));
        }
        if self.velocity.len() != grads.layers.len() {
            self.velocity = vec![None; grads.layers.len()];
        }
        let TrainConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
            ..
        } = self.cfg;
        for ((layer, grad), vel) in g.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            let (Some((w, b)), Some(grad)) = (layer.kind.params_mut(), grad) else {
                continue;
            };
            if w.len() != grad.weight.len() || b.as_ref().map(|b| b.len()) != grad.bias.as_ref().map(Vec::len) {
                return Err(Error::ShapeMismatch(format!("gradient shape for `{}`", layer.name)));
            }
            let v = vel.get_or_insert_with(|| ParamGrad {
                weight: vec![0.0; w.len()],
                bias: grad.bias.as_ref().map(|b| vec![0.0; b.len()]),
            });
            update(w, &grad.weight, &mut v.weight, lr, mu, wd);
            if let (Some(b), Some(gb), Some(vb)) = (b, &grad.bias, &mut v.bias) {
                update(b, gb, vb, lr, mu, 0.0);
            }
        }
        Ok(())
    }
}

fn update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = mu * *vi + gi + wd * *wi;
        *wi -= lr * *vi;
    }
}

/// One SGD step without momentum state: `w ← w − lr·(∇ + λ·w)`.
pub fn sgd_step(g: &mut ModelGraph, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    Sgd::new(TrainConfig { momentum: 0.0, ..*cfg }).step(g, grads)
}

/// Accuracy and mean loss over a dataset.
pub fn evaluate(g: &ModelGraph, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let classes = classes_of(g)?;
    let (mut correct, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let b = data.batch(chunk);
        let logits = forward(g, &b.inputs, b.len())?;
        let (l, _) = softmax_xent(&logits, &b.targets, classes)?;
        loss += l * b.len() as f64;
        correct += count_correct(&logits, &b.targets, classes);
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

fn count_correct(logits: &[f64], targets: &[usize], classes: usize) -> usize {
    logits
        .chunks_exact(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k);
            best == Some(t)
        })
        .count()
}

/// Trains the model's current weights with momentum SGD and returns the
/// weights with the best eval accuracy (the starting weights included),
/// stopping early after `patience` epochs without improvement.
pub fn fine_tune(g: &ModelGraph, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<(ModelGraph, TrainHistory)> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 || train.is_empty() {
        return Ok((g.clone(), history));
    }
    let classes = classes_of(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = g.clone();
    let mut sgd = Sgd::new(*cfg);
    let mut best = g.clone();
    let mut best_acc = evaluate(g, eval)?.0;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let order = train.shuffled(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk);
            let (loss, grads) = match loss_and_grad(&model, &batch) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        history: Box::new(history),
                    })
                }
                Err(e) => return Err(e),
            };
            let logits = forward(&model, &batch.inputs, batch.len())?;
            correct += count_correct(&logits, &batch.targets, classes);
            loss_sum += loss * batch.len() as f64;
            sgd.step(&mut model, &grads)?;
        }
        let (eval_acc, eval_loss) = evaluate(&model, eval)?;
        if !eval_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        history.train_loss.push(loss_sum / train.len() as f64);
        history.train_accuracy.push(correct as f64 / train.len() as f64);
        history.eval_loss.push(eval_loss);
        history.eval_accuracy.push(eval_acc);
        if eval_acc > best_acc || (history.best_epoch == 0 && eval.is_empty()) {
            best_acc = eval_acc;
            best = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    if history.best_epoch > 0 {
        best.clear_orthonormal();
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{cpd3_decompose, svd_decompose, tucker2_decompose, AlsOptions, MultilinearRank2};
    use crate::linalg::Matrix2;
    use crate::modelgraph::{zoo, Conv2d, Layer, Linear};
    use crate::tensor::{reshape_kernel, Kernel4};
    use crate::testutil::{randn, randn_tensor};

    fn conv(d: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, seed: u64) -> LayerKind {
        let k = Kernel4::new(randn_tensor(vec![d, d, c_out, c_in], seed)).unwrap();
        let b = randn(c_out, 1, seed + 100).into_vec();
        LayerKind::Conv2d(Conv2d::new(k, Some(b), stride, pad).unwrap())
    }

    /// Tiny model exercising every layer kind.
    fn tiny_model() -> ModelGraph {
        let k = Kernel4::new(randn_tensor(vec![3, 3, 3, 1], 7)).unwrap();
        let dw = Conv2d::depthwise(k, Some(vec![0.1, 0.2, -0.1]), 1, 1).unwrap();
        ModelGraph::new([6, 6, 2])
            .unwrap()
            .with("c1", conv(3, 2, 3, 1, 1, 1))
            .unwrap()
            .with("r1", LayerKind::Relu)
            .unwrap()
            .with("dw", LayerKind::Conv2d(dw))
            .unwrap()
            .with("p1", LayerKind::MaxPool2d { size: 2, stride: 2 })
            .unwrap()
            .with("c2", conv(3, 3, 4, 2, 1, 2))
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(randn(16, 5, 3), Some(vec![0.0; 5])).unwrap()))
            .unwrap()
            .with("head", LayerKind::SoftmaxXentHead)
            .unwrap()
    }

    fn batch_for(g: &ModelGraph, n: usize, seed: u64) -> Batch {
        let classes = classes_of(g).unwrap();
        Batch {
            inputs: randn(n * g.input_act().numel(), 1, seed).into_vec(),
            targets: (0..n).map(|i| (i * 7 + seed as usize) % classes).collect(),
        }
    }

    fn loss_of(g: &ModelGraph, b: &Batch) -> f64 {
        let logits = forward(g, &b.inputs, b.len()).unwrap();
        softmax_xent(&logits, &b.targets, classes_of(g).unwrap()).unwrap().0
    }

    /// Checks every layer's parameter gradient against central differences:
    /// the relative error of the whole per-layer vector must stay below 1e-4.
    fn check_gradients(g: &ModelGraph, b: &Batch) {
        let (_, grads) = loss_and_grad(g, b).unwrap();
        let h = 1e-5;
        for (li, layer) in g.layers().iter().enumerate() {
            let Some(pg) = &grads.layers[li] else { continue };
            let (w, bias) = layer.kind.params().unwrap();
            let n_w = w.len();
            let n_b = bias.map_or(0, |b| b.len());
            let (mut diff, mut norm) = (0.0, 0.0);
            for k in 0..n_w + n_b {
                let mut plus = g.clone();
                let mut minus = g.clone();
                let bump = |m: &mut ModelGraph, delta: f64| {
                    let (w, b) = m.layers_mut()[li].kind.params_mut().unwrap();
                    if k < n_w {
                        w[k] += delta;
                    } else {
                        b.unwrap()[k - n_w] += delta;
                    }
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let numeric = (loss_of(&plus, b) - loss_of(&minus, b)) / (2.0 * h);
                let analytic = if k < n_w { pg.weight[k] } else { pg.bias.as_ref().unwrap()[k - n_w] };
                diff += (numeric - analytic).powi(2);
                norm += numeric.powi(2).max(analytic.powi(2));
            }
            let rel = (diff / norm.max(1e-300)).sqrt();
            assert!(rel <= 1e-4, "{}: relative gradient error {rel:e}", layer.name);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = tiny_model();
        assert!(g.num_params() <= 1000);
        check_gradients(&g, &batch_for(&g, 3, 11));
    }

    #[test]
    fn decomposed_gradients_match_finite_differences() {
        let base = ModelGraph::new([5, 5, 3])
            .unwrap()
            .with("c", conv(3, 3, 4, 1, 1, 20))
            .unwrap()
            .with("r", LayerKind::Relu)
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(randn(100, 6, 21), Some(vec![0.0; 6])).unwrap()))
            .unwrap()
            .with("head", LayerKind::SoftmaxXentHead)
            .unwrap();
        let k = match &base.layers()[0].kind {
            LayerKind::Conv2d(c) => c.weight.clone(),
            _ => unreachable!(),
        };
        let w = randn(100, 6, 21);
        let t = base
            .substitute_conv_tucker2("c", &tucker2_decompose(&k, MultilinearRank2::new(2, 2)).unwrap())
            .unwrap()
            .substitute_fc_svd("fc", &svd_decompose(&w, 3).unwrap())
            .unwrap();
        check_gradients(&t, &batch_for(&t, 2, 22));
        let cp = cpd3_decompose(&reshape_kernel(&k), 2, &AlsOptions::default()).unwrap().factors;
        let c = base.substitute_conv_cpd3("c", &cp).unwrap();
        check_gradients(&c, &batch_for(&c, 2, 23));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let g = ModelGraph::new([2, 2, 1])
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(Matrix2::zeros(4, 3), Some(vec![0.0; 3])).unwrap()))
            .unwrap();
        assert_eq!(forward(&g, &[1.0, 2.0, 3.0, 4.0], 1).unwrap(), vec![0.0; 3]);
        let (loss, _) = softmax_xent(&[0.0; 3], &[1], 3).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fc_is_a_matrix_product() {
        let w = randn(4, 3, 1);
        let g = ModelGraph::new([1, 1, 4])
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(w.clone(), None).unwrap()))
            .unwrap();
        let x = randn(2, 4, 2);
        let y = forward(&g, &x.transpose().into_vec(), 2).unwrap();
        let expected = x.matmul(&w).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((y[i * 3 + j] - expected.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_blocks_negative_inputs() {
        let g = ModelGraph::new([1, 1, 2])
            .unwrap()
            .with("r", LayerKind::Relu)
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(Matrix2::identity(2), None).unwrap()))
            .unwrap();
        let b = Batch {
            inputs: vec![-1.0, 2.0],
            targets: vec![0],
        };
        let (_, grads) = loss_and_grad(&g, &b).unwrap();
        let gw = &grads.layers[2].as_ref().unwrap().weight;
        // rows of dW for the blocked input are zero
        assert_eq!(gw[0], 0.0);
        assert_eq!(gw[2], 0.0);
        assert!(gw[1] != 0.0);
    }

    #[test]
    fn sgd_step_rules() {
        let mut g = tiny_model();
        let b = batch_for(&g, 2, 4);
        let (_, grads) = loss_and_grad(&g, &b).unwrap();
        let before = g.clone();
        sgd_step(&mut g, &grads, &TrainConfig { learning_rate: 0.0, ..Default::default() }).unwrap();
        assert_eq!(g, before);

        // momentum 0 is plain gradient descent
        let mut m = g.clone();
        Sgd::new(TrainConfig { momentum: 0.0, learning_rate: 0.1, ..Default::default() }).step(&mut m, &grads).unwrap();
        let (w0, _) = g.layers()[0].kind.params().unwrap();
        let (w1, _) = m.layers()[0].kind.params().unwrap();
        let gw = &grads.layers[0].as_ref().unwrap().weight;
        for k in 0..w0.len() {
            assert!((w1[k] - (w0[k] - 0.1 * gw[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_converges_geometrically() {
        // loss = ½(w − 3)² through a 1×1 fc layer with a zero input and a bias
        let mut g = ModelGraph::new([1, 1, 1])
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(Matrix2::zeros(1, 1), Some(vec![0.0])).unwrap()))
            .unwrap();
        let cfg = TrainConfig { learning_rate: 0.1, momentum: 0.0, ..Default::default() };
        let mut errs = Vec::new();
        for _ in 0..20 {
            let b = g.layers()[1].kind.params().unwrap().1.unwrap()[0];
            errs.push((b - 3.0).abs());
            let grads = Gradients {
                layers: vec![None, Some(ParamGrad { weight: vec![0.0], bias: Some(vec![b - 3.0]) })],
            };
            sgd_step(&mut g, &grads, &cfg).unwrap();
        }
        for w in errs.windows(2) {
            assert!((w[1] / w[0] - 0.9).abs() < 1e-12);
        }
    }

    fn separable(n: usize, seed: u64) -> Dataset {
        let x = randn(n, 4, seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let row: Vec<f64> = (0..4).map(|j| x.get(i, j)).collect();
            labels.push(usize::from(row[0] + 0.5 * row[1] > 0.0));
            images.extend(row);
        }
        Dataset::new(images, labels, [1, 1, 4], 2).unwrap()
    }

    fn linear_model() -> ModelGraph {
        ModelGraph::new([1, 1, 4])
            .unwrap()
            .with("flat", LayerKind::Flatten)
            .unwrap()
            .with("fc", LayerKind::Fc(Linear::new(Matrix2::zeros(4, 2), Some(vec![0.0; 2])).unwrap()))
            .unwrap()
            .with("head", LayerKind::SoftmaxXentHead)
            .unwrap()
    }

    #[test]
    fn linear_model_learns_separable_set() {
        let train = separable(200, 1);
        let cfg = TrainConfig { epochs: 50, learning_rate: 0.5, patience: 50, ..Default::default() };
        let (g, h) = fine_tune(&linear_model(), &train, &train, &cfg).unwrap();
        assert!(h.epochs() <= 50);
        assert!(evaluate(&g, &train).unwrap().0 >= 0.99);
    }

    #[test]
    fn full_batch_loss_does_not_increase() {
        let data = separable(64, 2);
        let mut g = linear_model();
        let b = data.batch(&(0..64).collect::<Vec<_>>());
        let cfg = TrainConfig { learning_rate: 0.05, momentum: 0.0, ..Default::default() };
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            let (loss, grads) = loss_and_grad(&g, &b).unwrap();
            assert!(loss <= last + 1e-12);
            last = loss;
            sgd_step(&mut g, &grads, &cfg).unwrap();
        }
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = separable(50, 3);
        let g = linear_model();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (same, h) = fine_tune(&g, &data, &data, &cfg).unwrap();
        assert_eq!(same, g);
        assert_eq!(h.epochs(), 0);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let a = fine_tune(&g, &data, &data, &cfg).unwrap();
        let b = fine_tune(&g, &data, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.eval_accuracy.len(), a.1.epochs());
        assert_eq!(evaluate(&a.0, &data).unwrap(), evaluate(&a.0, &data).unwrap());
    }

    #[test]
    fn fine_tune_keeps_member_shapes() {
        let g = zoo::toy_cnn(1).unwrap();
        let k = match &g.layer("conv2").unwrap().kind {
            LayerKind::Conv2d(c) => c.weight.clone(),
            _ => unreachable!(),
        };
        let f = tucker2_decompose(&k, MultilinearRank2::new(20, 10)).unwrap();
        let t = g.substitute_conv_tucker2("conv2", &f).unwrap();
        let data = data::gen_synthetic(&SyntheticSpec { samples: 64, ..Default::default() }, 5).unwrap();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let (tuned, _) = fine_tune(&t, &data, &data, &cfg).unwrap();
        let shapes = |m: &ModelGraph| m.infer_shapes().unwrap();
        assert_eq!(shapes(&tuned), shapes(&t));
        assert_eq!(tuned.groups()[0].ranks, t.groups()[0].ranks);
        for (a, b) in tuned.layers().iter().zip(t.layers()) {
            assert_eq!(a.name, b.name);
            let (Some((wa, _)), Some((wb, _))) = (a.kind.params(), b.kind.params()) else { continue };
            assert_eq!(wa.len(), wb.len());
        }
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let data = data::gen_synthetic(&SyntheticSpec { samples: 2000, ..Default::default() }, 9).unwrap();
        let mut shuffled = data.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        shuffled.labels.iter_mut().for_each(|l| *l = rng.random_range(0..10));
        let (acc, _) = evaluate(&zoo::toy_cnn(2).unwrap(), &shuffled).unwrap();
        assert!((acc - 0.1).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = tiny_model();
        assert!(forward(&g, &[0.0; 5], 1).is_err());
        let mut bad = g.clone();
        bad.push(Layer::new("extra", LayerKind::Relu)).unwrap();
        assert!(forward(&bad, &vec![0.0; 72], 1).is_ok());
    }
}
