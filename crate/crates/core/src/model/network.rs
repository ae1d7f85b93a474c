//! Pre-activation residual network: a 3x3 stem convolution, stages of
//! pre-activation blocks (`BN -> ReLU -> conv -> BN -> ReLU -> conv`, plus a
//! shortcut), a final `BN -> ReLU`, global average pooling and a linear
//! classifier. The first block of every stage after the first downsamples
//! with stride 2; shortcuts switch to a 1x1 projection whenever the shape
//! changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::layers::{
    bn_backward, bn_forward_eval, bn_forward_train, conv_backward, conv_forward, global_avg_pool,
    global_avg_pool_backward, linear_backward, linear_forward, relu_backward_inplace, relu_inplace,
    BnBatchStats, BnCache, ConvGeom,
};
use crate::model::scalar::Scalar;
use crate::model::ConvNetConfig;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the newest batch in the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Whether the L2 penalty applies to tensors of this kind.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub len: usize,
    pub fan_in: usize,
}

/// Trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: Vec<Vec<T>>,
    pub running_mean: Vec<Vec<T>>,
    pub running_var: Vec<Vec<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Tensor-shaped zeros, used for gradients and velocities.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    /// Moves running statistics towards the batch statistics of one
    /// training step.
    pub(crate) fn update_running(&mut self, stats: &[BnBatchStats]) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for ((rm, rv), s) in self.running_mean.iter_mut().zip(&mut self.running_var).zip(stats) {
            for (r, &b) in rm.iter_mut().zip(&s.mean) {
                *r = keep * *r + m * T::of(b);
            }
            for (r, &b) in rv.iter_mut().zip(&s.var) {
                *r = keep * *r + m * T::of(b);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            v.iter().map(|t| t.iter().map(|&x| U::of(x.as_f64())).collect()).collect()
        };
        ModelParams {
            tensors: conv(&self.tensors),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct BnLayer {
    channels: usize,
    plane: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct Block {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
    projection: Option<ConvLayer>,
    residual: bool,
}

#[derive(Debug, Clone)]
struct LinearLayer {
    features: usize,
    classes: usize,
    weight: usize,
    bias: usize,
}

/// Layer layout derived from a [`ConvNetConfig`]. Parameters live in a
/// separate [`ModelParams`] so one network can drive several parameter sets.
#[derive(Debug, Clone)]
pub struct Network {
    config: ConvNetConfig,
    specs: Vec<ParamSpec>,
    bn_count: usize,
    stem: ConvLayer,
    blocks: Vec<Block>,
    final_bn: BnLayer,
    fc: LinearLayer,
}

struct Builder {
    specs: Vec<ParamSpec>,
    bn_count: usize,
}

impl Builder {
    fn push(&mut self, name: String, kind: ParamKind, len: usize, fan_in: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            kind,
            len,
            fan_in,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, geom: ConvGeom) -> ConvLayer {
        ConvLayer {
            geom,
            weight: self.push(format!("{name}.weight"), ParamKind::ConvWeight, geom.weight_len(), geom.patch()),
            bias: self.push(format!("{name}.bias"), ParamKind::Bias, geom.out_c, geom.patch()),
        }
    }

    fn bn(&mut self, name: &str, channels: usize, plane: usize) -> BnLayer {
        let layer = BnLayer {
            channels,
            plane,
            gamma: self.push(format!("{name}.gamma"), ParamKind::BnScale, channels, 0),
            beta: self.push(format!("{name}.beta"), ParamKind::BnShift, channels, 0),
            stats: self.bn_count,
        };
        self.bn_count += 1;
        layer
    }
}

impl Network {
    pub fn new(config: &ConvNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            specs: Vec::new(),
            bn_count: 0,
        };
        let input = config.input;
        let (mut h, mut w) = (input.height, input.width);
        let stem = b.conv("stem", ConvGeom::new(input.channels, config.widths[0], 3, 1, 1, h, w));
        let mut channels = config.widths[0];
        let mut blocks = Vec::new();
        for (s, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for i in 0..count {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{i}");
                let bn1 = b.bn(&format!("{name}.bn1"), channels, h * w);
                let conv1 = b.conv(&format!("{name}.conv1"), ConvGeom::new(channels, width, 3, stride, 1, h, w));
                let (oh, ow) = (conv1.geom.out_h, conv1.geom.out_w);
                let bn2 = b.bn(&format!("{name}.bn2"), width, oh * ow);
                let conv2 = b.conv(&format!("{name}.conv2"), ConvGeom::new(width, width, 3, 1, 1, oh, ow));
                let projection = (config.residual && (stride != 1 || channels != width)).then(|| {
                    b.conv(&format!("{name}.shortcut"), ConvGeom::new(channels, width, 1, stride, 0, h, w))
                });
                blocks.push(Block {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    projection,
                    residual: config.residual,
                });
                channels = width;
                (h, w) = (oh, ow);
            }
        }
        let final_bn = b.bn("final_bn", channels, h * w);
        let fc = LinearLayer {
            features: channels,
            classes: config.classes,
            weight: b.push("fc.weight".into(), ParamKind::LinearWeight, config.classes * channels, channels),
            bias: b.push("fc.bias".into(), ParamKind::Bias, config.classes, channels),
        };
        Ok(Network {
            config: config.clone(),
            specs: b.specs,
            bn_count: b.bn_count,
            stem,
            blocks,
            final_bn,
            fc,
        })
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.len).sum()
    }

    /// Number of weighted (convolution and linear) layers.
    pub fn weighted_layers(&self) -> usize {
        self.specs.iter().filter(|s| s.kind.decays()).count()
    }

    /// He-normal initialization: weights ~ N(0, 2 / fan_in), drawn in
    /// parameter order from ChaCha8 seeded with the config seed; biases and
    /// batch-norm shifts 0, batch-norm scales 1, running variance 1.
    pub fn init_params<T: Scalar>(&self) -> ModelParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let tensors = self
            .specs
            .iter()
            .map(|spec| match spec.kind {
                ParamKind::ConvWeight | ParamKind::LinearWeight => {
                    let normal = Normal::new(0.0, (2.0 / spec.fan_in as f64).sqrt())
                        .expect("positive standard deviation");
                    (0..spec.len).map(|_| T::of(normal.sample(&mut rng))).collect()
                }
                ParamKind::BnScale => vec![T::one(); spec.len],
                ParamKind::Bias | ParamKind::BnShift => vec![T::zero(); spec.len],
            })
            .collect();
        let bn_channels = self.bn_layers().map(|l| l.channels).collect::<Vec<_>>();
        ModelParams {
            tensors,
            running_mean: bn_channels.iter().map(|&c| vec![T::zero(); c]).collect(),
            running_var: bn_channels.iter().map(|&c| vec![T::one(); c]).collect(),
        }
    }

    fn bn_layers(&self) -> impl Iterator<Item = &BnLayer> {
        let mut layers: Vec<&BnLayer> = Vec::with_capacity(self.bn_count);
        for b in &self.blocks {
            layers.push(&b.bn1);
            layers.push(&b.bn2);
        }
        layers.push(&self.final_bn);
        layers.sort_by_key(|l| l.stats);
        layers.into_iter()
    }

    /// Checks that `params` has the tensor layout of this network.
    pub fn check_params<T: Scalar>(&self, params: &ModelParams<T>) -> Result<()> {
        let ok = params.tensors.len() == self.specs.len()
            && params.tensors.iter().zip(&self.specs).all(|(t, s)| t.len() == s.len)
            && params.running_mean.len() == self.bn_count
            && params.running_var.len() == self.bn_count;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{} tensors / {} values", self.specs.len(), self.param_count()),
                actual: format!("{} tensors / {} values", params.tensors.len(), params.param_count()),
            })
        }
    }

    fn check_batch<T>(&self, batch: &[T], n: usize) -> Result<()> {
        let len = self.config.input.len();
        if batch.len() != n * len {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} images of {}", self.config.input),
                actual: format!("{} values", batch.len()),
            });
        }
        Ok(())
    }

    fn conv<T: Scalar>(&self, layer: &ConvLayer, p: &ModelParams<T>, n: usize, x: &[T], exec: Execution) -> Vec<T> {
        conv_forward(&layer.geom, n, x, &p.tensors[layer.weight], &p.tensors[layer.bias], exec)
    }

    fn bn_eval<T: Scalar>(&self, layer: &BnLayer, p: &ModelParams<T>, n: usize, x: &[T]) -> Vec<T> {
        bn_forward_eval(
            n,
            layer.channels,
            layer.plane,
            x,
            &p.tensors[layer.gamma],
            &p.tensors[layer.beta],
            &p.running_mean[layer.stats],
            &p.running_var[layer.stats],
            BN_EPSILON,
        )
    }

    /// Logits (`n x classes`, row-major) in evaluation mode, with batch
    /// norm using running statistics. Rows depend only on their own image.
    pub fn forward<T: Scalar>(&self, params: &ModelParams<T>, batch: &[T], n: usize, exec: Execution) -> Result<Vec<T>> {
        self.check_params(params)?;
        self.check_batch(batch, n)?;
        let mut x = self.conv(&self.stem, params, n, batch, exec);
        for block in &self.blocks {
            let mut a1 = self.bn_eval(&block.bn1, params, n, &x);
            relu_inplace(&mut a1);
            let shortcut = match (&block.projection, block.residual) {
                (Some(proj), _) => Some(self.conv(proj, params, n, &a1, exec)),
                (None, true) => Some(x),
                (None, false) => None,
            };
            let h1 = self.conv(&block.conv1, params, n, &a1, exec);
            let mut a2 = self.bn_eval(&block.bn2, params, n, &h1);
            relu_inplace(&mut a2);
            let mut h2 = self.conv(&block.conv2, params, n, &a2, exec);
            if let Some(s) = shortcut {
                h2.iter_mut().zip(&s).for_each(|(a, &b)| *a += b);
            }
            x = h2;
        }
        let mut af = self.bn_eval(&self.final_bn, params, n, &x);
        relu_inplace(&mut af);
        let pooled = global_avg_pool(n, self.fc.features, self.final_bn.plane, &af);
        let logits = linear_forward(
            n,
            self.fc.features,
            self.fc.classes,
            &pooled,
            &params.tensors[self.fc.weight],
            &params.tensors[self.fc.bias],
        );
        check_finite(&logits, "logits")?;
        Ok(logits)
    }

    /// Mean softmax cross-entropy plus `(l2 / 2) * sum(w^2)` over convolution
    /// and linear weights, with its gradient. Batch norm runs in training
    /// mode (batch statistics).
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        batch: &[T],
        labels: &[u8],
        l2: f64,
        exec: Execution,
    ) -> Result<LossGrad<T>> {
        let n = labels.len();
        self.check_params(params)?;
        self.check_batch(batch, n)?;
        if n == 0 {
            return Err(Error::InvalidParameter("empty training batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.fc.classes) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} outside class range 0..{}",
                self.fc.classes
            )));
        }
        let mut stats: Vec<Option<BnBatchStats>> = (0..self.bn_count).map(|_| None).collect();
        let bn_train = |layer: &BnLayer, x: &[T], stats: &mut Vec<Option<BnBatchStats>>| {
            let (y, cache, s) = bn_forward_train(
                n,
                layer.channels,
                layer.plane,
                x,
                &params.tensors[layer.gamma],
                &params.tensors[layer.beta],
                BN_EPSILON,
            );
            stats[layer.stats] = Some(s);
            (y, cache)
        };

        // Forward pass, keeping what the backward pass needs.
        struct BlockTape<T> {
            bn1: BnCache<T>,
            a1: Vec<T>,
            bn2: BnCache<T>,
            a2: Vec<T>,
        }
        let mut x = self.conv(&self.stem, params, n, batch, exec);
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (mut a1, bn1) = bn_train(&block.bn1, &x, &mut stats);
            relu_inplace(&mut a1);
            let shortcut = match (&block.projection, block.residual) {
                (Some(proj), _) => Some(self.conv(proj, params, n, &a1, exec)),
                (None, true) => Some(x),
                (None, false) => None,
            };
            let h1 = self.conv(&block.conv1, params, n, &a1, exec);
            let (mut a2, bn2) = bn_train(&block.bn2, &h1, &mut stats);
            relu_inplace(&mut a2);
            let mut h2 = self.conv(&block.conv2, params, n, &a2, exec);
            if let Some(s) = shortcut {
                h2.iter_mut().zip(&s).for_each(|(a, &b)| *a += b);
            }
            tapes.push(BlockTape { bn1, a1, bn2, a2 });
            x = h2;
        }
        let (mut af, final_cache) = bn_train(&self.final_bn, &x, &mut stats);
        relu_inplace(&mut af);
        let (features, classes) = (self.fc.features, self.fc.classes);
        let pooled = global_avg_pool(n, features, self.final_bn.plane, &af);
        let logits = linear_forward(
            n,
            features,
            classes,
            &pooled,
            &params.tensors[self.fc.weight],
            &params.tensors[self.fc.bias],
        );
        check_finite(&logits, "logits")?;

        // Softmax cross-entropy, accumulated in f64.
        let mut data_loss = 0.0;
        let mut dlogits = vec![T::zero(); n * classes];
        for ((row, drow), &label) in logits.chunks_exact(classes).zip(dlogits.chunks_exact_mut(classes)).zip(labels) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data_loss += sum.ln() + max - row[label as usize].as_f64();
            for (k, (d, e)) in drow.iter_mut().zip(&exps).enumerate() {
                let target = if k == label as usize { 1.0 } else { 0.0 };
                *d = T::of((e / sum - target) / n as f64);
            }
        }
        data_loss /= n as f64;

        // Backward pass.
        let mut grads = params.zeros_like();
        let (dpooled, dw, db) = linear_backward(n, features, classes, &pooled, &params.tensors[self.fc.weight], &dlogits);
        grads[self.fc.weight] = dw;
        grads[self.fc.bias] = db;
        let mut dx = global_avg_pool_backward(self.final_bn.plane, &dpooled);
        relu_backward_inplace(&af, &mut dx);
        let (mut dx, dg, dbeta) = bn_backward(
            n,
            self.final_bn.channels,
            self.final_bn.plane,
            &final_cache,
            &params.tensors[self.final_bn.gamma],
            &dx,
        );
        grads[self.final_bn.gamma] = dg;
        grads[self.final_bn.beta] = dbeta;

        for (block, tape) in self.blocks.iter().zip(tapes).rev() {
            let dout = dx;
            let g2 = conv_backward(&block.conv2.geom, n, &tape.a2, &params.tensors[block.conv2.weight], &dout, true, exec);
            grads[block.conv2.weight] = g2.weight;
            grads[block.conv2.bias] = g2.bias;
            let mut da2 = g2.input.expect("input gradient requested");
            relu_backward_inplace(&tape.a2, &mut da2);
            let (dh1, dg2, db2) = bn_backward(n, block.bn2.channels, block.bn2.plane, &tape.bn2, &params.tensors[block.bn2.gamma], &da2);
            grads[block.bn2.gamma] = dg2;
            grads[block.bn2.beta] = db2;
            let g1 = conv_backward(&block.conv1.geom, n, &tape.a1, &params.tensors[block.conv1.weight], &dh1, true, exec);
            grads[block.conv1.weight] = g1.weight;
            grads[block.conv1.bias] = g1.bias;
            let mut da1 = g1.input.expect("input gradient requested");
            let mut identity_grad = None;
            match (&block.projection, block.residual) {
                (Some(proj), _) => {
                    let gp = conv_backward(&proj.geom, n, &tape.a1, &params.tensors[proj.weight], &dout, true, exec);
                    grads[proj.weight] = gp.weight;
                    grads[proj.bias] = gp.bias;
                    let dproj = gp.input.expect("input gradient requested");
                    da1.iter_mut().zip(&dproj).for_each(|(a, &b)| *a += b);
                }
                (None, true) => identity_grad = Some(dout),
                (None, false) => {}
            }
            relu_backward_inplace(&tape.a1, &mut da1);
            let (mut dinput, dg1, db1) = bn_backward(n, block.bn1.channels, block.bn1.plane, &tape.bn1, &params.tensors[block.bn1.gamma], &da1);
            grads[block.bn1.gamma] = dg1;
            grads[block.bn1.beta] = db1;
            if let Some(id) = identity_grad {
                dinput.iter_mut().zip(&id).for_each(|(a, &b)| *a += b);
            }
            dx = dinput;
        }
        let gs = conv_backward(&self.stem.geom, n, batch, &params.tensors[self.stem.weight], &dx, false, exec);
        grads[self.stem.weight] = gs.weight;
        grads[self.stem.bias] = gs.bias;

        // L2 penalty on weights.
        let mut penalty = 0.0;
        if l2 != 0.0 {
            let coef = T::of(l2);
            for (spec, (g, w)) in self.specs.iter().zip(grads.iter_mut().zip(&params.tensors)) {
                if spec.kind.decays() {
                    penalty += w.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
                    g.iter_mut().zip(w).for_each(|(g, &w)| *g += coef * w);
                }
            }
            penalty *= 0.5 * l2;
        }
        let loss = data_loss + penalty;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite gradient in {}", self.specs[i].name)));
        }
        Ok(LossGrad {
            loss,
            data_loss,
            grads,
            logits,
            batch_stats: stats.into_iter().map(|s| s.expect("every batch-norm layer ran")).collect(),
        })
    }
}

fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("non-finite {what} at index {i}"))),
        None => Ok(()),
    }
}

/// Result of one training-mode forward/backward pass.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    /// Cross-entropy plus L2 penalty.
    pub loss: f64,
    /// Cross-entropy alone.
    pub data_loss: f64,
    /// Aligned with [`ModelParams::tensors`].
    pub grads: Vec<Vec<T>>,
    /// Training-mode logits, `n x classes`.
    pub logits: Vec<T>,
    pub(crate) batch_stats: Vec<BnBatchStats>,
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax in f64.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Shape;
    use proptest::prelude::*;
    use rand::Rng;

    fn config(widths: Vec<usize>, blocks: Vec<usize>, input: Shape, classes: usize, residual: bool) -> ConvNetConfig {
        ConvNetConfig {
            widths,
            blocks,
            input,
            classes,
            residual,
            seed: 3,
        }
    }

    fn random_batch(n: usize, shape: Shape, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Perturbs BN scales/shifts and biases away from their initial values
    /// so every parameter kind carries a non-trivial gradient.
    fn jitter(params: &mut ModelParams<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut params.tensors {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }

    fn grad_check(cfg: &ConvNetConfig, n: usize, l2: f64) {
        let net = Network::new(cfg).unwrap();
        let mut params = net.init_params::<f64>();
        jitter(&mut params, 11);
        let batch = random_batch(n, cfg.input, 12);
        let labels: Vec<u8> = (0..n).map(|i| (i % cfg.classes) as u8).collect();
        let exec = Execution::Sequential;
        let analytic = net.loss_and_grad(&params, &batch, &labels, l2, exec).unwrap().grads;
        let h = 1e-5;
        let mut worst = 0.0f64;
        for t in 0..params.tensors.len() {
            for i in 0..params.tensors[t].len() {
                let orig = params.tensors[t][i];
                params.tensors[t][i] = orig + h;
                let up = net.loss_and_grad(&params, &batch, &labels, l2, exec).unwrap().loss;
                params.tensors[t][i] = orig - h;
                let down = net.loss_and_grad(&params, &batch, &labels, l2, exec).unwrap().loss;
                params.tensors[t][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[t][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "{}[{i}]: analytic {a:e} numeric {numeric:e} rel {rel:e}",
                    net.param_specs()[t].name
                );
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_with_projection() {
        // Stage 0 uses an identity shortcut, stage 1 a strided projection.
        grad_check(&config(vec![2, 3], vec![1, 1], Shape::new(2, 8, 8), 3, true), 4, 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences_plain() {
        grad_check(&config(vec![3], vec![1], Shape::new(1, 8, 8), 4, false), 3, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_stem_only() {
        grad_check(&config(vec![2], vec![0], Shape::new(3, 8, 8), 2, true), 5, 5e-4);
    }

    #[test]
    fn layout_counts() {
        let net = Network::new(&ConvNetConfig::default()).unwrap();
        // Stem, 12 block convs, 2 projections, classifier.
        assert_eq!(net.weighted_layers(), 16);
        assert_eq!(net.param_specs().iter().filter(|s| s.kind == ParamKind::ConvWeight).count(), 15);
        let p = net.init_params::<f32>();
        assert_eq!(p.param_count(), net.param_count());
        net.check_params(&p).unwrap();
    }

    #[test]
    fn he_normal_std_for_64_channel_conv() {
        let net = Network::new(&ConvNetConfig::default()).unwrap();
        let p = net.init_params::<f64>();
        let idx = net
            .param_specs()
            .iter()
            .position(|s| s.name == "stage2.block1.conv1.weight")
            .unwrap();
        let spec = &net.param_specs()[idx];
        assert_eq!((spec.len, spec.fan_in), (64 * 64 * 9, 576));
        let w = &p.tensors[idx];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 576.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.1, "std {std} target {target}");
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let cfg = ConvNetConfig::default();
        let net = Network::new(&cfg).unwrap();
        let a = net.init_params::<f32>();
        assert_eq!(a, net.init_params::<f32>());
        for (spec, t) in net.param_specs().iter().zip(&a.tensors) {
            match spec.kind {
                ParamKind::Bias | ParamKind::BnShift => assert!(t.iter().all(|&v| v == 0.0)),
                ParamKind::BnScale => assert!(t.iter().all(|&v| v == 1.0)),
                _ => {}
            }
        }
        let other = Network::new(&ConvNetConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other.init_params::<f32>());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ConvNetConfig::default();
        c.widths = vec![16, 0, 64];
        assert!(Network::new(&c).is_err());
        c.widths = vec![16, 32];
        assert!(Network::new(&c).is_err());
        let c = ConvNetConfig {
            classes: 1,
            ..ConvNetConfig::default()
        };
        assert!(Network::new(&c).is_err());
    }

    #[test]
    fn single_conv_net_matches_brute_force() {
        let shape = Shape::new(2, 5, 4);
        let cfg = config(vec![3], vec![0], shape, 2, true);
        let net = Network::new(&cfg).unwrap();
        let mut p = net.init_params::<f64>();
        jitter(&mut p, 4);
        // Non-trivial running statistics for the final batch norm.
        p.running_mean[0] = vec![0.1, -0.2, 0.05];
        p.running_var[0] = vec![0.5, 1.5, 2.0];
        let x = random_batch(1, shape, 9);
        let logits = net.forward(&p, &x, 1, Execution::Sequential).unwrap();

        let (w, b) = (&p.tensors[0], &p.tensors[1]);
        let (gamma, beta) = (&p.tensors[2], &p.tensors[3]);
        let (fw, fb) = (&p.tensors[4], &p.tensors[5]);
        let mut pooled = [0.0f64; 3];
        for (o, pool) in pooled.iter_mut().enumerate() {
            for i in 0..5usize {
                for j in 0..4usize {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let (si, sj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..5).contains(&si) && (0..4).contains(&sj) {
                                    acc += w[((o * 2 + c) * 3 + ki) * 3 + kj] * x[(c * 5 + si as usize) * 4 + sj as usize];
                                }
                            }
                        }
                    }
                    let bn = (acc - p.running_mean[0][o]) / (p.running_var[0][o] + BN_EPSILON).sqrt() * gamma[o] + beta[o];
                    *pool += bn.max(0.0) / 20.0;
                }
            }
        }
        for k in 0..2 {
            let expect = fb[k] + (0..3).map(|f| fw[k * 3 + f] * pooled[f]).sum::<f64>();
            assert!((logits[k] - expect).abs() < 1e-12, "{} vs {expect}", logits[k]);
        }
    }

    #[test]
    fn rows_depend_only_on_their_image() {
        let shape = Shape::new(1, 8, 8);
        let net = Network::new(&config(vec![2, 4], vec![1, 1], shape, 3, true)).unwrap();
        let p = net.init_params::<f64>();
        let a = random_batch(1, shape, 1);
        let b = random_batch(1, shape, 2);
        let batch: Vec<f64> = [a.clone(), b, a.clone()].concat();
        let logits = net.forward(&p, &batch, 3, Execution::Parallel).unwrap();
        let alone = net.forward(&p, &a, 1, Execution::Sequential).unwrap();
        assert_eq!(&logits[0..3], &logits[6..9]);
        assert_eq!(&logits[0..3], &alone[..]);
        assert!(net.forward(&p, &batch, 2, Execution::Sequential).is_err());
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax_and_ln_k_loss() {
        let shape = Shape::new(1, 8, 8);
        let net = Network::new(&config(vec![2], vec![1], shape, 5, true)).unwrap();
        let mut p = net.init_params::<f64>();
        let fc = p.tensors.len() - 2;
        p.tensors[fc].iter_mut().for_each(|v| *v = 0.0);
        let batch = random_batch(4, shape, 3);
        let logits = net.forward(&p, &batch, 4, Execution::Sequential).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert!(softmax_rows(&logits, 5).iter().all(|&q| (q - 0.2).abs() < 1e-15));
        let lg = net.loss_and_grad(&p, &batch, &[0, 1, 2, 3], 0.0, Execution::Sequential).unwrap();
        assert!((lg.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l2_term_covers_weights_only() {
        let shape = Shape::new(1, 8, 8);
        let net = Network::new(&config(vec![2, 3], vec![1, 1], shape, 3, true)).unwrap();
        let mut p = net.init_params::<f64>();
        jitter(&mut p, 8);
        let batch = random_batch(2, shape, 5);
        let l2 = 0.01;
        let plain = net.loss_and_grad(&p, &batch, &[0, 1], 0.0, Execution::Sequential).unwrap();
        let reg = net.loss_and_grad(&p, &batch, &[0, 1], l2, Execution::Sequential).unwrap();
        let mut sq = 0.0;
        for (spec, ((g0, g1), w)) in net.param_specs().iter().zip(plain.grads.iter().zip(&reg.grads).zip(&p.tensors)) {
            for ((a, b), w) in g0.iter().zip(g1).zip(w) {
                let expect = if spec.kind.decays() { l2 * w } else { 0.0 };
                assert!((b - a - expect).abs() < 1e-12);
            }
            if spec.kind.decays() {
                sq += w.iter().map(|v| v * v).sum::<f64>();
            }
        }
        assert!((reg.loss - plain.loss - 0.5 * l2 * sq).abs() < 1e-10);
        assert_eq!(reg.data_loss, plain.data_loss);

        // A step on the penalty gradient alone shrinks the weight norm.
        let penalty: Vec<Vec<f64>> = reg.grads.iter().zip(&plain.grads).map(|(a, b)| a.iter().zip(b).map(|(a, b)| a - b).collect()).collect();
        let norm = |p: &ModelParams<f64>| -> f64 {
            net.param_specs().iter().zip(&p.tensors).filter(|(s, _)| s.kind.decays()).map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum()
        };
        let before = norm(&p);
        let mut v = p.zeros_like();
        crate::model::nesterov_step(&mut p.tensors, &mut v, &penalty, 0.1, 0.9);
        assert!(norm(&p) < before);
    }

    #[test]
    fn rejects_out_of_range_labels_and_non_finite_inputs() {
        let shape = Shape::new(1, 8, 8);
        let net = Network::new(&config(vec![2], vec![1], shape, 3, true)).unwrap();
        let p = net.init_params::<f64>();
        let mut batch = random_batch(1, shape, 3);
        assert!(matches!(
            net.loss_and_grad(&p, &batch, &[3], 0.0, Execution::Sequential),
            Err(Error::InvalidParameter(_))
        ));
        batch[5] = f64::NAN;
        let err = net.loss_and_grad(&p, &batch, &[0], 0.0, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn f32_gradients_track_f64() {
        let shape = Shape::new(1, 8, 8);
        let net = Network::new(&config(vec![2, 3], vec![1, 1], shape, 3, true)).unwrap();
        let p64 = net.init_params::<f64>();
        let p32 = p64.cast::<f32>();
        let batch = random_batch(4, shape, 6);
        let b32: Vec<f32> = batch.iter().map(|&v| v as f32).collect();
        let labels = [0, 1, 2, 0];
        let g64 = net.loss_and_grad(&p64, &batch, &labels, 1e-4, Execution::Sequential).unwrap();
        let g32 = net.loss_and_grad(&p32, &b32, &labels, 1e-4, Execution::Parallel).unwrap();
        assert!((g64.loss - g32.loss).abs() < 1e-4);
        for (a, b) in g64.grads.iter().flatten().zip(g32.grads.iter().flatten()) {
            assert!((a - *b as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_independent_of_execution() {
        let shape = Shape::new(3, 8, 8);
        let net = Network::new(&config(vec![4, 8], vec![1, 1], shape, 4, true)).unwrap();
        let p = net.init_params::<f32>();
        let batch: Vec<f32> = random_batch(21, shape, 2).into_iter().map(|v| v as f32).collect();
        let labels: Vec<u8> = (0..21).map(|i| (i % 4) as u8).collect();
        let s = net.loss_and_grad(&p, &batch, &labels, 1e-4, Execution::Sequential).unwrap();
        let q = net.loss_and_grad(&p, &batch, &labels, 1e-4, Execution::Parallel).unwrap();
        assert_eq!(s.loss, q.loss);
        assert_eq!(s.grads, q.grads);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[1.0f64, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 2..12)) {
            let k = row.len();
            let q = softmax_rows(&row, k);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn argmax_invariant_under_positive_scaling(row in prop::collection::vec(-10.0f64..10.0, 2..12), s in 0.01f64..100.0) {
            let k = row.len();
            let scaled: Vec<f64> = row.iter().map(|v| v * s).collect();
            prop_assert_eq!(argmax_rows(&row, k), argmax_rows(&scaled, k));
        }
    }
}
