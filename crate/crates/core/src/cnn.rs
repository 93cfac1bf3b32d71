//! Per-modality CNN feature extractor.
//!
//! Three convolution blocks (conv → ReLU → optional pooling), a ReLU fully
//! connected layer and a linear softmax head. The head only exists for
//! training; features are harvested from every convolution block and from
//! the fully connected layer.
//!
//! Convolutions run as im2col followed by a GEMM on NHWC activations, one
//! sample at a time, in a fixed order so results are bit-reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{valid_extent, Matrix2, Pooling, Tensor4};

/// Spatial padding of the convolution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding of `kernel / 2` on each side.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub pool_after: bool,
}

/// Architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    /// Side of the square single-channel input.
    pub input_size: usize,
    pub convs: Vec<ConvSpec>,
    pub padding: Padding,
    pub pooling: Pooling,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub fc_width: usize,
    pub n_classes: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl CnnConfig {
    /// The 64×64 architecture: 16, 32 and 32 kernels of 5×5, 2×2/2 pooling
    /// after the first and third convolution, a 128-wide fully connected
    /// layer, SGD with momentum 0.9, learning rate 0.005, L2 0.004 and
    /// mini-batches of 64.
    pub fn standard(n_classes: usize) -> Self {
        Self {
            input_size: 64,
            convs: vec![
                ConvSpec {
                    filters: 16,
                    kernel: 5,
                    pool_after: true,
                },
                ConvSpec {
                    filters: 32,
                    kernel: 5,
                    pool_after: false,
                },
                ConvSpec {
                    filters: 32,
                    kernel: 5,
                    pool_after: true,
                },
            ],
            padding: Padding::Valid,
            pooling: Pooling::Max,
            pool_size: 2,
            pool_stride: 2,
            fc_width: 128,
            n_classes,
            learning_rate: 0.005,
            momentum: 0.9,
            l2: 0.004,
            batch_size: 64,
            epochs: 10,
            patience: 5,
        }
    }

    /// Per-layer output shapes, checking that every layer fits its input.
    pub fn shape_report(&self) -> Result<Vec<LayerShape>> {
        if self.input_size == 0 || self.convs.is_empty() || self.fc_width == 0 || self.n_classes == 0
        {
            return Err(invalid!("all layer sizes must be positive"));
        }
        if self.pool_size == 0 || self.pool_stride == 0 || self.batch_size == 0 {
            return Err(invalid!("pool size, pool stride and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.momentum >= 0.0 && self.l2 >= 0.0) {
            return Err(invalid!("optimizer hyperparameters must be non-negative"));
        }
        let mut out = Vec::new();
        let mut side = self.input_size;
        for (i, c) in self.convs.iter().enumerate() {
            if c.filters == 0 || c.kernel == 0 || c.kernel % 2 == 0 {
                return Err(invalid!("conv{} needs positive filters and an odd kernel", i + 1));
            }
            side = match self.padding {
                Padding::Valid if c.kernel > side => {
                    return Err(invalid!("conv{} kernel {} exceeds input {}", i + 1, c.kernel, side))
                }
                Padding::Valid => side - c.kernel + 1,
                Padding::Same => side,
            };
            let channels = c.filters;
            out.push(LayerShape::new(format!("conv{}", i + 1), side, side, channels));
            if c.pool_after {
                if side < self.pool_size {
                    return Err(invalid!("pool after conv{} on a {}x{} map", i + 1, side, side));
                }
                side = valid_extent(side, self.pool_size, self.pool_stride);
                out.push(LayerShape::new(format!("pool{}", i + 1), side, side, channels));
            }
        }
        out.push(LayerShape::new(String::from("fc1"), 1, 1, self.fc_width));
        out.push(LayerShape::new(String::from("logits"), 1, 1, self.n_classes));
        Ok(out)
    }

    /// Shapes of the tapped stages: each convolution block output (after its
    /// pooling, if any) followed by fc1 as `1 × 1 × width`.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let report = self.shape_report()?;
        let mut stages = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let name = if c.pool_after {
                format!("pool{}", i + 1)
            } else {
                format!("conv{}", i + 1)
            };
            let l = report.iter().find(|l| l.name == name).expect("listed above");
            stages.push((l.height, l.width, l.channels));
        }
        stages.push((1, 1, self.fc_width));
        Ok(stages)
    }

    fn pad(&self, kernel: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => kernel / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LayerShape {
    fn new(name: String, height: usize, width: usize, channels: usize) -> Self {
        Self {
            name,
            height,
            width,
            channels,
        }
    }
}

/// Names of the tapped stages for a three-convolution model.
pub const STAGE_NAMES: [&str; 4] = ["conv1", "conv2", "conv3", "fc1"];

/// Activations tapped for fusion. Each convolution stage is the block output
/// after ReLU and pooling; fc1 is stored as a `1 × 1 × width × N` block.
#[derive(Debug, Clone, PartialEq)]
pub struct StageActivations {
    pub stages: Vec<Tensor4>,
}

impl StageActivations {
    pub fn batch(&self) -> usize {
        self.stages.first().map_or(0, Tensor4::batch)
    }

    pub fn fc1(&self) -> Matrix2 {
        crate::tensor::flatten4d(self.stages.last().expect("fc1 stage"))
    }

    /// Selects samples, in order, from every stage.
    pub fn select(&self, samples: &[usize]) -> Self {
        Self {
            stages: self.stages.iter().map(|t| t.select(samples)).collect(),
        }
    }

    /// Joins batches stage by stage.
    pub fn concat(parts: &[StageActivations]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid!("nothing to concatenate"))?;
        let mut stages = Vec::with_capacity(first.stages.len());
        for (i, t0) in first.stages.iter().enumerate() {
            let (h, w, c, _) = t0.dims();
            let mut data = Vec::new();
            let mut batch = 0;
            for p in parts {
                let t = p
                    .stages
                    .get(i)
                    .ok_or_else(|| shape_err!("stage {} missing", i))?;
                if (t.height(), t.width(), t.channels()) != (h, w, c) {
                    return Err(shape_err!("stage {} dims differ between parts", i));
                }
                data.extend_from_slice(t.data());
                batch += t.batch();
            }
            stages.push(Tensor4::from_vec_unchecked(h, w, c, batch, data));
        }
        Ok(Self { stages })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    in_channels: usize,
    filters: usize,
    kernel: usize,
    pad: usize,
    pool_after: bool,
    /// `(kernel·kernel·in_channels) × filters`, rows in (ky, kx, channel) order.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// `inputs × outputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Trainable CNN. Parameters are ordered conv1 weights, conv1 bias, ...,
/// fc1 weights, fc1 bias, head weights, head bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    config: CnnConfig,
    seed: u64,
    convs: Vec<ConvLayer>,
    fc1: Dense,
    head: Dense,
    velocity: Vec<Vec<f64>>,
}

/// Gradients in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

/// Losses per epoch from [`CnnModel::train`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub stopped_early: bool,
}

struct ForwardPass {
    /// Post-ReLU, pre-pool activations of each convolution.
    acts: Vec<Tensor4>,
    /// For max pooling: flat index into `acts[l]` of each pooled value.
    argmax: Vec<Vec<usize>>,
    stages: StageActivations,
    logits: Matrix2,
}

impl CnnModel {
    /// He-uniform weights (`U(±√(6/fan_in))`, variance `2/fan_in`) and zero
    /// biases, deterministic per seed.
    pub fn init(config: CnnConfig, seed: u64) -> Result<Self> {
        let stages = config.stage_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(config.convs.len());
        let mut in_channels = 1;
        for spec in &config.convs {
            let fan_in = spec.kernel * spec.kernel * in_channels;
            convs.push(ConvLayer {
                in_channels,
                filters: spec.filters,
                kernel: spec.kernel,
                pad: config.pad(spec.kernel),
                pool_after: spec.pool_after,
                weights: he_uniform(&mut rng, fan_in, fan_in * spec.filters),
                bias: vec![0.0; spec.filters],
            });
            in_channels = spec.filters;
        }
        let (h, w, c) = stages[stages.len() - 2];
        let flat = h * w * c;
        let fc1 = Dense {
            inputs: flat,
            outputs: config.fc_width,
            weights: he_uniform(&mut rng, flat, flat * config.fc_width),
            bias: vec![0.0; config.fc_width],
        };
        let head = Dense {
            inputs: config.fc_width,
            outputs: config.n_classes,
            weights: he_uniform(&mut rng, config.fc_width, config.fc_width * config.n_classes),
            bias: vec![0.0; config.n_classes],
        };
        let mut model = Self {
            config,
            seed,
            convs,
            fc1,
            head,
            velocity: Vec::new(),
        };
        model.velocity = model.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(model)
    }

    /// Rebuilds a model from raw parameter blobs in parameter order.
    pub fn from_parameters(config: CnnConfig, seed: u64, blobs: Vec<Vec<f64>>) -> Result<Self> {
        let mut model = Self::init(config, seed)?;
        let expected: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
        if blobs.len() != expected.len() {
            return Err(shape_err!("{} parameter blobs, expected {}", blobs.len(), expected.len()));
        }
        for (i, (b, &n)) in blobs.iter().zip(&expected).enumerate() {
            if b.len() != n {
                return Err(shape_err!("parameter blob {} has {} values, expected {}", i, b.len(), n));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("parameter blob {} has non-finite values", i));
            }
        }
        for (dst, src) in model.parameters_mut().into_iter().zip(blobs) {
            *dst = src;
        }
        Ok(model)
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameters(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weights);
            out.push(&c.bias);
        }
        out.extend([&self.fc1.weights, &self.fc1.bias, &self.head.weights, &self.head.bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.head.weights,
            &mut self.head.bias,
        ]);
        out
    }

    /// Human-readable name of each parameter tensor.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.convs.len() {
            out.push(format!("conv{}.weight", i + 1));
            out.push(format!("conv{}.bias", i + 1));
        }
        out.extend(["fc1.weight", "fc1.bias", "head.weight", "head.bias"].map(String::from));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Sum of squared weights (biases excluded) times `l2 / 2`.
    pub fn l2_penalty(&self) -> f64 {
        let sq: f64 = self
            .convs
            .iter()
            .map(|c| &c.weights)
            .chain([&self.fc1.weights, &self.head.weights])
            .flat_map(|w| w.iter())
            .map(|v| v * v)
            .sum();
        0.5 * self.config.l2 * sq
    }

    fn check_batch(&self, batch: &Tensor4) -> Result<()> {
        let s = self.config.input_size;
        if (batch.height(), batch.width(), batch.channels()) != (s, s, 1) || batch.batch() == 0 {
            return Err(shape_err!(
                "expected a {}x{}x1xN batch, got {:?}",
                s,
                s,
                batch.dims()
            ));
        }
        Ok(())
    }

    fn check_labels(&self, batch: &Tensor4, labels: &[usize]) -> Result<()> {
        if labels.len() != batch.batch() {
            return Err(shape_err!("{} labels for a batch of {}", labels.len(), batch.batch()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(invalid!("label {} outside [0, {})", l, self.config.n_classes));
        }
        Ok(())
    }

    fn forward_pass(&self, batch: &Tensor4) -> ForwardPass {
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut argmax = Vec::with_capacity(self.convs.len());
        let mut stages = Vec::with_capacity(self.convs.len() + 1);
        for (l, layer) in self.convs.iter().enumerate() {
            let input = if l == 0 { batch } else { &stages[l - 1] };
            let act = conv_forward(layer, input);
            if layer.pool_after {
                let (pooled, idx) = pool_forward(
                    &act,
                    self.config.pooling,
                    self.config.pool_size,
                    self.config.pool_stride,
                );
                stages.push(pooled);
                argmax.push(idx);
                acts.push(act);
            } else {
                stages.push(act.clone());
                argmax.push(Vec::new());
                acts.push(act);
            }
        }
        let last = stages.last().expect("at least one conv");
        let n = batch.batch();
        let mut hidden = dense_forward(&self.fc1, last.data(), n);
        for v in hidden.iter_mut() {
            *v = v.max(0.0);
        }
        let logits = dense_forward(&self.head, &hidden, n);
        stages.push(Tensor4::from_vec_unchecked(1, 1, self.config.fc_width, n, hidden));
        ForwardPass {
            acts,
            argmax,
            stages: StageActivations { stages },
            logits: Matrix2::from_vec_unchecked(n, self.config.n_classes, logits),
        }
    }

    /// Stage activations and logits for a `size × size × 1 × N` batch.
    pub fn forward(&self, batch: &Tensor4) -> Result<(StageActivations, Matrix2)> {
        self.check_batch(batch)?;
        let pass = self.forward_pass(batch);
        Ok((pass.stages, pass.logits))
    }

    /// Stage activations only.
    pub fn extract(&self, batch: &Tensor4) -> Result<StageActivations> {
        Ok(self.forward(batch)?.0)
    }

    /// Extracts features for many images, `chunk` at a time.
    pub fn extract_images(&self, images: &[&Matrix2], chunk: usize) -> Result<StageActivations> {
        let parts = images
            .chunks(chunk.max(1))
            .map(|c| self.extract(&Tensor4::from_images(c)?))
            .collect::<Result<Vec<_>>>()?;
        StageActivations::concat(&parts)
    }

    /// Mean softmax cross-entropy of a batch.
    pub fn data_loss(&self, batch: &Tensor4, labels: &[usize]) -> Result<f64> {
        self.check_batch(batch)?;
        self.check_labels(batch, labels)?;
        let pass = self.forward_pass(batch);
        Ok(cross_entropy(&pass.logits, labels).0)
    }

    /// Training objective: mean cross-entropy plus the L2 penalty.
    pub fn objective(&self, batch: &Tensor4, labels: &[usize]) -> Result<f64> {
        Ok(self.data_loss(batch, labels)? + self.l2_penalty())
    }

    /// Objective and its gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, batch: &Tensor4, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        self.check_labels(batch, labels)?;
        let pass = self.forward_pass(batch);
        let (loss, dlogits) = cross_entropy(&pass.logits, labels);
        if !loss.is_finite() {
            let peak = pass.logits.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(Error::Numerical(format!(
                "cross-entropy is {} (max |logit| = {:e})",
                loss, peak
            )));
        }
        let grads = self.backward(batch, &pass, &dlogits);
        Ok((loss + self.l2_penalty(), grads))
    }

    fn backward(&self, batch: &Tensor4, pass: &ForwardPass, dlogits: &[f64]) -> Gradients {
        let n = batch.batch();
        let stages = &pass.stages.stages;
        let hidden = stages.last().expect("fc1").data();
        let flat = stages[stages.len() - 2].data();

        let (head_gw, head_gb, mut dhidden) = dense_backward(&self.head, hidden, dlogits, n);
        for (d, &h) in dhidden.iter_mut().zip(hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let (fc1_gw, fc1_gb, mut dstage) = dense_backward(&self.fc1, flat, &dhidden, n);

        let mut conv_grads = vec![(Vec::new(), Vec::new()); self.convs.len()];
        for l in (0..self.convs.len()).rev() {
            let layer = &self.convs[l];
            let act = &pass.acts[l];
            let mut dz = if layer.pool_after {
                pool_backward(
                    act,
                    &stages[l],
                    &dstage,
                    &pass.argmax[l],
                    self.config.pooling,
                    self.config.pool_size,
                    self.config.pool_stride,
                )
            } else {
                dstage
            };
            for (d, &a) in dz.iter_mut().zip(act.data()) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = if l == 0 { batch } else { &stages[l - 1] };
            let (gw, gb, dinput) = conv_backward(layer, input, act, &dz, l > 0);
            conv_grads[l] = (gw, gb);
            dstage = dinput;
        }

        let l2 = self.config.l2;
        let mut out = Vec::with_capacity(2 * self.convs.len() + 4);
        for ((mut gw, gb), layer) in conv_grads.into_iter().zip(&self.convs) {
            add_scaled(&mut gw, &layer.weights, l2);
            out.push(gw);
            out.push(gb);
        }
        let mut fc1_gw = fc1_gw;
        add_scaled(&mut fc1_gw, &self.fc1.weights, l2);
        let mut head_gw = head_gw;
        add_scaled(&mut head_gw, &self.head.weights, l2);
        out.extend([fc1_gw, fc1_gb, head_gw, head_gb]);
        Gradients(out)
    }

    /// One SGD-with-momentum step on a batch. Returns the batch's mean
    /// cross-entropy before the update; the L2 penalty is reported by
    /// [`CnnModel::l2_penalty`].
    ///
    /// Update rule: `v ← μ·v − η·(∇ + λ·w)`, `w ← w + v` (λ on weights only).
    pub fn train_step(&mut self, batch: &Tensor4, labels: &[usize]) -> Result<f64> {
        let penalty = self.l2_penalty();
        let (objective, grads) = self.loss_and_gradients(batch, labels)?;
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        let mut velocity = core::mem::take(&mut self.velocity);
        for ((param, vel), grad) in self.parameters_mut().into_iter().zip(&mut velocity).zip(&grads.0)
        {
            for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v - lr * g;
                *p += *v;
            }
        }
        self.velocity = velocity;
        if let Some(i) = self.parameters().iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "parameter tensor {} diverged after update",
                self.parameter_names()[i]
            )));
        }
        Ok(objective - penalty)
    }

    /// Mini-batch training with per-epoch shuffling. When `val` is given,
    /// stops once its loss has not improved for `patience` epochs.
    pub fn train(
        &mut self,
        images: &[&Matrix2],
        labels: &[usize],
        val: Option<(&[&Matrix2], &[usize])>,
    ) -> Result<TrainHistory> {
        if images.len() != labels.len() {
            return Err(shape_err!("{} images, {} labels", images.len(), labels.len()));
        }
        if images.is_empty() {
            return Err(invalid!("no training images"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5eed_5eed_5eed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut history = TrainHistory::default();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let imgs: Vec<&Matrix2> = chunk.iter().map(|&i| images[i]).collect();
                let lbls: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let loss = self.train_step(&Tensor4::from_images(&imgs)?, &lbls)?;
                total += loss * chunk.len() as f64;
            }
            history.train_loss.push(total / images.len() as f64);
            if let Some((vi, vl)) = val {
                if vi.is_empty() {
                    continue;
                }
                let v = self.mean_data_loss(vi, vl)?;
                history.val_loss.push(v);
                if v < best {
                    best = v;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= self.config.patience {
                        history.stopped_early = true;
                        break;
                    }
                }
            }
        }
        Ok(history)
    }

    /// Mean cross-entropy over a set of images.
    pub fn mean_data_loss(&self, images: &[&Matrix2], labels: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for (imgs, lbls) in images
            .chunks(self.config.batch_size)
            .zip(labels.chunks(self.config.batch_size))
        {
            total += self.data_loss(&Tensor4::from_images(imgs)?, lbls)? * imgs.len() as f64;
        }
        Ok(total / images.len().max(1) as f64)
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let limit = libm::sqrt(6.0 / fan_in as f64);
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    (0..count).map(|_| dist.sample(rng)).collect()
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    if s != 0.0 {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d += s * v;
        }
    }
}

/// `C ← A·B + β·C` with `A` logically `m × k` and `B` logically `k × n`;
/// the `*_t` flags say the operand is stored transposed (row-major).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches for these
    // strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn out_side(layer: &ConvLayer, side: usize) -> usize {
    side + 2 * layer.pad - layer.kernel + 1
}

/// Patches of one NHWC sample as a `(oh·ow) × (k·k·c)` matrix.
fn im2col(layer: &ConvLayer, sample: &[f64], h: usize, w: usize, cols: &mut [f64]) {
    let (k, c, pad) = (layer.kernel, layer.in_channels, layer.pad as isize);
    let (oh, ow) = (out_side(layer, h), out_side(layer, w));
    let row_len = k * k * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..k {
                let y = oy as isize + ky as isize - pad;
                for kx in 0..k {
                    let x = ox as isize + kx as isize - pad;
                    let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = ((y as usize) * w + x as usize) * c;
                        dst.copy_from_slice(&sample[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back onto one NHWC sample.
fn col2im(layer: &ConvLayer, dcols: &[f64], h: usize, w: usize, dsample: &mut [f64]) {
    let (k, c, pad) = (layer.kernel, layer.in_channels, layer.pad as isize);
    let (oh, ow) = (out_side(layer, h), out_side(layer, w));
    let row_len = k * k * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..k {
                let y = oy as isize + ky as isize - pad;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let x = ox as isize + kx as isize - pad;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let dst = ((y as usize) * w + x as usize) * c;
                    let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (d, s) in dsample[dst..dst + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Convolution + bias + ReLU.
fn conv_forward(layer: &ConvLayer, input: &Tensor4) -> Tensor4 {
    let (h, w, _, n) = input.dims();
    let (oh, ow) = (out_side(layer, h), out_side(layer, w));
    let (p, kl, f) = (oh * ow, layer.patch_len(), layer.filters);
    let mut cols = vec![0.0; p * kl];
    let mut out = vec![0.0; n * p * f];
    for s in 0..n {
        im2col(layer, input.sample(s), h, w, &mut cols);
        let dst = &mut out[s * p * f..(s + 1) * p * f];
        for px in dst.chunks_exact_mut(f) {
            px.copy_from_slice(&layer.bias);
        }
        gemm(p, kl, f, &cols, false, &layer.weights, false, 1.0, dst);
    }
    for v in out.iter_mut() {
        *v = v.max(0.0);
    }
    Tensor4::from_vec_unchecked(oh, ow, f, n, out)
}

/// Weight, bias and (optionally) input gradients of one convolution given
/// the gradient at its pre-activation output.
fn conv_backward(
    layer: &ConvLayer,
    input: &Tensor4,
    act: &Tensor4,
    dz: &[f64],
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w, c, n) = input.dims();
    let (p, kl, f) = (act.height() * act.width(), layer.patch_len(), layer.filters);
    let mut gw = vec![0.0; kl * f];
    let mut gb = vec![0.0; f];
    let mut dinput = if want_input { vec![0.0; h * w * c * n] } else { Vec::new() };
    let mut cols = vec![0.0; p * kl];
    let mut dcols = if want_input { vec![0.0; p * kl] } else { Vec::new() };
    for s in 0..n {
        let dzs = &dz[s * p * f..(s + 1) * p * f];
        im2col(layer, input.sample(s), h, w, &mut cols);
        gemm(kl, p, f, &cols, true, dzs, false, 1.0, &mut gw);
        for px in dzs.chunks_exact(f) {
            for (g, d) in gb.iter_mut().zip(px) {
                *g += d;
            }
        }
        if want_input {
            gemm(p, f, kl, dzs, false, &layer.weights, true, 0.0, &mut dcols);
            let len = h * w * c;
            col2im(layer, &dcols, h, w, &mut dinput[s * len..(s + 1) * len]);
        }
    }
    (gw, gb, dinput)
}

fn pool_forward(act: &Tensor4, kind: Pooling, size: usize, stride: usize) -> (Tensor4, Vec<usize>) {
    let (h, w, c, n) = act.dims();
    let (oh, ow) = (valid_extent(h, size, stride), valid_extent(w, size, stride));
    let mut out = Vec::with_capacity(oh * ow * c * n);
    let mut idx = Vec::new();
    let norm = 1.0 / (size * size) as f64;
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    match kind {
                        Pooling::Max => {
                            let mut best = act.index(oy * stride, ox * stride, ch, s);
                            for i in 0..size {
                                for j in 0..size {
                                    let at = act.index(oy * stride + i, ox * stride + j, ch, s);
                                    if act.data()[at] > act.data()[best] {
                                        best = at;
                                    }
                                }
                            }
                            out.push(act.data()[best]);
                            idx.push(best);
                        }
                        Pooling::Average => {
                            let mut acc = 0.0;
                            for i in 0..size {
                                for j in 0..size {
                                    acc += act.get(oy * stride + i, ox * stride + j, ch, s);
                                }
                            }
                            out.push(acc * norm);
                        }
                    }
                }
            }
        }
    }
    (Tensor4::from_vec_unchecked(oh, ow, c, n, out), idx)
}

fn pool_backward(
    act: &Tensor4,
    pooled: &Tensor4,
    dpooled: &[f64],
    argmax: &[usize],
    kind: Pooling,
    size: usize,
    stride: usize,
) -> Vec<f64> {
    let mut dact = vec![0.0; act.data().len()];
    match kind {
        Pooling::Max => {
            for (&at, &d) in argmax.iter().zip(dpooled) {
                dact[at] += d;
            }
        }
        Pooling::Average => {
            let (oh, ow, c, n) = pooled.dims();
            let norm = 1.0 / (size * size) as f64;
            for s in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let d = dpooled[pooled.index(oy, ox, ch, s)] * norm;
                            for i in 0..size {
                                for j in 0..size {
                                    dact[act.index(oy * stride + i, ox * stride + j, ch, s)] += d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dact
}

fn dense_forward(layer: &Dense, x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * layer.outputs);
    for _ in 0..n {
        out.extend_from_slice(&layer.bias);
    }
    gemm(n, layer.inputs, layer.outputs, x, false, &layer.weights, false, 1.0, &mut out);
    out
}

fn dense_backward(layer: &Dense, x: &[f64], dy: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (i, o) = (layer.inputs, layer.outputs);
    let mut gw = vec![0.0; i * o];
    gemm(i, n, o, x, true, dy, false, 0.0, &mut gw);
    let mut gb = vec![0.0; o];
    for row in dy.chunks_exact(o) {
        for (g, d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dx = vec![0.0; n * i];
    gemm(n, o, i, dy, false, &layer.weights, true, 0.0, &mut dx);
    (gw, gb, dx)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix2, labels: &[usize]) -> (f64, Vec<f64>) {
    let (n, k) = logits.dims();
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| libm::exp(z - peak)).sum();
        let log_norm = peak + libm::log(sum);
        loss += log_norm - row[y];
        for (j, g) in grad[r * k..(r + 1) * k].iter_mut().enumerate() {
            let p = libm::exp(row[j] - log_norm);
            *g = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(padding: Padding, input: usize) -> CnnConfig {
        CnnConfig {
            input_size: input,
            convs: vec![
                ConvSpec {
                    filters: 2,
                    kernel: 3,
                    pool_after: true,
                },
                ConvSpec {
                    filters: 3,
                    kernel: 3,
                    pool_after: false,
                },
                ConvSpec {
                    filters: 2,
                    kernel: 3,
                    pool_after: true,
                },
            ],
            padding,
            fc_width: 5,
            n_classes: 3,
            batch_size: 4,
            ..CnnConfig::standard(3)
        }
    }

    fn images(n: usize, side: usize, seed: u64) -> Vec<Matrix2> {
        let mut s = seed.wrapping_add(1);
        (0..n)
            .map(|_| {
                Matrix2::from_fn(side, side, |_, _| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 11) as f64 / (1u64 << 53) as f64
                })
            })
            .collect()
    }

    fn batch_of(imgs: &[Matrix2]) -> Tensor4 {
        let refs: Vec<&Matrix2> = imgs.iter().collect();
        Tensor4::from_images(&refs).unwrap()
    }

    #[test]
    fn standard_shape_chain() {
        let cfg = CnnConfig::standard(4);
        let report = cfg.shape_report().unwrap();
        let sides: Vec<(String, usize, usize)> =
            report.iter().map(|l| (l.name.clone(), l.height, l.channels)).collect();
        assert_eq!(
            sides,
            vec![
                ("conv1".into(), 60, 16),
                ("pool1".into(), 30, 16),
                ("conv2".into(), 26, 32),
                ("conv3".into(), 22, 32),
                ("pool3".into(), 11, 32),
                ("fc1".into(), 1, 128),
                ("logits".into(), 1, 4),
            ]
        );
        assert_eq!(
            cfg.stage_shapes().unwrap(),
            vec![(30, 30, 16), (26, 26, 32), (11, 11, 32), (1, 1, 128)]
        );
    }

    #[test]
    fn conv1_parameter_shapes() {
        let m = CnnModel::init(CnnConfig::standard(4), 1).unwrap();
        let p = m.parameters();
        assert_eq!(p[0].len(), 16 * 5 * 5);
        assert_eq!(p[1].len(), 16);
        assert_eq!(p[2].len(), 32 * 16 * 25);
        assert_eq!(p[6].len(), 11 * 11 * 32 * 128);
        let expected = 16 * 25 + 16 + 32 * 400 + 32 + 32 * 800 + 32 + 3872 * 128 + 128 + 128 * 4 + 4;
        assert_eq!(m.parameter_count(), expected);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny_config(Padding::Same, 8);
        let a = CnnModel::init(cfg.clone(), 3).unwrap();
        assert_eq!(a, CnnModel::init(cfg.clone(), 3).unwrap());
        assert_ne!(a, CnnModel::init(cfg, 4).unwrap());
    }

    #[test]
    fn he_variance() {
        // 25 models x 400 conv1 weights = 10k samples, fan_in 25
        let cfg = CnnConfig {
            convs: vec![ConvSpec {
                filters: 16,
                kernel: 5,
                pool_after: false,
            }],
            input_size: 8,
            fc_width: 1,
            n_classes: 2,
            ..CnnConfig::standard(2)
        };
        let mut w = Vec::new();
        for seed in 0..25 {
            w.extend_from_slice(CnnModel::init(cfg.clone(), seed).unwrap().parameters()[0]);
        }
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 25.0;
        assert!((var - target).abs() < 0.2 * target, "var {} target {}", var, target);
    }

    #[test]
    fn zero_input_gives_equal_logits() {
        let m = CnnModel::init(tiny_config(Padding::Valid, 14), 2).unwrap();
        let (acts, logits) = m.forward(&Tensor4::zeros(14, 14, 1, 3)).unwrap();
        assert!(acts.stages.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_samples_identical_rows() {
        let m = CnnModel::init(tiny_config(Padding::Same, 8), 2).unwrap();
        let img = images(1, 8, 5).remove(0);
        let (acts, logits) = m.forward(&batch_of(&[img.clone(), img])).unwrap();
        for t in &acts.stages {
            assert_eq!(t.sample(0), t.sample(1));
        }
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn wrong_input_dims() {
        let m = CnnModel::init(tiny_config(Padding::Same, 8), 2).unwrap();
        assert!(matches!(
            m.forward(&Tensor4::zeros(9, 8, 1, 1)),
            Err(Error::Shape(_))
        ));
        let b = batch_of(&images(2, 8, 1));
        assert!(m.data_loss(&b, &[0, 3]).is_err());
        assert!(m.data_loss(&b, &[0]).is_err());
    }

    #[test]
    fn extract_matches_forward_and_is_batch_invariant() {
        let m = CnnModel::init(tiny_config(Padding::Valid, 14), 9).unwrap();
        let imgs = images(4, 14, 2);
        let b = batch_of(&imgs);
        let (fwd, _) = m.forward(&b).unwrap();
        let ext = m.extract(&b).unwrap();
        assert_eq!(fwd, ext);
        assert_eq!(ext, m.extract(&b).unwrap());
        for i in 0..4 {
            let single = m.extract(&batch_of(&imgs[i..i + 1])).unwrap();
            assert_eq!(single, ext.select(&[i]));
        }
    }

    // Central finite differences on the forward-only objective; independent of
    // the backward pass.
    fn check_gradients(cfg: CnnConfig, side: usize) {
        let m = CnnModel::init(cfg, 11).unwrap();
        // give the biases non-trivial values so every path is exercised
        let mut m = m;
        for (i, p) in m.parameters_mut().into_iter().enumerate() {
            if i % 2 == 1 {
                for (j, v) in p.iter_mut().enumerate() {
                    *v = 0.05 * ((j % 5) as f64 - 1.0);
                }
            }
        }
        let b = batch_of(&images(3, side, 7));
        let labels = [0, 2, 1];
        let (_, grads) = m.loss_and_gradients(&b, &labels).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for t in 0..grads.0.len() {
            let len = grads.0[t].len();
            for i in 0..len {
                let orig = m.parameters()[t][i];
                m.parameters_mut()[t][i] = orig + h;
                let up = m.objective(&b, &labels).unwrap();
                m.parameters_mut()[t][i] = orig - h;
                let down = m.objective(&b, &labels).unwrap();
                m.parameters_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.0[t][i];
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {}", worst);
    }

    #[test]
    fn gradients_same_padding() {
        check_gradients(tiny_config(Padding::Same, 8), 8);
    }

    #[test]
    fn gradients_valid_padding() {
        check_gradients(tiny_config(Padding::Valid, 14), 14);
    }

    #[test]
    fn gradients_average_pooling() {
        let cfg = CnnConfig {
            pooling: Pooling::Average,
            ..tiny_config(Padding::Same, 8)
        };
        check_gradients(cfg, 8);
    }

    #[test]
    fn zero_learning_rate_is_frozen() {
        let cfg = CnnConfig {
            learning_rate: 0.0,
            ..tiny_config(Padding::Same, 8)
        };
        let mut m = CnnModel::init(cfg, 1).unwrap();
        let before = m.clone();
        m.train_step(&batch_of(&images(4, 8, 3)), &[0, 1, 2, 0]).unwrap();
        assert_eq!(m.parameters(), before.parameters());
    }

    #[test]
    fn weight_decay_is_geometric() {
        let cfg = CnnConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            l2: 0.5,
            ..tiny_config(Padding::Same, 8)
        };
        let mut m = CnnModel::init(cfg, 4).unwrap();
        let zero = Tensor4::zeros(8, 8, 1, 2);
        let w0 = m.parameters()[0].clone();
        for step in 1..=5 {
            m.train_step(&zero, &[0, 1]).unwrap();
            let factor = libm::pow(1.0 - 0.1 * 0.5, step as f64);
            for (a, b) in m.parameters()[0].iter().zip(&w0) {
                assert!((a - b * factor).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = CnnConfig {
            epochs: 2,
            ..tiny_config(Padding::Same, 8)
        };
        let imgs = images(10, 8, 9);
        let refs: Vec<&Matrix2> = imgs.iter().collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let mut a = CnnModel::init(cfg.clone(), 5).unwrap();
        let mut b = CnnModel::init(cfg, 5).unwrap();
        let ha = a.train(&refs, &labels, Some((&refs[..3], &labels[..3]))).unwrap();
        let hb = b.train(&refs, &labels, Some((&refs[..3], &labels[..3]))).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert_eq!(ha.train_loss.len(), 2);
    }

    #[test]
    fn early_stopping_triggers() {
        // lr = 0 freezes the model, so validation loss never improves after
        // the first epoch.
        let cfg = CnnConfig {
            epochs: 20,
            patience: 2,
            learning_rate: 0.0,
            ..tiny_config(Padding::Same, 8)
        };
        let imgs = images(6, 8, 1);
        let refs: Vec<&Matrix2> = imgs.iter().collect();
        let labels = [0, 1, 2, 0, 1, 2];
        let mut m = CnnModel::init(cfg, 0).unwrap();
        let h = m.train(&refs, &labels, Some((&refs, &labels))).unwrap();
        assert!(h.stopped_early);
        assert_eq!(h.val_loss.len(), 3);
    }

    #[test]
    fn overfits_one_batch() {
        let mut m = CnnModel::init(tiny_config(Padding::Same, 8), 3).unwrap();
        let b = batch_of(&images(6, 8, 4));
        let labels = [0, 1, 2, 0, 1, 2];
        let first = m.train_step(&b, &labels).unwrap();
        let mut prev = first;
        for _ in 0..49 {
            let loss = m.train_step(&b, &labels).unwrap();
            assert!(loss <= prev * 1.05, "loss rose from {} to {}", prev, loss);
            prev = loss;
        }
        assert!(prev < first);
    }

    #[test]
    fn from_parameters_round_trip() {
        let cfg = tiny_config(Padding::Same, 8);
        let m = CnnModel::init(cfg.clone(), 8).unwrap();
        let blobs: Vec<Vec<f64>> = m.parameters().into_iter().cloned().collect();
        let r = CnnModel::from_parameters(cfg.clone(), 8, blobs).unwrap();
        assert_eq!(r.parameters(), m.parameters());
        assert!(CnnModel::from_parameters(cfg, 8, vec![vec![0.0]]).is_err());
    }
}
