//! Toy end-to-end training: two poly-scale conv layers, global average pool
//! and a linear classifier, trained with momentum SGD to tell small, medium
//! and large Gaussian blobs apart.

use crate::conv::{
    conv2d_backward_input, conv2d_backward_weight, psconv_forward_masked, ConvSpec,
};
use crate::error::{Error, Result};
use crate::io::{NamedTensor, TensorArchive};
use crate::lattice::{DilationMatrix, DilationPattern};
use crate::tensor::{Rng, Tensor4};

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 3;
pub const BLOB_SIGMAS: [f64; NUM_CLASSES] = [1.5, 3.0, 6.0];

/// Deterministic synthetic dataset of single-blob images. Sample `i` has
/// label `i mod 3`, so any run of consecutive samples is class-balanced.
#[derive(Clone, Debug)]
pub struct ScaleBlobDataset {
    seed: u64,
    len: usize,
}

impl ScaleBlobDataset {
    pub fn new(seed: u64, len: usize) -> Self {
        ScaleBlobDataset { seed, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn label(&self, index: usize) -> usize {
        index % NUM_CLASSES
    }

    /// Writes sample `index` into `out` (`IMAGE_SIZE²` values).
    pub fn render(&self, index: usize, out: &mut [f64]) {
        let mut rng = Rng::new(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let sigma = BLOB_SIGMAS[self.label(index)];
        let cx = 10.0 + 12.0 * rng.uniform();
        let cy = 10.0 + 12.0 * rng.uniform();
        let inv = 1.0 / (2.0 * sigma * sigma);
        for x in 0..IMAGE_SIZE {
            for y in 0..IMAGE_SIZE {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                out[x * IMAGE_SIZE + y] = (-(dx * dx + dy * dy) * inv).exp() + 0.05 * rng.normal();
            }
        }
    }

    /// Batch `b` of size `batch_size`, wrapping around the dataset.
    pub fn batch(&self, b: usize, batch_size: usize) -> Result<(Tensor4, Vec<usize>)> {
        let mut images = Tensor4::zeros([batch_size, 1, IMAGE_SIZE, IMAGE_SIZE])?;
        let mut labels = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let idx = (b * batch_size + i) % self.len;
            self.render(idx, images.plane_mut(i, 0));
            labels.push(self.label(idx));
        }
        Ok((images, labels))
    }
}

/// Which lattice the demo convolutions carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatticeChoice {
    PsConv,
    Uniform,
}

#[derive(Clone, Debug)]
pub struct DemoModel {
    pub conv1: Tensor4,
    pub conv2: Tensor4,
    /// `[3, 16, 1, 1]`.
    pub fc_weight: Tensor4,
    /// `[3, 1, 1, 1]`.
    pub fc_bias: Tensor4,
    pub spec1: ConvSpec,
    pub spec2: ConvSpec,
    pub lattice1: DilationMatrix,
    pub lattice2: DilationMatrix,
}

/// Per-parameter gradients in the same order as [`DemoModel::params`].
pub type Grads = [Tensor4; 4];

impl DemoModel {
    pub fn new(seed: u64, choice: LatticeChoice) -> Result<Self> {
        let spec1 = ConvSpec::new(1, 8, 3, 2, 1)?;
        let spec2 = ConvSpec::new(8, 16, 3, 2, 1)?;
        let pattern = DilationPattern::default();
        let (lattice1, lattice2) = match choice {
            LatticeChoice::PsConv => (
                DilationMatrix::psconv(8, 1, &pattern)?,
                DilationMatrix::psconv(16, 8, &pattern)?,
            ),
            LatticeChoice::Uniform => (
                DilationMatrix::uniform(8, 1, 1)?,
                DilationMatrix::uniform(16, 8, 1)?,
            ),
        };
        let mut rng = Rng::new(seed);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        Ok(DemoModel {
            conv1: Tensor4::randn(spec1.weight_dims(), &mut rng, he(9))?,
            conv2: Tensor4::randn(spec2.weight_dims(), &mut rng, he(72))?,
            fc_weight: Tensor4::randn([NUM_CLASSES, 16, 1, 1], &mut rng, (1.0f64 / 16.0).sqrt())?,
            fc_bias: Tensor4::zeros([NUM_CLASSES, 1, 1, 1])?,
            spec1,
            spec2,
            lattice1,
            lattice2,
        })
    }

    pub fn params(&self) -> [&Tensor4; 4] {
        [&self.conv1, &self.conv2, &self.fc_weight, &self.fc_bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor4; 4] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, images: &Tensor4, labels: &[usize]) -> Result<f64> {
        Ok(self.forward(images, labels)?.loss)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, images: &Tensor4, labels: &[usize]) -> Result<(f64, Grads)> {
        let fwd = self.forward(images, labels)?;
        let batch = labels.len();
        let hidden = self.spec2.cout;

        // Softmax cross-entropy.
        let mut dlogits = fwd.probs.clone();
        for (b, &y) in labels.iter().enumerate() {
            dlogits[b * NUM_CLASSES + y] -= 1.0;
        }
        dlogits.iter_mut().for_each(|v| *v /= batch as f64);

        let mut g_fc_w = Tensor4::zeros([NUM_CLASSES, hidden, 1, 1])?;
        let mut g_fc_b = Tensor4::zeros([NUM_CLASSES, 1, 1, 1])?;
        let mut dpooled = vec![0.0; batch * hidden];
        for b in 0..batch {
            for o in 0..NUM_CLASSES {
                let dl = dlogits[b * NUM_CLASSES + o];
                g_fc_b.data_mut()[o] += dl;
                for h in 0..hidden {
                    g_fc_w.data_mut()[o * hidden + h] += dl * fwd.pooled[b * hidden + h];
                    dpooled[b * hidden + h] += dl * self.fc_weight.data()[o * hidden + h];
                }
            }
        }

        // Global average pool and ReLU.
        let [_, _, h2, w2] = fwd.z2.dims();
        let area = (h2 * w2) as f64;
        let mut dz2 = Tensor4::zeros(fwd.z2.dims())?;
        for b in 0..batch {
            for c in 0..hidden {
                let g = dpooled[b * hidden + c] / area;
                for (d, &z) in dz2.plane_mut(b, c).iter_mut().zip(fwd.z2.plane(b, c)) {
                    *d = if z > 0.0 { g } else { 0.0 };
                }
            }
        }

        let g_conv2 = conv2d_backward_weight(&dz2, &fwd.a1, &self.spec2, &self.lattice2)?;
        let [_, _, h1, w1] = fwd.a1.dims();
        let mut dz1 = conv2d_backward_input(&dz2, &self.conv2, &self.spec2, &self.lattice2, (h1, w1))?;
        for (d, &z) in dz1.data_mut().iter_mut().zip(fwd.z1.data()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let g_conv1 = conv2d_backward_weight(&dz1, images, &self.spec1, &self.lattice1)?;

        Ok((fwd.loss, [g_conv1, g_conv2, g_fc_w, g_fc_b]))
    }

    fn forward(&self, images: &Tensor4, labels: &[usize]) -> Result<Forward> {
        let batch = images.dims()[0];
        if labels.len() != batch {
            return Err(Error::shape(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        let z1 = psconv_forward_masked(images, &self.conv1, &self.spec1, &self.lattice1)?;
        let a1 = relu(&z1);
        let z2 = psconv_forward_masked(&a1, &self.conv2, &self.spec2, &self.lattice2)?;
        let hidden = self.spec2.cout;
        let [_, _, h2, w2] = z2.dims();
        let area = (h2 * w2) as f64;

        let mut pooled = vec![0.0; batch * hidden];
        for b in 0..batch {
            for c in 0..hidden {
                pooled[b * hidden + c] =
                    z2.plane(b, c).iter().map(|&v| v.max(0.0)).sum::<f64>() / area;
            }
        }

        let mut probs = vec![0.0; batch * NUM_CLASSES];
        let mut loss = 0.0;
        for b in 0..batch {
            let logits: Vec<f64> = (0..NUM_CLASSES)
                .map(|o| {
                    self.fc_bias.data()[o]
                        + (0..hidden)
                            .map(|h| self.fc_weight.data()[o * hidden + h] * pooled[b * hidden + h])
                            .sum::<f64>()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for o in 0..NUM_CLASSES {
                probs[b * NUM_CLASSES + o] = exps[o] / z;
            }
            if labels[b] >= NUM_CLASSES {
                return Err(Error::invalid(format!("label {} out of range", labels[b])));
            }
            loss -= (logits[labels[b]] - max) - z.ln();
        }
        Ok(Forward {
            z1,
            a1,
            z2,
            pooled,
            probs,
            loss: loss / batch as f64,
        })
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.push(NamedTensor::from_tensor4("stage1.conv.weight", &self.conv1))?;
        a.push(NamedTensor::from_tensor4("stage2.conv.weight", &self.conv2))?;
        a.push(NamedTensor::f64(
            "fc.weight",
            vec![NUM_CLASSES, self.spec2.cout],
            self.fc_weight.data().to_vec(),
        ))?;
        a.push(NamedTensor::f64("fc.bias", vec![NUM_CLASSES], self.fc_bias.data().to_vec()))?;
        Ok(a)
    }
}

struct Forward {
    z1: Tensor4,
    a1: Tensor4,
    z2: Tensor4,
    pooled: Vec<f64>,
    probs: Vec<f64>,
    loss: f64,
}

fn relu(t: &Tensor4) -> Tensor4 {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Momentum SGD with L2 decay folded into the velocity: `v ← m·v + g + wd·p`,
/// `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor4>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor4], grads: &[Tensor4]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads
                .iter()
                .map(|g| Tensor4::zeros(g.dims()))
                .collect::<Result<_>>()?;
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.dims() != g.dims() || v.dims() != g.dims() {
                return Err(Error::shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.dims(),
                    g.dims()
                )));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Samples per epoch; batches cycle through them in fixed order.
    pub dataset_len: usize,
    pub lattice: LatticeChoice,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            steps,
            lr,
            seed,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            dataset_len: 320,
            lattice: LatticeChoice::PsConv,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_len.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Loss of each step's batch, before that step's update.
    pub losses: Vec<f64>,
    pub model: DemoModel,
    pub steps_per_epoch: usize,
}

impl TrainOutcome {
    /// Mean loss per epoch; the last entry may cover a partial epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.losses
            .chunks(self.steps_per_epoch)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for (step, loss) in self.losses.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.17e}\n",
                step,
                step / self.steps_per_epoch,
                loss
            ));
        }
        out
    }
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    if config.steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if config.batch_size == 0 || config.dataset_len == 0 {
        return Err(Error::invalid("batch size and dataset length must be >= 1"));
    }
    let data = ScaleBlobDataset::new(config.seed, config.dataset_len);
    let mut model = DemoModel::new(config.seed.wrapping_add(1), config.lattice)?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let per_epoch = config.steps_per_epoch();
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let (images, labels) = data.batch(step % per_epoch, config.batch_size)?;
        let (loss, grads) = model.loss_and_grads(&images, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        opt.step(&mut model.params_mut(), &grads)?;
    }
    Ok(TrainOutcome {
        losses,
        model,
        steps_per_epoch: per_epoch,
    })
}
