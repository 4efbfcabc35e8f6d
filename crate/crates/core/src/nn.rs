//! The fixed conv → ReLU → avg-pool → FC network, its forward and backward
//! passes, and the SGD-momentum and Adam baselines.
//!
//! Shapes: 8×8×1 input, 4 output channels of a 3×3 valid convolution
//! (6×6×4), 2×2 average pooling (3×3×4 = 36 features), FC 36 → 4, softmax
//! cross-entropy. Conv patches are laid out channel-major, kernel row,
//! kernel column; pooled features are flattened channel-major.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImages;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Vector};

pub const IMAGE_SIDE: usize = 8;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const KERNEL: usize = 3;
pub const PATCH: usize = KERNEL * KERNEL;
pub const CONV_CHANNELS: usize = 4;
pub const CONV_SIDE: usize = IMAGE_SIDE - KERNEL + 1;
pub const POSITIONS: usize = CONV_SIDE * CONV_SIDE;
pub const POOL_SIDE: usize = CONV_SIDE / 2;
pub const FEATURES: usize = CONV_CHANNELS * POOL_SIDE * POOL_SIDE;
pub const CLASSES: usize = 4;

pub type Image = [f64; IMAGE_PIXELS];

/// Network parameters. The same shape doubles as a gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    /// `CONV_CHANNELS × PATCH`
    pub conv_w: Matrix,
    pub conv_b: Vector,
    /// `CLASSES × FEATURES`
    pub fc_w: Matrix,
    pub fc_b: Vector,
}

impl Model {
    pub fn zeros() -> Self {
        Model {
            conv_w: Matrix::zeros(CONV_CHANNELS, PATCH),
            conv_b: Vector::zeros(CONV_CHANNELS),
            fc_w: Matrix::zeros(CLASSES, FEATURES),
            fc_b: Vector::zeros(CLASSES),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut m = Model::zeros();
        let conv_bound = 1.0 / (PATCH as f64).sqrt();
        for w in m.conv_w.as_mut_slice() {
            *w = rng.random_range(-conv_bound..conv_bound);
        }
        let fc_bound = 1.0 / (FEATURES as f64).sqrt();
        for w in m.fc_w.as_mut_slice() {
            *w = rng.random_range(-fc_bound..fc_bound);
        }
        m
    }

    pub fn params(&self) -> [&[f64]; 4] {
        [
            self.conv_w.as_slice(),
            self.conv_b.as_slice(),
            self.fc_w.as_slice(),
            self.fc_b.as_slice(),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.conv_w.as_mut_slice(),
            self.conv_b.as_mut_slice(),
            self.fc_w.as_mut_slice(),
            self.fc_b.as_mut_slice(),
        ]
    }

    /// `self ← self − lr·step`, tensor by tensor.
    pub fn apply_step(&mut self, step: &Model, lr: f64) {
        for (p, s) in self.params_mut().into_iter().zip(step.params()) {
            for (a, b) in p.iter_mut().zip(s) {
                *a -= lr * b;
            }
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over parameter bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Everything the backward pass and the Kronecker factors need from one
/// forward pass.
#[derive(Clone, Debug)]
pub struct LayerTape {
    pub batch: usize,
    /// `(B·POSITIONS) × PATCH`, row `b·POSITIONS + t`.
    pub patches: Matrix,
    /// Conv pre-activations, `(B·POSITIONS) × CONV_CHANNELS`.
    pub conv_pre: Matrix,
    /// Pooled features, `B × FEATURES`.
    pub features: Matrix,
    pub logits: Matrix,
    model_id: u64,
}

#[derive(Clone, Debug)]
pub struct Backward {
    /// Mean-over-batch gradients.
    pub grads: Model,
    /// Per-sample loss gradients w.r.t. conv pre-activations, `(B·POSITIONS) × CONV_CHANNELS`.
    pub conv_preact_grads: Matrix,
    /// Per-sample loss gradients w.r.t. logits, `B × CLASSES`.
    pub fc_preact_grads: Matrix,
    pub loss: f64,
}

fn extract_patches(images: &[Image]) -> Matrix {
    let mut p = Matrix::zeros(images.len() * POSITIONS, PATCH);
    for (b, img) in images.iter().enumerate() {
        for i in 0..CONV_SIDE {
            for j in 0..CONV_SIDE {
                let row = b * POSITIONS + i * CONV_SIDE + j;
                for ki in 0..KERNEL {
                    for kj in 0..KERNEL {
                        p[(row, ki * KERNEL + kj)] = img[(i + ki) * IMAGE_SIDE + j + kj];
                    }
                }
            }
        }
    }
    p
}

fn pool_index(c: usize, i: usize, j: usize) -> usize {
    c * POOL_SIDE * POOL_SIDE + (i / 2) * POOL_SIDE + j / 2
}

pub fn forward(model: &Model, images: &[Image]) -> Result<(Matrix, LayerTape)> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = images.len();
    let patches = extract_patches(images);
    let mut conv_pre = patches.matmul(&model.conv_w.transpose())?;
    for r in 0..conv_pre.rows() {
        for c in 0..CONV_CHANNELS {
            conv_pre[(r, c)] += model.conv_b[c];
        }
    }
    let mut features = Matrix::zeros(batch, FEATURES);
    for b in 0..batch {
        for i in 0..CONV_SIDE {
            for j in 0..CONV_SIDE {
                let row = b * POSITIONS + i * CONV_SIDE + j;
                for c in 0..CONV_CHANNELS {
                    features[(b, pool_index(c, i, j))] += conv_pre[(row, c)].max(0.0) * 0.25;
                }
            }
        }
    }
    let mut logits = features.matmul(&model.fc_w.transpose())?;
    for b in 0..batch {
        for k in 0..CLASSES {
            logits[(b, k)] += model.fc_b[k];
        }
    }
    let tape = LayerTape {
        batch,
        patches,
        conv_pre,
        features,
        logits: logits.clone(),
        model_id: model.fingerprint(),
    };
    Ok((logits, tape))
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for b in 0..p.rows() {
        let max = logits.row(b).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..p.cols() {
            let e = (logits[(b, k)] - max).exp();
            p[(b, k)] = e;
            sum += e;
        }
        for k in 0..p.cols() {
            p[(b, k)] /= sum;
        }
    }
    p
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::dims("cross_entropy", logits.rows(), labels.len()));
    }
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

pub fn backward(model: &Model, tape: &LayerTape, labels: &[usize]) -> Result<Backward> {
    if tape.model_id != model.fingerprint() {
        return Err(Error::InvalidArgument("tape was recorded with different parameters".into()));
    }
    let batch = tape.batch;
    if labels.len() != batch {
        return Err(Error::dims("backward", batch, labels.len()));
    }
    let loss = cross_entropy(&tape.logits, labels)?;
    let inv_b = 1.0 / batch as f64;

    let mut dlogits = softmax(&tape.logits);
    for (b, &y) in labels.iter().enumerate() {
        dlogits[(b, y)] -= 1.0;
    }

    let mut grads = Model::zeros();
    grads.fc_w = dlogits.transpose().matmul(&tape.features)?.scale(inv_b);
    for k in 0..CLASSES {
        grads.fc_b[k] = (0..batch).map(|b| dlogits[(b, k)]).sum::<f64>() * inv_b;
    }

    let dfeat = dlogits.matmul(&model.fc_w)?;
    let mut dconv = Matrix::zeros(batch * POSITIONS, CONV_CHANNELS);
    for b in 0..batch {
        for i in 0..CONV_SIDE {
            for j in 0..CONV_SIDE {
                let row = b * POSITIONS + i * CONV_SIDE + j;
                for c in 0..CONV_CHANNELS {
                    if tape.conv_pre[(row, c)] > 0.0 {
                        dconv[(row, c)] = dfeat[(b, pool_index(c, i, j))] * 0.25;
                    }
                }
            }
        }
    }
    grads.conv_w = dconv.transpose().matmul(&tape.patches)?.scale(inv_b);
    for c in 0..CONV_CHANNELS {
        grads.conv_b[c] = (0..dconv.rows()).map(|r| dconv[(r, c)]).sum::<f64>() * inv_b;
    }

    Ok(Backward {
        grads,
        conv_preact_grads: dconv,
        fc_preact_grads: dlogits,
        loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Model>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("SGD-m needs lr > 0, momentum in [0,1): {lr}, {momentum}")));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: None,
        })
    }

    /// `v ← μ·v + g; θ ← θ − lr·v`
    pub fn step(&mut self, model: &mut Model, grads: &Model) {
        let v = self.velocity.get_or_insert_with(Model::zeros);
        for (vp, gp) in v.params_mut().into_iter().zip(grads.params()) {
            for (a, g) in vp.iter_mut().zip(gp) {
                *a = self.momentum * *a + g;
            }
        }
        model.apply_step(v, self.lr);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Option<Model>,
    v: Option<Model>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::InvalidArgument("Adam hyperparameters out of range".into()));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: None,
            v: None,
            t: 0,
        })
    }

    pub fn with_lr(lr: f64) -> Result<Self> {
        Adam::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model) {
        self.t += 1;
        let m = self.m.get_or_insert_with(Model::zeros);
        let v = self.v.get_or_insert_with(Model::zeros);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut update = Model::zeros();
        for (((up, mp), vp), gp) in update
            .params_mut()
            .into_iter()
            .zip(m.params_mut())
            .zip(v.params_mut())
            .zip(grads.params())
        {
            for i in 0..gp.len() {
                mp[i] = self.beta1 * mp[i] + (1.0 - self.beta1) * gp[i];
                vp[i] = self.beta2 * vp[i] + (1.0 - self.beta2) * gp[i] * gp[i];
                up[i] = (mp[i] / c1) / ((vp[i] / c2).sqrt() + self.eps);
            }
        }
        model.apply_step(&update, self.lr);
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Pooled features per sample, `N × FEATURES`.
    pub features: Matrix,
    pub predictions: Vec<usize>,
}

pub fn predict(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|b| {
            logits
                .row(b)
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map_or(0, |(k, _)| k)
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &LabeledImages) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (logits, tape) = forward(model, &data.images)?;
    let loss = cross_entropy(&logits, &data.labels)?;
    let predictions = predict(&logits);
    let correct = predictions.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / data.len() as f64,
        features: tape.features,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_images(n: usize, seed: u64) -> Vec<Image> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // jittered away from values that would land exactly on a ReLU kink
        (0..n).map(|_| std::array::from_fn(|_| r.random_range(0.01..0.99))).collect()
    }

    fn random_model(seed: u64) -> Model {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::init(&mut r);
        for b in m.conv_b.as_mut_slice().iter_mut().chain(m.fc_b.as_mut_slice()) {
            *b = r.random_range(-0.2..0.2);
        }
        m
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let imgs = random_images(3, 0);
        let (logits, _) = forward(&Model::zeros(), &imgs).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        let loss = cross_entropy(&logits, &[0, 1, 2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_reaches_only_its_receptive_fields() {
        let mut img = [0.0; IMAGE_PIXELS];
        img[3 * IMAGE_SIDE + 4] = 1.0;
        let mut m = Model::zeros();
        m.conv_w = Matrix::from_fn(CONV_CHANNELS, PATCH, |_, _| 1.0);
        let (_, tape) = forward(&m, &[img]).unwrap();
        for i in 0..CONV_SIDE {
            for j in 0..CONV_SIDE {
                let covers = (i..i + KERNEL).contains(&3) && (j..j + KERNEL).contains(&4);
                let v = tape.conv_pre[(i * CONV_SIDE + j, 0)];
                assert_eq!(v, if covers { 1.0 } else { 0.0 }, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let imgs = random_images(4, 1);
        let m = random_model(2);
        let (l1, _) = forward(&m, &imgs).unwrap();
        let perm = [2, 0, 3, 1];
        let shuffled: Vec<Image> = perm.iter().map(|&i| imgs[i]).collect();
        let (l2, _) = forward(&m, &shuffled).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(l2.row(r), l1.row(src));
        }
    }

    #[test]
    fn pooling_conserves_mass() {
        let imgs = random_images(2, 3);
        let m = random_model(4);
        let (_, tape) = forward(&m, &imgs).unwrap();
        for b in 0..2 {
            for c in 0..CONV_CHANNELS {
                let pooled: f64 = (0..9).map(|k| tape.features[(b, c * 9 + k)]).sum();
                let relu: f64 = (0..POSITIONS).map(|t| tape.conv_pre[(b * POSITIONS + t, c)].max(0.0)).sum();
                assert!((4.0 * pooled - relu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = random_model(5);
        let (logits, _) = forward(&m, &random_images(5, 6)).unwrap();
        let p = softmax(&logits);
        for b in 0..5 {
            assert!((p.row(b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn loss_at(m: &Model, imgs: &[Image], labels: &[usize]) -> f64 {
        cross_entropy(&forward(m, imgs).unwrap().0, labels).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let imgs = random_images(6, 7);
        let labels = [0, 1, 2, 3, 1, 2];
        let m = random_model(8);
        let (_, tape) = forward(&m, &imgs).unwrap();
        let g = backward(&m, &tape, &labels).unwrap().grads;
        let h = 1e-5;
        for t in 0..4 {
            for i in 0..g.params()[t].len() {
                let mut plus = m.clone();
                plus.params_mut()[t][i] += h;
                let mut minus = m.clone();
                minus.params_mut()[t][i] -= h;
                let fd = (loss_at(&plus, &imgs, &labels) - loss_at(&minus, &imgs, &labels)) / (2.0 * h);
                let an = g.params()[t][i];
                let scale = an.abs().max(fd.abs()).max(1e-3);
                assert!((fd - an).abs() / scale <= 1e-6, "tensor {t} index {i}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn duplicated_batch_same_gradients() {
        let imgs = random_images(3, 9);
        let labels = [2, 0, 1];
        let m = random_model(10);
        let (_, t1) = forward(&m, &imgs).unwrap();
        let g1 = backward(&m, &t1, &labels).unwrap().grads;
        let doubled: Vec<Image> = imgs.iter().chain(&imgs).cloned().collect();
        let (_, t2) = forward(&m, &doubled).unwrap();
        let g2 = backward(&m, &t2, &[2, 0, 1, 2, 0, 1]).unwrap().grads;
        for (a, b) in g1.params().iter().zip(g2.params()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_gradient() {
        let imgs = random_images(1, 11);
        let mut m = Model::zeros();
        m.fc_b[2] = 60.0;
        let (_, tape) = forward(&m, &imgs).unwrap();
        let g = backward(&m, &tape, &[2]).unwrap().grads;
        assert!(g.params().iter().all(|p| p.iter().all(|v| v.abs() < 1e-20)));
    }

    #[test]
    fn stale_tape_rejected() {
        let imgs = random_images(2, 12);
        let m = random_model(13);
        let (_, tape) = forward(&m, &imgs).unwrap();
        let mut moved = m.clone();
        moved.fc_b[0] += 0.1;
        assert!(backward(&moved, &tape, &[0, 1]).is_err());
        assert!(backward(&m, &tape, &[0]).is_err());
    }

    #[test]
    fn small_gradient_step_decreases_loss() {
        let imgs = random_images(8, 14);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let mut m = random_model(15);
        let (_, tape) = forward(&m, &imgs).unwrap();
        let bw = backward(&m, &tape, &labels).unwrap();
        m.apply_step(&bw.grads, 1e-3);
        assert!(loss_at(&m, &imgs, &labels) < bw.loss);
    }

    #[test]
    fn sgd_momentum_unrolls() {
        let mut g = Model::zeros();
        g.fc_b[1] = 2.0;
        let mut m = Model::zeros();
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        opt.step(&mut m, &g);
        opt.step(&mut m, &g);
        assert!((m.fc_b[1] + 0.1 * 2.0 * (1.0 + 1.9)).abs() < 1e-15);

        let mut plain = Model::zeros();
        let mut opt = SgdMomentum::new(0.5, 0.0).unwrap();
        opt.step(&mut plain, &g);
        assert_eq!(plain.fc_b[1], -1.0);

        let mut m = random_model(1);
        let before = m.clone();
        SgdMomentum::new(0.1, 0.9).unwrap().step(&mut m, &Model::zeros());
        assert_eq!(m, before);
    }

    #[test]
    fn adam_first_step_and_scale_invariance() {
        let mut g = Model::zeros();
        g.fc_b[0] = 0.3;
        g.fc_b[1] = -2.0;
        let mut m = Model::zeros();
        let mut opt = Adam::with_lr(0.01).unwrap();
        opt.step(&mut m, &g);
        // bias-corrected first step: m̂ = g, v̂ = g², update = g/(|g| + ε)
        assert!((m.fc_b[0] + 0.01 * 0.3 / (0.3 + 1e-8)).abs() < 1e-15);
        assert!((m.fc_b[1] - 0.01 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(m.fc_b[2], 0.0);

        let mut scaled = Model::zeros();
        let mut g2 = g.clone();
        for p in g2.params_mut() {
            for v in p.iter_mut() {
                *v *= 1000.0;
            }
        }
        Adam::with_lr(0.01).unwrap().step(&mut scaled, &g2);
        assert!((scaled.fc_b[0] - m.fc_b[0]).abs() < 1e-9);
    }

    #[test]
    fn evaluate_shapes() {
        let imgs = random_images(10, 20);
        let data = LabeledImages::new(imgs, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1], crate::dataset::Split::Test).unwrap();
        let e = evaluate(&random_model(21), &data).unwrap();
        assert_eq!(e.features.shape(), (10, FEATURES));
        assert!((0.0..=1.0).contains(&e.accuracy));
        let empty = LabeledImages::new(vec![], vec![], crate::dataset::Split::Test).unwrap();
        assert!(matches!(evaluate(&Model::zeros(), &empty), Err(Error::EmptyDataset)));
    }
}
