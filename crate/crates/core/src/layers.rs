//! Feed-forward layers, the conventional tanh RNN layer and the
//! softmax/cross-entropy output head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{self, init_matrix, init_vector, Activation, Init, Matrix, Vector};
use crate::params::{Parameters, TensorMut, TensorRef};

/// `y = act(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vector,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    pub x: Vector,
    pub pre: Vector,
    pub y: Vector,
}

impl DenseLayer {
    pub fn new(w: Matrix, b: Vector, act: Activation) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(Error::shape("DenseLayer::new", &w, format!("bias of {}", b.len())));
        }
        if act == Activation::Softmax {
            return Err(Error::Architecture(
                "softmax is only allowed in the output layer".into(),
            ));
        }
        Ok(DenseLayer { w, b, act })
    }

    pub fn init<R: Rng + ?Sized>(
        n_in: usize,
        n_out: usize,
        act: Activation,
        weights: Init,
        biases: Init,
        rng: &mut R,
    ) -> Self {
        DenseLayer {
            w: init_matrix(n_out, n_in, weights, rng),
            b: init_vector(n_out, biases, rng),
            act,
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.cols()
    }

    pub fn n_out(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, DenseCache)> {
        let mut pre = self.w.matvec(x)?;
        pre.add_assign(&self.b);
        let mut y = pre.clone();
        numerics::apply_in_place(self.act, &mut y)?;
        Ok((
            y.clone(),
            DenseCache {
                x: Vector::from(x.to_vec()),
                pre,
                y,
            },
        ))
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub fn backward(&self, cache: &DenseCache, dy: &[f64], grad: &mut DenseLayer) -> Result<Vector> {
        if dy.len() != self.n_out() || cache.x.len() != self.n_in() {
            return Err(Error::shape(
                "dense backward",
                &self.w,
                format!("dy of {}, x of {}", dy.len(), cache.x.len()),
            ));
        }
        let dz: Vector = dy
            .iter()
            .zip(cache.pre.iter().zip(cache.y.iter()))
            .map(|(&g, (&p, &o))| g * self.act.derivative_at(p, o))
            .collect();
        grad.w.add_outer(&dz, &cache.x);
        grad.b.add_assign(&dz);
        let mut dx = Vector::zeros(self.n_in());
        self.w.matvec_transpose_acc(&dz, &mut dx);
        Ok(dx)
    }
}

impl Parameters for DenseLayer {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![TensorRef::matrix("w", &self.w), TensorRef::vector("b", &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            TensorMut::matrix("w", &mut self.w),
            TensorMut::vector("b", &mut self.b),
        ]
    }
}

/// Conventional recurrent layer, `h_t = tanh(W_xh x_t + W_hh h_{t-1} + b_h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnLayer {
    pub w_xh: Matrix,
    pub w_hh: Matrix,
    pub b_h: Vector,
}

#[derive(Clone, Debug)]
pub struct RnnStepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub h: Vector,
}

impl RnnLayer {
    pub fn new(w_xh: Matrix, w_hh: Matrix, b_h: Vector) -> Result<Self> {
        if w_hh.rows() != w_hh.cols() {
            return Err(Error::shape("RnnLayer::new", &w_hh, "square recurrent matrix"));
        }
        if w_xh.rows() != w_hh.rows() || b_h.len() != w_hh.rows() {
            return Err(Error::shape(
                "RnnLayer::new",
                &w_xh,
                format!("{} / bias {}", w_hh, b_h.len()),
            ));
        }
        Ok(RnnLayer { w_xh, w_hh, b_h })
    }

    pub fn init<R: Rng + ?Sized>(n_in: usize, n_units: usize, weights: Init, biases: Init, rng: &mut R) -> Self {
        RnnLayer {
            w_xh: init_matrix(n_units, n_in, weights, rng),
            w_hh: init_matrix(n_units, n_units, weights, rng),
            b_h: init_vector(n_units, biases, rng),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w_xh.cols()
    }

    pub fn n_units(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn step_forward(&self, x: &[f64], h_prev: &[f64]) -> Result<RnnStepCache> {
        if x.len() != self.n_in() || h_prev.len() != self.n_units() {
            return Err(Error::shape(
                "rnn step",
                &self.w_xh,
                format!("x of {}, h of {}", x.len(), h_prev.len()),
            ));
        }
        let mut h = self.b_h.clone();
        self.w_xh.matvec_acc(x, &mut h);
        self.w_hh.matvec_acc(h_prev, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        if !h.is_finite() {
            return Err(Error::NonFinite("rnn hidden state".into()));
        }
        Ok(RnnStepCache {
            x: Vector::from(x.to_vec()),
            h_prev: Vector::from(h_prev.to_vec()),
            h,
        })
    }

    pub fn sequence_forward(&self, xs: &[Vector], h0: &[f64]) -> Result<Vec<RnnStepCache>> {
        let mut caches: Vec<RnnStepCache> = Vec::with_capacity(xs.len());
        for x in xs {
            let cache = match caches.last() {
                Some(prev) => self.step_forward(x, &prev.h)?,
                None => self.step_forward(x, h0)?,
            };
            caches.push(cache);
        }
        Ok(caches)
    }

    /// Full BPTT over the cached steps. Returns `(d_xs, d_h0)`.
    pub fn sequence_backward(
        &self,
        caches: &[RnnStepCache],
        d_hs: &[Vector],
        grad: &mut RnnLayer,
    ) -> Result<(Vec<Vector>, Vector)> {
        if caches.len() != d_hs.len() {
            return Err(Error::shape("rnn backward", caches.len(), d_hs.len()));
        }
        let mut d_xs = vec![Vector::zeros(self.n_in()); caches.len()];
        let mut dh_next = Vector::zeros(self.n_units());
        for t in (0..caches.len()).rev() {
            let cache = &caches[t];
            let dz: Vector = d_hs[t]
                .iter()
                .zip(dh_next.iter())
                .zip(cache.h.iter())
                .map(|((&a, &b), &h)| (a + b) * (1.0 - h * h))
                .collect();
            grad.w_xh.add_outer(&dz, &cache.x);
            grad.w_hh.add_outer(&dz, &cache.h_prev);
            grad.b_h.add_assign(&dz);
            self.w_xh.matvec_transpose_acc(&dz, &mut d_xs[t]);
            let mut dh_prev = Vector::zeros(self.n_units());
            self.w_hh.matvec_transpose_acc(&dz, &mut dh_prev);
            dh_next = dh_prev;
        }
        Ok((d_xs, dh_next))
    }
}

impl Parameters for RnnLayer {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef::matrix("w_xh", &self.w_xh),
            TensorRef::matrix("w_hh", &self.w_hh),
            TensorRef::vector("b_h", &self.b_h),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            TensorMut::matrix("w_xh", &mut self.w_xh),
            TensorMut::matrix("w_hh", &mut self.w_hh),
            TensorMut::vector("b_h", &mut self.b_h),
        ]
    }
}

/// Affine map to class logits followed by softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxOutput {
    pub w_hy: Matrix,
    pub b_y: Vector,
}

/// Everything `softmax_xent` produces for one frame.
#[derive(Clone, Debug)]
pub struct XentFrame {
    pub loss: f64,
    pub probs: Vector,
    pub dh: Vector,
    pub d_w: Matrix,
    pub d_b: Vector,
}

impl SoftmaxOutput {
    pub fn new(w_hy: Matrix, b_y: Vector) -> Result<Self> {
        if w_hy.rows() != b_y.len() {
            return Err(Error::shape("SoftmaxOutput::new", &w_hy, format!("bias of {}", b_y.len())));
        }
        Ok(SoftmaxOutput { w_hy, b_y })
    }

    pub fn init<R: Rng + ?Sized>(n_in: usize, n_classes: usize, weights: Init, biases: Init, rng: &mut R) -> Self {
        SoftmaxOutput {
            w_hy: init_matrix(n_classes, n_in, weights, rng),
            b_y: init_vector(n_classes, biases, rng),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w_hy.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.w_hy.rows()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vector> {
        let mut z = self.w_hy.matvec(h)?;
        z.add_assign(&self.b_y);
        Ok(z)
    }

    pub fn log_probs(&self, h: &[f64]) -> Result<Vector> {
        numerics::log_softmax(&self.logits(h)?)
    }

    /// Cross-entropy `-log p[target]` for one frame with all of its gradients.
    pub fn softmax_xent(&self, h: &[f64], target: usize) -> Result<XentFrame> {
        if target >= self.n_classes() {
            return Err(Error::TargetOutOfRange {
                target,
                n_classes: self.n_classes(),
            });
        }
        let log_p = self.log_probs(h)?;
        let probs: Vector = log_p.iter().map(|v| v.exp()).collect();
        let mut d_logits = probs.clone();
        d_logits[target] -= 1.0;
        let mut grad = SoftmaxOutput {
            w_hy: Matrix::zeros(self.n_classes(), self.n_in()),
            b_y: Vector::zeros(self.n_classes()),
        };
        let dh = self.backward_logits(h, &d_logits, &mut grad);
        Ok(XentFrame {
            loss: -log_p[target],
            probs,
            dh,
            d_w: grad.w_hy,
            d_b: grad.b_y,
        })
    }

    /// Accumulates parameter gradients for upstream `d_logits`; returns `dh`.
    pub(crate) fn backward_logits(&self, h: &[f64], d_logits: &[f64], grad: &mut SoftmaxOutput) -> Vector {
        grad.w_hy.add_outer(d_logits, h);
        grad.b_y.add_assign(d_logits);
        let mut dh = Vector::zeros(self.n_in());
        self.w_hy.matvec_transpose_acc(d_logits, &mut dh);
        dh
    }
}

impl Parameters for SoftmaxOutput {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef::matrix("w_hy", &self.w_hy),
            TensorRef::vector("b_y", &self.b_y),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            TensorMut::matrix("w_hy", &mut self.w_hy),
            TensorMut::vector("b_y", &mut self.b_y),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_difference, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(n: usize, seed: u64) -> Vector {
        init_vector(n, Init::Uniform(1.0), &mut rng(seed))
    }

    #[test]
    fn dense_zero_relu_and_identity() {
        let zero = DenseLayer::new(Matrix::zeros(3, 4), Vector::zeros(3), Activation::Relu).unwrap();
        let (y, _) = zero.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, Vector::zeros(3));

        let id = DenseLayer::new(Matrix::identity(3), Vector::zeros(3), Activation::Linear).unwrap();
        let (y, _) = id.forward(&[0.5, -1.5, 2.0]).unwrap();
        assert_eq!(y.as_ref(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn dense_matches_hand_loop() {
        let layer = DenseLayer::init(5, 3, Activation::Tanh, Init::Uniform(0.8), Init::Uniform(0.8), &mut rng(3));
        let x = random_vec(5, 4);
        let (y, _) = layer.forward(&x).unwrap();
        for j in 0..3 {
            let mut s = layer.b[j];
            for k in 0..5 {
                s += layer.w[(j, k)] * x[k];
            }
            assert!((y[j] - s.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_rejects_softmax_and_bad_shapes() {
        assert!(DenseLayer::new(Matrix::zeros(2, 2), Vector::zeros(2), Activation::Softmax).is_err());
        assert!(DenseLayer::new(Matrix::zeros(2, 2), Vector::zeros(3), Activation::Relu).is_err());
        let layer = DenseLayer::new(Matrix::zeros(2, 2), Vector::zeros(2), Activation::Relu).unwrap();
        assert!(layer.forward(&[1.0]).is_err());
    }

    #[test]
    fn dense_backward_zero_and_linear() {
        let layer = DenseLayer::init(4, 3, Activation::Linear, Init::Uniform(1.0), Init::Uniform(1.0), &mut rng(5));
        let x = random_vec(4, 6);
        let (_, cache) = layer.forward(&x).unwrap();

        let mut grad = layer.clone();
        grad.zero();
        let dx = layer.backward(&cache, &[0.0; 3], &mut grad).unwrap();
        assert_eq!(dx, Vector::zeros(4));
        assert_eq!(grad.flatten(), vec![0.0; 15]);

        let dy = random_vec(3, 7);
        let dx = layer.backward(&cache, &dy, &mut grad).unwrap();
        let expected = layer.w.transpose().matvec(&dy).unwrap();
        assert_eq!(dx, expected);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let layer = DenseLayer::init(4, 3, Activation::Relu, Init::Uniform(1.0), Init::Uniform(1.0), &mut rng(8));
        let x = random_vec(4, 9);
        let dy = random_vec(3, 10);
        let objective = |l: &DenseLayer, x: &[f64]| -> f64 {
            let (y, _) = l.forward(x).unwrap();
            y.dot(&dy)
        };
        let (_, cache) = layer.forward(&x).unwrap();
        let mut grad = layer.clone();
        grad.zero();
        let dx = layer.backward(&cache, &dy, &mut grad).unwrap();

        let analytic = grad.flatten();
        let base = layer.flatten();
        for (i, a) in analytic.iter().enumerate() {
            let n = central_difference(&base, i, |p| {
                let mut l = layer.clone();
                l.assign_flat(p);
                objective(&l, &x)
            });
            assert!(rel_err(*a, n) < 1e-5, "param {i}: {a} vs {n}");
        }
        for i in 0..4 {
            let n = central_difference(&x, i, |xp| objective(&layer, xp));
            assert!(rel_err(dx[i], n) < 1e-5);
        }
    }

    #[test]
    fn rnn_zero_weights_and_single_step() {
        let zero = RnnLayer::init(3, 4, Init::Zeros, Init::Zeros, &mut rng(0));
        let xs: Vec<Vector> = (0..5).map(|s| random_vec(3, s)).collect();
        let caches = zero.sequence_forward(&xs, &[0.0; 4]).unwrap();
        assert!(caches.iter().all(|c| c.h == Vector::zeros(4)));

        let rnn = RnnLayer::init(3, 4, Init::Uniform(0.5), Init::Uniform(0.5), &mut rng(1));
        let dense = DenseLayer::new(rnn.w_xh.clone(), rnn.b_h.clone(), Activation::Tanh).unwrap();
        let caches = rnn.sequence_forward(&xs[..1], &[0.0; 4]).unwrap();
        let (y, _) = dense.forward(&xs[0]).unwrap();
        assert_eq!(caches[0].h, y);
    }

    #[test]
    fn rnn_gradient_check() {
        let rnn = RnnLayer::init(2, 3, Init::Uniform(0.7), Init::Uniform(0.7), &mut rng(2));
        let xs: Vec<Vector> = (0..4).map(|s| random_vec(2, 20 + s)).collect();
        let h0 = random_vec(3, 30);
        let d_hs: Vec<Vector> = (0..4).map(|s| random_vec(3, 40 + s)).collect();
        let objective = |l: &RnnLayer, xs: &[Vector], h0: &[f64]| -> f64 {
            let caches = l.sequence_forward(xs, h0).unwrap();
            caches.iter().zip(&d_hs).map(|(c, d)| c.h.dot(d)).sum()
        };
        let caches = rnn.sequence_forward(&xs, &h0).unwrap();
        let mut grad = rnn.clone();
        grad.zero();
        let (d_xs, d_h0) = rnn.sequence_backward(&caches, &d_hs, &mut grad).unwrap();

        let base = rnn.flatten();
        for (i, a) in grad.flatten().iter().enumerate() {
            let n = central_difference(&base, i, |p| {
                let mut l = rnn.clone();
                l.assign_flat(p);
                objective(&l, &xs, &h0)
            });
            assert!(rel_err(*a, n) < 1e-5, "param {i}: {a} vs {n}");
        }
        for i in 0..3 {
            let n = central_difference(&h0, i, |h| objective(&rnn, &xs, h));
            assert!(rel_err(d_h0[i], n) < 1e-5);
        }
        for t in 0..4 {
            for i in 0..2 {
                let n = central_difference(&xs[t], i, |x| {
                    let mut xs2 = xs.clone();
                    xs2[t] = Vector::from(x.to_vec());
                    objective(&rnn, &xs2, &h0)
                });
                assert!(rel_err(d_xs[t][i], n) < 1e-5);
            }
        }
    }

    #[test]
    fn xent_uniform_and_perfect() {
        let head = SoftmaxOutput::init(3, 4, Init::Zeros, Init::Zeros, &mut rng(0));
        let frame = head.softmax_xent(&[0.3, -0.2, 0.9], 2).unwrap();
        assert!((frame.loss - 4f64.ln()).abs() < 1e-12);
        assert!((frame.loss - 1.3863).abs() < 1e-4);

        let mut head = SoftmaxOutput::init(1, 3, Init::Zeros, Init::Zeros, &mut rng(0));
        head.b_y[1] = 60.0;
        let frame = head.softmax_xent(&[0.0], 1).unwrap();
        assert!(frame.loss < 1e-20);
        assert!(frame.d_b.iter().all(|g| g.abs() < 1e-20));
    }

    #[test]
    fn xent_target_out_of_range() {
        let head = SoftmaxOutput::init(3, 4, Init::Zeros, Init::Zeros, &mut rng(0));
        assert!(matches!(
            head.softmax_xent(&[0.0; 3], 4),
            Err(Error::TargetOutOfRange { target: 4, n_classes: 4 })
        ));
    }

    #[test]
    fn xent_gradient_check_and_zero_sum() {
        let head = SoftmaxOutput::init(5, 6, Init::Uniform(1.0), Init::Uniform(1.0), &mut rng(12));
        let h = random_vec(5, 13);
        let frame = head.softmax_xent(&h, 3).unwrap();
        assert!(frame.loss >= 0.0);
        assert!(frame.d_b.iter().sum::<f64>().abs() < 1e-12);

        let base = head.w_hy.as_slice().to_vec();
        for (i, a) in frame.d_w.as_slice().iter().enumerate() {
            let n = central_difference(&base, i, |p| {
                let mut hd = head.clone();
                hd.w_hy.as_mut_slice().copy_from_slice(p);
                hd.softmax_xent(&h, 3).unwrap().loss
            });
            assert!(rel_err(*a, n) < 1e-5, "w {i}: {a} vs {n}");
        }
    }
}
