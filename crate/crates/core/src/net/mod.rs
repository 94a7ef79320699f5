//! Network construction from an architecture spec and whole-network
//! forward/backward over a masked frame sequence.

mod spec;

pub use spec::{parse_any, parse_spec, parse_spec_json, LayerSpec, NetworkSpec};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{DenseCache, DenseLayer, RnnLayer, RnnStepCache, SoftmaxOutput};
use crate::lstm::{LstmInit, LstmParams, LstmStepCache, VariantShape};
use crate::numerics::{Activation, Init, Vector};
use crate::params::{prefixed, prefixed_mut, Parameters, TensorMut, TensorRef};

/// Parameter initialization for a whole network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NetInit {
    /// Glorot-uniform weights, zero biases; LSTM forget bias +1, zero peepholes.
    Default,
    /// Every parameter (biases and peepholes included) from `uniform(±r)`.
    Uniform(f64),
}

impl NetInit {
    fn weights(self) -> Init {
        match self {
            NetInit::Default => Init::Glorot,
            NetInit::Uniform(r) => Init::Uniform(r),
        }
    }

    fn biases(self) -> Init {
        match self {
            NetInit::Default => Init::Zeros,
            NetInit::Uniform(r) => Init::Uniform(r),
        }
    }

    fn lstm(self) -> LstmInit {
        match self {
            NetInit::Default => LstmInit::default(),
            NetInit::Uniform(r) => LstmInit::uniform(r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Rnn(RnnLayer),
    Lstm(LstmParams),
    Softmax(SoftmaxOutput),
}

impl Layer {
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, n_in: usize, init: NetInit, rng: &mut R) -> Result<Layer> {
        let (w, b) = (init.weights(), init.biases());
        Ok(match *spec {
            LayerSpec::Dense { units, act } => Layer::Dense(DenseLayer::init(n_in, units, act, w, b, rng)),
            LayerSpec::Rnn { units } => Layer::Rnn(RnnLayer::init(n_in, units, w, b, rng)),
            LayerSpec::Lstm { cells } => {
                Layer::Lstm(LstmParams::init(n_in, cells, VariantShape::Plain, init.lstm(), rng)?)
            }
            LayerSpec::LstmIp {
                cells,
                proj_units,
                depth,
            } => Layer::Lstm(LstmParams::init(
                n_in,
                cells,
                VariantShape::InputProjection {
                    units: proj_units,
                    depth,
                    act: Activation::Tanh,
                },
                init.lstm(),
                rng,
            )?),
            LayerSpec::LstmOp { cells, proj_units } => Layer::Lstm(LstmParams::init(
                n_in,
                cells,
                VariantShape::OutputProjection {
                    units: proj_units,
                    act: Activation::Linear,
                },
                init.lstm(),
                rng,
            )?),
            LayerSpec::Softmax { classes } => Layer::Softmax(SoftmaxOutput::init(n_in, classes, w, b, rng)),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().tensors_dyn().iter().map(|t| t.data.len()).sum()
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Rnn(_) => "rnn",
            Layer::Lstm(_) => "lstm",
            Layer::Softmax(_) => "softmax",
        }
    }

    fn params(&self) -> &dyn ParamsDyn {
        match self {
            Layer::Dense(l) => l,
            Layer::Rnn(l) => l,
            Layer::Lstm(l) => l,
            Layer::Softmax(l) => l,
        }
    }

    fn params_mut(&mut self) -> &mut dyn ParamsDyn {
        match self {
            Layer::Dense(l) => l,
            Layer::Rnn(l) => l,
            Layer::Lstm(l) => l,
            Layer::Softmax(l) => l,
        }
    }

    fn zero_state(&self) -> LayerState {
        match self {
            Layer::Rnn(l) => LayerState::Rnn {
                h: Vector::zeros(l.n_units()),
            },
            Layer::Lstm(l) => LayerState::Lstm {
                h: Vector::zeros(l.n_recurrent()),
                c: Vector::zeros(l.n_cells()),
            },
            Layer::Dense(_) | Layer::Softmax(_) => LayerState::Stateless,
        }
    }
}

// Object-safe subset of `Parameters` so layers can be walked uniformly.
trait ParamsDyn {
    fn tensors_dyn(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut_dyn(&mut self) -> Vec<TensorMut<'_>>;
}

impl<T: Parameters> ParamsDyn for T {
    fn tensors_dyn(&self) -> Vec<TensorRef<'_>> {
        self.tensors()
    }

    fn tensors_mut_dyn(&mut self) -> Vec<TensorMut<'_>> {
        self.tensors_mut()
    }
}

fn layer_tensors(layers: &[Layer]) -> Vec<TensorRef<'_>> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(k, l)| prefixed(&format!("{k}.{}", l.kind()), l.params().tensors_dyn()))
        .collect()
}

fn layer_tensors_mut(layers: &mut [Layer]) -> Vec<TensorMut<'_>> {
    layers
        .iter_mut()
        .enumerate()
        .flat_map(|(k, l)| {
            let prefix = format!("{k}.{}", l.kind());
            prefixed_mut(&prefix, l.params_mut().tensors_mut_dyn())
        })
        .collect()
}

/// Recurrent state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Stateless,
    Rnn { h: Vector },
    /// `h` is the recurrent input (the projection output under LSTM-OP).
    Lstm { h: Vector, c: Vector },
}

/// Recurrent state of every layer, indexed like the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState(pub Vec<LayerState>);

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Same structure as the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Parameters for Gradients {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        layer_tensors(&self.layers)
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        layer_tensors_mut(&mut self.layers)
    }
}

impl Parameters for Network {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        layer_tensors(&self.layers)
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        layer_tensors_mut(&mut self.layers)
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Dense(Vec<DenseCache>),
    Rnn(Vec<RnnStepCache>),
    Lstm(Vec<LstmStepCache>),
    /// Inputs to the output head.
    Softmax(Vec<Vector>),
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NetworkCache {
    layers: Vec<LayerCache>,
    log_probs: Vec<Vector>,
}

impl NetworkCache {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[Vector] {
        &self.log_probs
    }

    /// Recurrent state of every layer right after frame `t`.
    pub fn state_after(&self, t: usize) -> RecurrentState {
        RecurrentState(
            self.layers
                .iter()
                .map(|c| match c {
                    LayerCache::Rnn(s) => LayerState::Rnn { h: s[t].h.clone() },
                    LayerCache::Lstm(s) => LayerState::Lstm {
                        h: s[t].out.clone(),
                        c: s[t].c.clone(),
                    },
                    LayerCache::Dense(_) | LayerCache::Softmax(_) => LayerState::Stateless,
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Per-frame class log-probabilities.
    pub log_probs: Vec<Vector>,
    pub cache: NetworkCache,
    pub final_state: RecurrentState,
}

/// Result of a backward pass whose loss gradient was multiplied by `scale`.
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub grads: Gradients,
    /// Unscaled sum of per-frame cross-entropies over unmasked frames.
    pub loss_sum: f64,
    pub n_frames: usize,
    pub n_correct: usize,
}

impl Network {
    pub fn build<R: Rng + ?Sized>(spec: NetworkSpec, init: NetInit, rng: &mut R) -> Result<Network> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .zip(spec.input_dims())
            .map(|(l, n_in)| Layer::init(l, n_in, init, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { spec, layers })
    }

    /// Assembles a network from explicit layers, checking them against `spec`.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer>) -> Result<Network> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::shape("Network::from_layers", spec.layers.len(), layers.len()));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for ((l, s), n_in) in layers.iter().zip(&spec.layers).zip(spec.input_dims()) {
            let template = Layer::init(s, n_in, NetInit::Default, &mut rng)?;
            let shapes = |x: &Layer| -> Vec<(String, usize, usize)> {
                x.params().tensors_dyn().into_iter().map(|t| (t.name, t.rows, t.cols)).collect()
            };
            if std::mem::discriminant(l) != std::mem::discriminant(&template) || shapes(l) != shapes(&template) {
                return Err(Error::Architecture(format!("layer does not match {s}")));
            }
            if let (Layer::Dense(d), LayerSpec::Dense { act, .. }) = (l, s) {
                if d.act != *act {
                    return Err(Error::Architecture(format!("layer activation {} does not match {s}", d.act)));
                }
            }
            if let Layer::Lstm(p) = l {
                p.validate()?;
            }
        }
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    pub fn zero_state(&self) -> RecurrentState {
        RecurrentState(self.layers.iter().map(Layer::zero_state).collect())
    }

    pub fn zero_gradients(&self) -> Gradients {
        let mut g = Gradients {
            layers: self.layers.clone(),
        };
        g.zero();
        g
    }

    /// Plain SGD: `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, d) in p.data.iter_mut().zip(g.data) {
                *w -= lr * d;
            }
        }
    }

    /// Layer-by-layer forward pass over one frame sequence.
    pub fn forward(&self, frames: &[Vector], state: &RecurrentState) -> Result<ForwardOutput> {
        if frames.is_empty() {
            return Err(Error::Config("cannot run a network over zero frames".into()));
        }
        if state.0.len() != self.layers.len() {
            return Err(Error::shape("network state", self.layers.len(), state.0.len()));
        }
        if let Some(bad) = frames.iter().find(|f| f.len() != self.input_dim()) {
            return Err(Error::shape("network input", self.input_dim(), bad.len()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut final_state = Vec::with_capacity(self.layers.len());
        let mut xs: Vec<Vector> = frames.to_vec();
        let mut log_probs = Vec::new();
        for (layer, st) in self.layers.iter().zip(&state.0) {
            match (layer, st) {
                (Layer::Dense(l), _) => {
                    let mut cache = Vec::with_capacity(xs.len());
                    let mut ys = Vec::with_capacity(xs.len());
                    for x in &xs {
                        let (y, c) = l.forward(x)?;
                        ys.push(y);
                        cache.push(c);
                    }
                    caches.push(LayerCache::Dense(cache));
                    final_state.push(LayerState::Stateless);
                    xs = ys;
                }
                (Layer::Rnn(l), LayerState::Rnn { h }) => {
                    let steps = l.sequence_forward(&xs, h)?;
                    xs = steps.iter().map(|s| s.h.clone()).collect();
                    final_state.push(LayerState::Rnn {
                        h: xs.last().cloned().unwrap_or_default(),
                    });
                    caches.push(LayerCache::Rnn(steps));
                }
                (Layer::Lstm(l), LayerState::Lstm { h, c }) => {
                    let steps = l.sequence_forward(&xs, h, c)?;
                    xs = steps.iter().map(|s| s.out.clone()).collect();
                    let last = steps.last().expect("non-empty sequence");
                    final_state.push(LayerState::Lstm {
                        h: last.out.clone(),
                        c: last.c.clone(),
                    });
                    caches.push(LayerCache::Lstm(steps));
                }
                (Layer::Softmax(head), _) => {
                    log_probs = xs.iter().map(|x| head.log_probs(x)).collect::<Result<Vec<_>>>()?;
                    final_state.push(LayerState::Stateless);
                    caches.push(LayerCache::Softmax(std::mem::take(&mut xs)));
                }
                (l, s) => {
                    return Err(Error::shape("network state", l.kind(), format!("{s:?}")));
                }
            }
        }
        Ok(ForwardOutput {
            log_probs: log_probs.clone(),
            cache: NetworkCache {
                layers: caches,
                log_probs,
            },
            final_state: RecurrentState(final_state),
        })
    }

    /// Forward passes over several independent streams at once. Results are
    /// returned in stream order and do not depend on the thread schedule.
    pub fn forward_streams(&self, streams: &[(&[Vector], &RecurrentState)]) -> Result<Vec<ForwardOutput>> {
        streams
            .par_iter()
            .map(|(frames, state)| self.forward(frames, state))
            .collect()
    }

    /// Masked mean cross-entropy and its gradients.
    pub fn backward(&self, cache: &NetworkCache, targets: &[usize], mask: &[bool]) -> Result<(Gradients, f64)> {
        let n = mask.iter().filter(|&&m| m).count();
        let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let out = self.backward_scaled(cache, targets, mask, scale)?;
        let mean = if n == 0 { 0.0 } else { out.loss_sum / n as f64 };
        Ok((out.grads, mean))
    }

    /// Gradients of `scale · Σ_{t unmasked} −log p_t[target_t]`.
    pub fn backward_scaled(
        &self,
        cache: &NetworkCache,
        targets: &[usize],
        mask: &[bool],
        scale: f64,
    ) -> Result<BackwardOutput> {
        let t_len = cache.len();
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::shape(
                "network backward",
                format!("{t_len} frames"),
                format!("{} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::shape("network cache", self.layers.len(), cache.layers.len()));
        }
        let n_classes = self.n_classes();
        let mut loss_sum = 0.0;
        let mut n_frames = 0;
        let mut n_correct = 0;
        let mut d_logits = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if !mask[t] {
                d_logits.push(None);
                continue;
            }
            let target = targets[t];
            if target >= n_classes {
                return Err(Error::TargetOutOfRange { target, n_classes });
            }
            let lp = &cache.log_probs[t];
            loss_sum -= lp[target];
            n_frames += 1;
            if lp.argmax() == target {
                n_correct += 1;
            }
            let mut d: Vector = lp.iter().map(|v| v.exp() * scale).collect();
            d[target] -= scale;
            d_logits.push(Some(d));
        }

        let mut grads = self.zero_gradients();
        let mut upstream: Vec<Vector> = Vec::new();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let g = &mut grads.layers[k];
            upstream = match (layer, &cache.layers[k], g) {
                (Layer::Softmax(head), LayerCache::Softmax(inputs), Layer::Softmax(gh)) => inputs
                    .iter()
                    .zip(&d_logits)
                    .map(|(h, d)| match d {
                        Some(d) => head.backward_logits(h, d, gh),
                        None => Vector::zeros(head.n_in()),
                    })
                    .collect(),
                (Layer::Dense(l), LayerCache::Dense(steps), Layer::Dense(gl)) => steps
                    .iter()
                    .zip(&upstream)
                    .map(|(c, dy)| l.backward(c, dy, gl))
                    .collect::<Result<Vec<_>>>()?,
                (Layer::Rnn(l), LayerCache::Rnn(steps), Layer::Rnn(gl)) => l.sequence_backward(steps, &upstream, gl)?.0,
                (Layer::Lstm(l), LayerCache::Lstm(steps), Layer::Lstm(gl)) => {
                    let back = l.sequence_backward(steps, &upstream)?;
                    *gl = back.params;
                    back.d_xs
                }
                _ => return Err(Error::Config(format!("cache does not match layer {k}"))),
            };
        }

        Ok(BackwardOutput {
            grads,
            loss_sum,
            n_frames,
            n_correct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init_vector;
    use crate::testutil::{central_difference, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn frames(t: usize, d: usize, seed: u64) -> Vec<Vector> {
        let mut r = rng(seed);
        (0..t).map(|_| init_vector(d, Init::Uniform(1.0), &mut r)).collect()
    }

    fn net(arch: &str, input: usize, classes: usize, seed: u64) -> Network {
        let spec = parse_spec(arch, input, classes).unwrap();
        Network::build(spec, NetInit::Uniform(0.5), &mut rng(seed)).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(net("lstm(1) > softmax(1)", 1, 1, 0).layers()[0].params().tensors_dyn().iter().map(|t| t.data.len()).sum::<usize>(), 15);
        let n = net("relu(3) > softmax(2)", 2, 2, 0);
        assert_eq!(n.param_count(), 9 + 3 * 2 + 2);
    }

    #[test]
    fn build_is_deterministic() {
        let a = net("relu(4) > lstm_op(5,3) > softmax(3)", 2, 3, 9);
        let b = net("relu(4) > lstm_op(5,3) > softmax(3)", 2, 3, 9);
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn dense_softmax_base_case() {
        let n = net("tanh(4) > softmax(3)", 2, 3, 1);
        let xs = frames(3, 2, 2);
        let out = n.forward(&xs, &n.zero_state()).unwrap();
        let (Layer::Dense(d), Layer::Softmax(h)) = (&n.layers()[0], &n.layers()[1]) else {
            unreachable!()
        };
        for (x, lp) in xs.iter().zip(&out.log_probs) {
            let (y, _) = d.forward(x).unwrap();
            assert_eq!(&h.log_probs(&y).unwrap(), lp);
        }
    }

    #[test]
    fn stacked_of_one_equals_plain() {
        let a = net("lstm(8)x1 > softmax(3)", 4, 3, 3);
        let b = net("lstm(8) > softmax(3)", 4, 3, 3);
        assert_eq!(a, b);
        let xs = frames(6, 4, 4);
        let oa = a.forward(&xs, &a.zero_state()).unwrap();
        let ob = b.forward(&xs, &b.zero_state()).unwrap();
        assert_eq!(oa.log_probs, ob.log_probs);
    }

    #[test]
    fn input_dimension_mismatch() {
        let n = net("lstm(3) > softmax(2)", 4, 2, 0);
        assert!(matches!(n.forward(&frames(2, 3, 0), &n.zero_state()), Err(Error::Shape { .. })));
    }

    #[test]
    fn all_masked_gives_nothing() {
        let n = net("relu(4) > lstm(3) > softmax(3)", 2, 3, 5);
        let out = n.forward(&frames(5, 2, 6), &n.zero_state()).unwrap();
        let (g, loss) = n.backward(&out.cache, &[0; 5], &[false; 5]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(n.backward(&out.cache, &[0; 4], &[true; 5]).is_err());
    }

    #[test]
    fn masked_loss_matches_per_frame_sum() {
        let n = net("relu(4) > lstm(3) > softmax(3)", 2, 3, 7);
        let out = n.forward(&frames(6, 2, 8), &n.zero_state()).unwrap();
        let targets = [0, 2, 1, 1, 0, 2];
        let mask = [false, true, true, false, true, true];
        let (_, loss) = n.backward(&out.cache, &targets, &mask).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for t in 0..6 {
            if mask[t] {
                sum += -out.log_probs[t][targets[t]];
                count += 1.0;
            }
        }
        assert!((loss - sum / count).abs() < 1e-12);
    }

    #[test]
    fn full_network_gradient_check() {
        let n = net("relu(6) > lstm(5) > softmax(3)", 4, 3, 11);
        let xs = frames(7, 4, 12);
        let targets = [0, 1, 2, 2, 1, 0, 1];
        let mask = [true, true, false, true, true, true, true];
        let out = n.forward(&xs, &n.zero_state()).unwrap();
        let (g, _) = n.backward(&out.cache, &targets, &mask).unwrap();
        let base = n.flatten();
        for (k, a) in g.flatten().iter().enumerate() {
            let num = central_difference(&base, k, |p| {
                let mut m = n.clone();
                m.assign_flat(p);
                let o = m.forward(&xs, &m.zero_state()).unwrap();
                m.backward(&o.cache, &targets, &mask).unwrap().1
            });
            assert!(rel_err(*a, num) < 1e-5, "param {k}: {a} vs {num}");
        }
    }

    #[test]
    fn state_after_matches_final_state() {
        let n = net("rnn(3) > lstm_op(4,2) > softmax(3)", 2, 3, 13);
        let out = n.forward(&frames(5, 2, 14), &n.zero_state()).unwrap();
        assert_eq!(out.cache.state_after(4), out.final_state);
    }

    #[test]
    fn streams_match_individual_forwards() {
        let n = net("lstm(4) > softmax(3)", 2, 3, 15);
        let a = frames(5, 2, 16);
        let b = frames(3, 2, 17);
        let zero = n.zero_state();
        let outs = n.forward_streams(&[(&a, &zero), (&b, &zero)]).unwrap();
        assert_eq!(outs[0].log_probs, n.forward(&a, &zero).unwrap().log_probs);
        assert_eq!(outs[1].log_probs, n.forward(&b, &zero).unwrap().log_probs);
    }

    #[test]
    fn from_layers_checks_structure() {
        let n = net("relu(4) > softmax(3)", 2, 3, 0);
        let spec = n.spec().clone();
        let layers = n.clone().into_layers();
        assert_eq!(Network::from_layers(spec.clone(), layers.clone()).unwrap(), n);
        let other = parse_spec("tanh(4) > softmax(3)", 2, 3).unwrap();
        assert!(Network::from_layers(other, layers).is_err());
    }
}
