//! Peephole LSTM memory-block layer with optional deep input projection
//! (before the cell input activation) and output projection (after the
//! block outputs), plus exact backpropagation through time.
//!
//! Per step, with `r` the recurrent input from the previous step:
//!
//! ```text
//! i = σ(W_xi x + W_hi r + w_ci ⊙ c_prev + b_i)
//! f = σ(W_xf x + W_hf r + w_cf ⊙ c_prev + b_f)
//! a = tanh(W_xc x + W_hc r + b_c)               (or the input projection stack)
//! c = f ⊙ c_prev + i ⊙ a
//! o = σ(W_xo x + W_ho r + w_co ⊙ c + b_o)
//! h = o ⊙ tanh(c)
//! ```
//!
//! Without an output projection the layer emits `h` and feeds it back as
//! `r`. With one it emits `p = φ_L(W_L … φ_0(W_0 h + b_0) … + b_L)` and the
//! next step's recurrent input is `p`, not `h`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{DenseCache, DenseLayer};
use crate::numerics::{self, init_matrix, init_vector, sigmoid, Activation, Init, Matrix, Vector};
use crate::params::{prefixed, prefixed_mut, Parameters, TensorMut, TensorRef};

/// Deep transformation replacing the cell-input activation. Only layer 0
/// sees the recurrent input; the remaining layers are feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct InputProjectionStack {
    pub w_0x: Matrix,
    pub w_0h: Matrix,
    pub b_0: Vector,
    pub act_0: Activation,
    pub layers: Vec<DenseLayer>,
}

impl InputProjectionStack {
    pub fn new(
        w_0x: Matrix,
        w_0h: Matrix,
        b_0: Vector,
        act_0: Activation,
        layers: Vec<DenseLayer>,
    ) -> Result<Self> {
        if w_0x.rows() != w_0h.rows() || w_0x.rows() != b_0.len() {
            return Err(Error::shape("input projection layer 0", &w_0x, &w_0h));
        }
        let stack = InputProjectionStack {
            w_0x,
            w_0h,
            b_0,
            act_0,
            layers,
        };
        stack.check_nonlinear()?;
        let mut width = stack.b_0.len();
        for l in &stack.layers {
            if l.n_in() != width {
                return Err(Error::shape("input projection stack", width, &l.w));
            }
            width = l.n_out();
        }
        Ok(stack)
    }

    fn check_nonlinear(&self) -> Result<()> {
        let acts = std::iter::once(self.act_0).chain(self.layers.iter().map(|l| l.act));
        for act in acts {
            if act.is_linear() || act == Activation::Softmax {
                return Err(Error::Architecture(format!(
                    "input projection layers must be non-linear, found {act}"
                )));
            }
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.b_0.len(), DenseLayer::n_out)
    }
}

/// Projection stack applied to the block outputs; linear layers are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputProjectionStack {
    pub layers: Vec<DenseLayer>,
}

impl OutputProjectionStack {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("output projection needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::shape("output projection stack", &pair[0].w, &pair[1].w));
            }
        }
        Ok(OutputProjectionStack { layers })
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::n_out)
    }
}

/// How the cell input `a_t` is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum CellInput {
    Direct { w_xc: Matrix, w_hc: Matrix, b_c: Vector },
    Projected(InputProjectionStack),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmVariant {
    Plain,
    InputProjection,
    OutputProjection,
}

/// Structural description used to build an [`LstmParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VariantShape {
    Plain,
    /// `depth` hidden projection layers of width `units` between the inputs
    /// and the cell input. `depth == 0` maps inputs straight to `n_cells`.
    InputProjection {
        units: usize,
        depth: usize,
        act: Activation,
    },
    OutputProjection {
        units: usize,
        act: Activation,
    },
}

/// Initialization of LSTM weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmInit {
    pub weights: Init,
    pub biases: Init,
    pub peepholes: Init,
    /// Added to the forget-gate bias after `biases` is drawn.
    pub forget_bias: f64,
}

impl Default for LstmInit {
    fn default() -> Self {
        LstmInit {
            weights: Init::Glorot,
            biases: Init::Zeros,
            peepholes: Init::Zeros,
            forget_bias: 1.0,
        }
    }
}

impl LstmInit {
    /// Every parameter drawn from `uniform(±r)`; used for gradient checks.
    pub fn uniform(r: f64) -> Self {
        LstmInit {
            weights: Init::Uniform(r),
            biases: Init::Uniform(r),
            peepholes: Init::Uniform(r),
            forget_bias: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_xi: Matrix,
    pub w_hi: Matrix,
    pub w_xf: Matrix,
    pub w_hf: Matrix,
    pub w_xo: Matrix,
    pub w_ho: Matrix,
    /// Peephole diagonals.
    pub w_ci: Vector,
    pub w_cf: Vector,
    pub w_co: Vector,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
    pub cell_input: CellInput,
    pub output_projection: Option<OutputProjectionStack>,
}

#[derive(Clone, Debug)]
pub struct InputProjectionCache {
    pub pre_0: Vector,
    pub a_0: Vector,
    pub layers: Vec<DenseCache>,
}

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    pub x: Vector,
    /// Recurrent input: `h_{t-1}`, or `p_{t-1}` under an output projection.
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub i: Vector,
    pub f: Vector,
    pub a: Vector,
    pub c: Vector,
    pub o: Vector,
    pub tanh_c: Vector,
    pub h: Vector,
    pub input_projection: Option<InputProjectionCache>,
    pub output_projection: Vec<DenseCache>,
    /// What the layer emits and feeds back: `h`, or `p`.
    pub out: Vector,
}

/// Gradients of a sequence w.r.t. parameters, inputs and initial state.
#[derive(Clone, Debug)]
pub struct LstmGradients {
    pub params: LstmParams,
    pub d_xs: Vec<Vector>,
    pub d_h0: Vector,
    pub d_c0: Vector,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        n_inputs: usize,
        n_cells: usize,
        shape: VariantShape,
        init: LstmInit,
        rng: &mut R,
    ) -> Result<Self> {
        if n_cells == 0 || n_inputs == 0 {
            return Err(Error::Architecture("LSTM needs at least one input and one cell".into()));
        }
        let n_rec = match shape {
            VariantShape::OutputProjection { units, .. } => units,
            _ => n_cells,
        };
        if n_rec == 0 {
            return Err(Error::Architecture("projection width must be positive".into()));
        }
        let w = init.weights;
        let gate = |rng: &mut R| {
            (
                init_matrix(n_cells, n_inputs, w, rng),
                init_matrix(n_cells, n_rec, w, rng),
            )
        };
        let (w_xi, w_hi) = gate(rng);
        let (w_xf, w_hf) = gate(rng);
        let (w_xo, w_ho) = gate(rng);
        let w_ci = init_vector(n_cells, init.peepholes, rng);
        let w_cf = init_vector(n_cells, init.peepholes, rng);
        let w_co = init_vector(n_cells, init.peepholes, rng);
        let b_i = init_vector(n_cells, init.biases, rng);
        let mut b_f = init_vector(n_cells, init.biases, rng);
        b_f.iter_mut().for_each(|b| *b += init.forget_bias);
        let b_o = init_vector(n_cells, init.biases, rng);

        let cell_input = match shape {
            VariantShape::InputProjection { units, depth, act } => {
                if units == 0 && depth > 0 {
                    return Err(Error::Architecture("input projection width must be positive".into()));
                }
                let width_0 = if depth == 0 { n_cells } else { units };
                let w_0x = init_matrix(width_0, n_inputs, w, rng);
                let w_0h = init_matrix(width_0, n_rec, w, rng);
                let b_0 = init_vector(width_0, init.biases, rng);
                let mut layers = Vec::with_capacity(depth);
                for k in 1..=depth {
                    let out = if k == depth { n_cells } else { units };
                    layers.push(DenseLayer::init(units, out, act, w, init.biases, rng));
                }
                CellInput::Projected(InputProjectionStack::new(w_0x, w_0h, b_0, act, layers)?)
            }
            _ => CellInput::Direct {
                w_xc: init_matrix(n_cells, n_inputs, w, rng),
                w_hc: init_matrix(n_cells, n_rec, w, rng),
                b_c: init_vector(n_cells, init.biases, rng),
            },
        };
        let output_projection = match shape {
            VariantShape::OutputProjection { units, act } => Some(OutputProjectionStack::new(vec![
                DenseLayer::init(n_cells, units, act, w, init.biases, rng),
            ])?),
            _ => None,
        };

        Ok(LstmParams {
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xo,
            w_ho,
            w_ci,
            w_cf,
            w_co,
            b_i,
            b_f,
            b_o,
            cell_input,
            output_projection,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.w_xi.cols()
    }

    pub fn n_cells(&self) -> usize {
        self.w_xi.rows()
    }

    /// Width of the recurrent input and of the layer output.
    pub fn n_recurrent(&self) -> usize {
        self.w_hi.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.output_projection
            .as_ref()
            .map_or(self.n_cells(), OutputProjectionStack::output_width)
    }

    pub fn variant(&self) -> LstmVariant {
        match (&self.cell_input, &self.output_projection) {
            (_, Some(_)) => LstmVariant::OutputProjection,
            (CellInput::Projected(_), None) => LstmVariant::InputProjection,
            (CellInput::Direct { .. }, None) => LstmVariant::Plain,
        }
    }

    /// Checks that every tensor agrees with `n_inputs`, `n_cells` and the
    /// recurrent width.
    pub fn validate(&self) -> Result<()> {
        let (n_in, n, n_rec) = (self.n_inputs(), self.n_cells(), self.n_recurrent());
        for (name, m, cols) in [
            ("w_xi", &self.w_xi, n_in),
            ("w_xf", &self.w_xf, n_in),
            ("w_xo", &self.w_xo, n_in),
            ("w_hi", &self.w_hi, n_rec),
            ("w_hf", &self.w_hf, n_rec),
            ("w_ho", &self.w_ho, n_rec),
        ] {
            if m.shape() != (n, cols) {
                return Err(Error::shape("LstmParams", name, format!("{m}, expected {n}x{cols}")));
            }
        }
        for (name, v) in [
            ("w_ci", &self.w_ci),
            ("w_cf", &self.w_cf),
            ("w_co", &self.w_co),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
        ] {
            if v.len() != n {
                return Err(Error::shape("LstmParams", name, format!("len {}, expected {n}", v.len())));
            }
        }
        match &self.cell_input {
            CellInput::Direct { w_xc, w_hc, b_c } => {
                if w_xc.shape() != (n, n_in) || w_hc.shape() != (n, n_rec) || b_c.len() != n {
                    return Err(Error::shape("LstmParams cell input", w_xc, w_hc));
                }
            }
            CellInput::Projected(ip) => {
                if ip.w_0x.cols() != n_in || ip.w_0h.cols() != n_rec || ip.output_width() != n {
                    return Err(Error::shape("LstmParams input projection", &ip.w_0x, &ip.w_0h));
                }
                ip.check_nonlinear()?;
            }
        }
        let expected_rec = match &self.output_projection {
            Some(op) => {
                if op.layers[0].n_in() != n {
                    return Err(Error::shape("LstmParams output projection", &op.layers[0].w, n));
                }
                op.output_width()
            }
            None => n,
        };
        if expected_rec != n_rec {
            return Err(Error::shape("LstmParams recurrent width", n_rec, expected_rec));
        }
        Ok(())
    }

    pub fn step_forward(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<LstmStepCache> {
        let n = self.n_cells();
        if x.len() != self.n_inputs() || h_prev.len() != self.n_recurrent() || c_prev.len() != n {
            return Err(Error::shape(
                "lstm step",
                format!("{} inputs, {} recurrent, {} cells", self.n_inputs(), self.n_recurrent(), n),
                format!("x {}, h {}, c {}", x.len(), h_prev.len(), c_prev.len()),
            ));
        }
        if !c_prev.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("lstm previous cell state".into()));
        }

        let gate = |w_x: &Matrix, w_h: &Matrix, peep: &Vector, state: &[f64], b: &Vector, name: &str| {
            let mut z = b.clone();
            w_x.matvec_acc(x, &mut z);
            w_h.matvec_acc(h_prev, &mut z);
            for ((zj, &p), &s) in z.iter_mut().zip(peep.iter()).zip(state) {
                *zj = sigmoid(*zj + p * s);
            }
            finite(z, name)
        };

        let i = gate(&self.w_xi, &self.w_hi, &self.w_ci, c_prev, &self.b_i, "input gate")?;
        let f = gate(&self.w_xf, &self.w_hf, &self.w_cf, c_prev, &self.b_f, "forget gate")?;

        let (a, input_projection) = match &self.cell_input {
            CellInput::Direct { w_xc, w_hc, b_c } => {
                let mut z = b_c.clone();
                w_xc.matvec_acc(x, &mut z);
                w_hc.matvec_acc(h_prev, &mut z);
                z.iter_mut().for_each(|v| *v = v.tanh());
                (finite(z, "cell input")?, None)
            }
            CellInput::Projected(ip) => {
                let mut pre_0 = ip.b_0.clone();
                ip.w_0x.matvec_acc(x, &mut pre_0);
                ip.w_0h.matvec_acc(h_prev, &mut pre_0);
                let mut a_0 = pre_0.clone();
                numerics::apply_in_place(ip.act_0, &mut a_0)?;
                let mut cur = a_0.clone();
                let mut layers = Vec::with_capacity(ip.layers.len());
                for l in &ip.layers {
                    let (y, cache) = l.forward(&cur)?;
                    layers.push(cache);
                    cur = y;
                }
                (
                    finite(cur, "cell input projection")?,
                    Some(InputProjectionCache { pre_0, a_0, layers }),
                )
            }
        };

        let c: Vector = (0..n).map(|j| f[j] * c_prev[j] + i[j] * a[j]).collect();
        let c = finite(c, "cell state")?;
        let o = gate(&self.w_xo, &self.w_ho, &self.w_co, &c, &self.b_o, "output gate")?;
        let tanh_c: Vector = c.iter().map(|v| v.tanh()).collect();
        let h = o.hadamard(&tanh_c);

        let mut output_projection = Vec::new();
        let out = match &self.output_projection {
            None => h.clone(),
            Some(op) => {
                let mut cur = h.clone();
                for l in &op.layers {
                    let (y, cache) = l.forward(&cur)?;
                    output_projection.push(cache);
                    cur = y;
                }
                finite(cur, "output projection")?
            }
        };

        Ok(LstmStepCache {
            x: Vector::from(x.to_vec()),
            h_prev: Vector::from(h_prev.to_vec()),
            c_prev: Vector::from(c_prev.to_vec()),
            i,
            f,
            a,
            c,
            o,
            tanh_c,
            h,
            input_projection,
            output_projection,
            out,
        })
    }

    /// Runs the layer over a sequence starting from `(h_0, c_0)`.
    pub fn sequence_forward(&self, xs: &[Vector], h_0: &[f64], c_0: &[f64]) -> Result<Vec<LstmStepCache>> {
        if xs.is_empty() {
            return Err(Error::Config("LSTM sequence must not be empty".into()));
        }
        let mut caches: Vec<LstmStepCache> = Vec::with_capacity(xs.len());
        for x in xs {
            let step = match caches.last() {
                Some(prev) => self.step_forward(x, &prev.out, &prev.c)?,
                None => self.step_forward(x, h_0, c_0)?,
            };
            caches.push(step);
        }
        Ok(caches)
    }

    pub fn zeros_like(&self) -> LstmParams {
        let mut g = self.clone();
        g.zero();
        g
    }

    /// Exact gradients of `Σ_t d_outputs[t] · out_t` back to the start of
    /// the cached sequence.
    pub fn sequence_backward(&self, caches: &[LstmStepCache], d_outputs: &[Vector]) -> Result<LstmGradients> {
        if caches.len() != d_outputs.len() {
            return Err(Error::shape("lstm backward", caches.len(), d_outputs.len()));
        }
        let n = self.n_cells();
        let n_rec = self.n_recurrent();
        let mut g = self.zeros_like();
        let mut d_xs = vec![Vector::zeros(self.n_inputs()); caches.len()];
        // Gradient flowing into step t from step t+1.
        let mut d_rec = Vector::zeros(n_rec);
        let mut d_c_next = Vector::zeros(n);

        for t in (0..caches.len()).rev() {
            let s = &caches[t];
            if d_outputs[t].len() != self.n_outputs() {
                return Err(Error::shape("lstm backward d_output", d_outputs[t].len(), self.n_outputs()));
            }
            let mut d_out = d_outputs[t].clone();
            d_out.add_assign(&d_rec);

            let d_h = match (&self.output_projection, &mut g.output_projection) {
                (Some(op), Some(gop)) => {
                    let mut cur = d_out;
                    for (k, layer) in op.layers.iter().enumerate().rev() {
                        cur = layer.backward(&s.output_projection[k], &cur, &mut gop.layers[k])?;
                    }
                    cur
                }
                _ => d_out,
            };

            // h = o ⊙ tanh(c)
            let mut d_c = d_c_next.clone();
            let mut d_zo = Vector::zeros(n);
            for j in 0..n {
                let d_o = d_h[j] * s.tanh_c[j];
                d_c[j] += d_h[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
                d_zo[j] = d_o * s.o[j] * (1.0 - s.o[j]);
                // The output-gate peephole reads the current cell state.
                d_c[j] += d_zo[j] * self.w_co[j];
            }

            // c = f ⊙ c_prev + i ⊙ a
            let mut d_zi = Vector::zeros(n);
            let mut d_zf = Vector::zeros(n);
            let mut d_a = Vector::zeros(n);
            let mut d_c_prev = Vector::zeros(n);
            for j in 0..n {
                let d_i = d_c[j] * s.a[j];
                let d_f = d_c[j] * s.c_prev[j];
                d_a[j] = d_c[j] * s.i[j];
                d_zi[j] = d_i * s.i[j] * (1.0 - s.i[j]);
                d_zf[j] = d_f * s.f[j] * (1.0 - s.f[j]);
                d_c_prev[j] = d_c[j] * s.f[j] + d_zi[j] * self.w_ci[j] + d_zf[j] * self.w_cf[j];
            }

            let mut d_h_prev = Vector::zeros(n_rec);
            let d_x = &mut d_xs[t];

            for (d_z, w_x, w_h, gw_x, gw_h, gb) in [
                (&d_zi, &self.w_xi, &self.w_hi, &mut g.w_xi, &mut g.w_hi, &mut g.b_i),
                (&d_zf, &self.w_xf, &self.w_hf, &mut g.w_xf, &mut g.w_hf, &mut g.b_f),
                (&d_zo, &self.w_xo, &self.w_ho, &mut g.w_xo, &mut g.w_ho, &mut g.b_o),
            ] {
                gw_x.add_outer(d_z, &s.x);
                gw_h.add_outer(d_z, &s.h_prev);
                gb.add_assign(d_z);
                w_x.matvec_transpose_acc(d_z, d_x);
                w_h.matvec_transpose_acc(d_z, &mut d_h_prev);
            }
            for j in 0..n {
                g.w_ci[j] += d_zi[j] * s.c_prev[j];
                g.w_cf[j] += d_zf[j] * s.c_prev[j];
                g.w_co[j] += d_zo[j] * s.c[j];
            }

            match (&self.cell_input, &mut g.cell_input) {
                (
                    CellInput::Direct { w_xc, w_hc, .. },
                    CellInput::Direct {
                        w_xc: gw_xc,
                        w_hc: gw_hc,
                        b_c: gb_c,
                    },
                ) => {
                    let d_za: Vector = (0..n).map(|j| d_a[j] * (1.0 - s.a[j] * s.a[j])).collect();
                    gw_xc.add_outer(&d_za, &s.x);
                    gw_hc.add_outer(&d_za, &s.h_prev);
                    gb_c.add_assign(&d_za);
                    w_xc.matvec_transpose_acc(&d_za, d_x);
                    w_hc.matvec_transpose_acc(&d_za, &mut d_h_prev);
                }
                (CellInput::Projected(ip), CellInput::Projected(gip)) => {
                    let cache = s
                        .input_projection
                        .as_ref()
                        .ok_or_else(|| Error::Config("cache lacks input projection state".into()))?;
                    let mut cur = d_a;
                    for (k, layer) in ip.layers.iter().enumerate().rev() {
                        cur = layer.backward(&cache.layers[k], &cur, &mut gip.layers[k])?;
                    }
                    let d_z0: Vector = cur
                        .iter()
                        .zip(cache.pre_0.iter().zip(cache.a_0.iter()))
                        .map(|(&d, (&p, &y))| d * ip.act_0.derivative_at(p, y))
                        .collect();
                    gip.w_0x.add_outer(&d_z0, &s.x);
                    gip.w_0h.add_outer(&d_z0, &s.h_prev);
                    gip.b_0.add_assign(&d_z0);
                    ip.w_0x.matvec_transpose_acc(&d_z0, d_x);
                    ip.w_0h.matvec_transpose_acc(&d_z0, &mut d_h_prev);
                }
                _ => unreachable!("gradient buffer mirrors parameter structure"),
            }

            d_rec = d_h_prev;
            d_c_next = d_c_prev;
        }

        Ok(LstmGradients {
            params: g,
            d_xs,
            d_h0: d_rec,
            d_c0: d_c_next,
        })
    }
}

fn finite(v: Vector, what: &str) -> Result<Vector> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("lstm {what}")))
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut ts = vec![
            TensorRef::matrix("w_xi", &self.w_xi),
            TensorRef::matrix("w_hi", &self.w_hi),
            TensorRef::matrix("w_xf", &self.w_xf),
            TensorRef::matrix("w_hf", &self.w_hf),
            TensorRef::matrix("w_xo", &self.w_xo),
            TensorRef::matrix("w_ho", &self.w_ho),
            TensorRef::vector("w_ci", &self.w_ci),
            TensorRef::vector("w_cf", &self.w_cf),
            TensorRef::vector("w_co", &self.w_co),
            TensorRef::vector("b_i", &self.b_i),
            TensorRef::vector("b_f", &self.b_f),
            TensorRef::vector("b_o", &self.b_o),
        ];
        match &self.cell_input {
            CellInput::Direct { w_xc, w_hc, b_c } => {
                ts.push(TensorRef::matrix("w_xc", w_xc));
                ts.push(TensorRef::matrix("w_hc", w_hc));
                ts.push(TensorRef::vector("b_c", b_c));
            }
            CellInput::Projected(ip) => {
                ts.push(TensorRef::matrix("ip.w_0x", &ip.w_0x));
                ts.push(TensorRef::matrix("ip.w_0h", &ip.w_0h));
                ts.push(TensorRef::vector("ip.b_0", &ip.b_0));
                for (k, l) in ip.layers.iter().enumerate() {
                    ts.extend(prefixed(&format!("ip.{}", k + 1), l.tensors()));
                }
            }
        }
        if let Some(op) = &self.output_projection {
            for (k, l) in op.layers.iter().enumerate() {
                ts.extend(prefixed(&format!("op.{k}"), l.tensors()));
            }
        }
        ts
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut ts = vec![
            TensorMut::matrix("w_xi", &mut self.w_xi),
            TensorMut::matrix("w_hi", &mut self.w_hi),
            TensorMut::matrix("w_xf", &mut self.w_xf),
            TensorMut::matrix("w_hf", &mut self.w_hf),
            TensorMut::matrix("w_xo", &mut self.w_xo),
            TensorMut::matrix("w_ho", &mut self.w_ho),
            TensorMut::vector("w_ci", &mut self.w_ci),
            TensorMut::vector("w_cf", &mut self.w_cf),
            TensorMut::vector("w_co", &mut self.w_co),
            TensorMut::vector("b_i", &mut self.b_i),
            TensorMut::vector("b_f", &mut self.b_f),
            TensorMut::vector("b_o", &mut self.b_o),
        ];
        match &mut self.cell_input {
            CellInput::Direct { w_xc, w_hc, b_c } => {
                ts.push(TensorMut::matrix("w_xc", w_xc));
                ts.push(TensorMut::matrix("w_hc", w_hc));
                ts.push(TensorMut::vector("b_c", b_c));
            }
            CellInput::Projected(ip) => {
                ts.push(TensorMut::matrix("ip.w_0x", &mut ip.w_0x));
                ts.push(TensorMut::matrix("ip.w_0h", &mut ip.w_0h));
                ts.push(TensorMut::vector("ip.b_0", &mut ip.b_0));
                for (k, l) in ip.layers.iter_mut().enumerate() {
                    ts.extend(prefixed_mut(&format!("ip.{}", k + 1), l.tensors_mut()));
                }
            }
        }
        if let Some(op) = &mut self.output_projection {
            for (k, l) in op.layers.iter_mut().enumerate() {
                ts.extend(prefixed_mut(&format!("op.{k}"), l.tensors_mut()));
            }
        }
        ts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_difference, rel_err};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_seq(t: usize, d: usize, seed: u64) -> Vec<Vector> {
        let mut r = rng(seed);
        (0..t).map(|_| init_vector(d, Init::Uniform(1.0), &mut r)).collect()
    }

    fn zero_params(n_in: usize, n: usize) -> LstmParams {
        LstmParams::init(
            n_in,
            n,
            VariantShape::Plain,
            LstmInit {
                weights: Init::Zeros,
                biases: Init::Zeros,
                peepholes: Init::Zeros,
                forget_bias: 0.0,
            },
            &mut rng(0),
        )
        .unwrap()
    }

    fn set_direct(p: &mut LstmParams, f: impl FnOnce(&mut Matrix, &mut Matrix, &mut Vector)) {
        match &mut p.cell_input {
            CellInput::Direct { w_xc, w_hc, b_c } => f(w_xc, w_hc, b_c),
            CellInput::Projected(_) => unreachable!(),
        }
    }

    #[test]
    fn zero_params_give_half_gates() {
        let p = zero_params(3, 2);
        let s = p.step_forward(&[0.4, -1.0, 2.0], &[0.0; 2], &[0.0; 2]).unwrap();
        for v in [&s.i, &s.f, &s.o] {
            assert!(v.iter().all(|&g| g == 0.5));
        }
        assert_eq!(s.a, Vector::zeros(2));
        assert_eq!(s.c, Vector::zeros(2));
        assert_eq!(s.h, Vector::zeros(2));
    }

    #[test]
    fn saturated_gates_hand_evaluation() {
        let mut p = zero_params(1, 1);
        p.b_i[0] = 10.0;
        p.b_f[0] = -10.0;
        p.b_o[0] = 10.0;
        set_direct(&mut p, |w_xc, _, _| w_xc[(0, 0)] = 1.0);
        let s = p.step_forward(&[1.0], &[0.0], &[0.0]).unwrap();
        // Hand evaluation of the six equations with σ(±10) and tanh(1).
        let i = 1.0 / (1.0 + (-10f64).exp());
        let o = i;
        let c = i * 1f64.tanh();
        let h = o * c.tanh();
        assert!((s.c[0] - c).abs() < 1e-15);
        assert!((s.h[0] - h).abs() < 1e-15);
        assert!((s.c[0] - 0.76159).abs() < 1e-4);
        assert!((s.h[0] - 0.64201).abs() < 1e-3);
    }

    #[test]
    fn pure_carry() {
        let mut p = zero_params(1, 1);
        p.b_f[0] = 20.0;
        p.b_i[0] = -20.0;
        let s = p.step_forward(&[0.7], &[0.0], &[0.3]).unwrap();
        assert!((s.c[0] - 0.3).abs() < 1e-8);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let p = zero_params(2, 3);
        assert!(matches!(p.step_forward(&[0.0; 3], &[0.0; 3], &[0.0; 3]), Err(Error::Shape { .. })));
        assert!(matches!(
            p.step_forward(&[0.0; 2], &[0.0; 3], &[f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
        let mut big = zero_params(1, 1);
        set_direct(&mut big, |w_xc, _, _| w_xc[(0, 0)] = 1.0);
        let err = big.step_forward(&[f64::INFINITY], &[0.0], &[0.0]).unwrap_err();
        assert!(err.to_string().contains("gate"), "{err}");
    }

    #[test]
    fn sequence_matches_step_loop() {
        let p = LstmParams::init(3, 4, VariantShape::Plain, LstmInit::uniform(0.5), &mut rng(1)).unwrap();
        let xs = random_seq(6, 3, 2);
        let h0 = init_vector(4, Init::Uniform(0.5), &mut rng(3));
        let c0 = init_vector(4, Init::Uniform(0.5), &mut rng(4));
        let caches = p.sequence_forward(&xs, &h0, &c0).unwrap();

        let single = p.step_forward(&xs[0], &h0, &c0).unwrap();
        assert_eq!(caches[0].out, single.out);

        let (mut h, mut c) = (h0.clone(), c0.clone());
        for (t, x) in xs.iter().enumerate() {
            let s = p.step_forward(x, &h, &c).unwrap();
            for j in 0..4 {
                assert!((s.h[j] - caches[t].h[j]).abs() < 1e-12);
            }
            h = s.h;
            c = s.c;
        }
    }

    #[test]
    fn zero_params_zero_outputs() {
        let p = zero_params(2, 3);
        let caches = p.sequence_forward(&random_seq(5, 2, 9), &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(caches.iter().all(|s| s.out == Vector::zeros(3)));
        assert!(p.sequence_forward(&[], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn identity_output_projection_reproduces_plain() {
        let plain = LstmParams::init(3, 5, VariantShape::Plain, LstmInit::uniform(0.6), &mut rng(5)).unwrap();
        let mut op = plain.clone();
        op.output_projection = Some(
            OutputProjectionStack::new(vec![
                DenseLayer::new(Matrix::identity(5), Vector::zeros(5), Activation::Linear).unwrap(),
            ])
            .unwrap(),
        );
        op.validate().unwrap();
        let xs = random_seq(7, 3, 6);
        let a = plain.sequence_forward(&xs, &[0.0; 5], &[0.0; 5]).unwrap();
        let b = op.sequence_forward(&xs, &[0.0; 5], &[0.0; 5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.h, y.out);
        }
    }

    #[test]
    fn shallow_input_projection_reduces_to_direct_cell_input() {
        let plain = LstmParams::init(3, 4, VariantShape::Plain, LstmInit::uniform(0.6), &mut rng(7)).unwrap();
        let mut ip = plain.clone();
        let CellInput::Direct { w_xc, w_hc, b_c } = plain.cell_input.clone() else {
            unreachable!()
        };
        ip.cell_input = CellInput::Projected(
            InputProjectionStack::new(w_xc, w_hc, b_c, Activation::Tanh, vec![]).unwrap(),
        );
        let xs = random_seq(5, 3, 8);
        let a = plain.sequence_forward(&xs, &[0.0; 4], &[0.0; 4]).unwrap();
        let b = ip.sequence_forward(&xs, &[0.0; 4], &[0.0; 4]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.h, y.h);
        }
    }

    #[test]
    fn input_projection_must_be_nonlinear() {
        let err = InputProjectionStack::new(
            Matrix::zeros(2, 1),
            Matrix::zeros(2, 2),
            Vector::zeros(2),
            Activation::Linear,
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Architecture(_)));
    }

    #[test]
    fn parameter_count_of_single_cell() {
        let p = LstmParams::init(1, 1, VariantShape::Plain, LstmInit::default(), &mut rng(0)).unwrap();
        assert_eq!(p.param_count(), 15);
    }

    #[test]
    fn default_init_biases() {
        let p = LstmParams::init(2, 3, VariantShape::Plain, LstmInit::default(), &mut rng(0)).unwrap();
        assert!(p.b_f.iter().all(|&b| b == 1.0));
        assert!(p.w_ci.iter().chain(p.w_cf.iter()).chain(p.w_co.iter()).all(|&w| w == 0.0));
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(p.w_xi.as_slice().iter().all(|w| w.abs() <= bound));
    }

    fn objective(p: &LstmParams, xs: &[Vector], h0: &[f64], c0: &[f64], d_out: &[Vector]) -> f64 {
        let caches = p.sequence_forward(xs, h0, c0).unwrap();
        caches.iter().zip(d_out).map(|(s, d)| s.out.dot(d)).sum()
    }

    fn check_gradients(shape: VariantShape, seed: u64) {
        let (n_in, n, t) = (3, 4, 5);
        let p = LstmParams::init(n_in, n, shape, LstmInit::uniform(0.5), &mut rng(seed)).unwrap();
        let xs = random_seq(t, n_in, seed + 1);
        let h0 = init_vector(p.n_recurrent(), Init::Uniform(0.5), &mut rng(seed + 2));
        let c0 = init_vector(n, Init::Uniform(0.5), &mut rng(seed + 3));
        let d_out = random_seq(t, p.n_outputs(), seed + 4);

        let caches = p.sequence_forward(&xs, &h0, &c0).unwrap();
        let grads = p.sequence_backward(&caches, &d_out).unwrap();

        let base = p.flatten();
        let names: Vec<String> = p
            .tensors()
            .iter()
            .flat_map(|t| std::iter::repeat(t.name.clone()).take(t.data.len()))
            .collect();
        for (k, a) in grads.params.flatten().iter().enumerate() {
            let num = central_difference(&base, k, |v| {
                let mut q = p.clone();
                q.assign_flat(v);
                objective(&q, &xs, &h0, &c0, &d_out)
            });
            assert!(rel_err(*a, num) < 1e-5, "{shape:?} {}: {a} vs {num}", names[k]);
        }
        for j in 0..h0.len() {
            let num = central_difference(&h0, j, |h| objective(&p, &xs, h, &c0, &d_out));
            assert!(rel_err(grads.d_h0[j], num) < 1e-5, "d_h0[{j}]");
        }
        for j in 0..n {
            let num = central_difference(&c0, j, |c| objective(&p, &xs, &h0, c, &d_out));
            assert!(rel_err(grads.d_c0[j], num) < 1e-5, "d_c0[{j}]");
        }
        for step in 0..t {
            for j in 0..n_in {
                let num = central_difference(&xs[step], j, |x| {
                    let mut xs2 = xs.clone();
                    xs2[step] = Vector::from(x.to_vec());
                    objective(&p, &xs2, &h0, &c0, &d_out)
                });
                assert!(rel_err(grads.d_xs[step][j], num) < 1e-5, "d_x[{step}][{j}]");
            }
        }
    }

    #[test]
    fn gradient_check_plain() {
        check_gradients(VariantShape::Plain, 10);
    }

    #[test]
    fn gradient_check_input_projection() {
        check_gradients(
            VariantShape::InputProjection {
                units: 5,
                depth: 1,
                act: Activation::Tanh,
            },
            20,
        );
        check_gradients(
            VariantShape::InputProjection {
                units: 3,
                depth: 2,
                act: Activation::Tanh,
            },
            25,
        );
    }

    #[test]
    fn gradient_check_output_projection() {
        check_gradients(
            VariantShape::OutputProjection {
                units: 3,
                act: Activation::Linear,
            },
            30,
        );
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = LstmParams::init(2, 3, VariantShape::Plain, LstmInit::uniform(0.5), &mut rng(40)).unwrap();
        let xs = random_seq(4, 2, 41);
        let caches = p.sequence_forward(&xs, &[0.0; 3], &[0.0; 3]).unwrap();

        let zero = p.sequence_backward(&caches, &vec![Vector::zeros(3); 4]).unwrap();
        assert!(zero.params.flatten().iter().all(|&g| g == 0.0));

        let d = random_seq(4, 3, 42);
        let d2: Vec<Vector> = d.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
        let g1 = p.sequence_backward(&caches, &d).unwrap().params.flatten();
        let g2 = p.sequence_backward(&caches, &d2).unwrap().params.flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(p.sequence_backward(&caches, &d[..3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gates_and_state_bounds(seed in any::<u64>(), scale in 0.1f64..3.0) {
            let p = LstmParams::init(3, 4, VariantShape::Plain, LstmInit::uniform(scale), &mut rng(seed)).unwrap();
            let xs = random_seq(8, 3, seed ^ 0xabc);
            let caches = p.sequence_forward(&xs, &[0.0; 4], &[0.0; 4]).unwrap();
            for s in &caches {
                for j in 0..4 {
                    for g in [s.i[j], s.f[j], s.o[j]] {
                        prop_assert!(g > 0.0 && g < 1.0);
                    }
                    prop_assert!(s.h[j] > -1.0 && s.h[j] < 1.0);
                    prop_assert!(s.c[j].abs() <= s.c_prev[j].abs() + 1.0);
                }
            }
        }
    }
}
