//! Finite-difference verification of the analytic network gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{NetInit, Network, NetworkSpec};
use crate::numerics::{init_vector, Init, Vector};
use crate::params::Parameters;

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
pub const MAX_PARAMS: usize = 20_000;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` along coordinate `i` of `base` with step
/// [`EPSILON`], using the fourth-order stencil
/// `(8[f(x+ε) − f(x−ε)] − [f(x+2ε) − f(x−2ε)]) / 12ε`.
pub fn central_difference(base: &[f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut x = base.to_vec();
    let mut at = |delta: f64| {
        x[i] = base[i] + delta;
        f(&x)
    };
    let (p1, m1) = (at(EPSILON), at(-EPSILON));
    let (p2, m2) = (at(2.0 * EPSILON), at(-2.0 * EPSILON));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * EPSILON)
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| b.max_rel_error >= self.tolerance)
    }
}

/// A network together with one labelled, partially masked sequence.
#[derive(Clone, Debug)]
pub struct Instance {
    pub net: Network,
    pub frames: Vec<Vector>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Instance {
    /// Parameters and inputs from `uniform(±1)`. Smaller parameters shrink
    /// gradients in deep stacks towards the finite-difference round-off floor.
    pub fn random(spec: NetworkSpec, t_len: usize, seed: u64) -> Result<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(spec, NetInit::Uniform(1.0), &mut rng)?;
        let frames = (0..t_len)
            .map(|_| init_vector(net.input_dim(), Init::Uniform(1.0), &mut rng))
            .collect();
        let targets = (0..t_len).map(|_| rng.gen_range(0..net.n_classes())).collect();
        // First frame masked so the masking path is exercised too.
        let mask = (0..t_len).map(|t| t > 0 || t_len == 1).collect();
        Ok(Instance {
            net,
            frames,
            targets,
            mask,
        })
    }

    pub fn loss(&self, net: &Network) -> Result<f64> {
        let out = net.forward(&self.frames, &net.zero_state())?;
        Ok(net.backward(&out.cache, &self.targets, &self.mask)?.1)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    /// Negative control: perturb the analytic gradient of every block whose
    /// name contains this string before comparing.
    pub corrupt: Option<String>,
}

/// Compares analytic gradients of the masked mean cross-entropy with
/// central differences over every parameter.
pub fn check(instance: &Instance, options: &CheckOptions) -> Result<GradCheckReport> {
    let net = &instance.net;
    let n_params = net.param_count();
    if n_params > MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check limited to {MAX_PARAMS} parameters, model has {n_params}"
        )));
    }
    let out = net.forward(&instance.frames, &net.zero_state())?;
    let (mut grads, _) = net.backward(&out.cache, &instance.targets, &instance.mask)?;
    if let Some(pattern) = &options.corrupt {
        for t in grads.tensors_mut() {
            if t.name.contains(pattern.as_str()) {
                t.data.iter_mut().for_each(|g| *g = *g * 1.5 + 1e-3);
            }
        }
    }

    let base = net.flatten();
    let mut probe = net.clone();
    let mut blocks = Vec::new();
    let mut offset = 0;
    for t in grads.tensors() {
        let mut block = BlockReport {
            name: t.name.clone(),
            size: t.data.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (j, &a) in t.data.iter().enumerate() {
            let numeric = central_difference(&base, offset + j, |p| {
                probe.assign_flat(p);
                instance.loss(&probe).unwrap_or(f64::NAN)
            });
            let err = relative_error(a, numeric);
            if !(err <= block.max_rel_error) {
                block.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                block.worst_index = j;
                block.analytic = a;
                block.numeric = numeric;
            }
        }
        offset += t.data.len();
        blocks.push(block);
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::parse_spec;

    #[test]
    fn stencil_is_exact_on_quartics() {
        // Fourth-order stencil differentiates polynomials up to degree 4 exactly.
        let f = |x: &[f64]| x[0].powi(4) - 3.0 * x[0].powi(3) + x[0];
        let d = central_difference(&[0.7], 0, f);
        let exact = 4.0 * 0.7f64.powi(3) - 9.0 * 0.49 + 1.0;
        assert!((d - exact).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn passes_and_catches_corruption() {
        let spec = parse_spec("lstm(3) > softmax(3)", 2, 3).unwrap();
        let inst = Instance::random(spec, 4, 1).unwrap();
        let report = check(&inst, &CheckOptions::default()).unwrap();
        assert!(report.passed(), "{:?}", report.blocks);

        let bad = check(
            &inst,
            &CheckOptions {
                corrupt: Some("w_hi".into()),
            },
        )
        .unwrap();
        assert!(!bad.passed());
        let failing: Vec<_> = bad.failing().map(|b| b.name.as_str()).collect();
        assert_eq!(failing, vec!["0.lstm.w_hi"]);
    }

    #[test]
    fn rejects_oversized_models() {
        let spec = parse_spec("lstm(80) > softmax(3)", 2, 3).unwrap();
        let inst = Instance::random(spec, 2, 1).unwrap();
        assert!(matches!(check(&inst, &CheckOptions::default()), Err(Error::Config(_))));
    }
}
