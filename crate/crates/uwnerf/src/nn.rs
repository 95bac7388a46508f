//! Learned-parameter plumbing: a named parameter store, initialization
//! helpers, and thin layer wrappers that bind stored weights onto a tape
//! for one forward/backward pass.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::{Result, UwError};

/// All learned parameters of a model, addressed by dotted names
/// (`backbone.enc1.weight`, `gnt.block0.view.q.weight`, ...).  Iteration
/// order is the sorted name order, which keeps every downstream walk
/// (binding, optimizer updates, checkpointing) deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; duplicate names indicate a wiring bug.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "parameter '{name}' registered twice"
        );
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| UwError::InvalidCheckpoint(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| UwError::InvalidCheckpoint(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Creates one tape leaf per parameter (in name order) so a forward
    /// pass can reference weights and `backward` can reach them.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        BoundParams { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], valid for the
/// lifetime of the tape they were bound onto.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Handle for a parameter; missing names are wiring bugs, not runtime
    /// conditions, so this panics.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' was never registered"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, v)| (n, *v))
    }
}

/// He-style normal initialization, `N(0, sqrt(2 / fan_in))` — the usual
/// choice ahead of rectified units.
pub fn kaiming_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    assert!(fan_in > 0, "fan_in must be positive");
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid normal");
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape matches length")
}

/// Plain normal initialization, `N(0, std^2)` — used for embedding tables
/// where fan-based scaling has no meaning.
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    assert!(std > 0.0, "std must be positive");
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape matches length")
}

/// Glorot-style uniform initialization for linear layers,
/// `U(+-sqrt(6 / (fan_in + fan_out)))`.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let vals: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), vals).expect("shape matches length")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Registers a dense layer: `{name}.weight` of shape `[in, out]` and
/// `{name}.bias` of shape `[out]`.
pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) {
    store.insert(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
    store.insert(format!("{name}.bias"), zeros(&[out_dim]));
}

/// Applies a registered dense layer to `[rows, in]`, giving `[rows, out]`.
pub fn linear(tape: &mut Tape, bound: &BoundParams, name: &str, x: Var) -> Var {
    let w = bound.var(&format!("{name}.weight"));
    let b = bound.var(&format!("{name}.bias"));
    let y = tape.matmul(x, w);
    tape.add_row_bias(y, b)
}

/// Registers a square-kernel convolution: `{name}.weight` of shape
/// `[out, in, k, k]` and `{name}.bias` of shape `[out]`.  `gain` rescales
/// the He initialization (1.0 for ordinary layers, smaller to keep a
/// residual branch quiet at the start).
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    gain: f64,
) {
    let mut w = kaiming_normal(rng, &[out_ch, in_ch, k, k], in_ch * k * k);
    w.mapv_inplace(|v| v * gain);
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), zeros(&[out_ch]));
}

/// Applies a registered convolution to a `[C, H, W]` tensor.
pub fn conv(
    tape: &mut Tape,
    bound: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = bound.var(&format!("{name}.weight"));
    let b = bound.var(&format!("{name}.bias"));
    tape.conv2d(x, w, b, stride, pad)
}

/// Registers layer-normalization parameters: `{name}.gain` (ones) and
/// `{name}.bias` (zeros), both of shape `[dim]`.
pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gain"), ones(&[dim]));
    store.insert(format!("{name}.bias"), zeros(&[dim]));
}

/// Applies registered layer normalization across the last axis of
/// `[rows, dim]`.
pub fn layer_norm(tape: &mut Tape, bound: &BoundParams, name: &str, x: Var) -> Var {
    let gain = bound.var(&format!("{name}.gain"));
    let bias = bound.var(&format!("{name}.bias"));
    tape.layer_norm(x, gain, bias, 1e-5)
}

/// Reorders an `[H, W, C]` image into the `[C, H, W]` layout used by the
/// convolution ops.
pub fn hwc_to_chw(img: &ndarray::Array3<f64>) -> ArrayD<f64> {
    img.view()
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// Reorders a `[C, H, W]` tensor back into an `[H, W, C]` image.
pub fn chw_to_hwc(arr: &ArrayD<f64>) -> ndarray::Array3<f64> {
    let a3 = arr
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("chw_to_hwc expects a rank-3 tensor");
    a3.permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
}

/// Concatenates `[C_i, H, W]` tensors along the channel axis.
pub fn concat_channels(tape: &mut Tape, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "nothing to concatenate");
    let (h, w) = {
        let s = tape.value(parts[0]).shape();
        assert_eq!(s.len(), 3, "concat_channels expects [C, H, W]");
        (s[1], s[2])
    };
    let mut flat = Vec::with_capacity(parts.len());
    let mut total_c = 0;
    for &p in parts {
        let s = tape.value(p).shape().to_vec();
        assert_eq!((s[1], s[2]), (h, w), "spatial sizes disagree");
        total_c += s[0];
        flat.push(tape.reshape(p, &[s[0], h * w]));
    }
    let cat = tape.concat_rows(&flat);
    tape.reshape(cat, &[total_c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;

    #[test]
    fn store_binds_deterministically_and_reports_missing_names() {
        let mut store = ParamStore::new();
        store.insert("b.w", ones(&[2, 2]));
        store.insert("a.w", zeros(&[3]));
        assert_eq!(store.len(), 2);
        assert_eq!(store.scalar_count(), 7);
        assert!(store.get("c.w").is_err());

        let mut tape = Tape::new(true);
        let bound = store.bind(&mut tape);
        // Sorted order: a.w first.
        assert_eq!(bound.var("a.w").0 + 1, bound.var("b.w").0);
        assert!(bound.try_var("c.w").is_none());
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::new();
        store.insert("x", zeros(&[1]));
        store.insert("x", zeros(&[1]));
    }

    #[test]
    fn initializers_have_expected_moments_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = kaiming_normal(&mut rng, &[64, 64], 64);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 2.0 / 64.0).abs() < 0.005, "var {var}");

        let u = xavier_uniform(&mut rng, 32, 32);
        let bound = (6.0f64 / 64.0).sqrt();
        assert!(u.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn linear_layer_applies_weight_and_bias() {
        let mut store = ParamStore::new();
        store.insert(
            "l.weight",
            Array::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .into_dyn(),
        );
        store.insert(
            "l.bias",
            Array::from_shape_vec(2, vec![10.0, 20.0]).unwrap().into_dyn(),
        );
        let mut tape = Tape::new(false);
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Array::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap().into_dyn());
        let y = linear(&mut tape, &bound, "l", x);
        // [1,1]·[[1,2],[3,4]] + [10,20] = [4+10, 6+20]
        assert_eq!(tape.value(y).as_slice().unwrap(), &[14.0, 26.0]);
    }

    #[test]
    fn channel_concat_stacks_and_routes_gradients() {
        let mut tape = Tape::new(true);
        let a = tape.leaf(Array::from_shape_fn((2, 2, 2), |(c, y, x)| (c * 4 + y * 2 + x) as f64).into_dyn());
        let b = tape.leaf(Array::from_elem((1, 2, 2), 9.0).into_dyn());
        let cat = concat_channels(&mut tape, &[a, b]);
        assert_eq!(tape.value(cat).shape(), &[3, 2, 2]);
        assert_eq!(tape.value(cat)[[2, 1, 1]], 9.0);
        assert_eq!(tape.value(cat)[[1, 0, 1]], 5.0);

        let s = tape.sum(cat);
        let grads = tape.backward(s);
        assert!(grads.get(a).unwrap().iter().all(|&g| g == 1.0));
        assert!(grads.get(b).unwrap().iter().all(|&g| g == 1.0));
    }
}
