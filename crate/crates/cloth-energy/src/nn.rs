//! Minimal feed-forward network machinery: batched MLP forward pass,
//! reverse-mode gradients with respect to parameters and inputs, and the
//! Adam optimizer. All arithmetic is 64-bit; hidden activations are
//! softplus so the network is smooth in its inputs (the simulator consumes
//! gradients of the energy).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(z),
            Activation::Linear => z,
        }
    }

}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// out x in.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

/// A plain feed-forward network mapping an input vector to one scalar.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer intermediates from a forward pass, consumed by `backward`.
/// Only activations are stored: for softplus layers the derivative is
/// recovered from the activation itself, sigmoid(z) = 1 - exp(-softplus(z)).
pub struct ForwardCache {
    /// Activations per layer boundary: entry 0 is the network input,
    /// entry k+1 the output of layer k.
    inputs: Vec<Array2<f64>>,
}

/// Gradients shaped like the parameters of one [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            *w *= s;
            *b *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .fold(0.0_f64, |acc, &g| acc.max(g.abs()))
    }
}

impl Mlp {
    /// Fan-in-scaled random initialization: weights ~ N(0, 1/fan_in),
    /// biases zero, hidden layers softplus, output linear. Deterministic
    /// given the seed.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::BadArchitecture(
                "need at least an input and an output dimension".into(),
            ));
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::BadArchitecture(format!(
                "final layer must output 1 scalar, got {}",
                dims.last().unwrap()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::BadArchitecture("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(&mut rng));
            let act = if k + 1 == dims.len() - 1 {
                Activation::Linear
            } else {
                Activation::Softplus
            };
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
                act,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    /// Forward pass over a batch of rows; returns one scalar per row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut a = x.to_owned();
        for layer in &self.layers {
            let mut z = a.dot(&layer.w.t());
            z += &layer.b;
            if layer.act != Activation::Linear {
                z.mapv_inplace(|v| layer.act.apply(v));
            }
            inputs.push(a);
            a = z;
        }
        let y = a.index_axis(Axis(1), 0).to_owned();
        inputs.push(a);
        Ok((y, ForwardCache { inputs }))
    }

    /// Scalar convenience wrapper around the batched forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        Ok(self.forward_batch(xa.view())?.0[0])
    }

    /// Reverse-mode gradients for a batch: given dL/dy per row, returns
    /// dL/dx (same shape as the input batch) and parameter gradients
    /// accumulated over the batch.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        dy: ArrayView1<f64>,
    ) -> (Array2<f64>, MlpGrads) {
        let n = dy.len();
        assert_eq!(
            n,
            cache.inputs.last().map(|z| z.nrows()).unwrap_or(0),
            "stale cache: batch size mismatch"
        );
        let mut dz = dy.to_owned().insert_axis(Axis(1));
        let mut grads = MlpGrads::zeros_like(self);
        for (k, layer) in self.layers.iter().enumerate().rev() {
            // dz currently holds dL/dA_k; convert to dL/dZ_k. For softplus
            // the derivative comes from the stored activation a_k:
            // sigmoid(z) = 1 - exp(-softplus(z)).
            if layer.act == Activation::Softplus {
                dz.zip_mut_with(&cache.inputs[k + 1], |d, &a| *d *= -(-a).exp_m1());
            }
            grads.layers[k].0 = dz.t().dot(&cache.inputs[k]);
            grads.layers[k].1 = dz.sum_axis(Axis(0));
            dz = dz.dot(&layer.w);
        }
        (dz, grads)
    }

    /// Parameter gradients only, skipping rows whose upstream weight is
    /// zero (inactive loss terms). Falls back to the dense path when most
    /// rows are active.
    pub fn backward_batch_sparse(&self, cache: &ForwardCache, dy: ArrayView1<f64>) -> MlpGrads {
        let active: Vec<usize> = dy
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0.0).then_some(i))
            .collect();
        if active.len() * 4 >= dy.len() * 3 {
            return self.backward_batch(cache, dy).1;
        }
        if active.is_empty() {
            return MlpGrads::zeros_like(self);
        }
        let sub = ForwardCache {
            inputs: cache
                .inputs
                .iter()
                .map(|a| a.select(Axis(0), &active))
                .collect(),
        };
        let dy_sub = Array1::from_iter(active.iter().map(|&i| dy[i]));
        self.backward_batch(&sub, dy_sub.view()).1
    }

    /// Input gradient for a single row with dL/dy = 1.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let (_, cache) = self.forward_batch(xa.view())?;
        let (dx, _) = self.backward_batch(&cache, Array1::ones(1).view());
        Ok(dx.row(0).to_vec())
    }
}

/// Bias-corrected Adam state for a set of MLPs treated as one parameter
/// vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<MlpGrads>,
    v: Vec<MlpGrads>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(mlps: &[&Mlp]) -> Self {
        Self {
            m: mlps.iter().map(|m| MlpGrads::zeros_like(m)).collect(),
            v: mlps.iter().map(|m| MlpGrads::zeros_like(m)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One Adam update over all networks; `grads` must align with the
    /// `mlps` ordering used at construction.
    pub fn step(&mut self, mlps: &mut [&mut Mlp], grads: &[MlpGrads], lr: f64) {
        assert_eq!(mlps.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((mlp, g), (m, v)) in mlps
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (k, layer) in mlp.layers.iter_mut().enumerate() {
                let (gw, gb) = &g.layers[k];
                let (mw, mb) = &mut m.layers[k];
                let (vw, vb) = &mut v.layers[k];
                update(
                    layer.w.as_slice_mut().unwrap(),
                    gw.as_slice().unwrap(),
                    mw.as_slice_mut().unwrap(),
                    vw.as_slice_mut().unwrap(),
                    self.beta1,
                    self.beta2,
                    self.epsilon,
                    lr,
                    bc1,
                    bc2,
                );
                update(
                    layer.b.as_slice_mut().unwrap(),
                    gb.as_slice().unwrap(),
                    mb.as_slice_mut().unwrap(),
                    vb.as_slice_mut().unwrap(),
                    self.beta1,
                    self.beta2,
                    self.epsilon,
                    lr,
                    bc1,
                    bc2,
                );
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    b1: f64,
    b2: f64,
    eps: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Serialized form of one MLP: a JSON-style header plus flat 64-bit
/// little-endian parameter data.
#[derive(Debug, Serialize, Deserialize)]
pub struct MlpHeader {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    pub fn to_parts(&self) -> (MlpHeader, Vec<f64>) {
        let header = MlpHeader {
            dims: self.dims(),
            activations: self.layers.iter().map(|l| l.act).collect(),
        };
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend(l.w.iter());
            flat.extend(l.b.iter());
        }
        (header, flat)
    }

    pub fn from_parts(header: &MlpHeader, flat: &[f64]) -> Result<Self> {
        if header.dims.len() < 2 || header.activations.len() != header.dims.len() - 1 {
            return Err(Error::BadArchitecture("inconsistent header".into()));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for k in 0..header.dims.len() - 1 {
            let (fin, fout) = (header.dims[k], header.dims[k + 1]);
            let need = fout * fin + fout;
            if off + need > flat.len() {
                return Err(Error::TruncatedPayload {
                    path: "<mlp blob>".into(),
                    detail: format!("need {} params, have {}", off + need, flat.len()),
                });
            }
            let w = Array2::from_shape_vec((fout, fin), flat[off..off + fout * fin].to_vec())
                .expect("shape");
            off += fout * fin;
            let b = Array1::from_vec(flat[off..off + fout].to_vec());
            off += fout;
            layers.push(Layer {
                w,
                b,
                act: header.activations[k],
            });
        }
        if off != flat.len() {
            return Err(Error::TruncatedPayload {
                path: "<mlp blob>".into(),
                detail: format!("{} trailing params", flat.len() - off),
            });
        }
        Ok(Self { layers })
    }
}
