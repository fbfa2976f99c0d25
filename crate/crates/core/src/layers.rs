//! Named parameters and the convolution layers built from them.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, depthwise_conv2d, Tensor};

/// A trainable tensor with its unique dotted module path.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Weight initialization scale, all relative to `1/sqrt(fan_in)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Variance-preserving for a linear map.
    Linear,
    /// Kaiming scaling for a layer followed by a leaky-ReLU.
    Leaky,
    /// Small output layer of a residual branch, so that a freshly built
    /// branch starts close to the identity.
    Residual,
}

/// Gain applied to [`Init::Residual`] weights.
pub const RESIDUAL_GAIN: f64 = 0.1;

/// Creates and owns every parameter of a model, in deterministic order.
/// Biases start at zero.
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
    slope: f64,
}

impl ParamStore {
    pub fn new(seed: u64, slope: f64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            slope,
        }
    }

    fn register(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, tensor.clone());
        Ok(tensor)
    }

    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, init: Init) -> Result<Tensor> {
        let gain = match init {
            Init::Linear => 1.0,
            Init::Leaky => (2.0 / (1.0 + self.slope * self.slope)).sqrt(),
            Init::Residual => RESIDUAL_GAIN,
        };
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.register(name, Tensor::parameter(shape, data)?)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, Tensor::parameter(shape, vec![0.0; n])?)
    }

    /// Dense `k x k` convolution with bias, "same" padding and linear init.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv2d> {
        self.conv_init(prefix, cin, cout, k, stride, Init::Linear)
    }

    pub fn conv_init(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Conv2d> {
        let weight = self.weight(format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k, init)?;
        let bias = self.zeros(format!("{prefix}.bias"), &[cout])?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn depthwise(&mut self, prefix: &str, channels: usize, k: usize) -> Result<DepthwiseConv> {
        let weight = self.weight(format!("{prefix}.weight"), &[channels, 1, k, k], k * k, Init::Linear)?;
        let bias = self.zeros(format!("{prefix}.bias"), &[channels])?;
        Ok(DepthwiseConv {
            weight,
            bias,
            padding: k / 2,
        })
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn into_parameters(self) -> Vec<Parameter> {
        self.params
            .into_iter()
            .map(|(name, tensor)| Parameter { name, tensor })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&self) {
        self.weight.update(|w| w.fill(0.0));
        self.bias.update(|b| b.fill(0.0));
    }

    /// Makes a 1x1 (or centre-tap) convolution copy input channel `i` to
    /// output channel `i + offset`, zeroing everything else.
    pub fn set_identity(&self, offset: usize) {
        let (cout, cin, k) = (self.out_channels(), self.in_channels(), self.weight.shape()[2]);
        self.zero();
        self.weight.update(|w| {
            for i in 0..cin.min(cout.saturating_sub(offset)) {
                let o = i + offset;
                w[((o * cin + i) * k + k / 2) * k + k / 2] = 1.0;
            }
        });
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

impl DepthwiseConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depthwise_conv2d(x, &self.weight, Some(&self.bias), self.padding)
    }
}

/// Halves the spatial extent with a stride-2 3x3 convolution.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Downsample {
            conv: store.conv(prefix, cin, cout, 3, 2)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4("down2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                op: "down2",
                detail: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        self.conv.forward(x)
    }
}

/// Doubles the spatial extent: nearest-neighbour x2 then a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Upsample {
            conv: store.conv(prefix, cin, cout, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&x.upsample_nearest(2)?)
    }
}

/// Number of scalars in a dense conv layer with bias.
pub fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_shapes() {
        let mut store = ParamStore::new(0, 0.1);
        let down = Downsample::new(&mut store, "down", 16, 32).unwrap();
        let up = Upsample::new(&mut store, "up", 32, 16).unwrap();
        let x = Tensor::zeros(&[1, 16, 32, 32]);
        let d = down.forward(&x).unwrap();
        assert_eq!(d.shape(), &[1, 32, 16, 16]);
        assert_eq!(up.forward(&d).unwrap().shape(), x.shape());
        assert!(down.forward(&Tensor::zeros(&[1, 16, 7, 8])).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(0, 0.1);
        store.conv("a", 1, 1, 1, 1).unwrap();
        assert!(store.conv("a", 1, 1, 1, 1).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let build = || {
            let mut s = ParamStore::new(9, 0.1);
            s.conv("c", 3, 4, 3, 1).unwrap();
            s.into_parameters()
        };
        let (a, b) = (build(), build());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.tensor.to_vec(), q.tensor.to_vec());
        }
        let w = &a[1].tensor;
        assert_eq!(a[1].name, "c.weight");
        assert!(w.to_vec().iter().any(|v| *v != 0.0));
        assert!(a[0].tensor.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_conv_copies_channels() {
        let mut store = ParamStore::new(0, 0.1);
        let c = store.conv("c", 2, 2, 3, 1).unwrap();
        c.set_identity(0);
        let x = Tensor::new(&[1, 2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        assert_eq!(c.forward(&x).unwrap().to_vec(), x.to_vec());
    }
}
