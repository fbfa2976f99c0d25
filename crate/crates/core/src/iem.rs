//! Information exchange between scales and between the two stages.
//!
//! [`CrossScaleFuse`] mixes a three-level feature pyramid so that every level
//! sees every other level. [`DynamicFilterBlock`] turns a set of same-scale
//! features into a field of per-pixel 3x3 kernels which
//! [`apply_dynamic_filter`] applies residually to a decoder feature.

use crate::error::{shape_err, Result};
use crate::layers::{Conv2d, DepthwiseConv, Init, ParamStore};
use crate::tensor::{concat, per_pixel_filter, Tensor};

/// Per-pixel kernel size of the dynamic filters.
pub const KERNEL_SIZE: usize = 3;

/// Three feature maps at full, half and quarter resolution with `C`, `2C`
/// and `4C` channels.
#[derive(Clone, Debug)]
pub struct ScalePyramid {
    pub levels: [Tensor; 3],
}

impl ScalePyramid {
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        let (n, c, h, w) = levels[0].dims4("scale_pyramid")?;
        for (i, level) in levels.iter().enumerate() {
            let f = 1 << i;
            let expect = [n, c * f, h / f, w / f];
            if level.shape() != expect || h % f != 0 || w % f != 0 {
                return shape_err(
                    "scale_pyramid",
                    format!("level {i} has shape {:?}, expected {expect:?} for a dyadic pyramid", level.shape()),
                );
            }
        }
        Ok(ScalePyramid { levels })
    }

    pub fn base_channels(&self) -> usize {
        self.levels[0].shape()[1]
    }
}

/// Strided convolution taking pyramid level `from` down to the finer-to-coarser
/// level `to`.
#[derive(Clone, Debug)]
struct DownPath {
    from: usize,
    to: usize,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct CrossScaleFuse {
    pub level_convs: [Conv2d; 3],
    downs: Vec<DownPath>,
    pub fuse: [Conv2d; 3],
}

impl CrossScaleFuse {
    pub fn new(store: &mut ParamStore, prefix: &str, base_channels: usize) -> Result<Self> {
        let ch = |i: usize| base_channels << i;
        let mut level_convs = Vec::with_capacity(3);
        for i in 0..3 {
            level_convs.push(store.conv(&format!("{prefix}.level{i}"), ch(i), ch(i), 3, 1)?);
        }
        let mut downs = Vec::new();
        for to in 1..3 {
            for from in 0..to {
                let stride = 1 << (to - from);
                let conv = store.conv(&format!("{prefix}.down{from}to{to}"), ch(from), ch(from), 3, stride)?;
                downs.push(DownPath { from, to, conv });
            }
        }
        let total = ch(0) + ch(1) + ch(2);
        let mut fuse = Vec::with_capacity(3);
        for i in 0..3 {
            fuse.push(store.conv(&format!("{prefix}.fuse{i}"), total, ch(i), 1, 1)?);
        }
        Ok(CrossScaleFuse {
            level_convs: level_convs.try_into().expect("three levels"),
            downs,
            fuse: fuse.try_into().expect("three levels"),
        })
    }

    /// Strided convolution used to bring level `from` down to level `to`.
    pub fn down_conv(&self, from: usize, to: usize) -> Option<&Conv2d> {
        self.downs.iter().find(|d| d.from == from && d.to == to).map(|d| &d.conv)
    }

    pub fn forward(&self, pyramid: &ScalePyramid) -> Result<ScalePyramid> {
        let expected = self.level_convs[0].in_channels();
        if pyramid.base_channels() != expected {
            return shape_err(
                "cross_scale_fuse",
                format!("pyramid has {} base channels, module expects {expected}", pyramid.base_channels()),
            );
        }
        let transformed: Vec<Tensor> = pyramid
            .levels
            .iter()
            .zip(&self.level_convs)
            .map(|(x, conv)| conv.forward(x))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(3);
        for target in 0..3 {
            let mut parts = Vec::with_capacity(3);
            for (source, feature) in transformed.iter().enumerate() {
                let resized = if source == target {
                    feature.clone()
                } else if source > target {
                    feature.upsample_nearest(1 << (source - target))?
                } else {
                    let conv = self.down_conv(source, target).expect("down path for every finer level");
                    conv.forward(feature)?
                };
                parts.push(resized);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            out.push(self.fuse[target].forward(&concat(&refs, 1)?)?);
        }
        ScalePyramid::new(out.try_into().expect("three levels"))
    }
}

/// Per-pixel kernels `[N, k*k, H, W]`, shared across channels.
#[derive(Clone, Debug)]
pub struct DynamicFilterField {
    pub kernels: Tensor,
}

/// Generates a [`DynamicFilterField`] from several same-scale features.
#[derive(Clone, Debug)]
pub struct DynamicFilterBlock {
    pub fuse: Conv2d,
    pub spatial: DepthwiseConv,
    pub channel: Conv2d,
    pub kernel: Conv2d,
    inputs: usize,
}

impl DynamicFilterBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, inputs: usize) -> Result<Self> {
        Ok(DynamicFilterBlock {
            fuse: store.conv(&format!("{prefix}.fuse"), inputs * channels, channels, 1, 1)?,
            spatial: store.depthwise(&format!("{prefix}.spatial"), channels, 3)?,
            channel: store.conv(&format!("{prefix}.channel"), channels, channels, 1, 1)?,
            kernel: store.conv_init(
                &format!("{prefix}.kernel"),
                channels,
                KERNEL_SIZE * KERNEL_SIZE,
                1,
                1,
                Init::Residual,
            )?,
            inputs,
        })
    }

    pub fn forward(&self, features: &[&Tensor]) -> Result<DynamicFilterField> {
        if features.len() != self.inputs {
            return shape_err(
                "dynamic_filter_block",
                format!("expected {} inputs, got {}", self.inputs, features.len()),
            );
        }
        let (n, _, h, w) = features[0].dims4("dynamic_filter_block")?;
        for f in features {
            let (fn_, _, fh, fw) = f.dims4("dynamic_filter_block")?;
            if (fn_, fh, fw) != (n, h, w) {
                return shape_err(
                    "dynamic_filter_block",
                    format!("inputs disagree on N/H/W: {:?} vs {:?}", features[0].shape(), f.shape()),
                );
            }
        }
        let fused = self.fuse.forward(&concat(features, 1)?)?;
        let spatial = self.spatial.forward(&fused)?;
        let channel = self.channel.forward(&fused.global_avg_pool()?)?.expand_spatial(h, w)?;
        // bounded taps keep the residual filter from compounding across scales
        let kernels = self.kernel.forward(&spatial.add(&channel)?)?.tanh();
        Ok(DynamicFilterField { kernels })
    }
}

/// `feature * field + feature`, with `*` the per-pixel filtering.
pub fn apply_dynamic_filter(feature: &Tensor, field: &DynamicFilterField) -> Result<Tensor> {
    per_pixel_filter(feature, &field.kernels)?.add(feature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pyramid(c: usize, h: usize, seed: u64) -> ScalePyramid {
        ScalePyramid::new([
            random(&[1, c, h, h], seed),
            random(&[1, 2 * c, h / 2, h / 2], seed + 1),
            random(&[1, 4 * c, h / 4, h / 4], seed + 2),
        ])
        .unwrap()
    }

    #[test]
    fn pyramid_rejects_non_dyadic() {
        let bad = ScalePyramid::new([
            Tensor::zeros(&[1, 2, 8, 8]),
            Tensor::zeros(&[1, 4, 4, 4]),
            Tensor::zeros(&[1, 4, 2, 2]),
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn fuse_preserves_shapes() {
        let mut store = ParamStore::new(0, 0.1);
        let fuse = CrossScaleFuse::new(&mut store, "x", 8).unwrap();
        let p = pyramid(8, 32, 1);
        let out = fuse.forward(&p).unwrap();
        for (a, b) in out.levels.iter().zip(&p.levels) {
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn native_path_isolation() {
        let mut store = ParamStore::new(0, 0.1);
        let fuse = CrossScaleFuse::new(&mut store, "x", 2).unwrap();
        let p = pyramid(2, 8, 3);
        let offsets = [0, 2, 6];
        for (i, f) in fuse.fuse.iter().enumerate() {
            f.set_identity(0);
            // route the native slice of the concatenation to the output
            f.weight.update(|w| w.fill(0.0));
            let cin = f.in_channels();
            f.weight.update(|w| {
                for c in 0..f.out_channels() {
                    w[c * cin + offsets[i] + c] = 1.0;
                }
            });
        }
        let out = fuse.forward(&p).unwrap();
        for i in 0..3 {
            let expect = fuse.level_convs[i].forward(&p.levels[i]).unwrap();
            for (a, b) in out.levels[i].to_vec().iter().zip(expect.to_vec()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_final_conv_gives_zero_kernels() {
        let mut store = ParamStore::new(0, 0.1);
        let dfb = DynamicFilterBlock::new(&mut store, "d", 4, 3).unwrap();
        dfb.kernel.zero();
        let xs: Vec<Tensor> = (0..3).map(|i| random(&[2, 4, 6, 6], i)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let field = dfb.forward(&refs).unwrap();
        assert_eq!(field.kernels.shape(), &[2, 9, 6, 6]);
        assert!(field.kernels.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kernels_vary_spatially() {
        let mut store = ParamStore::new(5, 0.1);
        let dfb = DynamicFilterBlock::new(&mut store, "d", 4, 3).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|i| random(&[1, 4, 8, 8], 10 + i)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let k = dfb.forward(&refs).unwrap().kernels.to_vec();
        let first_map = &k[..64];
        let mean = first_map.iter().sum::<f64>() / 64.0;
        let var = first_map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(var.sqrt() > 0.0);
    }

    #[test]
    fn dfb_input_mismatch() {
        let mut store = ParamStore::new(0, 0.1);
        let dfb = DynamicFilterBlock::new(&mut store, "d", 2, 2).unwrap();
        let a = Tensor::zeros(&[1, 2, 4, 4]);
        let b = Tensor::zeros(&[1, 2, 4, 2]);
        assert!(dfb.forward(&[&a, &b]).is_err());
        assert!(dfb.forward(&[&a]).is_err());
    }

    #[test]
    fn zero_and_delta_fields() {
        let x = random(&[1, 3, 5, 5], 2);
        let zero = DynamicFilterField {
            kernels: Tensor::zeros(&[1, 9, 5, 5]),
        };
        assert_eq!(apply_dynamic_filter(&x, &zero).unwrap().to_vec(), x.to_vec());
        let mut delta = vec![0.0; 9 * 25];
        delta[4 * 25..5 * 25].fill(1.0);
        let delta = DynamicFilterField {
            kernels: Tensor::new(&[1, 9, 5, 5], delta).unwrap(),
        };
        let doubled: Vec<f64> = x.to_vec().iter().map(|v| 2.0 * v).collect();
        assert_eq!(apply_dynamic_filter(&x, &delta).unwrap().to_vec(), doubled);
    }
}
