use super::Tensor;
use crate::error::{arg_err, shape_err, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        );
    }
    Ok(())
}

fn need(inputs: &[Tensor], i: usize) -> bool {
    inputs[i].requires_grad()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, _, g| {
                vec![
                    need(inputs, 0).then(|| g.to_vec()),
                    need(inputs, 1).then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, _, g| {
                vec![
                    need(inputs, 0).then(|| g.to_vec()),
                    need(inputs, 1).then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inputs, _, g| {
                let ga = need(inputs, 0).then(|| {
                    let b = inputs[1].data();
                    g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()
                });
                let gb = need(inputs, 1).then(|| {
                    let a = inputs[0].data();
                    g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec())]),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        Tensor::from_op(
            "leaky_relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                        .collect(),
                )]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(
            "tanh",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, out, g| {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect())]
            }),
        )
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.abs()).collect();
        Tensor::from_op(
            "abs",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|inputs, _, g| {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "mean",
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    /// Mean absolute difference between two equally shaped tensors.
    pub fn mae(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.sub(other)?.abs().mean())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return shape_err(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            );
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec())]),
        ))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return arg_err("narrow", format!("axis {axis} out of range for rank {}", shape.len()));
        }
        if len == 0 || start + len > shape[axis] {
            return shape_err(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of size {}", start + len, shape[axis]),
            );
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut gi = vec![0.0; total];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let chunk = &g[o * len * inner..(o + 1) * len * inner];
                    gi[base..base + len * inner].copy_from_slice(chunk);
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4("upsample_nearest")?;
        if factor == 0 {
            return arg_err("upsample_nearest", "factor must be positive");
        }
        let (ho, wo) = (h * factor, w * factor);
        let src = self.data();
        let mut data = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    d[y * wo + x] = s[(y / factor) * w + x / factor];
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "upsample_nearest",
            vec![n, c, ho, wo],
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let mut gi = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g[p * ho * wo..(p + 1) * ho * wo];
                    let d = &mut gi[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for x in 0..wo {
                            d[(y / factor) * w + x / factor] += gs[y * wo + x];
                        }
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4("global_avg_pool")?;
        let hw = h * w;
        let data = self
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(Tensor::from_op(
            "global_avg_pool",
            vec![n, c, 1, 1],
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| {
                let gi = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v / hw as f64).take(hw))
                    .collect();
                vec![Some(gi)]
            }),
        ))
    }

    /// Broadcasts a `[N,C,1,1]` tensor over an `h x w` grid.
    pub fn expand_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        let (n, c, one_h, one_w) = self.dims4("expand_spatial")?;
        if one_h != 1 || one_w != 1 {
            return shape_err(
                "expand_spatial",
                format!("expected [N,C,1,1], got {:?}", self.shape()),
            );
        }
        let hw = h * w;
        let data = self
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(hw))
            .collect();
        Ok(Tensor::from_op(
            "expand_spatial",
            vec![n, c, h, w],
            data,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.chunks(hw).map(|p| p.iter().sum()).collect())]),
        ))
    }

    /// Values clamped to `[lo, hi]`; the gradient passes only inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_op(
            "clamp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inputs, _, g| {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }
}

/// Concatenates tensors along `axis`; all other axes must agree.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let Some(first) = inputs.first() else {
        return arg_err("concat", "no inputs");
    };
    let rank = first.shape().len();
    if axis >= rank {
        return arg_err("concat", format!("axis {axis} out of range for rank {rank}"));
    }
    for t in &inputs[1..] {
        let s = t.shape();
        let compatible = s.len() == rank
            && s.iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return shape_err(
                "concat",
                format!(
                    "cannot concatenate {:?} with {:?} along axis {axis}",
                    first.shape(),
                    s
                ),
            );
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let sizes: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    {
        let guards: Vec<_> = inputs.iter().map(|t| t.data()).collect();
        for o in 0..outer {
            for (d, &sz) in guards.iter().zip(&sizes) {
                data.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::from_op(
        "concat",
        shape,
        data,
        owned,
        Box::new(move |ins, _, g| {
            let mut grads: Vec<Vec<f64>> = sizes
                .iter()
                .map(|&sz| Vec::with_capacity(outer * sz * inner))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gi, &sz) in grads.iter_mut().zip(&sizes) {
                    gi.extend_from_slice(&g[offset..offset + sz * inner]);
                    offset += sz * inner;
                }
            }
            grads
                .into_iter()
                .zip(ins)
                .map(|(gi, t)| t.requires_grad().then_some(gi))
                .collect()
        }),
    ))
}
