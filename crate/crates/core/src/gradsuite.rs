//! Named finite-difference suites covering every differentiable operation.
//!
//! Each check reduces the operation's output to a scalar with a fixed random
//! projection, so that no part of the Jacobian cancels out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{interact, BlockConfig, FourierTarget, FrequencyBranch, FsiBlock, Interaction, SpatialBranch};
use crate::error::{Error, Result};
use crate::fourier::{amplitude, fft2, ifft2, phase, recompose, swap_amplitude, AmpPhase, Spectrum};
use crate::gradcheck::{check_with, GradCheckOptions, GradReport};
use crate::iem::{apply_dynamic_filter, CrossScaleFuse, DynamicFilterBlock, DynamicFilterField, ScalePyramid};
use crate::layers::ParamStore;
use crate::loss::{stage1_loss, stage2_loss, LossWeights};
use crate::tensor::{concat, conv2d, depthwise_conv2d, per_pixel_filter, with_precision, Precision, Tensor};

pub const SUITES: [&str; 5] = ["tensor", "fourier", "blocks", "iem", "losses"];

/// Amplitude below which spectral bins are excluded from phase checks.
pub const AMPLITUDE_GUARD: f64 = 1e-3;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::parameter(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::parameter(shape, data).expect("valid shape")
}

/// `sum(out * R)` for a fixed random `R` of the output's shape.
fn project(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let r = Tensor::new(out.shape(), (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    Ok(out.mul(&r)?.sum())
}

fn run_check(name: &str, inputs: &[Tensor], f: impl Fn() -> Result<Tensor>) -> Result<GradReport> {
    check_with(name, inputs, || project(&f()?, 1), |_, _| false, &GradCheckOptions::default())
}

fn tensor_suite() -> Result<Vec<GradReport>> {
    let a = random(&[2, 3, 4, 4], 1, -1.0, 1.0);
    let b = random(&[2, 3, 4, 4], 2, -1.0, 1.0);
    let k = away_from_zero(&[2, 3, 4, 4], 3);
    let small = random(&[1, 2, 3, 3], 4, -1.0, 1.0);
    let bias = random(&[4], 5, -0.5, 0.5);
    let w3 = random(&[4, 3, 3, 3], 6, -0.5, 0.5);
    let w1 = random(&[4, 3, 1, 1], 7, -0.5, 0.5);
    let dw = random(&[3, 1, 3, 3], 8, -0.5, 0.5);
    let dwb = random(&[3], 9, -0.5, 0.5);
    let img = random(&[1, 3, 8, 8], 10, -1.0, 1.0);
    let feat = random(&[1, 2, 6, 6], 11, -1.0, 1.0);
    let field = random(&[1, 9, 6, 6], 12, -0.5, 0.5);
    Ok(vec![
        run_check("add", &[a.clone(), b.clone()], || a.add(&b))?,
        run_check("sub", &[a.clone(), b.clone()], || a.sub(&b))?,
        run_check("mul", &[a.clone(), b.clone()], || a.mul(&b))?,
        run_check("scale", &[a.clone()], || Ok(a.scale(-1.7)))?,
        run_check("add_scalar", &[a.clone()], || Ok(a.add_scalar(0.3)))?,
        run_check("leaky_relu", &[k.clone()], || Ok(k.leaky_relu(0.1)))?,
        run_check("abs", &[k.clone()], || Ok(k.abs()))?,
        run_check("tanh", &[a.clone()], || Ok(a.tanh()))?,
        run_check("sum", &[a.clone()], || Ok(a.sum()))?,
        run_check("mean", &[a.clone()], || Ok(a.mean()))?,
        run_check("mae", &[k.clone()], || k.mae(&Tensor::zeros(k.shape())))?,
        run_check("clamp", &[k.clone()], || Ok(k.clamp(-0.5, 0.5)))?,
        run_check("reshape", &[a.clone()], || a.reshape(&[6, 16]))?,
        run_check("narrow", &[a.clone()], || a.narrow(1, 1, 2))?,
        run_check("concat", &[a.clone(), b.clone()], || concat(&[&a, &b], 1))?,
        run_check("upsample_nearest", &[small.clone()], || small.upsample_nearest(2))?,
        run_check("global_avg_pool", &[a.clone()], || a.global_avg_pool())?,
        run_check("expand_spatial", &[small.clone()], || small.global_avg_pool()?.expand_spatial(3, 2))?,
        run_check("conv2d_3x3", &[img.clone(), w3.clone(), bias.clone()], || {
            conv2d(&img, &w3, Some(&bias), 1, 1)
        })?,
        run_check("conv2d_3x3_stride2", &[img.clone(), w3.clone(), bias.clone()], || {
            conv2d(&img, &w3, Some(&bias), 2, 1)
        })?,
        run_check("conv2d_3x3_stride4", &[img.clone(), w3.clone()], || conv2d(&img, &w3, None, 4, 1))?,
        run_check("conv2d_1x1", &[img.clone(), w1.clone(), bias.clone()], || {
            conv2d(&img, &w1, Some(&bias), 1, 0)
        })?,
        run_check("depthwise_conv2d", &[img.clone(), dw.clone(), dwb.clone()], || {
            depthwise_conv2d(&img, &dw, Some(&dwb), 1)
        })?,
        run_check("per_pixel_filter", &[feat.clone(), field.clone()], || per_pixel_filter(&feat, &field))?,
    ])
}

/// Smallest spectral amplitude allowed in a gradient-check image. Central
/// differences on `|z|` and `arg z` lose accuracy like `(step / |z|)^2`.
pub const MIN_BIN_AMPLITUDE: f64 = 0.1;

/// Whether every bin of `t`'s spectrum clears [`MIN_BIN_AMPLITUDE`] and
/// keeps an angular margin of `cut_margin` (as a fraction of its amplitude)
/// from the phase branch cut.
fn spectrum_conditioned(t: &Tensor, cut_margin: f64) -> Result<bool> {
    let s = with_precision(Precision::Double, || fft2(&t.detach()))?;
    let (re, im) = (s.real.to_vec(), s.imag.to_vec());
    Ok(re.iter().zip(&im).all(|(r, i)| {
        let amp = r.hypot(*i);
        // exactly real bins sit on the cut by symmetry and are stable
        amp > MIN_BIN_AMPLITUDE.max(AMPLITUDE_GUARD) && (*i == 0.0 || *r > 0.0 || i.abs() > cut_margin * amp)
    }))
}

/// Branch-cut margin for spectra inside a block. A step moves their phase by
/// far less than the margin the direct phase checks use.
const INNER_CUT_MARGIN: f64 = 0.0;

/// Values inside a checked graph that decide whether finite differences
/// are accurate there.
#[derive(Default)]
struct Inner {
    /// Inputs of Fourier transforms.
    spectra: Vec<Tensor>,
    /// Inputs of leaky-ReLU activations.
    preactivations: Vec<Tensor>,
}

/// Smallest distance from the activation kink allowed for a
/// pre-activation inside a checked graph.
const KINK_MARGIN: f64 = 0.02;

/// Tries `attempts` random images in `[-2, 2)` for one such that it and the
/// inner spectra have well-conditioned bins and no inner pre-activation
/// lies near the kink.
fn search_input(
    shape: &[usize],
    seed: u64,
    attempts: u64,
    features: impl Fn(&Tensor) -> Result<Inner>,
) -> Result<Option<Tensor>> {
    for attempt in 0..attempts {
        let x = random(shape, seed.wrapping_add(attempt * 7919), -2.0, 2.0);
        if !spectrum_conditioned(&x, 0.05)? {
            continue;
        }
        let inner = with_precision(Precision::Double, || features(&x))?;
        let mut ok = inner
            .preactivations
            .iter()
            .all(|t| t.data().iter().all(|v| v.abs() > KINK_MARGIN));
        for t in &inner.spectra {
            ok &= spectrum_conditioned(t, INNER_CUT_MARGIN)?;
        }
        if ok {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

fn not_found() -> Error {
    Error::InvalidArgument {
        op: "gradsuite",
        detail: "no well-conditioned image found".into(),
    }
}

fn well_conditioned_image(shape: &[usize], seed: u64) -> Result<Tensor> {
    search_input(shape, seed, 5000, |_| Ok(Inner::default()))?.ok_or_else(not_found)
}

/// Builds a block from successive parameter seeds until some input gives
/// it well-conditioned inner spectra. Small initial weights make those
/// spectra small too, and a fixed step is then a large relative move.
fn conditioned_block<B>(
    shape: &[usize],
    seed: u64,
    build: impl Fn(&mut ParamStore) -> Result<B>,
    features: impl Fn(&B, &Tensor) -> Result<Inner>,
) -> Result<(B, Tensor)> {
    for k in 0..200 {
        let block = build(&mut ParamStore::new(seed + k, 0.1))?;
        if let Some(x) = search_input(shape, seed + k, 200, |x| features(&block, x))? {
            return Ok((block, x));
        }
    }
    Err(not_found())
}

/// Inner values of one frequency branch on input `x`, with its output.
fn branch_inner(q: &FrequencyBranch, x: &Tensor, inner: &mut Inner) -> Result<Tensor> {
    let t = q.forward_traced(x)?;
    let component = match q.target {
        FourierTarget::Amplitude => &t.before.amplitude,
        FourierTarget::Phase => &t.before.phase,
    };
    inner.preactivations.push(q.op1.forward(component)?);
    inner.spectra.push(t.pre);
    Ok(t.output)
}

fn single_branch_inner(q: &FrequencyBranch, x: &Tensor) -> Result<Inner> {
    let mut inner = Inner::default();
    branch_inner(q, x, &mut inner)?;
    Ok(inner)
}

/// Inner values of both frequency branches of a dual-branch block.
fn block_inner(block: &FsiBlock, x: &Tensor) -> Result<Inner> {
    let mut inner = Inner::default();
    let (Some([s1, _]), Some([q1, q2])) = (&block.spatial, &block.frequency) else {
        return Ok(inner);
    };
    let f1 = branch_inner(q1, x, &mut inner)?;
    let (_, f1) = interact(block.interaction.as_ref(), &s1.forward(x)?, &f1)?;
    branch_inner(q2, &f1, &mut inner)?;
    Ok(inner)
}

fn fourier_suite() -> Result<Vec<GradReport>> {
    let x = well_conditioned_image(&[1, 2, 4, 8], 21)?;
    let odd = well_conditioned_image(&[1, 1, 7, 5], 22)?;
    let re = random(&[1, 2, 4, 4], 23, 0.2, 1.0);
    let im = random(&[1, 2, 4, 4], 24, 0.2, 1.0);
    let amp = random(&[1, 2, 4, 4], 25, 0.1, 1.0);
    let ph = random(&[1, 2, 4, 4], 26, -3.0, 3.0);
    let spec = Spectrum {
        real: re.clone(),
        imag: im.clone(),
    };
    let ap = AmpPhase {
        amplitude: amp.clone(),
        phase: ph.clone(),
    };
    // spectra of real images, so that the strict inverse is valid
    let y = well_conditioned_image(&[1, 2, 4, 4], 27)?;
    Ok(vec![
        run_check("fft2_real", &[x.clone()], || Ok(fft2(&x)?.real))?,
        run_check("fft2_imag", &[x.clone()], || Ok(fft2(&x)?.imag))?,
        run_check("fft2_bluestein", &[odd.clone()], || {
            let s = fft2(&odd)?;
            s.real.add(&s.imag)
        })?,
        run_check("ifft2", &[y.clone()], || ifft2(&fft2(&y)?))?,
        run_check("amplitude", &[re.clone(), im.clone()], || amplitude(&spec))?,
        run_check("phase", &[re.clone(), im.clone()], || phase(&spec))?,
        run_check("recompose", &[amp.clone(), ph.clone()], || {
            let s = recompose(&ap)?;
            s.real.add(&s.imag)
        })?,
        run_check("image_amplitude", &[x.clone()], || amplitude(&fft2(&x)?))?,
        run_check("image_phase", &[x.clone()], || phase(&fft2(&x)?))?,
        run_check("swap_amplitude", &[amp.clone(), ph.clone()], || swap_amplitude(&amp, &ph))?,
    ])
}

fn blocks_suite() -> Result<Vec<GradReport>> {
    let mut store = ParamStore::new(31, 0.1);
    let c = 2;
    let shape = [1, c, 8, 8];
    let x = well_conditioned_image(&shape, 32)?;
    let spatial = SpatialBranch::new(&mut store, "spatial", c)?;
    let inter = Interaction::new(&mut store, "inter", c)?;
    let y = random(&shape, 33, -1.0, 1.0);
    let branch = |target| move |s: &mut ParamStore| FrequencyBranch::new(s, "freq", c, target);
    let (amp_branch, xa) = conditioned_block(&shape, 34, branch(FourierTarget::Amplitude), single_branch_inner)?;
    let (phase_branch, xp) = conditioned_block(&shape, 35, branch(FourierTarget::Phase), single_branch_inner)?;
    let (fsia, xfa) = conditioned_block(
        &shape,
        36,
        |s| FsiBlock::new(s, "fsia", BlockConfig::fsia(c)),
        block_inner,
    )?;
    let (fsip, xfp) = conditioned_block(
        &shape,
        37,
        |s| FsiBlock::new(s, "fsip", BlockConfig::fsip(c)),
        block_inner,
    )?;
    let with_params = |x: &Tensor, extra: Vec<Tensor>| -> Vec<Tensor> {
        let mut v = vec![x.clone()];
        v.extend(extra);
        v
    };
    Ok(vec![
        run_check(
            "spatial_branch",
            &with_params(&x, vec![spatial.conv1.weight.clone(), spatial.conv2.weight.clone()]),
            || spatial.forward(&x),
        )?,
        run_check(
            "frequency_branch_amplitude",
            &with_params(&xa, vec![amp_branch.pre.weight.clone(), amp_branch.op1.weight.clone()]),
            || amp_branch.forward(&xa),
        )?,
        run_check(
            "frequency_branch_phase",
            &with_params(&xp, vec![phase_branch.pre.weight.clone(), phase_branch.op2.weight.clone()]),
            || phase_branch.forward(&xp),
        )?,
        run_check(
            "interaction",
            &[x.clone(), y.clone(), inter.w1.weight.clone(), inter.w2.bias.clone()],
            || {
                let (s, f) = inter.forward(&x, &y)?;
                concat(&[&s, &f], 1)
            },
        )?,
        run_check(
            "fsia_block",
            &with_params(&xfa, vec![fsia.fuse.weight.clone(), fsia.interaction.as_ref().expect("enabled").w2.weight.clone()]),
            || fsia.forward(&xfa),
        )?,
        run_check(
            "fsip_block",
            &with_params(&xfp, vec![fsip.fuse.weight.clone(), fsip.interaction.as_ref().expect("enabled").w1.weight.clone()]),
            || fsip.forward(&xfp),
        )?,
    ])
}

fn iem_suite() -> Result<Vec<GradReport>> {
    let mut store = ParamStore::new(41, 0.1);
    let c = 2;
    let l0 = random(&[1, c, 8, 8], 42, -1.0, 1.0);
    let l1 = random(&[1, 2 * c, 4, 4], 43, -1.0, 1.0);
    let l2 = random(&[1, 4 * c, 2, 2], 44, -1.0, 1.0);
    let fuse = CrossScaleFuse::new(&mut store, "cs", c)?;
    let dfb = DynamicFilterBlock::new(&mut store, "dfb", c, 3)?;
    let a = random(&[1, c, 6, 6], 45, -1.0, 1.0);
    let b = random(&[1, c, 6, 6], 46, -1.0, 1.0);
    let d = random(&[1, c, 6, 6], 47, -1.0, 1.0);
    let kernels = random(&[1, 9, 6, 6], 48, -0.5, 0.5);
    Ok(vec![
        run_check(
            "cross_scale_fuse",
            &[l0.clone(), l1.clone(), l2.clone(), fuse.fuse[1].weight.clone(), fuse.level_convs[2].weight.clone()],
            || {
                let out = fuse.forward(&ScalePyramid::new([l0.clone(), l1.clone(), l2.clone()])?)?;
                let flat: Vec<Tensor> = out
                    .levels
                    .iter()
                    .map(|t| t.reshape(&[t.numel()]))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = flat.iter().collect();
                concat(&refs, 0)
            },
        )?,
        run_check(
            "dynamic_filter_block",
            &[a.clone(), b.clone(), d.clone(), dfb.channel.weight.clone(), dfb.spatial.weight.clone()],
            || Ok(dfb.forward(&[&a, &b, &d])?.kernels),
        )?,
        run_check("apply_dynamic_filter", &[d.clone(), kernels.clone()], || {
            apply_dynamic_filter(
                &d,
                &DynamicFilterField {
                    kernels: kernels.clone(),
                },
            )
        })?,
        run_check("dfb_then_filter", &[a.clone(), d.clone(), dfb.kernel.weight.clone()], || {
            apply_dynamic_filter(&d, &dfb.forward(&[&a, &b, &d])?)
        })?,
    ])
}

fn losses_suite() -> Result<Vec<GradReport>> {
    let w = LossWeights::default();
    let shape = [1, 3, 8, 8];
    let x_in = well_conditioned_image(&shape, 51)?.detach().scale(0.2);
    let x_gt = well_conditioned_image(&shape, 52)?.detach();
    let y1 = well_conditioned_image(&shape, 53)?;
    let y2 = well_conditioned_image(&shape, 54)?;
    let opts = GradCheckOptions::default();
    Ok(vec![
        check_with(
            "stage1_loss",
            &[y1.clone()],
            || Ok(stage1_loss(&y1, &x_in, &x_gt, &w)?.total),
            |_, _| false,
            &opts,
        )?,
        check_with(
            "stage2_loss",
            &[y2.clone()],
            || Ok(stage2_loss(&y2, &x_gt, &w)?.total),
            |_, _| false,
            &opts,
        )?,
    ])
}

/// Runs the suite called `name`.
pub fn run(name: &str) -> Result<Vec<GradReport>> {
    match name {
        "tensor" => tensor_suite(),
        "fourier" => fourier_suite(),
        "blocks" => blocks_suite(),
        "iem" => iem_suite(),
        "losses" => losses_suite(),
        other => Err(Error::InvalidArgument {
            op: "gradcheck",
            detail: format!("unknown suite {other:?}; expected one of {SUITES:?}"),
        }),
    }
}

pub fn run_all() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for s in SUITES {
        out.extend(run(s)?);
    }
    Ok(out)
}
