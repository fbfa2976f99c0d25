//! Differentiable orthonormal 2-D Fourier transform and amplitude/phase
//! decomposition.
//!
//! Spectra use the unshifted layout (DC at index `(0, 0)`) and the
//! normalization `1/sqrt(H*W)` in both directions, so Parseval's identity
//! holds without extra factors. Every channel of an `[N,C,H,W]` tensor is
//! transformed independently.

pub mod fft;

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use fft::{fft2_planes, Direction};

/// `1 / v`, or zero where `v` is exactly zero. Amplitude and phase have no
/// derivative at the origin; the zero subgradient keeps backward finite there.
fn recip_or_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.recip()
    }
}

/// Largest imaginary residue tolerated by a strict inverse transform.
pub const RESIDUE_LIMIT: f64 = 1e-5;

/// Complex spectrum stored as separate real and imaginary planes.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

/// Polar view of a [`Spectrum`].
#[derive(Clone, Debug)]
pub struct AmpPhase {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

/// What [`ifft2_with`] does with the imaginary part of the inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Residue {
    /// Error when the imaginary residue exceeds [`RESIDUE_LIMIT`].
    Strict,
    /// Drop the imaginary part unconditionally. Used inside the network,
    /// where learned phase maps need not keep Hermitian symmetry.
    Discard,
}

impl Spectrum {
    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }
}

fn split_planes(stacked: &Tensor, shape: &[usize]) -> Result<(Tensor, Tensor)> {
    let re = stacked.narrow(0, 0, 1)?.reshape(shape)?;
    let im = stacked.narrow(0, 1, 1)?.reshape(shape)?;
    Ok((re, im))
}

/// Complex 2-D DFT of `re + i*im`, returned stacked as `[2, N, C, H, W]`.
fn complex_dft(re: &Tensor, im: Option<&Tensor>, dir: Direction) -> Result<Tensor> {
    let (n, c, h, w) = re.dims4("fft2")?;
    if let Some(im) = im {
        if im.shape() != re.shape() {
            return shape_err(
                "fft2",
                format!("real {:?} and imaginary {:?} planes differ", re.shape(), im.shape()),
            );
        }
    }
    let total = re.numel();
    let mut out = re.to_vec();
    let mut imag = im.map(Tensor::to_vec).unwrap_or_else(|| vec![0.0; total]);
    fft2_planes(&mut out, &mut imag, h, w, dir);
    out.extend_from_slice(&imag);

    let mut inputs = vec![re.clone()];
    if let Some(im) = im {
        inputs.push(im.clone());
    }
    let adjoint = match dir {
        Direction::Forward => Direction::Inverse,
        Direction::Inverse => Direction::Forward,
    };
    Ok(Tensor::from_op(
        "fft2",
        vec![2, n, c, h, w],
        out,
        inputs,
        Box::new(move |ins, _, g| {
            let mut gre = g[..total].to_vec();
            let mut gim = g[total..].to_vec();
            fft2_planes(&mut gre, &mut gim, h, w, adjoint);
            let mut grads = vec![ins[0].requires_grad().then_some(gre)];
            if ins.len() == 2 {
                grads.push(ins[1].requires_grad().then_some(gim));
            }
            grads
        }),
    ))
}

/// Orthonormal forward transform of a real `[N,C,H,W]` tensor.
pub fn fft2(image: &Tensor) -> Result<Spectrum> {
    let stacked = complex_dft(image, None, Direction::Forward)?;
    let (real, imag) = split_planes(&stacked, image.shape())?;
    Ok(Spectrum { real, imag })
}

/// Orthonormal inverse transform, strict about the imaginary residue.
pub fn ifft2(spectrum: &Spectrum) -> Result<Tensor> {
    ifft2_with(spectrum, Residue::Strict)
}

/// Orthonormal inverse transform keeping the real part.
pub fn ifft2_with(spectrum: &Spectrum, mode: Residue) -> Result<Tensor> {
    let (n, c, h, w) = spectrum.real.dims4("ifft2")?;
    if spectrum.imag.shape() != spectrum.real.shape() {
        return shape_err(
            "ifft2",
            format!(
                "real {:?} and imaginary {:?} planes differ",
                spectrum.real.shape(),
                spectrum.imag.shape()
            ),
        );
    }
    let mut re = spectrum.real.to_vec();
    let mut im = spectrum.imag.to_vec();
    fft2_planes(&mut re, &mut im, h, w, Direction::Inverse);
    if mode == Residue::Strict {
        let residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residue >= RESIDUE_LIMIT {
            return Err(Error::ImaginaryResidue {
                residue,
                limit: RESIDUE_LIMIT,
            });
        }
    }
    Ok(Tensor::from_op(
        "ifft2",
        vec![n, c, h, w],
        re,
        vec![spectrum.real.clone(), spectrum.imag.clone()],
        Box::new(move |ins, _, g| {
            let mut gre = g.to_vec();
            let mut gim = vec![0.0; g.len()];
            fft2_planes(&mut gre, &mut gim, h, w, Direction::Forward);
            vec![
                ins[0].requires_grad().then_some(gre),
                ins[1].requires_grad().then_some(gim),
            ]
        }),
    ))
}

/// Phase angle with a canonical sign for exact zeros, so that real negative
/// bins always map to `+pi` regardless of the sign of a zero imaginary part.
fn angle(re: f64, im: f64) -> f64 {
    let im = if im == 0.0 { 0.0 } else { im };
    im.atan2(re)
}

/// `sqrt(R^2 + I^2)` elementwise.
pub fn amplitude(spectrum: &Spectrum) -> Result<Tensor> {
    let (re, im) = (&spectrum.real, &spectrum.imag);
    if re.shape() != im.shape() {
        return shape_err("amplitude", "real and imaginary planes differ");
    }
    let data = re.data().iter().zip(im.data().iter()).map(|(r, i)| (r * r + i * i).sqrt()).collect();
    Ok(Tensor::from_op(
        "amplitude",
        re.shape().to_vec(),
        data,
        vec![re.clone(), im.clone()],
        Box::new(|ins, _, g| {
            let (r, i) = (ins[0].data(), ins[1].data());
            let inv: Vec<f64> = r.iter().zip(i.iter()).map(|(r, i)| recip_or_zero((r * r + i * i).sqrt())).collect();
            let gr = ins[0].requires_grad().then(|| {
                g.iter().zip(r.iter()).zip(&inv).map(|((g, r), d)| g * r * d).collect()
            });
            let gi = ins[1].requires_grad().then(|| {
                g.iter().zip(i.iter()).zip(&inv).map(|((g, i), d)| g * i * d).collect()
            });
            vec![gr, gi]
        }),
    ))
}

/// Four-quadrant phase `atan2(I, R)` in `(-pi, pi]`.
pub fn phase(spectrum: &Spectrum) -> Result<Tensor> {
    let (re, im) = (&spectrum.real, &spectrum.imag);
    if re.shape() != im.shape() {
        return shape_err("phase", "real and imaginary planes differ");
    }
    let data = re.data().iter().zip(im.data().iter()).map(|(r, i)| angle(*r, *i)).collect();
    Ok(Tensor::from_op(
        "phase",
        re.shape().to_vec(),
        data,
        vec![re.clone(), im.clone()],
        Box::new(|ins, _, g| {
            let (r, i) = (ins[0].data(), ins[1].data());
            let inv: Vec<f64> = r.iter().zip(i.iter()).map(|(r, i)| recip_or_zero(r * r + i * i)).collect();
            let gr = ins[0].requires_grad().then(|| {
                g.iter().zip(i.iter()).zip(&inv).map(|((g, i), d)| -g * i * d).collect()
            });
            let gi = ins[1].requires_grad().then(|| {
                g.iter().zip(r.iter()).zip(&inv).map(|((g, r), d)| g * r * d).collect()
            });
            vec![gr, gi]
        }),
    ))
}

pub fn decompose(spectrum: &Spectrum) -> Result<AmpPhase> {
    Ok(AmpPhase {
        amplitude: amplitude(spectrum)?,
        phase: phase(spectrum)?,
    })
}

/// `R = A cos P`, `I = A sin P`. Negative amplitudes are accepted and act as
/// a phase shift of `pi`.
pub fn recompose(ap: &AmpPhase) -> Result<Spectrum> {
    let (amp, ph) = (&ap.amplitude, &ap.phase);
    if amp.shape() != ph.shape() {
        return shape_err(
            "recompose",
            format!("amplitude {:?} and phase {:?} differ", amp.shape(), ph.shape()),
        );
    }
    let (sin, cos): (Vec<f64>, Vec<f64>) = ph.data().iter().map(|p| p.sin_cos()).unzip();
    let trig = Arc::new([cos, sin]);
    let polar = |name: &'static str, imaginary: bool| -> Tensor {
        let (along, across) = (usize::from(imaginary), usize::from(!imaginary));
        let data = amp.data().iter().zip(&trig[along]).map(|(a, t)| a * t).collect();
        // d(A cos P)/dP = -A sin P, d(A sin P)/dP = A cos P
        let sign = if imaginary { 1.0 } else { -1.0 };
        let trig = Arc::clone(&trig);
        Tensor::from_op(
            name,
            amp.shape().to_vec(),
            data,
            vec![amp.clone(), ph.clone()],
            Box::new(move |ins, _, g| {
                let ga = ins[0]
                    .requires_grad()
                    .then(|| g.iter().zip(&trig[along]).map(|(g, t)| g * t).collect());
                let gp = ins[1].requires_grad().then(|| {
                    let a = ins[0].data();
                    g.iter()
                        .zip(a.iter().zip(&trig[across]))
                        .map(|(g, (a, t))| sign * g * a * t)
                        .collect()
                });
                vec![ga, gp]
            }),
        )
    };
    Ok(Spectrum {
        real: polar("polar_real", false),
        imag: polar("polar_imag", true),
    })
}

/// Image whose spectrum has `source_amp` as amplitude and `target_phase` as
/// phase: `ifft2(recompose(source_amp, target_phase))`.
pub fn swap_amplitude(source_amp: &Tensor, target_phase: &Tensor) -> Result<Tensor> {
    swap_amplitude_with(source_amp, target_phase, Residue::Discard)
}

pub fn swap_amplitude_with(source_amp: &Tensor, target_phase: &Tensor, mode: Residue) -> Result<Tensor> {
    if source_amp.shape() != target_phase.shape() {
        return shape_err(
            "swap_amplitude",
            format!(
                "amplitude {:?} and phase {:?} differ",
                source_amp.shape(),
                target_phase.shape()
            ),
        );
    }
    let spectrum = recompose(&AmpPhase {
        amplitude: source_amp.clone(),
        phase: target_phase.clone(),
    })?;
    ifft2_with(&spectrum, mode)
}

/// Amplitude of the spectrum of a real image.
pub fn image_amplitude(image: &Tensor) -> Result<Tensor> {
    amplitude(&fft2(image)?)
}

/// Phase of the spectrum of a real image.
pub fn image_phase(image: &Tensor) -> Result<Tensor> {
    phase(&fft2(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spec(re: Vec<f64>, im: Vec<f64>) -> Spectrum {
        let n = re.len();
        Spectrum {
            real: Tensor::parameter(&[1, 1, 1, n], re).unwrap(),
            imag: Tensor::parameter(&[1, 1, 1, n], im).unwrap(),
        }
    }

    #[test]
    fn constant_image_has_only_dc() {
        let s = fft2(&Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let re = s.real.to_vec();
        assert!((re[0] - 4.0).abs() < 1e-12);
        assert!(re[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(s.imag.to_vec().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut d = vec![0.0; 16];
        d[0] = 1.0;
        let s = fft2(&Tensor::new(&[1, 1, 4, 4], d).unwrap()).unwrap();
        assert!(s.real.to_vec().iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!(s.imag.to_vec().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let mut re = vec![0.0; 16];
        re[0] = 4.0;
        let s = Spectrum {
            real: Tensor::new(&[1, 1, 4, 4], re).unwrap(),
            imag: Tensor::zeros(&[1, 1, 4, 4]),
        };
        let x = ifft2(&s).unwrap();
        assert!(x.to_vec().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn strict_inverse_rejects_non_hermitian() {
        let mut im = vec![0.0; 16];
        im[1] = 1.0;
        let s = Spectrum {
            real: Tensor::zeros(&[1, 1, 4, 4]),
            imag: Tensor::new(&[1, 1, 4, 4], im).unwrap(),
        };
        assert!(matches!(ifft2(&s), Err(Error::ImaginaryResidue { .. })));
        assert!(ifft2_with(&s, Residue::Discard).is_ok());
    }

    #[test]
    fn three_four_five() {
        let ap = decompose(&spec(vec![3.0], vec![4.0])).unwrap();
        assert!((ap.amplitude.item() - 5.0).abs() < 1e-12);
        assert!((ap.phase.item() - 4f64.atan2(3.0)).abs() < 1e-12);
        assert!((ap.phase.item() - 0.9273).abs() < 1e-4);
    }

    #[test]
    fn negative_real_axis_is_pi() {
        let ap = decompose(&spec(vec![-1.0, -1.0], vec![0.0, -0.0])).unwrap();
        assert_eq!(ap.phase.to_vec(), vec![PI, PI]);
        assert_eq!(ap.amplitude.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn amplitude_gradient_at_three_four() {
        let s = spec(vec![3.0], vec![4.0]);
        amplitude(&s).unwrap().sum().backward().unwrap();
        assert!((s.real.grad().unwrap()[0] - 0.6).abs() < 1e-9);
        assert!((s.imag.grad().unwrap()[0] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn recompose_values() {
        let ap = AmpPhase {
            amplitude: Tensor::new(&[1, 1, 1, 2], vec![5.0, 0.0]).unwrap(),
            phase: Tensor::new(&[1, 1, 1, 2], vec![PI / 2.0, 1.234]).unwrap(),
        };
        let s = recompose(&ap).unwrap();
        let (re, im) = (s.real.to_vec(), s.imag.to_vec());
        assert!(re[0].abs() < 1e-12);
        assert!((im[0] - 5.0).abs() < 1e-12);
        assert_eq!((re[1], im[1]), (0.0, 0.0));
    }

    #[test]
    fn swap_shape_mismatch() {
        let a = Tensor::zeros(&[1, 1, 4, 4]);
        let p = Tensor::zeros(&[1, 1, 4, 2]);
        assert!(swap_amplitude(&a, &p).is_err());
    }

    #[test]
    fn round_trip_gradient_is_ones() {
        let x = Tensor::parameter(&[1, 2, 4, 6], (0..48).map(|i| (i as f64).sin()).collect()).unwrap();
        let y = ifft2(&fft2(&x).unwrap()).unwrap();
        y.sum().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|g| (g - 1.0).abs() < 1e-12));
    }
}
