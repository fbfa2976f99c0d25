//! 1-D and 2-D complex FFT kernels.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform;
//! every other length goes through Bluestein's chirp-z algorithm on top of a
//! power-of-two transform. Plans are built once per length and shared.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

enum Kind {
    Radix2 {
        twiddles: Vec<Complex64>,
        bitrev: Vec<usize>,
    },
    Bluestein {
        chirp: Vec<Complex64>,
        kernel_spectrum: Vec<Complex64>,
        inner: Arc<Plan>,
    },
}

/// Unnormalized forward DFT of one fixed length.
pub struct Plan {
    len: usize,
    kind: Kind,
}

impl Plan {
    fn new(len: usize) -> Plan {
        assert!(len > 0);
        if len.is_power_of_two() {
            let bits = len.trailing_zeros();
            let bitrev = (0..len)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect();
            let twiddles = (0..len / 2)
                .map(|j| Complex64::from_polar(1.0, -2.0 * PI * j as f64 / len as f64))
                .collect();
            Plan {
                len,
                kind: Kind::Radix2 { twiddles, bitrev },
            }
        } else {
            let m = (2 * len - 1).next_power_of_two();
            // exp(-i*pi*k^2/n); k^2 is reduced mod 2n to keep the angle small
            let chirp: Vec<Complex64> = (0..len)
                .map(|k| {
                    let k2 = (k * k) % (2 * len);
                    Complex64::from_polar(1.0, -PI * k2 as f64 / len as f64)
                })
                .collect();
            let mut kernel = vec![Complex64::new(0.0, 0.0); m];
            kernel[0] = chirp[0].conj();
            for k in 1..len {
                kernel[k] = chirp[k].conj();
                kernel[m - k] = chirp[k].conj();
            }
            let inner = plan(m);
            inner.forward(&mut kernel);
            Plan {
                len,
                kind: Kind::Bluestein {
                    chirp,
                    kernel_spectrum: kernel,
                    inner,
                },
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// In-place unnormalized forward transform: `X[k] = sum x[n] e^{-2 pi i k n / N}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len);
        match &self.kind {
            Kind::Radix2 { twiddles, bitrev } => {
                for (i, &j) in bitrev.iter().enumerate() {
                    if i < j {
                        buf.swap(i, j);
                    }
                }
                let n = self.len;
                let mut size = 2;
                while size <= n {
                    let half = size / 2;
                    let step = n / size;
                    for start in (0..n).step_by(size) {
                        for j in 0..half {
                            let t = buf[start + j + half] * twiddles[j * step];
                            let u = buf[start + j];
                            buf[start + j] = u + t;
                            buf[start + j + half] = u - t;
                        }
                    }
                    size *= 2;
                }
            }
            Kind::Bluestein {
                chirp,
                kernel_spectrum,
                inner,
            } => {
                let m = inner.len();
                let mut a = vec![Complex64::new(0.0, 0.0); m];
                for ((a, x), c) in a.iter_mut().zip(buf.iter()).zip(chirp) {
                    *a = x * c;
                }
                inner.forward(&mut a);
                for (a, k) in a.iter_mut().zip(kernel_spectrum) {
                    *a *= k;
                }
                inner.inverse_unnormalized(&mut a);
                let scale = 1.0 / m as f64;
                for ((x, a), c) in buf.iter_mut().zip(&a).zip(chirp) {
                    *x = a * c * scale;
                }
            }
        }
    }

    /// In-place unnormalized inverse transform (positive exponent).
    pub fn inverse_unnormalized(&self, buf: &mut [Complex64]) {
        buf.iter_mut().for_each(|v| *v = v.conj());
        self.forward(buf);
        buf.iter_mut().for_each(|v| *v = v.conj());
    }
}

/// Shared plan for a transform length.
pub fn plan(len: usize) -> Arc<Plan> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Plan>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("fft plan cache poisoned").get(&len) {
        return p.clone();
    }
    // Built outside the lock: Bluestein plans request their inner plan.
    let built = Arc::new(Plan::new(len));
    cache
        .lock()
        .expect("fft plan cache poisoned")
        .entry(len)
        .or_insert(built)
        .clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Orthonormal 2-D DFT of each `h x w` plane of split real/imaginary buffers,
/// in place. Both directions are scaled by `1/sqrt(h*w)`.
pub fn fft2_planes(re: &mut [f64], im: &mut [f64], h: usize, w: usize, dir: Direction) {
    assert_eq!(re.len(), im.len());
    assert_eq!(re.len() % (h * w), 0);
    let row_plan = plan(w);
    let col_plan = plan(h);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let run = |p: &Plan, buf: &mut [Complex64]| match dir {
        Direction::Forward => p.forward(buf),
        Direction::Inverse => p.inverse_unnormalized(buf),
    };
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                row[x] = Complex64::new(pr[y * w + x], pi[y * w + x]);
            }
            run(&row_plan, &mut row);
            for x in 0..w {
                pr[y * w + x] = row[x].re;
                pi[y * w + x] = row[x].im;
            }
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = Complex64::new(pr[y * w + x], pi[y * w + x]);
            }
            run(&col_plan, &mut col);
            for y in 0..h {
                pr[y * w + x] = col[y].re * scale;
                pi[y * w + x] = col[y].im * scale;
            }
        }
    }
}
