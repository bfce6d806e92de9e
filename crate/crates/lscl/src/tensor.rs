//! Dense float64 tensors in row-major order plus the deterministic RNG
//! used everywhere in the crate.

use crate::error::{LsclError, Result};

/// Dense n-dimensional float64 array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Errors if any entry is not finite. `context` names the producing operation.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LsclError::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(LsclError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / self.len() as f64).sqrt()
    }

    /// Rotate the trailing h x w axes counter-clockwise by `k` quarter turns.
    pub fn rot90(&self, k: usize) -> Tensor {
        let rank = self.shape.len();
        assert!(rank >= 2, "rot90 needs at least 2 axes");
        let h = self.shape[rank - 2];
        let w = self.shape[rank - 1];
        let planes: usize = self.shape[..rank - 2].iter().product();
        let k = k % 4;
        let (nh, nw) = if k % 2 == 0 { (h, w) } else { (w, h) };
        let mut shape = self.shape.clone();
        shape[rank - 2] = nh;
        shape[rank - 1] = nw;
        let mut data = vec![0.0; self.len()];
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * nh * nw..(p + 1) * nh * nw];
            for r in 0..h {
                for c in 0..w {
                    let (nr, nc) = match k {
                        0 => (r, c),
                        1 => (w - 1 - c, r),
                        2 => (h - 1 - r, w - 1 - c),
                        _ => (c, h - 1 - r),
                    };
                    dst[nr * nw + nc] = src[r * w + c];
                }
            }
        }
        Tensor { shape, data }
    }
}

/// Splitmix64 PRNG with Box-Muller gaussians. Same seed gives a
/// bit-identical draw sequence on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    cached_gauss: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            cached_gauss: None,
        }
    }

    /// Derive an independent child stream; used for per-sample generation.
    pub fn child(&self, index: u64) -> Rng {
        let mut mix = Rng::new(self.state.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        mix.next_u64();
        mix.cached_gauss = None;
        mix
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [lo, hi).
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(hi > lo);
        lo + (self.next_u64() % (hi - lo) as u64) as i64
    }

    /// Standard normal via Box-Muller; caches the second draw.
    pub fn gauss(&mut self) -> f64 {
        if let Some(g) = self.cached_gauss.take() {
            return g;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Beta(a, a) via Johnk's algorithm; used for mixup lambdas.
    pub fn beta_symmetric(&mut self, a: f64) -> f64 {
        loop {
            let x = self.uniform().powf(1.0 / a);
            let y = self.uniform().powf(1.0 / a);
            if x + y <= 1.0 && x + y > 0.0 {
                return x / (x + y);
            }
        }
    }
}
