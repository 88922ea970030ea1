use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "tensor data length does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} into {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * *b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select the `i`-th slice along the leading axis.
    pub fn index0(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(self.shape[1..].to_vec(), self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}

/// Source taps of output index `i` for bilinear 2x upsampling of length `n`.
fn bilinear_taps(i: usize, n: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

fn bilinear2_plane(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    for y in 0..2 * h {
        let (y0, y1, fy) = bilinear_taps(y, h);
        for x in 0..2 * w {
            let (x0, x1, fx) = bilinear_taps(x, w);
            let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
            let bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
            dst[y * 2 * w + x] = top + fy * (bot - top);
        }
    }
}

/// Transpose of the bilinear plane map: accumulates `g` (2h x 2w) into `dst` (h x w).
pub(crate) fn bilinear2_adjoint(g: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    for y in 0..2 * h {
        let (y0, y1, fy) = bilinear_taps(y, h);
        for x in 0..2 * w {
            let (x0, x1, fx) = bilinear_taps(x, w);
            let v = g[y * 2 * w + x];
            dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
            dst[y0 * w + x1] += v * (1.0 - fy) * fx;
            dst[y1 * w + x0] += v * fy * (1.0 - fx);
            dst[y1 * w + x1] += v * fy * fx;
        }
    }
}

/// Bilinear 2x upsampling of the last two axes (half-pixel centres, edges
/// clamped). Leading axes are independent planes.
pub fn upsample_bilinear2(t: &Tensor) -> Tensor {
    let s = t.shape();
    assert!(s.len() >= 2, "upsample needs at least two axes");
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = vec![0.0; t.len() * 4];
    if h * w > 0 {
        for (plane, dst) in t.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            bilinear2_plane(plane, h, w, dst);
        }
    }
    let mut shape = s.to_vec();
    let k = shape.len();
    shape[k - 2] *= 2;
    shape[k - 1] *= 2;
    Tensor::new(shape, out)
}
