use autograd::Tensor;

use crate::error::{Error, Result};

/// Latent array of shape (channels, height, width) produced by a codec with
/// spatial downsampling factor `scale_factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    values: Tensor,
    scale_factor: usize,
}

impl LatentTensor {
    pub fn new(values: Tensor, scale_factor: usize) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Shape(format!("latent must be (c, h, w), got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite { step: 0, detail: "latent contains non-finite values".into() });
        }
        Ok(Self { values, scale_factor })
    }

    pub fn zeros(c: usize, h: usize, w: usize, scale_factor: usize) -> Self {
        Self { values: Tensor::zeros(&[c, h, w]), scale_factor }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn scale_factor(&self) -> usize {
        self.scale_factor
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.values.max_abs_diff(&other.values)
    }

    /// Stack latents of equal shape into an (N, c, h, w) batch.
    pub fn batch(items: &[LatentTensor]) -> Result<Tensor> {
        if let Some(first) = items.first() {
            if items.iter().any(|l| l.dims() != first.dims()) {
                return Err(Error::Shape("latents in a batch must share a shape".into()));
            }
        }
        let ts: Vec<Tensor> = items.iter().map(|l| l.values.clone()).collect();
        Ok(Tensor::stack(&ts))
    }

    /// Split an (N, c, h, w) batch.
    pub fn unbatch(t: &Tensor, scale_factor: usize) -> Result<Vec<LatentTensor>> {
        (0..t.shape()[0]).map(|i| LatentTensor::new(t.index0(i), scale_factor)).collect()
    }
}
