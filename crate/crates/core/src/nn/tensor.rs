use crate::error::{Error, Result};

/// Dense `(batch, channels, height, width)` tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains a non-finite value"));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Internal constructor for layer outputs whose length is known to match.
    pub(crate) fn from_parts(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Values per sample, `c * h * w`.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Stacks per-sample buffers of equal shape `(c, h, w)`.
    pub fn stack(samples: &[&[f64]], chw: [usize; 3]) -> Result<Self> {
        let len = chw[0] * chw[1] * chw[2];
        let mut data = Vec::with_capacity(samples.len() * len);
        for s in samples {
            if s.len() != len {
                return Err(Error::shape(format!(
                    "sample of {} values, expected {len}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        Tensor4::new([samples.len(), chw[0], chw[1], chw[2]], data)
    }
}
