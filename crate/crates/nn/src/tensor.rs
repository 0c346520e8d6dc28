use rand::Rng;
use rand_distr::StandardNormal;

/// Dense 4-D `f32` tensor in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    /// Panics when `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(self.len(), shape.iter().product::<usize>());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape, data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Batch item `n` as a `[1, C, H, W]` tensor.
    pub fn item(&self, n: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor::from_vec(
            [1, self.shape[1], self.shape[2], self.shape[3]],
            self.data[n * per..(n + 1) * per].to_vec(),
        )
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            assert_eq!([t.c(), t.h(), t.w()], [c, h, w], "stack: inconsistent item shapes");
            data.extend_from_slice(&t.data);
            n += t.n();
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
