//! Dense 5D activation tensors and parameter tensors.
//!
//! Activations are `[N, C, T, H, W]` in one flat `f64` buffer; all neural
//! network math runs in f64 so analytic gradients can be checked against
//! central finite differences at tight tolerance.

/// A flat `[N, C, T, H, W]` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data does not match shape"
        );
        Tensor { shape, data }
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat offset of `[n, c, t, 0, 0]`; rows along W are contiguous.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, t: usize, h: usize) -> usize {
        let [_, cs, ts, hs, ws] = self.shape;
        (((n * cs + c) * ts + t) * hs + h) * ws
    }

    /// Per-sample spatial size T·H·W.
    #[inline]
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }
}

/// A learnable parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct PTensor {
    pub shape: Vec<usize>,
    pub val: Vec<f64>,
    pub grad: Vec<f64>,
}

impl PTensor {
    pub fn new(shape: Vec<usize>, init: impl FnMut() -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut init = init;
        let val: Vec<f64> = (0..n).map(|_| init()).collect();
        PTensor {
            shape,
            grad: vec![0.0; n],
            val,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::new(shape, || 0.0)
    }

    pub fn len(&self) -> usize {
        self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.val.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Elementwise ReLU.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// ReLU backward given the *output* `y = relu(x)`: zeroes gradient where the
/// unit was inactive. (`y > 0  ⇔  x > 0`, and the gradient at exactly 0 is 0.)
pub fn relu_backward_inplace(y: &Tensor, gy: &mut Tensor) {
    debug_assert_eq!(y.shape, gy.shape);
    for (g, &v) in gy.data.iter_mut().zip(y.data.iter()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `a += b`, elementwise.
pub fn add_inplace(a: &mut Tensor, b: &Tensor) {
    debug_assert_eq!(a.shape, b.shape);
    for (x, &y) in a.data.iter_mut().zip(b.data.iter()) {
        *x += y;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
