//! Named trainable/frozen parameters.

use super::{SeededRng, Tensor};

/// A model parameter: value plus gradient accumulator. Frozen parameters
/// (`trainable == false`) are never bound to the tape as leaves, so they
/// structurally cannot receive updates.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    /// Weight matrix initialized uniform(-1/√d_in, +1/√d_in).
    pub fn init_weight(name: impl Into<String>, d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let value = rng.uniform_tensor(vec![d_in, d_out], -bound, bound);
        Param::new(name, value, true)
    }

    /// Bias / shift vector initialized to zeros.
    pub fn init_zeros(name: impl Into<String>, shape: Vec<usize>, rng: &mut SeededRng) -> Self {
        let _ = rng; // kept in the signature so initializer call sites stay uniform
        Param::new(name, Tensor::zeros(shape), true)
    }

    pub fn init_ones(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Param::new(name, Tensor::filled(shape, 1.0), true)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_init_is_bounded_and_seeded() {
        let mut r1 = SeededRng::new(5);
        let mut r2 = SeededRng::new(5);
        let a = Param::init_weight("w", 16, 8, &mut r1);
        let b = Param::init_weight("w", 16, 8, &mut r2);
        assert!(a.value.bits_eq(&b.value));
        let bound = 1.0 / 4.0;
        assert!(a.value.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.grad.shape(), a.value.shape());
    }
}
