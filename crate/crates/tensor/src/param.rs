use std::cell::RefCell;

use crate::error::Result;
use crate::tensor::Tensor;

/// A trainable leaf. Optimizers swap the underlying tensor; every forward pass
/// picks up the current value through [`Param::get`].
#[derive(Debug)]
pub struct Param {
    value: RefCell<Tensor>,
}

impl Param {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            value: RefCell::new(Tensor::variable(data, shape)?),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            value: RefCell::new(Tensor::zeros(shape).requires_grad_(true)),
        }
    }

    pub fn get(&self) -> Tensor {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    pub fn data(&self) -> Vec<f64> {
        self.value.borrow().to_vec()
    }

    /// Replaces the value; the gradient slot starts empty.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let shape = self.shape();
        *self.value.borrow_mut() = Tensor::variable(data, &shape)?;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.value.borrow().zero_grad();
    }
}

impl Clone for Param {
    /// Deep copy: the clone owns an independent leaf.
    fn clone(&self) -> Self {
        Self {
            value: RefCell::new(self.get().requires_grad_(true)),
        }
    }
}
