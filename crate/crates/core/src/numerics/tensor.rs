use crate::error::{Error, Result};

/// Dense row-major `f64` array with a gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                shapes: format!("shape {shape:?} vs {} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        let grad = vec![0.0; values.len()];
        Ok(Self {
            shape,
            values,
            grad,
            requires_grad,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n], requires_grad).expect("positive dims")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v], false).expect("finite scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ParamTensor::new(vec![2, 2], vec![0.0; 3], false).is_err());
        assert!(ParamTensor::new(vec![0], vec![], false).is_err());
        assert!(ParamTensor::new(vec![1], vec![f64::NAN], false).is_err());
        let t = ParamTensor::new(vec![2, 3], vec![1.0; 6], true).unwrap();
        assert_eq!(t.grad.len(), 6);
    }
}
