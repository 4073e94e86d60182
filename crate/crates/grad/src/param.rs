use crate::error::{GradError, Result};
use crate::tensor::Tensor;

/// Named trainable array that outlives any single computation graph.
///
/// Each forward pass binds parameters to fresh leaf tensors; gradients are read
/// back from those leaves after [`Tensor::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(GradError::Contract(format!(
                "parameter `{name}`: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Gradient-tracking leaf holding a copy of the values.
    pub fn leaf(&self) -> Tensor {
        Tensor::raw(self.data.clone(), self.shape.clone(), true, None)
    }

    /// Non-tracking copy, for inference.
    pub fn constant(&self) -> Tensor {
        Tensor::raw(self.data.clone(), self.shape.clone(), false, None)
    }
}
