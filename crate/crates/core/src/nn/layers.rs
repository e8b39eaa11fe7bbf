use crate::autodiff::{Tensor, Var};
use crate::scalar::Scalar;

use super::{Bound, NnError, ParamKind, ParamSet};

/// Fully connected layer `x·W + b` on `[batch, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self, NnError> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        params.insert(&weight, Tensor::zeros(&[in_dim, out_dim]), ParamKind::Weight)?;
        params.insert(&bias, Tensor::zeros(&[out_dim]), ParamKind::Bias)?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>, NnError> {
        Ok(x.matmul(p.var(&self.weight)?)?.add(p.var(&self.bias)?)?)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }
}

/// Square-kernel cross-correlation with per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, NnError> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        params.insert(&weight, Tensor::zeros(&[out_c, in_c, kernel, kernel]), ParamKind::Weight)?;
        params.insert(&bias, Tensor::zeros(&[out_c]), ParamKind::Bias)?;
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>, NnError> {
        let y = x.conv2d(p.var(&self.weight)?, self.stride, self.padding)?;
        Ok(y.channel_bias(p.var(&self.bias)?)?)
    }
}

/// Square-kernel transposed convolution with per-channel bias.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: String,
    bias: String,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, NnError> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        params.insert(&weight, Tensor::zeros(&[in_c, out_c, kernel, kernel]), ParamKind::Weight)?;
        params.insert(&bias, Tensor::zeros(&[out_c]), ParamKind::Bias)?;
        Ok(ConvTranspose2d { weight, bias, stride, padding })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>, NnError> {
        let y = x.conv_transpose2d(p.var(&self.weight)?, self.stride, self.padding)?;
        Ok(y.channel_bias(p.var(&self.bias)?)?)
    }
}

/// Trainable `classes × width` lookup table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    table: String,
    pub classes: usize,
    pub width: usize,
}

impl EmbeddingTable {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, classes: usize, width: usize) -> Result<Self, NnError> {
        let table = format!("{name}.table");
        params.insert(&table, Tensor::zeros(&[classes, width]), ParamKind::Weight)?;
        Ok(EmbeddingTable { table, classes, width })
    }

    pub fn table_name(&self) -> &str {
        &self.table
    }

    /// The whole table as a `[classes, width]` var.
    pub fn table<'g, T: Scalar>(&self, p: &Bound<'g, T>) -> Result<Var<'g, T>, NnError> {
        p.var(&self.table)
    }

    /// Rows for a batch of class indices, `[batch, width]`.
    pub fn lookup_batch<'g, T: Scalar>(&self, p: &Bound<'g, T>, classes: &[usize]) -> Result<Var<'g, T>, NnError> {
        if let Some(&bad) = classes.iter().find(|&&i| i >= self.classes) {
            return Err(NnError::ClassOutOfRange {
                class: bad,
                classes: self.classes,
            });
        }
        Ok(p.var(&self.table)?.gather_rows(classes)?)
    }

    /// Row `class` as a `[width]` vector; backward touches only that row.
    pub fn lookup<'g, T: Scalar>(&self, p: &Bound<'g, T>, class: usize) -> Result<Var<'g, T>, NnError> {
        Ok(self.lookup_batch(p, &[class])?.reshape(&[self.width])?)
    }
}
