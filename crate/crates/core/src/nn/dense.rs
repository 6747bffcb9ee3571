use super::{dot, NnError, Scalar, Tensor};

/// Affine layer `y = W x + b` with `W` laid out `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }
}

fn check<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize), NnError> {
    let (rows, cols) = match *weights.shape() {
        [r, c] => (r, c),
        ref s => return Err(NnError::ShapeMismatch(format!("dense weights must be 2-D, got {s:?}"))),
    };
    if input.len() != cols {
        return Err(NnError::ShapeMismatch(format!(
            "dense input has {} elements, weights expect {cols}",
            input.len()
        )));
    }
    if bias.len() != rows {
        return Err(NnError::ShapeMismatch(format!(
            "dense bias has {} entries, weights have {rows} rows",
            bias.len()
        )));
    }
    Ok((rows, cols))
}

/// Any input shape is accepted and read as a flat vector.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (rows, cols) = check(input, weights, bias)?;
    input.ensure_finite("dense input")?;
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(cols)
        .zip(bias.data())
        .map(|(row, &b)| b + dot(row, x))
        .collect();
    Tensor::from_vec(&[rows], out)
}

pub fn dense_grad<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    params: &DenseParams<T>,
) -> Result<DenseGrads<T>, NnError> {
    let (rows, cols) = check(input, &params.weights, &params.bias)?;
    if upstream.len() != rows {
        return Err(NnError::ShapeMismatch(format!(
            "dense upstream has {} elements, layer has {rows} outputs",
            upstream.len()
        )));
    }
    let g = upstream.data();
    let x = input.data();
    let mut grad_in = vec![T::zero(); cols];
    let mut grad_w = vec![T::zero(); rows * cols];
    for ((row, grow), &gi) in params
        .weights
        .data()
        .chunks_exact(cols)
        .zip(grad_w.chunks_exact_mut(cols))
        .zip(g)
    {
        for ((dst, &w), (gw, &v)) in grad_in.iter_mut().zip(row).zip(grow.iter_mut().zip(x)) {
            *dst += w * gi;
            *gw = gi * v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weights: Tensor::from_vec(&[rows, cols], grad_w)?,
        bias: Tensor::from_vec(&[rows], g.to_vec())?,
    })
}

/// Adds the weight and bias partials into `grad_weights` / `grad_bias`
/// and returns `Wᵀ upstream` when `need_input` is set.
pub(crate) fn dense_backward_accumulate<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    params: &DenseParams<T>,
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input: bool,
) -> Result<Option<Tensor<T>>, NnError> {
    let (rows, cols) = check(input, &params.weights, &params.bias)?;
    if upstream.len() != rows || grad_weights.shape() != params.weights.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "dense backward: upstream {:?}, weights {:?}",
            upstream.shape(),
            params.weights.shape()
        )));
    }
    let x = input.data();
    for ((grow, gb), &gi) in grad_weights
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(grad_bias.data_mut().iter_mut())
        .zip(upstream.data())
    {
        *gb += gi;
        if gi == T::zero() {
            continue;
        }
        for (gw, &v) in grow.iter_mut().zip(x) {
            *gw += gi * v;
        }
    }
    if !need_input {
        return Ok(None);
    }
    let mut grad_in = vec![T::zero(); cols];
    for (row, &gi) in params.weights.data().chunks_exact(cols).zip(upstream.data()) {
        if gi == T::zero() {
            continue;
        }
        for (dst, &w) in grad_in.iter_mut().zip(row) {
            *dst += w * gi;
        }
    }
    Ok(Some(Tensor::from_vec(input.shape(), grad_in)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = dense(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_return_bias() {
        let x = Tensor::<f64>::from_vec(&[2], vec![4.0, 5.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = dense(&x, &Tensor::zeros(&[3, 2]), &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn mismatched_inner_extent() {
        let x = Tensor::<f64>::zeros(&[4]);
        assert!(dense(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
        assert!(dense(
            &Tensor::<f64>::zeros(&[2]),
            &Tensor::zeros(&[3, 2]),
            &Tensor::zeros(&[2])
        )
        .is_err());
    }
}
