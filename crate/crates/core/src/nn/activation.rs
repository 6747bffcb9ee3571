use super::{NnError, Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    input.ensure_finite("relu input")?;
    Ok(input.map(|v| v.max(T::zero())))
}

/// Upstream masked by the sign of the forward input (derivative 0 at 0).
pub fn relu_grad<T: Scalar>(upstream: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if upstream.shape() != input.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "relu_grad upstream {:?} vs input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let data = upstream
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Softmax over the last axis; a 1-D tensor is one sample, an `(N, K)`
/// tensor is N samples.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    input.ensure_finite("softmax input")?;
    let k = *input
        .shape()
        .last()
        .ok_or_else(|| NnError::ShapeMismatch("softmax of a scalar".into()))?;
    if k == 0 {
        return Err(NnError::ShapeMismatch("softmax over zero classes".into()));
    }
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `s`:
/// `s ⊙ (g − ⟨g, s⟩)` per row.
pub fn softmax_grad<T: Scalar>(upstream: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if upstream.shape() != output.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "softmax_grad upstream {:?} vs output {:?}",
            upstream.shape(),
            output.shape()
        )));
    }
    let k = *output.shape().last().unwrap_or(&1);
    let mut grad = Vec::with_capacity(output.len());
    for (g, s) in upstream.data().chunks_exact(k).zip(output.data().chunks_exact(k)) {
        let inner: T = g.iter().zip(s).map(|(&a, &b)| a * b).sum();
        grad.extend(g.iter().zip(s).map(|(&gi, &si)| si * (gi - inner)));
    }
    Tensor::from_vec(output.shape(), grad)
}
