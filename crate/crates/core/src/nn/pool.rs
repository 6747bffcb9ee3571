use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
}

/// What a pooling call needs to remember so the matching unpooling can
/// invert its geometry. `argmax` holds flat offsets into the pre-pool
/// tensor and is present only for max pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolRecord {
    pub mode: PoolMode,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub input_shape: [usize; 3],
    pub argmax: Option<Vec<usize>>,
}

impl PoolRecord {
    pub fn output_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.input_shape;
        [c, h / self.window.0, w / self.window.1]
    }
}

fn check_geometry(shape: &[usize], window: (usize, usize), stride: (usize, usize)) -> Result<[usize; 3], NnError> {
    let [c, h, w] = match *shape {
        [c, h, w] => [c, h, w],
        ref s => {
            return Err(NnError::ShapeMismatch(format!(
                "pool input must be (channels, height, width), got {s:?}"
            )))
        }
    };
    if window.0 == 0 || window.1 == 0 {
        return Err(NnError::InvalidConfig("pool window must be positive".into()));
    }
    // Only non-overlapping tilings are supported: unpooling by copy is
    // ill-defined when windows overlap.
    if stride != window {
        return Err(NnError::InvalidConfig(format!(
            "pool stride {stride:?} must equal window {window:?}"
        )));
    }
    if h % window.0 != 0 || w % window.1 != 0 {
        return Err(NnError::InvalidConfig(format!(
            "pool window {window:?} does not tile input {h}x{w}"
        )));
    }
    Ok([c, h, w])
}

pub fn pool2d<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, PoolRecord), NnError> {
    let [c, h, w] = check_geometry(input.shape(), window, stride)?;
    let (wh, ww) = window;
    let (oh, ow) = (h / wh, w / ww);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::new();
    let area = T::from_f64c((wh * ww) as f64);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best_off = ch * h * w + y * wh * w + xo * ww;
                let mut best = x[best_off];
                let mut sum = T::zero();
                for i in 0..wh {
                    for j in 0..ww {
                        let off = ch * h * w + (y * wh + i) * w + xo * ww + j;
                        let v = x[off];
                        sum += v;
                        if v > best {
                            best = v;
                            best_off = off;
                        }
                    }
                }
                match mode {
                    PoolMode::Max => {
                        out.push(best);
                        argmax.push(best_off);
                    }
                    PoolMode::Average => out.push(sum / area),
                }
            }
        }
    }
    let record = PoolRecord {
        mode,
        window,
        stride,
        input_shape: [c, h, w],
        argmax: (mode == PoolMode::Max).then_some(argmax),
    };
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, record))
}

fn check_record<T: Scalar>(pooled: &Tensor<T>, record: &PoolRecord) -> Result<(), NnError> {
    check_geometry(&record.input_shape, record.window, record.stride)?;
    if pooled.shape() != record.output_shape() {
        return Err(NnError::ShapeMismatch(format!(
            "pool record expects pooled shape {:?}, got {:?}",
            record.output_shape(),
            pooled.shape()
        )));
    }
    match (record.mode, &record.argmax) {
        (PoolMode::Max, Some(idx)) => {
            let limit: usize = record.input_shape.iter().product();
            if idx.len() != pooled.len() || idx.iter().any(|&i| i >= limit) {
                return Err(NnError::ShapeMismatch("stale max-pool record".into()));
            }
        }
        (PoolMode::Max, None) => return Err(NnError::ShapeMismatch("max-pool record without indices".into())),
        (PoolMode::Average, _) => {}
    }
    Ok(())
}

/// Max mode restores each value at its recorded position with zeros
/// elsewhere; average mode copies each value over its whole window.
pub fn unpool2d<T: Scalar>(input: &Tensor<T>, record: &PoolRecord) -> Result<Tensor<T>, NnError> {
    check_record(input, record)?;
    let mut out = Tensor::zeros(&record.input_shape);
    match record.mode {
        PoolMode::Max => {
            let idx = record.argmax.as_ref().expect("checked");
            let dst = out.data_mut();
            for (&i, &v) in idx.iter().zip(input.data()) {
                dst[i] = v;
            }
        }
        PoolMode::Average => spread(input.data(), record, T::one(), out.data_mut()),
    }
    Ok(out)
}

/// Gradient of [`pool2d`] with respect to its input.
pub fn pool2d_grad<T: Scalar>(upstream: &Tensor<T>, record: &PoolRecord) -> Result<Tensor<T>, NnError> {
    check_record(upstream, record)?;
    let mut out = Tensor::zeros(&record.input_shape);
    match record.mode {
        PoolMode::Max => {
            let idx = record.argmax.as_ref().expect("checked");
            let dst = out.data_mut();
            for (&i, &g) in idx.iter().zip(upstream.data()) {
                dst[i] += g;
            }
        }
        PoolMode::Average => {
            let area = T::from_f64c((record.window.0 * record.window.1) as f64);
            spread(upstream.data(), record, T::one() / area, out.data_mut());
        }
    }
    Ok(out)
}

/// Gradient of [`unpool2d`] with respect to its (pooled-shape) input.
pub fn unpool2d_grad<T: Scalar>(upstream: &Tensor<T>, record: &PoolRecord) -> Result<Tensor<T>, NnError> {
    if upstream.shape() != record.input_shape {
        return Err(NnError::ShapeMismatch(format!(
            "unpool upstream {:?}, expected {:?}",
            upstream.shape(),
            record.input_shape
        )));
    }
    let out_shape = record.output_shape();
    let probe = Tensor::<T>::zeros(&out_shape);
    check_record(&probe, record)?;
    let g = upstream.data();
    let data = match record.mode {
        PoolMode::Max => record.argmax.as_ref().expect("checked").iter().map(|&i| g[i]).collect(),
        PoolMode::Average => {
            let [c, h, w] = record.input_shape;
            let (wh, ww) = record.window;
            let (oh, ow) = (h / wh, w / ww);
            let mut acc = vec![T::zero(); c * oh * ow];
            for ch in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        acc[ch * oh * ow + (yi / wh) * ow + xi / ww] += g[ch * h * w + yi * w + xi];
                    }
                }
            }
            acc
        }
    };
    Tensor::from_vec(&out_shape, data)
}

fn spread<T: Scalar>(values: &[T], record: &PoolRecord, factor: T, dst: &mut [T]) {
    let [c, h, w] = record.input_shape;
    let (wh, ww) = record.window;
    let (oh, ow) = (h / wh, w / ww);
    for ch in 0..c {
        for yi in 0..h {
            for xi in 0..w {
                dst[ch * h * w + yi * w + xi] += factor * values[ch * oh * ow + (yi / wh) * ow + xi / ww];
            }
        }
    }
}
