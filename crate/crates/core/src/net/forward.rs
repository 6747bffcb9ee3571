use rayon::prelude::*;

use crate::loss::{
    center_loss, center_loss_grad, cross_entropy, cross_entropy_grad_logits, reconstruction_loss,
    reconstruction_loss_grad, BatchLoss, CenterTable, LossWeights,
};
use crate::nn::{
    conv2d, conv2d_backward_accumulate, deconv2d_backward_accumulate, deconv2d_to, dense, dense_backward_accumulate,
    pool2d, pool2d_grad, softmax, unpool2d, unpool2d_grad, ConvSpec, DenseParams, Scalar, Tensor,
};

use super::{ModelParams, NetError, NetworkWeights, PoolRecords, SemanticVector};

/// Samples whose gradients are summed together before the partial sums are
/// combined in order. Fixed so the result does not depend on thread count.
const GRAD_CHUNK: usize = 8;

fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose relu output was clamped.
fn mask_by<T: Scalar>(grad: &mut Tensor<T>, activated: &Tensor<T>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

struct DenseTrace<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
    relu_last: bool,
}

impl<T: Scalar> DenseTrace<T> {
    fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("dense stacks are never empty")
    }
}

fn dense_stack<T: Scalar>(layers: &[DenseParams<T>], x: Tensor<T>, relu_last: bool) -> Result<DenseTrace<T>, NetError> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut outputs = Vec::with_capacity(layers.len());
    let mut cur = x;
    for (i, layer) in layers.iter().enumerate() {
        let mut y = dense(&cur, &layer.weights, &layer.bias)?;
        if relu_last || i + 1 < layers.len() {
            relu_in_place(&mut y);
        }
        inputs.push(cur);
        outputs.push(y.clone());
        cur = y;
    }
    Ok(DenseTrace {
        inputs,
        outputs,
        relu_last,
    })
}

fn dense_stack_backward<T: Scalar>(
    layers: &[DenseParams<T>],
    trace: &DenseTrace<T>,
    grad_out: Tensor<T>,
    acc: &mut [DenseParams<T>],
) -> Result<Tensor<T>, NetError> {
    let n = layers.len();
    let mut g = grad_out;
    for i in (0..n).rev() {
        if trace.relu_last || i + 1 < n {
            mask_by(&mut g, &trace.outputs[i]);
        }
        let DenseParams { weights, bias } = &mut acc[i];
        g = dense_backward_accumulate(&g, &trace.inputs[i], &layers[i], weights, bias, true)?
            .expect("input gradient requested");
    }
    Ok(g)
}

struct EncoderTrace<T> {
    conv_inputs: Vec<Tensor<T>>,
    conv_outputs: Vec<Tensor<T>>,
    records: PoolRecords,
    dense: DenseTrace<T>,
}

struct DecoderTrace<T> {
    dense: DenseTrace<T>,
    /// Indexed by the conv layer each deconvolution mirrors.
    deconv_inputs: Vec<Tensor<T>>,
    deconv_outputs: Vec<Tensor<T>>,
}

/// Every activation of one sample's forward pass, kept for backprop.
pub struct SampleTrace<T = f32> {
    encoder: EncoderTrace<T>,
    classifier: DenseTrace<T>,
    decoder: DecoderTrace<T>,
    probs: Tensor<T>,
}

impl<T: Scalar> SampleTrace<T> {
    pub fn features(&self) -> &Tensor<T> {
        self.encoder.dense.output()
    }

    pub fn probabilities(&self) -> &Tensor<T> {
        &self.probs
    }

    /// Reconstruction with shape `(1, H, W)`.
    pub fn reconstruction(&self) -> &Tensor<T> {
        &self.decoder.deconv_outputs[0]
    }

    pub fn pool_records(&self) -> &PoolRecords {
        &self.encoder.records
    }

    /// Adds this sample's parameter gradients into `acc` given the upstream
    /// gradients at the logits, at `z` (beyond what flows back from the
    /// classifier and decoder) and at the reconstruction. A `None` branch is
    /// skipped entirely.
    pub fn backward_into(
        &self,
        params: &ModelParams<T>,
        grad_logits: Option<Tensor<T>>,
        grad_features: Option<Tensor<T>>,
        grad_recon: Option<Tensor<T>>,
        acc: &mut NetworkWeights<T>,
    ) -> Result<(), NetError> {
        let w = &params.weights;
        let mut dz = grad_features;
        let mut add = |g: Tensor<T>| -> Result<(), NetError> {
            match dz.as_mut() {
                Some(d) => d.add_assign(&g)?,
                None => dz = Some(g),
            }
            Ok(())
        };
        if let Some(g) = grad_logits {
            add(dense_stack_backward(
                &w.classifier,
                &self.classifier,
                g,
                &mut acc.classifier,
            )?)?;
        }
        if let Some(g) = grad_recon {
            add(self.decoder_backward(w, g, acc)?)?;
        }
        if let Some(g) = dz {
            self.encoder_backward(w, g, acc)?;
        }
        Ok(())
    }

    fn decoder_backward(
        &self,
        w: &NetworkWeights<T>,
        grad_recon: Tensor<T>,
        acc: &mut NetworkWeights<T>,
    ) -> Result<Tensor<T>, NetError> {
        let dec = &self.decoder;
        let mut g = grad_recon.reshape(dec.deconv_outputs[0].shape())?;
        for i in 0..w.decoder_deconvs.len() {
            if i > 0 {
                mask_by(&mut g, &dec.deconv_outputs[i]);
            }
            let ConvSpec { kernel, bias, .. } = &mut acc.decoder_deconvs[i];
            g = deconv2d_backward_accumulate(&g, &dec.deconv_inputs[i], &w.decoder_deconvs[i], kernel, bias, true)?
                .expect("input gradient requested");
            if let Some(rec) = &self.encoder.records[i] {
                g = unpool2d_grad(&g, rec)?;
            }
        }
        let len = g.len();
        dense_stack_backward(&w.decoder_dense, &dec.dense, g.reshape(&[len])?, &mut acc.decoder_dense)
    }

    fn encoder_backward(
        &self,
        w: &NetworkWeights<T>,
        grad_z: Tensor<T>,
        acc: &mut NetworkWeights<T>,
    ) -> Result<(), NetError> {
        let enc = &self.encoder;
        let g = dense_stack_backward(&w.encoder_dense, &enc.dense, grad_z, &mut acc.encoder_dense)?;
        let last = enc.conv_outputs.len() - 1;
        let stack_shape = match &enc.records[last] {
            Some(rec) => rec.output_shape().to_vec(),
            None => enc.conv_outputs[last].shape().to_vec(),
        };
        let mut g = g.reshape(&stack_shape)?;
        for i in (0..=last).rev() {
            if let Some(rec) = &enc.records[i] {
                g = pool2d_grad(&g, rec)?;
            }
            mask_by(&mut g, &enc.conv_outputs[i]);
            let ConvSpec { kernel, bias, .. } = &mut acc.encoder_convs[i];
            match conv2d_backward_accumulate(&g, &enc.conv_inputs[i], &w.encoder_convs[i], kernel, bias, i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Accepts `(H, W)` or `(1, H, W)` and returns the `(1, H, W)` view.
    fn network_input(&self, frame: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let [c, h, w] = self.config.input_shape();
        let ok = frame.shape() == [h, w] || frame.shape() == [c, h, w];
        if !ok {
            return Err(NetError::Nn(crate::nn::NnError::ShapeMismatch(format!(
                "frame shape {:?}, network expects {h}x{w}",
                frame.shape()
            ))));
        }
        frame.ensure_finite("frame")?;
        Ok(frame.clone().reshape(&[c, h, w])?)
    }

    fn encode(&self, x: Tensor<T>) -> Result<EncoderTrace<T>, NetError> {
        let cfg = &self.config;
        let n = cfg.conv_layers.len();
        let mut conv_inputs = Vec::with_capacity(n);
        let mut conv_outputs = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        let mut cur = x;
        for (spec, layer) in self.weights.encoder_convs.iter().zip(&cfg.conv_layers) {
            let mut y = conv2d(&cur, spec)?;
            relu_in_place(&mut y);
            conv_inputs.push(cur);
            match layer.pool {
                Some(mode) => {
                    let (pooled, rec) = pool2d(&y, mode, cfg.pool_window, cfg.pool_window)?;
                    records.push(Some(rec));
                    conv_outputs.push(y);
                    cur = pooled;
                }
                None => {
                    records.push(None);
                    conv_outputs.push(y.clone());
                    cur = y;
                }
            }
        }
        let len = cur.len();
        let dense = dense_stack(&self.weights.encoder_dense, cur.reshape(&[len])?, false)?;
        Ok(EncoderTrace {
            conv_inputs,
            conv_outputs,
            records,
            dense,
        })
    }

    fn check_records(&self, records: &PoolRecords) -> Result<(), NetError> {
        let layout = self.config.layout()?;
        if records.len() != self.config.conv_layers.len() {
            return Err(NetError::RecordMismatch(format!(
                "{} records for {} conv layers",
                records.len(),
                self.config.conv_layers.len()
            )));
        }
        for (i, (rec, layer)) in records.iter().zip(&self.config.conv_layers).enumerate() {
            let fits = match (rec, layer.pool) {
                (None, None) => true,
                (Some(r), Some(mode)) => {
                    r.mode == mode && r.input_shape == layout.conv_out[i] && r.window == self.config.pool_window
                }
                _ => false,
            };
            if !fits {
                return Err(NetError::RecordMismatch(format!("layer {i}")));
            }
        }
        Ok(())
    }

    fn decode_traced(&self, z: Tensor<T>, records: &PoolRecords) -> Result<DecoderTrace<T>, NetError> {
        self.check_records(records)?;
        let layout = self.config.layout()?;
        let dense = dense_stack(&self.weights.decoder_dense, z, true)?;
        let mut cur = dense.output().clone().reshape(&layout.stack_out)?;
        let n = records.len();
        let mut deconv_inputs = Vec::with_capacity(n);
        let mut deconv_outputs = Vec::with_capacity(n);
        for i in (0..n).rev() {
            if let Some(rec) = &records[i] {
                cur = unpool2d(&cur, rec)?;
            }
            let [_, h, w] = layout.conv_in[i];
            let mut y = deconv2d_to(&cur, &self.weights.decoder_deconvs[i], (h, w))?;
            if i > 0 {
                relu_in_place(&mut y);
            }
            deconv_inputs.push(cur);
            deconv_outputs.push(y.clone());
            cur = y;
        }
        deconv_inputs.reverse();
        deconv_outputs.reverse();
        Ok(DecoderTrace {
            dense,
            deconv_inputs,
            deconv_outputs,
        })
    }

    fn logits_to_probs(&self, z: Tensor<T>) -> Result<(DenseTrace<T>, Tensor<T>), NetError> {
        let trace = dense_stack(&self.weights.classifier, z, false)?;
        let probs = softmax(trace.output())?;
        Ok((trace, probs))
    }

    fn semantic_tensor(&self, z: &SemanticVector) -> Result<Tensor<T>, NetError> {
        if z.dim() != self.config.semantic_dim {
            return Err(NetError::Nn(crate::nn::NnError::ShapeMismatch(format!(
                "semantic vector has {} entries, network uses {}",
                z.dim(),
                self.config.semantic_dim
            ))));
        }
        Ok(Tensor::from_f64(&[z.dim()], z.as_slice())?)
    }

    /// Full forward pass of one frame through all three parts.
    pub fn forward(&self, frame: &Tensor<T>) -> Result<SampleTrace<T>, NetError> {
        let encoder = self.encode(self.network_input(frame)?)?;
        let z = encoder.dense.output().clone();
        let (classifier, probs) = self.logits_to_probs(z.clone())?;
        let decoder = self.decode_traced(z, &encoder.records)?;
        Ok(SampleTrace {
            encoder,
            classifier,
            decoder,
            probs,
        })
    }

    /// Semantic vector `z` of a frame plus the pool records the decoder needs.
    pub fn extract_features(&self, frame: &Tensor<T>) -> Result<(SemanticVector, PoolRecords), NetError> {
        let enc = self.encode(self.network_input(frame)?)?;
        Ok((SemanticVector::from_tensor(enc.dense.output()), enc.records))
    }

    /// Class probabilities for a semantic vector.
    pub fn classify(&self, z: &SemanticVector) -> Result<Vec<f64>, NetError> {
        let (_, probs) = self.logits_to_probs(self.semantic_tensor(z)?)?;
        Ok(probs.to_f64_vec())
    }

    /// Reconstructed frame, shape `(H, W)`.
    pub fn decode(&self, z: &SemanticVector, records: &PoolRecords) -> Result<Tensor<T>, NetError> {
        let trace = self.decode_traced(self.semantic_tensor(z)?, records)?;
        let [_, h, w] = self.config.input_shape();
        Ok(trace.deconv_outputs[0].clone().reshape(&[h, w])?)
    }

    /// `z` for each frame, computed in parallel, in input order.
    pub fn embed_all(&self, frames: &[&Tensor<T>]) -> Result<Vec<SemanticVector>, NetError> {
        frames
            .par_iter()
            .map(|f| self.extract_features(f).map(|(z, _)| z))
            .collect()
    }
}

/// Forward traces of a whole batch with helpers for the losses and the
/// summed parameter gradient.
pub struct BatchForward<T = f32> {
    pub traces: Vec<SampleTrace<T>>,
}

impl<T: Scalar> BatchForward<T> {
    pub fn run(params: &ModelParams<T>, frames: &[&Tensor<T>]) -> Result<Self, NetError> {
        let traces = frames
            .par_iter()
            .map(|f| params.forward(f))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { traces })
    }

    fn stack(&self, rows: impl Fn(&SampleTrace<T>) -> &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let first = self
            .traces
            .first()
            .map(|t| rows(t).shape().to_vec())
            .unwrap_or_default();
        let mut shape = vec![self.traces.len()];
        shape.extend(&first);
        let data = self
            .traces
            .iter()
            .flat_map(|t| rows(t).data().iter().copied())
            .collect();
        Ok(Tensor::from_vec(&shape, data)?)
    }

    /// `(N, t)`.
    pub fn features(&self) -> Result<Tensor<T>, NetError> {
        self.stack(|t| t.features())
    }

    /// `(N, K)`.
    pub fn probabilities(&self) -> Result<Tensor<T>, NetError> {
        self.stack(|t| t.probabilities())
    }

    /// `(N, 1, H, W)`.
    pub fn reconstructions(&self) -> Result<Tensor<T>, NetError> {
        self.stack(|t| t.reconstruction())
    }

    fn originals(&self, frames: &[&Tensor<T>]) -> Result<Tensor<T>, NetError> {
        let mut shape = vec![frames.len()];
        if let Some(t) = self.traces.first() {
            shape.extend(t.reconstruction().shape());
        }
        let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
        Ok(Tensor::from_vec(&shape, data)?)
    }

    /// All three loss terms (reported even when switched off) and the
    /// weighted total.
    pub fn loss(
        &self,
        frames: &[&Tensor<T>],
        labels: &[usize],
        centers: &CenterTable<T>,
        weights: &LossWeights,
    ) -> Result<BatchLoss, NetError> {
        let ce = cross_entropy(&self.probabilities()?, labels)?;
        let ct = center_loss(&self.features()?, labels, centers)?;
        let r = reconstruction_loss(&self.reconstructions()?, &self.originals(frames)?)?;
        Ok(BatchLoss::new(ce, ct, r, weights))
    }

    /// Gradient of the weighted total with respect to every network weight,
    /// centers held fixed.
    pub fn gradients(
        &self,
        params: &ModelParams<T>,
        frames: &[&Tensor<T>],
        labels: &[usize],
        centers: &CenterTable<T>,
        weights: &LossWeights,
    ) -> Result<NetworkWeights<T>, NetError> {
        let (f_ce, f_ct, f_r) = weights.factors();
        let scaled = |mut t: Tensor<T>, f: f64| {
            t.scale(T::from_f64c(f));
            t
        };
        let d_logits = match f_ce {
            f if f != 0.0 => Some(scaled(cross_entropy_grad_logits(&self.probabilities()?, labels)?, f)),
            _ => None,
        };
        let d_z = match f_ct {
            f if f != 0.0 => Some(scaled(center_loss_grad(&self.features()?, labels, centers)?, f)),
            _ => None,
        };
        let d_rec = match f_r {
            f if f != 0.0 => Some(scaled(
                reconstruction_loss_grad(&self.reconstructions()?, &self.originals(frames)?)?,
                f,
            )),
            _ => None,
        };
        let row = |t: &Option<Tensor<T>>, i: usize| -> Option<Tensor<T>> {
            t.as_ref().map(|t| {
                let shape = &t.shape()[1..];
                let n: usize = shape.iter().product();
                Tensor::from_vec(shape, t.data()[i * n..(i + 1) * n].to_vec()).expect("row")
            })
        };
        let zero = params.weights.zeros_like();
        let indices: Vec<usize> = (0..self.traces.len()).collect();
        let partials = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut acc = zero.clone();
                for &i in chunk {
                    self.traces[i].backward_into(params, row(&d_logits, i), row(&d_z, i), row(&d_rec, i), &mut acc)?;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>, NetError>>()?;
        let mut total = zero;
        for p in &partials {
            total.add_assign(p);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ArchConfig};

    fn model() -> ModelParams<f64> {
        init_params(&ArchConfig::new(vec!["a".into(), "b".into()]), 11).unwrap()
    }

    fn frame(seed: u64) -> Tensor<f64> {
        let data: Vec<f64> = (0..256).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect();
        Tensor::from_vec(&[2, 128], data).unwrap()
    }

    fn zero_biases(p: &mut ModelParams<f64>) {
        let w = &mut p.weights;
        w.encoder_convs
            .iter_mut()
            .chain(w.decoder_deconvs.iter_mut())
            .for_each(|c| c.bias.fill_zero());
        w.encoder_dense
            .iter_mut()
            .chain(w.classifier.iter_mut())
            .chain(w.decoder_dense.iter_mut())
            .for_each(|d| d.bias.fill_zero());
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let p = model();
        let (a, _) = p.extract_features(&frame(1)).unwrap();
        let (b, _) = p.extract_features(&frame(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
    }

    #[test]
    fn zero_frame_maps_to_zero_features() {
        let mut p = model();
        zero_biases(&mut p);
        let (z, _) = p.extract_features(&Tensor::zeros(&[2, 128])).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_features_decode_to_zero() {
        let mut p = model();
        zero_biases(&mut p);
        let (_, rec) = p.extract_features(&frame(2)).unwrap();
        let x = p.decode(&SemanticVector::new(vec![0.0; 64]), &rec).unwrap();
        assert_eq!(x.shape(), &[2, 128]);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_sums_to_one() {
        let p = model();
        let (z, _) = p.extract_features(&frame(3)).unwrap();
        let probs = p.classify(&z).unwrap();
        assert_eq!(probs.len(), 2);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_foreign_records() {
        let p = model();
        let (z, mut rec) = p.extract_features(&frame(4)).unwrap();
        rec.swap(0, 1);
        assert!(matches!(p.decode(&z, &rec), Err(NetError::RecordMismatch(_))));
        rec.pop();
        assert!(p.decode(&z, &rec).is_err());
    }

    #[test]
    fn wrong_frame_shape_is_rejected() {
        let p = model();
        assert!(p.extract_features(&Tensor::zeros(&[2, 64])).is_err());
        let mut bad = frame(0);
        bad.data_mut()[5] = f64::NAN;
        assert!(p.extract_features(&bad).is_err());
    }

    #[test]
    fn switched_off_losses_give_zero_gradient() {
        let p = model();
        let frames = [frame(1), frame(2)];
        let refs: Vec<&Tensor<f64>> = frames.iter().collect();
        let batch = BatchForward::run(&p, &refs).unwrap();
        let off = LossWeights {
            ce_on: false,
            ct_on: false,
            r_on: false,
            ..LossWeights::default()
        };
        let g = batch.gradients(&p, &refs, &[0, 1], &p.centers, &off).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        let loss = batch.loss(&refs, &[0, 1], &p.centers, &off).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(loss.ce > 0.0 && loss.r > 0.0);
    }
}
