use crate::loss::CenterTable;
use crate::nn::{he_normal, ConvSpec, DenseParams, Scalar, SeedStream, Tensor};

use super::{ArchConfig, NetError};

/// Which of the three parameter sets a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Classifier,
    Decoder,
}

/// Learned tensors of the extractor, classifier and decoder. The same
/// layout doubles as a gradient accumulator.
///
/// `decoder_deconvs[i]` mirrors `encoder_convs[i]`: same kernel layout and
/// padding, bias sized to the conv layer's input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights<T = f32> {
    pub encoder_convs: Vec<ConvSpec<T>>,
    pub encoder_dense: Vec<DenseParams<T>>,
    pub classifier: Vec<DenseParams<T>>,
    pub decoder_dense: Vec<DenseParams<T>>,
    pub decoder_deconvs: Vec<ConvSpec<T>>,
}

fn conv_tensors<T>(convs: &[ConvSpec<T>]) -> impl Iterator<Item = &Tensor<T>> {
    convs.iter().flat_map(|c| [&c.kernel, &c.bias])
}

fn conv_tensors_mut<T>(convs: &mut [ConvSpec<T>]) -> impl Iterator<Item = &mut Tensor<T>> {
    convs.iter_mut().flat_map(|c| [&mut c.kernel, &mut c.bias])
}

fn dense_tensors<T>(layers: &[DenseParams<T>]) -> impl Iterator<Item = &Tensor<T>> {
    layers.iter().flat_map(|d| [&d.weights, &d.bias])
}

fn dense_tensors_mut<T>(layers: &mut [DenseParams<T>]) -> impl Iterator<Item = &mut Tensor<T>> {
    layers.iter_mut().flat_map(|d| [&mut d.weights, &mut d.bias])
}

impl<T: Scalar> NetworkWeights<T> {
    /// Tensors of one group in declaration order.
    pub fn group(&self, group: ParamGroup) -> Vec<&Tensor<T>> {
        match group {
            ParamGroup::Extractor => conv_tensors(&self.encoder_convs)
                .chain(dense_tensors(&self.encoder_dense))
                .collect(),
            ParamGroup::Classifier => dense_tensors(&self.classifier).collect(),
            ParamGroup::Decoder => dense_tensors(&self.decoder_dense)
                .chain(conv_tensors(&self.decoder_deconvs))
                .collect(),
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor<T>> {
        match group {
            ParamGroup::Extractor => conv_tensors_mut(&mut self.encoder_convs)
                .chain(dense_tensors_mut(&mut self.encoder_dense))
                .collect(),
            ParamGroup::Classifier => dense_tensors_mut(&mut self.classifier).collect(),
            ParamGroup::Decoder => dense_tensors_mut(&mut self.decoder_dense)
                .chain(conv_tensors_mut(&mut self.decoder_deconvs))
                .collect(),
        }
    }

    /// Every tensor in declaration order: extractor, classifier, decoder.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut all = self.group(ParamGroup::Extractor);
        all.extend(self.group(ParamGroup::Classifier));
        all.extend(self.group(ParamGroup::Decoder));
        all
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        conv_tensors_mut(&mut self.encoder_convs)
            .chain(dense_tensors_mut(&mut self.encoder_dense))
            .chain(dense_tensors_mut(&mut self.classifier))
            .chain(dense_tensors_mut(&mut self.decoder_dense))
            .chain(conv_tensors_mut(&mut self.decoder_deconvs))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(Tensor::fill_zero);
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b).expect("identical layouts");
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// All values flattened in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.to_f64_vec()).collect()
    }

    /// Overwrites every value from a flat buffer produced by [`Self::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            for (dst, &v) in t.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *dst = T::from_f64c(v);
            }
            off += n;
        }
        assert_eq!(off, flat.len(), "flat buffer length");
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        let conv = |c: &ConvSpec<T>| ConvSpec {
            kernel: c.kernel.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
            padding: c.padding,
        };
        let dense = |d: &DenseParams<T>| DenseParams {
            weights: d.weights.cast(),
            bias: d.bias.cast(),
        };
        NetworkWeights {
            encoder_convs: self.encoder_convs.iter().map(conv).collect(),
            encoder_dense: self.encoder_dense.iter().map(dense).collect(),
            classifier: self.classifier.iter().map(dense).collect(),
            decoder_dense: self.decoder_dense.iter().map(dense).collect(),
            decoder_deconvs: self.decoder_deconvs.iter().map(conv).collect(),
        }
    }
}

/// Network weights, the center table and the architecture they follow.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ArchConfig,
    pub weights: NetworkWeights<T>,
    pub centers: CenterTable<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            weights: self.weights.cast(),
            centers: CenterTable {
                centers: self.centers.centers.cast(),
                alpha: self.centers.alpha,
            },
        }
    }

    /// Confirms every tensor has the shape the config implies.
    pub fn check_shapes(&self) -> Result<(), NetError> {
        let reference = zero_weights::<T>(&self.config)?;
        let ours = self.weights.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() {
            return Err(NetError::InvalidConfig(format!(
                "{} parameter tensors, architecture has {}",
                ours.len(),
                theirs.len()
            )));
        }
        for (i, (a, b)) in ours.iter().zip(&theirs).enumerate() {
            if a.shape() != b.shape() {
                return Err(NetError::InvalidConfig(format!(
                    "parameter tensor {i} has shape {:?}, architecture expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        let want = [self.config.known_classes(), self.config.semantic_dim];
        if self.centers.centers.shape() != want {
            return Err(NetError::InvalidConfig(format!(
                "center table {:?}, expected {want:?}",
                self.centers.centers.shape()
            )));
        }
        Ok(())
    }
}

/// Default center learning rate α.
pub const DEFAULT_CENTER_RATE: f64 = 0.5;

fn dense_widths(first: usize, hidden: &[usize], last: usize) -> Vec<(usize, usize)> {
    let mut widths = vec![first];
    widths.extend_from_slice(hidden);
    widths.push(last);
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Allocates every tensor at its final shape, filled with zeros.
fn zero_weights<T: Scalar>(config: &ArchConfig) -> Result<NetworkWeights<T>, NetError> {
    let layout = config.layout()?;
    let mut encoder_convs = Vec::new();
    let mut decoder_deconvs = Vec::new();
    for (layer, shape_in) in config.conv_layers.iter().zip(&layout.conv_in) {
        let (kh, kw) = layer.kernel;
        let kernel = Tensor::zeros(&[layer.out_channels, shape_in[0], kh, kw]);
        encoder_convs.push(ConvSpec::new(
            kernel.clone(),
            Tensor::zeros(&[layer.out_channels]),
            (1, 1),
            layer.padding,
        )?);
        decoder_deconvs.push(ConvSpec::new(
            kernel,
            Tensor::zeros(&[shape_in[0]]),
            (1, 1),
            layer.padding,
        )?);
    }
    let t = config.semantic_dim;
    let dense = |pairs: Vec<(usize, usize)>| pairs.into_iter().map(|(i, o)| DenseParams::zeros(i, o)).collect();
    let mut decoder_hidden = config.encoder_hidden.clone();
    decoder_hidden.reverse();
    Ok(NetworkWeights {
        encoder_convs,
        encoder_dense: dense(dense_widths(layout.flat_dim, &config.encoder_hidden, t)),
        classifier: dense(dense_widths(t, &config.classifier_hidden, config.known_classes())),
        decoder_dense: dense(dense_widths(t, &decoder_hidden, layout.flat_dim)),
        decoder_deconvs,
    })
}

/// He-normal weights, zero biases and zero centers, every layer drawn from
/// its own seeded stream.
pub fn init_params<T: Scalar>(config: &ArchConfig, seed: u64) -> Result<ModelParams<T>, NetError> {
    let mut weights = zero_weights::<T>(config)?;
    let seeds = SeedStream::new(seed);
    for (i, c) in weights.encoder_convs.iter_mut().enumerate() {
        let s = c.kernel.shape().to_vec();
        c.kernel = he_normal(&s, s[1] * s[2] * s[3], &mut seeds.rng(i as u64));
    }
    let dense_init = |layers: &mut Vec<DenseParams<T>>, base: u64| {
        for (i, d) in layers.iter_mut().enumerate() {
            let s = d.weights.shape().to_vec();
            d.weights = he_normal(&s, s[1], &mut seeds.rng(base + i as u64));
        }
    };
    dense_init(&mut weights.encoder_dense, 100);
    dense_init(&mut weights.classifier, 200);
    dense_init(&mut weights.decoder_dense, 300);
    for (i, c) in weights.decoder_deconvs.iter_mut().enumerate() {
        // each deconv output sums over out_ch * kH * kW inputs
        let s = c.kernel.shape().to_vec();
        c.kernel = he_normal(&s, s[0] * s[2] * s[3], &mut seeds.rng(400 + i as u64));
    }
    Ok(ModelParams {
        centers: CenterTable::zeros(config.known_classes(), config.semantic_dim, DEFAULT_CENTER_RATE),
        config: config.clone(),
        weights,
    })
}
