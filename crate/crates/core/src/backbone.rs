//! Small convolutional encoder producing the whole-image feature map.
//!
//! Each block is `conv k×k (same padding) → relu → maxpool p×p`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Conv2dSpec;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneArch {
    /// Channel counts from the input image to the output map; one block per step.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
}

impl Default for BackboneArch {
    fn default() -> Self {
        Self {
            channels: vec![3, 16, 32, 32],
            kernel: 3,
            pool: 2,
        }
    }
}

impl BackboneArch {
    pub fn blocks(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated arch has channels")
    }

    /// Total spatial downsampling factor.
    pub fn downsampling(&self) -> usize {
        self.pool.pow(self.blocks() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::config(format!(
                "backbone needs at least one block with positive channel counts, got {:?}",
                self.channels
            )));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("backbone kernel must be odd, got {}", self.kernel)));
        }
        if self.pool == 0 {
            return Err(Error::config("backbone pool size must be positive"));
        }
        Ok(())
    }

    /// Smallest accepted input side.
    pub fn min_input(&self) -> usize {
        (2 * self.downsampling()).max(16)
    }

    /// Shape of the feature map for an `H×W` input.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let f = self.downsampling();
        let min = self.min_input();
        for (name, side) in [("height", h), ("width", w)] {
            if side < min || side % f != 0 {
                return Err(Error::config(format!(
                    "image {name} {side} is not supported: valid sizes are multiples of {f} that are at least {min} ({}, {}, {}, ...)",
                    min,
                    min + f,
                    min + 2 * f
                )));
            }
        }
        Ok([self.feature_channels(), h / f, w / f])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Real = f32> {
    /// `C_out×C_in×k×k`.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T: Real = f32> {
    pub arch: BackboneArch,
    pub layers: Vec<ConvLayer<T>>,
}

pub struct BackboneVars {
    pub layers: Vec<(Var, Var)>,
}

impl<T: Real> BackboneWeights<T> {
    /// Xavier-uniform kernels and zero biases.
    pub fn init<R: Rng + ?Sized>(arch: BackboneArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel;
        let layers = arch
            .channels
            .windows(2)
            .map(|pair| {
                let (c_in, c_out) = (pair[0], pair[1]);
                ConvLayer {
                    kernel: Tensor::xavier(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng),
                    bias: Tensor::zeros(&[c_out]),
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Checks that every tensor matches the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.blocks() {
            return Err(Error::config(format!(
                "backbone has {} layers but the architecture describes {}",
                self.layers.len(),
                self.arch.blocks()
            )));
        }
        let k = self.arch.kernel;
        for (i, (layer, pair)) in self.layers.iter().zip(self.arch.channels.windows(2)).enumerate() {
            let want = [pair[1], pair[0], k, k];
            if layer.kernel.shape() != want || layer.bias.shape() != [pair[1]] {
                return Err(Error::config(format!(
                    "backbone layer {i}: kernel {:?} / bias {:?} do not match expected {want:?} / [{}]",
                    layer.kernel.shape(),
                    layer.bias.shape(),
                    pair[1]
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BackboneVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BackboneVars {
            layers: self.layers.iter().map(|l| (leaf(&l.kernel), leaf(&l.bias))).collect(),
        }
    }

    /// Runs the encoder outside any training graph.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = encode_graph(&mut g, x, &vars, &self.arch)?;
        Ok(g.value(out).clone())
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.kernel, &mut l.bias]).collect()
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("backbone.{i}.kernel"), format!("backbone.{i}.bias")])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> BackboneWeights<U> {
        BackboneWeights {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

impl BackboneVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(k, b)| [k, b]).collect()
    }
}

/// Records the encoder on `g`. `image` must be `3×H×W` with sizes accepted by
/// [`BackboneArch::output_shape`].
pub fn encode_graph<T: Real>(g: &mut Graph<T>, image: Var, vars: &BackboneVars, arch: &BackboneArch) -> Result<Var> {
    let shape = g.value(image).shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::dim(format!("image must be C×H×W, got {shape:?}")));
    };
    if c != arch.channels[0] {
        return Err(Error::dim(format!(
            "image has {c} channels, backbone expects {}",
            arch.channels[0]
        )));
    }
    arch.output_shape(h, w)?;
    let spec = Conv2dSpec {
        stride: 1,
        padding: arch.kernel / 2,
    };
    let mut x = image;
    for &(kernel, bias) in &vars.layers {
        let conv = g.conv2d(x, kernel, spec)?;
        let biased = g.add_bias(conv, bias)?;
        let act = g.relu(biased);
        x = g.maxpool2d(act, arch.pool, arch.pool)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = BackboneWeights::<f32>::init(BackboneArch::default(), &mut rng).unwrap();
        let img = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        assert_eq!(w.encode(&img).unwrap().shape(), &[32, 4, 4]);
        assert_eq!(w.arch.output_shape(16, 24).unwrap(), [32, 2, 3]);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = BackboneWeights::<f32>::init(BackboneArch::default(), &mut rng).unwrap();
        let out = w.encode(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_size_lists_valid_sizes() {
        let arch = BackboneArch::default();
        let err = arch.output_shape(30, 32).unwrap_err().to_string();
        assert!(err.contains("multiples of 8") && err.contains("16, 24, 32"), "{err}");
        assert!(arch.output_shape(8, 8).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = BackboneWeights::<f32>::init(BackboneArch::default(), &mut rng).unwrap();
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        assert_eq!(w.encode(&img).unwrap(), w.encode(&img).unwrap());
    }
}
