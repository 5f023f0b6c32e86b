//! Small stride-1 convolution stack producing per-pixel features.
//!
//! Every layer but the last uses a `kernel_size` window with zero padding and
//! a ReLU; the last layer is a linear 1x1 projection to the decoder width.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

pub const MAX_ENCODER_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 32,
            kernel_size: 3,
            bias: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > MAX_ENCODER_LAYERS {
            return Err(Error::Config(format!(
                "encoder needs 1..={MAX_ENCODER_LAYERS} layers, got {}",
                self.layers
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("encoder width must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "encoder kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub kernel: usize,
    pub in_channels: usize,
    /// `(kernel * kernel * in_channels) x out_channels`; rows ordered
    /// `(ky, kx, channel)`.
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            kernel: self.kernel,
            in_channels: self.in_channels,
            weight: Array2::zeros(self.weight.dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub layers: Vec<Conv2d<T>>,
}

/// `H x W x D` features stored as an `HW x D` matrix in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures<T> {
    pub height: usize,
    pub width: usize,
    pub values: Array2<T>,
}

impl<T: Real> PixelFeatures<T> {
    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_array3(&self) -> Array3<T> {
        self.values
            .clone()
            .into_shape_with_order((self.height, self.width, self.channels()))
            .expect("feature matrix is contiguous")
    }
}

pub(crate) struct EncoderCache<T> {
    cols: Vec<Array2<T>>,
    outputs: Vec<Array2<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn init<R: Rng>(config: &EncoderConfig, out_channels: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(config.layers);
        let mut cin = 3;
        for l in 0..config.layers {
            let last = l + 1 == config.layers;
            let (kernel, cout) = if last {
                (1, out_channels)
            } else {
                (config.kernel_size, config.width)
            };
            let fan_in = kernel * kernel * cin;
            let gain = if last { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
            let weight = Array2::from_shape_fn((fan_in, cout), |_| T::from(normal.sample(rng)).unwrap());
            layers.push(Conv2d {
                kernel,
                in_channels: cin,
                weight,
                bias: config.bias.then(|| Array1::zeros(cout)),
            });
            cin = cout;
        }
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(3, Conv2d::out_channels)
    }

    pub(crate) fn forward(&self, image: &Array3<f32>) -> Result<(PixelFeatures<T>, EncoderCache<T>)> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image has {c} channels, expected 3")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("image is empty".into()));
        }
        let mut x = Array2::from_shape_fn((h * w, 3), |(p, ch)| T::from(image[[p / w, p % w, ch]]).unwrap());
        let mut cache = EncoderCache {
            cols: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let cols = im2col(x.view(), h, w, layer.kernel);
            let mut z = cols.dot(&layer.weight);
            if let Some(b) = &layer.bias {
                z += b;
            }
            if l != last {
                z.mapv_inplace(|v| v.max(T::zero()));
            }
            cache.cols.push(cols);
            cache.outputs.push(z.clone());
            x = z;
        }
        Ok((
            PixelFeatures {
                height: h,
                width: w,
                values: x,
            },
            cache,
        ))
    }

    /// Accumulates parameter gradients into `grads`.
    pub(crate) fn backward(
        &self,
        cache: &EncoderCache<T>,
        height: usize,
        width: usize,
        grad_features: Array2<T>,
        grads: &mut Encoder<T>,
    ) {
        let last = self.layers.len() - 1;
        let mut g = grad_features;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l != last {
                ndarray::Zip::from(&mut g)
                    .and(&cache.outputs[l])
                    .for_each(|gv, &out| {
                        if out <= T::zero() {
                            *gv = T::zero();
                        }
                    });
            }
            let grad_layer = &mut grads.layers[l];
            general_mat_mul(T::one(), &cache.cols[l].t(), &g, T::one(), &mut grad_layer.weight);
            if let Some(b) = grad_layer.bias.as_mut() {
                *b += &g.sum_axis(Axis(0));
            }
            if l > 0 {
                let dcols = g.dot(&layer.weight.t());
                g = col2im(dcols.view(), height, width, layer.kernel, layer.in_channels);
            }
        }
    }
}

/// Deterministic feature extraction; `image` is `H x W x 3` in `[0, 1]`.
pub fn encode_pixels<T: Real>(image: &Array3<f32>, encoder: &Encoder<T>) -> Result<PixelFeatures<T>> {
    encoder.forward(image).map(|(f, _)| f)
}

fn im2col<T: Real>(input: ArrayView2<T>, h: usize, w: usize, kernel: usize) -> Array2<T> {
    let cin = input.ncols();
    if kernel == 1 {
        return input.to_owned();
    }
    let pad = kernel / 2;
    let row_len = kernel * kernel * cin;
    let mut cols = Array2::zeros((h * w, row_len));
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    for y in 0..h {
        for x in 0..w {
            let row = &mut dst[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..kernel {
                let sy = y + ky;
                if sy < pad || sy - pad >= h {
                    continue;
                }
                let sy = sy - pad;
                for kx in 0..kernel {
                    let sx = x + kx;
                    if sx < pad || sx - pad >= w {
                        continue;
                    }
                    let sx = sx - pad;
                    let off = (ky * kernel + kx) * cin;
                    let from = (sy * w + sx) * cin;
                    row[off..off + cin].copy_from_slice(&src[from..from + cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: ArrayView2<T>, h: usize, w: usize, kernel: usize, cin: usize) -> Array2<T> {
    if kernel == 1 {
        return cols.to_owned();
    }
    let pad = kernel / 2;
    let row_len = kernel * kernel * cin;
    let mut out = Array2::zeros((h * w, cin));
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    for y in 0..h {
        for x in 0..w {
            let row = &src[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..kernel {
                let sy = y + ky;
                if sy < pad || sy - pad >= h {
                    continue;
                }
                let sy = sy - pad;
                for kx in 0..kernel {
                    let sx = x + kx;
                    if sx < pad || sx - pad >= w {
                        continue;
                    }
                    let sx = sx - pad;
                    let off = (ky * kernel + kx) * cin;
                    let to = (sy * w + sx) * cin;
                    for (d, &s) in dst[to..to + cin].iter_mut().zip(&row[off..off + cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(config: &EncoderConfig, d: usize) -> Encoder<f64> {
        Encoder::init(config, d, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn output_shape() {
        let enc = encoder(&EncoderConfig::default(), 32);
        let f = encode_pixels(&Array3::from_elem((64, 64, 3), 0.5), &enc).unwrap();
        assert_eq!(f.to_array3().dim(), (64, 64, 32));
    }

    #[test]
    fn zero_image_bias_free_gives_zero_features() {
        let config = EncoderConfig {
            bias: false,
            ..EncoderConfig::default()
        };
        let enc = encoder(&config, 8);
        let f = encode_pixels(&Array3::zeros((16, 16, 3)), &enc).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic() {
        let enc = encoder(&EncoderConfig::default(), 8);
        let img = Array3::from_shape_fn((16, 20, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        assert_eq!(encode_pixels(&img, &enc).unwrap(), encode_pixels(&img, &enc).unwrap());
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let enc = encoder(&EncoderConfig::default(), 8);
        assert!(encode_pixels(&Array3::zeros((8, 8, 4)), &enc).is_err());
        assert!(EncoderConfig { layers: 7, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { kernel_size: 4, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, c, k) = (5, 4, 3, 3);
        let x = Array2::from_shape_fn((h * w, c), |_| rng.random_range(-1.0f64..1.0));
        let y = Array2::from_shape_fn((h * w, k * k * c), |_| rng.random_range(-1.0f64..1.0));
        let lhs = (im2col(x.view(), h, w, k) * &y).sum();
        let rhs = (&x * &col2im(y.view(), h, w, k, c)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let config = EncoderConfig {
            layers: 3,
            width: 4,
            kernel_size: 3,
            bias: true,
        };
        let mut enc = encoder(&config, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layer in &mut enc.layers {
            if let Some(b) = layer.bias.as_mut() {
                b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
            }
        }
        let img = Array3::from_shape_fn((5, 6, 3), |_| rng.random_range(0.0f32..1.0));
        let weights = Array2::from_shape_fn((30, 3), |_| rng.random_range(-1.0f64..1.0));
        let loss = |e: &Encoder<f64>| (&encode_pixels(&img, e).unwrap().values * &weights).sum();

        let (_, cache) = enc.forward(&img).unwrap();
        let mut grads = enc.zeros_like();
        enc.backward(&cache, 5, 6, weights.clone(), &mut grads);

        let h = 1e-6;
        for l in 0..3 {
            for idx in [(0, 0), (5, 1), (8, 2)] {
                if idx.0 >= enc.layers[l].weight.nrows() || idx.1 >= enc.layers[l].weight.ncols() {
                    continue;
                }
                let mut plus = enc.clone();
                plus.layers[l].weight[idx] += h;
                let mut minus = enc.clone();
                minus.layers[l].weight[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.layers[l].weight[idx];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "layer {l} {idx:?}: {fd} vs {an}");
            }
            let mut plus = enc.clone();
            plus.layers[l].bias.as_mut().unwrap()[0] += h;
            let mut minus = enc.clone();
            minus.layers[l].bias.as_mut().unwrap()[0] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.layers[l].bias.as_ref().unwrap()[0];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "layer {l} bias: {fd} vs {an}");
        }
    }
}
