use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their previous value each step.
pub const BN_MOMENTUM: f64 = 0.9;

/// Kernel sizes used by the supported architectures.
pub const KERNEL_SIZES: [usize; 3] = [1, 3, 7];

#[derive(Clone, Debug)]
pub struct ConvParams<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] || !KERNEL_SIZES.contains(&s[2]) {
            return Err(Error::InvalidShape(format!(
                "conv weight must be [O, C, k, k] with k in {KERNEL_SIZES:?}, got {s:?}"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::InvalidShape(format!("conv bias must be [{}], got {:?}", s[0], b.shape())));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv stride must be positive".into()));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-normal initialisation scaled by fan-in, no bias.
    pub fn kaiming<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = kaiming_normal([out_channels, in_channels, kernel, kernel], rng);
        Self::new(weight, None, stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// He-normal tensor: `N(0, 2 / fan_in)` with fan-in over all but the first axis.
pub fn kaiming_normal<T: Element, R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Tensor<T> {
    let shape = shape.into();
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("conv2d input must be [B, C, H, W], got {s:?}")));
    }
    if s[1] != p.in_channels() {
        return Err(Error::InvalidShape(format!(
            "conv2d expects {} input channels, got {}",
            p.in_channels(),
            s[1]
        )));
    }
    let geo = ConvGeometry {
        in_channels: s[1],
        height: s[2],
        width: s[3],
        kernel: p.kernel(),
        stride: p.stride,
        padding: p.padding,
    };
    let (ho, wo) = geo.output_hw().ok_or_else(|| {
        Error::InvalidShape(format!(
            "{}x{} kernel with padding {} does not fit {}x{}",
            p.kernel(),
            p.kernel(),
            p.padding,
            s[2],
            s[3]
        ))
    })?;
    let mut out = kernels::conv2d_forward(&geo, s[0], p.out_channels(), x.data(), p.weight.data());
    if let Some(bias) = &p.bias {
        let plane = ho * wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let b = bias.data()[i % p.out_channels()];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::from_vec([s[0], p.out_channels(), ho, wo], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormParams<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: NormMode,
}

impl<T: Element> BatchNormParams<T> {
    /// `γ = gamma_init`, `β = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize, gamma_init: f64) -> Self {
        BatchNormParams {
            gamma: Tensor::full([channels], T::of(gamma_init)),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: NormMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        self.running_mean = blend(&self.running_mean, mean, self.momentum);
        self.running_var = blend(&self.running_var, var, self.momentum);
    }
}

/// `momentum · old + (1 - momentum) · new`, elementwise.
pub fn blend<T: Element>(old: &Tensor<T>, new: &[T], momentum: f64) -> Tensor<T> {
    let m = T::of(momentum);
    let data = old
        .data()
        .iter()
        .zip(new)
        .map(|(&o, &n)| m * o + (T::one() - m) * n)
        .collect();
    Tensor::from_vec(old.shape().to_vec(), data).expect("same shape")
}

/// Batch norm over the channel axis of `[B, C, H, W]`. In train mode the
/// running statistics of `p` are updated.
pub fn batch_norm<T: Element>(x: &Tensor<T>, p: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || s[1] != p.channels() {
        return Err(Error::InvalidShape(format!(
            "batch norm over {} channels got input {s:?}",
            p.channels()
        )));
    }
    let (batch, channels) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let eps = T::of(p.eps);
    let y = match p.mode {
        NormMode::Train => {
            if batch * spatial < 2 {
                return Err(Error::BatchTooSmall(batch * spatial));
            }
            let (y, _, stats) = kernels::batch_norm_train(
                batch,
                channels,
                spatial,
                x.data(),
                p.gamma.data(),
                p.beta.data(),
                eps,
            );
            p.update_running(&stats.mean, &stats.var);
            y
        }
        NormMode::Eval => {
            kernels::batch_norm_eval(
                batch,
                channels,
                spatial,
                x.data(),
                p.gamma.data(),
                p.beta.data(),
                p.running_mean.data(),
                p.running_var.data(),
                eps,
            )
            .0
        }
    };
    Tensor::from_vec(s.to_vec(), y)
}

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("global_avg_pool expects [B, C, H, W], got {s:?}")));
    }
    let spatial = s[2] * s[3];
    let inv = T::one() / T::of(spatial as f64);
    let data = x.data().chunks(spatial).map(|c| c.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec([s[0], s[1]], data)
}

pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || labels.len() != s[0] {
        return Err(Error::InvalidShape(format!(
            "softmax_cross_entropy expects logits [B, K] and {} labels, got {s:?}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::LabelOutOfRange { label, classes: s[1] });
    }
    let (loss, _) = kernels::softmax_cross_entropy(s[0], s[1], logits.data(), labels);
    Ok(Tensor::scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_conv(c: usize) -> ConvParams<f64> {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        ConvParams::new(Tensor::from_vec([c, c, 1, 1], w).unwrap(), None, 1, 0).unwrap()
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in [4, 16] {
            let x = kaiming_normal::<f64, _>([2, c, 5, 5], &mut rng);
            assert_eq!(conv2d(&x, &identity_conv(c)).unwrap(), x);
        }
    }

    #[test]
    fn zero_weight_gives_zero() {
        let p = ConvParams::new(Tensor::<f64>::zeros([3, 2, 3, 3]), None, 1, 1).unwrap();
        let x = Tensor::<f64>::ones([1, 2, 4, 4]);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_pointwise_conv() {
        let w = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let p = ConvParams::new(w, None, 1, 0).unwrap();
        let x = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_kernels() {
        let p = identity_conv(4);
        assert!(conv2d(&Tensor::<f64>::ones([1, 3, 2, 2]), &p).is_err());
        assert!(ConvParams::new(Tensor::<f64>::ones([1, 1, 5, 5]), None, 1, 0).is_err());
        let p3 = ConvParams::new(Tensor::<f64>::ones([1, 1, 3, 3]), None, 1, 0).unwrap();
        assert!(conv2d(&Tensor::<f64>::ones([1, 1, 2, 2]), &p3).is_err());
    }

    #[test]
    fn output_size_formula() {
        let p = ConvParams::new(Tensor::<f64>::ones([2, 1, 3, 3]), None, 2, 1).unwrap();
        let y = conv2d(&Tensor::<f64>::ones([1, 1, 8, 8]), &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        let p7 = ConvParams::new(Tensor::<f64>::ones([1, 1, 7, 7]), None, 2, 3).unwrap();
        assert_eq!(conv2d(&Tensor::<f64>::ones([1, 1, 224, 224]), &p7).unwrap().shape(), &[1, 1, 112, 112]);
    }

    #[test]
    fn zero_scale_batch_norm_outputs_shift() {
        let mut p = BatchNormParams::<f64>::new(2, 0.0);
        p.beta = Tensor::from_vec([2], vec![0.5, -2.0]).unwrap();
        let x = Tensor::from_vec([2, 2, 1, 2], vec![1.0, 5.0, -3.0, 2.0, 7.0, 0.0, 1.0, 1.5]).unwrap();
        let y = batch_norm(&x, &mut p).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, -2.0, -2.0, 0.5, 0.5, -2.0, -2.0]);
    }

    #[test]
    fn normalised_input_passes_through() {
        let mut p = BatchNormParams::<f64>::new(1, 1.0);
        p.eps = 1e-12;
        let x = Tensor::from_vec([4, 1, 1, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = batch_norm(&x, &mut p).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-3);
    }

    #[test]
    fn two_value_channel() {
        let mut p = BatchNormParams::<f64>::new(1, 1.0);
        let x = Tensor::from_vec([2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = batch_norm(&x, &mut p).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        // Running stats moved 10% toward mean 2 and variance 1.
        assert!((p.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((p.running_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_mode_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = kaiming_normal::<f64, _>([4, 3, 5, 5], &mut rng).map(|v| 3.0 * v + 1.5);
        let mut p = BatchNormParams::<f64>::new(3, 1.0);
        let y = batch_norm(&x, &mut p).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_needs_two_values() {
        let mut p = BatchNormParams::<f64>::new(1, 1.0);
        assert!(matches!(
            batch_norm(&Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap(), &mut p),
            Err(Error::BatchTooSmall(1))
        ));
        p.mode = NormMode::Eval;
        assert!(batch_norm(&Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap(), &mut p).is_ok());
    }

    #[test]
    fn average_pooling() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[3.0]);
        let one = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(global_avg_pool(&one).unwrap().data(), one.data());
        let c = Tensor::full([1, 2, 3, 3], 0.75f64);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[0.75, 0.75]);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::<f64>::zeros([2, 5]);
        let l = softmax_cross_entropy(&uniform, &[0, 3]).unwrap().data()[0];
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let confident = Tensor::<f64>::from_vec([1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&confident, &[1]).unwrap().data()[0].abs() < 1e-12);

        let logits = Tensor::from_vec([1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let l = softmax_cross_entropy(&logits, &[1]).unwrap().data()[0];
        assert!((l + (0.75f64).ln()).abs() < 1e-12);
        assert!((l - 0.2877).abs() < 1e-4);

        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }
}
