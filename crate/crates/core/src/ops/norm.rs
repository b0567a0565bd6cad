use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward result of batch normalization; the statistics actually used
/// for normalization are kept for the backward pass.
pub struct BnForward<T: Scalar> {
    pub output: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Updated running statistics (train mode only).
    pub new_running: Option<(Tensor<T>, Tensor<T>)>,
}

fn check_bn_params<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batchnorm parameters {:?}/{:?} do not match {} channels",
            gamma.shape(),
            beta.shape(),
            c
        ));
    }
    Ok(c)
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut data = vec![T::zero(); x.numel()];
    for s in 0..n {
        for ch in 0..c {
            let inv_std = T::one() / (var[ch] + T::from_f64(eps)).sqrt();
            let g = gamma.data()[ch] * inv_std;
            let b = beta.data()[ch];
            let m = mean[ch];
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                data[base + i] = (x.data()[base + i] - m) * g + b;
            }
        }
    }
    Tensor::from_vec(x.shape(), data)
}

/// Train mode: normalize with batch statistics over (N,H,W) per channel,
/// and fold them into the running averages with the given momentum.
pub fn batchnorm2d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    momentum: f64,
    eps: f64,
) -> Result<BnForward<T>> {
    let c = check_bn_params(x, gamma, beta)?;
    let (n, _, h, w) = x.dims4()?;
    let m = (n * h * w) as f64;
    let plane = h * w;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                acc += x.data()[base + i];
            }
        }
        let mu = acc / T::from_f64(m);
        let mut acc2 = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let d = x.data()[base + i] - mu;
                acc2 += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = acc2 / T::from_f64(m);
    }
    let output = normalize(x, gamma, beta, &mean, &var, eps)?;
    let mom = T::from_f64(momentum);
    let keep = T::from_f64(1.0 - momentum);
    let new_mean = Tensor::from_vec(
        &[c],
        (0..c)
            .map(|ch| running_mean.data()[ch] * keep + mean[ch] * mom)
            .collect(),
    )?;
    let new_var = Tensor::from_vec(
        &[c],
        (0..c)
            .map(|ch| running_var.data()[ch] * keep + var[ch] * mom)
            .collect(),
    )?;
    Ok(BnForward {
        output,
        mean,
        var,
        new_running: Some((new_mean, new_var)),
    })
}

/// Eval mode: normalize with the stored running statistics.
pub fn batchnorm2d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<BnForward<T>> {
    check_bn_params(x, gamma, beta)?;
    let mean = running_mean.data().to_vec();
    let var = running_var.data().to_vec();
    let output = normalize(x, gamma, beta, &mean, &var, eps)?;
    Ok(BnForward {
        output,
        mean,
        var,
        new_running: None,
    })
}

/// Backward through train-mode normalization (statistics are functions of x).
pub fn batchnorm2d_backward_train<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let m = (n * h * w) as f64;
    let mut grad_x = vec![T::zero(); x.numel()];
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for ch in 0..c {
        let inv_std = T::one() / (var[ch] + T::from_f64(eps)).sqrt();
        let mu = mean[ch];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let g = grad_out.data()[base + i];
                let xhat = (x.data()[base + i] - mu) * inv_std;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        grad_gamma[ch] = sum_gx;
        grad_beta[ch] = sum_g;
        let scale = gamma.data()[ch] * inv_std;
        let inv_m = T::from_f64(1.0 / m);
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let g = grad_out.data()[base + i];
                let xhat = (x.data()[base + i] - mu) * inv_std;
                grad_x[base + i] = scale * (g - sum_g * inv_m - xhat * sum_gx * inv_m);
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), grad_x)?,
        Tensor::from_vec(&[c], grad_gamma)?,
        Tensor::from_vec(&[c], grad_beta)?,
    ))
}

/// Backward through eval-mode normalization (statistics are constants).
pub fn batchnorm2d_backward_eval<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut grad_x = vec![T::zero(); x.numel()];
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for ch in 0..c {
        let inv_std = T::one() / (var[ch] + T::from_f64(eps)).sqrt();
        let scale = gamma.data()[ch] * inv_std;
        let mu = mean[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in 0..plane {
                let g = grad_out.data()[base + i];
                grad_x[base + i] = g * scale;
                grad_gamma[ch] += g * (x.data()[base + i] - mu) * inv_std;
                grad_beta[ch] += g;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), grad_x)?,
        Tensor::from_vec(&[c], grad_gamma)?,
        Tensor::from_vec(&[c], grad_beta)?,
    ))
}
