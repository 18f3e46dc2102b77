//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Magnitude below which gradients are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Largest relative error between `analytic` and the central difference of
/// `loss` around `point`, perturbing one coordinate at a time by `eps`.
pub fn check_fn<F>(point: &[f64], analytic: &[f64], eps: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape {
            expected: format!("{} gradient entries", point.len()),
            actual: format!("{}", analytic.len()),
        });
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = loss(&x)?;
        x[i] = orig - eps;
        let down = loss(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Checks every parameter and input coordinate of `net` under the scalar
/// loss `sum(probe * net(input))`, with a seeded random probe.
pub fn check_network(net: &Network, input: &Tensor, eps: f64, seed: u64) -> Result<f64> {
    let out_shape = net.spec().output_shape()?;
    let mut r = rng::stream(seed, "gradcheck-probe", 0);
    let n: usize = out_shape.iter().product();
    let probe = Tensor::new(out_shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;

    let pass = net.forward(input)?;
    let mut grads = net.zero_grads();
    let gx = net.backward(&pass, &probe, &mut grads)?;

    let mut point: Vec<f64> = net.params().iter().flat_map(|t| t.data().iter().copied()).collect();
    let n_params = point.len();
    point.extend_from_slice(input.data());
    let mut analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    analytic.extend_from_slice(gx.data());

    let mut scratch = net.clone();
    check_fn(&point, &analytic, eps, |v| {
        let mut off = 0;
        for t in scratch.params_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&v[off..off + len]);
            off += len;
        }
        let x = Tensor::new(input.shape().to_vec(), v[n_params..].to_vec())?;
        let y = scratch.predict(&x)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::LayerSpec;
    use crate::neural::network::NetworkSpec;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "gc-input", 0);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(input: &[usize], layers: Vec<LayerSpec>, seed: u64) -> f64 {
        check_with(input, layers, seed, 1e-5)
    }

    fn check_with(input: &[usize], layers: Vec<LayerSpec>, seed: u64, eps: f64) -> f64 {
        let net = NetworkSpec::new(input.to_vec(), layers)
            .init(&mut rng::stream(seed, "gc-init", 0))
            .unwrap();
        let x = random_input(input, seed);
        check_network(&net, &x, eps, seed).unwrap()
    }

    #[test]
    fn linear_layers_are_exact() {
        // no truncation error for affine maps, so the widest step only
        // shrinks rounding noise
        assert!(check_with(&[5], vec![LayerSpec::fc(5, 3)], 1, 1e-2) < 1e-9);
        assert!(check_with(&[2, 5, 5], vec![LayerSpec::conv(2, 3, 3, 1, 1)], 2, 1e-2) < 1e-9);
    }

    #[test]
    fn random_conv_two_to_three() {
        assert!(check(&[2, 6, 7], vec![LayerSpec::conv(2, 3, 3, 1, 1)], 3) < 1e-4);
        assert!(check(&[2, 7, 6], vec![LayerSpec::conv(2, 3, 3, 2, 1)], 4) < 1e-4);
        assert!(check(&[2, 7, 6], vec![LayerSpec::conv(2, 3, 3, 2, 0)], 5) < 1e-4);
    }

    #[test]
    fn pointwise_and_shape_layers() {
        for (i, l) in [
            LayerSpec::Relu,
            LayerSpec::Sigmoid,
            LayerSpec::Tanh,
            LayerSpec::Softmax,
        ]
        .into_iter()
        .enumerate()
        {
            let err = check(&[7], vec![LayerSpec::fc(7, 7), l.clone()], 10 + i as u64);
            assert!(err < 1e-4, "{l:?}: {err}");
        }
        let err = check(
            &[2, 3, 3],
            vec![LayerSpec::NearestUpsample { factor: 2 }, LayerSpec::conv(2, 1, 3, 1, 1)],
            20,
        );
        assert!(err < 1e-4, "{err}");
        let err = check(
            &[12],
            vec![LayerSpec::Reshape { shape: vec![3, 2, 2] }, LayerSpec::conv(3, 2, 1, 1, 0)],
            21,
        );
        assert!(err < 1e-4, "{err}");
        let err = check_with(
            &[12],
            vec![LayerSpec::Reshape { shape: vec![3, 2, 2] }, LayerSpec::conv(3, 2, 1, 1, 0)],
            21,
            1e-2,
        );
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn attention_pair() {
        let err = check(
            &[4, 6, 6],
            vec![
                LayerSpec::ChannelAttention {
                    channels: 4,
                    reduction: 2,
                },
                LayerSpec::SpatialAttention { kernel: 7 },
            ],
            30,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(check_fn(&[0.0], &[0.0], 0.1, |_| Ok(0.0)).is_err());
        assert!(check_fn(&[0.0], &[0.0], 0.0, |_| Ok(0.0)).is_err());
    }
}
