use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, LayerCache, LayerSpec};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// A feed-forward chain of layers with a fixed input shape.
///
/// Parameters are stored flat in layer order so optimizers and checkpoints
/// can treat every network the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    offsets: Vec<usize>,
}

/// Serializable description of a [`Network`] without its values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self { input_shape, layers }
    }

    /// Shape after every layer; fails on the first mismatch.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            shape = layer.output_shape(&shape).map_err(|e| match e {
                Error::Shape { expected, actual } => Error::Shape {
                    expected: format!("layer {i}: {expected}"),
                    actual,
                },
                other => other,
            })?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<Network> {
        self.shapes()?;
        let params = self
            .layers
            .iter()
            .map(|l| l.init_params(rng))
            .collect::<Vec<_>>();
        Network::from_parts(self.clone(), params.into_iter().flatten().collect())
    }
}

/// Caches from one forward pass, needed for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    caches: Vec<LayerCache>,
    output: Tensor,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn caches(&self) -> &[LayerCache] {
        &self.caches
    }

    /// Spatial gate maps in layer order, each `[1, H, W]`.
    pub fn spatial_maps(&self) -> impl Iterator<Item = &Tensor> {
        self.caches
            .iter()
            .filter(|c| matches!(c.spec(), LayerSpec::SpatialAttention { .. }))
            .filter_map(LayerCache::attention_weights)
    }

    pub fn channel_maps(&self) -> impl Iterator<Item = &Tensor> {
        self.caches
            .iter()
            .filter(|c| matches!(c.spec(), LayerSpec::ChannelAttention { .. }))
            .filter_map(LayerCache::attention_weights)
    }
}

impl Network {
    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.shapes()?;
        let mut offsets = Vec::with_capacity(spec.layers.len() + 1);
        let mut expected = Vec::new();
        offsets.push(0);
        for layer in &spec.layers {
            let shapes = layer.param_shapes();
            offsets.push(offsets.last().unwrap() + shapes.len());
            expected.extend(shapes);
        }
        let actual: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        if expected.len() != actual.len() || expected.iter().zip(&actual).any(|(e, a)| e[..] != **a) {
            return Err(shape_err(&expected, &actual));
        }
        Ok(Self {
            input_shape: spec.input_shape,
            layers: spec.layers,
            params,
            offsets,
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.input_shape.clone(), self.layers.clone())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// `"<layer>.<slot>"` names matching [`Network::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| (self.offsets[i]..self.offsets[i + 1]).map(move |j| format!("{i}.{}", j - self.offsets[i])))
            .collect()
    }

    fn layer_params(&self, i: usize) -> &[Tensor] {
        &self.params[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(Tensor::zeros_like).collect()
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(shape_err(&self.input_shape, input.shape()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layers::forward(layer, self.layer_params(i), &x)?;
            caches.push(cache);
            x = y;
        }
        Ok(ForwardPass { caches, output: x })
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.output)
    }

    /// Backpropagates `grad_out`, adding parameter gradients into `grads`
    /// and returning the gradient with respect to the input.
    pub fn backward(&self, pass: &ForwardPass, grad_out: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        if pass.caches.len() != self.layers.len() || grads.len() != self.params.len() {
            return Err(Error::Shape {
                expected: format!("pass over {} layers, {} gradient slots", self.layers.len(), self.params.len()),
                actual: format!("pass over {} layers, {} gradient slots", pass.caches.len(), grads.len()),
            });
        }
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let (gx, gp) = layers::backward(&self.layers[i], self.layer_params(i), &pass.caches[i], &g)?;
            for (acc, d) in grads[self.offsets[i]..self.offsets[i + 1]].iter_mut().zip(&gp) {
                acc.add_assign(d);
            }
            g = gx;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn stack() -> NetworkSpec {
        NetworkSpec::new(
            vec![1, 8, 8],
            vec![
                LayerSpec::conv(1, 4, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::ChannelAttention {
                    channels: 4,
                    reduction: 4,
                },
                LayerSpec::SpatialAttention { kernel: 7 },
                LayerSpec::conv(4, 4, 3, 2, 1),
                LayerSpec::Relu,
                LayerSpec::fc(64, 6),
            ],
        )
    }

    #[test]
    fn shape_chain_and_names() {
        let net = stack().init(&mut rng::stream(1, "init", 0)).unwrap();
        assert_eq!(stack().output_shape().unwrap(), vec![6]);
        assert_eq!(net.param_names().len(), net.params().len());
        assert_eq!(net.param_names()[0], "0.0");
        let bad = NetworkSpec::new(vec![1, 8, 8], vec![LayerSpec::fc(10, 2)]);
        let err = bad.shapes().unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let net = stack().init(&mut rng::stream(2, "init", 0)).unwrap();
        let x = Tensor::filled(&[1, 8, 8], 0.3);
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
        let pass = net.forward(&x).unwrap();
        assert_eq!(pass.spatial_maps().count(), 1);
        assert_eq!(pass.channel_maps().count(), 1);
        assert!(net.predict(&Tensor::zeros(&[1, 4, 4])).is_err());
    }
}
