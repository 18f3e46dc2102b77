//! Trace encoder, media decoders and a discriminator with a privacy head,
//! trained jointly to reconstruct secret inputs from folded traces.

pub mod gru;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::media::{MediaSample, Modality};
use crate::neural::{checkpoint, AdamConfig, AdamState, ForwardPass, LayerSpec, Network, NetworkSpec, Tensor};
use crate::rng;
pub use gru::{GruSpec, SequenceDecoder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderSpec {
    Continuous(NetworkSpec),
    Sequence { gru: GruSpec, max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub trunk: NetworkSpec,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent: usize,
    pub encoder: NetworkSpec,
    pub decoder: DecoderSpec,
    pub discriminator: DiscriminatorSpec,
}

/// Conv, channel attention, spatial attention, strided conv, FC to latent.
pub fn encoder_stack(input: [usize; 3], width: usize, latent: usize) -> NetworkSpec {
    let [c, h, w] = input;
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    NetworkSpec::new(
        input.to_vec(),
        vec![
            LayerSpec::conv(c, width, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::ChannelAttention {
                channels: width,
                reduction: 4,
            },
            LayerSpec::SpatialAttention { kernel: 7 },
            LayerSpec::conv(width, 2 * width, 3, 2, 1),
            LayerSpec::Relu,
            LayerSpec::fc(2 * width * h2 * w2, latent),
        ],
    )
}

/// FC to a `width x H/4 x W/4` seed, two upsample+conv stages, sigmoid.
pub fn image_decoder(latent: usize, height: usize, width: usize, channels: usize) -> NetworkSpec {
    let (h4, w4) = (height / 4, width / 4);
    NetworkSpec::new(
        vec![latent],
        vec![
            LayerSpec::fc(latent, channels * h4 * w4),
            LayerSpec::Reshape {
                shape: vec![channels, h4, w4],
            },
            LayerSpec::NearestUpsample { factor: 2 },
            LayerSpec::conv(channels, channels, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::NearestUpsample { factor: 2 },
            LayerSpec::conv(channels, channels / 2, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(channels / 2, 1, 3, 1, 1),
            LayerSpec::Sigmoid,
        ],
    )
}

impl ModelSpec {
    /// Image model for `[K, N, N]` inputs and `height x width` outputs
    /// (both multiples of 4).
    pub fn continuous(input: [usize; 3], height: usize, width: usize, latent: usize, classes: usize) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("image size {height}x{width} must be a positive multiple of 4")));
        }
        let trunk = NetworkSpec::new(
            vec![1, height, width],
            vec![
                LayerSpec::conv(1, 4, 3, 2, 1),
                LayerSpec::Relu,
                LayerSpec::conv(4, 8, 3, 2, 1),
                LayerSpec::Relu,
            ],
        );
        let spec = Self {
            latent,
            encoder: encoder_stack(input, 4, latent),
            decoder: DecoderSpec::Continuous(image_decoder(latent, height, width, 8)),
            discriminator: DiscriminatorSpec { trunk, classes },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Sentence model; `vocab` counts SOS and EOS.
    pub fn sequence(input: [usize; 3], vocab: usize, max_len: usize, latent: usize, classes: usize) -> Result<Self> {
        let trunk = NetworkSpec::new(vec![vocab], vec![LayerSpec::fc(vocab, 32), LayerSpec::Relu]);
        let spec = Self {
            latent,
            encoder: encoder_stack(input, 8, latent),
            decoder: DecoderSpec::Sequence {
                gru: GruSpec {
                    latent,
                    vocab,
                    embed: 16,
                    hidden: 64,
                },
                max_len,
            },
            discriminator: DiscriminatorSpec { trunk, classes },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn modality(&self) -> Modality {
        match self.decoder {
            DecoderSpec::Continuous(_) => Modality::Continuous,
            DecoderSpec::Sequence { .. } => Modality::Text,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.encoder.input_shape
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.discriminator.classes == 0 {
            return Err(Error::Config("latent size and class count must be positive".into()));
        }
        let enc_out = self.encoder.output_shape()?;
        if enc_out != [self.latent] {
            return Err(shape_err(format!("encoder output [{}]", self.latent), enc_out));
        }
        let d_in = &self.discriminator.trunk.input_shape;
        match &self.decoder {
            DecoderSpec::Continuous(dec) => {
                if dec.input_shape != [self.latent] {
                    return Err(shape_err(format!("decoder input [{}]", self.latent), &dec.input_shape));
                }
                let out = dec.output_shape()?;
                if out.len() != 3 || out[0] != 1 || out != *d_in {
                    return Err(shape_err(format!("decoder output [1, H, W] = discriminator input {d_in:?}"), out));
                }
            }
            DecoderSpec::Sequence { gru, max_len } => {
                gru.validate()?;
                if gru.latent != self.latent || *max_len == 0 || d_in[..] != [gru.vocab] {
                    return Err(Error::Config(format!(
                        "sequence decoder {gru:?} / max_len {max_len} inconsistent with latent {} and discriminator input {d_in:?}",
                        self.latent
                    )));
                }
            }
        }
        self.discriminator.trunk.output_shape()?;
        Ok(())
    }

    /// Fresh model with weights drawn from the `init` stream of `seed`.
    pub fn init(&self, seed: u64) -> Result<Model> {
        self.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let encoder = self.encoder.init(&mut r)?;
        let decoder = match &self.decoder {
            DecoderSpec::Continuous(s) => Decoder::Continuous(s.init(&mut r)?),
            DecoderSpec::Sequence { gru, max_len } => Decoder::Sequence {
                net: gru.init(&mut r)?,
                max_len: *max_len,
            },
        };
        let trunk = self.discriminator.trunk.init(&mut r)?;
        let feat = self.discriminator.trunk.output_shape()?;
        let n_feat: usize = feat.iter().product();
        let realism = NetworkSpec::new(feat.clone(), vec![LayerSpec::fc(n_feat, 1)]).init(&mut r)?;
        let privacy =
            NetworkSpec::new(feat, vec![LayerSpec::fc(n_feat, self.discriminator.classes)]).init(&mut r)?;
        Ok(Model {
            spec: self.clone(),
            encoder,
            decoder,
            disc: Discriminator {
                trunk,
                realism,
                privacy,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Continuous(Network),
    Sequence { net: SequenceDecoder, max_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub trunk: Network,
    pub realism: Network,
    pub privacy: Network,
}

struct DiscPass {
    trunk: ForwardPass,
    realism: ForwardPass,
    privacy: ForwardPass,
}

impl DiscPass {
    fn realism_logit(&self) -> f64 {
        self.realism.output().data()[0]
    }

    fn privacy_logits(&self) -> &[f64] {
        self.privacy.output().data()
    }
}

#[derive(Debug, Clone)]
struct DiscGrads {
    trunk: Vec<Tensor>,
    realism: Vec<Tensor>,
    privacy: Vec<Tensor>,
}

impl Discriminator {
    fn zero_grads(&self) -> DiscGrads {
        DiscGrads {
            trunk: self.trunk.zero_grads(),
            realism: self.realism.zero_grads(),
            privacy: self.privacy.zero_grads(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<DiscPass> {
        let trunk = self.trunk.forward(x)?;
        let realism = self.realism.forward(trunk.output())?;
        let privacy = self.privacy.forward(trunk.output())?;
        Ok(DiscPass {
            trunk,
            realism,
            privacy,
        })
    }

    fn backward(&self, pass: &DiscPass, d_logit: f64, d_privacy: &[f64], grads: &mut DiscGrads) -> Result<Tensor> {
        let mut d_feat = self
            .realism
            .backward(&pass.realism, &Tensor::vector(vec![d_logit]), &mut grads.realism)?;
        let d_priv = self
            .privacy
            .backward(&pass.privacy, &Tensor::vector(d_privacy.to_vec()), &mut grads.privacy)?;
        d_feat.add_assign(&d_priv);
        self.trunk.backward(&pass.trunk, &d_feat, &mut grads.trunk)
    }
}

/// Normalized token histogram of a sentence's words: the text
/// discriminator's view of a sample.
pub fn bag_of_words(words: &[usize], vocab: usize) -> Result<Tensor> {
    let mut v = vec![0.0; vocab];
    for &w in words {
        *v.get_mut(w).ok_or_else(|| Error::Config(format!("token {w} outside vocabulary of {vocab}")))? += 1.0;
    }
    if !words.is_empty() {
        let n = words.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(Tensor::vector(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Explicit {
    Mse,
    L1,
}

impl FromStr for Explicit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "l1" => Ok(Self::L1),
            _ => Err(Error::Config(format!("unknown explicit loss {s:?} (mse, l1)"))),
        }
    }
}

impl fmt::Display for Explicit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::L1 => "l1",
        })
    }
}

/// Relative weights of the three generator terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub implicit: f64,
    pub privacy: f64,
    pub explicit: Explicit,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 50.0,
            implicit: 1.0,
            privacy: 1.0,
            explicit: Explicit::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub explicit: f64,
    pub implicit: f64,
    pub privacy: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda * self.explicit + w.implicit * self.implicit + w.privacy * self.privacy
    }
}

/// Gradients of the weighted total with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub recon: Tensor,
    pub realism_logit: f64,
    pub privacy_logits: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(cross-entropy, d/dlogits)` of `label` under softmax(`logits`).
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Config(format!("label {label} outside {} classes", logits.len())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let lse = m + z.ln();
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// Weighted generator objective: explicit distance to the reference, the
/// non-saturating adversarial term `-ln D(recon)` (taken from the realism
/// logit), and privacy-head cross-entropy against the secret label.
pub fn total_loss(
    recon: &Tensor,
    reference: &Tensor,
    realism_logit: f64,
    privacy_logits: &[f64],
    label: usize,
    weights: &LossWeights,
) -> Result<(LossParts, LossGrads)> {
    if recon.shape() != reference.shape() {
        return Err(shape_err(reference.shape(), recon.shape()));
    }
    let n = recon.len() as f64;
    let (explicit, d_explicit): (f64, Vec<f64>) = match weights.explicit {
        Explicit::Mse => (
            recon.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
            recon.data().iter().zip(reference.data()).map(|(a, b)| 2.0 * (a - b) / n).collect(),
        ),
        Explicit::L1 => (
            recon.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
            recon.data().iter().zip(reference.data()).map(|(a, b)| (a - b).signum() / n).collect(),
        ),
    };
    let implicit = softplus(-realism_logit);
    let d_implicit = crate::neural::layers::sigmoid(realism_logit) - 1.0;
    let (privacy, d_privacy) = cross_entropy(privacy_logits, label)?;
    let parts = LossParts {
        explicit,
        implicit,
        privacy,
    };
    if !parts.total(weights).is_finite() {
        return Err(Error::NonFinite(format!("loss {parts:?}")));
    }
    let grads = LossGrads {
        recon: Tensor::new(recon.shape().to_vec(), d_explicit.into_iter().map(|g| weights.lambda * g).collect())?,
        realism_logit: weights.implicit * d_implicit,
        privacy_logits: d_privacy.into_iter().map(|g| weights.privacy * g).collect(),
    };
    Ok((parts, grads))
}

/// Flat gradients of one generator objective, ordered like
/// [`Model::param_vector`].
#[derive(Debug, Clone)]
pub struct GeneratorGrads {
    encoder: Vec<Tensor>,
    decoder: Vec<Tensor>,
    disc: DiscGrads,
}

impl GeneratorGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.disc.trunk)
            .chain(&self.disc.realism)
            .chain(&self.disc.privacy)
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    pub encoder: Network,
    pub decoder: Decoder,
    pub disc: Discriminator,
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn modality(&self) -> Modality {
        self.spec.modality()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.predict(x)
    }

    /// Earliest spatial-attention map of the encoder for `x`, `[1, H, W]`.
    pub fn spatial_attention(&self, x: &Tensor) -> Result<Tensor> {
        let pass = self.encoder.forward(x)?;
        let map = pass
            .spatial_maps()
            .next()
            .cloned()
            .ok_or_else(|| Error::Unsupported("encoder has no spatial attention layer".into()))?;
        Ok(map)
    }

    pub fn decode_continuous(&self, z: &Tensor) -> Result<MediaSample> {
        match &self.decoder {
            Decoder::Continuous(net) => {
                let out = net.predict(z)?;
                let (_, h, w) = out.chw()?;
                MediaSample::image(h, w, out.into_data())
            }
            Decoder::Sequence { .. } => Err(Error::Modality("model decodes text, not images".into())),
        }
    }

    pub fn decode_sequence(&self, z: &Tensor, max_len: usize) -> Result<MediaSample> {
        match &self.decoder {
            Decoder::Sequence { net, .. } => Ok(MediaSample::sentence(&net.greedy(z.data(), max_len)?)),
            Decoder::Continuous(_) => Err(Error::Modality("model decodes images, not text".into())),
        }
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<MediaSample> {
        let z = self.encode(x)?;
        match &self.decoder {
            Decoder::Continuous(_) => self.decode_continuous(&z),
            Decoder::Sequence { max_len, .. } => self.decode_sequence(&z, *max_len),
        }
    }

    /// The discriminator's input tensor for `sample`.
    pub fn disc_input(&self, sample: &MediaSample) -> Result<Tensor> {
        match (&self.decoder, sample) {
            (
                Decoder::Continuous(_),
                MediaSample::Continuous {
                    height,
                    width,
                    values,
                },
            ) => Tensor::new(vec![1, *height, *width], values.clone()),
            (Decoder::Sequence { net, .. }, MediaSample::TokenSeq { .. }) => {
                bag_of_words(sample.words()?, net.spec().vocab)
            }
            _ => Err(Error::Modality(format!(
                "{:?} discriminator given a {:?} sample",
                self.modality(),
                sample.modality()
            ))),
        }
    }

    /// Realism score in (0, 1) and privacy logits.
    pub fn discriminate(&self, sample: &MediaSample) -> Result<(f64, Vec<f64>)> {
        let pass = self.disc.forward(&self.disc_input(sample)?)?;
        Ok((
            crate::neural::layers::sigmoid(pass.realism_logit()),
            pass.privacy_logits().to_vec(),
        ))
    }

    /// Privacy-head class for `sample`, ties to the lowest class.
    pub fn classify(&self, sample: &MediaSample) -> Result<usize> {
        let (_, logits) = self.discriminate(sample)?;
        Ok(argmax(&logits))
    }

    fn groups(&self) -> Vec<&[Tensor]> {
        vec![
            self.encoder.params(),
            self.decoder_params(),
            self.disc.trunk.params(),
            self.disc.realism.params(),
            self.disc.privacy.params(),
        ]
    }

    fn decoder_params(&self) -> &[Tensor] {
        match &self.decoder {
            Decoder::Continuous(n) => n.params(),
            Decoder::Sequence { net, .. } => net.params(),
        }
    }

    fn decoder_params_mut(&mut self) -> &mut [Tensor] {
        match &mut self.decoder {
            Decoder::Continuous(n) => n.params_mut(),
            Decoder::Sequence { net, .. } => net.params_mut(),
        }
    }

    fn groups_mut(&mut self) -> Vec<&mut [Tensor]> {
        let Model {
            encoder, decoder, disc, ..
        } = self;
        let dec = match decoder {
            Decoder::Continuous(n) => n.params_mut(),
            Decoder::Sequence { net, .. } => net.params_mut(),
        };
        vec![
            encoder.params_mut(),
            dec,
            disc.trunk.params_mut(),
            disc.realism.params_mut(),
            disc.privacy.params_mut(),
        ]
    }

    /// Every parameter: encoder, decoder, discriminator trunk, realism head,
    /// privacy head.
    pub fn param_vector(&self) -> Vec<f64> {
        self.groups()
            .into_iter()
            .flatten()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_param_vector(&mut self, v: &[f64]) -> Result<()> {
        let n: usize = self.groups().into_iter().flatten().map(Tensor::len).sum();
        if v.len() != n {
            return Err(shape_err(format!("{n} parameters"), v.len()));
        }
        let mut off = 0;
        for group in self.groups_mut() {
            for t in group.iter_mut() {
                let len = t.len();
                t.data_mut().copy_from_slice(&v[off..off + len]);
                off += len;
            }
        }
        Ok(())
    }

    fn zero_generator_grads(&self) -> GeneratorGrads {
        GeneratorGrads {
            encoder: self.encoder.zero_grads(),
            decoder: self.decoder_params().iter().map(Tensor::zeros_like).collect(),
            disc: self.disc.zero_grads(),
        }
    }

    /// Generator objective for one example. Images use [`total_loss`]
    /// through the discriminator; sentences use teacher-forced
    /// cross-entropy (reported as the explicit term). Returns the parts, the
    /// weighted total and the input gradient; parameter gradients are
    /// accumulated into `grads` scaled by `scale`.
    pub fn generator_step(
        &self,
        input: &Tensor,
        target: &MediaSample,
        label: usize,
        weights: &LossWeights,
        scale: f64,
        grads: &mut GeneratorGrads,
    ) -> Result<(LossParts, f64, Tensor)> {
        let enc = self.encoder.forward(input)?;
        let (parts, dz) = match &self.decoder {
            Decoder::Continuous(net) => {
                let dec = net.forward(enc.output())?;
                let reference = self.disc_input(target)?;
                let dp = self.disc.forward(dec.output())?;
                let (parts, lg) = total_loss(
                    dec.output(),
                    &reference,
                    dp.realism_logit(),
                    dp.privacy_logits(),
                    label,
                    weights,
                )?;
                let d_priv: Vec<f64> = lg.privacy_logits.iter().map(|g| g * scale).collect();
                let mut d_recon = self.disc.backward(&dp, lg.realism_logit * scale, &d_priv, &mut grads.disc)?;
                let mut d_exp = lg.recon;
                d_exp.scale(scale);
                d_recon.add_assign(&d_exp);
                (parts, net.backward(&dec, &d_recon, &mut grads.decoder)?)
            }
            Decoder::Sequence { net, .. } => {
                let pass = net.forward(enc.output().data(), target.words()?)?;
                let dz = net.backward(&pass, scale, &mut grads.decoder)?;
                let parts = LossParts {
                    explicit: pass.loss(),
                    ..Default::default()
                };
                (parts, Tensor::vector(dz))
            }
        };
        let total = match self.decoder {
            Decoder::Continuous(_) => parts.total(weights),
            Decoder::Sequence { .. } => parts.explicit,
        };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("generator loss {parts:?}")));
        }
        let dx = self.encoder.backward(&enc, &dz, &mut grads.encoder)?;
        Ok((parts, total, dx))
    }

    /// Full-gradient helper: `(parts, total, d/dparams, d/dinput)`.
    pub fn generator_gradient(
        &self,
        input: &Tensor,
        target: &MediaSample,
        label: usize,
        weights: &LossWeights,
    ) -> Result<(LossParts, f64, Vec<f64>, Tensor)> {
        let mut grads = self.zero_generator_grads();
        let (parts, total, dx) = self.generator_step(input, target, label, weights, 1.0, &mut grads)?;
        Ok((parts, total, grads.flatten(), dx))
    }

    /// Discriminator loss on one real/fake pair with gradient accumulation:
    /// `softplus(-l_real) + softplus(l_fake) + CE(privacy(real), label)`.
    fn disc_step(&self, real: &Tensor, fake: &Tensor, label: usize, scale: f64, grads: &mut DiscGrads) -> Result<f64> {
        let pr = self.disc.forward(real)?;
        let (ce, d_ce) = cross_entropy(pr.privacy_logits(), label)?;
        let lr = pr.realism_logit();
        let d_ce: Vec<f64> = d_ce.iter().map(|g| g * scale).collect();
        self.disc.backward(&pr, (crate::neural::layers::sigmoid(lr) - 1.0) * scale, &d_ce, grads)?;
        let pf = self.disc.forward(fake)?;
        let lf = pf.realism_logit();
        let zeros = vec![0.0; d_ce.len()];
        self.disc.backward(&pf, crate::neural::layers::sigmoid(lf) * scale, &zeros, grads)?;
        let loss = softplus(-lr) + softplus(lf) + ce;
        if !loss.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        Ok(loss)
    }

    pub fn save<M: Serialize, W: Write>(&self, out: W, meta: &M) -> Result<()> {
        let header = CheckpointMeta {
            spec: self.spec.clone(),
            meta,
        };
        let prefixes = ["encoder", "decoder", "disc.trunk", "disc.realism", "disc.privacy"];
        let named: Vec<(String, &Tensor)> = self
            .groups()
            .into_iter()
            .zip(prefixes)
            .flat_map(|(g, p)| g.iter().enumerate().map(move |(i, t)| (format!("{p}.{i}"), t)))
            .collect();
        checkpoint::write(out, &header, &named)
    }

    pub fn load<M: DeserializeOwned, R: Read>(input: R) -> Result<(Self, M)> {
        let (header, tensors): (CheckpointMeta<M>, _) = checkpoint::read(input)?;
        let mut model = header.spec.init(0)?;
        let expected: usize = model.groups().iter().map(|g| g.len()).sum();
        if tensors.len() != expected {
            return Err(Error::Format(format!("checkpoint holds {} tensors, model needs {expected}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        for group in model.groups_mut() {
            for slot in group.iter_mut() {
                let (name, t) = it.next().expect("count checked");
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "tensor {name}: shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        Ok((model, header.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta<M> {
    spec: ModelSpec,
    meta: M,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One training pair: a normalized trace matrix, the secret input and its
/// secret class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub target: MediaSample,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch: 64,
            epochs: 10,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.weights.lambda >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "batch {} must be >= 1, lambda {} >= 0, lr {} > 0",
                self.batch, self.weights.lambda, self.adam.lr
            )));
        }
        Ok(())
    }
}

/// Mean loss components over one epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub explicit: f64,
    pub implicit: f64,
    pub privacy: f64,
    pub d_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_explicit,L_implicit,L_privacy,D_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.explicit, e.implicit, e.privacy, e.d_loss));
        }
        s
    }
}

struct Optimizers {
    groups: Vec<AdamState>,
}

impl Optimizers {
    fn new(model: &Model, cfg: AdamConfig) -> Self {
        Self {
            groups: model.groups().into_iter().map(|g| AdamState::new(cfg, g)).collect(),
        }
    }
}

/// Initializes from `spec` and trains; see [`train_model`].
pub fn train(spec: &ModelSpec, examples: &[Example], cfg: &TrainConfig) -> Result<(Model, History)> {
    let mut model = spec.init(cfg.seed)?;
    let history = train_model(&mut model, examples, cfg)?;
    Ok((model, history))
}

/// Alternating updates: per batch one discriminator step on (reference,
/// reconstruction) pairs, then one encoder/decoder step against the updated
/// discriminator. Batches are drawn from a seeded shuffle per epoch.
pub fn train_model(model: &mut Model, examples: &[Example], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut opt = Optimizers::new(model, cfg.adam);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let ctx = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {b}: {m}")),
                other => other,
            };
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (parts, d_loss) = train_batch(model, &mut opt, &batch, &cfg.weights).map_err(ctx)?;
            sums[0] += parts.explicit;
            sums[1] += parts.implicit;
            sums[2] += parts.privacy;
            sums[3] += d_loss;
            batches += 1;
        }
        let n = batches as f64;
        history.epochs.push(EpochStats {
            epoch,
            explicit: sums[0] / n,
            implicit: sums[1] / n,
            privacy: sums[2] / n,
            d_loss: sums[3] / n,
        });
    }
    Ok(history)
}

fn train_batch(model: &mut Model, opt: &mut Optimizers, batch: &[&Example], w: &LossWeights) -> Result<(LossParts, f64)> {
    let scale = 1.0 / batch.len() as f64;
    let fakes: Vec<Tensor> = match model.modality() {
        Modality::Continuous => batch
            .iter()
            .map(|ex| {
                let z = model.encode(&ex.input)?;
                model.disc_input(&model.decode_continuous(&z)?)
            })
            .collect::<Result<_>>()?,
        Modality::Text => batch
            .iter()
            .map(|ex| model.disc_input(&model.reconstruct(&ex.input)?))
            .collect::<Result<_>>()?,
    };

    let mut dg = model.disc.zero_grads();
    let mut d_loss = 0.0;
    for (ex, fake) in batch.iter().zip(&fakes) {
        let real = model.disc_input(&ex.target)?;
        d_loss += scale * model.disc_step(&real, fake, ex.label, scale, &mut dg)?;
    }
    opt.groups[2].step(model.disc.trunk.params_mut(), &dg.trunk)?;
    opt.groups[3].step(model.disc.realism.params_mut(), &dg.realism)?;
    opt.groups[4].step(model.disc.privacy.params_mut(), &dg.privacy)?;

    let mut gg = model.zero_generator_grads();
    let mut parts = LossParts::default();
    for ex in batch {
        let (p, _, _) = model.generator_step(&ex.input, &ex.target, ex.label, w, scale, &mut gg)?;
        parts.explicit += scale * p.explicit;
        parts.implicit += scale * p.implicit;
        parts.privacy += scale * p.privacy;
    }
    opt.groups[0].step(model.encoder.params_mut(), &gg.encoder)?;
    opt.groups[1].step(model.decoder_params_mut(), &gg.decoder)?;
    Ok((parts, d_loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Mse,
    WordAccuracy,
    PrivacyMatch,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "word_accuracy" => Ok(Self::WordAccuracy),
            "privacy_match" => Ok(Self::PrivacyMatch),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?} (mse, word_accuracy, privacy_match)"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::WordAccuracy => "word_accuracy",
            Self::PrivacyMatch => "privacy_match",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub metric: Metric,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Positional matches up to the shorter sentence, over the reference length.
pub fn word_accuracy(reference: &[usize], hypothesis: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = reference.iter().zip(hypothesis).filter(|(a, b)| a == b).count();
    hits as f64 / reference.len() as f64
}

/// Largest class prior among `labels`.
pub fn majority_baseline(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    *counts.iter().max().unwrap() as f64 / labels.len() as f64
}

/// Scores `recons` against `refs`. `privacy_match` asks whether the
/// model's privacy head assigns each reconstruction its reference's secret
/// class from `labels`.
pub fn evaluate(
    model: &Model,
    recons: &[MediaSample],
    refs: &[MediaSample],
    labels: &[usize],
    metric: Metric,
) -> Result<Scores> {
    if recons.len() != refs.len() {
        return Err(shape_err(format!("{} reconstructions", refs.len()), recons.len()));
    }
    let per_sample = recons
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (r, t))| match metric {
            Metric::Mse => mse(r.pixels()?, t.pixels()?),
            Metric::WordAccuracy => Ok(word_accuracy(t.words()?, r.words()?)),
            Metric::PrivacyMatch => {
                let label = *labels
                    .get(i)
                    .ok_or_else(|| Error::Config("privacy_match needs one label per sample".into()))?;
                Ok(f64::from(u8::from(model.classify(r)? == label)))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok(Scores {
        metric,
        per_sample,
        mean,
    })
}

#[cfg(test)]
mod tests;
