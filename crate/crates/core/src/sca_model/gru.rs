//! Gated recurrent sequence decoder conditioned on a latent vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{EOS, SOS};
use crate::neural::layers::{matvec, matvec_backward, sigmoid};
use crate::neural::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub latent: usize,
    /// Token count including SOS and EOS.
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl GruSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.vocab <= EOS + 1 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("invalid sequence decoder {self:?}")));
        }
        Ok(())
    }

    /// Order: embedding, w_ih, w_hh, b_ih, b_hh, w_init, b_init, w_out, b_out.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (v, e, h, l) = (self.vocab, self.embed, self.hidden, self.latent);
        vec![
            vec![v, e],
            vec![3 * h, e],
            vec![3 * h, h],
            vec![3 * h],
            vec![3 * h],
            vec![h, l],
            vec![h],
            vec![v, h],
            vec![v],
        ]
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<SequenceDecoder> {
        self.validate()?;
        let params = self
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let data = match i {
                    0 => (0..n).map(|_| rng.gen_range(-1.0..1.0) * 0.5).collect(),
                    _ if shape.len() == 1 => vec![0.0; n],
                    _ => {
                        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                    }
                };
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect();
        SequenceDecoder::from_parts(*self, params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDecoder {
    spec: GruSpec,
    params: Vec<Tensor>,
}

struct Step {
    token: usize,
    h_prev: Vec<f64>,
    gh_n: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
}

/// Teacher-forced pass, kept for [`SequenceDecoder::backward`].
pub struct SequencePass {
    latent: Vec<f64>,
    h0: Vec<f64>,
    steps: Vec<Step>,
    targets: Vec<usize>,
    loss: f64,
}

impl SequencePass {
    /// Mean per-step cross-entropy.
    pub fn loss(&self) -> f64 {
        self.loss
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl SequenceDecoder {
    pub fn from_parts(spec: GruSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let want = spec.param_shapes();
        if want.len() != params.len() || want.iter().zip(&params).any(|(w, p)| w[..] != *p.shape()) {
            return Err(Error::Shape {
                expected: format!("{want:?}"),
                actual: format!("{:?}", params.iter().map(Tensor::shape).collect::<Vec<_>>()),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &GruSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(Tensor::zeros_like).collect()
    }

    fn p(&self, i: usize) -> &[f64] {
        self.params[i].data()
    }

    fn initial_state(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.spec.latent {
            return Err(Error::Shape {
                expected: format!("latent of {}", self.spec.latent),
                actual: format!("{}", z.len()),
            });
        }
        Ok(matvec(self.p(5), self.p(6), z).into_iter().map(f64::tanh).collect())
    }

    fn cell(&self, token: usize, h_prev: &[f64]) -> Step {
        let (e, hd) = (self.spec.embed, self.spec.hidden);
        let emb = &self.p(0)[token * e..(token + 1) * e];
        let gi = matvec(self.p(1), self.p(3), emb);
        let gh = matvec(self.p(2), self.p(4), h_prev);
        let r: Vec<f64> = (0..hd).map(|k| sigmoid(gi[k] + gh[k])).collect();
        let u: Vec<f64> = (0..hd).map(|k| sigmoid(gi[hd + k] + gh[hd + k])).collect();
        let gh_n = gh[2 * hd..].to_vec();
        let n: Vec<f64> = (0..hd).map(|k| (gi[2 * hd + k] + r[k] * gh_n[k]).tanh()).collect();
        let h: Vec<f64> = (0..hd).map(|k| (1.0 - u[k]) * n[k] + u[k] * h_prev[k]).collect();
        let probs = softmax(&matvec(self.p(7), self.p(8), &h));
        Step {
            token,
            h_prev: h_prev.to_vec(),
            gh_n,
            r,
            u,
            n,
            h,
            probs,
        }
    }

    /// Feeds `SOS, w1..wn` and scores `w1..wn, EOS`.
    pub fn forward(&self, z: &[f64], words: &[usize]) -> Result<SequencePass> {
        if let Some(&t) = words.iter().find(|&&t| t >= self.spec.vocab || t == SOS || t == EOS) {
            return Err(Error::Config(format!("token {t} is not a word of a {}-token vocabulary", self.spec.vocab)));
        }
        let h0 = self.initial_state(z)?;
        let inputs = std::iter::once(SOS).chain(words.iter().copied());
        let targets: Vec<usize> = words.iter().copied().chain(std::iter::once(EOS)).collect();
        let mut steps = Vec::with_capacity(targets.len());
        let mut loss = 0.0;
        let mut h = h0.clone();
        for (tok, &target) in inputs.zip(&targets) {
            let step = self.cell(tok, &h);
            loss -= step.probs[target].max(f64::MIN_POSITIVE).ln();
            h = step.h.clone();
            steps.push(step);
        }
        Ok(SequencePass {
            latent: z.to_vec(),
            h0,
            loss: loss / targets.len() as f64,
            steps,
            targets,
        })
    }

    /// Gradient of the mean cross-entropy; parameter gradients are added
    /// into `grads`, the latent gradient is returned.
    pub fn backward(&self, pass: &SequencePass, scale: f64, grads: &mut [Tensor]) -> Result<Vec<f64>> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient slots", self.params.len()),
                actual: format!("{}", grads.len()),
            });
        }
        let (e, hd) = (self.spec.embed, self.spec.hidden);
        let w = scale / pass.targets.len() as f64;
        let mut dh_next = vec![0.0; hd];
        for (step, &target) in pass.steps.iter().zip(&pass.targets).rev() {
            let mut dlogits: Vec<f64> = step.probs.iter().map(|p| p * w).collect();
            dlogits[target] -= w;
            let mut dh = matvec_backward(self.p(7), &step.h, &dlogits, grads[7].data_mut());
            for (g, d) in grads[8].data_mut().iter_mut().zip(&dlogits) {
                *g += d;
            }
            for (a, b) in dh.iter_mut().zip(&dh_next) {
                *a += b;
            }
            let mut dgi = vec![0.0; 3 * hd];
            let mut dgh = vec![0.0; 3 * hd];
            let mut dh_prev = vec![0.0; hd];
            for k in 0..hd {
                let (r, u, n) = (step.r[k], step.u[k], step.n[k]);
                let dn_pre = dh[k] * (1.0 - u) * (1.0 - n * n);
                let du_pre = dh[k] * (step.h_prev[k] - n) * u * (1.0 - u);
                let dr_pre = dn_pre * step.gh_n[k] * r * (1.0 - r);
                dh_prev[k] = dh[k] * u;
                dgi[k] = dr_pre;
                dgi[hd + k] = du_pre;
                dgi[2 * hd + k] = dn_pre;
                dgh[k] = dr_pre;
                dgh[hd + k] = du_pre;
                dgh[2 * hd + k] = dn_pre * r;
            }
            let emb = &self.p(0)[step.token * e..(step.token + 1) * e];
            let de = matvec_backward(self.p(1), emb, &dgi, grads[1].data_mut());
            for (g, d) in grads[0].data_mut()[step.token * e..(step.token + 1) * e].iter_mut().zip(&de) {
                *g += d;
            }
            let dhh = matvec_backward(self.p(2), &step.h_prev, &dgh, grads[2].data_mut());
            for k in 0..3 * hd {
                grads[3].data_mut()[k] += dgi[k];
                grads[4].data_mut()[k] += dgh[k];
            }
            for k in 0..hd {
                dh_prev[k] += dhh[k];
            }
            dh_next = dh_prev;
        }
        let dpre: Vec<f64> = dh_next.iter().zip(&pass.h0).map(|(d, h)| d * (1.0 - h * h)).collect();
        let dz = matvec_backward(self.p(5), &pass.latent, &dpre, grads[5].data_mut());
        for (g, d) in grads[6].data_mut().iter_mut().zip(&dpre) {
            *g += d;
        }
        Ok(dz)
    }

    /// Greedy decoding from SOS; SOS is never emitted and ties go to the
    /// lowest token id. Returns the words without framing.
    pub fn greedy(&self, z: &[f64], max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let mut h = self.initial_state(z)?;
        let mut tok = SOS;
        let mut words = Vec::new();
        while words.len() < max_len {
            let step = self.cell(tok, &h);
            let mut best = EOS;
            for (i, &p) in step.probs.iter().enumerate().skip(EOS + 1) {
                if p > step.probs[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            words.push(best);
            tok = best;
            h = step.h;
        }
        Ok(words)
    }
}
