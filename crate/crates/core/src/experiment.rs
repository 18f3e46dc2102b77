//! End-to-end attack runs: dataset, observation, training, scoring with
//! baselines, and defense evaluation on a trained model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::defend::{apply_noise, blind_continuous, blind_text, unblind_output, unblind_text, BlindConfig, NoiseKind};
use crate::error::{Error, Result};
use crate::media::{MediaSample, Modality, Vocabulary};
use crate::neural::AdamConfig;
use crate::pipeline::{observe, Encoding, Observation, TraceForm};
use crate::rng;
use crate::sca_model::{
    evaluate, majority_baseline, mse, train, Example, History, LossWeights, Metric, Model, ModelSpec, TrainConfig,
};
use crate::trace_model::ChannelKind;
use crate::trace_repr::{MatrixShape, Overflow};
use crate::victim::{
    gen_dataset, run_victim, sample_image, Dataset, DatasetItem, DatasetManifest, ImageFamily, Split, VictimKind,
    SECRET_CLASSES,
};

/// Everything that determines an attack run. One seed feeds the dataset,
/// initialization, shuffle and noise streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub victim: VictimKind,
    pub train_samples: usize,
    pub test_samples: usize,
    pub height: usize,
    pub width: usize,
    pub family: ImageFamily,
    pub form: TraceForm,
    pub shape: MatrixShape,
    pub overflow: Overflow,
    pub latent: usize,
    /// Decoding cap for text victims.
    pub max_len: usize,
    pub noise: Option<NoiseKind>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl AttackPlan {
    /// Lookup victim on 16x16 blobs, cache-line traces folded to 1x64x64.
    pub fn image(seed: u64) -> Self {
        Self {
            victim: VictimKind::Lookup,
            train_samples: 512,
            test_samples: 128,
            height: 16,
            width: 16,
            family: ImageFamily::Blobs,
            form: TraceForm::Channel(ChannelKind::CACHE_LINE),
            shape: MatrixShape { channels: 1, side: 64 },
            overflow: Overflow::Error,
            latent: 32,
            max_len: 12,
            noise: None,
            lr: AdamConfig::default().lr,
            batch: 64,
            epochs: 10,
            weights: LossWeights::default(),
            seed,
        }
    }

    /// Hash-check victim on toy sentences, cache-line traces folded to 1x8x8.
    pub fn text(seed: u64) -> Self {
        Self {
            victim: VictimKind::HashCheck,
            shape: MatrixShape { channels: 1, side: 8 },
            ..Self::image(seed)
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut m = DatasetManifest::new(self.victim, 0, self.seed).with_split(self.train_samples, self.test_samples);
        m.height = self.height;
        m.width = self.width;
        m.family = self.family;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                ..Default::default()
            },
            batch: self.batch,
            epochs: self.epochs,
            weights: self.weights,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest().validate()?;
        self.train_config().validate()?;
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        if self.latent == 0 || self.max_len == 0 {
            return Err(Error::Config("latent and max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Observes `item` under `form`, with the plan's noise keyed by item index.
pub fn observe_item(item: &DatasetItem, form: &TraceForm, noise: Option<&NoiseKind>, seed: u64) -> Result<Observation> {
    let obs = observe(&item.trace, form)?;
    match noise {
        Some(k) => apply_noise(&obs, k, seed, item.index as u64),
        None => Ok(obs),
    }
}

/// A generated dataset with its fitted encoding and model-ready splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub encoding: Encoding,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Prepared {
    pub fn vocab(&self) -> Option<&Vocabulary> {
        self.data.vocab.as_ref()
    }

    pub fn test_items(&self) -> impl Iterator<Item = &DatasetItem> {
        self.data.split(Split::Test)
    }
}

pub fn prepare(plan: &AttackPlan) -> Result<Prepared> {
    plan.validate()?;
    prepare_from(plan, gen_dataset(&plan.manifest())?, None)
}

/// Observes and encodes an existing dataset, fitting normalization on its
/// training split unless `encoding` is given. Dataset shape fields of `plan`
/// are ignored in favour of the dataset's own.
pub fn prepare_from(plan: &AttackPlan, data: Dataset, encoding: Option<Encoding>) -> Result<Prepared> {
    let obs = |split| -> Result<Vec<Observation>> {
        data.split(split)
            .map(|it| observe_item(it, &plan.form, plan.noise.as_ref(), plan.seed))
            .collect()
    };
    let (train_obs, test_obs) = (obs(Split::Train)?, obs(Split::Test)?);
    let encoding = match encoding {
        Some(e) => e,
        None => Encoding::fit(plan.form, plan.shape, plan.overflow, &train_obs)?,
    };
    let examples = |split, obs: &[Observation]| -> Result<Vec<Example>> {
        data.split(split)
            .zip(obs)
            .map(|(it, o)| {
                Ok(Example {
                    input: encoding.tensor(o)?,
                    target: it.input.clone(),
                    label: it.secret,
                })
            })
            .collect()
    };
    let train = examples(Split::Train, &train_obs)?;
    let test = examples(Split::Test, &test_obs)?;
    Ok(Prepared {
        data,
        encoding,
        train,
        test,
    })
}

pub fn model_spec(plan: &AttackPlan, prepared: &Prepared) -> Result<ModelSpec> {
    let input = prepared.encoding.input_shape();
    let m = &prepared.data.manifest;
    match m.victim.modality() {
        Modality::Continuous => ModelSpec::continuous(input, m.height, m.width, plan.latent, SECRET_CLASSES),
        Modality::Text => {
            let vocab = prepared.vocab().ok_or_else(|| Error::Config("text dataset lacks a vocabulary".into()))?;
            ModelSpec::sequence(input, vocab.size(), plan.max_len, plan.latent, SECRET_CLASSES)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub prepared: Prepared,
    pub model: Model,
    pub history: History,
}

pub fn run(plan: &AttackPlan) -> Result<Outcome> {
    let prepared = prepare(plan)?;
    let spec = model_spec(plan, &prepared)?;
    let (model, history) = train(&spec, &prepared.train, &plan.train_config())?;
    Ok(Outcome {
        prepared,
        model,
        history,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    plan: AttackPlan,
    encoding: Encoding,
}

/// Writes `model` with the plan and encoding needed to attack new traces.
pub fn save_checkpoint<W: std::io::Write>(out: W, model: &Model, plan: &AttackPlan, encoding: &Encoding) -> Result<()> {
    model.save(
        out,
        &CheckpointMeta {
            plan: plan.clone(),
            encoding: *encoding,
        },
    )
}

pub fn load_checkpoint<R: std::io::Read>(input: R) -> Result<(Model, AttackPlan, Encoding)> {
    let (model, meta): (Model, CheckpointMeta) = Model::load(input)?;
    Ok((model, meta.plan, meta.encoding))
}

pub fn reconstruct_all(model: &Model, examples: &[Example]) -> Result<Vec<MediaSample>> {
    examples.iter().map(|e| model.reconstruct(&e.input)).collect()
}

/// MSE of predicting every test image by the mean training image.
pub fn mean_image_baseline(train: &[Example], test: &[Example]) -> Result<f64> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("baseline needs training images".into()))?
        .target
        .pixels()?;
    let mut mean = vec![0.0; first.len()];
    for e in train {
        for (m, v) in mean.iter_mut().zip(e.target.pixels()?) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let total = test
        .iter()
        .map(|e| mse(&mean, e.target.pixels()?))
        .sum::<Result<f64>>()?;
    Ok(total / test.len().max(1) as f64)
}

/// Expected word accuracy of guessing each word uniformly from the vocabulary.
pub fn random_word_baseline(vocab: &Vocabulary) -> f64 {
    1.0 / vocab.num_words() as f64
}

/// One scored metric next to the reference it has to beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub value: f64,
    pub baseline: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,baseline\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.metric, r.value, r.baseline);
    }
    s
}

/// Reconstruction quality plus privacy-class agreement on `test`, each with
/// its baseline (mean image or uniform words; majority class).
pub fn score(model: &Model, prepared: &Prepared, test: &[Example]) -> Result<(Vec<MetricRow>, Vec<MediaSample>)> {
    let recons = reconstruct_all(model, test)?;
    let refs: Vec<MediaSample> = test.iter().map(|e| e.target.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let (metric, baseline) = match model.modality() {
        Modality::Continuous => (Metric::Mse, mean_image_baseline(&prepared.train, test)?),
        Modality::Text => (
            Metric::WordAccuracy,
            random_word_baseline(prepared.vocab().ok_or_else(|| Error::Config("missing vocabulary".into()))?),
        ),
    };
    let main = evaluate(model, &recons, &refs, &labels, metric)?;
    let privacy = evaluate(model, &recons, &refs, &labels, Metric::PrivacyMatch)?;
    Ok((
        vec![
            MetricRow {
                metric,
                value: main.mean,
                baseline,
            },
            MetricRow {
                metric: Metric::PrivacyMatch,
                value: privacy.mean,
                baseline: majority_baseline(&labels),
            },
        ],
        recons,
    ))
}

/// Where blinding masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSource {
    SameFamily,
    OtherFamily,
}

impl std::str::FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-family" => Ok(Self::SameFamily),
            "other-family" => Ok(Self::OtherFamily),
            _ => Err(Error::Config(format!("unknown mask source {s:?} (same-family, other-family)"))),
        }
    }
}

impl std::fmt::Display for MaskSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SameFamily => "same-family",
            Self::OtherFamily => "other-family",
        })
    }
}

/// Attack scores against private inputs before and after blinding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindingReport {
    pub metric: Metric,
    pub alpha: f64,
    /// Per test sample: score of the plain attack against the private input.
    pub unblinded: Vec<f64>,
    /// Per test sample: score of the attack on the blinded run against the private input.
    pub blinded: Vec<f64>,
    /// Per test sample: score of the attack on the blinded run against the mask.
    pub blinded_vs_mask: Vec<f64>,
    /// Largest relative error of the recovered victim output.
    pub max_recovery_error: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl BlindingReport {
    pub fn mean_unblinded(&self) -> f64 {
        mean(&self.unblinded)
    }

    pub fn mean_blinded(&self) -> f64 {
        mean(&self.blinded)
    }

    /// Fraction of samples whose blinded reconstruction is closer to the
    /// mask than to the private input.
    pub fn closer_to_mask(&self) -> f64 {
        let closer = self
            .blinded
            .iter()
            .zip(&self.blinded_vs_mask)
            .filter(|(p, m)| match self.metric {
                Metric::Mse => m < p,
                _ => m > p,
            })
            .count();
        closer as f64 / self.blinded.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,unblinded,blinded,blinded_vs_mask\n");
        for (i, ((u, b), m)) in self.unblinded.iter().zip(&self.blinded).zip(&self.blinded_vs_mask).enumerate() {
            let _ = writeln!(s, "{i},{u},{b},{m}");
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "metric,alpha,unblinded,blinded,closer_to_mask,max_recovery_error\n{},{},{},{},{},{}\n",
            self.metric,
            self.alpha,
            self.mean_unblinded(),
            self.mean_blinded(),
            self.closer_to_mask(),
            self.max_recovery_error
        )
    }
}

fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs())) / scale
}

/// Runs the victim on blinded test inputs, attacks the resulting traces with
/// `model` and recovers the victim outputs. Continuous masks are drawn from
/// the `mask` stream; text masks insert `mask_word`.
pub fn evaluate_blinding(
    model: &Model,
    plan: &AttackPlan,
    prepared: &Prepared,
    cfg: &BlindConfig,
    source: MaskSource,
    mask_word: usize,
) -> Result<BlindingReport> {
    let program = &prepared.data.program;
    // blinded sentences are longer than the folding capacity
    let encoding = Encoding {
        overflow: Overflow::Truncate,
        ..prepared.encoding
    };
    let metric = match model.modality() {
        Modality::Continuous => Metric::Mse,
        Modality::Text => Metric::WordAccuracy,
    };
    let score = |recon: &MediaSample, reference: &MediaSample| -> Result<f64> {
        match metric {
            Metric::Mse => mse(recon.pixels()?, reference.pixels()?),
            _ => Ok(crate::sca_model::word_accuracy(reference.words()?, recon.words()?)),
        }
    };
    let mut report = BlindingReport {
        metric,
        alpha: cfg.alpha(),
        unblinded: Vec::new(),
        blinded: Vec::new(),
        blinded_vs_mask: Vec::new(),
        max_recovery_error: 0.0,
    };
    for (item, ex) in prepared.test_items().zip(&prepared.test) {
        let plain = model.reconstruct(&ex.input)?;
        report.unblinded.push(score(&plain, &item.input)?);
        let (blinded, mask) = match &item.input {
            MediaSample::Continuous { height, width, .. } => {
                let family = match (source, prepared.data.manifest.family) {
                    (MaskSource::SameFamily, f) => f,
                    (MaskSource::OtherFamily, ImageFamily::Blobs) => ImageFamily::Gratings,
                    (MaskSource::OtherFamily, ImageFamily::Gratings) => ImageFamily::Blobs,
                };
                let mut r = rng::stream(plan.seed, "mask", item.index as u64);
                let (mask, _) = sample_image(family, *height, *width, &mut r);
                (blind_continuous(&item.input, &mask, cfg)?, mask)
            }
            MediaSample::TokenSeq { tokens } => {
                let b = blind_text(tokens, mask_word, cfg)?;
                let mask_words = vec![mask_word; item.input.words()?.len()];
                (MediaSample::TokenSeq { tokens: b }, MediaSample::sentence(&mask_words))
            }
        };
        let run = run_victim(program, &blinded)?;
        let obs = observe_item(
            &DatasetItem {
                trace: run.trace,
                ..item.clone()
            },
            &plan.form,
            plan.noise.as_ref(),
            plan.seed,
        )?;
        let recon = model.reconstruct(&encoding.tensor(&obs)?)?;
        report.blinded.push(score(&recon, &item.input)?);
        report.blinded_vs_mask.push(score(&recon, &mask)?);
        let err = match (&run.output, &item.output) {
            (MediaSample::Continuous { values: pb, .. }, MediaSample::Continuous { values: p, .. }) => {
                let pm = run_victim(program, &mask)?.output;
                let rec = unblind_output(pb, pm.pixels()?, cfg.alpha())?;
                relative_error(&rec, p)
            }
            (MediaSample::TokenSeq { tokens: pb }, MediaSample::TokenSeq { tokens: p }) => {
                f64::from(u8::from(unblind_text(pb, cfg)? != *p))
            }
            _ => return Err(Error::Modality("victim output changed modality".into())),
        };
        report.max_recovery_error = report.max_recovery_error.max(err);
    }
    Ok(report)
}

/// Scores `model` on the test split observed through `noise` instead of the
/// plan's own noise, without retraining.
pub fn evaluate_under_noise(
    model: &Model,
    plan: &AttackPlan,
    prepared: &Prepared,
    noise: &NoiseKind,
) -> Result<Vec<MetricRow>> {
    let encoding = Encoding {
        overflow: Overflow::Truncate,
        ..prepared.encoding
    };
    let test = prepared
        .test_items()
        .map(|it| {
            let obs = observe_item(it, &plan.form, Some(noise), plan.seed)?;
            Ok(Example {
                input: encoding.tensor(&obs)?,
                target: it.input.clone(),
                label: it.secret,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score(model, prepared, &test)?.0)
}
