use super::*;
use crate::media::{EOS, SOS};
use crate::neural::gradcheck;
use rand::Rng;

fn mini_image_spec() -> ModelSpec {
    ModelSpec::continuous([1, 8, 8], 8, 8, 6, 3).unwrap()
}

fn mini_text_spec() -> ModelSpec {
    let mut spec = ModelSpec::sequence([1, 4, 4], 7, 5, 4, 2).unwrap();
    if let DecoderSpec::Sequence { gru, .. } = &mut spec.decoder {
        gru.embed = 3;
        gru.hidden = 5;
    }
    spec
}

fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::stream(seed, "sca-test", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> MediaSample {
    MediaSample::image(h, w, random_tensor(&[h * w], seed, 0.0, 1.0).into_data()).unwrap()
}

/// Central differences over every parameter and input coordinate of the
/// generator objective.
fn end_to_end_check(model: &Model, input: &Tensor, target: &MediaSample, label: usize, w: &LossWeights) -> f64 {
    let (_, _, g_params, g_input) = model.generator_gradient(input, target, label, w).unwrap();
    let mut point = model.param_vector();
    let n = point.len();
    point.extend_from_slice(input.data());
    let mut analytic = g_params;
    analytic.extend_from_slice(g_input.data());
    let mut scratch = model.clone();
    gradcheck::check_fn(&point, &analytic, 1e-5, |v| {
        scratch.set_param_vector(&v[..n])?;
        let x = Tensor::new(input.shape().to_vec(), v[n..].to_vec())?;
        let mut g = scratch.zero_generator_grads();
        Ok(scratch.generator_step(&x, target, label, w, 1.0, &mut g)?.1)
    })
    .unwrap()
}

#[test]
fn zero_input_zero_bias_latent_is_fc_bias() {
    let mut model = mini_image_spec().init(1).unwrap();
    let n = model.encoder.params().len();
    for (i, t) in model.encoder.params_mut().iter_mut().enumerate() {
        if t.shape().len() == 1 && i != n - 1 {
            t.data_mut().fill(0.0);
        }
    }
    let bias = model.encoder.params()[n - 1].clone();
    let z = model.encode(&Tensor::zeros(&[1, 8, 8])).unwrap();
    assert_eq!(z.data(), bias.data());
    let x = random_tensor(&[1, 8, 8], 2, 0.0, 1.0);
    assert_eq!(model.encode(&x).unwrap(), model.encode(&x).unwrap());
}

#[test]
fn continuous_decoder_outputs_in_unit_interval() {
    let model = mini_image_spec().init(3).unwrap();
    for seed in 0..5 {
        let z = random_tensor(&[6], seed, -20.0, 20.0);
        let out = model.decode_continuous(&z).unwrap();
        assert!(out.pixels().unwrap().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out, model.decode_continuous(&z).unwrap());
    }
}

#[test]
fn eos_dominated_projection_gives_empty_sentence() {
    let mut model = mini_text_spec().init(4).unwrap();
    let Decoder::Sequence { net, .. } = &mut model.decoder else {
        unreachable!()
    };
    net.params_mut()[7].data_mut().fill(0.0);
    let b = net.params_mut()[8].data_mut();
    b.fill(0.0);
    b[EOS] = 1.0;
    let out = model.decode_sequence(&Tensor::vector(vec![0.3; 4]), 5).unwrap();
    assert_eq!(out.tokens().unwrap(), &[SOS, EOS]);
}

#[test]
fn greedy_never_emits_sos_and_terminates() {
    let mut model = mini_text_spec().init(5).unwrap();
    let Decoder::Sequence { net, .. } = &mut model.decoder else {
        unreachable!()
    };
    // SOS always has the top logit; it must be skipped
    net.params_mut()[8].data_mut()[SOS] = 100.0;
    for seed in 0..10 {
        let z = random_tensor(&[4], seed, -3.0, 3.0);
        let s = model.decode_sequence(&z, 5).unwrap();
        let t = s.tokens().unwrap();
        assert_eq!(t[0], SOS);
        assert_eq!(*t.last().unwrap(), EOS);
        assert!(t[1..].iter().all(|&x| x != SOS));
        assert!(s.words().unwrap().len() <= 5);
        assert_eq!(s, model.decode_sequence(&z, 5).unwrap());
    }
    assert!(model.decode_sequence(&Tensor::vector(vec![0.0; 4]), 0).is_err());
}

#[test]
fn zero_discriminator_scores_one_half() {
    let mut model = mini_image_spec().init(6).unwrap();
    for t in model
        .disc
        .trunk
        .params_mut()
        .iter_mut()
        .chain(model.disc.realism.params_mut())
        .chain(model.disc.privacy.params_mut())
    {
        t.data_mut().fill(0.0);
    }
    let (score, logits) = model.discriminate(&random_image(8, 8, 1)).unwrap();
    assert_eq!(score, 0.5);
    assert_eq!(logits, vec![0.0; 3]);
    assert!(matches!(
        model.discriminate(&MediaSample::sentence(&[2])),
        Err(Error::Modality(_))
    ));
}

#[test]
fn total_loss_terms() {
    let r = random_tensor(&[1, 4, 4], 7, 0.0, 1.0);
    let w = LossWeights::default();
    let (parts, g) = total_loss(&r, &r, 0.3, &[0.1, 0.2], 1, &w).unwrap();
    assert_eq!(parts.explicit, 0.0);
    assert!(g.recon.data().iter().all(|&v| v == 0.0));
    let other = random_tensor(&[1, 4, 4], 8, 0.0, 1.0);
    let zero = LossWeights { lambda: 0.0, ..w };
    let (p, _) = total_loss(&r, &other, 0.3, &[0.1, 0.2], 1, &zero).unwrap();
    assert!(p.explicit > 0.0);
    assert_eq!(p.total(&zero), p.implicit + p.privacy);
    assert!(total_loss(&r, &Tensor::zeros(&[1, 2, 2]), 0.0, &[0.0], 0, &w).is_err());
    assert!(matches!(
        total_loss(&r, &r, f64::NAN, &[0.0], 0, &w),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let model = mini_image_spec().init(9).unwrap();
    let x = random_tensor(&[1, 8, 8], 10, 0.0, 1.0);
    let target = random_image(8, 8, 11);
    for explicit in [Explicit::Mse] {
        let w = LossWeights {
            explicit,
            ..Default::default()
        };
        let err = end_to_end_check(&model, &x, &target, 2, &w);
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn sequence_gradient_matches_finite_differences() {
    let model = mini_text_spec().init(12).unwrap();
    let x = random_tensor(&[1, 4, 4], 13, 0.0, 1.0);
    let target = MediaSample::sentence(&[2, 5, 6, 2]);
    let err = end_to_end_check(&model, &x, &target, 0, &LossWeights::default());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn word_accuracy_positional() {
    assert!((word_accuracy(&[2, 3, 4], &[2, 9, 4]) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(word_accuracy(&[2, 3], &[2, 3, 4, 5]), 1.0);
    assert_eq!(word_accuracy(&[2, 3, 4, 5], &[2]), 0.25);
    assert_eq!(word_accuracy(&[], &[]), 1.0);
    assert_eq!(majority_baseline(&[0, 1, 1, 3]), 0.5);
    assert!("bleu".parse::<Metric>().is_err());
    assert_eq!("word_accuracy".parse::<Metric>().unwrap(), Metric::WordAccuracy);
}

#[test]
fn evaluate_mse_zero_on_identity() {
    let model = mini_image_spec().init(14).unwrap();
    let imgs: Vec<MediaSample> = (0..3).map(|s| random_image(8, 8, s)).collect();
    let s = evaluate(&model, &imgs, &imgs, &[], Metric::Mse).unwrap();
    assert_eq!(s.mean, 0.0);
    assert_eq!(s.per_sample.len(), 3);
    let p = evaluate(&model, &imgs, &imgs, &[0, 1, 2], Metric::PrivacyMatch).unwrap();
    assert!(p.per_sample.iter().all(|&v| v == 0.0 || v == 1.0));
}

fn one_sample() -> Vec<Example> {
    vec![Example {
        input: random_tensor(&[1, 8, 8], 20, 0.0, 1.0),
        target: random_image(8, 8, 21),
        label: 1,
    }]
}

#[test]
fn single_sample_overfits() {
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 0.01,
            ..Default::default()
        },
        epochs: 400,
        seed: 3,
        ..Default::default()
    };
    let (_, h) = train(&mini_image_spec(), &one_sample(), &cfg).unwrap();
    assert_eq!(h.epochs.len(), 400);
    let last = h.epochs.last().unwrap().explicit;
    assert!(last < 1e-3, "{last}");
}

#[test]
fn explicit_only_training_decreases_monotonically() {
    let cfg = TrainConfig {
        epochs: 50,
        seed: 4,
        weights: LossWeights {
            implicit: 0.0,
            privacy: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let (_, h) = train(&mini_image_spec(), &one_sample(), &cfg).unwrap();
    for w in h.epochs.windows(2) {
        assert!(w[1].explicit < w[0].explicit, "{:?}", h.epochs);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let examples: Vec<Example> = (0..5)
        .map(|i| Example {
            input: random_tensor(&[1, 8, 8], 30 + i, 0.0, 1.0),
            target: random_image(8, 8, 40 + i),
            label: i as usize % 3,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 3,
        batch: 2,
        seed: 8,
        ..Default::default()
    };
    let (m1, h1) = train(&mini_image_spec(), &examples, &cfg).unwrap();
    let (m2, h2) = train(&mini_image_spec(), &examples, &cfg).unwrap();
    assert_eq!(h1.to_csv(), h2.to_csv());
    assert_eq!(m1, m2);
    assert!(h1.to_csv().starts_with("epoch,L_explicit,L_implicit,L_privacy,D_loss\n"));
    assert!(train(&mini_image_spec(), &[], &cfg).is_err());
}

#[test]
fn text_training_runs() {
    let examples: Vec<Example> = (0..4)
        .map(|i| Example {
            input: random_tensor(&[1, 4, 4], 50 + i, 0.0, 1.0),
            target: MediaSample::sentence(&[2 + i as usize, 3]),
            label: i as usize % 2,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch: 2,
        seed: 1,
        ..Default::default()
    };
    let (_, h) = train(&mini_text_spec(), &examples, &cfg).unwrap();
    assert_eq!(h.epochs.len(), 2);
    assert!(h.epochs[0].explicit > 0.0);
}

#[test]
fn checkpoint_roundtrip() {
    let model = mini_text_spec().init(15).unwrap();
    let mut bytes = Vec::new();
    model.save(&mut bytes, &"norm").unwrap();
    let (back, meta): (Model, String) = Model::load(bytes.as_slice()).unwrap();
    assert_eq!(back, model);
    assert_eq!(meta, "norm");
}
