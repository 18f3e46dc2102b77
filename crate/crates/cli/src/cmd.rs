use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use manifold_sca::cache_sim::{repeat_concat, CacheConfig, PPTrace};
use manifold_sca::defend::{apply_noise, BlindConfig, NoiseKind};
use manifold_sca::experiment::{
    evaluate_blinding, evaluate_under_noise, load_checkpoint, metrics_csv, model_spec, observe_item, prepare_from,
    save_checkpoint, score, AttackPlan, MaskSource, MetricRow, Prepared,
};
use manifold_sca::localize::{attention_map, auto_topk, map_to_instructions, precision, rank_records, Flagged};
use manifold_sca::media::{MediaSample, Modality};
use manifold_sca::pipeline::{Observation, TraceForm};
use manifold_sca::sca_model::{train, Explicit, LossWeights, Metric, Model};
use manifold_sca::trace_model::{derive_side_channel, parse_memory_trace, ChannelKind, SideChannelTrace};
use manifold_sca::trace_repr::{encode_pp, fold, fold_values, MatrixShape, Overflow, TraceMatrix};
use manifold_sca::victim::{gen_dataset, DatasetManifest, ImageFamily, VictimKind};

use crate::conf::Conf;
use crate::io::{self, in_file};
use crate::{Cli, CliError, Command};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut conf = Conf::load(cli.config.as_deref())?;
    let seed = conf.get("seed", cli.seed, 0u64)?;
    match cli.command {
        Command::Gen(a) => {
            conf.record("command", "gen");
            let victim: VictimKind = conf.get("victim", parse(a.victim)?, VictimKind::Lookup)?;
            let n = conf.get("n", a.n, 640usize)?;
            if n == 0 {
                return Err(CliError::Usage("--n must be at least 1".into()));
            }
            let train = conf.get("train", a.train, n - n / 5)?;
            if train > n {
                return Err(CliError::Usage(format!("--train {train} exceeds --n {n}")));
            }
            let mut m = DatasetManifest::new(victim, n, seed).with_split(train, n - train);
            m.family = conf.get("family", parse(a.family)?, ImageFamily::Blobs)?;
            m.height = conf.get("height", a.height, 16usize)?;
            m.width = conf.get("width", a.width, 16usize)?;
            let out = conf.require_path("out", a.out)?;
            let data = gen_dataset(&m)?;
            io::write_dataset(&out, &data)?;
            conf.write_to(&out)?;
            io::say(&format!("{} samples ({train} train) written to {}\n", data.items.len(), out.display()));
            Ok(())
        }
        Command::Derive(a) => {
            conf.record("command", "derive");
            let input = conf.require_path("input", a.input)?;
            let kind: ChannelKind = conf.get("kind", parse(a.kind)?, ChannelKind::CACHE_LINE)?;
            let trace = parse_memory_trace(&io::read(&input)?).map_err(in_file(&input))?;
            finish_file(&mut conf, a.out, &derive_side_channel(&trace, kind).to_text())
        }
        Command::Fold(a) => {
            conf.record("command", "fold");
            let input = conf.require_path("input", a.input)?;
            let shape = MatrixShape::new(conf.get("k", a.k, 1usize)?, conf.get("n", a.n, 64usize)?)?;
            let overflow = conf.get("overflow", parse(a.overflow)?, Overflow::Error)?;
            let matrix = match read_trace(&input)? {
                TraceFile::Channel(t) => fold(&t, shape, overflow),
                TraceFile::Reals(v) => fold_values(&v, shape, overflow),
                TraceFile::Bits(t) => encode_pp(&t.vectors, shape, overflow),
            }
            .map_err(in_file(&input))?;
            finish_file(&mut conf, a.out, &matrix.to_text())
        }
        Command::Pp(a) => {
            conf.record("command", "pp");
            let input = conf.require_path("input", a.input)?;
            let cfg = CacheConfig::new(
                conf.get("sets", a.sets, 64usize)?,
                conf.get("ways", a.ways, 8usize)?,
                conf.get("line", a.line, 64u64)?,
            )?;
            let epoch = conf.get("epoch", a.epoch, 1usize)?;
            let repeat = conf.get("repeat", a.repeat, 1usize)?;
            let trace = parse_memory_trace(&io::read(&input)?).map_err(in_file(&input))?;
            let pp = repeat_concat(trace.records(), cfg, epoch, repeat)?;
            finish_file(&mut conf, a.out, &pp.to_text())
        }
        Command::Noise(a) => {
            conf.record("command", "noise");
            let input = conf.require_path("input", a.input)?;
            let kind: NoiseKind = conf.require("scheme", parse(a.scheme)?)?;
            let index = conf.get("index", a.index, 0u64)?;
            let obs = match read_trace(&input)? {
                TraceFile::Channel(t) => Observation::Scalar(t.records.iter().map(|&r| r as f64).collect()),
                TraceFile::Reals(v) => Observation::Scalar(v),
                TraceFile::Bits(t) => Observation::Bits(t),
            };
            let text = match apply_noise(&obs, &kind, seed, index).map_err(in_file(&input))? {
                Observation::Scalar(v) => v.iter().map(|x| format!("{x}\n")).collect(),
                Observation::Bits(t) => t.to_text(),
            };
            finish_file(&mut conf, a.out, &text)
        }
        Command::Train(a) => {
            conf.record("command", "train");
            let data_dir = conf.require_path("data", a.data)?;
            let data = io::read_dataset(&data_dir)?;
            let m = &data.manifest;
            let defaults = LossWeights::default();
            let plan = AttackPlan {
                victim: m.victim,
                train_samples: m.train,
                test_samples: m.test,
                height: m.height,
                width: m.width,
                family: m.family,
                form: conf.get("form", parse(a.form)?, TraceForm::Channel(ChannelKind::CACHE_LINE))?,
                shape: MatrixShape::new(conf.get("k", a.k, 1usize)?, conf.get("n", a.n, 64usize)?)?,
                overflow: conf.get("overflow", parse(a.overflow)?, Overflow::Error)?,
                latent: conf.get("latent", a.latent, 32usize)?,
                max_len: conf.get("max_len", a.max_len, 12usize)?,
                noise: conf.opt("noise", parse(a.noise)?)?,
                lr: conf.get("lr", a.lr, 2e-4)?,
                batch: conf.get("batch", a.batch, 64usize)?,
                epochs: conf.get("epochs", a.epochs, 10usize)?,
                weights: LossWeights {
                    lambda: conf.get("lambda", a.lambda, defaults.lambda)?,
                    implicit: conf.get("w_implicit", a.w_implicit, defaults.implicit)?,
                    privacy: conf.get("w_privacy", a.w_privacy, defaults.privacy)?,
                    explicit: conf.get("explicit", parse::<Explicit>(a.explicit)?, Explicit::Mse)?,
                },
                seed,
            };
            let out = conf.require_path("out", a.out)?;
            plan.train_config().validate()?;
            let prepared = prepare_from(&plan, data, None)?;
            let spec = model_spec(&plan, &prepared)?;
            let (model, history) = train(&spec, &prepared.train, &plan.train_config())?;
            let ckpt = out.join("model.ckpt");
            std::fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
            let file = File::create(&ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
            save_checkpoint(std::io::BufWriter::new(file), &model, &plan, &prepared.encoding)?;
            io::write(&out.join("history.csv"), history.to_csv())?;
            conf.write_to(&out)?;
            if let Some(last) = history.epochs.last() {
                io::say(&format!(
                    "trained {} epochs: L_explicit {} L_implicit {} L_privacy {} D_loss {}\n",
                    history.epochs.len(),
                    last.explicit,
                    last.implicit,
                    last.privacy,
                    last.d_loss
                ));
            }
            Ok(())
        }
        Command::Attack(a) => {
            conf.record("command", "attack");
            let session = Session::open(&mut conf, a.data, a.model)?;
            let metric = conf.get("metric", a.metric, "all".to_string())?;
            let wanted: Option<Metric> = match metric.as_str() {
                "all" => None,
                m => Some(m.parse()?),
            };
            let out = conf.require_path("out", a.out)?;
            let (rows, recons) = score(&session.model, &session.prepared, &session.prepared.test)?;
            if wanted.is_some_and(|w| !rows.iter().any(|r| r.metric == w)) {
                return Err(CliError::Usage(format!(
                    "metric {metric} does not apply to {} victims",
                    session.plan.victim
                )));
            }
            let rows: Vec<MetricRow> = rows.into_iter().filter(|r| wanted.map_or(true, |w| r.metric == w)).collect();
            for (item, recon) in session.prepared.test_items().zip(&recons) {
                let base = out.join("recon").join(format!("{:05}", item.index));
                io::write(&base.with_extension("txt"), recon.to_text())?;
                if let (MediaSample::TokenSeq { tokens }, Some(v)) = (recon, session.prepared.vocab()) {
                    io::write(&base.with_extension("words"), format!("{}\n", v.render(tokens)))?;
                }
                if recon.modality() == Modality::Continuous {
                    io::write(&base.with_extension("pgm"), recon.to_pgm()?)?;
                }
            }
            let csv = metrics_csv(&rows);
            io::write(&out.join("metrics.csv"), &csv)?;
            conf.write_to(&out)?;
            io::say(&csv);
            Ok(())
        }
        Command::Localize(a) => {
            conf.record("command", "localize");
            let session = Session::open(&mut conf, a.data, a.model)?;
            let topk = conf.get("topk", a.topk, "auto".to_string())?;
            let fixed: Option<usize> = match topk.as_str() {
                "auto" => None,
                k => Some(k.parse().map_err(|_| CliError::Usage(format!("--topk {k:?}: expected auto or a count")))?),
            };
            let out = conf.require_path("out", a.out)?;
            localize(&session, fixed, &out)?;
            conf.write_to(&out)
        }
        Command::Defend(a) => {
            conf.record("command", "defend");
            let session = Session::open(&mut conf, a.data, a.model)?;
            let out = conf.require_path("out", a.out)?;
            if let Some(noise) = conf.opt::<NoiseKind>("noise", parse(a.noise)?)? {
                let clean = score(&session.model, &session.prepared, &session.prepared.test)?.0;
                let noisy = evaluate_under_noise(&session.model, &session.plan, &session.prepared, &noise)?;
                let mut csv = String::from("metric,clean,noisy,baseline\n");
                for (c, n) in clean.iter().zip(&noisy) {
                    let _ = writeln!(csv, "{},{},{},{}", c.metric, c.value, n.value, c.baseline);
                }
                io::write(&out.join("noise.csv"), &csv)?;
                io::say(&csv);
            } else {
                let cfg = BlindConfig::new(conf.get("alpha", a.alpha, 0.1)?)?;
                let source: MaskSource = conf.get("mask", parse(a.mask)?, MaskSource::SameFamily)?;
                let word = conf.get("mask_word", a.mask_word, "the".to_string())?;
                let mask_word = match session.prepared.vocab() {
                    Some(v) => v
                        .token(&word)
                        .ok_or_else(|| CliError::Usage(format!("mask word {word:?} is not in the vocabulary")))?,
                    None => 0,
                };
                let report = evaluate_blinding(&session.model, &session.plan, &session.prepared, &cfg, source, mask_word)?;
                io::write(&out.join("blinding.csv"), report.to_csv())?;
                io::write(&out.join("summary.csv"), report.summary_csv())?;
                io::say(&report.summary_csv());
            }
            conf.write_to(&out)
        }
    }
}

/// Parses an optional flag value with the core type's parser.
fn parse<T>(v: Option<String>) -> Result<Option<T>, CliError>
where
    T: std::str::FromStr<Err = manifold_sca::Error>,
{
    v.map(|s| s.parse::<T>().map_err(CliError::from)).transpose()
}

/// Emits a single-file result and its resolved configuration next to it.
fn finish_file(conf: &mut Conf, out: Option<PathBuf>, text: &str) -> Result<(), CliError> {
    let out = conf.path("out", out)?;
    io::emit(out.as_deref(), text)?;
    if let Some(p) = out {
        let mut name = p.file_name().unwrap_or_default().to_os_string();
        name.push(".run.conf");
        io::write(&p.with_file_name(name), conf.to_text())?;
    }
    Ok(())
}

enum TraceFile {
    Channel(SideChannelTrace),
    Reals(Vec<f64>),
    Bits(PPTrace),
}

/// Side-channel traces start with `kind=`, Prime+Probe traces with an
/// `S t` header; anything else is one real value per line.
fn read_trace(path: &Path) -> Result<TraceFile, CliError> {
    let text = io::read(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let parsed = if first.starts_with("kind=") {
        SideChannelTrace::from_text(&text).map(TraceFile::Channel)
    } else if first.split_whitespace().count() == 2 {
        PPTrace::from_text(&text).map(TraceFile::Bits)
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| manifold_sca::Error::Parse {
                    line: i + 1,
                    msg: format!("expected a real value, got {l:?}"),
                })
            })
            .collect::<manifold_sca::Result<Vec<_>>>()
            .map(TraceFile::Reals)
    };
    parsed.map_err(in_file(path))
}

/// A dataset observed through a trained checkpoint's encoding.
struct Session {
    model: Model,
    plan: AttackPlan,
    prepared: Prepared,
}

impl Session {
    fn open(conf: &mut Conf, data: Option<PathBuf>, model: Option<PathBuf>) -> Result<Self, CliError> {
        let data_dir = conf.require_path("data", data)?;
        let ckpt = conf.require_path("model", model)?;
        let file = File::open(&ckpt).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", ckpt.display())))?;
        let (model, plan, encoding) = load_checkpoint(BufReader::new(file)).map_err(in_file(&ckpt))?;
        let data = io::read_dataset(&data_dir)?;
        if data.manifest.victim != plan.victim {
            return Err(CliError::Data(format!(
                "checkpoint was trained on {} traces, dataset holds {}",
                plan.victim, data.manifest.victim
            )));
        }
        let prepared = prepare_from(&plan, data, Some(encoding))?;
        Ok(Self { model, plan, prepared })
    }
}

fn localize(session: &Session, fixed: Option<usize>, out: &Path) -> Result<(), CliError> {
    let program = &session.prepared.data.program;
    let items: Vec<_> = session.prepared.test_items().collect();
    let mut picks = Vec::with_capacity(items.len());
    let (mut prec, mut leaky, mut total) = (0.0, 0usize, 0usize);
    let mut k_used = 0;
    for item in &items {
        let obs = observe_item(item, &session.plan.form, session.plan.noise.as_ref(), session.plan.seed)?;
        let matrix: TraceMatrix = session.prepared.encoding.matrix(&obs)?;
        let weights = attention_map(&session.model, &matrix)?;
        let k = fixed.unwrap_or_else(|| auto_topk(matrix.valid_len));
        k_used = k_used.max(k);
        let top = rank_records(&weights, k);
        let mask = program.leaky_mask(&item.trace);
        prec += precision(&top, &mask);
        leaky += mask.iter().filter(|&&m| m).count();
        total += mask.len();
        picks.push(top);
    }
    let flagged: Vec<Flagged> = items
        .iter()
        .zip(&picks)
        .map(|(it, p)| Flagged {
            records: p,
            trace: &it.trace,
        })
        .collect();
    let report = map_to_instructions(&flagged, &session.plan.form, &program.symbols)?;
    io::write(&out.join("leakage.csv"), report.to_csv())?;
    io::write(&out.join("addresses.txt"), report.addresses_text())?;
    let n = items.len().max(1) as f64;
    let summary = format!(
        "traces,topk,precision,leaky_fraction\n{},{k_used},{},{}\n",
        items.len(),
        prec / n,
        leaky as f64 / total.max(1) as f64
    );
    io::write(&out.join("summary.csv"), &summary)?;
    io::say(&format!("{}{summary}", report.to_csv()));
    Ok(())
}
