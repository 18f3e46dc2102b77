//! File helpers with path context and the on-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.txt   key=value dataset manifest
//! <dir>/symbols.txt    victim symbol map
//! <dir>/labels.csv     index,split,secret
//! <dir>/samples/       secret inputs (.txt, plus .pgm for images)
//! <dir>/traces/        memory access traces (.trace)
//! <dir>/outputs/       public victim outputs (.txt, plus .pgm for images)
//! ```

use std::path::{Path, PathBuf};

use manifold_sca::media::Modality;
use manifold_sca::media::MediaSample;
use manifold_sca::trace_model::parse_memory_trace;
use manifold_sca::victim::{toy_vocabulary, Dataset, DatasetItem, DatasetManifest, Split, VictimProgram};

use crate::CliError;

fn ctx(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(ctx(path))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(ctx(dir))?;
    }
    std::fs::write(path, contents).map_err(ctx(path))
}

/// Writes to `path`, or to stdout when absent.
pub fn emit(path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write(p, contents),
        None => {
            say(contents);
            Ok(())
        }
    }
}

/// Writes to stdout; a closed reader (e.g. `| head`) is not an error.
pub fn say(contents: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(contents.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("msca: stdout: {e}");
        }
    }
}

/// Wraps a core error with the file it came from.
pub fn in_file(path: &Path) -> impl Fn(manifold_sca::Error) -> CliError + '_ {
    move |e| CliError::from(e).context(&path.display().to_string())
}

fn item_name(index: usize) -> String {
    format!("{index:05}")
}

fn write_sample(dir: &Path, index: usize, sample: &MediaSample) -> Result<(), CliError> {
    let base = dir.join(item_name(index));
    write(&base.with_extension("txt"), sample.to_text())?;
    if sample.modality() == Modality::Continuous {
        write(&base.with_extension("pgm"), sample.to_pgm()?)?;
    }
    Ok(())
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), CliError> {
    write(&dir.join("manifest.txt"), data.manifest.to_text())?;
    write(&dir.join("symbols.txt"), data.program.symbols.to_text())?;
    let mut labels = String::from("index,split,secret\n");
    for it in &data.items {
        let split = match it.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        labels.push_str(&format!("{},{split},{}\n", it.index, it.secret));
        write_sample(&dir.join("samples"), it.index, &it.input)?;
        write_sample(&dir.join("outputs"), it.index, &it.output)?;
        write(
            &dir.join("traces").join(item_name(it.index)).with_extension("trace"),
            it.trace.to_text(),
        )?;
    }
    write(&dir.join("labels.csv"), labels)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = DatasetManifest::from_text(&read(&manifest_path)?).map_err(in_file(&manifest_path))?;
    let labels_path = dir.join("labels.csv");
    let labels = read(&labels_path)?;
    let mut items = Vec::with_capacity(manifest.samples);
    for (i, line) in labels.lines().skip(1).enumerate() {
        let bad = || CliError::Data(format!("{}:{}: expected index,split,secret", labels_path.display(), i + 2));
        let f: Vec<&str> = line.split(',').collect();
        let [index, split, secret] = f[..] else { return Err(bad()) };
        let index: usize = index.parse().map_err(|_| bad())?;
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad()),
        };
        let file = |sub: &str, ext: &str| -> PathBuf { dir.join(sub).join(item_name(index)).with_extension(ext) };
        let sample = |p: PathBuf| -> Result<MediaSample, CliError> { MediaSample::from_text(&read(&p)?).map_err(in_file(&p)) };
        let trace_path = file("traces", "trace");
        items.push(DatasetItem {
            index,
            split,
            secret: secret.parse().map_err(|_| bad())?,
            input: sample(file("samples", "txt"))?,
            output: sample(file("outputs", "txt"))?,
            trace: parse_memory_trace(&read(&trace_path)?).map_err(in_file(&trace_path))?,
        });
    }
    if items.len() != manifest.samples {
        return Err(CliError::Data(format!(
            "{}: {} labelled samples, manifest says {}",
            dir.display(),
            items.len(),
            manifest.samples
        )));
    }
    let vocab = (manifest.victim.modality() == Modality::Text).then(toy_vocabulary);
    Ok(Dataset {
        program: VictimProgram::new(manifest.victim),
        manifest,
        vocab,
        items,
    })
}
