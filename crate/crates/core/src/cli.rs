//! Command-line front end. [`dispatch`] parses argv, runs one subcommand and
//! maps the outcome to an exit code.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::delta::{
    read_delta, sparsity_report, write_delta, ComposedEmbedding, DeltaHeader, DeltaTable, Mode,
};
use crate::eval::{
    delta_norm_ranking, eval_similarity, nearest_neighbors, neighbor_shift, qvec_score,
    read_linguistic, read_similarity, similarity_table, Neighbor, SimilarityRow,
};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::model::{label_examples, read_labeled, token_set, Example, LabelSet, LabeledExample};
use crate::store::{parse_vectors_filtered, write_vectors, EmbeddingMatrix, Vocabulary};
use crate::trainer::{self, Keep, RegImpl, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

const TRAIN_OUTPUTS: &str = "\
Outputs written to --out:
  manifest.json  resolved flags and input digests, written before training
  delta.txt      nonzero delta rows, `# delta dim= c= mode= seed=` header
  composed.txt   base + delta in the input vector format
  params.txt     classifier weights: `name bias w1 .. wd` per class
  labels.txt     class names in id order
  report.tsv     epoch task_loss penalty total_loss dev_accuracy nonzero_rows moving_distance";

const SWEEP_OUTPUTS: &str = "\
Runs fixed, finetune, then delta at every --cs value. Outputs written to --out:
  manifest.json
  sweep.tsv  run mode c best_epoch best_dev_accuracy final_dev_accuracy final_task_loss
             final_penalty final_total_loss final_nonzero_rows final_nonzero_fraction
             final_moving_distance";

#[derive(Debug, Parser)]
#[command(
    name = "delta-embed",
    version,
    about = "Learn sparse delta corrections to pretrained word vectors and evaluate them",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one classifier and delta table.
    #[command(after_help = TRAIN_OUTPUTS)]
    Train(TrainArgs),
    /// Train several regimes on the same data.
    #[command(after_help = SWEEP_OUTPUTS)]
    Sweep(SweepArgs),
    /// Spearman correlation on every `*.txt` similarity dataset in a directory.
    #[command(after_help = "Prints TSV: dataset pairs used skipped rho_base [rho_tuned delta]")]
    EvalSim(EvalSimArgs),
    /// QVEC alignment against a linguistic property matrix.
    #[command(after_help = "Prints TSV: embedding score shared_words")]
    EvalQvec(EvalQvecArgs),
    /// Nearest neighbours by cosine, before and after a delta.
    #[command(
        after_help = "Prints TSV: rank word cosine, or rank before cosine_before after cosine_after with --delta"
    )]
    Neighbors(NeighborsArgs),
    /// Words with the largest delta norms.
    #[command(after_help = "Prints TSV: rank word norm")]
    Inspect(InspectArgs),
    /// Write base + delta as a standalone vector file.
    ExportComposed(ExportArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum RestrictVocab {
    /// Keep only words seen in the labeled data and --extra-vocab files.
    #[default]
    Task,
    /// Keep the whole vector file.
    None,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Pretrained vectors, one `word v1 .. vd` line per word.
    #[arg(long)]
    vectors: PathBuf,
    /// Labeled training data, `label<TAB>text` per line.
    #[arg(long)]
    train: PathBuf,
    /// Labeled dev data used to pick the kept epoch.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RestrictVocab::Task)]
    restrict_vocab: RestrictVocab,
    /// Extra files whose whitespace-separated tokens are kept by the task restriction.
    #[arg(long)]
    extra_vocab: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct OptimArgs {
    /// proximal or penalty.
    #[arg(long, default_value_t = RegImpl::Proximal)]
    reg_impl: RegImpl,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// fixed, finetune or delta.
    #[arg(long, default_value_t = Mode::Delta)]
    mode: Mode,
    /// L21 coefficient, delta mode only.
    #[arg(long, default_value_t = 1e-4)]
    c: f64,
    #[command(flatten)]
    optim: OptimArgs,
    /// Which epoch's parameters to write: best (by dev accuracy) or last.
    #[arg(long, default_value_t = Keep::Best)]
    keep: Keep,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated L21 coefficients for the delta runs.
    #[arg(long, value_delimiter = ',', default_value = "1e-5,1e-4,1e-3")]
    cs: Vec<f64>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmbeddingArgs {
    #[arg(long)]
    vectors: PathBuf,
    /// Delta export to add to the vectors.
    #[arg(long)]
    delta: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalSimArgs {
    #[command(flatten)]
    emb: EmbeddingArgs,
    /// Directory of `word1 word2 score` files.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct EvalQvecArgs {
    #[command(flatten)]
    emb: EmbeddingArgs,
    /// `word prop:weight ..` per line.
    #[arg(long)]
    oracle: PathBuf,
}

#[derive(Debug, Args)]
struct NeighborsArgs {
    #[command(flatten)]
    emb: EmbeddingArgs,
    #[arg(long)]
    word: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// File of candidate words, whitespace-separated.
    #[arg(long)]
    restrict: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    delta: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    delta: PathBuf,
    /// Output vector file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

type Outcome = Result<(), Failure>;

fn usage(message: impl Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.to_string(),
    }
}

fn data(context: impl Display) -> impl FnOnce(&dyn Display) -> Failure {
    move |e| Failure {
        code: EXIT_DATA,
        message: format!("{context}: {e}"),
    }
}

trait Context<T> {
    fn context(self, what: impl Display) -> Result<T, Failure>;
}

impl<T, E: Display> Context<T> for Result<T, E> {
    fn context(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| data(what)(&e))
    }
}

/// Runs the command line `argv` (program name first). Results go to `out`,
/// diagnostics to `err`.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(&a, out, err),
        Command::Sweep(a) => run_sweep(&a, out, err),
        Command::EvalSim(a) => run_eval_sim(&a, out),
        Command::EvalQvec(a) => run_eval_qvec(&a, out),
        Command::Neighbors(a) => run_neighbors(&a, out),
        Command::Inspect(a) => run_inspect(&a, out, err),
        Command::ExportComposed(a) => run_export(&a),
    };
    match result.and_then(|()| out.flush().context("stdout")) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).context(path.display())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .context(path.display())
}

fn load_vectors(
    path: &Path,
    keep: Option<&HashSet<String>>,
) -> Result<(Vocabulary, EmbeddingMatrix), Failure> {
    parse_vectors_filtered(open(path)?, keep).context(path.display())
}

fn load_delta(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<DeltaTable, Failure> {
    read_delta(open(path)?)
        .and_then(|f| f.into_table(vocab, dim))
        .context(path.display())
}

/// Base vectors and, when `--delta` was given, the delta table over them.
fn load_embedding(
    args: &EmbeddingArgs,
) -> Result<(Vocabulary, EmbeddingMatrix, Option<DeltaTable>), Failure> {
    let (vocab, base) = load_vectors(&args.vectors, None)?;
    let delta = match &args.delta {
        Some(p) => Some(load_delta(p, &vocab, base.dim())?),
        None => None,
    };
    Ok((vocab, base, delta))
}

fn compose<'a>(
    base: &'a EmbeddingMatrix,
    delta: &'a DeltaTable,
) -> Result<ComposedEmbedding<'a>, Failure> {
    ComposedEmbedding::new(base, delta).context("delta")
}

struct Prepared {
    labels: LabelSet,
    vocab: Vocabulary,
    base: EmbeddingMatrix,
    train: Vec<Example>,
    dev: Vec<Example>,
}

fn read_examples(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    read_labeled(open(path)?).context(path.display())
}

fn prepare(args: &DataArgs) -> Result<Prepared, Failure> {
    let raw_train = read_examples(&args.train)?;
    let raw_dev = match &args.dev {
        Some(p) => read_examples(p)?,
        None => Vec::new(),
    };
    let labels = LabelSet::infer(raw_train.iter().chain(&raw_dev).map(|(l, _)| l.as_str()));
    let train: Vec<LabeledExample> =
        label_examples(&raw_train, &labels).context(args.train.display())?;
    let dev: Vec<LabeledExample> = label_examples(&raw_dev, &labels).context("dev")?;

    let keep = match args.restrict_vocab {
        RestrictVocab::None => None,
        RestrictVocab::Task => {
            let mut words = token_set(train.iter().chain(&dev));
            for p in &args.extra_vocab {
                for line in open(p)?.lines() {
                    let line = line.context(p.display())?;
                    words.extend(line.split_whitespace().map(str::to_lowercase));
                }
            }
            Some(words)
        }
    };
    let (vocab, base) = load_vectors(&args.vectors, keep.as_ref())?;
    let encode = |xs: &[LabeledExample]| {
        xs.iter()
            .map(|e| Example::encode(&vocab, e))
            .collect::<Vec<_>>()
    };
    Ok(Prepared {
        train: encode(&train),
        dev: encode(&dev),
        labels,
        vocab,
        base,
    })
}

impl DataArgs {
    fn record(&self, config: &mut BTreeMap<String, String>) {
        let path = |p: &Path| p.display().to_string();
        config.insert("vectors".into(), path(&self.vectors));
        config.insert("train".into(), path(&self.train));
        config.insert(
            "dev".into(),
            self.dev.as_deref().map(path).unwrap_or_default(),
        );
        let restrict = match self.restrict_vocab {
            RestrictVocab::Task => "task",
            RestrictVocab::None => "none",
        };
        config.insert("restrict-vocab".into(), restrict.into());
        let extra: Vec<String> = self.extra_vocab.iter().map(|p| path(p)).collect();
        config.insert("extra-vocab".into(), extra.join(","));
    }

    fn add_inputs(&self, manifest: &mut RunManifest) -> Outcome {
        manifest
            .add_input("vectors", &self.vectors)
            .context("manifest")?;
        manifest
            .add_input("train", &self.train)
            .context("manifest")?;
        if let Some(dev) = &self.dev {
            manifest.add_input("dev", dev).context("manifest")?;
        }
        for p in &self.extra_vocab {
            manifest.add_input("extra-vocab", p).context("manifest")?;
        }
        Ok(())
    }
}

impl OptimArgs {
    fn record(&self, config: &mut BTreeMap<String, String>) {
        config.insert("reg-impl".into(), self.reg_impl.to_string());
        config.insert("lr".into(), self.lr.to_string());
        config.insert("epochs".into(), self.epochs.to_string());
        config.insert("batch-size".into(), self.batch_size.to_string());
        config.insert("seed".into(), self.seed.to_string());
    }

    fn config(&self, mode: Mode, c: f64) -> TrainConfig {
        TrainConfig {
            mode,
            c,
            reg_impl: self.reg_impl,
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            shuffle: true,
        }
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => usage(e),
        other => data("training")(&other),
    }
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Outcome {
    std::fs::create_dir_all(out_dir).context(out_dir.display())?;
    manifest
        .write(&out_dir.join(MANIFEST_FILE))
        .context("manifest")
}

fn run_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let config = args.optim.config(args.mode, args.c);
    config.validate().map_err(train_failure)?;

    let mut settings = BTreeMap::new();
    args.data.record(&mut settings);
    args.optim.record(&mut settings);
    settings.insert("mode".into(), args.mode.to_string());
    settings.insert("c".into(), args.c.to_string());
    settings.insert("keep".into(), args.keep.to_string());
    settings.insert("out".into(), args.out.display().to_string());
    let mut manifest = RunManifest::new("train", settings);
    args.data.add_inputs(&mut manifest)?;

    let p = prepare(&args.data)?;
    write_manifest(&args.out, &manifest)?;
    let _ = writeln!(
        err,
        "training {} on {} examples, vocabulary {}",
        config.label(),
        p.train.len(),
        p.vocab.len()
    );

    let digest = p.base.digest();
    let outcome = trainer::train(&config, &p.train, &p.dev, p.labels.len(), &p.base)
        .map_err(train_failure)?;
    debug_assert_eq!(digest, p.base.digest());
    let snap = outcome.snapshot(args.keep);

    let header = DeltaHeader {
        dim: p.base.dim(),
        c: config.effective_c(),
        mode: config.mode,
        seed: config.seed,
    };
    let path = args.out.join("delta.txt");
    write_delta(&p.vocab, &snap.delta, &header, create(&path)?).context(path.display())?;

    let path = args.out.join("composed.txt");
    let composed = compose(&p.base, &snap.delta)?;
    write_vectors(&p.vocab, &composed, create(&path)?).context(path.display())?;

    let path = args.out.join("params.txt");
    snap.params
        .write(&p.labels, create(&path)?)
        .context(path.display())?;

    let path = args.out.join("labels.txt");
    p.labels.write(create(&path)?).context(path.display())?;

    let path = args.out.join("report.tsv");
    std::fs::write(&path, outcome.report.to_tsv()).context(path.display())?;

    let stats = &outcome.report.epochs[snap.epoch - 1];
    let (nonzero, fraction) = sparsity_report(&snap.delta, p.vocab.len());
    let dev = stats
        .dev_accuracy
        .map_or_else(|| "NA".to_owned(), |a| a.to_string());
    writeln!(
        out,
        "run\tkept_epoch\tdev_accuracy\tnonzero_rows\tnonzero_fraction\tmoving_distance"
    )
    .context("stdout")?;
    writeln!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}",
        config.label(),
        snap.epoch,
        dev,
        nonzero,
        fraction,
        stats.moving_distance
    )
    .context("stdout")?;
    if outcome.report.skipped_examples > 0 {
        let _ = writeln!(
            err,
            "warning: {} training examples had no known token and were skipped",
            outcome.report.skipped_examples
        );
    }
    Ok(())
}

fn run_sweep(args: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let template = args
        .optim
        .config(Mode::Delta, args.cs.first().copied().unwrap_or(1e-4));
    let configs = template.regime_grid(&args.cs);
    for c in &configs {
        c.validate().map_err(train_failure)?;
    }

    let mut settings = BTreeMap::new();
    args.data.record(&mut settings);
    args.optim.record(&mut settings);
    let cs: Vec<String> = args.cs.iter().map(f64::to_string).collect();
    settings.insert("cs".into(), cs.join(","));
    settings.insert("out".into(), args.out.display().to_string());
    let mut manifest = RunManifest::new("sweep", settings);
    args.data.add_inputs(&mut manifest)?;

    let p = prepare(&args.data)?;
    write_manifest(&args.out, &manifest)?;

    let entries = trainer::sweep(&configs, &p.train, &p.dev, p.labels.len(), &p.base);
    let table = trainer::sweep_table(&entries, p.vocab.len());
    let path = args.out.join("sweep.tsv");
    std::fs::write(&path, &table).context(path.display())?;
    write!(out, "{table}").context("stdout")?;

    let failed: Vec<String> = entries
        .iter()
        .filter_map(|e| {
            e.result
                .as_ref()
                .err()
                .map(|x| format!("{}: {x}", e.config.label()))
        })
        .collect();
    for f in &failed {
        let _ = writeln!(err, "run failed: {f}");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(data("sweep")(&format!(
            "{} of {} runs failed",
            failed.len(),
            entries.len()
        )))
    }
}

fn run_eval_sim(args: &EvalSimArgs, out: &mut dyn Write) -> Outcome {
    let (vocab, base, delta) = load_embedding(&args.emb)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.data)
        .context(args.data.display())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data(args.data.display())(&"no *.txt datasets"));
    }

    let tuned = delta.as_ref().map(|d| compose(&base, d)).transpose()?;
    let mut rows = Vec::new();
    for path in &files {
        let name = path.file_stem().unwrap_or_default().to_string_lossy();
        let ds = read_similarity(&name, open(path)?).context(path.display())?;
        rows.push(SimilarityRow {
            dataset: ds.name.clone(),
            pairs: ds.len(),
            base: eval_similarity(&base, &vocab, &ds),
            tuned: tuned.as_ref().map(|t| eval_similarity(t, &vocab, &ds)),
        });
    }
    write!(out, "{}", similarity_table(&rows)).context("stdout")
}

fn run_eval_qvec(args: &EvalQvecArgs, out: &mut dyn Write) -> Outcome {
    let (vocab, base, delta) = load_embedding(&args.emb)?;
    let oracle = read_linguistic(open(&args.oracle)?).context(args.oracle.display())?;
    writeln!(out, "embedding\tscore\tshared_words").context("stdout")?;
    let s = qvec_score(&base, &vocab, &oracle).context("qvec")?;
    writeln!(out, "base\t{}\t{}", s.score, s.shared_words).context("stdout")?;
    if let Some(d) = &delta {
        let s = qvec_score(&compose(&base, d)?, &vocab, &oracle).context("qvec")?;
        writeln!(out, "tuned\t{}\t{}", s.score, s.shared_words).context("stdout")?;
    }
    Ok(())
}

fn run_neighbors(args: &NeighborsArgs, out: &mut dyn Write) -> Outcome {
    let (vocab, base, delta) = load_embedding(&args.emb)?;
    if args.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let restrict: Option<Vec<String>> = match &args.restrict {
        Some(p) => {
            let mut words = Vec::new();
            for line in open(p)?.lines() {
                words.extend(
                    line.context(p.display())?
                        .split_whitespace()
                        .map(str::to_owned),
                );
            }
            Some(words)
        }
        None => None,
    };
    let restrict = restrict.as_deref();
    let word = args.word.as_str();

    let Some(d) = &delta else {
        let nn = nearest_neighbors(&base, &vocab, word, args.k, restrict).context("neighbors")?;
        writeln!(out, "rank\tword\tcosine").context("stdout")?;
        for (i, n) in nn.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}", i + 1, n.word, n.cosine).context("stdout")?;
        }
        return Ok(());
    };
    let tuned = compose(&base, d)?;
    let shift = neighbor_shift(&base, &vocab, &tuned, &vocab, word, args.k, restrict)
        .context("neighbors")?;
    let cell = |n: Option<&Neighbor>| {
        n.map_or_else(
            || "NA\tNA".to_owned(),
            |n| format!("{}\t{}", n.word, n.cosine),
        )
    };
    writeln!(out, "rank\tbefore\tcosine_before\tafter\tcosine_after").context("stdout")?;
    for i in 0..shift.before.len().max(shift.after.len()) {
        writeln!(
            out,
            "{}\t{}\t{}",
            i + 1,
            cell(shift.before.get(i)),
            cell(shift.after.get(i))
        )
        .context("stdout")?;
    }
    Ok(())
}

fn run_inspect(args: &InspectArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let (vocab, table) = read_delta(open(&args.delta)?)
        .and_then(|f| f.into_standalone())
        .context(args.delta.display())?;
    writeln!(out, "rank\tword\tnorm").context("stdout")?;
    for (i, (word, norm)) in delta_norm_ranking(&table, &vocab, args.top)
        .iter()
        .enumerate()
    {
        writeln!(out, "{}\t{word}\t{norm}", i + 1).context("stdout")?;
    }
    let _ = writeln!(err, "{} nonzero delta rows", table.nonzero_count());
    Ok(())
}

fn run_export(args: &ExportArgs) -> Outcome {
    let (vocab, base) = load_vectors(&args.vectors, None)?;
    let delta = load_delta(&args.delta, &vocab, base.dim())?;
    let composed = compose(&base, &delta)?;
    write_vectors(&vocab, &composed, create(&args.out)?).context(args.out.display())
}
