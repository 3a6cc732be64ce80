use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cloze_core::corpus::{
    corpus_stats, generate_synthetic, load_corpus_dir, relabel_entities, relabel_map, serialize_question_file,
    LoadedExample, SynthMode, SynthSpec,
};
use cloze_core::eval::{compare_systems, dump_attention, parse_label_file, per_category_report, EvalError};
use cloze_core::features::{featurize_corpus, Annotations, FeatureError, FeatureGroup, Parses};
use cloze_core::par::{self, Execution};
use cloze_core::ranker::{
    ablation_run, parse_groups, predict_ranker, train_ranker, RankerConfig, RankerError, RankerModel,
};
use cloze_core::reader::{
    ensemble_predict, predict_reader, train_reader, QuestionEncoding, ReaderConfig, ReaderError, ReaderModel,
};
use cloze_core::{ClozeExample, CorpusError, EntityId, FeatureConfig};

#[derive(Parser)]
#[command(name = "cloze", version, about = "Cloze-style reading comprehension: entity ranker and attentive reader")]
struct Cli {
    /// Run corpus loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus directory and rewrite it in canonical form.
    Prep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Renumber entity markers by first occurrence.
        #[arg(long)]
        relabel: bool,
    },
    /// Print corpus statistics.
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        /// exact-match | paraphrase | partial-clue
        #[arg(long)]
        mode: SynthMode,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the feature-based entity ranker.
    TrainClassifier(TrainClassifierArgs),
    /// Train the attentive neural reader.
    TrainReader(TrainReaderArgs),
    /// Score a model on a labeled corpus.
    Eval {
        /// Classifier or reader model file.
        #[arg(long, required_unless_present = "ensemble")]
        model: Option<PathBuf>,
        /// Directory of reader models whose probabilities are averaged.
        #[arg(long, conflicts_with = "model")]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Category label file (`example_id<TAB>category`).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Second model for a side-by-side per-category table.
        #[arg(long, requires = "labels", requires = "model")]
        compare: Option<PathBuf>,
    },
    /// Retrain the classifier without each feature group.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Comma-separated groups to drop; all groups when omitted.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        ranker: RankerFlags,
    },
    /// Print `example_id<TAB>prediction` for every example.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Dump reader attention weights as TSV.
    InspectAttention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RankerFlags {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 1e-5)]
    l2: f64,
}

impl RankerFlags {
    fn config(&self, seed: u64) -> RankerConfig {
        RankerConfig { epochs: self.epochs, learning_rate: self.lr, margin: self.margin, l2: self.l2, seed }
    }
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch TSV log; printed to stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    ranker: RankerFlags,
}

#[derive(Args)]
struct TrainReaderArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    gru_hidden: usize,
    #[arg(long, default_value_t = 50_000)]
    vocab_capacity: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 10.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Word-vector text file (`token v1 v2 ...`).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    embed_init_scale: f64,
    #[arg(long)]
    no_relabel: bool,
    /// final | mean
    #[arg(long, default_value = "final")]
    question_encoding: QuestionEncoding,
}

impl TrainReaderArgs {
    fn config(&self, execution: Execution) -> ReaderConfig {
        ReaderConfig {
            embed_dim: self.embed_dim,
            gru_hidden: self.gru_hidden,
            vocab_capacity: self.vocab_capacity,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            dropout_p: self.dropout,
            clip_norm: self.clip_norm,
            max_epochs: self.epochs,
            seed: self.seed,
            pretrained_embeddings_path: self.pretrained.clone(),
            embed_init_scale: self.embed_init_scale,
            relabel: !self.no_relabel,
            question_encoding: self.question_encoding,
            execution,
        }
    }
}

enum Model {
    Classifier(RankerModel),
    Reader(ReaderModel),
}

impl Model {
    fn load(path: &Path) -> Result<Model> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let model = match bytes.get(..4) {
            Some(b"RNK1") => Model::Classifier(RankerModel::read_from(&mut bytes.as_slice())?),
            Some(b"RDR1") => Model::Reader(ReaderModel::read_from(&mut bytes.as_slice())?),
            _ => bail!("{}: not a classifier or reader model", path.display()),
        };
        Ok(model)
    }

    fn display_name(&self) -> &'static str {
        match self {
            Model::Classifier(_) => "Classifier",
            Model::Reader(_) => "Neural net",
        }
    }

    fn predict(&self, loaded: &[LoadedExample], exec: Execution) -> Result<Vec<EntityId>> {
        match self {
            Model::Classifier(m) => {
                let featurized = featurize(loaded, exec)?;
                Ok(featurized.iter().map(|f| predict_ranker(m, f)).collect::<Result<_, _>>()?)
            }
            Model::Reader(m) => {
                let examples = examples(loaded);
                let preds = par::map_with(exec, &examples, |ex| predict_reader(m, ex).map(|p| p.0));
                Ok(preds.into_iter().collect::<Result<_, _>>()?)
            }
        }
    }
}

fn load(dir: &Path) -> Result<Vec<LoadedExample>> {
    let loaded = load_corpus_dir(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    if loaded.is_empty() {
        bail!("{}: no .question files", dir.display());
    }
    Ok(loaded)
}

fn examples(loaded: &[LoadedExample]) -> Vec<ClozeExample> {
    loaded.iter().map(|l| l.example.clone()).collect()
}

fn featurize(loaded: &[LoadedExample], exec: Execution) -> Result<Vec<cloze_core::features::FeaturizedExample>> {
    let annotations: Vec<Annotations> =
        loaded.iter().map(|l| Annotations { parses: l.parses.clone(), pos: l.pos.clone() }).collect();
    Ok(featurize_corpus(&examples(loaded), &annotations, &FeatureConfig::default(), exec)?)
}

fn gold_map(loaded: &[LoadedExample]) -> Result<BTreeMap<String, EntityId>> {
    let mut gold = BTreeMap::new();
    for l in loaded {
        if gold.insert(l.example.source_id.clone(), l.example.answer).is_some() {
            bail!("duplicate example id {:?}", l.example.source_id);
        }
    }
    Ok(gold)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn render_deps(parses: &Parses) -> String {
    let mut s = String::new();
    for a in parses.question.iter().chain(&parses.passage) {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", a.sentence_index, a.head_token, a.relation, a.dependent_token);
    }
    s
}

fn write_example(dir: &Path, ex: &ClozeExample, parses: Option<&Parses>, pos: Option<&Path>) -> Result<()> {
    let base = dir.join(format!("{}.question", ex.source_id));
    write_file(&base, &serialize_question_file(ex))?;
    if let Some(spans) = &ex.sentence_spans {
        let text: String = spans.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
        write_file(&base.with_extension("sents"), text.as_bytes())?;
    }
    if let Some(p) = parses {
        write_file(&base.with_extension("deps"), render_deps(p).as_bytes())?;
    }
    if let Some(src) = pos {
        fs::copy(src, base.with_extension("pos")).with_context(|| format!("copying {}", src.display()))?;
    }
    Ok(())
}

fn prep(input: &Path, out: &Path, relabel: bool) -> Result<()> {
    let loaded = load(input)?;
    gold_map(&loaded)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for l in &loaded {
        l.example.validate()?;
        let (ex, parses) = if relabel {
            let map = relabel_map(&l.example);
            (relabel_entities(&l.example), l.parses.as_ref().map(|p| p.remap(&map)))
        } else {
            (l.example.clone(), l.parses.clone())
        };
        let pos = l.pos.as_ref().map(|_| l.path.with_extension("pos"));
        write_example(out, &ex, parses.as_ref(), pos.as_deref())?;
    }
    eprintln!("wrote {} examples to {}", loaded.len(), out.display());
    Ok(())
}

fn stats(input: &Path) -> Result<()> {
    let s = corpus_stats(&examples(&load(input)?))?;
    println!("examples\t{}", s.example_count);
    println!("avg_passage_tokens\t{:.1}", s.avg_passage_tokens);
    println!("avg_passage_sentences\t{:.1}", s.avg_passage_sentences);
    println!("avg_question_tokens\t{:.1}", s.avg_question_tokens);
    println!("avg_entities\t{:.1}", s.avg_entities);
    Ok(())
}

fn synth(mode: SynthMode, n: usize, seed: u64, out: &Path) -> Result<()> {
    let corpus = generate_synthetic(&SynthSpec::new(mode, n, seed))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for ex in &corpus {
        write_example(out, ex, None, None)?;
    }
    eprintln!("wrote {} {} examples to {}", corpus.len(), mode.name(), out.display());
    Ok(())
}

fn train_classifier(a: &TrainClassifierArgs, exec: Execution) -> Result<()> {
    let train = featurize(&load(&a.train)?, exec)?;
    let dev = featurize(&load(&a.dev)?, exec)?;
    let trained = train_ranker(&train, &dev, &a.ranker.config(a.seed))?;
    write_file(&a.out, &trained.model.to_bytes())?;
    write_or_print(a.log.as_deref(), &trained.log_tsv())?;
    let best = &trained.log[trained.best_epoch];
    eprintln!("best epoch {} dev accuracy {:.4}", best.epoch, best.dev_accuracy);
    Ok(())
}

fn train_reader_cmd(a: &TrainReaderArgs, exec: Execution) -> Result<()> {
    let train = examples(&load(&a.train)?);
    let dev = examples(&load(&a.dev)?);
    let trained = train_reader(&train, &dev, &a.config(exec))?;
    write_file(&a.out, &trained.model.to_bytes())?;
    write_or_print(a.log.as_deref(), &trained.log_tsv())?;
    let best = &trained.log[trained.best_epoch - 1];
    eprintln!("best epoch {} dev accuracy {:.4}", best.epoch, best.dev_accuracy);
    Ok(())
}

fn load_ensemble(dir: &Path) -> Result<Vec<ReaderModel>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut models = Vec::new();
    for p in paths {
        match Model::load(&p)? {
            Model::Reader(m) => models.push(m),
            Model::Classifier(_) => bail!("{}: ensembles take reader models only", p.display()),
        }
    }
    if models.is_empty() {
        bail!("{}: no models", dir.display());
    }
    Ok(models)
}

fn eval(
    model: Option<&Path>,
    ensemble: Option<&Path>,
    data: &Path,
    labels: Option<&Path>,
    compare: Option<&Path>,
    exec: Execution,
) -> Result<()> {
    let loaded = load(data)?;
    let gold = gold_map(&loaded)?;
    let ids: Vec<String> = loaded.iter().map(|l| l.example.source_id.clone()).collect();
    let keyed = |preds: Vec<EntityId>| -> BTreeMap<String, EntityId> { ids.iter().cloned().zip(preds).collect() };

    let (name, preds) = match (model, ensemble) {
        (Some(p), _) => {
            let m = Model::load(p)?;
            (m.display_name(), keyed(m.predict(&loaded, exec)?))
        }
        (None, Some(dir)) => {
            let models = load_ensemble(dir)?;
            let exs = examples(&loaded);
            let preds = par::map_with(exec, &exs, |ex| ensemble_predict(&models, ex));
            ("Neural net", keyed(preds.into_iter().collect::<Result<_, _>>()?))
        }
        (None, None) => bail!("either --model or --ensemble is required"),
    };

    let Some(labels) = labels else {
        let acc = cloze_core::eval::accuracy(&preds, &gold)?;
        println!("accuracy\t{acc:.4}");
        return Ok(());
    };
    let text = fs::read_to_string(labels).with_context(|| format!("reading {}", labels.display()))?;
    let labels = parse_label_file(&text)?;
    let report = per_category_report(&preds, &gold, &labels)?;
    match compare {
        None => print!("{}", report.render()),
        Some(other) => {
            let m2 = Model::load(other)?;
            let report2 = per_category_report(&keyed(m2.predict(&loaded, exec)?), &gold, &labels)?;
            print!("{}", compare_systems(&report, &report2, (name, m2.display_name()))?.render());
        }
    }
    Ok(())
}

fn ablate(
    train: &Path,
    dev: &Path,
    groups: &[String],
    config: &RankerConfig,
    out: Option<&Path>,
    exec: Execution,
) -> Result<()> {
    let groups = if groups.is_empty() { FeatureGroup::ALL.to_vec() } else { parse_groups(groups)? };
    let train = featurize(&load(train)?, exec)?;
    let dev = featurize(&load(dev)?, exec)?;
    let report = ablation_run(&train, &dev, &groups, config)?;
    write_or_print(out, &report.to_tsv())
}

fn predict(model: &Path, data: &Path, exec: Execution) -> Result<()> {
    let loaded = load(data)?;
    let preds = Model::load(model)?.predict(&loaded, exec)?;
    let mut out = std::io::stdout().lock();
    for (l, p) in loaded.iter().zip(preds) {
        writeln!(out, "{}\t{p}", l.example.source_id)?;
    }
    Ok(())
}

fn inspect_attention(model: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let Model::Reader(m) = Model::load(model)? else {
        bail!("{}: attention needs a reader model", model.display());
    };
    let exs = examples(&load(data)?);
    let mut buf = Vec::new();
    dump_attention(&m, &exs, &mut buf)?;
    match out {
        Some(p) => write_file(p, &buf),
        None => Ok(std::io::stdout().write_all(&buf)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Prep { input, out, relabel } => prep(&input, &out, relabel),
        Command::Stats { input } => stats(&input),
        Command::Synth { mode, n, seed, out } => synth(mode, n, seed, &out),
        Command::TrainClassifier(a) => train_classifier(&a, exec),
        Command::TrainReader(a) => train_reader_cmd(&a, exec),
        Command::Eval { model, ensemble, data, labels, compare } => {
            eval(model.as_deref(), ensemble.as_deref(), &data, labels.as_deref(), compare.as_deref(), exec)
        }
        Command::Ablate { train, dev, seed, groups, out, ranker } => {
            ablate(&train, &dev, &groups, &ranker.config(seed), out.as_deref(), exec)
        }
        Command::Predict { model, data } => predict(&model, &data, exec),
        Command::InspectAttention { model, data, out } => inspect_attention(&model, &data, out.as_deref()),
    }
}

fn corpus_cause<'a>(err: &'a (dyn std::error::Error + 'static)) -> Option<&'a CorpusError> {
    if let Some(c) = err.downcast_ref::<CorpusError>() {
        return Some(c);
    }
    match (err.downcast_ref::<ReaderError>(), err.downcast_ref::<FeatureError>(), err.downcast_ref::<EvalError>()) {
        (Some(ReaderError::Corpus(c)), _, _) => Some(c),
        (_, Some(FeatureError::Corpus(c)), _) => Some(c),
        (_, _, Some(EvalError::Reader(ReaderError::Corpus(c)))) => Some(c),
        _ => None,
    }
}

/// Content that parses but breaks a task invariant.
fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        corpus_cause(e).is_some_and(CorpusError::is_validation)
            || matches!(
                e.downcast_ref::<ReaderError>(),
                Some(
                    ReaderError::AnswerNotCandidate(_)
                        | ReaderError::EmptyCandidateSet
                        | ReaderError::EmptyPassage
                        | ReaderError::EmptyQuestion
                )
            )
            || matches!(
                e.downcast_ref::<RankerError>(),
                Some(RankerError::NoGoldCandidate(_) | RankerError::EmptyCandidateSet)
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 3 } else { 2 })
        }
    }
}
