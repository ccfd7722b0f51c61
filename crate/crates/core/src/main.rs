use anyhow::{bail, Context, Result};
use cae_lstm::cae::Mode;
use cae_lstm::corpus::{
    load_dataset, load_features, load_split, save_features, save_split, synthesize_dataset, write_jsonl, SynthSpec,
};
use cae_lstm::generator::{decode_paragraph, DecodeMode, DecodeOptions, Vocabulary};
use cae_lstm::metrics::{ObjectLexicon, LEXICON_SIZE};
use cae_lstm::parallel::{map_slice, Execution};
use cae_lstm::rng::RngStream;
use cae_lstm::train::{
    build_lexicon, evaluate, prepare_data, tokenize_records, train_counts, Checkpoint, EvalContext, Event, Trainer,
    TrainingData,
};
use cae_lstm::{CaeLstm, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cae-lstm", version, about = "Topic-conditioned image paragraph generation")]
struct Cli {
    /// Directory holding the default dataset, feature, split and vocabulary files.
    #[arg(long, global = true, env = "CAE_LSTM_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Run per-image work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, region features, split and object list.
    SynthData(SynthArgs),
    /// Build the vocabulary and object lexicon from the training split.
    BuildVocab(VocabArgs),
    /// Train phase 1 (cross-entropy + reconstruction), phase 2 (self-critical) or both.
    Train(TrainArgs),
    /// Decode paragraphs for images in a feature file.
    Generate(GenerateArgs),
    /// Greedy-decode a split and report CIDEr-D, BLEU-4 and coverage.
    Evaluate(EvaluateArgs),
    /// Dump topic vectors, stop probabilities and attention maps for one image.
    InspectTopics(InspectArgs),
}

#[derive(Args)]
struct DataPaths {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
}

impl DataPaths {
    fn dataset(&self, dir: &Path) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| dir.join("dataset.jsonl"))
    }

    fn features(&self, dir: &Path) -> PathBuf {
        self.features.clone().unwrap_or_else(|| dir.join("features.bin"))
    }

    fn split(&self, dir: &Path) -> PathBuf {
        self.split.clone().unwrap_or_else(|| dir.join("split.json"))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureFormat {
    Bin,
    Jsonl,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic-corpus spec; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    object_types: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    raw_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "bin")]
    format: FeatureFormat,
    /// Output directory; defaults to the data directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VocabArgs {
    #[command(flatten)]
    paths: DataPaths,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<usize>,
    /// Candidate object tokens, one per line; without it every
    /// non-stopword vocabulary token is a candidate.
    #[arg(long)]
    objects: Option<PathBuf>,
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[arg(long)]
    lexicon_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    paths: DataPaths,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    phase: Phase,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr1: Option<f64>,
    #[arg(long)]
    lr2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs1: Option<usize>,
    #[arg(long)]
    epochs2: Option<usize>,
    #[arg(long)]
    max_steps1: Option<u64>,
    #[arg(long)]
    max_steps2: Option<u64>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Resume from (or, for phase 2, start from) this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Image ids to decode; all images in the feature file by default.
    #[arg(long, num_args = 1..)]
    ids: Vec<String>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, conflicts_with = "sample")]
    greedy: bool,
    #[arg(long)]
    sample: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_trigram_blocking: bool,
    /// Output JSON-lines file; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    paths: DataPaths,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    on: String,
    /// Write per-image scores as JSON lines here.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Report path; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    image: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let dir = cli.data_dir.as_path();
    match cli.command {
        Command::SynthData(a) => synth_data(dir, a),
        Command::BuildVocab(a) => build_vocab(dir, a),
        Command::Train(a) => train(dir, a, exec),
        Command::Generate(a) => generate(dir, a, exec),
        Command::Evaluate(a) => evaluate_cmd(dir, a, exec),
        Command::InspectTopics(a) => inspect(dir, a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::from_json_file(p).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    })
}

fn synth_data(dir: &Path, a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { spec.$field = v; })*};
    }
    set!(images => images, objects => objects_per_image, object_types => object_types, regions => regions,
         raw_dim => raw_dim, noise => noise, seed => seed);
    eprintln!("seed: {}", spec.seed);
    let out = a.out.clone().unwrap_or_else(|| dir.to_path_buf());
    std::fs::create_dir_all(&out)?;
    let data = synthesize_dataset(&spec)?;
    let features = match a.format {
        FeatureFormat::Bin => out.join("features.bin"),
        FeatureFormat::Jsonl => out.join("features.jsonl"),
    };
    write_jsonl(&out.join("dataset.jsonl"), &data.records)?;
    save_features(&features, &data.features)?;
    save_split(&out.join("split.json"), &data.split)?;
    std::fs::write(out.join("objects.txt"), data.objects.join("\n") + "\n")?;
    eprintln!(
        "wrote {} images ({} train / {} val / {} test) to {}",
        data.records.len(),
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        out.display()
    );
    Ok(())
}

fn read_candidates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ObjectLexicon::parse(&text)?.into_iter().map(|(t, _)| t).collect())
}

fn build_vocab(dir: &Path, a: VocabArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = a.min_count {
        cfg.min_count = m;
    }
    let records = load_dataset(&a.paths.dataset(dir))?;
    let split = load_split(&a.paths.split(dir))?;
    split.validate(records.iter().map(|r| r.image_id.as_str()))?;
    let tokens = tokenize_records(&records, &cfg)?;
    let counts = train_counts(&tokens, &split)?;
    let vocab = cae_lstm::corpus::vocab_from_counts(&counts, cfg.min_count as u64)?;
    let objects = match &a.objects {
        Some(p) => Some(read_candidates(p)?),
        None => {
            let default = dir.join("objects.txt");
            default.exists().then(|| read_candidates(&default)).transpose()?
        }
    };
    let lexicon = build_lexicon(&counts, &vocab, objects.as_deref(), cfg.lexicon_size.min(LEXICON_SIZE));
    let vocab_out = a.vocab_out.unwrap_or_else(|| dir.join("vocab.json"));
    let lexicon_out = a.lexicon_out.unwrap_or_else(|| dir.join("lexicon.txt"));
    write_json(Some(&vocab_out), &vocab)?;
    lexicon.save(&lexicon_out)?;
    eprintln!(
        "vocabulary: {} tokens (min count {}) -> {}; lexicon: {} objects -> {}",
        vocab.len(),
        cfg.min_count,
        vocab_out.display(),
        lexicon.len(),
        lexicon_out.display()
    );
    Ok(())
}

fn apply_train_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { cfg.$field = v; })*};
    }
    set!(seed => seed, lr1 => lr_phase1, lr2 => lr_phase2, beta => beta, batch_size => batch_size,
         epochs1 => epochs_phase1, epochs2 => epochs_phase2);
    if a.max_steps1.is_some() {
        cfg.max_steps_phase1 = a.max_steps1;
    }
    if a.max_steps2.is_some() {
        cfg.max_steps_phase2 = a.max_steps2;
    }
}

fn load_data(dir: &Path, paths: &DataPaths, cfg: &TrainConfig, vocab: &Vocabulary) -> Result<TrainingData> {
    let records = load_dataset(&paths.dataset(dir))?;
    let features = load_features(&paths.features(dir), cfg.regions)?;
    let split = load_split(&paths.split(dir))?;
    Ok(prepare_data(&records, &features, &split, vocab, cfg)?)
}

fn train(dir: &Path, a: TrainArgs, exec: Execution) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| dir.join("model.ckpt"));
    let mut trainer = match &a.init {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if a.config.is_some() {
                bail!("--config cannot change the configuration of a checkpoint given with --init");
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            apply_train_overrides(&mut t.model.config, &a);
            t.model.config.validate()?;
            if a.seed.is_some() {
                t.rng = RngStream::new(t.model.config.seed).fork(0);
            }
            t.adam.lr = if t.progress.phase >= 2 {
                t.model.config.lr_phase2
            } else {
                t.model.config.lr_phase1
            };
            t
        }
        None => {
            if a.phase == Phase::Two {
                bail!("phase 2 starts from a phase-1 checkpoint; pass --init");
            }
            let mut cfg = load_config(a.config.as_deref())?;
            apply_train_overrides(&mut cfg, &a);
            cfg.validate()?;
            let vocab_path = a.vocab.clone().unwrap_or_else(|| dir.join("vocab.json"));
            let lexicon_path = a.lexicon.clone().unwrap_or_else(|| dir.join("lexicon.txt"));
            let vocab: Vocabulary = read_json(&vocab_path).context("run build-vocab first")?;
            let lexicon = ObjectLexicon::load(&lexicon_path, None, cfg.lexicon_size)?;
            Trainer::new(&cfg, vocab, lexicon)?
        }
    };
    trainer.exec = exec;
    let cfg = trainer.config().clone();
    eprintln!("seed: {}", cfg.seed);
    let data = load_data(dir, &a.paths, &cfg, &trainer.vocab)?;
    let ctx = EvalContext::new(&data.train, &trainer.vocab, &trainer.lexicon, cfg.beta)?;
    eprintln!(
        "{} train / {} val images, vocabulary {}, {} trainable values",
        data.train.len(),
        data.val.len(),
        trainer.vocab.len(),
        trainer.store.trainable_count()
    );
    let every = a.log_every.max(1);
    let mut log = |e: &Event| match e {
        Event::Phase1Step { step, stats } if step % every == 0 => eprintln!(
            "phase 1 step {step}: loss {:.4} xent/token {:.4} rec {:.4} stop {:.4}",
            stats.loss, stats.xent, stats.reconstruction, stats.stop
        ),
        Event::Phase2Step { step, stats } if step % every == 0 => eprintln!(
            "phase 2 step {step}: sample R {:.4} greedy R {:.4} loss {:.4}",
            stats.sample_reward, stats.baseline_reward, stats.loss
        ),
        Event::Epoch {
            phase,
            epoch,
            score,
            improved,
        } => eprintln!(
            "phase {phase} epoch {epoch}: validation {}{}",
            score.map_or("n/a".to_string(), |s| format!("{s:.4}")),
            if *improved { " (best)" } else { "" }
        ),
        _ => {}
    };
    let run_one = matches!(a.phase, Phase::One | Phase::Both) && trainer.progress.phase < 2;
    if run_one {
        let best = trainer.run_phase(1, &data, &ctx, &mut log)?;
        if a.phase == Phase::Both {
            best.save(&out.with_extension("phase1.ckpt"))?;
            let exec = trainer.exec;
            trainer = Trainer::from_checkpoint(best)?;
            trainer.exec = exec;
        } else {
            best.save(&out)?;
            eprintln!("saved {}", out.display());
            return Ok(());
        }
    }
    let best = trainer.run_phase(2, &data, &ctx, &mut log)?;
    best.save(&out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn load_model(dir: &Path, path: Option<&Path>) -> Result<(Checkpoint, CaeLstm)> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| dir.join("model.ckpt"));
    let ckpt = Checkpoint::load(&path)?;
    let model = CaeLstm::bind(&ckpt.config, ckpt.vocab.len(), &ckpt.store)?;
    Ok((ckpt, model))
}

#[derive(Serialize)]
struct DecodedRecord {
    image_id: String,
    sentences: Vec<String>,
    token_ids: Vec<Vec<u32>>,
    stop_probs: Vec<f64>,
}

fn generate(dir: &Path, a: GenerateArgs, exec: Execution) -> Result<()> {
    let (ckpt, model) = load_model(dir, a.checkpoint.as_deref())?;
    let cfg = &ckpt.config;
    let features = load_features(
        &a.features.clone().unwrap_or_else(|| dir.join("features.bin")),
        cfg.regions,
    )?;
    let mut ids: Vec<String> = if a.ids.is_empty() {
        features.keys().cloned().collect()
    } else {
        a.ids.clone()
    };
    if let Some(n) = a.limit {
        ids.truncate(n);
    }
    let sets = ids
        .iter()
        .map(|id| {
            features
                .get(id)
                .with_context(|| format!("missing features for image {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opts = if a.sample {
        DecodeOptions::sample(cfg)
    } else {
        DecodeOptions::greedy(cfg)
    };
    if a.no_trigram_blocking {
        opts.trigram_blocking = false;
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    if opts.mode == DecodeMode::Sample {
        eprintln!("seed: {seed}");
    }
    let base = RngStream::new(seed);
    let indexed: Vec<(u64, &cae_lstm::cae::RawRegionSet)> =
        sets.into_iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
    let decoded = map_slice(exec, &indexed, |&(i, raw)| {
        let mut rng = base.fork(i);
        let rng = (opts.mode == DecodeMode::Sample).then_some(&mut rng);
        decode_paragraph(&model, &ckpt.store, raw, &opts, rng)
    })
    .into_iter()
    .collect::<cae_lstm::Result<Vec<_>>>()?;
    let records: Vec<DecodedRecord> = decoded
        .into_iter()
        .map(|d| DecodedRecord {
            sentences: d.paragraph.sentence_strings(&ckpt.vocab),
            token_ids: d.paragraph.sentences.clone(),
            stop_probs: d.stop_probs,
            image_id: d.image_id,
        })
        .collect();
    match &a.out {
        Some(p) => write_jsonl(p, &records)?,
        None => {
            let mut out = std::io::stdout().lock();
            for r in &records {
                writeln!(out, "{}", serde_json::to_string(r)?)?;
            }
        }
    }
    Ok(())
}

fn evaluate_cmd(dir: &Path, a: EvaluateArgs, exec: Execution) -> Result<()> {
    let (ckpt, model) = load_model(dir, a.checkpoint.as_deref())?;
    let data = load_data(dir, &a.paths, &ckpt.config, &ckpt.vocab)?;
    let ctx = EvalContext::new(&data.train, &ckpt.vocab, &ckpt.lexicon, ckpt.config.beta)?;
    let examples = data.split(&a.on)?;
    let eval = evaluate(&model, &ckpt.store, examples, &ckpt.vocab, &ctx, exec)?;
    if let Some(p) = &a.dump {
        write_jsonl(p, &eval.per_image)?;
    }
    write_json(a.out.as_deref(), &eval.report)
}

#[derive(Serialize)]
struct TopicDump {
    image_id: String,
    topics: Vec<Vec<f64>>,
    stop_probs: Vec<f64>,
    sentences: Vec<String>,
    /// Per sentence, per generated word: the word and its attention over regions.
    attention: Vec<Vec<WordAttention>>,
}

#[derive(Serialize)]
struct WordAttention {
    word: String,
    weights: Vec<f64>,
}

fn inspect(dir: &Path, a: InspectArgs) -> Result<()> {
    let (ckpt, model) = load_model(dir, a.checkpoint.as_deref())?;
    let cfg = &ckpt.config;
    let features = load_features(
        &a.features.clone().unwrap_or_else(|| dir.join("features.bin")),
        cfg.regions,
    )?;
    let raw = features
        .get(&a.image)
        .with_context(|| format!("missing features for image {}", a.image))?;
    let v = model.cae.embed_regions(&ckpt.store, raw, Mode::Eval)?;
    let topics = model.cae.conv_encode(&ckpt.store, &v)?;
    let opts = DecodeOptions {
        record_attention: true,
        ..DecodeOptions::greedy(cfg)
    };
    let d = decode_paragraph(&model, &ckpt.store, raw, &opts, None)?;
    let mut attention = Vec::new();
    for (sentence, maps) in d.paragraph.sentences.iter().zip(&d.attention) {
        // The step after the last word predicted EOS.
        let words = sentence
            .iter()
            .map(|&w| ckpt.vocab.token(w).to_string())
            .chain(std::iter::once("<eos>".into()));
        attention.push(
            words
                .zip(maps)
                .map(|(word, w)| WordAttention {
                    word,
                    weights: w.clone(),
                })
                .collect(),
        );
    }
    let k = topics.topics.shape()[0];
    let dump = TopicDump {
        image_id: a.image.clone(),
        topics: (0..k).map(|i| topics.topics.row(i).to_vec()).collect(),
        stop_probs: topics.stop_probs(),
        sentences: d.paragraph.sentence_strings(&ckpt.vocab),
        attention,
    };
    write_json(a.out.as_deref(), &dump)?;
    Ok(())
}
