//! `stdqa` command-line interface.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stdqa_core::abbrev::{extract_abbreviations, hit_rate_stats, merge_dictionaries, AbbrevDict};
use stdqa_core::corpus::{build_corpus, read_chunks_jsonl, read_documents, write_chunks_jsonl};
use stdqa_core::eval::{
    answer_question, gather_evidence, load_dataset, render_question_prompt, run_pipeline, Backends,
    Resources,
};
use stdqa_core::retrieval::{Bm25Params, ChunkIndex, DEFAULT_EMBED_BATCH};
use stdqa_core::trainprep::{
    emit_training_set, write_training_set, ByteTokenizer, TrainingConfig, TrainingManifest,
};
use stdqa_core::{McqQuestion, Permutation, PipelineConfig};

use config::{FileConfig, LiveBackends};

#[derive(Parser, Debug)]
#[command(
    name = "stdqa",
    version,
    about = "Retrieval-augmented multiple-choice QA over standards documents"
)]
struct Cli {
    /// Pipeline configuration file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides `pipeline.seed`
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: one per core)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    /// Skip retrieval
    #[arg(long)]
    no_rag: bool,
    /// Hide options from the model and pick by embedding similarity
    #[arg(long)]
    free_answer: bool,
    /// Shuffled prompts per question (0 disables voting)
    #[arg(long)]
    shuffle_k: Option<usize>,
    /// Chunks taken from each retriever
    #[arg(long)]
    per_retriever_k: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<u32>,
    #[arg(long)]
    temperature: Option<f32>,
    /// Index directory; overrides `paths.index`
    #[arg(long)]
    index: Option<PathBuf>,
    /// Abbreviation dictionary; overrides `paths.abbrevs`
    #[arg(long)]
    dict: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split corpus documents into chunks
    Ingest {
        /// Document files or directories of documents
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed chunks and build the BM25 statistics
    BuildIndex {
        /// chunks.jsonl written by `ingest`
        #[arg(long, conflicts_with = "corpus")]
        chunks: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EMBED_BATCH)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine abbreviation sections into a dictionary
    BuildAbbrev {
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Share of detected abbreviations the dictionary covers
    HitRate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Print the prompt a question would be sent with
    RenderPrompt {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        question_id: String,
        /// Canonical option shown at each slot, e.g. `2,0,3,1`
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Answer one question given on the command line
    Ask {
        #[arg(long)]
        question: String,
        #[arg(long = "option", required = true, num_args = 1)]
        options: Vec<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run a dataset through the pipeline and report accuracy
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Emit fine-tuning records with per-epoch option shuffles
    PrepTrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Show the chunks retrieved for a text
    Query {
        #[arg(long)]
        text: String,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
}

/// Config file plus command-line overrides.
struct Session {
    file: FileConfig,
    pipeline: PipelineConfig,
    index_path: Option<PathBuf>,
    dict_path: Option<PathBuf>,
}

impl Session {
    fn new(cli: &Cli, args: Option<&PipelineArgs>) -> Result<Self> {
        let file = FileConfig::load(cli.config.as_deref())?;
        let mut pipeline = file.pipeline.clone();
        if let Some(seed) = cli.seed {
            pipeline.seed = seed;
        }
        let default_args = PipelineArgs::default();
        let args = args.unwrap_or(&default_args);
        if args.no_rag {
            pipeline.rag_enabled = false;
        }
        if args.free_answer {
            pipeline.include_options = false;
            pipeline.shuffle_k = 0;
        }
        if let Some(k) = args.shuffle_k {
            pipeline.shuffle_k = k;
        }
        if let Some(k) = args.per_retriever_k {
            pipeline.per_retriever_k = k;
        }
        if let Some(t) = args.max_new_tokens {
            pipeline.max_new_tokens = t;
        }
        if let Some(t) = args.temperature {
            pipeline.temperature = t;
        }
        pipeline.validate()?;
        Ok(Self {
            index_path: args.index.clone().or_else(|| file.paths.index.clone()),
            dict_path: args.dict.clone().or_else(|| file.paths.abbrevs.clone()),
            pipeline,
            file,
        })
    }

    fn load_index(&self) -> Result<Option<ChunkIndex>> {
        if !self.pipeline.rag_enabled {
            return Ok(None);
        }
        let path = self.index_path.as_ref().ok_or_else(|| {
            anyhow!("retrieval is enabled but no index is configured (use --index or --no-rag)")
        })?;
        Ok(Some(ChunkIndex::load(path)?))
    }

    fn load_dict(&self) -> Result<Option<AbbrevDict>> {
        self.dict_path
            .as_deref()
            .map(AbbrevDict::load)
            .transpose()
            .map_err(Into::into)
    }
}

/// Document files named directly or found (non-recursively) in directories.
fn corpus_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && !p
                            .file_name()
                            .is_some_and(|n| n.to_string_lossy().starts_with('.'))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no corpus documents found");
    }
    Ok(files)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn find_question(questions: Vec<McqQuestion>, id: &str) -> Result<McqQuestion> {
    questions
        .into_iter()
        .find(|q| q.question_id == id)
        .ok_or_else(|| anyhow!("question {id:?} not found in dataset"))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    match &cli.command {
        Command::Ingest { corpus, out } => {
            let s = Session::new(cli, None)?;
            let (chunks, manifest) = build_corpus(&corpus_files(corpus)?, &s.file.chunking)?;
            create_dir(out)?;
            write_chunks_jsonl(&out.join("chunks.jsonl"), &chunks)?;
            write_json(&out.join("corpus_manifest.json"), &manifest)?;
            eprintln!(
                "{} chunks from {} documents",
                chunks.len(),
                manifest.documents.len()
            );
        }
        Command::BuildIndex {
            chunks,
            corpus,
            batch_size,
            out,
        } => {
            let s = Session::new(cli, None)?;
            let chunks = match chunks {
                Some(path) => read_chunks_jsonl(path)?,
                None if !corpus.is_empty() => {
                    build_corpus(&corpus_files(corpus)?, &s.file.chunking)?.0
                }
                None => bail!("build-index needs --chunks or --corpus"),
            };
            let live = LiveBackends::build(&s.file.backends)?;
            let index = ChunkIndex::build(
                chunks,
                &live.retrieval_refs(),
                *batch_size,
                Bm25Params::default(),
            )?;
            index.save(out)?;
            eprintln!(
                "indexed {} chunks with {} dense retriever(s) and bm25",
                index.chunks.len(),
                index.dense.len()
            );
        }
        Command::BuildAbbrev { corpus, out } => {
            let s = Session::new(cli, None)?;
            let docs = read_documents(&corpus_files(corpus)?, &s.file.chunking)?;
            let lists: Vec<_> = docs.iter().map(extract_abbreviations).collect();
            let dict = merge_dictionaries(&lists);
            create_dir(out)?;
            dict.save(
                &out.join("abbreviations.json"),
                &out.join("abbrev_conflicts.jsonl"),
            )?;
            eprintln!(
                "{} abbreviations, {} conflicts",
                dict.len(),
                dict.conflict_log.len()
            );
        }
        Command::HitRate { dataset, dict } => {
            let s = Session::new(cli, None)?;
            let path = dict
                .clone()
                .or(s.dict_path)
                .ok_or_else(|| anyhow!("hit-rate needs --dict or paths.abbrevs"))?;
            let dict = AbbrevDict::load(&path)?;
            let questions = load_dataset(dataset)?;
            let texts: Vec<&str> = questions.iter().map(|q| q.text.as_str()).collect();
            print_json(&hit_rate_stats(&texts, &dict))?;
        }
        Command::RenderPrompt {
            dataset,
            question_id,
            order,
            pipeline,
        } => {
            let s = Session::new(cli, Some(pipeline))?;
            let q = find_question(load_dataset(dataset)?, question_id)?;
            let (index, dict) = (s.load_index()?, s.load_dict()?);
            let live = LiveBackends::build(&s.file.backends)?;
            let resources = Resources {
                index: index.as_ref(),
                abbrevs: dict.as_ref(),
            };
            let (detections, context) =
                gather_evidence(&s.pipeline, &q, &live.retrieval_refs(), &resources)?;
            let prompt = match order {
                Some(order) if s.pipeline.include_options => {
                    let perm = Permutation::new(order.clone())?;
                    stdqa_core::prompt::build_phi2_prompt(&q, &perm, &detections, &context)?
                }
                Some(_) => bail!("--order needs the option-listing prompt"),
                None => render_question_prompt(&s.pipeline, &q, &detections, &context)?,
            };
            println!("{}", prompt.rendered);
        }
        Command::Ask {
            question,
            options,
            pipeline,
        } => {
            let s = Session::new(cli, Some(pipeline))?;
            let q = McqQuestion {
                question_id: "ask".into(),
                text: question.clone(),
                options: options.clone(),
                gold: None,
                category: String::new(),
            };
            let (index, dict) = (s.load_index()?, s.load_dict()?);
            let live = LiveBackends::build(&s.file.backends)?;
            let retrieval = live.retrieval_refs();
            let backends = Backends {
                generation: live.generation()?,
                retrieval: &retrieval,
                answer_embedding: live.answer_embedding.as_deref(),
            };
            let resources = Resources {
                index: index.as_ref(),
                abbrevs: dict.as_ref(),
            };
            let record = answer_question(&s.pipeline, &q, &backends, &resources)?;
            print_json(&record)?;
        }
        Command::Evaluate {
            dataset,
            out,
            pipeline,
        } => {
            let s = Session::new(cli, Some(pipeline))?;
            let questions = load_dataset(dataset)?;
            let (index, dict) = (s.load_index()?, s.load_dict()?);
            let live = LiveBackends::build(&s.file.backends)?;
            let retrieval = live.retrieval_refs();
            let backends = Backends {
                generation: live.generation()?,
                retrieval: &retrieval,
                answer_embedding: live.answer_embedding.as_deref(),
            };
            let resources = Resources {
                index: index.as_ref(),
                abbrevs: dict.as_ref(),
            };
            create_dir(out)?;
            match run_pipeline(&s.pipeline, &questions, &backends, &resources) {
                Ok(report) => {
                    write_json(&out.join("report.json"), &report)?;
                    print!("{}", report.table());
                }
                Err(failure) => {
                    let path = out.join("partial_report.json");
                    write_json(&path, &failure.partial)?;
                    return Err(anyhow::Error::new(failure)
                        .context(format!("partial report written to {}", path.display())));
                }
            }
        }
        Command::PrepTrain {
            dataset,
            epochs,
            out,
            pipeline,
        } => {
            let s = Session::new(cli, Some(pipeline))?;
            let questions = load_dataset(dataset)?;
            let (index, dict) = (s.load_index()?, s.load_dict()?);
            let live = LiveBackends::build(&s.file.backends)?;
            let retrieval = live.retrieval_refs();
            let resources = Resources {
                index: index.as_ref(),
                abbrevs: dict.as_ref(),
            };
            let tokenizer = ByteTokenizer;
            let records = emit_training_set(
                &questions,
                |q| gather_evidence(&s.pipeline, q, &retrieval, &resources),
                *epochs,
                s.pipeline.seed,
                &tokenizer,
            )?;
            create_dir(out)?;
            write_training_set(&out.join("train.jsonl"), &records)?;
            let manifest = TrainingManifest::new(
                &records,
                questions.len(),
                *epochs,
                s.pipeline.seed,
                &tokenizer,
                TrainingConfig::default(),
            );
            write_json(&out.join("train_manifest.json"), &manifest)?;
            eprintln!("{} training records", records.len());
        }
        Command::Query { text, pipeline } => {
            let s = Session::new(cli, Some(pipeline))?;
            let index = s
                .load_index()?
                .ok_or_else(|| anyhow!("query needs retrieval enabled"))?;
            let live = LiveBackends::build(&s.file.backends)?;
            let context =
                index.retrieve(text, &live.retrieval_refs(), s.pipeline.per_retriever_k)?;
            print_json(&context)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(ToString::to_string).collect();
            let body = serde_json::json!({"error": {"message": e.to_string(), "causes": causes}});
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
