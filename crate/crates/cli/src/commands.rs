use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rap_core::datagen::{generate_dataset, read_corpus, Annotator, DatagenConfig, FileAnnotator, RemoteAnnotator};
use rap_core::eval::{
    binary_accuracy, caption_metrics, qa_accuracy, retriever_sweep, time_personalization, write_metrics_csv,
    write_sweep_csv, CaptionSample, LabeledQuery, RecognitionResult, Split, SweepRow,
};
use rap_core::{ConceptStore, EmbeddingVector, NewConcept, RapError, StoreSnapshot};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::api_error::ApiError;
use crate::args::{Cli, Command, ConceptCmd, DatagenArgs, EvalCmd, GlobalArgs};
use crate::backends::open_engine;
use crate::engine::{ConceptEdit, ConceptMeta, Engine, RetrieveQuery};

type CmdResult = Result<(), ApiError>;

pub fn run(cli: Cli, out: &mut dyn Write) -> CmdResult {
    let g = &cli.global;
    match cli.command {
        Command::Concept(cmd) => concept(g, cmd, out),
        Command::Chat { text, image } => {
            let engine = open_engine(g)?;
            let image = image.map(|p| read(&p)).transpose()?;
            let outcome = engine.chat(image, text)?;
            print_json(out, &outcome)
        }
        Command::Retrieve { image, embedding, k } => {
            let engine = open_engine(g)?;
            let query = match (image, embedding) {
                (Some(p), _) => RetrieveQuery::Image(read(&p)?),
                (None, Some(e)) => RetrieveQuery::Embedding(
                    serde_json::from_str(&e).map_err(|e| ApiError::validation(format!("--embedding: {e}")))?,
                ),
                (None, None) => return Err(ApiError::validation("give --image or --embedding")),
            };
            print_json(out, &serde_json::json!({ "hits": engine.retrieve(query, k)? }))
        }
        Command::Datagen(args) => datagen(g, args, out),
        Command::Eval(cmd) => eval(g, cmd, out),
        Command::Serve { addr } => serve(g, &addr, out),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, ApiError> {
    fs::read(path).map_err(|e| ApiError::validation(format!("reading {}: {e}", path.display())))
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("values serialize");
    writeln!(out, "{text}").map_err(RapError::from)?;
    Ok(())
}

fn concept(g: &GlobalArgs, cmd: ConceptCmd, out: &mut dyn Write) -> CmdResult {
    let engine = open_engine(g)?;
    match cmd {
        ConceptCmd::Add {
            name,
            category,
            desc,
            image,
        } => {
            let rec = engine.add(
                ConceptMeta {
                    name,
                    category,
                    description: desc,
                },
                &read(&image)?,
            )?;
            writeln!(out, "{}", rec.id).map_err(RapError::from)?;
            Ok(())
        }
        ConceptCmd::Edit {
            id,
            name,
            category,
            desc,
            image,
        } => {
            let edit = ConceptEdit {
                name,
                description: desc,
                category,
                image: image.map(|p| read(&p)).transpose()?,
            };
            print_json(out, &engine.edit(&id, edit)?)
        }
        ConceptCmd::Rm { id } => {
            let rec = engine.remove(&id)?;
            writeln!(out, "{}", rec.id).map_err(RapError::from)?;
            Ok(())
        }
        ConceptCmd::List => {
            let snap = engine.snapshot();
            let rows: Vec<_> = snap
                .records()
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "id": r.id, "name": r.name, "category": r.category,
                        "description": r.description, "image_ref": r.image_ref,
                    })
                })
                .collect();
            print_json(out, &rows)
        }
    }
}

fn datagen(g: &GlobalArgs, args: DatagenArgs, out: &mut dyn Write) -> CmdResult {
    let corpus = fs::File::open(&args.corpus)
        .map_err(|e| ApiError::validation(format!("reading {}: {e}", args.corpus.display())))?;
    let samples = read_corpus(BufReader::new(corpus))?;
    let root = args
        .root
        .clone()
        .or_else(|| args.corpus.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let annotator: Box<dyn Annotator> = match (&args.annotations, &args.annotator_url) {
        (Some(p), _) => Box::new(FileAnnotator::load(p)?),
        (None, Some(url)) => Box::new(RemoteAnnotator::new(url, Duration::from_secs(g.timeout_secs.max(1)))),
        (None, None) => Box::new(RemoteAnnotator::unconfigured()),
    };
    let config = DatagenConfig {
        total_records: args.records,
        seed: args.seed,
        negative_rate: args.negative_rate,
        negatives_per_record: args.negatives,
        variants_per_crop: args.variants,
        ..Default::default()
    };
    let report = generate_dataset(&samples, &root, &args.out, annotator.as_ref(), &config)?;
    print_json(out, &report.stats)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ApiError> {
    let file = fs::File::open(path).map_err(|e| ApiError::validation(format!("reading {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(RapError::from)?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| ApiError::validation(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(rows)
}

/// Writes `metrics.json` and `metrics.csv` when `out` is given, and prints the JSON.
fn report_metrics<T: Serialize>(
    value: &T,
    csv_rows: &[(&str, f64)],
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(RapError::from)?;
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_vec_pretty(value).expect("values serialize"),
        )
        .map_err(RapError::from)?;
        let file = fs::File::create(dir.join("metrics.csv")).map_err(RapError::from)?;
        write_metrics_csv(csv_rows, file)?;
    }
    print_json(out, value)
}

#[derive(Debug, Deserialize)]
struct RecognitionRow {
    split: Split,
    reply: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum QaMode {
    Visual,
    Text,
}

#[derive(Debug, Deserialize)]
struct QaRow {
    mode: QaMode,
    correct: bool,
}

#[derive(Debug, Deserialize)]
struct QueryRow {
    embedding: Vec<f32>,
    truth: String,
}

fn eval(g: &GlobalArgs, cmd: EvalCmd, out: &mut dyn Write) -> CmdResult {
    match cmd {
        EvalCmd::Captions { input, known, out: dir } => {
            let samples: Vec<CaptionSample> = read_jsonl(&input)?;
            let (known, delimiters) = match known {
                Some(p) => {
                    let names: Vec<String> = serde_json::from_slice(&read(&p)?)
                        .map_err(|e| ApiError::validation(format!("{}: {e}", p.display())))?;
                    (names.into_iter().collect::<HashSet<_>>(), Default::default())
                }
                None => {
                    let store = Engine::load_or_create(&g.store, g.dim)?;
                    (
                        store.records().map(|r| r.name.clone()).collect(),
                        store.delimiters().clone(),
                    )
                }
            };
            let report = caption_metrics(&samples, &known, &delimiters)?;
            report_metrics(&report, &report.csv_rows(), dir.as_deref(), out)
        }
        EvalCmd::Recognition { input, out: dir } => {
            let rows: Vec<RecognitionRow> = read_jsonl(&input)?;
            let results: Vec<RecognitionResult> = rows
                .iter()
                .map(|r| RecognitionResult::from_reply(r.split, &r.reply))
                .collect();
            let acc = binary_accuracy(&results)?;
            let csv = [
                ("positive_acc", acc.positive_acc),
                ("negative_acc", acc.negative_acc),
                ("weighted", acc.weighted),
            ];
            report_metrics(&acc, &csv, dir.as_deref(), out)
        }
        EvalCmd::Qa { input, out: dir } => {
            let rows: Vec<QaRow> = read_jsonl(&input)?;
            let pick = |m: fn(&QaMode) -> bool| {
                rows.iter()
                    .filter(|r| m(&r.mode))
                    .map(|r| r.correct)
                    .collect::<Vec<_>>()
            };
            let acc = qa_accuracy(
                &pick(|m| matches!(m, QaMode::Visual)),
                &pick(|m| matches!(m, QaMode::Text)),
            )?;
            let csv = [("visual", acc.visual), ("text", acc.text), ("weighted", acc.weighted)];
            report_metrics(&acc, &csv, dir.as_deref(), out)
        }
        EvalCmd::Sweep {
            queries,
            sizes,
            ks,
            synthetic_dim,
            synthetic_queries,
            noise,
            seed,
            out: dir,
        } => {
            let rows = match queries {
                Some(path) => {
                    let store = Engine::load_or_create(&g.store, g.dim)?;
                    let rows: Vec<QueryRow> = read_jsonl(&path)?;
                    let queries = rows
                        .into_iter()
                        .map(|r| {
                            Ok(LabeledQuery {
                                embedding: EmbeddingVector::new(r.embedding)?,
                                truth: r.truth,
                            })
                        })
                        .collect::<rap_core::Result<Vec<_>>>()?;
                    store_sweep(&store, &queries, &sizes, &ks)?
                }
                None => synthetic_sweep(synthetic_dim, synthetic_queries, noise, seed, &sizes, &ks)?,
            };
            if let Some(dir) = dir {
                fs::create_dir_all(&dir).map_err(RapError::from)?;
                write_sweep_csv(&rows, fs::File::create(dir.join("sweep.csv")).map_err(RapError::from)?)?;
            }
            print_json(out, &rows)
        }
        EvalCmd::Timing { n, out: dir } => {
            let engine = open_engine(g)?;
            let mut scratch = (*engine.store()).clone();
            let timing = time_personalization(&mut scratch, engine.pipeline.embedder.as_ref(), n, timing_image)?;
            let mean = if n == 0 { 0.0 } else { timing.total_ms / n as f64 };
            let max = timing.per_concept_ms.iter().copied().fold(0.0, f64::max);
            report_metrics(
                &timing,
                &[("total_ms", timing.total_ms), ("mean_ms", mean), ("max_ms", max)],
                dir.as_deref(),
                out,
            )
        }
    }
}

/// Small distinct PNG for the i-th timed concept.
fn timing_image(i: usize) -> Vec<u8> {
    let img = RgbImage::from_fn(32, 32, |x, y| {
        Rgb([(i % 251) as u8, (i / 251 % 251) as u8, ((x + y) % 256) as u8])
    });
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img)
        .write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Size-N stores from the loaded store: concepts named by queries first, then
/// the rest in store order.
fn store_sweep(
    store: &ConceptStore,
    queries: &[LabeledQuery],
    sizes: &[usize],
    ks: &[usize],
) -> Result<Vec<SweepRow>, ApiError> {
    let truths: HashSet<&str> = queries.iter().map(|q| q.truth.as_str()).collect();
    let mut ordered: Vec<_> = store.records().filter(|r| truths.contains(r.name.as_str())).collect();
    ordered.extend(store.records().filter(|r| !truths.contains(r.name.as_str())));
    let build = |n: usize| -> rap_core::Result<Arc<StoreSnapshot>> {
        if n > ordered.len() {
            return Err(RapError::InvalidInput(format!(
                "sweep size {n} exceeds the store's {} concepts",
                ordered.len()
            )));
        }
        let mut s = ConceptStore::with_delimiters(store.dim(), store.delimiters().clone())?;
        for r in &ordered[..n] {
            s.add_concept(NewConcept {
                name: r.name.clone(),
                category: r.category.clone(),
                description: r.description.clone(),
                image_ref: r.image_ref.clone(),
                embedding: r.embedding.clone(),
            })?;
        }
        Ok(s.snapshot())
    };
    Ok(retriever_sweep(build, queries, sizes, ks)?)
}

/// Uniform random keys; each query is a key plus uniform noise of half-width `noise`.
fn synthetic_sweep(
    dim: usize,
    n_queries: usize,
    noise: f32,
    seed: u64,
    sizes: &[usize],
    ks: &[usize],
) -> Result<Vec<SweepRow>, ApiError> {
    let max = sizes.iter().copied().max().unwrap_or(0);
    if sizes.iter().any(|&n| n < n_queries) {
        return Err(ApiError::validation(format!(
            "every size must be at least --synthetic-queries ({n_queries})"
        )));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(ApiError::validation("--noise must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<Vec<f32>> = (0..max)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let queries = (0..n_queries)
        .map(|i| {
            let v = keys[i]
                .iter()
                .map(|x| {
                    if noise > 0.0 {
                        x + rng.random_range(-noise..noise)
                    } else {
                        *x
                    }
                })
                .collect();
            Ok(LabeledQuery {
                embedding: EmbeddingVector::new(v)?,
                truth: format!("⟨s{i}⟩"),
            })
        })
        .collect::<rap_core::Result<Vec<_>>>()?;
    let build = |n: usize| -> rap_core::Result<Arc<StoreSnapshot>> {
        let mut s = ConceptStore::new(dim)?;
        for (i, k) in keys.iter().take(n).enumerate() {
            s.add_concept(NewConcept {
                name: format!("⟨s{i}⟩"),
                category: "synthetic".into(),
                description: String::new(),
                image_ref: String::new(),
                embedding: EmbeddingVector::new(k.clone())?,
            })?;
        }
        Ok(s.snapshot())
    };
    Ok(retriever_sweep(build, &queries, sizes, ks)?)
}

fn serve(g: &GlobalArgs, addr: &str, out: &mut dyn Write) -> CmdResult {
    // Backends hold blocking HTTP clients, so they are built before the runtime starts.
    let engine = Arc::new(open_engine(g)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(RapError::from)?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(RapError::from)?;
        let local = listener.local_addr().map_err(RapError::from)?;
        writeln!(out, "listening on http://{local}").map_err(RapError::from)?;
        out.flush().map_err(RapError::from)?;
        log::info!("serving store {} on {local}", engine.dir().display());
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        crate::server::serve(engine, listener, shutdown)
            .await
            .map_err(RapError::from)?;
        Ok(())
    })
}
