//! Command implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use dan_core::error::{DanError, Result};
use dan_core::mdan::{MDan, Modality};
use dan_core::rdan::VqaExample;
use dan_core::synth::{
    self, gen_matching_dataset, gen_vqa_dataset, read_manifest, ConceptVocabulary, EmbeddingRecord,
    MatchingDataset, MatchingGenConfig, MatchingItem, Split, SplitSizes, VocabConfig, VqaDataset,
    VqaGenConfig, VqaItem,
};
use dan_core::trace::{encode_pgm, AttentionTrace};
use dan_core::train::{
    self, evaluate_retrieval, evaluate_vqa, planted_attention_mass, Checkpoint, Direction, DirSink,
    Model, ModelKind, TrainData,
};
use serde_json::json;

use crate::config::{resolve_seed, resolve_training, TrainOverrides};
use crate::manifest::Recorder;
use crate::{
    AnswerArgs, CheckpointInput, DirectionArg, DumpAttentionArgs, EmbedArgs, EvaluateArgs,
    GenDataArgs, ModalityArg, ModelArg, RetrieveArgs, Task, TrainArgs,
};

const DEFAULT_NOISE_RATIO: f64 = 0.05;
const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DanError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DanError::io(path, e))
}

/// Prints to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(DanError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = vec![dir.join(synth::MANIFEST_FILE), dir.join(synth::VOCAB_FILE)];
    files.extend(Split::ALL.iter().map(|&s| synth::split_path(dir, s)));
    files
}

/// `<dir>/<stem>.<command>.manifest.json` next to the checkpoint.
fn manifest_beside(checkpoint: &Path, command: &str) -> PathBuf {
    let stem = checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    checkpoint.with_file_name(format!("{stem}.{command}.manifest.json"))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut rec = Recorder::start("gen-data");
    let seed = resolve_seed(args.seed)?;
    if args.task == Task::Vqa && (args.min_objects.is_some() || args.max_objects.is_some()) {
        return Err(DanError::Config(
            "--min-objects/--max-objects only apply to --task match".into(),
        ));
    }
    let vocab = ConceptVocabulary::generate(
        &VocabConfig {
            num_concepts: args.concepts,
            num_attributes: args.attributes,
            region_dim: args.region_dim,
            ..VocabConfig::default()
        },
        seed,
    )?;
    let sigma = match (args.noise_sigma, args.noise_ratio) {
        (Some(s), _) => s,
        (None, ratio) => ratio.unwrap_or(DEFAULT_NOISE_RATIO) * vocab.min_separation(),
    };
    let (train, val, test) = match args.task {
        Task::Vqa => (5000, 500, 500),
        Task::Match => (2000, 200, 200),
    };
    let sizes = SplitSizes {
        train: args.train.unwrap_or(train),
        val: args.val.unwrap_or(val),
        test: args.test.unwrap_or(test),
    };
    let (counts, config) = match args.task {
        Task::Vqa => {
            let cfg = VqaGenConfig {
                regions: args.regions,
                noise_sigma: sigma,
                sizes,
            };
            let ds = gen_vqa_dataset(&vocab, &cfg, seed)?;
            ds.write(&args.out)?;
            (ds.counts(), serde_json::to_value(&cfg)?)
        }
        Task::Match => {
            let min = args.min_objects.unwrap_or(3);
            let cfg = MatchingGenConfig {
                regions: args.regions,
                min_objects: min,
                max_objects: args.max_objects.unwrap_or(min.max(3)),
                noise_sigma: sigma,
                sizes,
            };
            let ds = gen_matching_dataset(&vocab, &cfg, seed)?;
            ds.write(&args.out)?;
            (ds.counts(), serde_json::to_value(&cfg)?)
        }
    };
    for f in dataset_files(&args.out) {
        rec.output(f);
    }
    let task = match args.task {
        Task::Vqa => "vqa",
        Task::Match => "match",
    };
    rec.finish(
        &args.out.join("run_manifest.json"),
        json!({ "task": task, "generator": config, "concepts": args.concepts, "attributes": args.attributes, "region_dim": args.region_dim }),
        Some(seed),
    )?;
    emit(&format!(
        "{task} dataset: train {} / val {} / test {} items, sigma {sigma:.6}, written to {}",
        counts.train,
        counts.val,
        counts.test,
        args.out.display()
    ))?;
    Ok(())
}

fn examples(items: &[VqaItem]) -> Vec<VqaExample> {
    items.iter().map(VqaItem::example).collect()
}

enum Loaded {
    Vqa(VqaDataset),
    Match(MatchingDataset),
}

fn load_dataset(dir: &Path) -> Result<Loaded> {
    let manifest = read_manifest(dir)?;
    match manifest.task.as_str() {
        "vqa" => Ok(Loaded::Vqa(VqaDataset::read(dir)?)),
        "match" => Ok(Loaded::Match(MatchingDataset::read(dir)?)),
        other => Err(DanError::MalformedFile {
            path: dir.join(synth::MANIFEST_FILE),
            reason: format!("unknown task `{other}`"),
        }),
    }
}

fn overrides_from_flags(a: &TrainArgs) -> TrainOverrides {
    TrainOverrides {
        steps: a.steps,
        hidden: a.hidden,
        margin: a.margin,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        clip_threshold: a.clip_threshold,
        dropout_rate: a.dropout_rate,
        epochs: a.epochs,
        lr_drop_epoch: a.lr_drop_epoch,
        lr_drop_factor: a.lr_drop_factor,
        batch_size: a.batch_size,
        seed: a.seed,
    }
}

/// Rejects a resumed checkpoint whose input dimensions disagree with the data.
fn check_checkpoint_fits(ck: &Checkpoint, data: &synth::DatasetManifest) -> Result<()> {
    let (region_dim, vocab) = match &ck.model {
        Model::Rdan(m) => (m.config().region_dim, m.config().vocab_size),
        Model::Mdan(m) => (m.config().region_dim, m.config().vocab_size),
    };
    if region_dim != data.dims.region_dim || vocab != data.dims.vocab_size {
        return Err(DanError::Config(format!(
            "checkpoint expects region_dim {region_dim} and vocabulary {vocab}, dataset has {} and {}",
            data.dims.region_dim, data.dims.vocab_size
        )));
    }
    if let Model::Rdan(m) = &ck.model {
        if m.config().num_answers != data.dims.num_answers {
            return Err(DanError::Config("checkpoint answer count differs from dataset".into()));
        }
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut rec = Recorder::start("train");
    let kind = match args.model {
        ModelArg::Rdan => ModelKind::Rdan,
        ModelArg::Mdan => ModelKind::Mdan,
    };
    rec.input(&args.data);
    let data_manifest = read_manifest(&args.data)?;
    let mut layers = TrainOverrides::default();
    if let Some(path) = &args.config {
        rec.input(path);
        layers = TrainOverrides::read(path)?;
    }
    let layers = layers.overlay(overrides_from_flags(&args));

    let (mut checkpoint, preset) = match &args.resume {
        Some(path) => {
            rec.input(path);
            let mut ck = Checkpoint::load(path)?;
            if ck.kind() != kind {
                return Err(DanError::KindMismatch {
                    expected: kind.name(),
                    found: ck.kind().name().into(),
                });
            }
            check_checkpoint_fits(&ck, &data_manifest)?;
            if let Some(e) = layers.epochs {
                ck.optimizer.epochs = e;
            }
            (ck, None)
        }
        None => {
            let resolved = resolve_training(kind, args.preset, &data_manifest, layers)?;
            let model = Model::new(resolved.model.clone(), resolved.optimizer.seed)?;
            (
                Checkpoint {
                    model,
                    optimizer: resolved.optimizer,
                    epoch: 0,
                    best_metric: None,
                },
                Some(resolved.preset),
            )
        }
    };

    create_dir(&args.out)?;
    let mut sink = DirSink::new(&args.out)?;
    let log = match load_dataset(&args.data)? {
        Loaded::Vqa(ds) => {
            let (tr, va) = (examples(&ds.splits.train), examples(&ds.splits.val));
            train::train(&mut checkpoint, TrainData::Vqa { train: &tr, val: &va }, &mut sink)?
        }
        Loaded::Match(ds) => train::train(
            &mut checkpoint,
            TrainData::Matching {
                train: &ds.splits.train,
                val: &ds.splits.val,
            },
            &mut sink,
        )?,
    };

    checkpoint.save(&sink.last_path())?;
    rec.output(sink.last_path());
    if sink.best_path().exists() {
        rec.output(sink.best_path());
    }
    let log_path = args.out.join("train_log.jsonl");
    log.write_jsonl(&log_path)?;
    rec.output(&log_path);
    let config = json!({
        "preset": preset,
        "model": checkpoint.model.config(),
        "optimizer": checkpoint.optimizer,
    });
    rec.finish(&args.out.join("run_manifest.json"), config, Some(checkpoint.optimizer.seed))?;
    let best = checkpoint
        .best_metric
        .map_or_else(|| "n/a".to_string(), |m| format!("{m:.4}"));
    emit(&format!(
        "trained {} for {} epochs; best validation metric {best}; checkpoints in {}",
        kind.name(),
        checkpoint.epoch,
        args.out.display()
    ))?;
    Ok(())
}

fn find<'a, T>(items: &'a [T], id: u64, item_id: impl Fn(&T) -> u64, split: Split) -> Result<&'a T> {
    items
        .iter()
        .find(|it| item_id(it) == id)
        .ok_or_else(|| DanError::NotFound(format!("item {id} in the {} split", split.name())))
}

fn open(input: &CheckpointInput) -> Result<(Checkpoint, Loaded, Split)> {
    let ck = Checkpoint::load(&input.checkpoint)?;
    let data = load_dataset(&input.data)?;
    Ok((ck, data, input.split.into()))
}

fn vqa_split(data: &Loaded, split: Split) -> Result<&[VqaItem]> {
    match data {
        Loaded::Vqa(ds) => Ok(ds.splits.get(split)),
        Loaded::Match(_) => Err(DanError::KindMismatch {
            expected: "vqa dataset",
            found: "match dataset".into(),
        }),
    }
}

fn match_split(data: &Loaded, split: Split) -> Result<&[MatchingItem]> {
    match data {
        Loaded::Match(ds) => Ok(ds.splits.get(split)),
        Loaded::Vqa(_) => Err(DanError::KindMismatch {
            expected: "match dataset",
            found: "vqa dataset".into(),
        }),
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut rec = Recorder::start("evaluate");
    rec.input(&args.input.checkpoint);
    rec.input(&args.input.data);
    let (ck, data, split) = open(&args.input)?;
    let result = match &ck.model {
        Model::Rdan(m) => {
            let items = vqa_split(&data, split)?;
            json!({
                "split": split.name(),
                "items": items.len(),
                "accuracy": evaluate_vqa(m, &examples(items))?,
                "planted_attention": planted_attention_mass(m, items)?,
            })
        }
        Model::Mdan(m) => {
            let items = match_split(&data, split)?;
            json!({
                "split": split.name(),
                "items": items.len(),
                "image_to_text": evaluate_retrieval(m, items, Direction::ImageToText, &RETRIEVAL_KS)?,
                "text_to_image": evaluate_retrieval(m, items, Direction::TextToImage, &RETRIEVAL_KS)?,
            })
        }
    };
    let path = args
        .manifest
        .unwrap_or_else(|| manifest_beside(&args.input.checkpoint, "evaluate"));
    rec.finish(&path, json!({ "split": split.name(), "result": &result }), Some(ck.optimizer.seed))?;
    // Per-item ranks stay in the manifest only.
    let mut summary = result;
    for key in ["image_to_text", "text_to_image"] {
        if let Some(obj) = summary.get_mut(key).and_then(|v| v.as_object_mut()) {
            obj.remove("ranks");
        }
    }
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

pub fn answer(args: AnswerArgs) -> Result<()> {
    let mut rec = Recorder::start("answer");
    rec.input(&args.input.checkpoint);
    rec.input(&args.input.data);
    let (ck, data, split) = open(&args.input)?;
    let model = ck.model.as_rdan()?;
    let items = vqa_split(&data, split)?;
    let item = find(items, args.id, |it| it.id, split)?;
    let pred = model.predict(&item.scene.regions, &item.question)?;
    let vocab = match &data {
        Loaded::Vqa(ds) => &ds.vocab,
        Loaded::Match(_) => unreachable!("vqa_split checked the task"),
    };
    let word = vocab
        .attributes
        .get(pred.answer)
        .map_or("?", |a| a.name.as_str());
    let result = json!({
        "id": item.id,
        "question": vocab.words_of(item.question.valid_ids()).join(" "),
        "answer": pred.answer,
        "word": word,
        "probability": pred.probs[pred.answer],
        "gold": item.answer,
    });
    let path = args
        .manifest
        .unwrap_or_else(|| manifest_beside(&args.input.checkpoint, "answer"));
    rec.finish(&path, result.clone(), Some(ck.optimizer.seed))?;
    emit(&result.to_string())?;
    Ok(())
}

pub fn embed(args: EmbedArgs) -> Result<()> {
    let mut rec = Recorder::start("embed");
    rec.input(&args.input.checkpoint);
    rec.input(&args.input.data);
    let (ck, data, split) = open(&args.input)?;
    let model: &MDan = ck.model.as_mdan()?;
    let items = match_split(&data, split)?;
    let records = items
        .iter()
        .map(|it| {
            let e = match args.modality {
                ModalityArg::Image => model.embed_image(&it.scene.regions)?,
                ModalityArg::Text => model.embed_text(&it.caption)?,
            };
            Ok(EmbeddingRecord {
                id: it.id,
                modality: e.modality,
                vector: e.z,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    synth::write_embeddings(&args.out, &records)?;
    rec.output(&args.out);
    let modality = match args.modality {
        ModalityArg::Image => Modality::Image,
        ModalityArg::Text => Modality::Text,
    };
    let mut manifest_path = args.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    rec.finish(
        Path::new(&manifest_path),
        json!({ "split": split.name(), "modality": modality, "count": records.len() }),
        Some(ck.optimizer.seed),
    )?;
    emit(&format!("wrote {} embeddings to {}", records.len(), args.out.display()))?;
    Ok(())
}

pub fn retrieve(args: RetrieveArgs) -> Result<()> {
    let mut rec = Recorder::start("retrieve");
    rec.input(&args.input.checkpoint);
    rec.input(&args.input.data);
    let (ck, data, split) = open(&args.input)?;
    let model = ck.model.as_mdan()?;
    let items = match_split(&data, split)?;
    if items.is_empty() {
        return Err(DanError::EmptyInput("retrieval gallery"));
    }
    let query = find(items, args.query_id, |it| it.id, split)?;
    let (q, gallery) = match args.direction {
        DirectionArg::ImageToText => (
            model.embed_image(&query.scene.regions)?.z,
            items
                .iter()
                .map(|it| Ok((it.id, model.embed_text(&it.caption)?.z)))
                .collect::<Result<Vec<_>>>()?,
        ),
        DirectionArg::TextToImage => (
            model.embed_text(&query.caption)?.z,
            items
                .iter()
                .map(|it| Ok((it.id, model.embed_image(&it.scene.regions)?.z)))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let mut scored: Vec<(u64, f64)> = gallery
        .iter()
        .map(|(id, z)| (*id, train::dot(&q, z)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(args.top_k);
    let path = args
        .manifest
        .unwrap_or_else(|| manifest_beside(&args.input.checkpoint, "retrieve"));
    let results: Vec<_> = scored
        .iter()
        .map(|(id, s)| json!({ "id": id, "score": s }))
        .collect();
    rec.finish(
        &path,
        json!({ "split": split.name(), "query_id": args.query_id, "results": results }),
        Some(ck.optimizer.seed),
    )?;
    let lines: Vec<String> = scored
        .iter()
        .enumerate()
        .map(|(rank, (id, score))| format!("{}\t{id}\t{score}", rank + 1))
        .collect();
    emit(&lines.join("\n"))?;
    Ok(())
}

pub fn dump_attention(args: DumpAttentionArgs) -> Result<()> {
    let mut rec = Recorder::start("dump-attention");
    rec.input(&args.input.checkpoint);
    rec.input(&args.input.data);
    let (ck, data, split) = open(&args.input)?;
    let trace: AttentionTrace = match &ck.model {
        Model::Rdan(m) => {
            let item = find(vqa_split(&data, split)?, args.id, |it| it.id, split)?;
            m.predict(&item.scene.regions, &item.question)?.trace
        }
        Model::Mdan(m) => {
            let item = find(match_split(&data, split)?, args.id, |it| it.id, split)?;
            m.similarity(&item.scene.regions, &item.caption)?.2
        }
    };
    create_dir(&args.out)?;
    let trace_path = args.out.join("trace.json");
    write_file(&trace_path, (serde_json::to_string_pretty(&trace)? + "\n").as_bytes())?;
    rec.output(&trace_path);
    for (k, step) in trace.steps.iter().enumerate() {
        for (name, weights) in [("visual", &step.visual), ("textual", &step.textual)] {
            let path = args.out.join(format!("step{}_{name}.pgm", k + 1));
            write_file(&path, &encode_pgm(weights, weights.len(), 1))?;
            rec.output(path);
        }
    }
    rec.finish(
        &args.out.join("run_manifest.json"),
        json!({ "split": split.name(), "id": args.id, "kind": ck.kind().name() }),
        Some(ck.optimizer.seed),
    )?;
    emit(&format!(
        "wrote {} attention steps for item {} to {}",
        trace.steps.len(),
        args.id,
        args.out.display()
    ))?;
    Ok(())
}
