use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use reldet::corpus::{
    audit_splits, build_pair_statistics, build_splits, candidate_pairs, caption_samples, generate_synthetic_dataset,
    load_jsonl, load_records, partition_rel_obj_sets, save_jsonl, write_synthetic_dataset, CaptionRecord, ImageStore,
    Lexicon, RelObj, SampleRecord, Triplet,
};
use reldet::decoding::{predict_records, PredictionRecord, Strategy};
use reldet::eval::{evaluate_recall, format_table, group_predictions, unmatched_ids, write_report, EvalReport, SynonymMap};
use reldet::model::{load_checkpoint, save_checkpoint, train, TrainingSet};
use reldet::vocab::{load_tokenizer, save_tokenizer};
use reldet::{sub_seed, Error, Tokenizer};
use serde::Serialize;

use crate::config::{RunConfig, TrainSplit};
use crate::{Cli, Command};

pub fn run(cli: &Cli, mut cfg: RunConfig) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if !cli.k.is_empty() {
        cfg.eval.ks = cli.k.clone();
        cfg.eval.ks.sort_unstable();
        cfg.eval.ks.dedup();
        cfg.decode.k = *cfg.eval.ks.last().expect("non-empty");
    }
    if !cli.iou.is_empty() {
        cfg.eval.iou_thresholds = cli.iou.clone();
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(1).max(1)).build()?;
    pool.install(|| match &cli.command {
        Command::GenSynthetic => gen_synthetic(&cfg, cli.out.as_deref()),
        Command::ExtractTriplets { captions } => extract(&cfg, captions.as_deref(), cli.out.as_deref()),
        Command::BuildSplits => splits(&cfg, cli.out.as_deref()),
        Command::Train { split } => train_model(&cfg, split.unwrap_or(cfg.train.split), cli.out.as_deref()),
        Command::Predict { split, single_pass, checkpoint } => {
            let strategy = if *single_pass { Strategy::SinglePass } else { cfg.decode.strategy };
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.resolve(&cfg.paths.checkpoint));
            predict(&cfg, split.as_deref().unwrap_or(&cfg.decode.split), strategy, &ckpt, cli.out.as_deref())
        }
        Command::Evaluate { predictions } => evaluate(&cfg, predictions.as_deref(), cli.out.as_deref()),
        Command::Inspect { file } => inspect(file),
    })
}

fn gen_synthetic(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out.map_or_else(|| cfg.data_dir(), Path::to_path_buf);
    let mut spec = cfg.synthetic.clone();
    spec.seed = sub_seed(cfg.seed, "synthetic");
    let ds = generate_synthetic_dataset(&spec)?;
    write_synthetic_dataset(&ds, &dir)?;
    println!(
        "wrote {} scenes, {} grounded records, {} captions, {} test records to {}",
        ds.scenes.len(),
        ds.grounded.len(),
        ds.captions.len(),
        ds.test_pool.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TripletRecord<'a> {
    caption_id: &'a str,
    #[serde(flatten)]
    triplet: &'a Triplet,
}

/// Triplets tagged with their caption id, and the ungrounded records they yield, in caption order.
fn extract_captions(cfg: &RunConfig, captions_path: &Path) -> Result<(Vec<(String, Triplet)>, Vec<SampleRecord>)> {
    let lex = Lexicon::load(&cfg.lexicon()).with_context(|| format!("lexicon {}", cfg.lexicon().display()))?;
    let caps: Vec<CaptionRecord> = load_jsonl(captions_path)?;
    let per_caption: Vec<(Vec<Triplet>, Vec<SampleRecord>)> =
        caps.par_iter().map(|c| caption_samples(std::slice::from_ref(c), &lex)).collect();
    let mut triplets = Vec::new();
    let mut samples = Vec::new();
    for (c, (t, s)) in caps.iter().zip(per_caption) {
        triplets.extend(t.into_iter().map(|t| (c.id.clone(), t)));
        samples.extend(s);
    }
    Ok((triplets, samples))
}

fn extract(cfg: &RunConfig, captions: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let captions_path = captions.map_or_else(|| cfg.data_dir().join("captions.jsonl"), Path::to_path_buf);
    let out = out.map_or_else(|| cfg.data_dir().join("ungrounded.jsonl"), Path::to_path_buf);
    let (triplets, samples) = extract_captions(cfg, &captions_path)?;
    let rows: Vec<TripletRecord> = triplets.iter().map(|(id, triplet)| TripletRecord { caption_id: id, triplet }).collect();
    save_jsonl(&out.with_file_name("triplets.jsonl"), &rows)?;
    save_jsonl(&out, &samples)?;
    println!("extracted {} triplets; {} ungrounded records to {}", rows.len(), samples.len(), out.display());
    Ok(())
}

const SPLIT_NAMES: [&str; 5] = ["base_train", "text_aug_train", "test_a", "test_b", "full_test"];

fn splits(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let data = cfg.data_dir();
    let dir = out.map_or_else(|| cfg.splits_dir(), Path::to_path_buf);
    let grounded = load_records(&data.join("grounded.jsonl"))?;
    let ungrounded_path = data.join("ungrounded.jsonl");
    let (ungrounded, triplets) = if ungrounded_path.exists() {
        let triplets: Vec<Triplet> = load_jsonl(&data.join("triplets.jsonl"))?;
        (load_records(&ungrounded_path)?, triplets)
    } else {
        log::info!("{} not found; extracting triplets from captions", ungrounded_path.display());
        let (triplets, samples) = extract_captions(cfg, &data.join("captions.jsonl"))?;
        (samples, triplets.into_iter().map(|(_, t)| t).collect())
    };
    let test_pool = load_records(&data.join("test_pool.jsonl"))?;

    let spec = cfg.split_spec(sub_seed(cfg.seed, "splits"));
    let stats = build_pair_statistics(&grounded, &triplets, spec.min_count, spec.max_count)?;
    let pairs = candidate_pairs(&stats, &test_pool);
    let (set_a, set_b) = partition_rel_obj_sets(&pairs, sub_seed(cfg.seed, "partition"))?;
    let s = build_splits(&grounded, &ungrounded, &spec, &set_a, &set_b, &test_pool)?;
    let audit = audit_splits(&s, &grounded, &ungrounded, &spec)?;

    fs::create_dir_all(&dir)?;
    for (name, recs) in SPLIT_NAMES.iter().zip([&s.base_train, &s.text_aug_train, &s.test_a, &s.test_b, &s.full_test]) {
        save_jsonl(&dir.join(format!("{name}.jsonl")), recs)?;
    }
    let as_rows = |set: &BTreeSet<RelObj>| set.iter().map(|(r, o)| [r.clone(), o.clone()]).collect::<Vec<_>>();
    save_jsonl(&dir.join("set_a.jsonl"), &as_rows(&set_a))?;
    save_jsonl(&dir.join("set_b.jsonl"), &as_rows(&set_b))?;
    let counts: Vec<(String, String, usize)> = stats.iter().map(|((r, o), c)| (r.clone(), o.clone(), *c)).collect();
    save_jsonl(&dir.join("pair_counts.jsonl"), &counts)?;
    fs::write(dir.join("audit.json"), serde_json::to_string_pretty(&audit)? + "\n")?;

    let mut vocab_sources = grounded.clone();
    vocab_sources.extend(ungrounded.iter().cloned());
    let tok = Tokenizer::from_records(&vocab_sources, &[], cfg.model.num_position_tokens)?;
    save_tokenizer(&tok, &dir.join("vocab.txt"), &dir.join("objects.txt"))?;
    println!(
        "{} candidate pairs (A {}, B {}); base {} / text-aug {} training records; test A {} / B {} / full {}; vocabulary {}",
        pairs.len(),
        set_a.len(),
        set_b.len(),
        s.base_train.len(),
        s.text_aug_train.len(),
        s.test_a.len(),
        s.test_b.len(),
        s.full_test.len(),
        tok.vocab().len()
    );
    Ok(())
}

fn tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let dir = cfg.splits_dir();
    Ok(load_tokenizer(&dir.join("vocab.txt"), &dir.join("objects.txt"))?)
}

fn train_model(cfg: &RunConfig, split: TrainSplit, out: Option<&Path>) -> Result<()> {
    let name = match split {
        TrainSplit::Base => "base_train",
        TrainSplit::TextAug => "text_aug_train",
    };
    let records = load_records(&cfg.splits_dir().join(format!("{name}.jsonl")))?;
    let tok = tokenizer(cfg)?;
    let store = ImageStore::new(cfg.data_dir());
    let side = cfg.model.image_side;
    let data = TrainingSet::from_records(&records, &tok, |r| store.load_tensor(r, side))?;
    let model_cfg = cfg.model.to_config(tok.vocab().len(), sub_seed(cfg.seed, "init"));
    let outcome = train(&data, &model_cfg, &cfg.train_params(sub_seed(cfg.seed, "train")))?;
    let path = out.map_or_else(|| cfg.resolve(&cfg.paths.checkpoint), Path::to_path_buf);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&path, &outcome.model, &tok.vocab().digest())?;
    let history = path.with_extension("loss.json");
    fs::write(&history, serde_json::to_string(&outcome.loss_history)? + "\n")?;
    println!(
        "trained on {} records of {name} for {} epochs; final loss {:.4}; checkpoint {}",
        records.len(),
        outcome.loss_history.len(),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn predict(cfg: &RunConfig, split: &str, strategy: Strategy, ckpt_path: &Path, out: Option<&Path>) -> Result<()> {
    let tok = tokenizer(cfg)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    if ckpt.vocab_digest != tok.vocab().digest() {
        bail!(Error::Validation("checkpoint was trained with a different vocabulary".into()));
    }
    let records = load_records(&cfg.splits_dir().join(format!("{split}.jsonl")))?;
    let store = ImageStore::new(cfg.data_dir());
    let side = ckpt.model.config().image_side;
    let params = cfg.decode_params();
    let mut by_image: BTreeMap<&str, Vec<SampleRecord>> = BTreeMap::new();
    for r in &records {
        by_image.entry(&r.image.reference).or_default().push(r.clone());
    }
    let groups: Vec<Vec<SampleRecord>> = by_image.into_values().collect();
    let chunks: Vec<Vec<PredictionRecord>> = groups
        .par_iter()
        .map(|g| predict_records(g, &ckpt.model, &tok, &params, strategy, |r| store.load_tensor(r, side)))
        .collect::<reldet::Result<_>>()?;
    let mut preds: Vec<PredictionRecord> = chunks.into_iter().flatten().collect();
    preds.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(a.rank.cmp(&b.rank)));
    let path = out.map_or_else(|| cfg.resolve(&cfg.paths.predictions), Path::to_path_buf);
    save_jsonl(&path, &preds)?;
    println!("{} predictions for {} records of {split} to {}", preds.len(), records.len(), path.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, predictions: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let pred_path = predictions.map_or_else(|| cfg.resolve(&cfg.paths.predictions), Path::to_path_buf);
    let preds: Vec<PredictionRecord> = load_jsonl(&pred_path)?;
    let grouped = group_predictions(&preds);
    let syn = match &cfg.paths.synonyms {
        Some(p) => SynonymMap::load(&cfg.resolve(p))?,
        None => SynonymMap::default(),
    };
    let mut splits = Vec::new();
    let mut all_gt: Vec<SampleRecord> = Vec::new();
    for name in &cfg.eval.splits {
        let gt = load_records(&cfg.splits_dir().join(format!("{name}.jsonl")))?;
        all_gt.extend(gt.iter().cloned());
        splits.push((name, gt));
    }
    let unmatched = unmatched_ids(&grouped, &all_gt);
    if !unmatched.is_empty() {
        bail!(Error::Validation(format!(
            "{} prediction sample ids have no ground-truth record (first: {})",
            unmatched.len(),
            unmatched[0]
        )));
    }
    // Only score splits that the prediction file covers.
    let mut report = EvalReport::default();
    for (name, gt) in &splits {
        if !gt.iter().any(|r| grouped.contains_key(&r.id)) {
            log::warn!("no predictions for split {name}; skipped");
            continue;
        }
        report.extend(evaluate_recall(name, &grouped, gt, &cfg.eval.ks, &cfg.eval.iou_thresholds, &syn)?);
    }
    let dir = out.map_or_else(|| cfg.resolve(&cfg.paths.report_dir), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    write_report(&report, fs::File::create(dir.join("report.txt"))?, fs::File::create(dir.join("report.jsonl"))?)?;
    save_jsonl(&dir.join("pairs.jsonl"), &report.pairs)?;
    print!("{}", format_table(&report));
    Ok(())
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => "-".into(),
        serde_json::Value::Array(a) => {
            let parts: Vec<String> =
                a.iter().map(|x| x.as_f64().map_or_else(|| cell(x), |f| format!("{f:.1}"))).collect();
            format!("[{}]", parts.join(", "))
        }
        serde_json::Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.4}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn print_table(rows: &[serde_json::Value], columns: &[&str]) {
    let mut cells: Vec<Vec<String>> = vec![columns.iter().map(|c| c.to_string()).collect()];
    cells.extend(rows.iter().map(|r| columns.iter().map(|c| cell(&r[*c])).collect()));
    let widths: Vec<usize> = (0..columns.len()).map(|i| cells.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    for r in &cells {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", line.join("  ").trim_end());
    }
}

fn inspect(file: &PathBuf) -> Result<()> {
    let f = fs::File::open(file).with_context(|| format!("opening {}", file.display()))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<serde_json::Value>(&line) {
            Ok(v) => rows.push(v),
            Err(_) => {
                // Plain-text files (vocabulary, lexicon, reports) are shown as-is.
                print!("{}", fs::read_to_string(file)?);
                return Ok(());
            }
        }
    }
    let first = rows.first().cloned().unwrap_or_default();
    let has = |k: &str| first.get(k).is_some();
    if has("sample_id") && has("rank") {
        rows.sort_by(|a, b| {
            let key = |v: &serde_json::Value| (v["sample_id"].as_str().unwrap_or("").to_string(), v["rank"].as_u64().unwrap_or(0));
            key(a).cmp(&key(b))
        });
        print_table(&rows, &["sample_id", "rank", "relation", "object", "box", "score", "well_formed"]);
    } else if has("subject") && has("relation") && has("grounded") {
        print_table(&rows, &["id", "subject", "subject_box", "relation", "object", "object_box", "grounded"]);
    } else if has("caption") {
        print_table(&rows, &["id", "caption"]);
    } else if has("rel_object_recall") {
        print_table(&rows, &["split", "K", "iou_threshold", "rel_object_recall", "object_loc_recall", "n"]);
    } else {
        for r in &rows {
            println!("{}", serde_json::to_string_pretty(r)?);
        }
    }
    Ok(())
}
