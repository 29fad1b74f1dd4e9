//! Labelled datasets, few-shot sampling, positive-pair streams and synthetic
//! corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::tokenizer::{Tokenizer, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::pairgen::FewShotSet;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    /// Label names in first-seen order; `Example::label` indexes this list.
    pub classes: Vec<String>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// The training texts with labels discarded, as used for domain adaptation.
    pub fn unlabeled_texts(&self) -> Vec<String> {
        self.train.iter().map(|e| e.text.clone()).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            classes: self.classes.clone(),
            train_size: self.train.len(),
            test_size: self.test.len(),
        }
    }
}

/// `dataset.json`: label order and split sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jsonl") | Some("json") => Ok(Format::Jsonl),
            Some("csv") => Ok(Format::Csv),
            _ => Err(Error::Ingestion { path: path.to_path_buf(), reason: "unknown file format".into() }),
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Format::Jsonl => "jsonl",
            Format::Csv => "csv",
        }
    }
}

/// Rows read and rows skipped while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows: usize,
    pub malformed: usize,
}

const MANIFEST: &str = "dataset.json";

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads string fields `fields` from every row; rows missing one (or with an
/// empty value) are counted as malformed.
fn read_rows<const N: usize>(path: &Path, format: Format, fields: [&str; N]) -> Result<(Vec<[String; N]>, LoadReport)> {
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    let text_of = |v: &serde_json::Value| match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    };
    match format {
        Format::Jsonl => {
            let file = File::open(path).map_err(|e| ingestion(path, e.to_string()))?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                report.rows += 1;
                let row = serde_json::from_str::<serde_json::Value>(&line).ok().and_then(|v| {
                    let vals: Vec<String> =
                        fields.iter().filter_map(|f| v.get(*f).and_then(text_of)).filter(|s| !s.trim().is_empty()).collect();
                    <[String; N]>::try_from(vals).ok()
                });
                match row {
                    Some(r) => out.push(r),
                    None => report.malformed += 1,
                }
            }
        }
        Format::Csv => {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| ingestion(path, e.to_string()))?;
            let headers = rdr.headers()?.clone();
            let cols: Vec<usize> = fields
                .iter()
                .map(|f| headers.iter().position(|h| h.trim() == *f).ok_or_else(|| ingestion(path, format!("missing `{f}` column"))))
                .collect::<Result<_>>()?;
            for rec in rdr.records() {
                report.rows += 1;
                let row = rec.ok().and_then(|r| {
                    let vals: Vec<String> = cols
                        .iter()
                        .filter_map(|&c| r.get(c).map(str::to_string))
                        .filter(|s| !s.trim().is_empty())
                        .collect();
                    <[String; N]>::try_from(vals).ok()
                });
                match row {
                    Some(r) => out.push(r),
                    None => report.malformed += 1,
                }
            }
        }
    }
    Ok((out, report))
}

fn split_file(dir: &Path, split: &str) -> Option<(PathBuf, Format)> {
    [Format::Jsonl, Format::Csv].into_iter().find_map(|f| {
        let p = dir.join(format!("{split}.{}", f.extension()));
        p.exists().then_some((p, f))
    })
}

/// Loads a dataset from a single file (all rows become the training split) or a
/// directory holding `train.{jsonl,csv}`, optionally `test.*` and `dataset.json`.
/// Labels are indexed in first-seen training order unless the manifest fixes it;
/// test rows with unseen labels count as malformed.
pub fn load_dataset(path: &Path, format: Option<Format>) -> Result<(LabeledDataset, LoadReport)> {
    let (train_path, train_fmt, test, manifest) = if path.is_dir() {
        let (p, f) = split_file(path, "train").ok_or_else(|| ingestion(path, "no train.jsonl or train.csv"))?;
        let manifest: Option<DatasetManifest> = match fs::read_to_string(path.join(MANIFEST)) {
            Ok(s) => Some(serde_json::from_str(&s)?),
            Err(_) => None,
        };
        (p, format.unwrap_or(f), split_file(path, "test"), manifest)
    } else {
        let f = match format {
            Some(f) => f,
            None => Format::from_path(path)?,
        };
        (path.to_path_buf(), f, None, None)
    };
    let name = manifest.as_ref().map(|m| m.name.clone()).unwrap_or_else(|| {
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string()
    });
    let mut classes: Vec<String> = manifest.map(|m| m.classes).unwrap_or_default();
    let mut index: BTreeMap<String, usize> = classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    let (rows, mut report) = read_rows(&train_path, train_fmt, ["text", "label"])?;
    let mut train = Vec::with_capacity(rows.len());
    for [text, label] in rows {
        let next = index.len();
        let id = *index.entry(label.clone()).or_insert_with(|| {
            classes.push(label);
            next
        });
        train.push(Example { text, label: id });
    }
    if train.is_empty() {
        return Err(ingestion(&train_path, "no valid rows"));
    }
    let mut test_rows = Vec::new();
    if let Some((p, f)) = test {
        let (rows, r) = read_rows(&p, f, ["text", "label"])?;
        report.rows += r.rows;
        report.malformed += r.malformed;
        for [text, label] in rows {
            match index.get(&label) {
                Some(&id) => test_rows.push(Example { text, label: id }),
                None => report.malformed += 1,
            }
        }
    }
    if report.malformed > 0 {
        log::warn!("{}: skipped {} malformed rows", path.display(), report.malformed);
    }
    Ok((LabeledDataset { name, classes, train, test: test_rows }, report))
}

fn write_split(path: &Path, format: Format, rows: &[Example], classes: &[String]) -> Result<()> {
    match format {
        Format::Jsonl => {
            let mut w = BufWriter::new(File::create(path)?);
            for e in rows {
                let row = serde_json::json!({ "text": e.text, "label": classes[e.label] });
                writeln!(w, "{row}")?;
            }
            w.flush()?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["text", "label"])?;
            for e in rows {
                w.write_record([e.text.as_str(), classes[e.label].as_str()])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Writes `train.*`, `test.*` and `dataset.json` into `dir`.
pub fn export_dataset(ds: &LabeledDataset, dir: &Path, format: Format) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_split(&dir.join(format!("train.{}", format.extension())), format, &ds.train, &ds.classes)?;
    write_split(&dir.join(format!("test.{}", format.extension())), format, &ds.test, &ds.classes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&ds.manifest())?)?;
    Ok(())
}

/// Uniform sample without replacement of `min(k, n_c)` training items per class.
pub fn sample_few_shot(ds: &LabeledDataset, k: usize, seed: u64) -> Result<FewShotSet> {
    if k == 0 {
        return Err(Error::Config("shots per class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, e) in ds.train.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let mut items = Vec::new();
    let mut source_ids = Vec::new();
    let mut shortfall = BTreeMap::new();
    for (c, ids) in by_class.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::Config(format!("class `{}` has no training items", ds.classes[c])));
        }
        let take = k.min(ids.len());
        if take < k {
            shortfall.insert(c, k - take);
        }
        let mut picked: Vec<usize> = sample(&mut rng, ids.len(), take).into_iter().map(|j| ids[j]).collect();
        picked.sort_unstable();
        for i in picked {
            items.push((ds.train[i].text.clone(), c));
            source_ids.push(i);
        }
    }
    if !shortfall.is_empty() {
        log::warn!("{}: classes short of {k} shots: {shortfall:?}", ds.name);
    }
    Ok(FewShotSet {
        items,
        source_ids,
        classes: ds.classes.clone(),
        shots_per_class: k,
        sampling_seed: seed,
        shortfall,
    })
}

/// `(anchor, positive)` text pairs for sentence-embedding training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStream {
    pub source: String,
    pub pairs: Vec<(String, String)>,
}

impl PairStream {
    pub fn new(source: impl Into<String>, pairs: Vec<(String, String)>) -> Result<Self> {
        if pairs.iter().any(|(a, p)| a.trim().is_empty() || p.trim().is_empty()) {
            return Err(Error::Config("pair stream texts must be nonempty".into()));
        }
        Ok(Self { source: source.into(), pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Concatenates several sources and shuffles the result.
    pub fn mix(streams: &[PairStream], seed: u64) -> Self {
        let mut pairs: Vec<(String, String)> = streams.iter().flat_map(|s| s.pairs.iter().cloned()).collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let source = streams.iter().map(|s| s.source.as_str()).collect::<Vec<_>>().join("+");
        Self { source, pairs }
    }
}

/// Loads `{"anchor", "positive"}` rows (JSONL or CSV).
pub fn load_pairs(path: &Path) -> Result<(PairStream, LoadReport)> {
    let (rows, report) = read_rows(path, Format::from_path(path)?, ["anchor", "positive"])?;
    if rows.is_empty() {
        return Err(ingestion(path, "no valid pairs"));
    }
    let source = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pairs").to_string();
    let pairs = rows.into_iter().map(|[a, p]| (a, p)).collect();
    Ok((PairStream { source, pairs }, report))
}

pub fn export_pairs(stream: &PairStream, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (a, p) in &stream.pairs {
        writeln!(w, "{}", serde_json::json!({ "anchor": a, "positive": p }))?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of a class-conditional bag-of-words corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub classes: usize,
    pub words_per_class: usize,
    pub filler_words: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Extra unlabelled sentences per class, beyond the training texts.
    pub unlabeled_per_class: usize,
    pub pairs_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a word is drawn from the class vocabulary rather than the filler.
    pub class_word_frac: f64,
    /// Explicit class vocabularies; generated from the lexicon when absent.
    #[serde(default)]
    pub vocab: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub filler: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            classes: 3,
            words_per_class: 20,
            filler_words: 100,
            train_per_class: 50,
            test_per_class: 50,
            unlabeled_per_class: 0,
            pairs_per_class: 50,
            min_len: 8,
            max_len: 12,
            class_word_frac: 1.0,
            vocab: None,
            filler: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub dataset: LabeledDataset,
    /// Training texts followed by the extra unlabelled sentences.
    pub unlabeled: Vec<String>,
    pub pairs: PairStream,
    pub vocab: Vec<Vec<String>>,
    pub filler: Vec<String>,
}

fn lexicon_vocab(spec: &SynthSpec, tok: &Tokenizer) -> Result<(Vec<Vec<String>>, Vec<String>)> {
    let need = spec.classes * spec.words_per_class + spec.filler_words;
    if NUM_SPECIAL + need > tok.vocab_size() {
        return Err(Error::Config(format!("{need} synthetic words exceed the {} word lexicon", tok.vocab_size())));
    }
    let word = |i: usize| tok.word(NUM_SPECIAL + i);
    let vocab = (0..spec.classes)
        .map(|c| (0..spec.words_per_class).map(|i| word(c * spec.words_per_class + i)).collect())
        .collect();
    let base = spec.classes * spec.words_per_class;
    let filler = (0..spec.filler_words).map(|i| word(base + i)).collect();
    Ok((vocab, filler))
}

fn sentence(rng: &mut ChaCha8Rng, spec: &SynthSpec, class_words: &[String], filler: &[String]) -> String {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let anchor = rng.gen_range(0..len);
    (0..len)
        .map(|i| {
            if i == anchor || filler.is_empty() || rng.gen::<f64>() < spec.class_word_frac {
                class_words[rng.gen_range(0..class_words.len())].as_str()
            } else {
                filler[rng.gen_range(0..filler.len())].as_str()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sentences whose class words come from disjoint per-class vocabularies, mixed
/// with shared filler words. Every sentence holds at least one class word.
pub fn synth_corpus(spec: &SynthSpec, tok: &Tokenizer) -> Result<SynthCorpus> {
    if spec.classes < 2 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config("synthetic corpus needs >= 2 classes and 1 <= min_len <= max_len".into()));
    }
    if !(0.0..=1.0).contains(&spec.class_word_frac) {
        return Err(Error::Config("class_word_frac must lie in [0, 1]".into()));
    }
    let (vocab, filler) = match (&spec.vocab, &spec.filler) {
        (Some(v), f) => (v.clone(), f.clone().unwrap_or_default()),
        (None, Some(_)) => return Err(Error::Config("explicit filler words need explicit class vocabularies".into())),
        (None, None) => lexicon_vocab(spec, tok)?,
    };
    if vocab.len() != spec.classes || vocab.iter().any(Vec::is_empty) {
        return Err(Error::Config("need one nonempty vocabulary per class".into()));
    }
    let mut seen = BTreeSet::new();
    for w in vocab.iter().flatten().chain(&filler) {
        let key = w.to_lowercase();
        if !seen.insert(key) {
            return Err(Error::Config(format!("word `{w}` appears in more than one vocabulary partition")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes: Vec<String> = (0..spec.classes).map(|c| format!("class_{c}")).collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..spec.classes)
            .flat_map(|c| (0..n).map(move |_| c).collect::<Vec<_>>())
            .map(|c| Example { text: sentence(rng, spec, &vocab[c], &filler), label: c })
            .collect()
    };
    let mut train = draw(spec.train_per_class, &mut rng);
    let mut test = draw(spec.test_per_class, &mut rng);
    let extra = draw(spec.unlabeled_per_class, &mut rng);
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(spec.classes * spec.pairs_per_class);
    for c in 0..spec.classes {
        for _ in 0..spec.pairs_per_class {
            let a = sentence(&mut rng, spec, &vocab[c], &filler);
            let p = sentence(&mut rng, spec, &vocab[c], &filler);
            pairs.push((a, p));
        }
    }
    pairs.shuffle(&mut rng);
    let dataset = LabeledDataset { name: spec.name.clone(), classes, train, test };
    let mut unlabeled = dataset.unlabeled_texts();
    unlabeled.extend(extra.into_iter().map(|e| e.text));
    Ok(SynthCorpus {
        dataset,
        unlabeled,
        pairs: PairStream { source: format!("{}-paraphrase", spec.name), pairs },
        vocab,
        filler,
    })
}
