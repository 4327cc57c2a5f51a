//! Stage runner over an output directory.
//!
//! Every stage writes into `root/<stage>/<label>-<input hash>/` together with
//! a `stage.json` that lists its input hash and the sha256 of each artifact.
//! A stage whose directory already holds a matching, verified record is
//! skipped. Stages build into a `.partial` directory that is renamed on
//! success, and a lock file keeps a second process out of the same root.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterBank, Regime};
use crate::classifier::{
    self, evaluate, pretrain_towers, records_jsonl, records_table, select_hyperparameters, train_mixture, Adapted,
    MixtureConfig, ResultRecord, TowerPretrainConfig, TwoTowerClassifier,
};
use crate::config::{AxisName, DreamSection, ExperimentConfig, SynthMethod};
use crate::datasets::procedural::{
    attribute_words, benchmark_classes, render_benchmark, ClassSpec, Hue, ShapeKind, Style,
};
use crate::datasets::{load_image_folder, sample_few_shot, FewShotDataset, FewShotSpec, LabeledImageDataset, Split};
use crate::dream::{self, DreamConfig};
use crate::error::{Error, Result};
use crate::evalkit::{self, CellOutcome, FeatureExtractor, FidReport, SweepAxis, SweepResult};
use crate::generator::{build_vocabulary, pretrain_base, GeneratorModel, NoiseSchedule, PretrainConfig, SampleConfig};
use crate::seed::derive_seed;
use crate::synthgen::{self, GenerationConfig, SyntheticDataset};
use crate::text::{PromptTemplate, Vocabulary, DEFAULT_TEMPLATE};

pub const STAGE_FILE: &str = "stage.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainGenerator,
    PretrainClassifier,
    Dream,
    Generate,
    TrainClassifier,
    Evaluate,
    Fid,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::PretrainGenerator,
        Stage::PretrainClassifier,
        Stage::Dream,
        Stage::Generate,
        Stage::TrainClassifier,
        Stage::Evaluate,
        Stage::Fid,
        Stage::Sweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainGenerator => "pretrain-generator",
            Stage::PretrainClassifier => "pretrain-classifier",
            Stage::Dream => "dream",
            Stage::Generate => "generate",
            Stage::TrainClassifier => "train-classifier",
            Stage::Evaluate => "evaluate",
            Stage::Fid => "fid",
            Stage::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Error raised inside a stage, tagged with the stage name.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Contents of `stage.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub label: String,
    pub input_hash: String,
    /// Relative path to sha256, for every file the stage wrote.
    pub artifacts: BTreeMap<String, String>,
}

impl StageRecord {
    /// Hash over all artifact hashes, used as the stage's identity downstream.
    pub fn output_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.artifacts {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct StageRun {
    pub dir: PathBuf,
    pub record: StageRecord,
    /// True when an existing verified result was reused.
    pub skipped: bool,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .expect("walk stays inside the stage dir")
                .to_string_lossy()
                .replace('\\', "/");
            if rel != STAGE_FILE {
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Exclusive claim on an output root, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOCK_FILE);
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Protocol(format!(
                        "{} is locked by another run (delete {} if that run is gone)",
                        root.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// The downstream benchmark splits.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: LabeledImageDataset,
    pub test: LabeledImageDataset,
}

/// Which few-shot draw a stage works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub replicate: u64,
    pub shots: usize,
}

impl Scope {
    fn tag(&self) -> String {
        format!("r{}-k{}", self.replicate, self.shots)
    }
}

/// One classifier fine-tuning variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub method: SynthMethod,
    pub lambda: f64,
    /// Synthetic images per class used.
    pub per_class: usize,
}

impl Variant {
    pub fn uses_real(&self) -> bool {
        self.lambda > 0.0
    }

    pub fn uses_synthetic(&self) -> bool {
        self.lambda < 1.0
    }

    fn tag(&self) -> String {
        if self.uses_synthetic() {
            format!("{}-l{}-m{}", self.method.as_str(), self.lambda, self.per_class)
        } else {
            "real-only".to_string()
        }
    }
}

fn input_hash<T: Serialize>(stage: Stage, label: &str, inputs: &T) -> String {
    let v = serde_json::json!({ "stage": stage, "label": label, "inputs": inputs });
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("inputs serialize")))
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    root: PathBuf,
    _lock: RunLock,
    log: Box<dyn FnMut(&str)>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("root", &self.root).finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Locks `cfg.output_root` and snapshots the resolved configuration.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.output_root.clone();
        let lock = RunLock::acquire(&root)?;
        let text = cfg.to_toml();
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        write_file(&root.join("configs").join(format!("{}.toml", &hash[..16])), &text)?;
        Ok(Self {
            cfg,
            root,
            _lock: lock,
            log: Box::new(|_| {}),
        })
    }

    /// Sends progress lines to `f`.
    pub fn with_log(mut self, f: impl FnMut(&str) + 'static) -> Self {
        self.log = Box::new(f);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scope(&self) -> Scope {
        Scope {
            replicate: self.cfg.replicate,
            shots: self.cfg.dataset.shots,
        }
    }

    fn note(&mut self, msg: &str) {
        (self.log)(msg);
    }

    /// Runs `produce` into a fresh directory unless a verified result with
    /// the same inputs exists.
    fn gated<T: Serialize>(
        &mut self,
        stage: Stage,
        label: &str,
        inputs: &T,
        produce: impl FnOnce(&mut Self, &Path) -> Result<()>,
    ) -> std::result::Result<StageRun, StageError> {
        let wrap = |source| StageError { stage, source };
        let hash = input_hash(stage, label, inputs);
        let dir = self.root.join(stage.as_str()).join(format!("{label}-{}", &hash[..16]));
        if let Some(record) = self.verified(&dir, &hash).map_err(wrap)? {
            self.note(&format!("{stage} {label}: up to date"));
            return Ok(StageRun {
                dir,
                record,
                skipped: true,
            });
        }
        self.note(&format!("{stage} {label}: running"));
        let partial = dir.with_extension("partial");
        for d in [&dir, &partial] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| wrap(Error::io(d, e)))?;
            }
        }
        fs::create_dir_all(&partial).map_err(|e| wrap(Error::io(&partial, e)))?;
        produce(self, &partial).map_err(wrap)?;
        let record = StageRecord {
            stage,
            label: label.to_string(),
            input_hash: hash,
            artifacts: hash_tree(&partial).map_err(wrap)?,
        };
        write_file(
            &partial.join(STAGE_FILE),
            serde_json::to_string_pretty(&record).expect("record serializes"),
        )
        .map_err(wrap)?;
        fs::rename(&partial, &dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        Ok(StageRun {
            dir,
            record,
            skipped: false,
        })
    }

    fn verified(&self, dir: &Path, hash: &str) -> Result<Option<StageRecord>> {
        let path = dir.join(STAGE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let record: StageRecord = match read_json(&path) {
            Ok(r) => r,
            Err(_) => return Ok(None),
        };
        if record.input_hash != hash {
            return Ok(None);
        }
        for (rel, want) in &record.artifacts {
            let p = dir.join(rel);
            if !p.exists() || sha256_file(&p)? != *want {
                return Ok(None);
            }
        }
        Ok(Some(record))
    }

    // ---- data -------------------------------------------------------------

    pub fn benchmark(&self) -> Result<Benchmark> {
        let d = &self.cfg.dataset;
        if !d.image_folder.is_empty() {
            let root = Path::new(&d.image_folder);
            return Ok(Benchmark {
                train: load_image_folder(&root.join("train"), Split::Train, d.resolution)?,
                test: load_image_folder(&root.join("test"), Split::Test, d.resolution)?,
            });
        }
        let classes = benchmark_classes(d.classes, d.fine_grain)?;
        let b = render_benchmark(
            &classes,
            d.per_class,
            d.resolution,
            d.style,
            derive_seed(self.cfg.seed, "dataset", 0),
        )?;
        Ok(Benchmark {
            train: b.train,
            test: b.test,
        })
    }

    pub fn few_shot(&self, scope: Scope, train: &LabeledImageDataset) -> Result<FewShotDataset> {
        sample_few_shot(
            train,
            &FewShotSpec {
                k: scope.shots,
                seed: derive_seed(self.cfg.seed, "few-shot", scope.replicate),
                split: Split::Train,
            },
        )
    }

    /// Every fully named attribute combination, minus `exclude`, rendered
    /// in the varied style. The train split holds half of the images.
    fn attribute_corpus(&self, exclude: &[String], per_class: usize, stream: &str) -> Result<LabeledImageDataset> {
        let mut classes = Vec::new();
        for &shape in &ShapeKind::ALL {
            for &hue in &Hue::ALL {
                for stripes in 0..4u8 {
                    for dotted in [false, true] {
                        let c = ClassSpec {
                            shape,
                            hue,
                            stripes: Some(stripes),
                            dotted: Some(dotted),
                        };
                        if !exclude.contains(&c.name()) {
                            classes.push(c);
                        }
                    }
                }
            }
        }
        let b = render_benchmark(
            &classes,
            2 * per_class,
            self.cfg.dataset.resolution,
            Style::Varied,
            derive_seed(self.cfg.seed, stream, 0),
        )?;
        Ok(b.train)
    }

    /// Generator pretraining data; never contains the evaluation classes.
    pub fn generator_corpus(&self, eval_classes: &[String]) -> Result<LabeledImageDataset> {
        self.attribute_corpus(eval_classes, self.cfg.generator.corpus_per_class, "generator-corpus")
    }

    /// Classifier pretraining data; keeps the evaluation classes only when
    /// `classifier.allow_overlap` is set.
    pub fn classifier_corpus(&self, eval_classes: &[String]) -> Result<LabeledImageDataset> {
        let exclude = if self.cfg.classifier.allow_overlap { &[][..] } else { eval_classes };
        self.attribute_corpus(exclude, self.cfg.classifier.corpus_per_class, "classifier-corpus")
    }

    /// Shared tokenizer of both models.
    pub fn vocabulary(&self, class_names: &[String]) -> Vocabulary {
        let mut words: BTreeSet<String> = attribute_words().into_iter().map(str::to_string).collect();
        for name in class_names {
            words.extend(name.split_whitespace().map(str::to_string));
        }
        let longest = class_names
            .iter()
            .map(|n| n.split_whitespace().count())
            .chain([4])
            .max()
            .unwrap_or(4);
        let template_words = DEFAULT_TEMPLATE.split_whitespace().count() - 1;
        build_vocabulary(DEFAULT_TEMPLATE, words, template_words + longest)
    }

    fn prompts(&self, ds: &LabeledImageDataset) -> (PromptTemplate, Vec<String>) {
        let t = PromptTemplate::standard(ds.class_names().to_vec());
        let p = t.prompts();
        (t, p)
    }

    // ---- stages -----------------------------------------------------------

    pub fn pretrain_generator(&mut self) -> std::result::Result<StageRun, StageError> {
        let g = self.cfg.generator.clone();
        let seed = self.cfg.seed;
        let bench_names = self
            .benchmark()
            .map_err(|source| StageError {
                stage: Stage::PretrainGenerator,
                source,
            })?
            .train
            .class_names()
            .to_vec();
        let inputs = (&g, seed, self.cfg.dataset.resolution, &bench_names);
        self.gated(Stage::PretrainGenerator, "base", &inputs, |p, dir| {
            let corpus = p.generator_corpus(&bench_names)?;
            let (template, _) = p.prompts(&corpus);
            let sched = NoiseSchedule::from_spec(&g.schedule)?;
            let model = GeneratorModel::new(
                g.arch.clone(),
                sched,
                p.vocabulary(&bench_names),
                derive_seed(seed, "generator-init", 0),
            )?;
            let cfg = PretrainConfig {
                steps: g.steps,
                batch_size: g.batch_size,
                lr: g.lr,
                weight_decay: g.weight_decay,
                p_uncond: g.p_uncond,
                seed: derive_seed(seed, "pretrain-generator", 0),
            };
            let out = pretrain_base(model, &corpus, &template, &cfg)?;
            out.model.save(&dir.join("model.bin"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in out.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_file(&dir.join("losses.csv"), csv)
        })
    }

    pub fn generator(&mut self) -> std::result::Result<(GeneratorModel, StageRun), StageError> {
        let run = self.pretrain_generator()?;
        let model = GeneratorModel::load(&run.dir.join("model.bin")).map_err(|source| StageError {
            stage: Stage::PretrainGenerator,
            source,
        })?;
        Ok((model, run))
    }

    pub fn pretrain_classifier(&mut self) -> std::result::Result<StageRun, StageError> {
        let c = self.cfg.classifier.clone();
        let seed = self.cfg.seed;
        let wrap = |source| StageError {
            stage: Stage::PretrainClassifier,
            source,
        };
        let bench = self.benchmark().map_err(wrap)?;
        let names = bench.train.class_names().to_vec();
        let inputs = (&c, seed, self.cfg.dataset.resolution, &names);
        self.gated(Stage::PretrainClassifier, "towers", &inputs, |p, dir| {
            let corpus = p.classifier_corpus(&names)?;
            let (template, _) = p.prompts(&corpus);
            let model = TwoTowerClassifier::new(
                c.arch.clone(),
                p.vocabulary(&names),
                derive_seed(seed, "classifier-init", 0),
            )?;
            let cfg = TowerPretrainConfig {
                steps: c.steps,
                batch_size: c.batch_size,
                lr: c.lr,
                weight_decay: c.weight_decay,
                augment: c.augment.clone(),
                allow_overlap: c.allow_overlap,
                seed: derive_seed(seed, "pretrain-classifier", 0),
            };
            let out = pretrain_towers(model, &corpus, &template, &names, &cfg)?;
            if !out.overlap.is_empty() {
                p.note(&format!("pretraining corpus overlaps {} evaluation classes", out.overlap.len()));
            }
            out.model.save(&dir.join("model.bin"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in out.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_file(&dir.join("losses.csv"), csv)?;
            write_file(
                &dir.join("overlap.json"),
                serde_json::to_string(&out.overlap).expect("names serialize"),
            )
        })
    }

    pub fn classifier(&mut self) -> std::result::Result<(TwoTowerClassifier, StageRun), StageError> {
        let run = self.pretrain_classifier()?;
        let model = TwoTowerClassifier::load(&run.dir.join("model.bin")).map_err(|source| StageError {
            stage: Stage::PretrainClassifier,
            source,
        })?;
        Ok((model, run))
    }

    fn dream_config(&self, d: &DreamSection, scope: Scope) -> DreamConfig {
        DreamConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            rank: d.rank,
            hosts: d.hosts.clone(),
            preservation: d.preservation.clone(),
            prior_sampler: SampleConfig {
                steps: self.cfg.generation.steps,
                guidance: self.cfg.generation.guidance,
            },
            weight_decay: d.weight_decay,
            seed: derive_seed(self.cfg.seed, "dream", scope.replicate),
            ..DreamConfig::default()
        }
    }

    /// Trains the adapter bank described by `d` on the few-shot draw of `scope`.
    pub fn dream(&mut self, scope: Scope, d: &DreamSection) -> std::result::Result<StageRun, StageError> {
        let wrap = |source| StageError {
            stage: Stage::Dream,
            source,
        };
        let (gen, gen_run) = self.generator()?;
        let bench = self.benchmark().map_err(wrap)?;
        let fs = self.few_shot(scope, &bench.train).map_err(wrap)?;
        let cfg = self.dream_config(d, scope);
        let inputs = (gen_run.record.output_hash(), fs.content_hash(), &cfg, d.regime);
        let label = format!("{}-{}", d.regime.as_str(), scope.tag());
        self.gated(Stage::Dream, &label, &inputs, |_, dir| {
            let template = PromptTemplate::standard(fs.class_names().to_vec());
            let out = dream::train(d.regime, &gen, &fs, &template, &cfg)?;
            out.bank.save(&dir.join("bank.bin"))?;
            out.write_loss_csv(&dir.join("losses.csv"))?;
            write_file(&dir.join("steps.json"), serde_json::to_string(&out.steps).expect("steps serialize"))
        })
    }

    /// `per_class` synthetic images per class with `method`, for `scope`.
    pub fn generate(
        &mut self,
        scope: Scope,
        method: SynthMethod,
        per_class: usize,
    ) -> std::result::Result<StageRun, StageError> {
        let wrap = |source| StageError {
            stage: Stage::Generate,
            source,
        };
        let (gen, gen_run) = self.generator()?;
        let bench = self.benchmark().map_err(wrap)?;
        let fs = self.few_shot(scope, &bench.train).map_err(wrap)?;
        let bank_run = match method {
            SynthMethod::Datadream => {
                let d = self.cfg.dream.clone();
                Some(self.dream(scope, &d)?)
            }
            _ => None,
        };
        let g = self.cfg.generation.clone();
        let gcfg = GenerationConfig {
            per_class,
            sampler: SampleConfig {
                steps: g.steps,
                guidance: g.guidance,
            },
            seed: derive_seed(self.cfg.seed, "generate", scope.replicate),
        };
        let strength = (method == SynthMethod::NoisedReal).then_some(g.noised_strength);
        let inputs = (
            gen_run.record.output_hash(),
            bank_run.as_ref().map(|r| r.record.output_hash()),
            (method == SynthMethod::NoisedReal).then(|| fs.content_hash()),
            bench.train.class_names(),
            per_class,
            &gcfg.sampler,
            gcfg.seed,
            strength,
        );
        let label = format!("{}-{}", method.as_str(), scope.tag());
        self.gated(Stage::Generate, &label, &inputs, |_, dir| {
            let template = PromptTemplate::standard(bench.train.class_names().to_vec());
            let ds = match method {
                SynthMethod::Datadream => {
                    let run = bank_run.as_ref().expect("datadream has a bank");
                    let bank = AdapterBank::load(&run.dir.join("bank.bin"))?;
                    synthgen::generate_dataset(&gen, &bank, &template, &gcfg)?
                }
                SynthMethod::ZeroShot => synthgen::baseline_zero_shot(&gen, &template, &gcfg)?,
                SynthMethod::NoisedReal => {
                    synthgen::baseline_noised_real(&gen, &fs, &template, g.noised_strength, &gcfg)?
                }
            };
            ds.save(&dir.join("data"))?;
            Ok(())
        })
    }

    fn synthetic(&mut self, scope: Scope, v: Variant) -> std::result::Result<(SyntheticDataset, StageRun), StageError> {
        let full = self.cfg.generation.per_class.max(v.per_class);
        let run = self.generate(scope, v.method, full)?;
        let wrap = |source| StageError {
            stage: Stage::Generate,
            source,
        };
        let ds = SyntheticDataset::load(&run.dir.join("data")).map_err(wrap)?;
        Ok((ds.take_per_class(v.per_class).map_err(wrap)?, run))
    }

    fn mixture_config(&self, scope: Scope, v: Variant, synth_len: usize, real_len: usize) -> MixtureConfig {
        let m = &self.cfg.mixture;
        let mut epochs = m.epochs;
        if !v.uses_synthetic() {
            epochs = if m.real_only_epochs > 0 {
                m.real_only_epochs
            } else {
                // Same optimizer steps as a mixed run over the configured synthetic set.
                let mixed = classifier::mixture_steps(real_len, synth_len, 0.5, m.batch_size, m.epochs);
                let per_epoch = classifier::mixture_steps(real_len, 0, 1.0, m.batch_size, 1).max(1);
                mixed.div_ceil(per_epoch).max(1)
            };
        }
        MixtureConfig {
            lambda: v.lambda,
            batch_size: m.batch_size,
            lr: m.lr,
            weight_decay: m.weight_decay,
            lr_grid: m.lr_grid.clone(),
            weight_decay_grid: m.weight_decay_grid.clone(),
            rank: m.rank,
            epochs,
            augment: m.augment.clone(),
            seed: derive_seed(self.cfg.seed, "mixture", scope.replicate),
        }
    }

    /// Fine-tunes classifier adapters for one variant.
    pub fn train_classifier(&mut self, scope: Scope, v: Variant) -> std::result::Result<StageRun, StageError> {
        let wrap = |source| StageError {
            stage: Stage::TrainClassifier,
            source,
        };
        if !(0.0..=1.0).contains(&v.lambda) {
            return Err(wrap(Error::InvalidArgument(format!("lambda {} outside [0, 1]", v.lambda))));
        }
        let (clf, clf_run) = self.classifier()?;
        let bench = self.benchmark().map_err(wrap)?;
        let fs = self.few_shot(scope, &bench.train).map_err(wrap)?;
        let real = fs.to_dataset(Split::Train);
        let synth = if v.uses_synthetic() {
            Some(self.synthetic(scope, v)?)
        } else {
            None
        };
        let synth_len = synth.as_ref().map_or(
            self.cfg.generation.per_class * bench.train.num_classes(),
            |(s, _)| s.len(),
        );
        let mut cfg = self.mixture_config(scope, v, synth_len, real.len());
        let search = self.cfg.mixture.search;
        let holdout = self.cfg.mixture.holdout;
        let hashed_cfg = cfg.clone();
        let inputs = (
            clf_run.record.output_hash(),
            fs.content_hash(),
            synth.as_ref().map(|(s, _)| s.content_hash()),
            &hashed_cfg,
            v,
            search.then_some(holdout),
        );
        let (_, prompts) = self.prompts(&bench.train);
        self.gated(Stage::TrainClassifier, &format!("{}-{}", v.tag(), scope.tag()), &inputs, |_, dir| {
            let synth_ds = synth.as_ref().map(|(s, _)| s.to_labeled());
            let real_ds = v.uses_real().then_some(&real);
            if search {
                let choice = select_hyperparameters(&clf, &real, synth_ds.as_ref(), &prompts, &cfg, holdout)?;
                cfg.lr = choice.lr;
                cfg.weight_decay = choice.weight_decay;
                write_file(
                    &dir.join("search.json"),
                    serde_json::to_string_pretty(&choice).expect("choice serializes"),
                )?;
            }
            let out = train_mixture(&clf, real_ds, synth_ds.as_ref(), &prompts, &cfg)?;
            let set = out.adapted.adapters.clone().expect("mixture training yields adapters");
            AdapterBank::new(Regime::Dset, cfg.rank, cfg.seed, prompts.len(), vec![set])?
                .save(&dir.join("adapters.bin"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in out.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_file(&dir.join("losses.csv"), csv)?;
            write_file(
                &dir.join("training.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "log_scale": out.adapted.log_scale,
                    "steps": out.steps,
                    "config": cfg,
                }))
                .expect("summary serializes"),
            )
        })
    }

    fn load_adapted(&self, run: &StageRun) -> Result<Adapted> {
        let bank = AdapterBank::load(&run.dir.join("adapters.bin"))?;
        let summary: serde_json::Value = read_json(&run.dir.join("training.json"))?;
        Ok(Adapted {
            adapters: Some(bank.entries()[0].clone()),
            log_scale: summary["log_scale"].as_f64().unwrap_or(0.0) as f32,
        })
    }

    /// Test accuracy of one variant, or of the zero-shot classifier for `None`.
    pub fn evaluate(&mut self, scope: Scope, v: Option<Variant>) -> std::result::Result<ResultRecord, StageError> {
        let wrap = |source| StageError {
            stage: Stage::Evaluate,
            source,
        };
        let (clf, clf_run) = self.classifier()?;
        let train_run = match v {
            Some(v) => Some(self.train_classifier(scope, v)?),
            None => None,
        };
        let bench = self.benchmark().map_err(wrap)?;
        let inputs = (
            clf_run.record.output_hash(),
            train_run.as_ref().map(|r| r.record.output_hash()),
            bench.test.content_hash(),
            scope,
            v,
        );
        let label = match v {
            Some(v) => format!("{}-{}", v.tag(), scope.tag()),
            None => "zero-shot".to_string(),
        };
        let dataset = if self.cfg.dataset.image_folder.is_empty() {
            format!("procedural-{}", self.cfg.dataset.classes)
        } else {
            "image-folder".to_string()
        };
        // Where outputs live does not change what was computed.
        let config_hash = classifier::config_hash(&ExperimentConfig {
            output_root: PathBuf::new(),
            ..self.cfg.clone()
        });
        let seed = self.cfg.seed;
        let run = self.gated(Stage::Evaluate, &label, &inputs, |p, dir| {
            let adapted = match &train_run {
                Some(r) => p.load_adapted(r)?,
                None => Adapted::base(&clf),
            };
            let (_, prompts) = p.prompts(&bench.train);
            let report = evaluate(&clf, &adapted, &prompts, &bench.test)?;
            let record = ResultRecord {
                dataset,
                method: v.map_or("zero_shot_clf".to_string(), |v| {
                    if v.uses_synthetic() {
                        v.method.as_str().to_string()
                    } else {
                        "real_only".to_string()
                    }
                }),
                real: v.is_some_and(|v| v.uses_real()),
                synthetic: v.is_some_and(|v| v.uses_synthetic()),
                shots: if v.is_some() { scope.shots } else { 0 },
                per_class_synthetic: v.filter(Variant::uses_synthetic).map_or(0, |v| v.per_class),
                lambda: v.map(|v| v.lambda),
                seed: derive_seed(seed, "mixture", scope.replicate),
                accuracy: report.accuracy,
                per_class: report.per_class,
                config_hash,
                reference: Some(classifier::REFERENCE),
            };
            write_file(
                &dir.join("record.json"),
                serde_json::to_string_pretty(&record).expect("record serializes"),
            )
        })?;
        let record: ResultRecord = read_json(&run.dir.join("record.json")).map_err(wrap)?;
        self.refresh_results().map_err(wrap)?;
        Ok(record)
    }

    /// Rewrites `results.jsonl` and `results.txt` from every evaluation record.
    fn refresh_results(&self) -> Result<()> {
        let dir = self.root.join(Stage::Evaluate.as_str());
        let mut records = Vec::new();
        if dir.exists() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("record.json").exists() && p.join(STAGE_FILE).exists())
                .collect();
            entries.sort();
            for p in entries {
                records.push(read_json::<ResultRecord>(&p.join("record.json"))?);
            }
        }
        write_file(&self.root.join("results.jsonl"), records_jsonl(&records))?;
        write_file(&self.root.join("results.txt"), records_table(&records))
    }

    /// Per-class FID of a synthetic set against the real training split.
    pub fn fid(&mut self, scope: Scope, method: SynthMethod, per_class: usize) -> std::result::Result<FidReport, StageError> {
        let wrap = |source| StageError {
            stage: Stage::Fid,
            source,
        };
        let (clf, clf_run) = self.classifier()?;
        let v = Variant {
            method,
            lambda: 0.0,
            per_class,
        };
        let (synth, synth_run) = self.synthetic(scope, v)?;
        let bench = self.benchmark().map_err(wrap)?;
        let bins = self.cfg.eval.fid_bins;
        let inputs = (
            clf_run.record.output_hash(),
            synth_run.record.output_hash(),
            per_class,
            bench.train.content_hash(),
            bins,
        );
        let label = format!("{}-m{per_class}-{}", method.as_str(), scope.tag());
        let run = self.gated(Stage::Fid, &label, &inputs, |_, dir| {
            let ex = FeatureExtractor::new(clf);
            let mut report = evalkit::per_class_fid(&bench.train, &synth.to_labeled(), &ex)?;
            let values: Vec<f64> = report.rows.iter().map(|r| r.fid).collect();
            let hi = values.iter().cloned().fold(0.0, f64::max).max(1e-9);
            report.histogram = evalkit::histogram(&values, bins, 0.0, hi)?;
            write_file(
                &dir.join("report.json"),
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            write_file(&dir.join("report.jsonl"), report.to_jsonl())?;
            write_file(&dir.join("report.csv"), report.to_csv())
        })?;
        read_json(&run.dir.join("report.json")).map_err(wrap)
    }

    /// Accuracy grid over synthetic count (M) or shots (K).
    pub fn sweep(&mut self) -> std::result::Result<SweepResult, StageError> {
        let e = self.cfg.eval.clone();
        let method = self.cfg.generation.method;
        let lambda = self.cfg.mixture.lambda;
        let default_m = self.cfg.generation.per_class;
        let default_k = self.cfg.dataset.shots;
        let axis = match e.sweep_axis {
            AxisName::M => SweepAxis::M,
            AxisName::K => SweepAxis::K,
        };
        let mut failure: Option<StageError> = None;
        let result = evalkit::run_sweep(axis, &e.sweep_values, &e.sweep_seeds, |value, seed| {
            let (scope, m) = match axis {
                SweepAxis::M => (
                    Scope {
                        replicate: seed,
                        shots: default_k,
                    },
                    value,
                ),
                SweepAxis::K => (
                    Scope {
                        replicate: seed,
                        shots: value,
                    },
                    default_m,
                ),
            };
            let mut cell = || -> std::result::Result<CellOutcome, StageError> {
                let synth_only = self.evaluate(
                    scope,
                    Some(Variant {
                        method,
                        lambda: 0.0,
                        per_class: m,
                    }),
                )?;
                let real_synth = self.evaluate(
                    scope,
                    Some(Variant {
                        method,
                        lambda,
                        per_class: m,
                    }),
                )?;
                let bench = self.benchmark().map_err(|source| StageError {
                    stage: Stage::Sweep,
                    source,
                })?;
                let fs = self.few_shot(scope, &bench.train).map_err(|source| StageError {
                    stage: Stage::Sweep,
                    source,
                })?;
                let shots = fs
                    .items()
                    .iter()
                    .zip(fs.source_indices())
                    .map(|(it, &i)| (it.label, i))
                    .collect();
                Ok(CellOutcome {
                    synth_only: synth_only.accuracy,
                    real_synth: real_synth.accuracy,
                    shots: Some(shots),
                })
            };
            cell().map_err(|err| {
                let msg = err.to_string();
                failure = Some(err);
                Error::Protocol(msg)
            })
        });
        let result = match (result, failure) {
            (_, Some(err)) => return Err(err),
            (r, None) => r.map_err(|source| StageError {
                stage: Stage::Sweep,
                source,
            })?,
        };
        let dir = self.root.join(Stage::Sweep.as_str());
        let wrap = |source| StageError {
            stage: Stage::Sweep,
            source,
        };
        let name = format!("{}-{}", serde_json::to_value(axis).expect("axis").as_str().unwrap_or("axis"), method.as_str());
        write_file(&dir.join(format!("{name}.csv")), result.to_csv()).map_err(wrap)?;
        write_file(&dir.join(format!("{name}.jsonl")), result.to_jsonl()).map_err(wrap)?;
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierArch;
    use crate::generator::GeneratorArch;

    /// A configuration small enough to run every stage in a unit test.
    pub(crate) fn tiny_config(root: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.output_root = root.to_path_buf();
        c.dataset.classes = 3;
        c.dataset.per_class = 20;
        c.dataset.resolution = 8;
        c.dataset.shots = 2;
        c.generator.arch = GeneratorArch {
            resolution: 8,
            patch: 4,
            width: 16,
            heads: 2,
            mlp_hidden: 16,
            depth: 3,
            text_width: 16,
            text_layers: 1,
            text_heads: 2,
            time_dim: 8,
        };
        c.generator.schedule.steps = 100;
        c.generator.corpus_per_class = 4;
        c.generator.steps = 5;
        c.classifier.arch = ClassifierArch {
            resolution: 8,
            patch: 4,
            width: 16,
            heads: 2,
            layers: 1,
            mlp_hidden: 16,
            text_width: 16,
            text_layers: 1,
            text_heads: 2,
            embed_dim: 8,
        };
        c.classifier.corpus_per_class = 1;
        c.classifier.steps = 3;
        c.classifier.batch_size = 8;
        c.dream.epochs = 1;
        c.dream.batch_size = 2;
        c.dream.rank = 2;
        c.generation.per_class = 2;
        c.generation.steps = 2;
        c.mixture.batch_size = 4;
        c.mixture.rank = 2;
        c.mixture.epochs = 1;
        c.eval.sweep_values = vec![1, 2];
        c.eval.sweep_seeds = vec![0];
        c
    }

    #[test]
    fn second_run_is_a_verified_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let scope;
        let first = {
            let mut p = Pipeline::open(cfg.clone()).unwrap();
            scope = p.scope();
            let v = Variant {
                method: SynthMethod::Datadream,
                lambda: 0.8,
                per_class: 2,
            };
            p.evaluate(scope, Some(v)).unwrap();
            p.train_classifier(scope, v).unwrap()
        };
        assert!(first.skipped);
        let mut p = Pipeline::open(cfg).unwrap();
        let again = p.dream(scope, &p.cfg.dream.clone()).unwrap();
        assert!(again.skipped);
        assert!(dir.path().join("results.jsonl").exists());
    }

    #[test]
    fn tampered_artifact_triggers_rerun_with_same_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(tiny_config(dir.path())).unwrap();
        let first = p.pretrain_classifier().unwrap();
        fs::write(first.dir.join("losses.csv"), "edited").unwrap();
        let second = p.pretrain_classifier().unwrap();
        assert!(!second.skipped);
        assert_eq!(first.record, second.record);
    }

    #[test]
    fn lock_keeps_a_second_writer_out() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::open(tiny_config(dir.path())).unwrap();
        let e = Pipeline::open(tiny_config(dir.path())).unwrap_err();
        assert!(matches!(e, Error::Protocol(_)));
        drop(p);
        Pipeline::open(tiny_config(dir.path())).unwrap();
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(tiny_config(dir.path())).unwrap();
        let scope = p.scope();
        let e = p
            .train_classifier(
                scope,
                Variant {
                    method: SynthMethod::ZeroShot,
                    lambda: 1.5,
                    per_class: 2,
                },
            )
            .unwrap_err();
        assert_eq!(e.stage, Stage::TrainClassifier);
        assert!(e.to_string().starts_with("stage train-classifier failed"));
    }

    #[test]
    fn m_sweep_runs_every_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(tiny_config(dir.path())).unwrap();
        let res = p.sweep().unwrap();
        assert_eq!(res.rows.len(), 4);
        assert!(dir.path().join("sweep/m-datadream.csv").exists());
    }
}
