use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::{info, warn};
use serde_json::json;
use tvsl_core::encoder_hub::EncoderHub;
use tvsl_core::eval::evaluate;
use tvsl_core::mixture_data::{
    data_root, encode_sample, DatasetManifest, EncodedSample, ManifestHeader, ManifestRecord, SyntheticWorld,
};
use tvsl_core::model::{Parameters, TvslModel};
use tvsl_core::seeding::rng_for;
use tvsl_core::text_guidance::ClassVocabulary;
use tvsl_core::train::Trainer;
use tvsl_core::{Checkpoint32, TvslError, TvslModel32};

use crate::config::{RunConfig, VocabularyChoice};

pub const DATA_ROOT_ENV: &str = "TVSL_DATA_ROOT";

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub single_stage: bool,
    pub prompt_length: Option<usize>,
    pub sources: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if self.single_stage {
            cfg.model.single_stage = true;
        }
        if let Some(l) = self.prompt_length {
            cfg.model.prompt_length = l;
        }
    }

    /// Model flags must agree with what a checkpoint was trained with.
    fn check_against(&self, ckpt: &Checkpoint32) -> Result<()> {
        if self.single_stage && !ckpt.model.single_stage {
            bail!("--single-stage given but the checkpoint was trained with instance detection");
        }
        if let Some(l) = self.prompt_length {
            ensure!(
                l == ckpt.model.prompt_length,
                "--prompt-length {l} given but the checkpoint has prompt length {}",
                ckpt.model.prompt_length
            );
        }
        Ok(())
    }
}

fn root_override(cfg: &RunConfig) -> Option<PathBuf> {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => cfg.data.root.clone(),
    }
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(cfg: &RunConfig, ov: &Overrides) -> Result<()> {
    let mut spec = cfg.synth.world.clone();
    if let Some(s) = ov.seed {
        spec.seed = s;
    }
    if let Some(k) = ov.sources {
        spec.test_sources = k;
    }
    let world = SyntheticWorld::new(spec)?;
    let s = world.spec.clone();
    let all: Vec<usize> = (0..world.classes()).collect();
    let train = world.records("train", s.train, s.train_sources, &all)?;
    let test = world.records("test", s.test, s.test_sources, &all)?;
    let mut splits = vec![("train", train), ("test", test)];
    let mut zero_shot = None;
    if cfg.synth.zero_shot {
        let (seen, unseen) = world.zero_shot_split(cfg.synth.zero_shot_seed);
        let zs_train = world.records("zs-train", s.train, s.train_sources.min(seen.len()), &seen)?;
        let zs_test = world.records("zs-test", s.test, s.test_sources.min(unseen.len()), &unseen)?;
        splits.push(("zs-train", zs_train));
        splits.push(("zs-test", zs_test));
        zero_shot = Some(world.zero_shot_record(cfg.synth.zero_shot_seed));
    }
    let root = data_root(&cfg.data.manifest, root_override(cfg));
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let borrowed: Vec<(&str, &[_])> = splits.iter().map(|(n, r)| (*n, r.as_slice())).collect();
    let manifest = world.write_dataset(&root, &borrowed, zero_shot)?;
    if let Some(dir) = cfg.data.manifest.parent() {
        fs::create_dir_all(dir)?;
    }
    manifest.save(&cfg.data.manifest)?;
    for (name, recs) in &splits {
        println!("{name}: {} samples", recs.len());
    }
    println!("manifest written to {}", cfg.data.manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// data access

/// A manifest with the frozen encoders its header describes.
struct Data {
    manifest: DatasetManifest,
    header: ManifestHeader,
    root: PathBuf,
    vocab: ClassVocabulary,
    hub: EncoderHub<f32>,
    fingerprint: String,
}

impl Data {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let path = &cfg.data.manifest;
        let manifest =
            DatasetManifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let header = manifest.header.clone().context("the manifest has no header line")?;
        let spec = header.world.clone().context("the manifest header does not describe its encoders")?;
        let world = SyntheticWorld::new(spec)?;
        let vocab = ClassVocabulary::new(header.vocabulary.clone())?;
        ensure!(vocab == world.vocab, "manifest vocabulary differs from its encoder world");
        manifest.validate(&vocab)?;
        let hub = world.encoders::<f32>()?;
        let fingerprint = hub.fingerprint();
        let root = data_root(path, root_override(cfg));
        Ok(Self { manifest, header, root, vocab, hub, fingerprint })
    }

    fn vocabulary(&self, choice: VocabularyChoice) -> Result<ClassVocabulary> {
        let zs = || self.header.zero_shot.as_ref().context("the manifest has no zero-shot partition");
        Ok(match choice {
            VocabularyChoice::All => self.vocab.clone(),
            VocabularyChoice::Seen => ClassVocabulary::new(zs()?.seen.clone())?,
            VocabularyChoice::Unseen => ClassVocabulary::new(zs()?.unseen.clone())?,
        })
    }

    fn record(&self, id: &str) -> Result<&ManifestRecord> {
        self.manifest
            .records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| anyhow!("no sample {id:?} in the manifest"))
    }

    fn encode(&self, rec: &ManifestRecord) -> Result<EncodedSample<f32>> {
        let sample = DatasetManifest::load_sample::<f32>(rec, &self.root, &self.vocab)
            .with_context(|| format!("loading sample {}", rec.id))?;
        Ok(encode_sample(&self.hub, &sample)?)
    }

    /// Encodes the records of `split` whose classes all lie in `vocab` (and
    /// that have exactly `sources` classes, if given), re-indexed onto `vocab`.
    fn load_split(&self, split: &str, vocab: &ClassVocabulary, sources: Option<usize>) -> Result<Vec<EncodedSample<f32>>> {
        let records = self.manifest.split(split);
        ensure!(!records.is_empty(), "split {split:?} is empty or missing");
        let keep: Vec<&ManifestRecord> = records
            .iter()
            .copied()
            .filter(|r| sources.map_or(true, |k| r.classes.len() == k))
            .filter(|r| r.classes.iter().all(|c| vocab.index_of(c).is_some()))
            .collect();
        if keep.len() < records.len() {
            info!("split {split}: using {} of {} samples", keep.len(), records.len());
        }
        ensure!(!keep.is_empty(), "no sample of split {split:?} matches the vocabulary and source count");
        let subset: Vec<usize> = vocab.names().iter().map(|n| self.vocab.resolve(n)).collect::<Result<_, _>>()?;

        let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(keep.len());
        let chunk = keep.len().div_ceil(workers);
        let encoded: Vec<Result<Vec<EncodedSample<f32>>>> = thread::scope(|scope| {
            let handles: Vec<_> = keep
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(|| {
                        part.iter()
                            .map(|r| Ok(self.encode(r)?.restrict(&subset)?))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(keep.len());
        for part in encoded {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Frozen-encoder assertion, run at the end of every command.
    fn check_frozen(&self) -> Result<()> {
        ensure!(self.hub.fingerprint() == self.fingerprint, "frozen encoder weights changed during the run");
        Ok(())
    }

    fn model_from(&self, ckpt: &Checkpoint32) -> Result<TvslModel32> {
        ensure!(
            ckpt.encoder_fingerprint == self.fingerprint,
            "the checkpoint was trained with different encoders than this manifest describes"
        );
        let vocab = ClassVocabulary::new(ckpt.vocabulary.clone())?;
        Ok(TvslModel::new(ckpt.model.clone(), ckpt.params.clone(), &self.hub, vocab)?)
    }
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<(PathBuf, Checkpoint32)> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| latest_checkpoint(cfg));
    let ckpt = Checkpoint32::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((path, ckpt))
}

pub fn latest_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output.dir.join("checkpoint.json")
}

// ---------------------------------------------------------------------------
// train

struct EventLog(File);

impl EventLog {
    fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self(f))
    }

    fn write(&mut self, event: serde_json::Value) -> std::io::Result<()> {
        writeln!(self.0, "{event}")?;
        self.0.flush()
    }
}

pub fn train(cfg: &RunConfig, ov: &Overrides, resume: Option<&Path>) -> Result<()> {
    let data = Data::open(cfg)?;
    let vocab = data.vocabulary(cfg.data.vocabulary)?;
    let run_config = serde_json::to_value(cfg)?;
    let ckpt_dir = cfg.output.dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint32::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            ensure!(ckpt.model == cfg.model, "the checkpoint's model settings differ from the config");
            ensure!(ckpt.vocabulary == vocab.names(), "the checkpoint's vocabulary differs from the config");
            let model = data.model_from(&ckpt)?;
            info!("resuming from step {}", ckpt.step);
            Trainer::resume(model, &ckpt, cfg.train.clone())?
        }
        None => {
            let params = Parameters::identity_init(&cfg.model, &mut rng_for(cfg.seed, "init", 0));
            let model = TvslModel::new(cfg.model.clone(), params, &data.hub, vocab.clone())
                .context("building the model; model.dim must match the encoder dim of the dataset")?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    let samples = data.load_split(&cfg.data.train_split, &vocab, ov.sources)?;

    let mut log = EventLog::open(&cfg.output.dir.join("train_log.jsonl"))?;
    log.write(json!({
        "event": "start",
        "step": trainer.step,
        "steps": cfg.train.steps,
        "samples": samples.len(),
        "config_hash": tvsl_core::train::config_hash(&run_config),
    }))?;
    let latest = latest_checkpoint(cfg);
    let every = cfg.output.checkpoint_every;
    let fingerprint = data.fingerprint.clone();

    let result = trainer.run(&samples, |tr, entry| {
        let mut line = serde_json::to_value(entry)?;
        line["event"] = json!("step");
        log.write(line)?;
        if every > 0 && tr.step % every == 0 {
            let ckpt = tr.checkpoint(run_config.clone(), &fingerprint);
            ckpt.save(ckpt_dir.join(format!("step-{:07}.json", tr.step)))?;
            ckpt.save(&latest)?;
            log.write(json!({"event": "checkpoint", "step": tr.step}))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        // parameters are untouched by the failing step
        trainer.checkpoint(run_config.clone(), &fingerprint).save(&latest)?;
        log.write(json!({"event": "abort", "step": trainer.step, "error": e.to_string()}))?;
        return Err(e).with_context(|| {
            format!("training stopped at step {}; last good checkpoint kept at {}", trainer.step, latest.display())
        });
    }
    trainer.checkpoint(run_config, &fingerprint).save(&latest)?;
    log.write(json!({"event": "end", "step": trainer.step}))?;
    data.check_frozen()?;
    match trainer.history.last() {
        Some(h) => println!(
            "step {}: total {:.4} (av {:.4}, cls {:.4}, mcid {:.4})",
            h.step, h.total, h.av, h.cls, h.mcid
        ),
        None => println!("nothing to do at step {}", trainer.step),
    }
    println!("checkpoint written to {}", latest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval and zeroshot

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub split: Option<&'a str>,
    /// Zero-shot mode: swap in this vocabulary file, or the manifest's unseen classes.
    pub zero_shot: Option<Option<&'a Path>>,
}

pub fn eval(cfg: &RunConfig, ov: &Overrides, args: &EvalArgs) -> Result<()> {
    let data = Data::open(cfg)?;
    let (_, ckpt) = load_checkpoint(cfg, args.checkpoint)?;
    ov.check_against(&ckpt)?;
    let mut model = data.model_from(&ckpt)?;
    let (kind, default_split) = match args.zero_shot {
        None => ("eval", &cfg.data.eval_split),
        Some(_) => ("zeroshot", &cfg.data.zero_shot_split),
    };
    if let Some(file) = args.zero_shot {
        let vocab = match file {
            Some(f) => ClassVocabulary::load(f).with_context(|| format!("reading vocabulary {}", f.display()))?,
            None => data.vocabulary(VocabularyChoice::Unseen)?,
        };
        model = model.with_vocabulary(&data.hub, vocab).map_err(|e| match e {
            TvslError::PromptInZeroShot => anyhow!(
                "refusing zero-shot transfer: the checkpoint uses a learned prompt context of length {}; \
                 retrain with prompt_length = 0",
                ckpt.model.prompt_length
            ),
            e => e.into(),
        })?;
    }
    let split = args.split.unwrap_or(default_split);
    let samples = data.load_split(split, model.vocab(), ov.sources)?;
    let report = evaluate(&model, &samples, &cfg.eval)?;
    ensure!(model.params == ckpt.params, "evaluation changed the model parameters");
    data.check_frozen()?;

    let dir = cfg.output.dir.join("reports");
    fs::create_dir_all(&dir)?;
    let stem = match ov.sources {
        Some(k) => format!("{kind}-{split}-k{k}"),
        None => format!("{kind}-{split}"),
    };
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, report.to_json()?)?;
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;

    let (succ, prec) = if report.sources == 1 { ("IoU", "AP") } else { ("CIoU", "CAP") };
    print!(
        "{kind} on {split} ({} samples, {} classes): {succ}@{} {:.1}, AUC {:.1}, {prec} {:.1}",
        samples.len(),
        model.vocab().len(),
        report.threshold,
        report.success_rate,
        report.auc,
        report.precision
    );
    match &report.chance {
        Some(c) => println!(", chance {succ} {:.1}", c.success_rate),
        None => println!(),
    }
    println!("report written to {}", json_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// localize

pub struct LocalizeArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub sample: &'a str,
    pub classes: Option<Vec<String>>,
    pub vocabulary: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn localize(cfg: &RunConfig, ov: &Overrides, args: &LocalizeArgs) -> Result<()> {
    let data = Data::open(cfg)?;
    let (_, ckpt) = load_checkpoint(cfg, args.checkpoint)?;
    ov.check_against(&ckpt)?;
    let mut model = data.model_from(&ckpt)?;
    if let Some(f) = args.vocabulary {
        let vocab = ClassVocabulary::load(f).with_context(|| format!("reading vocabulary {}", f.display()))?;
        model = model.with_vocabulary(&data.hub, vocab)?;
    }
    let vocab = model.vocab().clone();
    let rec = data.record(args.sample)?;
    let encoded = data.encode(rec)?;
    let labels = vocab.names().iter().map(|n| rec.classes.contains(n)).collect();
    let sample = EncodedSample { labels, regions: BTreeMap::new(), ..encoded };

    let classes = args
        .classes
        .as_ref()
        .map(|names| names.iter().map(|n| vocab.resolve(n)).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    let inference = match model.infer(&sample, classes.as_deref()) {
        Err(TvslError::EmptySelection) => bail!("no class detected in {}; name classes with --classes", rec.id),
        r => r?,
    };
    let out = args.out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.join("heatmaps"));
    fs::create_dir_all(&out)?;
    let written = inference.heatmap.export(&out, &rec.id)?;
    data.check_frozen()?;

    for (k, &c) in inference.heatmap.class_indices.iter().enumerate() {
        let peak = inference.heatmap.map(k).fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        match &inference.detection {
            Some(d) => println!("{}: max confidence {:.4}, detection probability {:.4}", vocab.name(c), peak, d.probabilities[c]),
            None => println!("{}: max confidence {:.4}", vocab.name(c), peak),
        }
    }
    println!("{} files written to {}", written.len(), out.display());
    if ov.sources.is_some() {
        warn!("--sources has no effect on localize");
    }
    Ok(())
}
