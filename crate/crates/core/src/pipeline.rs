//! End-to-end orchestration: synth -> disentangle -> train-sync -> train
//! -> sample -> evaluate, with on-disk artifacts, a run manifest, and
//! stage-level resumability.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diffusion::{self, SyncLossCfg, TrainItem};
use crate::denoiser::Denoiser;
use crate::disentangle::{build_partition, compute_delta_stats, Region};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::nn::Adam;
use crate::scalar::Scalar;
use crate::syncmodel::{self, SyncEncoders, SyncItem};
use crate::synthdata::{self, SynthCorpus};
use crate::types::{hex_string, ExpressionSequence, NormStats, SubspacePartition};

pub const STAGES: [&str; 6] = [
    "synth",
    "disentangle",
    "train-sync",
    "train",
    "sample",
    "evaluate",
];

/// Progress event emitted while a stage runs.
#[derive(Clone, Debug, Serialize)]
pub struct Progress {
    pub stage: &'static str,
    pub event: &'static str,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

pub type ProgressFn<'a> = dyn FnMut(&Progress) + 'a;

fn emit(log: &mut ProgressFn<'_>, stage: &'static str, event: &'static str, detail: serde_json::Value) {
    log(&Progress { stage, event, detail });
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config_hash: String,
    /// Stage name -> checksum over that stage's output files.
    stages: BTreeMap<String, String>,
}

fn manifest_path(out: &Path) -> PathBuf {
    out.join("manifest.json")
}

fn load_manifest(out: &Path) -> Manifest {
    crate::io::read_json(&manifest_path(out)).unwrap_or_default()
}

fn checksum_files(paths: &mut Vec<PathBuf>) -> Result<String> {
    paths.sort();
    let mut hasher = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(&*p).map_err(|e| Error::io(p.display().to_string(), e))?;
        hasher.update(p.file_name().expect("file path").to_string_lossy().as_bytes());
        hasher.update(bytes);
    }
    Ok(hex_string(&hasher.finalize()))
}

/// Final report written as `report.json`; the lip/smoothness/sync numbers
/// are parameter-level analogs of image-space metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PipelineReport<T: Scalar> {
    pub config_hash: String,
    pub parameter_level_analogs: bool,
    pub blink_rate: f64,
    pub blink_in_band: bool,
    pub sync_conf: f64,
    pub lip_l2: f64,
    pub mean_smoothness: f64,
    pub lip_pearson_r: f64,
    pub per_sequence: Vec<EvalReport<T>>,
}

// ---------------------------------------------------------------------
// stage: synth

pub fn stage_synth<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = cfg.synth_spec();
    let corpus: SynthCorpus<T> = synthdata::generate(&spec, cfg.n_sequences)?;
    let dir = out.join("synth");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut files = Vec::new();
    let truth_path = dir.join("truth.json");
    crate::io::write_json(&truth_path, &corpus.truth)?;
    files.push(truth_path);
    for (i, (a, e)) in corpus.items.iter().enumerate() {
        let ap = dir.join(format!("audio_{i:03}.pdt"));
        let ep = dir.join(format!("expr_{i:03}.pdt"));
        crate::io::write_matrix(&ap, a.values())?;
        crate::io::write_matrix(&ep, e.values())?;
        files.push(ap);
        files.push(ep);
    }
    Ok(files)
}

pub fn load_corpus<T: Scalar>(out: &Path) -> Result<SynthCorpus<T>> {
    let dir = out.join("synth");
    let truth: synthdata::GroundTruth = crate::io::read_json(&dir.join("truth.json"))?;
    let count = truth.blink_onsets.len();
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let a = crate::io::read_matrix::<T>(&dir.join(format!("audio_{i:03}.pdt")))?;
        let e = crate::io::read_matrix::<T>(&dir.join(format!("expr_{i:03}.pdt")))?;
        items.push((
            crate::types::AudioFeatureSequence::new(a)?,
            ExpressionSequence::new(e, truth.spec.fps)?,
        ));
    }
    Ok(SynthCorpus { items, truth })
}

// ---------------------------------------------------------------------
// stage: disentangle

pub fn stage_disentangle<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus::<T>(out)?;
    let pairs = synthdata::generate_edit_pairs(&corpus.truth.spec, &corpus);
    let originals: Vec<ExpressionSequence<T>> = pairs.iter().map(|(o, _, _)| o.clone()).collect();
    let lip_edits: Vec<ExpressionSequence<T>> = pairs.iter().map(|(_, l, _)| l.clone()).collect();
    let eye_edits: Vec<ExpressionSequence<T>> = pairs.into_iter().map(|(_, _, e)| e).collect();

    let lip_stats = compute_delta_stats(&originals, &lip_edits, Region::Lip)?;
    let eye_stats = compute_delta_stats(&originals, &eye_edits, Region::Eye)?;
    let partition = build_partition(&lip_stats, &eye_stats, cfg.k_lip, cfg.k_eye)?;

    let path = out.join("partition.json");
    crate::io::write_json(&path, &partition)?;
    Ok(vec![path])
}

pub fn load_partition(out: &Path) -> Result<SubspacePartition> {
    let p: SubspacePartition = crate::io::read_json(&out.join("partition.json"))?;
    p.validate()?;
    Ok(p)
}

// ---------------------------------------------------------------------
// stage: train-sync

fn sync_items<T: Scalar>(
    corpus: &SynthCorpus<T>,
    partition: &SubspacePartition,
) -> Vec<SyncItem<T>> {
    corpus
        .items
        .iter()
        .map(|(a, e)| {
            let mut lip = Array2::zeros((e.frames(), partition.lip.len()));
            for (c, &j) in partition.lip.iter().enumerate() {
                lip.column_mut(c).assign(&e.values().column(j));
            }
            SyncItem { lip, audio: a.values().clone() }
        })
        .collect()
}

pub fn stage_train_sync<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus::<T>(out)?;
    let partition = load_partition(out)?;
    let items = sync_items(&corpus, &partition);
    let (model, report) = syncmodel::train_sync(&items, cfg.sync_config(), &cfg.train_sync_opts())?;

    let dir = out.join("sync");
    model.save(&dir)?;
    let report_path = dir.join("report.json");
    crate::io::write_json(&report_path, &report)?;
    let mut files = vec![
        dir.join("sync.json"),
        report_path,
    ];
    collect_dir_files(&dir.join("tensors"), &mut files)?;
    Ok(files)
}

fn collect_dir_files(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        if entry.path().is_file() {
            files.push(entry.path());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// stage: train

pub fn stage_train<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    log: &mut ProgressFn<'_>,
) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus::<T>(out)?;
    let partition = load_partition(out)?;
    let sync = if cfg.lambda > 0.0 {
        Some(SyncEncoders::<T>::load(&out.join("sync"))?)
    } else {
        None
    };

    let originals: Vec<ExpressionSequence<T>> =
        corpus.items.iter().map(|(_, e)| e.clone()).collect();
    let stats = NormStats::from_sequences(&originals)?;
    let normalized: Vec<Array2<T>> = originals
        .iter()
        .map(|e| crate::types::normalize(e, &stats).map(|z| z.values))
        .collect::<Result<_>>()?;

    let mut model = Denoiser::new(cfg.denoiser_config(), partition, cfg.seed ^ 0x6d6f64)?;
    let sched = cfg.schedule::<T>()?;
    let guidance = cfg.guidance();
    let mut opt = Adam::new(model.store(), cfg.lr, Some(1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x747261696e);

    let dir = out.join("model");
    let window = cfg.train_window;
    for step in 0..cfg.train_steps {
        let batch: Vec<TrainItem<T>> = (0..cfg.batch)
            .map(|_| {
                let i = rng.gen_range(0..normalized.len());
                let frames = normalized[i].nrows();
                let start = rng.gen_range(0..=frames - window);
                TrainItem {
                    z0: normalized[i].slice(s![start..start + window, ..]).to_owned(),
                    audio: corpus.items[i]
                        .0
                        .values()
                        .slice(s![start..start + window, ..])
                        .to_owned(),
                }
            })
            .collect();
        let sync_cfg = sync.as_ref().map(|enc| SyncLossCfg {
            encoders: enc,
            lambda: cfg.lambda,
            stride: cfg.sync_loss_stride,
        });
        let loss = diffusion::training_step(
            &batch,
            &sched,
            &mut model,
            sync_cfg.as_ref(),
            &guidance,
            &mut opt,
            &mut rng,
        )?;
        if step % 50 == 0 || step + 1 == cfg.train_steps {
            emit(
                log,
                "train",
                "step",
                serde_json::json!({
                    "step": step,
                    "noise_loss": loss.noise.as_f64(),
                    "sync_loss": loss.sync.map(|v| v.as_f64()),
                    "total": loss.total.as_f64(),
                }),
            );
        }
        // periodic checkpoint so a later numeric failure still leaves the
        // last good weights on disk
        if (step + 1) % cfg.checkpoint_every == 0 {
            model.save(&dir)?;
        }
    }
    model.save(&dir)?;
    let stats_path = out.join("stats.json");
    crate::io::write_json(&stats_path, &stats)?;

    let mut files = vec![stats_path, dir.join("manifest.json")];
    collect_dir_files(&dir.join("tensors"), &mut files)?;
    Ok(files)
}

// ---------------------------------------------------------------------
// stage: sample

fn eval_spec(cfg: &RunConfig) -> synthdata::SynthSpec {
    let mut spec = cfg.synth_spec();
    spec.seq_len = cfg.eval_len;
    spec.seed = cfg.seed ^ 0x6576616c;
    spec
}

pub fn stage_sample<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let model = Denoiser::<T>::load(&out.join("model"))?;
    let stats: NormStats<T> = crate::io::read_json(&out.join("stats.json"))?;
    let sched = cfg.schedule::<T>()?;

    let spec = eval_spec(cfg);
    let eval_corpus: SynthCorpus<T> = synthdata::generate(&spec, cfg.n_eval_sequences)?;

    let dir = out.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let truth_path = dir.join("eval_truth.json");
    crate::io::write_json(&truth_path, &eval_corpus.truth)?;
    let mut files = vec![truth_path];

    for (i, (a, e_ref)) in eval_corpus.items.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x73616d70 ^ i as u64);
        let sampled = diffusion::sample(
            &model,
            a.values(),
            &sched,
            &stats,
            cfg.guidance_s,
            cfg.fps,
            &mut rng,
        )?;
        let sp = dir.join(format!("sample_{i:03}.pdt"));
        let ap = dir.join(format!("audio_{i:03}.pdt"));
        let rp = dir.join(format!("ref_{i:03}.pdt"));
        crate::io::write_matrix(&sp, sampled.values())?;
        crate::io::write_matrix(&ap, a.values())?;
        crate::io::write_matrix(&rp, e_ref.values())?;
        files.push(sp);
        files.push(ap);
        files.push(rp);
    }
    Ok(files)
}

// ---------------------------------------------------------------------
// stage: evaluate

pub fn stage_evaluate<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let partition = load_partition(out)?;
    let sync = SyncEncoders::<T>::load(&out.join("sync"))?;
    let dir = out.join("samples");

    let mut per_sequence = Vec::new();
    let mut pearsons = Vec::new();
    for i in 0..cfg.n_eval_sequences {
        let sampled = ExpressionSequence::new(
            crate::io::read_matrix::<T>(&dir.join(format!("sample_{i:03}.pdt")))?,
            cfg.fps,
        )?;
        let audio = crate::io::read_matrix::<T>(&dir.join(format!("audio_{i:03}.pdt")))?;
        let reference = ExpressionSequence::new(
            crate::io::read_matrix::<T>(&dir.join(format!("ref_{i:03}.pdt")))?,
            cfg.fps,
        )?;

        let mut lip = Array2::zeros((sampled.frames(), partition.lip.len()));
        for (c, &j) in partition.lip.iter().enumerate() {
            lip.column_mut(c).assign(&sampled.values().column(j));
        }
        let blink = metrics::blink_rate(&sampled, &partition)?;
        let report = EvalReport {
            blink_rate: blink,
            blink_in_band: metrics::blink_in_band(blink),
            sync_conf: sync.sync_confidence(&lip, &audio)?.as_f64(),
            lip_l2: metrics::lip_distance(&sampled, &reference, &partition)?,
            temporal_var: metrics::temporal_smoothness(&sampled)?,
        };
        per_sequence.push(report);

        let mut gen_flat = Vec::new();
        let mut ref_flat = Vec::new();
        for &j in &partition.lip {
            gen_flat.extend(sampled.values().column(j).iter().copied());
            ref_flat.extend(reference.values().column(j).iter().copied());
        }
        pearsons.push(metrics::pearson(&gen_flat, &ref_flat)?);
    }

    let n = per_sequence.len() as f64;
    let mean_blink = per_sequence.iter().map(|r| r.blink_rate).sum::<f64>() / n;
    let report = PipelineReport {
        config_hash: cfg.content_hash(),
        parameter_level_analogs: true,
        blink_rate: mean_blink,
        blink_in_band: metrics::blink_in_band(mean_blink),
        sync_conf: per_sequence.iter().map(|r| r.sync_conf).sum::<f64>() / n,
        lip_l2: per_sequence.iter().map(|r| r.lip_l2).sum::<f64>() / n,
        mean_smoothness: per_sequence.iter().map(|r| r.mean_smoothness()).sum::<f64>() / n,
        lip_pearson_r: pearsons.iter().sum::<f64>() / n,
        per_sequence,
    };
    let path = out.join("report.json");
    crate::io::write_json(&path, &report)?;
    Ok(vec![path])
}

pub fn load_report<T: Scalar>(out: &Path) -> Result<PipelineReport<T>> {
    crate::io::read_json(&out.join("report.json"))
}

// ---------------------------------------------------------------------
// orchestration

/// Run every stage in order, skipping stages already recorded in the
/// manifest for the same configuration. Returns the final report.
pub fn run_pipeline<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    log: &mut ProgressFn<'_>,
) -> Result<PipelineReport<T>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    cfg.to_path(&out.join("config.json"))?;

    let hash = cfg.content_hash();
    let mut manifest = load_manifest(out);
    if manifest.config_hash != hash {
        // different configuration: every stage is stale
        manifest = Manifest { config_hash: hash.clone(), stages: BTreeMap::new() };
    }

    for stage in STAGES {
        if manifest.stages.contains_key(stage) {
            emit(log, stage_name(stage), "skip", serde_json::Value::Null);
            continue;
        }
        emit(log, stage_name(stage), "start", serde_json::Value::Null);
        let mut files = match stage {
            "synth" => stage_synth::<T>(cfg, out)?,
            "disentangle" => stage_disentangle::<T>(cfg, out)?,
            "train-sync" => stage_train_sync::<T>(cfg, out)?,
            "train" => stage_train::<T>(cfg, out, log)?,
            "sample" => stage_sample::<T>(cfg, out)?,
            "evaluate" => stage_evaluate::<T>(cfg, out)?,
            _ => unreachable!(),
        };
        let checksum = checksum_files(&mut files)?;
        manifest.stages.insert(stage.to_string(), checksum);
        crate::io::write_json(&manifest_path(out), &manifest)?;
        emit(log, stage_name(stage), "done", serde_json::Value::Null);
    }
    load_report(out)
}

fn stage_name(stage: &str) -> &'static str {
    STAGES.iter().find(|s| **s == stage).expect("known stage")
}
