//! Subcommand bodies. Each takes a validated [`RunConfig`] and explicit paths.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use candle_core::DType;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mimicforge_core::evalharness::{emit_report, evaluate, load_scores, validate_manifest, ReportFormat};
use mimicforge_core::imgcore::{pad_to_square, read_png, resize_bilinear, resize_nearest, to_canonical, write_mask_png, write_png};
use mimicforge_core::masker::{grid_mask, segmentation_mask};
use mimicforge_core::matcher::match_images;
use mimicforge_core::sampler::{
    load_frames, load_mask, load_still, make_pseudo_pair, mix_sources, scan_dataset, select_pairs, FramePair, Origin,
    SegmentedStill,
};
use mimicforge_core::synthetic::{moving_shapes_video, segmented_still, VideoSpec};
use mimicforge_core::{seed, ImageBuf};
use mimicforge_diffcore::checkpoint::{self, model_from_checkpoint};
use mimicforge_diffcore::conditions::TrainingSample;
use mimicforge_diffcore::sample::{cfg_sample, restore_unmasked, EditRequest, SampleConfig};
use mimicforge_diffcore::schedule::NoiseSchedule;
use mimicforge_diffcore::train::Trainer;
use mimicforge_diffcore::unet::Model;
use mimicforge_diffcore::Error as DiffError;

use crate::config::{hex, RunConfig};
use crate::pipeline::{augment_pair, batch_indices, item_seed};
use crate::Invalid;

pub const MANIFEST: &str = "manifest.jsonl";

/// One line of the pair manifest; image paths are relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    #[serde(flatten)]
    pub origin: Origin,
    pub ssim_score: f64,
    pub source: String,
    pub reference: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// Grid sidecar for grid-masked pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PrepareSummary {
    pub video_pairs: usize,
    pub pseudo_pairs: usize,
}

struct Candidate {
    pair: FramePair,
    depth: Option<ImageBuf>,
}

fn canonical_mask(mask: &ImageBuf, side: usize) -> Result<ImageBuf> {
    let m = to_canonical(mask, side)?;
    Ok(m.map(|v| (v >= 0.5) as u8 as f32))
}

fn video_candidates(cfg: &RunConfig, root: &Path) -> Result<Vec<Candidate>> {
    let index = scan_dataset(root)?;
    let side = cfg.prepare.resolution;
    let per: Vec<Vec<Candidate>> = index
        .videos
        .par_iter()
        .map(|v| -> Result<Vec<Candidate>> {
            let frames: Vec<ImageBuf> = load_frames(v)?
                .iter()
                .map(|f| to_canonical(f, side))
                .collect::<Result<_, _>>()?;
            let s = seed::derive(cfg.seed, seed::tag(&format!("select/{}", v.id)));
            let pairs = select_pairs(&frames, &v.id, &cfg.selection, cfg.prepare.pairs_per_video, s)?;
            pairs
                .into_iter()
                .map(|pair| {
                    let Origin::Video { idx_a, .. } = pair.origin else {
                        unreachable!("select_pairs yields video pairs")
                    };
                    let depth = match &v.depth[idx_a] {
                        Some(p) => Some(to_canonical(&read_png(p)?.to_gray(), side)?),
                        None => None,
                    };
                    Ok(Candidate { pair, depth })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn still_candidates(cfg: &RunConfig, root: &Path) -> Result<Vec<Candidate>> {
    let index = scan_dataset(root)?;
    let side = cfg.prepare.resolution;
    let per: Vec<Vec<Candidate>> = index
        .stills
        .par_iter()
        .map(|entry| -> Result<Vec<Candidate>> {
            let raw = load_still(entry)?;
            let masks: Vec<ImageBuf> = raw
                .object_masks
                .iter()
                .map(|m| canonical_mask(m, side))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|m| m.count_positive() > 0)
                .collect();
            if masks.is_empty() {
                warn!("still {}: every object mask vanished at {side}px; skipped", entry.id);
                return Ok(Vec::new());
            }
            let still = SegmentedStill {
                id: raw.id,
                image: to_canonical(&raw.image, side)?,
                object_masks: masks,
            };
            let base = seed::derive(cfg.seed, seed::tag(&format!("pseudo/{}", entry.id)));
            (0..cfg.prepare.pairs_per_still)
                .map(|k| {
                    Ok(Candidate {
                        pair: make_pseudo_pair(&still, &cfg.augment, seed::derive(base, k as u64))?,
                        depth: None,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Builds the mixed pair manifest plus per-pair images, masks and sidecars.
pub fn prepare(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<PrepareSummary> {
    let index = scan_dataset(dataset)?;
    if index.is_empty() {
        return Err(Invalid(format!("dataset {} holds no videos or stills", dataset.display())).into());
    }
    info!("dataset: {} videos, {} stills", index.videos.len(), index.stills.len());
    let videos = video_candidates(cfg, dataset)?;
    let stills = still_candidates(cfg, dataset)?;
    info!("candidates: {} video pairs, {} pseudo pairs", videos.len(), stills.len());
    if videos.is_empty() && stills.is_empty() {
        return Err(Invalid("no pairs survive selection; widen the SSIM band or add data".into()).into());
    }
    let cap = match cfg.prepare.max_pairs {
        0 => usize::MAX,
        n => n,
    };
    let mixed: Vec<Candidate> = mix_sources(
        videos.into_iter(),
        stills.into_iter(),
        cfg.prepare.video_fraction,
        seed::derive(cfg.seed, seed::tag("mix")),
    )?
    .take(cap)
    .collect();

    let hash = cfg.hash();
    let pairs_dir = out.join("pairs");
    fs::create_dir_all(&pairs_dir).with_context(|| format!("creating {}", pairs_dir.display()))?;
    let entries: Vec<PairEntry> = mixed
        .par_iter()
        .enumerate()
        .map(|(i, c)| -> Result<PairEntry> {
            let id = format!("pair_{i:05}");
            let dir = pairs_dir.join(&id);
            fs::create_dir_all(&dir)?;
            let rel = |name: &str| format!("pairs/{id}/{name}");
            let s = seed::derive(cfg.seed, seed::tag(&format!("mask/{id}")));
            let (mask, sidecar) = match &c.pair.object_mask {
                Some(m) => (segmentation_mask(m, cfg.prepare.max_dilate, s)?, None),
                None => {
                    let matches = match_images(&c.pair.source, &c.pair.reference, &cfg.sift, cfg.prepare.ratio)?;
                    let (h, w) = (c.pair.source.height(), c.pair.source.width());
                    let g = grid_mask(h, w, &matches, &cfg.mask, s)?;
                    (g.rendered.clone(), Some(g.sidecar()))
                }
            };
            write_png(&c.pair.source, dir.join("source.png"))?;
            write_png(&c.pair.reference, dir.join("reference.png"))?;
            write_mask_png(&mask, dir.join("mask.png"))?;
            let depth = match &c.depth {
                Some(d) => {
                    write_png(d, dir.join("depth.png"))?;
                    Some(rel("depth.png"))
                }
                None => None,
            };
            let grid = match sidecar {
                Some(sc) => {
                    fs::write(dir.join("grid.json"), serde_json::to_string(&sc)?)?;
                    Some(rel("grid.json"))
                }
                None => None,
            };
            Ok(PairEntry {
                id: id.clone(),
                origin: c.pair.origin.clone(),
                ssim_score: c.pair.ssim_score,
                source: rel("source.png"),
                reference: rel("reference.png"),
                mask: rel("mask.png"),
                depth,
                grid,
                config_hash: hash.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut w = BufWriter::new(File::create(out.join(MANIFEST))?);
    for e in &entries {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    w.flush()?;
    let video_pairs = entries.iter().filter(|e| e.origin.is_video()).count();
    Ok(PrepareSummary {
        video_pairs,
        pseudo_pairs: entries.len() - video_pairs,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<PairEntry>> {
    let path = dir.join(MANIFEST);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: PairEntry = serde_json::from_str(&line)
            .map_err(|e| Invalid(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// A manifest pair loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub source: ImageBuf,
    pub reference: ImageBuf,
    pub mask: ImageBuf,
    pub depth: Option<ImageBuf>,
}

pub fn load_pairs(dir: &Path) -> Result<Vec<LoadedPair>> {
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Invalid(format!("{} lists no pairs", dir.join(MANIFEST).display())).into());
    }
    let pairs: Vec<LoadedPair> = entries
        .par_iter()
        .map(|e| -> Result<LoadedPair> {
            Ok(LoadedPair {
                source: read_png(dir.join(&e.source))?.to_rgb(),
                reference: read_png(dir.join(&e.reference))?.to_rgb(),
                mask: load_mask(dir.join(&e.mask))?,
                depth: e.depth.as_ref().map(|d| read_png(dir.join(d)).map(|i| i.to_gray())).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    let dims = (pairs[0].source.height(), pairs[0].source.width());
    for (e, p) in entries.iter().zip(&pairs) {
        let same = |img: &ImageBuf| (img.height(), img.width()) == dims;
        if !(same(&p.source) && same(&p.reference) && same(&p.mask) && p.depth.as_ref().is_none_or(same)) {
            return Err(Invalid(format!("pair {} does not match the {}x{} working size", e.id, dims.0, dims.1)).into());
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLine {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub last_loss: Option<f64>,
}

/// Default loss-log location next to the checkpoint.
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.jsonl");
    ckpt.with_file_name(name)
}

/// Runs `cfg.train.steps` optimizer steps, continuing from `resume` if given.
/// On a non-finite loss the last good state is written to `ckpt_out` before
/// the error is returned.
pub fn train(cfg: &RunConfig, pairs_dir: &Path, ckpt_out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let pairs = load_pairs(pairs_dir)?;
    let schedule = NoiseSchedule::linear(&cfg.schedule)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.config_hash != cfg.hash_bytes() {
                warn!("resuming from {} trained under config {}", p.display(), hex(&ck.config_hash));
            }
            Trainer::from_checkpoint(&ck, cfg.train, schedule, DType::F32)?
        }
        None => {
            let model = Model::new(cfg.model, DType::F32, seed::derive(cfg.seed, seed::tag("model")))?;
            Trainer::new(model, cfg.train, schedule)?
        }
    };
    let hash = cfg.hash_bytes();
    let log_path = loss_log_path(ckpt_out);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let first_step = trainer.step();
    let mut window = Vec::new();
    let mut last_loss = None;
    for local in 0..cfg.train.steps {
        let step = trainer.step();
        let idx = batch_indices(pairs.len(), cfg.train.batch, cfg.seed, step);
        let samples: Vec<TrainingSample> = idx
            .par_iter()
            .enumerate()
            .map(|(i, &k)| -> Result<TrainingSample> {
                let p = &pairs[k];
                let (source, reference) = augment_pair(&p.source, &p.reference, &cfg.augment, item_seed(cfg.seed, step, i))?;
                Ok(TrainingSample {
                    source,
                    mask: p.mask.clone(),
                    reference,
                    depth: p.depth.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let report = match trainer.train_step(&samples) {
            Ok(r) => r,
            Err(e @ DiffError::NonFiniteLoss { .. }) => {
                checkpoint::save(ckpt_out, &trainer.checkpoint(hash))?;
                log.flush()?;
                return Err(anyhow!(e).context(format!(
                    "training aborted; state after {} steps kept in {}",
                    trainer.step(),
                    ckpt_out.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        window.push(report.loss);
        last_loss = Some(report.loss);
        if (local + 1) % cfg.train.log_interval == 0 {
            let loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            writeln!(log, "{}", serde_json::to_string(&LossLine { step: trainer.step(), loss })?)?;
            info!("step {} loss {loss:.5}", trainer.step());
        }
    }
    log.flush()?;
    checkpoint::save(ckpt_out, &trainer.checkpoint(hash))?;
    Ok(TrainSummary {
        first_step,
        last_step: trainer.step(),
        last_loss,
    })
}

#[derive(Debug, Clone)]
pub struct EditPaths {
    pub checkpoint: PathBuf,
    pub source: PathBuf,
    pub mask: PathBuf,
    pub reference: PathBuf,
    pub depth: Option<PathBuf>,
    pub out: PathBuf,
}

/// Written next to the edited image as `<out>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub guidance_scale: f64,
    pub steps: usize,
    /// Config the checkpoint was trained under.
    pub config_hash: String,
    pub checkpoint_step: u64,
    pub resolution: usize,
    pub depth: bool,
}

pub fn run_record_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    out.with_file_name(name)
}

/// Pads to square, samples at the working resolution, then maps back so
/// every unmasked source pixel is returned untouched.
pub fn edit(cfg: &RunConfig, paths: &EditPaths, sample: &SampleConfig) -> Result<RunRecord> {
    let ck = checkpoint::load(&paths.checkpoint)?;
    let model = model_from_checkpoint(&ck, DType::F32)?;
    let schedule = NoiseSchedule::linear(&cfg.schedule)?;
    let side = cfg.prepare.resolution;

    let source = read_png(&paths.source)?.to_rgb();
    let mask = load_mask(&paths.mask)?;
    let reference = read_png(&paths.reference)?.to_rgb();
    let depth = paths.depth.as_ref().map(|p| read_png(p).map(|d| d.to_gray())).transpose()?;
    let (h, w) = (source.height(), source.width());
    ensure!(
        (mask.height(), mask.width()) == (h, w),
        Invalid(format!("mask is {}x{} but source is {h}x{w}", mask.height(), mask.width()))
    );
    if let Some(d) = &depth {
        ensure!(
            (d.height(), d.width()) == (h, w),
            Invalid(format!("depth is {}x{} but source is {h}x{w}", d.height(), d.width()))
        );
    }
    if mask.count_positive() == 0 {
        bail!(Invalid("mask selects no pixels; nothing to edit".into()));
    }

    let (sq_source, pad) = pad_to_square(&source, 0.0)?;
    let (sq_mask, _) = pad_to_square(&mask, 0.0)?;
    let req = EditRequest {
        source: resize_bilinear(&sq_source, side, side)?,
        mask: resize_nearest(&sq_mask, side, side)?,
        reference: to_canonical(&reference, side)?,
        depth: depth.as_ref().map(|d| to_canonical(d, side)).transpose()?,
    };
    ensure!(
        req.mask.count_positive() > 0,
        Invalid(format!("mask vanishes when resized to {side}x{side}"))
    );
    let out = cfg_sample(&model, &schedule, &req, sample)?;
    let back = resize_bilinear(&out.image, sq_source.height(), sq_source.width())?;
    let image = restore_unmasked(&pad.crop(&back)?, &source, &mask)?;
    write_png(&image, &paths.out)?;

    let record = RunRecord {
        seed: sample.seed,
        guidance_scale: sample.guidance_scale,
        steps: sample.steps,
        config_hash: hex(&ck.config_hash),
        checkpoint_step: ck.step,
        resolution: side,
        depth: depth.is_some(),
    };
    fs::write(run_record_path(&paths.out), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(record)
}

/// Writes `report.json` and `report.md` into `out_dir`.
pub fn eval(cfg: &RunConfig, manifest: &Path, outputs: &Path, scores: Option<&Path>, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let check = validate_manifest(manifest)?;
    if !check.issues.is_empty() {
        let lines: Vec<String> = check
            .issues
            .iter()
            .map(|i| format!("record {} ({}): {}", i.index, i.id, i.problems.join("; ")))
            .collect();
        return Err(Invalid(format!("manifest {} is invalid:\n{}", manifest.display(), lines.join("\n"))).into());
    }
    let table = scores.map(load_scores).transpose()?;
    let mut report = evaluate(&check.records, outputs, table.as_ref());
    report.config_hash = Some(cfg.hash());
    for s in &report.skipped {
        warn!("skipped {}: {}", s.id, s.reason);
    }
    fs::create_dir_all(out_dir)?;
    let json = out_dir.join("report.json");
    let md = out_dir.join("report.md");
    fs::write(&json, emit_report(&report, ReportFormat::Json)?)?;
    fs::write(&md, emit_report(&report, ReportFormat::Markdown)?)?;
    Ok((json, md))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub videos: usize,
    pub stills: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
}

/// Writes a procedural dataset in the layout `prepare` expects.
pub fn synth(spec: &SynthSpec, root: &Path) -> Result<()> {
    ensure!(spec.size >= 16, Invalid(format!("synthetic size {} below 16", spec.size)));
    ensure!(spec.frames >= 2, Invalid("synthetic videos need at least 2 frames".into()));
    let vspec = VideoSpec {
        size: spec.size,
        frames: spec.frames,
        ..VideoSpec::default()
    };
    (0..spec.videos).into_par_iter().try_for_each(|v| -> Result<()> {
        let clip = moving_shapes_video(&vspec, seed::derive(seed::derive(spec.seed, seed::tag("synth/video")), v as u64));
        let dir = root.join("videos").join(format!("clip{v:04}"));
        fs::create_dir_all(&dir)?;
        for (f, (frame, depth)) in clip.frames.iter().zip(&clip.depth).enumerate() {
            write_png(frame, dir.join(format!("{f:05}.png")))?;
            write_png(depth, dir.join(format!("{f:05}_depth.png")))?;
        }
        Ok(())
    })?;
    (0..spec.stills).into_par_iter().try_for_each(|s| -> Result<()> {
        let (image, masks) = segmented_still(spec.size, seed::derive(seed::derive(spec.seed, seed::tag("synth/still")), s as u64));
        if masks.is_empty() {
            return Ok(());
        }
        let dir = root.join("stills").join(format!("still{s:04}"));
        fs::create_dir_all(&dir)?;
        write_png(&image, dir.join("image.png"))?;
        for (k, m) in masks.iter().enumerate() {
            write_mask_png(m, dir.join(format!("mask_{k}.png")))?;
        }
        Ok(())
    })?;
    Ok(())
}
