use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use biovista_core::augment::{augment_image, augment_points};
use biovista_core::dataset::{build_dataset, write_geojson};
use biovista_core::embed::{average_instances, join_modalities, read_store, EmbeddingStore, Modality, JOINT_DIM};
use biovista_core::fusion::{
    ensemble_probs, macc_of, predict_fusion_batch, save_checkpoint, search_weights_grid, train_fusion, write_train_log,
    EnsembleWeights,
};
use biovista_core::las::{normalize_xyz, subsample, TileCache, TileIndex};
use biovista_core::metrics::{
    eval_records, grouped_metrics, load_predictions, mean_accuracy, patch_table, per_patch_table, read_regions, summary_table,
    write_predictions, EvalRecord, GroupKey, ModelResult, Prediction, ReportFormat,
};
use biovista_core::raster::{extract_sample_patch, Raster, RasterError};
use biovista_core::rng;
use biovista_core::synth::{write_dataset, SynthSpec};
use biovista_core::tiff::read_geotiff;
use biovista_core::types::{argmax_class, BioLabel, ClassProbs, Manifest, Sample, Split};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{existing, pick, PipelineConfig};
use crate::error::{CliError, IoContext, Result};

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).at(p)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).at(path)
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::load(path)?;
    m.validate()?;
    Ok(m)
}

pub fn synth(spec_path: Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match &spec_path {
        Some(p) if !p.exists() => return Err(CliError::MissingInput(p.clone())),
        Some(p) => {
            let text = fs::read_to_string(p).at(p)?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::mini(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    create_dir(out)?;

    let mut cfg = PipelineConfig::default();
    cfg.set_seed(spec.seed);
    cfg.dataset.years = spec.years.clone();
    // At 1e-6 the MLP barely moves on a set this small.
    cfg.train.lr = 1e-3;
    cfg.train.batch_size = 32;
    cfg.paths.hnv = Some("hnv.tif".into());
    cfg.paths.tiles = Some("tiles".into());
    cfg.paths.orthos = Some("orthos".into());
    cfg.paths.embeddings = Some("embeddings.bvem".into());
    cfg.paths.manifest = Some("manifest.csv".into());
    cfg.paths.out = Some("out".into());

    let written = write_dataset(&spec, &cfg.dataset, out)?;
    write_file(&out.join("pipeline.toml"), cfg.to_toml()?)?;
    let spec_text = toml::to_string_pretty(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join("synth.toml"), spec_text)?;
    info!("synthetic dataset: {} patches, {} samples in {}", written.patches, written.samples, out.display());
    Ok(())
}

pub fn build_dataset_cmd(cfg: &PipelineConfig, hnv: Option<PathBuf>, out: &Path) -> Result<()> {
    let hnv = existing(hnv, &cfg.paths.hnv, "HNV raster")?;
    let raster = read_geotiff(&hnv)?;
    let ds = build_dataset(&raster, &cfg.dataset)?;
    if ds.manifest.is_empty() {
        warn!("no samples could be placed");
    }
    create_dir(out)?;
    ds.manifest.save(&out.join("manifest.csv"))?;
    write_geojson(&ds.patches, &ds.manifest.crs_code, &out.join("patches.geojson"))?;
    for label in BioLabel::ALL {
        let n = ds.manifest.samples.iter().filter(|s| s.label == label).count();
        let p = ds.patches.iter().filter(|p| p.label == label).count();
        info!("{label}: {p} patches, {n} samples");
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct Failure {
    sample_id: String,
    modality: &'static str,
    error: &'static str,
    message: String,
}

/// Orthophotos keyed by year; file stems start with the year (`2021.tif`, `2021_east.tif`).
fn load_orthos(dir: &Path, years: &[i32]) -> Result<BTreeMap<i32, Vec<Raster>>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("tif") || x.eq_ignore_ascii_case("tiff")))
        .collect();
    files.sort();
    let mut out: BTreeMap<i32, Vec<Raster>> = BTreeMap::new();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some(year) = stem.split('_').next().and_then(|y| y.parse::<i32>().ok()) else {
            warn!("skipping {}: name does not start with a year", f.display());
            continue;
        };
        if years.contains(&year) {
            out.entry(year).or_default().push(read_geotiff(&f)?);
        }
    }
    Ok(out)
}

fn extract_image(
    orthos: &BTreeMap<i32, Vec<Raster>>,
    s: &Sample,
) -> std::result::Result<biovista_core::raster::ImagePatch, RasterError> {
    let mut last = RasterError::OutOfBounds(format!("no orthophoto for {} covers {:?}", s.year, s.center));
    for r in orthos.get(&s.year).into_iter().flatten() {
        match extract_sample_patch(r, s.center) {
            Ok(mut p) => {
                p.sample_id = s.id.clone();
                return Ok(p);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

pub struct ExtractArgs {
    pub manifest: Option<PathBuf>,
    pub orthos: Option<PathBuf>,
    pub tiles: Option<PathBuf>,
    pub subsample: Option<usize>,
    pub augment_previews: Option<usize>,
}

pub fn extract(cfg: &PipelineConfig, args: ExtractArgs, out: &Path) -> Result<()> {
    let manifest_path = existing(args.manifest, &cfg.paths.manifest, "manifest")?;
    let ortho_dir = existing(args.orthos, &cfg.paths.orthos, "orthophoto directory")?;
    let tile_dir = existing(args.tiles, &cfg.paths.tiles, "ALS tile directory")?;
    let n_points = args.subsample.unwrap_or(cfg.extract.subsample);
    let previews = args.augment_previews.unwrap_or(cfg.extract.augment_previews);
    if n_points == 0 {
        return Err(CliError::Config("subsample must be at least 1".into()));
    }
    let manifest = load_manifest(&manifest_path)?;
    let mut years: Vec<i32> = manifest.samples.iter().map(|s| s.year).collect();
    years.sort_unstable();
    years.dedup();
    let orthos = load_orthos(&ortho_dir, &years)?;
    let tiles = TileCache::new(TileIndex::scan(&tile_dir)?);
    let seed = cfg.seed.unwrap_or(cfg.augment_3d.seed);

    let patch_dir = out.join("patches");
    let cloud_dir = out.join("clouds");
    create_dir(&patch_dir)?;
    create_dir(&cloud_dir)?;
    let preview_dir = out.join("previews");
    if previews > 0 {
        create_dir(&preview_dir)?;
    }

    let results: Vec<Vec<Failure>> = manifest
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut failures = Vec::new();
            let mut fail =
                |modality, error, message: String| failures.push(Failure { sample_id: s.id.clone(), modality, error, message });

            match extract_image(&orthos, s) {
                Ok(p) => {
                    let png = patch_dir.join(format!("{}.png", s.id));
                    if let Err(e) = p.save_png_with_world_file(&png) {
                        fail("2d", e.name(), e.to_string());
                    } else if i < previews {
                        match augment_image(&p, &cfg.augment_2d) {
                            Ok(a) => {
                                if let Err(e) = a.save_png_with_world_file(&preview_dir.join(format!("{}_aug.png", s.id))) {
                                    fail("2d", e.name(), e.to_string());
                                }
                            }
                            Err(e) => fail("2d", "InvalidConfig", e.to_string()),
                        }
                    }
                }
                Err(e) => fail("2d", e.name(), e.to_string()),
            }

            let cloud = tiles
                .crop_circle(s.center, s.diameter / 2.0, s.year)
                .and_then(|c| subsample(&c, n_points, rng::fnv1a(format!("{seed}/{}", s.id).as_bytes())))
                .and_then(|c| normalize_xyz(&c, s.center));
            match cloud {
                Ok(mut c) => {
                    c.sample_id = s.id.clone();
                    let path = cloud_dir.join(format!("{}.xyz", s.id));
                    if let Err(e) = File::create(&path).and_then(|f| c.write_xyz(BufWriter::new(f))) {
                        fail("3d", "IoError", format!("{}: {e}", path.display()));
                    } else if i < previews {
                        match augment_points(&c, &cfg.augment_3d) {
                            Ok(a) => {
                                let path = preview_dir.join(format!("{}_aug.xyz", s.id));
                                if let Err(e) = File::create(&path).and_then(|f| a.write_xyz(BufWriter::new(f))) {
                                    fail("3d", "IoError", format!("{}: {e}", path.display()));
                                }
                            }
                            Err(e) => fail("3d", "InvalidConfig", e.to_string()),
                        }
                    }
                }
                Err(e) => fail("3d", e.name(), e.to_string()),
            }
            failures
        })
        .collect();

    let failures: Vec<Failure> = results.into_iter().flatten().collect();
    let failures_path = out.join("extract_failures.csv");
    let mut w = csv_writer(&failures_path)?;
    w.write_record(["sample_id", "modality", "error", "message"]).map_err(csv_err(&failures_path))?;
    for f in &failures {
        w.serialize(f).map_err(csv_err(&failures_path))?;
    }
    w.flush().at(&failures_path)?;

    let failed_samples = {
        let mut ids: Vec<&str> = failures.iter().map(|f| f.sample_id.as_str()).collect();
        ids.dedup();
        ids.len()
    };
    let total = manifest.len();
    info!(
        "extracted {}/{} samples, {} failures listed in {}",
        total - failed_samples,
        total,
        failures.len(),
        failures_path.display()
    );
    if total > 0 && failed_samples == total {
        return Err(CliError::Data(format!("every sample failed; see {}", failures_path.display())));
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).at(path)?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn save_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let f = File::create(path).at(path)?;
    write_predictions(preds, BufWriter::new(f))?;
    Ok(())
}

fn prediction(model: &str, id: &str, p: ClassProbs) -> Prediction {
    Prediction { model: model.to_string(), sample_id: id.to_string(), predicted: argmax_class(p), confidence: p.confidence() }
}

fn load_store(cfg: &PipelineConfig, flag: Option<PathBuf>) -> Result<EmbeddingStore> {
    let path = existing(flag, &cfg.paths.embeddings, "embedding store")?;
    Ok(read_store(&path)?)
}

pub fn train_fusion_cmd(cfg: &PipelineConfig, embeddings: Option<PathBuf>, manifest: Option<PathBuf>, out: &Path) -> Result<()> {
    let manifest = load_manifest(&existing(manifest, &cfg.paths.manifest, "manifest")?)?;
    let store = load_store(cfg, embeddings)?;
    let outcome = train_fusion(&store, &manifest, &cfg.train)?;
    create_dir(out)?;
    save_checkpoint(&outcome.params, &out.join("fusion.bvml"))?;
    let log_path = out.join("train_log.csv");
    write_train_log(&outcome.log, BufWriter::new(File::create(&log_path).at(&log_path)?)).at(&log_path)?;
    info!("initial loss {:.5}, best epoch {:?}", outcome.initial_loss, outcome.best_epoch);

    let test = Manifest { samples: manifest.in_split(Split::Test).cloned().collect(), ..manifest.clone() };
    let joined = join_modalities(&store, &test, cfg.train.instance)?;
    let x: Vec<f64> = joined.iter().flat_map(|s| s.features.iter().map(|&v| f64::from(v))).collect();
    debug_assert_eq!(x.len(), joined.len() * JOINT_DIM);
    let probs = if joined.is_empty() { Vec::new() } else { predict_fusion_batch(&outcome.params, &x, joined.len())? };
    let preds: Vec<Prediction> = joined.iter().zip(probs).map(|(s, p)| prediction("fusion", &s.sample_id, p)).collect();
    save_predictions(&preds, &out.join("predictions_fusion.csv"))
}

#[derive(Serialize)]
struct WeightsReport {
    w_2d: f64,
    w_3d: f64,
    grid_steps: usize,
    val_macc: f64,
    val_samples: usize,
}

fn split_probs(store: &EmbeddingStore, samples: &[&Sample]) -> Result<(Vec<ClassProbs>, Vec<ClassProbs>)> {
    let mut a = Vec::with_capacity(samples.len());
    let mut b = Vec::with_capacity(samples.len());
    for s in samples {
        a.push(average_instances(store, &s.id, Modality::Ortho2D)?);
        b.push(average_instances(store, &s.id, Modality::Als3D)?);
    }
    Ok((a, b))
}

pub fn ensemble_cmd(cfg: &PipelineConfig, embeddings: Option<PathBuf>, manifest: Option<PathBuf>, out: &Path) -> Result<()> {
    let manifest = load_manifest(&existing(manifest, &cfg.paths.manifest, "manifest")?)?;
    let store = load_store(cfg, embeddings)?;
    let val: Vec<&Sample> = manifest.in_split(Split::Val).collect();
    let test: Vec<&Sample> = manifest.in_split(Split::Test).collect();
    let (v2, v3) = split_probs(&store, &val)?;
    let labels: Vec<BioLabel> = val.iter().map(|s| s.label).collect();
    let w: EnsembleWeights = search_weights_grid(&v2, &v3, &labels, cfg.ensemble.grid_steps)?;
    let val_macc = macc_of(&labels, v2.iter().zip(&v3).map(|(&a, &b)| argmax_class(ensemble_probs(a, b, w))));
    info!("ensemble weights 2D {:.2} / 3D {:.2}, val MAcc {:.4}", w.w_2d(), w.w_3d(), val_macc);

    create_dir(out)?;
    let report =
        WeightsReport { w_2d: w.w_2d(), w_3d: w.w_3d(), grid_steps: cfg.ensemble.grid_steps, val_macc, val_samples: val.len() };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&out.join("ensemble_weights.json"), json + "\n")?;

    let (t2, t3) = split_probs(&store, &test)?;
    let mut preds = Vec::with_capacity(3 * test.len());
    for (model, pick_probs) in [("2d", 0), ("3d", 1), ("ensemble", 2)] {
        for ((s, &a), &b) in test.iter().zip(&t2).zip(&t3) {
            let p = match pick_probs {
                0 => a,
                1 => b,
                _ => ensemble_probs(a, b, w),
            };
            preds.push(prediction(model, &s.id, p));
        }
    }
    save_predictions(&preds, &out.join("predictions_ensemble.csv"))
}

pub struct EvaluateArgs {
    pub predictions: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub format: ReportFormat,
    pub group_by: Vec<GroupKey>,
}

fn group_name(k: GroupKey) -> &'static str {
    match k {
        GroupKey::Year => "year",
        GroupKey::Region => "region",
        GroupKey::Patch => "patch",
    }
}

pub fn evaluate(cfg: &PipelineConfig, args: EvaluateArgs, out: &Path) -> Result<()> {
    if args.predictions.is_empty() {
        return Err(CliError::Config("no prediction files given".into()));
    }
    let manifest = load_manifest(&existing(args.manifest, &cfg.paths.manifest, "manifest")?)?;
    let regions = match args.regions.or_else(|| cfg.paths.regions.clone()) {
        Some(p) if !p.exists() => return Err(CliError::MissingInput(p)),
        Some(p) => Some(read_regions(File::open(&p).at(&p)?)?),
        None => None,
    };
    let mut preds = Vec::new();
    for p in &args.predictions {
        if !p.exists() {
            return Err(CliError::MissingInput(p.clone()));
        }
        preds.extend(load_predictions(p)?);
    }
    if preds.is_empty() {
        return Err(biovista_core::metrics::MetricsError::EmptyEval.into());
    }
    let records = eval_records(&preds, &manifest, regions.as_ref())?;

    let mut order: Vec<String> = Vec::new();
    let mut by_model: HashMap<String, Vec<EvalRecord>> = HashMap::new();
    for (p, r) in preds.iter().zip(records) {
        if !by_model.contains_key(&p.model) {
            order.push(p.model.clone());
        }
        by_model.entry(p.model.clone()).or_default().push(r);
    }
    let models: Vec<(String, Vec<EvalRecord>)> =
        order.iter().map(|m| (m.clone(), by_model.remove(m).unwrap_or_default())).collect();

    let mut summary_rows = Vec::new();
    for (m, recs) in &models {
        summary_rows.push((m.clone(), ModelResult::Single(mean_accuracy(recs)?)));
    }
    let summary = summary_table(&summary_rows, args.format);
    let patches = patch_table(&order, &per_patch_table(&models), args.format);
    let mut groups = Vec::new();
    for &k in &args.group_by {
        for (m, recs) in &models {
            groups.push((k, m.clone(), grouped_metrics(recs, k)?));
        }
    }

    create_dir(out)?;
    match args.format {
        ReportFormat::Markdown => {
            let mut md = String::from("## Summary\n\n");
            md += &summary;
            md += "\n## Per-patch accuracy\n\n";
            md += &patches;
            for (k, m, g) in &groups {
                md += &format!("## {m} by {}\n\n", group_name(*k));
                md += &biovista_core::metrics::group_table(g, group_name(*k), args.format);
                md.push('\n');
            }
            write_file(&out.join("report.md"), md)?;
        }
        ReportFormat::Csv => {
            write_file(&out.join("summary.csv"), &summary)?;
            write_file(&out.join("patches.csv"), patches)?;
            for (k, m, g) in &groups {
                let name = format!("{m}_by_{}.csv", group_name(*k));
                write_file(&out.join(name), biovista_core::metrics::group_table(g, group_name(*k), args.format))?;
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(summary.as_bytes());
    Ok(())
}

/// `--out` flag, else `[paths] out`, else the current directory.
pub fn out_dir(flag: Option<PathBuf>, cfg: &PipelineConfig) -> PathBuf {
    pick(flag, &cfg.paths.out, "output").unwrap_or_else(|_| PathBuf::from("."))
}
