use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use r23d::avatar::{dataset_generate, manifest_root, read_pcp, read_pnm, write_ppm, Split};
use r23d::netarch::{image_tensor, ModelParams};
use r23d::register::{
    avg_matches_csv, correspondence_rate, evaluate, explain, f1_csv, f1_per_class, identify, infer_correspondences,
    macro_f1, overlay, write_text, Decision, Probe, DEFAULT_THETA,
};
use r23d::trainloop::{train, Prototype, TrainingSet};

use crate::config::{check_thetas, RunConfig};
use crate::error::CliError;

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    cfg.write_resolved(out)?;
    let records = dataset_generate(&cfg.generate, out)?;
    log::info!("wrote {} samples", records.len());
    Ok(out.join("manifest.jsonl"))
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf, CliError> {
    if !data.is_file() {
        return Err(CliError::input(format!("{}: manifest not found", data.display())));
    }
    cfg.write_resolved(out)?;
    let summary = train(&cfg.model, &cfg.train, data, out)?;
    if summary.skipped > 0 {
        log::warn!("{} steps skipped for empty feature sides", summary.skipped);
    }
    Ok(summary.final_checkpoint)
}

fn load_checkpoint(path: &Path, cfg: Option<&RunConfig>) -> Result<ModelParams, CliError> {
    let params = ModelParams::load(path)?;
    if let Some(cfg) = cfg {
        if cfg.model != params.config {
            let expected = ModelParams::init(&cfg.model, 0)?;
            for (name, t) in &expected.params {
                match params.params.get(name) {
                    None => return Err(CliError::model(format!("tensor {name}: missing from {}", path.display()))),
                    Some(p) if p.shape() != t.shape() => {
                        return Err(CliError::model(format!(
                            "tensor {name}: checkpoint shape {:?}, config shape {:?}",
                            p.shape(),
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
            if let Some(name) = params.params.keys().find(|k| !expected.params.contains_key(*k)) {
                return Err(CliError::model(format!("tensor {name}: not in the configured model")));
            }
            if (cfg.model.height, cfg.model.width) != (params.config.height, params.config.width) {
                return Err(CliError::model(format!(
                    "input size: checkpoint {}x{}, config {}x{}",
                    params.config.height, params.config.width, cfg.model.height, cfg.model.width
                )));
            }
            log::warn!("model section differs from the checkpoint in non-shape settings; using the checkpoint");
        }
    }
    Ok(params)
}

fn identity_of(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn load_cloud(path: &Path, identity: u32, params: &ModelParams) -> Result<Prototype, CliError> {
    let cloud = read_pcp(path)?;
    if cloud.len() != params.config.vertices {
        return Err(CliError::model(format!(
            "{}: {} vertices, model expects {}",
            path.display(),
            cloud.len(),
            params.config.vertices
        )));
    }
    Ok(Prototype::new(identity, &cloud)?)
}

fn load_gallery(dir: &Path, params: &ModelParams) -> Result<Vec<Prototype>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pcp"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::input(format!("{}: no .pcp clouds", dir.display())));
    }
    let mut gallery = BTreeMap::new();
    for f in files {
        let id = identity_of(&f)
            .ok_or_else(|| CliError::input(format!("{}: no identity number in the file name", f.display())))?;
        if gallery.insert(id, load_cloud(&f, id, params)?).is_some() {
            return Err(CliError::input(format!("{}: identity {id} appears twice", dir.display())));
        }
    }
    Ok(gallery.into_values().collect())
}

pub struct EvalArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub gallery: Option<&'a Path>,
    pub thetas: Option<Vec<f32>>,
    pub out: &'a Path,
    pub config: Option<&'a RunConfig>,
}

pub struct EvalSummary {
    pub files: Vec<PathBuf>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

fn theta_tag(theta: f32) -> String {
    format!("{theta:.2}")
}

pub fn eval_cmd(a: EvalArgs<'_>) -> Result<EvalSummary, CliError> {
    let defaults = RunConfig::default();
    let cfg = a.config.unwrap_or(&defaults);
    let thetas = a.thetas.clone().unwrap_or_else(|| cfg.eval.thetas.clone());
    check_thetas(&thetas).map_err(CliError::input)?;
    let params = load_checkpoint(a.ckpt, a.config)?;
    if !a.data.is_file() {
        return Err(CliError::input(format!("{}: manifest not found", a.data.display())));
    }
    let gallery_dir = a
        .gallery
        .map(Path::to_path_buf)
        .or_else(|| cfg.eval.gallery.clone())
        .unwrap_or_else(|| manifest_root(a.data).join("clouds"));
    let gallery = load_gallery(&gallery_dir, &params)?;
    let test = TrainingSet::load_split(a.data, &params.config, Split::Test)?;
    let probes: Vec<Probe> = test
        .examples
        .iter()
        .map(|e| Probe {
            identity: e.identity,
            image: e.image.clone(),
        })
        .collect();

    let mut all = thetas.clone();
    all.push(DEFAULT_THETA);
    all.sort_by(f32::total_cmp);
    all.dedup();
    let ev = evaluate(&params, &probes, &gallery, &all)?;

    fs::create_dir_all(a.out).map_err(|e| CliError::input(format!("{}: {e}", a.out.display())))?;
    let mut files = Vec::new();
    let mut emit = |name: String, text: String| -> Result<(), CliError> {
        let p = a.out.join(name);
        write_text(&p, &text)?;
        files.push(p);
        Ok(())
    };
    let mut listed = thetas.clone();
    listed.sort_by(f32::total_cmp);
    listed.dedup();
    for &t in &listed {
        emit(format!("confusion_theta_{}.csv", theta_tag(t)), ev.confusion(t)?.to_csv())?;
    }
    let tag = theta_tag(DEFAULT_THETA);
    let f1 = f1_per_class(&ev.decisions(DEFAULT_THETA)?, &ev.gallery);
    emit(format!("f1_theta_{tag}.csv"), f1_csv(&f1))?;
    emit(format!("avg_matches_theta_{tag}.csv"), avg_matches_csv(&ev.avg_matches(DEFAULT_THETA)?))?;
    Ok(EvalSummary {
        files,
        accuracy: ev.rank1_accuracy(DEFAULT_THETA)?,
        macro_f1: macro_f1(&f1),
    })
}

pub struct ExplainArgs<'a> {
    pub ckpt: &'a Path,
    pub image: &'a Path,
    pub pcp: &'a Path,
    pub theta: f32,
    pub identity: Option<u32>,
    pub gallery: Option<&'a Path>,
}

pub struct ExplainOutputs {
    pub text: PathBuf,
    pub json: PathBuf,
    pub overlay: PathBuf,
    pub line: String,
}

fn beside(image: &Path, suffix: &str) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("probe");
    image.with_file_name(format!("{stem}.{suffix}"))
}

/// Explains one image against one cloud. With a gallery the decision is
/// whether the cloud ranks first; without one it is whether any part
/// supports the match.
pub fn explain_cmd(a: ExplainArgs<'_>) -> Result<ExplainOutputs, CliError> {
    check_thetas(&[a.theta]).map_err(CliError::input)?;
    let params = load_checkpoint(a.ckpt, None)?;
    let raster = read_pnm(a.image)?;
    if raster.channels != 3 {
        return Err(CliError::input(format!("{}: expected an RGB PPM", a.image.display())));
    }
    if (raster.height, raster.width) != (params.config.height, params.config.width) {
        return Err(CliError::model(format!(
            "{}: image is {}x{}, model expects {}x{}",
            a.image.display(),
            raster.height,
            raster.width,
            params.config.height,
            params.config.width
        )));
    }
    let identity = a.identity.or_else(|| identity_of(a.pcp)).unwrap_or(0);
    let cloud = load_cloud(a.pcp, identity, &params)?;
    let image = image_tensor(&raster.data, raster.height, raster.width)?;
    let corrs = infer_correspondences(&params, &image, &cloud, a.theta)?;
    let report = correspondence_rate(&corrs, &cloud);

    let accepted = match a.gallery {
        Some(dir) => {
            let mut gallery: Vec<Prototype> = load_gallery(dir, &params)?
                .into_iter()
                .filter(|g| g.identity != identity)
                .collect();
            gallery.push(cloud.clone());
            identify(&params, &image, &gallery, a.theta)?[0].identity == identity
        }
        None => report.fractions().iter().any(|&f| f >= r23d::register::SUPPORT_FRACTION),
    };
    let e = explain(
        &report,
        Decision {
            gallery_identity: identity,
            accepted,
        },
    );
    let text = beside(a.image, "explain.txt");
    let json = beside(a.image, "explain.json");
    let over = beside(a.image, "overlay.ppm");
    write_text(&text, &format!("{}\n", e.text))?;
    write_text(&json, &(serde_json::to_string_pretty(&e).expect("explanation serializes") + "\n"))?;
    write_ppm(&over, raster.width, raster.height, &overlay(&raster.data, raster.height, raster.width, &corrs))?;
    Ok(ExplainOutputs {
        text,
        json,
        overlay: over,
        line: e.text,
    })
}
