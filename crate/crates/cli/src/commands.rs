use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use reroof::changepoint::{
    categorical_infer, feature_baseline_all, infer_all, trace_csv, write_predictions, CategoricalModel,
    FeatureKind, FeatureThresholds, TransitionPrediction,
};
use reroof::data::{
    generate_synthetic, load_dataset, load_flat_dataset, read_labels, read_splits, write_dataset, DatasetSplit,
    ReroofLabel, SplitName, LABELS_FILE, SPLITS_FILE,
};
use reroof::evalmetrics::{compare_methods, evaluate, EvalReport};
use reroof::impact::{compute_impact, ImpactResult};
use reroof::pairclf::{self, build_pairs, train_classifier, ClassifierParams};
use reroof::rng::{self, streams};
use reroof::vae::{self, train_vae_checkpointed, VaeParams};
use serde::Serialize;

use crate::config::RunConfig;

pub const VAE_CHECKPOINT: &str = "vae.ckpt";
pub const CLASSIFIER_CHECKPOINT: &str = "pairclf.ckpt";
pub const VAE_LOG: &str = "vae_log.csv";
pub const CLASSIFIER_LOG: &str = "pairclf_log.csv";
pub const PREDICTIONS: &str = "predictions.json";
pub const TRACE: &str = "trace.csv";
pub const REPORT: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Standard layout when `splits.json` is present, flat layout when
/// `labels.csv` is.
pub fn load_any_dataset(root: &Path) -> anyhow::Result<DatasetSplit> {
    let split = if root.join("labels.csv").is_file() && !root.join(SPLITS_FILE).is_file() {
        load_flat_dataset(root)
    } else {
        load_dataset(root)
    };
    split.with_context(|| format!("loading dataset {}", root.display()))
}

/// Labels of one split without decoding any image.
pub fn split_labels(root: &Path, split: SplitName) -> anyhow::Result<BTreeMap<String, ReroofLabel>> {
    let labels_path = root.join(LABELS_FILE);
    let splits_path = root.join(SPLITS_FILE);
    if labels_path.is_file() && splits_path.is_file() {
        let labels = read_labels(&labels_path)?;
        let splits = read_splits(&splits_path)?;
        let ids = splits.get(&split).cloned().unwrap_or_default();
        return ids
            .into_iter()
            .map(|id| {
                let l = *labels.get(&id).with_context(|| format!("building {id} has no label"))?;
                Ok((id, l))
            })
            .collect();
    }
    let data = load_any_dataset(root)?;
    Ok(data.get(split).iter().map(|s| (s.building_id.clone(), s.label)).collect())
}

pub fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<DatasetSplit> {
    let split = generate_synthetic(&cfg.synth, cfg.seed)?;
    write_dataset(&cfg.out, &split)?;
    cfg.write_resolved()?;
    let (tr, va, te) = split.counts();
    eprintln!("wrote {} buildings ({tr}/{va}/{te}) to {}", tr + va + te, cfg.out.display());
    Ok(split)
}

pub struct TrainOutput {
    pub vae: VaeParams,
    pub classifier: ClassifierParams,
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainOutput> {
    let data = load_any_dataset(cfg.data_root()?)?;
    cfg.write_resolved()?;
    let vae_path = cfg.out.join(VAE_CHECKPOINT);
    let trained = train_vae_checkpointed(&data, &cfg.vae, cfg.seed, Some(&vae_path))?;
    write(&cfg.out.join(VAE_LOG), vae::training_log_csv(&trained.log))?;
    trained.params.save(&vae_path)?;
    let best = trained.log[trained.best_epoch];
    eprintln!(
        "vae: best epoch {} of {}, validation loss {:.3}",
        trained.best_epoch,
        trained.log.len() - 1,
        best.val.loss()
    );

    let train_pairs = build_pairs(&data.train, &trained.params)?;
    let val_pairs = build_pairs(&data.validation, &trained.params)?;
    let clf = train_classifier(&train_pairs, &val_pairs, &cfg.classifier, cfg.seed)?;
    write(&cfg.out.join(CLASSIFIER_LOG), pairclf::training_log_csv(&clf.log))?;
    clf.params.save(&cfg.out.join(CLASSIFIER_CHECKPOINT))?;
    let best = clf.log[clf.best_epoch];
    eprintln!(
        "classifier: best epoch {} of {}, validation accuracy {:.3}",
        clf.best_epoch,
        clf.log.len() - 1,
        best.val_accuracy
    );
    Ok(TrainOutput {
        vae: trained.params,
        classifier: clf.params,
    })
}

fn write_predictions_and_trace(cfg: &RunConfig, preds: &[TransitionPrediction]) -> anyhow::Result<()> {
    write_predictions(&cfg.out.join(PREDICTIONS), preds)?;
    write(&cfg.out.join(TRACE), trace_csv(preds))
}

pub fn cmd_infer(cfg: &RunConfig, models: &Path) -> anyhow::Result<Vec<TransitionPrediction>> {
    let vae = VaeParams::load(&models.join(VAE_CHECKPOINT))?;
    let clf = ClassifierParams::load(&models.join(CLASSIFIER_CHECKPOINT))?;
    let data = load_any_dataset(cfg.data_root()?)?;
    cfg.write_resolved()?;
    let preds = infer_all(&vae, &clf, data.get(cfg.split))?;
    write_predictions_and_trace(cfg, &preds)?;
    eprintln!("{} predictions for the {} split", preds.len(), cfg.split);
    Ok(preds)
}

pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, truth: Option<&Path>) -> anyhow::Result<EvalReport> {
    let truths = match truth {
        Some(path) => read_labels(path)?,
        None => split_labels(cfg.data_root()?, cfg.split)?,
    };
    let preds = read_labels(predictions)?;
    let report = evaluate(&truths, &preds)?;
    cfg.write_resolved()?;
    report.save(&cfg.out.join(REPORT))?;
    let text = format!(
        "buildings: {}\ndetection accuracy: {:.4}\naverage error (years): {}\n",
        report.n_buildings,
        report.detection_accuracy,
        report.avg_error_years.map_or("null".to_string(), |e| format!("{e:.4}"))
    );
    write(&cfg.out.join(REPORT_TEXT), &text)?;
    print!("{text}");
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineKind {
    Categorical,
    Zncc,
    Intensity,
}

pub fn cmd_baseline(cfg: &RunConfig, kind: BaselineKind) -> anyhow::Result<Vec<TransitionPrediction>> {
    let data = load_any_dataset(cfg.data_root()?)?;
    cfg.write_resolved()?;
    let target = data.get(cfg.split);
    let preds = match kind {
        BaselineKind::Categorical => {
            let model = CategoricalModel::fit(data.train.iter().map(|s| &s.label))?;
            write_json(&cfg.out.join("categorical_model.json"), &model)?;
            categorical_infer(&model, target, &mut rng::stream(cfg.seed, streams::CATEGORICAL))
        }
        BaselineKind::Zncc | BaselineKind::Intensity => {
            let feature = if kind == BaselineKind::Zncc { FeatureKind::Zncc } else { FeatureKind::Intensity };
            let thresholds = FeatureThresholds::fit(feature, &data.train)?;
            write_json(&cfg.out.join("thresholds.json"), &thresholds)?;
            feature_baseline_all(target, &thresholds)?
        }
    };
    write_predictions_and_trace(cfg, &preds)?;
    eprintln!("{} {kind:?} predictions for the {} split", preds.len(), cfg.split);
    Ok(preds)
}

pub fn cmd_impact(cfg: &RunConfig) -> anyhow::Result<ImpactResult> {
    let result = compute_impact(&cfg.impact)?;
    cfg.write_resolved()?;
    write(&cfg.out.join("impact.json"), result.to_json())?;
    write(&cfg.out.join("impact.txt"), result.to_text())?;
    print!("{}", result.to_text());
    Ok(result)
}

/// `name=path` pairs of saved reports.
pub fn cmd_compare(cfg: &RunConfig, reports: &[(String, PathBuf)], published: bool) -> anyhow::Result<String> {
    if reports.is_empty() {
        bail!("compare needs at least one --report name=path");
    }
    let loaded = reports
        .iter()
        .map(|(name, path)| Ok((name.as_str(), EvalReport::load(path)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<(&str, &EvalReport)> = loaded.iter().map(|(n, r)| (*n, r)).collect();
    let table = compare_methods(&refs, published);
    cfg.write_resolved()?;
    write(&cfg.out.join("comparison.csv"), table.to_csv())?;
    let text = table.to_text();
    write(&cfg.out.join("comparison.txt"), &text)?;
    print!("{text}");
    Ok(text)
}
