//! From a building's image sequence to a reroof prediction: the learned
//! pipeline and the categorical, ZNCC and intensity baselines all feed the
//! same decision rule over adjacent-pair probabilities.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Image, ImageSequence, ReroofLabel};
use crate::error::{Error, Result};
use crate::exec;
use crate::pairclf::{pair_label, ClassifierParams};
use crate::rng::Rng;
use crate::vae::VaeParams;

/// Decision and the adjacent-pair trace it was made from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionPrediction {
    pub building_id: String,
    pub predicted: ReroofLabel,
    /// `(t, p_t)` for each adjacent pair `(t − 1, t)`; `t` is the later year.
    pub trace: Vec<(i32, f32)>,
}

/// No reroof when every `p_t < 0.5`; otherwise the year of the largest
/// `p_t`, the earliest one on ties. NaN entries never win.
pub fn decide_transition(trace: &[(i32, f32)]) -> ReroofLabel {
    let mut best: Option<(i32, f32)> = None;
    for &(year, p) in trace {
        if best.is_none_or(|(_, q)| p > q) {
            best = Some((year, p));
        }
    }
    match best {
        Some((year, p)) if p >= 0.5 => ReroofLabel::ReroofYear(year),
        _ => ReroofLabel::NoReroof,
    }
}

fn prediction(seq: &ImageSequence, probs: Vec<f32>) -> TransitionPrediction {
    let trace: Vec<(i32, f32)> = seq.years[1..].iter().copied().zip(probs).collect();
    TransitionPrediction {
        building_id: seq.building_id.clone(),
        predicted: decide_transition(&trace),
        trace,
    }
}

fn require_pairs(seq: &ImageSequence) -> Result<()> {
    if seq.len() < 2 {
        return Err(Error::Precondition(format!(
            "building {} has {} image(s); at least 2 are needed",
            seq.building_id,
            seq.len()
        )));
    }
    Ok(())
}

/// Encodes every image to its latent mean and classifies each adjacent pair.
pub fn infer_transition(vae: &VaeParams, clf: &ClassifierParams, seq: &ImageSequence) -> Result<TransitionPrediction> {
    require_pairs(seq)?;
    let codes = vae.encode_tensor(&Image::batch(&seq.images.iter().collect::<Vec<_>>())?)?;
    let pairs: Vec<(&[f32], &[f32])> = codes.windows(2).map(|w| (&w[0].mu[..], &w[1].mu[..])).collect();
    Ok(prediction(seq, clf.classify_batch(&pairs)?))
}

/// [`infer_transition`] for every sequence, in input order.
pub fn infer_all(vae: &VaeParams, clf: &ClassifierParams, seqs: &[ImageSequence]) -> Result<Vec<TransitionPrediction>> {
    exec::try_map(seqs, |s| infer_transition(vae, clf, s))
}

/// Distribution of labels over the training buildings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalModel {
    /// `NoReroof` first, then years ascending; probabilities sum to 1.
    pub outcomes: Vec<(ReroofLabel, f64)>,
}

impl CategoricalModel {
    pub fn fit<'a>(labels: impl IntoIterator<Item = &'a ReroofLabel>) -> Result<Self> {
        let mut counts: BTreeMap<Option<i32>, usize> = BTreeMap::new();
        let mut n = 0usize;
        for l in labels {
            *counts.entry(l.year()).or_default() += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Precondition("categorical baseline needs at least one training label".into()));
        }
        let outcomes = counts
            .into_iter()
            .map(|(y, c)| (y.map_or(ReroofLabel::NoReroof, ReroofLabel::ReroofYear), c as f64 / n as f64))
            .collect();
        Ok(CategoricalModel { outcomes })
    }

    pub fn probability(&self, label: ReroofLabel) -> f64 {
        self.outcomes.iter().find(|(l, _)| *l == label).map_or(0.0, |(_, p)| *p)
    }

    /// One draw by inverse CDF from a single uniform.
    pub fn predict(&self, rng: &mut Rng) -> ReroofLabel {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (label, p) in &self.outcomes {
            acc += p;
            if u < acc {
                return *label;
            }
        }
        self.outcomes.last().expect("fitted model is non-empty").0
    }
}

/// Categorical guesses for every sequence, drawn in input order.
pub fn categorical_infer(model: &CategoricalModel, seqs: &[ImageSequence], rng: &mut Rng) -> Vec<TransitionPrediction> {
    seqs.iter()
        .map(|s| TransitionPrediction {
            building_id: s.building_id.clone(),
            predicted: model.predict(rng),
            trace: Vec::new(),
        })
        .collect()
}

/// Zero-normalized cross-correlation over all pixels and channels, in
/// `[−1, 1]`. Defined as 0 when either image has zero variance.
pub fn zncc(a: &Image, b: &Image) -> Result<f32> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "zncc",
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    let n = a.data().len() as f64;
    let mean = |d: &[f32]| d.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (ma, mb) = (mean(a.data()), mean(b.data()));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Relative cutoff: a constant image still shows rounding-level spread.
    let floor = 1e-12 * n;
    if saa <= floor || sbb <= floor {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0) as f32)
}

/// Mean over pixels and channels of an image in `[0, 1]`.
pub fn intensity_feature(image: &Image) -> f32 {
    (image.data().iter().map(|&v| v as f64).sum::<f64>() / image.data().len().max(1) as f64) as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Dissimilarity `1 − zncc`.
    Zncc,
    /// Dissimilarity `|Δ mean intensity|`.
    Intensity,
}

impl FeatureKind {
    pub fn dissimilarity(self, a: &Image, b: &Image) -> Result<f64> {
        Ok(match self {
            FeatureKind::Zncc => 1.0 - zncc(a, b)? as f64,
            FeatureKind::Intensity => (intensity_feature(a) as f64 - intensity_feature(b) as f64).abs(),
        })
    }
}

/// Maps a dissimilarity `s` to `σ((s − threshold) / scale)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureThresholds {
    pub kind: FeatureKind,
    pub threshold: f64,
    pub scale: f64,
}

impl FeatureThresholds {
    pub fn probability(&self, score: f64) -> f32 {
        if self.threshold == f64::INFINITY {
            return 0.0;
        }
        (1.0 / (1.0 + (-(score - self.threshold) / self.scale).exp())) as f32
    }

    /// Fits a class-balanced, lightly ridge-regularized 1-D logistic model on
    /// the adjacent pairs of `train` by Newton's method. A non-positive slope
    /// (more dissimilar pairs are not more likely to differ) yields an
    /// infinite threshold, i.e. "never a reroof".
    pub fn fit(kind: FeatureKind, train: &[ImageSequence]) -> Result<Self> {
        let per_seq = exec::try_map(train, |s| {
            (1..s.len())
                .map(|i| {
                    let score = kind.dissimilarity(&s.images[i - 1], &s.images[i])?;
                    Ok((score, pair_label(s.years[i - 1], s.years[i], s.label)))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let samples: Vec<(f64, bool)> = per_seq.into_iter().flatten().collect();
        let pos = samples.iter().filter(|s| s.1).count();
        let neg = samples.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Precondition(format!(
                "feature threshold fit needs both classes among adjacent pairs; got {pos} changes out of {}",
                samples.len()
            )));
        }
        let (w_pos, w_neg) = (0.5 / pos as f64, 0.5 / neg as f64);
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
        let sd = (samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd == 0.0 {
            return Ok(FeatureThresholds {
                kind,
                threshold: f64::INFINITY,
                scale: 1.0,
            });
        }
        const RIDGE: f64 = 1e-3;
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (RIDGE * a, RIDGE * b, RIDGE, 0.0, RIDGE);
            for &(s, y) in &samples {
                let x = (s - mean) / sd;
                let p = 1.0 / (1.0 + (-(a * x + b)).exp());
                let w = if y { w_pos } else { w_neg };
                let r = w * (p - y as u8 as f64);
                let c = w * p * (1.0 - p);
                ga += r * x;
                gb += r;
                haa += c * x * x;
                hab += c * x;
                hbb += c;
            }
            let det = haa * hbb - hab * hab;
            let da = (hbb * ga - hab * gb) / det;
            let db = (haa * gb - hab * ga) / det;
            a -= da;
            b -= db;
            if da.abs().max(db.abs()) < 1e-10 {
                break;
            }
        }
        if !(a > 0.0) || !a.is_finite() || !b.is_finite() {
            return Ok(FeatureThresholds {
                kind,
                threshold: f64::INFINITY,
                scale: 1.0,
            });
        }
        // a·(s − mean)/sd + b = (s − threshold)/scale
        let scale = sd / a;
        Ok(FeatureThresholds {
            kind,
            threshold: mean - b * scale,
            scale,
        })
    }
}

/// Scores adjacent pairs with the fitted feature and applies the same
/// decision rule as the learned pipeline.
pub fn feature_baseline_infer(seq: &ImageSequence, thresholds: &FeatureThresholds) -> Result<TransitionPrediction> {
    require_pairs(seq)?;
    let probs = (1..seq.len())
        .map(|i| {
            let s = thresholds.kind.dissimilarity(&seq.images[i - 1], &seq.images[i])?;
            Ok(thresholds.probability(s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(prediction(seq, probs))
}

pub fn feature_baseline_all(seqs: &[ImageSequence], thresholds: &FeatureThresholds) -> Result<Vec<TransitionPrediction>> {
    exec::try_map(seqs, |s| feature_baseline_infer(s, thresholds))
}

/// `building_id,year,p_t` rows for every trace entry.
pub fn trace_csv(preds: &[TransitionPrediction]) -> String {
    let mut out = String::from("building_id,year,p_t\n");
    for p in preds {
        for (year, prob) in &p.trace {
            out.push_str(&format!("{},{},{}\n", p.building_id, year, prob));
        }
    }
    out
}

/// `building_id → year | null`.
pub fn predictions_map(preds: &[TransitionPrediction]) -> BTreeMap<String, ReroofLabel> {
    preds.iter().map(|p| (p.building_id.clone(), p.predicted)).collect()
}

pub fn write_predictions(path: &Path, preds: &[TransitionPrediction]) -> Result<()> {
    crate::data::write_labels(path, &predictions_map(preds))
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, ReroofLabel>> {
    crate::data::read_labels(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn trace(ps: &[f32]) -> Vec<(i32, f32)> {
        (2013..).zip(ps.iter().copied()).collect()
    }

    #[test]
    fn argmax_rule_examples() {
        assert_eq!(
            decide_transition(&trace(&[0.1, 0.2, 0.6, 0.9, 0.3, 0.2])),
            ReroofLabel::ReroofYear(2016)
        );
        assert_eq!(decide_transition(&trace(&[0.49; 6])), ReroofLabel::NoReroof);
        assert_eq!(
            decide_transition(&trace(&[0.7, 0.7, 0.1, 0.1, 0.1, 0.1])),
            ReroofLabel::ReroofYear(2013)
        );
        assert_eq!(decide_transition(&trace(&[0.5])), ReroofLabel::ReroofYear(2013));
        assert_eq!(decide_transition(&[]), ReroofLabel::NoReroof);
    }

    fn sequence(images: Vec<Image>) -> ImageSequence {
        let years = (2012..2012 + images.len() as i32).collect();
        ImageSequence::new("b".into(), years, images, ReroofLabel::NoReroof).unwrap()
    }

    #[test]
    fn single_image_sequence_is_rejected() {
        let t = FeatureThresholds {
            kind: FeatureKind::Intensity,
            threshold: 0.1,
            scale: 0.01,
        };
        assert!(feature_baseline_infer(&sequence(vec![Image::filled(4, 4, [0.5; 3])]), &t).is_err());
    }

    #[test]
    fn categorical_all_no_reroof_always_predicts_no_reroof() {
        let labels = vec![ReroofLabel::NoReroof; 5];
        let m = CategoricalModel::fit(&labels).unwrap();
        let mut r = rng::seeded(0);
        assert!((0..1000).all(|_| m.predict(&mut r) == ReroofLabel::NoReroof));
    }

    #[test]
    fn categorical_probabilities_sum_to_one() {
        let labels = [
            ReroofLabel::NoReroof,
            ReroofLabel::ReroofYear(2015),
            ReroofLabel::ReroofYear(2015),
            ReroofLabel::ReroofYear(2016),
        ];
        let m = CategoricalModel::fit(&labels).unwrap();
        assert_eq!(m.outcomes.iter().map(|o| o.1).sum::<f64>(), 1.0);
        assert_eq!(m.probability(ReroofLabel::ReroofYear(2015)), 0.5);
        assert_eq!(m.probability(ReroofLabel::ReroofYear(2014)), 0.0);
        assert!(CategoricalModel::fit(&[]).is_err());
    }

    fn noisy(seed: u64) -> Image {
        let mut r = rng::seeded(seed);
        Image::new(16, 16, (0..3 * 16 * 16).map(|_| r.random()).collect()).unwrap()
    }

    #[test]
    fn zncc_examples() {
        let a = noisy(1);
        assert!((zncc(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let mean = intensity_feature(&a);
        let neg = Image::from_fn(16, 16, |c, y, x| 2.0 * mean - a.get(c, y, x));
        assert!((zncc(&a, &neg).unwrap() + 1.0).abs() < 1e-6);
        let flat = Image::filled(16, 16, [0.3; 3]);
        assert_eq!(zncc(&a, &flat).unwrap(), 0.0);
        assert!(zncc(&a, &Image::filled(8, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn intensity_examples() {
        assert_eq!(intensity_feature(&Image::filled(4, 4, [0.0; 3])), 0.0);
        assert_eq!(intensity_feature(&Image::filled(4, 4, [1.0; 3])), 1.0);
        assert_eq!(intensity_feature(&Image::filled(4, 4, [0.25; 3])), 0.25);
    }

    #[test]
    fn identical_images_and_infinite_threshold_give_no_reroof() {
        let img = noisy(3);
        let seq = sequence(vec![img.clone(); 7]);
        for kind in [FeatureKind::Zncc, FeatureKind::Intensity] {
            let t = FeatureThresholds {
                kind,
                threshold: 0.05,
                scale: 0.01,
            };
            assert_eq!(feature_baseline_infer(&seq, &t).unwrap().predicted, ReroofLabel::NoReroof);
        }
        let mut changing = vec![Image::filled(16, 16, [0.1; 3]); 3];
        changing.extend(vec![Image::filled(16, 16, [0.9; 3]); 4]);
        let t = FeatureThresholds {
            kind: FeatureKind::Intensity,
            threshold: f64::INFINITY,
            scale: 1.0,
        };
        assert_eq!(feature_baseline_infer(&sequence(changing), &t).unwrap().predicted, ReroofLabel::NoReroof);
    }

    #[test]
    fn trace_has_one_entry_per_adjacent_pair() {
        let seq = sequence((0..7).map(noisy).collect());
        let t = FeatureThresholds {
            kind: FeatureKind::Zncc,
            threshold: 0.5,
            scale: 0.1,
        };
        let p = feature_baseline_infer(&seq, &t).unwrap();
        assert_eq!(p.trace.len(), 6);
        assert_eq!(p.trace[0].0, 2013);
        let csv = trace_csv(&[p]);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("building_id,year,p_t\nb,2013,"));
    }
}
