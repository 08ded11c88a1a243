//! Phrase localization accuracy: a prediction is correct when its IoU with the
//! (union) ground-truth box is strictly above 0.5.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::inference::Prediction;

pub const IOU_THRESHOLD: f64 = 0.5;

/// Box area convention. Some public evaluators count pixels inclusively.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaConvention {
    #[default]
    Continuous,
    PixelPlusOne,
}

impl AreaConvention {
    fn extent(self, lo: f64, hi: f64) -> f64 {
        match self {
            AreaConvention::Continuous => (hi - lo).max(0.0),
            AreaConvention::PixelPlusOne => (hi - lo + 1.0).max(0.0),
        }
    }

    fn area(self, b: &BBox) -> f64 {
        self.extent(b.x1, b.x2) * self.extent(b.y1, b.y2)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_with(a, b, AreaConvention::Continuous)
}

/// Intersection over union; zero when either box has no area.
pub fn iou_with(a: &BBox, b: &BBox, conv: AreaConvention) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return 0.0;
    }
    let inter_w = conv.extent(a.x1.max(b.x1), a.x2.min(b.x2));
    let inter_h = conv.extent(a.y1.max(b.y1), a.y2.min(b.y2));
    let inter = inter_w * inter_h;
    let union = conv.area(a) + conv.area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Bounding hull of all ground-truth boxes; `None` for an empty list.
pub fn union_gt_box(boxes: &[BBox]) -> Option<BBox> {
    let (first, rest) = boxes.split_first()?;
    Some(rest.iter().fold(*first, |acc, b| acc.hull(b)))
}

pub fn is_correct(pred: &BBox, gt: &BBox, conv: AreaConvention) -> bool {
    iou_with(pred, gt, conv) > IOU_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub total_phrases: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl MethodScore {
    fn new(total_phrases: usize, correct: usize) -> Self {
        let accuracy = if total_phrases == 0 {
            0.0
        } else {
            correct as f64 / total_phrases as f64
        };
        MethodScore {
            total_phrases,
            correct,
            accuracy,
        }
    }
}

/// Scores `predictions` against every phrase that has at least one gt box.
pub fn accuracy(predictions: &[Prediction], images: &[ImageRecord], conv: AreaConvention) -> Result<MethodScore> {
    let by_key: HashMap<(&str, &str), &Prediction> = predictions
        .iter()
        .map(|p| ((p.image_id.as_str(), p.phrase_id.as_str()), p))
        .collect();
    let (mut total, mut correct) = (0, 0);
    for im in images {
        for p in im.captions.iter().flat_map(|c| &c.phrases) {
            let Some(gt) = union_gt_box(&p.gt_boxes) else {
                continue;
            };
            let pred = by_key
                .get(&(im.image_id.as_str(), p.phrase_id.as_str()))
                .ok_or_else(|| Error::MissingPrediction {
                    image_id: im.image_id.clone(),
                    phrase_id: p.phrase_id.clone(),
                })?;
            total += 1;
            if is_correct(&pred.bbox, &gt, conv) {
                correct += 1;
            }
        }
    }
    Ok(MethodScore::new(total, correct))
}

/// Fraction of evaluable phrases for which some detected box is correct.
pub fn upper_bound(images: &[ImageRecord], conv: AreaConvention) -> f64 {
    upper_bound_score(images, conv).accuracy
}

pub fn upper_bound_score(images: &[ImageRecord], conv: AreaConvention) -> MethodScore {
    let (mut total, mut covered) = (0, 0);
    for im in images {
        for p in im.captions.iter().flat_map(|c| &c.phrases) {
            let Some(gt) = union_gt_box(&p.gt_boxes) else {
                continue;
            };
            total += 1;
            if im.objects.iter().any(|o| is_correct(&o.bbox, &gt, conv)) {
                covered += 1;
            }
        }
    }
    MethodScore::new(total, covered)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// First method in `methods` order of insertion.
    pub method: String,
    pub total_phrases: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub upper_bound: f64,
    pub area_convention: AreaConvention,
    pub methods: BTreeMap<String, MethodScore>,
}

impl EvalReport {
    /// Scores each `(method, predictions)` run; the first one is the headline.
    pub fn build(images: &[ImageRecord], runs: &[(String, Vec<Prediction>)], conv: AreaConvention) -> Result<Self> {
        let ub = upper_bound(images, conv);
        let mut methods = BTreeMap::new();
        for (name, preds) in runs {
            methods.insert(name.clone(), accuracy(preds, images, conv)?);
        }
        let (method, head) = match runs.first() {
            Some((name, _)) => (name.clone(), methods[name].clone()),
            None => (String::new(), MethodScore::new(0, 0)),
        };
        Ok(EvalReport {
            method,
            total_phrases: head.total_phrases,
            correct: head.correct,
            accuracy: head.accuracy,
            upper_bound: ub,
            area_convention: conv,
            methods,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.methods.keys().map(String::len).max().unwrap_or(0).max("method".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>9}", "method", "correct", "total", "accuracy");
        for (name, s) in &self.methods {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>8.2}%",
                name,
                s.correct,
                s.total_phrases,
                100.0 * s.accuracy
            );
        }
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8.2}%", "upper-bound", "", "", 100.0 * self.upper_bound);
        out
    }
}
