//! Per-image and aggregate evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{psnr, region_mae, ssim, Metric, RegionMetrics, Triplet};
use crate::error::{dim_err, Error, Result};
use crate::mask::ShadowMask;
use crate::model::CrFormer;
use crate::tensor::Tensor;

/// Which image of the pipeline is scored against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Input,
    Deshadowed,
    Composite,
    Refined,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::Deshadowed => "deshadowed",
            Stage::Composite => "composite",
            Stage::Refined => "refined",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub region: RegionMetrics,
    pub psnr: Metric,
    /// Absent for images smaller than the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    pub stages: BTreeMap<Stage, StageMetrics>,
}

/// Unweighted means over images. Region means skip images where the
/// region is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub images: usize,
    pub shadow_mae: Option<f64>,
    pub nonshadow_mae: Option<f64>,
    pub all_mae: f64,
    pub psnr: Metric,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageReport>,
    pub aggregate: BTreeMap<Stage, AggregateMetrics>,
}

pub fn stage_metrics(pred: &Tensor, gt: &Tensor, mask: &ShadowMask) -> Result<StageMetrics> {
    let region = region_mae(pred, gt, mask)?;
    let small = mask.height() < 11 || mask.width() < 11;
    Ok(StageMetrics {
        region,
        psnr: psnr(pred, gt)?,
        ssim: if small { None } else { Some(ssim(pred, gt)?) },
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn from_images(images: Vec<ImageReport>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset("nothing to evaluate".into()));
        }
        let mut aggregate = BTreeMap::new();
        let stages: Vec<Stage> = images[0].stages.keys().copied().collect();
        for stage in stages {
            let rows: Vec<&StageMetrics> = images
                .iter()
                .map(|im| {
                    im.stages
                        .get(&stage)
                        .ok_or_else(|| Error::Contract(format!("{} lacks stage {}", im.name, stage.label())))
                })
                .collect::<Result<_>>()?;
            let n = rows.len() as f64;
            aggregate.insert(
                stage,
                AggregateMetrics {
                    images: rows.len(),
                    shadow_mae: mean_of(rows.iter().map(|r| r.region.shadow_mae)),
                    nonshadow_mae: mean_of(rows.iter().map(|r| r.region.nonshadow_mae)),
                    all_mae: rows.iter().map(|r| r.region.all_mae).sum::<f64>() / n,
                    psnr: Metric(rows.iter().map(|r| r.psnr.0).sum::<f64>() / n),
                    ssim: if rows.iter().all(|r| r.ssim.is_some()) {
                        mean_of(rows.iter().map(|r| r.ssim))
                    } else {
                        None
                    },
                },
            );
        }
        Ok(EvalReport { images, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aggregate table: one row per stage, LAB MAE by region, PSNR, SSIM.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11} {:>9} {:>9} {:>9} {:>9} {:>7}",
            "stage", "S", "NS", "All", "PSNR", "SSIM"
        );
        for (stage, a) in &self.aggregate {
            let _ = writeln!(
                out,
                "{:<11} {:>9} {:>9} {:>9.4} {:>9} {:>7}",
                stage.label(),
                opt(a.shadow_mae),
                opt(a.nonshadow_mae),
                a.all_mae,
                format!("{:.3}", a.psnr),
                opt(a.ssim),
            );
        }
        let _ = write!(out, "images: {}", self.images.len());
        out
    }
}

pub fn evaluate_image(name: &str, stages: &[(Stage, &Tensor)], gt: &Tensor, mask: &ShadowMask) -> Result<ImageReport> {
    let mut map = BTreeMap::new();
    for &(stage, img) in stages {
        map.insert(stage, stage_metrics(img, gt, mask)?);
    }
    Ok(ImageReport {
        name: name.to_string(),
        stages: map,
    })
}

/// Applies `f` to every item on scoped worker threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Scores the unprocessed shadow images.
pub fn evaluate_inputs(data: &[Triplet]) -> Result<EvalReport> {
    let images = parallel_map(data, |t| {
        evaluate_image(&t.name, &[(Stage::Input, &t.shadow)], &t.shadow_free, &t.mask)
    })?;
    EvalReport::from_images(images)
}

/// Runs the model on every triplet and scores all four stages.
pub fn evaluate_model(model: &CrFormer, data: &[Triplet]) -> Result<EvalReport> {
    let images = parallel_map(data, |t| {
        let p = model.predict(&t.shadow, &t.mask)?;
        evaluate_image(
            &t.name,
            &[
                (Stage::Input, &t.shadow),
                (Stage::Deshadowed, &p.deshadowed),
                (Stage::Composite, &p.composite),
                (Stage::Refined, &p.refined),
            ],
            &t.shadow_free,
            &t.mask,
        )
    })?;
    EvalReport::from_images(images)
}

/// Channel-mean `|pred − gt|` rendered black → red → yellow → white, with
/// full scale at an error of 0.25.
pub fn difference_heatmap(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let plane = match *pred.shape() {
        [3, h, w] if gt.shape() == pred.shape() => h * w,
        _ => return Err(dim_err!("heatmap: {:?} vs {:?}", pred.shape(), gt.shape())),
    };
    let (p, g) = (pred.data(), gt.data());
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        let e: f64 = (0..3).map(|c| (p[c * plane + i] - g[c * plane + i]).abs()).sum::<f64>() / 3.0;
        let t = (e / 0.25).clamp(0.0, 1.0) * 3.0;
        out[i] = t.min(1.0);
        out[plane + i] = (t - 1.0).clamp(0.0, 1.0);
        out[2 * plane + i] = (t - 2.0).clamp(0.0, 1.0);
    }
    Tensor::new(pred.shape().to_vec(), out)
}
