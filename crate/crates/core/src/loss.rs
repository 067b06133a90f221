//! Training objectives: pixel-wise L1 reconstruction, the spatial-consistency
//! term over pooled local areas, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub spatial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reconstruction: 1.0,
            spatial: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.reconstruction >= 0.0 && self.spatial >= 0.0)
            || !self.reconstruction.is_finite()
            || !self.spatial.is_finite()
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialLossConfig {
    /// Side length of one local area, in pixels.
    pub pool_size: usize,
}

impl Default for SpatialLossConfig {
    fn default() -> Self {
        SpatialLossConfig { pool_size: 4 }
    }
}

/// Scalar nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub spatial: Var,
    pub total: Var,
}

/// Plain values of one loss evaluation, as written to the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub reconstruction: f64,
    pub spatial: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            reconstruction: g.value(self.reconstruction)[0],
            spatial: g.value(self.spatial)[0],
            total: g.value(self.total)[0],
        }
    }
}

fn check_same(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(dim_err!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        ));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    check_same(g, pred, target, "l1")?;
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `mean|Î − I^gt| + mean|I^r − I^gt|`.
pub fn reconstruction_loss(g: &mut Graph, deshadowed: Var, refined: Var, gt: Var) -> Result<Var> {
    let a = l1(g, deshadowed, gt)?;
    let b = l1(g, refined, gt)?;
    g.add(a, b)
}

/// φ between two pooled grids.
///
/// Every ordered neighbor pair `(x, y)` contributes
/// `(|A_x − A_y| − |B_x − B_y|)²`; the sum is divided by the number of cells.
/// Each unordered pair appears twice, once from each side.
pub fn spatial_term_pooled(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b, "spatial term")?;
    let cells = match *g.shape(a) {
        [h, w] if h * w > 0 => h * w,
        ref s => return Err(dim_err!("spatial term: expected a non-empty grid, got {:?}", s)),
    };
    let mut parts = Vec::with_capacity(2);
    for axis in 0..2 {
        let da = g.diff(a, axis)?;
        let db = g.diff(b, axis)?;
        let ma = g.abs(da);
        let mb = g.abs(db);
        let d = g.sub(ma, mb)?;
        let sq = g.square(d);
        parts.push(g.sum(sq));
    }
    let s = g.add(parts[0], parts[1])?;
    Ok(g.scale(s, 2.0 / cells as f64))
}

/// φ(pred, gt) on `k×k` local-area means.
pub fn spatial_term(g: &mut Graph, pred: Var, gt: Var, cfg: &SpatialLossConfig) -> Result<Var> {
    check_same(g, pred, gt, "spatial term")?;
    let a = g.local_area_means(pred, cfg.pool_size)?;
    let b = g.local_area_means(gt, cfg.pool_size)?;
    spatial_term_pooled(g, a, b)
}

/// `φ(Î, I^gt) + φ(I^r, I^gt)`.
pub fn spatial_consistency_loss(
    g: &mut Graph,
    deshadowed: Var,
    refined: Var,
    gt: Var,
    cfg: &SpatialLossConfig,
) -> Result<Var> {
    let a = spatial_term(g, deshadowed, gt, cfg)?;
    let b = spatial_term(g, refined, gt, cfg)?;
    g.add(a, b)
}

pub fn total_loss(
    g: &mut Graph,
    deshadowed: Var,
    refined: Var,
    gt: Var,
    weights: &LossWeights,
    cfg: &SpatialLossConfig,
) -> Result<LossVars> {
    let reconstruction = reconstruction_loss(g, deshadowed, refined, gt)?;
    let spatial = spatial_consistency_loss(g, deshadowed, refined, gt, cfg)?;
    let a = g.scale(reconstruction, weights.reconstruction);
    let b = g.scale(spatial, weights.spatial);
    let total = g.add(a, b)?;
    Ok(LossVars {
        reconstruction,
        spatial,
        total,
    })
}

/// Evaluates [`total_loss`] on plain tensors without tracking gradients.
pub fn evaluate(
    deshadowed: &Tensor,
    refined: &Tensor,
    gt: &Tensor,
    weights: &LossWeights,
    cfg: &SpatialLossConfig,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let d = g.constant(deshadowed.clone());
    let r = g.constant(refined.clone());
    let t = g.constant(gt.clone());
    Ok(total_loss(&mut g, d, r, t, weights, cfg)?.values(&g))
}

/// Plain-tensor [`Graph::local_area_means`].
pub fn local_area_means(image: &Tensor, k: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let y = g.local_area_means(x, k)?;
    Ok(g.tensor(y))
}

/// Plain-tensor [`spatial_term_pooled`].
pub fn spatial_term_on_grids(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = spatial_term_pooled(&mut g, av, bv)?;
    Ok(g.value(y)[0])
}
