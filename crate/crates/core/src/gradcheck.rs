//! Finite-difference verification of single operations and of whole-model
//! loss gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_region_bias, region_cross_attention, vanilla_attention, Projections};
use crate::data::Triplet;
use crate::error::Result;
use crate::loss::{total_loss, LossWeights, SpatialLossConfig};
use crate::model::{CrFormer, ModelConfig};
use crate::synth::{self, SyntheticShadowSpec};
use crate::tensor::{finite_diff_grad, relative_error, Graph, Tensor, Var};
use crate::train::{sample_loss, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Side of the square synthetic input.
    pub size: usize,
    pub seed: u64,
    /// Central-difference half step.
    pub step: f64,
    /// Entries sampled per parameter tensor; tensors this small or smaller
    /// are checked in full.
    pub entries_per_tensor: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            // A wider init keeps activations off the ReLU and |·| kinks and
            // gradients well above finite-difference noise.
            model: ModelConfig {
                base_channels: 8,
                init_std: 0.2,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            size: 16,
            seed: 0,
            step: 1e-5,
            entries_per_tensor: 12,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub entries: usize,
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }
}

fn loss_value(model: &CrFormer, sample: &Triplet, loss: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let v = sample_loss(&mut g, model, sample, loss)?;
    Ok(g.value(v.total)[0])
}

/// Compares analytic gradients of the total loss with central differences
/// for every parameter tensor of `model` on one sample.
///
/// A group passes when its norm-based relative error is strictly below the
/// tolerance, so a tolerance of zero always fails.
pub fn check_gradients(
    model: &mut CrFormer,
    sample: &Triplet,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut g = Graph::new();
    let vars = sample_loss(&mut g, model, sample, &cfg.loss)?;
    let grads = g.backward(vars.total)?;
    model.params_mut().zero_grad();
    grads.accumulate_into(model.params_mut())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let ids: Vec<_> = model.params().ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let (name, n) = {
            let t = model.params().get(id);
            (model.params().name(id).to_string(), t.numel())
        };
        let picks: Vec<usize> = if n <= cfg.entries_per_tensor {
            (0..n).collect()
        } else {
            let mut p = index::sample(&mut rng, n, cfg.entries_per_tensor).into_vec();
            p.sort_unstable();
            p
        };
        let full = model.params().get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let analytic: Vec<f64> = picks.iter().map(|&i| full[i]).collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = loss_value(model, sample, &cfg.loss)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = loss_value(model, sample, &cfg.loss)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.step));
        }
        let err = relative_error(&analytic, &numeric);
        groups.push(GroupResult {
            name,
            entries: picks.len(),
            relative_error: err,
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
            passed: err < cfg.tolerance,
        });
    }
    model.params_mut().zero_grad();
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        groups,
    })
}

/// Builds the configured model and a synthetic sample, then runs
/// [`check_gradients`].
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut model = CrFormer::new(cfg.model.clone(), cfg.seed)?;
    let spec = SyntheticShadowSpec {
        height: cfg.size,
        width: cfg.size,
        samples: 1,
        area: [0.1, 0.6],
        seed: cfg.seed,
        ..SyntheticShadowSpec::default()
    };
    let sample = synth::sample(&spec, 0)?;
    check_gradients(&mut model, &sample, cfg)
}

/// Tolerance for single-operation checks.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Central-difference half step for single-operation checks.
pub const OP_STEP: f64 = 1e-4;

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn weights_for(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64) * 0.731).sin() + 1.5)
}

/// Relative error between the analytic and central-difference gradients of
/// `sum(w ∘ op(inputs))` with respect to every input, with fixed positive
/// weights `w`. Returns the worst error and the analytic gradient norm.
pub fn check_op(inputs: &[Tensor], op: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, h: f64) -> Result<(f64, f64)> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t)).collect();
        let out = op(&mut g, &vars)?;
        let w = weights_for(g.shape(out));
        Ok(g.value(out).iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = op(&mut g, &vars)?;
    let w = g.constant(weights_for(g.shape(out)));
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let (mut worst, mut norm2) = (0.0f64, 0.0);
    for (idx, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let mut failure = None;
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[idx] = probe.clone();
                eval(&xs).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            &inputs[idx],
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(relative_error(&analytic, numeric.data()));
        norm2 += analytic.iter().map(|a| a * a).sum::<f64>();
    }
    Ok((worst, norm2.sqrt()))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform magnitudes in `[0.1, 1)` with random signs, so ReLU and `|·|`
/// kinks stay far outside `±h`.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Finite-difference check of every differentiable graph operation, the
/// attention variants and the total loss, each on small random inputs.
pub fn op_suite(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let r = &mut rng;
    let a = signed_away_from_zero(r, &[3, 4]);
    let b = uniform(r, &[3, 4], -1.0, 1.0);
    let row = uniform(r, &[4], -1.0, 1.0);
    let m = uniform(r, &[3, 5], -1.0, 1.0);
    let n = uniform(r, &[5, 2], -1.0, 1.0);
    let gain = uniform(r, &[5], -1.0, 1.0);
    let beta = uniform(r, &[5], -1.0, 1.0);
    let x = uniform(r, &[2, 6, 6], -1.0, 1.0);
    let kernel = uniform(r, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = uniform(r, &[3], -1.0, 1.0);
    let pointwise = uniform(r, &[4, 2, 1, 1], -1.0, 1.0);
    let y = uniform(r, &[1, 6, 6], -1.0, 1.0);
    let s = uniform(r, &[2, 6, 6], -1.0, 1.0);
    let probs = uniform(r, &[2, 5], 0.05, 0.95);
    let tokens = 10;
    let fq = uniform(r, &[tokens, 4], -1.0, 1.0);
    let fkv = uniform(r, &[tokens, 4], -1.0, 1.0);
    let wq = uniform(r, &[4, 4], -1.0, 1.0);
    let wk = uniform(r, &[4, 4], -1.0, 1.0);
    let wv = uniform(r, &[4, 4], -1.0, 1.0);
    let ms: Vec<f64> = (0..tokens).map(|i| (i % 3 == 1) as u8 as f64).collect();
    let img_mask: Vec<f64> = (0..36).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let pred_d = uniform(r, &[3, 8, 8], 0.0, 1.0);
    let pred_r = uniform(r, &[3, 8, 8], 0.0, 1.0);
    let gt = uniform(r, &[3, 8, 8], 0.0, 1.0);

    let ninf = f64::NEG_INFINITY;
    let softmax_bias = Tensor::new(
        vec![3, 5],
        vec![
            0.0, ninf, 0.0, 0.0, ninf, //
            ninf, ninf, ninf, ninf, ninf, //
            ninf, 0.0, ninf, ninf, ninf,
        ],
    )?;
    let region = build_region_bias(&ms)?;

    let mut cases: Vec<(String, Vec<Tensor>, OpFn)> = vec![
        ("add".into(), vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub".into(), vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul".into(), vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale".into(), vec![a.clone()], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("relu".into(), vec![a.clone()], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("abs".into(), vec![a.clone()], Box::new(|g, v| Ok(g.abs(v[0])))),
        ("sigmoid".into(), vec![a.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("logit".into(), vec![probs], Box::new(|g, v| Ok(g.logit(v[0], 1e-3)))),
        ("square".into(), vec![a.clone()], Box::new(|g, v| Ok(g.square(v[0])))),
        ("sum".into(), vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean".into(), vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("transpose".into(), vec![a.clone()], Box::new(|g, v| g.transpose(v[0]))),
        ("reshape".into(), vec![a.clone()], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        ("diff_rows".into(), vec![a.clone()], Box::new(|g, v| g.diff(v[0], 0))),
        ("diff_cols".into(), vec![a.clone()], Box::new(|g, v| g.diff(v[0], 1))),
        ("add_row".into(), vec![a, row], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("matmul".into(), vec![m.clone(), n], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("softmax".into(), vec![m.clone()], Box::new(|g, v| Ok(g.softmax(v[0])))),
        (
            "softmax_masked".into(),
            vec![m.clone()],
            Box::new(move |g, v| {
                let c = g.constant(softmax_bias.clone());
                let z = g.add(v[0], c)?;
                Ok(g.softmax(z))
            }),
        ),
        (
            "layer_norm".into(),
            vec![m, gain, beta],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "conv2d_1x1".into(),
            vec![x.clone(), pointwise],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 0)),
        ),
        ("avg_pool".into(), vec![x.clone()], Box::new(|g, v| g.avg_pool(v[0], 3, 2, 1))),
        ("upsample2x".into(), vec![x.clone()], Box::new(|g, v| g.upsample2x(v[0]))),
        (
            "local_area_means".into(),
            vec![x.clone()],
            Box::new(|g, v| g.local_area_means(v[0], 3)),
        ),
        (
            "concat_channels".into(),
            vec![x.clone(), y],
            Box::new(|g, v| g.concat_channels(&[v[0], v[1]])),
        ),
        (
            "composite".into(),
            vec![x.clone(), s],
            Box::new(move |g, v| g.composite(v[0], v[1], &img_mask)),
        ),
        (
            "region_cross_attention".into(),
            vec![fq.clone(), fkv.clone(), wq.clone(), wk.clone(), wv.clone()],
            Box::new(move |g, v| {
                let proj = Projections {
                    query: v[2],
                    key: v[3],
                    value: v[4],
                };
                region_cross_attention(g, v[0], v[1], &region, &proj)
            }),
        ),
        (
            "vanilla_attention".into(),
            vec![fq, fkv, wq, wk, wv],
            Box::new(|g, v| {
                let proj = Projections {
                    query: v[2],
                    key: v[3],
                    value: v[4],
                };
                vanilla_attention(g, v[0], v[1], &proj)
            }),
        ),
        (
            "total_loss".into(),
            vec![pred_d, pred_r, gt],
            Box::new(|g, v| {
                let l = total_loss(g, v[0], v[1], v[2], &LossWeights::default(), &SpatialLossConfig::default())?;
                Ok(l.total)
            }),
        ),
    ];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        cases.push((
            format!("conv2d_s{stride}_p{pad}"),
            vec![x.clone(), kernel.clone(), bias.clone()],
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        ));
    }

    let mut groups = Vec::with_capacity(cases.len());
    for (name, inputs, op) in cases {
        let (err, norm) = check_op(&inputs, op.as_ref(), OP_STEP)?;
        groups.push(GroupResult {
            name,
            entries: inputs.iter().map(Tensor::numel).sum(),
            relative_error: err,
            analytic_norm: norm,
            passed: err < OP_TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        tolerance: OP_TOLERANCE,
        groups,
    })
}
