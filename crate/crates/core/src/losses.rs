//! Training losses over predicted camera-frame vertices.
//!
//! Every loss is a differentiable graph expression. Counters report the
//! joints skipped by the 2D term and the degenerate edges skipped by the
//! smoothness term.

use crate::error::{Error, Result};
use crate::geometry::{Camera, JointRegressor, MeshTopology, Point};
use crate::kv::KeyValues;
use crate::numcore::{Graph, Tensor, Var};

/// Edges shorter than this contribute nothing to the smoothness loss.
pub const MIN_EDGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_joint: f64,
    pub lambda_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_joint: 1.0,
            lambda_smooth: 0.05,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_joint: f64, lambda_smooth: f64) -> Result<Self> {
        if !(lambda_joint >= 0.0 && lambda_smooth >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {lambda_joint}, {lambda_smooth}"
            )));
        }
        Ok(Self {
            lambda_joint,
            lambda_smooth,
        })
    }

    /// Reads `lambda_joint` / `lambda_smooth`, defaulting absent keys.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Self::new(
            kv.get_or("lambda_joint", d.lambda_joint)?,
            kv.get_or("lambda_smooth", d.lambda_smooth)?,
        )
    }
}

/// `Σ_i ‖pred_i − gt_i‖²`.
pub fn vertex_loss<'g>(pred: Var<'g>, gt: Var<'g>) -> Result<Var<'g>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("vertex_loss", &pred.shape(), &gt.shape()));
    }
    let d = pred.sub(gt)?;
    Ok(d.mul(d)?.sum())
}

fn column_selector<'g>(g: &'g Graph, col: usize) -> Var<'g> {
    let mut e = vec![0.0; 3];
    e[col] = 1.0;
    g.constant(Tensor::new(&[3, 1], e).unwrap())
}

fn ones_col<'g>(g: &'g Graph, n: usize) -> Var<'g> {
    g.constant(Tensor::ones(&[n, 1]))
}

fn col_mask<'g>(g: &'g Graph, mask: &[bool]) -> Var<'g> {
    let m = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    g.constant(Tensor::new(&[mask.len(), 1], m).unwrap())
}

/// Joint loss value and the number of joints whose 2D term was skipped.
pub struct JointLoss<'g> {
    pub loss: Var<'g>,
    pub skipped: usize,
}

/// `Σ_i ‖Ĵ³ᴰ_i − J³ᴰ_i‖² + Σ_i ‖(Ĵ²ᴰ_i − J²ᴰ_i) / H‖²` with `Ĵ³ᴰ = W·pred`
/// and `Ĵ²ᴰ` its perspective projection. Joints predicted at `z ≤ 0` drop
/// their 2D term.
pub fn joint_loss<'g>(
    pred: Var<'g>,
    gt_j3d: &[Point],
    gt_j2d: &[[f64; 2]],
    regressor: &JointRegressor,
    cam: &Camera,
    image_side: f64,
) -> Result<JointLoss<'g>> {
    let g = pred.graph();
    let m = regressor.joint_count();
    if gt_j3d.len() != m || gt_j2d.len() != m {
        return Err(Error::shape("joint_loss", &[m, 3], &[gt_j3d.len(), gt_j2d.len()]));
    }
    let w = g.constant(regressor.weights().clone());
    let j = w.matmul(pred)?;
    let d3 = j.sub(g.constant(Tensor::from_points(gt_j3d)))?;
    let l3 = d3.mul(d3)?.sum();

    let x = j.matmul(column_selector(g, 0))?;
    let y = j.matmul(column_selector(g, 1))?;
    let z = j.matmul(column_selector(g, 2))?;
    let valid: Vec<bool> = z.value().data().iter().map(|&v| v > 0.0).collect();
    let skipped = valid.iter().filter(|&&k| !k).count();
    let mask = col_mask(g, &valid);
    // Skipped joints get z = 1 so the reciprocal stays finite.
    let inv_mask = col_mask(g, &valid.iter().map(|k| !k).collect::<Vec<_>>());
    let inv_z = z.mul(mask)?.add(inv_mask)?.recip();
    let u = x.mul(inv_z)?.scale(cam.fx / image_side);
    let v = y.mul(inv_z)?.scale(cam.fy / image_side);
    let target = |k: usize, c: f64| {
        let col: Vec<f64> = gt_j2d.iter().map(|p| (p[k] - c) / image_side).collect();
        g.constant(Tensor::new(&[m, 1], col).unwrap())
    };
    let du = u.sub(target(0, cam.cx))?.mul(mask)?;
    let dv = v.sub(target(1, cam.cy))?.mul(mask)?;
    let l2 = du.mul(du)?.sum().add(dv.mul(dv)?.sum())?;
    Ok(JointLoss {
        loss: l3.add(l2)?,
        skipped,
    })
}

pub struct SmoothLoss<'g> {
    pub loss: Var<'g>,
    pub degenerate_edges: usize,
}

/// `Σ_f Σ_j |ê_{f,j} · n_f|` over unit edges of the predicted faces against
/// the ground-truth face normals.
pub fn smooth_loss<'g>(pred: Var<'g>, gt_normals: &[Point], topo: &MeshTopology) -> Result<SmoothLoss<'g>> {
    let g = pred.graph();
    let f = topo.face_count();
    if gt_normals.len() != f {
        return Err(Error::shape("smooth_loss", &[f, 3], &[gt_normals.len(), 3]));
    }
    if pred.shape() != [topo.vertex_count(), 3] {
        return Err(Error::shape("smooth_loss", &pred.shape(), &[topo.vertex_count(), 3]));
    }
    let corner = |k: usize| -> Vec<usize> { topo.faces().iter().map(|t| t[k]).collect() };
    let corners = [
        pred.gather_rows(&corner(0))?,
        pred.gather_rows(&corner(1))?,
        pred.gather_rows(&corner(2))?,
    ];
    let normals = g.constant(Tensor::from_points(gt_normals));
    let ones = ones_col(g, 3);
    let mut total: Option<Var<'g>> = None;
    let mut degenerate_edges = 0;
    for j in 0..3 {
        let e = corners[(j + 1) % 3].sub(corners[j])?;
        let sq = e.mul(e)?.matmul(ones)?;
        let valid: Vec<bool> = sq.value().data().iter().map(|&s| s.sqrt() >= MIN_EDGE).collect();
        degenerate_edges += valid.iter().filter(|&&k| !k).count();
        let mask = col_mask(g, &valid);
        let fill = col_mask(g, &valid.iter().map(|k| !k).collect::<Vec<_>>());
        let inv_len = sq.mul(mask)?.add(fill)?.sqrt().recip();
        let term = e.mul(normals)?.matmul(ones)?.abs().mul(inv_len)?.mul(mask)?.sum();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(SmoothLoss {
        loss: total.expect("three edges"),
        degenerate_edges,
    })
}

/// Ground truth for one sample, in camera-frame length units.
#[derive(Clone, Debug)]
pub struct LossTarget<'a> {
    pub verts: &'a [Point],
    pub joints3d: &'a [Point],
    pub joints2d: &'a [[f64; 2]],
    pub normals: &'a [Point],
    pub camera: Camera,
}

/// Quantities shared by all samples of a dataset.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub regressor: &'a JointRegressor,
    pub topology: &'a MeshTopology,
    pub image_side: f64,
    pub weights: LossWeights,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub vertex: f64,
    pub joint: f64,
    pub smooth: f64,
    pub total: f64,
    pub skipped_joints: usize,
    pub degenerate_edges: usize,
}

/// `L_vertex + λ_joint·L_joint + λ_smooth·L_smooth`.
pub fn total_loss<'g>(
    pred: Var<'g>,
    target: &LossTarget<'_>,
    ctx: &LossContext<'_>,
) -> Result<(Var<'g>, LossComponents)> {
    let g = pred.graph();
    let lv = vertex_loss(pred, g.constant(Tensor::from_points(target.verts)))?;
    let lj = joint_loss(
        pred,
        target.joints3d,
        target.joints2d,
        ctx.regressor,
        &target.camera,
        ctx.image_side,
    )?;
    let ls = smooth_loss(pred, target.normals, ctx.topology)?;
    let total = lv
        .add(lj.loss.scale(ctx.weights.lambda_joint))?
        .add(ls.loss.scale(ctx.weights.lambda_smooth))?;
    let parts = LossComponents {
        vertex: lv.value().item(),
        joint: lj.loss.value().item(),
        smooth: ls.loss.value().item(),
        total: total.value().item(),
        skipped_joints: lj.skipped,
        degenerate_edges: ls.degenerate_edges,
    };
    Ok((total, parts))
}
