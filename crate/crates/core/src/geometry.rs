//! Mesh topology, sampling, projection, alignment and evaluation metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub type Point = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn mat_vec(m: &Mat3, v: Point) -> Point {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation by `angle` radians about the unit `axis` (Rodrigues).
pub fn axis_angle(axis: Point, angle: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for j in 0..3 {
            c[j] += p[j];
        }
    }
    c.map(|v| v / n)
}

/// Triangle faces over a fixed vertex count, counter-clockwise winding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshTopology {
    faces: Vec<[usize; 3]>,
    vertex_count: usize,
}

impl MeshTopology {
    pub fn new(faces: Vec<[usize; 3]>, vertex_count: usize) -> Result<Self> {
        for (f, tri) in faces.iter().enumerate() {
            if tri.iter().any(|&i| i >= vertex_count) {
                return Err(Error::Config(format!(
                    "face {f} {tri:?} indexes past {vertex_count} vertices"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Config(format!("face {f} {tri:?} is degenerate")));
            }
        }
        Ok(Self {
            faces,
            vertex_count,
        })
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    /// Number of faces incident to each undirected edge.
    pub fn edge_incidence(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for j in 0..3 {
                let (a, b) = (f[j], f[(j + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        self.edge_incidence().values().all(|&c| c == 2)
    }
}

/// Non-negative `M×N` matrix whose rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct JointRegressor {
    weights: Tensor,
}

impl JointRegressor {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape("joint_regressor", weights.shape(), &[0, 0]));
        }
        for j in 0..weights.shape()[0] {
            let row = weights.row(j);
            if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return Err(Error::Config(format!("regressor row {j} has a negative weight")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("regressor row {j} sums to {s}")));
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn joint_count(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn vertex_count(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `J = W·V`.
    pub fn regress(&self, verts: &[Point]) -> Result<Vec<Point>> {
        if verts.len() != self.vertex_count() {
            return Err(Error::shape(
                "regress_joints",
                self.weights.shape(),
                &[verts.len(), 3],
            ));
        }
        Ok((0..self.joint_count())
            .map(|j| {
                let mut acc = [0.0; 3];
                for (w, v) in self.weights.row(j).iter().zip(verts) {
                    for k in 0..3 {
                        acc[k] += w * v[k];
                    }
                }
                acc
            })
            .collect())
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }
}

/// Perspective projection `u = fx·x/z + cx`, `v = fy·y/z + cy`.
pub fn project(points: &[Point], cam: &Camera) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p[2] <= 0.0 {
                return Err(Error::Projection { index: i, z: p[2] });
            }
            Ok([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
        })
        .collect()
}

/// Greedy farthest point sampling seeded at index 0.
///
/// Each step picks the unselected point whose distance to the selected set is
/// largest, breaking ties by lowest index. Indices are in selection order.
pub fn farthest_point_sample(points: &[Point], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "cannot sample {k} of {} points",
            points.len()
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; points.len()];
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            return Ok(selected);
        }
        let c = points[current];
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = Some(i);
            }
        }
        current = best.expect("k <= n leaves a candidate");
    }
}

/// For each point, the position in `selected` of its nearest selected point
/// (ties to the earliest position).
pub fn nearest_assignment(points: &[Point], selected: &[usize]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (pos, &s) in selected.iter().enumerate() {
                let d = dist2(*p, points[s]);
                if d < best_d {
                    best_d = d;
                    best = pos;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceNormals {
    pub normals: Vec<Point>,
    /// Faces with zero area; their normal is the zero vector.
    pub degenerate: usize,
}

pub fn face_normals(verts: &[Point], topo: &MeshTopology) -> FaceNormals {
    let mut degenerate = 0;
    let normals = topo
        .faces()
        .iter()
        .map(|f| {
            let n = cross(sub(verts[f[1]], verts[f[0]]), sub(verts[f[2]], verts[f[0]]));
            let len = norm(n);
            if len <= f64::MIN_POSITIVE || !len.is_finite() {
                degenerate += 1;
                [0.0; 3]
            } else {
                n.map(|v| v / len)
            }
        })
        .collect();
    FaceNormals {
        normals,
        degenerate,
    }
}

/// Singular value decomposition `A = U·diag(σ)·Vᵀ` of a 3×3 matrix by
/// one-sided (Hestenes) cyclic Jacobi rotations. Singular values are sorted
/// in descending order.
pub fn svd3(a: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    const TOL: f64 = f64::EPSILON;
    const MAX_SWEEPS: usize = 50;
    let mut w = *a;
    let mut v = IDENTITY;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha: f64 = (0..3).map(|i| w[i][p] * w[i][p]).sum();
            let beta: f64 = (0..3).map(|i| w[i][q] * w[i][q]).sum();
            let gamma: f64 = (0..3).map(|i| w[i][p] * w[i][q]).sum();
            if gamma.abs() <= TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for row in m.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = [0.0; 3];
    for (j, s) in sigma.iter_mut().enumerate() {
        *s = (0..3).map(|i| w[i][j] * w[i][j]).sum::<f64>().sqrt();
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    let mut ss = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        ss[dst] = sigma[src];
        for i in 0..3 {
            vs[i][dst] = v[i][src];
            u[i][dst] = if sigma[src] > 0.0 { w[i][src] / sigma[src] } else { 0.0 };
        }
    }
    // Complete U where singular values vanish.
    let scale = ss[0].max(f64::MIN_POSITIVE);
    let col = |m: &Mat3, j: usize| [m[0][j], m[1][j], m[2][j]];
    if ss[2] <= 1e-14 * scale {
        let c = cross(col(&u, 0), col(&u, 1));
        for i in 0..3 {
            u[i][2] = c[i];
        }
    }
    (u, ss, vs)
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Point,
    /// Set when the cross-covariance was rank-deficient and only translation
    /// was estimated.
    pub translation_only: bool,
}

impl Similarity {
    pub fn apply(&self, points: &[Point]) -> Vec<Point> {
        points
            .iter()
            .map(|p| {
                let r = mat_vec(&self.rotation, *p);
                [
                    self.scale * r[0] + self.translation[0],
                    self.scale * r[1] + self.translation[1],
                    self.scale * r[2] + self.translation[2],
                ]
            })
            .collect()
    }
}

/// Least-squares similarity (Umeyama) mapping `pred` onto `gt`, restricted to
/// proper rotations.
pub fn procrustes(pred: &[Point], gt: &[Point]) -> Result<Similarity> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(Error::shape("procrustes", &[pred.len(), 3], &[gt.len(), 3]));
    }
    let n = pred.len() as f64;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut cov = [[0.0; 3]; 3];
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (sub(*p, mp), sub(*g, mg));
        var_p += dot(dp, dp);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += dg[i] * dp[j];
            }
        }
    }
    var_p /= n;
    cov.iter_mut().flatten().for_each(|v| *v /= n);
    let (u, sigma, v) = svd3(&cov);
    if sigma[0] <= 1e-300 || sigma[1] <= 1e-12 * sigma[0] || var_p <= 0.0 {
        return Ok(Similarity {
            scale: 1.0,
            rotation: IDENTITY,
            translation: sub(mg, mp),
            translation_only: true,
        });
    }
    let d = if det(&u) * det(&v) < 0.0 { -1.0 } else { 1.0 };
    let s_diag = [1.0, 1.0, d];
    let mut us = u;
    for row in us.iter_mut() {
        for j in 0..3 {
            row[j] *= s_diag[j];
        }
    }
    let rotation = mat_mul(&us, &transpose(&v));
    let scale = (sigma[0] + sigma[1] + d * sigma[2]) / var_p;
    let rm = mat_vec(&rotation, mp);
    let translation = [
        mg[0] - scale * rm[0],
        mg[1] - scale * rm[1],
        mg[2] - scale * rm[2],
    ];
    Ok(Similarity {
        scale,
        rotation,
        translation,
        translation_only: false,
    })
}

/// `pred` after optimal similarity alignment to `gt`.
pub fn procrustes_align(pred: &[Point], gt: &[Point]) -> Result<Vec<Point>> {
    Ok(procrustes(pred, gt)?.apply(pred))
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_distance(a: &[Point], b: &[Point]) -> f64 {
    a.iter().zip(b).map(|(p, q)| dist2(*p, *q).sqrt()).sum::<f64>() / a.len() as f64
}

/// Joint and vertex errors, with and without Procrustes alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    /// Mean per-joint position error.
    pub e_j: f64,
    /// Mean per-joint position error after alignment.
    pub e_pj: f64,
    /// Mean per-vertex position error.
    pub e_v: f64,
    /// Mean per-vertex position error after alignment.
    pub e_pv: f64,
}

impl Metrics {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            e_j: self.e_j * k,
            e_pj: self.e_pj * k,
            e_v: self.e_v * k,
            e_pv: self.e_pv * k,
        }
    }

    pub fn mean(items: &[Metrics]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Metrics::default();
        for x in items {
            m.e_j += x.e_j;
            m.e_pj += x.e_pj;
            m.e_v += x.e_v;
            m.e_pv += x.e_pv;
        }
        m.scaled(1.0 / n)
    }
}

/// Errors of `pred_v` against `gt_v` in their own units. Aligned metrics
/// estimate a separate similarity on vertices and on regressed joints.
pub fn metrics(pred_v: &[Point], gt_v: &[Point], w: &JointRegressor) -> Result<Metrics> {
    if pred_v.len() != gt_v.len() {
        return Err(Error::shape("metrics", &[pred_v.len(), 3], &[gt_v.len(), 3]));
    }
    let (pj, gj) = (w.regress(pred_v)?, w.regress(gt_v)?);
    Ok(Metrics {
        e_j: mean_distance(&pj, &gj),
        e_pj: mean_distance(&procrustes_align(&pj, &gj)?, &gj),
        e_v: mean_distance(pred_v, gt_v),
        e_pv: mean_distance(&procrustes_align(pred_v, gt_v)?, gt_v),
    })
}

/// Translates vertices so that regressed joint 0 sits at the origin.
pub fn root_relative(verts: &[Point], w: &JointRegressor) -> Result<Vec<Point>> {
    let root = w.regress(verts)?[0];
    Ok(verts.iter().map(|v| sub(*v, root)).collect())
}

/// Formats like C's `%.9g`.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..9).contains(&exp) {
        trim(&format!("{:.*}", (8 - exp) as usize, v))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Wavefront OBJ text: `v` lines then 1-based `f` lines.
pub fn to_obj(verts: &[Point], topo: &MeshTopology) -> String {
    let mut out = String::new();
    for v in verts {
        // Shortest decimal form that parses back to the same value.
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in topo.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// Parses the subset of OBJ written by [`to_obj`] (extra records are ignored;
/// `f` entries may carry `/vt/vn` suffixes).
pub fn parse_obj(text: &str) -> Result<(Vec<Point>, Vec<[usize; 3]>)> {
    let bad = |line: usize, msg: &str| Error::format("<obj>", format!("line {}: {msg}", line + 1));
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xs: Vec<f64> = parts
                    .map(|s| s.parse::<f64>().map_err(|_| bad(ln, "bad coordinate")))
                    .collect::<Result<_>>()?;
                if xs.len() < 3 {
                    return Err(bad(ln, "vertex needs 3 coordinates"));
                }
                verts.push([xs[0], xs[1], xs[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        s.split('/')
                            .next()
                            .and_then(|i| i.parse::<usize>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad(ln, "bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad(ln, "only triangles are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    if let Some(f) = faces.iter().flatten().find(|&&i| i >= verts.len()) {
        return Err(Error::format("<obj>", format!("face index {} out of range", f + 1)));
    }
    Ok((verts, faces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn random_rotation(rng: &mut Rng) -> Mat3 {
        let axis = [rng.normal(), rng.normal(), rng.normal()];
        axis_angle(axis, rng.range(-3.0, 3.0))
    }

    #[test]
    fn fps_square_corners() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ];
        let mut idx = farthest_point_sample(&pts, 4).unwrap();
        assert_eq!(idx, vec![0, 2, 1, 3]);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_exhaustion_and_bounds() {
        let mut rng = Rng::new(4);
        let pts = rng.normal_points(9);
        let mut idx = farthest_point_sample(&pts, 9).unwrap();
        idx.sort();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
        assert!(farthest_point_sample(&pts, 10).is_err());
        assert!(farthest_point_sample(&pts, 0).is_err());
        // Coincident points are still exhausted.
        let dup = [[1.0, 1.0, 1.0]; 4];
        assert_eq!(farthest_point_sample(&dup, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn nearest_assignment_maps_selected_to_themselves() {
        let mut rng = Rng::new(8);
        let pts = rng.normal_points(40);
        let sel = farthest_point_sample(&pts, 10).unwrap();
        let assign = nearest_assignment(&pts, &sel);
        for (pos, &s) in sel.iter().enumerate() {
            assert_eq!(assign[s], pos);
        }
    }

    #[test]
    fn normals_follow_winding() {
        let v = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let ccw = MeshTopology::new(vec![[0, 1, 2]], 3).unwrap();
        let cw = MeshTopology::new(vec![[0, 2, 1]], 3).unwrap();
        assert_eq!(face_normals(&v, &ccw).normals, vec![[0.0, 0.0, 1.0]]);
        assert_eq!(face_normals(&v, &cw).normals, vec![[0.0, 0.0, -1.0]]);
        let flat = [[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let fn_ = face_normals(&flat, &ccw);
        assert_eq!(fn_.degenerate, 1);
        assert_eq!(fn_.normals[0], [0.0; 3]);
    }

    #[test]
    fn normals_rotate_with_mesh() {
        let mut rng = Rng::new(12);
        let topo = MeshTopology::new(vec![[0, 1, 2]], 3).unwrap();
        for _ in 0..50 {
            let tri: Vec<Point> = rng.normal_points(3);
            let r = random_rotation(&mut rng);
            let rotated: Vec<Point> = tri.iter().map(|p| mat_vec(&r, *p)).collect();
            let n0 = face_normals(&tri, &topo).normals[0];
            let n1 = face_normals(&rotated, &topo).normals[0];
            let expect = mat_vec(&r, n0);
            assert!((norm(n1) - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert!((n1[j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topology_validation() {
        assert!(MeshTopology::new(vec![[0, 1, 3]], 3).is_err());
        assert!(MeshTopology::new(vec![[0, 1, 1]], 3).is_err());
        let tet = MeshTopology::new(vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]], 4).unwrap();
        assert!(tet.is_watertight());
    }

    #[test]
    fn regressor_special_rows() {
        let mut rng = Rng::new(1);
        let verts = rng.normal_points(5);
        let mut w = vec![0.0; 10];
        w[3] = 1.0;
        for v in &mut w[5..] {
            *v = 0.2;
        }
        let reg = JointRegressor::new(Tensor::new(&[2, 5], w).unwrap()).unwrap();
        let j = reg.regress(&verts).unwrap();
        assert_eq!(j[0], verts[3]);
        let c = centroid(&verts);
        for k in 0..3 {
            assert!((j[1][k] - c[k]).abs() < 1e-15);
        }
        let shifted: Vec<Point> = verts.iter().map(|v| [v[0] + 2.0, v[1] - 1.0, v[2] + 0.5]).collect();
        let js = reg.regress(&shifted).unwrap();
        for (a, b) in js.iter().zip(&j) {
            assert!((a[0] - b[0] - 2.0).abs() < 1e-12);
            assert!((a[1] - b[1] + 1.0).abs() < 1e-12);
            assert!((a[2] - b[2] - 0.5).abs() < 1e-12);
        }
        assert!(reg.regress(&verts[..4]).is_err());
        assert!(JointRegressor::new(Tensor::new(&[1, 2], vec![0.7, 0.2]).unwrap()).is_err());
        assert!(JointRegressor::new(Tensor::new(&[1, 2], vec![1.5, -0.5]).unwrap()).is_err());
    }

    #[test]
    fn projection_cases() {
        let cam = Camera::new(100.0, 100.0, 16.0, 16.0).unwrap();
        let uv = project(&[[0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [0.1, 0.0, 2.0]], &cam).unwrap();
        assert_eq!(uv[0], [16.0, 16.0]);
        assert!((uv[1][0] - 26.0).abs() < 1e-12 && uv[1][1] == 16.0);
        assert!(((uv[2][0] - 16.0) - (uv[1][0] - 16.0) / 2.0).abs() < 1e-12);
        match project(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], &cam) {
            Err(Error::Projection { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let mut a = [[0.0; 3]; 3];
            a.iter_mut().flatten().for_each(|v| *v = rng.normal());
            let (u, s, v) = svd3(&a);
            assert!(s[0] >= s[1] && s[1] >= s[2] && s[2] >= 0.0);
            let mut us = u;
            for row in us.iter_mut() {
                for j in 0..3 {
                    row[j] *= s[j];
                }
            }
            let back = mat_mul(&us, &transpose(&v));
            for i in 0..3 {
                for j in 0..3 {
                    assert!((back[i][j] - a[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn procrustes_identity_and_recovery() {
        let mut rng = Rng::new(21);
        let gt = rng.normal_points(30);
        let id = procrustes(&gt, &gt).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!(id.translation[i].abs() < 1e-12);
            for j in 0..3 {
                assert!((id.rotation[i][j] - IDENTITY[i][j]).abs() < 1e-12);
            }
        }
        let r = random_rotation(&mut rng);
        let moved: Vec<Point> = gt
            .iter()
            .map(|p| {
                let q = mat_vec(&r, *p);
                [1.7 * q[0] + 3.0, 1.7 * q[1] - 1.0, 1.7 * q[2] + 0.25]
            })
            .collect();
        let aligned = procrustes_align(&moved, &gt).unwrap();
        assert!(mean_distance(&aligned, &gt) < 1e-9);
    }

    #[test]
    fn procrustes_rejects_reflection() {
        let mut rng = Rng::new(5);
        let gt = rng.normal_points(20);
        let mirrored: Vec<Point> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let sim = procrustes(&mirrored, &gt).unwrap();
        assert!((det(&sim.rotation) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn procrustes_degenerate_falls_back() {
        let pred = [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let gt = [[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let sim = procrustes(&pred, &gt).unwrap();
        assert!(sim.translation_only);
        // Planar but non-collinear sets are still aligned with a rotation.
        let tri = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 0.0]];
        let r = axis_angle([0.3, -0.2, 0.9], 1.1);
        let moved: Vec<Point> = tri.iter().map(|p| mat_vec(&r, *p)).collect();
        let sim = procrustes(&moved, &tri).unwrap();
        assert!(!sim.translation_only);
        assert!(mean_distance(&sim.apply(&moved), &tri) < 1e-9);
    }

    #[test]
    fn procrustes_never_worse_than_identity() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let gt = rng.normal_points(25);
            let pred: Vec<Point> = gt
                .iter()
                .map(|p| [p[0] + 0.01 * rng.normal(), p[1] + 0.01 * rng.normal(), p[2] + 0.01 * rng.normal()])
                .collect();
            let sq = |a: &[Point]| a.iter().zip(&gt).map(|(p, q)| dist2(*p, *q)).sum::<f64>();
            assert!(sq(&procrustes_align(&pred, &gt).unwrap()) <= sq(&pred) + 1e-15);
        }
    }

    fn uniform_regressor(n: usize) -> JointRegressor {
        let mut w = vec![0.0; 4 * n];
        for j in 0..4 {
            for i in 0..n {
                if i % 4 == j {
                    w[j * n + i] = 1.0;
                }
            }
            let s: f64 = w[j * n..(j + 1) * n].iter().sum();
            w[j * n..(j + 1) * n].iter_mut().for_each(|v| *v /= s);
        }
        JointRegressor::new(Tensor::new(&[4, n], w).unwrap()).unwrap()
    }

    #[test]
    fn metric_examples() {
        let mut rng = Rng::new(3);
        let gt = rng.normal_points(24);
        let w = uniform_regressor(24);
        let m = metrics(&gt, &gt, &w).unwrap();
        assert!(m.e_j == 0.0 && m.e_v == 0.0);
        assert!(m.e_pj < 1e-12 && m.e_pv < 1e-12);
        let shifted: Vec<Point> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]).collect();
        let m = metrics(&shifted, &gt, &w).unwrap();
        assert!((m.e_v - 5.0).abs() < 1e-12 && (m.e_j - 5.0).abs() < 1e-12);
        assert!(m.e_pv < 1e-12 && m.e_pj < 1e-12);
        let centered = root_relative(&gt, &w).unwrap();
        let scaled: Vec<Point> = centered.iter().map(|p| p.map(|v| 1.1 * v)).collect();
        let m = metrics(&scaled, &centered, &w).unwrap();
        assert!(m.e_pv < 1e-12 && m.e_v > 0.0);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-0.5), "-0.5");
        assert_eq!(fmt_sig9(0.123456789123), "0.123456789");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(1.5e-7), "1.5e-07");
        assert_eq!(fmt_sig9(2.0e12), "2e+12");
    }

    #[test]
    fn obj_round_trip() {
        let mut rng = Rng::new(6);
        let verts = rng.normal_points(4);
        let topo = MeshTopology::new(vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]], 4).unwrap();
        let text = to_obj(&verts, &topo);
        let (v2, f2) = parse_obj(&text).unwrap();
        assert_eq!(f2, topo.faces());
        assert_eq!(v2, verts);
        assert_eq!(to_obj(&v2, &topo), text);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }
}
