//! Synthetic articulated hand-like meshes with rendered silhouettes and
//! inverse-depth maps.
//!
//! The template is a palm ellipsoid plus five tapered, capped tubes, each a
//! separate closed surface. A sample curls each digit about three knuckles,
//! applies a global rotation, places the mesh in front of the camera and
//! rasterizes it. Sample `i` depends only on the `SyntheticSpec` and `i`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle, cross, dist2, mat_mul, mat_vec, norm, project, Camera, JointRegressor, MeshTopology,
    Point,
};
use crate::kv::KeyValues;
use crate::numcore::{Rng, Tensor};

pub const RECORD_MAGIC: &[u8; 4] = b"DMS1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RECORDS_FILE: &str = "records.bin";
pub const MANIFEST_VERSION: u32 = 1;
/// Stored depth is `DEPTH_REF / z`, zero on background.
pub const DEPTH_REF: f64 = 2.0;
/// Smallest supported vertex count. A few counts just above it have no
/// exact layout and are rejected.
pub const MIN_VERTICES: usize = 64;
const JOINT_SIGMA: f64 = 0.06;
const SCALE_MARGIN: f64 = 1.05;
const KNUCKLES: [f64; 3] = [0.0, 1.0 / 3.0, 2.0 / 3.0];
const CURL_SHARE: [f64; 3] = [0.4, 0.35, 0.25];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub sample_count: usize,
    pub vertex_count: usize,
    pub joint_count: usize,
    pub image_size: usize,
    /// Maximum total curl per digit, radians.
    pub curl_max: f64,
    /// Each global Euler angle is drawn from `[-rotation_range, rotation_range]`.
    pub rotation_range: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Lateral offset range of the palm centre, length units.
    pub shift: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_size(7, 2560, 320, 16, 32)
    }
}

impl SyntheticSpec {
    /// Default pose ranges with the camera scaled to the image side.
    pub fn with_size(seed: u64, samples: usize, n: usize, m: usize, h: usize) -> Self {
        let f = 60.0 * h as f64 / 32.0;
        Self {
            seed,
            sample_count: samples,
            vertex_count: n,
            joint_count: m,
            image_size: h,
            curl_max: 1.2,
            rotation_range: 0.5,
            depth_min: 2.8,
            depth_max: 3.2,
            shift: 0.1,
            fx: f,
            fy: f,
            cx: h as f64 / 2.0,
            cy: h as f64 / 2.0,
            train_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sample_count == 0 {
            return fail("sample_count must be positive".into());
        }
        if self.vertex_count < MIN_VERTICES {
            return fail(format!("vertex_count must be at least {MIN_VERTICES}, got {}", self.vertex_count));
        }
        if self.joint_count < 6 {
            return fail(format!("joint_count must be at least 6, got {}", self.joint_count));
        }
        if self.image_size < 8 {
            return fail(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if !(self.depth_min > 0.0 && self.depth_max >= self.depth_min) {
            return fail(format!("bad depth range {}..{}", self.depth_min, self.depth_max));
        }
        if !(self.curl_max >= 0.0 && self.rotation_range >= 0.0 && self.shift >= 0.0) {
            return fail("pose ranges must be non-negative".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return fail(format!("train_fraction must be in (0, 1], got {}", self.train_fraction));
        }
        Camera::new(self.fx, self.fy, self.cx, self.cy)?;
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }

    /// First test index; samples below it form the training split.
    pub fn train_end(&self) -> usize {
        ((self.sample_count as f64 * self.train_fraction).round() as usize).clamp(1, self.sample_count)
    }

    pub const KEYS: [&'static str; 15] = [
        "seed",
        "sample_count",
        "vertex_count",
        "joint_count",
        "image_size",
        "curl_max",
        "rotation_range",
        "depth_min",
        "depth_max",
        "shift",
        "fx",
        "fy",
        "cx",
        "cy",
        "train_fraction",
    ];

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("sample_count", self.sample_count);
        kv.set("vertex_count", self.vertex_count);
        kv.set("joint_count", self.joint_count);
        kv.set("image_size", self.image_size);
        // `{:?}` prints the shortest representation that parses back exactly.
        for (k, v) in [
            ("curl_max", self.curl_max),
            ("rotation_range", self.rotation_range),
            ("depth_min", self.depth_min),
            ("depth_max", self.depth_max),
            ("shift", self.shift),
            ("fx", self.fx),
            ("fy", self.fy),
            ("cx", self.cx),
            ("cy", self.cy),
            ("train_fraction", self.train_fraction),
        ] {
            kv.set(k, format!("{v:?}"));
        }
        kv
    }

    /// Reads spec keys, taking unspecified values from the default spec
    /// at the given image size (camera intrinsics follow the image size).
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let base = Self::default();
        let h = kv.get_or("image_size", base.image_size)?;
        let d = Self::with_size(base.seed, base.sample_count, base.vertex_count, base.joint_count, h);
        let spec = Self {
            seed: kv.get_or("seed", d.seed)?,
            sample_count: kv.get_or("sample_count", d.sample_count)?,
            vertex_count: kv.get_or("vertex_count", d.vertex_count)?,
            joint_count: kv.get_or("joint_count", d.joint_count)?,
            image_size: h,
            curl_max: kv.get_or("curl_max", d.curl_max)?,
            rotation_range: kv.get_or("rotation_range", d.rotation_range)?,
            depth_min: kv.get_or("depth_min", d.depth_min)?,
            depth_max: kv.get_or("depth_max", d.depth_max)?,
            shift: kv.get_or("shift", d.shift)?,
            fx: kv.get_or("fx", d.fx)?,
            fy: kv.get_or("fy", d.fy)?,
            cx: kv.get_or("cx", d.cx)?,
            cy: kv.get_or("cy", d.cy)?,
            train_fraction: kv.get_or("train_fraction", d.train_fraction)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Template

/// One rest-pose digit: a chain along `dir` from `base`, bending about `hinge`.
#[derive(Clone, Debug, PartialEq)]
pub struct Digit {
    pub base: Point,
    pub dir: Point,
    pub hinge: Point,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub verts: Vec<Point>,
    pub topology: MeshTopology,
    pub regressor: JointRegressor,
    pub digits: Vec<Digit>,
    /// For each vertex: owning digit and axial position in digit lengths.
    pub vertex_digit: Vec<Option<(usize, f64)>>,
}

const PALM_AXES: Point = [0.24, 0.27, 0.09];

fn rest_digits() -> Vec<(Digit, f64)> {
    let finger = |x: f64, len: f64| {
        (
            Digit {
                base: [x, 0.22, 0.0],
                dir: [0.0, 1.0, 0.0],
                hinge: [1.0, 0.0, 0.0],
                length: len,
            },
            0.042,
        )
    };
    let t = 1.0 / (0.8f64 * 0.8 + 0.6 * 0.6).sqrt();
    let thumb_dir = [0.8 * t, 0.6 * t, 0.0];
    vec![
        (
            Digit {
                base: [0.2, -0.05, 0.0],
                dir: thumb_dir,
                hinge: cross(thumb_dir, [0.0, 0.0, 1.0]),
                length: 0.3,
            },
            0.05,
        ),
        finger(0.16, 0.30),
        finger(0.055, 0.37),
        finger(-0.055, 0.35),
        finger(-0.16, 0.29),
    ]
}

/// Ring counts of the palm and digits that add up to exactly `n` vertices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    palm_segments: usize,
    palm_rings: usize,
    digit_segments: usize,
    digit_rings: usize,
}

fn choose_layout(n: usize) -> Result<Layout> {
    let mut best: Option<(f64, Layout)> = None;
    for ds in 4..=10 {
        for dr in 2..=64 {
            let digits = 5 * (ds * dr + 2);
            if digits + 8 > n {
                break;
            }
            let palm = n - digits - 2;
            for pr in 2..=palm / 4 {
                if palm % pr != 0 {
                    continue;
                }
                let ps = palm / pr;
                // Prefer ~70% of vertices on digits and roughly square cells.
                let cost = (digits as f64 / n as f64 - 0.7).abs()
                    + 0.1 * (ps as f64 / (2.0 * pr as f64)).ln().abs()
                    + 0.1 * ((dr - 1) as f64 / (1.4 * ds as f64)).ln().abs();
                let layout = Layout {
                    palm_segments: ps,
                    palm_rings: pr,
                    digit_segments: ds,
                    digit_rings: dr,
                };
                if best.is_none_or(|(c, _)| cost < c) {
                    best = Some((cost, layout));
                }
            }
        }
    }
    best.map(|(_, l)| l)
        .ok_or_else(|| Error::Config(format!("no closed template layout has exactly {n} vertices")))
}

/// Faces closing a stack of rings between two pole vertices.
fn ring_faces(base: usize, rings: usize, seg: usize) -> Vec<[usize; 3]> {
    let ring = |r: usize, s: usize| base + 1 + r * seg + s % seg;
    let (pa, pb) = (base, base + 1 + rings * seg);
    let mut faces = Vec::new();
    for s in 0..seg {
        faces.push([pa, ring(0, s + 1), ring(0, s)]);
    }
    for r in 0..rings - 1 {
        for s in 0..seg {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s + 1), ring(r + 1, s));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    for s in 0..seg {
        faces.push([pb, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    faces
}

fn signed_volume(verts: &[Point], faces: &[[usize; 3]]) -> f64 {
    faces
        .iter()
        .map(|f| {
            let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
            a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                + a[2] * (b[0] * c[1] - b[1] * c[0])
        })
        .sum::<f64>()
        / 6.0
}

fn orient_outward(verts: &[Point], faces: &mut [[usize; 3]]) {
    if signed_volume(verts, faces) < 0.0 {
        for f in faces.iter_mut() {
            f.swap(1, 2);
        }
    }
}

/// Builds the rest-pose template with exactly `n` vertices and `m` joints.
pub fn generate_template(n: usize, m: usize) -> Result<Template> {
    if n < MIN_VERTICES || m < 6 {
        return Err(Error::Config(format!(
            "template needs at least {MIN_VERTICES} vertices and 6 joints, got {n} and {m}"
        )));
    }
    let layout = choose_layout(n)?;
    let mut verts: Vec<Point> = Vec::with_capacity(n);
    let mut faces = Vec::new();
    let mut vertex_digit = Vec::with_capacity(n);

    // Palm: poles on the y axis.
    let (ps, pr) = (layout.palm_segments, layout.palm_rings);
    let [ax, ay, az] = PALM_AXES;
    verts.push([0.0, -ay, 0.0]);
    for r in 0..pr {
        let phi = std::f64::consts::PI * (r + 1) as f64 / (pr + 1) as f64;
        for s in 0..ps {
            let th = 2.0 * std::f64::consts::PI * s as f64 / ps as f64;
            verts.push([ax * phi.sin() * th.cos(), -ay * phi.cos(), az * phi.sin() * th.sin()]);
        }
    }
    verts.push([0.0, ay, 0.0]);
    let mut palm_faces = ring_faces(0, pr, ps);
    orient_outward(&verts, &mut palm_faces);
    faces.extend(palm_faces);
    vertex_digit.resize(verts.len(), None);
    let palm_count = verts.len();

    let (ds, dr) = (layout.digit_segments, layout.digit_rings);
    let mut digits = Vec::new();
    let mut digit_ranges = Vec::new();
    for (k, (digit, r0)) in rest_digits().into_iter().enumerate() {
        let start = verts.len();
        let side = cross(digit.dir, digit.hinge);
        let at = |u: f64| -> Point {
            [0, 1, 2].map(|i| digit.base[i] + u * digit.length * digit.dir[i])
        };
        let radius = |u: f64| r0 * (1.0 - 0.3 * u);
        let u_base = -0.5 * r0 / digit.length;
        verts.push(at(u_base));
        vertex_digit.push(Some((k, u_base)));
        for r in 0..dr {
            let u = r as f64 / (dr - 1) as f64;
            let c = at(u);
            for s in 0..ds {
                let th = 2.0 * std::f64::consts::PI * s as f64 / ds as f64;
                let (sn, cs) = th.sin_cos();
                let rr = radius(u);
                verts.push([0, 1, 2].map(|i| c[i] + rr * (cs * digit.hinge[i] + sn * side[i])));
                vertex_digit.push(Some((k, u)));
            }
        }
        let u_tip = 1.0 + 0.7 * radius(1.0) / digit.length;
        verts.push(at(u_tip));
        vertex_digit.push(Some((k, u_tip)));
        let mut df = ring_faces(start, dr, ds);
        orient_outward(&verts, &mut df);
        faces.extend(df);
        digit_ranges.push(start..verts.len());
        digits.push(digit);
    }
    debug_assert_eq!(verts.len(), n);
    let topology = MeshTopology::new(faces, n)?;

    // Joints: wrist, then per digit anchors spread from base to tip.
    let per_digit: Vec<usize> = (0..5).map(|k| (m - 1) / 5 + usize::from(k < (m - 1) % 5)).collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let kernel = |anchor: Point, range: std::ops::Range<usize>| -> Vec<f64> {
        let mut w = vec![0.0; n];
        for i in range {
            w[i] = (-dist2(verts[i], anchor) / (2.0 * JOINT_SIGMA * JOINT_SIGMA)).exp();
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    };
    rows.push(kernel([0.0, -ay, 0.0], 0..palm_count));
    for (k, digit) in digits.iter().enumerate() {
        let c = per_digit[k];
        for j in 0..c {
            let u = if c == 1 { 1.0 } else { j as f64 / (c - 1) as f64 };
            let anchor = [0, 1, 2].map(|i| digit.base[i] + u * digit.length * digit.dir[i]);
            rows.push(kernel(anchor, digit_ranges[k].clone()));
        }
    }
    let regressor = JointRegressor::new(Tensor::new(&[m, n], rows.concat())?)?;
    Ok(Template {
        verts,
        topology,
        regressor,
        digits,
        vertex_digit,
    })
}

// ---------------------------------------------------------------------------
// Posing and rendering

/// Pose parameters of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub curls: [f64; 5],
    /// Rotation about x, y, z applied in that order.
    pub euler: [f64; 3],
    pub translation: Point,
}

impl Pose {
    pub fn canonical(depth: f64) -> Self {
        Self {
            curls: [0.0; 5],
            euler: [0.0; 3],
            translation: [0.0, 0.0, depth],
        }
    }

    pub fn draw(spec: &SyntheticSpec, index: usize) -> Self {
        let mut rng = Rng::with_stream(spec.seed, index as u64);
        let curls = [0; 5].map(|_| rng.range(0.0, spec.curl_max));
        let r = spec.rotation_range;
        let euler = [0; 3].map(|_| rng.range(-r, r));
        let translation = [
            rng.range(-spec.shift, spec.shift),
            rng.range(-spec.shift, spec.shift),
            rng.range(spec.depth_min, spec.depth_max),
        ];
        Self {
            curls,
            euler,
            translation,
        }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let rx = axis_angle([1.0, 0.0, 0.0], self.euler[0]);
        let ry = axis_angle([0.0, 1.0, 0.0], self.euler[1]);
        let rz = axis_angle([0.0, 0.0, 1.0], self.euler[2]);
        mat_mul(&rz, &mat_mul(&ry, &rx))
    }
}

/// Camera-frame vertices of the template under `pose`.
pub fn pose_vertices(template: &Template, pose: &Pose) -> Vec<Point> {
    let rot = pose.rotation();
    let bends: Vec<[([[f64; 3]; 3], Point, f64); 3]> = template
        .digits
        .iter()
        .zip(pose.curls)
        .map(|(d, curl)| {
            [0, 1, 2].map(|k| {
                let u = KNUCKLES[k];
                let pivot = [0, 1, 2].map(|i| d.base[i] + u * d.length * d.dir[i]);
                (axis_angle(d.hinge, curl * CURL_SHARE[k]), pivot, u)
            })
        })
        .collect();
    template
        .verts
        .iter()
        .zip(&template.vertex_digit)
        .map(|(&v, owner)| {
            let mut p = v;
            if let Some((k, u)) = *owner {
                // Distal knuckle first, pivots at rest positions.
                for (r, pivot, uk) in bends[k].iter().rev() {
                    if u > *uk {
                        let q = mat_vec(r, [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]]);
                        p = [q[0] + pivot[0], q[1] + pivot[1], q[2] + pivot[2]];
                    }
                }
            }
            let q = mat_vec(&rot, p);
            [0, 1, 2].map(|i| q[i] + pose.translation[i])
        })
        .collect()
}

/// Silhouette and inverse-depth rasters, row-major, pixel centres at
/// `(col + 0.5, row + 0.5)`.
pub fn rasterize(verts: &[Point], topo: &MeshTopology, cam: &Camera, h: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let uv = project(verts, cam)?;
    let mut inv_z = vec![0.0f64; h * h];
    for f in topo.faces() {
        let p = f.map(|i| uv[i]);
        let w = f.map(|i| 1.0 / verts[i][2]);
        let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        if area == 0.0 {
            continue;
        }
        let lo = |k: usize| p.iter().map(|q| q[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| p.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max);
        let c0 = (lo(0) - 0.5).ceil().max(0.0) as usize;
        let r0 = (lo(1) - 0.5).ceil().max(0.0) as usize;
        let c1 = (hi(0) - 0.5).floor().min(h as f64 - 1.0);
        let r1 = (hi(1) - 0.5).floor().min(h as f64 - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let l0 = edge(p[1], p[2]) / area;
                let l1 = edge(p[2], p[0]) / area;
                let l2 = edge(p[0], p[1]) / area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                // 1/z is affine in screen space.
                let iz = l0 * w[0] + l1 * w[1] + l2 * w[2];
                let px = &mut inv_z[row * h + col];
                if iz > *px {
                    *px = iz;
                }
            }
        }
    }
    let image = inv_z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let depth = inv_z.iter().map(|&v| (DEPTH_REF * v) as f32).collect();
    Ok((image, depth))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
    pub verts: Vec<Point>,
    pub joints3d: Vec<Point>,
    pub joints2d: Vec<[f64; 2]>,
    pub camera: Camera,
}

impl Sample {
    pub fn image_tensor(&self) -> Tensor {
        let n = self.image.len();
        Tensor::new(&[n, 1], self.image.iter().map(|&v| v as f64).collect()).unwrap()
    }

    pub fn depth_tensor(&self) -> Tensor {
        let n = self.depth.len();
        Tensor::new(&[n, 1], self.depth.iter().map(|&v| v as f64).collect()).unwrap()
    }

    /// Root joint (joint 0).
    pub fn root(&self) -> Point {
        self.joints3d[0]
    }

    /// Root-centred vertices divided by `scale`.
    pub fn normalized(&self, scale: f64) -> Vec<Point> {
        let r = self.root();
        self.verts.iter().map(|v| [0, 1, 2].map(|i| (v[i] - r[i]) / scale)).collect()
    }

    /// Inverse of [`normalized`](Self::normalized) about this sample's root.
    pub fn denormalize(&self, coords: &[Point], scale: f64) -> Vec<Point> {
        let r = self.root();
        coords.iter().map(|v| [0, 1, 2].map(|i| v[i] * scale + r[i])).collect()
    }
}

pub fn render_sample(template: &Template, spec: &SyntheticSpec, index: usize, pose: &Pose) -> Result<Sample> {
    let cam = spec.camera();
    let verts = pose_vertices(template, pose);
    let joints3d = template.regressor.regress(&verts)?;
    let joints2d = project(&joints3d, &cam)?;
    let (image, depth) = rasterize(&verts, &template.topology, &cam, spec.image_size)?;
    Ok(Sample {
        index: index as u64,
        image,
        depth,
        verts,
        joints3d,
        joints2d,
        camera: cam,
    })
}

pub fn pose_sample(template: &Template, spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    if index >= spec.sample_count {
        return Err(Error::Config(format!(
            "sample index {index} out of range for {} samples",
            spec.sample_count
        )));
    }
    render_sample(template, spec, index, &Pose::draw(spec, index))
}

// ---------------------------------------------------------------------------
// Dataset files

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub template: Template,
    /// Normalization constant: root-centred coordinates divided by it lie
    /// in `[-1, 1]`.
    pub scale: f64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let template = generate_template(spec.vertex_count, spec.joint_count)?;
        let samples = (0..spec.sample_count)
            .map(|i| pose_sample(&template, spec, i))
            .collect::<Result<Vec<_>>>()?;
        let scale = SCALE_MARGIN * max_root_extent(&samples);
        Ok(Self {
            spec: spec.clone(),
            template,
            scale,
            samples,
        })
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.spec.train_end()]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.spec.train_end()..]
    }

    pub fn manifest(&self, records_sha256: &str) -> String {
        let mut kv = self.spec.to_kv();
        kv.set("version", MANIFEST_VERSION);
        kv.set("scale", format!("{:?}", self.scale));
        kv.set("train_begin", 0);
        kv.set("train_end", self.spec.train_end());
        kv.set("test_end", self.spec.sample_count);
        kv.set("records_sha256", records_sha256);
        kv.to_text()
    }

    pub fn record_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * record_len(&self.spec));
        for s in &self.samples {
            write_record(&mut out, s);
        }
        out
    }

    /// Writes `manifest.txt` and `records.bin` into `dir` (created if
    /// missing). Returns the SHA-256 of the record file.
    pub fn write(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let records = self.record_bytes();
        let digest = hex_sha256(&records);
        write_atomic(&dir.join(RECORDS_FILE), &records)?;
        write_atomic(&dir.join(MANIFEST_FILE), self.manifest(&digest).as_bytes())?;
        Ok(digest)
    }

    /// Reads a dataset; with `expected` set, its vertex/joint/image sizes must
    /// match the stored spec.
    pub fn read(dir: &Path, expected: Option<&SyntheticSpec>) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let kv = KeyValues::parse(&fs::read_to_string(&mpath)?)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        let version: u32 = kv.require("version")?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(&mpath, format!("unsupported version {version}")));
        }
        let mut spec_kv = KeyValues::new();
        for k in SyntheticSpec::KEYS {
            spec_kv.set(k, kv.require::<String>(k)?);
        }
        let spec = SyntheticSpec::from_kv(&spec_kv)?;
        if let Some(exp) = expected {
            let got = [spec.vertex_count, spec.joint_count, spec.image_size];
            let want = [exp.vertex_count, exp.joint_count, exp.image_size];
            if got != want {
                return Err(Error::shape("read_dataset", &got, &want));
            }
        }
        let scale: f64 = kv.require("scale")?;
        let rpath = dir.join(RECORDS_FILE);
        let bytes = fs::read(&rpath)?;
        let rl = record_len(&spec);
        if bytes.len() != rl * spec.sample_count {
            return Err(Error::format(
                &rpath,
                format!("expected {} bytes, found {} (truncated or wrong spec)", rl * spec.sample_count, bytes.len()),
            ));
        }
        let digest: String = kv.require("records_sha256")?;
        if hex_sha256(&bytes) != digest {
            return Err(Error::format(&rpath, "checksum mismatch"));
        }
        let samples = bytes
            .chunks_exact(rl)
            .map(|c| parse_record(c, &spec).map_err(|m| Error::format(&rpath, m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            template: generate_template(spec.vertex_count, spec.joint_count)?,
            spec,
            scale,
            samples,
        })
    }
}

fn max_root_extent(samples: &[Sample]) -> f64 {
    samples
        .iter()
        .flat_map(|s| {
            let r = s.root();
            s.verts.iter().map(move |v| (0..3).map(|i| (v[i] - r[i]).abs()).fold(0.0, f64::max))
        })
        .fold(0.0, f64::max)
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn record_len(spec: &SyntheticSpec) -> usize {
    let h2 = spec.image_size * spec.image_size;
    4 + 8 + 2 * 4 * h2 + 8 * (3 * spec.vertex_count + 3 * spec.joint_count + 2 * spec.joint_count + 4)
}

fn write_record(out: &mut Vec<u8>, s: &Sample) {
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&s.index.to_le_bytes());
    for v in s.image.iter().chain(&s.depth) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let cam = s.camera.to_array();
    let f64s = s
        .verts
        .iter()
        .flatten()
        .chain(s.joints3d.iter().flatten())
        .chain(s.joints2d.iter().flatten())
        .chain(cam.iter());
    for v in f64s {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_record(b: &[u8], spec: &SyntheticSpec) -> std::result::Result<Sample, String> {
    if &b[..4] != RECORD_MAGIC {
        return Err("bad record magic".into());
    }
    let index = u64::from_le_bytes(b[4..12].try_into().unwrap());
    let h2 = spec.image_size * spec.image_size;
    let mut pos = 12;
    let mut f32s = |n: usize| -> Vec<f32> {
        let v = b[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 4 * n;
        v
    };
    let image = f32s(h2);
    let depth = f32s(h2);
    let mut f64s = b[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take3 = |n: usize| -> Vec<Point> { (0..n).map(|_| [0; 3].map(|_| f64s.next().unwrap())).collect() };
    let verts = take3(spec.vertex_count);
    let joints3d = take3(spec.joint_count);
    let joints2d = (0..spec.joint_count)
        .map(|_| [0; 2].map(|_| f64s.next().unwrap()))
        .collect();
    let c: Vec<f64> = f64s.collect();
    Ok(Sample {
        index,
        image,
        depth,
        verts,
        joints3d,
        joints2d,
        camera: Camera {
            fx: c[0],
            fy: c[1],
            cx: c[2],
            cy: c[3],
        },
    })
}

/// Axis-aligned bounding-box diagonal of a vertex set.
pub fn bbox_diagonal(verts: &[Point]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in verts {
        for i in 0..3 {
            lo[i] = lo[i].min(v[i]);
            hi[i] = hi[i].max(v[i]);
        }
    }
    norm([hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::face_normals;

    #[test]
    fn layouts_hit_exact_counts() {
        for n in [MIN_VERTICES, 66, 82, 100, 200, 320, 321, 500, 778] {
            let t = generate_template(n, 16).unwrap();
            assert_eq!(t.verts.len(), n);
            assert!(t.topology.is_watertight(), "n={n}");
        }
        assert!(generate_template(MIN_VERTICES - 1, 16).is_err());
        assert!(matches!(generate_template(65, 16), Err(Error::Config(_))));
        assert!(generate_template(320, 5).is_err());
    }

    #[test]
    fn template_faces_point_outward() {
        let t = generate_template(320, 16).unwrap();
        assert!(signed_volume(&t.verts, t.topology.faces()) > 0.0);
        let fnorm = face_normals(&t.verts, &t.topology);
        assert_eq!(fnorm.degenerate, 0);
    }

    #[test]
    fn joints_per_digit() {
        let t = generate_template(320, 21).unwrap();
        assert_eq!(t.regressor.joint_count(), 21);
        // Wrist sits at the palm pole.
        let j = t.regressor.regress(&t.verts).unwrap();
        assert!(dist2(j[0], [0.0, -PALM_AXES[1], 0.0]) < 0.01);
    }

    #[test]
    fn canonical_pose_is_visible() {
        let spec = SyntheticSpec::default();
        let t = generate_template(spec.vertex_count, spec.joint_count).unwrap();
        let s = render_sample(&t, &spec, 0, &Pose::canonical(3.0)).unwrap();
        let covered = s.image.iter().filter(|&&v| v > 0.0).count();
        assert!(covered > 50 && covered < 32 * 32 / 2, "{covered}");
        // Rest-pose vertices are just translated.
        assert_eq!(s.verts[5], [t.verts[5][0], t.verts[5][1], t.verts[5][2] + 3.0]);
    }

    #[test]
    fn curl_moves_only_its_digit() {
        let spec = SyntheticSpec::default();
        let t = generate_template(spec.vertex_count, spec.joint_count).unwrap();
        let mut pose = Pose::canonical(3.0);
        pose.curls[2] = 1.0;
        let v = pose_vertices(&t, &pose);
        let rest = pose_vertices(&t, &Pose::canonical(3.0));
        for (i, owner) in t.vertex_digit.iter().enumerate() {
            let moved = dist2(v[i], rest[i]) > 1e-20;
            match owner {
                Some((2, u)) if *u > 0.0 => assert!(moved),
                _ => assert!(!moved, "vertex {i} moved"),
            }
        }
    }

    /// Nearest positive hit of the ray `t·d` with a triangle.
    fn moller_trumbore(d: Point, a: Point, b: Point, c: Point) -> Option<f64> {
        let sub = |x: Point, y: Point| [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
        let dot = |x: Point, y: Point| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
        let (e1, e2) = (sub(b, a), sub(c, a));
        let p = cross(d, e2);
        let det = dot(e1, p);
        if det.abs() < 1e-14 {
            return None;
        }
        let s = sub([0.0; 3], a);
        let u = dot(s, p) / det;
        let q = cross(s, e1);
        let v = dot(d, q) / det;
        if u < 0.0 || v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = dot(e2, q) / det;
        (t > 0.0).then_some(t)
    }

    #[test]
    fn rasterizer_matches_ray_casting() {
        let spec = SyntheticSpec::with_size(3, 8, 320, 16, 16);
        let t = generate_template(320, 16).unwrap();
        let cam = spec.camera();
        let mut checked = 0;
        for idx in 0..8 {
            let s = pose_sample(&t, &spec, idx).unwrap();
            for row in 0..16 {
                for col in 0..16 {
                    // Ray through the pixel centre with unit z component.
                    let d = [
                        (col as f64 + 0.5 - cam.cx) / cam.fx,
                        (row as f64 + 0.5 - cam.cy) / cam.fy,
                        1.0,
                    ];
                    let hit = t
                        .topology
                        .faces()
                        .iter()
                        .filter_map(|f| moller_trumbore(d, s.verts[f[0]], s.verts[f[1]], s.verts[f[2]]))
                        .fold(f64::INFINITY, f64::min);
                    let px = row * 16 + col;
                    assert_eq!(s.image[px] == 1.0, hit.is_finite(), "sample {idx} pixel {px}");
                    if hit.is_finite() {
                        checked += 1;
                        let want = DEPTH_REF / hit;
                        assert!((s.depth[px] as f64 - want).abs() < 1e-6, "{} vs {want}", s.depth[px]);
                    } else {
                        assert_eq!(s.depth[px], 0.0);
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn sample_consistency_and_determinism() {
        let spec = SyntheticSpec { sample_count: 20, ..SyntheticSpec::default() };
        let t = generate_template(spec.vertex_count, spec.joint_count).unwrap();
        for i in 0..20 {
            let s = pose_sample(&t, &spec, i).unwrap();
            assert_eq!(s, pose_sample(&t, &spec, i).unwrap());
            let j = t.regressor.regress(&s.verts).unwrap();
            for (a, b) in j.iter().zip(&s.joints3d) {
                assert!(dist2(*a, *b).sqrt() < 1e-12);
            }
            let p = project(&s.joints3d, &s.camera).unwrap();
            for (a, b) in p.iter().zip(&s.joints2d) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
            assert!(s.verts.iter().all(|v| v[2] > 2.0 && v[2] < 4.0));
            assert!(s.image.iter().any(|&v| v == 1.0));
        }
        assert!(pose_sample(&t, &spec, 20).is_err());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(pose_sample(&t, &spec, 3).unwrap(), pose_sample(&t, &other, 3).unwrap());
    }

    #[test]
    fn normalized_coordinates_in_unit_cube() {
        let spec = SyntheticSpec { sample_count: 50, ..SyntheticSpec::default() };
        let ds = Dataset::generate(&spec).unwrap();
        for s in &ds.samples {
            let c = s.normalized(ds.scale);
            assert!(c.iter().flatten().all(|v| v.abs() <= 1.0));
            let back = s.denormalize(&c, ds.scale);
            for (a, b) in back.iter().zip(&s.verts) {
                assert!(dist2(*a, *b) < 1e-24);
            }
        }
        assert_eq!(ds.train().len(), 40);
        assert_eq!(ds.test().len(), 10);
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { sample_count: 10, ..SyntheticSpec::default() };
        let ds = Dataset::generate(&spec).unwrap();
        let digest = ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path(), Some(&spec)).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.record_bytes(), fs::read(dir.path().join(RECORDS_FILE)).unwrap());
        assert_eq!(hex_sha256(&back.record_bytes()), digest);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.manifest(&digest), manifest);
        assert!(manifest.contains("train_end=8\n"));

        let wrong_n = SyntheticSpec { vertex_count: 321, ..spec.clone() };
        assert!(matches!(Dataset::read(dir.path(), Some(&wrong_n)), Err(Error::Shape { .. })));

        let rec = dir.path().join(RECORDS_FILE);
        let bytes = fs::read(&rec).unwrap();
        fs::write(&rec, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(Dataset::read(dir.path(), None), Err(Error::Format { .. })));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        fs::write(&rec, &flipped).unwrap();
        assert!(matches!(Dataset::read(dir.path(), None), Err(Error::Format { .. })));
        fs::write(&rec, &bytes).unwrap();

        let man = dir.path().join(MANIFEST_FILE);
        fs::write(&man, manifest.replace("version=1", "version=2")).unwrap();
        assert!(matches!(Dataset::read(dir.path(), None), Err(Error::Format { .. })));
    }
}
