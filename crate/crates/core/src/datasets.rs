//! Procedural stand-in for a multi-finger grasp dataset.
//!
//! Objects come from five parametric shape families. Each grasp pairs a hand
//! pose looking at the object with a 12-D joint vector built from a smooth
//! function of the object's normalized shape and the pose, plus one of `M`
//! discrete offsets on a single joint (the grasp "mode") and Gaussian noise.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grasphead::{HandPose, JointLimits, JointVector, NUM_JOINTS};
use crate::pointops::{self, norm, Point, PointCloud, TriMesh};
use crate::{rng, Error};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRASPS_FILE: &str = "grasps.csv";
pub const CLOUD_DIR: &str = "clouds";
pub const MIN_QUALITY: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Box,
    Ellipsoid,
    Cylinder,
    Torus,
    Cone,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Box, Family::Ellipsoid, Family::Cylinder, Family::Torus, Family::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Ellipsoid => "ellipsoid",
            Family::Cylinder => "cylinder",
            Family::Torus => "torus",
            Family::Cone => "cone",
        }
    }

    fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).expect("listed family")
    }

    /// Random raw dimensions for one object of this family.
    fn sample_dims<R: Rng>(self, rng: &mut R) -> [f64; 3] {
        match self {
            Family::Box | Family::Ellipsoid => [0; 3].map(|_| rng.gen_range(0.3..1.0)),
            Family::Cylinder | Family::Cone => [rng.gen_range(0.25..0.9), rng.gen_range(0.3..1.0), 0.0],
            Family::Torus => [rng.gen_range(0.5..0.9), rng.gen_range(0.1..0.35), 0.0],
        }
    }

    pub fn mesh(self, dims: [f64; 3]) -> TriMesh {
        const SEG: usize = 24;
        const RINGS: usize = 12;
        let mut m = TriMesh::default();
        match self {
            Family::Box => {
                let [a, b, c] = dims;
                for i in 0..8 {
                    let s = |bit: usize, v: f64| if i & bit != 0 { v } else { -v };
                    m.vertices.push([s(1, a), s(2, b), s(4, c)]);
                }
                let quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
                for q in quads {
                    m.triangles.push([q[0], q[1], q[2]]);
                    m.triangles.push([q[0], q[2], q[3]]);
                }
            }
            Family::Ellipsoid => {
                let [a, b, c] = dims;
                m.vertices.push([0.0, 0.0, c]);
                for r in 1..RINGS {
                    let th = PI * r as f64 / RINGS as f64;
                    for s in 0..SEG {
                        let ph = TAU * s as f64 / SEG as f64;
                        m.vertices.push([a * th.sin() * ph.cos(), b * th.sin() * ph.sin(), c * th.cos()]);
                    }
                }
                m.vertices.push([0.0, 0.0, -c]);
                let bottom = m.vertices.len() - 1;
                let ring = |r: usize, s: usize| 1 + (r - 1) * SEG + s % SEG;
                for s in 0..SEG {
                    m.triangles.push([0, ring(1, s), ring(1, s + 1)]);
                    m.triangles.push([bottom, ring(RINGS - 1, s + 1), ring(RINGS - 1, s)]);
                }
                for r in 1..RINGS - 1 {
                    for s in 0..SEG {
                        m.triangles.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
                        m.triangles.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
                    }
                }
            }
            Family::Cylinder | Family::Cone => {
                let (radius, h) = (dims[0], dims[1]);
                let top_r = if self == Family::Cone { 0.0 } else { radius };
                // bottom ring, top ring, bottom center, top center
                for z in [-h, h] {
                    let r = if z > 0.0 { top_r } else { radius };
                    for s in 0..SEG {
                        let ph = TAU * s as f64 / SEG as f64;
                        m.vertices.push([r * ph.cos(), r * ph.sin(), z]);
                    }
                }
                m.vertices.push([0.0, 0.0, -h]);
                m.vertices.push([0.0, 0.0, h]);
                let (bc, tc) = (2 * SEG, 2 * SEG + 1);
                for s in 0..SEG {
                    let (b0, b1, t0, t1) = (s, (s + 1) % SEG, SEG + s, SEG + (s + 1) % SEG);
                    m.triangles.push([b0, b1, t1]);
                    m.triangles.push([b0, t1, t0]);
                    m.triangles.push([bc, b1, b0]);
                    m.triangles.push([tc, t0, t1]);
                }
            }
            Family::Torus => {
                let (big, small) = (dims[0], dims[1]);
                for i in 0..SEG {
                    let u = TAU * i as f64 / SEG as f64;
                    for j in 0..RINGS {
                        let v = TAU * j as f64 / RINGS as f64;
                        let rr = big + small * v.cos();
                        m.vertices.push([rr * u.cos(), rr * u.sin(), small * v.sin()]);
                    }
                }
                let idx = |i: usize, j: usize| (i % SEG) * RINGS + j % RINGS;
                for i in 0..SEG {
                    for j in 0..RINGS {
                        m.triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                        m.triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
                    }
                }
            }
        }
        m
    }

    /// Support function `max_{p in shape} <p, x>` of the raw (unnormalized) shape.
    fn support(self, dims: [f64; 3], x: Point) -> f64 {
        let radial = (x[0] * x[0] + x[1] * x[1]).sqrt();
        match self {
            Family::Box => dims[0] * x[0].abs() + dims[1] * x[1].abs() + dims[2] * x[2].abs(),
            Family::Ellipsoid => {
                ((dims[0] * x[0]).powi(2) + (dims[1] * x[1]).powi(2) + (dims[2] * x[2]).powi(2)).sqrt()
            }
            Family::Cylinder => dims[0] * radial + dims[1] * x[2].abs(),
            Family::Torus => dims[0] * radial + dims[1] * norm(x),
            Family::Cone => (dims[1] * x[2]).max(dims[0] * radial - dims[1] * x[2]),
        }
    }
}

/// Shape parameters plus the normalization applied to the sampled cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub family: Family,
    pub dims: [f64; 3],
    pub center: Point,
    pub scale: f64,
}

impl ObjectShape {
    /// Support function of the shape in the normalized cloud frame.
    pub fn support(&self, x: Point) -> f64 {
        let shift = self.center[0] * x[0] + self.center[1] * x[1] + self.center[2] * x[2];
        (self.family.support(self.dims, x) - shift) / self.scale
    }

    pub fn width(&self, x: Point) -> f64 {
        self.support(x) + self.support(x.map(|v| -v))
    }
}

pub const DESCRIPTOR_DIM: usize = 4 + Family::ALL.len();

/// Pose-conditioned shape quantities the joint map is built from: closing
/// width, lateral width, approach depth, hand distance, then a family one-hot.
pub fn oracle_descriptor(shape: &ObjectShape, pose: &HandPose) -> [f64; DESCRIPTOR_DIM] {
    let [hx, hy, hz] = pose.axes();
    let mut d = [0.0; DESCRIPTOR_DIM];
    d[0] = shape.width(hx);
    d[1] = shape.width(hy);
    d[2] = shape.support(hz.map(|v| -v));
    d[3] = norm(pose.translation);
    d[4 + shape.family.index()] = 1.0;
    d
}

/// Smooth pose-and-shape to joint map the labels are built from (before modes and noise).
pub fn joint_function(shape: &ObjectShape, pose: &HandPose) -> JointVector {
    let [closing, lateral, depth, dist, ..] = oracle_descriptor(shape, pose);
    let fam = shape.family.index() as f64;
    let closure = (1.2 * (1.0 - closing)).tanh();
    let mut j = [0.0; NUM_JOINTS];
    for (idx, v) in j.iter_mut().enumerate() {
        let (finger, phalanx) = ((idx / 3) as f64, (idx % 3) as f64);
        let raw = 0.6 * closure * (1.0 + 0.25 * phalanx)
            + 0.25 * (2.5 * depth + 0.9 * finger + 0.6 * phalanx + 1.3 * fam).sin()
            + 0.15 * (lateral - 1.0) * (0.7 * finger + phalanx).cos()
            + 0.2 * (dist - 1.5) * (phalanx - 1.0)
            + 0.05 * (fam - 2.0);
        *v = 1.1 * (raw / 1.1).tanh();
    }
    j
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub categories: usize,
    pub objects_per_category: usize,
    pub samples_per_object: usize,
    pub seed: u64,
    pub cloud_size: usize,
    pub num_modes: usize,
    /// Spacing between adjacent mode offsets on `mode_joint`, radians.
    pub mode_gap: f64,
    pub mode_joint: usize,
    pub noise: f64,
    /// Fraction of grasps given a quality score below the filter threshold.
    pub low_quality_fraction: f64,
    pub limits: JointLimits,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            categories: 5,
            objects_per_category: 20,
            samples_per_object: 60,
            seed: 0,
            cloud_size: 1024,
            num_modes: 2,
            mode_gap: 0.8,
            mode_joint: 0,
            noise: 0.02,
            low_quality_fraction: 0.2,
            limits: JointLimits::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.categories < 2 || self.objects_per_category < 2 || self.samples_per_object < 1 {
            return Err(Error::Config("need >= 2 categories, >= 2 objects per category, >= 1 sample".into()));
        }
        if self.num_modes == 0 || self.mode_joint >= NUM_JOINTS || self.cloud_size == 0 {
            return Err(Error::Config("num_modes, cloud_size must be >= 1 and mode_joint < 12".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.low_quality_fraction) {
            return Err(Error::Config("noise must be >= 0 and low_quality_fraction in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mode_offset(&self, mode: usize) -> f64 {
        self.mode_gap * (mode as f64 - (self.num_modes as f64 - 1.0) / 2.0)
    }

    pub fn family_of(&self, category: usize) -> Family {
        Family::ALL[category % Family::ALL.len()]
    }

    pub fn category_id(&self, category: usize) -> String {
        let f = self.family_of(category).name();
        match category / Family::ALL.len() {
            0 => f.to_string(),
            n => format!("{f}{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub object_id: String,
    pub category_id: String,
    pub cloud_file: String,
    pub shape: ObjectShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    /// `(category_id, object count)` in category order.
    pub categories: Vec<(String, usize)>,
    pub objects: Vec<ObjectEntry>,
    pub samples_per_object: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn object(&self, id: &str) -> Option<&ObjectEntry> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    /// Object ids grouped by category, both in manifest order.
    pub fn objects_by_category(&self) -> Vec<(String, Vec<String>)> {
        self.categories
            .iter()
            .map(|(c, _)| {
                let ids = self.objects.iter().filter(|o| &o.category_id == c).map(|o| o.object_id.clone()).collect();
                (c.clone(), ids)
            })
            .collect()
    }

    pub fn validate_counts(&self) -> Result<(), Error> {
        for (c, n) in &self.categories {
            let found = self.objects.iter().filter(|o| &o.category_id == c).count();
            if found != *n {
                return Err(Error::Format(format!("category {c} lists {n} objects, manifest has {found}")));
            }
        }
        if self.objects.iter().any(|o| !self.categories.iter().any(|(c, _)| c == &o.category_id)) {
            return Err(Error::Format("object references an unknown category".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspSample {
    pub object_id: String,
    pub category_id: String,
    pub pose: HandPose,
    pub joints: JointVector,
    pub quality: f64,
    /// Generator ground truth; never shown to models.
    pub mode_id: usize,
}

/// Keeps samples with `quality >= min_score`, in order.
pub fn filter_quality(samples: Vec<GraspSample>, min_score: f64) -> Vec<GraspSample> {
    samples.into_iter().filter(|s| !(s.quality < min_score)).collect()
}

/// Hand on a sphere around the object, approach axis pointing at the origin,
/// random roll about that axis.
pub fn sample_pose<R: Rng>(rng: &mut R) -> HandPose {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..TAU);
    let s = (1.0 - z * z).sqrt();
    let u = [s * phi.cos(), s * phi.sin(), z];
    let dist: f64 = rng.gen_range(1.2..1.8);
    let roll: f64 = rng.gen_range(0.0..TAU);
    let hz = u.map(|v| -v);
    // any unit vector orthogonal to hz
    let helper = if hz[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = normalize(cross(helper, hz));
    let e2 = cross(hz, e1);
    let hx = [0, 1, 2].map(|d| roll.cos() * e1[d] + roll.sin() * e2[d]);
    let hy = cross(hz, hx);
    let q = quat_from_axes(hx, hy, hz);
    HandPose::new(u.map(|v| v * dist), q).expect("unit rotation")
}

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Point) -> Point {
    let n = norm(a);
    a.map(|v| v / n)
}

/// Quaternion `(w, x, y, z)` of the rotation whose columns are `x, y, z`.
fn quat_from_axes(x: Point, y: Point, z: Point) -> [f64; 4] {
    let (m00, m11, m22) = (x[0], y[1], z[2]);
    let tr = m00 + m11 + m22;
    let (m01, m02, m10, m12, m20, m21) = (y[0], z[0], x[1], z[1], x[2], y[2]);
    if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s]
    } else if m00 > m11 && m00 > m22 {
        let s = (1.0 + m00 - m11 - m22).sqrt() * 2.0;
        [(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s]
    } else if m11 > m22 {
        let s = (1.0 + m11 - m00 - m22).sqrt() * 2.0;
        [(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s]
    } else {
        let s = (1.0 + m22 - m00 - m11).sqrt() * 2.0;
        [(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s]
    }
}

/// One generated object with its cloud and grasps.
#[derive(Clone, Debug)]
pub struct GeneratedObject {
    pub entry: ObjectEntry,
    pub cloud: PointCloud,
    pub samples: Vec<GraspSample>,
}

fn generate_object(cfg: &GeneratorConfig, category: usize, index: usize) -> Result<GeneratedObject, Error> {
    let family = cfg.family_of(category);
    let category_id = cfg.category_id(category);
    let object_id = format!("{category_id}_{index:04}");
    let mut r = rng::stream(cfg.seed, &[category as u64, index as u64]);
    let dims = family.sample_dims(&mut r);
    let mesh = family.mesh(dims);
    let (cloud, center, scale) = pointops::sample_mesh_with_frame(&mesh, cfg.cloud_size, r.gen(), &object_id)?;
    let shape = ObjectShape { family, dims, center, scale };
    let samples = (0..cfg.samples_per_object)
        .map(|_| {
            let pose = sample_pose(&mut r);
            let mode_id = r.gen_range(0..cfg.num_modes);
            let mut joints = joint_function(&shape, &pose);
            joints[cfg.mode_joint] += cfg.mode_offset(mode_id);
            for j in joints.iter_mut() {
                let eps: f64 = StandardNormal.sample(&mut r);
                *j = cfg.limits.clamp(*j + cfg.noise * eps);
            }
            let quality = if r.gen::<f64>() < cfg.low_quality_fraction {
                r.gen_range(0.0..MIN_QUALITY)
            } else {
                r.gen_range(MIN_QUALITY..3.0)
            };
            GraspSample {
                object_id: object_id.clone(),
                category_id: category_id.clone(),
                pose,
                joints,
                quality,
                mode_id,
            }
        })
        .collect();
    let entry = ObjectEntry {
        object_id: object_id.clone(),
        category_id,
        cloud_file: format!("{CLOUD_DIR}/{object_id}.bin"),
        shape,
    };
    Ok(GeneratedObject { entry, cloud, samples })
}

/// Generates every object in memory, in manifest order.
pub fn generate_objects(cfg: &GeneratorConfig) -> Result<Vec<GeneratedObject>, Error> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.categories).flat_map(|c| (0..cfg.objects_per_category).map(move |i| (c, i))).collect();
    jobs.par_iter().map(|&(c, i)| generate_object(cfg, c, i)).collect()
}

pub fn manifest_for(cfg: &GeneratorConfig, objects: &[GeneratedObject]) -> DatasetManifest {
    DatasetManifest {
        format_version: FORMAT_VERSION,
        generator: cfg.clone(),
        categories: (0..cfg.categories).map(|c| (cfg.category_id(c), cfg.objects_per_category)).collect(),
        objects: objects.iter().map(|o| o.entry.clone()).collect(),
        samples_per_object: cfg.samples_per_object,
        seed: cfg.seed,
    }
}

const CSV_HEADER: &str =
    "object_id,category_id,tx,ty,tz,qw,qx,qy,qz,j0,j1,j2,j3,j4,j5,j6,j7,j8,j9,j10,j11,quality,mode_id";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `grasps.csv` and one cloud file per object under `root`.
pub fn generate_dataset(cfg: &GeneratorConfig, root: &Path) -> Result<DatasetManifest, Error> {
    let objects = generate_objects(cfg)?;
    let manifest = manifest_for(cfg, &objects);
    fs::create_dir_all(root.join(CLOUD_DIR)).map_err(|e| Error::io(root, e))?;
    for o in &objects {
        let mut buf = Vec::with_capacity(4 + 12 * o.cloud.len());
        pointops::write_cloud(&o.cloud, &mut buf).map_err(|e| Error::io(root, e))?;
        write_file(&root.join(&o.entry.cloud_file), &buf)?;
    }
    let csv_path = root.join(GRASPS_FILE);
    let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for s in objects.iter().flat_map(|o| &o.samples) {
            write!(w, "{},{}", s.object_id, s.category_id)?;
            for v in s.pose.features() {
                write!(w, ",{v}")?;
            }
            for v in s.joints {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", s.quality, s.mode_id)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(&csv_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&root.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, Error> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported format_version {other:?}, expected {FORMAT_VERSION}",
                path.display()
            )))
        }
    }
    let manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.validate_counts()?;
    Ok(manifest)
}

fn parse_sample(line: &str, lineno: usize, limits: &JointLimits) -> Result<GraspSample, Error> {
    let f: Vec<&str> = line.split(',').collect();
    let bad = |m: String| Error::Ingestion(format!("{GRASPS_FILE} line {lineno}: {m}"));
    if f.len() != 23 {
        return Err(bad(format!("expected 23 fields, found {}", f.len())));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("field {i} {:?}: {e}", f[i])));
    let translation = [num(2)?, num(3)?, num(4)?];
    let quaternion = [num(5)?, num(6)?, num(7)?, num(8)?];
    let pose = HandPose { translation, quaternion };
    pose.validate().map_err(|e| bad(e.to_string()))?;
    let mut joints = [0.0; NUM_JOINTS];
    for (d, j) in joints.iter_mut().enumerate() {
        *j = num(9 + d)?;
    }
    if !limits.contains(&joints) {
        return Err(bad("joints outside limits".into()));
    }
    let quality = num(21)?;
    if !(quality >= 0.0) {
        return Err(bad(format!("quality {quality} must be >= 0")));
    }
    let mode_id = f[22].parse().map_err(|e| bad(format!("mode_id: {e}")))?;
    Ok(GraspSample { object_id: f[0].into(), category_id: f[1].into(), pose, joints, quality, mode_id })
}

/// A dataset directory opened for reading. Clouds are loaded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// Every sample (unfiltered), ordered by object id then file order.
    pub samples: Vec<GraspSample>,
}

pub fn load_dataset(root: &Path) -> Result<Dataset, Error> {
    let manifest = read_manifest(root)?;
    for o in &manifest.objects {
        let p = root.join(&o.cloud_file);
        if !p.is_file() {
            return Err(Error::Ingestion(format!("missing cloud file {}", p.display())));
        }
    }
    let csv_path = root.join(GRASPS_FILE);
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::Ingestion(format!("{}: {e}", csv_path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", csv_path.display())));
    }
    let limits = manifest.generator.limits;
    let mut samples = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_sample(l, i + 2, &limits))
        .collect::<Result<Vec<_>, _>>()?;
    let mut known: BTreeMap<&str, &str> = BTreeMap::new();
    for o in &manifest.objects {
        known.insert(&o.object_id, &o.category_id);
    }
    for s in &samples {
        match known.get(s.object_id.as_str()) {
            Some(c) if *c == s.category_id => {}
            _ => return Err(Error::Ingestion(format!("sample references unknown object {}", s.object_id))),
        }
    }
    samples.sort_by(|a, b| a.object_id.cmp(&b.object_id));
    Ok(Dataset { root: root.to_path_buf(), manifest, samples })
}

impl Dataset {
    pub fn load_cloud(&self, object_id: &str) -> Result<PointCloud, Error> {
        let entry =
            self.manifest.object(object_id).ok_or_else(|| Error::Ingestion(format!("unknown object {object_id}")))?;
        let cloud = pointops::load_cloud_file(&self.root.join(&entry.cloud_file), object_id)?;
        cloud.validate(self.manifest.generator.cloud_size)?;
        Ok(cloud)
    }

    /// `(cloud, sample)` pairs in `(object_id, sample index)` order, loading each
    /// cloud once when its first sample is reached.
    pub fn iter(&self) -> impl Iterator<Item = Result<(PointCloud, GraspSample), Error>> + '_ {
        let mut current: Option<PointCloud> = None;
        self.samples.iter().map(move |s| {
            if current.as_ref().is_none_or(|c| c.object_id != s.object_id) {
                current = Some(self.load_cloud(&s.object_id)?);
            }
            Ok((current.clone().expect("cloud loaded"), s.clone()))
        })
    }

    pub fn samples_for<'a>(&'a self, object_ids: &'a [String]) -> impl Iterator<Item = &'a GraspSample> + 'a {
        self.samples.iter().filter(move |s| object_ids.binary_search(&s.object_id).is_ok())
    }
}
