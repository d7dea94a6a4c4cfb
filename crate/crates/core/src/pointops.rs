//! Mesh sampling, farthest-point sampling, kNN grouping and the patch encoder.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensorcore::{Graph, ParamStore, Real, Tensor, TensorError, Var};
use crate::Error;

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub cloud_size: usize,
    pub num_groups: usize,
    pub group_size: usize,
    pub radius: f64,
    /// Hidden width of the pointwise MLP.
    pub hidden: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { cloud_size: 1024, num_groups: 64, group_size: 32, radius: 0.05, hidden: 64 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.num_groups == 0 || self.num_groups > self.cloud_size {
            return Err(Error::Config(format!("num_groups {} must be in 1..={}", self.num_groups, self.cloud_size)));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be >= 1".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be > 0, got {}", self.radius)));
        }
        Ok(())
    }
}

/// Normalized object surface samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub object_id: String,
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, expected: usize) -> Result<(), Error> {
        if self.points.len() != expected {
            return Err(Error::Ingestion(format!(
                "cloud {} has {} points, expected {expected}",
                self.object_id,
                self.points.len()
            )));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Ingestion(format!("cloud {} has non-finite coordinates", self.object_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl TriMesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Parses `v x y z` and `f i j k ...` lines; polygons become triangle fans.
    /// Face indices are 1-based and may carry `/vt/vn` suffixes or be negative.
    pub fn parse_obj(text: &str) -> Result<Self, Error> {
        let mut mesh = TriMesh::default();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let coords: Vec<f64> = it
                        .take(3)
                        .map(str::parse)
                        .collect::<Result<_, _>>()
                        .map_err(|e| Error::Ingestion(format!("line {}: {e}", lineno + 1)))?;
                    if coords.len() != 3 {
                        return Err(Error::Ingestion(format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                    }
                    mesh.vertices.push([coords[0], coords[1], coords[2]]);
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in it {
                        let raw = tok.split('/').next().unwrap_or("");
                        let i: i64 = raw.parse().map_err(|e| Error::Ingestion(format!("line {}: {e}", lineno + 1)))?;
                        let n = mesh.vertices.len() as i64;
                        let resolved = if i > 0 { i - 1 } else { n + i };
                        if i == 0 || resolved < 0 || resolved >= n {
                            return Err(Error::Ingestion(format!("line {}: face index {i} out of range", lineno + 1)));
                        }
                        idx.push(resolved as usize);
                    }
                    if idx.len() < 3 {
                        return Err(Error::Ingestion(format!("line {}: face needs 3 vertices", lineno + 1)));
                    }
                    for w in 1..idx.len() - 1 {
                        mesh.triangles.push([idx[0], idx[w], idx[w + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }
}

/// Area-weighted surface samples in mesh coordinates (no normalization).
pub fn sample_surface<R: Rng>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<Vec<Point>, Error> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Ingestion("mesh has no non-degenerate triangle".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
        let s = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push([0, 1, 2].map(|d| wa * a[d] + wb * b[d] + wc * c[d]));
    }
    Ok(out)
}

/// Centers to zero mean and scales to unit max-norm. Returns the removed mean and
/// the scale that was divided out.
pub fn normalize_points(points: &mut [Point]) -> Result<(Point, f64), Error> {
    if points.is_empty() {
        return Err(Error::Ingestion("empty cloud".into()));
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points.iter() {
        for d in 0..3 {
            mean[d] += p[d];
        }
    }
    mean = mean.map(|m| m / n);
    let mut max_norm = 0.0f64;
    for p in points.iter_mut() {
        *p = sub(*p, mean);
        max_norm = max_norm.max(norm(*p));
    }
    if !(max_norm > 0.0) {
        return Err(Error::Ingestion("cloud collapses to a single point".into()));
    }
    for p in points.iter_mut() {
        *p = p.map(|v| v / max_norm);
    }
    Ok((mean, max_norm))
}

/// Samples `n` points from `mesh` with a seeded generator and normalizes them.
pub fn sample_mesh(mesh: &TriMesh, n: usize, seed: u64, object_id: &str) -> Result<PointCloud, Error> {
    sample_mesh_with_frame(mesh, n, seed, object_id).map(|(c, _, _)| c)
}

/// [`sample_mesh`] that also returns the normalization (removed mean, scale).
pub fn sample_mesh_with_frame(
    mesh: &TriMesh,
    n: usize,
    seed: u64,
    object_id: &str,
) -> Result<(PointCloud, Point, f64), Error> {
    if n == 0 {
        return Err(Error::Config("cloud size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = sample_surface(mesh, n, &mut rng)?;
    let (mean, scale) = normalize_points(&mut points)?;
    Ok((PointCloud { object_id: object_id.to_string(), points }, mean, scale))
}

/// Index of the largest-norm point, lowest index on ties.
pub fn extreme_point(points: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if norm(*p) > norm(points[best]) {
            best = i;
        }
    }
    best
}

/// Farthest-point sampling from the extreme point.
pub fn fps(points: &[Point], k: usize) -> Result<Vec<usize>, Error> {
    if points.is_empty() {
        return Err(Error::Config("fps on an empty cloud".into()));
    }
    fps_from(points, k, extreme_point(points))
}

/// Farthest-point sampling from a given start; ties resolve to the lowest index.
pub fn fps_from(points: &[Point], k: usize, start: usize) -> Result<Vec<usize>, Error> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("fps asked for {k} of {n} points")));
    }
    if start >= n {
        return Err(Error::Config(format!("fps start {start} out of range")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start;
    for _ in 0..k {
        chosen.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = dist2(points[i], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(chosen)
}

/// Per center, the `group_size` nearest points (lowest index on distance ties);
/// members farther than `radius` are replaced by the center's own index.
/// Returns a flat `centers.len() x group_size` index list.
pub fn group_knn(points: &[Point], centers: &[usize], group_size: usize, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len() * group_size);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for &c in centers {
        order.clear();
        order.extend(points.iter().enumerate().map(|(i, p)| (dist2(*p, points[c]), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let take = group_size.min(order.len());
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, cmp);
        }
        order[..take].sort_by(cmp);
        for &(d, i) in &order[..take] {
            out.push(if d > r2 { c } else { i });
        }
        for _ in take..group_size {
            out.push(c);
        }
    }
    out
}

/// FPS centers plus kNN members of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<usize>,
    pub members: Vec<usize>,
    pub group_size: usize,
}

pub fn make_patches(cloud: &PointCloud, cfg: &TokenizerConfig) -> Result<PatchSet, Error> {
    cfg.validate()?;
    let centers = fps(&cloud.points, cfg.num_groups)?;
    let members = group_knn(&cloud.points, &centers, cfg.group_size, cfg.radius);
    Ok(PatchSet { centers, members, group_size: cfg.group_size })
}

impl PatchSet {
    /// Center-relative member coordinates as a `(G*S) x 3` tensor, patches in `order`.
    pub fn relative_coords<T: Real>(&self, cloud: &PointCloud, order: &[usize]) -> Tensor<T> {
        let s = self.group_size;
        let mut data = Vec::with_capacity(order.len() * s * 3);
        for &p in order {
            let c = cloud.points[self.centers[p]];
            for &m in &self.members[p * s..(p + 1) * s] {
                let q = sub(cloud.points[m], c);
                data.extend(q.iter().map(|&v| T::of(v)));
            }
        }
        Tensor::new(&[order.len() * s, 3], data).expect("patch coordinate shape")
    }

    pub fn center_points(&self, cloud: &PointCloud) -> Vec<Point> {
        self.centers.iter().map(|&c| cloud.points[c]).collect()
    }
}

/// Registers the shared pointwise MLP under `prefix` (3 -> hidden -> dim).
pub fn init_patch_encoder<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    hidden: usize,
    dim: usize,
    rng: &mut R,
) {
    store.insert_glorot(&format!("{prefix}.fc1.w"), 3, hidden, rng);
    store.insert_const(&format!("{prefix}.fc1.b"), &[hidden], 0.0);
    store.insert_glorot(&format!("{prefix}.fc2.w"), hidden, dim, rng);
    store.insert_const(&format!("{prefix}.fc2.b"), &[dim], 0.0);
}

/// Pointwise MLP on center-relative coordinates, then max over each patch's members.
pub fn embed_patches<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    rel: Var,
    group_size: usize,
) -> Result<Var, TensorError> {
    let w1 = g.named(store, &format!("{prefix}.fc1.w"))?;
    let b1 = g.named(store, &format!("{prefix}.fc1.b"))?;
    let w2 = g.named(store, &format!("{prefix}.fc2.w"))?;
    let b2 = g.named(store, &format!("{prefix}.fc2.b"))?;
    let h = g.matmul(rel, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w2)?;
    let h = g.add_bias(h, b2)?;
    g.max_pool_rows(h, group_size)
}

/// Cloud cache: little-endian `u32` count then `count x 3` little-endian `f32`.
pub fn write_cloud<W: Write>(cloud: &PointCloud, mut w: W) -> std::io::Result<()> {
    w.write_all(&(cloud.points.len() as u32).to_le_bytes())?;
    for p in &cloud.points {
        for v in p {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_cloud<R: Read>(mut r: R, object_id: &str) -> Result<PointCloud, Error> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Ingestion(format!("cloud {object_id}: {e}")))?;
    if bytes.len() < 4 {
        return Err(Error::Ingestion(format!("cloud {object_id}: truncated header")));
    }
    let n = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let body = &bytes[4..];
    if body.len() != n * 12 {
        return Err(Error::Ingestion(format!(
            "cloud {object_id}: expected {} bytes of points, found {}",
            n * 12,
            body.len()
        )));
    }
    let points = body
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    Ok(PointCloud { object_id: object_id.to_string(), points })
}

pub fn load_cloud_file(path: &Path, object_id: &str) -> Result<PointCloud, Error> {
    let f = std::fs::File::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    read_cloud(std::io::BufReader::new(f), object_id).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Point> {
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]
    }

    #[test]
    fn fps_square_picks_diagonal() {
        let pts = square();
        assert_eq!(fps_from(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(fps_from(&pts, 2, 1).unwrap(), vec![1, 3]);
    }

    #[test]
    fn fps_full_is_permutation() {
        let pts: Vec<Point> = (0..9).map(|i| [i as f64 * 0.3, (i * i % 5) as f64, 0.1]).collect();
        let mut sel = fps(&pts, pts.len()).unwrap();
        sel.sort();
        assert_eq!(sel, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_k_above_n() {
        assert!(matches!(fps(&square(), 5), Err(Error::Config(_))));
    }

    #[test]
    fn fps_starts_at_extreme_point() {
        let pts = vec![[0.1, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, -2.0, 0.0]];
        assert_eq!(fps(&pts, 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_single_member_is_center() {
        let pts = square();
        assert_eq!(group_knn(&pts, &[0, 2], 1, 0.05), vec![0, 2]);
    }

    #[test]
    fn knn_out_of_radius_members_become_center() {
        let pts = vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(group_knn(&pts, &[0], 4, 0.05), vec![0, 1, 0, 0]);
        assert_eq!(group_knn(&pts, &[3], 4, 0.05), vec![3, 3, 3, 3]);
    }

    #[test]
    fn obj_polygon_is_fan_triangulated() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
        let mesh = TriMesh::parse_obj(text).unwrap();
        assert_eq!(mesh.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!((mesh.triangle_area(0) + mesh.triangle_area(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn obj_bad_index_is_ingestion_error() {
        assert!(matches!(TriMesh::parse_obj("v 0 0 0\nf 1 2 3\n"), Err(Error::Ingestion(_))));
    }

    #[test]
    fn degenerate_mesh_is_rejected() {
        let mesh = TriMesh { vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], triangles: vec![[0, 1, 2]] };
        assert!(matches!(sample_mesh(&mesh, 4, 0, "x"), Err(Error::Ingestion(_))));
    }

    #[test]
    fn cloud_cache_truncation_is_error() {
        let cloud = PointCloud { object_id: "a".into(), points: vec![[1.0, 2.0, 3.0]; 4] };
        let mut buf = Vec::new();
        write_cloud(&cloud, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 * 12);
        assert_eq!(read_cloud(&buf[..], "a").unwrap(), cloud);
        assert!(matches!(read_cloud(&buf[..buf.len() - 3], "a"), Err(Error::Ingestion(_))));
    }
}
