//! K-hypothesis joint head, winner-takes-all loss, and top-logit selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::linear;
use crate::tensorcore::{Graph, ParamStore, Real, Tensor, TensorError, Var};
use crate::Error;

pub const HEAD: &str = "head";
pub const NUM_JOINTS: usize = 12;
pub const POSE_DIM: usize = 7;

/// 3-D translation plus unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

impl HandPose {
    /// Normalizes the quaternion and flips it to a non-negative scalar part.
    pub fn new(translation: [f64; 3], quaternion: [f64; 4]) -> Result<Self, Error> {
        let n = quaternion.iter().map(|q| q * q).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() || translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Ingestion(format!("invalid hand pose {translation:?} {quaternion:?}")));
        }
        let sign = if quaternion[0] < 0.0 { -1.0 } else { 1.0 };
        Ok(Self { translation, quaternion: quaternion.map(|q| sign * q / n) })
    }

    pub fn validate(&self) -> Result<(), Error> {
        let n = self.quaternion.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 || self.quaternion[0] < 0.0 {
            return Err(Error::Ingestion(format!("quaternion {:?} is not unit with w >= 0", self.quaternion)));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Ingestion("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> [f64; POSE_DIM] {
        let [tx, ty, tz] = self.translation;
        let [w, x, y, z] = self.quaternion;
        [tx, ty, tz, w, x, y, z]
    }

    /// Rotation matrix columns (hand x, y, z axes in the object frame).
    pub fn axes(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.quaternion;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)],
            [2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z + w * x)],
            [2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }
}

pub type JointVector = [f64; NUM_JOINTS];

/// Mechanical range shared by all joints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lo: f64,
    pub hi: f64,
}

impl Default for JointLimits {
    fn default() -> Self {
        Self { lo: -std::f64::consts::FRAC_PI_2, hi: std::f64::consts::FRAC_PI_2 }
    }
}

impl JointLimits {
    pub fn contains(&self, j: &JointVector) -> bool {
        j.iter().all(|v| v.is_finite() && *v >= self.lo && *v <= self.hi)
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub k: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub limits: JointLimits,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { k: 5, hidden: 256, alpha: 0.1, limits: JointLimits::default() }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.limits.lo < self.limits.hi) {
            return Err(Error::Config("joint limits must satisfy lo < hi".into()));
        }
        Ok(())
    }
}

/// K candidate joint vectors with their selector logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub joints: Vec<JointVector>,
    pub logits: Vec<f64>,
}

impl HypothesisSet {
    pub fn k(&self) -> usize {
        self.joints.len()
    }
}

pub fn init_head<T: Real, R: Rng>(store: &mut ParamStore<T>, embed_dim: usize, cfg: &HeadConfig, rng: &mut R) {
    let dims = [embed_dim + POSE_DIM, cfg.hidden, cfg.hidden, cfg.k * NUM_JOINTS + cfg.k];
    for (i, w) in dims.windows(2).enumerate() {
        store.insert_glorot(&format!("{HEAD}.fc{}.w", i + 1), w[0], w[1], rng);
        store.insert_const(&format!("{HEAD}.fc{}.b", i + 1), &[w[1]], 0.0);
    }
}

/// Joint outputs (`n x 12K`, squashed into the limits) and logits (`n x K`) for
/// `n` rows of `[embedding | pose]`.
pub fn head_forward<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &HeadConfig,
    embeddings: Var,
    poses: Var,
) -> Result<(Var, Var), TensorError> {
    let x = g.concat(&[embeddings, poses], 1)?;
    let h = linear(g, s, &format!("{HEAD}.fc1"), x)?;
    let h = g.relu(h)?;
    let h = linear(g, s, &format!("{HEAD}.fc2"), h)?;
    let h = g.relu(h)?;
    let out = linear(g, s, &format!("{HEAD}.fc3"), h)?;
    let kj = cfg.k * NUM_JOINTS;
    let raw = g.slice_cols(out, 0, kj)?;
    let logits = g.slice_cols(out, kj, cfg.k)?;
    let t = g.tanh(raw)?;
    // lo + (hi - lo) * (tanh + 1) / 2
    let half_span = 0.5 * (cfg.limits.hi - cfg.limits.lo);
    let joints = g.affine(t, half_span, cfg.limits.lo + half_span)?;
    Ok((joints, logits))
}

/// Index of the closest hypothesis by summed squared error; lowest index on ties.
pub fn wta_winner<T: Real>(joints: &[T], truth: &[T]) -> usize {
    let k = joints.len() / truth.len();
    let mut best = 0;
    let mut best_d = T::infinity();
    for h in 0..k {
        let d: T =
            joints[h * truth.len()..(h + 1) * truth.len()].iter().zip(truth).map(|(&a, &b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = h;
        }
    }
    best
}

/// Winner-takes-all objective averaged over rows:
/// `||j_win - j||^2 + alpha * CE(logits, win)`, with the winner picked per row.
/// Only the winning hypothesis receives joint gradients.
pub fn wta_loss<T: Real>(
    g: &mut Graph<T>,
    joints: Var,
    logits: Var,
    truth: &Tensor<T>,
    alpha: f64,
) -> Result<(Var, Vec<usize>), TensorError> {
    let n = truth.rows();
    let winners: Vec<usize> = (0..n).map(|r| wta_winner(g.value(joints).row(r), truth.row(r))).collect();
    let chosen = g.select_blocks(joints, &winners, NUM_JOINTS)?;
    let target = g.input(truth.clone());
    let reg = g.sum_sq_rows(chosen, target)?;
    let ce = g.cross_entropy(logits, &winners)?;
    let ce = g.scale(ce, alpha)?;
    let total = g.add(reg, ce)?;
    Ok((total, winners))
}

/// Plain squared error summed over joints and averaged over rows.
pub fn squared_error_loss<T: Real>(g: &mut Graph<T>, joints: Var, truth: &Tensor<T>) -> Result<Var, TensorError> {
    let target = g.input(truth.clone());
    g.sum_sq_rows(joints, target)
}

/// Value-level WTA loss for one hypothesis set.
pub fn wta_loss_value(h: &HypothesisSet, truth: &JointVector, alpha: f64) -> (f64, usize) {
    let flat: Vec<f64> = h.joints.iter().flatten().copied().collect();
    let win = wta_winner(&flat, truth);
    let reg: f64 = h.joints[win].iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    let mx = h.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + h.logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    (reg + alpha * (lse - h.logits[win]), win)
}

/// Index of the largest logit; lowest index on ties. Never looks at ground truth.
pub fn top_logit_index(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

pub fn select_top_logit(h: &HypothesisSet) -> &JointVector {
    &h.joints[top_logit_index(&h.logits)]
}

/// Splits head outputs into one hypothesis set per row.
pub fn hypothesis_sets<T: Real>(joints: &Tensor<T>, logits: &Tensor<T>) -> Vec<HypothesisSet> {
    let k = logits.cols();
    (0..logits.rows())
        .map(|r| {
            let row = joints.row(r);
            HypothesisSet {
                joints: (0..k)
                    .map(|h| {
                        let mut j = [0.0; NUM_JOINTS];
                        for (d, v) in j.iter_mut().enumerate() {
                            *v = row[h * NUM_JOINTS + d].as_f64();
                        }
                        j
                    })
                    .collect(),
                logits: logits.row(r).iter().map(|v| v.as_f64()).collect(),
            }
        })
        .collect()
}
