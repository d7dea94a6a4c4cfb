//! Patch ordering and JEPA context/target mask sampling.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pointops::{dist2, extreme_point, Point};
use crate::Error;

/// Greedy nearest-neighbour chain over patch centers, starting at the extreme
/// center. Ties resolve to the lowest index.
pub fn sequence_centers(centers: &[Point]) -> Vec<usize> {
    let g = centers.len();
    if g == 0 {
        return Vec::new();
    }
    let mut order = Vec::with_capacity(g);
    let mut visited = vec![false; g];
    let mut current = extreme_point(centers);
    loop {
        order.push(current);
        visited[current] = true;
        let mut next: Option<usize> = None;
        for i in 0..g {
            if visited[i] {
                continue;
            }
            let d = dist2(centers[i], centers[current]);
            if next.is_none_or(|n| d < dist2(centers[n], centers[current])) {
                next = Some(i);
            }
        }
        match next {
            Some(n) => current = n,
            None => break,
        }
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub num_targets: usize,
    /// Range of target window lengths as fractions of the sequence.
    pub target_scale: (f64, f64),
    /// Range of the fraction of non-target tokens kept as context.
    pub context_scale: (f64, f64),
    pub max_retries: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { num_targets: 4, target_scale: (0.15, 0.25), context_scale: (0.85, 1.0), max_retries: 100 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        if self.num_targets > 0 && !ok(self.target_scale) {
            return Err(Error::Config(format!("target_scale {:?} must lie in (0, 1]", self.target_scale)));
        }
        if !ok(self.context_scale) {
            return Err(Error::Config(format!("context_scale {:?} must lie in (0, 1]", self.context_scale)));
        }
        Ok(())
    }

    /// Smallest sequence that fits every target window plus one context token.
    pub fn min_tokens(&self) -> usize {
        self.num_targets + 1
    }

    /// Exact mean window length for a sequence of `g` tokens, before any shrinking.
    pub fn expected_window_len(&self, g: usize) -> f64 {
        let (lo, hi) = self.target_scale;
        if hi == lo {
            return window_len(lo, g) as f64;
        }
        // round(r * g) is piecewise constant in r; integrate over each piece.
        let gf = g as f64;
        let first = window_len(lo, g);
        let last = window_len(hi, g);
        let mut total = 0.0;
        for len in first..=last {
            let a = ((len as f64 - 0.5) / gf).max(lo);
            let b = ((len as f64 + 0.5) / gf).min(hi);
            if b > a {
                total += len.max(1) as f64 * (b - a);
            }
        }
        total / (hi - lo)
    }
}

fn window_len(ratio: f64, g: usize) -> usize {
    ((ratio * g as f64).round() as usize).max(1)
}

/// Target windows and the context they leave behind, in sequence positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// `(start, len)` windows, pairwise disjoint.
    pub target_blocks: Vec<(usize, usize)>,
    pub context_indices: Vec<usize>,
}

impl MaskPlan {
    /// Union of target windows in increasing order.
    pub fn target_indices(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.target_blocks.iter().flat_map(|&(s, l)| s..s + l).collect();
        t.sort_unstable();
        t
    }

    pub fn check(&self, g: usize) -> Result<(), String> {
        let mut covered = vec![false; g];
        for &(s, l) in &self.target_blocks {
            if l == 0 || s + l > g {
                return Err(format!("window ({s}, {l}) outside sequence of {g}"));
            }
            for c in &mut covered[s..s + l] {
                if *c {
                    return Err("target windows overlap".into());
                }
                *c = true;
            }
        }
        if !self.context_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err("context indices not strictly increasing".into());
        }
        if self.context_indices.iter().any(|&i| i >= g || covered[i]) {
            return Err("context intersects a target window".into());
        }
        Ok(())
    }
}

/// Draws disjoint target windows and a context subset for a sequence of `g` tokens.
///
/// Lengths are `round(r * g)` with `r ~ U(target_scale)`. Placement is uniform over
/// disjoint arrangements: plain rejection for up to `max_retries` draws, then an
/// exact draw from the same distribution. When the windows cannot fit alongside
/// one context token, the newest window is shrunk one token at a time.
pub fn sample_mask<R: Rng>(g: usize, cfg: &MaskConfig, rng: &mut R) -> Result<MaskPlan, Error> {
    cfg.validate()?;
    if g < cfg.min_tokens() {
        return Err(Error::Mask(format!("{} targets cannot be placed in {g} tokens", cfg.num_targets)));
    }
    let mut lens: Vec<usize> = (0..cfg.num_targets)
        .map(|_| {
            let (lo, hi) = cfg.target_scale;
            let r = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            window_len(r, g)
        })
        .collect();
    // leave at least one context token
    while lens.iter().sum::<usize>() + 1 > g {
        match lens.iter().rposition(|&l| l > 1) {
            Some(i) => lens[i] -= 1,
            None => return Err(Error::Mask(format!("cannot fit {} windows in {g} tokens", lens.len()))),
        }
    }

    let mut blocks = None;
    for _ in 0..cfg.max_retries {
        let cand: Vec<(usize, usize)> = lens.iter().map(|&l| (rng.gen_range(0..=g - l), l)).collect();
        if disjoint(&cand) {
            blocks = Some(cand);
            break;
        }
    }
    let target_blocks = match blocks {
        Some(b) => b,
        None => place_exact(g, &lens, rng),
    };

    let mut covered = vec![false; g];
    for &(s, l) in &target_blocks {
        covered[s..s + l].iter_mut().for_each(|c| *c = true);
    }
    let free: Vec<usize> = (0..g).filter(|&i| !covered[i]).collect();
    let (lo, hi) = cfg.context_scale;
    let keep_frac = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let keep = ((keep_frac * free.len() as f64).round() as usize).clamp(1, free.len());
    let mut context_indices: Vec<usize> = if keep == free.len() {
        free
    } else {
        index::sample(rng, free.len(), keep).into_iter().map(|i| free[i]).collect()
    };
    context_indices.sort_unstable();
    Ok(MaskPlan { target_blocks, context_indices })
}

fn disjoint(blocks: &[(usize, usize)]) -> bool {
    for (i, &(s1, l1)) in blocks.iter().enumerate() {
        for &(s2, l2) in &blocks[..i] {
            if s1 < s2 + l2 && s2 < s1 + l1 {
                return false;
            }
        }
    }
    true
}

/// Uniform draw over disjoint placements: random window order, then a uniform
/// composition of the free tokens into the gaps around the windows.
fn place_exact<R: Rng>(g: usize, lens: &[usize], rng: &mut R) -> Vec<(usize, usize)> {
    let n = lens.len();
    let free = g - lens.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // stars and bars: choose which of the free + n slots are windows
    let mut slots: Vec<usize> = index::sample(rng, free + n, n).into_vec();
    slots.sort_unstable();
    let mut starts = vec![0; n];
    let mut used = 0;
    for (rank, (&slot, &w)) in slots.iter().zip(&order).enumerate() {
        let gap_tokens = slot - rank;
        starts[w] = gap_tokens + used;
        used += lens[w];
    }
    lens.iter().zip(starts).map(|(&l, s)| (s, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chain_on_a_line() {
        let c: Vec<Point> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(sequence_centers(&c), vec![3, 2, 1, 0]);
        assert_eq!(sequence_centers(&c[..1]), vec![0]);
    }

    #[test]
    fn single_fixed_window() {
        let cfg =
            MaskConfig { num_targets: 1, target_scale: (0.25, 0.25), context_scale: (1.0, 1.0), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sample_mask(64, &cfg, &mut rng).unwrap();
        assert_eq!(plan.target_blocks.len(), 1);
        assert_eq!(plan.target_blocks[0].1, 16);
        assert_eq!(plan.context_indices.len(), 48);
        plan.check(64).unwrap();
    }

    #[test]
    fn no_targets_means_full_context() {
        let cfg = MaskConfig { num_targets: 0, context_scale: (1.0, 1.0), ..Default::default() };
        let plan = sample_mask(10, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(plan.target_blocks.is_empty());
        assert_eq!(plan.context_indices, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_targets_is_mask_error() {
        let cfg = MaskConfig { num_targets: 8, ..Default::default() };
        assert!(matches!(sample_mask(8, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Mask(_))));
    }

    #[test]
    fn exact_placement_is_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let lens = [5, 3, 7, 2];
            let b = place_exact(20, &lens, &mut rng);
            assert!(disjoint(&b));
            assert!(b.iter().all(|&(s, l)| s + l <= 20));
            assert_eq!(b.iter().map(|x| x.1).collect::<Vec<_>>(), lens);
        }
    }
}
