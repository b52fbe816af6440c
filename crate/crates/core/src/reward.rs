//! The 2D mask-based reward stack: IoU, the piecewise mapping, the
//! IoU-difference / goal-reached / centralization components, and their
//! weighted sum.
//!
//! The mapping is implemented verbatim, including the jump at `x_thr` under
//! the default coefficients (left limit 0.5, right value 0.05). Because the
//! IoU-difference reward telescopes, the jump costs a trajectory at most one
//! crossing and washes out of the episode return.

use crate::raster::Mask;
use crate::Result;

/// Coefficients of the reward stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    /// Quadratic coefficient of the mapping's upper branch.
    pub alpha: f64,
    /// Linear coefficient of the mapping's upper branch.
    pub beta: f64,
    /// Branch threshold of the mapping, in (0, 1).
    pub x_thr: f64,
    /// IoU at which the goal counts as reached, in (0, 1].
    pub iou_thr: f64,
    /// Weight of the centralization component.
    pub sigma_c: f64,
    /// Weight of the goal-reached component.
    pub sigma_g: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 3.8,
            beta: 1.8,
            x_thr: 0.5,
            iou_thr: 0.98,
            sigma_c: 1.0,
            sigma_g: 2.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.x_thr > 0.0 && self.x_thr < 1.0) {
            problems.push(format!("reward.x_thr must be in (0,1), got {}", self.x_thr));
        }
        if !(self.iou_thr > 0.0 && self.iou_thr <= 1.0) {
            problems.push(format!(
                "reward.iou_thr must be in (0,1], got {}",
                self.iou_thr
            ));
        }
        if !(self.sigma_c >= 0.0) {
            problems.push(format!("reward.sigma_c must be >= 0, got {}", self.sigma_c));
        }
        if !(self.sigma_g >= 0.0) {
            problems.push(format!("reward.sigma_g must be >= 0, got {}", self.sigma_g));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(problems.join("; ")))
        }
    }

    /// Upper bound on `|f|` over [0,1] for this config; used to bound the
    /// per-step reward.
    pub fn map_f_abs_max(&self) -> f64 {
        // Candidates: branch endpoints and the parabola vertex when it
        // falls inside the upper branch.
        let mut m = self.x_thr.abs().max(map_f(1.0, self).abs());
        m = m.max(map_f(self.x_thr, self).abs());
        if self.alpha != 0.0 {
            let vertex = self.beta / (2.0 * self.alpha);
            if vertex >= self.x_thr && vertex <= 1.0 {
                m = m.max(map_f(vertex, self).abs());
            }
        }
        m
    }

    /// Bound on `|r_A|` for any single step under this config.
    pub fn reward_abs_bound(&self) -> f64 {
        2.0 * self.map_f_abs_max() + self.sigma_c + self.sigma_g
    }
}

/// Intersection over union of two equally-sized masks.
///
/// Empty-union (both masks empty) is defined as 0: a pose that pushes the
/// object out of frame is a failure, not a match.
pub fn iou(a: &Mask, b: &Mask) -> f64 {
    let union = a.union_area(b);
    if union == 0 {
        return 0.0;
    }
    a.intersection_area(b) as f64 / union as f64
}

/// The piecewise mapping applied to IoU values: identity below `x_thr`,
/// `alpha*x^2 - beta*x` at and above it.
pub fn map_f(x: f64, cfg: &RewardConfig) -> f64 {
    debug_assert!((0.0..=1.0).contains(&x), "map_f input {x} outside [0,1]");
    if x < cfg.x_thr {
        x
    } else {
        cfg.alpha * x * x - cfg.beta * x
    }
}

/// IoU difference reward between consecutive frames.
pub fn reward_iou_diff(iou_prev: f64, iou_next: f64, cfg: &RewardConfig) -> f64 {
    map_f(iou_next, cfg) - map_f(iou_prev, cfg)
}

/// Goal-reached reward: 1 at or above the IoU threshold, else 0.
pub fn reward_goal(iou_k: f64, cfg: &RewardConfig) -> f64 {
    if iou_k >= cfg.iou_thr {
        1.0
    } else {
        0.0
    }
}

/// Centralization reward `min(d^{-1/2}, 1)` over the pixel distance between
/// mask centers; the `d = 0` singularity is capped at 1.
pub fn reward_center(c_r: (f64, f64), c_g: (f64, f64)) -> f64 {
    let d = ((c_r.0 - c_g.0).powi(2) + (c_r.1 - c_g.1).powi(2)).sqrt();
    if d == 0.0 {
        1.0
    } else {
        (1.0 / d.sqrt()).min(1.0)
    }
}

/// Weighted sum of the three components.
pub fn reward_total(r_i: f64, r_c: f64, r_g: f64, cfg: &RewardConfig) -> f64 {
    r_i + cfg.sigma_c * r_c + cfg.sigma_g * r_g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_identical_and_disjoint() {
        let mut a = Mask::new(8, 8);
        a.set(1, 1);
        a.set(2, 2);
        assert_eq!(iou(&a, &a), 1.0);

        let mut b = Mask::new(8, 8);
        b.set(5, 5);
        assert_eq!(iou(&a, &b), 0.0);

        let empty = Mask::new(8, 8);
        assert_eq!(iou(&empty, &empty), 0.0);
    }

    #[test]
    fn iou_matches_pixel_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let mut a = Mask::new(23, 17);
            let mut b = Mask::new(23, 17);
            for _ in 0..rng.random_range(0..150) {
                a.set(rng.random_range(0..23), rng.random_range(0..17));
            }
            for _ in 0..rng.random_range(0..150) {
                b.set(rng.random_range(0..23), rng.random_range(0..17));
            }
            let mut inter = 0u32;
            let mut union = 0u32;
            for v in 0..17 {
                for u in 0..23 {
                    let (pa, pb) = (a.get(u, v), b.get(u, v));
                    if pa && pb {
                        inter += 1;
                    }
                    if pa || pb {
                        union += 1;
                    }
                }
            }
            let expected = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            assert_eq!(iou(&a, &b), expected);
        }
    }

    #[test]
    #[should_panic(expected = "mask dimension mismatch")]
    fn iou_dimension_mismatch_panics() {
        let a = Mask::new(8, 8);
        let b = Mask::new(8, 9);
        let _ = iou(&a, &b);
    }

    #[test]
    fn map_f_pinned_values() {
        let cfg = RewardConfig::default();
        assert_eq!(map_f(0.3, &cfg), 0.3);
        assert!((map_f(1.0, &cfg) - 2.0).abs() < 1e-12);
        // At the threshold the upper branch applies: 3.8*0.25 - 1.8*0.5.
        assert!((map_f(0.5, &cfg) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn map_f_monotone_on_each_branch() {
        let cfg = RewardConfig::default();
        let mut prev_low = f64::NEG_INFINITY;
        let mut prev_high = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let y = map_f(x, &cfg);
            if x < cfg.x_thr {
                assert!(y >= prev_low);
                prev_low = y;
            } else {
                assert!(y >= prev_high);
                prev_high = y;
            }
        }
    }

    #[test]
    fn iou_diff_values() {
        let cfg = RewardConfig::default();
        assert_eq!(reward_iou_diff(0.42, 0.42, &cfg), 0.0);
        assert!((reward_iou_diff(0.8, 1.0, &cfg) - 1.008).abs() < 1e-12);
    }

    #[test]
    fn iou_diff_telescopes() {
        let cfg = RewardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let steps = rng.random_range(2..60);
            let ious: Vec<f64> = (0..steps).map(|_| rng.random::<f64>()).collect();
            let total: f64 = ious
                .windows(2)
                .map(|w| reward_iou_diff(w[0], w[1], &cfg))
                .sum();
            let expected = map_f(*ious.last().unwrap(), &cfg) - map_f(ious[0], &cfg);
            assert!((total - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn goal_threshold_edges() {
        let cfg = RewardConfig::default();
        assert_eq!(reward_goal(0.99, &cfg), 1.0);
        assert_eq!(reward_goal(0.979_999, &cfg), 0.0);
        assert_eq!(reward_goal(0.98, &cfg), 1.0);
    }

    #[test]
    fn center_reward_values() {
        assert_eq!(reward_center((3.0, 4.0), (3.0, 4.0)), 1.0);
        assert!((reward_center((0.0, 0.0), (0.0, 4.0)) - 0.5).abs() < 1e-12);
        assert_eq!(reward_center((0.0, 0.0), (1.0, 0.0)), 1.0);
        // Range (0, 1] on random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let r = reward_center(
                (rng.random::<f64>() * 100.0, rng.random::<f64>() * 100.0),
                (rng.random::<f64>() * 100.0, rng.random::<f64>() * 100.0),
            );
            assert!(r > 0.0 && r <= 1.0);
        }
    }

    #[test]
    fn total_reward_combination() {
        let cfg = RewardConfig::default();
        assert_eq!(reward_total(0.0, 0.0, 0.0, &cfg), 0.0);
        assert!((reward_total(1.008, 0.5, 1.0, &cfg) - 3.508).abs() < 1e-12);
        // Zeroed weights reduce to the IoU-difference component alone.
        let bare = RewardConfig {
            sigma_c: 0.0,
            sigma_g: 0.0,
            ..RewardConfig::default()
        };
        assert_eq!(reward_total(0.37, 0.9, 1.0, &bare), 0.37);
    }

    #[test]
    fn reward_bound_holds() {
        let cfg = RewardConfig::default();
        let bound = cfg.reward_abs_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..1000 {
            let prev = rng.random::<f64>();
            let next = rng.random::<f64>();
            let r_i = reward_iou_diff(prev, next, &cfg);
            let r_c = reward_center((rng.random(), rng.random()), (rng.random(), rng.random()));
            let r_g = reward_goal(next, &cfg);
            assert!(reward_total(r_i, r_c, r_g, &cfg).abs() <= bound);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig {
            x_thr: 1.5,
            ..RewardConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
