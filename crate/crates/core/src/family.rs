//! Alteration families and the strategic (supremum) score.
//!
//! A family is an ordered, finite set of stochastic maps `Δ: X → X`. Each
//! member is realized exactly once per point from a sub-stream keyed by the
//! point and the member index, so a family evaluated twice with the same
//! [`PointKey`] yields identical covariates.
//!
//! Trajectory families (simulators, iterative search) share one rollout per
//! point: member `k` is the `k`-th state of `X⁽ᵏ⁺¹⁾ = M(X⁽ᵏ⁾)`, and step `k`
//! always draws from sub-stream `k`. A family with a larger `k_max` therefore
//! extends, rather than replaces, the trajectory of a smaller one.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::alterations::Covariance;
use crate::domain::{Covariates, Label};
use crate::error::{invalid, Result};
use crate::rng::{PointKey, StreamRng};
use crate::score::ConformityScorer;

/// A stochastic covariate map.
pub trait Alteration: Send + Sync {
    fn alter(&self, x: &Covariates, rng: &mut StreamRng) -> Covariates;
}

impl<F> Alteration for F
where
    F: Fn(&Covariates, &mut StreamRng) -> Covariates + Send + Sync,
{
    fn alter(&self, x: &Covariates, rng: &mut StreamRng) -> Covariates {
        self(x, rng)
    }
}

/// `Δ(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Alteration for Identity {
    fn alter(&self, x: &Covariates, _: &mut StreamRng) -> Covariates {
        x.clone()
    }
}

/// `k` applications of a step drawn from a single generator.
struct Rollout {
    step: Arc<dyn Alteration>,
    steps: usize,
}

impl Alteration for Rollout {
    fn alter(&self, x: &Covariates, rng: &mut StreamRng) -> Covariates {
        let mut state = x.clone();
        for _ in 0..self.steps {
            state = self.step.alter(&state, rng);
        }
        state
    }
}

struct WithNoise {
    inner: Arc<dyn Alteration>,
    noise: Arc<Covariance>,
    scale: f64,
}

impl Alteration for WithNoise {
    fn alter(&self, x: &Covariates, rng: &mut StreamRng) -> Covariates {
        let moved = self.inner.alter(x, rng);
        if self.scale == 0.0 {
            return moved;
        }
        moved.shifted(&self.noise.sample(self.scale, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    UtilityCost,
    IterativeSearch,
    Simulator,
    Misspecified,
    IdentityOnly,
    Custom,
}

#[derive(Clone)]
enum Body {
    Members(Vec<Arc<dyn Alteration>>),
    Trajectory {
        step: Arc<dyn Alteration>,
        k_max: usize,
    },
    Noisy {
        inner: Arc<AlterationFamily>,
        noise: Arc<Covariance>,
        scale: f64,
        layer: usize,
    },
}

#[derive(Clone)]
pub struct AlterationFamily {
    kind: FamilyKind,
    body: Body,
}

impl std::fmt::Debug for AlterationFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AlterationFamily")
            .field("kind", &self.kind)
            .field("members", &self.len())
            .field("shared_trajectory", &self.is_shared_trajectory())
            .finish()
    }
}

impl AlterationFamily {
    /// The singleton `{identity}`.
    pub fn identity() -> Self {
        Self {
            kind: FamilyKind::IdentityOnly,
            body: Body::Members(vec![Arc::new(Identity)]),
        }
    }

    /// Independently realized members, in order.
    pub fn from_members(kind: FamilyKind, members: Vec<Arc<dyn Alteration>>) -> Result<Self> {
        if members.is_empty() {
            return Err(invalid("an alteration family needs at least one member"));
        }
        Ok(Self {
            kind,
            body: Body::Members(members),
        })
    }

    /// Shared-trajectory family `{x ↦ X⁽ᵏ⁾ : k = 0..=k_max}` under `step`.
    pub fn trajectory(kind: FamilyKind, step: Arc<dyn Alteration>, k_max: usize) -> Self {
        Self {
            kind,
            body: Body::Trajectory { step, k_max },
        }
    }

    /// Adds `N(0, scale·Σ)` to every member's output.
    pub(crate) fn noisy(inner: AlterationFamily, noise: Arc<Covariance>, scale: f64) -> Self {
        let layer = inner.noise_layers();
        Self {
            kind: FamilyKind::Misspecified,
            body: Body::Noisy {
                inner: Arc::new(inner),
                noise,
                scale,
                layer,
            },
        }
    }

    fn noise_layers(&self) -> usize {
        match &self.body {
            Body::Noisy { layer, .. } => layer + 1,
            _ => 0,
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    /// Number of members (`k_max + 1` for trajectories).
    pub fn len(&self) -> usize {
        match &self.body {
            Body::Members(m) => m.len(),
            Body::Trajectory { k_max, .. } => k_max + 1,
            Body::Noisy { inner, .. } => inner.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_shared_trajectory(&self) -> bool {
        match &self.body {
            Body::Members(_) => false,
            Body::Trajectory { .. } => true,
            Body::Noisy { inner, .. } => inner.is_shared_trajectory(),
        }
    }

    /// The first `keep` members. For trajectories this is the family with
    /// `k_max = keep − 1` over the same step.
    pub fn truncated(&self, keep: usize) -> Result<Self> {
        if keep == 0 || keep > self.len() {
            return Err(invalid(format!(
                "cannot keep {keep} of {} members",
                self.len()
            )));
        }
        let body = match &self.body {
            Body::Members(m) => Body::Members(m[..keep].to_vec()),
            Body::Trajectory { step, .. } => Body::Trajectory {
                step: step.clone(),
                k_max: keep - 1,
            },
            Body::Noisy {
                inner,
                noise,
                scale,
                layer,
            } => Body::Noisy {
                inner: Arc::new(inner.truncated(keep)?),
                noise: noise.clone(),
                scale: *scale,
                layer: *layer,
            },
        };
        Ok(Self {
            kind: self.kind,
            body,
        })
    }

    /// Realizes every member at `x`, in member order.
    pub fn realize(&self, x: &Covariates, key: &PointKey) -> Vec<Covariates> {
        match &self.body {
            Body::Members(members) => members
                .iter()
                .enumerate()
                .map(|(i, m)| m.alter(x, &mut key.member(i)))
                .collect(),
            Body::Trajectory { step, k_max } => {
                let mut states = Vec::with_capacity(k_max + 1);
                states.push(x.clone());
                for k in 1..=*k_max {
                    let next = step.alter(&states[k - 1], &mut key.member(k));
                    states.push(next);
                }
                states
            }
            Body::Noisy {
                inner,
                noise,
                scale,
                layer,
            } => {
                let states = inner.realize(x, key);
                if *scale == 0.0 {
                    return states;
                }
                states
                    .into_iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let mut rng = key.noise((layer << 32) | j);
                        s.shifted(&noise.sample(*scale, &mut rng))
                    })
                    .collect()
            }
        }
    }

    /// A single alteration standing for the family's last (most effortful)
    /// member, drawing all its randomness from one generator.
    pub fn most_effortful(&self) -> Arc<dyn Alteration> {
        match &self.body {
            Body::Members(m) => m.last().expect("families are nonempty").clone(),
            Body::Trajectory { step, k_max } => Arc::new(Rollout {
                step: step.clone(),
                steps: *k_max,
            }),
            Body::Noisy {
                inner,
                noise,
                scale,
                ..
            } => Arc::new(WithNoise {
                inner: inner.most_effortful(),
                noise: noise.clone(),
                scale: *scale,
            }),
        }
    }
}

/// `sup_{Δ ∈ family} s(Δ(x), y)`, with each member realized once from `key`.
pub fn strategic_score(
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    x: &Covariates,
    y: &Label,
    key: &PointKey,
) -> Result<f64> {
    family
        .realize(x, key)
        .iter()
        .try_fold(f64::NEG_INFINITY, |acc, xs| {
            Ok(acc.max(scorer.score(xs, y)?))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Role;
    use rand_distr::{Distribution, StandardNormal};

    fn cov(v: f64) -> Covariates {
        Covariates::new(vec![v]).unwrap()
    }

    fn mean_is_x() -> ConformityScorer {
        ConformityScorer::regression(Arc::new(|x: &[f64]| x[0]))
    }

    fn walk() -> Arc<dyn Alteration> {
        Arc::new(|x: &Covariates, rng: &mut StreamRng| {
            let z: f64 = StandardNormal.sample(rng);
            x.shifted(&[z])
        })
    }

    #[test]
    fn identity_family_gives_plain_score() {
        let s = mean_is_x();
        let key = PointKey::new(1, Role::Calibration, 0);
        let fam = AlterationFamily::identity();
        let x = cov(2.5);
        let y = Label::Continuous(1.0);
        assert_eq!(
            strategic_score(&s, &fam, &x, &y, &key).unwrap(),
            s.score(&x, &y).unwrap()
        );
    }

    #[test]
    fn deterministic_shift_member_gives_max() {
        // μ(x) = 2 at x; the second member moves μ to 5.
        let s = mean_is_x();
        let fam = AlterationFamily::from_members(
            FamilyKind::Custom,
            vec![
                Arc::new(Identity),
                Arc::new(|_: &Covariates, _: &mut StreamRng| cov(5.0)),
            ],
        )
        .unwrap();
        let key = PointKey::new(0, Role::Test, 0);
        let v = strategic_score(&s, &fam, &cov(2.0), &Label::Continuous(2.0), &key).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn trajectory_score_matches_replayed_prefix_max() {
        let s = mean_is_x();
        let fam = AlterationFamily::trajectory(FamilyKind::Simulator, walk(), 3);
        let key = PointKey::new(42, Role::Calibration, 7);
        let x = cov(0.3);
        let y = Label::Continuous(0.0);

        // replay: step k draws one standard normal from sub-stream k
        let mut state = 0.3;
        let mut best = (state - 0.0f64).abs();
        for k in 1..=3 {
            let z: f64 = StandardNormal.sample(&mut key.member(k));
            state += z;
            best = best.max(state.abs());
        }
        assert_eq!(strategic_score(&s, &fam, &x, &y, &key).unwrap(), best);
        assert_eq!(fam.realize(&x, &key).len(), 4);
    }

    #[test]
    fn longer_trajectory_extends_shorter_one() {
        let short = AlterationFamily::trajectory(FamilyKind::Simulator, walk(), 2);
        let long = AlterationFamily::trajectory(FamilyKind::Simulator, walk(), 5);
        let key = PointKey::new(3, Role::Test, 11);
        let x = cov(-1.0);
        let a = short.realize(&x, &key);
        let b = long.realize(&x, &key);
        assert_eq!(a[..], b[..3]);
        assert_eq!(long.truncated(3).unwrap().realize(&x, &key), a);
    }

    #[test]
    fn empty_member_list_is_rejected() {
        assert!(AlterationFamily::from_members(FamilyKind::Custom, vec![]).is_err());
    }

    #[test]
    fn rollout_of_deterministic_step_matches_last_state() {
        let plus_one: Arc<dyn Alteration> =
            Arc::new(|x: &Covariates, _: &mut StreamRng| x.shifted(&[1.0]));
        let fam = AlterationFamily::trajectory(FamilyKind::Simulator, plus_one, 4);
        let key = PointKey::new(0, Role::Train, 0);
        let last = fam.most_effortful().alter(&cov(0.0), &mut key.member(0));
        assert_eq!(last, cov(4.0));
    }
}
