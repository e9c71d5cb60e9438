//! Constructions of alteration families: utility-cost best responses,
//! iterative local random search, stochastic simulators, and the additive
//! Gaussian misspecification wrapper.

mod cost;
mod utility;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::Covariates;
use crate::error::{invalid, Result};
use crate::family::{Alteration, AlterationFamily, FamilyKind};
use crate::rng::StreamRng;

pub use cost::{Covariance, MahalanobisCost, COVARIANCE_RIDGE};
pub use utility::{rational_utility, RationalUtility, TargetRegion, Utility, UtilityDirection};

/// Random-search settings shared by the utility-cost and iterative
/// constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Proposals per iterative step (`m`).
    pub candidates_per_step: usize,
    /// Proposals are `N(0, step_scale·Σ)`.
    pub step_scale: f64,
    /// Also consider staying put at every iterative step.
    pub include_zero_step: bool,
    pub k_max: usize,
    /// Proposals for the one-shot utility-cost argmax.
    pub candidate_count: usize,
    /// Cost scales `λ`; one utility-cost member per entry.
    pub lambda_grid: Vec<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            candidates_per_step: 2,
            step_scale: 0.2,
            include_zero_step: true,
            k_max: 3,
            candidate_count: 500,
            lambda_grid: vec![1e-7, 1.0, 5.0],
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates_per_step == 0 || self.candidate_count == 0 {
            return Err(invalid("candidate counts must be at least 1"));
        }
        if !(self.step_scale.is_finite() && self.step_scale > 0.0) {
            return Err(invalid("step scale must be positive"));
        }
        if self.lambda_grid.is_empty() {
            return Err(invalid("lambda grid must be nonempty"));
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(invalid("lambda values must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Approximate `argmax_{x'} u(x') − λ⁻¹·c(x, x')` by one-shot random search.
///
/// `x` is evaluated first, then `candidate_count` proposals
/// `x + N(0, step_scale·Σ)`; a proposal must be strictly better to win.
/// `λ = 0` returns `x` (infinite cost weight).
pub fn utility_cost_alteration(
    utility: &dyn Utility,
    cost: &MahalanobisCost,
    lambda: f64,
    cfg: &SearchConfig,
    x: &Covariates,
    rng: &mut StreamRng,
) -> Covariates {
    if lambda == 0.0 {
        return x.clone();
    }
    let weight = lambda.recip();
    let mut best = x.clone();
    let mut best_objective = utility.utility(x);
    for _ in 0..cfg.candidate_count {
        let delta = cost.covariance().sample(cfg.step_scale, rng);
        let candidate = x.shifted(&delta);
        let objective = utility.utility(&candidate) - weight * cost.cost(x, &candidate);
        if objective > best_objective {
            best_objective = objective;
            best = candidate;
        }
    }
    best
}

/// One member `Δ^(u, λ⁻¹c)` of a utility-cost family.
pub struct UtilityCostAlteration {
    utility: Arc<dyn Utility>,
    cost: MahalanobisCost,
    lambda: f64,
    cfg: SearchConfig,
}

impl UtilityCostAlteration {
    pub fn new(
        utility: Arc<dyn Utility>,
        cost: MahalanobisCost,
        lambda: f64,
        cfg: SearchConfig,
    ) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(invalid(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        Ok(Self {
            utility,
            cost,
            lambda,
            cfg,
        })
    }
}

impl Alteration for UtilityCostAlteration {
    fn alter(&self, x: &Covariates, rng: &mut StreamRng) -> Covariates {
        utility_cost_alteration(
            self.utility.as_ref(),
            &self.cost,
            self.lambda,
            &self.cfg,
            x,
            rng,
        )
    }
}

/// One member per `λ` in `cfg.lambda_grid`, in grid order.
pub fn build_utility_cost_family(
    utility: Arc<dyn Utility>,
    cost: MahalanobisCost,
    cfg: &SearchConfig,
) -> Result<AlterationFamily> {
    cfg.validate()?;
    let members = cfg
        .lambda_grid
        .iter()
        .map(|&lambda| {
            UtilityCostAlteration::new(utility.clone(), cost.clone(), lambda, cfg.clone())
                .map(|a| Arc::new(a) as Arc<dyn Alteration>)
        })
        .collect::<Result<Vec<_>>>()?;
    AlterationFamily::from_members(FamilyKind::UtilityCost, members)
}

/// One step of local random search: the best of `x_k` (when the zero step is
/// enabled) and `m` proposals `x_k + δ_j`, `δ_j ~ N(0, step_scale·Σ)`. Ties
/// go to the earliest candidate.
pub fn iterative_search_step(
    utility: &dyn Utility,
    covariance: &Covariance,
    cfg: &SearchConfig,
    x: &Covariates,
    rng: &mut StreamRng,
) -> Covariates {
    let mut best: Option<(f64, Covariates)> = cfg
        .include_zero_step
        .then(|| (utility.utility(x), x.clone()));
    for _ in 0..cfg.candidates_per_step {
        let candidate = x.shifted(&covariance.sample(cfg.step_scale, rng));
        let u = utility.utility(&candidate);
        match &best {
            Some((b, _)) if u <= *b => {}
            _ => best = Some((u, candidate)),
        }
    }
    best.map(|(_, c)| c).unwrap_or_else(|| x.clone())
}

pub struct IterativeSearchStep {
    utility: Arc<dyn Utility>,
    covariance: Arc<Covariance>,
    cfg: SearchConfig,
}

impl IterativeSearchStep {
    pub fn new(utility: Arc<dyn Utility>, covariance: Arc<Covariance>, cfg: SearchConfig) -> Self {
        Self {
            utility,
            covariance,
            cfg,
        }
    }
}

impl Alteration for IterativeSearchStep {
    fn alter(&self, x: &Covariates, rng: &mut StreamRng) -> Covariates {
        iterative_search_step(self.utility.as_ref(), &self.covariance, &self.cfg, x, rng)
    }
}

/// Shared-trajectory family `{Δ_0 = id, …, Δ_{k_max}}` of iterative search.
pub fn build_iterative_family(
    utility: Arc<dyn Utility>,
    covariance: Arc<Covariance>,
    cfg: &SearchConfig,
) -> Result<AlterationFamily> {
    cfg.validate()?;
    let step = IterativeSearchStep::new(utility, covariance, cfg.clone());
    Ok(AlterationFamily::trajectory(
        FamilyKind::IterativeSearch,
        Arc::new(step),
        cfg.k_max,
    ))
}

/// Shared-trajectory family of prefix states under repeated calls to `step`.
pub fn build_simulator_family(step: Arc<dyn Alteration>, k_max: usize) -> AlterationFamily {
    AlterationFamily::trajectory(FamilyKind::Simulator, step, k_max)
}

/// Simulator step `x ↦ x + N(0, scale·Σ)`.
pub struct GaussianWalk {
    covariance: Arc<Covariance>,
    scale: f64,
}

impl GaussianWalk {
    pub fn new(covariance: Arc<Covariance>, scale: f64) -> Self {
        Self { covariance, scale }
    }
}

impl Alteration for GaussianWalk {
    fn alter(&self, x: &Covariates, rng: &mut StreamRng) -> Covariates {
        x.shifted(&self.covariance.sample(self.scale, rng))
    }
}

/// `Δ̃_k(X) = Δ_k(X) + N(0, λ_noise·Σ)` for every member, with noise drawn
/// from sub-streams independent of the members' own.
pub fn misspecify(
    family: &AlterationFamily,
    lambda_noise: f64,
    covariance: Arc<Covariance>,
) -> Result<AlterationFamily> {
    if !(lambda_noise.is_finite() && lambda_noise >= 0.0) {
        return Err(invalid(format!(
            "noise scale must be non-negative, got {lambda_noise}"
        )));
    }
    Ok(AlterationFamily::noisy(
        family.clone(),
        covariance,
        lambda_noise,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::strategic_score;
    use crate::rng::{PointKey, Role};
    use crate::score::ConformityScorer;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn c(v: &[f64]) -> Covariates {
        Covariates::new(v.to_vec()).unwrap()
    }

    fn unit_cost(d: usize) -> MahalanobisCost {
        MahalanobisCost::new(Arc::new(Covariance::identity(d)))
    }

    #[test]
    fn zero_lambda_returns_input() {
        let u = |x: &Covariates| x[0];
        let mut rng = StreamRng::seed_from_u64(1);
        let x = c(&[0.25, -1.0]);
        let out = utility_cost_alteration(
            &u,
            &unit_cost(2),
            0.0,
            &SearchConfig::default(),
            &x,
            &mut rng,
        );
        assert_eq!(out, x);
    }

    #[test]
    fn constant_utility_never_moves() {
        let u = |_: &Covariates| 1.0;
        let mut rng = StreamRng::seed_from_u64(2);
        let x = c(&[3.0]);
        for lambda in [1e-7, 1.0, 5.0, 1e9] {
            let out = utility_cost_alteration(
                &u,
                &unit_cost(1),
                lambda,
                &SearchConfig::default(),
                &x,
                &mut rng,
            );
            assert_eq!(out, x);
        }
    }

    #[test]
    fn quadratic_utility_cost_optimum() {
        // u(x') = −(x' − 3)², c = (x − x')², x = 0, λ = 1 → maximizer 1.5.
        let u = |x: &Covariates| -(x[0] - 3.0).powi(2);
        let objective = |v: f64| -(v - 3.0f64).powi(2) - v * v;
        let grid_best = (0..=400_000)
            .map(|i| -1.0 + i as f64 * 1e-5)
            .max_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        assert!((grid_best - 1.5).abs() < 1e-5);

        let cfg = SearchConfig {
            candidate_count: 20_000,
            step_scale: 4.0,
            ..Default::default()
        };
        let mut rng = StreamRng::seed_from_u64(9);
        let out = utility_cost_alteration(&u, &unit_cost(1), 1.0, &cfg, &c(&[0.0]), &mut rng);
        assert!((out[0] - grid_best).abs() < 0.02, "{}", out[0]);
    }

    #[test]
    fn search_never_loses_objective() {
        let u = |x: &Covariates| (x[0] * 3.0).sin() + x[1];
        let cost = unit_cost(2);
        let cfg = SearchConfig {
            candidate_count: 50,
            ..Default::default()
        };
        let mut rng = StreamRng::seed_from_u64(5);
        for i in 0..200 {
            let x = c(&[i as f64 * 0.05, -(i as f64) * 0.01]);
            for lambda in [0.1, 1.0, 5.0] {
                let out = utility_cost_alteration(&u, &cost, lambda, &cfg, &x, &mut rng);
                let obj = u(&out) - cost.cost(&x, &out) / lambda;
                assert!(obj >= u(&x));
            }
        }
    }

    #[test]
    fn utility_cost_family_has_one_member_per_lambda() {
        let u: Arc<dyn Utility> = Arc::new(|x: &Covariates| x[0]);
        let fam =
            build_utility_cost_family(u.clone(), unit_cost(1), &SearchConfig::default()).unwrap();
        assert_eq!(fam.len(), 3);
        assert_eq!(fam.kind(), FamilyKind::UtilityCost);

        let zero = SearchConfig {
            lambda_grid: vec![0.0],
            ..Default::default()
        };
        let fam0 = build_utility_cost_family(u, unit_cost(1), &zero).unwrap();
        let key = PointKey::new(0, Role::Test, 0);
        assert_eq!(fam0.realize(&c(&[1.5]), &key), vec![c(&[1.5])]);
    }

    #[test]
    fn utility_cost_sup_score_dominates_plain_score() {
        // μ(x) = x; the agent wants μ high and is scored against y = 0.
        let scorer = ConformityScorer::regression(Arc::new(|x: &[f64]| x[0]));
        let omega = TargetRegion::interval(-10.0, 0.0).unwrap();
        let u = RationalUtility::new(scorer.clone(), omega, UtilityDirection::Inf).unwrap();
        let fam =
            build_utility_cost_family(Arc::new(u), unit_cost(1), &SearchConfig::default()).unwrap();
        for i in 0..100 {
            let x = c(&[(i as f64 - 50.0) * 0.1]);
            let y = crate::domain::Label::Continuous(0.3);
            let key = PointKey::new(4, Role::Calibration, i);
            let sup = strategic_score(&scorer, &fam, &x, &y, &key).unwrap();
            assert!(sup >= scorer.score(&x, &y).unwrap());
        }
    }

    #[test]
    fn iterative_step_with_constant_utility_stays() {
        let u = |_: &Covariates| 0.0;
        let mut rng = StreamRng::seed_from_u64(8);
        let x = c(&[1.0, 2.0]);
        let out = iterative_search_step(
            &u,
            &Covariance::identity(2),
            &SearchConfig::default(),
            &x,
            &mut rng,
        );
        assert_eq!(out, x);
    }

    #[test]
    fn iterative_step_never_decreases_linear_utility() {
        let u = |x: &Covariates| x[0];
        let cov = Covariance::identity(1);
        let mut rng = StreamRng::seed_from_u64(10);
        let mut x = c(&[0.0]);
        for _ in 0..500 {
            let next = iterative_search_step(&u, &cov, &SearchConfig::default(), &x, &mut rng);
            assert!(u(&next) >= u(&x));
            x = next;
        }
    }

    #[test]
    fn iterative_step_matches_hand_replay() {
        // Σ = [4], scale 0.2 → proposals x + sqrt(0.8)·z.
        let cov = Covariance::diagonal(&[4.0]).unwrap();
        let u = |x: &Covariates| -(x[0] - 1.0).abs();
        let cfg = SearchConfig::default();
        let x = c(&[0.2]);
        for seed in 0..20 {
            let out =
                iterative_search_step(&u, &cov, &cfg, &x, &mut StreamRng::seed_from_u64(seed));

            let mut replay = StreamRng::seed_from_u64(seed);
            let z1: f64 = StandardNormal.sample(&mut replay);
            let z2: f64 = StandardNormal.sample(&mut replay);
            let cands = [
                0.2,
                0.2 + 2.0 * 0.2f64.sqrt() * z1,
                0.2 + 2.0 * 0.2f64.sqrt() * z2,
            ];
            let mut best = 0;
            for j in 1..3 {
                if -(cands[j] - 1.0f64).abs() > -(cands[best] - 1.0f64).abs() {
                    best = j;
                }
            }
            assert!((out[0] - cands[best]).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn iterative_family_utilities_are_monotone() {
        let u = |x: &Covariates| x[0] - 0.5 * x[1].abs();
        let fam = build_iterative_family(
            Arc::new(u),
            Arc::new(Covariance::identity(2)),
            &SearchConfig {
                k_max: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fam.len(), 11);
        for i in 0..50 {
            let key = PointKey::new(1, Role::Test, i);
            let states = fam.realize(&c(&[0.0, 0.0]), &key);
            assert_eq!(states[0], c(&[0.0, 0.0]));
            for w in states.windows(2) {
                assert!(u(&w[1]) >= u(&w[0]));
            }
        }
        let zero = SearchConfig {
            k_max: 0,
            ..Default::default()
        };
        let fam0 =
            build_iterative_family(Arc::new(u), Arc::new(Covariance::identity(2)), &zero).unwrap();
        let key = PointKey::new(1, Role::Test, 0);
        assert_eq!(fam0.realize(&c(&[0.5, 0.5]), &key), vec![c(&[0.5, 0.5])]);
    }

    #[test]
    fn simulator_families_unroll() {
        let id: Arc<dyn Alteration> = Arc::new(crate::family::Identity);
        let fam = build_simulator_family(id, 3);
        let key = PointKey::new(0, Role::Test, 0);
        assert!(fam
            .realize(&c(&[2.0]), &key)
            .iter()
            .all(|s| *s == c(&[2.0])));

        let plus: Arc<dyn Alteration> =
            Arc::new(|x: &Covariates, _: &mut StreamRng| x.shifted(&[1.0]));
        let fam = build_simulator_family(plus, 2);
        assert_eq!(
            fam.realize(&c(&[0.0]), &key),
            vec![c(&[0.0]), c(&[1.0]), c(&[2.0])]
        );
    }

    #[test]
    fn gaussian_walk_matches_replay() {
        let cov = Arc::new(Covariance::diagonal(&[1.0, 9.0]).unwrap());
        let fam = build_simulator_family(Arc::new(GaussianWalk::new(cov, 0.5)), 3);
        let key = PointKey::new(77, Role::Calibration, 5);
        let states = fam.realize(&c(&[0.0, 0.0]), &key);
        let mut s = [0.0, 0.0];
        for (k, state) in states.iter().enumerate().skip(1) {
            let mut rng = key.member(k);
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            s[0] += 0.5f64.sqrt() * z0;
            s[1] += 0.5f64.sqrt() * 3.0 * z1;
            assert!((state[0] - s[0]).abs() < 1e-12 && (state[1] - s[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_misspecification_is_transparent() {
        let cov = Arc::new(Covariance::identity(1));
        let base = build_simulator_family(Arc::new(GaussianWalk::new(cov.clone(), 1.0)), 2);
        let wrapped = misspecify(&base, 0.0, cov.clone()).unwrap();
        let key = PointKey::new(5, Role::Test, 2);
        let x = c(&[0.4]);
        assert_eq!(base.realize(&x, &key), wrapped.realize(&x, &key));
        assert!(misspecify(&base, -1.0, cov).is_err());
    }

    #[test]
    fn noisy_identity_is_gaussian_around_x() {
        let cov = Arc::new(Covariance::diagonal(&[2.0]).unwrap());
        let fam = misspecify(&AlterationFamily::identity(), 0.5, cov).unwrap();
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| fam.realize(&c(&[3.0]), &PointKey::new(1, Role::Test, i))[0][0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 3.0).abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn noisy_vs_clean_identity_tv_matches_closed_form() {
        // Mean-shift variant: N(x, Σ) vs N(x + shift, Σ) with ‖shift‖_Σ = 1.
        // Monte Carlo TV = E_P[max(0, 1 − q/p)] against 2Φ(1/2) − 1.
        let cov = Arc::new(Covariance::identity(1));
        let clean = misspecify(&AlterationFamily::identity(), 1.0, cov.clone()).unwrap();
        let n = 40_000;
        let mut acc = 0.0;
        for i in 0..n {
            let v = clean.realize(&c(&[0.0]), &PointKey::new(2, Role::Test, i))[0][0];
            let log_ratio = -0.5 * (v - 1.0) * (v - 1.0) + 0.5 * v * v;
            acc += (1.0 - log_ratio.exp()).max(0.0);
        }
        let tv_mc = acc / n as f64;
        let tv = crate::metrics::gaussian_tv(1.0).unwrap();
        assert!((tv_mc - tv).abs() < 0.02, "{tv_mc} vs {tv}");
    }
}
