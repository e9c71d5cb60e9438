use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Example;
use crate::error::Result;
use crate::family::Alteration;
use crate::models::{BaseModel, Learner};
use crate::rng::{derive_seed, PointKey, Role};

pub const DEFAULT_RRM_ROUNDS: usize = 10;

/// Which covariates each round's alteration is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RrmVariant {
    /// `X⁽ᵏ⁺¹⁾ = Δ_{h_k}(X^tr)`: always alter the original training covariates.
    #[default]
    FromOriginal,
    /// `X⁽ᵏ⁺¹⁾ = Δ_{h_k}(X⁽ᵏ⁾)`: keep altering the previous round's covariates.
    Iterative,
}

/// Repeated risk minimization.
///
/// Round `k` fits a model on `X⁽ᵏ⁾`, asks `alteration_for` for the strongest
/// alteration against that model, and applies it pointwise to obtain
/// `X⁽ᵏ⁺¹⁾`. Labels are never altered. Returns the model fit on
/// `X⁽ʳᵒᵘⁿᵈˢ⁾`; `rounds = 0` is a plain fit.
pub fn repeated_risk_minimization<B>(
    train: &[Example],
    learner: &Learner,
    alteration_for: B,
    rounds: usize,
    seed: u64,
    variant: RrmVariant,
) -> Result<BaseModel>
where
    B: Fn(&BaseModel) -> Result<Arc<dyn Alteration>>,
{
    let mut current: Vec<Example> = train.to_vec();
    for round in 0..rounds {
        let model = learner.fit(&current)?;
        let alteration = alteration_for(&model)?;
        let round_seed = derive_seed(&[seed, round as u64]);
        let source = match variant {
            RrmVariant::FromOriginal => train,
            RrmVariant::Iterative => current.as_slice(),
        };
        let next: Vec<Example> = source
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let mut rng = PointKey::new(round_seed, Role::Train, i).member(0);
                Example::new(alteration.alter(&e.x, &mut rng), e.y)
            })
            .collect();
        current = next;
    }
    learner.fit(&current)
}
