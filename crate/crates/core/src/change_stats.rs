//! The hypothesis bank: one robust-filter chain per candidate change step k
//! (mode α before k, mode β from k on) plus the no-change chain.
//!
//! Each chain accumulates Σᵢ log Λ̂ᵢ — the log ratio of its predictive
//! likelihood against the no-change chain's. From those sums the bank forms
//! the prior-weighted Shiryaev statistic
//! L̂ₙ = Σₖ πₖ exp(cumₖ) / P(ν > n), the posterior change probability
//! pₙ = L̂ₙ/(1+L̂ₙ), and the CUSUM statistic Tₙ = maxₖ cumₖ. All ratio
//! arithmetic stays in the log domain.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::dynamics::{ChangePrior, DiscreteMap, DualModeModel, Mode};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sigmoid};
use crate::robust_filter::{
    predict, predictive_log_likelihood, vb_update, FilterParams, GaussianBelief,
    IndicatorPosterior, SigmaPointRule,
};
use crate::sensing::ObservationModel;

/// Below this chain count the per-step loop stays serial; forking rayon
/// tasks for a handful of cheap chains costs more than it saves.
const PAR_CHAIN_THRESHOLD: usize = 48;

/// One filter trajectory under a fixed change hypothesis.
#[derive(Clone)]
pub struct HypothesisChain {
    /// Candidate change step k ≥ 1; `None` is the no-change hypothesis.
    pub change_index: Option<usize>,
    pub belief: GaussianBelief,
    pub indicators: IndicatorPosterior,
    /// Σ_{i=k}^n log Λ̂ᵢ⁽ᵏ⁾, identically 0 for the no-change chain.
    pub cum_log_ratio: f64,
}

/// Per-step output of [`HypothesisBank::advance`].
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: usize,
    /// log L̂ₙ (−∞ before any change chain exists).
    pub log_shiryaev: f64,
    /// pₙ = L̂ₙ/(1+L̂ₙ) ∈ [0, 1].
    pub posterior: f64,
    /// Tₙ = maxₖ cumₖ over the retained chains.
    pub cusum: f64,
    pub n_chains: usize,
    /// k maximizing the cumulative log ratio, if any chain is retained.
    pub argmax_change: Option<usize>,
    /// Chains dropped this step after a filter failure.
    pub dropped_chains: usize,
    pub wall_secs: f64,
}

/// Everything recorded for one realization.
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    /// True change step; `None` when the realization never switches.
    pub true_change: Option<usize>,
    pub steps: Vec<StepStats>,
    pub tau_shiryaev: Option<usize>,
    pub tau_cusum: Option<usize>,
}

/// Bank-level knobs.
#[derive(Debug, Clone, Copy)]
pub struct BankConfig {
    /// Maximum number of retained change chains (`None` = unlimited).
    pub window: Option<usize>,
    pub params: FilterParams,
    pub rule: SigmaPointRule,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self { window: Some(200), params: FilterParams::default(), rule: SigmaPointRule::default() }
    }
}

pub struct HypothesisBank {
    map_alpha: DiscreteMap,
    map_beta: DiscreteMap,
    obs: ObservationModel,
    prior: ChangePrior,
    cfg: BankConfig,
    infinity: HypothesisChain,
    chains: Vec<HypothesisChain>,
    step: usize,
}

fn advance_chain(
    chain: &mut HypothesisChain,
    y: &DVector<f64>,
    map: &DiscreteMap,
    obs: &ObservationModel,
    params: &FilterParams,
    rule: &SigmaPointRule,
    log_lik_infinity: f64,
) -> Result<()> {
    let predicted = predict(&chain.belief, map, params, rule)?;
    let log_lik = predictive_log_likelihood(&predicted, y, obs, rule)?;
    let update = vb_update(&predicted, y, obs, params, rule)?;
    chain.belief = update.belief;
    chain.indicators = update.indicators;
    chain.cum_log_ratio += log_lik - log_lik_infinity;
    Ok(())
}

impl HypothesisBank {
    pub fn new(
        model: &DualModeModel,
        obs: ObservationModel,
        prior: ChangePrior,
        initial: GaussianBelief,
        cfg: BankConfig,
    ) -> Result<Self> {
        if initial.dim() != model.dim_state() {
            return Err(Error::DimensionMismatch {
                expected: model.dim_state(),
                got: initial.dim(),
            });
        }
        if let Some(w) = cfg.window {
            if w == 0 {
                return Err(Error::InvalidParameter("window must be positive".into()));
            }
        }
        let indicators = IndicatorPosterior::from_prior(&obs);
        Ok(Self {
            map_alpha: model.discretize(Mode::Alpha),
            map_beta: model.discretize(Mode::Beta),
            obs,
            prior,
            cfg,
            infinity: HypothesisChain {
                change_index: None,
                belief: initial,
                indicators,
                cum_log_ratio: 0.0,
            },
            chains: Vec::new(),
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn prior(&self) -> &ChangePrior {
        &self.prior
    }

    pub fn infinity_chain(&self) -> &HypothesisChain {
        &self.infinity
    }

    pub fn chains(&self) -> impl Iterator<Item = &HypothesisChain> {
        self.chains.iter()
    }

    /// Consume observation y_n (n = current step + 1). The no-change chain
    /// advances under mode α; a fresh chain with k = n spawns from the
    /// no-change posterior of step n−1; every change chain advances under
    /// mode β and accumulates its log ratio against the no-change chain.
    /// A failing change chain is dropped with a diagnostic count; a failure
    /// of the no-change chain is fatal.
    pub fn advance(&mut self, y: &DVector<f64>) -> Result<StepStats> {
        let started = Instant::now();
        if y.len() != self.obs.dim_obs() {
            return Err(Error::DimensionMismatch {
                expected: self.obs.dim_obs(),
                got: y.len(),
            });
        }

        let previous_infinity_belief = self.infinity.belief.clone();

        let predicted = predict(&self.infinity.belief, &self.map_alpha, &self.cfg.params, &self.cfg.rule)?;
        let log_lik_infinity =
            predictive_log_likelihood(&predicted, y, &self.obs, &self.cfg.rule)?;
        let update = vb_update(&predicted, y, &self.obs, &self.cfg.params, &self.cfg.rule)?;
        self.infinity.belief = update.belief;
        self.infinity.indicators = update.indicators;

        self.step += 1;
        self.chains.push(HypothesisChain {
            change_index: Some(self.step),
            belief: previous_infinity_belief,
            indicators: IndicatorPosterior::from_prior(&self.obs),
            cum_log_ratio: 0.0,
        });

        let outcomes: Vec<Result<()>> = {
            let (map, obs, params, rule) =
                (&self.map_beta, &self.obs, &self.cfg.params, &self.cfg.rule);
            if self.chains.len() >= PAR_CHAIN_THRESHOLD {
                self.chains
                    .par_iter_mut()
                    .with_min_len(8)
                    .map(|c| advance_chain(c, y, map, obs, params, rule, log_lik_infinity))
                    .collect()
            } else {
                self.chains
                    .iter_mut()
                    .map(|c| advance_chain(c, y, map, obs, params, rule, log_lik_infinity))
                    .collect()
            }
        };
        let mut keep = outcomes.iter().map(|r| r.is_ok());
        let before = self.chains.len();
        self.chains.retain(|_| keep.next().unwrap());
        let dropped = before - self.chains.len();

        let log_shiryaev = self.log_shiryaev_statistic();
        let posterior = sigmoid(log_shiryaev);
        let (cusum, argmax_change) = self.cusum_with_argmax();
        let n_chains = self.chains.len();

        self.prune();

        Ok(StepStats {
            step: self.step,
            log_shiryaev,
            posterior,
            cusum,
            n_chains,
            argmax_change,
            dropped_chains: dropped,
            wall_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// log Σₖ πₖ exp(cumₖ) over the retained chains, before dividing by the
    /// prior tail. Strictly increasing step over step whenever every chain's
    /// per-step ratio exceeds one.
    pub fn log_prior_weighted_sum(&self) -> f64 {
        let terms: Vec<f64> = self
            .chains
            .iter()
            .map(|c| {
                self.prior.log_mass(c.change_index.expect("change chain has an index"))
                    + c.cum_log_ratio
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// log L̂ₙ, recomputed from scratch over the retained chains.
    pub fn log_shiryaev_statistic(&self) -> f64 {
        self.log_prior_weighted_sum() - self.prior.log_tail(self.step)
    }

    /// pₙ = L̂ₙ/(1+L̂ₙ); 0 before the first observation.
    pub fn posterior_probability(&self) -> f64 {
        sigmoid(self.log_shiryaev_statistic())
    }

    /// Tₙ = maxₖ cumₖ (−∞ when no chain is retained).
    pub fn cusum_statistic(&self) -> f64 {
        self.cusum_with_argmax().0
    }

    fn cusum_with_argmax(&self) -> (f64, Option<usize>) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = None;
        for chain in &self.chains {
            if chain.cum_log_ratio > best {
                best = chain.cum_log_ratio;
                arg = chain.change_index;
            }
        }
        (best, arg)
    }

    /// Enforce the window by dropping the chain with the smallest prior-
    /// weighted likelihood πₖ·exp(cumₖ).
    fn prune(&mut self) {
        let Some(window) = self.cfg.window else { return };
        while self.chains.len() > window {
            let (idx, _) = self
                .chains
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    (i, self.prior.log_mass(c.change_index.unwrap()) + c.cum_log_ratio)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("window > 0 guarantees a candidate");
            self.chains.remove(idx);
        }
    }
}
