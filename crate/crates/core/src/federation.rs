//! The synchronous server loop.
//!
//! Each round: sample `S_t` uniformly without replacement, broadcast `w_t`,
//! run local updates, aggregate with the weights computed at the end of the
//! previous round, write the reported losses into the loss cache, and (ARFL
//! only) re-solve the weights from the cache.
//!
//! Clients report the loss of the model they *received*, and only selected
//! clients refresh their cache entry, so the weights always trail the global
//! model by at least one round.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{default_krum_f, AggregationRule, ClientContribution};
use crate::dataset::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, ModelArch, ParamVector, TrainConfig};
use crate::rng::{self, tag};
use crate::solver::{solve_weights, SolverInput, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    pub train: TrainConfig,
    pub rule: AggregationRule,
    /// |S_t|; capped at the number of clients.
    pub clients_per_round: usize,
    /// Absolute λ (not a multiple of M).
    pub lambda: f64,
    /// Run client updates on the rayon pool.
    pub parallel: bool,
}

impl FederationConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        self.train.validate()?;
        self.rule.validate()?;
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round", "must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda_multiple", "resolved λ must be finite and > 0"));
        }
        if let AggregationRule::Mkrum { f, m } = self.rule {
            let n = self.clients_per_round.min(num_clients);
            let f = f.unwrap_or_else(|| default_krum_f(n));
            if n < f + 3 {
                return Err(Error::config(
                    "rule.f",
                    format!("Multi-Krum with f = {f} needs at least {} clients per round, got {n}", f + 3),
                ));
            }
            if let Some(m) = m {
                if m == 0 || m > n - f - 2 {
                    return Err(Error::config("rule.m", format!("must lie in 1..={}", n - f - 2)));
                }
            }
        }
        Ok(())
    }
}

/// Last loss each client reported, and the round it arrived in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCache {
    pub losses: Vec<f64>,
    pub last_updated_round: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: u64,
    pub global_params: ParamVector,
    pub alpha: WeightVector,
    pub loss_cache: LossCache,
    server_rng: ChaCha8Rng,
}

/// Clients selected for one round, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub selected: Vec<usize>,
}

/// What happened in one call to [`run_round`].
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u64,
    pub selected: Vec<usize>,
    /// Losses reported by the selected clients, in `selected` order.
    pub reported_losses: Vec<f64>,
    /// The selected clients carried zero ARFL weight; the model was held.
    pub aggregation_skipped: bool,
}

fn sample_counts(clients: &[ClientDataset]) -> Vec<usize> {
    clients.iter().map(ClientDataset::sample_count).collect()
}

fn weights_for(rule: &AggregationRule, losses: &[f64], counts: &[usize], lambda: f64) -> Result<WeightVector> {
    match rule {
        AggregationRule::Arfl => {
            Ok(solve_weights(&SolverInput::new(losses.to_vec(), counts.to_vec(), lambda))?.weights)
        }
        _ => Ok(WeightVector::proportional(counts)),
    }
}

/// Seeded `w_0`, a loss cache filled by evaluating `w_0` on every client,
/// and the initial weights (closed form for ARFL, `m_i / M` otherwise).
pub fn initialize(clients: &[ClientDataset], arch: &ModelArch, cfg: &FederationConfig) -> Result<ServerState> {
    if clients.is_empty() {
        return Err(Error::config("partition.num_clients", "at least one client is required"));
    }
    arch.validate()?;
    cfg.validate(clients.len())?;
    if let Some(c) = clients.iter().find(|c| c.data.is_empty()) {
        return Err(Error::config("partition", format!("client {} has no samples", c.client_id)));
    }
    let global_params = ParamVector::init(arch, cfg.train.seed);
    let losses = map_clients(cfg.parallel, clients, |c| model::empirical_loss(&global_params, arch, &c.data))?;
    let alpha = weights_for(&cfg.rule, &losses, &sample_counts(clients), cfg.lambda)?;
    Ok(ServerState {
        round: 0,
        global_params,
        alpha,
        loss_cache: LossCache {
            last_updated_round: vec![0; losses.len()],
            losses,
        },
        server_rng: rng::stream(cfg.train.seed, &[tag::SERVER]),
    })
}

/// Applies `f` to each client, in parallel if asked; results stay in client
/// order either way.
fn map_clients<T, F>(parallel: bool, clients: &[ClientDataset], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&ClientDataset) -> Result<T> + Sync,
{
    if parallel {
        clients.par_iter().map(&f).collect()
    } else {
        clients.iter().map(f).collect()
    }
}

/// Uniform sample of `min(clients_per_round, N)` clients without replacement.
pub fn plan_round(state: &mut ServerState, num_clients: usize, clients_per_round: usize) -> RoundPlan {
    let k = clients_per_round.min(num_clients);
    let mut selected = index::sample(&mut state.server_rng, num_clients, k).into_vec();
    selected.sort_unstable();
    RoundPlan { selected }
}

/// One synchronous round of the server loop.
pub fn run_round(
    state: &mut ServerState,
    clients: &[ClientDataset],
    arch: &ModelArch,
    cfg: &FederationConfig,
) -> Result<RoundOutcome> {
    let round = state.round + 1;
    let plan = plan_round(state, clients.len(), cfg.clients_per_round);

    let w_t = &state.global_params;
    let update = |&i: &usize| model::client_update(clients[i].client_id, w_t, arch, &clients[i].data, &cfg.train, round);
    let updates: Vec<(ParamVector, f64)> = if cfg.parallel {
        plan.selected.par_iter().map(update).collect::<Result<_>>()?
    } else {
        plan.selected.iter().map(update).collect::<Result<_>>()?
    };

    let contribs: Vec<ClientContribution> = plan
        .selected
        .iter()
        .zip(&updates)
        .map(|(&i, (params, _))| ClientContribution {
            client_id: clients[i].client_id,
            params: params.clone(),
            sample_count: clients[i].sample_count(),
            weight: state.alpha.as_slice()[i],
        })
        .collect();

    let aggregation_skipped = match cfg.rule.aggregate(&contribs) {
        Ok(w) => {
            state.global_params = w;
            false
        }
        Err(Error::ZeroMassRound) => true,
        Err(e) => return Err(e),
    };

    let mut reported_losses = Vec::with_capacity(updates.len());
    for (&i, (_, loss)) in plan.selected.iter().zip(&updates) {
        state.loss_cache.losses[i] = *loss;
        state.loss_cache.last_updated_round[i] = round;
        reported_losses.push(*loss);
    }
    if cfg.rule == AggregationRule::Arfl {
        state.alpha = weights_for(&cfg.rule, &state.loss_cache.losses, &sample_counts(clients), cfg.lambda)?;
    }
    state.round = round;

    Ok(RoundOutcome {
        round,
        selected: plan.selected,
        reported_losses,
        aggregation_skipped,
    })
}

/// Per-round metrics exported for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub selected: Vec<usize>,
    pub alpha: Vec<f64>,
    pub cached_losses: Vec<f64>,
    /// Σ m_i L_i(w) / M over all clients' training data.
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub aggregation_skipped: bool,
}

/// Drives the server loop over a fixed federation and records metrics.
pub struct Simulation<'a> {
    clients: &'a [ClientDataset],
    test: Option<&'a Dataset>,
    arch: ModelArch,
    cfg: FederationConfig,
    eval_interval: u64,
    state: ServerState,
}

impl<'a> Simulation<'a> {
    pub fn new(
        clients: &'a [ClientDataset],
        test: Option<&'a Dataset>,
        arch: ModelArch,
        cfg: FederationConfig,
        eval_interval: u64,
    ) -> Result<Self> {
        if eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be at least 1"));
        }
        let state = initialize(clients, &arch, &cfg)?;
        Ok(Self {
            clients,
            test,
            arch,
            cfg,
            eval_interval,
            state,
        })
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    /// Record for the current state, with metrics if `evaluate` is set.
    pub fn record(&self, selected: Vec<usize>, aggregation_skipped: bool, evaluate: bool) -> Result<RoundRecord> {
        let (train_loss, test_loss, test_accuracy) = if evaluate {
            let w = &self.state.global_params;
            let losses = map_clients(self.cfg.parallel, self.clients, |c| {
                model::empirical_loss(w, &self.arch, &c.data).map(|l| l * c.sample_count() as f64)
            })?;
            let total: usize = self.clients.iter().map(ClientDataset::sample_count).sum();
            let train = losses.iter().sum::<f64>() / total as f64;
            match self.test {
                Some(test) => {
                    let (loss, acc) = model::evaluate(w, &self.arch, test)?;
                    (Some(train), Some(loss), Some(acc))
                }
                None => (Some(train), None, None),
            }
        } else {
            (None, None, None)
        };
        Ok(RoundRecord {
            round: self.state.round,
            selected,
            alpha: self.state.alpha.as_slice().to_vec(),
            cached_losses: self.state.loss_cache.losses.clone(),
            train_loss,
            test_loss,
            test_accuracy,
            aggregation_skipped,
        })
    }

    pub fn step(&mut self, force_eval: bool) -> Result<RoundRecord> {
        let outcome = run_round(&mut self.state, self.clients, &self.arch, &self.cfg)?;
        let evaluate = force_eval || outcome.round % self.eval_interval == 0;
        self.record(outcome.selected, outcome.aggregation_skipped, evaluate)
    }

    /// The initialization record followed by `rounds` round records. The
    /// final round is always evaluated.
    pub fn run(&mut self, rounds: u64) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(rounds as usize + 1);
        records.push(self.record(Vec::new(), false, true)?);
        for r in 1..=rounds {
            records.push(self.step(r == rounds)?);
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, partition_iid, SyntheticKind, SyntheticSpec};

    fn clients(n: usize) -> (Vec<ClientDataset>, ModelArch) {
        let spec = SyntheticSpec {
            kind: SyntheticKind::GaussianBlobs,
            num_classes: 3,
            samples_per_class: 20,
            input_dim: 2,
            class_separation: 3.0,
            seed: 5,
        };
        let data = generate_synthetic(&spec).unwrap();
        let arch = ModelArch::Logistic {
            input_dim: 2,
            num_classes: 3,
        };
        (partition_iid(&data, n, 1).unwrap(), arch)
    }

    fn cfg(rule: AggregationRule, per_round: usize) -> FederationConfig {
        FederationConfig {
            train: TrainConfig {
                learning_rate: 0.1,
                local_epochs: 1,
                batch_size: 8,
                seed: 3,
            },
            rule,
            clients_per_round: per_round,
            lambda: 60.0,
            parallel: false,
        }
    }

    #[test]
    fn identical_clients_get_proportional_weights() {
        let (cs, arch) = clients(1);
        let copies: Vec<ClientDataset> = (0..3).map(|i| ClientDataset::new(i, cs[0].data.clone())).collect();
        let state = initialize(&copies, &arch, &cfg(AggregationRule::Arfl, 3)).unwrap();
        let l = &state.loss_cache.losses;
        assert!(l.iter().all(|&x| x == l[0]));
        for a in state.alpha.as_slice() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_weight_is_one() {
        let (cs, arch) = clients(1);
        let state = initialize(&cs, &arch, &cfg(AggregationRule::Arfl, 1)).unwrap();
        assert_eq!(state.alpha.as_slice(), &[1.0]);
    }

    #[test]
    fn initialization_is_seeded() {
        let (cs, arch) = clients(4);
        let c = cfg(AggregationRule::Arfl, 2);
        assert_eq!(initialize(&cs, &arch, &c).unwrap(), initialize(&cs, &arch, &c).unwrap());
    }

    #[test]
    fn zero_epoch_round_refreshes_cache_only() {
        let (cs, arch) = clients(1);
        let mut c = cfg(AggregationRule::Arfl, 1);
        c.train.local_epochs = 0;
        let mut state = initialize(&cs, &arch, &c).unwrap();
        let w0 = state.global_params.clone();
        let out = run_round(&mut state, &cs, &arch, &c).unwrap();
        assert_eq!(out.selected, vec![0]);
        assert_eq!(state.global_params, w0);
        assert_eq!(state.loss_cache.last_updated_round, vec![1]);
        assert_eq!(state.alpha.as_slice(), &[1.0]);
    }

    #[test]
    fn fedavg_single_client_takes_local_model() {
        let (cs, arch) = clients(1);
        let c = cfg(AggregationRule::Fedavg, 1);
        let mut state = initialize(&cs, &arch, &c).unwrap();
        let (expected, _) = model::client_update(0, &state.global_params, &arch, &cs[0].data, &c.train, 1).unwrap();
        run_round(&mut state, &cs, &arch, &c).unwrap();
        assert_eq!(state.global_params, expected);
    }

    #[test]
    fn only_selected_clients_refresh_the_cache() {
        let (cs, arch) = clients(6);
        let c = cfg(AggregationRule::Arfl, 2);
        let mut state = initialize(&cs, &arch, &c).unwrap();
        for _ in 0..5 {
            let before = state.loss_cache.clone();
            let out = run_round(&mut state, &cs, &arch, &c).unwrap();
            assert_eq!(out.selected.len(), 2);
            for i in 0..6 {
                if !out.selected.contains(&i) {
                    assert_eq!(state.loss_cache.losses[i], before.losses[i]);
                    assert_eq!(state.loss_cache.last_updated_round[i], before.last_updated_round[i]);
                } else {
                    assert_eq!(state.loss_cache.last_updated_round[i], out.round);
                }
            }
        }
    }

    #[test]
    fn zero_mass_round_holds_the_model() {
        let (cs, arch) = clients(3);
        let c = cfg(AggregationRule::Arfl, 1);
        let mut state = initialize(&cs, &arch, &c).unwrap();
        // Put all weight on a client that will not be selected next round.
        let plan = plan_round(&mut state.clone(), 3, 1);
        let mut alpha = vec![0.0; 3];
        alpha[(plan.selected[0] + 1) % 3] = 1.0;
        state.alpha = WeightVector::new(alpha).unwrap();
        let w0 = state.global_params.clone();
        let out = run_round(&mut state, &cs, &arch, &c).unwrap();
        assert!(out.aggregation_skipped);
        assert_eq!(state.global_params, w0);
        assert_eq!(state.loss_cache.last_updated_round[out.selected[0]], 1);
    }

    #[test]
    fn mkrum_needs_enough_clients() {
        let (cs, arch) = clients(4);
        assert!(initialize(&cs, &arch, &cfg(AggregationRule::mkrum(), 2)).is_err());
        assert!(initialize(&cs, &arch, &cfg(AggregationRule::mkrum(), 4)).is_ok());
    }

    #[test]
    fn zero_rounds_yield_only_the_initial_record() {
        let (cs, arch) = clients(3);
        let mut sim = Simulation::new(&cs, None, arch, cfg(AggregationRule::Arfl, 3), 1).unwrap();
        let records = sim.run(0).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].round, 0);
        assert!(records[0].selected.is_empty());
        assert!(records[0].train_loss.is_some());
    }
}
