use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{aggregate, local_update, BroadcastPolicy, Upload};
use crate::allocation::{solve_allocation, AllocInstance, ClientProfile};
use crate::config::{ExperimentConfig, SchemeKind, Weighting};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{
    self, convergence_bound, measure_epsilon, measure_epsilon_weighted, BoundParams, RoundRecord,
};
use crate::model::{
    embed, extract, param_count, unit_mask_to_param_mask, LayeredModel, ModelShape, ParamMask,
    SubModelSpec, UnitMask,
};
use crate::rng::{self, Stream};
use crate::selection::{coverage_table, importance, select_mask, CoverageTable, SelectionStrategy};
use crate::trainer::{batch_loss_grad, local_train, TrainConfig};

/// Per-round participation and dropout decision of a scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeDecision {
    pub participating: Vec<bool>,
    pub d: Vec<f64>,
    pub strategy: StrategyKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Feddd,
    Random,
    Max,
    Delta,
    Ordered,
    /// Full upload; selection is a no-op.
    Full,
}

impl StrategyKind {
    fn to_selection(self, seed: u64) -> SelectionStrategy {
        match self {
            StrategyKind::Feddd => SelectionStrategy::Feddd,
            StrategyKind::Random => SelectionStrategy::Random { seed },
            StrategyKind::Max => SelectionStrategy::Max,
            StrategyKind::Delta => SelectionStrategy::Delta,
            StrategyKind::Ordered => SelectionStrategy::Ordered,
            StrategyKind::Full => SelectionStrategy::Ordered,
        }
    }
}

fn scheme_strategy(kind: SchemeKind) -> StrategyKind {
    match kind {
        SchemeKind::Feddd => StrategyKind::Feddd,
        SchemeKind::FedddRandom => StrategyKind::Random,
        SchemeKind::FedddMax => StrategyKind::Max,
        SchemeKind::FedddDelta => StrategyKind::Delta,
        SchemeKind::FedddOrdered => StrategyKind::Ordered,
        _ => StrategyKind::Full,
    }
}

/// Admit clients in `order` while their volume fits in the budget; clients
/// that do not fit are skipped, later smaller ones may still enter.
fn admit_under_budget(order: &[usize], volumes: &[f64], budget: f64) -> Vec<bool> {
    let mut admitted = vec![false; volumes.len()];
    let slack = 1e-9 * budget.max(1.0);
    let mut spent = 0.0;
    for &i in order {
        if spent + volumes[i] <= budget + slack {
            admitted[i] = true;
            spent += volumes[i];
        }
    }
    admitted
}

/// FedCS-style selection: fastest clients first, full uploads, under the
/// server's volume budget.
pub fn scheme_fedcs(profiles: &[ClientProfile], a_server: f64) -> Result<SchemeDecision> {
    if profiles.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let times: Vec<f64> = profiles.iter().map(|p| p.round_time(0.0)).collect();
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&x, &y| times[x].partial_cmp(&times[y]).unwrap().then(x.cmp(&y)));
    let volumes: Vec<f64> = profiles.iter().map(|p| p.size_bits).collect();
    let budget = a_server * volumes.iter().sum::<f64>();
    let admitted = admit_under_budget(&order, &volumes, budget);
    if !admitted.iter().any(|&a| a) {
        return Err(Error::Config(
            "budget admits no client; even the fastest upload does not fit".into(),
        ));
    }
    Ok(SchemeDecision {
        d: admitted.iter().map(|&a| if a { 0.0 } else { 1.0 }).collect(),
        participating: admitted,
        strategy: StrategyKind::Full,
    })
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Simplified utility-based selection: statistical utility `m_n * loss_n`
/// with a multiplicative straggler penalty `(T_pref / t_n)^alpha` for
/// clients slower than the median round time.
pub fn scheme_oort(
    profiles: &[ClientProfile],
    losses: &[f64],
    times: &[f64],
    alpha: f64,
    a_server: f64,
) -> Result<SchemeDecision> {
    if profiles.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Range("straggler penalty alpha must be >= 0".into()));
    }
    let t_pref = median(times);
    let utility: Vec<f64> = profiles
        .iter()
        .zip(losses)
        .zip(times)
        .map(|((p, &loss), &t)| {
            let stat = p.samples as f64 * loss;
            if t > t_pref {
                stat * (t_pref / t).powf(alpha)
            } else {
                stat
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&x, &y| utility[y].partial_cmp(&utility[x]).unwrap().then(x.cmp(&y)));
    let volumes: Vec<f64> = profiles.iter().map(|p| p.size_bits).collect();
    let budget = a_server * volumes.iter().sum::<f64>();
    let admitted = admit_under_budget(&order, &volumes, budget);
    if !admitted.iter().any(|&a| a) {
        return Err(Error::Config(
            "budget admits no client; even the best utility does not fit".into(),
        ));
    }
    Ok(SchemeDecision {
        d: admitted.iter().map(|&a| if a { 0.0 } else { 1.0 }).collect(),
        participating: admitted,
        strategy: StrategyKind::Full,
    })
}

/// FedDD decision: everyone participates; dropout rates come from the
/// allocator, except the bootstrap round which uploads full models.
pub fn scheme_feddd(
    profiles: &[ClientProfile],
    last_losses: Option<&[f64]>,
    total_samples: usize,
    classes: usize,
    global_size_bits: f64,
    delta: f64,
    a_server: f64,
    d_max: f64,
    strategy: StrategyKind,
) -> Result<SchemeDecision> {
    let n = profiles.len();
    let d = match last_losses {
        None => vec![0.0; n],
        Some(losses) => {
            let weights: Vec<f64> = profiles
                .iter()
                .zip(losses)
                .map(|(p, &loss)| {
                    crate::allocation::regularizer(
                        p.samples,
                        total_samples,
                        &p.dis,
                        classes,
                        p.size_bits,
                        global_size_bits,
                        loss,
                    )
                })
                .collect();
            let inst = AllocInstance::from_profiles(profiles, &weights, delta, a_server, d_max);
            solve_allocation(&inst)?.d
        }
    };
    Ok(SchemeDecision {
        participating: vec![true; n],
        d,
        strategy,
    })
}

struct ClientState {
    spec: SubModelSpec,
    sub_shape: ModelShape,
    indices: Vec<usize>,
    profile: ClientProfile,
    model: LayeredModel,
    sub_params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Milestone {
    pub target: f64,
    pub cum_time_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub l_estimate: Option<f64>,
    pub eps_max: Option<f64>,
    pub sigma: Vec<f64>,
    pub f_gap_estimate: f64,
    pub eta: f64,
    pub h: usize,
    pub k_periods: usize,
    pub step_size_ok: bool,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub final_accuracy: f64,
    pub final_per_class_acc: Vec<Option<f64>>,
    pub time_to_acc: Vec<Milestone>,
    pub per_client_final_d: Vec<f64>,
    pub per_client_mean_d: Vec<f64>,
    pub max_eps: Option<f64>,
    pub max_eps_weighted: Option<f64>,
    pub total_uploaded_bits: u64,
    pub total_downloaded_bits: u64,
    pub total_simulated_time_s: f64,
    pub bound: Option<BoundReport>,
}

pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_global: LayeredModel,
    pub summary: RunSummary,
    pub partition_manifest: String,
}

struct Monitor {
    prev: Option<(LayeredModel, LayeredModel)>,
    l_estimate: Option<f64>,
    sigma_max: Vec<f64>,
    f_initial: f64,
    f_min: f64,
}

/// Execute the full training procedure for one configuration.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let (train_ds, test_ds) = config.build_datasets()?;
    let partition = crate::data::partition(
        &train_ds,
        config.clients,
        config.partition,
        rng::derive(config.seed, Stream::Partition, 0, 0),
    )?;
    let classes = train_ds.classes;
    let global_shape = config.model_shape(train_ds.dim, classes);
    global_shape.validate()?;
    let specs = config.submodel_specs(&global_shape);
    for s in &specs {
        s.validate(&global_shape)?;
    }

    let bits = config.bits_per_param as f64;
    let sizes_bits: Vec<f64> = specs
        .iter()
        .map(|s| param_count(s, &global_shape).map(|p| p as f64 * bits))
        .collect::<Result<_>>()?;
    let samples: Vec<usize> = (0..config.clients).map(|i| partition.samples(i)).collect();
    let total_samples: usize = samples.iter().sum();
    if samples.iter().any(|&m| m == 0) {
        return Err(Error::InsufficientData(
            "every client needs at least one sample".into(),
        ));
    }
    let profiles = config.sample_profiles(&sizes_bits, &samples, &partition.proportions, &specs);
    let global_size_bits = global_shape.param_count() as f64 * bits;
    let policy = BroadcastPolicy::new(config.h)?;

    // The coverage table is computed once; sub-model structure is static, so
    // the first full-upload round fixes it for the whole run.
    let coverage = coverage_table(&specs, &global_shape)?;
    let heterogeneous = specs.iter().any(|s| !s.is_full(&global_shape));
    let coverage_arg: Option<&CoverageTable> = heterogeneous.then_some(&coverage);

    let global0 = LayeredModel::init_uniform(
        &global_shape,
        rng::derive(config.seed, Stream::Init, 0, 0),
    );
    let mut clients: Vec<ClientState> = (0..config.clients)
        .map(|i| -> Result<ClientState> {
            let spec = specs[i].clone();
            let sub_shape = spec.sub_shape(&global_shape)?;
            Ok(ClientState {
                model: extract(&global0, &spec)?,
                sub_params: sub_shape.param_count(),
                sub_shape,
                indices: partition.client_indices[i].clone(),
                profile: profiles[i].clone(),
                spec,
            })
        })
        .collect::<Result<_>>()?;

    let mut global = global0;
    let mut last_losses: Option<Vec<f64>> = None;
    let mut records: Vec<RoundRecord> = Vec::with_capacity(config.rounds);
    let mut cum_time = 0.0;
    let mut max_eps: Option<f64> = None;
    let mut max_eps_w: Option<f64> = None;
    let mut total_up: u64 = 0;
    let mut total_down: u64 = 0;
    let mut monitor = if config.bound_monitor {
        let (f0, _, _) = global_pass(&train_ds, &clients, &global)?;
        Some(Monitor {
            prev: None,
            l_estimate: None,
            sigma_max: vec![0.0; config.clients],
            f_initial: f0,
            f_min: f0,
        })
    } else {
        None
    };

    let is_feddd_family = matches!(
        config.scheme,
        SchemeKind::Feddd
            | SchemeKind::FedddRandom
            | SchemeKind::FedddMax
            | SchemeKind::FedddDelta
            | SchemeKind::FedddOrdered
    );

    for round in 1..=config.rounds {
        // 1. Scheme decision. Round 1 bootstraps every scheme with full
        //    participation and full uploads so losses and coverage exist.
        let decision = if round == 1 {
            SchemeDecision {
                participating: vec![true; config.clients],
                d: vec![0.0; config.clients],
                strategy: if is_feddd_family {
                    scheme_strategy(config.scheme)
                } else {
                    StrategyKind::Full
                },
            }
        } else {
            match config.scheme {
                SchemeKind::FedAvg => SchemeDecision {
                    participating: vec![true; config.clients],
                    d: vec![0.0; config.clients],
                    strategy: StrategyKind::Full,
                },
                SchemeKind::FedCs => scheme_fedcs(&profiles, config.a_server)?,
                SchemeKind::Oort => {
                    let times: Vec<f64> =
                        profiles.iter().map(|p| p.round_time(0.0)).collect();
                    scheme_oort(
                        &profiles,
                        last_losses.as_ref().expect("losses exist after round 1"),
                        &times,
                        config.oort_alpha,
                        config.a_server,
                    )?
                }
                _ => scheme_feddd(
                    &profiles,
                    last_losses.as_deref(),
                    total_samples,
                    classes,
                    global_size_bits,
                    config.delta,
                    config.a_server,
                    config.d_max,
                    scheme_strategy(config.scheme),
                )?,
            }
        };

        // 2. Local training for every client (selection baselines still
        //    burn the compute; their uploads are simply discarded).
        let train_results: Vec<_> = clients
            .par_iter()
            .enumerate()
            .map(|(i, st)| {
                let cfg = TrainConfig {
                    learning_rate: config.train.learning_rate,
                    epochs: config.train.epochs,
                    batch_size: config.train.batch_size,
                    seed: rng::derive(config.seed, Stream::Shuffle, i as u64, round as u64),
                };
                local_train(&st.model, &train_ds, &st.indices, &cfg)
                    .map_err(|e| e.in_round(round, i))
            })
            .collect::<Result<Vec<_>>>()?;

        // 3. Masks and uploads for participants, ascending client order.
        let mut uploads: Vec<Upload> = Vec::new();
        let mut sub_masks: Vec<Option<ParamMask>> = vec![None; config.clients];
        let mut uploaded_bits_round: u64 = 0;
        for i in 0..config.clients {
            if !decision.participating[i] {
                continue;
            }
            let st = &clients[i];
            let result = &train_results[i];
            let unit_mask: UnitMask = if decision.d[i] == 0.0 {
                UnitMask::all_selected(&st.sub_shape)
            } else {
                let scores = importance(&st.model, &result.model, coverage_arg)
                    .map_err(|e| e.in_round(round, i))?;
                let strategy = decision
                    .strategy
                    .to_selection(rng::derive(config.seed, Stream::Selection, i as u64, round as u64));
                select_mask(&st.model, &result.model, &scores, decision.d[i], &strategy)
                    .map_err(|e| e.in_round(round, i))?
            };
            let sub_mask = unit_mask_to_param_mask(&unit_mask, &st.sub_shape)
                .map_err(|e| e.in_round(round, i))?;
            uploaded_bits_round += sub_mask.count_ones() as u64 * config.bits_per_param as u64;
            let (model_g, occupancy) = embed(&result.model, &st.spec, &global_shape)
                .map_err(|e| e.in_round(round, i))?;
            let mask_model = apply_mask_embed(&sub_mask, &occupancy, &st.spec, &global_shape)?;
            uploads.push(Upload {
                model: model_g,
                mask: mask_model,
                weight: match config.weighting {
                    Weighting::DataSize => st.profile.samples as f64,
                    Weighting::Equal => 1.0,
                },
            });
            sub_masks[i] = Some(sub_mask);
        }

        // 4. Aggregate and measure the mask-induced error.
        let new_global = aggregate(&uploads, &global).map_err(|e| e.in_round(round, 0))?;
        let eps = measure_epsilon(&uploads);
        let eps_w = measure_epsilon_weighted(&uploads);
        max_eps = max_opt(max_eps, eps);
        max_eps_w = max_opt(max_eps_w, eps_w);
        global = new_global;

        // 5. Losses visible to the server this round.
        let mut losses_now: Vec<f64> = last_losses
            .clone()
            .unwrap_or_else(|| vec![0.0; config.clients]);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for i in 0..config.clients {
            if decision.participating[i] {
                losses_now[i] = train_results[i].loss;
                loss_sum += train_results[i].loss;
                loss_count += 1;
            }
        }
        let mean_loss = loss_sum / loss_count.max(1) as f64;
        last_losses = Some(losses_now);

        // 6. Broadcast and local reconciliation.
        let full_round = !is_feddd_family || policy.is_full_round(round);
        let mut downloaded_bits_round: u64 = 0;
        for i in 0..config.clients {
            let st = &mut clients[i];
            let received = extract(&global, &st.spec).map_err(|e| e.in_round(round, i))?;
            if full_round || !decision.participating[i] {
                downloaded_bits_round += st.sub_params as u64 * config.bits_per_param as u64;
                st.model = received;
            } else {
                let mask = sub_masks[i].as_ref().expect("participant has a mask");
                downloaded_bits_round += mask.count_ones() as u64 * config.bits_per_param as u64;
                st.model = local_update(&train_results[i].model, &received, mask, false)
                    .map_err(|e| e.in_round(round, i))?;
            }
        }

        // 7. Synchronous round time: the slowest participant.
        let t_server = clients
            .iter()
            .enumerate()
            .filter(|(i, _)| decision.participating[*i])
            .map(|(i, st)| st.profile.round_time(decision.d[i]))
            .fold(0.0, f64::max);
        cum_time += t_server;
        total_up += uploaded_bits_round;
        total_down += downloaded_bits_round;

        // 8. Evaluation and optional convergence monitoring.
        let (test_acc, per_class_acc) = metrics::evaluate(&global, &test_ds)?;
        let grad_norm = if let Some(mon) = monitor.as_mut() {
            let (f_now, grad, sigma) = global_pass(&train_ds, &clients, &global)?;
            mon.f_min = mon.f_min.min(f_now);
            for (s, m) in sigma.iter().zip(mon.sigma_max.iter_mut()) {
                *m = m.max(*s);
            }
            if let Some((pw, pg)) = &mon.prev {
                let dw = global.delta_from(pw).sq_norm().sqrt();
                let dg = grad.delta_from(pg).sq_norm().sqrt();
                if dw > 1e-12 {
                    let r = dg / dw;
                    mon.l_estimate = Some(mon.l_estimate.map_or(r, |b: f64| b.max(r)));
                }
            }
            let norm = grad.sq_norm().sqrt();
            mon.prev = Some((global.clone(), grad));
            Some(norm)
        } else {
            None
        };

        records.push(RoundRecord {
            round,
            t_server_s: t_server,
            cum_time_s: cum_time,
            test_acc,
            per_class_acc,
            mean_loss,
            d: decision.d.clone(),
            uploaded_bits: uploaded_bits_round,
            downloaded_bits: downloaded_bits_round,
            eps_t: eps,
            eps_weighted: eps_w,
            grad_norm,
        });
    }

    let last = records.last().expect("at least one round");
    let milestones: Vec<Milestone> = (2..=19)
        .map(|i| {
            let target = i as f64 * 0.05;
            Milestone {
                target,
                cum_time_s: records
                    .iter()
                    .find(|r| r.test_acc >= target)
                    .map(|r| r.cum_time_s),
            }
        })
        .collect();
    let n_rounds = records.len() as f64;
    let per_client_mean_d: Vec<f64> = (0..config.clients)
        .map(|i| records.iter().map(|r| r.d[i]).sum::<f64>() / n_rounds)
        .collect();

    let bound = monitor.map(|mon| {
        let k_periods = (config.rounds / config.h).max(1);
        let params = mon.l_estimate.map(|l| BoundParams {
            l_smooth: l,
            epsilon: max_eps.unwrap_or(0.0).min(1.0),
            eta: config.train.learning_rate,
            h: config.h,
            k_periods,
            sigma: mon.sigma_max.clone(),
            f_gap: (mon.f_initial - mon.f_min).max(0.0),
        });
        let value = params.as_ref().and_then(|p| convergence_bound(p).ok());
        BoundReport {
            l_estimate: mon.l_estimate,
            eps_max: max_eps,
            sigma: mon.sigma_max,
            f_gap_estimate: (mon.f_initial - mon.f_min).max(0.0),
            eta: config.train.learning_rate,
            h: config.h,
            k_periods,
            step_size_ok: params
                .as_ref()
                .map(|p| p.eta < p.step_size_limit())
                .unwrap_or(false),
            value,
        }
    });

    let summary = RunSummary {
        config: config.clone(),
        final_accuracy: last.test_acc,
        final_per_class_acc: last.per_class_acc.clone(),
        time_to_acc: milestones,
        per_client_final_d: last.d.clone(),
        per_client_mean_d,
        max_eps,
        max_eps_weighted: max_eps_w,
        total_uploaded_bits: total_up,
        total_downloaded_bits: total_down,
        total_simulated_time_s: cum_time,
        bound,
    };

    Ok(RunOutput {
        records,
        final_global: global,
        summary,
        partition_manifest: partition.manifest_json(),
    })
}

/// Embed a sub-coordinate parameter mask into global coordinates: set bits
/// only where the sub-model occupies the global model and the sub mask is
/// set.
fn apply_mask_embed(
    sub_mask: &ParamMask,
    occupancy: &ParamMask,
    spec: &SubModelSpec,
    global: &ModelShape,
) -> Result<ParamMask> {
    let mut out = occupancy.clone();
    let sub_shape = spec.sub_shape(global)?;
    for (l, spec_l) in sub_shape.0.iter().enumerate() {
        let g_in = global.0[l].in_units;
        for j in 0..spec_l.out_units {
            for i in 0..spec_l.in_units {
                out.layers[l].weights[j * g_in + i] = sub_mask.layers[l].weights[j * spec_l.in_units + i];
            }
            if spec_l.has_bias {
                out.layers[l].bias[j] = sub_mask.layers[l].bias[j];
            }
        }
    }
    Ok(out)
}

fn max_opt(current: Option<f64>, new: Option<f64>) -> Option<f64> {
    match (current, new) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Full-batch pass at the global model: weighted global loss, weighted mean
/// gradient (global coordinates), and per-client gradient deviations.
fn global_pass(
    ds: &LabeledDataset,
    clients: &[ClientState],
    global: &LayeredModel,
) -> Result<(f64, LayeredModel, Vec<f64>)> {
    let shape = global.shape();
    let per_client: Vec<(f64, LayeredModel)> = clients
        .par_iter()
        .map(|st| -> Result<(f64, LayeredModel)> {
            let sub = extract(global, &st.spec)?;
            let (loss, grad) = batch_loss_grad(&sub, ds, &st.indices)?;
            let (g, _) = embed(&grad, &st.spec, &shape)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let total: f64 = clients.iter().map(|c| c.indices.len() as f64).sum();
    let mut mean_grad = LayeredModel::zeros(&shape);
    let mut loss = 0.0;
    for ((l, g), st) in per_client.iter().zip(clients) {
        let w = st.indices.len() as f64 / total;
        loss += w * l;
        mean_grad.scaled_add(w, g);
    }
    let sigma = per_client
        .iter()
        .map(|(_, g)| g.delta_from(&mean_grad).sq_norm().sqrt())
        .collect();
    Ok((loss, mean_grad, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetConfig, SubmodelConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_config(scheme: SchemeKind) -> ExperimentConfig {
        ExperimentConfig {
            scheme,
            clients: 4,
            rounds: 6,
            h: 3,
            dataset: DatasetConfig::Synthetic {
                classes: 4,
                dims: 6,
                per_class: 30,
                test_per_class: 10,
                noise: 0.3,
            },
            partition: crate::data::PartitionMode::Iid,
            model: crate::config::ModelSettings { hidden: vec![8] },
            train: crate::config::TrainSettings {
                learning_rate: 0.1,
                epochs: 1,
                batch_size: 10,
            },
            seed: 5,
            ..Default::default()
        }
    }

    fn profile(size_bits: f64, time_scale: f64, samples: usize) -> ClientProfile {
        ClientProfile {
            freq_hz: 1e9,
            cycles_per_sample: 1e6,
            batch_size: 32,
            rate_up: 1e5 / time_scale,
            rate_down: 4e5 / time_scale,
            size_bits,
            samples,
            dis: vec![0.5, 0.5],
            spec: SubModelSpec { kept: vec![1] },
        }
    }

    #[test]
    fn fedcs_admits_by_speed_under_budget() {
        let profiles: Vec<ClientProfile> = (0..4)
            .map(|i| profile(1e5, 1.0 + i as f64, 10))
            .collect();

        let all = scheme_fedcs(&profiles, 1.0).unwrap();
        assert!(all.participating.iter().all(|&p| p));

        let two = scheme_fedcs(&profiles, 0.6).unwrap();
        assert_eq!(two.participating, vec![true, true, false, false]);
        assert_eq!(two.d, vec![0.0, 0.0, 1.0, 1.0]);

        let half = scheme_fedcs(&profiles[..2], 0.5).unwrap();
        assert_eq!(half.participating, vec![true, false]);
    }

    #[test]
    fn oort_orders_by_utility() {
        let profiles: Vec<ClientProfile> = (0..4).map(|_| profile(1e5, 1.0, 10)).collect();
        let times = vec![1.0; 4];

        // Identical clients: ties resolve by id under the same budget rule.
        let tie = scheme_oort(&profiles, &[1.0; 4], &times, 2.0, 0.6).unwrap();
        assert_eq!(tie.participating, vec![true, true, false, false]);

        // alpha = 0: pure statistical utility ordering.
        let losses = vec![0.1, 0.9, 0.5, 0.4];
        let stat = scheme_oort(&profiles, &losses, &times, 0.0, 0.5).unwrap();
        assert_eq!(stat.participating, vec![false, true, true, false]);

        // Doubling a loss never lowers the client's rank.
        let mut boosted = losses.clone();
        boosted[3] *= 2.0;
        let again = scheme_oort(&profiles, &boosted, &times, 0.0, 0.5).unwrap();
        assert_eq!(again.participating, vec![false, true, false, true]);
    }

    #[test]
    fn oort_penalizes_stragglers() {
        let profiles: Vec<ClientProfile> = (0..3).map(|_| profile(1e5, 1.0, 10)).collect();
        // Client 2 has the highest statistical utility but is 4x slower.
        let losses = vec![0.5, 0.4, 0.6];
        let times = vec![1.0, 1.0, 4.0];
        let d = scheme_oort(&profiles, &losses, &times, 2.0, 0.34).unwrap();
        assert_eq!(d.participating, vec![true, false, false]);
    }

    #[test]
    fn feddd_zero_loss_client_takes_max_dropout() {
        // delta large: the penalty term dominates, and the zero-loss client
        // is free dropout; the oracle confirms it sits at d_max.
        let profiles: Vec<ClientProfile> = vec![
            profile(1e5, 1.0, 10),
            profile(1e5, 1.2, 10),
            profile(1e5, 0.9, 10),
        ];
        let losses = vec![0.0, 2.0, 2.0];
        let decision =
            scheme_feddd(&profiles, Some(&losses), 30, 2, 3e5, 50.0, 0.6, 0.8, StrategyKind::Feddd)
                .unwrap();
        assert!(decision.participating.iter().all(|&p| p));
        assert_abs_diff_eq!(decision.d[0], 0.8, epsilon = 1e-9);

        let weights: Vec<f64> = profiles
            .iter()
            .zip(&losses)
            .map(|(p, &l)| {
                crate::allocation::regularizer(p.samples, 30, &p.dis, 2, p.size_bits, 3e5, l)
            })
            .collect();
        let inst = AllocInstance::from_profiles(&profiles, &weights, 50.0, 0.6, 0.8);
        let oracle = crate::allocation::grid_oracle(&inst, 1e-3).unwrap();
        assert!(oracle.d[0] > 0.799);
    }

    #[test]
    fn single_client_fedavg_matches_centralized_sgd() {
        let mut cfg = tiny_config(SchemeKind::FedAvg);
        cfg.clients = 1;
        cfg.rounds = 4;
        let out = run(&cfg).unwrap();

        let (train_ds, _) = cfg.build_datasets().unwrap();
        let shape = cfg.model_shape(train_ds.dim, train_ds.classes);
        let mut model = LayeredModel::init_uniform(
            &shape,
            rng::derive(cfg.seed, Stream::Init, 0, 0),
        );
        let indices: Vec<usize> = (0..train_ds.len()).collect();
        for round in 1..=cfg.rounds {
            let tc = TrainConfig {
                learning_rate: cfg.train.learning_rate,
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                seed: rng::derive(cfg.seed, Stream::Shuffle, 0, round as u64),
            };
            model = local_train(&model, &train_ds, &indices, &tc).unwrap().model;
        }
        assert_eq!(out.final_global, model);
    }

    #[test]
    fn feddd_with_full_budget_degenerates_to_fedavg() {
        let mut feddd = tiny_config(SchemeKind::Feddd);
        feddd.a_server = 1.0;
        let mut fedavg = tiny_config(SchemeKind::FedAvg);
        fedavg.a_server = 1.0;
        let a = run(&feddd).unwrap();
        let b = run(&fedavg).unwrap();
        assert_eq!(a.final_global, b.final_global);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.test_acc, rb.test_acc);
            assert_eq!(ra.uploaded_bits, rb.uploaded_bits);
            assert_abs_diff_eq!(ra.t_server_s, rb.t_server_s, epsilon = 1e-12);
            for &d in &ra.d {
                assert_abs_diff_eq!(d, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        for scheme in [SchemeKind::Feddd, SchemeKind::FedCs, SchemeKind::Oort] {
            let cfg = tiny_config(scheme);
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(a.records, b.records);
            assert_eq!(a.final_global, b.final_global);
        }
    }

    #[test]
    fn feddd_first_round_uploads_everything() {
        let cfg = tiny_config(SchemeKind::Feddd);
        let out = run(&cfg).unwrap();
        let first = &out.records[0];
        assert!(first.d.iter().all(|&d| d == 0.0));
        assert_eq!(first.eps_t, Some(0.0));
        // After round 1 the budget binds: mean dropout = 1 - a_server.
        for r in &out.records[1..] {
            let mean_d = r.mean_d();
            assert_abs_diff_eq!(mean_d, 1.0 - cfg.a_server, epsilon = 1e-6);
        }
    }

    #[test]
    fn feddd_never_skips_clients_and_baselines_do() {
        let mut cfg = tiny_config(SchemeKind::Feddd);
        cfg.a_server = 0.5;
        let out = run(&cfg).unwrap();
        for r in &out.records {
            assert_eq!(r.d.len(), cfg.clients);
            assert!(r.d.iter().all(|&d| d < 1.0));
        }

        let mut cs = tiny_config(SchemeKind::FedCs);
        cs.a_server = 0.5;
        let out = run(&cs).unwrap();
        for r in &out.records[1..] {
            assert!(r.d.iter().any(|&d| d == 1.0), "fedcs must skip someone");
        }
    }

    #[test]
    fn heterogeneous_families_run_and_cover() {
        let mut cfg = tiny_config(SchemeKind::Feddd);
        cfg.submodels = SubmodelConfig::Families {
            fractions: vec![1.0, 0.75, 0.5],
        };
        cfg.clients = 6;
        let out = run(&cfg).unwrap();
        assert_eq!(out.records.len(), cfg.rounds);
        assert!(out.records.last().unwrap().test_acc > 0.0);
    }

    #[test]
    fn bound_monitor_produces_report() {
        let mut cfg = tiny_config(SchemeKind::Feddd);
        cfg.bound_monitor = true;
        cfg.rounds = 6;
        let out = run(&cfg).unwrap();
        let bound = out.summary.bound.expect("monitor enabled");
        assert!(bound.l_estimate.is_some());
        assert_eq!(bound.sigma.len(), cfg.clients);
        assert!(out.records.iter().all(|r| r.grad_norm.is_some()));
    }
}
