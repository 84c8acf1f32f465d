//! Iterative carving of a blackbox into selector-gated interpretable experts
//! plus a residual, and mixture inference.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::diffcore::{kd_loss_per_sample, Mlp, OptimState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::folx::{self, FOLRule};
use crate::hashing::json_hash;
use crate::models::{
    accuracy, load_json, save_json, train_projector, Blackbox, EntropyExpert, Projector, ProjectorConfig, Selector,
};
use crate::rng::substream;

/// Selection probability at or above which a selector claims a sample.
pub const ROUTE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarveConfig {
    /// Maximum number of experts.
    pub k: usize,
    /// Target coverage per iteration.
    pub tau: Vec<f64>,
    pub lambda_s: f64,
    pub alpha_kd: f64,
    pub temp_kd: f64,
    pub lambda_lens: f64,
    pub temp_lens: f64,
    pub expert_hidden: usize,
    pub selector_hidden: usize,
    pub lr_expert: f64,
    pub lr_residual: f64,
    /// Expert-only epochs on the residual-weighted distillation loss before the
    /// selector starts training.
    pub warmup_epochs: usize,
    pub epochs_expert: usize,
    pub epochs_residual: usize,
    pub batch_size: usize,
    pub coverage_stop: f64,
    pub coverage_tolerance: f64,
    pub concept_gate: f64,
    pub projector_steps: usize,
    pub projector_lr: f64,
    pub attention_threshold: f64,
    pub seed: u64,
}

impl Default for CarveConfig {
    fn default() -> Self {
        CarveConfig {
            k: 3,
            tau: vec![0.4, 0.3, 0.3],
            lambda_s: 32.0,
            alpha_kd: 0.9,
            temp_kd: 10.0,
            lambda_lens: 1e-4,
            temp_lens: 0.7,
            expert_hidden: 10,
            selector_hidden: 10,
            lr_expert: 0.01,
            lr_residual: 0.001,
            warmup_epochs: 20,
            epochs_expert: 60,
            epochs_residual: 20,
            batch_size: 32,
            coverage_stop: 0.9,
            coverage_tolerance: 0.05,
            concept_gate: 0.7,
            projector_steps: 300,
            projector_lr: 0.05,
            attention_threshold: folx::DEFAULT_ATTENTION_THRESHOLD,
            seed: 0,
        }
    }
}

impl CarveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.tau.len() < self.k {
            return Err(Error::invalid(format!("tau lists {} targets for k = {}", self.tau.len(), self.k)));
        }
        if let Some(t) = self.tau.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::invalid(format!("every tau must lie in (0, 1], got {t}")));
        }
        if !(self.lambda_s > 0.0) {
            return Err(Error::invalid(format!("lambda_s must be positive, got {}", self.lambda_s)));
        }
        if !(self.coverage_stop > 0.0 && self.coverage_stop <= 1.0) {
            return Err(Error::invalid(format!("coverage_stop must lie in (0, 1], got {}", self.coverage_stop)));
        }
        if !(0.0..=1.0).contains(&self.alpha_kd) || !(self.temp_kd > 0.0) || !(self.temp_lens > 0.0) {
            return Err(Error::invalid("alpha_kd must lie in [0, 1] and temperatures must be positive"));
        }
        if self.batch_size == 0 || self.expert_hidden == 0 {
            return Err(Error::invalid("batch_size and expert_hidden must be positive"));
        }
        if !(self.lr_expert > 0.0) || !(self.lr_residual > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn projector_config(&self) -> ProjectorConfig {
        ProjectorConfig { gate: self.concept_gate, steps: self.projector_steps, lr: self.projector_lr }
    }
}

/// `π^k · Π_{i<k} (1 − π^i)` for 1-based `k`.
pub fn cumulative_weight(pis: &[f64], k: usize) -> Result<f64> {
    check_probabilities(pis)?;
    if k == 0 || k > pis.len() {
        return Err(Error::invalid(format!("iteration {k} outside 1..={}", pis.len())));
    }
    Ok(pis[k - 1] * residual_weight(&pis[..k - 1]))
}

/// `Π_i (1 − π^i)`, the mass left for the residual.
pub fn residual_weight(pis: &[f64]) -> f64 {
    pis.iter().map(|p| 1.0 - p).product()
}

fn check_probabilities(pis: &[f64]) -> Result<()> {
    if let Some(p) = pis.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("selector output {p} outside [0, 1]")));
    }
    Ok(())
}

/// Mean loss divided by mean coverage.
pub fn selective_risk(losses: &[f64], coverages: &[f64]) -> Result<f64> {
    if losses.is_empty() || losses.len() != coverages.len() {
        return Err(Error::invalid(format!(
            "selective risk needs equally many losses and coverages ({} vs {})",
            losses.len(),
            coverages.len()
        )));
    }
    let m = losses.len() as f64;
    let zeta = coverages.iter().sum::<f64>() / m;
    if zeta <= 0.0 {
        return Err(Error::Degenerate("selector covers nothing (coverage 0)".into()));
    }
    Ok(losses.iter().sum::<f64>() / m / zeta)
}

/// `r^k = f^{k−1} − g^k`.
pub fn residual_logits(f_prev: &Tensor, g: &Tensor) -> Result<Tensor> {
    f_prev.zip_map(g, |a, b| a - b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    /// 1-based expert index.
    Expert(usize),
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub sample: usize,
    pub destination: Destination,
    pub pis: Vec<f64>,
}

/// Smallest `k` with `π^k ≥ 0.5`, else the residual.
pub fn route_from_pis(pis: &[f64]) -> Destination {
    pis.iter().position(|&p| p >= ROUTE_THRESHOLD).map_or(Destination::Residual, |k| Destination::Expert(k + 1))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub final_objective: f64,
    pub final_residual_loss: f64,
    /// Agreement of the expert with `f^{k−1}` on its hard-routed training samples.
    pub expert_fidelity: Option<f64>,
    pub expert_accuracy: Option<f64>,
    pub newly_routed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub k: usize,
    pub tau: f64,
    pub selector: Selector,
    pub expert: EntropyExpert,
    /// `h^k`; `f^k = h^k ∘ Φ`.
    pub residual_head: Mlp,
    /// Soft coverage `ζ^k`: share of the mass left by earlier selectors that
    /// `π^k` claims on the training split.
    pub coverage: f64,
    /// Fraction of training samples hard-routed to this expert.
    pub hard_coverage: f64,
    pub coverage_shortfall: bool,
    pub metrics: IterationMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarveState {
    pub blackbox: Blackbox,
    pub projector: Projector,
    /// Dataset concept indices forming the concept vector, in order.
    pub concept_ids: Vec<usize>,
    pub iterations: Vec<Iteration>,
    pub cumulative_coverage: f64,
    pub phi_hash: String,
}

/// Φ and concept vectors for every dataset row, computed once per state.
pub struct Cache {
    pub repr: Tensor,
    pub concepts: Tensor,
}

impl CarveState {
    pub fn new(blackbox: Blackbox, projector: Projector) -> Result<Self> {
        if projector.repr_dim() != blackbox.repr_dim() {
            return Err(Error::shape(
                "CarveState::new",
                format!("projector reads {} features, blackbox emits {}", projector.repr_dim(), blackbox.repr_dim()),
            ));
        }
        let concept_ids = projector.included_indices();
        let phi_hash = blackbox.phi_hash()?;
        Ok(CarveState { blackbox, projector, concept_ids, iterations: Vec::new(), cumulative_coverage: 0.0, phi_hash })
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn concept_names(&self, ds: &Dataset) -> Vec<String> {
        self.concept_ids.iter().map(|&j| ds.concept_names[j].clone()).collect()
    }

    /// Labels like `c3=core_3` for each concept-vector position.
    pub fn concept_labels(&self, ds: &Dataset) -> Vec<String> {
        self.concept_ids.iter().map(|&j| format!("c{j}={}", ds.concept_names[j])).collect()
    }

    pub fn cache(&self, ds: &Dataset) -> Result<Cache> {
        let rows: Vec<usize> = (0..ds.len()).collect();
        let repr = self.blackbox.represent_rows(ds, &rows)?;
        let concepts = self.projector.project(&repr)?;
        Ok(Cache { repr, concepts })
    }

    /// Head of `f^k` (`k = 0` is the blackbox head).
    pub fn head(&self, k: usize) -> &Mlp {
        if k == 0 {
            &self.blackbox.head
        } else {
            &self.iterations[k - 1].residual_head
        }
    }

    /// Selector outputs `[n, K]` for concept vectors `c`.
    pub fn selector_outputs(&self, c: &Tensor) -> Result<Tensor> {
        let n = c.rows();
        let k = self.iterations.len();
        let mut out = Tensor::zeros(n, k);
        for (j, it) in self.iterations.iter().enumerate() {
            let p = it.selector.forward(c)?;
            for i in 0..n {
                out.set(i, j, p.get(i, 0));
            }
        }
        Ok(out)
    }

    pub fn route(&self, c: &[f64]) -> Result<Destination> {
        let c = Tensor::row_vector(c.to_vec());
        let pis = self.selector_outputs(&c)?;
        Ok(route_from_pis(pis.row(0)))
    }

    pub fn routes(&self, cache: &Cache, rows: &[usize]) -> Result<Vec<Route>> {
        let c = cache.concepts.select_rows(rows);
        let pis = self.selector_outputs(&c)?;
        Ok(rows
            .iter()
            .enumerate()
            .map(|(i, &sample)| Route { sample, destination: route_from_pis(pis.row(i)), pis: pis.row(i).to_vec() })
            .collect())
    }
}

fn batch_column(values: &[f64], rows: &[usize]) -> Tensor {
    Tensor::column_vector(rows.iter().map(|&r| values[r]).collect())
}

/// Runs iteration `k` (1-based) on the training split: jointly fits `π^k` and
/// `g^k` under the coverage penalty, then fits the residual head `h^k`.
pub fn carve_iteration(state: &mut CarveState, cache: &Cache, ds: &Dataset, k: usize, cfg: &CarveConfig) -> Result<()> {
    cfg.validate()?;
    if k != state.iterations.len() + 1 {
        return Err(Error::StageOrder(format!(
            "iteration {k} requested but {} iterations are complete",
            state.iterations.len()
        )));
    }
    if k > cfg.k {
        return Err(Error::invalid(format!("iteration {k} exceeds k = {}", cfg.k)));
    }
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training rows"));
    }
    let tau = cfg.tau[k - 1];
    let m = state.n_concepts();
    let n_classes = ds.n_classes;
    let n_all = ds.len();

    let prev_pis = state.selector_outputs(&cache.concepts)?;
    let prior: Vec<f64> = (0..n_all).map(|i| residual_weight(prev_pis.row(i))).collect();
    let f_prev = state.head(k - 1).forward(&cache.repr)?;

    let mut init = substream(cfg.seed, &format!("carve/{k}/init"));
    let mut shuffle = substream(cfg.seed, &format!("carve/{k}/shuffle"));
    let mut selector = Selector::new(m, cfg.selector_hidden, &mut init)?;
    let mut expert = EntropyExpert::new(m, n_classes, cfg.expert_hidden, cfg.temp_lens, cfg.lambda_lens, &mut init)?;
    let mut order = train.clone();

    let mut opt = OptimState::adam(cfg.lr_expert)?;
    let names = expert.param_names("expert");
    for epoch in 0..cfg.warmup_epochs {
        order.shuffle(&mut shuffle);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mass: f64 = rows.iter().map(|&r| prior[r]).sum();
            if mass <= 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let c = tape.constant(cache.concepts.select_rows(rows));
            let ex = expert.bind(&mut tape);
            let (logits, entropy) = ex.forward(&mut tape, c)?;
            let kd = kd_loss_per_sample(
                &mut tape,
                logits,
                &f_prev.select_rows(rows),
                &ds.labels_of(rows),
                cfg.alpha_kd,
                cfg.temp_kd,
            )?;
            let pr = tape.constant(batch_column(&prior, rows).map(|v| v / mass));
            let weighted = tape.mul(pr, kd)?;
            let loss = tape.sum(weighted);
            let ent = tape.scale(entropy, cfg.lambda_lens);
            let obj = tape.add(loss, ent)?;
            let vars = ex.vars();
            let mut params = expert.params_mut();
            crate::diffcore::apply_step(&tape, obj, &vars, &mut params, &names, &mut opt)
                .map_err(|e| annotate(e, k, "warmup", epoch, b))?;
        }
    }

    let mut opt = OptimState::adam(cfg.lr_expert)?;
    let mut final_objective = f64::NAN;

    for epoch in 0..cfg.epochs_expert {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mass: f64 = rows.iter().map(|&r| prior[r]).sum();
            if mass <= 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let c = tape.constant(cache.concepts.select_rows(rows));
            let sel = selector.body.bind(&mut tape);
            let ex = expert.bind(&mut tape);
            let pi = sel.forward(&mut tape, c)?;
            let pr = tape.constant(batch_column(&prior, rows));
            let w = tape.mul(pi, pr)?;
            let (logits, entropy) = ex.forward(&mut tape, c)?;
            let kd = kd_loss_per_sample(
                &mut tape,
                logits,
                &f_prev.select_rows(rows),
                &ds.labels_of(rows),
                cfg.alpha_kd,
                cfg.temp_kd,
            )?;
            let weighted = tape.mul(w, kd)?;
            let mean_loss = tape.sum(weighted);
            let covered = tape.sum(w);
            if tape.value(covered).item()? <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "selector {k} collapsed to zero coverage (epoch {epoch}, batch {b})"
                )));
            }
            let risk = tape.div_scalar(mean_loss, covered)?;
            let zeta = tape.scale(covered, 1.0 / mass);
            let gap = tape.scale(zeta, -1.0);
            let gap = tape.add_scalar(gap, tau);
            let gap = tape.relu(gap);
            let pen = tape.square(gap);
            let pen = tape.scale(pen, cfg.lambda_s);
            let ent = tape.scale(entropy, cfg.lambda_lens);
            let obj = tape.add(risk, pen)?;
            let obj = tape.add(obj, ent)?;
            let mut vars: Vec<Var> = sel.vars();
            vars.extend(ex.vars());
            total += step(&tape, obj, &vars, &mut selector, &mut expert, &mut opt)
                .map_err(|e| annotate(e, k, "expert", epoch, b))?;
            batches += 1;
        }
        final_objective = total / batches.max(1) as f64;
    }

    let pis = selector.probabilities(&cache.concepts)?;
    let g_all = expert.forward(&cache.concepts)?;
    let n_train = train.len() as f64;
    let remaining: f64 = train.iter().map(|&i| prior[i]).sum();
    if remaining <= 0.0 {
        return Err(Error::Degenerate(format!("nothing left for iteration {k}: earlier selectors cover every sample")));
    }
    let coverage = train.iter().map(|&i| pis[i] * prior[i]).sum::<f64>() / remaining;

    // residual head h^k, initialized from h^{k−1}
    let mut gated = g_all.clone();
    for i in 0..n_all {
        for v in gated.row_mut(i) {
            *v *= pis[i];
        }
    }
    let teacher = residual_logits(&f_prev, &gated)?;
    let rest: Vec<f64> = (0..n_all).map(|i| prior[i] * (1.0 - pis[i])).collect();
    let mut head = state.head(k - 1).clone();
    let names = head.param_names(&format!("residual{k}"));
    let mut opt = OptimState::adam(cfg.lr_residual)?;
    let mut final_residual_loss = f64::NAN;
    for epoch in 0..cfg.epochs_residual {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let wsum: f64 = rows.iter().map(|&r| rest[r]).sum();
            if wsum <= 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let h = head.bind(&mut tape);
            let x = tape.constant(cache.repr.select_rows(rows));
            let logits = h.forward(&mut tape, x)?;
            let kd = kd_loss_per_sample(
                &mut tape,
                logits,
                &teacher.select_rows(rows),
                &ds.labels_of(rows),
                cfg.alpha_kd,
                cfg.temp_kd,
            )?;
            let wv = tape.constant(batch_column(&rest, rows).map(|v| v / wsum));
            let weighted = tape.mul(wv, kd)?;
            let loss = tape.sum(weighted);
            let vars = h.vars();
            let mut params = head.params_mut();
            total += crate::diffcore::apply_step(&tape, loss, &vars, &mut params, &names, &mut opt)
                .map_err(|e| annotate(e, k, "residual", epoch, b))?;
            batches += 1;
        }
        final_residual_loss = total / batches.max(1) as f64;
    }

    // hard routing accounting on the training split
    let mut all_pis = prev_pis.clone();
    all_pis = append_column(&all_pis, &pis)?;
    let mut newly = Vec::new();
    let mut routed_any = 0usize;
    for &i in &train {
        match route_from_pis(all_pis.row(i)) {
            Destination::Expert(d) => {
                routed_any += 1;
                if d == k {
                    newly.push(i);
                }
            }
            Destination::Residual => {}
        }
    }
    let expert_pred: Vec<usize> = newly.iter().map(|&i| crate::diffcore::argmax(g_all.row(i))).collect();
    let teacher_pred: Vec<usize> = newly.iter().map(|&i| crate::diffcore::argmax(f_prev.row(i))).collect();
    let metrics = IterationMetrics {
        final_objective,
        final_residual_loss,
        expert_fidelity: (!newly.is_empty()).then(|| accuracy(&expert_pred, &teacher_pred)),
        expert_accuracy: (!newly.is_empty()).then(|| accuracy(&expert_pred, &ds.labels_of(&newly))),
        newly_routed: newly.len(),
    };
    state.iterations.push(Iteration {
        k,
        tau,
        selector,
        expert,
        residual_head: head,
        coverage,
        hard_coverage: newly.len() as f64 / n_train,
        coverage_shortfall: coverage < tau - cfg.coverage_tolerance,
        metrics,
    });
    state.cumulative_coverage = routed_any as f64 / n_train;
    Ok(())
}

fn append_column(a: &Tensor, col: &[f64]) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let mut data = Vec::with_capacity(n * (k + 1));
    for (i, &c) in col.iter().enumerate().take(n) {
        data.extend_from_slice(a.row(i));
        data.push(c);
    }
    Tensor::matrix(n, k + 1, data)
}

fn step(
    tape: &Tape,
    obj: Var,
    vars: &[Var],
    selector: &mut Selector,
    expert: &mut EntropyExpert,
    opt: &mut OptimState,
) -> Result<f64> {
    let mut names = selector.body.param_names("selector");
    names.extend(expert.param_names("expert"));
    let mut params = selector.body.params_mut();
    params.extend(expert.params_mut());
    crate::diffcore::apply_step(tape, obj, vars, &mut params, &names, opt)
}

fn annotate(e: Error, k: usize, stage: &str, epoch: usize, batch: usize) -> Error {
    let at = format!("iteration {k} {stage} stage, epoch {epoch}, batch {batch}");
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{at}: {m}")),
        Error::NonFiniteGradient { name, index } => Error::NonFiniteGradient { name: format!("{name} ({at})"), index },
        other => other,
    }
}

/// Trains the projector and runs up to `k` iterations, stopping once the
/// hard training coverage reaches `coverage_stop`.
pub fn carve(bb: &Blackbox, ds: &Dataset, cfg: &CarveConfig) -> Result<CarveState> {
    cfg.validate()?;
    let projector = train_projector(bb, ds, &cfg.projector_config())?;
    let mut state = CarveState::new(bb.clone(), projector)?;
    let cache = state.cache(ds)?;
    for k in 1..=cfg.k {
        carve_iteration(&mut state, &cache, ds, k, cfg)?;
        if state.cumulative_coverage >= cfg.coverage_stop {
            break;
        }
    }
    if state.blackbox.phi_hash()? != state.phi_hash {
        return Err(Error::invalid("feature extractor changed during carving"));
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Moie,
    MoiePlusR,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample: usize,
    pub destination: Destination,
    /// `None` marks a residual sample in [`Mode::Moie`].
    pub label: Option<usize>,
}

pub fn moie_predict(state: &CarveState, cache: &Cache, rows: &[usize], mode: Mode) -> Result<Vec<Prediction>> {
    let routes = state.routes(cache, rows)?;
    let c = cache.concepts.select_rows(rows);
    let expert_logits = state.iterations.iter().map(|it| it.expert.forward(&c)).collect::<Result<Vec<_>>>()?;
    let final_head = state.head(state.iterations.len());
    let residual = match mode {
        Mode::MoiePlusR => Some(final_head.forward(&cache.repr.select_rows(rows))?),
        Mode::Moie => None,
    };
    Ok(routes
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let label = match r.destination {
                Destination::Expert(k) => Some(crate::diffcore::argmax(expert_logits[k - 1].row(i))),
                Destination::Residual => residual.as_ref().map(|t| crate::diffcore::argmax(t.row(i))),
            };
            Prediction { sample: r.sample, destination: r.destination, label }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationStats {
    pub destination: Destination,
    pub count: usize,
    pub coverage: f64,
    pub accuracy: Option<f64>,
    pub proportional_accuracy: f64,
    /// Accuracy of the original blackbox `f^0` on the same samples.
    pub blackbox_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub split: Split,
    pub n: usize,
    pub experts: Vec<DestinationStats>,
    pub residual: DestinationStats,
    pub moie_coverage: f64,
    /// Accuracy on covered samples only.
    pub moie_accuracy: Option<f64>,
    pub moie_r_accuracy: f64,
    pub blackbox_accuracy: f64,
    pub iteration_coverage: Vec<f64>,
}

pub fn evaluate(state: &CarveState, cache: &Cache, ds: &Dataset, split: Split) -> Result<IterationReport> {
    let rows = ds.indices(split);
    if rows.is_empty() {
        return Err(Error::invalid(format!("split {split} is empty")));
    }
    let n = rows.len();
    let preds = moie_predict(state, cache, &rows, Mode::MoiePlusR)?;
    let f0 = state.blackbox.head.forward(&cache.repr.select_rows(&rows))?.argmax_rows();
    let labels = ds.labels_of(&rows);

    let stats = |dest: Destination| {
        let idx: Vec<usize> = (0..n).filter(|&i| preds[i].destination == dest).collect();
        let count = idx.len();
        let coverage = count as f64 / n as f64;
        let acc = (count > 0)
            .then(|| idx.iter().filter(|&&i| preds[i].label == Some(labels[i])).count() as f64 / count as f64);
        let bb = (count > 0).then(|| idx.iter().filter(|&&i| f0[i] == labels[i]).count() as f64 / count as f64);
        DestinationStats {
            destination: dest,
            count,
            coverage,
            accuracy: acc,
            proportional_accuracy: acc.unwrap_or(0.0) * coverage,
            blackbox_accuracy: bb,
        }
    };
    let experts: Vec<DestinationStats> = (1..=state.iterations.len()).map(|k| stats(Destination::Expert(k))).collect();
    let residual = stats(Destination::Residual);
    let covered: Vec<usize> = (0..n).filter(|&i| preds[i].destination != Destination::Residual).collect();
    let moie_accuracy = (!covered.is_empty())
        .then(|| covered.iter().filter(|&&i| preds[i].label == Some(labels[i])).count() as f64 / covered.len() as f64);
    let moie_r_accuracy = (0..n).filter(|&i| preds[i].label == Some(labels[i])).count() as f64 / n as f64;
    Ok(IterationReport {
        split,
        n,
        moie_coverage: covered.len() as f64 / n as f64,
        experts,
        residual,
        moie_accuracy,
        moie_r_accuracy,
        blackbox_accuracy: accuracy(&f0, &labels),
        iteration_coverage: state.iterations.iter().map(|it| it.coverage).collect(),
    })
}

/// Rules of expert `k` (1-based), distilled on the rows of `rows` routed to it.
pub fn expert_rules(
    state: &CarveState,
    cache: &Cache,
    rows: &[usize],
    k: usize,
    threshold: f64,
) -> Result<Vec<FOLRule>> {
    let routed: Vec<usize> = state
        .routes(cache, rows)?
        .into_iter()
        .filter(|r| r.destination == Destination::Expert(k))
        .map(|r| r.sample)
        .collect();
    if routed.is_empty() {
        return Ok(Vec::new());
    }
    folx::extract_fol(&state.iterations[k - 1].expert, &cache.concepts.select_rows(&routed), threshold)
}

/// Rules for every expert, distilled on its training samples.
pub fn all_rules(state: &CarveState, cache: &Cache, ds: &Dataset, threshold: f64) -> Result<Vec<Vec<FOLRule>>> {
    let train = ds.indices(Split::Train);
    (1..=state.iterations.len()).map(|k| expert_rules(state, cache, &train, k, threshold)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub dataset_hash: String,
    pub phi_hash: String,
    pub iterations: usize,
    pub cumulative_coverage: f64,
    pub checkpoints: Vec<Checkpoint>,
}

fn write_component<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<Checkpoint> {
    let file = format!("{name}.json");
    let path = dir.join(&file);
    save_json(value, &path)?;
    let bytes = std::fs::read(&path)?;
    Ok(Checkpoint { name: name.to_string(), file, sha256: crate::hashing::bytes_hash(&bytes) })
}

/// Writes one JSON per component plus `manifest.json` into `dir`.
pub fn save_state(state: &CarveState, cfg: &CarveConfig, ds: &Dataset, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut checkpoints =
        vec![write_component(dir, "blackbox", &state.blackbox)?, write_component(dir, "projector", &state.projector)?];
    let selectors: Vec<&Selector> = state.iterations.iter().map(|it| &it.selector).collect();
    let experts: Vec<&EntropyExpert> = state.iterations.iter().map(|it| &it.expert).collect();
    checkpoints.push(write_component(dir, "selectors", &selectors)?);
    checkpoints.push(write_component(dir, "experts", &experts)?);
    checkpoints.push(write_component(dir, "iterations", &state.iterations)?);
    if let Some(mdn) = &state.blackbox.mdn {
        checkpoints.push(write_component(dir, "mdn", mdn)?);
    }
    let manifest = Manifest {
        config_hash: json_hash(cfg)?,
        dataset_hash: ds.hash()?,
        phi_hash: state.phi_hash.clone(),
        iterations: state.iterations.len(),
        cumulative_coverage: state.cumulative_coverage,
        checkpoints,
    };
    save_json(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads a state written by [`save_state`], checking every checkpoint hash.
pub fn load_state(dir: &Path) -> Result<(CarveState, Manifest)> {
    let manifest: Manifest = load_json(&dir.join("manifest.json"))?;
    for cp in &manifest.checkpoints {
        let bytes = std::fs::read(dir.join(&cp.file))?;
        if crate::hashing::bytes_hash(&bytes) != cp.sha256 {
            return Err(Error::invalid(format!("checkpoint {} does not match its manifest hash", cp.file)));
        }
    }
    let blackbox: Blackbox = load_json(&dir.join("blackbox.json"))?;
    let projector: Projector = load_json(&dir.join("projector.json"))?;
    let iterations: Vec<Iteration> = load_json(&dir.join("iterations.json"))?;
    let mut state = CarveState::new(blackbox, projector)?;
    if state.phi_hash != manifest.phi_hash {
        return Err(Error::invalid("blackbox checkpoint does not match the manifest"));
    }
    state.iterations = iterations;
    state.cumulative_coverage = manifest.cumulative_coverage;
    Ok((state, manifest))
}
