//! Posterior estimation in the generator's latent space: Gaussian
//! physics-informed likelihood, Hamiltonian Monte Carlo, No-U-Turn sampling
//! with dual-averaging step-size adaptation, and pushforward statistics.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Tape};
use crate::gan::{GanError, PriorModel};
use crate::params::ParamStore;
use crate::stochastic::VarTag;

#[derive(thiserror::Error, Debug)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] GanError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::autodiff::EvalError),
    #[error("observation has non-positive noise std {0}")]
    BadSigma(f64),
}

/// One noisy measurement of a model variable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observation {
    pub var: VarTag,
    pub coord: Vec<f64>,
    pub value: f64,
    pub sigma: f64,
}

impl Observation {
    pub fn new(var: VarTag, coord: &[f64], value: f64, sigma: f64) -> Self {
        Observation {
            var,
            coord: coord.to_vec(),
            value,
            sigma,
        }
    }
}

/// Anything exposing an unnormalized log density and its gradient.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Write the gradient into `grad` and return log p(x) (up to a constant).
    fn logp_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Latent posterior `log P(xi | D) = log P(D | xi) - |xi|^2 / 2 + const`
/// evaluated through the prior model's prediction graph.
pub struct GraphPosterior {
    graph: Graph,
    tape: Tape,
    store: ParamStore,
    xi: NodeId,
    loglik: NodeId,
    logpost: NodeId,
    dim: usize,
    bind: Bindings,
}

impl GraphPosterior {
    pub fn new(
        model: &PriorModel,
        store: &ParamStore,
        obs: &[Observation],
    ) -> Result<GraphPosterior, InferenceError> {
        for o in obs {
            if o.sigma <= 0.0 {
                return Err(InferenceError::BadSigma(o.sigma));
            }
        }
        let mut graph = Graph::new();
        let xi = graph.input_diff("xi", (1, model.latent_dim));

        // Group observations per variable into one prediction block each.
        let mut groups: Vec<(VarTag, Vec<&Observation>)> = Vec::new();
        for o in obs {
            match groups.iter_mut().find(|(v, _)| *v == o.var) {
                Some((_, list)) => list.push(o),
                None => groups.push((o.var, vec![o])),
            }
        }

        let mut terms: Vec<NodeId> = Vec::new();
        let mut constant = 0.0;
        for (var, list) in &groups {
            let d = list[0].coord.len();
            let mut coords = Array2::zeros((list.len(), d));
            let mut y = Array2::zeros((1, list.len()));
            let mut w = Array2::zeros((1, list.len()));
            for (i, o) in list.iter().enumerate() {
                for (c, v) in o.coord.iter().enumerate() {
                    coords[(i, c)] = *v;
                }
                y[(0, i)] = o.value;
                w[(0, i)] = 1.0 / (2.0 * o.sigma * o.sigma);
                constant += -0.5 * (2.0 * std::f64::consts::PI * o.sigma * o.sigma).ln();
            }
            let pred = model.predict(&mut graph, store, xi, *var, &coords)?;
            let yc = graph.constant(y);
            let wc = graph.constant(w);
            let diff = graph.sub(pred, yc);
            let sq = graph.square(diff);
            let weighted = graph.mul(sq, wc);
            let s = graph.sum(weighted);
            terms.push(graph.neg(s));
        }

        let loglik = match terms.split_first() {
            None => graph.scalar(constant),
            Some((first, rest)) => {
                let mut acc = *first;
                for t in rest {
                    acc = graph.add(acc, *t);
                }
                graph.add_scalar(acc, constant)
            }
        };
        let sq = graph.square(xi);
        let ssum = graph.sum(sq);
        let prior = graph.scale(ssum, -0.5);
        let logpost = graph.add(loglik, prior);

        // parameters are fixed during sampling: drop their gradient paths
        // and evaluate the input-independent subgraph once
        graph.freeze_params();
        let mut tape = Tape::new(&graph);
        tape.freeze_statics();
        Ok(GraphPosterior {
            graph,
            tape,
            store: store.clone(),
            xi,
            loglik,
            logpost,
            dim: model.latent_dim,
            bind: Bindings::new(),
        })
    }

    fn eval(&mut self, x: &[f64]) -> (f64, f64) {
        self.bind.insert(
            "xi".into(),
            Array2::from_shape_vec((1, self.dim), x.to_vec()).unwrap(),
        );
        match self.tape.forward(&self.graph, &self.store, &self.bind) {
            Ok(()) => (
                self.tape.scalar_value(self.loglik),
                self.tape.scalar_value(self.logpost),
            ),
            Err(_) => (f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn log_likelihood(&mut self, x: &[f64]) -> f64 {
        self.eval(x).0
    }

    pub fn log_posterior(&mut self, x: &[f64]) -> f64 {
        self.eval(x).1
    }
}

impl LogDensity for GraphPosterior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (_, lp) = self.eval(x);
        if !lp.is_finite() {
            grad.fill(f64::NAN);
            return lp;
        }
        self.tape.backward(&self.graph, self.logpost);
        let a = self.tape.adjoint(self.xi);
        for (g, v) in grad.iter_mut().zip(a.iter()) {
            *g = *v;
        }
        lp
    }
}

/// Log likelihood of observations under a fixed latent (one-shot
/// convenience; samplers use [`GraphPosterior`] directly).
pub fn log_likelihood(
    model: &PriorModel,
    store: &ParamStore,
    xi: &[f64],
    obs: &[Observation],
) -> Result<f64, InferenceError> {
    let mut p = GraphPosterior::new(model, store, obs)?;
    Ok(p.log_likelihood(xi))
}

/// Unnormalized log posterior (likelihood plus standard-normal latent prior).
pub fn log_posterior(
    model: &PriorModel,
    store: &ParamStore,
    xi: &[f64],
    obs: &[Observation],
) -> Result<f64, InferenceError> {
    let mut p = GraphPosterior::new(model, store, obs)?;
    Ok(p.log_posterior(xi))
}

/// Kick-drift-kick leapfrog with unit mass matrix. `grad` must hold the
/// log-density gradient at `q` on entry and holds the gradient at the final
/// position on return. Returns the final log density, or `None` when a
/// non-finite value was produced.
pub fn leapfrog<D: LogDensity + ?Sized>(
    density: &mut D,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    n_steps: usize,
) -> Option<f64> {
    let mut logp = f64::NAN;
    for _ in 0..n_steps {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
        for (qi, pi) in q.iter_mut().zip(p.iter()) {
            *qi += eps * pi;
        }
        logp = density.logp_grad(q, grad);
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
    }
    Some(logp)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Method {
    Hmc {
        step_size: f64,
        n_leapfrog: usize,
    },
    Nuts {
        initial_step: f64,
        target_accept: f64,
        max_depth: usize,
    },
}

impl Method {
    pub fn nuts_default() -> Method {
        Method::Nuts {
            initial_step: 1.0,
            target_accept: 0.6,
            max_depth: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    pub burn_in: usize,
    pub draws: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn nuts(seed: u64) -> Self {
        SamplerConfig {
            method: Method::nuts_default(),
            burn_in: 2000,
            draws: 1000,
            seed,
        }
    }

    pub fn hmc(step_size: f64, n_leapfrog: usize, seed: u64) -> Self {
        SamplerConfig {
            method: Method::Hmc {
                step_size,
                n_leapfrog,
            },
            burn_in: 2000,
            draws: 1000,
            seed,
        }
    }
}

/// Retained latent samples plus sampler diagnostics.
#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub draws: Array2<f64>,
    /// Post-burn-in acceptance: accepted fraction for vanilla trajectories,
    /// mean Metropolis probability across tree leaves for adaptive paths.
    pub acceptance: f64,
    pub step_size: f64,
    /// `hmc` or `nuts-slice` (slice-variable tree sampling).
    pub method: String,
    pub divergences: usize,
    pub max_depth_hits: usize,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.draws.ncols()
    }

    pub fn component_mean_std(&self, c: usize) -> (f64, f64) {
        let n = self.draws.nrows();
        let col = self.draws.column(c);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (mean, var.sqrt())
    }
}

fn draw_momentum(dim: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// Vanilla HMC with Metropolis correction and fixed step size.
pub fn sample_hmc<D: LogDensity + ?Sized>(density: &mut D, cfg: &SamplerConfig) -> PosteriorDraws {
    let Method::Hmc {
        step_size,
        n_leapfrog,
    } = cfg.method
    else {
        panic!("sample_hmc requires the hmc method");
    };
    let dim = density.dim();
    let mut rng = crate::seeded_rng(cfg.seed, "hmc-chain");
    let mut q: Vec<f64> = draw_momentum(dim, &mut rng);
    let mut grad = vec![0.0; dim];
    let mut logp = density.logp_grad(&q, &mut grad);
    let mut draws = Array2::zeros((cfg.draws, dim));
    let mut accepted_post = 0usize;
    let mut total_post = 0usize;
    let mut divergences = 0usize;

    for it in 0..cfg.burn_in + cfg.draws {
        let p0 = draw_momentum(dim, &mut rng);
        let h0 = logp - kinetic(&p0);
        let mut q_new = q.clone();
        let mut p_new = p0.clone();
        let mut grad_new = grad.clone();
        let result = leapfrog(
            density,
            &mut q_new,
            &mut p_new,
            &mut grad_new,
            step_size,
            n_leapfrog,
        );
        let post = it >= cfg.burn_in;
        if post {
            total_post += 1;
        }
        match result {
            Some(logp_new) => {
                let h1 = logp_new - kinetic(&p_new);
                let log_accept = (h1 - h0).min(0.0);
                let u: f64 = rng.gen_range(0.0..1.0);
                if u.ln() < log_accept {
                    q = q_new;
                    grad = grad_new;
                    logp = logp_new;
                    if post {
                        accepted_post += 1;
                    }
                }
            }
            None => {
                divergences += 1;
            }
        }
        if post {
            draws
                .row_mut(it - cfg.burn_in)
                .assign(&ndarray::ArrayView1::from(&q[..]));
        }
    }
    let acceptance = accepted_post as f64 / total_post.max(1) as f64;
    let mut warnings = Vec::new();
    if acceptance < 0.05 {
        warnings.push(format!(
            "post-burn-in acceptance {acceptance:.3} below 0.05; decrease the step size"
        ));
    }
    PosteriorDraws {
        draws,
        acceptance,
        step_size,
        method: "hmc".into(),
        divergences,
        max_depth_hits: 0,
        warnings,
    }
}

const DELTA_MAX: f64 = 1000.0;

struct TreeState {
    q_minus: Vec<f64>,
    p_minus: Vec<f64>,
    grad_minus: Vec<f64>,
    logp_minus: f64,
    q_plus: Vec<f64>,
    p_plus: Vec<f64>,
    grad_plus: Vec<f64>,
    logp_plus: f64,
    q_prime: Vec<f64>,
    grad_prime: Vec<f64>,
    logp_prime: f64,
    n_prime: u64,
    s_prime: bool,
    alpha: f64,
    n_alpha: u64,
    diverged: bool,
}

fn no_u_turn(q_minus: &[f64], q_plus: &[f64], p_minus: &[f64], p_plus: &[f64]) -> bool {
    let mut dot_m = 0.0;
    let mut dot_p = 0.0;
    for i in 0..q_minus.len() {
        let d = q_plus[i] - q_minus[i];
        dot_m += d * p_minus[i];
        dot_p += d * p_plus[i];
    }
    dot_m >= 0.0 && dot_p >= 0.0
}

#[allow(clippy::too_many_arguments)]
fn build_tree<D: LogDensity + ?Sized>(
    density: &mut D,
    q: &[f64],
    p: &[f64],
    grad: &[f64],
    logp: f64,
    log_u: f64,
    direction: i8,
    depth: usize,
    eps: f64,
    h0: f64,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> TreeState {
    if depth == 0 {
        let mut q1 = q.to_vec();
        let mut p1 = p.to_vec();
        let mut g1 = grad.to_vec();
        let step = eps * direction as f64;
        match leapfrog(density, &mut q1, &mut p1, &mut g1, step, 1) {
            Some(logp1) => {
                let h1 = logp1 - kinetic(&p1);
                let n_prime = u64::from(log_u <= h1);
                let s_prime = log_u < h1 + DELTA_MAX;
                let alpha = (h1 - h0).min(0.0).exp();
                TreeState {
                    q_minus: q1.clone(),
                    p_minus: p1.clone(),
                    grad_minus: g1.clone(),
                    logp_minus: logp1,
                    q_plus: q1.clone(),
                    p_plus: p1.clone(),
                    grad_plus: g1.clone(),
                    logp_plus: logp1,
                    q_prime: q1,
                    grad_prime: g1,
                    logp_prime: logp1,
                    n_prime,
                    s_prime,
                    alpha,
                    n_alpha: 1,
                    diverged: !s_prime,
                }
            }
            None => TreeState {
                q_minus: q.to_vec(),
                p_minus: p.to_vec(),
                grad_minus: grad.to_vec(),
                logp_minus: logp,
                q_plus: q.to_vec(),
                p_plus: p.to_vec(),
                grad_plus: grad.to_vec(),
                logp_plus: logp,
                q_prime: q.to_vec(),
                grad_prime: grad.to_vec(),
                logp_prime: logp,
                n_prime: 0,
                s_prime: false,
                alpha: 0.0,
                n_alpha: 1,
                diverged: true,
            },
        }
    } else {
        let mut tree = build_tree(
            density,
            q,
            p,
            grad,
            logp,
            log_u,
            direction,
            depth - 1,
            eps,
            h0,
            rng,
        );
        if !tree.s_prime {
            return tree;
        }
        let other = if direction == -1 {
            let (q2, p2, g2, lp2) = (
                tree.q_minus.clone(),
                tree.p_minus.clone(),
                tree.grad_minus.clone(),
                tree.logp_minus,
            );
            build_tree(
                density,
                &q2,
                &p2,
                &g2,
                lp2,
                log_u,
                direction,
                depth - 1,
                eps,
                h0,
                rng,
            )
        } else {
            let (q2, p2, g2, lp2) = (
                tree.q_plus.clone(),
                tree.p_plus.clone(),
                tree.grad_plus.clone(),
                tree.logp_plus,
            );
            build_tree(
                density,
                &q2,
                &p2,
                &g2,
                lp2,
                log_u,
                direction,
                depth - 1,
                eps,
                h0,
                rng,
            )
        };
        if direction == -1 {
            tree.q_minus = other.q_minus.clone();
            tree.p_minus = other.p_minus.clone();
            tree.grad_minus = other.grad_minus.clone();
            tree.logp_minus = other.logp_minus;
        } else {
            tree.q_plus = other.q_plus.clone();
            tree.p_plus = other.p_plus.clone();
            tree.grad_plus = other.grad_plus.clone();
            tree.logp_plus = other.logp_plus;
        }
        let total = tree.n_prime + other.n_prime;
        if other.n_prime > 0 {
            let ratio = other.n_prime as f64 / total.max(1) as f64;
            if rng.gen_range(0.0..1.0) < ratio {
                tree.q_prime = other.q_prime.clone();
                tree.grad_prime = other.grad_prime.clone();
                tree.logp_prime = other.logp_prime;
            }
        }
        tree.alpha += other.alpha;
        tree.n_alpha += other.n_alpha;
        tree.n_prime = total;
        tree.s_prime = other.s_prime
            && no_u_turn(&tree.q_minus, &tree.q_plus, &tree.p_minus, &tree.p_plus);
        tree.diverged = tree.diverged || other.diverged;
        tree
    }
}

/// No-U-Turn sampling (slice-variable tree sampling) with dual-averaging
/// step-size adaptation during burn-in, frozen afterwards. Dual-averaging
/// constants: gamma = 0.05, t0 = 10, kappa = 0.75.
pub fn sample_nuts<D: LogDensity + ?Sized>(density: &mut D, cfg: &SamplerConfig) -> PosteriorDraws {
    let Method::Nuts {
        initial_step,
        target_accept,
        max_depth,
    } = cfg.method
    else {
        panic!("sample_nuts requires the nuts method");
    };
    assert!(
        target_accept > 0.0 && target_accept < 1.0,
        "target acceptance in (0,1)"
    );
    let dim = density.dim();
    let mut rng = crate::seeded_rng(cfg.seed, "nuts-chain");
    let mut q: Vec<f64> = draw_momentum(dim, &mut rng);
    let mut grad = vec![0.0; dim];
    let mut logp = density.logp_grad(&q, &mut grad);

    let mut eps = initial_step;
    let mu = (10.0 * initial_step).ln();
    let mut h_bar = 0.0;
    let mut log_eps_bar = 0.0f64;
    let gamma = 0.05;
    let t0 = 10.0;
    let kappa = 0.75;

    let mut draws = Array2::zeros((cfg.draws, dim));
    let mut alpha_sum_post = 0.0;
    let mut alpha_count_post = 0usize;
    let mut divergences = 0usize;
    let mut max_depth_hits = 0usize;

    for it in 0..cfg.burn_in + cfg.draws {
        let p0 = draw_momentum(dim, &mut rng);
        let h0 = logp - kinetic(&p0);
        let u: f64 = rng.gen_range(0.0..1.0);
        let log_u = h0 + u.ln();

        let mut q_minus = q.clone();
        let mut p_minus = p0.clone();
        let mut grad_minus = grad.clone();
        let mut logp_minus = logp;
        let mut q_plus = q.clone();
        let mut p_plus = p0.clone();
        let mut grad_plus = grad.clone();
        let mut logp_plus = logp;
        let mut n: u64 = 1;
        let mut s = true;
        let mut depth = 0usize;
        let mut alpha = 0.0;
        let mut n_alpha: u64 = 0;
        let mut diverged = false;

        while s {
            let direction: i8 = if rng.gen_range(0.0..1.0) < 0.5 { -1 } else { 1 };
            let tree = if direction == -1 {
                build_tree(
                    density, &q_minus, &p_minus, &grad_minus, logp_minus, log_u, direction,
                    depth, eps, h0, &mut rng,
                )
            } else {
                build_tree(
                    density, &q_plus, &p_plus, &grad_plus, logp_plus, log_u, direction, depth,
                    eps, h0, &mut rng,
                )
            };
            if direction == -1 {
                q_minus = tree.q_minus.clone();
                p_minus = tree.p_minus.clone();
                grad_minus = tree.grad_minus.clone();
                logp_minus = tree.logp_minus;
            } else {
                q_plus = tree.q_plus.clone();
                p_plus = tree.p_plus.clone();
                grad_plus = tree.grad_plus.clone();
                logp_plus = tree.logp_plus;
            }
            if tree.s_prime && tree.n_prime > 0 {
                let ratio = (tree.n_prime as f64 / n as f64).min(1.0);
                if rng.gen_range(0.0..1.0) < ratio {
                    q = tree.q_prime.clone();
                    grad = tree.grad_prime.clone();
                    logp = tree.logp_prime;
                }
            }
            n += tree.n_prime;
            alpha += tree.alpha;
            n_alpha += tree.n_alpha;
            diverged = diverged || tree.diverged;
            s = tree.s_prime && no_u_turn(&q_minus, &q_plus, &p_minus, &p_plus);
            depth += 1;
            if depth >= max_depth {
                if s {
                    max_depth_hits += 1;
                }
                break;
            }
        }
        if diverged {
            divergences += 1;
        }

        let accept_stat = if n_alpha > 0 {
            alpha / n_alpha as f64
        } else {
            0.0
        };
        if it < cfg.burn_in {
            let m = (it + 1) as f64;
            h_bar = (1.0 - 1.0 / (m + t0)) * h_bar + (target_accept - accept_stat) / (m + t0);
            let log_eps = mu - m.sqrt() / gamma * h_bar;
            let w = m.powf(-kappa);
            log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
            eps = log_eps.exp();
            if it + 1 == cfg.burn_in {
                eps = log_eps_bar.exp();
            }
        } else {
            alpha_sum_post += accept_stat;
            alpha_count_post += 1;
            draws
                .row_mut(it - cfg.burn_in)
                .assign(&ndarray::ArrayView1::from(&q[..]));
        }
    }

    let acceptance = alpha_sum_post / alpha_count_post.max(1) as f64;
    let mut warnings = Vec::new();
    let depth_frac = max_depth_hits as f64 / (cfg.burn_in + cfg.draws) as f64;
    if depth_frac > 0.10 {
        warnings.push(format!(
            "maximum tree depth {max_depth} exceeded in {:.1}% of iterations",
            100.0 * depth_frac
        ));
    }
    if acceptance < 0.05 {
        warnings.push(format!(
            "post-burn-in mean acceptance {acceptance:.3} below 0.05"
        ));
    }
    PosteriorDraws {
        draws,
        acceptance,
        step_size: eps,
        method: "nuts-slice".into(),
        divergences,
        max_depth_hits,
        warnings,
    }
}

/// Run the configured sampler.
pub fn sample_posterior<D: LogDensity + ?Sized>(
    density: &mut D,
    cfg: &SamplerConfig,
) -> PosteriorDraws {
    match cfg.method {
        Method::Hmc { .. } => sample_hmc(density, cfg),
        Method::Nuts { .. } => sample_nuts(density, cfg),
    }
}

/// Effective sample size of one component via the initial-positive-sequence
/// autocorrelation estimator.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let auto = |k: usize| -> f64 {
        let mut r = 0.0;
        for i in 0..n - k {
            r += (series[i] - mean) * (series[i + k] - mean);
        }
        r / (n as f64 * var)
    };
    let mut rho_sum = 0.0;
    let mut k = 1;
    while k + 1 < n {
        let pair = auto(k) + auto(k + 1);
        if pair <= 0.0 {
            break;
        }
        rho_sum += pair;
        k += 2;
    }
    n as f64 / (1.0 + 2.0 * rho_sum)
}

/// Pointwise mean/std of one pushed-forward variable over the draws.
#[derive(Clone, Debug)]
pub struct VariableStats {
    pub var: VarTag,
    pub coords: Array2<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Push latent draws through the model onto evaluation grids.
pub fn pushforward(
    model: &PriorModel,
    store: &ParamStore,
    draws: &Array2<f64>,
    targets: &[(VarTag, Array2<f64>)],
) -> Result<Vec<VariableStats>, InferenceError> {
    let m = draws.nrows();
    let chunk = 250usize.min(m);
    let mut out = Vec::new();
    for (var, coords) in targets {
        let n = coords.nrows();
        let mut g = Graph::new();
        let xi = g.input("xi", (chunk, model.latent_dim));
        let block = model.predict(&mut g, store, xi, *var, coords)?;
        let mut tape = Tape::new(&g);
        tape.freeze_statics();
        let mut sum = vec![0.0f64; n];
        let mut sumsq = vec![0.0f64; n];
        let mut bind = Bindings::new();
        let mut seen = 0usize;
        while seen < m {
            let take = chunk.min(m - seen);
            let mut xiv = Array2::zeros((chunk, model.latent_dim));
            for r in 0..take {
                xiv.row_mut(r).assign(&draws.row(seen + r));
            }
            bind.insert("xi".into(), xiv);
            tape.forward(&g, store, &bind)?;
            let rows = tape.value(block);
            for r in 0..take {
                for c in 0..n {
                    let v = rows[(r, c)];
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            seen += take;
        }
        let mf = m as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / mf).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(mean.iter())
            .map(|(sq, mu)| {
                let var = (sq - mf * mu * mu) / (mf - 1.0).max(1.0);
                var.max(0.0).sqrt()
            })
            .collect();
        out.push(VariableStats {
            var: *var,
            coords: coords.clone(),
            mean,
            std,
        });
    }
    Ok(out)
}

/// Fraction of points where the truth lies within `k` posterior standard
/// deviations of the mean.
pub fn coverage(mean: &[f64], std: &[f64], truth: &[f64], k: f64) -> f64 {
    assert_eq!(mean.len(), truth.len());
    let hits = mean
        .iter()
        .zip(std.iter())
        .zip(truth.iter())
        .filter(|((m, s), t)| (*m - *t).abs() <= k * **s)
        .count();
    hits as f64 / mean.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::direct_model;
    use crate::nets::{Activation, CoordMap, LatentGenerator};
    use crate::stochastic::equidistant;
    use ndarray::array;

    /// Standard normal in d dimensions, as a direct density.
    struct StdNormal {
        dim: usize,
    }

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.dim
        }
        fn logp_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for (g, v) in grad.iter_mut().zip(x.iter()) {
                *g = -v;
                lp -= 0.5 * v * v;
            }
            lp
        }
    }

    /// A generator that ignores x and returns the first latent coordinate.
    fn identity_generator_model() -> (crate::gan::PriorModel, ParamStore) {
        let gen = LatentGenerator::gen_i(
            "g",
            1,
            1,
            &[],
            Activation::Identity,
            Activation::Identity,
            CoordMap::unit(1),
        );
        let mut store = ParamStore::new();
        store.insert("g.basis.w0", array![[0.0]]);
        store.insert("g.basis.b0", array![[1.0]]);
        store.insert("g.residual.w0", array![[0.0]]);
        store.insert("g.residual.b0", array![[0.0]]);
        let model = direct_model(gen, VarTag::U, equidistant(2, -1.0, 1.0));
        (model, store)
    }

    #[test]
    fn log_likelihood_exact_match_value() {
        let (model, store) = identity_generator_model();
        // prediction at xi = 1 equals 1; observation value 1, sigma 0.05
        let obs = vec![Observation::new(VarTag::U, &[0.3], 1.0, 0.05)];
        let ll = log_likelihood(&model, &store, &[1.0], &obs).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 0.0025f64).ln();
        assert!((ll - expect).abs() < 1e-12);
        assert!((ll - 2.07680).abs() < 1e-4);
    }

    #[test]
    fn log_likelihood_one_sigma_residual() {
        let (model, store) = identity_generator_model();
        let obs = vec![Observation::new(VarTag::U, &[0.3], 1.0, 0.05)];
        let matched = log_likelihood(&model, &store, &[1.0], &obs).unwrap();
        let off = log_likelihood(&model, &store, &[1.05], &obs).unwrap();
        assert!((matched - off - 0.5).abs() < 1e-10);
    }

    #[test]
    fn log_likelihood_empty_data_is_zero() {
        let (model, store) = identity_generator_model();
        let ll = log_likelihood(&model, &store, &[0.7], &[]).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn log_posterior_prior_only() {
        let (model, store) = identity_generator_model();
        let lp = log_posterior(&model, &store, &[0.8], &[]).unwrap();
        assert!((lp - (-0.32)).abs() < 1e-12);
        // mode at the origin
        let lp0 = log_posterior(&model, &store, &[0.0], &[]).unwrap();
        assert!(lp0 > lp);
    }

    #[test]
    fn conjugate_gradient_vanishes_at_posterior_mean() {
        let (model, store) = identity_generator_model();
        let obs = vec![Observation::new(VarTag::U, &[0.0], 1.0, 1.0)];
        let mut post = GraphPosterior::new(&model, &store, &obs).unwrap();
        let mut grad = [0.0];
        post.logp_grad(&[0.5], &mut grad);
        assert!(grad[0].abs() < 1e-12, "gradient at the mode: {}", grad[0]);
        post.logp_grad(&[0.0], &mut grad);
        assert!((grad[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sigma() {
        let (model, store) = identity_generator_model();
        let obs = vec![Observation::new(VarTag::U, &[0.0], 1.0, 0.0)];
        assert!(matches!(
            GraphPosterior::new(&model, &store, &obs),
            Err(InferenceError::BadSigma(_))
        ));
    }

    #[test]
    fn leapfrog_hand_computed_step() {
        // U(q) = q^2/2: one step from (1, 0) with eps = 0.1
        let mut d = StdNormal { dim: 1 };
        let mut q = [1.0];
        let mut p = [0.0];
        let mut grad = [0.0];
        d.logp_grad(&q, &mut grad);
        let h0 = -0.5 * q[0] * q[0] - kinetic(&p);
        leapfrog(&mut d, &mut q, &mut p, &mut grad, 0.1, 1).unwrap();
        assert!((q[0] - 0.995).abs() < 1e-15);
        assert!((p[0] + 0.09975).abs() < 1e-15);
        let h1 = -0.5 * q[0] * q[0] - kinetic(&p);
        let dh = (h1 - h0).abs();
        assert!(dh < 2e-5 && dh > 1e-6, "energy drift {dh}");
    }

    #[test]
    fn leapfrog_reversibility() {
        let mut d = StdNormal { dim: 3 };
        let mut rng = crate::seeded_rng(5, "rev");
        let q0: Vec<f64> = draw_momentum(3, &mut rng);
        let p0: Vec<f64> = draw_momentum(3, &mut rng);
        let mut q = q0.clone();
        let mut p = p0.clone();
        let mut grad = vec![0.0; 3];
        d.logp_grad(&q, &mut grad);
        leapfrog(&mut d, &mut q, &mut p, &mut grad, 0.13, 25).unwrap();
        // flip momentum and integrate back
        for v in p.iter_mut() {
            *v = -*v;
        }
        d.logp_grad(&q, &mut grad);
        leapfrog(&mut d, &mut q, &mut p, &mut grad, 0.13, 25).unwrap();
        for i in 0..3 {
            assert!((q[i] - q0[i]).abs() < 1e-12, "q[{i}]");
            assert!((p[i] + p0[i]).abs() < 1e-12, "p[{i}]");
        }
    }

    #[test]
    fn leapfrog_zero_steps_is_identity() {
        let mut d = StdNormal { dim: 2 };
        let mut q = [0.4, -0.7];
        let mut p = [0.1, 0.2];
        let mut grad = [0.0, 0.0];
        d.logp_grad(&q, &mut grad);
        leapfrog(&mut d, &mut q, &mut p, &mut grad, 0.1, 0);
        assert_eq!(q, [0.4, -0.7]);
        assert_eq!(p, [0.1, 0.2]);
    }

    #[test]
    fn leapfrog_volume_preservation_linear() {
        // quadratic potential: the leapfrog map is linear with unit
        // Jacobian determinant
        let eps = 0.21;
        let steps = 7;
        let map = |q0: f64, p0: f64| {
            let mut d = StdNormal { dim: 1 };
            let mut q = [q0];
            let mut p = [p0];
            let mut grad = [0.0];
            d.logp_grad(&q, &mut grad);
            leapfrog(&mut d, &mut q, &mut p, &mut grad, eps, steps).unwrap();
            (q[0], p[0])
        };
        let h = 1e-6;
        let (q00, p00) = map(0.3, -0.2);
        let (q10, p10) = map(0.3 + h, -0.2);
        let (q01, p01) = map(0.3, -0.2 + h);
        let jqq = (q10 - q00) / h;
        let jqp = (q01 - q00) / h;
        let jpq = (p10 - p00) / h;
        let jpp = (p01 - p00) / h;
        let det = jqq * jpp - jqp * jpq;
        assert!((det - 1.0).abs() < 1e-6, "det {det}");
    }

    #[test]
    fn leapfrog_energy_error_scales_quadratically() {
        // fixed trajectory length, step count scaled with 1/eps
        let run = |eps: f64| {
            let mut d = StdNormal { dim: 1 };
            let mut q = [1.0];
            let mut p = [0.3];
            let mut grad = [0.0];
            let lp = d.logp_grad(&q, &mut grad);
            let h0 = lp - kinetic(&p);
            let n = (2.0 / eps).round() as usize;
            let lp1 = leapfrog(&mut d, &mut q, &mut p, &mut grad, eps, n).unwrap();
            (lp1 - kinetic(&p) - h0).abs()
        };
        let e1 = run(0.1);
        let e2 = run(0.05);
        let factor = e1 / e2;
        assert!((3.0..5.0).contains(&factor), "halving factor {factor}");
    }

    #[test]
    fn hmc_standard_gaussian_moments() {
        // trajectory length ~1 radian: decorrelates both the position and
        // its square (resonant lengths near half a period leave the squared
        // series almost perfectly correlated)
        let mut d = StdNormal { dim: 2 };
        let mut cfg = SamplerConfig::hmc(0.2, 5, 42);
        cfg.burn_in = 500;
        cfg.draws = 4000;
        let out = sample_hmc(&mut d, &cfg);
        for c in 0..2 {
            let col: Vec<f64> = out.draws.column(c).iter().copied().collect();
            let sq: Vec<f64> = col.iter().map(|v| v * v).collect();
            let (mean, std) = out.component_mean_std(c);
            let ess = effective_sample_size(&col);
            let ess_sq = effective_sample_size(&sq);
            assert!(mean.abs() < 3.5 / ess.sqrt(), "mean {mean}, ess {ess}");
            let se_var = (2.0 / ess_sq).sqrt();
            assert!(
                (std * std - 1.0).abs() < 4.0 * se_var,
                "variance {} (ess_sq {ess_sq})",
                std * std
            );
        }
        assert!(out.acceptance > 0.6, "acceptance {}", out.acceptance);
    }

    #[test]
    fn hmc_tiny_step_accepts_everything() {
        let mut d = StdNormal { dim: 2 };
        let mut cfg = SamplerConfig::hmc(1e-4, 3, 7);
        cfg.burn_in = 50;
        cfg.draws = 200;
        let out = sample_hmc(&mut d, &cfg);
        assert!(out.acceptance > 0.999, "acceptance {}", out.acceptance);
    }

    #[test]
    fn nuts_standard_gaussian_moments() {
        let mut d = StdNormal { dim: 2 };
        let mut cfg = SamplerConfig::nuts(43);
        cfg.burn_in = 800;
        cfg.draws = 2000;
        let out = sample_nuts(&mut d, &cfg);
        for c in 0..2 {
            let col: Vec<f64> = out.draws.column(c).iter().copied().collect();
            let (mean, std) = out.component_mean_std(c);
            let ess = effective_sample_size(&col);
            assert!(mean.abs() < 3.0 / ess.sqrt(), "mean {mean}, ess {ess}");
            assert!((std * std - 1.0).abs() < 0.10, "variance {}", std * std);
        }
        assert!(out.step_size > 0.0);
    }

    #[test]
    fn nuts_adapts_toward_target_acceptance() {
        let mut d = StdNormal { dim: 4 };
        let mut cfg = SamplerConfig::nuts(44);
        cfg.burn_in = 1500;
        cfg.draws = 1500;
        let out = sample_nuts(&mut d, &cfg);
        assert!(
            (out.acceptance - 0.6).abs() < 0.1,
            "post-adaptation acceptance {}",
            out.acceptance
        );
    }

    #[test]
    fn conjugate_posterior_both_samplers() {
        // identity generator, one observation (u = 1, sigma = 1):
        // posterior N(0.5, 0.5)
        let (model, store) = identity_generator_model();
        let obs = vec![Observation::new(VarTag::U, &[0.0], 1.0, 1.0)];

        // posterior scale sqrt(0.5): quarter-period trajectory length
        let mut post = GraphPosterior::new(&model, &store, &obs).unwrap();
        let mut cfg = SamplerConfig::hmc(0.15, 7, 91);
        cfg.burn_in = 2000;
        cfg.draws = 1000;
        let hmc = sample_hmc(&mut post, &cfg);

        let mut post2 = GraphPosterior::new(&model, &store, &obs).unwrap();
        let cfg2 = SamplerConfig::nuts(92);
        let nuts = sample_nuts(&mut post2, &cfg2);

        for (name, out) in [("hmc", &hmc), ("nuts", &nuts)] {
            let col: Vec<f64> = out.draws.column(0).iter().copied().collect();
            let (mean, std) = out.component_mean_std(0);
            let ess = effective_sample_size(&col);
            let se = (0.5f64).sqrt() / ess.sqrt();
            assert!(
                (mean - 0.5).abs() < 3.0 * se,
                "{name}: mean {mean}, ess {ess}"
            );
            assert!(
                ((std * std) - 0.5).abs() < 0.15 * 0.5,
                "{name}: var {}",
                std * std
            );
        }
        // the two samplers agree within joint MC error
        let (m1, s1) = hmc.component_mean_std(0);
        let (m2, _) = nuts.component_mean_std(0);
        let e1 = effective_sample_size(&hmc.draws.column(0).iter().copied().collect::<Vec<_>>());
        let e2 = effective_sample_size(&nuts.draws.column(0).iter().copied().collect::<Vec<_>>());
        let joint = s1 * (1.0 / e1 + 1.0 / e2).sqrt();
        assert!(
            (m1 - m2).abs() < 3.0 * joint,
            "samplers disagree: {m1} vs {m2}"
        );
    }

    #[test]
    fn pushforward_degenerate_draws() {
        let (model, store) = identity_generator_model();
        let draws = Array2::from_elem((10, 1), 0.7);
        let grid = equidistant(5, -1.0, 1.0);
        let stats = pushforward(&model, &store, &draws, &[(VarTag::U, grid)]).unwrap();
        assert!(stats[0].mean.iter().all(|m| (m - 0.7).abs() < 1e-12));
        assert!(stats[0].std.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn pushforward_symmetric_pair() {
        let (model, store) = identity_generator_model();
        let draws = array![[1.0], [-1.0]];
        let grid = equidistant(3, -1.0, 1.0);
        let stats = pushforward(&model, &store, &draws, &[(VarTag::U, grid)]).unwrap();
        // sample std over {1, -1} with the n-1 denominator is sqrt(2)
        assert!(stats[0].mean.iter().all(|m| m.abs() < 1e-12));
        assert!(stats[0]
            .std
            .iter()
            .all(|s| (s - std::f64::consts::SQRT_2).abs() < 1e-12));
    }

    #[test]
    fn coverage_trivial_cases() {
        let mean = [1.0, 2.0, 3.0];
        let std = [0.1, 0.1, 0.1];
        assert_eq!(coverage(&mean, &std, &mean, 1.0), 1.0);
        assert_eq!(coverage(&mean, &std, &mean, 2.0), 1.0);
        let truth = [1.05, 2.5, 3.0];
        assert!((coverage(&mean, &std, &truth, 1.0) - 2.0 / 3.0).abs() < 1e-12);
    }
}
