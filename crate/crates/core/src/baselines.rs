//! Comparison methods: model-agnostic meta-learning with exact second-order
//! meta-gradients, and Gaussian-process regression with marginal-likelihood
//! hyperparameter optimization.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::autodiff::{Bindings, Graph, NodeId, Tape};
use crate::nets::{collect_grads, AdamState, Mlp};
use crate::params::ParamStore;
use crate::stochastic::cholesky_with_jitter;

#[derive(thiserror::Error, Debug)]
pub enum BaselinesError {
    #[error("non-finite meta loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("Gram matrix conditioning failure: {0}")]
    Conditioning(#[from] crate::stochastic::StochasticError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::autodiff::EvalError),
}

/// How the derivative through the inner update is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrderMode {
    /// Emit the inner gradient as graph nodes and differentiate through it.
    DoubleBackprop,
    /// Hessian-vector product by central differences of the inner gradient.
    FiniteDifference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Points per task used for the inner step (the rest go to the outer loss).
    pub inner_batch: usize,
    /// Tasks per outer update.
    pub meta_batch: usize,
    pub meta_steps: usize,
    pub second_order: SecondOrderMode,
    pub seed: u64,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_batch: 20,
            meta_batch: 25,
            meta_steps: 10_000,
            second_order: SecondOrderMode::DoubleBackprop,
            seed: 0,
        }
    }
}

/// One task's inner/outer split.
#[derive(Clone, Debug)]
pub struct MamlTask {
    pub x_in: Array2<f64>,
    pub y_in: Array2<f64>,
    pub x_out: Array2<f64>,
    pub y_out: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct MamlReport {
    /// Mean outer loss per meta step.
    pub meta_loss_history: Vec<f64>,
    /// Set when the trailing moving average failed to be non-increasing
    /// over the final quarter of training (soft check).
    pub non_decreasing_tail: bool,
}

/// Meta-gradient machinery for a fixed model and task shape: the exact
/// one-inner-step objective with the inner update emitted as graph nodes.
struct MetaGraph {
    graph: Graph,
    tape: Tape,
    outer_loss: NodeId,
    param_nodes: Vec<(String, NodeId)>,
}

fn mse(g: &mut Graph, pred: NodeId, target: NodeId) -> NodeId {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean(sq)
}

fn build_meta_graph(
    model: &Mlp,
    store: &ParamStore,
    k_in: usize,
    k_out: usize,
    inner_lr: f64,
) -> MetaGraph {
    let mut g = Graph::new();
    let x_in = g.input("x_in", (k_in, model.spec.widths[0]));
    let y_in = g.input("y_in", (k_in, *model.spec.widths.last().unwrap()));
    let x_out = g.input("x_out", (k_out, model.spec.widths[0]));
    let y_out = g.input("y_out", (k_out, *model.spec.widths.last().unwrap()));

    let pred_in = model.forward(&mut g, store, x_in);
    let inner_loss = mse(&mut g, pred_in, y_in);

    // adapted parameters as expressions: theta' = theta - alpha * grad
    let base = model.param_nodes(&mut g, store);
    let mut adapted = Vec::with_capacity(base.len());
    for (w, b) in &base {
        let gw = g.grad_nodes(inner_loss, *w);
        let sw = g.scale(gw, inner_lr);
        let w1 = g.sub(*w, sw);
        let b1 = b.map(|bn| {
            let gb = g.grad_nodes(inner_loss, bn);
            let sb = g.scale(gb, inner_lr);
            g.sub(bn, sb)
        });
        adapted.push((w1, b1));
    }
    let pred_out = model.forward_with(&mut g, &adapted, x_out);
    let outer_loss = mse(&mut g, pred_out, y_out);

    let mut flat_nodes = Vec::new();
    for (w, b) in &base {
        flat_nodes.push(*w);
        if let Some(b) = b {
            flat_nodes.push(*b);
        }
    }
    let param_nodes: Vec<(String, NodeId)> =
        model.param_names().into_iter().zip(flat_nodes).collect();

    let tape = Tape::new(&g);
    MetaGraph {
        graph: g,
        tape,
        outer_loss,
        param_nodes,
    }
}

impl MetaGraph {
    fn outer_loss_and_grad(
        &mut self,
        store: &ParamStore,
        task: &MamlTask,
    ) -> Result<(f64, HashMap<String, Array2<f64>>), BaselinesError> {
        let mut bind = Bindings::new();
        bind.insert("x_in".into(), task.x_in.clone());
        bind.insert("y_in".into(), task.y_in.clone());
        bind.insert("x_out".into(), task.x_out.clone());
        bind.insert("y_out".into(), task.y_out.clone());
        self.tape.forward(&self.graph, store, &bind)?;
        let loss = self.tape.scalar_value(self.outer_loss);
        self.tape.backward(&self.graph, self.outer_loss);
        Ok((loss, collect_grads(&self.tape, &self.param_nodes)))
    }
}

/// Plain-gradient machinery (loss and gradient of one MSE fit), used by the
/// finite-difference second-order mode and by adaptation.
struct FitGraph {
    graph: Graph,
    tape: Tape,
    loss: NodeId,
    param_nodes: Vec<(String, NodeId)>,
}

fn build_fit_graph(model: &Mlp, store: &ParamStore, k: usize) -> FitGraph {
    let mut g = Graph::new();
    let x = g.input("x", (k, model.spec.widths[0]));
    let y = g.input("y", (k, *model.spec.widths.last().unwrap()));
    let pred = model.forward(&mut g, store, x);
    let loss = mse(&mut g, pred, y);
    let param_nodes: Vec<(String, NodeId)> = model
        .param_names()
        .into_iter()
        .map(|n| {
            let id = g.param(store, &n);
            (n, id)
        })
        .collect();
    let tape = Tape::new(&g);
    FitGraph {
        graph: g,
        tape,
        loss,
        param_nodes,
    }
}

impl FitGraph {
    fn loss_and_grad(
        &mut self,
        store: &ParamStore,
        x: &Array2<f64>,
        y: &Array2<f64>,
    ) -> Result<(f64, HashMap<String, Array2<f64>>), BaselinesError> {
        let mut bind = Bindings::new();
        bind.insert("x".into(), x.clone());
        bind.insert("y".into(), y.clone());
        self.tape.forward(&self.graph, store, &bind)?;
        let loss = self.tape.scalar_value(self.loss);
        self.tape.backward(&self.graph, self.loss);
        Ok((loss, collect_grads(&self.tape, &self.param_nodes)))
    }

    fn loss_only(
        &mut self,
        store: &ParamStore,
        x: &Array2<f64>,
        y: &Array2<f64>,
    ) -> Result<f64, BaselinesError> {
        let mut bind = Bindings::new();
        bind.insert("x".into(), x.clone());
        bind.insert("y".into(), y.clone());
        self.tape.forward(&self.graph, store, &bind)?;
        Ok(self.tape.scalar_value(self.loss))
    }
}

fn add_scaled(
    acc: &mut HashMap<String, Array2<f64>>,
    grads: &HashMap<String, Array2<f64>>,
    scale: f64,
) {
    for (k, v) in grads {
        match acc.get_mut(k) {
            Some(a) => *a += &(v * scale),
            None => {
                acc.insert(k.clone(), v * scale);
            }
        }
    }
}

/// Exact-MAML outer gradient in the finite-difference mode:
/// `grad = g_out(theta') - alpha * H_in(theta) g_out(theta')`,
/// with the Hessian-vector product from central differences of the inner
/// gradient along the outer gradient direction.
fn fd_meta_gradient(
    model: &Mlp,
    store: &mut ParamStore,
    fit_in: &mut FitGraph,
    fit_out: &mut FitGraph,
    task: &MamlTask,
    inner_lr: f64,
) -> Result<(f64, HashMap<String, Array2<f64>>), BaselinesError> {
    let names = model.param_names();
    let (_, g_in) = fit_in.loss_and_grad(store, &task.x_in, &task.y_in)?;

    // move to theta', evaluate outer loss/grad, move back
    for n in &names {
        let g = &g_in[n];
        let v = store.value_mut(n);
        *v -= &(g * inner_lr);
    }
    let (outer, g_out) = fit_out.loss_and_grad(store, &task.x_out, &task.y_out)?;
    for n in &names {
        let g = &g_in[n];
        let v = store.value_mut(n);
        *v += &(g * inner_lr);
    }

    // Hessian-vector product along v = g_out
    let vnorm: f64 = g_out
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let mut total = g_out.clone();
    if vnorm > 0.0 {
        let r = 1e-5 / vnorm.max(1e-12);
        for n in &names {
            let dir = &g_out[n];
            let v = store.value_mut(n);
            *v += &(dir * r);
        }
        let (_, g_plus) = fit_in.loss_and_grad(store, &task.x_in, &task.y_in)?;
        for n in &names {
            let dir = &g_out[n];
            let v = store.value_mut(n);
            *v -= &(dir * (2.0 * r));
        }
        let (_, g_minus) = fit_in.loss_and_grad(store, &task.x_in, &task.y_in)?;
        for n in &names {
            let dir = &g_out[n];
            let v = store.value_mut(n);
            *v += &(dir * r);
        }
        for n in &names {
            let hv = (&g_plus[n] - &g_minus[n]) / (2.0 * r);
            let t = total.get_mut(n).unwrap();
            *t -= &(hv * inner_lr);
        }
    }
    Ok((outer, total))
}

/// Meta-train an initialization: one exact inner gradient step per task,
/// outer gradient descent on the post-step loss summed over the meta batch.
pub fn maml_train<S>(
    model: &Mlp,
    store: &mut ParamStore,
    mut sample_task: S,
    cfg: &MamlConfig,
) -> Result<MamlReport, BaselinesError>
where
    S: FnMut(&mut ChaCha20Rng) -> MamlTask,
{
    let mut rng = crate::seeded_rng(cfg.seed, "maml-train");
    let probe = sample_task(&mut rng);
    let k_in = probe.x_in.nrows();
    let k_out = probe.x_out.nrows();
    let names = model.param_names();

    let mut meta = (cfg.second_order == SecondOrderMode::DoubleBackprop)
        .then(|| build_meta_graph(model, store, k_in, k_out, cfg.inner_lr));
    let mut fit_in = build_fit_graph(model, store, k_in);
    let mut fit_out = build_fit_graph(model, store, k_out);

    let mut history = Vec::with_capacity(cfg.meta_steps);
    for step in 0..cfg.meta_steps {
        let mut acc: HashMap<String, Array2<f64>> = HashMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.meta_batch {
            let task = sample_task(&mut rng);
            let (loss, grads) = match (&mut meta, cfg.second_order) {
                (Some(mg), SecondOrderMode::DoubleBackprop) => {
                    mg.outer_loss_and_grad(store, &task)?
                }
                _ => fd_meta_gradient(model, store, &mut fit_in, &mut fit_out, &task, cfg.inner_lr)?,
            };
            loss_sum += loss;
            add_scaled(&mut acc, &grads, 1.0);
        }
        let mean_loss = loss_sum / cfg.meta_batch as f64;
        if !mean_loss.is_finite() {
            return Err(BaselinesError::NonFiniteLoss(step));
        }
        history.push(mean_loss);
        // outer update: theta <- theta - beta * sum of task gradients
        for n in &names {
            if let Some(g) = acc.get(n) {
                let v = store.value_mut(n);
                *v -= &(g * cfg.outer_lr);
            }
        }
    }

    // soft check: trailing moving average non-increasing over the final
    // quarter of training
    let non_decreasing_tail = {
        let n = history.len();
        if n >= 8 {
            let w = (n / 8).max(1);
            let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let q3 = avg(&history[n - 2 * w..n - w]);
            let q4 = avg(&history[n - w..]);
            q4 > q3 * 1.05
        } else {
            false
        }
    };
    Ok(MamlReport {
        meta_loss_history: history,
        non_decreasing_tail,
    })
}

#[derive(Clone, Debug)]
pub struct AdaptReport {
    pub final_loss: f64,
    pub adam_steps: usize,
    pub lbfgs_iters: usize,
    pub hit_cap: bool,
    /// Losses at the start of each quasi-Newton iteration.
    pub lbfgs_losses: Vec<f64>,
}

/// Adapt a (copy of the) meta-initialization to new task data: Adam until
/// the loss drops below 1e-3 (or a step cap), then L-BFGS refinement until
/// the loss change between iterations falls below 1e-8.
pub fn maml_adapt(
    model: &Mlp,
    store: &mut ParamStore,
    x: &Array2<f64>,
    y: &Array2<f64>,
    adam_lr: f64,
    adam_cap: usize,
    lbfgs_cap: usize,
) -> Result<AdaptReport, BaselinesError> {
    let names = model.param_names();
    let mut fit = build_fit_graph(model, store, x.nrows());

    let mut adam = AdamState::new(store, names.clone(), adam_lr, 0.9, 0.999);
    let mut adam_steps = 0usize;
    let mut loss = fit.loss_only(store, x, y)?;
    while loss >= 1e-3 && adam_steps < adam_cap {
        let (l, grads) = fit.loss_and_grad(store, x, y)?;
        adam.apply(store, &grads).map_err(|_| BaselinesError::NonFiniteLoss(adam_steps))?;
        loss = l;
        adam_steps += 1;
    }

    // L-BFGS with two-loop recursion (memory 10) and Armijo backtracking.
    let m = 10usize;
    let mut s_list: Vec<Vec<f64>> = Vec::new();
    let mut y_list: Vec<Vec<f64>> = Vec::new();
    let mut lbfgs_iters = 0usize;
    let mut lbfgs_losses = Vec::new();
    let mut hit_cap = false;

    let flat_grad = |g: &HashMap<String, Array2<f64>>, names: &[String]| -> Vec<f64> {
        let mut out = Vec::new();
        for n in names {
            out.extend(g[n].iter().copied());
        }
        out
    };

    let (mut f0, g0) = fit.loss_and_grad(store, x, y)?;
    let mut grad = flat_grad(&g0, &names);
    loop {
        lbfgs_losses.push(f0);
        if lbfgs_iters >= lbfgs_cap {
            hit_cap = true;
            break;
        }
        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(s_list.len());
        for (s, yv) in s_list.iter().zip(y_list.iter()).rev() {
            let sy: f64 = s.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
            if sy.abs() < 1e-300 {
                alphas.push(0.0);
                continue;
            }
            let a = s.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>() / sy;
            for (qi, yi) in q.iter_mut().zip(yv.iter()) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let (Some(s), Some(yv)) = (s_list.last(), y_list.last()) {
            let sy: f64 = s.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
            let yy: f64 = yv.iter().map(|v| v * v).sum();
            if yy > 0.0 && sy > 0.0 {
                let gamma = sy / yy;
                for qi in q.iter_mut() {
                    *qi *= gamma;
                }
            }
        }
        for ((s, yv), a) in s_list.iter().zip(y_list.iter()).zip(alphas.iter().rev()) {
            let sy: f64 = s.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
            if sy.abs() < 1e-300 {
                continue;
            }
            let b = yv.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>() / sy;
            for (qi, si) in q.iter_mut().zip(s.iter()) {
                *qi += (a - b) * si;
            }
        }
        let dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let gd: f64 = grad.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
        if gd >= 0.0 {
            break; // not a descent direction; stop cleanly
        }

        // Armijo backtracking
        let x0 = store.flatten(&names);
        let mut t = 1.0;
        let c1 = 1e-4;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = x0.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            store.unflatten(&names, &cand);
            let f1 = fit.loss_only(store, x, y)?;
            if f1 <= f0 + c1 * t * gd {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            store.unflatten(&names, &x0);
            break;
        }
        let (f1, g1map) = fit.loss_and_grad(store, x, y)?;
        let g1 = flat_grad(&g1map, &names);
        let x1 = store.flatten(&names);
        let s: Vec<f64> = x1.iter().zip(x0.iter()).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g1.iter().zip(grad.iter()).map(|(a, b)| a - b).collect();
        if s_list.len() == m {
            s_list.remove(0);
            y_list.remove(0);
        }
        s_list.push(s);
        y_list.push(yv);
        let delta = (f0 - f1).abs();
        f0 = f1;
        grad = g1;
        lbfgs_iters += 1;
        if delta < 1e-8 {
            break;
        }
    }

    Ok(AdaptReport {
        final_loss: f0,
        adam_steps,
        lbfgs_iters,
        hit_cap,
        lbfgs_losses,
    })
}

/// Gaussian-process regression with a squared-exponential kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GprModel {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(skip)]
    chol: Option<DMatrix<f64>>,
    #[serde(skip)]
    alpha: Option<DVector<f64>>,
}

fn se_kernel(x1: f64, x2: f64, l: f64, s2: f64) -> f64 {
    let d = x1 - x2;
    s2 * (-d * d / (2.0 * l * l)).exp()
}

impl GprModel {
    fn factorize(&mut self) -> Result<(), BaselinesError> {
        let n = self.x.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = se_kernel(self.x[i], self.x[j], self.length_scale, self.signal_var);
            }
            k[(i, i)] += self.noise_var.max(1e-12);
        }
        let (l, _) = cholesky_with_jitter(&k)?;
        let yv = DVector::from_column_slice(&self.y);
        // solve L L^T alpha = y
        let mut alpha = yv;
        l.solve_lower_triangular_mut(&mut alpha);
        l.transpose().solve_upper_triangular_mut(&mut alpha);
        self.chol = Some(l);
        self.alpha = Some(alpha);
        Ok(())
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let l = self.chol.as_ref().expect("factorized");
        let alpha = self.alpha.as_ref().expect("factorized");
        let n = self.x.len() as f64;
        let yv = DVector::from_column_slice(&self.y);
        let logdet: f64 = (0..self.x.len()).map(|i| l[(i, i)].ln()).sum();
        -0.5 * yv.dot(alpha) - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Posterior mean and std of the latent function at `xs`.
    pub fn predict(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = self.chol.as_ref().expect("factorized");
        let alpha = self.alpha.as_ref().expect("factorized");
        let n = self.x.len();
        let mut mean = Vec::with_capacity(xs.len());
        let mut std = Vec::with_capacity(xs.len());
        for &xq in xs {
            let kstar =
                DVector::from_fn(n, |i, _| se_kernel(self.x[i], xq, self.length_scale, self.signal_var));
            mean.push(kstar.dot(alpha));
            let mut v = kstar;
            l.solve_lower_triangular_mut(&mut v);
            let var = self.signal_var - v.dot(&v);
            std.push(var.max(0.0).sqrt());
        }
        (mean, std)
    }
}

/// Fit a GPR model; when `optimize` is set, hyperparameters are chosen by
/// multi-start gradient ascent on the log marginal likelihood in log space
/// (8 restarts).
pub fn gpr_fit(
    x: &[f64],
    y: &[f64],
    init: (f64, f64, f64),
    optimize: bool,
    seed: u64,
) -> Result<GprModel, BaselinesError> {
    assert_eq!(x.len(), y.len());
    let mut model = GprModel {
        length_scale: init.0,
        signal_var: init.1,
        noise_var: init.2,
        x: x.to_vec(),
        y: y.to_vec(),
        chol: None,
        alpha: None,
    };
    model.factorize()?;
    if !optimize {
        return Ok(model);
    }

    let mut best = model.clone();
    let mut best_lml = model.log_marginal_likelihood();
    let mut rng = crate::seeded_rng(seed, "gpr-restarts");
    let starts: Vec<[f64; 3]> = (0..8)
        .map(|i| {
            if i == 0 {
                [init.0.ln(), init.1.ln(), init.2.max(1e-8).ln()]
            } else {
                [
                    rng.gen_range((0.05f64).ln()..(1.0f64).ln()),
                    rng.gen_range((0.1f64).ln()..(5.0f64).ln()),
                    rng.gen_range((1e-6f64).ln()..(0.1f64).ln()),
                ]
            }
        })
        .collect();

    let n = x.len();
    for start in starts {
        let mut theta = start;
        // Adam ascent on the log marginal likelihood
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        let lr = 0.05;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut trial = model.clone();
        for t in 1..=200 {
            trial.length_scale = theta[0].exp();
            trial.signal_var = theta[1].exp();
            trial.noise_var = theta[2].exp();
            if trial.factorize().is_err() {
                break;
            }
            let l = trial.chol.as_ref().unwrap();
            let alpha = trial.alpha.as_ref().unwrap();

            // K^{-1} via the factor; gradient 0.5 tr((aa' - K^{-1}) dK)
            let mut kinv = DMatrix::identity(n, n);
            for c in 0..n {
                let mut col = kinv.column(c).into_owned();
                l.solve_lower_triangular_mut(&mut col);
                l.transpose().solve_upper_triangular_mut(&mut col);
                kinv.set_column(c, &col);
            }
            let mut grad = [0.0f64; 3];
            for i in 0..n {
                for j in 0..n {
                    let kse = se_kernel(trial.x[i], trial.x[j], trial.length_scale, trial.signal_var);
                    let d = trial.x[i] - trial.x[j];
                    let dk_dl = kse * d * d / (trial.length_scale * trial.length_scale);
                    let dk_ds = kse;
                    let dk_dn = if i == j { trial.noise_var } else { 0.0 };
                    let w = alpha[i] * alpha[j] - kinv[(i, j)];
                    grad[0] += 0.5 * w * dk_dl;
                    grad[1] += 0.5 * w * dk_ds;
                    grad[2] += 0.5 * w * dk_dn;
                }
            }
            for d in 0..3 {
                m[d] = b1 * m[d] + (1.0 - b1) * grad[d];
                v[d] = b2 * v[d] + (1.0 - b2) * grad[d] * grad[d];
                let mh = m[d] / (1.0 - b1.powi(t));
                let vh = v[d] / (1.0 - b2.powi(t));
                theta[d] += lr * mh / (vh.sqrt() + eps); // ascent
            }
            theta[2] = theta[2].max((1e-12f64).ln());
        }
        trial.length_scale = theta[0].exp();
        trial.signal_var = theta[1].exp();
        trial.noise_var = theta[2].exp();
        if trial.factorize().is_ok() {
            let lml = trial.log_marginal_likelihood();
            if lml > best_lml {
                best_lml = lml;
                best = trial;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, MlpSpec};
    use ndarray::array;

    fn linear_model() -> (Mlp, ParamStore) {
        let model = Mlp::new(
            "m",
            MlpSpec::new(vec![1, 1], Activation::Identity).without_bias(),
        );
        let mut store = ParamStore::new();
        store.insert("m.w0", array![[0.0]]);
        (model, store)
    }

    #[test]
    fn maml_one_step_hand_example() {
        // linear y = theta x, theta = 0, datum (1, 1): inner grad is -2,
        // theta' = 0.02 with alpha = 0.01
        let (model, store) = linear_model();
        let mut g = Graph::new();
        let x = g.input("x", (1, 1));
        let y = g.input("y", (1, 1));
        let pred = model.forward(&mut g, &store, x);
        let loss = mse(&mut g, pred, y);
        let w = g.param(&store, "m.w0");
        let gw = g.grad_nodes(loss, w);
        let sw = g.scale(gw, 0.01);
        let adapted = g.sub(w, sw);
        let mut tape = Tape::new(&g);
        let mut bind = Bindings::new();
        bind.insert("x".into(), array![[1.0]]);
        bind.insert("y".into(), array![[1.0]]);
        tape.forward(&g, &store, &bind).unwrap();
        assert!((tape.value(gw)[(0, 0)] + 2.0).abs() < 1e-15, "inner grad");
        assert!((tape.value(adapted)[(0, 0)] - 0.02).abs() < 1e-15, "theta'");
    }

    #[test]
    fn meta_gradient_modes_agree() {
        let model = Mlp::new("m", MlpSpec::new(vec![1, 8, 1], Activation::Tanh));
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(2, "mm");
        model.init(&mut store, &mut rng);
        let task = MamlTask {
            x_in: array![[0.1], [0.4], [-0.6]],
            y_in: array![[0.5], [0.9], [-0.2]],
            x_out: array![[0.2], [-0.3]],
            y_out: array![[0.6], [0.1]],
        };
        let mut meta = build_meta_graph(&model, &store, 3, 2, 0.01);
        let (l1, g1) = meta.outer_loss_and_grad(&store, &task).unwrap();
        let mut fit_in = build_fit_graph(&model, &store, 3);
        let mut fit_out = build_fit_graph(&model, &store, 2);
        let (l2, g2) =
            fd_meta_gradient(&model, &mut store, &mut fit_in, &mut fit_out, &task, 0.01).unwrap();
        assert!((l1 - l2).abs() < 1e-10, "losses {l1} vs {l2}");
        for n in model.param_names() {
            let err = crate::testsupport::max_rel_err(&g1[&n], &g2[&n]);
            assert!(err < 1e-4, "{n}: rel err {err}");
        }
    }

    #[test]
    fn meta_gradient_matches_full_finite_differences() {
        // differentiate the exact one-inner-step objective numerically
        let model = Mlp::new("m", MlpSpec::new(vec![1, 4, 1], Activation::Tanh));
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(3, "fd");
        model.init(&mut store, &mut rng);
        let task = MamlTask {
            x_in: array![[0.3], [-0.5]],
            y_in: array![[0.2], [0.7]],
            x_out: array![[0.8]],
            y_out: array![[-0.4]],
        };
        let mut meta = build_meta_graph(&model, &store, 2, 1, 0.05);
        let (_, grads) = meta.outer_loss_and_grad(&store, &task).unwrap();
        let names = model.param_names();
        let inner_names = names.clone();
        let task2 = task.clone();
        let model2 = model.clone();
        let fd = crate::testsupport::fd_gradient(&mut store, &names, 1e-6, move |s| {
            let mut fin = build_fit_graph(&model2, s, 2);
            let mut fout = build_fit_graph(&model2, s, 1);
            let (_, gin) = fin.loss_and_grad(s, &task2.x_in, &task2.y_in).unwrap();
            let mut shifted = s.clone();
            for n in &inner_names {
                let v = shifted.value_mut(n);
                *v -= &(&gin[n] * 0.05);
            }
            fout.loss_only(&shifted, &task2.x_out, &task2.y_out).unwrap()
        });
        for (n, f) in names.iter().zip(fd.iter()) {
            let err = crate::testsupport::max_rel_err(&grads[n], f);
            assert!(err < 1e-4, "{n}: rel err {err}");
        }
    }

    #[test]
    fn zero_meta_steps_is_identity() {
        let model = Mlp::new("m", MlpSpec::new(vec![1, 5, 1], Activation::Tanh));
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(4, "id");
        model.init(&mut store, &mut rng);
        let before = store.clone();
        let cfg = MamlConfig {
            meta_steps: 0,
            ..Default::default()
        };
        maml_train(
            &model,
            &mut store,
            |_| MamlTask {
                x_in: array![[0.0]],
                y_in: array![[0.0]],
                x_out: array![[0.0]],
                y_out: array![[0.0]],
            },
            &cfg,
        )
        .unwrap();
        for n in before.names() {
            assert_eq!(before.value(n), store.value(n));
        }
    }

    #[test]
    fn zero_inner_lr_degenerates_to_multitask_descent() {
        // with alpha = 0 the outer gradient is the plain gradient of the
        // outer loss at theta; check against hand computation on a linear
        // instance: L = (y - w x)^2, dL/dw = -2 x (y - w x)
        let (model, store) = linear_model();
        let task = MamlTask {
            x_in: array![[2.0]],
            y_in: array![[1.0]],
            x_out: array![[3.0]],
            y_out: array![[6.0]],
        };
        let mut meta = build_meta_graph(&model, &store, 1, 1, 0.0);
        let (_, grads) = meta.outer_loss_and_grad(&store, &task).unwrap();
        // w = 0: dL'/dw = -2 * 3 * (6 - 0) = -36
        assert!((grads["m.w0"][(0, 0)] + 36.0).abs() < 1e-12);
    }

    #[test]
    fn adapt_self_consistent_data_is_noop() {
        let model = Mlp::new("m", MlpSpec::new(vec![1, 6, 1], Activation::Tanh));
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(5, "ad");
        model.init(&mut store, &mut rng);
        // generate data from the model itself
        let x = array![[0.1], [0.5], [-0.3]];
        let mut g = Graph::new();
        let xin = g.input("x", (3, 1));
        let pred = model.forward(&mut g, &store, xin);
        let mut tape = Tape::new(&g);
        let mut bind = Bindings::new();
        bind.insert("x".into(), x.clone());
        tape.forward(&g, &store, &bind).unwrap();
        let y = tape.value(pred).clone();
        let before = store.clone();
        let report = maml_adapt(&model, &mut store, &x, &y, 1e-3, 500, 50).unwrap();
        assert_eq!(report.adam_steps, 0, "loss already below the Adam gate");
        assert!(report.final_loss < 1e-12);
        for n in before.names() {
            assert_eq!(before.value(n), store.value(n));
        }
    }

    #[test]
    fn adapt_fits_noisy_sine_segment() {
        let model = Mlp::new("m", MlpSpec::new(vec![1, 40, 40, 1], Activation::Tanh));
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(6, "fit");
        model.init(&mut store, &mut rng);
        let xs = [-0.8, -0.6667, -0.5333, -0.4];
        let x = Array2::from_shape_vec((4, 1), xs.to_vec()).unwrap();
        let noise = [0.03, -0.05, 0.02, -0.01];
        let y = Array2::from_shape_vec(
            (4, 1),
            xs.iter()
                .zip(noise.iter())
                .map(|(x, n): (&f64, &f64)| (10.0 * x).sin() + n)
                .collect(),
        )
        .unwrap();
        let report = maml_adapt(&model, &mut store, &x, &y, 1e-2, 5000, 200).unwrap();
        // residual at the measured points below the noise level
        assert!(
            report.final_loss.sqrt() < 0.05,
            "rms residual {}",
            report.final_loss.sqrt()
        );
        // quasi-Newton phase is monotone non-increasing
        for w in report.lbfgs_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "lbfgs not monotone: {:?}", w);
        }
    }

    #[test]
    fn gpr_interpolates_noise_free_training_points() {
        let x = [-0.5, 0.0, 0.4, 0.9];
        let y = [0.2, -0.1, 0.5, 0.3];
        let model = gpr_fit(&x, &y, (0.2, 1.0, 0.0), false, 0).unwrap();
        let (mean, std) = model.predict(&x);
        for i in 0..x.len() {
            assert!((mean[i] - y[i]).abs() < 1e-4, "mean at training point");
            assert!(std[i] < 1e-4, "std at training point: {}", std[i]);
        }
    }

    #[test]
    fn gpr_reverts_to_prior_far_from_data() {
        let model = gpr_fit(&[0.0], &[1.0], (0.2, 1.0, 0.0), false, 0).unwrap();
        let (mean, std) = model.predict(&[50.0]);
        assert!(mean[0].abs() < 1e-10);
        assert!((std[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gpr_single_point_closed_form() {
        let model = gpr_fit(&[0.0], &[1.0], (0.2, 1.0, 0.0), false, 0).unwrap();
        let (mean, _) = model.predict(&[0.2]);
        assert!((mean[0] - (-0.5f64).exp()).abs() < 1e-6, "{}", mean[0]);
        assert!((mean[0] - 0.606531).abs() < 1e-5);
    }

    #[test]
    fn gpr_variance_nonnegative_everywhere() {
        let x: Vec<f64> = (0..12).map(|i| -1.0 + 2.0 * i as f64 / 11.0).collect();
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v).sin()).collect();
        let model = gpr_fit(&x, &y, (0.3, 1.0, 1e-4), false, 0).unwrap();
        let q: Vec<f64> = (0..101).map(|i| -1.2 + 2.4 * i as f64 / 100.0).collect();
        let (_, std) = model.predict(&q);
        assert!(std.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn gpr_optimization_improves_marginal_likelihood() {
        let mut rng = crate::seeded_rng(9, "gpr");
        let x: Vec<f64> = (0..20).map(|i| -1.0 + 2.0 * i as f64 / 19.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| (6.0 * v).sin() + 0.05 * rng.gen_range(-1.0..1.0))
            .collect();
        let init = (0.8, 0.3, 0.01);
        let unopt = gpr_fit(&x, &y, init, false, 3).unwrap();
        let opt = gpr_fit(&x, &y, init, true, 3).unwrap();
        assert!(
            opt.log_marginal_likelihood() >= unopt.log_marginal_likelihood(),
            "{} vs {}",
            opt.log_marginal_likelihood(),
            unopt.log_marginal_likelihood()
        );
    }
}
