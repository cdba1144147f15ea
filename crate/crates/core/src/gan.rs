//! WGAN-GP training of functional priors: snapshot construction from
//! generators (optionally through PDE residuals or a frozen operator
//! surrogate), the gradient-penalty losses, the 5:1 update schedule, and the
//! covariance convergence diagnostic.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::autodiff::{Bindings, Graph, NodeId, Tape};
use crate::nets::{collect_grads, AdamState, LatentGenerator, Mlp, MlpSpec, OperatorSurrogate};
use crate::params::ParamStore;
use crate::physics::{pinn_generators, PdeProblem, PhysicsError};
use crate::stochastic::{SnapshotSet, VarTag};

#[derive(thiserror::Error, Debug)]
pub enum GanError {
    #[error("snapshot layout mismatch: model produces {model} columns, data has {data}")]
    LayoutMismatch { model: usize, data: usize },
    #[error("model cannot produce variable block `{0:?}`")]
    UnsupportedVariable(VarTag),
    #[error("non-finite loss at generator step {step}{}", last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Nets(#[from] crate::nets::NetsError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::autodiff::EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Discriminator: a leaky-ReLU multilayer perceptron from snapshot rows to a
/// scalar critic value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
}

impl Discriminator {
    /// Standard shape: hidden layers of the given width, leaky-ReLU 0.2.
    pub fn new(prefix: &str, input_dim: usize, width: usize, depth: usize) -> Self {
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat(width).take(depth));
        widths.push(1);
        Discriminator {
            net: Mlp::new(prefix, MlpSpec::new(widths, crate::nets::Activation::LeakyRelu)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut rand_chacha::ChaCha20Rng) {
        self.net.init(store, rng);
    }

    pub fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rows: NodeId) -> NodeId {
        self.net.forward(g, store, rows)
    }
}

/// How physics enters the fake snapshots.
#[derive(Clone, Debug)]
pub enum PhysicsMode {
    /// Snapshots read the generators directly.
    None,
    /// Differential-operator encoding of a known PDE.
    Pinn { problem: PdeProblem },
    /// A pre-trained, frozen operator surrogate maps generated input
    /// functions (resolved at `branch_coords`, with the scalar order
    /// appended when `with_alpha`) to the solution variable.
    DeepOnet {
        surrogate: OperatorSurrogate,
        branch_coords: Array2<f64>,
        with_alpha: bool,
    },
}

/// One or more generators sharing a latent draw, a physics-encoding mode,
/// and the sensor layout of the snapshots they imitate.
#[derive(Clone, Debug)]
pub struct PriorModel {
    /// Main generator: `u` for direct/PINN priors, the source `f` for the
    /// fractional system, log-conductivity for the Darcy system.
    pub gen: LatentGenerator,
    /// Reaction-rate field generator for inverse problems (shares the latent).
    pub kr_gen: Option<LatentGenerator>,
    /// Scalar head mapping the latent to a raw order `a`; the snapshot value
    /// is `alpha = 1 + sigmoid(a)`.
    pub alpha_head: Option<Mlp>,
    pub mode: PhysicsMode,
    /// Snapshot layout: variable blocks and their sensor coordinates.
    pub layout: Vec<(VarTag, Array2<f64>)>,
    /// Per-block noise std applied to fake snapshots (match the historical
    /// data's noise when that data is noisy).
    pub noise_std: Vec<f64>,
    pub latent_dim: usize,
}

impl PriorModel {
    pub fn n_columns(&self) -> usize {
        self.layout.iter().map(|(_, c)| c.nrows()).sum()
    }

    pub fn generator_param_names(&self) -> Vec<String> {
        let mut names = self.gen.param_names();
        if let Some(kr) = &self.kr_gen {
            names.extend(kr.param_names());
        }
        if let Some(a) = &self.alpha_head {
            names.extend(a.param_names());
        }
        names
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut rand_chacha::ChaCha20Rng) {
        self.gen.init(store, rng);
        if let Some(kr) = &self.kr_gen {
            kr.init(store, rng);
        }
        if let Some(a) = &self.alpha_head {
            a.init(store, rng);
        }
    }

    fn boundary_coords(&self) -> Array2<f64> {
        self.layout
            .iter()
            .find(|(v, _)| *v == VarTag::B)
            .map(|(_, c)| c.clone())
            .unwrap_or_else(|| {
                let (lo, hi) = (self.gen.coord_map.lo[0], self.gen.coord_map.hi[0]);
                ndarray::array![[lo], [hi]]
            })
    }

    fn alpha_node(&self, g: &mut Graph, store: &ParamStore, xi: NodeId) -> Result<NodeId, GanError> {
        let head = self
            .alpha_head
            .as_ref()
            .ok_or(GanError::UnsupportedVariable(VarTag::Alpha))?;
        let raw = head.forward(g, store, xi);
        let s = g.sigmoid(raw);
        Ok(g.add_scalar(s, 1.0))
    }

    /// Branch-net input built from the generated input-function block
    /// (plus the scalar order when configured).
    fn branch_input(&self, g: &mut Graph, store: &ParamStore, xi: NodeId) -> Result<NodeId, GanError> {
        let PhysicsMode::DeepOnet {
            branch_coords,
            with_alpha,
            ..
        } = &self.mode
        else {
            return Err(GanError::UnsupportedVariable(VarTag::U));
        };
        let f = self.gen.block(g, store, branch_coords, xi);
        if *with_alpha {
            let a = self.alpha_node(g, store, xi)?;
            Ok(g.concat_cols(&[f, a]))
        } else {
            Ok(f)
        }
    }

    /// Evaluate one variable of the prior at arbitrary coordinates for a
    /// latent batch, as a differentiable (B x N) expression.
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xi: NodeId,
        var: VarTag,
        coords: &Array2<f64>,
    ) -> Result<NodeId, GanError> {
        match (&self.mode, var) {
            (PhysicsMode::None, VarTag::U) => Ok(self.gen.block(g, store, coords, xi)),
            (PhysicsMode::Pinn { .. }, VarTag::U | VarTag::B) => {
                Ok(self.gen.block(g, store, coords, xi))
            }
            (PhysicsMode::Pinn { problem }, VarTag::F) => {
                let b_coords = self.boundary_coords();
                let blocks = pinn_generators(
                    g,
                    store,
                    &self.gen,
                    self.kr_gen.as_ref(),
                    problem,
                    coords,
                    &b_coords,
                    xi,
                )?;
                Ok(blocks.f)
            }
            (PhysicsMode::Pinn { .. }, VarTag::Kr) => {
                let kr = self
                    .kr_gen
                    .as_ref()
                    .ok_or(GanError::UnsupportedVariable(VarTag::Kr))?;
                Ok(kr.block(g, store, coords, xi))
            }
            (PhysicsMode::DeepOnet { .. }, VarTag::F) => Ok(self.gen.block(g, store, coords, xi)),
            (PhysicsMode::DeepOnet { .. }, VarTag::KLog) => {
                Ok(self.gen.block(g, store, coords, xi))
            }
            (PhysicsMode::DeepOnet { .. }, VarTag::Alpha) => self.alpha_node(g, store, xi),
            (PhysicsMode::DeepOnet { surrogate, .. }, VarTag::U | VarTag::H) => {
                let surrogate = surrogate.clone();
                let binput = self.branch_input(g, store, xi)?;
                Ok(surrogate.predict_block(g, store, binput, coords))
            }
            (_, v) => Err(GanError::UnsupportedVariable(v)),
        }
    }

    /// Generated snapshot rows matching the training layout, differentiable
    /// with respect to the generator parameters. When fake noise is
    /// configured, `noise` is an input node added entrywise.
    pub fn fake_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xi: NodeId,
        noise: Option<NodeId>,
    ) -> Result<NodeId, GanError> {
        let mut parts = Vec::new();
        match &self.mode {
            PhysicsMode::Pinn { problem } => {
                // One stacked generator evaluation serves f, b and u blocks.
                let f_coords = self
                    .layout
                    .iter()
                    .find(|(v, _)| *v == VarTag::F)
                    .map(|(_, c)| c.clone())
                    .expect("PINN layout carries a source block");
                let b_coords = self.boundary_coords();
                let blocks = pinn_generators(
                    g,
                    store,
                    &self.gen,
                    self.kr_gen.as_ref(),
                    problem,
                    &f_coords,
                    &b_coords,
                    xi,
                )?;
                for (var, coords) in &self.layout {
                    let node = match var {
                        VarTag::F => blocks.f,
                        VarTag::B => blocks.b,
                        VarTag::Kr => blocks.k_r.ok_or(GanError::UnsupportedVariable(*var))?,
                        VarTag::U => self.gen.block(g, store, coords, xi),
                        v => return Err(GanError::UnsupportedVariable(*v)),
                    };
                    parts.push(node);
                }
            }
            _ => {
                for (var, coords) in &self.layout {
                    parts.push(self.predict(g, store, xi, *var, coords)?);
                }
            }
        }
        let fake = g.concat_cols(&parts);
        Ok(match noise {
            Some(n) => g.add(fake, n),
            None => fake,
        })
    }

    fn has_fake_noise(&self) -> bool {
        self.noise_std.iter().any(|s| *s > 0.0)
    }

    /// Draw one fake-noise matrix (per-block std, zero for clean blocks).
    fn draw_fake_noise(&self, batch: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Array2<f64> {
        let cols = self.n_columns();
        let mut out = Array2::zeros((batch, cols));
        let mut at = 0usize;
        for ((_, coords), &std) in self.layout.iter().zip(self.noise_std.iter()) {
            let w = coords.nrows();
            if std > 0.0 {
                for r in 0..batch {
                    for c in 0..w {
                        let z: f64 = StandardNormal.sample(rng);
                        out[(r, at + c)] = std * z;
                    }
                }
            }
            at += w;
        }
        out
    }
}

/// WGAN-GP training configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Generator steps; each is preceded by `d_ratio` discriminator steps.
    pub steps: usize,
    pub batch: usize,
    /// Gradient-penalty weight.
    pub lambda: f64,
    /// Discriminator updates per generator update.
    pub d_ratio: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub checkpoint_interval: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch: 64,
            lambda: 0.1,
            d_ratio: 5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            seed,
            checkpoint_interval: None,
            checkpoint_dir: None,
        }
    }
}

/// Per-generator-step loss record.
#[derive(Clone, Copy, Debug)]
pub struct HistoryRow {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss_g,loss_d,penalty")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.step, r.loss_g, r.loss_d, r.penalty)?;
        }
        Ok(())
    }
}

/// Discriminator-side loss graph:
/// `E[D(fake)] - E[D(real)] + lambda E[(|grad D(interp)| - 1)^2]`
/// with `interp = eps * real + (1 - eps) * fake` per row. The penalty's
/// input gradient is emitted as graph nodes, so one numeric backward pass
/// differentiates it with respect to the discriminator parameters.
pub struct DiscriminatorLoss {
    pub real: NodeId,
    pub fake: NodeId,
    pub eps: NodeId,
    pub loss: NodeId,
    pub penalty: NodeId,
    pub wasserstein: NodeId,
}

pub fn discriminator_loss(
    g: &mut Graph,
    disc: &Discriminator,
    store: &ParamStore,
    batch: usize,
    cols: usize,
    lambda: f64,
) -> DiscriminatorLoss {
    let real = g.input("real", (batch, cols));
    let fake = g.input("fake", (batch, cols));
    let eps = g.input("eps", (batch, 1));
    let one = g.ones((1, 1));
    let om = g.sub(one, eps);
    let er = g.mul(eps, real);
    let ef = g.mul(om, fake);
    let interp = g.add(er, ef);

    let d_real = disc.forward(g, store, real);
    let d_fake = disc.forward(g, store, fake);
    let d_interp = disc.forward(g, store, interp);

    let grad = g.grad_nodes(d_interp, interp);
    let norm = g.row_norm(grad);
    let shifted = g.add_scalar(norm, -1.0);
    let sq = g.square(shifted);
    let penalty = g.mean(sq);

    let mf = g.mean(d_fake);
    let mr = g.mean(d_real);
    let wasserstein = g.sub(mf, mr);
    let weighted = g.scale(penalty, lambda);
    let loss = g.add(wasserstein, weighted);
    DiscriminatorLoss {
        real,
        fake,
        eps,
        loss,
        penalty,
        wasserstein,
    }
}

/// Generator-side loss graph: `-E[D(Q(xi))]` with the fake rows built from
/// the prior model so gradients reach the generator parameters.
pub struct GeneratorLoss {
    pub xi: NodeId,
    pub noise: Option<NodeId>,
    pub fake: NodeId,
    pub loss: NodeId,
}

pub fn generator_loss(
    g: &mut Graph,
    model: &PriorModel,
    disc: &Discriminator,
    store: &ParamStore,
    batch: usize,
) -> Result<GeneratorLoss, GanError> {
    let xi = g.input_diff("xi", (batch, model.latent_dim));
    let noise = model
        .has_fake_noise()
        .then(|| g.input("fake_noise", (batch, model.n_columns())));
    let fake = model.fake_rows(g, store, xi, noise)?;
    let d_fake = disc.forward(g, store, fake);
    let m = g.mean(d_fake);
    let loss = g.neg(m);
    Ok(GeneratorLoss {
        xi,
        noise,
        fake,
        loss,
    })
}

fn draw_xi(batch: usize, dim: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Array2<f64> {
    let mut xi = Array2::zeros((batch, dim));
    for v in xi.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    xi
}

/// Alternating WGAN-GP training: `d_ratio` discriminator updates per
/// generator update, Adam on both sides, deterministic for a fixed seed.
pub fn train_prior(
    model: &PriorModel,
    disc: &Discriminator,
    store: &mut ParamStore,
    real: &SnapshotSet,
    cfg: &TrainConfig,
) -> Result<TrainHistory, GanError> {
    let cols = model.n_columns();
    if cols != real.n_columns() {
        return Err(GanError::LayoutMismatch {
            model: cols,
            data: real.n_columns(),
        });
    }
    let batch = cfg.batch.min(real.n_realizations());
    let n_real = real.n_realizations();

    // Fake-row generation for discriminator steps (forward only).
    let mut fake_graph = Graph::new();
    let fg = {
        let xi = fake_graph.input("xi", (batch, model.latent_dim));
        let noise = model
            .has_fake_noise()
            .then(|| fake_graph.input("fake_noise", (batch, cols)));
        let fake = model.fake_rows(&mut fake_graph, store, xi, noise)?;
        fake
    };
    let mut fake_tape = Tape::new(&fake_graph);

    let mut d_graph = Graph::new();
    let dl = discriminator_loss(&mut d_graph, disc, store, batch, cols, cfg.lambda);
    let d_param_nodes: Vec<(String, NodeId)> = disc
        .param_names()
        .into_iter()
        .map(|n| {
            let id = d_graph.param(store, &n);
            (n, id)
        })
        .collect();
    let mut d_tape = Tape::new(&d_graph);

    let mut g_graph = Graph::new();
    let gl = generator_loss(&mut g_graph, model, disc, store, batch)?;
    let g_param_nodes: Vec<(String, NodeId)> = model
        .generator_param_names()
        .into_iter()
        .map(|n| {
            let id = g_graph.param(store, &n);
            (n, id)
        })
        .collect();
    let mut g_tape = Tape::new(&g_graph);

    let mut adam_d = AdamState::new(store, disc.param_names(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut adam_g = AdamState::new(
        store,
        model.generator_param_names(),
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
    );

    let mut rng_idx = crate::seeded_rng(cfg.seed, "gan-real-idx");
    let mut rng_xi_d = crate::seeded_rng(cfg.seed, "gan-xi-d");
    let mut rng_xi_g = crate::seeded_rng(cfg.seed, "gan-xi-g");
    let mut rng_eps = crate::seeded_rng(cfg.seed, "gan-eps");
    let mut rng_noise_d = crate::seeded_rng(cfg.seed, "gan-noise-d");
    let mut rng_noise_g = crate::seeded_rng(cfg.seed, "gan-noise-g");

    let mut history = TrainHistory::default();
    let mut last_checkpoint: Option<PathBuf> = None;
    let all_names: Vec<String> = {
        let mut v = model.generator_param_names();
        v.extend(disc.param_names());
        v
    };

    let mut bind_fake = Bindings::new();
    let mut bind_d = Bindings::new();
    let mut bind_g = Bindings::new();

    for step in 0..cfg.steps {
        let mut last_d = f64::NAN;
        let mut last_pen = f64::NAN;
        for _ in 0..cfg.d_ratio {
            // fresh latent and real minibatch
            bind_fake.insert("xi".into(), draw_xi(batch, model.latent_dim, &mut rng_xi_d));
            if model.has_fake_noise() {
                bind_fake.insert(
                    "fake_noise".into(),
                    model.draw_fake_noise(batch, &mut rng_noise_d),
                );
            }
            fake_tape.forward(&fake_graph, store, &bind_fake)?;
            let fake_rows = fake_tape.value(fg).clone();

            let mut real_rows = Array2::zeros((batch, cols));
            for r in 0..batch {
                let i = rng_idx.gen_range(0..n_real);
                real_rows.row_mut(r).assign(&real.data.row(i));
            }
            let mut eps = Array2::zeros((batch, 1));
            for v in eps.iter_mut() {
                *v = rng_eps.gen_range(0.0..1.0);
            }
            bind_d.insert("real".into(), real_rows);
            bind_d.insert("fake".into(), fake_rows);
            bind_d.insert("eps".into(), eps);
            d_tape.forward(&d_graph, store, &bind_d)?;
            let loss_d = d_tape.scalar_value(dl.loss);
            if !loss_d.is_finite() {
                return Err(GanError::NonFiniteLoss {
                    step,
                    last_checkpoint,
                });
            }
            last_d = loss_d;
            last_pen = d_tape.scalar_value(dl.penalty);
            d_tape.backward(&d_graph, dl.loss);
            let grads = collect_grads(&d_tape, &d_param_nodes);
            adam_d.apply(store, &grads)?;
        }

        bind_g.insert("xi".into(), draw_xi(batch, model.latent_dim, &mut rng_xi_g));
        if model.has_fake_noise() {
            bind_g.insert(
                "fake_noise".into(),
                model.draw_fake_noise(batch, &mut rng_noise_g),
            );
        }
        g_tape.forward(&g_graph, store, &bind_g)?;
        let loss_g = g_tape.scalar_value(gl.loss);
        if !loss_g.is_finite() {
            return Err(GanError::NonFiniteLoss {
                step,
                last_checkpoint,
            });
        }
        g_tape.backward(&g_graph, gl.loss);
        let grads = collect_grads(&g_tape, &g_param_nodes);
        adam_g.apply(store, &grads)?;

        history.rows.push(HistoryRow {
            step,
            loss_g,
            loss_d: last_d,
            penalty: last_pen,
        });

        if let (Some(interval), Some(dir)) = (cfg.checkpoint_interval, &cfg.checkpoint_dir) {
            if interval > 0 && (step + 1) % interval == 0 {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("step-{:08}.ckpt", step + 1));
                crate::nets::checkpoint::save(
                    &path,
                    store,
                    &all_names,
                    "prior-model",
                    serde_json::json!({ "step": step + 1 }),
                )?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(history)
}

/// Mean squared difference between the model's empirical covariance (over
/// `n_samples` generated draws at the block's sensors) and a reference
/// covariance; also returned relative to the mean squared reference entry.
pub struct CovarianceMse {
    pub absolute: f64,
    pub relative: f64,
}

pub fn covariance_mse(
    model: &PriorModel,
    store: &ParamStore,
    var: VarTag,
    coords: &Array2<f64>,
    reference: &Array2<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<CovarianceMse, GanError> {
    let m = coords.nrows();
    assert_eq!(reference.nrows(), m);
    assert_eq!(reference.ncols(), m);
    let chunk = 256usize;
    let mut g = Graph::new();
    let xi = g.input("xi", (chunk, model.latent_dim));
    let block = model.predict(&mut g, store, xi, var, coords)?;
    let mut tape = Tape::new(&g);
    tape.freeze_statics();
    let mut rng = crate::seeded_rng(seed, "covariance-mse");

    let mut sum = vec![0.0f64; m];
    let mut outer = Array2::<f64>::zeros((m, m));
    let mut seen = 0usize;
    let mut bind = Bindings::new();
    while seen < n_samples {
        bind.insert("xi".into(), draw_xi(chunk, model.latent_dim, &mut rng));
        tape.forward(&g, store, &bind)?;
        let rows = tape.value(block);
        let take = chunk.min(n_samples - seen);
        for r in 0..take {
            let row = rows.row(r);
            for i in 0..m {
                sum[i] += row[i];
                for j in i..m {
                    outer[(i, j)] += row[i] * row[j];
                }
            }
        }
        seen += take;
    }
    let nf = n_samples as f64;
    let mut mse = 0.0;
    let mut ref_sq = 0.0;
    for i in 0..m {
        for j in 0..m {
            let (a, b) = if j >= i { (i, j) } else { (j, i) };
            let cov = outer[(a, b)] / nf - (sum[i] / nf) * (sum[j] / nf);
            let diff = cov - reference[(i, j)];
            mse += diff * diff;
            ref_sq += reference[(i, j)] * reference[(i, j)];
        }
    }
    mse /= (m * m) as f64;
    ref_sq /= (m * m) as f64;
    Ok(CovarianceMse {
        absolute: mse,
        relative: mse / ref_sq.max(1e-300),
    })
}

/// Empirical covariance of snapshot rows (used as a reference when the
/// target process is only known through data).
pub fn empirical_covariance(rows: &Array2<f64>) -> Array2<f64> {
    let n = rows.nrows();
    let m = rows.ncols();
    let mut mean = vec![0.0; m];
    for r in rows.rows() {
        for (s, v) in mean.iter_mut().zip(r.iter()) {
            *s += v;
        }
    }
    for s in mean.iter_mut() {
        *s /= n as f64;
    }
    let mut cov = Array2::zeros((m, m));
    for r in rows.rows() {
        for i in 0..m {
            for j in i..m {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            cov[(i, j)] /= n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

/// Direct prior over one variable block: the generator read at the sensors.
pub fn direct_model(gen: LatentGenerator, var: VarTag, coords: Array2<f64>) -> PriorModel {
    let latent_dim = gen.latent_dim;
    PriorModel {
        gen,
        kr_gen: None,
        alpha_head: None,
        mode: PhysicsMode::None,
        layout: vec![(var, coords)],
        noise_std: vec![0.0],
        latent_dim,
    }
}
