//! Network definitions: multilayer perceptrons, the two latent-generator
//! architectures, DeepONet operator surrogates, and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::autodiff::{Bindings, Graph, NodeId, Tape};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sin,
    LeakyRelu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Sin => g.sin(x),
            Activation::LeakyRelu => g.leaky_relu(x),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths from input to output, e.g. `[1, 64, 64, 40]`.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        MlpSpec {
            widths,
            hidden,
            output: Activation::Identity,
            bias: true,
        }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output = act;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| (w[0] + usize::from(self.bias)) * w[1])
            .sum()
    }
}

/// A multilayer perceptron whose parameters live in a [`ParamStore`] under
/// `{prefix}.w{l}` / `{prefix}.b{l}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(prefix: &str, spec: MlpSpec) -> Self {
        Mlp {
            prefix: prefix.to_string(),
            spec,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        for l in 0..self.spec.widths.len() - 1 {
            let (fi, fo) = (self.spec.widths[l], self.spec.widths[l + 1]);
            store.insert_glorot(&format!("{}.w{l}", self.prefix), fi, fo, rng);
            if self.spec.bias {
                store.insert_zeros(&format!("{}.b{l}", self.prefix), (1, fo));
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.spec.widths.len() - 1 {
            out.push(format!("{}.w{l}", self.prefix));
            if self.spec.bias {
                out.push(format!("{}.b{l}", self.prefix));
            }
        }
        out
    }

    /// Forward pass using the store-registered parameters.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let layers = self.spec.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let w = g.param(store, &format!("{}.w{l}", self.prefix));
            let mut z = g.matmul(h, w);
            if self.spec.bias {
                let b = g.param(store, &format!("{}.b{l}", self.prefix));
                z = g.add(z, b);
            }
            let act = if l + 1 == layers {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.apply(g, z);
        }
        h
    }

    /// Forward pass through externally supplied weight nodes (one
    /// `(w, b)` pair per layer, `b = None` for bias-free layers), used when
    /// inner-adapted parameters are themselves graph expressions.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        weights: &[(NodeId, Option<NodeId>)],
        x: NodeId,
    ) -> NodeId {
        let layers = self.spec.widths.len() - 1;
        assert_eq!(weights.len(), layers, "one weight pair per layer");
        let mut h = x;
        for (l, (w, b)) in weights.iter().enumerate() {
            let mut z = g.matmul(h, *w);
            if let Some(b) = b {
                z = g.add(z, *b);
            }
            let act = if l + 1 == layers {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.apply(g, z);
        }
        h
    }

    /// Param nodes for [`Mlp::forward_with`] in layer order.
    pub fn param_nodes(&self, g: &mut Graph, store: &ParamStore) -> Vec<(NodeId, Option<NodeId>)> {
        (0..self.spec.widths.len() - 1)
            .map(|l| {
                let w = g.param(store, &format!("{}.w{l}", self.prefix));
                let b = self
                    .spec
                    .bias
                    .then(|| g.param(store, &format!("{}.b{l}", self.prefix)));
                (w, b)
            })
            .collect()
    }
}

/// Affine map of physical coordinates onto `[-1, 1]^d`, applied before the
/// basis/trunk networks; recorded in model metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoordMap {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl CoordMap {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        CoordMap { lo, hi }
    }

    pub fn unit(dim: usize) -> Self {
        CoordMap {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn apply(&self, coords: &Array2<f64>) -> Array2<f64> {
        assert_eq!(coords.ncols(), self.lo.len(), "coordinate dimension");
        let mut out = coords.clone();
        for mut row in out.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                let (lo, hi) = (self.lo[d], self.hi[d]);
                *v = if hi > lo { 2.0 * (*v - lo) / (hi - lo) - 1.0 } else { *v };
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum GeneratorVariant {
    /// Inner product of a coordinate basis network and a residual latent
    /// network: `G(x; xi) = g(x) . (xi + h*(xi))`.
    GenI { basis: Mlp, residual: Mlp },
    /// Single network on the concatenated `(x, xi)` input.
    GenII { net: Mlp },
}

/// A stochastic function `G(x; xi)` pushing latent Gaussian noise to
/// function values; the building block of every functional prior here.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentGenerator {
    pub variant: GeneratorVariant,
    pub latent_dim: usize,
    pub coord_map: CoordMap,
}

impl LatentGenerator {
    pub fn gen_i(
        prefix: &str,
        coord_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        basis_act: Activation,
        residual_act: Activation,
        coord_map: CoordMap,
    ) -> Self {
        assert_eq!(coord_map.dim(), coord_dim);
        let mut basis_widths = vec![coord_dim];
        basis_widths.extend_from_slice(hidden);
        basis_widths.push(latent_dim);
        let mut res_widths = vec![latent_dim];
        res_widths.extend_from_slice(hidden);
        res_widths.push(latent_dim);
        LatentGenerator {
            variant: GeneratorVariant::GenI {
                basis: Mlp::new(&format!("{prefix}.basis"), MlpSpec::new(basis_widths, basis_act)),
                residual: Mlp::new(
                    &format!("{prefix}.residual"),
                    MlpSpec::new(res_widths, residual_act),
                ),
            },
            latent_dim,
            coord_map,
        }
    }

    pub fn gen_ii(
        prefix: &str,
        coord_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        act: Activation,
        coord_map: CoordMap,
    ) -> Self {
        assert_eq!(coord_map.dim(), coord_dim);
        let mut widths = vec![coord_dim + latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        LatentGenerator {
            variant: GeneratorVariant::GenII {
                net: Mlp::new(&format!("{prefix}.net"), MlpSpec::new(widths, act)),
            },
            latent_dim,
            coord_map,
        }
    }

    pub fn coord_dim(&self) -> usize {
        self.coord_map.dim()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        match &self.variant {
            GeneratorVariant::GenI { basis, residual } => {
                basis.init(store, rng);
                residual.init(store, rng);
            }
            GeneratorVariant::GenII { net } => net.init(store, rng),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match &self.variant {
            GeneratorVariant::GenI { basis, residual } => {
                let mut v = basis.param_names();
                v.extend(residual.param_names());
                v
            }
            GeneratorVariant::GenII { net } => net.param_names(),
        }
    }

    /// Evaluate the generator at every coordinate in `coords` (N x d) for a
    /// batch of latents `xi` (B x latent_dim), producing a (B x N) node.
    pub fn block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: &Array2<f64>,
        xi: NodeId,
    ) -> NodeId {
        assert_eq!(g.shape(xi).1, self.latent_dim, "latent dimension");
        let normed = self.coord_map.apply(coords);
        match &self.variant {
            GeneratorVariant::GenI { basis, residual } => {
                let x = g.constant(normed);
                let gx = basis.forward(g, store, x); // (N, dG)
                let r = residual.forward(g, store, xi); // (B, dG)
                let h = g.add(xi, r);
                let gxt = g.transpose(gx);
                g.matmul(h, gxt) // (B, N)
            }
            GeneratorVariant::GenII { net } => {
                let mut cols = Vec::with_capacity(normed.nrows());
                for row in normed.rows() {
                    let c = g.constant(Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap());
                    let input = g.concat_cols(&[c, xi]);
                    cols.push(net.forward(g, store, input)); // (B, 1)
                }
                g.concat_cols(&cols)
            }
        }
    }

    /// Central-second-difference block along coordinate `axis`:
    /// `(G(x+h) - 2 G(x) + G(x-h)) / h^2` at every coordinate row, emitted as
    /// a single generator evaluation over the stacked stencil points so one
    /// backward pass reaches the parameters.
    pub fn second_derivative_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: &Array2<f64>,
        axis: usize,
        h: f64,
        xi: NodeId,
    ) -> NodeId {
        let n = coords.nrows();
        let mut stacked = Array2::zeros((3 * n, coords.ncols()));
        for (i, row) in coords.rows().into_iter().enumerate() {
            for d in 0..coords.ncols() {
                stacked[(i, d)] = row[d];
                stacked[(n + i, d)] = row[d];
                stacked[(2 * n + i, d)] = row[d];
            }
            stacked[(n + i, axis)] += h;
            stacked[(2 * n + i, axis)] -= h;
        }
        let all = self.block(g, store, &stacked, xi); // (B, 3N)
        let center = g.slice_cols(all, 0, n);
        let plus = g.slice_cols(all, n, n);
        let minus = g.slice_cols(all, 2 * n, n);
        g.second_difference(plus, center, minus, h)
    }
}

/// DeepONet: branch net encodes a discretized input function (plus optional
/// scalar parameters), trunk net encodes the evaluation coordinate, and the
/// prediction is the inner product of the two output vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorSurrogate {
    pub branch: Mlp,
    pub trunk: Mlp,
    pub coord_map: CoordMap,
}

impl OperatorSurrogate {
    pub fn new(
        prefix: &str,
        branch_inputs: usize,
        branch_hidden: &[usize],
        trunk_hidden: &[usize],
        interaction_dim: usize,
        coord_map: CoordMap,
    ) -> Self {
        let mut bw = vec![branch_inputs];
        bw.extend_from_slice(branch_hidden);
        bw.push(interaction_dim);
        let mut tw = vec![coord_map.dim()];
        tw.extend_from_slice(trunk_hidden);
        tw.push(interaction_dim);
        OperatorSurrogate {
            branch: Mlp::new(&format!("{prefix}.branch"), MlpSpec::new(bw, Activation::Tanh)),
            trunk: Mlp::new(&format!("{prefix}.trunk"), MlpSpec::new(tw, Activation::Tanh)),
            coord_map,
        }
    }

    pub fn branch_input_dim(&self) -> usize {
        self.branch.spec.widths[0]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.branch.init(store, rng);
        self.trunk.init(store, rng);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.branch.param_names();
        v.extend(self.trunk.param_names());
        v
    }

    /// Predictions at every coordinate (N x d) for a batch of branch inputs
    /// (B x m): `(B x N) = branch(F) . trunk(X)^T`.
    pub fn predict_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        branch_in: NodeId,
        coords: &Array2<f64>,
    ) -> NodeId {
        let x = g.constant(self.coord_map.apply(coords));
        let b = self.branch.forward(g, store, branch_in); // (B, p)
        let t = self.trunk.forward(g, store, x); // (N, p)
        let tt = g.transpose(t);
        g.matmul(b, tt)
    }
}

#[derive(thiserror::Error, Debug)]
pub enum NetsError {
    #[error("non-finite gradient for `{0}`; step rejected")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: mse = {mse}")]
    Diverged { step: usize, mse: f64 },
    #[error("evaluation failed: {0}")]
    Eval(#[from] crate::autodiff::EvalError),
}

/// Bias-corrected Adam over a fixed set of named parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub names: Vec<String>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, names: Vec<String>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = names
            .iter()
            .map(|n| Array2::zeros(store.value(n).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            names,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One update. All gradients are validated before any parameter moves, so
    /// a rejected step leaves parameters and moments untouched.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<String, Array2<f64>>,
    ) -> Result<(), NetsError> {
        for name in &self.names {
            let grad = grads
                .get(name)
                .unwrap_or_else(|| panic!("missing gradient for `{name}`"));
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(NetsError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, name) in self.names.iter().enumerate() {
            let grad = &grads[name];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let theta = store.value_mut(name);
            ndarray::Zip::from(theta).and(&*m).and(&*v).for_each(|t_, &m_, &v_| {
                let mhat = m_ / bc1;
                let vhat = v_ / bc2;
                *t_ -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// Collect parameter adjoints from a tape into a name-keyed gradient map.
pub fn collect_grads(
    tape: &Tape,
    nodes: &[(String, NodeId)],
) -> HashMap<String, Array2<f64>> {
    nodes
        .iter()
        .map(|(n, id)| (n.clone(), tape.adjoint(*id).clone()))
        .collect()
}

/// Operator-learning dataset: rows of discretized input functions (with any
/// scalar parameters appended) and target function values on a fixed grid.
#[derive(Clone, Debug)]
pub struct OperatorDataset {
    pub branch_inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub eval_coords: Array2<f64>,
}

impl OperatorDataset {
    pub fn len(&self) -> usize {
        self.branch_inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> OperatorDataset {
        let take = |m: &Array2<f64>| {
            let mut out = Array2::zeros((idx.len(), m.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        OperatorDataset {
            branch_inputs: take(&self.branch_inputs),
            targets: take(&self.targets),
            eval_coords: self.eval_coords.clone(),
        }
    }
}

impl OperatorDataset {
    /// Binary dataset file: magic `PGOD`, version, JSON header (row count,
    /// widths, evaluation grid), then rows of little-endian f64
    /// (branch values, then targets).
    pub fn write_binary(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"PGOD")?;
        f.write_all(&1u32.to_le_bytes())?;
        let header = serde_json::json!({
            "rows": self.len(),
            "branch_cols": self.branch_inputs.ncols(),
            "target_cols": self.targets.ncols(),
            "coord_dim": self.eval_coords.ncols(),
            "eval_coords": self.eval_coords.iter().copied().collect::<Vec<f64>>(),
        });
        let hbytes = serde_json::to_vec(&header).expect("header json");
        f.write_all(&(hbytes.len() as u64).to_le_bytes())?;
        f.write_all(&hbytes)?;
        for r in 0..self.len() {
            for v in self.branch_inputs.row(r).iter() {
                f.write_all(&v.to_le_bytes())?;
            }
            for v in self.targets.row(r).iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(path: &std::path::Path) -> std::io::Result<OperatorDataset> {
        use std::io::Read;
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"PGOD" {
            return Err(bad("bad dataset magic"));
        }
        let mut u4 = [0u8; 4];
        f.read_exact(&mut u4)?;
        if u32::from_le_bytes(u4) != 1 {
            return Err(bad("unsupported dataset version"));
        }
        let mut u8_ = [0u8; 8];
        f.read_exact(&mut u8_)?;
        let hlen = u64::from_le_bytes(u8_) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)?;
        let header: serde_json::Value =
            serde_json::from_slice(&hbytes).map_err(|e| bad(&e.to_string()))?;
        let rows = header["rows"].as_u64().ok_or_else(|| bad("rows"))? as usize;
        let bc = header["branch_cols"].as_u64().ok_or_else(|| bad("branch_cols"))? as usize;
        let tc = header["target_cols"].as_u64().ok_or_else(|| bad("target_cols"))? as usize;
        let cd = header["coord_dim"].as_u64().ok_or_else(|| bad("coord_dim"))? as usize;
        let coords: Vec<f64> = header["eval_coords"]
            .as_array()
            .ok_or_else(|| bad("eval_coords"))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        let eval_coords = Array2::from_shape_vec((coords.len() / cd.max(1), cd), coords)
            .map_err(|e| bad(&e.to_string()))?;
        let mut buf = vec![0u8; rows * (bc + tc) * 8];
        f.read_exact(&mut buf)?;
        let mut branch = Array2::zeros((rows, bc));
        let mut targets = Array2::zeros((rows, tc));
        let mut at = 0usize;
        for r in 0..rows {
            for c in 0..bc {
                branch[(r, c)] = f64::from_le_bytes(buf[at..at + 8].try_into().unwrap());
                at += 8;
            }
            for c in 0..tc {
                targets[(r, c)] = f64::from_le_bytes(buf[at..at + 8].try_into().unwrap());
                at += 8;
            }
        }
        Ok(OperatorDataset {
            branch_inputs: branch,
            targets,
            eval_coords,
        })
    }

    /// CSV export (header row, then branch values followed by targets).
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut names: Vec<String> = (0..self.branch_inputs.ncols())
            .map(|i| format!("in_{i}"))
            .collect();
        names.extend((0..self.targets.ncols()).map(|i| format!("out_{i}")));
        writeln!(f, "{}", names.join(","))?;
        for r in 0..self.len() {
            let mut line: Vec<String> =
                self.branch_inputs.row(r).iter().map(|v| format!("{v}")).collect();
            line.extend(self.targets.row(r).iter().map(|v| format!("{v}")));
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OperatorTrainReport {
    pub mse_history: Vec<f64>,
    pub final_mse: f64,
}

/// Train a DeepONet by minibatch Adam on the mean squared error between the
/// given and predicted target values.
pub fn train_deeponet(
    surr: &OperatorSurrogate,
    store: &mut ParamStore,
    data: &OperatorDataset,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<OperatorTrainReport, NetsError> {
    assert!(!data.is_empty(), "empty dataset");
    let n = data.len();
    let batch = batch.min(n);
    let m = data.branch_inputs.ncols();
    let k = data.targets.ncols();

    let mut g = Graph::new();
    let fin = g.input("f", (batch, m));
    let uin = g.input("u", (batch, k));
    let pred = surr.predict_block(&mut g, store, fin, &data.eval_coords);
    let diff = g.sub(pred, uin);
    let sq = g.square(diff);
    let loss = g.mean(sq);
    let pnodes: Vec<(String, NodeId)> = surr
        .param_names()
        .into_iter()
        .map(|n| {
            let id = g.param(store, &n);
            (n, id)
        })
        .collect();

    let mut tape = Tape::new(&g);
    let mut adam = AdamState::new(store, surr.param_names(), lr, 0.9, 0.999);
    let mut rng = crate::seeded_rng(seed, "deeponet-train");
    let mut history = Vec::with_capacity(steps);
    let mut bind = Bindings::new();

    for step in 0..steps {
        let mut fb = Array2::zeros((batch, m));
        let mut ub = Array2::zeros((batch, k));
        for r in 0..batch {
            let i = rng.gen_range(0..n);
            fb.row_mut(r).assign(&data.branch_inputs.row(i));
            ub.row_mut(r).assign(&data.targets.row(i));
        }
        bind.insert("f".into(), fb);
        bind.insert("u".into(), ub);
        tape.forward(&g, store, &bind)?;
        let mse = tape.scalar_value(loss);
        if !mse.is_finite() || mse > 1e3 {
            return Err(NetsError::Diverged { step, mse });
        }
        history.push(mse);
        tape.backward(&g, loss);
        let grads = collect_grads(&tape, &pnodes);
        adam.apply(store, &grads)?;
    }
    let final_mse = history.last().copied().unwrap_or(f64::NAN);
    Ok(OperatorTrainReport {
        mse_history: history,
        final_mse,
    })
}

/// Aggregate relative L2 error of surrogate predictions over a dataset.
pub fn deeponet_relative_l2(
    surr: &OperatorSurrogate,
    store: &ParamStore,
    data: &OperatorDataset,
) -> f64 {
    let n = data.len();
    let mut g = Graph::new();
    let fin = g.input("f", (n, data.branch_inputs.ncols()));
    let pred = surr.predict_block(&mut g, store, fin, &data.eval_coords);
    let mut tape = Tape::new(&g);
    let mut bind = Bindings::new();
    bind.insert("f".into(), data.branch_inputs.clone());
    tape.forward(&g, store, &bind).expect("forward");
    let p = tape.value(pred);
    let mut num = 0.0;
    let mut den = 0.0;
    for (pr, tr) in p.rows().into_iter().zip(data.targets.rows()) {
        for (a, b) in pr.iter().zip(tr.iter()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    (num / den.max(1e-300)).sqrt()
}

pub mod checkpoint {
    //! Versioned binary model checkpoints: a short JSON header describing the
    //! model and its parameter list, then raw little-endian f64 values in
    //! declaration order.

    use super::*;
    use std::io::{Read, Write};
    use std::path::Path;

    pub const MAGIC: &[u8; 4] = b"PGCK";
    pub const VERSION: u32 = 1;

    #[derive(Clone, Debug, Serialize, Deserialize)]
    pub struct Header {
        pub version: u32,
        pub kind: String,
        pub meta: serde_json::Value,
        pub params: Vec<(String, (usize, usize))>,
    }

    pub fn save(
        path: &Path,
        store: &ParamStore,
        names: &[String],
        kind: &str,
        meta: serde_json::Value,
    ) -> std::io::Result<()> {
        let header = Header {
            version: VERSION,
            kind: kind.to_string(),
            meta,
            params: names
                .iter()
                .map(|n| {
                    let v = store.value(n);
                    (n.clone(), (v.nrows(), v.ncols()))
                })
                .collect(),
        };
        let hbytes = serde_json::to_vec(&header).expect("header json");
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(hbytes.len() as u64).to_le_bytes())?;
        f.write_all(&hbytes)?;
        for n in names {
            for v in store.value(n).iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read a checkpoint, inserting its parameters into `store` (names must
    /// not already exist there).
    pub fn load(path: &Path, store: &mut ParamStore) -> std::io::Result<Header> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "bad checkpoint magic",
            ));
        }
        let mut v4 = [0u8; 4];
        f.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut l8 = [0u8; 8];
        f.read_exact(&mut l8)?;
        let hlen = u64::from_le_bytes(l8) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)?;
        let header: Header = serde_json::from_slice(&hbytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        for (name, (r, c)) in &header.params {
            let mut buf = vec![0u8; r * c * 8];
            f.read_exact(&mut buf)?;
            let vals: Vec<f64> = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store.insert(name, Array2::from_shape_vec((*r, *c), vals).unwrap());
        }
        Ok(header)
    }

    /// Overwrite existing parameters from a checkpoint instead of inserting.
    pub fn load_into(path: &Path, store: &mut ParamStore) -> std::io::Result<Header> {
        let mut scratch = ParamStore::new();
        let header = load(path, &mut scratch)?;
        for (name, _) in &header.params {
            store.value_mut(name).assign(scratch.value(name));
        }
        Ok(header)
    }
}
