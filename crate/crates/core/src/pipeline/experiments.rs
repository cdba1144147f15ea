//! Per-experiment stage implementations: data generation, operator-surrogate
//! and prior training, posterior estimation, baselines, and diagnostics.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::PathBuf;

use super::{
    plot, zigzag, Budget, CompareRow, ExperimentConfig, ExperimentId, GridStatRow, GridStats,
    Metrics, PipelineError, Stage,
};
use crate::baselines::{gpr_fit, maml_adapt, maml_train, GprModel, MamlConfig, MamlTask};
use crate::gan::{
    covariance_mse, direct_model, Discriminator, PhysicsMode, PriorModel, TrainConfig,
};
use crate::inference::{
    coverage, pushforward, GraphPosterior, Observation, PosteriorDraws, SamplerConfig,
    VariableStats,
};
use crate::nets::{
    checkpoint, train_deeponet, Activation, CoordMap, LatentGenerator, Mlp, MlpSpec,
    OperatorDataset, OperatorSurrogate,
};
use crate::params::ParamStore;
use crate::physics::{
    alpha_prior_sample, darcy_cell_centers, manufactured_source, riesz_matrix,
    solve_darcy_2d, solve_diffusion_reaction, KrMode, ManufacturedSolution, PdeProblem,
    ReactionRate,
};
use crate::stochastic::{
    assemble_snapshots, equidistant, kl_expansion, sample_gp, sample_sine_tasks,
    sliding_windows, synthetic_displacement_series, Kernel, SnapshotSet, VarTag,
};

const SOLVER_N: usize = 101;
const DR_D: f64 = 0.01;
const DR_KR_FORWARD: f64 = 0.2;
const FRAC_D: f64 = 0.05;
const FRAC_KR: f64 = 1.0;
const FRAC_ALPHA_TRUTH: f64 = 1.4523;
const DARCY_N: usize = 20;
const RISER_SENSORS: usize = 16;
const RISER_DT: f64 = 0.01;
const RISER_SPAN: f64 = 2.4;
const RISER_READS: usize = 16;

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    budget: &'a Budget,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(p));
        }
        Ok(p)
    }

    fn riser_total_time(&self) -> f64 {
        match self.cfg.preset {
            super::Preset::Desk => 40.0,
            super::Preset::Paper => 200.0,
        }
    }

    /// First three quarters of the record feed the prior.
    fn riser_train_end(&self) -> f64 {
        0.75 * self.riser_total_time()
    }
}

pub fn run_stage(
    cfg: &ExperimentConfig,
    budget: &Budget,
    stage: Stage,
    artifacts: &mut Vec<String>,
) -> Result<Metrics, PipelineError> {
    let ctx = Ctx { cfg, budget };
    let mut arts = ArtifactLog {
        list: artifacts,
        base: cfg.out_dir.clone(),
    };
    match (cfg.experiment, stage) {
        (ExperimentId::ZigzagAppendixC, Stage::Diagnose) => zigzag_stage(&ctx, &mut arts),
        (ExperimentId::ZigzagAppendixC, _) => Ok(Metrics::default()),
        (_, Stage::GenData) => gen_data(&ctx, &mut arts),
        (_, Stage::TrainDeeponet) => train_deeponet_stage(&ctx, &mut arts),
        (_, Stage::TrainPrior) => train_prior_stage(&ctx, &mut arts),
        (_, Stage::Posterior) => posterior_stage(&ctx, &mut arts),
        (_, Stage::Baseline) => baseline_stage(&ctx, &mut arts),
        (_, Stage::Diagnose) => diagnose_stage(&ctx, &mut arts),
        (_, Stage::All) => unreachable!("expanded by the runner"),
    }
}

struct ArtifactLog<'a> {
    list: &'a mut Vec<String>,
    base: PathBuf,
}

impl ArtifactLog<'_> {
    fn add(&mut self, p: &PathBuf) {
        let rel = p
            .strip_prefix(&self.base)
            .map(|r| r.to_string_lossy().into_owned())
            .unwrap_or_else(|_| p.to_string_lossy().into_owned());
        self.list.push(rel);
    }
}

// ---------------------------------------------------------------- layouts

fn sine_sensors() -> Array2<f64> {
    equidistant(30, -1.0, 1.0)
}

fn dr_sensors() -> Array2<f64> {
    equidistant(40, -1.0, 1.0)
}

fn dr_boundary() -> Array2<f64> {
    ndarray::array![[-1.0], [1.0]]
}

fn frac_sensors() -> Array2<f64> {
    equidistant(50, -1.0, 1.0)
}

fn alpha_slot() -> Array2<f64> {
    Array2::zeros((1, 1))
}

fn solver_grid_coords() -> Array2<f64> {
    equidistant(SOLVER_N, -1.0, 1.0)
}

fn eval_grid_201() -> Array2<f64> {
    equidistant(201, -1.0, 1.0)
}

// ------------------------------------------------------------ model builds

/// Architecture per experiment (generator/discriminator shapes follow the
/// per-case tables; latent dimensions: 10, 40, 60, 40, 100, 20, 40).
fn build_model(ctx: &Ctx) -> Result<(PriorModel, Discriminator), PipelineError> {
    let exp = ctx.cfg.experiment;
    Ok(match exp {
        ExperimentId::SineMeta => {
            let gen = LatentGenerator::gen_i(
                "gen",
                1,
                10,
                &[64, 64],
                Activation::Tanh,
                Activation::Tanh,
                CoordMap::unit(1),
            );
            let model = direct_model(gen, VarTag::U, sine_sensors());
            (model, Discriminator::new("disc", 30, 128, 3))
        }
        ExperimentId::GpAppendixB => {
            let gen = LatentGenerator::gen_i(
                "gen",
                1,
                40,
                &[64, 64],
                Activation::Tanh,
                Activation::Tanh,
                CoordMap::unit(1),
            );
            let model = direct_model(gen, VarTag::U, sine_sensors());
            (model, Discriminator::new("disc", 30, 128, 3))
        }
        ExperimentId::DrForward => {
            let gen = LatentGenerator::gen_i(
                "gen",
                1,
                40,
                &[64, 64],
                Activation::Tanh,
                Activation::Tanh,
                CoordMap::unit(1),
            );
            let model = PriorModel {
                latent_dim: gen.latent_dim,
                gen,
                kr_gen: None,
                alpha_head: None,
                mode: PhysicsMode::Pinn {
                    problem: PdeProblem::DiffusionReaction {
                        d: DR_D,
                        k_r: KrMode::Known(DR_KR_FORWARD),
                    },
                },
                layout: vec![(VarTag::F, dr_sensors()), (VarTag::B, dr_boundary())],
                noise_std: vec![0.0, 0.0],
            };
            (model, Discriminator::new("disc", 42, 128, 3))
        }
        ExperimentId::DrInverse => {
            let gen = LatentGenerator::gen_i(
                "gen",
                1,
                60,
                &[64, 64],
                Activation::Tanh,
                Activation::Tanh,
                CoordMap::unit(1),
            );
            let kr_gen = LatentGenerator::gen_i(
                "krgen",
                1,
                60,
                &[64, 64],
                Activation::Tanh,
                Activation::Tanh,
                CoordMap::unit(1),
            );
            let model = PriorModel {
                latent_dim: gen.latent_dim,
                gen,
                kr_gen: Some(kr_gen),
                alpha_head: None,
                mode: PhysicsMode::Pinn {
                    problem: PdeProblem::DiffusionReaction {
                        d: DR_D,
                        k_r: KrMode::Field,
                    },
                },
                layout: vec![
                    (VarTag::Kr, dr_sensors()),
                    (VarTag::F, dr_sensors()),
                    (VarTag::B, dr_boundary()),
                ],
                noise_std: vec![0.0, 0.0, 0.0],
            };
            (model, Discriminator::new("disc", 82, 128, 3))
        }
        ExperimentId::Fractional => {
            let gen = LatentGenerator::gen_i(
                "gen",
                1,
                40,
                &[64, 64],
                Activation::Tanh,
                Activation::Tanh,
                CoordMap::unit(1),
            );
            let alpha_head = Mlp::new("alpha", MlpSpec::new(vec![40, 64, 64, 1], Activation::Tanh));
            let surrogate = OperatorSurrogate::new(
                "onet",
                51,
                &[64, 64],
                &[64, 64, 64],
                64,
                CoordMap::unit(1),
            );
            let model = PriorModel {
                latent_dim: gen.latent_dim,
                gen,
                kr_gen: None,
                alpha_head: Some(alpha_head),
                mode: PhysicsMode::DeepOnet {
                    surrogate,
                    branch_coords: frac_sensors(),
                    with_alpha: true,
                },
                layout: vec![(VarTag::F, frac_sensors()), (VarTag::Alpha, alpha_slot())],
                noise_std: vec![0.0, 0.0],
            };
            (model, Discriminator::new("disc", 51, 128, 3))
        }
        ExperimentId::Darcy => {
            let cells = darcy_cell_centers(DARCY_N);
            let gen = LatentGenerator::gen_i(
                "gen",
                2,
                100,
                &[128, 128],
                Activation::Tanh,
                Activation::Tanh,
                CoordMap::new(vec![0.0, 0.0], vec![1.0, 1.0]),
            );
            let surrogate = OperatorSurrogate::new(
                "onet",
                DARCY_N * DARCY_N,
                &[256, 256],
                &[128, 128],
                128,
                CoordMap::new(vec![0.0, 0.0], vec![1.0, 1.0]),
            );
            let model = PriorModel {
                latent_dim: gen.latent_dim,
                gen,
                kr_gen: None,
                alpha_head: None,
                mode: PhysicsMode::DeepOnet {
                    surrogate,
                    branch_coords: cells.clone(),
                    with_alpha: false,
                },
                layout: vec![(VarTag::KLog, cells)],
                noise_std: vec![0.0],
            };
            (model, Discriminator::new("disc", 400, 512, 2))
        }
        ExperimentId::RiserWindow => {
            let series = synthetic_displacement_series(RISER_SENSORS, RISER_DT, 5.0);
            let window = sliding_windows(&series, RISER_SPAN, 5.0, RISER_READS)?;
            let coords = window.blocks[0].coords.clone();
            let gen = LatentGenerator::gen_i(
                "gen",
                2,
                20,
                &[64, 64, 64],
                Activation::Sin,
                Activation::Tanh,
                CoordMap::new(vec![0.0, 0.0], vec![1.0, RISER_SPAN]),
            );
            let model = direct_model(gen, VarTag::U, coords);
            (model, Discriminator::new("disc", 256, 128, 3))
        }
        ExperimentId::ZigzagAppendixC => {
            return Err(PipelineError::Validation(
                "the zigzag diagnostic has no prior model".into(),
            ))
        }
    })
}

fn init_model_store(ctx: &Ctx, model: &PriorModel, disc: &Discriminator) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = crate::seeded_rng(ctx.cfg.seed, "init");
    if let PhysicsMode::DeepOnet { surrogate, .. } = &model.mode {
        surrogate.init(&mut store, &mut rng);
    }
    model.init(&mut store, &mut rng);
    disc.init(&mut store, &mut rng);
    store
}

/// Rebuild the model and load trained parameters from a checkpoint.
fn load_trained(
    ctx: &Ctx,
    ckpt: &str,
) -> Result<(PriorModel, Discriminator, ParamStore), PipelineError> {
    let (model, disc) = build_model(ctx)?;
    let mut store = init_model_store(ctx, &model, &disc);
    let path = ctx.require(ckpt)?;
    checkpoint::load_into(&path, &mut store)
        .map_err(|e| PipelineError::Validation(format!("cannot load {}: {e}", path.display())))?;
    Ok((model, disc, store))
}

// ----------------------------------------------------------------- stages

fn gen_data(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    let n = ctx.budget.n_historical;
    let seed = ctx.cfg.seed;
    let mut metrics = Metrics::default();
    let set: SnapshotSet = match ctx.cfg.experiment {
        ExperimentId::SineMeta => {
            let sensors = sine_sensors();
            let tasks = sample_sine_tasks(n, &sensors, seed ^ 0x5a17);
            let mut rows = Array2::zeros((n, sensors.nrows()));
            for (r, t) in tasks.iter().enumerate() {
                for (c, v) in t.values.iter().enumerate() {
                    rows[(r, c)] = *v;
                }
            }
            assemble_snapshots(vec![(VarTag::U, sensors, rows)], &[0.0], seed)?
        }
        ExperimentId::GpAppendixB => {
            let sensors = sine_sensors();
            let k = Kernel::squared_exponential(0.2);
            let rows = sample_gp(&k, &sensors, n, seed ^ 0x69b)?;
            assemble_snapshots(vec![(VarTag::U, sensors, rows)], &[0.0], seed)?
        }
        ExperimentId::DrForward => {
            let sensors = dr_sensors();
            let grid: Vec<f64> = sensors.column(0).to_vec();
            let family = ManufacturedSolution::sample(n, seed ^ 0xd2f);
            let kr = ReactionRate::Constant(DR_KR_FORWARD);
            let mut f_rows = Array2::zeros((n, sensors.nrows()));
            for (r, ms) in family.iter().enumerate() {
                for (c, v) in manufactured_source(ms, &kr, DR_D, &grid).into_iter().enumerate() {
                    f_rows[(r, c)] = v;
                }
            }
            let b_rows = Array2::zeros((n, 2));
            assemble_snapshots(
                vec![(VarTag::F, sensors, f_rows), (VarTag::B, dr_boundary(), b_rows)],
                &[0.0, 0.0],
                seed,
            )?
        }
        ExperimentId::DrInverse => {
            let sensors = dr_sensors();
            let grid: Vec<f64> = sensors.column(0).to_vec();
            let family = ManufacturedSolution::sample(n, seed ^ 0xd3f);
            let kr = ReactionRate::ExpDecay { amplitude: 0.4 };
            let mut kr_rows = Array2::zeros((n, sensors.nrows()));
            let mut f_rows = Array2::zeros((n, sensors.nrows()));
            for (r, ms) in family.iter().enumerate() {
                let f = manufactured_source(ms, &kr, DR_D, &grid);
                for c in 0..grid.len() {
                    kr_rows[(r, c)] = kr.eval(ms.u(grid[c]));
                    f_rows[(r, c)] = f[c];
                }
            }
            let b_rows = Array2::zeros((n, 2));
            assemble_snapshots(
                vec![
                    (VarTag::Kr, sensors.clone(), kr_rows),
                    (VarTag::F, sensors, f_rows),
                    (VarTag::B, dr_boundary(), b_rows),
                ],
                &[0.0, 0.0, 0.0],
                seed,
            )?
        }
        ExperimentId::Fractional => {
            let (set, data) = fractional_gen_data(ctx)?;
            let dpath = ctx.path("operator_data.bin");
            data.write_binary(&dpath)?;
            arts.add(&dpath);
            let cpath = ctx.path("operator_data.csv");
            data.write_csv(&cpath)?;
            arts.add(&cpath);
            metrics.push("operator_samples", data.len() as f64);
            set
        }
        ExperimentId::Darcy => {
            let (set, data) = darcy_gen_data(ctx)?;
            let dpath = ctx.path("operator_data.bin");
            data.write_binary(&dpath)?;
            arts.add(&dpath);
            metrics.push("operator_samples", data.len() as f64);
            set
        }
        ExperimentId::RiserWindow => {
            let series =
                synthetic_displacement_series(RISER_SENSORS, RISER_DT, ctx.riser_total_time());
            let train = series.slice_time(0.0, ctx.riser_train_end());
            sliding_windows(&train, RISER_SPAN, RISER_DT, RISER_READS)?
        }
        ExperimentId::ZigzagAppendixC => unreachable!(),
    };
    let path = ctx.path("snapshots.bin");
    set.write_binary(&path)?;
    arts.add(&path);
    metrics.push("snapshots", set.n_realizations() as f64);
    metrics.push("snapshot_columns", set.n_columns() as f64);
    Ok(metrics)
}

/// Joint (alpha, f, u) triples: the source is sampled jointly on the solver
/// grid and the 50 branch sensors, the solution comes from the fractional
/// solver, and the surrogate targets live on a 51-point subgrid.
fn fractional_gen_data(ctx: &Ctx) -> Result<(SnapshotSet, OperatorDataset), PipelineError> {
    let n = ctx.budget.n_historical;
    let seed = ctx.cfg.seed;
    let solver_grid = solver_grid_coords();
    let sensors = frac_sensors();
    let mut joint = Array2::zeros((SOLVER_N + sensors.nrows(), 1));
    joint
        .slice_mut(ndarray::s![..SOLVER_N, ..])
        .assign(&solver_grid);
    joint
        .slice_mut(ndarray::s![SOLVER_N.., ..])
        .assign(&sensors);
    let k = Kernel::squared_exponential(0.2);
    let f_joint = sample_gp(&k, &joint, n, seed ^ 0xf4ac)?;
    let alphas = alpha_prior_sample(n, seed ^ 0xa1fa);

    // targets at every second solver point (boundaries included)
    let eval_idx: Vec<usize> = (0..SOLVER_N).step_by(2).collect();
    let mut eval_coords = Array2::zeros((eval_idx.len(), 1));
    for (r, &i) in eval_idx.iter().enumerate() {
        eval_coords[(r, 0)] = solver_grid[(i, 0)];
    }

    let mut branch = Array2::zeros((n, sensors.nrows() + 1));
    let mut targets = Array2::zeros((n, eval_idx.len()));
    let kr = ReactionRate::Constant(FRAC_KR);
    for r in 0..n {
        let op = riesz_matrix(alphas[r], SOLVER_N)?;
        let f_int: Vec<f64> = (1..SOLVER_N - 1).map(|i| f_joint[(r, i)]).collect();
        let u = solve_diffusion_reaction(&op, FRAC_D, &kr, &f_int)?;
        for (c, &i) in eval_idx.iter().enumerate() {
            targets[(r, c)] = u[i];
        }
        for c in 0..sensors.nrows() {
            branch[(r, c)] = f_joint[(r, SOLVER_N + c)];
        }
        branch[(r, sensors.nrows())] = alphas[r];
    }

    let mut f_rows = Array2::zeros((n, sensors.nrows()));
    for r in 0..n {
        for c in 0..sensors.nrows() {
            f_rows[(r, c)] = f_joint[(r, SOLVER_N + c)];
        }
    }
    let mut a_rows = Array2::zeros((n, 1));
    for r in 0..n {
        a_rows[(r, 0)] = alphas[r];
    }
    let set = assemble_snapshots(
        vec![
            (VarTag::F, sensors, f_rows),
            (VarTag::Alpha, alpha_slot(), a_rows),
        ],
        &[0.0, 0.0],
        seed,
    )?;
    let data = OperatorDataset {
        branch_inputs: branch,
        targets,
        eval_coords,
    };
    Ok((set, data))
}

fn darcy_gen_data(ctx: &Ctx) -> Result<(SnapshotSet, OperatorDataset), PipelineError> {
    let n = ctx.budget.n_historical;
    let seed = ctx.cfg.seed;
    let cells = darcy_cell_centers(DARCY_N);
    let k2d = Kernel::squared_exponential_2d(0.25, 0.25);
    let kl = kl_expansion(&k2d, &cells, 100)?;
    let logk = kl.sample(n, seed ^ 0xdacc);
    let mut heads = Array2::zeros((n, DARCY_N * DARCY_N));
    for r in 0..n {
        let field: Vec<f64> = logk.row(r).iter().map(|v| v.exp()).collect();
        let sol = solve_darcy_2d(&field, DARCY_N)?;
        for (c, h) in sol.head.iter().enumerate() {
            heads[(r, c)] = *h;
        }
    }
    let set = assemble_snapshots(
        vec![(VarTag::KLog, cells.clone(), logk.clone())],
        &[0.0],
        seed,
    )?;
    let data = OperatorDataset {
        branch_inputs: logk,
        targets: heads,
        eval_coords: cells,
    };
    Ok((set, data))
}

fn train_deeponet_stage(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    let mut metrics = Metrics::default();
    if !matches!(
        ctx.cfg.experiment,
        ExperimentId::Fractional | ExperimentId::Darcy
    ) {
        return Ok(metrics); // nothing to train for PINN/direct priors
    }
    let data = OperatorDataset::read_binary(&ctx.require("operator_data.bin")?)
        .map_err(PipelineError::Io)?;
    let (model, _disc) = build_model(ctx)?;
    let PhysicsMode::DeepOnet { surrogate, .. } = &model.mode else {
        unreachable!()
    };
    let mut store = ParamStore::new();
    let mut rng = crate::seeded_rng(ctx.cfg.seed, "deeponet-init");
    surrogate.init(&mut store, &mut rng);

    // hold out the last tenth for generalization reporting
    let n = data.len();
    let split = n - (n / 10).max(1);
    let train_idx: Vec<usize> = (0..split).collect();
    let held_idx: Vec<usize> = (split..n).collect();
    let train = data.subset(&train_idx);
    let held = data.subset(&held_idx);

    let report = train_deeponet(
        surrogate,
        &mut store,
        &train,
        ctx.budget.deeponet_steps,
        64,
        ctx.budget.deeponet_lr,
        ctx.cfg.seed ^ 0x0e7,
    )?;
    let rel = crate::nets::deeponet_relative_l2(surrogate, &store, &held);
    metrics.push("deeponet_final_mse", report.final_mse);
    metrics.push("deeponet_heldout_rel_l2", rel);
    metrics.push(
        "deeponet_ma_non_increasing",
        f64::from(trailing_ma_non_increasing(&report.mse_history, 1000)),
    );

    let path = ctx.path("deeponet.ckpt");
    let names = surrogate.param_names();
    checkpoint::save(
        &path,
        &store,
        &names,
        "deeponet",
        serde_json::json!({
            "experiment": ctx.cfg.experiment.as_str(),
            "steps": ctx.budget.deeponet_steps,
            "heldout_rel_l2": rel,
        }),
    )?;
    arts.add(&path);
    Ok(metrics)
}

fn trailing_ma_non_increasing(history: &[f64], window: usize) -> bool {
    if history.len() < 2 * window {
        return true;
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let n = history.len();
    let last = avg(&history[n - window..]);
    let prev = avg(&history[n - 2 * window..n - window]);
    last <= prev * 1.05
}

fn train_prior_stage(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    let real = SnapshotSet::read_binary(&ctx.require("snapshots.bin")?)?;
    let (model, disc) = build_model(ctx)?;
    let mut store = init_model_store(ctx, &model, &disc);
    if matches!(model.mode, PhysicsMode::DeepOnet { .. }) {
        let p = ctx.require("deeponet.ckpt")?;
        checkpoint::load_into(&p, &mut store)
            .map_err(|e| PipelineError::Validation(format!("cannot load {}: {e}", p.display())))?;
    }

    let mut cfg = TrainConfig::new(ctx.budget.gan_steps, ctx.cfg.seed ^ 0x6a11);
    cfg.checkpoint_interval = Some((ctx.budget.gan_steps / 4).max(1));
    cfg.checkpoint_dir = Some(ctx.path("checkpoints"));
    let history = crate::gan::train_prior(&model, &disc, &mut store, &real, &cfg)?;

    let hpath = ctx.path("loss_history.csv");
    history.write_csv(&hpath)?;
    arts.add(&hpath);

    let ckpt = ctx.path("prior.ckpt");
    let names: Vec<String> = store.names().to_vec();
    checkpoint::save(
        &ckpt,
        &store,
        &names,
        "prior-model",
        serde_json::json!({
            "experiment": ctx.cfg.experiment.as_str(),
            "steps": ctx.budget.gan_steps,
        }),
    )?;
    arts.add(&ckpt);

    let mut metrics = Metrics::default();
    if let Some(last) = history.rows.last() {
        metrics.push("final_loss_g", last.loss_g);
        metrics.push("final_loss_d", last.loss_d);
        metrics.push("final_penalty", last.penalty);
    }
    Ok(metrics)
}

// ------------------------------------------------------------- posteriors

/// Draw `count` distinct row indices.
fn pick_indices(n: usize, count: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx
}

fn gaussian_noise(n: usize, sigma: f64, rng: &mut rand_chacha::ChaCha20Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

fn stats_of<'a>(stats: &'a [VariableStats], var: VarTag) -> &'a VariableStats {
    stats.iter().find(|s| s.var == var).expect("variable stats")
}

fn rmse(mean: &[f64], truth: &[f64]) -> f64 {
    let n = mean.len() as f64;
    (mean
        .iter()
        .zip(truth.iter())
        .map(|(m, t)| (m - t) * (m - t))
        .sum::<f64>()
        / n)
        .sqrt()
}

fn write_draws_csv(path: &PathBuf, draws: &PosteriorDraws) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = draws.draws.ncols();
    let header: Vec<String> = (0..d).map(|i| format!("xi_{i}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for row in draws.draws.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

fn write_summary_json(
    path: &PathBuf,
    cfg: &ExperimentConfig,
    sampler: &SamplerConfig,
    draws: &PosteriorDraws,
) -> std::io::Result<()> {
    let body = serde_json::json!({
        "experiment": cfg.experiment.as_str(),
        "seed": cfg.seed,
        "sampler": sampler,
        "method": draws.method,
        "acceptance": draws.acceptance,
        "step_size": draws.step_size,
        "divergences": draws.divergences,
        "max_depth_hits": draws.max_depth_hits,
        "warnings": draws.warnings,
        "draws": draws.draws.nrows(),
    });
    std::fs::write(path, serde_json::to_string_pretty(&body).unwrap())
}

fn push_grid_rows(
    rows: &mut Vec<GridStatRow>,
    stats: &VariableStats,
    truth: Option<&[f64]>,
    name: &str,
) {
    for i in 0..stats.mean.len() {
        rows.push(GridStatRow {
            var: name.to_string(),
            coord: stats.coords.row(i).to_vec(),
            mean: stats.mean[i],
            std: stats.std[i],
            truth: truth.map(|t| t[i]),
        });
    }
}

fn posterior_stage(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    match ctx.cfg.experiment {
        ExperimentId::RiserWindow => return riser_posterior(ctx, arts),
        ExperimentId::ZigzagAppendixC => unreachable!(),
        _ => {}
    }
    let (model, _disc, store) = load_trained(ctx, "prior.ckpt")?;
    let sampler = SamplerConfig {
        burn_in: ctx.budget.burn_in,
        draws: ctx.budget.draws,
        ..SamplerConfig::nuts(ctx.cfg.seed ^ 0x0415)
    };
    let mut metrics = Metrics::default();
    let mut grid_rows: Vec<GridStatRow> = Vec::new();
    let mut obs_for_plot: Vec<(VarTag, Vec<f64>, Vec<f64>)> = Vec::new();

    let (obs, targets): (Vec<Observation>, Vec<(VarTag, Array2<f64>, Vec<f64>)>) =
        match ctx.cfg.experiment {
            ExperimentId::GpAppendixB => {
                let grid = eval_grid_201();
                let k = Kernel::squared_exponential(0.2);
                let truth = sample_gp(&k, &grid, 1, ctx.cfg.seed ^ 0x7bb)?
                    .row(0)
                    .to_vec();
                let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
                let idx = pick_indices(grid.nrows(), 10, &mut rng);
                let noise = gaussian_noise(10, 0.01, &mut rng);
                let obs: Vec<Observation> = idx
                    .iter()
                    .zip(noise.iter())
                    .map(|(&i, e)| {
                        Observation::new(VarTag::U, &[grid[(i, 0)]], truth[i] + e, 0.01)
                    })
                    .collect();
                (obs, vec![(VarTag::U, grid, truth)])
            }
            ExperimentId::SineMeta => {
                let grid = eval_grid_201();
                let truth: Vec<f64> = grid.column(0).iter().map(|x| (10.0 * x).sin()).collect();
                let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
                let xs = equidistant(4, -0.8, -0.4);
                let noise = gaussian_noise(4, 0.05, &mut rng);
                let obs: Vec<Observation> = xs
                    .rows()
                    .into_iter()
                    .zip(noise.iter())
                    .map(|(x, e)| {
                        Observation::new(VarTag::U, &[x[0]], (10.0 * x[0]).sin() + e, 0.05)
                    })
                    .collect();
                (obs, vec![(VarTag::U, grid, truth)])
            }
            ExperimentId::DrForward => {
                let grid = eval_grid_201();
                let gridv: Vec<f64> = grid.column(0).to_vec();
                let ms = ManufacturedSolution::sample(1, ctx.cfg.seed ^ 0x70f)
                    .pop()
                    .unwrap();
                let kr = ReactionRate::Constant(DR_KR_FORWARD);
                let f_truth = manufactured_source(&ms, &kr, DR_D, &gridv);
                let u_truth: Vec<f64> = gridv.iter().map(|&x| ms.u(x)).collect();
                let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
                let idx = pick_indices(grid.nrows(), 10, &mut rng);
                let noise = gaussian_noise(10, 0.05, &mut rng);
                let obs: Vec<Observation> = idx
                    .iter()
                    .zip(noise.iter())
                    .map(|(&i, e)| {
                        Observation::new(VarTag::F, &[gridv[i]], f_truth[i] + e, 0.05)
                    })
                    .collect();
                (
                    obs,
                    vec![
                        (VarTag::F, grid.clone(), f_truth),
                        (VarTag::U, grid, u_truth),
                    ],
                )
            }
            ExperimentId::DrInverse => {
                let grid = eval_grid_201();
                let gridv: Vec<f64> = grid.column(0).to_vec();
                let ms = ManufacturedSolution::sample(1, ctx.cfg.seed ^ 0x71f)
                    .pop()
                    .unwrap();
                let kr = ReactionRate::ExpDecay { amplitude: 0.4 };
                let f_truth = manufactured_source(&ms, &kr, DR_D, &gridv);
                let u_truth: Vec<f64> = gridv.iter().map(|&x| ms.u(x)).collect();
                let kr_truth: Vec<f64> = u_truth.iter().map(|&u| kr.eval(u)).collect();
                let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
                let f_idx = pick_indices(grid.nrows(), 10, &mut rng);
                let u_idx = pick_indices(grid.nrows(), 2, &mut rng);
                let f_noise = gaussian_noise(10, 0.05, &mut rng);
                let u_noise = gaussian_noise(2, 0.05, &mut rng);
                let mut obs = Vec::new();
                for (&i, e) in f_idx.iter().zip(f_noise.iter()) {
                    obs.push(Observation::new(VarTag::F, &[gridv[i]], f_truth[i] + e, 0.05));
                }
                for (&i, e) in u_idx.iter().zip(u_noise.iter()) {
                    obs.push(Observation::new(VarTag::U, &[gridv[i]], u_truth[i] + e, 0.05));
                }
                (
                    obs,
                    vec![
                        (VarTag::F, grid.clone(), f_truth),
                        (VarTag::U, grid.clone(), u_truth),
                        (VarTag::Kr, grid, kr_truth),
                    ],
                )
            }
            ExperimentId::Fractional => {
                let grid = solver_grid_coords();
                let gridv: Vec<f64> = grid.column(0).to_vec();
                let sensors = frac_sensors();
                let mut joint = Array2::zeros((SOLVER_N + sensors.nrows(), 1));
                joint.slice_mut(ndarray::s![..SOLVER_N, ..]).assign(&grid);
                joint
                    .slice_mut(ndarray::s![SOLVER_N.., ..])
                    .assign(&sensors);
                let k = Kernel::squared_exponential(0.2);
                let f_joint = sample_gp(&k, &joint, 1, ctx.cfg.seed ^ 0xf7)?;
                let f_truth: Vec<f64> = (0..SOLVER_N).map(|i| f_joint[(0, i)]).collect();
                let op = riesz_matrix(FRAC_ALPHA_TRUTH, SOLVER_N)?;
                let kr = ReactionRate::Constant(FRAC_KR);
                let u_truth =
                    solve_diffusion_reaction(&op, FRAC_D, &kr, &f_truth[1..SOLVER_N - 1])?;
                let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
                let f_idx = pick_indices(SOLVER_N, 10, &mut rng);
                let u_idx = pick_indices(SOLVER_N, 4, &mut rng);
                let f_noise = gaussian_noise(10, 0.05, &mut rng);
                let u_noise = gaussian_noise(4, 0.05, &mut rng);
                let mut obs = Vec::new();
                for (&i, e) in f_idx.iter().zip(f_noise.iter()) {
                    obs.push(Observation::new(VarTag::F, &[gridv[i]], f_truth[i] + e, 0.05));
                }
                for (&i, e) in u_idx.iter().zip(u_noise.iter()) {
                    obs.push(Observation::new(VarTag::U, &[gridv[i]], u_truth[i] + e, 0.05));
                }
                (
                    obs,
                    vec![
                        (VarTag::F, grid.clone(), f_truth),
                        (VarTag::U, grid, u_truth),
                    ],
                )
            }
            ExperimentId::Darcy => {
                let cells = darcy_cell_centers(DARCY_N);
                let k2d = Kernel::squared_exponential_2d(0.25, 0.25);
                let kl = kl_expansion(&k2d, &cells, 100)?;
                let logk_truth: Vec<f64> =
                    kl.sample(1, ctx.cfg.seed ^ 0xda7).row(0).to_vec();
                let field: Vec<f64> = logk_truth.iter().map(|v| v.exp()).collect();
                let h_truth = solve_darcy_2d(&field, DARCY_N)?.head;
                let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
                let k_idx = pick_indices(cells.nrows(), 10, &mut rng);
                let h_idx = pick_indices(cells.nrows(), 10, &mut rng);
                let k_noise = gaussian_noise(10, 0.05, &mut rng);
                let h_noise = gaussian_noise(10, 0.05, &mut rng);
                let mut obs = Vec::new();
                for (&i, e) in k_idx.iter().zip(k_noise.iter()) {
                    obs.push(Observation::new(
                        VarTag::KLog,
                        &[cells[(i, 0)], cells[(i, 1)]],
                        logk_truth[i] + e,
                        0.05,
                    ));
                }
                for (&i, e) in h_idx.iter().zip(h_noise.iter()) {
                    obs.push(Observation::new(
                        VarTag::H,
                        &[cells[(i, 0)], cells[(i, 1)]],
                        h_truth[i] + e,
                        0.05,
                    ));
                }
                (
                    obs,
                    vec![
                        (VarTag::KLog, cells.clone(), logk_truth),
                        (VarTag::H, cells, h_truth),
                    ],
                )
            }
            _ => unreachable!(),
        };

    let mut post = GraphPosterior::new(&model, &store, &obs)?;
    let draws = crate::inference::sample_nuts(&mut post, &sampler);
    metrics.push("acceptance", draws.acceptance);
    metrics.push("step_size", draws.step_size);
    metrics.push("divergences", draws.divergences as f64);

    let push_targets: Vec<(VarTag, Array2<f64>)> = targets
        .iter()
        .map(|(v, c, _)| (*v, c.clone()))
        .collect();
    let stats = pushforward(&model, &store, &draws.draws, &push_targets)?;

    for (var, _, truth) in &targets {
        let s = stats_of(&stats, *var);
        let name = var.as_str();
        metrics.push(&format!("rmse_{name}"), rmse(&s.mean, truth));
        metrics.push(
            &format!("coverage1_{name}"),
            coverage(&s.mean, &s.std, truth, 1.0),
        );
        metrics.push(
            &format!("coverage2_{name}"),
            coverage(&s.mean, &s.std, truth, 2.0),
        );
        push_grid_rows(&mut grid_rows, s, Some(truth), name);
    }

    // alpha statistics for the fractional system
    if ctx.cfg.experiment == ExperimentId::Fractional {
        let a_stats = pushforward(
            &model,
            &store,
            &draws.draws,
            &[(VarTag::Alpha, alpha_slot())],
        )?;
        let (am, asd) = (a_stats[0].mean[0], a_stats[0].std[0]);
        metrics.push("alpha_mean", am);
        metrics.push("alpha_std", asd);
        metrics.push("alpha_truth", FRAC_ALPHA_TRUTH);
        metrics.push(
            "alpha_within_2std",
            f64::from((am - FRAC_ALPHA_TRUTH).abs() <= 2.0 * asd),
        );
    }

    // observation-gap uncertainty pattern
    match ctx.cfg.experiment {
        ExperimentId::GpAppendixB | ExperimentId::SineMeta => {
            let (var, _, _) = &targets[0];
            let s = stats_of(&stats, *var);
            let obs_x: Vec<f64> = obs.iter().map(|o| o.coord[0]).collect();
            let dist = |x: f64| {
                obs_x
                    .iter()
                    .map(|o| (x - o).abs())
                    .fold(f64::INFINITY, f64::min)
            };
            let mut near = (f64::INFINITY, 0usize);
            let mut far = (f64::NEG_INFINITY, 0usize);
            for i in 0..s.coords.nrows() {
                let d = dist(s.coords[(i, 0)]);
                if d < near.0 {
                    near = (d, i);
                }
                if d > far.0 {
                    far = (d, i);
                }
            }
            metrics.push("std_nearest_obs", s.std[near.1]);
            metrics.push("std_farthest_obs", s.std[far.1]);
        }
        ExperimentId::Darcy => {
            for (var, name) in [(VarTag::KLog, "k_log"), (VarTag::H, "h")] {
                let s = stats_of(&stats, var);
                let obs_cells: Vec<(f64, f64)> = obs
                    .iter()
                    .filter(|o| o.var == var)
                    .map(|o| (o.coord[0], o.coord[1]))
                    .collect();
                let mut s_obs = 0.0;
                let mut n_obs = 0usize;
                let mut s_un = 0.0;
                let mut n_un = 0usize;
                for i in 0..s.coords.nrows() {
                    let c = (s.coords[(i, 0)], s.coords[(i, 1)]);
                    let observed = obs_cells
                        .iter()
                        .any(|o| (o.0 - c.0).abs() < 1e-12 && (o.1 - c.1).abs() < 1e-12);
                    if observed {
                        s_obs += s.std[i];
                        n_obs += 1;
                    } else {
                        s_un += s.std[i];
                        n_un += 1;
                    }
                }
                metrics.push(
                    &format!("std_observed_mean_{name}"),
                    s_obs / n_obs.max(1) as f64,
                );
                metrics.push(
                    &format!("std_unobserved_mean_{name}"),
                    s_un / n_un.max(1) as f64,
                );
            }
            // conductivity statistics through the exponential transform
            let cells = darcy_cell_centers(DARCY_N);
            let kstats = exp_transform_stats(&model, &store, &draws.draws, &cells)?;
            for i in 0..cells.nrows() {
                grid_rows.push(GridStatRow {
                    var: "k".into(),
                    coord: cells.row(i).to_vec(),
                    mean: kstats.0[i],
                    std: kstats.1[i],
                    truth: None,
                });
            }
        }
        _ => {}
    }

    for o in &obs {
        obs_for_plot
            .iter_mut()
            .find(|(v, _, _)| *v == o.var)
            .map(|(_, xs, ys)| {
                xs.push(o.coord[0]);
                ys.push(o.value);
            })
            .unwrap_or_else(|| {
                obs_for_plot.push((o.var, vec![o.coord[0]], vec![o.value]));
            });
    }

    // artifacts
    let dpath = ctx.path("posterior_draws.csv");
    write_draws_csv(&dpath, &draws)?;
    arts.add(&dpath);
    let spath = ctx.path("posterior_summary.json");
    write_summary_json(&spath, ctx.cfg, &sampler, &draws)?;
    arts.add(&spath);
    let gpath = ctx.path("grid_stats.csv");
    GridStats { rows: grid_rows }.write_csv(&gpath)?;
    arts.add(&gpath);

    let plots = ctx.path("plots");
    std::fs::create_dir_all(&plots)?;
    for (var, coords, truth) in &targets {
        let name = var.as_str();
        let s = stats_of(&stats, *var);
        if coords.ncols() == 1 {
            let x: Vec<f64> = coords.column(0).to_vec();
            let lo: Vec<f64> = s
                .mean
                .iter()
                .zip(s.std.iter())
                .map(|(m, sd)| m - 2.0 * sd)
                .collect();
            let hi: Vec<f64> = s
                .mean
                .iter()
                .zip(s.std.iter())
                .map(|(m, sd)| m + 2.0 * sd)
                .collect();
            let op = obs_for_plot.iter().find(|(v, _, _)| v == var);
            let p = plots.join(format!("{name}.svg"));
            plot::line_plot_with_band(
                &p,
                &format!("{name}: mean with 2 std band"),
                &x,
                &s.mean,
                &lo,
                &hi,
                Some(truth),
                op.map(|(_, xs, ys)| (xs.as_slice(), ys.as_slice())),
            )?;
            arts.add(&p);
        } else {
            // 2-D: mean / absolute error / std panels
            let err: Vec<f64> = s
                .mean
                .iter()
                .zip(truth.iter())
                .map(|(m, t)| (m - t).abs())
                .collect();
            for (suffix, values) in [("mean", &s.mean), ("error", &err), ("std", &s.std)] {
                let p = plots.join(format!("{name}_{suffix}.svg"));
                plot::heatmap(&p, &format!("{name} {suffix}"), DARCY_N, DARCY_N, values)?;
                arts.add(&p);
            }
        }
    }
    Ok(metrics)
}

/// Mean/std of `exp(log K)` per cell via the sample transform.
fn exp_transform_stats(
    model: &PriorModel,
    store: &ParamStore,
    draws: &Array2<f64>,
    cells: &Array2<f64>,
) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    use crate::autodiff::{Bindings, Graph, Tape};
    let m = draws.nrows();
    let chunk = 250usize.min(m);
    let n = cells.nrows();
    let mut g = Graph::new();
    let xi = g.input("xi", (chunk, model.latent_dim));
    let block = model.predict(&mut g, store, xi, VarTag::KLog, cells)?;
    let kexp = g.exp(block);
    let mut tape = Tape::new(&g);
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    let mut bind = Bindings::new();
    let mut seen = 0usize;
    while seen < m {
        let take = chunk.min(m - seen);
        let mut xiv = Array2::zeros((chunk, model.latent_dim));
        for r in 0..take {
            xiv.row_mut(r).assign(&draws.row(seen + r));
        }
        bind.insert("xi".into(), xiv);
        tape.forward(&g, store, &bind)
            .map_err(|e| PipelineError::Numerical(e.to_string()))?;
        let rows = tape.value(kexp);
        for r in 0..take {
            for c in 0..n {
                sum[c] += rows[(r, c)];
                sumsq[c] += rows[(r, c)] * rows[(r, c)];
            }
        }
        seen += take;
    }
    let mf = m as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / mf).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(mean.iter())
        .map(|(sq, mu)| ((sq - mf * mu * mu) / (mf - 1.0).max(1.0)).max(0.0).sqrt())
        .collect();
    Ok((mean, std))
}

/// Per-window posteriors on the held-out section with 1-sensor and 3-sensor
/// scenarios, 6 reads each.
fn riser_posterior(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    let (model, _disc, store) = load_trained(ctx, "prior.ckpt")?;
    let mut metrics = Metrics::default();

    let series = synthetic_displacement_series(RISER_SENSORS, RISER_DT, ctx.riser_total_time());
    let t_train_end = ctx.riser_train_end();
    let test = series.slice_time(t_train_end, ctx.riser_total_time());
    let test_stride = 0.4;
    let test_set = sliding_windows(&test, RISER_SPAN, test_stride, RISER_READS)?;
    let coords = test_set.blocks[0].coords.clone();
    let n_windows = ctx.budget.n_test_windows.min(test_set.n_realizations());

    // 6 equidistant reads of the 16 selected ones
    let read_slots: Vec<usize> = (0..6).map(|k| k * 3).collect();
    let scenarios: [(&str, &[usize]); 2] = [("1sensor", &[8]), ("3sensor", &[3, 8, 12])];

    let mut rng = crate::seeded_rng(ctx.cfg.seed, "riser-obs");
    let mut l2 = vec![vec![0.0f64; n_windows]; 2];
    let mut cov2 = vec![vec![0.0f64; n_windows]; 2];
    let mut cov1 = vec![vec![0.0f64; n_windows]; 2];

    use std::io::Write;
    let wpath = ctx.path("window_metrics.csv");
    let mut wfile = std::io::BufWriter::new(std::fs::File::create(&wpath)?);
    writeln!(wfile, "window,scenario,rel_l2,coverage1,coverage2,acceptance")?;

    for w in 0..n_windows {
        let truth: Vec<f64> = test_set.data.row(w).to_vec();
        for (si, (sname, sensors)) in scenarios.iter().enumerate() {
            let mut obs = Vec::new();
            for &slot in &read_slots {
                for &sensor in sensors.iter() {
                    let col = slot * RISER_SENSORS + sensor;
                    let noise: f64 = {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        0.1 * z
                    };
                    obs.push(Observation::new(
                        VarTag::U,
                        &[coords[(col, 0)], coords[(col, 1)]],
                        truth[col] + noise,
                        0.1,
                    ));
                }
            }
            let mut post = GraphPosterior::new(&model, &store, &obs)?;
            let sampler = SamplerConfig {
                burn_in: ctx.budget.burn_in,
                draws: ctx.budget.draws,
                ..SamplerConfig::nuts(ctx.cfg.seed ^ (w as u64) << 8 ^ si as u64)
            };
            let draws = crate::inference::sample_nuts(&mut post, &sampler);
            let stats = pushforward(&model, &store, &draws.draws, &[(VarTag::U, coords.clone())])?;
            let s = &stats[0];
            let num: f64 = s
                .mean
                .iter()
                .zip(truth.iter())
                .map(|(m, t)| (m - t) * (m - t))
                .sum();
            let den: f64 = truth.iter().map(|t| t * t).sum();
            l2[si][w] = (num / den.max(1e-300)).sqrt();
            cov1[si][w] = coverage(&s.mean, &s.std, &truth, 1.0);
            cov2[si][w] = coverage(&s.mean, &s.std, &truth, 2.0);
            writeln!(
                wfile,
                "{w},{sname},{},{},{},{}",
                l2[si][w], cov1[si][w], cov2[si][w], draws.acceptance
            )?;

            if w == 0 {
                let plots = ctx.path("plots");
                std::fs::create_dir_all(&plots)?;
                let reshaped = |v: &[f64]| -> Vec<f64> {
                    // columns are time-major; heatmap wants x-major (i, j)
                    let mut out = vec![0.0; v.len()];
                    for jj in 0..RISER_READS {
                        for i in 0..RISER_SENSORS {
                            out[i * RISER_READS + jj] = v[jj * RISER_SENSORS + i];
                        }
                    }
                    out
                };
                let err: Vec<f64> = s
                    .mean
                    .iter()
                    .zip(truth.iter())
                    .map(|(m, t)| (m - t).abs())
                    .collect();
                for (suffix, values) in [
                    ("truth", &truth),
                    ("mean", &s.mean),
                    ("error", &err),
                    ("std", &s.std),
                ] {
                    let p = plots.join(format!("window0_{sname}_{suffix}.svg"));
                    plot::heatmap(
                        &p,
                        &format!("window 0 {sname} {suffix}"),
                        RISER_SENSORS,
                        RISER_READS,
                        &reshaped(values),
                    )?;
                    arts.add(&p);
                }
            }
        }
    }
    drop(wfile);
    arts.add(&wpath);

    let improved = (0..n_windows)
        .filter(|&w| l2[1][w] <= l2[0][w])
        .count() as f64
        / n_windows as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    metrics.push("windows", n_windows as f64);
    metrics.push("improved_fraction", improved);
    metrics.push("mean_l2_1sensor", mean(&l2[0]));
    metrics.push("mean_l2_3sensor", mean(&l2[1]));
    metrics.push("coverage1_mean_3sensor", mean(&cov1[1]));
    metrics.push("coverage2_mean_3sensor", mean(&cov2[1]));
    Ok(metrics)
}

// -------------------------------------------------------------- baselines

fn baseline_stage(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    let mut metrics = Metrics::default();
    match ctx.cfg.experiment {
        ExperimentId::SineMeta => {
            // same observations as the posterior stage
            let grid = eval_grid_201();
            let gridv: Vec<f64> = grid.column(0).to_vec();
            let truth: Vec<f64> = gridv.iter().map(|x| (10.0 * x).sin()).collect();
            let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
            let xs = equidistant(4, -0.8, -0.4);
            let noise = gaussian_noise(4, 0.05, &mut rng);
            let ox: Vec<f64> = xs.column(0).to_vec();
            let oy: Vec<f64> = ox
                .iter()
                .zip(noise.iter())
                .map(|(x, e)| (10.0 * x).sin() + e)
                .collect();

            let gpr = gpr_fit(&ox, &oy, (0.3, 1.0, 0.0025), true, ctx.cfg.seed ^ 0x99)?;
            let (gm, gs) = gpr.predict(&gridv);
            metrics.push("gpr_rmse", rmse(&gm, &truth));
            metrics.push("gpr_coverage2", coverage(&gm, &gs, &truth, 2.0));
            metrics.push(
                "gpr_mean_std",
                gs.iter().sum::<f64>() / gs.len() as f64,
            );
            save_gpr(&ctx.path("gpr_model.json"), &gpr)?;
            arts.add(&ctx.path("gpr_model.json"));

            // meta-learned initialization on the same family
            let (maml_metrics, maml_path) = sine_maml(ctx, &ox, &oy, &gridv, &truth)?;
            metrics.extend(maml_metrics);
            arts.add(&maml_path);
        }
        ExperimentId::GpAppendixB => {
            let grid = eval_grid_201();
            let gridv: Vec<f64> = grid.column(0).to_vec();
            let k = Kernel::squared_exponential(0.2);
            let truth = sample_gp(&k, &grid, 1, ctx.cfg.seed ^ 0x7bb)?.row(0).to_vec();
            let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
            let idx = pick_indices(grid.nrows(), 10, &mut rng);
            let noise = gaussian_noise(10, 0.01, &mut rng);
            let ox: Vec<f64> = idx.iter().map(|&i| gridv[i]).collect();
            let oy: Vec<f64> = idx
                .iter()
                .zip(noise.iter())
                .map(|(&i, e)| truth[i] + e)
                .collect();
            let gpr = gpr_fit(&ox, &oy, (0.2, 1.0, 1e-4), true, ctx.cfg.seed ^ 0x98)?;
            let (gm, gs) = gpr.predict(&gridv);
            metrics.push("gpr_rmse", rmse(&gm, &truth));
            metrics.push("gpr_coverage2", coverage(&gm, &gs, &truth, 2.0));
            metrics.push("gpr_mean_std", gs.iter().sum::<f64>() / gs.len() as f64);
            save_gpr(&ctx.path("gpr_model.json"), &gpr)?;
            arts.add(&ctx.path("gpr_model.json"));
        }
        _ => {}
    }
    Ok(metrics)
}

fn save_gpr(path: &PathBuf, model: &GprModel) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(model).unwrap())
}

fn sine_maml(
    ctx: &Ctx,
    obs_x: &[f64],
    obs_y: &[f64],
    grid: &[f64],
    truth: &[f64],
) -> Result<(Metrics, PathBuf), PipelineError> {
    let mut metrics = Metrics::default();
    let model = Mlp::new("maml", MlpSpec::new(vec![1, 40, 40, 1], Activation::Tanh));
    let mut store = ParamStore::new();
    let mut rng = crate::seeded_rng(ctx.cfg.seed, "maml-init");
    model.init(&mut store, &mut rng);

    let sensors = sine_sensors();
    let sensor_x: Vec<f64> = sensors.column(0).to_vec();
    let k = 20usize;
    let sampler = move |rng: &mut rand_chacha::ChaCha20Rng| -> MamlTask {
        let a = rng.gen_range(1.0..3.0);
        let w = rng.gen_range(2.0..12.0);
        let mut idx: Vec<usize> = (0..sensor_x.len()).collect();
        idx.shuffle(rng);
        let (inner, outer) = idx.split_at(k);
        let build = |ids: &[usize]| {
            let x = Array2::from_shape_vec(
                (ids.len(), 1),
                ids.iter().map(|&i| sensor_x[i]).collect(),
            )
            .unwrap();
            let y = Array2::from_shape_vec(
                (ids.len(), 1),
                ids.iter().map(|&i| a * (w * sensor_x[i]).sin()).collect(),
            )
            .unwrap();
            (x, y)
        };
        let (x_in, y_in) = build(inner);
        let (x_out, y_out) = build(outer);
        MamlTask {
            x_in,
            y_in,
            x_out,
            y_out,
        }
    };

    let cfg = MamlConfig {
        meta_steps: ctx.budget.meta_steps,
        seed: ctx.cfg.seed ^ 0x3a31,
        ..MamlConfig::default()
    };
    let report = maml_train(&model, &mut store, sampler, &cfg)?;
    metrics.push(
        "maml_meta_loss_final",
        report.meta_loss_history.last().copied().unwrap_or(f64::NAN),
    );
    metrics.push(
        "maml_tail_non_increasing",
        f64::from(!report.non_decreasing_tail),
    );

    let ckpt = ctx.path("maml_init.ckpt");
    let names = model.param_names();
    checkpoint::save(
        &ckpt,
        &store,
        &names,
        "maml-init",
        serde_json::json!({"meta_steps": cfg.meta_steps}),
    )?;

    // adapt the meta-initialization to the 4 noisy measurements
    let x = Array2::from_shape_vec((obs_x.len(), 1), obs_x.to_vec()).unwrap();
    let y = Array2::from_shape_vec((obs_y.len(), 1), obs_y.to_vec()).unwrap();
    let mut adapted = store.clone();
    let adapt = maml_adapt(&model, &mut adapted, &x, &y, 1e-3, 5000, 200)?;
    metrics.push("maml_adapt_loss", adapt.final_loss);

    let pred = mlp_predict(&model, &adapted, grid);
    metrics.push("maml_rmse", rmse(&pred, truth));
    let (mut meas_sq, mut meas_n, mut un_sq, mut un_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, &x) in grid.iter().enumerate() {
        let d = (pred[i] - truth[i]) * (pred[i] - truth[i]);
        if (-0.8..=-0.4).contains(&x) {
            meas_sq += d;
            meas_n += 1;
        } else {
            un_sq += d;
            un_n += 1;
        }
    }
    metrics.push("maml_residual_measured", (meas_sq / meas_n as f64).sqrt());
    metrics.push("maml_residual_unmeasured", (un_sq / un_n as f64).sqrt());

    // held-out improvement rate: post-adaptation vs pre-adaptation error
    let n_tasks = 100;
    let mut improved = 0usize;
    let mut eval_rng = crate::seeded_rng(ctx.cfg.seed, "maml-heldout");
    for _ in 0..n_tasks {
        let a = eval_rng.gen_range(1.0..3.0);
        let w = eval_rng.gen_range(2.0..12.0);
        let sx: Vec<f64> = sensors.column(0).to_vec();
        let mut idx: Vec<usize> = (0..sx.len()).collect();
        idx.shuffle(&mut eval_rng);
        let (fit_ids, test_ids) = idx.split_at(k);
        let xf = Array2::from_shape_vec(
            (fit_ids.len(), 1),
            fit_ids.iter().map(|&i| sx[i]).collect(),
        )
        .unwrap();
        let yf = Array2::from_shape_vec(
            (fit_ids.len(), 1),
            fit_ids.iter().map(|&i| a * (w * sx[i]).sin()).collect(),
        )
        .unwrap();
        let test_x: Vec<f64> = test_ids.iter().map(|&i| sx[i]).collect();
        let test_y: Vec<f64> = test_ids.iter().map(|&i| a * (w * sx[i]).sin()).collect();

        let pre = mlp_predict(&model, &store, &test_x);
        let pre_mse: f64 = pre
            .iter()
            .zip(test_y.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / test_y.len() as f64;
        let mut task_store = store.clone();
        maml_adapt(&model, &mut task_store, &xf, &yf, 1e-3, 1000, 50)?;
        let post = mlp_predict(&model, &task_store, &test_x);
        let post_mse: f64 = post
            .iter()
            .zip(test_y.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / test_y.len() as f64;
        if post_mse < pre_mse {
            improved += 1;
        }
    }
    metrics.push("maml_improved_fraction", improved as f64 / n_tasks as f64);
    Ok((metrics, ckpt))
}

fn mlp_predict(model: &Mlp, store: &ParamStore, xs: &[f64]) -> Vec<f64> {
    use crate::autodiff::{Bindings, Graph, Tape};
    let mut g = Graph::new();
    let x = g.input("x", (xs.len(), 1));
    let pred = model.forward(&mut g, store, x);
    let mut tape = Tape::new(&g);
    let mut bind = Bindings::new();
    bind.insert(
        "x".into(),
        Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap(),
    );
    tape.forward(&g, store, &bind).expect("forward");
    tape.value(pred).column(0).to_vec()
}

// -------------------------------------------------------------- diagnose

fn diagnose_stage(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    let mut metrics = Metrics::default();
    match ctx.cfg.experiment {
        ExperimentId::GpAppendixB => {
            let (model, _disc, store) = load_trained(ctx, "prior.ckpt")?;
            let sensors = sine_sensors();
            let k = Kernel::squared_exponential(0.2);
            let gram = k.gram(&sensors);
            let reference = Array2::from_shape_fn((30, 30), |(i, j)| gram[(i, j)]);
            let mse = covariance_mse(
                &model,
                &store,
                VarTag::U,
                &sensors,
                &reference,
                ctx.budget.covariance_samples,
                ctx.cfg.seed ^ 0xc0,
            )?;
            metrics.push("covariance_mse", mse.absolute);
            metrics.push("covariance_mse_relative", mse.relative);

            if ctx.budget.compare_gan_steps > 0 {
                let rows = generator_comparison(ctx, &model, &store, &reference)?;
                let cpath = ctx.path("generator_comparison.csv");
                super::write_compare_csv(&rows, &cpath)?;
                arts.add(&cpath);
                for r in &rows {
                    if r.variant != "gpr" {
                        metrics.push(
                            &format!("compare_{}_{}_coverage2", r.variant, r.method),
                            r.coverage_2std,
                        );
                    }
                }
            }
        }
        ExperimentId::SineMeta => {
            let (model, _disc, store) = load_trained(ctx, "prior.ckpt")?;
            let (q05, q95) = amplitude_quantiles(&model, &store, ctx.cfg.seed ^ 0xa9)?;
            metrics.push("amplitude_q05", q05);
            metrics.push("amplitude_q95", q95);
        }
        _ => {
            // empirical-covariance fit of the primary block
            let (model, _disc, store) = load_trained(ctx, "prior.ckpt")?;
            let real = SnapshotSet::read_binary(&ctx.require("snapshots.bin")?)?;
            let (var, coords) = model.layout[0].clone();
            let range = real.block_range(0);
            let block = real.data.slice(ndarray::s![.., range]).to_owned();
            let reference = crate::gan::empirical_covariance(&block);
            let mse = covariance_mse(
                &model,
                &store,
                var,
                &coords,
                &reference,
                ctx.budget.covariance_samples.min(5_000),
                ctx.cfg.seed ^ 0xc1,
            )?;
            metrics.push("covariance_mse", mse.absolute);
            metrics.push("covariance_mse_relative", mse.relative);
        }
    }
    Ok(metrics)
}

/// 5th and 95th percentile of generated-sample amplitudes (max |u| over a
/// fine grid), a direct check that the prior spans the task family.
fn amplitude_quantiles(
    model: &PriorModel,
    store: &ParamStore,
    seed: u64,
) -> Result<(f64, f64), PipelineError> {
    use crate::autodiff::{Bindings, Graph, Tape};
    let grid = eval_grid_201();
    let n = 1000usize;
    let chunk = 250;
    let mut g = Graph::new();
    let xi = g.input("xi", (chunk, model.latent_dim));
    let block = model.predict(&mut g, store, xi, VarTag::U, &grid)?;
    let mut tape = Tape::new(&g);
    let mut rng = crate::seeded_rng(seed, "amplitude");
    let mut amps = Vec::with_capacity(n);
    let mut bind = Bindings::new();
    for _ in 0..n / chunk {
        let mut xiv = Array2::zeros((chunk, model.latent_dim));
        for v in xiv.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        bind.insert("xi".into(), xiv);
        tape.forward(&g, store, &bind)
            .map_err(|e| PipelineError::Numerical(e.to_string()))?;
        for row in tape.value(block).rows() {
            amps.push(row.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
    }
    amps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((amps[n / 20], amps[n - 1 - n / 20]))
}

fn zigzag_stage(ctx: &Ctx, arts: &mut ArtifactLog) -> Result<Metrics, PipelineError> {
    let report = zigzag::zigzag_demo(&[2, 5, 20, 50], ctx.budget.zigzag_samples, ctx.cfg.seed);
    let path = ctx.path("zigzag.csv");
    report.write_csv(&path)?;
    arts.add(&path);
    let mut metrics = Metrics::default();
    for r in &report.rows {
        metrics.push(&format!("sliced_w1_n{}", r.n), r.sliced_w1);
        metrics.push(&format!("cond_std_n{}", r.n), r.cond_std);
    }
    metrics.push("target_cond_std", report.target_cond_std);
    metrics.push("uniform_cond_std", report.uniform_cond_std);
    let monotone = report
        .rows
        .windows(2)
        .all(|w| w[0].sliced_w1 > w[1].sliced_w1);
    metrics.push("sliced_w1_monotone", f64::from(monotone));
    let last = report.rows.last().unwrap();
    metrics.push("x_ks_last", last.x_ks);
    metrics.push("x_ks_critical_1pct", report.ks_critical_1pct);
    metrics.push("y_w1_last", last.y_w1);
    Ok(metrics)
}

// ---------------------------------------------------- generator comparison

/// Train the alternative architecture, run both variants under both
/// samplers on the shared replication task, and tabulate covariance fit,
/// accuracy, coverage, acceptance, and wall-clock, with a GPR reference row.
fn generator_comparison(
    ctx: &Ctx,
    gen_i_model: &PriorModel,
    gen_i_store: &ParamStore,
    reference_cov: &Array2<f64>,
) -> Result<Vec<CompareRow>, PipelineError> {
    let sensors = sine_sensors();
    let real = SnapshotSet::read_binary(&ctx.require("snapshots.bin")?)?;

    // second architecture: one network on the concatenated (x, xi)
    let gen2 = LatentGenerator::gen_ii("gen2", 1, 40, &[64, 64], Activation::Tanh, CoordMap::unit(1));
    let model2 = direct_model(gen2, VarTag::U, sensors.clone());
    let disc2 = Discriminator::new("disc2", 30, 128, 3);
    let mut store2 = ParamStore::new();
    let mut rng = crate::seeded_rng(ctx.cfg.seed, "gen2-init");
    model2.init(&mut store2, &mut rng);
    disc2.init(&mut store2, &mut rng);
    let cfg2 = TrainConfig::new(ctx.budget.compare_gan_steps, ctx.cfg.seed ^ 0x622);
    crate::gan::train_prior(&model2, &disc2, &mut store2, &real, &cfg2)?;

    // shared replication task (same truth/observations as the posterior stage)
    let grid = eval_grid_201();
    let gridv: Vec<f64> = grid.column(0).to_vec();
    let k = Kernel::squared_exponential(0.2);
    let truth = sample_gp(&k, &grid, 1, ctx.cfg.seed ^ 0x7bb)?.row(0).to_vec();
    let mut rng = crate::seeded_rng(ctx.cfg.seed, "obs");
    let idx = pick_indices(grid.nrows(), 10, &mut rng);
    let noise = gaussian_noise(10, 0.01, &mut rng);
    let obs: Vec<Observation> = idx
        .iter()
        .zip(noise.iter())
        .map(|(&i, e)| Observation::new(VarTag::U, &[gridv[i]], truth[i] + e, 0.01))
        .collect();

    let ox: Vec<f64> = idx.iter().map(|&i| gridv[i]).collect();
    let oy: Vec<f64> = obs.iter().map(|o| o.value).collect();
    let gpr = gpr_fit(&ox, &oy, (0.2, 1.0, 1e-4), true, ctx.cfg.seed ^ 0x98)?;
    let (gm, gs) = gpr.predict(&gridv);
    let gpr_mean_std = gs.iter().sum::<f64>() / gs.len() as f64;

    let variants: Vec<(&str, &PriorModel, &ParamStore)> = vec![
        ("gen-i", gen_i_model, gen_i_store),
        ("gen-ii", &model2, &store2),
    ];
    let samplers: Vec<(String, SamplerConfig)> = vec![
        (
            "nuts".into(),
            SamplerConfig {
                burn_in: ctx.budget.burn_in,
                draws: ctx.budget.draws,
                ..SamplerConfig::nuts(ctx.cfg.seed ^ 0xc2a)
            },
        ),
        (
            "hmc".into(),
            SamplerConfig {
                burn_in: ctx.budget.burn_in,
                draws: ctx.budget.draws,
                ..SamplerConfig::hmc(0.02, 40, ctx.cfg.seed ^ 0xc2b)
            },
        ),
    ];

    let mut rows = compare_generators(
        &variants,
        reference_cov,
        &sensors,
        &obs,
        &grid,
        &truth,
        &samplers,
        ctx.budget.covariance_samples,
        gpr_mean_std,
        ctx.cfg.seed,
    )?;
    rows.push(CompareRow {
        variant: "gpr".into(),
        method: "analytic".into(),
        covariance_mse: f64::NAN,
        rmse: rmse(&gm, &truth),
        coverage_2std: coverage(&gm, &gs, &truth, 2.0),
        acceptance: f64::NAN,
        mean_posterior_std: gpr_mean_std,
        wall_secs: 0.0,
        underestimates_uncertainty: false,
    });
    Ok(rows)
}

/// Tabulate each (variant, sampler) pair on a shared task. Sampler seeds
/// depend only on the method, so identical models in two slots produce
/// identical rows.
#[allow(clippy::too_many_arguments)]
pub fn compare_generators(
    variants: &[(&str, &PriorModel, &ParamStore)],
    reference_cov: &Array2<f64>,
    sensors: &Array2<f64>,
    obs: &[Observation],
    grid: &Array2<f64>,
    truth: &[f64],
    samplers: &[(String, SamplerConfig)],
    covariance_samples: usize,
    reference_mean_std: f64,
    seed: u64,
) -> Result<Vec<CompareRow>, PipelineError> {
    let mut rows = Vec::new();
    for (name, model, store) in variants {
        let cov = covariance_mse(
            model,
            store,
            model.layout[0].0,
            sensors,
            reference_cov,
            covariance_samples,
            seed ^ 0xc0,
        )?;
        for (mname, scfg) in samplers {
            let t0 = std::time::Instant::now();
            let mut post = GraphPosterior::new(model, store, obs)?;
            let draws = crate::inference::sample_posterior(&mut post, scfg);
            let stats = pushforward(model, store, &draws.draws, &[(model.layout[0].0, grid.clone())])?;
            let s = &stats[0];
            let mean_std = s.std.iter().sum::<f64>() / s.std.len() as f64;
            rows.push(CompareRow {
                variant: name.to_string(),
                method: mname.clone(),
                covariance_mse: cov.absolute,
                rmse: rmse(&s.mean, truth),
                coverage_2std: coverage(&s.mean, &s.std, truth, 2.0),
                acceptance: draws.acceptance,
                mean_posterior_std: mean_std,
                wall_secs: t0.elapsed().as_secs_f64(),
                underestimates_uncertainty: mean_std < 0.5 * reference_mean_std,
            });
        }
    }
    Ok(rows)
}
