//! Shared state of a run: the resolved config, the model, ladders, seed
//! streams and the failure classification that drives exit codes.

use std::path::PathBuf;
use std::sync::OnceLock;

use imjet::jets_manifold::JetLadder;
use imjet::models::{rds_build, rds_profile, RdsModel, SellModel};
use imjet::parasolve::{SemilinearProblem, SolverConfig};
use imjet::spectral::{gap_ladder, GapLadder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, InitialData, ModelName, ThetaPolicy};

/// Why a task stopped; each class has its own exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    /// Invalid configuration or a request outside what the model supports.
    Schema(String),
    /// No admissible gap ladder.
    Ladder(String),
    /// A solver did not converge or produced unusable output.
    Solver(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Schema(_) => 2,
            Failure::Ladder(_) => 3,
            Failure::Solver(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Schema(_) => "schema",
            Failure::Ladder(_) => "infeasible-ladder",
            Failure::Solver(_) => "solver",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Schema(m) | Failure::Ladder(m) | Failure::Solver(m) => m,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl From<imjet::Error> for Failure {
    fn from(e: imjet::Error) -> Self {
        use imjet::Error as E;
        match e {
            E::InfeasibleLadder { .. } => Failure::Ladder(e.to_string()),
            E::Input(_) | E::Capability(_) | E::Precondition(_) | E::Domain(_) | E::Coverage(_) => {
                Failure::Schema(e.to_string())
            }
            E::Divergence(_) | E::Stiffness(_) | E::InsufficientSamples(_) | E::Io(_) => Failure::Solver(e.to_string()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Schema(format!("{e:#}"))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Solver(format!("io: {e}"))
    }
}

pub type TaskResult<T> = std::result::Result<T, Failure>;

pub enum Model {
    Sell(SellModel),
    Rds(RdsModel),
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    model: OnceLock<std::result::Result<Model, Failure>>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let hash = cfg.hash();
        let out = cfg.output_dir.clone();
        Self { cfg, hash, out, model: OnceLock::new() }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cfg.solver.cache_dir.clone().unwrap_or_else(|| self.out.join("cache"))
    }

    pub fn solver(&self) -> SolverConfig {
        self.cfg.solver.numerics()
    }

    pub fn model(&self) -> TaskResult<&Model> {
        self.model
            .get_or_init(|| -> std::result::Result<Model, Failure> {
                Ok(match self.cfg.model.name {
                    ModelName::Sell => Model::Sell(SellModel::new(self.cfg.model.sell_params()?)?),
                    ModelName::Rds => Model::Rds(rds_build(self.cfg.model.rds_params()?)?),
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn problem(&self) -> TaskResult<SemilinearProblem> {
        let prob = match self.model()? {
            Model::Sell(m) => m.problem.clone(),
            Model::Rds(m) => m.problem.clone(),
        };
        Ok(match self.cfg.ladder.lipschitz {
            Some(l) => prob.with_lipschitz(l),
            None => prob,
        })
    }

    /// Local window of the base coordinates (Sell only).
    pub fn window(&self) -> TaskResult<Option<f64>> {
        Ok(match self.model()? {
            Model::Sell(m) => Some(m.params.window),
            Model::Rds(_) => None,
        })
    }

    pub fn is_sell(&self) -> bool {
        self.cfg.model.name == ModelName::Sell
    }

    /// Gap ladder with at least `levels` rungs under the configured θ policy.
    pub fn ladder(&self, levels: usize) -> TaskResult<GapLadder> {
        let prob = self.problem()?;
        let levels = levels.max(self.cfg.ladder.levels);
        let mut ladder = gap_ladder(&prob.op, prob.lipschitz, levels, self.cfg.ladder.epsilon)?;
        // the Sell cascade is finite by construction; a Galerkin truncation
        // must keep enough modes above the top level
        if !self.is_sell() {
            ladder.check_truncation(prob.dim(), self.cfg.ladder.truncation_factor)?;
        }
        if let ThetaPolicy::Explicit { values } = &self.cfg.ladder.theta {
            if values.len() < levels {
                return Err(Failure::Schema(format!("{levels} levels need {levels} explicit exponents")));
            }
            for (k, (level, &theta)) in ladder.levels.iter_mut().zip(values).enumerate() {
                let (lo, hi) = level.theta_window;
                if !(theta > lo && theta < hi) {
                    return Err(Failure::Ladder(format!(
                        "θ_{} = {theta} outside its window ({lo}, {hi})",
                        k + 1
                    )));
                }
                level.theta = theta;
            }
            for k in 1..levels {
                let upper = prob.op.eigenvalue(ladder.dim(k + 1) + 1) - prob.lipschitz;
                if !(ladder.theta(k + 1) + k as f64 * ladder.theta(k) + ladder.epsilon < upper) {
                    return Err(Failure::Ladder(format!("explicit exponents violate the chain at level {}", k + 1)));
                }
            }
        }
        Ok(ladder)
    }

    pub fn jet_ladder(&self, levels: usize) -> TaskResult<JetLadder> {
        let jl = JetLadder::new(self.problem()?, self.ladder(levels)?, self.solver())?;
        Ok(match self.window()? {
            Some(beta) => jl.with_window(beta),
            None => jl,
        })
    }

    /// Configured level-1 base points, or a model-specific default set.
    pub fn points(&self, dim: usize) -> TaskResult<Vec<Vec<f64>>> {
        let pts = match &self.cfg.points {
            Some(p) => p.clone(),
            None if self.is_sell() => {
                let sign = match self.model()? {
                    Model::Sell(m) => m.params.sign,
                    Model::Rds(_) => 1.0,
                };
                [0.05, 0.1, 0.15].iter().map(|v| vec![sign * v]).collect()
            }
            None => [0.3, -0.2, 0.1]
                .iter()
                .map(|s| (0..dim).map(|i| s / (i + 1) as f64 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect())
                .collect(),
        };
        if pts.is_empty() {
            return Err(Failure::Schema("points must not be empty".into()));
        }
        if let Some(p) = pts.iter().find(|p| p.len() != dim) {
            return Err(Failure::Schema(format!("point {p:?} has dimension {}, the level-1 base has {dim}", p.len())));
        }
        Ok(pts)
    }

    /// Reaction–diffusion initial data as sine coefficients.
    pub fn initial_data(&self, modes: usize) -> TaskResult<Vec<f64>> {
        let mut c = match &self.cfg.model.initial {
            InitialData::Profile { name, amplitude } => rds_profile(name, modes, *amplitude)?,
            InitialData::Coefficients { values } => values.clone(),
        };
        if c.len() > modes {
            return Err(Failure::Schema(format!("{} initial coefficients for {modes} modes", c.len())));
        }
        c.resize(modes, 0.0);
        Ok(c)
    }

    /// Independent random stream for `(task, index)`: ChaCha keyed by the
    /// root seed, stream selected by a hash of the label, so adding or
    /// reordering tasks never shifts another task's numbers.
    pub fn rng(&self, task: &str, index: u64) -> ChaCha8Rng {
        let digest = Sha256::digest(format!("{task}/{index}").as_bytes());
        let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        rng
    }
}
