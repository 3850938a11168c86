//! Sample-score-refine MAP search.
//!
//! 1. Draw `sample_count` joint candidates, every factor sampled
//!    independently from its own posterior, and keep the best-scoring one.
//! 2. Coordinate hill-climbing: each sweep revisits the operator, the robot
//!    and every agent in turn, proposing replacements for that factor while
//!    the others stay fixed, and keeps any strict improvement. Proposals are
//!    the factor's conditional mode under the Gaussian part of the model
//!    (exact coordinate ascent when no agents are present) plus random
//!    perturbations whose covariance shrinks by 4× per sweep.
//!
//! Every factor draws from its own RNG stream so that removing one factor
//! does not change the random numbers seen by the others.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{JointModel, OperatorFactor};
use super::{
    AutonomyAllocation, BlendResult, Diagnostics, FactorBreakdown, InteractionParams, JointSample,
    PlannerConfig, PlannerError, Posteriors,
};
use crate::gp::{PreparedPosterior, Trajectory};
use crate::interaction::{position_dims, robot_velocities, CooperationParams};

const SHRINK: f64 = 0.25;
const NEWTON_STEPS: usize = 2;
const BACKTRACK: [f64; 3] = [1.0, 0.5, 0.25];

const OPERATOR_STREAM: u64 = 0;
const ROBOT_STREAM: u64 = 1;
const AGENT_STREAM_BASE: u64 = 2;

pub(crate) fn factor_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Current candidate with its score cached term by term.
#[derive(Clone)]
struct Scored {
    h: Option<Trajectory>,
    f_r: Trajectory,
    agents: Vec<Trajectory>,
    operator: f64,
    robot: f64,
    agent: Vec<f64>,
    attraction: f64,
    cooperation: Vec<f64>,
}

impl Scored {
    fn new(model: &JointModel, h: Option<Trajectory>, f_r: Trajectory, agents: Vec<Trajectory>) -> Self {
        let operator = h.as_ref().map_or(0.0, |h| model.operator_log_density(h));
        let robot = model.robot.log_density(&f_r);
        let agent = model
            .agents
            .iter()
            .zip(&agents)
            .map(|(p, a)| p.log_density(a))
            .collect();
        let attraction = model.attraction_term(h.as_ref(), &f_r);
        let cooperation = agents.iter().map(|a| model.cooperation_term(&f_r, a)).collect();
        Self {
            h,
            f_r,
            agents,
            operator,
            robot,
            agent,
            attraction,
            cooperation,
        }
    }

    fn breakdown(&self) -> FactorBreakdown {
        FactorBreakdown {
            operator: self.operator,
            robot: self.robot,
            agents: self.agent.iter().sum(),
            attraction: self.attraction,
            cooperation: self.cooperation.iter().sum(),
        }
    }

    fn total(&self) -> f64 {
        self.breakdown().total()
    }

    fn try_operator(&mut self, model: &JointModel, h: Trajectory) -> bool {
        let operator = model.operator_log_density(&h);
        let attraction = model.attraction_term(Some(&h), &self.f_r);
        let delta = operator + attraction - self.operator - self.attraction;
        if delta > 0.0 && delta.is_finite() {
            self.h = Some(h);
            self.operator = operator;
            self.attraction = attraction;
            return true;
        }
        false
    }

    fn try_robot(&mut self, model: &JointModel, f_r: Trajectory, h: Option<Trajectory>) -> bool {
        let robot = model.robot.log_density(&f_r);
        let h_ref = h.as_ref().or(self.h.as_ref());
        let operator = match &h {
            Some(h) => model.operator_log_density(h),
            None => self.operator,
        };
        let attraction = model.attraction_term(h_ref, &f_r);
        let cooperation: Vec<f64> = self.agents.iter().map(|a| model.cooperation_term(&f_r, a)).collect();
        let before = self.robot + self.operator + self.attraction + self.cooperation.iter().sum::<f64>();
        let after = robot + operator + attraction + cooperation.iter().sum::<f64>();
        let delta = after - before;
        if delta > 0.0 && delta.is_finite() {
            self.f_r = f_r;
            if h.is_some() {
                self.h = h;
            }
            self.robot = robot;
            self.operator = operator;
            self.attraction = attraction;
            self.cooperation = cooperation;
            return true;
        }
        false
    }

    fn try_agent(&mut self, model: &JointModel, i: usize, a: Trajectory) -> bool {
        let lp = model.agents[i].log_density(&a);
        let coop = model.cooperation_term(&self.f_r, &a);
        let delta = lp + coop - self.agent[i] - self.cooperation[i];
        if delta > 0.0 && delta.is_finite() {
            self.agents[i] = a;
            self.agent[i] = lp;
            self.cooperation[i] = coop;
            return true;
        }
        false
    }
}

fn sample_operator(op: &OperatorFactor, rng: &mut ChaCha8Rng) -> Trajectory {
    match op {
        OperatorFactor::Single(p) => p.sample(rng),
        OperatorFactor::Mixture {
            log_weights,
            components,
        } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = components.len() - 1;
            for (i, lw) in log_weights.iter().enumerate() {
                acc += lw.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            components[pick].sample(rng)
        }
    }
}

/// Mode of `p(h) · ψ_h(h, f_r)` over `h` for one Gaussian component.
fn operator_mode(
    comp: &PreparedPosterior,
    f_r: &Trajectory,
    w: &DMatrix<f64>,
    dt: f64,
) -> Option<Trajectory> {
    let n = comp.len();
    let dh = comp.dim();
    let v = robot_velocities(f_r, dh, dt);
    let (mut a, mut b) = prior_system(comp);
    for t in 0..n - 1 {
        for j in 0..dh {
            for k in 0..dh {
                a[(j * n + t, k * n + t)] += 2.0 * w[(j, k)];
                b[j * n + t] += 2.0 * w[(j, k)] * v[(t, k)];
            }
        }
    }
    solve(a, &b, n, dh)
}

/// Precision `A` and information vector `b` of the Gaussian part of the
/// model over the stacked vector `z = [h; f_r]` (or just `f_r` without an
/// operator), each trajectory in column-major layout. Returns the offset
/// of `f_r` inside `z`.
fn joint_system(
    operator: Option<(&PreparedPosterior, &DMatrix<f64>)>,
    robot: &PreparedPosterior,
    dt: f64,
) -> (DMatrix<f64>, DVector<f64>, usize) {
    let (pa, pb) = prior_system(robot);
    let Some((op, w)) = operator else {
        return (pa, pb, 0);
    };
    let n = robot.len();
    let dh = w.nrows();
    let off = n * op.dim();
    let size = off + pa.nrows();
    let (qa, qb) = prior_system(op);
    let mut a = DMatrix::zeros(size, size);
    let mut b = DVector::zeros(size);
    a.view_mut((0, 0), (off, off)).copy_from(&qa);
    a.view_mut((off, off), (pa.nrows(), pa.nrows())).copy_from(&pa);
    b.rows_mut(0, off).copy_from(&qb);
    b.rows_mut(off, pb.len()).copy_from(&pb);
    // −ln ψ_h = Σ_τ (h_τ − D f_τ)ᵀ W (h_τ − D f_τ) contributes
    // 2·[W, −W D; −Dᵀ W, Dᵀ W D] to A
    let inv_dt = 1.0 / dt;
    for t in 0..n - 1 {
        for j in 0..dh {
            for k in 0..dh {
                let c = 2.0 * w[(j, k)];
                a[(j * n + t, k * n + t)] += c;
                let (xjt, xjt1) = (off + j * n + t, off + j * n + t + 1);
                let (xkt, xkt1) = (off + k * n + t, off + k * n + t + 1);
                let c2 = c * inv_dt * inv_dt;
                a[(xjt, xkt)] += c2;
                a[(xjt1, xkt1)] += c2;
                a[(xjt, xkt1)] -= c2;
                a[(xjt1, xkt)] -= c2;
                let hj = j * n + t;
                let c1 = c * inv_dt;
                a[(hj, xkt1)] -= c1;
                a[(hj, xkt)] += c1;
                a[(xkt1, hj)] -= c1;
                a[(xkt, hj)] += c1;
            }
        }
    }
    (a, b, off)
}

fn prior_system(p: &PreparedPosterior) -> (DMatrix<f64>, DVector<f64>) {
    let n = p.len();
    let size = n * p.dim();
    let mut a = DMatrix::zeros(size, size);
    let mut b = DVector::zeros(size);
    for d in 0..p.dim() {
        let q = p.precision(d);
        a.view_mut((d * n, d * n), (n, n)).copy_from(q);
        let qm = q * p.mean().column(d);
        b.rows_mut(d * n, n).copy_from(&qm);
    }
    (a, b)
}

fn solve_vec(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = Cholesky::new(a)?.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn solve(a: DMatrix<f64>, b: &DVector<f64>, n: usize, dim: usize) -> Option<Trajectory> {
    solve_vec(a, b).map(|x| unstack(&x, 0, n, dim))
}

fn unstack(z: &DVector<f64>, offset: usize, n: usize, dim: usize) -> Trajectory {
    DMatrix::from_column_slice(n, dim, &z.as_slice()[offset..offset + n * dim])
}

fn stack(parts: &[&Trajectory]) -> DVector<f64> {
    DVector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.as_slice().iter().copied()),
    )
}

/// Newton direction on `−½zᵀAz + bᵀz` plus the cooperation terms between
/// the trajectory at `x_offset` (`n × dim`) and each of `others`. Only the
/// concave part of each cooperation Hessian is kept so the system stays
/// positive definite.
#[allow(clippy::too_many_arguments)]
fn newton_direction(
    z: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x_offset: usize,
    n: usize,
    dim: usize,
    others: &[Trajectory],
    coop: &CooperationParams,
) -> Option<DVector<f64>> {
    let mut grad = b - a * z;
    let mut hess = a.clone();
    let inv = 1.0 / (2.0 * coop.radius * coop.radius);
    let idx = |d: usize, t: usize| x_offset + d * n + t;
    for o in others {
        let pos = position_dims(dim).min(o.ncols());
        for t in 0..n {
            let u: Vec<f64> = (0..pos).map(|d| z[idx(d, t)] - o[(t, d)]).collect();
            let s: f64 = u.iter().map(|v| v * v).sum();
            let e = coop.strength * (-s * inv).exp();
            if e == 0.0 {
                continue;
            }
            let g1 = e * inv / (1.0 - e);
            let g2 = -e * inv * inv / ((1.0 - e) * (1.0 - e));
            for i in 0..pos {
                grad[idx(i, t)] += 2.0 * g1 * u[i];
                for j in 0..pos {
                    hess[(idx(i, t), idx(j, t))] -= 4.0 * g2 * u[i] * u[j];
                }
            }
        }
    }
    solve_vec(hess, &grad)
}

struct Spread {
    lo: [f64; 5],
    hi: [f64; 5],
}

impl Spread {
    fn new() -> Self {
        Self {
            lo: [f64::INFINITY; 5],
            hi: [f64::NEG_INFINITY; 5],
        }
    }

    fn add(&mut self, b: &FactorBreakdown) {
        let v = [b.operator, b.robot, b.agents, b.attraction, b.cooperation];
        for i in 0..5 {
            self.lo[i] = self.lo[i].min(v[i]);
            self.hi[i] = self.hi[i].max(v[i]);
        }
    }

    fn finish(&self) -> FactorBreakdown {
        let r = |i: usize| {
            if self.hi[i] >= self.lo[i] {
                self.hi[i] - self.lo[i]
            } else {
                0.0
            }
        };
        FactorBreakdown {
            operator: r(0),
            robot: r(1),
            agents: r(2),
            attraction: r(3),
            cooperation: r(4),
        }
    }
}

/// Runs the search on a prepared model.
pub(crate) fn search(
    model: &JointModel,
    config: &PlannerConfig,
) -> Result<(JointSample, Diagnostics), PlannerError> {
    let mut op_rng = factor_rng(config.seed, OPERATOR_STREAM);
    let mut robot_rng = factor_rng(config.seed, ROBOT_STREAM);
    let mut agent_rngs: Vec<ChaCha8Rng> = (0..model.agents.len())
        .map(|i| factor_rng(config.seed, AGENT_STREAM_BASE + i as u64))
        .collect();

    let mut best: Option<Scored> = None;
    let mut spread = Spread::new();
    let mut finite = 0;
    for _ in 0..config.sample_count {
        let h = model.operator.as_ref().map(|o| sample_operator(o, &mut op_rng));
        let f_r = model.robot.sample(&mut robot_rng);
        let agents = model
            .agents
            .iter()
            .zip(agent_rngs.iter_mut())
            .map(|(p, rng)| p.sample(rng))
            .collect();
        let cand = Scored::new(model, h, f_r, agents);
        let total = cand.total() + model.log_offset;
        if !total.is_finite() {
            continue;
        }
        finite += 1;
        spread.add(&cand.breakdown());
        if best.as_ref().is_none_or(|b| total > b.total() + model.log_offset) {
            best = Some(cand);
        }
    }
    let mut diagnostics = Diagnostics {
        finite_candidates: finite,
        selection_spread: spread.finish(),
        ..Default::default()
    };
    let Some(mut inc) = best else {
        diagnostics.failure = Some("no candidate had a finite score".into());
        return Err(PlannerError::InferenceFailure {
            diagnostics: Box::new(diagnostics),
        });
    };
    diagnostics.refine_trace.push(inc.total() + model.log_offset);

    let dt = model.grid.dt;
    let weight = model.attraction.as_ref().map(|a| a.precision().clone());
    let n = model.grid.len();
    let agent_systems: Vec<_> = model.agents.iter().map(prior_system).collect();
    for sweep in 1..=config.refine_iterations {
        let std = SHRINK.powi(sweep as i32).sqrt();

        if let Some(op) = &model.operator {
            if let Some(w) = &weight {
                for comp in op.components() {
                    if let Some(h) = operator_mode(comp, &inc.f_r, w, dt) {
                        inc.try_operator(model, h);
                    }
                }
            } else {
                for comp in op.components() {
                    inc.try_operator(model, comp.mean().clone());
                }
            }
            let h0 = inc.h.clone().expect("operator factor present");
            let comp = op.responsible(&h0);
            for _ in 0..config.refine_proposals {
                let h = comp.perturb(inc.h.as_ref().expect("operator factor present"), std, &mut op_rng);
                inc.try_operator(model, h);
            }
        }

        let dr = model.robot.dim();
        let coupled: Vec<Option<(&PreparedPosterior, &DMatrix<f64>)>> =
            match (&model.operator, &weight) {
                (Some(op), Some(w)) => op.components().into_iter().map(|c| Some((c, w))).collect(),
                _ => vec![None],
            };
        for &op in &coupled {
            let (a, b, off) = joint_system(op, &model.robot, dt);
            if let Some(z) = solve_vec(a, &b) {
                let h = op.map(|(c, _)| unstack(&z, 0, n, c.dim()));
                inc.try_robot(model, unstack(&z, off, n, dr), h);
            }
        }
        if let Some(coop) = model.cooperation.as_ref().filter(|_| !model.agents.is_empty()) {
            for _ in 0..NEWTON_STEPS {
                let op = match (&model.operator, &weight, &inc.h) {
                    (Some(o), Some(w), Some(h)) => Some((o.responsible(h), w)),
                    _ => None,
                };
                let (a, b, off) = joint_system(op, &model.robot, dt);
                let z = match (op, &inc.h) {
                    (Some(_), Some(h)) => stack(&[h, &inc.f_r]),
                    _ => stack(&[&inc.f_r]),
                };
                let Some(dir) = newton_direction(&z, &a, &b, off, n, dr, &inc.agents, coop) else {
                    continue;
                };
                for step in BACKTRACK {
                    let cand = &z + &dir * step;
                    let h = op.map(|(c, _)| unstack(&cand, 0, n, c.dim()));
                    if inc.try_robot(model, unstack(&cand, off, n, dr), h) {
                        break;
                    }
                }
            }
        }
        for _ in 0..config.refine_proposals {
            let f_r = model.robot.perturb(&inc.f_r, std, &mut robot_rng);
            inc.try_robot(model, f_r, None);
        }

        for (i, rng) in agent_rngs.iter_mut().enumerate() {
            inc.try_agent(model, i, model.agents[i].mean().clone());
            if let Some(coop) = &model.cooperation {
                let (aa, ab) = &agent_systems[i];
                let dim = model.agents[i].dim();
                for _ in 0..NEWTON_STEPS {
                    let others = [inc.f_r.clone()];
                    let z = stack(&[&inc.agents[i]]);
                    let Some(dir) = newton_direction(&z, aa, ab, 0, n, dim, &others, coop) else {
                        continue;
                    };
                    for step in BACKTRACK {
                        if inc.try_agent(model, i, unstack(&(&z + &dir * step), 0, n, dim)) {
                            break;
                        }
                    }
                }
            }
            for _ in 0..config.refine_proposals {
                let a = model.agents[i].perturb(&inc.agents[i], std, rng);
                inc.try_agent(model, i, a);
            }
        }
        diagnostics.refine_trace.push(inc.total() + model.log_offset);
    }

    diagnostics.breakdown = inc.breakdown();
    let total = inc.total() + model.log_offset;
    Ok((
        JointSample {
            h: inc.h,
            f_r: inc.f_r,
            agents: inc.agents,
            unnormalized_log_density: total,
        },
        diagnostics,
    ))
}

pub(crate) fn assemble(
    model: &JointModel,
    posteriors: &Posteriors,
    map_sample: JointSample,
    diagnostics: Diagnostics,
) -> Result<BlendResult, PlannerError> {
    let f = &map_sample.f_r;
    let dt = model.grid.dt;
    let next_action: Vec<f64> = f.row(1).iter().copied().collect();
    let vy = if f.ncols() > 1 {
        (f[(1, 1)] - f[(0, 1)]) / dt
    } else {
        0.0
    };
    let velocity = [(f[(1, 0)] - f[(0, 0)]) / dt, vy];
    let autonomy = match &posteriors.operator {
        Some(op) => super::autonomy_measure(op, &posteriors.robot, model.grid.now)?,
        None => AutonomyAllocation::from_traces(f64::INFINITY, posteriors.robot.trace_at(0)),
    };
    Ok(BlendResult {
        map_sample,
        next_action,
        velocity,
        autonomy,
        diagnostics,
    })
}

/// Approximate MAP of the joint density; see the module docs.
pub fn map_infer(
    posteriors: &Posteriors,
    interaction: &InteractionParams,
    config: &PlannerConfig,
) -> Result<BlendResult, PlannerError> {
    config.validate()?;
    let grid = posteriors.robot.grid;
    if grid.horizon != config.horizon || grid.dt != config.dt {
        return Err(PlannerError::InvalidConfig(format!(
            "posterior grid (horizon {}, dt {}) does not match config (horizon {}, dt {})",
            grid.horizon, grid.dt, config.horizon, config.dt
        )));
    }
    let model = JointModel::new(posteriors, interaction)?;
    let (sample, diagnostics) = search(&model, config)?;
    assemble(&model, posteriors, sample, diagnostics)
}
