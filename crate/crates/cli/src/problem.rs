//! Builds the inverse problem named by a configuration: prior, forward map,
//! data and, when available, reference moments.

use std::sync::Arc;

use nalgebra::DVector;
use skt_core::diagnostics::ReferenceMoments;
use skt_core::ensemble::{ModelSpec, NoiseCov};
use skt_core::models::gravity::GravityModel;
use skt_core::models::heat::HeatModel;
use skt_core::models::reaction_diffusion::ReactionDiffusionModel;
use skt_core::models::simulate::{
    read_vector, simulate_gravity, simulate_heat, simulate_reaction_diffusion, Simulation,
};
use skt_core::models::toy::{nonlinear_toy, LinearGaussianToy};
use skt_core::models::FieldModel;

use crate::config::{ModelKind, ModelSection};
use crate::error::{CliError, Result};

/// A ready-to-run problem.
pub struct Problem {
    pub spec: ModelSpec,
    /// Field view of PDE models, used for reconstructions.
    pub field: Option<Arc<dyn FieldModel>>,
    pub reference: Option<ReferenceMoments>,
    /// Synthetic data record when the data were simulated here.
    pub simulation: Option<Simulation>,
}

/// Simulates data for a PDE model from the truth settings in `model`.
pub fn simulate(model: &ModelSection) -> Result<Simulation> {
    let (ts, ns) = (model.truth_seed, model.noise_seed);
    Ok(match model.kind {
        ModelKind::Heat => simulate_heat(&model.heat, &model.heat_truth, ts, ns)?,
        ModelKind::Gravity => simulate_gravity(&model.gravity, &model.gravity_truth, ns)?,
        ModelKind::ReactionDiffusion => simulate_reaction_diffusion(
            &model.reaction_diffusion,
            &model.reaction_diffusion_truth,
            ts,
            ns,
        )?,
        ModelKind::LinearToy | ModelKind::NonlinearToy => {
            return Err(CliError::Config(format!(
                "{} problems generate their own data; simulate applies to PDE models",
                model.kind.name()
            )))
        }
    })
}

fn pde_data(model: &ModelSection) -> Result<(DVector<f64>, Option<Simulation>)> {
    match &model.data_path {
        Some(p) => Ok((read_vector(p)?, None)),
        None => {
            let sim = simulate(model)?;
            Ok((DVector::from_vec(sim.y.clone()), Some(sim)))
        }
    }
}

fn pde_problem<M: FieldModel + 'static>(
    model: &ModelSection,
    forward: M,
    prior: skt_core::models::prior::PriorSpec,
    noise_sd: f64,
) -> Result<Problem> {
    let (y, simulation) = pde_data(model)?;
    let forward = Arc::new(forward);
    let noise = NoiseCov::isotropic(y.len(), noise_sd)?;
    let spec = ModelSpec::new(Arc::new(prior), forward.clone(), y, noise)?;
    Ok(Problem {
        spec,
        field: Some(forward),
        reference: None,
        simulation,
    })
}

/// Builds the problem described by `model`.
pub fn build(model: &ModelSection) -> Result<Problem> {
    let mut problem = match model.kind {
        ModelKind::Heat => pde_problem(
            model,
            HeatModel::new(model.heat.clone())?,
            model.heat.prior()?,
            model.heat_truth.noise_sd,
        )?,
        ModelKind::Gravity => pde_problem(
            model,
            GravityModel::new(model.gravity.clone(), model.basis_cache_dir.as_deref())?,
            model.gravity.prior()?,
            model.gravity_truth.noise_sd,
        )?,
        ModelKind::ReactionDiffusion => pde_problem(
            model,
            ReactionDiffusionModel::new(model.reaction_diffusion.clone())?,
            model.reaction_diffusion.prior()?,
            model.reaction_diffusion_truth.noise_sd,
        )?,
        ModelKind::LinearToy => {
            let c = &model.linear_toy;
            let toy = LinearGaussianToy::random(c.dim, c.obs_dim, c.noise_sd, c.problem_seed);
            let (mean, cov) = toy.posterior()?;
            Problem {
                spec: toy.spec()?,
                field: None,
                reference: Some(ReferenceMoments::from_gaussian(&mean, &cov)?),
                simulation: None,
            }
        }
        ModelKind::NonlinearToy => Problem {
            spec: nonlinear_toy(&model.nonlinear_toy)?,
            field: None,
            reference: None,
            simulation: None,
        },
    };
    if let Some(path) = &model.reference_path {
        problem.reference = Some(ReferenceMoments::read_csv(path)?);
    }
    if let Some(r) = &problem.reference {
        if r.dim() != problem.spec.dim() {
            return Err(CliError::Config(format!(
                "reference moments have dimension {}, the model has {}",
                r.dim(),
                problem.spec.dim()
            )));
        }
    }
    Ok(problem)
}
