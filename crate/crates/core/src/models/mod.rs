//! Prior distributions, random-field bases, forward models and synthetic
//! data generation for the benchmark inverse problems.

pub mod gravity;
pub mod heat;
pub mod kl;
pub mod prior;
pub mod reaction_diffusion;
pub mod simulate;
pub mod toy;

use nalgebra::DVector;

use crate::ensemble::ForwardModel;

/// A forward model whose parameters describe a physical field on a grid.
pub trait FieldModel: ForwardModel {
    /// Field values on the model grid for one parameter vector.
    fn field(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Grid shape `(rows, cols)` used when writing the field as a matrix.
    fn field_shape(&self) -> (usize, usize);
}

impl FieldModel for heat::HeatModel {
    fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        heat::HeatModel::field(self, x)
    }

    fn field_shape(&self) -> (usize, usize) {
        (self.config().grid, self.config().grid)
    }
}

impl FieldModel for gravity::GravityModel {
    fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        gravity::GravityModel::field(self, x)
    }

    fn field_shape(&self) -> (usize, usize) {
        (self.config().quadrature, self.config().quadrature)
    }
}

impl FieldModel for reaction_diffusion::ReactionDiffusionModel {
    fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        reaction_diffusion::ReactionDiffusionModel::field(self, x)
    }

    fn field_shape(&self) -> (usize, usize) {
        (1, self.config().nodes)
    }
}
