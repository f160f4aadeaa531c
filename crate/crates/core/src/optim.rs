//! Sparse Adam over embedding rows. Only rows present in the gradient
//! accumulator are touched; bias correction runs off one global step
//! counter; every updated row is projected back into the unit ball as part
//! of the step.

use crate::error::{Error, Result};
use crate::loss::GradAccumulator;
use crate::model::{project_unit_ball, EmbeddingModel, Matrix, ParamBlock};
use crate::scalar::Real;

/// Adam moment decay rates and denominator stabilizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams<S> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Real> Default for AdamParams<S> {
    fn default() -> AdamParams<S> {
        AdamParams {
            beta1: S::from_f64_lossy(0.9),
            beta2: S::from_f64_lossy(0.999),
            eps: S::from_f64_lossy(1e-8),
        }
    }
}

/// First/second moment estimates per parameter row plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    t: u64,
    m_users: Matrix<S>,
    v_users: Matrix<S>,
    m_items: Matrix<S>,
    v_items: Matrix<S>,
    m_tags: Option<Matrix<S>>,
    v_tags: Option<Matrix<S>>,
}

impl<S: Real> AdamState<S> {
    /// Zeroed moments shaped like the model.
    pub fn new(model: &EmbeddingModel<S>) -> AdamState<S> {
        let d = model.dim;
        AdamState {
            t: 0,
            m_users: Matrix::zeros(model.n_users(), d),
            v_users: Matrix::zeros(model.n_users(), d),
            m_items: Matrix::zeros(model.n_items(), d),
            v_items: Matrix::zeros(model.n_items(), d),
            m_tags: model.tag_proj.as_ref().map(|w| Matrix::zeros(w.rows(), d)),
            v_tags: model.tag_proj.as_ref().map(|w| Matrix::zeros(w.rows(), d)),
        }
    }

    /// Reassemble state read back from a checkpoint.
    pub fn from_parts(
        t: u64,
        m_users: Matrix<S>,
        v_users: Matrix<S>,
        m_items: Matrix<S>,
        v_items: Matrix<S>,
        tags: Option<(Matrix<S>, Matrix<S>)>,
    ) -> AdamState<S> {
        let (m_tags, v_tags) = match tags {
            Some((m, v)) => (Some(m), Some(v)),
            None => (None, None),
        };
        AdamState { t, m_users, v_users, m_items, v_items, m_tags, v_tags }
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    /// (first, second) moment matrices for a block.
    pub fn moments(&self, block: ParamBlock) -> (&Matrix<S>, &Matrix<S>) {
        match block {
            ParamBlock::User => (&self.m_users, &self.v_users),
            ParamBlock::Item => (&self.m_items, &self.v_items),
            ParamBlock::TagProj => (
                self.m_tags.as_ref().expect("no tag moments"),
                self.v_tags.as_ref().expect("no tag moments"),
            ),
        }
    }

    fn moments_mut(&mut self, block: ParamBlock) -> (&mut Matrix<S>, &mut Matrix<S>) {
        match block {
            ParamBlock::User => (&mut self.m_users, &mut self.v_users),
            ParamBlock::Item => (&mut self.m_items, &mut self.v_items),
            ParamBlock::TagProj => (
                self.m_tags.as_mut().expect("no tag moments"),
                self.v_tags.as_mut().expect("no tag moments"),
            ),
        }
    }
}

/// One Adam step over the rows in `grads`, followed by unit-ball projection
/// of each touched row. Rows not in the accumulator are untouched
/// bit-for-bit. An empty accumulator still advances the step counter.
///
/// Fails without modifying the model if any gradient entry is non-finite.
pub fn adam_step<S: Real>(
    model: &mut EmbeddingModel<S>,
    state: &mut AdamState<S>,
    grads: &GradAccumulator<S>,
    lr: S,
    params: &AdamParams<S>,
) -> Result<()> {
    for ((block, row), g) in grads.iter() {
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite gradient for {:?} row {}",
                block, row
            )));
        }
    }

    state.t += 1;
    let one = S::one();
    let bc1 = one - params.beta1.powi(state.t as i32);
    let bc2 = one - params.beta2.powi(state.t as i32);

    for ((block, row), g) in grads.iter() {
        let (m, v) = state.moments_mut(block);
        let m_row = m.row_mut(row);
        let v_row = v.row_mut(row);
        let p_row = model.block_mut(block).row_mut(row);
        for i in 0..g.len() {
            m_row[i] = params.beta1 * m_row[i] + (one - params.beta1) * g[i];
            v_row[i] = params.beta2 * v_row[i] + (one - params.beta2) * g[i] * g[i];
            let m_hat = m_row[i] / bc1;
            let v_hat = v_row[i] / bc2;
            p_row[i] -= lr * m_hat / (v_hat.sqrt() + params.eps);
        }
        project_unit_ball(p_row);
    }
    Ok(())
}
