//! Modular batch objective: weighted hinge triplets, inverse-distance push
//! terms with a constant floor, the optional tag-projection term, and their
//! analytic gradients collected into a sparse accumulator.

use std::collections::HashMap;

use crate::data::TagTable;
use crate::error::{Error, Result};
use crate::model::{distance, EmbeddingModel, HyperParams, ParamBlock};
use crate::sampler::MiniBatch;
use crate::scalar::Real;

/// One weighted ranking triplet: pull `pos_item` toward `user`, push
/// `neg_item` (an item the user never interacted with) beyond the margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletTerm<S> {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
    pub weight: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushKind {
    /// left = user id, right = item the user explicitly disliked
    UserNegative,
    /// left = positively rated item, right = negatively rated item, same user
    DissimilarPair,
}

/// One push term: max(alpha / d(left, right), 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PushTerm {
    pub kind: PushKind,
    pub left: usize,
    pub right: usize,
}

impl PushTerm {
    fn endpoints<'m, S: Real>(&self, model: &'m EmbeddingModel<S>) -> (&'m [S], &'m [S]) {
        match self.kind {
            PushKind::UserNegative => (model.users.row(self.left), model.items.row(self.right)),
            PushKind::DissimilarPair => (model.items.row(self.left), model.items.row(self.right)),
        }
    }

    fn blocks(&self) -> (ParamBlock, ParamBlock) {
        match self.kind {
            PushKind::UserNegative => (ParamBlock::User, ParamBlock::Item),
            PushKind::DissimilarPair => (ParamBlock::Item, ParamBlock::Item),
        }
    }
}

/// Sparse per-row gradient store. Rows never touched by the batch have no
/// entry at all, which is what keeps the optimizer updates sparse.
#[derive(Debug, Clone)]
pub struct GradAccumulator<S> {
    dim: usize,
    rows: HashMap<(ParamBlock, usize), Vec<S>>,
}

impl<S: Real> GradAccumulator<S> {
    pub fn new(dim: usize) -> GradAccumulator<S> {
        GradAccumulator { dim, rows: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_mut(&mut self, block: ParamBlock, row: usize) -> &mut [S] {
        self.rows.entry((block, row)).or_insert_with(|| vec![S::zero(); self.dim])
    }

    pub fn get(&self, block: ParamBlock, row: usize) -> Option<&[S]> {
        self.rows.get(&(block, row)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((ParamBlock, usize), &[S])> {
        self.rows.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Touched rows in a deterministic order, for tests and diagnostics.
    pub fn touched(&self) -> Vec<(ParamBlock, usize)> {
        let mut keys: Vec<(ParamBlock, usize)> = self.rows.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// target += c * (a - b), the shape every distance gradient takes here.
    fn add_scaled_diff(&mut self, block: ParamBlock, row: usize, a: &[S], b: &[S], c: S) {
        let dst = self.row_mut(block, row);
        for i in 0..dst.len() {
            dst[i] += c * (a[i] - b[i]);
        }
    }
}

/// Weighted hinge value of one triplet: w * max(m + d(u, i+) - d(u, i-), 0).
pub fn hinge_triplet_loss<S: Real>(
    t: &TripletTerm<S>,
    model: &EmbeddingModel<S>,
    margin: S,
) -> S {
    let u = model.users.row(t.user);
    let dj = distance(u, model.items.row(t.pos_item));
    let dk = distance(u, model.items.row(t.neg_item));
    let arg = margin + dj - dk;
    if arg > S::zero() {
        t.weight * arg
    } else {
        S::zero()
    }
}

/// Push value of one pair: max(alpha / d(left, right), 1).
///
/// The floor means a pair already further apart than `alpha` contributes a
/// constant 1 and no gradient.
pub fn push_loss<S: Real>(p: &PushTerm, model: &EmbeddingModel<S>, alpha: S) -> S {
    let (a, b) = p.endpoints(model);
    let d = distance(a, b);
    let v = alpha / d;
    if v > S::one() {
        v
    } else {
        S::one()
    }
}

/// Tag-projection term: sum over items with at least one tag of
/// ||sum of tag rows - item vector||^2. Items with no tags contribute zero.
pub fn feature_loss<S: Real>(model: &EmbeddingModel<S>, features: &TagTable) -> Result<S> {
    let w = model
        .tag_proj
        .as_ref()
        .ok_or_else(|| Error::Config("model has no tag projection".into()))?;
    if w.rows() != features.n_tags {
        return Err(Error::Config(format!(
            "tag projection has {} rows but features have {} tags",
            w.rows(),
            features.n_tags
        )));
    }
    if features.n_items != model.n_items() {
        return Err(Error::Config(format!(
            "features cover {} items but model has {}",
            features.n_items,
            model.n_items()
        )));
    }
    let mut total = S::zero();
    let mut proj = vec![S::zero(); model.dim];
    for item in 0..model.n_items() {
        let tags = features.tags_of(item);
        if tags.is_empty() {
            continue;
        }
        proj.iter_mut().for_each(|x| *x = S::zero());
        for &t in tags {
            let row = w.row(t);
            for i in 0..proj.len() {
                proj[i] += row[i];
            }
        }
        let v = model.items.row(item);
        let mut sq = S::zero();
        for i in 0..proj.len() {
            let d = proj[i] - v[i];
            sq += d * d;
        }
        total += sq;
    }
    Ok(total)
}

fn feature_grad<S: Real>(
    model: &EmbeddingModel<S>,
    features: &TagTable,
    scale: S,
    grads: &mut GradAccumulator<S>,
) {
    let w = model.tag_proj.as_ref().expect("feature gradient without tag projection");
    assert_eq!(w.rows(), features.n_tags, "tag projection row count mismatch");
    let two = S::from_f64_lossy(2.0);
    let mut proj = vec![S::zero(); model.dim];
    for item in 0..model.n_items() {
        let tags = features.tags_of(item);
        if tags.is_empty() {
            continue;
        }
        proj.iter_mut().for_each(|x| *x = S::zero());
        for &t in tags {
            let row = w.row(t);
            for i in 0..proj.len() {
                proj[i] += row[i];
            }
        }
        let v = model.items.row(item);
        // residual r = proj - v; d/dv = -2r, d/dW[t] = 2r for each tag
        let c = two * scale;
        grads.add_scaled_diff(ParamBlock::Item, item, v, &proj, c);
        for &t in tags {
            grads.add_scaled_diff(ParamBlock::TagProj, t, &proj, v, c);
        }
    }
}

/// Batch objective: summed (not averaged) hinge triplets, plus
/// lambda1 * user-negative pushes, lambda2 * dissimilar-pair pushes, plus
/// lambda_f * tag-projection term when features are attached.
pub fn total_loss<S: Real>(
    batch: &MiniBatch<S>,
    model: &EmbeddingModel<S>,
    hp: &HyperParams<S>,
    features: Option<&TagTable>,
) -> S {
    let mut total = S::zero();
    for t in &batch.triplets {
        total += hinge_triplet_loss(t, model, hp.margin);
    }
    let mut l1 = S::zero();
    for p in &batch.user_negatives {
        debug_assert_eq!(p.kind, PushKind::UserNegative);
        l1 += push_loss(p, model, hp.alpha);
    }
    total += hp.lambda1 * l1;
    let mut l2 = S::zero();
    for p in &batch.dissimilar_pairs {
        debug_assert_eq!(p.kind, PushKind::DissimilarPair);
        l2 += push_loss(p, model, hp.alpha);
    }
    total += hp.lambda2 * l2;
    if hp.lambda_f > S::zero() {
        if let Some(f) = features {
            total += hp.lambda_f * feature_loss(model, f).expect("features validated before use");
        }
    }
    total
}

/// Analytic gradient of [`total_loss`] with respect to every embedding row
/// the batch touches. Inactive hinges (argument <= 0) and satisfied pushes
/// (d >= alpha) contribute nothing, which realizes the zero subgradient at
/// both kinks.
pub fn grad_total_loss<S: Real>(
    batch: &MiniBatch<S>,
    model: &EmbeddingModel<S>,
    hp: &HyperParams<S>,
    features: Option<&TagTable>,
) -> GradAccumulator<S> {
    let mut grads = GradAccumulator::new(hp.dim);

    for t in &batch.triplets {
        let u = model.users.row(t.user);
        let vj = model.items.row(t.pos_item);
        let vk = model.items.row(t.neg_item);
        let dj = distance(u, vj);
        let dk = distance(u, vk);
        if hp.margin + dj - dk <= S::zero() {
            continue;
        }
        let cj = t.weight / dj;
        let ck = t.weight / dk;
        grads.add_scaled_diff(ParamBlock::User, t.user, u, vj, cj);
        grads.add_scaled_diff(ParamBlock::User, t.user, vk, u, ck);
        grads.add_scaled_diff(ParamBlock::Item, t.pos_item, vj, u, cj);
        grads.add_scaled_diff(ParamBlock::Item, t.neg_item, u, vk, ck);
    }

    let push_grad = |p: &PushTerm, lambda: S, grads: &mut GradAccumulator<S>| {
        if lambda == S::zero() {
            return;
        }
        let (a, b) = p.endpoints(model);
        let d = distance(a, b);
        if d >= hp.alpha {
            return;
        }
        // d(alpha/d)/da = -alpha * (a - b) / d^3
        let c = lambda * hp.alpha / (d * d * d);
        let (block_a, block_b) = p.blocks();
        grads.add_scaled_diff(block_a, p.left, b, a, c);
        grads.add_scaled_diff(block_b, p.right, a, b, c);
    };

    for p in &batch.user_negatives {
        push_grad(p, hp.lambda1, &mut grads);
    }
    for p in &batch.dissimilar_pairs {
        push_grad(p, hp.lambda2, &mut grads);
    }

    if hp.lambda_f > S::zero() {
        if let Some(f) = features {
            feature_grad(model, f, hp.lambda_f, &mut grads);
        }
    }

    grads
}
