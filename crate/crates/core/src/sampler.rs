//! Minibatch assembly: positive-pair sampling with hardest-of-U candidate
//! selection and rank-estimate weighting, explicit-negative draws, and
//! dissimilar-pair draws. Also provides the exhaustive enumeration mode the
//! brute-force cross-checks rely on.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SignedTable;
use crate::error::{Error, Result};
use crate::loss::{PushKind, PushTerm, TripletTerm};
use crate::model::{distance, EmbeddingModel, HyperParams};
use crate::scalar::Real;

/// One training batch. Component lengths are all N when the corresponding
/// pools are non-empty (drawn with replacement if a pool is smaller than N);
/// an empty pool yields an empty component.
#[derive(Debug, Clone)]
pub struct MiniBatch<S> {
    pub triplets: Vec<TripletTerm<S>>,
    pub user_negatives: Vec<PushTerm>,
    pub dissimilar_pairs: Vec<PushTerm>,
}

/// Rank-estimate weight: ln(1 + floor(n_items * violators / candidates)).
///
/// `violators` counts drawn candidates whose hinge argument was positive.
/// Zero violators means weight zero, so a fully satisfied triplet drops out.
pub fn warp_weight(violators: usize, candidates: usize, n_items: usize) -> f64 {
    assert!(candidates > 0, "candidate count must be positive");
    let rank_estimate = (n_items * violators) / candidates;
    ((1 + rank_estimate) as f64).ln()
}

/// Pick the hinge-maximizing candidate for one positive pair.
///
/// Returns (chosen item, violator count). Ties keep the earliest candidate.
/// This is the forced-choice kernel of batch assembly, exposed for direct
/// testing.
pub fn select_candidate<S: Real>(
    model: &EmbeddingModel<S>,
    margin: S,
    user: usize,
    pos_item: usize,
    candidates: &[usize],
) -> (usize, usize) {
    assert!(!candidates.is_empty());
    let u = model.users.row(user);
    let dj = distance(u, model.items.row(pos_item));
    let mut best = candidates[0];
    let mut best_arg = S::neg_infinity();
    let mut violators = 0;
    for &k in candidates {
        let arg = margin + dj - distance(u, model.items.row(k));
        if arg > S::zero() {
            violators += 1;
        }
        if arg > best_arg {
            best_arg = arg;
            best = k;
        }
    }
    (best, violators)
}

/// Per-dataset sampling state: index structures over the train split plus
/// the batch RNG stream.
pub struct SamplerState {
    rng: ChaCha8Rng,
    n_items: usize,
    pos_pairs: Vec<(usize, usize)>,
    neg_pairs: Vec<(usize, usize)>,
    /// per user: sorted item ids the user interacted with, either class
    interacted: Vec<Vec<usize>>,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
    /// users holding at least one positive and one negative
    dp_users: Vec<usize>,
}

impl SamplerState {
    /// Build the index. Errors if the split holds no positive interaction.
    pub fn new(train: &SignedTable, seed: u64) -> Result<SamplerState> {
        let mut pos_pairs = Vec::new();
        let mut neg_pairs = Vec::new();
        for it in &train.interactions {
            match it.class {
                crate::data::Class::Positive => pos_pairs.push((it.user, it.item)),
                crate::data::Class::Negative => neg_pairs.push((it.user, it.item)),
            }
        }
        if pos_pairs.is_empty() {
            return Err(Error::Train("train split has no positive interactions".into()));
        }
        let mut interacted: Vec<Vec<usize>> = vec![Vec::new(); train.n_users];
        let mut positives: Vec<Vec<usize>> = vec![Vec::new(); train.n_users];
        let mut negatives: Vec<Vec<usize>> = vec![Vec::new(); train.n_users];
        for u in 0..train.n_users {
            positives[u] = train.positives(u).to_vec();
            negatives[u] = train.negatives(u).to_vec();
            let mut all: Vec<usize> = train.items_of(u).collect();
            all.sort_unstable();
            interacted[u] = all;
        }
        let dp_users: Vec<usize> = (0..train.n_users)
            .filter(|&u| !positives[u].is_empty() && !negatives[u].is_empty())
            .collect();
        Ok(SamplerState {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n_items: train.n_items,
            pos_pairs,
            neg_pairs,
            interacted,
            positives,
            negatives,
            dp_users,
        })
    }

    fn unobserved_pool_size(&self, user: usize) -> usize {
        self.n_items - self.interacted[user].len()
    }

    fn draw_unobserved(&mut self, user: usize, amount: usize) -> Vec<usize> {
        let seen = &self.interacted[user];
        let pool = self.n_items - seen.len();
        debug_assert!(pool > 0);
        // Rejection sampling degenerates when the user saw most of the
        // catalog; enumerate the complement instead in that regime.
        if seen.len() * 2 >= self.n_items {
            let mut complement = Vec::with_capacity(pool);
            let mut at = 0;
            for item in 0..self.n_items {
                if at < seen.len() && seen[at] == item {
                    at += 1;
                } else {
                    complement.push(item);
                }
            }
            (0..amount).map(|_| complement[self.rng.random_range(0..complement.len())]).collect()
        } else {
            (0..amount)
                .map(|_| loop {
                    let item = self.rng.random_range(0..self.n_items);
                    if self.interacted[user].binary_search(&item).is_err() {
                        break item;
                    }
                })
                .collect()
        }
    }

    /// Draw N dissimilar pairs: a uniform user among those holding both
    /// classes, then one positive and one negative of theirs uniformly.
    pub fn sample_dp_pairs(&mut self, n: usize) -> Vec<PushTerm> {
        if self.dp_users.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let u = self.dp_users[self.rng.random_range(0..self.dp_users.len())];
                let pos = self.positives[u][self.rng.random_range(0..self.positives[u].len())];
                let neg = self.negatives[u][self.rng.random_range(0..self.negatives[u].len())];
                PushTerm { kind: PushKind::DissimilarPair, left: pos, right: neg }
            })
            .collect()
    }

    /// Assemble one batch of N triplets, N explicit-negative pushes, and N
    /// dissimilar-pair pushes (each component empty if its pool is empty).
    pub fn sample_batch<S: Real>(
        &mut self,
        model: &EmbeddingModel<S>,
        hp: &HyperParams<S>,
    ) -> MiniBatch<S> {
        let n = hp.batch_size;

        let any_candidates = (0..self.interacted.len()).any(|u| {
            !self.positives[u].is_empty() && self.unobserved_pool_size(u) > 0
        });
        let mut triplets = Vec::with_capacity(if any_candidates { n } else { 0 });
        if any_candidates {
            for _ in 0..n {
                // retry pairs whose user has exhausted the catalog
                let (user, pos_item) = loop {
                    let (u, i) = self.pos_pairs[self.rng.random_range(0..self.pos_pairs.len())];
                    if self.unobserved_pool_size(u) > 0 {
                        break (u, i);
                    }
                };
                let candidates = self.draw_unobserved(user, hp.candidates);
                let (neg_item, violators) =
                    select_candidate(model, hp.margin, user, pos_item, &candidates);
                let weight = if hp.warp {
                    S::from_f64_lossy(warp_weight(violators, hp.candidates, self.n_items))
                } else {
                    S::one()
                };
                triplets.push(TripletTerm { user, pos_item, neg_item, weight });
            }
        }

        let user_negatives = if self.neg_pairs.is_empty() {
            Vec::new()
        } else {
            (0..n)
                .map(|_| {
                    let (u, i) = self.neg_pairs[self.rng.random_range(0..self.neg_pairs.len())];
                    PushTerm { kind: PushKind::UserNegative, left: u, right: i }
                })
                .collect()
        };

        let dissimilar_pairs = self.sample_dp_pairs(n);

        MiniBatch { triplets, user_negatives, dissimilar_pairs }
    }
}

/// Every term of the full objective, enumerated instead of sampled, with
/// uniform triplet weight 1. One triplet per (positive interaction,
/// unobserved item) pair, one push per explicit negative, one dissimilar
/// pair per (positive, negative) item pair of each user.
pub fn exhaustive_batch<S: Real>(train: &SignedTable) -> MiniBatch<S> {
    let mut interacted: Vec<Vec<usize>> = vec![Vec::new(); train.n_users];
    for u in 0..train.n_users {
        let mut all: Vec<usize> = train.items_of(u).collect();
        all.sort_unstable();
        interacted[u] = all;
    }

    let mut triplets = Vec::new();
    let mut user_negatives = Vec::new();
    for it in &train.interactions {
        match it.class {
            crate::data::Class::Positive => {
                for item in 0..train.n_items {
                    if interacted[it.user].binary_search(&item).is_err() {
                        triplets.push(TripletTerm {
                            user: it.user,
                            pos_item: it.item,
                            neg_item: item,
                            weight: S::one(),
                        });
                    }
                }
            }
            crate::data::Class::Negative => {
                user_negatives.push(PushTerm {
                    kind: PushKind::UserNegative,
                    left: it.user,
                    right: it.item,
                });
            }
        }
    }

    let mut dissimilar_pairs = Vec::new();
    for u in 0..train.n_users {
        for &i in train.positives(u) {
            for &j in train.negatives(u) {
                dissimilar_pairs.push(PushTerm { kind: PushKind::DissimilarPair, left: i, right: j });
            }
        }
    }

    MiniBatch { triplets, user_negatives, dissimilar_pairs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Class, SignedInteraction, SignedTable};
    use crate::model::{init_model, Matrix};
    use approx::assert_relative_eq;

    fn signed(rows: &[(usize, usize, i8)], n_users: usize, n_items: usize) -> SignedTable {
        SignedTable::new(
            rows.iter()
                .map(|&(user, item, s)| SignedInteraction {
                    user,
                    item,
                    class: if s > 0 { Class::Positive } else { Class::Negative },
                })
                .collect(),
            n_users,
            n_items,
        )
    }

    fn hp(n: usize, u: usize) -> HyperParams<f64> {
        HyperParams { dim: 4, batch_size: n, candidates: u, seed: 5, ..Default::default() }
    }

    #[test]
    fn warp_weight_known_value() {
        // floor(100 * 2 / 10) = 20 -> ln(21)
        assert_relative_eq!(warp_weight(2, 10, 100), 21f64.ln(), epsilon = 1e-12);
        assert_eq!(warp_weight(0, 10, 100), 0.0);
        // floor semantics: 7*3/10 = 2 -> ln(3)
        assert_relative_eq!(warp_weight(3, 10, 7), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn hardest_candidate_wins_and_violators_counted() {
        // d(u, pos) = 0.5; candidates at distances 1.2, 0.1, 0.9.
        // margin 1.0: args are 0.3, 1.4, 0.6 -> candidate at 0.1 kept, 3 violators.
        let model = EmbeddingModel {
            users: Matrix::from_vec(vec![0.0f64, 0.0], 1, 2),
            items: Matrix::from_vec(
                vec![0.5, 0.0, 1.2, 0.0, 0.1, 0.0, 0.9, 0.0],
                4,
                2,
            ),
            dim: 2,
            tag_proj: None,
        };
        let (chosen, violators) = select_candidate(&model, 1.0, 0, 0, &[1, 2, 3]);
        assert_eq!(chosen, 2);
        assert_eq!(violators, 3);
        // margin 0.1: args are -0.6, 0.5, -0.3 -> still candidate 2, 1 violator
        let (chosen, violators) = select_candidate(&model, 0.1, 0, 0, &[1, 2, 3]);
        assert_eq!(chosen, 2);
        assert_eq!(violators, 1);
    }

    #[test]
    fn tie_keeps_first_drawn_candidate() {
        let model = EmbeddingModel {
            users: Matrix::from_vec(vec![0.0f64, 0.0], 1, 2),
            items: Matrix::from_vec(vec![0.5, 0.0, 0.9, 0.0, 0.9, 0.0], 3, 2),
            dim: 2,
            tag_proj: None,
        };
        let (chosen, _) = select_candidate(&model, 1.0, 0, 0, &[2, 1]);
        assert_eq!(chosen, 2, "equal arguments must keep the earliest draw");
    }

    #[test]
    fn batch_components_have_n_terms() {
        let t = signed(&[(0, 0, 1), (0, 1, -1), (1, 2, 1), (1, 3, -1)], 2, 6);
        let model = init_model(&hp(8, 3), 2, 6).unwrap();
        let mut s = SamplerState::new(&t, 1).unwrap();
        let b = s.sample_batch(&model, &hp(8, 3));
        assert_eq!(b.triplets.len(), 8);
        assert_eq!(b.user_negatives.len(), 8);
        assert_eq!(b.dissimilar_pairs.len(), 8);
    }

    #[test]
    fn empty_pools_yield_empty_components() {
        // positives only: no explicit negatives, no dissimilar pairs
        let t = signed(&[(0, 0, 1), (1, 1, 1)], 2, 4);
        let model = init_model(&hp(5, 2), 2, 4).unwrap();
        let mut s = SamplerState::new(&t, 2).unwrap();
        let b = s.sample_batch(&model, &hp(5, 2));
        assert_eq!(b.triplets.len(), 5);
        assert!(b.user_negatives.is_empty());
        assert!(b.dissimilar_pairs.is_empty());
    }

    #[test]
    fn no_positives_is_an_error() {
        let t = signed(&[(0, 0, -1)], 1, 2);
        assert!(SamplerState::new(&t, 0).is_err());
    }

    #[test]
    fn candidates_are_never_interacted_items() {
        let t = signed(
            &[(0, 0, 1), (0, 1, -1), (0, 2, 1), (1, 0, 1), (1, 3, -1)],
            2,
            8,
        );
        let model = init_model(&hp(64, 5), 2, 8).unwrap();
        let mut s = SamplerState::new(&t, 3).unwrap();
        for _ in 0..20 {
            let b = s.sample_batch(&model, &hp(64, 5));
            for trip in &b.triplets {
                let seen: Vec<usize> = t.items_of(trip.user).collect();
                assert!(
                    !seen.contains(&trip.neg_item),
                    "user {} drew interacted item {}",
                    trip.user,
                    trip.neg_item
                );
            }
        }
    }

    #[test]
    fn saturated_user_forces_the_single_free_item() {
        // user 0 interacted with every item except item 4
        let t = signed(&[(0, 0, 1), (0, 1, 1), (0, 2, -1), (0, 3, 1)], 1, 5);
        let model = init_model(&hp(6, 4), 1, 5).unwrap();
        let mut s = SamplerState::new(&t, 7).unwrap();
        let b = s.sample_batch(&model, &hp(6, 4));
        assert_eq!(b.triplets.len(), 6);
        for trip in &b.triplets {
            assert_eq!(trip.neg_item, 4);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let t = signed(&[(0, 0, 1), (0, 1, -1), (1, 2, 1), (1, 0, -1)], 2, 6);
        let model = init_model(&hp(16, 4), 2, 6).unwrap();
        let mut s1 = SamplerState::new(&t, 11).unwrap();
        let mut s2 = SamplerState::new(&t, 11).unwrap();
        let b1 = s1.sample_batch(&model, &hp(16, 4));
        let b2 = s2.sample_batch(&model, &hp(16, 4));
        assert_eq!(b1.triplets, b2.triplets);
        assert_eq!(b1.user_negatives, b2.user_negatives);
        assert_eq!(b1.dissimilar_pairs, b2.dissimilar_pairs);
    }

    #[test]
    fn exhaustive_mode_enumerates_every_term_once() {
        // user 0: pos {0}, neg {1}; user 1: pos {2}; 4 items total
        let t = signed(&[(0, 0, 1), (0, 1, -1), (1, 2, 1)], 2, 4);
        let b: MiniBatch<f64> = exhaustive_batch(&t);
        // user 0 has unobserved {2, 3}; user 1 has unobserved {0, 1, 3}
        assert_eq!(b.triplets.len(), 2 + 3);
        assert!(b.triplets.iter().all(|t| t.weight == 1.0));
        assert_eq!(b.user_negatives.len(), 1);
        assert_eq!(b.dissimilar_pairs.len(), 1);
        assert_eq!(b.dissimilar_pairs[0], PushTerm {
            kind: PushKind::DissimilarPair,
            left: 0,
            right: 1
        });
    }
}
