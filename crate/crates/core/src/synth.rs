//! Synthetic planted-structure worlds and brute-force oracles.
//!
//! The oracles here are deliberately written as plain exhaustive loops with
//! their own arithmetic, sharing no code with the batch loss path, so the
//! two implementations can check each other.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Class, SignedInteraction, SignedTable};
use crate::error::{Error, Result};
use crate::loss::GradAccumulator;
use crate::model::{EmbeddingModel, HyperParams, Matrix, ParamBlock};

/// How a user group feels about an item cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Affinity {
    Likes,
    Dislikes,
    /// Never sampled: users in the group do not rate items in the cluster.
    Unknown,
}

/// A small world with planted group/cluster structure.
///
/// `affinity[g][c]` gives group g's stance on cluster c. Cluster sizes are
/// explicit so the planted structure can be shaped; they must sum to
/// `n_items`.
#[derive(Debug, Clone)]
pub struct PlantedWorld {
    pub n_groups: usize,
    pub n_clusters: usize,
    pub affinity: Vec<Vec<Affinity>>,
    pub cluster_sizes: Vec<usize>,
    pub n_users: usize,
    pub n_items: usize,
    pub ratings_per_user: usize,
    /// probability of flipping each interaction's class
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedWorld {
    /// Desk-scale default: two groups each liking their own small cluster,
    /// with one large shared Dislikes cluster.
    fn default() -> PlantedWorld {
        use Affinity::{Dislikes as D, Likes as L, Unknown as U};
        PlantedWorld {
            n_groups: 2,
            n_clusters: 3,
            affinity: vec![vec![L, U, D], vec![U, L, D]],
            cluster_sizes: vec![15, 15, 70],
            n_users: 200,
            n_items: 100,
            ratings_per_user: 30,
            noise: 0.05,
            seed: 1,
        }
    }
}

impl PlantedWorld {
    /// World with one Likes cluster per group plus one shared Dislikes
    /// cluster: 30% of items go to the Likes clusters in equal shares, the
    /// rest to the shared cluster. `n_groups=2` with the default counts
    /// reproduces [`PlantedWorld::default`].
    pub fn standard(
        n_groups: usize,
        n_users: usize,
        n_items: usize,
        ratings_per_user: usize,
        noise: f64,
        seed: u64,
    ) -> Result<PlantedWorld> {
        if n_groups == 0 {
            return Err(Error::Synth("need at least one group".into()));
        }
        let likes_each = (3 * n_items) / (10 * n_groups);
        if likes_each == 0 {
            return Err(Error::Synth(format!(
                "{} items cannot give {} groups a Likes cluster",
                n_items, n_groups
            )));
        }
        let n_clusters = n_groups + 1;
        let mut cluster_sizes = vec![likes_each; n_groups];
        cluster_sizes.push(n_items - likes_each * n_groups);
        let affinity = (0..n_groups)
            .map(|g| {
                (0..n_clusters)
                    .map(|c| {
                        if c == g {
                            Affinity::Likes
                        } else if c == n_clusters - 1 {
                            Affinity::Dislikes
                        } else {
                            Affinity::Unknown
                        }
                    })
                    .collect()
            })
            .collect();
        let world = PlantedWorld {
            n_groups,
            n_clusters,
            affinity,
            cluster_sizes,
            n_users,
            n_items,
            ratings_per_user,
            noise,
            seed,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_clusters == 0 || self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Synth("world dimensions must be positive".into()));
        }
        if self.affinity.len() != self.n_groups
            || self.affinity.iter().any(|row| row.len() != self.n_clusters)
        {
            return Err(Error::Synth("affinity matrix shape mismatch".into()));
        }
        if self.cluster_sizes.len() != self.n_clusters
            || self.cluster_sizes.iter().sum::<usize>() != self.n_items
        {
            return Err(Error::Synth("cluster sizes must sum to n_items".into()));
        }
        for (g, row) in self.affinity.iter().enumerate() {
            if !row.contains(&Affinity::Likes) || !row.contains(&Affinity::Dislikes) {
                return Err(Error::Synth(format!(
                    "group {} needs at least one Likes and one Dislikes cluster",
                    g
                )));
            }
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Synth("noise must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// The planted assignments, kept for diagnostics and ideal embeddings.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub user_group: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

/// Sample a world's interactions.
///
/// Users go to groups round-robin; items fill clusters in id order per
/// `cluster_sizes`. Each user draws half their ratings (rounded up) from
/// their Likes clusters and half from their Dislikes clusters, without
/// replacement within each side, mirroring the roughly balanced classes a
/// per-user-mean binarization produces. Unknown-affinity items are never
/// drawn. Each interaction's class is its affinity, flipped with
/// probability `noise`.
pub fn generate(world: &PlantedWorld) -> Result<(Vec<SignedInteraction>, GroundTruth)> {
    world.validate()?;

    let mut item_cluster = Vec::with_capacity(world.n_items);
    for (c, &size) in world.cluster_sizes.iter().enumerate() {
        item_cluster.extend(std::iter::repeat(c).take(size));
    }
    let user_group: Vec<usize> = (0..world.n_users).map(|u| u % world.n_groups).collect();

    // per group: the item pools on each side of the affinity
    let mut liked_pool: Vec<Vec<usize>> = vec![Vec::new(); world.n_groups];
    let mut disliked_pool: Vec<Vec<usize>> = vec![Vec::new(); world.n_groups];
    for item in 0..world.n_items {
        for g in 0..world.n_groups {
            match world.affinity[g][item_cluster[item]] {
                Affinity::Likes => liked_pool[g].push(item),
                Affinity::Dislikes => disliked_pool[g].push(item),
                Affinity::Unknown => {}
            }
        }
    }

    let n_pos = world.ratings_per_user.div_ceil(2);
    let n_neg = world.ratings_per_user - n_pos;
    for g in 0..world.n_groups {
        if liked_pool[g].len() < n_pos || disliked_pool[g].len() < n_neg {
            return Err(Error::Synth(format!(
                "group {} pools ({} liked, {} disliked) cannot supply {} + {} ratings",
                g,
                liked_pool[g].len(),
                disliked_pool[g].len(),
                n_pos,
                n_neg
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    let mut interactions = Vec::with_capacity(world.n_users * world.ratings_per_user);
    for user in 0..world.n_users {
        let g = user_group[user];
        let mut drawn: Vec<(usize, Affinity)> = Vec::with_capacity(world.ratings_per_user);
        let pos_idx = index_sample(&mut rng, liked_pool[g].len(), n_pos);
        for i in pos_idx {
            drawn.push((liked_pool[g][i], Affinity::Likes));
        }
        let neg_idx = index_sample(&mut rng, disliked_pool[g].len(), n_neg);
        for i in neg_idx {
            drawn.push((disliked_pool[g][i], Affinity::Dislikes));
        }
        drawn.sort_unstable_by_key(|&(item, _)| item);
        for (item, side) in drawn {
            let mut class = match side {
                Affinity::Likes => Class::Positive,
                Affinity::Dislikes => Class::Negative,
                Affinity::Unknown => unreachable!(),
            };
            if rng.random::<f64>() < world.noise {
                class = match class {
                    Class::Positive => Class::Negative,
                    Class::Negative => Class::Positive,
                };
            }
            interactions.push(SignedInteraction { user, item, class });
        }
    }

    Ok((interactions, GroundTruth { user_group, item_cluster }))
}

/// Largest input the exhaustive oracle accepts, as n_users * n_items.
pub const BRUTEFORCE_LIMIT: usize = 10_000;

/// Exact objective value by exhaustive enumeration with uniform triplet
/// weight 1. Triple loop over (user, positive, unobserved item) for the
/// hinge part, a loop over explicit negatives, and a loop over every
/// (positive, negative) item pair per user for the dissimilar part.
///
/// Independent of the batch loss path by construction; f64 only.
pub fn bruteforce_loss(
    train: &SignedTable,
    model: &EmbeddingModel<f64>,
    hp: &HyperParams<f64>,
) -> Result<f64> {
    if train.n_users * train.n_items > BRUTEFORCE_LIMIT {
        return Err(Error::Synth(format!(
            "{} users x {} items exceeds the brute-force limit of {}",
            train.n_users, train.n_items, BRUTEFORCE_LIMIT
        )));
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 1e-12;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s.sqrt()
    };

    let mut l0 = 0.0;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for user in 0..train.n_users {
        let u = model.users.row(user);
        let rated: std::collections::HashSet<usize> = train.items_of(user).collect();
        for &pos in train.positives(user) {
            let dj = dist(u, model.items.row(pos));
            for item in 0..train.n_items {
                if rated.contains(&item) {
                    continue;
                }
                let hinge = hp.margin + dj - dist(u, model.items.row(item));
                if hinge > 0.0 {
                    l0 += hinge;
                }
            }
        }
        for &neg in train.negatives(user) {
            let v = hp.alpha / dist(u, model.items.row(neg));
            l1 += if v > 1.0 { v } else { 1.0 };
        }
        for &pos in train.positives(user) {
            for &neg in train.negatives(user) {
                let v = hp.alpha / dist(model.items.row(pos), model.items.row(neg));
                l2 += if v > 1.0 { v } else { 1.0 };
            }
        }
    }
    Ok(l0 + hp.lambda1 * l1 + hp.lambda2 * l2)
}

/// Step size for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Numeric gradient of an arbitrary scalar function of the model, by
/// central differences on every coordinate of every row. Intended for
/// desk-scale fixtures; cost is 2 * dim * n_rows evaluations of `f`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&EmbeddingModel<f64>) -> f64,
    model: &EmbeddingModel<f64>,
    h: f64,
) -> GradAccumulator<f64> {
    let mut work = model.clone();
    let mut grads = GradAccumulator::new(model.dim);
    let mut blocks = vec![
        (ParamBlock::User, model.n_users()),
        (ParamBlock::Item, model.n_items()),
    ];
    if let Some(w) = &model.tag_proj {
        blocks.push((ParamBlock::TagProj, w.rows()));
    }
    for (block, n_rows) in blocks {
        for row in 0..n_rows {
            let g = grads.row_mut(block, row);
            for i in 0..model.dim {
                let orig = work.block(block).row(row)[i];
                work.block_mut(block).row_mut(row)[i] = orig + h;
                let up = f(&work);
                work.block_mut(block).row_mut(row)[i] = orig - h;
                let down = f(&work);
                work.block_mut(block).row_mut(row)[i] = orig;
                g[i] = (up - down) / (2.0 * h);
            }
        }
    }
    grads
}

/// Hand-constructed embedding that solves a noiseless world by geometry:
/// user groups sit near the first axis pole, each group's Likes clusters
/// sit right at their group, and clusters disliked by every rating group
/// sit at the opposite pole.
///
/// Supports worlds whose clusters are each either (a) liked by at least one
/// group and disliked by none, or (b) disliked by at least one group and
/// liked by none. Mixed clusters are rejected unless the group geometry can
/// absorb them. Requires dim >= 2.
pub fn ideal_embedding(
    world: &PlantedWorld,
    truth: &GroundTruth,
    dim: usize,
    alpha: f64,
) -> Result<EmbeddingModel<f64>> {
    world.validate()?;
    if dim < 2 {
        return Err(Error::Synth("ideal embedding needs dim >= 2".into()));
    }

    // Group positions: spread on a small arc around +e0 (radius just inside
    // the ball), so groups stay close to each other and far from -e0.
    let radius = 1.0 - 1e-3;
    let spread = 0.25f64; // radians between adjacent groups
    let group_pos: Vec<Vec<f64>> = (0..world.n_groups)
        .map(|g| {
            let angle = spread * (g as f64 - (world.n_groups as f64 - 1.0) / 2.0);
            let mut p = vec![0.0; dim];
            p[0] = radius * angle.cos();
            p[1] = radius * angle.sin();
            p
        })
        .collect();

    // Cluster positions.
    let mut cluster_pos: Vec<Vec<f64>> = Vec::with_capacity(world.n_clusters);
    for c in 0..world.n_clusters {
        let likers: Vec<usize> =
            (0..world.n_groups).filter(|&g| world.affinity[g][c] == Affinity::Likes).collect();
        let dislikers: Vec<usize> =
            (0..world.n_groups).filter(|&g| world.affinity[g][c] == Affinity::Dislikes).collect();
        let pos = if likers.is_empty() && dislikers.is_empty() {
            // unknown to everyone: park it orthogonally, mid-distance
            let mut p = vec![0.0; dim];
            p[1] = 0.9;
            p
        } else if dislikers.is_empty() {
            // at the mean of its likers, nudged inward so distances to the
            // likers stay tiny but distinct per cluster
            let mut p = vec![0.0; dim];
            for &g in &likers {
                for i in 0..dim {
                    p[i] += group_pos[g][i] / likers.len() as f64;
                }
            }
            let shrink = 1.0 - 1e-4 * (c as f64 + 1.0);
            p.iter_mut().for_each(|x| *x *= shrink);
            p
        } else if likers.is_empty() {
            let mut p = vec![0.0; dim];
            p[0] = -1.0;
            p
        } else {
            return Err(Error::Synth(format!(
                "cluster {} is both liked and disliked; no pole layout fits",
                c
            )));
        };
        cluster_pos.push(pos);
    }

    // Every Dislikes pair must clear the push radius.
    for g in 0..world.n_groups {
        for c in 0..world.n_clusters {
            if world.affinity[g][c] == Affinity::Dislikes {
                let d = crate::model::distance(&group_pos[g], &cluster_pos[c]);
                if d < alpha {
                    return Err(Error::Synth(format!(
                        "group {} sits {:.3} from disliked cluster {}, inside alpha {}",
                        g, d, c, alpha
                    )));
                }
            }
        }
    }

    let mut users = Matrix::zeros(world.n_users, dim);
    for u in 0..world.n_users {
        users.row_mut(u).copy_from_slice(&group_pos[truth.user_group[u]]);
    }
    let mut items = Matrix::zeros(world.n_items, dim);
    for i in 0..world.n_items {
        items.row_mut(i).copy_from_slice(&cluster_pos[truth.item_cluster[i]]);
    }
    Ok(EmbeddingModel { users, items, dim, tag_proj: None })
}
