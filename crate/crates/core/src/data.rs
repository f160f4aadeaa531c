//! Dataset ingestion: rating parsers, per-user-mean binarization, tag
//! filtering, and the reproducible three-way interaction split.
//!
//! All ids are re-indexed densely from 0 in order of first appearance, and
//! the dense -> original maps are kept so results can be reported in the
//! source dataset's vocabulary.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One raw rating event, already re-indexed to dense ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Binarized interaction class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Positive,
    Negative,
}

impl Class {
    pub fn signum(self) -> i8 {
        match self {
            Class::Positive => 1,
            Class::Negative => -1,
        }
    }

    pub fn from_signum(s: i64) -> Option<Class> {
        match s {
            1 => Some(Class::Positive),
            -1 => Some(Class::Negative),
            _ => None,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.signum())
    }
}

/// A rating after binarization: the user either liked the item or did not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignedInteraction {
    pub user: usize,
    pub item: usize,
    pub class: Class,
}

/// Dense-indexed rating table plus the id vocabulary it was built from.
///
/// Invariants: every `user < n_users`, every `item < n_items`, and no
/// duplicate (user, item) pair (the last occurrence of a duplicate wins).
#[derive(Debug, Clone)]
pub struct InteractionTable {
    pub ratings: Vec<Rating>,
    pub n_users: usize,
    pub n_items: usize,
    /// dense id -> id string from the source file
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionTable {
    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// Density and mean-rating summary, the quantities reported per dataset.
    pub fn summary(&self) -> DatasetSummary {
        let n = self.ratings.len();
        let sum: f64 = self.ratings.iter().map(|r| r.value).sum();
        DatasetSummary {
            n_users: self.n_users,
            n_items: self.n_items,
            n_ratings: n,
            density: n as f64 / (self.n_users as f64 * self.n_items as f64),
            avg_rating: if n == 0 { 0.0 } else { sum / n as f64 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSummary {
    pub n_users: usize,
    pub n_items: usize,
    pub n_ratings: usize,
    pub density: f64,
    pub avg_rating: f64,
}

/// Input layouts understood by [`parse_ratings`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingsFormat {
    /// `userId::itemId::rating::timestamp` lines; the timestamp is ignored.
    Ml1m,
    /// CSV with header `user_id,book_id,rating`.
    Csv,
}

fn ingest_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Ingest(format!("{}:{}: {}", path.display(), line, msg))
}

/// Parse a ratings file into a dense table.
///
/// Ids are assigned in order of first appearance; duplicate (user, item)
/// pairs keep their first position but take the last value seen. Ratings
/// must lie in [1, 5].
pub fn parse_ratings(path: &Path, format: RatingsFormat) -> Result<InteractionTable> {
    let file = File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {}", path.display(), e)))?;
    let reader = BufReader::new(file);

    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids: Vec<String> = Vec::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut pair_index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ratings: Vec<Rating> = Vec::new();

    let mut push = |user_raw: &str, item_raw: &str, value_raw: &str, line: usize| -> Result<()> {
        let value: f64 = value_raw
            .trim()
            .parse()
            .map_err(|_| ingest_err(path, line, &format!("bad rating value {:?}", value_raw)))?;
        if !(1.0..=5.0).contains(&value) {
            return Err(ingest_err(path, line, &format!("rating {} outside [1, 5]", value)));
        }
        let user = *user_index.entry(user_raw.to_string()).or_insert_with(|| {
            user_ids.push(user_raw.to_string());
            user_ids.len() - 1
        });
        let item = *item_index.entry(item_raw.to_string()).or_insert_with(|| {
            item_ids.push(item_raw.to_string());
            item_ids.len() - 1
        });
        match pair_index.get(&(user, item)) {
            Some(&at) => ratings[at].value = value,
            None => {
                pair_index.insert((user, item), ratings.len());
                ratings.push(Rating { user, item, value });
            }
        }
        Ok(())
    };

    match format {
        RatingsFormat::Ml1m => {
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                let lineno = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split("::").collect();
                if fields.len() != 4 {
                    return Err(ingest_err(
                        path,
                        lineno,
                        &format!("expected 4 '::'-separated fields, got {}", fields.len()),
                    ));
                }
                push(fields[0], fields[1], fields[2], lineno)?;
            }
        }
        RatingsFormat::Csv => {
            let mut lines = reader.lines().enumerate();
            let header = match lines.next() {
                Some((_, line)) => line?,
                None => return Err(ingest_err(path, 1, "empty file, expected header")),
            };
            let cols: Vec<&str> = header.trim().split(',').collect();
            if cols != ["user_id", "book_id", "rating"] {
                return Err(ingest_err(
                    path,
                    1,
                    &format!("expected header user_id,book_id,rating, got {:?}", header.trim()),
                ));
            }
            for (i, line) in lines {
                let line = line?;
                let lineno = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 3 {
                    return Err(ingest_err(
                        path,
                        lineno,
                        &format!("expected 3 columns, got {}", fields.len()),
                    ));
                }
                push(fields[0].trim(), fields[1].trim(), fields[2], lineno)?;
            }
        }
    }

    Ok(InteractionTable {
        ratings,
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        user_ids,
        item_ids,
    })
}

/// Binarize ratings against each user's own mean rating.
///
/// A rating strictly below the user's mean becomes Negative, everything else
/// Positive. A user with a single rating is therefore Positive. Runs on the
/// full table, before any splitting, so the mean sees every rating the user
/// has.
pub fn binarize_by_user_mean(table: &InteractionTable) -> Vec<SignedInteraction> {
    let mut sum = vec![0.0f64; table.n_users];
    let mut count = vec![0usize; table.n_users];
    for r in &table.ratings {
        sum[r.user] += r.value;
        count[r.user] += 1;
    }
    table
        .ratings
        .iter()
        .map(|r| {
            let mean = sum[r.user] / count[r.user] as f64;
            let class = if r.value < mean { Class::Negative } else { Class::Positive };
            SignedInteraction { user: r.user, item: r.item, class }
        })
        .collect()
}

/// Class-labeled interactions with a per-user index, the currency of the
/// sampler and the evaluator.
#[derive(Debug, Clone, Default)]
pub struct SignedTable {
    pub interactions: Vec<SignedInteraction>,
    pub n_users: usize,
    pub n_items: usize,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl SignedTable {
    pub fn new(interactions: Vec<SignedInteraction>, n_users: usize, n_items: usize) -> SignedTable {
        let mut positives = vec![Vec::new(); n_users];
        let mut negatives = vec![Vec::new(); n_users];
        for it in &interactions {
            debug_assert!(it.user < n_users && it.item < n_items);
            match it.class {
                Class::Positive => positives[it.user].push(it.item),
                Class::Negative => negatives[it.user].push(it.item),
            }
        }
        SignedTable { interactions, n_users, n_items, positives, negatives }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Items this user rated positively, in interaction order.
    pub fn positives(&self, user: usize) -> &[usize] {
        &self.positives[user]
    }

    pub fn negatives(&self, user: usize) -> &[usize] {
        &self.negatives[user]
    }

    /// Every item the user touched, either class.
    pub fn items_of(&self, user: usize) -> impl Iterator<Item = usize> + '_ {
        self.positives[user].iter().chain(self.negatives[user].iter()).copied()
    }

    pub fn n_positive(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }
}

/// The three disjoint interaction partitions used throughout.
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub train: SignedTable,
    pub validation: SignedTable,
    pub test: SignedTable,
    pub seed: u64,
}

/// Uniform three-way split at the interaction level.
///
/// Part sizes differ pairwise by at most one (remainder goes to train, then
/// validation). Deterministic for a given seed; each part preserves the
/// input interaction order.
pub fn split_three_way(
    interactions: &[SignedInteraction],
    n_users: usize,
    n_items: usize,
    seed: u64,
) -> SplitAssignment {
    let n = interactions.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let q = n / 3;
    let r = n % 3;
    let sizes = [q + usize::from(r > 0), q + usize::from(r > 1), q];

    let mut parts: Vec<Vec<usize>> = Vec::with_capacity(3);
    let mut at = 0;
    for size in sizes {
        let mut part: Vec<usize> = order[at..at + size].to_vec();
        part.sort_unstable();
        parts.push(part);
        at += size;
    }

    let take = |idx: &Vec<usize>| -> SignedTable {
        SignedTable::new(idx.iter().map(|&i| interactions[i]).collect(), n_users, n_items)
    };

    SplitAssignment {
        train: take(&parts[0]),
        validation: take(&parts[1]),
        test: take(&parts[2]),
        seed,
    }
}

/// Users with at least 3 positive interactions in the given split, ascending.
pub fn eligible_eval_users(split: &SignedTable) -> Vec<usize> {
    (0..split.n_users).filter(|&u| split.positives(u).len() >= 3).collect()
}

/// One raw tag application; `item` is already a dense id.
#[derive(Debug, Clone)]
pub struct RawTag {
    pub user: String,
    pub item: usize,
    pub tag: String,
}

/// Filtered per-item tag sets with a dense tag vocabulary.
#[derive(Debug, Clone)]
pub struct TagTable {
    pub n_items: usize,
    pub n_tags: usize,
    /// dense tag id -> tag string
    pub tag_names: Vec<String>,
    /// per item: sorted, deduplicated dense tag ids
    pub item_tags: Vec<Vec<usize>>,
}

impl TagTable {
    pub fn tags_of(&self, item: usize) -> &[usize] {
        &self.item_tags[item]
    }
}

/// Drop unreliable tags, then deduplicate per (item, tag).
///
/// A tag survives only if used by at least 5 distinct users and applied to
/// at least 2 distinct items. Both thresholds are counted on the raw records
/// before deduplication. Surviving tags are re-indexed densely in order of
/// first appearance.
pub fn filter_tags(records: &[RawTag], n_items: usize) -> TagTable {
    let mut users_of: HashMap<&str, HashSet<&str>> = HashMap::new();
    let mut items_of: HashMap<&str, HashSet<usize>> = HashMap::new();
    for r in records {
        debug_assert!(r.item < n_items);
        users_of.entry(&r.tag).or_default().insert(&r.user);
        items_of.entry(&r.tag).or_default().insert(r.item);
    }

    let mut tag_index: HashMap<&str, usize> = HashMap::new();
    let mut tag_names: Vec<String> = Vec::new();
    let mut item_tags: Vec<HashSet<usize>> = vec![HashSet::new(); n_items];
    for r in records {
        if users_of[r.tag.as_str()].len() < 5 || items_of[r.tag.as_str()].len() < 2 {
            continue;
        }
        let id = *tag_index.entry(&r.tag).or_insert_with(|| {
            tag_names.push(r.tag.clone());
            tag_names.len() - 1
        });
        item_tags[r.item].insert(id);
    }

    let item_tags: Vec<Vec<usize>> = item_tags
        .into_iter()
        .map(|set| {
            let mut v: Vec<usize> = set.into_iter().collect();
            v.sort_unstable();
            v
        })
        .collect();

    TagTable { n_items, n_tags: tag_names.len(), tag_names, item_tags }
}

/// Parse a `user_id,item_id,tag` CSV, mapping raw item ids through the
/// table's vocabulary. Tags on items absent from the ratings are skipped.
pub fn parse_tags(path: &Path, table: &InteractionTable) -> Result<Vec<RawTag>> {
    let file = File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {}", path.display(), e)))?;
    let reader = BufReader::new(file);
    let item_index: HashMap<&str, usize> =
        table.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut out = Vec::new();
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(ingest_err(path, 1, "empty file, expected header")),
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols != ["user_id", "item_id", "tag"] {
        return Err(ingest_err(
            path,
            1,
            &format!("expected header user_id,item_id,tag, got {:?}", header.trim()),
        ));
    }
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // Tags may contain commas only if we split exactly twice.
        let mut fields = line.splitn(3, ',');
        let (user, item_raw, tag) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(it), Some(t)) => (u.trim(), it.trim(), t.trim()),
            _ => return Err(ingest_err(path, i + 1, "expected 3 columns")),
        };
        if let Some(&item) = item_index.get(item_raw) {
            out.push(RawTag { user: user.to_string(), item, tag: tag.to_string() });
        }
    }
    Ok(out)
}

// --- split and id-map serialization ---

pub fn write_split(path: &Path, split: &SignedTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user_id,item_id,class")?;
    for it in &split.interactions {
        writeln!(w, "{},{},{}", it.user, it.item, it.class.signum())?;
    }
    Ok(())
}

pub fn read_split(path: &Path, n_users: usize, n_items: usize) -> Result<SignedTable> {
    let file = File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {}", path.display(), e)))?;
    let reader = BufReader::new(file);
    let mut interactions = Vec::new();
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            let line = line?;
            if line.trim() != "user_id,item_id,class" {
                return Err(ingest_err(path, 1, "expected header user_id,item_id,class"));
            }
        }
        None => return Err(ingest_err(path, 1, "empty split file")),
    }
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 3 {
            return Err(ingest_err(path, lineno, "expected 3 columns"));
        }
        let user: usize = fields[0]
            .parse()
            .map_err(|_| ingest_err(path, lineno, "bad user id"))?;
        let item: usize = fields[1]
            .parse()
            .map_err(|_| ingest_err(path, lineno, "bad item id"))?;
        let class = fields[2]
            .parse::<i64>()
            .ok()
            .and_then(Class::from_signum)
            .ok_or_else(|| ingest_err(path, lineno, "class must be 1 or -1"))?;
        if user >= n_users || item >= n_items {
            return Err(ingest_err(path, lineno, "id outside dataset vocabulary"));
        }
        interactions.push(SignedInteraction { user, item, class });
    }
    Ok(SignedTable::new(interactions, n_users, n_items))
}

pub fn write_id_map(path: &Path, ids: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "dense_id,original_id")?;
    for (dense, original) in ids.iter().enumerate() {
        writeln!(w, "{},{}", dense, original)?;
    }
    Ok(())
}

pub fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {}", path.display(), e)))?;
    let reader = BufReader::new(file);
    let mut ids = Vec::new();
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            let line = line?;
            if line.trim() != "dense_id,original_id" {
                return Err(ingest_err(path, 1, "expected header dense_id,original_id"));
            }
        }
        None => return Err(ingest_err(path, 1, "empty id map")),
    }
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim().splitn(2, ',');
        let dense: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ingest_err(path, i + 1, "bad dense id"))?;
        let original = fields
            .next()
            .ok_or_else(|| ingest_err(path, i + 1, "missing original id"))?;
        if dense != ids.len() {
            return Err(ingest_err(path, i + 1, "dense ids must be consecutive from 0"));
        }
        ids.push(original.to_string());
    }
    Ok(ids)
}

pub fn write_summary(path: &Path, s: &DatasetSummary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "n_users,n_items,n_ratings,density,avg_rating")?;
    writeln!(w, "{},{},{},{:.6},{:.6}", s.n_users, s.n_items, s.n_ratings, s.density, s.avg_rating)?;
    Ok(())
}

pub fn write_tag_table(tags_path: &Path, map_path: &Path, tags: &TagTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(tags_path)?);
    writeln!(w, "item_id,tag_id")?;
    for (item, ids) in tags.item_tags.iter().enumerate() {
        for id in ids {
            writeln!(w, "{},{}", item, id)?;
        }
    }
    let mut m = BufWriter::new(File::create(map_path)?);
    writeln!(m, "tag_id,tag")?;
    for (id, name) in tags.tag_names.iter().enumerate() {
        writeln!(m, "{},{}", id, name)?;
    }
    Ok(())
}

pub fn read_tag_table(tags_path: &Path, map_path: &Path, n_items: usize) -> Result<TagTable> {
    let tag_names = {
        let file = File::open(map_path)
            .map_err(|e| Error::Ingest(format!("cannot open {}: {}", map_path.display(), e)))?;
        let reader = BufReader::new(file);
        let mut names = Vec::new();
        for (i, line) in reader.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.trim().splitn(2, ',');
            let id: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ingest_err(map_path, i + 1, "bad tag id"))?;
            if id != names.len() {
                return Err(ingest_err(map_path, i + 1, "tag ids must be consecutive from 0"));
            }
            names.push(fields.next().unwrap_or("").to_string());
        }
        names
    };

    let file = File::open(tags_path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {}", tags_path.display(), e)))?;
    let reader = BufReader::new(file);
    let mut item_tags: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    for (i, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 2 {
            return Err(ingest_err(tags_path, i + 1, "expected 2 columns"));
        }
        let item: usize = fields[0]
            .parse()
            .map_err(|_| ingest_err(tags_path, i + 1, "bad item id"))?;
        let tag: usize = fields[1]
            .parse()
            .map_err(|_| ingest_err(tags_path, i + 1, "bad tag id"))?;
        if item >= n_items || tag >= tag_names.len() {
            return Err(ingest_err(tags_path, i + 1, "id out of range"));
        }
        item_tags[item].push(tag);
    }
    for tags in &mut item_tags {
        tags.sort_unstable();
        tags.dedup();
    }
    Ok(TagTable { n_items, n_tags: tag_names.len(), tag_names, item_tags })
}
