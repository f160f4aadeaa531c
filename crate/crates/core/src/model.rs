//! Embedding model: user/item matrices inside the unit ball, the stabilized
//! Euclidean distance, checkpoint serialization, and hyperparameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::scalar::Real;

/// Additive stabilizer under the square root of the distance, keeping
/// gradients finite when two points coincide. d(a, a) == 1e-6.
pub const DIST_EPS: f64 = 1e-12;

/// Tolerance on the unit-ball row-norm invariant.
pub const NORM_TOL: f64 = 1e-9;

const CHECKPOINT_MAGIC: &[u8; 6] = b"TCCML1";
const SECTION_TAGPROJ: &[u8; 6] = b"FEATPJ";
const SECTION_ADAM: &[u8; 6] = b"ADAMV1";

/// Dense row-major matrix. Rows are embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    data: Vec<S>,
    rows: usize,
    cols: usize,
}

impl<S: Real> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Matrix<S> {
        Matrix { data: vec![S::zero(); rows * cols], rows, cols }
    }

    pub fn from_vec(data: Vec<S>, rows: usize, cols: usize) -> Matrix<S> {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { data, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }
}

/// Which parameter matrix a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamBlock {
    User,
    Item,
    /// Rows of the tag projection: one learned d-vector per tag, so an
    /// item's projected feature vector is the sum of its tags' rows.
    TagProj,
}

/// User and item embeddings, plus the optional tag projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel<S> {
    pub users: Matrix<S>,
    pub items: Matrix<S>,
    pub dim: usize,
    pub tag_proj: Option<Matrix<S>>,
}

impl<S: Real> EmbeddingModel<S> {
    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn block(&self, block: ParamBlock) -> &Matrix<S> {
        match block {
            ParamBlock::User => &self.users,
            ParamBlock::Item => &self.items,
            ParamBlock::TagProj => self.tag_proj.as_ref().expect("model has no tag projection"),
        }
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut Matrix<S> {
        match block {
            ParamBlock::User => &mut self.users,
            ParamBlock::Item => &mut self.items,
            ParamBlock::TagProj => self.tag_proj.as_mut().expect("model has no tag projection"),
        }
    }

    /// Largest row norm across all parameter blocks. The model invariant is
    /// that this never exceeds 1 + NORM_TOL after a projection step.
    pub fn max_row_norm(&self) -> f64 {
        let mut worst = 0.0f64;
        let mut scan = |m: &Matrix<S>| {
            for r in 0..m.rows() {
                let n = norm(m.row(r)).as_f64();
                if n > worst {
                    worst = n;
                }
            }
        };
        scan(&self.users);
        scan(&self.items);
        if let Some(w) = &self.tag_proj {
            scan(w);
        }
        worst
    }
}

/// Hyperparameters of the objective and its sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams<S> {
    pub dim: usize,
    /// hinge margin m
    pub margin: S,
    /// push radius; pairs further apart than this contribute the floor value
    pub alpha: S,
    /// weight of the user-negative push term
    pub lambda1: S,
    /// weight of the dissimilar-pair push term
    pub lambda2: S,
    /// weight of the tag-projection term
    pub lambda_f: S,
    /// triplets (and push terms) per minibatch, N
    pub batch_size: usize,
    /// unobserved candidates drawn per positive pair, U
    pub candidates: usize,
    pub learning_rate: S,
    pub seed: u64,
    /// WARP weighting on triplets; uniform w = 1 when false
    pub warp: bool,
}

impl<S: Real> Default for HyperParams<S> {
    fn default() -> HyperParams<S> {
        HyperParams {
            dim: 70,
            margin: S::from_f64_lossy(0.5),
            alpha: S::from_f64_lossy(2.0),
            lambda1: S::from_f64_lossy(0.1),
            lambda2: S::from_f64_lossy(0.1),
            lambda_f: S::zero(),
            batch_size: 256,
            candidates: 10,
            learning_rate: S::from_f64_lossy(0.001),
            seed: 42,
            warp: true,
        }
    }
}

impl<S: Real> HyperParams<S> {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if !(self.margin > S::zero()) {
            return Err(Error::Config("margin must be > 0".into()));
        }
        if self.alpha < S::one() {
            return Err(Error::Config("alpha must be >= 1".into()));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_f", self.lambda_f),
        ] {
            if v < S::zero() {
                return Err(Error::Config(format!("{} must be >= 0", name)));
            }
        }
        if !(self.learning_rate > S::zero()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn norm<S: Real>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

/// Stabilized Euclidean distance: sqrt(sum of squared differences + 1e-12).
///
/// Panics on dimension mismatch.
#[inline]
pub fn distance<S: Real>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "distance on mismatched dimensions");
    let mut acc = S::from_f64_lossy(DIST_EPS);
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc.sqrt()
}

/// Project a vector into the closed unit ball. Vectors already inside are
/// returned bit-for-bit unchanged. Panics on non-finite input.
pub fn project_unit_ball<S: Real>(v: &mut [S]) {
    let sq: S = v.iter().map(|&x| x * x).sum();
    assert!(sq.is_finite(), "projecting non-finite vector");
    if sq > S::one() {
        let inv = S::one() / sq.sqrt();
        for x in v.iter_mut() {
            *x *= inv;
        }
    }
}

fn gaussian_rows<S: Real>(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix<S> {
    let std = 1.0 / (dim as f64).sqrt();
    let normal = StandardNormal;
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        let row = m.row_mut(r);
        for x in row.iter_mut() {
            let g: f64 = normal.sample(rng);
            *x = S::from_f64_lossy(g * std);
        }
        project_unit_ball(row);
    }
    m
}

/// Fresh model: i.i.d. Gaussian entries with std 1/sqrt(d), every row then
/// projected into the unit ball. Deterministic for a given seed.
pub fn init_model<S: Real>(
    hp: &HyperParams<S>,
    n_users: usize,
    n_items: usize,
) -> Result<EmbeddingModel<S>> {
    init_model_with_tags(hp, n_users, n_items, None)
}

/// As [`init_model`], additionally allocating a tag projection with
/// `n_tags` rows drawn from the same stream.
pub fn init_model_with_tags<S: Real>(
    hp: &HyperParams<S>,
    n_users: usize,
    n_items: usize,
    n_tags: Option<usize>,
) -> Result<EmbeddingModel<S>> {
    if hp.dim == 0 {
        return Err(Error::Config("dim must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let users = gaussian_rows(&mut rng, n_users, hp.dim);
    let items = gaussian_rows(&mut rng, n_items, hp.dim);
    let tag_proj = n_tags.map(|n| gaussian_rows(&mut rng, n, hp.dim));
    Ok(EmbeddingModel { users, items, dim: hp.dim, tag_proj })
}

// --- checkpoint format ---
//
// magic "TCCML1", then dim, n_users, n_items as little-endian u64, then the
// user and item matrices row-major as little-endian f32. Optional trailing
// sections, each introduced by a 6-byte tag:
//   "FEATPJ": n_tags u64, tag projection matrix f32
//   "ADAMV1": step u64, then first/second moments for users, items, and
//             (if FEATPJ was present) the tag projection.

fn write_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_matrix<S: Real, W: Write>(w: &mut W, m: &Matrix<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(m.as_slice().len() * 4);
    for &x in m.as_slice() {
        let v: f32 = num_traits::cast(x).unwrap_or(f32::NAN);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {}", what)))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_matrix<S: Real, R: Read>(r: &mut R, rows: usize, cols: usize, what: &str) -> Result<Matrix<S>> {
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {}", what)))?;
    let data: Vec<S> = buf
        .chunks_exact(4)
        .map(|c| S::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(Matrix::from_vec(data, rows, cols))
}

/// Write the model (and optionally optimizer state) to `path`.
pub fn save_checkpoint<S: Real>(
    model: &EmbeddingModel<S>,
    optimizer: Option<&AdamState<S>>,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u64(&mut w, model.dim as u64)?;
    write_u64(&mut w, model.n_users() as u64)?;
    write_u64(&mut w, model.n_items() as u64)?;
    write_matrix(&mut w, &model.users)?;
    write_matrix(&mut w, &model.items)?;
    if let Some(tags) = &model.tag_proj {
        w.write_all(SECTION_TAGPROJ)?;
        write_u64(&mut w, tags.rows() as u64)?;
        write_matrix(&mut w, tags)?;
    }
    if let Some(opt) = optimizer {
        w.write_all(SECTION_ADAM)?;
        write_u64(&mut w, opt.step())?;
        write_matrix(&mut w, opt.moments(ParamBlock::User).0)?;
        write_matrix(&mut w, opt.moments(ParamBlock::User).1)?;
        write_matrix(&mut w, opt.moments(ParamBlock::Item).0)?;
        write_matrix(&mut w, opt.moments(ParamBlock::Item).1)?;
        if model.tag_proj.is_some() {
            write_matrix(&mut w, opt.moments(ParamBlock::TagProj).0)?;
            write_matrix(&mut w, opt.moments(ParamBlock::TagProj).1)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<S: Real>(path: &Path) -> Result<(EmbeddingModel<S>, Option<AdamState<S>>)> {
    let file = File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {}", path.display(), e)))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    let dim = read_u64(&mut r, "dim")? as usize;
    let n_users = read_u64(&mut r, "n_users")? as usize;
    let n_items = read_u64(&mut r, "n_items")? as usize;
    if dim == 0 {
        return Err(Error::Checkpoint("dim must be >= 1".into()));
    }
    let users = read_matrix::<S, _>(&mut r, n_users, dim, "user matrix")?;
    let items = read_matrix::<S, _>(&mut r, n_items, dim, "item matrix")?;

    let mut tag_proj = None;
    let mut adam = None;
    loop {
        let mut tag = [0u8; 6];
        match r.read_exact(&mut tag) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        if &tag == SECTION_TAGPROJ {
            let n_tags = read_u64(&mut r, "n_tags")? as usize;
            tag_proj = Some(read_matrix::<S, _>(&mut r, n_tags, dim, "tag projection")?);
        } else if &tag == SECTION_ADAM {
            let step = read_u64(&mut r, "optimizer step")?;
            let mu = read_matrix::<S, _>(&mut r, n_users, dim, "user first moment")?;
            let vu = read_matrix::<S, _>(&mut r, n_users, dim, "user second moment")?;
            let mi = read_matrix::<S, _>(&mut r, n_items, dim, "item first moment")?;
            let vi = read_matrix::<S, _>(&mut r, n_items, dim, "item second moment")?;
            let tags = match &tag_proj {
                Some(t) => {
                    let mt = read_matrix::<S, _>(&mut r, t.rows(), dim, "tag first moment")?;
                    let vt = read_matrix::<S, _>(&mut r, t.rows(), dim, "tag second moment")?;
                    Some((mt, vt))
                }
                None => None,
            };
            adam = Some(AdamState::from_parts(step, mu, vu, mi, vi, tags));
        } else {
            return Err(Error::Checkpoint(format!(
                "unknown section tag {:?}",
                String::from_utf8_lossy(&tag)
            )));
        }
    }

    let model = EmbeddingModel { users, items, dim, tag_proj };
    Ok((model, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn distance_known_values() {
        // unit square diagonal
        assert_relative_eq!(distance(&[0.0f64, 0.0], &[1.0, 1.0]), 2.0f64.sqrt(), epsilon = 1e-9);
        // 3-4-5 triangle
        assert_relative_eq!(distance(&[0.0f64, 0.0], &[3.0, 4.0]), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn distance_of_identical_points_is_stabilized() {
        let d = distance(&[0.3f64, -0.2, 0.1], &[0.3, -0.2, 0.1]);
        assert_relative_eq!(d, 1e-6, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "mismatched dimensions")]
    fn distance_rejects_dimension_mismatch() {
        let _ = distance(&[0.0f64], &[0.0, 1.0]);
    }

    #[test]
    fn projection_leaves_interior_points_untouched() {
        let original = [0.5f64, 0.5, 0.1];
        let mut v = original;
        project_unit_ball(&mut v);
        assert_eq!(v, original, "interior vector must be bit-identical");
    }

    #[test]
    fn projection_scales_exterior_to_unit_norm() {
        let mut v = [3.0f64, 4.0];
        project_unit_ball(&mut v);
        assert_relative_eq!(norm(&v), 1.0, epsilon = 1e-12);
        assert_relative_eq!(v[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(v[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn projection_rejects_non_finite() {
        let mut v = [f64::NAN, 0.0];
        project_unit_ball(&mut v);
    }

    #[test]
    fn init_rejects_zero_dim() {
        let hp = HyperParams::<f64> { dim: 0, ..Default::default() };
        assert!(init_model(&hp, 3, 3).is_err());
    }

    #[test]
    fn init_is_deterministic_and_inside_ball() {
        let hp = HyperParams::<f64> { dim: 16, seed: 9, ..Default::default() };
        let a = init_model(&hp, 20, 30).unwrap();
        let b = init_model(&hp, 20, 30).unwrap();
        assert_eq!(a, b);
        assert!(a.max_row_norm() <= 1.0 + NORM_TOL);

        let hp2 = HyperParams::<f64> { seed: 10, ..hp };
        let c = init_model(&hp2, 20, 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_spread_matches_requested_std() {
        // std 1/sqrt(d) per entry; with d=4 most rows need no projection and
        // the empirical std should land near 0.5.
        let hp = HyperParams::<f64> { dim: 4, seed: 1, ..Default::default() };
        let m = init_model(&hp, 500, 1).unwrap();
        let entries: Vec<f64> = (0..500).flat_map(|r| m.users.row(r).to_vec()).collect();
        let mean: f64 = entries.iter().sum::<f64>() / entries.len() as f64;
        let var: f64 =
            entries.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / entries.len() as f64;
        // projection clips the tail a little, so allow a loose band
        assert!((0.35..0.55).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn checkpoint_roundtrips_f32_bitwise() {
        let hp = HyperParams::<f32> { dim: 5, seed: 3, ..Default::default() };
        let model = init_model_with_tags(&hp, 4, 6, Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, None, &path).unwrap();
        let (back, opt) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, model);
        assert!(opt.is_none());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"NOTCKPTxxxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint::<f64>(&bad).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        let hp = HyperParams::<f32> { dim: 5, seed: 3, ..Default::default() };
        let model = init_model(&hp, 4, 6).unwrap();
        let full = dir.path().join("full.ckpt");
        save_checkpoint(&model, None, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_checkpoint::<f64>(&cut).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn hyperparams_validation_bounds() {
        let ok = HyperParams::<f64>::default();
        assert!(ok.validate().is_ok());
        assert!(HyperParams::<f64> { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(HyperParams::<f64> { alpha: 0.5, ..Default::default() }.validate().is_err());
        assert!(HyperParams::<f64> { lambda1: -0.1, ..Default::default() }.validate().is_err());
        assert!(HyperParams::<f64> { dim: 0, ..Default::default() }.validate().is_err());
    }
}
