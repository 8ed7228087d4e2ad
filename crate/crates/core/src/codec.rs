//! Storage encoding, read/write query generation, answer decoding and the
//! single-symbol combined update.
//!
//! Position `p` (1-based, counted from the start of its region) of every
//! submodel is tied to the evaluation point `f_{g(p, y)}`, where `y` is the
//! larger of the two subpacketizations of the region. Database `n` stores
//!
//! ```text
//! S_n[p] = W[:, p] / (f_c - alpha_n) + sum_{j < floor(N/2)} alpha_n^j I_{p,j}
//! ```
//!
//! so any run of `y` consecutive positions carries pairwise distinct `f`s.
//! A reading subpacket of size `ell_r` is answered with one symbol that is a
//! rational function of `alpha_n`: one pole per position the user selected,
//! plus a polynomial of degree `floor(N/2)`. With `2 floor(N/2)` answers the
//! selected symbols come out of a Cauchy-Vandermonde solve. Writes work the
//! other way round: one symbol per subpacket carries the interpolating
//! polynomial of the selected updates, and the write query turns it into an
//! increment with the same shape as storage.
//!
//! Noise that must line up across databases (`I`, `z`, and the query masks
//! `Z~`, `Z^`) is drawn once per round and evaluated at each `alpha_n`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldElement, FieldError, Matrix, PrimeField};
use crate::harness::ReferenceModel;
use crate::planner::RegionPlan;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid evaluation points: {0}")]
    Points(String),
    #[error("invalid selection pattern: {0}")]
    Pattern(String),
    #[error("answers inconsistent in region {region}, subpacket {subpacket}")]
    Inconsistent { region: usize, subpacket: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Cyclic index of 1-based position `x` for period `y`, in `1..=y`.
pub fn g(x: usize, y: usize) -> usize {
    debug_assert!(x >= 1 && y >= 1);
    match x % y {
        0 => y,
        r => r,
    }
}

/// Database points `alpha_n` and per-position points `f_c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPoints {
    alphas: Vec<FieldElement>,
    fs: Vec<FieldElement>,
}

impl EvalPoints {
    pub fn new(field: &PrimeField, alphas: Vec<FieldElement>, fs: Vec<FieldElement>) -> Result<Self, CodecError> {
        let mut all: Vec<u64> = alphas.iter().chain(&fs).map(|v| v.0).collect();
        if all.iter().any(|&v| v >= field.modulus()) {
            return Err(CodecError::Points("point not reduced modulo q".into()));
        }
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(CodecError::Points("alphas and fs must be pairwise distinct".into()));
        }
        Ok(EvalPoints { alphas, fs })
    }

    /// `alpha_n = n` for `n = 1..=N` and `f_i = N + i` for `i = 1..=y_max`.
    pub fn standard(field: &PrimeField, n_dbs: usize, y_max: usize) -> Result<Self, CodecError> {
        if (n_dbs + y_max) as u64 >= field.modulus() {
            return Err(CodecError::Points(format!(
                "q = {} too small: need q > N + y_max = {}",
                field.modulus(),
                n_dbs + y_max
            )));
        }
        let alphas = (1..=n_dbs as u64).map(FieldElement).collect();
        let fs = (1..=y_max as u64).map(|i| FieldElement(n_dbs as u64 + i)).collect();
        EvalPoints::new(field, alphas, fs)
    }

    pub fn n_dbs(&self) -> usize {
        self.alphas.len()
    }

    pub fn y_max(&self) -> usize {
        self.fs.len()
    }

    /// `alpha` of 0-based database `n`.
    pub fn alpha(&self, n: usize) -> FieldElement {
        self.alphas[n]
    }

    /// `f_c` for 1-based cyclic index `c`.
    pub fn f(&self, c: usize) -> FieldElement {
        self.fs[c - 1]
    }

    pub fn alphas(&self) -> &[FieldElement] {
        &self.alphas
    }

    pub fn fs(&self) -> &[FieldElement] {
        &self.fs
    }

    fn check_region(&self, region: &RegionPlan) -> Result<(), CodecError> {
        if region.y > self.fs.len() {
            return Err(CodecError::Points(format!("region {} needs {} f points, have {}", region.id, region.y, self.fs.len())));
        }
        Ok(())
    }
}

/// One database's masked copy of all submodels, position-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StorageShard {
    pub db: usize,
    submodels: usize,
    rows: Vec<FieldElement>,
}

impl StorageShard {
    pub fn zeros(db: usize, submodels: usize, padded_length: usize) -> Self {
        StorageShard { db, submodels, rows: vec![FieldElement::ZERO; submodels * padded_length] }
    }

    pub fn from_rows(db: usize, submodels: usize, rows: Vec<FieldElement>) -> Result<Self, CodecError> {
        if submodels == 0 || rows.len() % submodels != 0 {
            return Err(CodecError::Protocol("shard data is not a whole number of rows".into()));
        }
        Ok(StorageShard { db, submodels, rows })
    }

    pub fn submodels(&self) -> usize {
        self.submodels
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.submodels
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, pos: usize) -> &[FieldElement] {
        &self.rows[pos * self.submodels..(pos + 1) * self.submodels]
    }

    pub fn row_mut(&mut self, pos: usize) -> &mut [FieldElement] {
        &mut self.rows[pos * self.submodels..(pos + 1) * self.submodels]
    }

    pub fn data(&self) -> &[FieldElement] {
        &self.rows
    }
}

/// Which positions of each subpacket are delivered, per query block.
/// Positions are 1-based within the subpacket.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPattern {
    pub read: Vec<Vec<usize>>,
    pub write: Vec<Vec<usize>>,
}

impl SelectionPattern {
    pub fn explicit(region: &RegionPlan, base: usize, read: Vec<Vec<usize>>, write: Vec<Vec<usize>>) -> Result<Self, CodecError> {
        let mut p = SelectionPattern { read, write };
        p.read.iter_mut().chain(p.write.iter_mut()).for_each(|s| s.sort_unstable());
        p.validate(region, base)?;
        Ok(p)
    }

    /// The first `base` positions of every subpacket.
    pub fn first_k(region: &RegionPlan, base: usize) -> Self {
        SelectionPattern {
            read: vec![(1..=base).collect(); region.gamma_r],
            write: vec![(1..=base).collect(); region.gamma_w],
        }
    }

    pub fn random_k<R: Rng + ?Sized>(region: &RegionPlan, base: usize, rng: &mut R) -> Self {
        let mut pick = |ell: usize| {
            let mut v: Vec<usize> = sample(rng, ell, base).into_iter().map(|i| i + 1).collect();
            v.sort_unstable();
            v
        };
        SelectionPattern {
            read: (0..region.gamma_r).map(|_| pick(region.ell_r)).collect(),
            write: (0..region.gamma_w).map(|_| pick(region.ell_w)).collect(),
        }
    }

    /// Replaces the write sets with the `base` positions of largest total
    /// magnitude per block. `magnitudes` covers the region's positions; a
    /// block's score at position `i` sums over every subpacket using it.
    pub fn with_top_k_write(mut self, region: &RegionPlan, base: usize, magnitudes: &[f64]) -> Result<Self, CodecError> {
        if magnitudes.len() != region.bit_length {
            return Err(CodecError::Pattern(format!(
                "{} magnitudes for a region of {} positions",
                magnitudes.len(),
                region.bit_length
            )));
        }
        let mut score = vec![vec![0f64; region.ell_w]; region.gamma_w];
        for (t, chunk) in magnitudes.chunks(region.ell_w).enumerate() {
            for (i, m) in chunk.iter().enumerate() {
                score[t % region.gamma_w][i] += m.abs();
            }
        }
        self.write = score
            .into_iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                let mut chosen: Vec<usize> = idx[..base].iter().map(|i| i + 1).collect();
                chosen.sort_unstable();
                chosen
            })
            .collect();
        Ok(self)
    }

    pub fn validate(&self, region: &RegionPlan, base: usize) -> Result<(), CodecError> {
        let check = |sets: &[Vec<usize>], gamma: usize, ell: usize, what: &str| {
            if sets.len() != gamma {
                return Err(CodecError::Pattern(format!("{what}: {} sets, expected {gamma}", sets.len())));
            }
            for set in sets {
                if set.len() != base {
                    return Err(CodecError::Pattern(format!("{what}: set of size {}, expected {base}", set.len())));
                }
                if set.iter().any(|&i| i == 0 || i > ell) || set.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(CodecError::Pattern(format!("{what}: set {set:?} not a sorted subset of 1..={ell}")));
                }
            }
            Ok(())
        };
        check(&self.read, region.gamma_r, region.ell_r, "read")?;
        check(&self.write, region.gamma_w, region.ell_w, "write")
    }

    pub fn reads(&self, block: usize, i: usize) -> bool {
        self.read[block].binary_search(&i).is_ok()
    }

    pub fn writes(&self, block: usize, i: usize) -> bool {
        self.write[block].binary_search(&i).is_ok()
    }
}

/// `gamma` blocks of `ell` rows, each row an M-vector. Shared shape of the
/// read query `Q_n` and the write query `Q~_n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryBlocks {
    pub region: usize,
    pub ell: usize,
    pub gamma: usize,
    pub submodels: usize,
    pub rows: Vec<FieldElement>,
}

impl QueryBlocks {
    fn zeros(region: usize, ell: usize, gamma: usize, submodels: usize) -> Self {
        QueryBlocks { region, ell, gamma, submodels, rows: vec![FieldElement::ZERO; gamma * ell * submodels] }
    }

    pub fn from_rows(region: usize, ell: usize, gamma: usize, submodels: usize, rows: Vec<FieldElement>) -> Result<Self, CodecError> {
        if rows.len() != gamma * ell * submodels {
            return Err(CodecError::Protocol(format!(
                "query carries {} symbols, expected {}x{}x{}",
                rows.len(),
                gamma,
                ell,
                submodels
            )));
        }
        Ok(QueryBlocks { region, ell, gamma, submodels, rows })
    }

    /// Row `i` (1-based) of block `s` (0-based).
    pub fn row(&self, s: usize, i: usize) -> &[FieldElement] {
        let start = (s * self.ell + i - 1) * self.submodels;
        &self.rows[start..start + self.submodels]
    }

    fn row_mut(&mut self, s: usize, i: usize) -> &mut [FieldElement] {
        let start = (s * self.ell + i - 1) * self.submodels;
        &mut self.rows[start..start + self.submodels]
    }

    pub fn block(&self, s: usize) -> &[FieldElement] {
        let w = self.ell * self.submodels;
        &self.rows[s * w..(s + 1) * w]
    }

    fn check(&self, region: &RegionPlan, ell: usize, gamma: usize, submodels: usize) -> Result<(), CodecError> {
        if self.region != region.id || self.ell != ell || self.gamma != gamma || self.submodels != submodels {
            return Err(CodecError::Protocol(format!(
                "query shape ({}, {}x{}x{}) does not match region {} ({}x{}x{})",
                self.region, self.gamma, self.ell, self.submodels, region.id, gamma, ell, submodels
            )));
        }
        Ok(())
    }
}

pub type ReadQuery = QueryBlocks;
pub type WriteQuery = QueryBlocks;

/// One symbol per subpacket of a region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolVector {
    pub region: usize,
    pub values: Vec<FieldElement>,
}

pub type ReadAnswer = SymbolVector;
pub type UpdateSymbols = SymbolVector;

/// Read-query masks `Z~`, shared by all databases for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadNoise {
    pub masks: Vec<FieldElement>,
}

impl ReadNoise {
    pub fn draw<R: Rng + ?Sized>(field: &PrimeField, region: &RegionPlan, submodels: usize, rng: &mut R) -> Self {
        ReadNoise { masks: field.random_vec(rng, region.gamma_r * region.ell_r * submodels) }
    }

    pub fn zero(region: &RegionPlan, submodels: usize) -> Self {
        ReadNoise { masks: vec![FieldElement::ZERO; region.gamma_r * region.ell_r * submodels] }
    }
}

/// Write-query masks `Z^` and per-subpacket update noise `z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteNoise {
    pub masks: Vec<FieldElement>,
    pub z: Vec<FieldElement>,
}

impl WriteNoise {
    pub fn draw<R: Rng + ?Sized>(field: &PrimeField, region: &RegionPlan, submodels: usize, rng: &mut R) -> Self {
        WriteNoise {
            masks: field.random_vec(rng, region.gamma_w * region.ell_w * submodels),
            z: field.random_vec(rng, region.write_subpackets()),
        }
    }

    pub fn zero(region: &RegionPlan, submodels: usize) -> Self {
        WriteNoise {
            masks: vec![FieldElement::ZERO; region.gamma_w * region.ell_w * submodels],
            z: vec![FieldElement::ZERO; region.write_subpackets()],
        }
    }
}

/// Number of noise coefficients masking each stored symbol.
pub fn storage_noise_terms(n_dbs: usize) -> usize {
    n_dbs / 2
}

/// Masked storage row for one position at database `n`.
/// `noise` holds `floor(N/2)` consecutive M-vectors `I_0, I_1, ...`.
pub fn encode_position(
    field: &PrimeField,
    column: &[FieldElement],
    c: usize,
    points: &EvalPoints,
    n: usize,
    noise: &[FieldElement],
) -> Result<Vec<FieldElement>, CodecError> {
    let m = column.len();
    let alpha = points.alpha(n);
    let scale = field.inv(field.sub(points.f(c), alpha))?;
    let mut row: Vec<FieldElement> = column.iter().map(|&w| field.mul(w, scale)).collect();
    let mut power = FieldElement::ONE;
    for coeffs in noise.chunks(m) {
        for (r, &v) in row.iter_mut().zip(coeffs) {
            field.mul_add_assign(r, power, v);
        }
        power = field.mul(power, alpha);
    }
    Ok(row)
}

/// Fills the region's rows of every shard, drawing one noise realization per
/// position and evaluating it at each database's point.
pub fn encode_storage<R: Rng + ?Sized>(
    field: &PrimeField,
    model: &ReferenceModel,
    points: &EvalPoints,
    region: &RegionPlan,
    rng: &mut R,
    shards: &mut [StorageShard],
) -> Result<(), CodecError> {
    points.check_region(region)?;
    let m = model.submodels();
    let terms = storage_noise_terms(points.n_dbs());
    if shards.len() != points.n_dbs() {
        return Err(CodecError::Protocol(format!("{} shards for {} databases", shards.len(), points.n_dbs())));
    }
    let scales = inverse_table(field, points, region.y)?;
    let mut noise = vec![FieldElement::ZERO; terms * m];
    for p in 0..region.bit_length {
        let pos = region.bit_offset + p;
        let c = g(p + 1, region.y);
        noise.iter_mut().for_each(|v| *v = field.random(rng));
        let column = model.column(pos);
        for (n, shard) in shards.iter_mut().enumerate() {
            let alpha = points.alpha(n);
            let scale = scales[n][c - 1];
            let row = shard.row_mut(pos);
            for (r, &w) in row.iter_mut().zip(&column) {
                *r = field.mul(w, scale);
            }
            let mut power = FieldElement::ONE;
            for coeffs in noise.chunks(m) {
                for (r, &v) in row.iter_mut().zip(coeffs) {
                    field.mul_add_assign(r, power, v);
                }
                power = field.mul(power, alpha);
            }
        }
    }
    Ok(())
}

// scales[n][c-1] = 1 / (f_c - alpha_n)
fn inverse_table(field: &PrimeField, points: &EvalPoints, y: usize) -> Result<Vec<Vec<FieldElement>>, CodecError> {
    (0..points.n_dbs())
        .map(|n| (1..=y).map(|c| Ok(field.inv(field.sub(points.f(c), points.alpha(n)))?)).collect())
        .collect()
}

fn unit(theta: usize, submodels: usize) -> Result<usize, CodecError> {
    if theta == 0 || theta > submodels {
        return Err(CodecError::Protocol(format!("submodel index {theta} outside 1..={submodels}")));
    }
    Ok(theta - 1)
}

/// Read query for database `n`: row `i` of block `s` is
/// `e(theta) [i in J_s] + (f_{g(s ell_r + i)} - alpha_n) Z~_{s,i}`.
pub fn gen_read_query(
    field: &PrimeField,
    theta: usize,
    submodels: usize,
    pattern: &SelectionPattern,
    points: &EvalPoints,
    region: &RegionPlan,
    n: usize,
    noise: &ReadNoise,
) -> Result<ReadQuery, CodecError> {
    let t = unit(theta, submodels)?;
    points.check_region(region)?;
    let mut q = QueryBlocks::zeros(region.id, region.ell_r, region.gamma_r, submodels);
    let alpha = points.alpha(n);
    for s in 0..region.gamma_r {
        for i in 1..=region.ell_r {
            let factor = field.sub(points.f(g(s * region.ell_r + i, region.y)), alpha);
            let base = (s * region.ell_r + i - 1) * submodels;
            let row = q.row_mut(s, i);
            for (m, r) in row.iter_mut().enumerate() {
                *r = field.mul(factor, noise.masks[base + m]);
            }
            if pattern.reads(s, i) {
                row[t] = field.add(row[t], FieldElement::ONE);
            }
        }
    }
    Ok(q)
}

/// One symbol per reading subpacket: the stored rows dotted with the query
/// block, blocks reused cyclically along the region.
pub fn answer_read(field: &PrimeField, shard: &StorageShard, query: &ReadQuery, region: &RegionPlan) -> Result<ReadAnswer, CodecError> {
    query.check(region, region.ell_r, region.gamma_r, shard.submodels())?;
    if shard.len() < region.end() {
        return Err(CodecError::Protocol("shard shorter than region".into()));
    }
    let ell = region.ell_r;
    let values = (0..region.read_subpackets())
        .map(|t| {
            let start = region.bit_offset + t * ell;
            let stored = &shard.data()[start * shard.submodels()..(start + ell) * shard.submodels()];
            field.dot(stored, query.block(t % region.gamma_r))
        })
        .collect();
    Ok(SymbolVector { region: region.id, values })
}

/// Result of decoding one region of the requested submodel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedRegion {
    pub values: Vec<FieldElement>,
    /// False where the position was not selected and reads as zero.
    pub delivered: Vec<bool>,
}

/// Recovers the selected positions of every reading subpacket from the N
/// answers. The first `2 floor(N/2)` answers are solved; for odd N the last
/// answer must agree with the fitted function.
pub fn decode_read(
    field: &PrimeField,
    answers: &[ReadAnswer],
    pattern: &SelectionPattern,
    points: &EvalPoints,
    region: &RegionPlan,
) -> Result<DecodedRegion, CodecError> {
    let n_dbs = points.n_dbs();
    if answers.len() != n_dbs {
        return Err(CodecError::Protocol(format!("{} answers from {} databases", answers.len(), n_dbs)));
    }
    let subpackets = region.read_subpackets();
    for a in answers {
        if a.region != region.id || a.values.len() != subpackets {
            return Err(CodecError::Protocol(format!(
                "answer for region {} has {} symbols, expected {} for region {}",
                a.region,
                a.values.len(),
                subpackets,
                region.id
            )));
        }
    }
    let h = storage_noise_terms(n_dbs);
    let used = 2 * h;
    let mut values = vec![FieldElement::ZERO; region.bit_length];
    let mut delivered = vec![false; region.bit_length];
    for s in 0..region.gamma_r {
        let selected = &pattern.read[s];
        let cs: Vec<usize> = selected.iter().map(|&i| g(s * region.ell_r + i, region.y)).collect();
        let coefficients = |n: usize| -> Result<Vec<FieldElement>, CodecError> {
            let alpha = points.alpha(n);
            let mut row = Vec::with_capacity(used);
            for &c in &cs {
                row.push(field.inv(field.sub(points.f(c), alpha))?);
            }
            let mut power = FieldElement::ONE;
            for _ in 0..=h {
                row.push(power);
                power = field.mul(power, alpha);
            }
            Ok(row)
        };
        let system = Matrix::from_rows((0..used).map(coefficients).collect::<Result<_, _>>()?)?;
        let inverse = field.inverse(&system)?;
        let check_row = (used < n_dbs).then(|| coefficients(used)).transpose()?;
        for t in (s..subpackets).step_by(region.gamma_r) {
            let rhs: Vec<FieldElement> = answers[..used].iter().map(|a| a.values[t]).collect();
            let x = field.mat_vec(&inverse, &rhs);
            if let Some(row) = &check_row {
                if field.dot(row, &x) != answers[used].values[t] {
                    return Err(CodecError::Inconsistent { region: region.id, subpacket: t });
                }
            }
            for (k, &i) in selected.iter().enumerate() {
                let p = t * region.ell_r + i - 1;
                values[p] = x[k];
                delivered[p] = true;
            }
        }
    }
    Ok(DecodedRegion { values, delivered })
}

/// Write query for database `n`: row `i` of block `s` is
/// `e(theta) [i in J_s] / (f_{g(s ell_w + i)} - alpha_n) + Z^_{s,i}`.
pub fn gen_write_query(
    field: &PrimeField,
    theta: usize,
    submodels: usize,
    pattern: &SelectionPattern,
    points: &EvalPoints,
    region: &RegionPlan,
    n: usize,
    noise: &WriteNoise,
) -> Result<WriteQuery, CodecError> {
    let t = unit(theta, submodels)?;
    points.check_region(region)?;
    let mut q = QueryBlocks::zeros(region.id, region.ell_w, region.gamma_w, submodels);
    q.rows.copy_from_slice(&noise.masks);
    let alpha = points.alpha(n);
    for s in 0..region.gamma_w {
        for &i in &pattern.write[s] {
            let scale = field.inv(field.sub(points.f(g(s * region.ell_w + i, region.y)), alpha))?;
            let row = q.row_mut(s, i);
            row[t] = field.add(row[t], scale);
        }
    }
    Ok(q)
}

/// Per-block coefficients of the combined update at database `n`:
/// `coef_i = prod_{j != i} (f_j - alpha_n) / prod_{j != i} (f_j - f_i)` for
/// each selected `i`, and the noise factor `prod_j (f_j - alpha_n)`.
fn update_coefficients(
    field: &PrimeField,
    selected: &[usize],
    s: usize,
    points: &EvalPoints,
    region: &RegionPlan,
    alpha: FieldElement,
) -> Result<(Vec<FieldElement>, FieldElement), CodecError> {
    let fs: Vec<FieldElement> = selected.iter().map(|&i| points.f(g(s * region.ell_w + i, region.y))).collect();
    let mut coefs = Vec::with_capacity(fs.len());
    for (a, &fa) in fs.iter().enumerate() {
        let mut num = FieldElement::ONE;
        let mut den = FieldElement::ONE;
        for (b, &fb) in fs.iter().enumerate() {
            if a != b {
                num = field.mul(num, field.sub(fb, alpha));
                den = field.mul(den, field.sub(fb, fa));
            }
        }
        coefs.push(field.div(num, den)?);
    }
    let noise_factor = fs.iter().fold(FieldElement::ONE, |acc, &f| field.mul(acc, field.sub(f, alpha)));
    Ok((coefs, noise_factor))
}

/// Single combined update symbol per writing subpacket at database `n`.
/// `deltas` is the update to the submodel over the region's positions; only
/// the selected positions are used.
pub fn encode_update(
    field: &PrimeField,
    deltas: &[FieldElement],
    pattern: &SelectionPattern,
    points: &EvalPoints,
    region: &RegionPlan,
    n: usize,
    noise: &WriteNoise,
) -> Result<UpdateSymbols, CodecError> {
    if deltas.len() != region.bit_length {
        return Err(CodecError::Protocol(format!("{} update values for region of {}", deltas.len(), region.bit_length)));
    }
    if noise.z.len() != region.write_subpackets() {
        return Err(CodecError::Protocol("write noise does not match region".into()));
    }
    let alpha = points.alpha(n);
    let blocks = (0..region.gamma_w)
        .map(|s| update_coefficients(field, &pattern.write[s], s, points, region, alpha))
        .collect::<Result<Vec<_>, _>>()?;
    let values = (0..region.write_subpackets())
        .map(|t| {
            let s = t % region.gamma_w;
            let (coefs, noise_factor) = &blocks[s];
            let mut u = field.mul(*noise_factor, noise.z[t]);
            for (&i, &c) in pattern.write[s].iter().zip(coefs) {
                field.mul_add_assign(&mut u, c, deltas[t * region.ell_w + i - 1]);
            }
            u
        })
        .collect();
    Ok(SymbolVector { region: region.id, values })
}

/// Adds `U_n(t) * Q~_n(s)` to every row of every writing subpacket.
pub fn apply_update(
    field: &PrimeField,
    shard: &mut StorageShard,
    query: &WriteQuery,
    update: &UpdateSymbols,
    region: &RegionPlan,
) -> Result<(), CodecError> {
    query.check(region, region.ell_w, region.gamma_w, shard.submodels())?;
    if update.region != region.id || update.values.len() != region.write_subpackets() {
        return Err(CodecError::Protocol(format!(
            "{} update symbols for region {}, expected {}",
            update.values.len(),
            region.id,
            region.write_subpackets()
        )));
    }
    if shard.len() < region.end() {
        return Err(CodecError::Protocol("shard shorter than region".into()));
    }
    for (t, &u) in update.values.iter().enumerate() {
        let s = t % region.gamma_w;
        for i in 1..=region.ell_w {
            let pos = region.bit_offset + t * region.ell_w + i - 1;
            let q_row = query.row(s, i);
            for (r, &qv) in shard.row_mut(pos).iter_mut().zip(q_row) {
                field.mul_add_assign(r, u, qv);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{god_decode, ReferenceModel};
    use crate::planner::{build_plan, Budgets, Layout, Rational};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fe(v: u64) -> FieldElement {
        FieldElement(v)
    }

    fn f13() -> PrimeField {
        PrimeField::new(13).unwrap()
    }

    // N = 4, f_1 = 1, alpha_1 = 2: the hand-computed chain
    fn tiny_points() -> EvalPoints {
        EvalPoints::new(&f13(), vec![fe(2), fe(3), fe(4), fe(5)], vec![fe(1)]).unwrap()
    }

    fn tiny_region() -> RegionPlan {
        RegionPlan::new(0, 0, 1, 1, 1)
    }

    #[test]
    fn cyclic_index() {
        assert_eq!(g(8, 8), 8);
        assert_eq!(g(3, 8), 3);
        assert_eq!(g(9, 8), 1);
        assert_eq!(g(16, 8), 8);
    }

    #[test]
    fn points_validation() {
        let f = f13();
        assert!(EvalPoints::new(&f, vec![fe(1), fe(2)], vec![fe(2)]).is_err());
        assert!(EvalPoints::new(&f, vec![fe(1), fe(1)], vec![fe(3)]).is_err());
        assert!(EvalPoints::new(&f, vec![fe(1)], vec![fe(13)]).is_err());
        assert!(EvalPoints::standard(&f, 6, 7).is_err());
        let p = EvalPoints::standard(&f, 6, 6).unwrap();
        assert_eq!(p.alpha(0), fe(1));
        assert_eq!(p.f(1), fe(7));
    }

    #[test]
    fn zero_noise_storage_example() {
        let f = f13();
        let row = encode_position(&f, &[fe(3), fe(5)], 1, &tiny_points(), 0, &[FieldElement::ZERO; 4]).unwrap();
        assert_eq!(row, vec![fe(10), fe(8)]);
        let zero = encode_position(&f, &[fe(0), fe(0)], 1, &tiny_points(), 0, &[FieldElement::ZERO; 4]).unwrap();
        assert_eq!(zero, vec![fe(0), fe(0)]);
    }

    #[test]
    fn zero_noise_read_chain() {
        let f = f13();
        let points = tiny_points();
        let region = tiny_region();
        let pattern = SelectionPattern::explicit(&region, 1, vec![vec![1]], vec![vec![1]]).unwrap();
        let noise = ReadNoise::zero(&region, 2);
        let q = gen_read_query(&f, 1, 2, &pattern, &points, &region, 0, &noise).unwrap();
        assert_eq!(q.rows, vec![fe(1), fe(0)]);

        let mut answers = Vec::new();
        for n in 0..4 {
            let row = encode_position(&f, &[fe(3), fe(5)], 1, &points, n, &[FieldElement::ZERO; 4]).unwrap();
            let shard = StorageShard::from_rows(n, 2, row).unwrap();
            let q = gen_read_query(&f, 1, 2, &pattern, &points, &region, n, &noise).unwrap();
            answers.push(answer_read(&f, &shard, &q, &region).unwrap());
        }
        assert_eq!(answers[0].values, vec![fe(10)]);
        let decoded = decode_read(&f, &answers, &pattern, &points, &region).unwrap();
        assert_eq!(decoded.values, vec![fe(3)]);
        assert_eq!(decoded.delivered, vec![true]);
    }

    #[test]
    fn zero_query_answers_zero() {
        let f = f13();
        let region = tiny_region();
        let shard = StorageShard::from_rows(0, 2, vec![fe(4), fe(9)]).unwrap();
        let q = QueryBlocks::from_rows(0, 1, 1, 2, vec![fe(0), fe(0)]).unwrap();
        assert_eq!(answer_read(&f, &shard, &q, &region).unwrap().values, vec![fe(0)]);
        let bad = QueryBlocks::from_rows(0, 1, 1, 1, vec![fe(0)]).unwrap();
        assert!(matches!(answer_read(&f, &shard, &bad, &region), Err(CodecError::Protocol(_))));
    }

    #[test]
    fn zero_noise_write_chain() {
        let f = f13();
        let points = tiny_points();
        let region = tiny_region();
        let pattern = SelectionPattern::first_k(&region, 1);
        let noise = WriteNoise::zero(&region, 2);
        let wq = gen_write_query(&f, 1, 2, &pattern, &points, &region, 0, &noise).unwrap();
        assert_eq!(wq.rows, vec![fe(12), fe(0)]);
        let u = encode_update(&f, &[fe(2)], &pattern, &points, &region, 0, &noise).unwrap();
        assert_eq!(u.values, vec![fe(2)]);
        let mut shard = StorageShard::from_rows(0, 2, vec![fe(10), fe(8)]).unwrap();
        apply_update(&f, &mut shard, &wq, &u, &region).unwrap();
        assert_eq!(shard.row(0), &[fe(8), fe(8)]);
        let expected = encode_position(&f, &[fe(5), fe(5)], 1, &points, 0, &[FieldElement::ZERO; 4]).unwrap();
        assert_eq!(shard.row(0), expected.as_slice());

        let zero_u = SymbolVector { region: 0, values: vec![fe(0)] };
        apply_update(&f, &mut shard, &wq, &zero_u, &region).unwrap();
        assert_eq!(shard.row(0), &[fe(8), fe(8)]);
    }

    #[test]
    fn update_polynomial_interpolates_deltas() {
        // N = 8: three selected positions per writing subpacket. Evaluating
        // the symbol's polynomial at alpha = f_i kills the noise term and
        // leaves delta_i.
        let f = PrimeField::new(101).unwrap();
        let region = RegionPlan::new(0, 0, 15, 3, 5);
        let points = EvalPoints::standard(&f, 8, 5).unwrap();
        let pattern = SelectionPattern::explicit(&region, 3, vec![vec![1, 2, 3]; 5], vec![vec![1, 3, 4]]).unwrap();
        let deltas: Vec<FieldElement> = [7u64, 0, 55, 91, 3].iter().map(|&v| fe(v)).collect();
        for &i in &pattern.write[0] {
            let fi = points.f(g(i, region.y));
            let (coefs, noise_factor) = update_coefficients(&f, &pattern.write[0], 0, &points, &region, fi).unwrap();
            assert_eq!(noise_factor, FieldElement::ZERO);
            let mut u = FieldElement::ZERO;
            for (&j, &c) in pattern.write[0].iter().zip(&coefs) {
                f.mul_add_assign(&mut u, c, deltas[j - 1]);
            }
            assert_eq!(u, deltas[i - 1]);
        }
    }

    #[test]
    fn single_selection_symbol_is_delta() {
        let f = f13();
        let points = tiny_points();
        let region = RegionPlan::new(0, 0, 2, 1, 2);
        let pattern = SelectionPattern::explicit(&region, 1, vec![vec![1], vec![1]], vec![vec![2]]).unwrap();
        let noise = WriteNoise::zero(&region, 2);
        let points = EvalPoints::new(&f, points.alphas().to_vec(), vec![fe(1), fe(9)]).unwrap();
        let u = encode_update(&f, &[fe(4), fe(6)], &pattern, &points, &region, 2, &noise).unwrap();
        assert_eq!(u.values, vec![fe(6)]);
    }

    #[test]
    fn update_symbol_uniform_over_z() {
        let f = f13();
        let points = tiny_points();
        let region = tiny_region();
        let pattern = SelectionPattern::first_k(&region, 1);
        for delta in [0u64, 5] {
            let mut seen = [0u32; 13];
            for z in 0..13 {
                let noise = WriteNoise { masks: vec![FieldElement::ZERO; 2], z: vec![fe(z)] };
                let u = encode_update(&f, &[fe(delta)], &pattern, &points, &region, 1, &noise).unwrap();
                seen[u.values[0].0 as usize] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn read_row_uniform_over_masks() {
        let f = f13();
        let points = tiny_points();
        let region = tiny_region();
        let pattern = SelectionPattern::first_k(&region, 1);
        for theta in [1, 2] {
            let mut seen = std::collections::HashSet::new();
            for a in 0..13 {
                for b in 0..13 {
                    let noise = ReadNoise { masks: vec![fe(a), fe(b)] };
                    let q = gen_read_query(&f, theta, 2, &pattern, &points, &region, 0, &noise).unwrap();
                    seen.insert(q.rows.clone());
                }
            }
            assert_eq!(seen.len(), 169);
        }
    }

    #[test]
    fn figure_geometry_four_read_blocks() {
        let region = RegionPlan::new(0, 0, 48, 6, 8);
        assert_eq!(region.gamma_r, 4);
        let pattern = SelectionPattern::first_k(&region, 2);
        assert_eq!(pattern.read.len(), 4);
        let f = PrimeField::new(101).unwrap();
        let points = EvalPoints::standard(&f, 6, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = ReadNoise::draw(&f, &region, 2, &mut rng);
        let q = gen_read_query(&f, 1, 2, &pattern, &points, &region, 0, &noise).unwrap();
        assert_eq!(q.rows.len(), 4 * 6 * 2);
        // each block covers distinct cyclic indices, e.g. block 1 is 7,8,1,2,3,4
        let block1: Vec<usize> = (1..=6).map(|i| g(6 + i, 8)).collect();
        assert_eq!(block1, vec![7, 8, 1, 2, 3, 4]);
    }

    #[test]
    fn pattern_validation_and_top_k() {
        let region = RegionPlan::new(0, 0, 12, 6, 4);
        assert_eq!(region.gamma_w, 3);
        assert!(SelectionPattern::explicit(&region, 2, vec![vec![1, 2]], vec![vec![1, 2]; 3]).is_ok());
        assert!(SelectionPattern::explicit(&region, 2, vec![vec![1, 7]], vec![vec![1, 2]; 3]).is_err());
        assert!(SelectionPattern::explicit(&region, 2, vec![vec![1, 1]], vec![vec![1, 2]; 3]).is_err());
        assert!(SelectionPattern::explicit(&region, 2, vec![vec![1, 2]], vec![vec![1, 2]; 2]).is_err());
        let mags = [0.0, 5.0, -9.0, 0.1, 1.0, 1.0, 2.0, 0.0, 0.0, 0.0, 3.0, 4.0];
        let p = SelectionPattern::first_k(&region, 2).with_top_k_write(&region, 2, &mags).unwrap();
        assert_eq!(p.write, vec![vec![2, 3], vec![1, 3], vec![3, 4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        SelectionPattern::random_k(&region, 2, &mut rng).validate(&region, 2).unwrap();
    }

    fn random_instance(n: usize, q: u64, m: usize, seed: u64) -> (PrimeField, Layout, EvalPoints, ReferenceModel, Vec<StorageShard>, ChaCha8Rng) {
        let f = PrimeField::new(q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Rational::new(rng.gen_range(0..5), 10);
        let plan = build_plan(n, m, rng.gen_range(1..40), &Budgets::new(d, Rational::new(1, 3)).unwrap()).unwrap();
        let layout = plan.layout;
        let points = EvalPoints::standard(&f, n, layout.y_max()).unwrap();
        let model = ReferenceModel::random(&f, m, layout.length, layout.padded_length, &mut rng);
        let mut shards: Vec<_> = (0..n).map(|i| StorageShard::zeros(i, m, layout.padded_length)).collect();
        for r in &layout.regions {
            encode_storage(&f, &model, &points, r, &mut rng, &mut shards).unwrap();
        }
        (f, layout, points, model, shards, rng)
    }

    #[test]
    fn read_round_trip_small_instances() {
        for seed in 0..200u64 {
            let n = [4, 5, 6, 8][seed as usize % 4];
            let q = if seed % 2 == 0 { 13 } else { 101 };
            let m = 2 + (seed as usize % 2);
            let (f, layout, points, model, shards, mut rng) = random_instance(n, q, m, seed);
            assert_eq!(god_decode(&f, &shards, &points, &layout).unwrap(), model);
            let theta = rng.gen_range(1..=m);
            for region in &layout.regions {
                let pattern = SelectionPattern::random_k(region, layout.base(), &mut rng);
                let noise = ReadNoise::draw(&f, region, m, &mut rng);
                let answers: Vec<_> = shards
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let q = gen_read_query(&f, theta, m, &pattern, &points, region, i, &noise).unwrap();
                        answer_read(&f, s, &q, region).unwrap()
                    })
                    .collect();
                let dec = decode_read(&f, &answers, &pattern, &points, region).unwrap();
                for p in 0..region.bit_length {
                    let expect = if dec.delivered[p] { model.get(theta - 1, region.bit_offset + p) } else { FieldElement::ZERO };
                    assert_eq!(dec.values[p], expect, "seed {seed} region {} pos {p}", region.id);
                }
                let count = dec.delivered.iter().filter(|&&d| d).count();
                assert_eq!(count, region.read_subpackets() * layout.base());
            }
        }
    }

    #[test]
    fn odd_n_detects_tampered_answer() {
        let (f, layout, points, _, shards, mut rng) = random_instance(5, 101, 2, 77);
        let region = &layout.regions[0];
        let pattern = SelectionPattern::first_k(region, layout.base());
        let noise = ReadNoise::draw(&f, region, 2, &mut rng);
        let mut answers: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(i, s)| answer_read(&f, s, &gen_read_query(&f, 1, 2, &pattern, &points, region, i, &noise).unwrap(), region).unwrap())
            .collect();
        answers[4].values[0] = f.add(answers[4].values[0], FieldElement::ONE);
        assert!(matches!(
            decode_read(&f, &answers, &pattern, &points, region),
            Err(CodecError::Inconsistent { subpacket: 0, .. })
        ));
    }

    #[test]
    fn write_changes_only_selected_positions() {
        for seed in 0..100u64 {
            let n = [4, 5, 6][seed as usize % 3];
            let (f, layout, points, model, mut shards, mut rng) = random_instance(n, 101, 2, 1000 + seed);
            let mut expected = model.clone();
            for region in &layout.regions {
                let pattern = SelectionPattern::random_k(region, layout.base(), &mut rng);
                let deltas = f.random_vec(&mut rng, region.bit_length);
                let noise = WriteNoise::draw(&f, region, 2, &mut rng);
                for (i, shard) in shards.iter_mut().enumerate() {
                    let wq = gen_write_query(&f, 2, 2, &pattern, &points, region, i, &noise).unwrap();
                    let u = encode_update(&f, &deltas, &pattern, &points, region, i, &noise).unwrap();
                    apply_update(&f, shard, &wq, &u, region).unwrap();
                }
                for t in 0..region.write_subpackets() {
                    for &i in &pattern.write[t % region.gamma_w] {
                        let p = t * region.ell_w + i - 1;
                        let pos = region.bit_offset + p;
                        expected.set(1, pos, f.add(expected.get(1, pos), deltas[p]));
                    }
                }
            }
            assert_eq!(god_decode(&f, &shards, &points, &layout).unwrap(), expected, "seed {seed}");
        }
    }
}
