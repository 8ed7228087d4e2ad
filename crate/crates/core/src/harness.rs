//! Verification machinery: plaintext reference model, god-view decoding of
//! all shards, distortion and cost meters, the update prior, and privacy
//! audits of what a single database observes.

use std::collections::HashMap;

use num_traits::Zero;
use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::codec::{
    encode_position, encode_update, g, gen_read_query, gen_write_query, storage_noise_terms, CodecError, EvalPoints,
    ReadNoise, SelectionPattern, StorageShard, WriteNoise,
};
use crate::field::{FieldElement, FieldError, Matrix, PrimeField};
use crate::planner::{rational_serde, Budgets, Layout, Rational, RegionPlan};

/// Largest state space an enumeration audit will walk.
pub const ENUMERATION_GUARD: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("shards inconsistent at position {position}, submodel {submodel}")]
    Corruption { position: usize, submodel: usize },
    #[error("enumeration of {states} states exceeds the guard of {guard}; use sampling mode")]
    GuardExceeded { states: u128, guard: u64 },
    #[error("invalid audit input: {0}")]
    Input(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Plaintext `M x padded_length` model; positions past `length` are zero
/// padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceModel {
    submodels: usize,
    length: usize,
    padded_length: usize,
    data: Vec<FieldElement>,
}

impl ReferenceModel {
    pub fn zeros(submodels: usize, length: usize, padded_length: usize) -> Self {
        assert!(padded_length >= length);
        ReferenceModel { submodels, length, padded_length, data: vec![FieldElement::ZERO; submodels * padded_length] }
    }

    pub fn for_layout(layout: &Layout) -> Self {
        ReferenceModel::zeros(layout.submodels, layout.length, layout.padded_length)
    }

    /// Uniform symbols on the first `length` positions.
    pub fn random<R: Rng + ?Sized>(field: &PrimeField, submodels: usize, length: usize, padded_length: usize, rng: &mut R) -> Self {
        let mut m = ReferenceModel::zeros(submodels, length, padded_length);
        for s in 0..submodels {
            for p in 0..length {
                m.set(s, p, field.random(rng));
            }
        }
        m
    }

    /// Uniform nonzero symbols on the first `length` positions.
    pub fn random_nonzero<R: Rng + ?Sized>(
        field: &PrimeField,
        submodels: usize,
        length: usize,
        padded_length: usize,
        rng: &mut R,
    ) -> Self {
        let mut m = ReferenceModel::zeros(submodels, length, padded_length);
        for s in 0..submodels {
            for p in 0..length {
                m.set(s, p, FieldElement(rng.gen_range(1..field.modulus())));
            }
        }
        m
    }

    pub fn submodels(&self) -> usize {
        self.submodels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn padded_length(&self) -> usize {
        self.padded_length
    }

    /// 0-based submodel and position.
    pub fn get(&self, submodel: usize, pos: usize) -> FieldElement {
        self.data[submodel * self.padded_length + pos]
    }

    pub fn set(&mut self, submodel: usize, pos: usize, v: FieldElement) {
        self.data[submodel * self.padded_length + pos] = v;
    }

    pub fn submodel(&self, submodel: usize) -> &[FieldElement] {
        &self.data[submodel * self.padded_length..(submodel + 1) * self.padded_length]
    }

    pub fn column(&self, pos: usize) -> Vec<FieldElement> {
        (0..self.submodels).map(|s| self.get(s, pos)).collect()
    }

    /// Adds `delta` to submodel `submodel` wherever `applied` is set.
    pub fn apply(&mut self, field: &PrimeField, submodel: usize, delta: &[FieldElement], applied: &[bool]) {
        for (p, (&d, &on)) in delta.iter().zip(applied).enumerate() {
            if on {
                let v = field.add(self.get(submodel, p), d);
                self.set(submodel, p, v);
            }
        }
    }
}

/// Inverts the storage equation with every database's shard. Each stored
/// symbol is `W / (f_c - alpha_n)` plus a polynomial of degree
/// `floor(N/2) - 1` in `alpha_n`; the first `floor(N/2) + 1` shards are
/// solved and the rest must agree.
pub fn god_decode(field: &PrimeField, shards: &[StorageShard], points: &EvalPoints, layout: &Layout) -> Result<ReferenceModel, HarnessError> {
    let n_dbs = points.n_dbs();
    if shards.len() != n_dbs {
        return Err(HarnessError::Input(format!("{} shards for {} databases", shards.len(), n_dbs)));
    }
    let terms = storage_noise_terms(n_dbs);
    let used = terms + 1;
    let m = layout.submodels;
    let mut model = ReferenceModel::for_layout(layout);
    let y_max = layout.y_max();
    let row_for = |c: usize, n: usize| -> Result<Vec<FieldElement>, HarnessError> {
        let alpha = points.alpha(n);
        let mut row = vec![field.inv(field.sub(points.f(c), alpha))?];
        let mut power = FieldElement::ONE;
        for _ in 0..terms {
            row.push(power);
            power = field.mul(power, alpha);
        }
        Ok(row)
    };
    let mut inverses = Vec::with_capacity(y_max);
    let mut checks = Vec::with_capacity(y_max);
    for c in 1..=y_max {
        let a = Matrix::from_rows((0..used).map(|n| row_for(c, n)).collect::<Result<_, _>>()?)?;
        inverses.push(field.inverse(&a)?);
        checks.push((used..n_dbs).map(|n| row_for(c, n)).collect::<Result<Vec<_>, _>>()?);
    }
    for region in &layout.regions {
        for p in 0..region.bit_length {
            let pos = region.bit_offset + p;
            let c = g(p + 1, region.y);
            for s in 0..m {
                let rhs: Vec<FieldElement> = shards[..used].iter().map(|sh| sh.row(pos)[s]).collect();
                let x = field.mat_vec(&inverses[c - 1], &rhs);
                for (k, row) in checks[c - 1].iter().enumerate() {
                    if field.dot(row, &x) != shards[used + k].row(pos)[s] {
                        return Err(HarnessError::Corruption { position: pos, submodel: s });
                    }
                }
                model.set(s, pos, x[0]);
            }
        }
    }
    Ok(model)
}

/// Fraction of the first `length` positions where the two vectors differ.
pub fn hamming_distortion(actual: &[FieldElement], received: &[FieldElement], length: usize) -> Rational {
    assert!(actual.len() >= length && received.len() >= length);
    let mismatches = actual[..length].iter().zip(&received[..length]).filter(|(a, b)| a != b).count();
    Rational::new(mismatches as i128, length as i128)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DistortionReport {
    #[serde(with = "rational_serde")]
    pub d_read: Rational,
    #[serde(with = "rational_serde")]
    pub d_write: Rational,
    pub read_within_budget: bool,
    pub write_within_budget: bool,
}

/// `actual_update` versus `uploaded_update` for the write side, the stored
/// submodel versus what was decoded for the read side.
pub fn measure_distortion(
    actual_submodel: &[FieldElement],
    downloaded: &[FieldElement],
    actual_update: &[FieldElement],
    uploaded_update: &[FieldElement],
    length: usize,
    budgets: &Budgets,
) -> DistortionReport {
    let d_read = hamming_distortion(actual_submodel, downloaded, length);
    let d_write = hamming_distortion(actual_update, uploaded_update, length);
    DistortionReport {
        read_within_budget: d_read <= budgets.d_read,
        write_within_budget: d_write <= budgets.d_write,
        d_read,
        d_write,
    }
}

/// Draws from the public update prior: zero with probability
/// `d + (1 - d)/q`, every nonzero value with `(1 - d)/q`.
pub fn sample_update_prior<R: Rng + ?Sized>(field: &PrimeField, d_write: Rational, rng: &mut R) -> FieldElement {
    assert!(!d_write.is_negative_or_above_one(), "d_write must lie in [0, 1]");
    let numer = *d_write.numer() as u128;
    let denom = *d_write.denom() as u128;
    if rng.gen_range(0..denom) < numer {
        FieldElement::ZERO
    } else {
        field.random(rng)
    }
}

trait UnitInterval {
    fn is_negative_or_above_one(&self) -> bool;
}

impl UnitInterval for Rational {
    fn is_negative_or_above_one(&self) -> bool {
        *self < Rational::zero() || *self > Rational::from_integer(1)
    }
}

// ---------------------------------------------------------------------------
// Privacy audits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AuditMode {
    Enumerate,
    Sample { samples: usize },
}

/// A one-region protocol instance small enough to audit.
#[derive(Clone, Debug)]
pub struct AuditInstance {
    pub field: PrimeField,
    pub n_dbs: usize,
    pub submodels: usize,
    pub region: RegionPlan,
    pub points: EvalPoints,
}

impl AuditInstance {
    pub fn new(q: u64, n_dbs: usize, submodels: usize, ell_r: usize, ell_w: usize) -> Result<Self, HarnessError> {
        let field = PrimeField::new(q)?;
        if n_dbs < 4 {
            return Err(HarnessError::Input("at least 4 databases".into()));
        }
        let base = n_dbs / 2 - 1;
        if ell_r < base || ell_w < base {
            return Err(HarnessError::Input("subpacketization below floor(N/2) - 1".into()));
        }
        let region = RegionPlan::new(0, 0, num_integer::lcm(ell_r, ell_w), ell_r, ell_w);
        let points = EvalPoints::standard(&field, n_dbs, region.y)?;
        Ok(AuditInstance { field, n_dbs, submodels, region, points })
    }

    pub fn base(&self) -> usize {
        self.n_dbs / 2 - 1
    }

    /// First-k and last-k selections, used as the two hypotheses on `J`.
    pub fn pattern_pair(&self) -> (SelectionPattern, SelectionPattern) {
        let base = self.base();
        let first = SelectionPattern::first_k(&self.region, base);
        let last = SelectionPattern {
            read: vec![(self.region.ell_r - base + 1..=self.region.ell_r).collect(); self.region.gamma_r],
            write: vec![(self.region.ell_w - base + 1..=self.region.ell_w).collect(); self.region.gamma_w],
        };
        (first, last)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditEntry {
    pub observable: String,
    pub dbs: Vec<usize>,
    /// Exact total-variation distance (enumeration mode).
    #[serde(with = "rational_serde::option")]
    pub exact_distance: Option<Rational>,
    pub states: Option<u64>,
    /// Largest empirical TV distance across coordinates (sampling mode).
    pub empirical_distance: Option<f64>,
    pub min_p_value: Option<f64>,
    pub samples: Option<usize>,
    pub passed: bool,
    /// Excluded from pass/fail.
    pub diagnostic: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PrivacyReport {
    pub audit: String,
    pub mode: AuditMode,
    pub entries: Vec<AuditEntry>,
}

impl PrivacyReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().filter(|e| !e.diagnostic).all(|e| e.passed)
    }

    /// Largest exact distance among non-diagnostic entries.
    pub fn max_exact_distance(&self) -> Option<Rational> {
        self.entries.iter().filter(|e| !e.diagnostic).filter_map(|e| e.exact_distance).max()
    }
}

type ObservableFn<'a> = Box<dyn Fn(&[FieldElement]) -> Result<Vec<u64>, HarnessError> + 'a>;

/// A database view as a function of the noise it is masked with, under
/// two hypotheses.
struct Observable<'a> {
    name: String,
    dbs: Vec<usize>,
    dims: usize,
    under_a: ObservableFn<'a>,
    under_b: ObservableFn<'a>,
    diagnostic: bool,
}

fn state_count(q: u64, dims: usize) -> u128 {
    (q as u128).checked_pow(dims as u32).unwrap_or(u128::MAX)
}

/// Outputs packed base-q into a `u128` when they fit, else kept whole.
#[derive(Debug)]
enum Distribution {
    Packed(HashMap<u128, u64>),
    Wide(HashMap<Vec<u64>, u64>),
}

fn pack(q: u64, out: &[u64]) -> Option<u128> {
    out.iter().try_fold(0u128, |acc, &v| acc.checked_mul(q as u128)?.checked_add(v as u128))
}

fn enumerate_distribution(field: &PrimeField, dims: usize, f: &ObservableFn<'_>) -> Result<Distribution, HarnessError> {
    let q = field.modulus();
    let states = state_count(q, dims);
    if states > ENUMERATION_GUARD as u128 {
        return Err(HarnessError::GuardExceeded { states, guard: ENUMERATION_GUARD });
    }
    let mut noise = vec![FieldElement::ZERO; dims];
    let first = f(&noise)?;
    let width_fits = (q as u128).checked_pow(first.len() as u32).is_some();
    let mut packed = HashMap::new();
    let mut wide = HashMap::new();
    let mut out = first;
    loop {
        match (width_fits, pack(q, &out)) {
            (true, Some(key)) => *packed.entry(key).or_insert(0u64) += 1,
            _ => *wide.entry(out).or_insert(0u64) += 1,
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == dims {
                return Ok(if width_fits && wide.is_empty() { Distribution::Packed(packed) } else { Distribution::Wide(wide) });
            }
            noise[k].0 += 1;
            if noise[k].0 < q {
                break;
            }
            noise[k].0 = 0;
            k += 1;
        }
        out = f(&noise)?;
    }
}

fn distance<K: std::hash::Hash + Eq>(a: &HashMap<K, u64>, b: &HashMap<K, u64>) -> Rational {
    let total: u64 = a.values().sum();
    let mut diff: i128 = 0;
    for (k, &ca) in a {
        diff += (ca as i128 - *b.get(k).unwrap_or(&0) as i128).abs();
    }
    for (k, &cb) in b {
        if !a.contains_key(k) {
            diff += cb as i128;
        }
    }
    Rational::new(diff, 2 * total as i128)
}

fn total_variation(a: &Distribution, b: &Distribution) -> Result<Rational, HarnessError> {
    match (a, b) {
        (Distribution::Packed(a), Distribution::Packed(b)) => Ok(distance(a, b)),
        (Distribution::Wide(a), Distribution::Wide(b)) => Ok(distance(a, b)),
        _ => Err(HarnessError::Input("hypotheses produce views of different shape".into())),
    }
}

const SAMPLE_BINS: u64 = 10;
const SIGNIFICANCE: f64 = 0.01;

/// Chi-square homogeneity test between the two hypotheses, coordinate by
/// coordinate, with values binned uniformly over `[0, q)`.
fn sample_test<R: Rng + ?Sized>(
    field: &PrimeField,
    obs: &Observable<'_>,
    samples: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    let q = field.modulus();
    let mut hist: Vec<[Vec<u64>; 2]> = Vec::new();
    for (h, f) in [&obs.under_a, &obs.under_b].into_iter().enumerate() {
        for _ in 0..samples {
            let noise = field.random_vec(rng, obs.dims);
            let out = f(&noise)?;
            if hist.len() < out.len() {
                hist.resize_with(out.len(), || [vec![0; SAMPLE_BINS as usize], vec![0; SAMPLE_BINS as usize]]);
            }
            for (coord, &v) in out.iter().enumerate() {
                let bin = ((v as u128 * SAMPLE_BINS as u128) / q as u128) as usize;
                hist[coord][h][bin] += 1;
            }
        }
    }
    let chi = ChiSquared::new((SAMPLE_BINS - 1) as f64).expect("positive degrees of freedom");
    let mut p_values = Vec::new();
    let mut distances = Vec::new();
    for [a, b] in &hist {
        let mut stat = 0.0;
        let mut tv = 0.0;
        for (&ca, &cb) in a.iter().zip(b) {
            let expected = (ca + cb) as f64 / 2.0;
            if expected > 0.0 {
                stat += (ca as f64 - expected).powi(2) / expected + (cb as f64 - expected).powi(2) / expected;
            }
            tv += (ca as f64 - cb as f64).abs() / samples as f64;
        }
        p_values.push(1.0 - chi.cdf(stat));
        distances.push(tv / 2.0);
    }
    Ok((p_values, distances))
}

fn run_observables<R: Rng + ?Sized>(
    audit: &str,
    field: &PrimeField,
    observables: Vec<Observable<'_>>,
    mode: AuditMode,
    rng: &mut R,
) -> Result<PrivacyReport, HarnessError> {
    let mut entries = Vec::new();
    match mode {
        AuditMode::Enumerate => {
            for obs in &observables {
                let a = enumerate_distribution(field, obs.dims, &obs.under_a)?;
                let b = enumerate_distribution(field, obs.dims, &obs.under_b)?;
                let d = total_variation(&a, &b)?;
                entries.push(AuditEntry {
                    observable: obs.name.clone(),
                    dbs: obs.dbs.clone(),
                    exact_distance: Some(d),
                    states: Some(state_count(field.modulus(), obs.dims) as u64),
                    empirical_distance: None,
                    min_p_value: None,
                    samples: None,
                    passed: d.is_zero(),
                    diagnostic: obs.diagnostic,
                });
            }
        }
        AuditMode::Sample { samples } => {
            let mut raw = Vec::new();
            for obs in &observables {
                raw.push(sample_test(field, obs, samples, rng)?);
            }
            // Bonferroni over every non-diagnostic coordinate test
            let tests: usize = raw.iter().zip(&observables).filter(|(_, o)| !o.diagnostic).map(|(r, _)| r.0.len()).sum();
            let threshold = SIGNIFICANCE / tests.max(1) as f64;
            for ((p_values, distances), obs) in raw.into_iter().zip(&observables) {
                let min_p = p_values.iter().cloned().fold(1.0, f64::min);
                let max_d = distances.iter().cloned().fold(0.0, f64::max);
                entries.push(AuditEntry {
                    observable: obs.name.clone(),
                    dbs: obs.dbs.clone(),
                    exact_distance: None,
                    states: None,
                    empirical_distance: Some(max_d),
                    min_p_value: Some(min_p),
                    samples: Some(samples),
                    passed: min_p > threshold,
                    diagnostic: obs.diagnostic,
                });
            }
        }
    }
    Ok(PrivacyReport { audit: audit.to_string(), mode, entries })
}

/// Joint views beyond single rows are optional; under enumeration they are
/// only added up to this many states.
pub const JOINT_ENUMERATION_LIMIT: u64 = 1_000_000;

fn fits(field: &PrimeField, dims: usize, mode: AuditMode) -> bool {
    matches!(mode, AuditMode::Sample { .. }) || state_count(field.modulus(), dims) <= JOINT_ENUMERATION_LIMIT as u128
}

fn as_u64(v: &[FieldElement]) -> Vec<u64> {
    v.iter().map(|x| x.0).collect()
}

/// Per-database read- and write-query views under `(theta_a, J_a)` versus
/// `(theta_b, J_b)`. Every row is audited on its own; whole query blocks are
/// audited jointly whenever the enumeration guard allows it. A two-database
/// joint view is added as a diagnostic; it is expected to leak.
pub fn audit_index_privacy<R: Rng + ?Sized>(
    inst: &AuditInstance,
    thetas: (usize, usize),
    patterns: (&SelectionPattern, &SelectionPattern),
    mode: AuditMode,
    rng: &mut R,
) -> Result<PrivacyReport, HarnessError> {
    let f = &inst.field;
    let m = inst.submodels;
    let reg = &inst.region;
    for p in [patterns.0, patterns.1] {
        p.validate(reg, inst.base())?;
    }
    let hyps = [(thetas.0, patterns.0), (thetas.1, patterns.1)];

    // read query block s at database n with the given masks placed in block s
    let read_block = move |n: usize, s: usize, rows: Option<usize>, h: usize, noise: &[FieldElement]| {
        let (theta, pattern) = hyps[h];
        let mut rn = ReadNoise::zero(reg, m);
        let start = match rows {
            Some(i) => (s * reg.ell_r + i - 1) * m,
            None => s * reg.ell_r * m,
        };
        rn.masks[start..start + noise.len()].copy_from_slice(noise);
        let q = gen_read_query(f, theta, m, pattern, &inst.points, reg, n, &rn)?;
        Ok::<_, HarnessError>(match rows {
            Some(i) => q.row(s, i).to_vec(),
            None => q.block(s).to_vec(),
        })
    };
    let write_block = move |n: usize, s: usize, rows: Option<usize>, h: usize, noise: &[FieldElement]| {
        let (theta, pattern) = hyps[h];
        let mut wn = WriteNoise::zero(reg, m);
        let start = match rows {
            Some(i) => (s * reg.ell_w + i - 1) * m,
            None => s * reg.ell_w * m,
        };
        wn.masks[start..start + noise.len()].copy_from_slice(noise);
        let q = gen_write_query(f, theta, m, pattern, &inst.points, reg, n, &wn)?;
        Ok::<_, HarnessError>(match rows {
            Some(i) => q.row(s, i).to_vec(),
            None => q.block(s).to_vec(),
        })
    };

    let mut observables = Vec::new();
    for n in 0..inst.n_dbs {
        for s in 0..reg.gamma_r {
            for i in 1..=reg.ell_r {
                observables.push(Observable {
                    name: format!("read query row {i} of block {}", s + 1),
                    dbs: vec![n],
                    dims: m,
                    under_a: Box::new(move |z| Ok(as_u64(&read_block(n, s, Some(i), 0, z)?))),
                    under_b: Box::new(move |z| Ok(as_u64(&read_block(n, s, Some(i), 1, z)?))),
                    diagnostic: false,
                });
            }
            if reg.ell_r > 1 && fits(f, reg.ell_r * m, mode) {
                observables.push(Observable {
                    name: format!("read query block {}", s + 1),
                    dbs: vec![n],
                    dims: reg.ell_r * m,
                    under_a: Box::new(move |z| Ok(as_u64(&read_block(n, s, None, 0, z)?))),
                    under_b: Box::new(move |z| Ok(as_u64(&read_block(n, s, None, 1, z)?))),
                    diagnostic: false,
                });
            }
        }
        for s in 0..reg.gamma_w {
            for i in 1..=reg.ell_w {
                observables.push(Observable {
                    name: format!("write query row {i} of block {}", s + 1),
                    dbs: vec![n],
                    dims: m,
                    under_a: Box::new(move |z| Ok(as_u64(&write_block(n, s, Some(i), 0, z)?))),
                    under_b: Box::new(move |z| Ok(as_u64(&write_block(n, s, Some(i), 1, z)?))),
                    diagnostic: false,
                });
            }
            if reg.ell_w > 1 && fits(f, reg.ell_w * m, mode) {
                observables.push(Observable {
                    name: format!("write query block {}", s + 1),
                    dbs: vec![n],
                    dims: reg.ell_w * m,
                    under_a: Box::new(move |z| Ok(as_u64(&write_block(n, s, None, 0, z)?))),
                    under_b: Box::new(move |z| Ok(as_u64(&write_block(n, s, None, 1, z)?))),
                    diagnostic: false,
                });
            }
        }
    }
    // colluding pair, first read row, shared masks
    if inst.n_dbs >= 2 {
        let joint = move |h: usize, z: &[FieldElement]| -> Result<Vec<u64>, HarnessError> {
            let mut out = as_u64(&read_block(0, 0, Some(1), h, z)?);
            out.extend(as_u64(&read_block(1, 0, Some(1), h, z)?));
            Ok(out)
        };
        observables.push(Observable {
            name: "joint read query row 1 of block 1 (collusion diagnostic)".into(),
            dbs: vec![0, 1],
            dims: m,
            under_a: Box::new(move |z| joint(0, z)),
            under_b: Box::new(move |z| joint(1, z)),
            diagnostic: true,
        });
    }
    run_observables("index privacy", f, observables, mode, rng)
}

/// Per-database update symbols under two update vectors over the region.
/// Each symbol is audited alone and jointly with the write-query row it
/// multiplies when the guard allows.
pub fn audit_update_privacy<R: Rng + ?Sized>(
    inst: &AuditInstance,
    theta: usize,
    pattern: &SelectionPattern,
    deltas: (&[FieldElement], &[FieldElement]),
    mode: AuditMode,
    rng: &mut R,
) -> Result<PrivacyReport, HarnessError> {
    let f = &inst.field;
    let m = inst.submodels;
    let reg = &inst.region;
    pattern.validate(reg, inst.base())?;
    if inst.base() == 0 {
        return Err(HarnessError::Input("no selected positions, nothing is uploaded".into()));
    }
    for d in [deltas.0, deltas.1] {
        if d.len() != reg.bit_length {
            return Err(HarnessError::Input(format!("update of {} values for region of {}", d.len(), reg.bit_length)));
        }
    }
    let ds = [deltas.0, deltas.1];
    // noise = [z] or [z, masks of row 1 of the subpacket's block]
    let symbol = move |n: usize, t: usize, with_row: bool, h: usize, noise: &[FieldElement]| -> Result<Vec<u64>, HarnessError> {
        let mut wn = WriteNoise::zero(reg, m);
        wn.z[t] = noise[0];
        let u = encode_update(f, ds[h], pattern, &inst.points, reg, n, &wn)?;
        let mut out = vec![u.values[t].0];
        if with_row {
            let s = t % reg.gamma_w;
            let start = s * reg.ell_w * m;
            wn.masks[start..start + m].copy_from_slice(&noise[1..]);
            let q = gen_write_query(f, theta, m, pattern, &inst.points, reg, n, &wn)?;
            out.extend(as_u64(q.row(s, 1)));
        }
        Ok(out)
    };
    let mut observables = Vec::new();
    for n in 0..inst.n_dbs {
        for t in 0..reg.write_subpackets() {
            observables.push(Observable {
                name: format!("update symbol of subpacket {}", t + 1),
                dbs: vec![n],
                dims: 1,
                under_a: Box::new(move |z| symbol(n, t, false, 0, z)),
                under_b: Box::new(move |z| symbol(n, t, false, 1, z)),
                diagnostic: false,
            });
            if fits(f, 1 + m, mode) {
                observables.push(Observable {
                    name: format!("update symbol with write query row, subpacket {}", t + 1),
                    dbs: vec![n],
                    dims: 1 + m,
                    under_a: Box::new(move |z| symbol(n, t, true, 0, z)),
                    under_b: Box::new(move |z| symbol(n, t, true, 1, z)),
                    diagnostic: false,
                });
            }
        }
    }
    run_observables("update privacy", f, observables, mode, rng)
}

/// One database's stored rows under two models (given as region-length
/// column lists, `models.k[p]` is the M-vector at position `p`).
pub fn audit_storage_security<R: Rng + ?Sized>(
    inst: &AuditInstance,
    models: (&[Vec<FieldElement>], &[Vec<FieldElement>]),
    mode: AuditMode,
    rng: &mut R,
) -> Result<PrivacyReport, HarnessError> {
    let f = &inst.field;
    let m = inst.submodels;
    let reg = &inst.region;
    let terms = storage_noise_terms(inst.n_dbs);
    let ms = [models.0, models.1];
    for model in ms {
        if model.len() != reg.bit_length || model.iter().any(|c| c.len() != m) {
            return Err(HarnessError::Input("model columns do not match the region".into()));
        }
    }
    let row = move |n: usize, p: usize, h: usize, noise: &[FieldElement]| -> Result<Vec<u64>, HarnessError> {
        Ok(as_u64(&encode_position(f, &ms[h][p], g(p + 1, reg.y), &inst.points, n, noise)?))
    };
    let mut observables = Vec::new();
    for n in 0..inst.n_dbs {
        for p in 0..reg.bit_length {
            observables.push(Observable {
                name: format!("storage row {}", p + 1),
                dbs: vec![n],
                dims: terms * m,
                under_a: Box::new(move |z| row(n, p, 0, z)),
                under_b: Box::new(move |z| row(n, p, 1, z)),
                diagnostic: false,
            });
        }
    }
    if inst.n_dbs > terms && fits(f, terms * m, mode) {
        // floor(N/2) + 1 colluding databases can solve for the model
        let k = terms + 1;
        observables.push(Observable {
            name: format!("joint storage row 1 of {k} databases (collusion diagnostic)"),
            dbs: (0..k).collect(),
            dims: terms * m,
            under_a: Box::new(move |z| Ok((0..k).map(|n| row(n, 0, 0, z)).collect::<Result<Vec<_>, _>>()?.concat())),
            under_b: Box::new(move |z| Ok((0..k).map(|n| row(n, 0, 1, z)).collect::<Result<Vec<_>, _>>()?.concat())),
            diagnostic: true,
        });
    }
    run_observables("storage security", f, observables, mode, rng)
}

/// Download and upload volume of one round, in field symbols.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TrafficCounts {
    pub download_symbols: usize,
    pub upload_symbols: usize,
    /// One-time query symbols, kept out of the two costs.
    pub query_symbols: usize,
}

impl TrafficCounts {
    pub fn reading_cost(&self, length: usize) -> Rational {
        Rational::new(self.download_symbols as i128, length as i128)
    }

    pub fn writing_cost(&self, length: usize) -> Rational {
        Rational::new(self.upload_symbols as i128, length as i128)
    }

    /// Query overhead as a fraction of per-round traffic.
    pub fn overhead_fraction(&self) -> f64 {
        let traffic = (self.download_symbols + self.upload_symbols) as f64;
        self.query_symbols as f64 / traffic
    }
}

pub fn to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Convenience used by audits: the columns of a reference model over a
/// region.
pub fn region_columns(model: &ReferenceModel, region: &RegionPlan) -> Vec<Vec<FieldElement>> {
    (region.bit_offset..region.end()).map(|p| model.column(p)).collect()
}
