//! Subpacketization planning for given distortion budgets.
//!
//! Every subpacket of size `ell` is read (or written) correctly at exactly
//! `base = floor(N/2) - 1` positions, so a phase with subpacketization
//! `base + i` costs `N / (base + i)` and distorts `i / (base + i)` of the
//! submodel. When the budget-optimal `i` is fractional, the submodel is split
//! into a section at `base` and a section at `base + eta` with
//! `eta = ceil(i)`, mixed so that the average distortion lands exactly on
//! the budget.
//!
//! All quantities stay exact rationals until regions are materialized as
//! bit ranges.

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rational = Ratio<i128>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("unsupported parameters: {0}")]
    Unsupported(String),
    #[error("invalid budget {0}: must lie in [0, 1)")]
    InvalidBudget(String),
    #[error("cannot parse rational '{0}'")]
    Parse(String),
}

/// Serde adapter writing rationals as `"p/q"` strings.
pub mod rational_serde {
    use super::Rational;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&r.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_rational(&s).map_err(de::Error::custom)
    }

    pub mod option {
        use super::Rational;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(r: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
            match r {
                Some(r) => s.serialize_some(&r.to_string()),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
            let s = Option::<String>::deserialize(d)?;
            s.map(|s| super::super::parse_rational(&s).map_err(serde::de::Error::custom)).transpose()
        }
    }
}

/// Parses `"3"`, `"1/4"` or a finite decimal such as `"0.05"` exactly.
pub fn parse_rational(s: &str) -> Result<Rational, PlanError> {
    let err = || PlanError::Parse(s.to_string());
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num: i128 = num.trim().parse().map_err(|_| err())?;
        let den: i128 = den.trim().parse().map_err(|_| err())?;
        if den == 0 {
            return Err(err());
        }
        return Ok(Rational::new(num, den));
    }
    if let Some((int, frac)) = s.split_once('.') {
        if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let negative = int.starts_with('-');
        let int: i128 = if int.is_empty() || int == "-" { 0 } else { int.parse().map_err(|_| err())? };
        let den = 10i128.pow(frac.len() as u32);
        let frac: i128 = frac.parse().map_err(|_| err())?;
        let mag = int.abs() * den + frac;
        return Ok(Rational::new(if negative { -mag } else { mag }, den));
    }
    Ok(Rational::from_integer(s.parse().map_err(|_| err())?))
}

pub fn rational_to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Number of positions per subpacket that are read or written correctly.
pub fn base_subpacketization(n_dbs: usize) -> usize {
    n_dbs / 2 - 1
}

fn check_n(n_dbs: usize) -> Result<(), PlanError> {
    if n_dbs < 4 {
        return Err(PlanError::Unsupported(format!("N = {n_dbs}; at least 4 databases are required")));
    }
    Ok(())
}

fn check_budget(b: &Rational) -> Result<(), PlanError> {
    if b.is_negative() || *b >= Rational::one() {
        return Err(PlanError::InvalidBudget(b.to_string()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    #[serde(with = "rational_serde")]
    pub d_read: Rational,
    #[serde(with = "rational_serde")]
    pub d_write: Rational,
}

impl Budgets {
    pub fn new(d_read: Rational, d_write: Rational) -> Result<Self, PlanError> {
        check_budget(&d_read)?;
        check_budget(&d_write)?;
        Ok(Budgets { d_read, d_write })
    }

    pub fn symmetric(d: Rational) -> Result<Self, PlanError> {
        Budgets::new(d, d)
    }

    pub fn zero() -> Self {
        Budgets { d_read: Rational::zero(), d_write: Rational::zero() }
    }
}

/// Budget-optimal split of one phase into a `base` section and a
/// `base + eta` section.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub eta: usize,
    #[serde(with = "rational_serde")]
    pub lambda0: Rational,
    #[serde(with = "rational_serde")]
    pub lambda_eta: Rational,
    pub ell_small: usize,
    pub ell_large: usize,
    #[serde(with = "rational_serde")]
    pub budget: Rational,
}

impl PhasePlan {
    /// Average fraction of positions left undelivered.
    pub fn predicted_distortion(&self) -> Rational {
        if self.eta == 0 {
            return Rational::zero();
        }
        self.lambda_eta * Rational::new(self.eta as i128, self.ell_large as i128)
    }

    /// True when the whole phase runs at one subpacketization.
    pub fn is_single_section(&self) -> bool {
        self.lambda0.is_zero() || self.lambda_eta.is_zero()
    }
}

pub fn phase_plan(n_dbs: usize, budget: Rational) -> Result<PhasePlan, PlanError> {
    check_n(n_dbs)?;
    check_budget(&budget)?;
    let base = base_subpacketization(n_dbs);
    let one = Rational::one();
    let i_star = budget / (one - budget) * Rational::from_integer(base as i128);
    let (eta, lambda_eta) = if i_star.is_integer() {
        let eta = i_star.to_integer() as usize;
        (eta, if eta == 0 { Rational::zero() } else { one })
    } else {
        let eta = i_star.ceil().to_integer() as usize;
        (eta, budget / Rational::from_integer(eta as i128) * Rational::from_integer((base + eta) as i128))
    };
    Ok(PhasePlan {
        eta,
        lambda0: one - lambda_eta,
        lambda_eta,
        ell_small: base,
        ell_large: base + eta,
        budget,
    })
}

/// `lambda0 * N / ell_small + lambda_eta * N / ell_large`, in symbols per
/// submodel symbol.
pub fn predicted_phase_cost(plan: &PhasePlan, n_dbs: usize) -> Rational {
    let n = n_dbs as i128;
    plan.lambda0 * Rational::new(n, plan.ell_small as i128) + plan.lambda_eta * Rational::new(n, plan.ell_large as i128)
}

/// `2 / (1 - 2/N) * (1 - d)`. Only meaningful as an achievable cost for even N.
pub fn closed_form_cost(n_dbs: usize, budget: Rational) -> Rational {
    let n = n_dbs as i128;
    Rational::from_integer(2) / (Rational::one() - Rational::new(2, n)) * (Rational::one() - budget)
}

/// A contiguous bit range of every submodel with constant read and write
/// subpacketizations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub id: usize,
    pub bit_offset: usize,
    pub bit_length: usize,
    pub ell_r: usize,
    pub ell_w: usize,
    /// Period of the cyclic evaluation-point assignment.
    pub y: usize,
    pub lcm: usize,
    /// Distinct read queries per super subpacket.
    pub gamma_r: usize,
    /// Distinct write queries per super subpacket.
    pub gamma_w: usize,
}

impl RegionPlan {
    pub fn new(id: usize, bit_offset: usize, bit_length: usize, ell_r: usize, ell_w: usize) -> Self {
        let y = ell_r.max(ell_w);
        let lcm = ell_r.lcm(&ell_w);
        RegionPlan {
            id,
            bit_offset,
            bit_length,
            ell_r,
            ell_w,
            y,
            lcm,
            gamma_r: ell_r.lcm(&y) / ell_r,
            gamma_w: ell_w.lcm(&y) / ell_w,
        }
    }

    pub fn read_subpackets(&self) -> usize {
        self.bit_length / self.ell_r
    }

    pub fn write_subpackets(&self) -> usize {
        self.bit_length / self.ell_w
    }

    pub fn end(&self) -> usize {
        self.bit_offset + self.bit_length
    }

    /// One-time query symbols (per submodel) for this region.
    pub fn query_rows(&self) -> usize {
        self.ell_r * self.gamma_r + self.ell_w * self.gamma_w
    }
}

/// Public storage layout shared by the user and every database.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_dbs: usize,
    pub submodels: usize,
    pub length: usize,
    pub padded_length: usize,
    pub regions: Vec<RegionPlan>,
}

impl Layout {
    pub fn base(&self) -> usize {
        base_subpacketization(self.n_dbs)
    }

    /// Largest cyclic period across regions; that many distinct `f` points
    /// are needed.
    pub fn y_max(&self) -> usize {
        self.regions.iter().map(|r| r.y).max().unwrap_or(1)
    }

    /// lcm of every subpacketization in use.
    pub fn lcm(&self) -> usize {
        self.regions.iter().fold(1, |acc, r| acc.lcm(&r.lcm))
    }

    /// Checks tiling, divisibility and the distinct-point property of every
    /// reading and writing subpacket.
    pub fn validate(&self) -> Result<(), PlanError> {
        check_n(self.n_dbs)?;
        let base = self.base();
        let mut cursor = 0;
        for (i, r) in self.regions.iter().enumerate() {
            let bad = |msg: String| Err(PlanError::Unsupported(format!("region {i}: {msg}")));
            if r.id != i || r.bit_offset != cursor {
                return bad("regions do not tile the padded model".into());
            }
            if r.bit_length == 0 || r.bit_length % r.lcm != 0 {
                return bad(format!("length {} is not a positive multiple of {}", r.bit_length, r.lcm));
            }
            if r.ell_r < base || r.ell_w < base {
                return bad("subpacketization below floor(N/2) - 1".into());
            }
            if *r != RegionPlan::new(r.id, r.bit_offset, r.bit_length, r.ell_r, r.ell_w) {
                return bad("derived fields inconsistent".into());
            }
            for (ell, gamma) in [(r.ell_r, r.gamma_r), (r.ell_w, r.gamma_w)] {
                for s in 0..gamma {
                    let mut seen = vec![false; r.y + 1];
                    for i in 1..=ell {
                        let c = crate::codec::g(s * ell + i, r.y);
                        if seen[c] {
                            return bad(format!("repeated cyclic index {c} in subpacket {s}"));
                        }
                        seen[c] = true;
                    }
                }
            }
            cursor = r.end();
        }
        if cursor != self.padded_length || self.padded_length < self.length {
            return Err(PlanError::Unsupported("regions do not cover the padded length".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub budgets: Budgets,
    pub read: PhasePlan,
    pub write: PhasePlan,
    pub layout: Layout,
    #[serde(with = "rational_serde")]
    pub predicted_cr: Rational,
    #[serde(with = "rational_serde")]
    pub predicted_cw: Rational,
    #[serde(with = "rational_serde")]
    pub predicted_dr: Rational,
    #[serde(with = "rational_serde")]
    pub predicted_dw: Rational,
    /// Closed-form `2/(1-2/N)(1-d)` values; absent for odd N where the
    /// scheme's `N/ell` cost does not reduce to it.
    #[serde(with = "rational_serde::option")]
    pub closed_form_cr: Option<Rational>,
    #[serde(with = "rational_serde::option")]
    pub closed_form_cw: Option<Rational>,
    /// Every section boundary fell exactly on a region multiple and no
    /// padding was needed.
    pub aligned: bool,
}

impl Plan {
    pub fn n_dbs(&self) -> usize {
        self.layout.n_dbs
    }

    /// One-time query overhead in symbols, summed over regions.
    pub fn query_overhead_symbols(&self) -> usize {
        self.layout.submodels * self.layout.regions.iter().map(RegionPlan::query_rows).sum::<usize>()
    }

    /// Download symbols for one round, all databases.
    pub fn download_symbols(&self) -> usize {
        self.n_dbs() * self.layout.regions.iter().map(RegionPlan::read_subpackets).sum::<usize>()
    }

    pub fn upload_symbols(&self) -> usize {
        self.n_dbs() * self.layout.regions.iter().map(RegionPlan::write_subpackets).sum::<usize>()
    }

    pub fn odd_n(&self) -> bool {
        self.n_dbs() % 2 == 1
    }
}

pub fn build_plan(n_dbs: usize, submodels: usize, length: usize, budgets: &Budgets) -> Result<Plan, PlanError> {
    check_n(n_dbs)?;
    if submodels == 0 || length == 0 {
        return Err(PlanError::Unsupported("M and L must be positive".into()));
    }
    let read = phase_plan(n_dbs, budgets.d_read)?;
    let write = phase_plan(n_dbs, budgets.d_write)?;
    let base = base_subpacketization(n_dbs);
    let l = Rational::from_integer(length as i128);

    // High-distortion sections first, so that rounding region ends down and
    // padding the tail both land in lower-distortion territory.
    let read_large = read.lambda_eta * l;
    let write_large = write.lambda_eta * l;
    let (lo, hi) = if read_large <= write_large { (read_large, write_large) } else { (write_large, read_large) };
    let floor_to = |target: Rational, start: usize, step: usize| -> usize {
        if target <= Rational::from_integer(start as i128) {
            return 0;
        }
        let span = (target - Rational::from_integer(start as i128)).floor().to_integer() as usize;
        span / step * step
    };

    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    let mut exact = true;

    let (ra, wa) = (read.ell_large, write.ell_large);
    let len_a = floor_to(lo, 0, ra.lcm(&wa));
    exact &= Rational::from_integer(len_a as i128) == lo;
    spans.push((len_a, ra, wa));
    let end_a = len_a;

    let (rb, wb) = if read_large >= write_large { (read.ell_large, base) } else { (base, write.ell_large) };
    let len_b = floor_to(hi, end_a, rb.lcm(&wb));
    exact &= Rational::from_integer((end_a + len_b) as i128) == hi;
    spans.push((len_b, rb, wb));
    let end_b = end_a + len_b;

    let rest = length - end_b.min(length);
    let len_c = rest.div_ceil(base) * base;
    exact &= len_c == rest;
    spans.push((len_c, base, base));

    let mut regions = Vec::new();
    let mut offset = 0;
    for (len, ell_r, ell_w) in spans {
        if len == 0 {
            continue;
        }
        regions.push(RegionPlan::new(regions.len(), offset, len, ell_r, ell_w));
        offset += len;
    }
    let layout = Layout { n_dbs, submodels, length, padded_length: offset, regions };
    layout.validate()?;

    let n = n_dbs as i128;
    let mut cr_num = 0i128;
    let mut cw_num = 0i128;
    let mut dr_num = 0i128;
    let mut dw_num = 0i128;
    for r in &layout.regions {
        cr_num += n * r.read_subpackets() as i128;
        cw_num += n * r.write_subpackets() as i128;
        dr_num += (r.read_subpackets() * (r.ell_r - base)) as i128;
        dw_num += (r.write_subpackets() * (r.ell_w - base)) as i128;
    }
    let denom = length as i128;
    let even = n_dbs % 2 == 0;
    Ok(Plan {
        budgets: budgets.clone(),
        predicted_cr: Rational::new(cr_num, denom),
        predicted_cw: Rational::new(cw_num, denom),
        predicted_dr: Rational::new(dr_num, denom),
        predicted_dw: Rational::new(dw_num, denom),
        closed_form_cr: even.then(|| closed_form_cost(n_dbs, budgets.d_read)),
        closed_form_cw: even.then(|| closed_form_cost(n_dbs, budgets.d_write)),
        aligned: exact && offset == length,
        read,
        write,
        layout,
    })
}

/// Smallest `L >= min_length` for which [`build_plan`] needs no rounding.
pub fn aligned_length(n_dbs: usize, submodels: usize, min_length: usize, budgets: &Budgets) -> Result<usize, PlanError> {
    let read = phase_plan(n_dbs, budgets.d_read)?;
    let write = phase_plan(n_dbs, budgets.d_write)?;
    // every fraction times L must be an integer multiple of the region lcm,
    // so the search terminates within one full period
    let period = [read.lambda_eta.denom(), write.lambda_eta.denom()]
        .iter()
        .fold(1i128, |acc, d| acc.lcm(d)) as usize
        * [read.ell_small, read.ell_large, write.ell_large].iter().fold(1usize, |acc, e| acc.lcm(e))
        * read.ell_large.max(write.ell_large);
    for length in min_length..=min_length + period {
        if build_plan(n_dbs, submodels, length, budgets)?.aligned {
            return Ok(length);
        }
    }
    Err(PlanError::Unsupported("no aligned length found".into()))
}
