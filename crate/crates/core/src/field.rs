//! Prime-field arithmetic, polynomial evaluation and dense linear solving.
//!
//! Elements are plain `u64` residues wrapped in [`FieldElement`]; all
//! arithmetic goes through a [`PrimeField`] that carries the modulus.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mersenne prime 2^31 - 1.
pub const DEFAULT_MODULUS: u64 = 2_147_483_647;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("modulus {0} is not prime")]
    NotPrime(u64),
    #[error("element {value} is not reduced modulo {modulus}")]
    Modulus { value: u64, modulus: u64 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("singular matrix")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A residue in `[0, q)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldElement(pub u64);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);
    pub const ONE: FieldElement = FieldElement(1);

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The prime field F_q.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimeField {
    q: u64,
}

impl Default for PrimeField {
    fn default() -> Self {
        PrimeField { q: DEFAULT_MODULUS }
    }
}

impl PrimeField {
    pub fn new(q: u64) -> Result<Self, FieldError> {
        if !is_prime(q) {
            return Err(FieldError::NotPrime(q));
        }
        Ok(PrimeField { q })
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.q
    }

    /// Reduces an arbitrary integer into the field.
    #[inline]
    pub fn element(&self, v: u64) -> FieldElement {
        FieldElement(v % self.q)
    }

    /// Reduces a signed integer into the field.
    pub fn from_i64(&self, v: i64) -> FieldElement {
        FieldElement(v.rem_euclid(self.q as i64) as u64)
    }

    /// Accepts `v` only if it is already reduced.
    pub fn try_element(&self, v: u64) -> Result<FieldElement, FieldError> {
        if v < self.q {
            Ok(FieldElement(v))
        } else {
            Err(FieldError::Modulus { value: v, modulus: self.q })
        }
    }

    /// Rejects operands that cannot belong to this field.
    pub fn check(&self, a: FieldElement) -> Result<FieldElement, FieldError> {
        self.try_element(a.0)
    }

    #[inline]
    pub fn add(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        debug_assert!(a.0 < self.q && b.0 < self.q);
        let (s, carry) = a.0.overflowing_add(b.0);
        if carry || s >= self.q {
            FieldElement(s.wrapping_sub(self.q))
        } else {
            FieldElement(s)
        }
    }

    /// Addition with operand validation.
    pub fn checked_add(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        Ok(self.add(self.check(a)?, self.check(b)?))
    }

    #[inline]
    pub fn sub(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        debug_assert!(a.0 < self.q && b.0 < self.q);
        if a.0 >= b.0 {
            FieldElement(a.0 - b.0)
        } else {
            FieldElement(self.q - (b.0 - a.0))
        }
    }

    #[inline]
    pub fn neg(&self, a: FieldElement) -> FieldElement {
        self.sub(FieldElement::ZERO, a)
    }

    #[inline]
    pub fn mul(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        debug_assert!(a.0 < self.q && b.0 < self.q);
        if self.q <= 1 << 32 {
            FieldElement(a.0 * b.0 % self.q)
        } else {
            FieldElement(((a.0 as u128 * b.0 as u128) % self.q as u128) as u64)
        }
    }

    /// `a += b * c`
    #[inline]
    pub fn mul_add_assign(&self, a: &mut FieldElement, b: FieldElement, c: FieldElement) {
        *a = self.add(*a, self.mul(b, c));
    }

    pub fn pow(&self, base: FieldElement, mut exp: u64) -> FieldElement {
        let mut acc = FieldElement::ONE;
        let mut b = base;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, b);
            }
            b = self.mul(b, b);
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse via Fermat's little theorem.
    pub fn inv(&self, a: FieldElement) -> Result<FieldElement, FieldError> {
        if a.is_zero() {
            return Err(FieldError::DivisionByZero);
        }
        Ok(self.pow(a, self.q - 2))
    }

    pub fn div(&self, a: FieldElement, b: FieldElement) -> Result<FieldElement, FieldError> {
        Ok(self.mul(a, self.inv(b)?))
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        FieldElement(rng.gen_range(0..self.q))
    }

    pub fn random_vec<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<FieldElement> {
        (0..len).map(|_| self.random(rng)).collect()
    }

    /// Horner evaluation of `coeffs[0] + coeffs[1] x + ...`.
    pub fn eval_poly(&self, coeffs: &[FieldElement], x: FieldElement) -> FieldElement {
        coeffs
            .iter()
            .rev()
            .fold(FieldElement::ZERO, |acc, &c| self.add(self.mul(acc, x), c))
    }

    pub fn dot(&self, a: &[FieldElement], b: &[FieldElement]) -> FieldElement {
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .fold(FieldElement::ZERO, |acc, (&x, &y)| self.add(acc, self.mul(x, y)))
    }

    /// Solves `A x = b` by Gauss-Jordan elimination.
    pub fn solve(&self, a: &Matrix, b: &[FieldElement]) -> Result<Vec<FieldElement>, FieldError> {
        if a.rows != a.cols {
            return Err(FieldError::Dimension(format!("{}x{} matrix is not square", a.rows, a.cols)));
        }
        if b.len() != a.rows {
            return Err(FieldError::Dimension(format!("rhs has {} entries, expected {}", b.len(), a.rows)));
        }
        let n = a.rows;
        let mut aug = Matrix::zeros(n, n + 1);
        for r in 0..n {
            aug.row_mut(r)[..n].copy_from_slice(a.row(r));
            aug.row_mut(r)[n] = b[r];
        }
        self.reduce(&mut aug, n)?;
        Ok((0..n).map(|r| aug.get(r, n)).collect())
    }

    /// Inverse of a square matrix.
    pub fn inverse(&self, a: &Matrix) -> Result<Matrix, FieldError> {
        if a.rows != a.cols {
            return Err(FieldError::Dimension(format!("{}x{} matrix is not square", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut aug = Matrix::zeros(n, 2 * n);
        for r in 0..n {
            aug.row_mut(r)[..n].copy_from_slice(a.row(r));
            aug.set(r, n + r, FieldElement::ONE);
        }
        self.reduce(&mut aug, n)?;
        let mut out = Matrix::zeros(n, n);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&aug.row(r)[n..]);
        }
        Ok(out)
    }

    pub fn mat_vec(&self, a: &Matrix, x: &[FieldElement]) -> Vec<FieldElement> {
        (0..a.rows).map(|r| self.dot(a.row(r), x)).collect()
    }

    pub fn mat_mul(&self, a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.cols, b.rows);
        let mut out = Matrix::zeros(a.rows, b.cols);
        for r in 0..a.rows {
            for k in 0..a.cols {
                let x = a.get(r, k);
                if x.is_zero() {
                    continue;
                }
                for c in 0..b.cols {
                    let cur = out.get(r, c);
                    out.set(r, c, self.add(cur, self.mul(x, b.get(k, c))));
                }
            }
        }
        out
    }

    // Brings the left `pivot_cols` columns of `m` to the identity. Pivot is the
    // first nonzero entry at or below the diagonal.
    fn reduce(&self, m: &mut Matrix, pivot_cols: usize) -> Result<(), FieldError> {
        for col in 0..pivot_cols {
            let pivot = (col..m.rows).find(|&r| !m.get(r, col).is_zero()).ok_or(FieldError::Singular)?;
            m.swap_rows(pivot, col);
            let inv = self.inv(m.get(col, col))?;
            for c in 0..m.cols {
                let v = m.get(col, c);
                m.set(col, c, self.mul(v, inv));
            }
            for r in 0..m.rows {
                if r == col {
                    continue;
                }
                let factor = m.get(r, col);
                if factor.is_zero() {
                    continue;
                }
                for c in 0..m.cols {
                    let v = self.sub(m.get(r, c), self.mul(factor, m.get(col, c)));
                    m.set(r, c, v);
                }
            }
        }
        Ok(())
    }
}

/// Row-major dense matrix of field elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<FieldElement>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![FieldElement::ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, FieldElement::ONE);
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<FieldElement>>) -> Result<Self, FieldError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(FieldError::Dimension("ragged rows".into()));
        }
        Ok(Matrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> FieldElement {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: FieldElement) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[FieldElement] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [FieldElement] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }
}

/// Deterministic Miller-Rabin for all 64-bit inputs.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n % p == 0 {
            return n == p;
        }
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut acc = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = mulmod(acc, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        acc
    };
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f13() -> PrimeField {
        PrimeField::new(13).unwrap()
    }

    fn fe(v: u64) -> FieldElement {
        FieldElement(v)
    }

    #[test]
    fn addition_examples() {
        let f = f13();
        assert_eq!(f.add(fe(10), fe(5)), fe(2));
        assert_eq!(f.add(fe(0), fe(7)), fe(7));
        assert_eq!(f.add(fe(12), fe(1)), fe(0));
    }

    #[test]
    fn checked_add_rejects_foreign_operand() {
        let f = f13();
        assert!(matches!(f.checked_add(fe(20), fe(1)), Err(FieldError::Modulus { value: 20, modulus: 13 })));
        assert_eq!(f.checked_add(fe(3), fe(4)).unwrap(), fe(7));
    }

    #[test]
    fn inverse_examples() {
        let f = f13();
        assert_eq!(f.inv(fe(12)).unwrap(), fe(12));
        assert_eq!(f.inv(fe(1)).unwrap(), fe(1));
        // brute force
        let three_inv = (1..13).find(|x| (3 * x) % 13 == 1).unwrap();
        assert_eq!(three_inv, 9);
        assert_eq!(f.inv(fe(3)).unwrap(), fe(three_inv));
        assert_eq!(f.inv(fe(0)), Err(FieldError::DivisionByZero));
    }

    #[test]
    fn solve_examples() {
        let f = f13();
        let id = Matrix::identity(3);
        let b = vec![fe(4), fe(11), fe(0)];
        assert_eq!(f.solve(&id, &b).unwrap(), b);

        let a = Matrix::from_rows(vec![vec![fe(2), fe(0)], vec![fe(0), fe(3)]]).unwrap();
        assert_eq!(f.solve(&a, &[fe(4), fe(6)]).unwrap(), vec![fe(2), fe(2)]);
    }

    #[test]
    fn solve_random_5x5_mod_101() {
        let f = PrimeField::new(101).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut solved = 0;
        while solved < 20 {
            let rows = (0..5).map(|_| f.random_vec(&mut rng, 5)).collect();
            let a = Matrix::from_rows(rows).unwrap();
            let b = f.random_vec(&mut rng, 5);
            match f.solve(&a, &b) {
                Ok(x) => {
                    assert_eq!(f.mat_vec(&a, &x), b);
                    solved += 1;
                }
                Err(FieldError::Singular) => continue,
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn singular_and_ragged() {
        let f = f13();
        let a = Matrix::from_rows(vec![vec![fe(1), fe(2)], vec![fe(2), fe(4)]]).unwrap();
        assert_eq!(f.solve(&a, &[fe(1), fe(1)]), Err(FieldError::Singular));
        assert!(Matrix::from_rows(vec![vec![fe(1)], vec![fe(1), fe(2)]]).is_err());
        assert!(matches!(f.solve(&Matrix::zeros(2, 3), &[fe(0), fe(0)]), Err(FieldError::Dimension(_))));
    }

    #[test]
    fn eval_poly_examples() {
        let f = f13();
        assert_eq!(f.eval_poly(&[fe(7)], fe(5)), fe(7));
        assert_eq!(f.eval_poly(&[fe(0), fe(1)], fe(9)), fe(9));
        let direct = (1 + 2 * 2 + 3 * 4) % 13;
        assert_eq!(f.eval_poly(&[fe(1), fe(2), fe(3)], fe(2)), fe(direct));
        assert_eq!(direct, 4);
    }

    #[test]
    fn primality() {
        assert!(is_prime(13));
        assert!(is_prime(101));
        assert!(is_prime(DEFAULT_MODULUS));
        assert!(is_prime(18_446_744_073_709_551_557));
        assert!(!is_prime(1));
        assert!(!is_prime(91));
        assert!(!is_prime(3_215_031_751));
        assert!(PrimeField::new(12).is_err());
    }

    #[test]
    fn inverse_matrix_round_trip() {
        let f = PrimeField::new(101).unwrap();
        let a = Matrix::from_rows(vec![vec![fe(1), fe(2)], vec![fe(3), fe(4)]]).unwrap();
        let inv = f.inverse(&a).unwrap();
        assert_eq!(f.mat_mul(&a, &inv), Matrix::identity(2));
    }

    fn moduli() -> impl Strategy<Value = u64> {
        prop_oneof![Just(13u64), Just(101u64), Just(DEFAULT_MODULUS)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn solve_round_trips(q in moduli(), seed in any::<u64>(), n in 1usize..6) {
            let f = PrimeField::new(q).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = (0..n).map(|_| f.random_vec(&mut rng, n)).collect();
            let a = Matrix::from_rows(rows).unwrap();
            let b = f.random_vec(&mut rng, n);
            if let Ok(x) = f.solve(&a, &b) {
                prop_assert_eq!(f.mat_vec(&a, &x), b);
            }
        }

        #[test]
        fn inverse_is_involution(q in moduli(), v in any::<u64>()) {
            let f = PrimeField::new(q).unwrap();
            let a = f.element(v);
            prop_assume!(!a.is_zero());
            let inv = f.inv(a).unwrap();
            prop_assert_eq!(f.mul(a, inv), FieldElement::ONE);
            prop_assert_eq!(f.inv(inv).unwrap(), a);
        }

        #[test]
        fn field_axioms(q in moduli(), a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let f = PrimeField::new(q).unwrap();
            let (a, b, c) = (f.element(a), f.element(b), f.element(c));
            prop_assert_eq!(f.add(f.add(a, b), c), f.add(a, f.add(b, c)));
            prop_assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
            prop_assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
            prop_assert_eq!(f.sub(f.add(a, b), b), a);
        }

        #[test]
        fn add_mul_match_wide_arithmetic(q in prop_oneof![Just(13u64), Just((1u64 << 32) - 5), Just(4_294_967_311u64), Just(18_446_744_073_709_551_557u64)],
                                        a in any::<u64>(), b in any::<u64>()) {
            let f = PrimeField::new(q).unwrap();
            let (a, b) = (f.element(a), f.element(b));
            let wide = q as u128;
            prop_assert_eq!(f.add(a, b).0 as u128, (a.0 as u128 + b.0 as u128) % wide);
            prop_assert_eq!(f.mul(a, b).0 as u128, (a.0 as u128 * b.0 as u128) % wide);
        }
    }
}
