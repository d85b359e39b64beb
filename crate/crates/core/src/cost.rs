//! Communication cost model, in floating-point values moved between kernels.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::einsum::{project, EinSumExpr, Label};
use crate::error::{Error, Result};
use crate::partition::join_cardinality;
use crate::tensor::{Bound, Partition};

/// Number of values transferred.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct CostUnits(pub u64);

impl CostUnits {
    pub const ZERO: CostUnits = CostUnits(0);

    pub fn get(self) -> u64 {
        self.0
    }
}

impl Add for CostUnits {
    type Output = CostUnits;
    fn add(self, rhs: CostUnits) -> CostUnits {
        CostUnits(self.0.checked_add(rhs.0).expect("cost overflow"))
    }
}

impl AddAssign for CostUnits {
    fn add_assign(&mut self, rhs: CostUnits) {
        *self = *self + rhs;
    }
}

impl Sum for CostUnits {
    fn sum<I: Iterator<Item = CostUnits>>(iter: I) -> CostUnits {
        iter.fold(CostUnits::ZERO, Add::add)
    }
}

impl fmt::Display for CostUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn to_units(v: u128) -> Result<CostUnits> {
    u64::try_from(v)
        .map(CostUnits)
        .map_err(|_| Error::Plan(format!("cost {v} overflows 64 bits")))
}

fn chunk_volume(b: &[usize], d: &[usize]) -> u128 {
    b.iter().zip(d).map(|(&b, &d)| (b / d) as u128).product()
}

fn slot_labels(expr: &EinSumExpr) -> (&[Label], &[Label]) {
    let ly: &[Label] = if expr.arity() == 2 {
        expr.input_labels(1)
    } else {
        &[]
    };
    (expr.input_labels(0), ly)
}

fn check_shapes(expr: &EinSumExpr, b_xy: &Bound, d: &Partition) -> Result<Vec<Label>> {
    let lxy = expr.xy_labels();
    if b_xy.rank() != lxy.len() || d.rank() != lxy.len() {
        return Err(Error::Shape(format!(
            "bound {b_xy} and partition {d} must both have {} entries",
            lxy.len()
        )));
    }
    d.check_divides(b_xy)?;
    Ok(lxy)
}

/// Cost of shipping operand chunks to every join: `N * (nX + nY)`.
pub fn cost_join(expr: &EinSumExpr, b_xy: &Bound, d: &Partition) -> Result<CostUnits> {
    let lxy = check_shapes(expr, b_xy, d)?;
    let (lx, ly) = slot_labels(expr);
    let n = join_cardinality(lx, ly, d)? as u128;
    let mut per_join = 0u128;
    let mut start = 0;
    for ls in expr.all_input_labels() {
        let end = start + ls.len();
        per_join += chunk_volume(&b_xy[start..end], &d[start..end]);
        start = end;
    }
    debug_assert_eq!(start, lxy.len());
    to_units(n * per_join)
}

/// Cost of aggregating partial results: `(N / nAgg) * (nAgg - 1) * nZ`.
pub fn cost_agg(expr: &EinSumExpr, b_xy: &Bound, d: &Partition) -> Result<CostUnits> {
    let lxy = check_shapes(expr, b_xy, d)?;
    let (lx, ly) = slot_labels(expr);
    let n = join_cardinality(lx, ly, d)? as u128;
    let n_agg: u128 = project(d, &expr.agg_labels(), &lxy)?
        .iter()
        .map(|&x| x as u128)
        .product();
    let bz = project(b_xy, expr.out_labels(), &lxy)?;
    let dz = project(d, expr.out_labels(), &lxy)?;
    to_units(n / n_agg * (n_agg - 1) * chunk_volume(&bz, &dz))
}

/// Cost of moving a tensor of bound `b` from partitioning `d_prod` to
/// `d_cons`. Zero when they agree.
pub fn cost_repart(d_cons: &Partition, d_prod: &Partition, b: &Bound) -> Result<CostUnits> {
    if d_cons.rank() != b.rank() || d_prod.rank() != b.rank() {
        return Err(Error::Shape(format!(
            "repartition {d_prod} -> {d_cons} of bound {b}: rank mismatch"
        )));
    }
    d_cons.check_divides(b)?;
    d_prod.check_divides(b)?;
    let n: u128 = b.iter().map(|&x| x as u128).product();
    let n_p = chunk_volume(b, d_prod);
    let n_c = chunk_volume(b, d_cons);
    let n_int: u128 = b
        .iter()
        .zip(d_prod.iter().zip(d_cons.iter()))
        .map(|(&b, (&p, &c))| (b / p).min(b / c) as u128)
        .product();
    // (nC/nInt - 1) * (n/nC) * (nC + nP), kept exact by a single division
    let mut cost = (n_c - n_int) * n * (n_c + n_p) / (n_int * n_c);
    if n_p != n_int {
        cost += n_p * n / n_c;
    }
    to_units(cost)
}

/// Join plus aggregation cost of one expression under `d`.
pub fn einsum_cost(expr: &EinSumExpr, b_xy: &Bound, d: &Partition) -> Result<CostUnits> {
    Ok(cost_join(expr, b_xy, d)? + cost_agg(expr, b_xy, d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::einsum::{AggOp, MapOp};

    fn big() -> Bound {
        Bound::from([8000, 8000, 8000, 8000])
    }

    #[test]
    fn matmul_regressions() {
        let e = EinSumExpr::matmul();
        let d = Partition::from([4, 4, 4, 4]);
        assert_eq!(cost_join(&e, &big(), &d).unwrap(), CostUnits(512_000_000));
        assert_eq!(cost_agg(&e, &big(), &d).unwrap(), CostUnits(192_000_000));
        assert_eq!(einsum_cost(&e, &big(), &d).unwrap(), CostUnits(704_000_000));
        let d = Partition::from([1, 64, 64, 1]);
        assert_eq!(
            einsum_cost(&e, &big(), &d).unwrap(),
            CostUnits(4_160_000_000)
        );
    }

    #[test]
    fn no_aggregation_when_reduced_label_unsplit() {
        let e = EinSumExpr::matmul();
        let d = Partition::from([4, 1, 1, 4]);
        assert_eq!(
            cost_agg(&e, &Bound::from([8, 8, 8, 8]), &d).unwrap(),
            CostUnits::ZERO
        );
    }

    #[test]
    fn unary_join_cost() {
        let e = EinSumExpr::unary(&["i"], &["i", "j"], MapOp::Identity, Some(AggOp::Sum)).unwrap();
        let b = Bound::from([8, 8]);
        let d = Partition::from([2, 2]);
        // 4 joins, each reads a 4x4 chunk
        assert_eq!(cost_join(&e, &b, &d).unwrap(), CostUnits(64));
        // 2 groups of 2, one extra chunk of 4 each
        assert_eq!(cost_agg(&e, &b, &d).unwrap(), CostUnits(8));
    }

    #[test]
    fn repart_examples() {
        let c = |cons: [usize; 2], prod: [usize; 2], b: [usize; 2]| {
            cost_repart(
                &Partition::from(cons),
                &Partition::from(prod),
                &Bound::from(b),
            )
            .unwrap()
            .get()
        };
        assert_eq!(c([4, 1], [2, 4], [8, 8]), 320);
        assert_eq!(c([2, 2], [1, 1], [4, 4]), 64);
        assert_eq!(c([2, 2], [2, 2], [4, 4]), 0);
    }

    #[test]
    fn repart_oracle_formula() {
        // direct float evaluation of the formula on a grid of cases
        let b = [16usize, 8];
        let parts = [1usize, 2, 4, 8];
        for &a in &parts {
            for &bb in &parts {
                for &c in &parts {
                    for &dd in &parts {
                        let (np, nc) = (
                            (b[0] / a * (b[1] / bb)) as f64,
                            (b[0] / c * (b[1] / dd)) as f64,
                        );
                        let nint = ((b[0] / a).min(b[0] / c) * (b[1] / bb).min(b[1] / dd)) as f64;
                        let n = 128.0;
                        let mut want = (nc / nint - 1.0) * (n / nc) * (nc + np);
                        if np != nint {
                            want += np * n / nc;
                        }
                        let got = cost_repart(
                            &Partition::from([c, dd]),
                            &Partition::from([a, bb]),
                            &Bound::from(b),
                        )
                        .unwrap()
                        .get() as f64;
                        assert!(
                            (got - want).abs() < 1.0,
                            "{a},{bb} -> {c},{dd}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let e = EinSumExpr::matmul();
        assert!(cost_join(&e, &Bound::from([8, 8]), &Partition::from([1, 1])).is_err());
        assert!(cost_join(
            &e,
            &Bound::from([8, 8, 8, 8]),
            &Partition::from([3, 1, 1, 1])
        )
        .is_err());
    }
}
