//! Partition vectors for an expression: join cardinality, the number of
//! power-of-two partitionings, and enumeration of the viable set that yields
//! exactly `p` kernel calls.
//!
//! A partition vector `d` is indexed by the concatenated operand labels
//! `lXY`; entries belonging to the same label must agree (co-partitioning).

use crate::einsum::{project, EinSumExpr, Label};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Partition};

/// Checks that every label carries one partition count across `lxy`.
pub fn check_copartitioned(lxy: &[Label], d: &[usize]) -> Result<()> {
    if lxy.len() != d.len() {
        return Err(Error::JoinSchema(format!(
            "partition vector has {} entries for {} labels",
            d.len(),
            lxy.len()
        )));
    }
    for i in 0..lxy.len() {
        for j in 0..i {
            if lxy[i] == lxy[j] && d[i] != d[j] {
                return Err(Error::JoinSchema(format!(
                    "label `{}` partitioned {} ways and {} ways",
                    lxy[i], d[j], d[i]
                )));
            }
        }
    }
    if d.contains(&0) {
        return Err(Error::JoinSchema("zero partition count".into()));
    }
    Ok(())
}

/// Number of join results `N = prod d[lX ⊙ lY; lXY]`. `ly` is empty for
/// unary expressions.
pub fn join_cardinality(lx: &[Label], ly: &[Label], d: &[usize]) -> Result<u64> {
    let lxy: Vec<Label> = lx.iter().chain(ly).cloned().collect();
    check_copartitioned(&lxy, d)?;
    let mut distinct: Vec<Label> = Vec::new();
    for l in &lxy {
        if !distinct.contains(l) {
            distinct.push(l.clone());
        }
    }
    Ok(project(d, &distinct, &lxy)?
        .iter()
        .map(|&x| x as u64)
        .product())
}

/// Number of ways to place `balls` doublings into `buckets` labels:
/// `C(balls + buckets - 1, buckets - 1)`.
pub fn count_partitionings(balls: u32, buckets: u32) -> u128 {
    assert!(buckets >= 1, "at least one bucket");
    let n = (balls + buckets - 1) as u128;
    let k = (buckets - 1).min(balls) as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Output partition `d[lZ; lXY]`.
pub fn output_partition(d: &Partition, lz: &[Label], lxy: &[Label]) -> Result<Partition> {
    project(d, lz, lxy).map(Partition::new)
}

/// All viable partition vectors for one expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViableSet {
    pub p: u64,
    pub vectors: Vec<Partition>,
}

impl ViableSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn log2_exact(p: u64) -> Result<u32> {
    if p == 0 || !p.is_power_of_two() {
        return Err(Error::Plan(format!("p = {p} is not a power of two")));
    }
    Ok(p.trailing_zeros())
}

/// Compositions of `balls` into `buckets` parts, each part capped by `caps`.
fn compositions(balls: u32, caps: &[u32], prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let i = prefix.len();
    if i == caps.len() {
        if balls == 0 {
            out.push(prefix.clone());
        }
        return;
    }
    if i + 1 == caps.len() {
        if balls <= caps[i] {
            prefix.push(balls);
            out.push(prefix.clone());
            prefix.pop();
        }
        return;
    }
    for k in 0..=balls.min(caps[i]) {
        prefix.push(k);
        compositions(balls - k, caps, prefix, out);
        prefix.pop();
    }
}

/// Every partition vector over `lXY` with power-of-two entries, co-partitioned
/// shared labels, join cardinality exactly `p`, and entries dividing `b_xy`.
/// Vectors are returned in lexicographic order.
pub fn viable(expr: &EinSumExpr, p: u64, b_xy: &Bound) -> Result<ViableSet> {
    let n = log2_exact(p)?;
    let lxy = expr.xy_labels();
    if b_xy.rank() != lxy.len() {
        return Err(Error::Shape(format!(
            "bound {b_xy} does not match {} operand labels",
            lxy.len()
        )));
    }
    let distinct = expr.distinct_labels();
    let label_bound = project(b_xy, &distinct, &lxy)?;
    // largest power of two dividing each label's extent
    let caps: Vec<u32> = label_bound.iter().map(|b| b.trailing_zeros()).collect();
    let mut exps = Vec::new();
    compositions(n, &caps, &mut Vec::new(), &mut exps);
    let mut vectors: Vec<Partition> = exps
        .into_iter()
        .map(|e| {
            let per_label: Vec<usize> = e.iter().map(|&k| 1usize << k).collect();
            Partition::new(
                lxy.iter()
                    .map(|l| per_label[distinct.iter().position(|m| m == l).expect("label")])
                    .collect(),
            )
        })
        .collect();
    vectors.sort();
    vectors.dedup();
    debug_assert!(vectors.iter().all(|d| {
        let ly: &[Label] = if expr.arity() == 2 {
            expr.input_labels(1)
        } else {
            &[]
        };
        join_cardinality(expr.input_labels(0), ly, d).ok() == Some(p)
    }));
    Ok(ViableSet { p, vectors })
}

/// Largest power of two `p' <= p` whose viable set is nonempty.
pub fn fallback_p(expr: &EinSumExpr, p: u64, b_xy: &Bound) -> Result<u64> {
    log2_exact(p)?;
    let lxy = expr.xy_labels();
    let distinct = expr.distinct_labels();
    let label_bound = project(b_xy, &distinct, &lxy)?;
    let max_exp: u32 = label_bound.iter().map(|b| b.trailing_zeros()).sum();
    Ok(p.min(1u64 << max_exp.min(63)))
}

/// Every power-of-two partition of `bound` whose product is at most `p`.
/// These are the storage partitionings considered for graph inputs.
pub fn input_partitionings(bound: &Bound, p: u64) -> Vec<Partition> {
    let caps: Vec<u32> = bound.iter().map(|b| b.trailing_zeros()).collect();
    let max = if p == 0 { 0 } else { 63 - p.leading_zeros() };
    let mut out = Vec::new();
    for n in 0..=max {
        let mut exps = Vec::new();
        compositions(n, &caps, &mut Vec::new(), &mut exps);
        out.extend(
            exps.into_iter()
                .map(|e| Partition::new(e.iter().map(|&k| 1usize << k).collect())),
        );
    }
    out.sort();
    out
}
