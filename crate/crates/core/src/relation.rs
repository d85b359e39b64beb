//! Tensor relations: a tensor stored as a set of `(key, chunk)` pairs, and the
//! relational operators (join, aggregate, repartition) that evaluate an
//! expression chunk by chunk.
//!
//! Keys range over `I(part)`. Chunk `k` covers the block starting at
//! `k * chunk_bound`, so a tensor with bound `b` chunked by `d` has
//! `part = d` and `chunk_bound = b / d`.

use std::collections::BTreeMap;

use crate::einsum::{project, AggOp, EinSumExpr, Label, ScalarOp};
use crate::error::{Error, Result};
use crate::par;
use crate::partition::check_copartitioned;
use crate::tensor::{all_indices, strides, Bound, Partition, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRelation {
    part: Partition,
    chunk_bound: Bound,
    chunks: BTreeMap<Vec<usize>, Tensor>,
}

impl TensorRelation {
    /// Builds a relation, checking that every key lies in `I(part)` and every
    /// chunk has bound `chunk_bound`.
    pub fn from_chunks(
        part: Partition,
        chunk_bound: Bound,
        chunks: BTreeMap<Vec<usize>, Tensor>,
    ) -> Result<Self> {
        for (key, t) in &chunks {
            if key.len() != part.rank() || key.iter().zip(part.iter()).any(|(k, p)| k >= p) {
                return Err(Error::Shape(format!(
                    "key {key:?} outside partition {part}"
                )));
            }
            if *t.bound() != chunk_bound {
                return Err(Error::Shape(format!(
                    "chunk {key:?} has bound {}, expected {chunk_bound}",
                    t.bound()
                )));
            }
        }
        Ok(TensorRelation {
            part,
            chunk_bound,
            chunks,
        })
    }

    pub fn part(&self) -> &Partition {
        &self.part
    }

    pub fn chunk_bound(&self) -> &Bound {
        &self.chunk_bound
    }

    pub fn chunks(&self) -> &BTreeMap<Vec<usize>, Tensor> {
        &self.chunks
    }

    pub fn get(&self, key: &[usize]) -> Option<&Tensor> {
        self.chunks.get(key)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.chunks.len() == self.part.volume()
    }

    /// Bound of the represented tensor. Only defined when keys and chunks
    /// have the same rank.
    pub fn bound(&self) -> Result<Bound> {
        if self.part.rank() != self.chunk_bound.rank() {
            return Err(Error::Shape(format!(
                "keys of rank {} over chunks of rank {} do not describe one tensor",
                self.part.rank(),
                self.chunk_bound.rank()
            )));
        }
        Ok(Bound::new(
            self.part
                .iter()
                .zip(self.chunk_bound.iter())
                .map(|(p, c)| p * c)
                .collect(),
        ))
    }

    fn first_missing(&self) -> Option<Vec<usize>> {
        all_indices(&self.part)
            .into_iter()
            .find(|k| !self.chunks.contains_key(k))
    }
}

/// Splits `t` into `d.volume()` equal chunks.
pub fn chunk(t: &Tensor, d: &Partition) -> Result<TensorRelation> {
    let c = d.chunk_bound(t.bound())?;
    let chunks = all_indices(d)
        .into_iter()
        .map(|key| {
            let offset: Vec<usize> = key.iter().zip(c.iter()).map(|(k, c)| k * c).collect();
            let block = t.block(&offset, &c);
            (key, block)
        })
        .collect();
    Ok(TensorRelation {
        part: d.clone(),
        chunk_bound: c,
        chunks,
    })
}

/// Reassembles a complete relation into one tensor.
pub fn assemble(r: &TensorRelation) -> Result<Tensor> {
    let bound = r.bound()?;
    if let Some(missing) = r.first_missing() {
        return Err(Error::IncompleteRelation(missing));
    }
    let mut out = Tensor::zeros(bound);
    for (key, t) in &r.chunks {
        let offset: Vec<usize> = key
            .iter()
            .zip(r.chunk_bound.iter())
            .map(|(k, c)| k * c)
            .collect();
        out.write_block(&offset, t);
    }
    Ok(out)
}

/// Whether `r` holds exactly the entries of `t`: for every index `j`,
/// `t[j] == r[j / c][j mod c]` with `c` the chunk bound.
pub fn equivalent(t: &Tensor, r: &TensorRelation) -> bool {
    match r.bound() {
        Ok(b) if b == *t.bound() && r.is_complete() => {}
        _ => return false,
    }
    let c = &r.chunk_bound;
    let mut key = vec![0; c.rank()];
    let mut local = vec![0; c.rank()];
    let mut ok = true;
    crate::tensor::for_each_index(t.bound(), |j| {
        if !ok {
            return;
        }
        for d in 0..j.len() {
            key[d] = j[d] / c[d];
            local[d] = j[d] % c[d];
        }
        ok = r.chunks[&key].get(&local) == t.get(j);
    });
    ok
}

/// The per-chunk computation of an expression: the same expression applied
/// to chunks whose extents are the full bounds divided by the partition.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    inputs: Vec<Vec<Label>>,
    out: Vec<Label>,
    op: ScalarOp,
    agg: Option<AggOp>,
    distinct: Vec<Label>,
    local: Vec<usize>,
}

impl KernelSpec {
    pub fn new(expr: &EinSumExpr, b_xy: &Bound, d: &Partition) -> Result<Self> {
        let lxy = expr.xy_labels();
        check_copartitioned(&lxy, d)?;
        let c = d.chunk_bound(b_xy)?;
        let distinct = expr.distinct_labels();
        let local = project(&c, &distinct, &lxy)?;
        Ok(KernelSpec {
            inputs: expr.all_input_labels().to_vec(),
            out: expr.out_labels().to_vec(),
            op: expr.op(),
            agg: expr.agg(),
            distinct,
            local,
        })
    }

    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    /// Distinct labels `lX ⊙ lY`, the key schema of join results.
    pub fn distinct_labels(&self) -> &[Label] {
        &self.distinct
    }

    pub fn input_labels(&self, slot: usize) -> &[Label] {
        &self.inputs[slot]
    }

    pub fn out_labels(&self) -> &[Label] {
        &self.out
    }

    pub fn agg(&self) -> Option<AggOp> {
        self.agg
    }

    fn extent_of(&self, labels: &[Label]) -> Bound {
        Bound::new(project(&self.local, labels, &self.distinct).expect("labels of this kernel"))
    }

    pub fn operand_bound(&self, slot: usize) -> Bound {
        self.extent_of(&self.inputs[slot])
    }

    pub fn out_bound(&self) -> Bound {
        self.extent_of(&self.out)
    }

    /// Scalar operations per call.
    pub fn flops(&self) -> u64 {
        self.local.iter().map(|&x| x as u64).product()
    }

    /// Runs the kernel on operand chunks. Division by zero yields
    /// [`Error::Poisoned`] with a placeholder vertex name.
    pub fn eval(&self, operands: &[&Tensor]) -> Result<Tensor> {
        if operands.len() != self.arity() {
            return Err(Error::Shape(format!(
                "kernel takes {} operands, got {}",
                self.arity(),
                operands.len()
            )));
        }
        for (slot, t) in operands.iter().enumerate() {
            let want = self.operand_bound(slot);
            if *t.bound() != want {
                return Err(Error::Shape(format!(
                    "operand {slot} has bound {}, kernel expects {want}",
                    t.bound()
                )));
            }
        }
        let pos = |l: &Label| self.distinct.iter().position(|m| m == l).expect("label");
        // output labels outermost, reduced labels innermost
        let mut order: Vec<usize> = self.out.iter().map(pos).collect();
        let reduced: Vec<usize> = (0..self.distinct.len())
            .filter(|u| !order.contains(u))
            .collect();
        order.extend(reduced);
        let ext: Vec<usize> = order.iter().map(|&u| self.local[u]).collect();
        let operand_strides: Vec<Vec<usize>> = self
            .inputs
            .iter()
            .zip(operands)
            .map(|(ls, t)| {
                let s = strides(t.bound());
                order
                    .iter()
                    .map(|&u| {
                        ls.iter()
                            .position(|l| *l == self.distinct[u])
                            .map_or(0, |p| s[p])
                    })
                    .collect()
            })
            .collect();
        let inner: usize = ext[self.out.len()..].iter().product();
        let total: usize = ext.iter().product();
        let mut out = vec![0.0; total / inner];
        let mut idx = vec![0usize; ext.len()];
        let mut offs = vec![0usize; operands.len()];
        let poisoned = || Error::Poisoned {
            vertex: "<kernel>".into(),
        };

        for step in 0..total {
            let x = operands[0].values()[offs[0]];
            let v = match self.op {
                ScalarOp::Join(j) => j
                    .apply(x, operands[1].values()[offs[1]])
                    .ok_or_else(poisoned)?,
                ScalarOp::Map(m) => m.apply(x),
            };
            let o = step / inner;
            out[o] = if step % inner == 0 {
                v
            } else {
                self.agg
                    .expect("reduced labels imply an aggregation")
                    .combine(out[o], v)
            };
            let mut k = ext.len();
            while k > 0 {
                k -= 1;
                idx[k] += 1;
                for (off, s) in offs.iter_mut().zip(&operand_strides) {
                    *off += s[k];
                }
                if idx[k] < ext[k] {
                    break;
                }
                for (off, s) in offs.iter_mut().zip(&operand_strides) {
                    *off -= s[k] * ext[k];
                }
                idx[k] = 0;
            }
        }
        Tensor::new(self.out_bound(), out)
    }
}

/// Natural join of operand relations on shared labels, applying the kernel
/// to each matched tuple. Result keys range over `lX ⊙ lY`; chunks carry
/// the kernel's output labels.
pub fn tra_join(
    spec: &KernelSpec,
    rx: &TensorRelation,
    ry: Option<&TensorRelation>,
) -> Result<TensorRelation> {
    let rels: Vec<&TensorRelation> = std::iter::once(rx).chain(ry).collect();
    if rels.len() != spec.arity() {
        return Err(Error::JoinSchema(format!(
            "kernel takes {} operands, got {}",
            spec.arity(),
            rels.len()
        )));
    }
    let mut part_u: Vec<Option<usize>> = vec![None; spec.distinct.len()];
    for (slot, r) in rels.iter().enumerate() {
        let ls = spec.input_labels(slot);
        if r.part.rank() != ls.len() {
            return Err(Error::JoinSchema(format!(
                "operand {slot} has {}-dimensional keys for {} labels",
                r.part.rank(),
                ls.len()
            )));
        }
        if *r.chunk_bound() != spec.operand_bound(slot) {
            return Err(Error::JoinSchema(format!(
                "operand {slot} chunks are {}, kernel expects {}",
                r.chunk_bound(),
                spec.operand_bound(slot)
            )));
        }
        for (l, &p) in ls.iter().zip(r.part.iter()) {
            let u = spec.distinct.iter().position(|m| m == l).expect("label");
            match part_u[u] {
                Some(q) if q != p => {
                    return Err(Error::JoinSchema(format!(
                        "label `{l}` keyed {q} ways and {p} ways"
                    )))
                }
                _ => part_u[u] = Some(p),
            }
        }
    }
    let part_u = Partition::new(
        part_u
            .into_iter()
            .map(|p| p.expect("every label keyed"))
            .collect(),
    );
    let keys = all_indices(&part_u);
    let results = par::try_map(&keys, |k| {
        let mut args = Vec::with_capacity(rels.len());
        for (slot, r) in rels.iter().enumerate() {
            let kk = project(k, spec.input_labels(slot), &spec.distinct)?;
            args.push(r.get(&kk).ok_or(Error::IncompleteRelation(kk))?);
        }
        spec.eval(&args)
    })?;
    TensorRelation::from_chunks(
        part_u,
        spec.out_bound(),
        keys.into_iter().zip(results).collect(),
    )
}

/// Groups chunks by their key restricted to `l_keep` and folds each group
/// with `op`, in lexicographic key order. `l` names the key dimensions.
pub fn tra_aggregate(
    r: &TensorRelation,
    op: AggOp,
    l: &[Label],
    l_keep: &[Label],
) -> Result<TensorRelation> {
    if l.len() != r.part.rank() {
        return Err(Error::Shape(format!(
            "{} key labels for keys of rank {}",
            l.len(),
            r.part.rank()
        )));
    }
    let part = Partition::new(project(&r.part, l_keep, l)?);
    let mut groups: BTreeMap<Vec<usize>, Tensor> = BTreeMap::new();
    for (key, t) in &r.chunks {
        let g = project(key, l_keep, l)?;
        match groups.get_mut(&g) {
            None => {
                groups.insert(g, t.clone());
            }
            Some(acc) => {
                for (a, &v) in acc.values_mut().iter_mut().zip(t.values()) {
                    *a = op.combine(*a, v);
                }
            }
        }
    }
    TensorRelation::from_chunks(part, r.chunk_bound.clone(), groups)
}

/// Re-chunks a complete relation under a new partition.
pub fn tra_repartition(r: &TensorRelation, d_new: &Partition) -> Result<TensorRelation> {
    let bound = r.bound()?;
    if let Some(missing) = r.first_missing() {
        return Err(Error::IncompleteRelation(missing));
    }
    let old = &r.chunk_bound;
    let new = d_new.chunk_bound(&bound)?;
    let rank = bound.rank();
    let chunks = all_indices(d_new)
        .into_iter()
        .map(|key| {
            let lo: Vec<usize> = (0..rank).map(|i| key[i] * new[i]).collect();
            // old keys whose blocks meet this one, per dimension
            let first: Vec<usize> = (0..rank).map(|i| lo[i] / old[i]).collect();
            let span: Vec<usize> = (0..rank)
                .map(|i| (lo[i] + new[i] - 1) / old[i] - first[i] + 1)
                .collect();
            let mut out = Tensor::zeros(new.clone());
            for rel in all_indices(&span) {
                let src_key: Vec<usize> = (0..rank).map(|i| first[i] + rel[i]).collect();
                let src = &r.chunks[&src_key];
                let mut from = vec![0; rank];
                let mut to = vec![0; rank];
                let mut ext = vec![0; rank];
                for i in 0..rank {
                    let s0 = src_key[i] * old[i];
                    let a = lo[i].max(s0);
                    let b = (lo[i] + new[i]).min(s0 + old[i]);
                    from[i] = a - s0;
                    to[i] = a - lo[i];
                    ext[i] = b - a;
                }
                out.write_block(&to, &src.block(&from, &ext));
            }
            (key, out)
        })
        .collect();
    Ok(TensorRelation {
        part: d_new.clone(),
        chunk_bound: new,
        chunks,
    })
}

/// Result of evaluating one expression over relations.
#[derive(Debug, Clone, PartialEq)]
pub struct TraRun {
    pub relation: TensorRelation,
    pub kernel_calls: usize,
}

/// Evaluates `expr` under partition vector `d` (over `lXY`) as a join
/// followed by an aggregation. Operand relations must already be chunked by
/// their slice of `d`.
pub fn run_einsum_tr(
    expr: &EinSumExpr,
    d: &Partition,
    rx: &TensorRelation,
    ry: Option<&TensorRelation>,
) -> Result<TraRun> {
    let lxy = expr.xy_labels();
    check_copartitioned(&lxy, d)?;
    let rels: Vec<&TensorRelation> = std::iter::once(rx).chain(ry).collect();
    if rels.len() != expr.arity() {
        return Err(Error::Plan(format!(
            "expression takes {} operands, got {}",
            expr.arity(),
            rels.len()
        )));
    }
    let mut b_xy = Vec::with_capacity(lxy.len());
    let mut start = 0;
    for (slot, r) in rels.iter().enumerate() {
        let n = expr.input_labels(slot).len();
        let want = &d[start..start + n];
        if r.part.as_slice() != want {
            return Err(Error::Plan(format!(
                "operand {slot} is partitioned {}, plan needs {}",
                r.part,
                Partition::from(want)
            )));
        }
        b_xy.extend(r.bound()?.iter().copied());
        start += n;
    }
    let spec = KernelSpec::new(expr, &Bound::new(b_xy), d)?;
    let joined = tra_join(&spec, rx, ry)?;
    // with nothing to reduce every group is a singleton, so the op is unused
    let op = expr.agg().unwrap_or(AggOp::Sum);
    let relation = tra_aggregate(&joined, op, spec.distinct_labels(), expr.out_labels())?;
    Ok(TraRun {
        relation,
        kernel_calls: joined.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::einsum::{eval_expr_reference, JoinOp, MapOp};

    fn iota(b: &[usize]) -> Tensor {
        let mut n = 0.0;
        Tensor::from_fn(b.to_vec(), |_| {
            n += 1.0;
            n
        })
    }

    #[test]
    fn chunk_round_trip() {
        let t = iota(&[4, 6]);
        for d in [[1, 1], [2, 3], [4, 2], [4, 6]] {
            let r = chunk(&t, &Partition::from(d)).unwrap();
            assert_eq!(r.len(), d[0] * d[1]);
            assert!(equivalent(&t, &r));
            assert_eq!(assemble(&r).unwrap(), t);
        }
        assert!(matches!(
            chunk(&t, &Partition::from([3, 1])),
            Err(Error::Chunking { dim: 0, .. })
        ));
    }

    #[test]
    fn equivalence_by_hand() {
        // 4x4 with 2x2 chunks: entry (3,1) lives in chunk (1,0) at (1,1)
        let t = iota(&[4, 4]);
        let r = chunk(&t, &Partition::from([2, 2])).unwrap();
        assert_eq!(r.get(&[1, 0]).unwrap().get(&[1, 1]), t.get(&[3, 1]));
        let mut broken = r.chunks().clone();
        broken.get_mut(&vec![0, 1]).unwrap().set(&[0, 0], -1.0);
        let broken =
            TensorRelation::from_chunks(r.part().clone(), r.chunk_bound().clone(), broken).unwrap();
        assert!(!equivalent(&t, &broken));
    }

    #[test]
    fn missing_chunk_is_reported() {
        let t = iota(&[4, 4]);
        let r = chunk(&t, &Partition::from([2, 2])).unwrap();
        let mut part = r.chunks().clone();
        part.remove(&vec![1, 0]);
        let r =
            TensorRelation::from_chunks(r.part().clone(), r.chunk_bound().clone(), part).unwrap();
        assert_eq!(assemble(&r), Err(Error::IncompleteRelation(vec![1, 0])));
        assert!(!equivalent(&t, &r));
    }

    #[test]
    fn matmul_under_each_sixteen_way_plan() {
        let x = iota(&[8, 8]);
        let y = Tensor::from_fn([8, 8], |i| (i[0] as f64) - 2.0 * i[1] as f64);
        let e = EinSumExpr::matmul();
        let want = eval_expr_reference(&e, &[&x, &y]).unwrap();
        for d in [[4, 1, 1, 4], [2, 1, 1, 8], [2, 4, 4, 2], [2, 2, 2, 4]] {
            let d = Partition::from(d);
            let rx = chunk(&x, &Partition::from(&d[0..2])).unwrap();
            let ry = chunk(&y, &Partition::from(&d[2..4])).unwrap();
            let run = run_einsum_tr(&e, &d, &rx, Some(&ry)).unwrap();
            assert_eq!(run.kernel_calls, 16);
            assert_eq!(run.relation.part().as_slice(), &[d[0], d[3]]);
            assert_eq!(assemble(&run.relation).unwrap(), want);
        }
    }

    #[test]
    fn join_keys_keep_one_copy_of_shared_labels() {
        let x = iota(&[8, 8]);
        let e = EinSumExpr::matmul();
        let d = Partition::from([4, 1, 1, 4]);
        let spec = KernelSpec::new(&e, &Bound::from([8, 8, 8, 8]), &d).unwrap();
        let rx = chunk(&x, &Partition::from([4, 1])).unwrap();
        let ry = chunk(&x, &Partition::from([1, 4])).unwrap();
        let j = tra_join(&spec, &rx, Some(&ry)).unwrap();
        assert_eq!(j.part().as_slice(), &[4, 1, 4]);
        assert_eq!(j.len(), 16);
        assert_eq!(spec.flops(), 2 * 8 * 2);
    }

    #[test]
    fn join_rejects_mismatched_keys() {
        let x = iota(&[8, 8]);
        let e = EinSumExpr::matmul();
        let spec = KernelSpec::new(
            &e,
            &Bound::from([8, 8, 8, 8]),
            &Partition::from([2, 2, 2, 2]),
        )
        .unwrap();
        let rx = chunk(&x, &Partition::from([2, 2])).unwrap();
        let ry = chunk(&x, &Partition::from([4, 1])).unwrap();
        assert!(matches!(
            tra_join(&spec, &rx, Some(&ry)),
            Err(Error::JoinSchema(_))
        ));
    }

    #[test]
    fn aggregate_folds_groups() {
        let t = iota(&[4, 4]);
        let r = chunk(&t, &Partition::from([2, 2])).unwrap();
        let l = vec!["a".to_string(), "b".to_string()];
        let s = tra_aggregate(&r, AggOp::Sum, &l, &l[0..1]).unwrap();
        assert_eq!(s.part().as_slice(), &[2]);
        let c00 = r.get(&[0, 0]).unwrap().values();
        let c01 = r.get(&[0, 1]).unwrap().values();
        let want: Vec<f64> = c00.iter().zip(c01).map(|(a, b)| a + b).collect();
        assert_eq!(s.get(&[0]).unwrap().values(), &want[..]);
        let m = tra_aggregate(&r, AggOp::Max, &l, &l[1..2]).unwrap();
        assert_eq!(
            m.get(&[1]).unwrap().values(),
            r.get(&[1, 1]).unwrap().values()
        );
        // keeping every label is the identity
        assert_eq!(tra_aggregate(&r, AggOp::Sum, &l, &l).unwrap(), r);
    }

    #[test]
    fn repartition_preserves_content() {
        let t = iota(&[8, 4]);
        let r = chunk(&t, &Partition::from([2, 4])).unwrap();
        let q = tra_repartition(&r, &Partition::from([8, 1])).unwrap();
        assert!(equivalent(&t, &q));
    }

    #[test]
    fn unary_and_transpose_kernels() {
        let x = Tensor::from_fn([4, 6], |i| i[0] as f64 * 10.0 - i[1] as f64);
        let cases = [
            EinSumExpr::unary(&["i"], &["i", "j"], MapOp::Identity, Some(AggOp::Max)).unwrap(),
            EinSumExpr::unary(&["j", "i"], &["i", "j"], MapOp::Relu, None).unwrap(),
            EinSumExpr::unary(&["j"], &["i", "j"], MapOp::Exp, Some(AggOp::Sum)).unwrap(),
        ];
        for e in &cases {
            let want = eval_expr_reference(e, &[&x]).unwrap();
            for d in [[1, 1], [2, 3], [4, 2]] {
                let d = Partition::from(d);
                let run = run_einsum_tr(e, &d, &chunk(&x, &d).unwrap(), None).unwrap();
                let got = assemble(&run.relation).unwrap();
                assert!(got.max_rel_error(&want).unwrap() < 1e-12, "{d}");
            }
        }
    }

    #[test]
    fn division_by_zero_poisons_kernel() {
        let x = Tensor::filled([2, 2], 1.0);
        let y = Tensor::zeros([2, 2]);
        let e =
            EinSumExpr::binary(&["i", "j"], &["i", "j"], &["i", "j"], JoinOp::Div, None).unwrap();
        let d = Partition::from([2, 1, 2, 1]);
        let p = Partition::from([2, 1]);
        let err = run_einsum_tr(
            &e,
            &d,
            &chunk(&x, &p).unwrap(),
            Some(&chunk(&y, &p).unwrap()),
        );
        assert!(matches!(err, Err(Error::Poisoned { .. })));
    }

    #[test]
    fn bound_needs_matching_ranks() {
        let r = TensorRelation::from_chunks(
            Partition::from([2, 2, 2]),
            Bound::from([3, 3]),
            BTreeMap::new(),
        )
        .unwrap();
        assert!(r.bound().is_err());
    }
}
