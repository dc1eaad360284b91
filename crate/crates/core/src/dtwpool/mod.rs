//! Multi-view graph pooling.
//!
//! Every view scores the nodes SAGPool-style, `s_n = tanh(A_n V W_pool + b_pool)`
//! (with `(A_n + I) / 2` in place of `A_n` when self-loops are on),
//! and keeps its `ceil(r * T)` best nodes. The pooled graph is the union of the
//! per-view selections, so the realized ratio lands in `[r, 1]`. Each survivor
//! is scaled by the largest score it received among the views that kept it.

pub mod softdtw;

use std::collections::BTreeSet;

use crate::diffcore::{DenseArray, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

pub use softdtw::{hard_dtw, softdtw};

/// Surviving nodes of one pooling stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolStage {
    /// Original token positions, strictly increasing.
    pub positions: Vec<usize>,
    /// Gated features of the survivors, one row each.
    pub features: DenseArray,
    /// Survivors over the stage's input node count.
    pub realized_ratio: f64,
}

/// Per-stage pooling history of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoolTrace {
    pub stages: Vec<PoolStage>,
}

impl PoolTrace {
    pub fn final_positions(&self) -> Option<&[usize]> {
        self.stages.last().map(|s| s.positions.as_slice())
    }

    /// Checks strict ordering, nesting and ratio bounds against `ratio`.
    pub fn validate(&self, initial: &[usize], ratio: f64) -> Result<()> {
        let mut prev: &[usize] = initial;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Internal(format!("stage {s} positions not strictly increasing")));
            }
            let prev_set: BTreeSet<_> = prev.iter().collect();
            if !stage.positions.iter().all(|p| prev_set.contains(p)) {
                return Err(Error::Internal(format!("stage {s} is not a subset of its input")));
            }
            let real = stage.positions.len() as f64 / prev.len() as f64;
            if real + 1e-12 < ratio || real > 1.0 {
                return Err(Error::Internal(format!("stage {s} realized ratio {real} outside [{ratio}, 1]")));
            }
            prev = &stage.positions;
        }
        Ok(())
    }
}

pub fn pool_param_names(stage: Option<usize>) -> (String, String) {
    match stage {
        None => ("pool.w".into(), "pool.b".into()),
        Some(s) => (format!("pool.s{s}.w"), format!("pool.s{s}.b")),
    }
}

/// Number of nodes each view keeps.
pub fn topk_count(nodes: usize, ratio: f64) -> usize {
    // the small offset keeps products like 0.7 * 10 from rounding up to 8
    (((ratio * nodes as f64) - 1e-9).ceil() as usize).clamp(1, nodes.max(1))
}

/// Indices of the `ceil(r * T)` largest scores, ascending. Ties prefer the smaller index.
pub fn select_topk(scores: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Argument(format!("pooling ratio must lie in (0, 1], got {ratio}")));
    }
    if scores.is_empty() {
        return Err(Error::Argument("cannot select from zero nodes".into()));
    }
    let k = topk_count(scores.len(), ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Sorted union of per-view selections.
pub fn union_indices(selections: &[Vec<usize>]) -> Vec<usize> {
    let set: BTreeSet<usize> = selections.iter().flatten().copied().collect();
    set.into_iter().collect()
}

/// For each survivor, the view giving its largest score among the views that
/// selected it. Ties go to the lowest view.
pub fn gate_sources(survivors: &[usize], selections: &[Vec<usize>], scores: &[Vec<f64>]) -> Result<Vec<usize>> {
    survivors
        .iter()
        .map(|&i| {
            let mut best: Option<usize> = None;
            for (n, sel) in selections.iter().enumerate() {
                if sel.binary_search(&i).is_ok() && best.is_none_or(|b| scores[n][i] > scores[b][i]) {
                    best = Some(n);
                }
            }
            best.ok_or_else(|| Error::Internal(format!("survivor {i} selected by no view")))
        })
        .collect()
}

/// Attention scores of every view, each a `T x 1` node.
pub fn sag_scores_on_tape(
    tape: &mut Tape,
    adjacency: &[NodeId],
    nodes: NodeId,
    weight: NodeId,
    bias: NodeId,
    self_loops: bool,
) -> Result<Vec<NodeId>> {
    let z = tape.matmul(nodes, weight)?;
    adjacency
        .iter()
        .map(|&a| {
            let msg = crate::graphconv::propagate_on_tape(tape, a, z, self_loops)?;
            let pre = tape.add_bias(msg, bias)?;
            Ok(tape.tanh(pre))
        })
        .collect()
}

/// Output of [`union_pool_on_tape`].
pub struct PooledNodes {
    pub features: NodeId,
    /// Local indices (into the stage input) of the survivors.
    pub survivors: Vec<usize>,
    pub realized_ratio: f64,
}

/// Top-k per view, union across views, and score gating, recorded on `tape`.
pub fn union_pool_on_tape(tape: &mut Tape, nodes: NodeId, scores: &[NodeId], ratio: f64) -> Result<PooledNodes> {
    let t = tape.value(nodes).rows();
    let score_values: Vec<Vec<f64>> = scores.iter().map(|&s| tape.value(s).values().to_vec()).collect();
    let selections = score_values
        .iter()
        .map(|s| select_topk(s, ratio))
        .collect::<Result<Vec<_>>>()?;
    let survivors = union_indices(&selections);
    if survivors.is_empty() {
        return Err(Error::Internal("pooling kept no nodes".into()));
    }
    let sources = gate_sources(&survivors, &selections, &score_values)?;
    let picks: Vec<(NodeId, usize)> = survivors.iter().zip(&sources).map(|(&i, &n)| (scores[n], i)).collect();
    let gate = tape.pick(&picks)?;
    let kept = tape.gather_rows(nodes, &survivors)?;
    let features = tape.mul_rows(kept, gate)?;
    Ok(PooledNodes {
        features,
        realized_ratio: survivors.len() as f64 / t as f64,
        survivors,
    })
}

/// Plain-array scoring with the parameters named `weight`/`bias` in `params`.
pub fn sag_scores(
    adjacency: &[DenseArray],
    nodes: &DenseArray,
    params: &ParamStore,
    weight: &str,
    bias: &str,
    self_loops: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new(params);
    let a: Vec<_> = adjacency.iter().map(|a| tape.constant(a.clone())).collect();
    let v = tape.constant(nodes.clone());
    let (w, b) = (tape.param(weight)?, tape.param(bias)?);
    let ids = sag_scores_on_tape(&mut tape, &a, v, w, b, self_loops)?;
    Ok(ids.iter().map(|&s| tape.value(s).values().to_vec()).collect())
}

/// Plain-array union pooling: `(gated features, survivors, realized ratio)`.
pub fn union_pool(
    selections: &[Vec<usize>],
    nodes: &DenseArray,
    scores: &[Vec<f64>],
) -> Result<(DenseArray, Vec<usize>, f64)> {
    let t = nodes.rows();
    if let Some(&bad) = selections.iter().flatten().find(|&&i| i >= t) {
        return Err(Error::Index {
            what: "union_pool selection",
            index: bad,
            limit: t,
        });
    }
    let mut sorted: Vec<Vec<usize>> = selections.to_vec();
    sorted.iter_mut().for_each(|s| s.sort_unstable());
    let survivors = union_indices(&sorted);
    if survivors.is_empty() {
        return Err(Error::Internal("pooling kept no nodes".into()));
    }
    let sources = gate_sources(&survivors, &sorted, scores)?;
    let rows: Vec<Vec<f64>> = survivors
        .iter()
        .zip(&sources)
        .map(|(&i, &n)| nodes.row(i).iter().map(|v| v * scores[n][i]).collect())
        .collect();
    let ratio = survivors.len() as f64 / t as f64;
    Ok((DenseArray::from_rows(&rows)?, survivors, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::row_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pool_store(d: usize, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_xavier("pool.w", d, 1, rng).unwrap();
        s.insert("pool.b", DenseArray::scalar(0.1)).unwrap();
        s
    }

    #[test]
    fn zero_projection_scores_zero() {
        let mut s = ParamStore::new();
        s.insert_zeros("pool.w", &[3, 1]).unwrap();
        s.insert_zeros("pool.b", &[1]).unwrap();
        let v = DenseArray::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let a = vec![DenseArray::filled(&[2, 2], 0.5)];
        let scores = sag_scores(&a, &v, &s, "pool.w", "pool.b", false).unwrap();
        assert_eq!(scores, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn single_node_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = pool_store(3, &mut rng);
        let v = DenseArray::from_rows(&[[0.3, -0.5, 1.2]]).unwrap();
        let scores = sag_scores(&[DenseArray::identity(1)], &v, &s, "pool.w", "pool.b", false).unwrap();
        let w = s.value("pool.w").unwrap();
        let expect = (0..3).map(|k| v.get(0, k) * w.values()[k]).sum::<f64>() + 0.1;
        assert!((scores[0][0] - expect.tanh()).abs() < 1e-15);
    }

    #[test]
    fn views_score_differently() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = pool_store(4, &mut rng);
        let v = DenseArray::matrix(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let adj: Vec<_> = (0..2)
            .map(|_| row_softmax(&DenseArray::matrix(5, 5, (0..25).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()))
            .collect();
        let scores = sag_scores(&adj, &v, &s, "pool.w", "pool.b", false).unwrap();
        assert_ne!(scores[0], scores[1]);
        assert!(scores.iter().flatten().all(|s| s.abs() < 1.0));
    }

    #[test]
    fn topk_examples() {
        let scores: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(select_topk(&scores, 0.7).unwrap().len(), 7);
        assert_eq!(select_topk(&[1.0; 4], 0.5).unwrap(), vec![0, 1]);
        assert_eq!(select_topk(&scores, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(select_topk(&[0.1, 0.9, 0.5], 0.3).unwrap(), vec![1]);
        assert!(matches!(select_topk(&scores, 0.0), Err(Error::Argument(_))));
        assert!(matches!(select_topk(&scores, 1.5), Err(Error::Argument(_))));
    }

    #[test]
    fn union_examples() {
        let v = DenseArray::filled(&[10, 2], 1.0);
        let s = vec![vec![0.5; 10], vec![0.5; 10]];
        let sel: Vec<usize> = (0..7).collect();
        let (_, surv, r) = union_pool(&[sel.clone(), sel], &v, &s).unwrap();
        assert_eq!(surv.len(), 7);
        assert!((r - 0.7).abs() < 1e-15);

        let (_, surv, r) = union_pool(&[(0..7).collect(), (3..10).collect()], &v, &s).unwrap();
        assert_eq!(surv, (0..10).collect::<Vec<_>>());
        assert_eq!(r, 1.0);

        assert!(matches!(union_pool(&[vec![10]], &v, &s), Err(Error::Index { .. })));
    }

    #[test]
    fn gate_uses_best_selecting_view() {
        let v = DenseArray::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let scores = vec![vec![0.9, 0.1, 0.2], vec![0.3, 0.4, 0.8]];
        // view 0 keeps {0}, view 1 keeps {2}; node 0's gate comes only from view 0
        let (f, surv, _) = union_pool(&[vec![0], vec![2]], &v, &scores).unwrap();
        assert_eq!(surv, vec![0, 2]);
        assert_eq!(f.values(), &[0.9, 2.4000000000000004]);
    }

    #[test]
    fn topk_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..50).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect();
        let a = select_topk(&scores, 0.3).unwrap();
        let b = select_topk(&scores, 0.3).unwrap();
        assert_eq!(a, b);
    }
}
