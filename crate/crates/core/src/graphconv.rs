//! Multi-view densely connected graph convolution.
//!
//! One block per stage. For view `n` and sub-layer `l`, the input `k_l` is the
//! block input concatenated with the outputs of sub-layers `1..l-1`, and the
//! sub-layer output is `relu(A_n k_l W_{n,l} + b_{n,l})` of width `d / M`.
//! With self-loops on, `A_n` is replaced by `(A_n + I) / 2`, which keeps the
//! rows stochastic and lets every node hear itself as loudly as its
//! neighbourhood.
//! The `M` sub-layer outputs are concatenated back to width `d`. The block
//! input and the `N` view outputs are concatenated and projected back to `d`,
//! followed by a ReLU, so the initial representation is kept in the fusion.

use rand::Rng;

use crate::diffcore::{DenseArray, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

/// Shape of one convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub input_width: usize,
    /// Output width `d`.
    pub width: usize,
    /// Sub-layers `M`; must divide `width`.
    pub sublayers: usize,
    pub views: usize,
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        if self.sublayers == 0 || !self.width.is_multiple_of(self.sublayers) {
            return Err(Error::config(
                "conv_layers",
                format!("width {} is not divisible by {} sub-layers", self.width, self.sublayers),
            ));
        }
        if self.views == 0 {
            return Err(Error::config("views", "at least one view is required"));
        }
        Ok(())
    }

    pub fn sublayer_width(&self) -> usize {
        self.width / self.sublayers
    }

    /// Block input plus every view's output.
    pub fn merge_input(&self) -> usize {
        self.input_width + self.views * self.width
    }

    fn sublayer_input(&self, l: usize) -> usize {
        self.input_width + l * self.sublayer_width()
    }
}

pub fn conv_param_names(stage: usize, view: usize, sublayer: usize) -> (String, String) {
    let p = format!("conv.s{stage}.v{view}.l{sublayer}");
    (format!("{p}.w"), format!("{p}.b"))
}

pub fn merge_param_name(stage: usize) -> String {
    format!("merge.s{stage}.w")
}

pub fn init_block<R: Rng>(store: &mut ParamStore, stage: usize, shape: &ConvShape, rng: &mut R) -> Result<()> {
    shape.validate()?;
    let h = shape.sublayer_width();
    for n in 0..shape.views {
        for l in 0..shape.sublayers {
            let (w, b) = conv_param_names(stage, n, l);
            store.insert_xavier(w, shape.sublayer_input(l), h, rng)?;
            store.insert_zeros(b, &[h])?;
        }
    }
    store.insert_xavier(merge_param_name(stage), shape.merge_input(), shape.width, rng)?;
    Ok(())
}

/// `A x`, or `(A x + x) / 2` with self-loops.
pub fn propagate_on_tape(tape: &mut Tape, adjacency: NodeId, x: NodeId, self_loops: bool) -> Result<NodeId> {
    let ax = tape.matmul(adjacency, x)?;
    if !self_loops {
        return Ok(ax);
    }
    let sum = tape.add(ax, x)?;
    Ok(tape.scale(sum, 0.5))
}

/// Dense convolution of `input` over one view's adjacency.
pub fn conv_view_on_tape(
    tape: &mut Tape,
    adjacency: NodeId,
    input: NodeId,
    stage: usize,
    view: usize,
    sublayers: usize,
    self_loops: bool,
) -> Result<NodeId> {
    let mut dense = vec![input];
    for l in 0..sublayers {
        let k = if dense.len() == 1 { input } else { tape.concat_cols(&dense)? };
        let (w, b) = conv_param_names(stage, view, l);
        let (w, b) = (tape.param(&w)?, tape.param(&b)?);
        let kw = tape.matmul(k, w)?;
        let msg = propagate_on_tape(tape, adjacency, kw, self_loops)?;
        let pre = tape.add_bias(msg, b)?;
        dense.push(tape.relu(pre));
    }
    tape.concat_cols(&dense[1..])
}

/// Concatenate the block input with the view outputs, project back to `d`,
/// ReLU.
pub fn merge_views_on_tape(tape: &mut Tape, input: NodeId, views: &[NodeId], stage: usize) -> Result<NodeId> {
    if let Some(first) = views.first() {
        let s = tape.shape(*first).to_vec();
        if let Some(bad) = views.iter().find(|v| tape.shape(**v) != s.as_slice()) {
            return Err(Error::dim("merge_views", &s, tape.shape(*bad)));
        }
    }
    let parts: Vec<NodeId> = std::iter::once(input).chain(views.iter().copied()).collect();
    let cat = tape.concat_cols(&parts)?;
    let w = tape.param(&merge_param_name(stage))?;
    if tape.shape(w)[0] != tape.shape(cat)[1] {
        return Err(Error::dim("merge_views", tape.shape(cat), tape.shape(w)));
    }
    let proj = tape.matmul(cat, w)?;
    Ok(tape.relu(proj))
}

/// Full block: one dense convolution per view, then the merge.
pub fn conv_block_on_tape(
    tape: &mut Tape,
    adjacency: &[NodeId],
    input: NodeId,
    stage: usize,
    sublayers: usize,
    self_loops: bool,
) -> Result<NodeId> {
    let outs = adjacency
        .iter()
        .enumerate()
        .map(|(n, &a)| conv_view_on_tape(tape, a, input, stage, n, sublayers, self_loops))
        .collect::<Result<Vec<_>>>()?;
    merge_views_on_tape(tape, input, &outs, stage)
}

pub fn dense_conv_view(
    adjacency: &DenseArray,
    input: &DenseArray,
    params: &ParamStore,
    stage: usize,
    view: usize,
    sublayers: usize,
    self_loops: bool,
) -> Result<DenseArray> {
    let t = input.rows();
    if adjacency.shape() != [t, t] {
        return Err(Error::dim("dense_conv_view", adjacency.shape(), &[t, t]));
    }
    let mut tape = Tape::new(params);
    let a = tape.constant(adjacency.clone());
    let x = tape.constant(input.clone());
    let y = conv_view_on_tape(&mut tape, a, x, stage, view, sublayers, self_loops)?;
    Ok(tape.value(y).clone())
}

pub fn merge_views(input: &DenseArray, views: &[DenseArray], params: &ParamStore, stage: usize) -> Result<DenseArray> {
    let mut tape = Tape::new(params);
    let x = tape.constant(input.clone());
    let ids: Vec<_> = views.iter().map(|v| tape.constant(v.clone())).collect();
    let y = merge_views_on_tape(&mut tape, x, &ids, stage)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, row_softmax, ParamGrads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DenseArray {
        DenseArray::matrix(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn setup(shape: ConvShape, seed: u64) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_block(&mut store, 0, &shape, &mut rng).unwrap();
        // non-zero biases so the bias path is exercised
        for i in 0..store.len() {
            if store.entry(i).name.ends_with(".b") {
                let n = store.entry(i).value.len();
                let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
                store.entry_mut(i).value.values_mut().copy_from_slice(&vals);
            }
        }
        (store, rng)
    }

    /// Direct transcription of the sub-layer recurrence with explicit loops.
    fn naive_conv(a: &DenseArray, v: &DenseArray, store: &ParamStore, view: usize, m: usize) -> DenseArray {
        let t = v.rows();
        let mut k: Vec<Vec<f64>> = (0..t).map(|i| v.row(i).to_vec()).collect();
        let mut outs: Vec<Vec<f64>> = vec![Vec::new(); t];
        for l in 0..m {
            let (wn, bn) = conv_param_names(0, view, l);
            let w = store.value(&wn).unwrap();
            let b = store.value(&bn).unwrap();
            let h = w.cols();
            let mut layer = vec![vec![0.0; h]; t];
            for i in 0..t {
                for c in 0..h {
                    let mut acc = 0.0;
                    for j in 0..t {
                        for p in 0..w.rows() {
                            acc += a.get(i, j) * k[j][p] * w.get(p, c);
                        }
                    }
                    layer[i][c] = (acc + b.values()[c]).max(0.0);
                }
            }
            for i in 0..t {
                k[i].extend_from_slice(&layer[i]);
                outs[i].extend_from_slice(&layer[i]);
            }
        }
        DenseArray::from_rows(&outs).unwrap()
    }

    #[test]
    fn indivisible_width_is_config_error() {
        let shape = ConvShape { input_width: 4, width: 5, sublayers: 2, views: 1 };
        assert!(matches!(shape.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn single_node_graph() {
        let shape = ConvShape { input_width: 3, width: 4, sublayers: 2, views: 1 };
        let (store, _) = setup(shape, 1);
        let v = DenseArray::from_rows(&[[0.4, -0.9, 1.3]]).unwrap();
        let out = dense_conv_view(&DenseArray::identity(1), &v, &store, 0, 0, 2, false).unwrap();
        let w = store.value("conv.s0.v0.l0.w").unwrap();
        let b = store.value("conv.s0.v0.l0.b").unwrap();
        for c in 0..2 {
            let expect: f64 = (0..3).map(|p| v.get(0, p) * w.get(p, c)).sum::<f64>() + b.values()[c];
            assert!((out.get(0, c) - expect.max(0.0)).abs() < 1e-14);
        }
        assert_eq!(out.cols(), 4);
    }

    #[test]
    fn identity_adjacency_does_not_mix() {
        let shape = ConvShape { input_width: 3, width: 4, sublayers: 2, views: 1 };
        let (store, mut rng) = setup(shape, 2);
        let v = random(&mut rng, 3, 3, 1.0);
        let base = dense_conv_view(&DenseArray::identity(3), &v, &store, 0, 0, 2, false).unwrap();
        let mut changed = v.clone();
        changed.row_mut(2).iter_mut().for_each(|x| *x += 5.0);
        let after = dense_conv_view(&DenseArray::identity(3), &changed, &store, 0, 0, 2, false).unwrap();
        assert_eq!(base.row(0), after.row(0));
        assert_eq!(base.row(1), after.row(1));
    }

    #[test]
    fn matches_naive_loops() {
        let shape = ConvShape { input_width: 5, width: 6, sublayers: 3, views: 2 };
        let (store, mut rng) = setup(shape, 3);
        let a = row_softmax(&random(&mut rng, 4, 4, 2.0));
        let v = random(&mut rng, 4, 5, 1.0);
        for view in 0..2 {
            let fast = dense_conv_view(&a, &v, &store, 0, view, 3, false).unwrap();
            let slow = naive_conv(&a, &v, &store, view, 3);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
            // self-loops are the plain recurrence over (A + I) / 2
            let mut looped = a.clone();
            for i in 0..4 {
                for j in 0..4 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    looped.set(i, j, 0.5 * (a.get(i, j) + id));
                }
            }
            let fast = dense_conv_view(&a, &v, &store, 0, view, 3, true).unwrap();
            let slow = naive_conv(&looped, &v, &store, view, 3);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let shape = ConvShape { input_width: 4, width: 4, sublayers: 2, views: 1 };
        let (store, mut rng) = setup(shape, 4);
        let a = row_softmax(&random(&mut rng, 5, 5, 2.0));
        let v = random(&mut rng, 5, 4, 1.0);
        let perm = [2usize, 4, 0, 3, 1];
        let pv = DenseArray::from_rows(&perm.iter().map(|&p| v.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut pa = DenseArray::zeros(&[5, 5]);
        for i in 0..5 {
            for j in 0..5 {
                pa.set(i, j, a.get(perm[i], perm[j]));
            }
        }
        let out = dense_conv_view(&a, &v, &store, 0, 0, 2, false).unwrap();
        let pout = dense_conv_view(&pa, &pv, &store, 0, 0, 2, false).unwrap();
        for i in 0..5 {
            for c in 0..4 {
                assert!((pout.get(i, c) - out.get(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_inputs_stay_finite() {
        let shape = ConvShape { input_width: 4, width: 8, sublayers: 2, views: 3 };
        let (store, mut rng) = setup(shape, 5);
        let v = random(&mut rng, 6, 4, 1e3);
        let views: Vec<_> = (0..3)
            .map(|n| {
                let a = row_softmax(&random(&mut rng, 6, 6, 3.0));
                dense_conv_view(&a, &v, &store, 0, n, 2, false).unwrap()
            })
            .collect();
        let merged = merge_views(&v, &views, &store, 0).unwrap();
        assert_eq!(merged.shape(), &[6, 8]);
        assert!(merged.all_finite());
    }

    #[test]
    fn merge_identity_for_single_view() {
        let shape = ConvShape { input_width: 3, width: 3, sublayers: 1, views: 1 };
        let (mut store, mut rng) = setup(shape, 6);
        // zero rows for the block input, identity for the view
        let mut w = DenseArray::zeros(&[6, 3]);
        for i in 0..3 {
            w.set(3 + i, i, 1.0);
        }
        *store.value_mut("merge.s0.w").unwrap() = w;
        let input = random(&mut rng, 4, 3, 1.0);
        let x = random(&mut rng, 4, 3, 1.0).map(f64::abs);
        assert_eq!(merge_views(&input, &[x.clone()], &store, 0).unwrap(), x);
    }

    #[test]
    fn merge_view_swap_symmetry() {
        let shape = ConvShape { input_width: 2, width: 2, sublayers: 1, views: 2 };
        let (mut store, mut rng) = setup(shape, 7);
        let input = random(&mut rng, 3, 2, 1.0);
        let (x0, x1) = (random(&mut rng, 3, 2, 1.0), random(&mut rng, 3, 2, 1.0));
        let out = merge_views(&input, &[x0.clone(), x1.clone()], &store, 0).unwrap();
        let w = store.value("merge.s0.w").unwrap().clone();
        let mut swapped = w.clone();
        for r in 2..4 {
            swapped.row_mut(r).copy_from_slice(w.row(r + 2));
            swapped.row_mut(r + 2).copy_from_slice(w.row(r));
        }
        *store.value_mut("merge.s0.w").unwrap() = swapped;
        let out2 = merge_views(&input, &[x1, x0], &store, 0).unwrap();
        assert!(out.max_abs_diff(&out2) < 1e-15);
    }

    #[test]
    fn merge_rejects_inconsistent_views() {
        let shape = ConvShape { input_width: 2, width: 2, sublayers: 1, views: 2 };
        let (store, _) = setup(shape, 8);
        let input = DenseArray::zeros(&[3, 2]);
        let r = merge_views(&input, &[DenseArray::zeros(&[3, 2]), DenseArray::zeros(&[2, 2])], &store, 0);
        assert!(matches!(r, Err(Error::Dimension { .. })));
        let r = merge_views(&input, &[DenseArray::zeros(&[3, 2])], &store, 0);
        assert!(matches!(r, Err(Error::Dimension { .. })), "one view short of the weight");
    }

    #[test]
    fn block_gradients() {
        for self_loops in [false, true] {
            block_gradients_with(self_loops);
        }
    }

    fn block_gradients_with(self_loops: bool) {
        let shape = ConvShape { input_width: 3, width: 4, sublayers: 2, views: 2 };
        let (mut store, mut rng) = setup(shape, 9);
        let adj: Vec<_> = (0..2).map(|_| row_softmax(&random(&mut rng, 4, 4, 2.0))).collect();
        let v = random(&mut rng, 4, 3, 1.0);
        let objective = |st: &ParamStore| -> Result<(f64, ParamGrads)> {
            let mut t = Tape::new(st);
            let a: Vec<_> = adj.iter().map(|a| t.constant(a.clone())).collect();
            let x = t.constant(v.clone());
            let y = conv_block_on_tape(&mut t, &a, x, 0, 2, self_loops)?;
            let l = t.sum(y);
            let g = t.backward(l)?;
            Ok((t.value(l).values()[0], t.param_grads(&g)))
        };
        let report = grad_check(objective, &mut store, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
