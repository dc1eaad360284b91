//! Gaussian graph generator.
//!
//! Each node is encoded, once per view, into a diagonal Gaussian
//! `N(mu, diag(sigma^2))`: `mu = x W_mean`, `sigma = softplus(x W_std + b_std)`.
//! The mean map has no bias: KL only sees `mu_i - mu_j`, where a shared
//! offset cancels.
//! The directed edge score from node `i` to node `j` on a view is
//! `KL(N_i || N_j)`, so the graph is asymmetric by construction. Scores are
//! row-normalized into adjacency matrices according to [`AdjacencyNorm`].

use std::fmt;
use std::str::FromStr;

use crate::diffcore::{DenseArray, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

/// How raw KL edge scores become adjacency rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdjacencyNorm {
    Softmax,
    /// `e_ij / sum_j e_ij`.
    #[default]
    RowSum,
    /// Raw KL scores, unnormalized.
    None,
}

impl FromStr for AdjacencyNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "row_sum" => Ok(Self::RowSum),
            "none" => Ok(Self::None),
            other => Err(Error::config("adjacency_norm", format!("unknown value `{other}`"))),
        }
    }
}

impl fmt::Display for AdjacencyNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::RowSum => "row_sum",
            Self::None => "none",
        })
    }
}

/// Floor added to raw scores under [`AdjacencyNorm::RowSum`] so that an
/// all-identical node set still normalizes (to uniform rows).
const ROW_SUM_FLOOR: f64 = 1e-12;

/// Per-view Gaussian parameters of every node.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGaussians {
    /// `nodes x g`.
    pub mean: DenseArray,
    /// `nodes x g`, strictly positive.
    pub std: DenseArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBank {
    pub views: Vec<ViewGaussians>,
}

impl GaussianBank {
    pub fn node_count(&self) -> usize {
        self.views.first().map(|v| v.mean.rows()).unwrap_or(0)
    }
}

/// Parameter names of the two encoders for one view of one stage.
pub fn encoder_param_names(stage: usize, view: usize) -> [String; 3] {
    let p = format!("ggg.s{stage}.v{view}");
    [format!("{p}.mean.w"), format!("{p}.std.w"), format!("{p}.std.b")]
}

/// Registers encoder parameters (Xavier weights, zero biases).
pub fn init_encoders<R: rand::Rng>(
    store: &mut ParamStore,
    stage: usize,
    views: usize,
    input_width: usize,
    gaussian_width: usize,
    rng: &mut R,
) -> Result<()> {
    for n in 0..views {
        let [mw, sw, sb] = encoder_param_names(stage, n);
        store.insert_xavier(mw, input_width, gaussian_width, rng)?;
        store.insert_xavier(sw, input_width, gaussian_width, rng)?;
        store.insert_zeros(sb, &[gaussian_width])?;
    }
    Ok(())
}

/// Records the encoders on `tape`; returns `(mean, std)` nodes per view.
pub fn encode_on_tape(tape: &mut Tape, nodes: NodeId, stage: usize, views: usize) -> Result<Vec<(NodeId, NodeId)>> {
    let mut out = Vec::with_capacity(views);
    for n in 0..views {
        let [mw, sw, sb] = encoder_param_names(stage, n);
        let (mw, sw, sb) = (tape.param(&mw)?, tape.param(&sw)?, tape.param(&sb)?);
        let mean = tape.matmul(nodes, mw)?;
        let pre = tape.linear(nodes, sw, sb)?;
        let std = tape.softplus(pre);
        out.push((mean, std));
    }
    Ok(out)
}

/// Raw KL scores normalized into one adjacency node per view.
pub fn adjacency_on_tape(tape: &mut Tape, bank: &[(NodeId, NodeId)], norm: AdjacencyNorm) -> Result<Vec<NodeId>> {
    bank.iter()
        .map(|&(mean, std)| {
            let raw = tape.pairwise_kl(mean, std)?;
            normalize_on_tape(tape, raw, norm)
        })
        .collect()
}

pub(crate) fn normalize_on_tape(tape: &mut Tape, raw: NodeId, norm: AdjacencyNorm) -> Result<NodeId> {
    match norm {
        AdjacencyNorm::Softmax => Ok(tape.row_softmax(raw)),
        AdjacencyNorm::RowSum => {
            let floor = tape.constant(DenseArray::filled(tape.shape(raw), ROW_SUM_FLOOR));
            let shifted = tape.add(raw, floor)?;
            tape.row_normalize(shifted)
        }
        AdjacencyNorm::None => Ok(raw),
    }
}

/// Encodes node features `v0` (`nodes x d`) into one Gaussian per node per view.
pub fn encode_gaussians(v0: &DenseArray, params: &ParamStore, stage: usize, views: usize) -> Result<GaussianBank> {
    if v0.rows() == 0 {
        return Err(Error::Input("cannot encode an empty node set".into()));
    }
    let mut tape = Tape::new(params);
    let x = tape.constant(v0.clone());
    let bank = encode_on_tape(&mut tape, x, stage, views)?;
    Ok(GaussianBank {
        views: bank
            .into_iter()
            .map(|(m, s)| ViewGaussians {
                mean: tape.value(m).clone(),
                std: tape.value(s).clone(),
            })
            .collect(),
    })
}

/// Closed-form `KL(N(mu_i, sigma_i^2) || N(mu_j, sigma_j^2))` for diagonal Gaussians.
pub fn kl_diag_gaussian(mu_i: &[f64], sigma_i: &[f64], mu_j: &[f64], sigma_j: &[f64]) -> Result<f64> {
    let g = mu_i.len();
    if sigma_i.len() != g || mu_j.len() != g || sigma_j.len() != g {
        return Err(Error::dim(
            "kl_diag_gaussian",
            &[mu_i.len(), sigma_i.len()],
            &[mu_j.len(), sigma_j.len()],
        ));
    }
    let mut total = 0.0;
    for k in 0..g {
        let (si, sj) = (sigma_i[k], sigma_j[k]);
        if !(si > 0.0 && sj > 0.0) {
            return Err(Error::Domain(format!("standard deviations must be positive, got {si} and {sj}")));
        }
        if si == sj && mu_i[k] == mu_j[k] {
            continue;
        }
        let diff = mu_i[k] - mu_j[k];
        total += (sj / si).ln() + (si * si + diff * diff) / (2.0 * sj * sj) - 0.5;
    }
    Ok(total)
}

/// All-pairs KL scores: entry `(i, j)` is `KL(node i || node j)`. The diagonal is exactly zero.
pub fn pairwise_kl(mean: &DenseArray, std: &DenseArray) -> Result<DenseArray> {
    if mean.shape() != std.shape() {
        return Err(Error::dim("pairwise_kl", mean.shape(), std.shape()));
    }
    if let Some(bad) = std.values().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("standard deviation {bad} is not positive")));
    }
    let (t, g) = (mean.rows(), mean.cols());
    let ln_std: Vec<f64> = std.values().iter().map(|s| s.ln()).collect();
    let half_inv_var: Vec<f64> = std.values().iter().map(|s| 0.5 / (s * s)).collect();
    let var: Vec<f64> = std.values().iter().map(|s| s * s).collect();
    let mut out = DenseArray::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            if i == j {
                continue;
            }
            let mut total = 0.0;
            for k in 0..g {
                let (a, b) = (i * g + k, j * g + k);
                let diff = mean.values()[a] - mean.values()[b];
                total += ln_std[b] - ln_std[a] + (var[a] + diff * diff) * half_inv_var[b] - 0.5;
            }
            out.set(i, j, total);
        }
    }
    Ok(out)
}

/// Gradient of `sum(upstream .* pairwise_kl(mean, std))` w.r.t. `mean` and `std`.
pub fn pairwise_kl_backward(
    mean: &DenseArray,
    std: &DenseArray,
    upstream: &DenseArray,
) -> Result<(DenseArray, DenseArray)> {
    let (t, g) = (mean.rows(), mean.cols());
    if upstream.shape() != [t, t] {
        return Err(Error::dim("pairwise_kl_backward", upstream.shape(), &[t, t]));
    }
    let mut gm = DenseArray::zeros(mean.shape());
    let mut gs = DenseArray::zeros(std.shape());
    let (mv, sv) = (mean.values(), std.values());
    for i in 0..t {
        for j in 0..t {
            let up = upstream.get(i, j);
            if i == j || up == 0.0 {
                continue;
            }
            for k in 0..g {
                let (a, b) = (i * g + k, j * g + k);
                let diff = mv[a] - mv[b];
                let (si, sj) = (sv[a], sv[b]);
                let inv_vj = 1.0 / (sj * sj);
                let dm = up * diff * inv_vj;
                gm.values_mut()[a] += dm;
                gm.values_mut()[b] -= dm;
                gs.values_mut()[a] += up * (si * inv_vj - 1.0 / si);
                gs.values_mut()[b] += up * (1.0 / sj - (si * si + diff * diff) * inv_vj / sj);
            }
        }
    }
    Ok((gm, gs))
}

/// Raw KL score matrix of each view.
pub fn raw_scores(bank: &GaussianBank) -> Result<Vec<DenseArray>> {
    bank.views.iter().map(|v| pairwise_kl(&v.mean, &v.std)).collect()
}

/// Directed adjacency of each view, normalized per `norm`.
pub fn build_adjacency(bank: &GaussianBank, norm: AdjacencyNorm) -> Result<Vec<DenseArray>> {
    let mut tape = Tape::detached();
    let mut out = Vec::with_capacity(bank.views.len());
    for v in &bank.views {
        let raw = tape.constant(pairwise_kl(&v.mean, &v.std)?);
        let adj = normalize_on_tape(&mut tape, raw, norm)?;
        out.push(tape.value(adj).clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, ParamGrads};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Composite Simpson estimate of `int p ln(p/q)` for 1-D Gaussians over `[lo, hi]`.
    fn kl_quadrature(mu_p: f64, s_p: f64, mu_q: f64, s_q: f64, lo: f64, hi: f64) -> f64 {
        let log_pdf = |x: f64, mu: f64, s: f64| {
            let z = (x - mu) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        };
        let n = 40_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let lp = log_pdf(x, mu_p, s_p);
            lp.exp() * (lp - log_pdf(x, mu_q, s_q))
        };
        let mut total = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            total += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        total * h / 3.0
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian(&[0.3, -1.0], &[0.5, 2.0], &[0.3, -1.0], &[0.5, 2.0]).unwrap(), 0.0);
        let half = kl_diag_gaussian(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        let oracle = kl_quadrature(0.0, 1.0, 1.0, 1.0, -12.0, 12.0);
        assert!((half - oracle).abs() < 1e-6);

        let fwd = kl_diag_gaussian(&[0.0], &[1.0], &[0.0], &[2.0]).unwrap();
        let rev = kl_diag_gaussian(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((fwd - kl_quadrature(0.0, 1.0, 0.0, 2.0, -12.0, 12.0)).abs() < 1e-6);
        assert!((rev - kl_quadrature(0.0, 2.0, 0.0, 1.0, -24.0, 24.0)).abs() < 1e-6);
        assert!((fwd - rev).abs() > 0.1);
    }

    #[test]
    fn kl_rejects_bad_sigma() {
        assert!(matches!(kl_diag_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(kl_diag_gaussian(&[0.0], &[1.0], &[0.0], &[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_nonnegative_and_zero_only_on_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let g = rng.random_range(1..6);
            let mut draw = |lo: f64, hi: f64| (0..g).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
            let (mi, si, mj, sj) = (draw(-3.0, 3.0), draw(0.2, 3.0), draw(-3.0, 3.0), draw(0.2, 3.0));
            let kl = kl_diag_gaussian(&mi, &si, &mj, &sj).unwrap();
            assert!(kl > 1e-12, "{kl}");
            assert!(kl_diag_gaussian(&mi, &si, &mi, &si).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_matches_scalar_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = DenseArray::matrix(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let std = DenseArray::matrix(4, 3, (0..12).map(|_| rng.random_range(0.3..2.0)).collect()).unwrap();
        let m = pairwise_kl(&mean, &std).unwrap();
        for i in 0..4 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..4 {
                let direct = kl_diag_gaussian(mean.row(i), std.row(i), mean.row(j), std.row(j)).unwrap();
                assert!((m.get(i, j) - direct).abs() < 1e-12);
            }
        }
        assert!((m.get(0, 1) - m.get(1, 0)).abs() > 1e-6);
    }

    fn bank_store(d: usize, g: usize, views: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_encoders(&mut store, 0, views, d, g, &mut rng).unwrap();
        store
    }

    #[test]
    fn zero_encoders_give_ln2_std() {
        let mut store = bank_store(3, 2, 2, 0);
        for e in 0..store.len() {
            store.entry_mut(e).value.fill(0.0);
        }
        let v0 = DenseArray::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]).unwrap();
        let bank = encode_gaussians(&v0, &store, 0, 2).unwrap();
        for v in &bank.views {
            assert!(v.mean.values().iter().all(|&m| m == 0.0));
            assert!(v.std.values().iter().all(|&s| (s - std::f64::consts::LN_2).abs() < 1e-15));
        }
    }

    #[test]
    fn identical_rows_identical_gaussians() {
        let store = bank_store(3, 4, 3, 1);
        let v0 = DenseArray::from_rows(&[[0.5, -1.0, 2.0], [0.5, -1.0, 2.0], [1.0, 0.0, 0.0]]).unwrap();
        let bank = encode_gaussians(&v0, &store, 0, 3).unwrap();
        assert_eq!(bank.views.len(), 3);
        for v in &bank.views {
            assert_eq!(v.mean.row(0), v.mean.row(1));
            assert_eq!(v.std.row(0), v.std.row(1));
            assert!(v.std.values().iter().all(|&s| s > 0.0));
        }
        assert_ne!(bank.views[0].mean, bank.views[1].mean);
    }

    #[test]
    fn encoder_dimension_mismatch() {
        let store = bank_store(3, 4, 1, 1);
        let v0 = DenseArray::zeros(&[2, 5]);
        assert!(matches!(encode_gaussians(&v0, &store, 0, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn encoder_gradients() {
        let mut store = bank_store(3, 4, 2, 8);
        let v0 = DenseArray::from_rows(&[[0.5, -1.0, 2.0], [0.1, 0.3, -0.7]]).unwrap();
        let objective = |st: &ParamStore| -> Result<(f64, ParamGrads)> {
            let mut t = Tape::new(st);
            let x = t.constant(v0.clone());
            let bank = encode_on_tape(&mut t, x, 0, 2)?;
            let mut parts = Vec::new();
            for (m, s) in bank {
                parts.push(m);
                parts.push(s);
            }
            let all = t.concat_cols(&parts)?;
            let l = t.sum(all);
            let g = t.backward(l)?;
            Ok((t.value(l).values()[0], t.param_grads(&g)))
        };
        let report = grad_check(objective, &mut store, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn bank_from(means: &[[f64; 1]], stds: &[[f64; 1]]) -> GaussianBank {
        GaussianBank {
            views: vec![ViewGaussians {
                mean: DenseArray::from_rows(means).unwrap(),
                std: DenseArray::from_rows(stds).unwrap(),
            }],
        }
    }

    #[test]
    fn identical_nodes_give_uniform_rows() {
        let bank = bank_from(&[[0.2], [0.2], [0.2]], &[[1.0], [1.0], [1.0]]);
        for norm in [AdjacencyNorm::Softmax, AdjacencyNorm::RowSum] {
            let adj = build_adjacency(&bank, norm).unwrap();
            for v in adj[0].values() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_node_hand_softmax() {
        // KL(N(0,1) || N(mu,1)) = mu^2 / 2, so mu = sqrt(2 ln 3) gives e12 = e21 = ln 3.
        let mu = (2.0 * 3f64.ln()).sqrt();
        let bank = bank_from(&[[0.0], [mu]], &[[1.0], [1.0]]);
        let raw = raw_scores(&bank).unwrap();
        assert!((raw[0].get(0, 1) - 3f64.ln()).abs() < 1e-12);
        let adj = build_adjacency(&bank, AdjacencyNorm::Softmax).unwrap();
        assert!((adj[0].get(0, 0) - 0.25).abs() < 1e-12);
        assert!((adj[0].get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rows_are_stochastic_and_asymmetric() {
        let store = bank_store(4, 3, 2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v0 = DenseArray::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bank = encode_gaussians(&v0, &store, 0, 2).unwrap();
        let adj = build_adjacency(&bank, AdjacencyNorm::Softmax).unwrap();
        assert_eq!(adj.len(), 2);
        assert_ne!(adj[0], adj[1]);
        for a in &adj {
            for r in 0..6 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_ne!(a, &a.transpose());
        }
    }

    #[test]
    fn permutation_equivariance() {
        let store = bank_store(4, 3, 1, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v0 = DenseArray::matrix(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| v0.row(p).to_vec()).collect();
        let permuted = DenseArray::from_rows(&rows).unwrap();
        let a = raw_scores(&encode_gaussians(&v0, &store, 0, 1).unwrap()).unwrap();
        let b = raw_scores(&encode_gaussians(&permuted, &store, 0, 1).unwrap()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((b[0].get(i, j) - a[0].get(perm[i], perm[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norm_parses() {
        assert_eq!("row_sum".parse::<AdjacencyNorm>().unwrap(), AdjacencyNorm::RowSum);
        assert!("bogus".parse::<AdjacencyNorm>().is_err());
    }
}
