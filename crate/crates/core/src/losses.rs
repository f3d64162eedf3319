//! Contrastive, local-consistency and combined objectives.

use di3cl_tensor::{gemm, BackwardCtx, BackwardOp, Float, Graph, Mat, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    /// Weight of the deep term; the shallow term gets `1 - alpha`.
    pub alpha: f64,
    /// Weight of the local term.
    pub beta: f64,
    pub enable_di: bool,
    pub enable_cc: bool,
    /// Average both view orderings instead of view 1 online / view 2 target.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.2, alpha: 0.8, beta: 10.0, enable_di: true, enable_cc: true, symmetric: false }
    }
}

impl LossConfig {
    /// Contrastive-only objective: both modules off.
    pub fn baseline() -> Self {
        Self { enable_di: false, enable_cc: false, alpha: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("loss.beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// `(deep, shallow, local)` weights with disabled terms zeroed. With
    /// both modules off the deep weight is 1 whatever `alpha` says.
    pub fn weights(&self) -> (f64, f64, f64) {
        let deep = if self.enable_di || self.enable_cc { self.alpha } else { 1.0 };
        let shallow = if self.enable_cc { 1.0 - self.alpha } else { 0.0 };
        let local = if self.enable_di { self.beta } else { 0.0 };
        (deep, shallow, local)
    }
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_d: f64,
    pub l_s: f64,
    pub l_l: f64,
    pub total: f64,
}

/// Weighted total; disabled terms are reported as 0.
pub fn combine(l_d: f64, l_s: f64, l_l: f64, cfg: &LossConfig, step: u64) -> Result<LossReport> {
    let l_s = if cfg.enable_cc { l_s } else { 0.0 };
    let l_l = if cfg.enable_di { l_l } else { 0.0 };
    for (name, v) in [("l_d", l_d), ("l_s", l_s), ("l_l", l_l)] {
        if !v.is_finite() {
            return Err(Error::Divergence { step, detail: format!("{name} = {v}") });
        }
    }
    let (wd, ws, wl) = cfg.weights();
    let total = wd * l_d + ws * l_s + wl * l_l;
    Ok(LossReport { step, l_d, l_s, l_l, total })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(exp(p.q/tau) / (exp(p.q/tau) + sum_k exp(p.k/tau)))` for one query,
/// with `negatives` as `[m, d]`.
pub fn info_nce(p: &[f64], q: &[f64], negatives: &Tensor<f64>, tau: f64) -> Result<f64> {
    let (m, d) = negatives.dims2()?;
    if m == 0 {
        return Err(Error::NotReady("negative set"));
    }
    if p.len() != d || q.len() != d {
        return Err(Error::Geometry(format!("vectors of width {} and {} against bank width {d}", p.len(), q.len())));
    }
    let pos = dot(p, q) / tau;
    let logits: Vec<f64> = (0..m).map(|j| dot(p, negatives.row(j)) / tau).collect();
    let max = logits.iter().copied().fold(pos, f64::max);
    let sum: f64 = (pos - max).exp() + logits.iter().map(|l| (l - max).exp()).sum::<f64>();
    Ok(max + sum.ln() - pos)
}

/// Mean squared distance between row-normalized predictions and targets.
/// Equals `2 - 2 * mean cosine` for non-zero rows.
pub fn di_loss(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Degenerate("local loss needs at least one box".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::Geometry(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    // the guard only kicks in for (near) zero rows, so unit inputs stay exact
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = dot(v, v).sqrt().max(crate::encoder::NORM_EPS);
        v.iter().map(|x| x / n).collect()
    };
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(f, z)| {
            let (f, z) = (unit(f), unit(z));
            f.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

struct InfoNceOp<T> {
    /// Softmax over `[positive, negatives...]` per row, `[n, m + 1]`.
    probs: Vec<T>,
    q: Tensor<T>,
    negatives: Tensor<T>,
    tau: T,
}

impl<T: Float> BackwardOp<T> for InfoNceOp<T> {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, d) = self.q.dims2().expect("rank 2");
        let m = self.negatives.shape()[0];
        let scale = ctx.grad.item() / (self.tau * T::from_f64_lossy(n as f64));
        let mut neg_probs = vec![T::zero(); n * m];
        for i in 0..n {
            neg_probs[i * m..(i + 1) * m].copy_from_slice(&self.probs[i * (m + 1) + 1..(i + 1) * (m + 1)]);
        }
        let mut dp = vec![T::zero(); n * d];
        gemm(scale, Mat::new(&neg_probs, n, m), Mat::new(self.negatives.data(), m, d), T::zero(), &mut dp);
        for i in 0..n {
            let w = scale * (self.probs[i * (m + 1)] - T::one());
            for (o, &qv) in dp[i * d..(i + 1) * d].iter_mut().zip(self.q.row(i)) {
                *o += w * qv;
            }
        }
        vec![Some(Tensor::new(&[n, d], dp).expect("shape"))]
    }
}

struct SqDistOp;

impl<T: Float> BackwardOp<T> for SqDistOp {
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (f, z) = (ctx.inputs[0], ctx.inputs[1]);
        let k = f.shape()[0];
        let scale = T::from_f64_lossy(2.0) * ctx.grad.item() / T::from_f64_lossy(k as f64);
        let mut df = f.clone();
        for (o, &zv) in df.data_mut().iter_mut().zip(z.data()) {
            *o = scale * (*o - zv);
        }
        let dz = ctx.needs_grad[1].then(|| df.map(|v| -v));
        vec![Some(df), dz]
    }
}

/// Batched InfoNCE, averaged over rows. `queries` is differentiable
/// `[n, d]`; `keys` (`[n, d]`) and `negatives` (`[m, d]`) are constants.
pub fn info_nce_batch<T: Float>(
    g: &mut Graph<T>,
    queries: Var,
    keys: &Tensor<T>,
    negatives: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    let (n, d) = g.value(queries).dims2()?;
    let (m, dn) = negatives.dims2()?;
    if m == 0 {
        return Err(Error::NotReady("negative set"));
    }
    if keys.shape() != [n, d] || dn != d {
        return Err(Error::Geometry(format!(
            "queries {:?}, keys {:?}, negatives {:?}",
            [n, d],
            keys.shape(),
            negatives.shape()
        )));
    }
    let p = g.value(queries);
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let mut neg_logits = vec![T::zero(); n * m];
    gemm(inv_tau, Mat::new(p.data(), n, d), Mat::t(negatives.data(), m, d), T::zero(), &mut neg_logits);
    let mut probs = vec![T::zero(); n * (m + 1)];
    let mut total = 0.0f64;
    for i in 0..n {
        let pos: T = p.row(i).iter().zip(keys.row(i)).map(|(&a, &b)| a * b).sum::<T>() * inv_tau;
        let row = &mut probs[i * (m + 1)..(i + 1) * (m + 1)];
        row[0] = pos;
        row[1..].copy_from_slice(&neg_logits[i * m..(i + 1) * m]);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
        total += (max + sum.ln() - pos).as_f64();
    }
    let value = Tensor::scalar(T::from_f64_lossy(total / n as f64));
    let op = InfoNceOp { probs, q: keys.clone(), negatives: negatives.clone(), tau: T::from_f64_lossy(tau) };
    Ok(g.record(value, &[queries], op))
}

/// `(1/k) sum_i ||f_i - z_i||^2` over `[k, d]` rows; inputs are expected
/// to be normalized already.
pub fn sq_dist_mean<T: Float>(g: &mut Graph<T>, f: Var, z: Var) -> Result<Var> {
    let (fv, zv) = (g.value(f), g.value(z));
    let (k, _) = fv.dims2()?;
    if k == 0 {
        return Err(Error::Degenerate("local loss needs at least one box".into()));
    }
    if fv.shape() != zv.shape() {
        return Err(Error::Geometry(format!("predictions {:?} vs targets {:?}", fv.shape(), zv.shape())));
    }
    let s: f64 = fv.data().iter().zip(zv.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
    let value = Tensor::scalar(T::from_f64_lossy(s / k as f64));
    Ok(g.record(value, &[f, z], SqDistOp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::NORM_EPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn e(i: usize, d: usize) -> Vec<f64> {
        (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn rows(v: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::new(&[v.len(), v[0].len()], v.concat()).unwrap()
    }

    #[test]
    fn info_nce_orthogonal_negative() {
        let l = info_nce(&e(0, 3), &e(0, 3), &rows(&[e(1, 3)]), 1.0).unwrap();
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn info_nce_identical_logits() {
        for m in [1, 5, 64] {
            let negs = rows(&vec![e(0, 4); m]);
            let l = info_nce(&e(0, 4), &e(0, 4), &negs, 1.0).unwrap();
            assert!((l - ((m + 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn info_nce_needs_negatives() {
        let empty = Tensor::<f64>::zeros(&[0, 3]);
        assert!(matches!(info_nce(&e(0, 3), &e(0, 3), &empty, 1.0), Err(Error::NotReady(_))));
    }

    #[test]
    fn info_nce_matches_naive_formula_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, m, tau) = (128, 1024, 0.2);
        let mut stable = 0.0;
        let mut naive = 0.0;
        for _ in 0..1000 {
            let p = unit(&mut rng, d);
            let q = unit(&mut rng, d);
            let negs: Vec<Vec<f64>> = (0..m).map(|_| unit(&mut rng, d)).collect();
            stable += info_nce(&p, &q, &rows(&negs), tau).unwrap();
            let num = (dot(&p, &q) / tau).exp();
            let den = num + negs.iter().map(|k| (dot(&p, k) / tau).exp()).sum::<f64>();
            naive += -(num / den).ln();
        }
        assert!((stable - naive).abs() / naive < 0.05);
        assert!((stable - naive).abs() / naive < 1e-9);
    }

    #[test]
    fn info_nce_stable_at_small_tau() {
        let p = e(0, 2);
        let negs = rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]);
        let l = info_nce(&p, &p, &negs, 0.01).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        let l = info_nce(&p, &[-1.0, 0.0], &rows(&[e(0, 2)]), 0.01).unwrap();
        assert!((l - 200.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn info_nce_decreases_with_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let negs: Vec<Vec<f64>> = (0..16).map(|_| unit(&mut rng, 3)).collect();
        let negs = rows(&negs);
        let p = e(0, 3);
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let a = std::f64::consts::PI * (1.0 - i as f64 / 20.0);
            let q = [a.cos(), a.sin(), 0.0];
            let l = info_nce(&p, &q, &negs, 0.2).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn di_loss_examples() {
        let a = vec![e(0, 3), e(1, 3)];
        assert_eq!(di_loss(&a, &a).unwrap(), 0.0);
        let neg: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        assert_eq!(di_loss(&a, &neg).unwrap(), 4.0);
        assert_eq!(di_loss(&[e(0, 3)], &[e(1, 3)]).unwrap(), 2.0);
        assert!(matches!(di_loss(&[], &[]), Err(Error::Degenerate(_))));
        // unnormalized predictions are normalized first
        let scaled = vec![vec![5.0, 0.0, 0.0]];
        assert!(di_loss(&scaled, &[e(0, 3)]).unwrap() < 1e-20);
    }

    #[test]
    fn di_loss_is_two_minus_two_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<Vec<f64>> = (0..7).map(|_| unit(&mut rng, 5)).collect();
        let cos: f64 = f.iter().zip(&z).map(|(a, b)| dot(a, b) / dot(a, a).sqrt()).sum::<f64>() / 7.0;
        let l = di_loss(&f, &z).unwrap();
        assert!((l - (2.0 - 2.0 * cos)).abs() < 1e-9);
        assert!((0.0..=4.0).contains(&l));
    }

    #[test]
    fn combine_examples() {
        let cfg = LossConfig::default();
        assert_eq!(combine(1.0, 1.0, 0.1, &cfg, 0).unwrap().total, 2.0);
        let plain = LossConfig { alpha: 1.0, beta: 0.0, ..cfg.clone() };
        assert_eq!(combine(0.7, 0.3, 0.9, &plain, 0).unwrap().total, 0.7);
        assert_eq!(combine(0.0, 0.0, 0.0, &cfg, 0).unwrap().total, 0.0);
    }

    #[test]
    fn disabled_terms_are_zeroed() {
        let no_cc = LossConfig { enable_cc: false, ..LossConfig::default() };
        let r = combine(1.0, 5.0, 0.1, &no_cc, 3).unwrap();
        assert_eq!(r.l_s, 0.0);
        assert!((r.total - (0.8 + 1.0)).abs() < 1e-12);
        // both off: the contrastive term alone, even with alpha < 1
        let off = LossConfig { enable_cc: false, enable_di: false, ..LossConfig::default() };
        let r = combine(1.3, 5.0, 0.7, &off, 3).unwrap();
        assert_eq!((r.l_s, r.l_l, r.total), (0.0, 0.0, 1.3));
    }

    #[test]
    fn nan_is_divergence() {
        let r = combine(f64::NAN, 0.0, 0.0, &LossConfig::default(), 17);
        assert!(matches!(r, Err(Error::Divergence { step: 17, .. })));
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = LossConfig { tau: -1.0, ..LossConfig::default() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("loss.tau") && msg.contains("must be > 0"));
        assert!(LossConfig { alpha: 1.5, ..LossConfig::default() }.validate().is_err());
    }

    #[test]
    fn batched_info_nce_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m, d) = (5, 9, 6);
        let p: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let q: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let k: Vec<Vec<f64>> = (0..m).map(|_| unit(&mut rng, d)).collect();
        let mut g = Graph::new();
        let pv = g.param(rows(&p));
        let l = info_nce_batch(&mut g, pv, &rows(&q), &rows(&k), 0.2).unwrap();
        let oracle: f64 =
            p.iter().zip(&q).map(|(a, b)| info_nce(a, b, &rows(&k), 0.2).unwrap()).sum::<f64>() / n as f64;
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
        // gradient against central differences of the scalar oracle
        let grad = g.backward(l).unwrap().take(pv).unwrap();
        let h = 1e-6;
        for i in 0..n {
            for j in 0..d {
                let mut pp = p.clone();
                pp[i][j] += h;
                let up = info_nce(&pp[i], &q[i], &rows(&k), 0.2).unwrap();
                pp[i][j] -= 2.0 * h;
                let down = info_nce(&pp[i], &q[i], &rows(&k), 0.2).unwrap();
                let fd = (up - down) / (2.0 * h) / n as f64;
                assert!((grad.data()[i * d + j] - fd).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn sq_dist_matches_di_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 3)).collect();
        let mut g = Graph::new();
        let fv = g.param(rows(&f));
        let fbar = g.l2_normalize_rows(fv, NORM_EPS).unwrap();
        let zv = g.constant(rows(&z));
        let l = sq_dist_mean(&mut g, fbar, zv).unwrap();
        assert!((g.value(l).item() - di_loss(&f, &z).unwrap()).abs() < 1e-10);
    }
}
