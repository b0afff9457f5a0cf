//! Histological prototypes: a diagonal Gaussian mixture fitted per slide.
//!
//! Each slide's patch embeddings are summarized by `N_H` mixture components.
//! The fitted weights, means and variances are stacked into an
//! `N_H × (1 + 2·d_h)` matrix that the model projects into token space. EM
//! runs as preprocessing; no survival gradient reaches the mixture.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::params::Affine;
use crate::rng::StreamRng;

/// Lower bound applied to every fitted variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// A component whose total responsibility falls below this fraction of the
/// patch count is re-seeded.
pub const EMPTY_COMPONENT_FRACTION: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_REL_TOL: f64 = 1e-5;
/// Re-seeding attempts before a collapsed fit is reported as degenerate.
pub const MAX_RESEEDS: usize = 3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub slide_id: String,
    pub patches: Matrix,
}

impl PatchFeatures {
    pub fn new(slide_id: impl Into<String>, patches: Matrix) -> Result<Self> {
        if patches.rows() == 0 {
            return Err(Error::Invalid("slide has no patches".into()));
        }
        if !patches.is_finite() {
            return Err(Error::Invalid("patch embeddings must be finite".into()));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            patches,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Matrix,
    pub variances: Matrix,
}

impl GmmParams {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EmTrace {
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRepresentation {
    pub matrix: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub n_components: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_components: 16,
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: DEFAULT_REL_TOL,
        }
    }
}

/// Means from `Normal(0, 0.1²)`, unit variances, uniform weights.
pub fn init_gmm(n_components: usize, dim: usize, seed: u64) -> GmmParams {
    let mut rng = StreamRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid std");
    let means = (0..n_components * dim).map(|_| normal.sample(&mut rng)).collect();
    GmmParams {
        weights: vec![1.0 / n_components as f64; n_components],
        means: Matrix::from_vec(n_components, dim, means).expect("shape"),
        variances: Matrix::filled(n_components, dim, 1.0),
    }
}

fn component_log_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xv, m), v) in x.iter().zip(mean).zip(var) {
        let d = xv - m;
        acc += LN_2PI + v.ln() + d * d / v;
    }
    -0.5 * acc
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Joint log-probabilities `ln π_c + ln N(x; μ_c, Σ_c)` for one patch.
fn joint_log_probs(x: &[f64], params: &GmmParams, out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = params.weights[c].ln() + component_log_density(x, params.means.row(c), params.variances.row(c));
    }
}

/// Mixture log-density of one patch embedding.
pub fn log_density(x: &[f64], params: &GmmParams) -> f64 {
    let mut lp = vec![0.0; params.n_components()];
    joint_log_probs(x, params, &mut lp);
    log_sum_exp(&lp)
}

/// Posterior component probabilities per patch (`N_h × N_H`) and the
/// average log-likelihood under `params`.
pub fn responsibilities(patches: &Matrix, params: &GmmParams) -> (Matrix, f64) {
    let k = params.n_components();
    let mut resp = Matrix::zeros(patches.rows(), k);
    let mut total = 0.0;
    for i in 0..patches.rows() {
        let row = resp.row_mut(i);
        joint_log_probs(patches.row(i), params, row);
        let lse = log_sum_exp(row);
        total += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    (resp, total / patches.rows() as f64)
}

/// Most probable component for each patch.
pub fn hard_assignments(patches: &Matrix, params: &GmmParams) -> Vec<usize> {
    let (resp, _) = responsibilities(patches, params);
    resp.row_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (c, &v)| if v > best.1 { (c, v) } else { best },
                )
                .0
        })
        .collect()
}

/// One EM iteration. Returns the updated parameters and the average
/// log-likelihood of the patches under the parameters passed in.
pub fn em_step(patches: &PatchFeatures, params: &GmmParams) -> (GmmParams, f64) {
    let mut rng = StreamRng::seed_from_u64(0);
    em_step_with_rng(&patches.patches, params, &mut rng)
}

pub(crate) fn em_step_with_rng<R: Rng>(x: &Matrix, params: &GmmParams, rng: &mut R) -> (GmmParams, f64) {
    let (n, d) = x.shape();
    let k = params.n_components();
    let (resp, avg_ll) = responsibilities(x, params);

    let mut mass = vec![0.0; k];
    let mut means = Matrix::zeros(k, d);
    for i in 0..n {
        let xi = x.row(i);
        for c in 0..k {
            let r = resp.get(i, c);
            mass[c] += r;
            for (m, v) in means.row_mut(c).iter_mut().zip(xi) {
                *m += r * v;
            }
        }
    }
    let mut variances = Matrix::zeros(k, d);
    for c in 0..k {
        if mass[c] > 0.0 {
            for m in means.row_mut(c) {
                *m /= mass[c];
            }
        }
    }
    for i in 0..n {
        let xi = x.row(i);
        for c in 0..k {
            let r = resp.get(i, c);
            if r == 0.0 {
                continue;
            }
            let mean = means.row(c).to_vec();
            for ((s, v), m) in variances.row_mut(c).iter_mut().zip(xi).zip(&mean) {
                *s += r * (v - m) * (v - m);
            }
        }
    }
    let mut weights = vec![0.0; k];
    let mut reseeded = false;
    for c in 0..k {
        if mass[c] < EMPTY_COMPONENT_FRACTION * n as f64 {
            let pick = rng.random_range(0..n);
            means.row_mut(c).copy_from_slice(x.row(pick));
            variances.row_mut(c).fill(1.0);
            weights[c] = 1.0 / n as f64;
            reseeded = true;
        } else {
            for s in variances.row_mut(c) {
                *s = (*s / mass[c]).max(VAR_FLOOR);
            }
            weights[c] = mass[c] / n as f64;
        }
    }
    if reseeded {
        log::debug!("re-seeded empty mixture component(s)");
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (
        GmmParams {
            weights,
            means,
            variances,
        },
        avg_ll,
    )
}

fn collapsed(params: &GmmParams) -> bool {
    if params.n_components() < 2 {
        return false;
    }
    let first = params.means.row(0);
    (1..params.n_components()).all(|c| params.means.row(c).iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-9))
}

/// Runs EM from [`init_gmm`] until the relative change of the average
/// log-likelihood drops below `rel_tol` or `max_iters` steps were taken.
///
/// A fit whose components all collapse onto one mean is restarted from a
/// re-seeded initialization; after [`MAX_RESEEDS`] restarts the slide is
/// reported as degenerate.
pub fn fit_gmm(
    patches: &PatchFeatures,
    n_components: usize,
    seed: u64,
    max_iters: usize,
    rel_tol: f64,
) -> Result<(GmmParams, EmTrace)> {
    let x = &patches.patches;
    if n_components == 0 || max_iters == 0 {
        return Err(Error::Invalid(
            "fit_gmm needs at least one component and one iteration".into(),
        ));
    }
    if x.rows() < n_components {
        log::warn!(
            "slide {}: {} patches for {} components",
            patches.slide_id,
            x.rows(),
            n_components
        );
    }
    for attempt in 0..=MAX_RESEEDS {
        let init_seed = if attempt == 0 {
            seed
        } else {
            crate::rng::derive_seed(seed, "reseed", &[&attempt.to_string()])
        };
        let mut rng = StreamRng::seed_from_u64(crate::rng::derive_seed(init_seed, "em", &[]));
        let mut params = init_gmm(n_components, x.cols(), init_seed);
        let mut trace = EmTrace::default();
        for _ in 0..max_iters {
            let (next, ll) = em_step_with_rng(x, &params, &mut rng);
            params = next;
            trace.iterations += 1;
            let done = trace
                .log_likelihoods
                .last()
                .is_some_and(|&prev| (ll - prev).abs() / ll.abs().max(1.0) < rel_tol);
            trace.log_likelihoods.push(ll);
            if done {
                trace.converged = true;
                break;
            }
        }
        if !collapsed(&params) {
            return Ok((params, trace));
        }
        log::debug!("slide {}: mixture collapsed, attempt {attempt}", patches.slide_id);
    }
    Err(Error::DegenerateInput {
        slide: patches.slide_id.clone(),
        attempts: MAX_RESEEDS,
    })
}

/// Stacks `[π_c ‖ μ_c ‖ Σ_c]` per component, ordered by descending weight
/// (ties by component index).
pub fn slide_representation(params: &GmmParams) -> SlideRepresentation {
    let k = params.n_components();
    let d = params.dim();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| params.weights[b].total_cmp(&params.weights[a]).then(a.cmp(&b)));
    let mut matrix = Matrix::zeros(k, 1 + 2 * d);
    for (dst, &c) in order.iter().enumerate() {
        let row = matrix.row_mut(dst);
        row[0] = params.weights[c];
        row[1..1 + d].copy_from_slice(params.means.row(c));
        row[1 + d..].copy_from_slice(params.variances.row(c));
    }
    SlideRepresentation { matrix }
}

pub fn project_histo(rep: &SlideRepresentation, f_alpha: &Affine) -> Result<Matrix> {
    if rep.matrix.cols() != f_alpha.input_dim() {
        return Err(Error::shape("project_histo", f_alpha.input_dim(), rep.matrix.cols()));
    }
    Ok(f_alpha.apply(&rep.matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_matrix;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn clusters(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = centers[0].len();
        let noise = Normal::new(0.0, spread).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push((0..d).map(|j| center[j] + noise.sample(&mut rng)).collect::<Vec<_>>());
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn init_follows_prescribed_distribution() {
        let p = init_gmm(16, 512, 3);
        assert!(p.weights.iter().all(|&w| w == 1.0 / 16.0));
        assert!(p.variances.as_slice().iter().all(|&v| v == 1.0));
        let m = p.means.as_slice();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        let std = (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std}");
        assert_eq!(init_gmm(16, 512, 3), p);
        assert_eq!(init_gmm(1, 4, 0).weights, vec![1.0]);
    }

    #[test]
    fn standard_normal_log_density() {
        let p = GmmParams {
            weights: vec![1.0],
            means: Matrix::zeros(1, 1),
            variances: Matrix::filled(1, 1, 1.0),
        };
        let want = (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((log_density(&[0.0], &p) - want).abs() < 1e-15);
        assert!((want + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn identical_components_collapse() {
        let single = GmmParams {
            weights: vec![1.0],
            means: Matrix::from_rows(&[[0.3, -1.0]]).unwrap(),
            variances: Matrix::from_rows(&[[2.0, 0.5]]).unwrap(),
        };
        let double = GmmParams {
            weights: vec![0.5, 0.5],
            means: Matrix::from_rows(&[[0.3, -1.0], [0.3, -1.0]]).unwrap(),
            variances: Matrix::from_rows(&[[2.0, 0.5], [2.0, 0.5]]).unwrap(),
        };
        let x = [1.0, 2.0];
        assert!((log_density(&x, &single) - log_density(&x, &double)).abs() < 1e-14);
    }

    #[test]
    fn log_density_matches_direct_sum() {
        let p = GmmParams {
            weights: vec![0.3, 0.7],
            means: Matrix::from_rows(&[[0.0, 1.0], [2.0, -1.0]]).unwrap(),
            variances: Matrix::from_rows(&[[1.0, 0.5], [2.0, 3.0]]).unwrap(),
        };
        let x = [0.7, -0.2];
        let mut direct = 0.0;
        for c in 0..2 {
            let mut dens = p.weights[c];
            for j in 0..2 {
                let v = p.variances.get(c, j);
                let diff = x[j] - p.means.get(c, j);
                dens *= (-diff * diff / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
            }
            direct += dens;
        }
        assert!((log_density(&x, &p) - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_component_step_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal_matrix(40, 3, 2.0, &mut rng);
        let slide = PatchFeatures::new("s", x.clone()).unwrap();
        let (p, _) = em_step(&slide, &init_gmm(1, 3, 1));
        for j in 0..3 {
            let col: Vec<f64> = (0..40).map(|i| x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 40.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!((p.means.get(0, j) - mean).abs() < 1e-12);
            assert!((p.variances.get(0, j) - var.max(VAR_FLOOR)).abs() < 1e-12);
        }
        assert_eq!(p.weights, vec![1.0]);

        let (fit, trace) = fit_gmm(&slide, 1, 9, 1, DEFAULT_REL_TOL).unwrap();
        assert_eq!(trace.iterations, 1);
        assert!(fit.means.max_abs_diff(&p.means) < 1e-12);
    }

    #[test]
    fn separated_clusters_converge_to_centroids() {
        let (x, labels) = clusters(&[vec![-5.0, 0.0], vec![5.0, 1.0]], 30, 0.5, 6);
        let slide = PatchFeatures::new("s", x.clone()).unwrap();
        let mut p = GmmParams {
            weights: vec![0.5, 0.5],
            means: Matrix::from_rows(&[[-4.0, 0.5], [4.0, 0.5]]).unwrap(),
            variances: Matrix::filled(2, 2, 1.0),
        };
        for _ in 0..200 {
            p = em_step(&slide, &p).0;
        }
        for c in 0..2 {
            let members: Vec<usize> = (0..x.rows()).filter(|&i| labels[i] == c).collect();
            for j in 0..2 {
                let centroid = members.iter().map(|&i| x.get(i, j)).sum::<f64>() / members.len() as f64;
                assert!((p.means.get(c, j) - centroid).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn repeated_steps_do_not_decrease_likelihood() {
        let (x, _) = clusters(&[vec![0.0, 0.0, 0.0], vec![2.0, -1.0, 1.0]], 50, 1.0, 7);
        let slide = PatchFeatures::new("s", x).unwrap();
        let mut p = init_gmm(4, 3, 2);
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..50 {
            let (next, ll) = em_step(&slide, &p);
            assert!(ll >= prev - 1e-8);
            prev = ll;
            p = next;
        }
    }

    #[test]
    fn three_clusters_are_recovered() {
        let centers = vec![
            vec![3.0, 0.0, 0.0, 0.0],
            vec![0.0, 3.0, 0.0, 0.0],
            vec![-3.0, -3.0, 0.0, 0.0],
        ];
        let (x, labels) = clusters(&centers, 60, 0.4, 8);
        let slide = PatchFeatures::new("s", x.clone()).unwrap();
        let (p, trace) = fit_gmm(&slide, 3, 1, DEFAULT_MAX_ITERS, DEFAULT_REL_TOL).unwrap();
        assert!(trace.converged);
        let assigned = hard_assignments(&x, &p);
        assert_eq!(purity(&assigned, &labels, 3), 1.0);

        let (p2, trace2) = fit_gmm(&slide, 3, 1, DEFAULT_MAX_ITERS, DEFAULT_REL_TOL).unwrap();
        assert_eq!(trace, trace2);
        assert_eq!(p, p2);
    }

    /// Fraction of points whose component's majority label equals their own.
    fn purity(assigned: &[usize], labels: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for c in 0..k {
            let mut counts = vec![0; k];
            for (a, l) in assigned.iter().zip(labels) {
                if *a == c {
                    counts[*l] += 1;
                }
            }
            hits += counts.iter().max().unwrap();
        }
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn identical_patches_are_degenerate() {
        let slide = PatchFeatures::new("dup", Matrix::filled(20, 3, 0.5)).unwrap();
        assert!(matches!(
            fit_gmm(&slide, 4, 0, 20, DEFAULT_REL_TOL),
            Err(Error::DegenerateInput { .. })
        ));
        assert!(fit_gmm(&slide, 1, 0, 20, DEFAULT_REL_TOL).is_ok());
    }

    #[test]
    fn representation_layout_and_order() {
        let p = GmmParams {
            weights: vec![0.3, 0.7],
            means: Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap(),
            variances: Matrix::from_rows(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]).unwrap(),
        };
        let rep = slide_representation(&p);
        assert_eq!(rep.matrix.shape(), (2, 7));
        assert_eq!(rep.matrix.row(0), &[0.7, 4.0, 5.0, 6.0, 0.4, 0.5, 0.6]);
        assert_eq!(rep.matrix.row(1), &[0.3, 1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn histo_projection() {
        let rep = SlideRepresentation {
            matrix: Matrix::filled(2, 7, 1.5),
        };
        assert_eq!(project_histo(&rep, &Affine::zeros(7, 3)).unwrap(), Matrix::zeros(2, 3));
        let bias_only = Affine {
            weight: Matrix::zeros(7, 3),
            bias: Matrix::row_vector(vec![1.0, -2.0, 3.0]),
        };
        let out = project_histo(&rep, &bias_only).unwrap();
        assert!(out.row_iter().all(|r| r == [1.0, -2.0, 3.0]));
        assert!(project_histo(&rep, &Affine::zeros(5, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = Affine {
            weight: normal_matrix(7, 3, 1.0, &mut rng),
            bias: normal_matrix(1, 3, 1.0, &mut rng),
        };
        let rep = SlideRepresentation {
            matrix: normal_matrix(2, 7, 1.0, &mut rng),
        };
        let out = project_histo(&rep, &f).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let want = f.bias.get(0, j) + (0..7).map(|i| rep.matrix.get(r, i) * f.weight.get(i, j)).sum::<f64>();
                assert!((out.get(r, j) - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn step_invariants_hold(seed in 0u64..10_000, k in 1usize..6, n in 5usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = normal_matrix(n, 3, 1.5, &mut rng);
            let slide = PatchFeatures::new("s", x.clone()).unwrap();
            let mut p = init_gmm(k, 3, seed);
            let mut prev = f64::NEG_INFINITY;
            for _ in 0..10 {
                // re-seeding an emptied component is not an EM step and may lower the likelihood
                let (resp, _) = responsibilities(&x, &p);
                let reseeds = (0..k).any(|c| (0..n).map(|i| resp.get(i, c)).sum::<f64>() < EMPTY_COMPONENT_FRACTION * n as f64);
                let (next, ll) = em_step(&slide, &p);
                prop_assert!(ll >= prev - 1e-8);
                prev = if reseeds { f64::NEG_INFINITY } else { ll };
                p = next;
                prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.weights.iter().all(|&w| w > 0.0));
                prop_assert!(p.variances.as_slice().iter().all(|&v| v >= VAR_FLOOR));
                let (resp, _) = responsibilities(&x, &p);
                for r in resp.row_iter() {
                    prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn fit_is_invariant_to_patch_order(seed in 0u64..10_000, rot in 1usize..50) {
            let (x, _) = clusters(&[vec![2.0, 0.0], vec![-2.0, 1.0]], 25, 0.7, seed);
            let n = x.rows();
            let perm: Vec<usize> = (0..n).map(|i| (i * 7 + rot) % n).collect();
            let a = PatchFeatures::new("a", x.clone()).unwrap();
            let b = PatchFeatures::new("b", x.select_rows(&perm)).unwrap();
            let (pa, _) = fit_gmm(&a, 3, seed, DEFAULT_MAX_ITERS, DEFAULT_REL_TOL).unwrap();
            let (pb, _) = fit_gmm(&b, 3, seed, DEFAULT_MAX_ITERS, DEFAULT_REL_TOL).unwrap();
            let ra = slide_representation(&pa).matrix;
            let rb = slide_representation(&pb).matrix;
            prop_assert!(ra.max_abs_diff(&rb) < 1e-9, "diff {}", ra.max_abs_diff(&rb));
        }
    }
}
