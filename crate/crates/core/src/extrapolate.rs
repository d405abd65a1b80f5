//! Text-feature synthesis for web images.
//!
//! A web image feature `f` is reconstructed from its `k` nearest dataset image
//! features `F = [f_1 .. f_k]` by least squares, `w = (FᵀF + λI)⁻¹ Fᵀ f`, and the
//! same weights are applied to the neighbors' text features: `s = S·w`.
//! Weights are not constrained to sum to one.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sq_dist, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolateConfig {
    pub k: usize,
    pub ridge_lambda: f64,
}

impl Default for ExtrapolateConfig {
    fn default() -> Self {
        ExtrapolateConfig {
            k: 8,
            ridge_lambda: 1e-6,
        }
    }
}

/// The `k` nearest dataset records with their image features as columns of
/// `image` (D×k) and canonical text features as columns of `text` (D_s×k).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub distances: Vec<f64>,
    pub image: DMatrix<f64>,
    pub text: DMatrix<f64>,
}

impl NeighborSet {
    /// Builds a neighbor set directly from column matrices.
    pub fn from_columns(image: DMatrix<f64>, text: DMatrix<f64>) -> Result<Self> {
        if image.ncols() != text.ncols() || image.ncols() == 0 {
            return Err(Error::Shape(format!(
                "neighbor matrices need matching nonzero column counts, got {} and {}",
                image.ncols(),
                text.ncols()
            )));
        }
        let k = image.ncols();
        Ok(NeighborSet {
            indices: (0..k).collect(),
            ids: (0..k).map(|i| i.to_string()).collect(),
            distances: vec![0.0; k],
            image,
            text,
        })
    }

    pub fn k(&self) -> usize {
        self.image.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconWeights {
    pub w: DVector<f64>,
    /// `|f − F·w|`.
    pub residual_norm: f64,
    pub ridge_lambda: f64,
}

/// Exhaustive k-nearest search by Euclidean distance; ties go to the smaller id.
pub fn nearest_neighbors(f: &[f64], dataset: &Corpus, k: usize) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > dataset.len() {
        return Err(Error::TooFew {
            requested: k,
            available: dataset.len(),
        });
    }
    if f.len() != dataset.dim_image() {
        return Err(Error::Shape(format!("query has length {}, corpus dim is {}", f.len(), dataset.dim_image())));
    }
    let recs = dataset.records();
    let mut order: Vec<(f64, usize)> = recs.iter().enumerate().map(|(i, r)| (sq_dist(f, &r.image_vec), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| recs[a.1].id.cmp(&recs[b.1].id)));
    order.truncate(k);

    let mut texts = Vec::with_capacity(k);
    for &(_, i) in &order {
        texts.push(recs[i].canonical_text().ok_or_else(|| Error::MissingText(recs[i].id.clone()))?);
    }
    let image = DMatrix::from_fn(dataset.dim_image(), k, |r, c| recs[order[c].1].image_vec[r]);
    let text = DMatrix::from_fn(dataset.dim_text(), k, |r, c| texts[c][r]);
    Ok(NeighborSet {
        indices: order.iter().map(|&(_, i)| i).collect(),
        ids: order.iter().map(|&(_, i)| recs[i].id.clone()).collect(),
        distances: order.iter().map(|&(d, _)| d.sqrt()).collect(),
        image,
        text,
    })
}

pub fn solve_weights(nbrs: &NeighborSet, f: &[f64], ridge_lambda: f64) -> Result<ReconWeights> {
    if f.len() != nbrs.image.nrows() {
        return Err(Error::Shape(format!("query has length {}, neighbors have {}", f.len(), nbrs.image.nrows())));
    }
    solve_normal_equations(&nbrs.image, &DVector::from_column_slice(f), ridge_lambda)
}

/// Solves `(FᵀF + λI) w = Fᵀ f` by Cholesky factorization.
pub fn solve_normal_equations(image: &DMatrix<f64>, f: &DVector<f64>, ridge_lambda: f64) -> Result<ReconWeights> {
    if !(ridge_lambda >= 0.0) {
        return Err(Error::Config("ridge_lambda must be non-negative".into()));
    }
    let k = image.ncols();
    let mut gram = image.tr_mul(image);
    let scale = gram.diagonal().max();
    for i in 0..k {
        gram[(i, i)] += ridge_lambda;
    }
    let chol = Cholesky::new(gram).ok_or(Error::RankDeficient { k })?;
    if ridge_lambda == 0.0 {
        let min_pivot = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-12 * scale) {
            return Err(Error::RankDeficient { k });
        }
    }
    let w = chol.solve(&image.tr_mul(f));
    let residual_norm = (f - image * &w).norm();
    Ok(ReconWeights {
        w,
        residual_norm,
        ridge_lambda,
    })
}

/// `S·w`.
pub fn synthesize_text(nbrs: &NeighborSet, w: &ReconWeights) -> Result<Vec<f64>> {
    if w.w.len() != nbrs.k() {
        return Err(Error::Shape(format!("{} weights for {} neighbors", w.w.len(), nbrs.k())));
    }
    Ok((&nbrs.text * &w.w).as_slice().to_vec())
}

/// Gives every kept web record one synthesized text feature and returns the
/// dataset followed by the augmented web records.
pub fn extrapolate_corpus(web_kept: &Corpus, dataset: &Corpus, cfg: &ExtrapolateConfig) -> Result<Corpus> {
    if web_kept.dim_image() != dataset.dim_image() || web_kept.dim_text() != dataset.dim_text() {
        return Err(Error::Shape("web and dataset corpora disagree on dimensions".into()));
    }
    let augmented = web_kept
        .records()
        .par_iter()
        .map(|r| {
            let nbrs = nearest_neighbors(&r.image_vec, dataset, cfg.k)?;
            let w = solve_weights(&nbrs, &r.image_vec, cfg.ridge_lambda)?;
            let s = synthesize_text(&nbrs, &w)?;
            let mut out = r.clone();
            out.text_vecs = vec![s];
            out.extrapolated = true;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = dataset.records().to_vec();
    records.extend(augmented);
    Corpus::new(dataset.dim_image(), dataset.dim_text(), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmbeddingRecord, Split};
    use crate::rng;
    use proptest::prelude::*;

    fn random_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng::seeded(seed);
        DMatrix::from_fn(r, c, |_, _| rng::normal(&mut g))
    }

    fn point_corpus(points: &[Vec<f64>]) -> Corpus {
        let rs = points
            .iter()
            .enumerate()
            .map(|(i, p)| EmbeddingRecord::new(format!("p{i:04}"), "c", Split::Dataset, p.clone()).with_text(vec![vec![i as f64, 1.0]]))
            .collect();
        Corpus::new(points[0].len(), 2, rs).unwrap()
    }

    #[test]
    fn exact_match_is_first_neighbor() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let c = point_corpus(&pts);
        let n = nearest_neighbors(&pts[7], &c, 1).unwrap();
        assert_eq!(n.ids, vec!["p0007"]);
        assert_eq!(n.distances[0], 0.0);
    }

    #[test]
    fn k_equal_to_size_returns_everything_sorted() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64 - 4.5).abs(), 0.0]).collect();
        let c = point_corpus(&pts);
        let n = nearest_neighbors(&[0.0, 0.0], &c, 10).unwrap();
        assert!(n.distances.windows(2).all(|w| w[0] <= w[1]));
        // equal distances fall back to id order
        assert_eq!(&n.ids[..2], &["p0004", "p0005"]);
        assert!(matches!(nearest_neighbors(&[0.0, 0.0], &c, 11), Err(Error::TooFew { .. })));
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut g = rng::seeded(8);
        let pts: Vec<Vec<f64>> = (0..500).map(|_| rng::normal_vec(&mut g, 6)).collect();
        let c = point_corpus(&pts);
        let q = rng::normal_vec(&mut g, 6);
        let n = nearest_neighbors(&q, &c, 8).unwrap();
        // selection by repeated minimum over the remaining points
        let mut remaining: Vec<usize> = (0..500).collect();
        let mut expect = Vec::new();
        for _ in 0..8 {
            let (pos, _) = remaining
                .iter()
                .enumerate()
                .map(|(pos, &i)| (pos, pts[i].iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .fold((0, f64::MAX), |best, cur| if cur.1 < best.1 { cur } else { best });
            expect.push(remaining.remove(pos));
        }
        assert_eq!(n.indices, expect);
    }

    #[test]
    fn orthonormal_columns_give_coordinates() {
        let f_mat = DMatrix::identity(2, 2);
        let n = NeighborSet::from_columns(f_mat, DMatrix::identity(2, 2)).unwrap();
        let w = solve_weights(&n, &[0.3, 0.7], 0.0).unwrap();
        assert!((w.w[0] - 0.3).abs() < 1e-15 && (w.w[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn query_equal_to_first_column() {
        let f_mat = random_matrix(6, 3, 2);
        let n = NeighborSet::from_columns(f_mat.clone(), random_matrix(2, 3, 3)).unwrap();
        let w = solve_weights(&n, f_mat.column(0).as_slice(), 0.0).unwrap();
        assert!((w.w[0] - 1.0).abs() < 1e-12 && w.w[1].abs() < 1e-12 && w.w[2].abs() < 1e-12);
        assert!(w.residual_norm < 1e-12);
    }

    #[test]
    fn duplicate_columns_without_ridge_are_rank_deficient() {
        let mut f_mat = random_matrix(5, 3, 4);
        let c0 = f_mat.column(0).clone_owned();
        f_mat.set_column(2, &c0);
        let n = NeighborSet::from_columns(f_mat, random_matrix(2, 3, 5)).unwrap();
        let q = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert!(matches!(solve_weights(&n, &q, 0.0), Err(Error::RankDeficient { k: 3 })));
        assert!(solve_weights(&n, &q, 1e-6).is_ok());
    }

    #[test]
    fn synthesis_examples() {
        let text = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let n = NeighborSet::from_columns(DMatrix::identity(2, 2), text).unwrap();
        let half = ReconWeights {
            w: DVector::from_vec(vec![0.5, 0.5]),
            residual_norm: 0.0,
            ridge_lambda: 0.0,
        };
        assert_eq!(synthesize_text(&n, &half).unwrap(), vec![1.0, 1.0]);
        let e1 = ReconWeights {
            w: DVector::from_vec(vec![1.0, 0.0]),
            ..half
        };
        assert_eq!(synthesize_text(&n, &e1).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn single_neighbor_matches_scalar_formula() {
        let mut g = rng::seeded(9);
        for lambda in [0.0, 1e-6, 0.3] {
            let f1 = rng::normal_vec(&mut g, 7);
            let f = rng::normal_vec(&mut g, 7);
            let n = NeighborSet::from_columns(DMatrix::from_column_slice(7, 1, &f1), DMatrix::from_element(1, 1, 1.0)).unwrap();
            let w = solve_weights(&n, &f, lambda).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let expect = dot(&f1, &f) / (dot(&f1, &f1) + lambda);
            assert!((w.w[0] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn extrapolated_corpus_shape_and_identity_case() {
        let mut g = rng::seeded(10);
        let recs: Vec<EmbeddingRecord> = (0..12)
            .map(|i| {
                EmbeddingRecord::new(format!("d{i:02}"), "c", Split::Dataset, rng::normal_vec(&mut g, 4))
                    .with_text(vec![rng::normal_vec(&mut g, 3), rng::normal_vec(&mut g, 3)])
            })
            .collect();
        let dataset = Corpus::new(4, 3, recs.clone()).unwrap();
        let mut twin = EmbeddingRecord::new("w0", "c", Split::Web, recs[5].image_vec.clone());
        twin.outlier_truth = Some(false);
        let other = EmbeddingRecord::new("w1", "c", Split::Web, rng::normal_vec(&mut g, 4));
        let web = Corpus::new(4, 3, vec![twin, other]).unwrap();
        let cfg = ExtrapolateConfig { k: 1, ridge_lambda: 0.0 };
        let out = extrapolate_corpus(&web, &dataset, &cfg).unwrap();
        assert_eq!(out.len(), dataset.len() + web.len());
        let aug = &out.records()[12];
        assert!(aug.extrapolated);
        assert_eq!(aug.text_vecs.len(), 1);
        let canon = recs[5].canonical_text().unwrap();
        for (a, b) in aug.text_vecs[0].iter().zip(&canon) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.records()[13].extrapolated);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn normal_equation_residual_is_orthogonal(seed in 0u64..1000, ridge in prop_oneof![Just(0.0), 1e-6..1.0f64]) {
            let f_mat = random_matrix(12, 5, seed);
            let f = DVector::from_vec(rng::normal_vec(&mut rng::seeded(seed + 1), 12));
            let w = solve_normal_equations(&f_mat, &f, ridge).unwrap();
            let lhs = f_mat.tr_mul(&(&f - &f_mat * &w.w));
            let rhs = &w.w * ridge;
            prop_assert!((lhs - rhs).amax() < 1e-8);
            prop_assert!(((&f - &f_mat * &w.w).norm() - w.residual_norm).abs() <= 1e-9 * w.residual_norm.max(1e-300));
        }

        #[test]
        fn in_span_queries_reconstruct_exactly(seed in 0u64..1000) {
            let f_mat = random_matrix(10, 4, seed);
            let a = DVector::from_vec(rng::normal_vec(&mut rng::seeded(seed ^ 77), 4));
            let f = &f_mat * &a;
            let w = solve_normal_equations(&f_mat, &f, 0.0).unwrap();
            prop_assert!(w.residual_norm < 1e-8);
        }

        #[test]
        fn synthesis_is_linear_and_permutation_equivariant(seed in 0u64..1000, a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let n = NeighborSet::from_columns(random_matrix(4, 3, seed), random_matrix(5, 3, seed + 1)).unwrap();
            let mut g = rng::seeded(seed + 2);
            let w1 = DVector::from_vec(rng::normal_vec(&mut g, 3));
            let w2 = DVector::from_vec(rng::normal_vec(&mut g, 3));
            let rw = |w: DVector<f64>| ReconWeights { w, residual_norm: 0.0, ridge_lambda: 0.0 };
            let s1 = synthesize_text(&n, &rw(w1.clone())).unwrap();
            let s2 = synthesize_text(&n, &rw(w2.clone())).unwrap();
            let s12 = synthesize_text(&n, &rw(&w1 * a + &w2 * b)).unwrap();
            for i in 0..5 {
                prop_assert!((s12[i] - (a * s1[i] + b * s2[i])).abs() < 1e-10);
            }
            let perm = [2usize, 0, 1];
            let np = NeighborSet::from_columns(n.image.select_columns(&perm), n.text.select_columns(&perm)).unwrap();
            let wp = DVector::from_iterator(3, perm.iter().map(|&p| w1[p]));
            let sp = synthesize_text(&np, &rw(wp)).unwrap();
            for i in 0..5 {
                prop_assert!((sp[i] - s1[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn neighbor_order_is_scale_invariant(seed in 0u64..200, f in 0.01..100.0f64) {
            let mut g = rng::seeded(seed);
            let pts: Vec<Vec<f64>> = (0..40).map(|_| rng::normal_vec(&mut g, 3)).collect();
            let q = rng::normal_vec(&mut g, 3);
            let base = nearest_neighbors(&q, &point_corpus(&pts), 6).unwrap();
            let sp: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|x| x * f).collect()).collect();
            let sq: Vec<f64> = q.iter().map(|x| x * f).collect();
            let scaled = nearest_neighbors(&sq, &point_corpus(&sp), 6).unwrap();
            prop_assert_eq!(base.indices, scaled.indices);
        }
    }
}
