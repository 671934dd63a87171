//! Edit-quality metrics and the split evaluation harness.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::COSINE_EPS;
use crate::dataset::{LoadedRecord, Manifest, Split};
use crate::diffusion::{forward_noise, reconstruct_x0, Denoiser, SampleOptions};
use crate::error::{Error, Result};
use crate::image_grid::{Image, ImageGrid};
use crate::instruction::{text_embedding, unify_for_inference};
use crate::providers::{Embedder, InstructionUnifier};
use crate::seed::{derive_seed, stream};
use crate::selective::selective_area_loss;
use crate::tensor::Tensor;

/// Diagonal ridge added to covariances that are singular.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Cosine similarity, 0 when either vector has norm below [`COSINE_EPS`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the image-embedding change and the caption-embedding change.
pub fn directional_similarity(
    in_img: &Image,
    out_img: &Image,
    caption: &str,
    edited_caption: &str,
    emb: &dyn Embedder,
) -> Result<f64> {
    let di: Vec<f64> = emb
        .embed_image(out_img)?
        .iter()
        .zip(emb.embed_image(in_img)?)
        .map(|(o, i)| o - i)
        .collect();
    let dt: Vec<f64> = emb
        .embed_text(edited_caption)
        .iter()
        .zip(emb.embed_text(caption))
        .map(|(e, c)| e - c)
        .collect();
    cosine_similarity(&di, &dt)
}

/// Sample mean and (n - 1)-normalised covariance of row vectors.
pub fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 feature vectors, got {n}"
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Dimension("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrt_psd(a);
    let inner = &ra * b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, symmetric in its arguments.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Dimension("moment dimensions disagree".into()));
    }
    let mean_term = (mu_a - mu_b).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(cov_a, cov_b) + trace_sqrt_product(cov_b, cov_a));
    Ok((mean_term + (cov_a.trace() + cov_b.trace()) - 2.0 * cross).max(0.0))
}

fn regularize(cov: &mut DMatrix<f64>, n: usize) {
    let d = cov.nrows();
    let min_eig = SymmetricEigen::new(cov.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if n < d + 1 || min_eig <= COVARIANCE_RIDGE {
        log::warn!(
            "feature covariance is singular ({n} samples, {d} dims); adding a {COVARIANCE_RIDGE} ridge"
        );
        for i in 0..d {
            cov[(i, i)] += COVARIANCE_RIDGE;
        }
    }
}

/// Fréchet distance between two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (mu_a, mut cov_a) = moments(a)?;
    let (mu_b, mut cov_b) = moments(b)?;
    regularize(&mut cov_a, a.len());
    regularize(&mut cov_b, b.len());
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Fréchet distance between two image sets in embedder feature space.
pub fn feature_distance(set_a: &[Image], set_b: &[Image], emb: &dyn Embedder) -> Result<f64> {
    let fa: Vec<Vec<f64>> = set_a.iter().map(|i| emb.embed_image(i)).collect::<Result<_>>()?;
    let fb: Vec<Vec<f64>> = set_b.iter().map(|i| emb.embed_image(i)).collect::<Result<_>>()?;
    frechet_distance(&fa, &fb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Held-out records evaluated as in-domain.
    In,
    /// Held-out records whose groups must not appear in training.
    Ood,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(SplitKind::In),
            "ood" => Ok(SplitKind::Ood),
            other => Err(Error::Validation(format!("split must be `in` or `ood`, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub group: String,
    pub directional_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitKind,
    pub directional_similarity: f64,
    pub feature_distance: f64,
    pub records: Vec<RecordScore>,
}

/// Anything that fills the query quadrant of a conditioning grid.
pub trait GridEditor {
    fn edit(&self, cond_grid: &ImageGrid, instruction: &str, seed: u64) -> Result<ImageGrid>;
}

/// The trained model behind the inference path: unify the instruction,
/// embed it, sample.
pub struct ModelEditor<'a> {
    pub model: &'a Denoiser,
    pub embedder: &'a dyn Embedder,
    pub unifier: &'a dyn InstructionUnifier,
    pub options: SampleOptions,
}

impl GridEditor for ModelEditor<'_> {
    fn edit(&self, cond_grid: &ImageGrid, instruction: &str, seed: u64) -> Result<ImageGrid> {
        let unified = unify_for_inference(instruction, self.unifier)?;
        let text = text_embedding(&unified, self.embedder, self.model.config().text_dim)?;
        self.model.sample(cond_grid, &text, &self.options, seed)
    }
}

/// Records of `records` from `manifest`, labelled `split`. An out-of-domain
/// label requires that no record's group appears in `training_groups`.
pub fn select_split(
    manifest: &Manifest,
    records: Split,
    split: SplitKind,
    training_groups: &BTreeSet<String>,
) -> Result<Vec<LoadedRecord>> {
    let entries = manifest.records(records);
    if entries.is_empty() {
        return Err(Error::Validation(format!("the {records:?} split has no records")));
    }
    if split == SplitKind::Ood {
        let overlap: BTreeSet<&str> = entries
            .iter()
            .map(|e| e.group.as_str())
            .filter(|g| training_groups.contains(*g))
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Protocol(format!(
                "out-of-domain split shares {} group(s) with training, e.g. {}",
                overlap.len(),
                overlap.iter().next().expect("non-empty")
            )));
        }
    }
    entries.into_iter().map(|e| manifest.load_record(e)).collect()
}

/// Edit every record, then score directional similarity per record and the
/// feature distance between edited and true query outputs.
pub fn evaluate_records(
    editor: &dyn GridEditor,
    records: &[LoadedRecord],
    split: SplitKind,
    emb: &dyn Embedder,
    seed: u64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let mut scores = Vec::with_capacity(records.len());
    let mut edited = Vec::with_capacity(records.len());
    let mut truth = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let out = editor.edit(&rec.cond_grid, &rec.instruction, derive_seed(seed, stream::EVAL, i as u64))?;
        let query_in = rec.cond_grid.quadrant(2);
        let result = out.quadrant(3);
        let (cap, edited_cap) = &rec.query_captions;
        let ds = directional_similarity(&query_in, &result, cap, edited_cap, emb)?;
        scores.push(RecordScore {
            id: rec.id.clone(),
            group: rec.group.clone(),
            directional_similarity: ds,
        });
        edited.push(result);
        truth.push(rec.train_grid.quadrant(3));
    }
    let fd = if edited.len() >= 2 {
        feature_distance(&edited, &truth, emb)?
    } else {
        log::warn!("feature distance needs at least 2 records; reporting NaN");
        f64::NAN
    };
    let ds = scores.iter().map(|s| s.directional_similarity).sum::<f64>() / scores.len() as f64;
    Ok(EvalReport {
        split,
        directional_similarity: ds,
        feature_distance: fd,
        records: scores,
    })
}

/// [`select_split`] followed by [`evaluate_records`].
pub fn evaluate_split(
    editor: &dyn GridEditor,
    manifest: &Manifest,
    records: Split,
    split: SplitKind,
    training_groups: &BTreeSet<String>,
    emb: &dyn Embedder,
    seed: u64,
) -> Result<EvalReport> {
    let recs = select_split(manifest, records, split, training_groups)?;
    evaluate_records(editor, &recs, split, emb, seed)
}

/// Quality of single-step pseudo outputs at fixed timesteps and noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoMetrics {
    /// Mean squared error over masked entries, averaged over records with a non-empty mask.
    pub masked_mse: f64,
    /// Mean directional similarity of the pseudo query output.
    pub directional_similarity: f64,
    pub samples: usize,
}

/// Noise every record at each of `timesteps` with seeded noise, reconstruct
/// the pseudo grid from one noise prediction and score it against the truth.
pub fn pseudo_output_metrics(
    model: &Denoiser,
    records: &[LoadedRecord],
    emb: &dyn Embedder,
    timesteps: &[usize],
    seed: u64,
) -> Result<PseudoMetrics> {
    if records.is_empty() || timesteps.is_empty() {
        return Err(Error::Validation("pseudo-output metrics need records and timesteps".into()));
    }
    let (mut mse, mut n_mse, mut ds, mut n) = (0.0, 0usize, 0.0, 0usize);
    for (i, rec) in records.iter().enumerate() {
        let x0 = model.encode_grid(&rec.train_grid)?;
        let text = text_embedding(&rec.unified, emb, model.config().text_dim)?;
        for &t in timesteps {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, t as u64));
            let eps = Tensor::randn(x0.shape(), &mut rng);
            let x_t = forward_noise(&x0, t, &eps, model.schedule())?;
            let eps_hat = model.predict_noise(&x_t, t, &text, Some(&rec.cond_grid))?;
            let x0_hat = reconstruct_x0(&x_t, &eps_hat, t, model.schedule())?;
            let pseudo = ImageGrid::from_image(model.latent().decode(&x0_hat).clamped())?;
            if rec.mask.count() > 0 {
                mse += selective_area_loss(&pseudo, &rec.train_grid, &rec.mask, true)?;
                n_mse += 1;
            }
            let (cap, edited_cap) = &rec.query_captions;
            ds += directional_similarity(&rec.cond_grid.quadrant(2), &pseudo.quadrant(3), cap, edited_cap, emb)?;
            n += 1;
        }
    }
    Ok(PseudoMetrics {
        masked_mse: if n_mse > 0 { mse / n_mse as f64 } else { 0.0 },
        directional_similarity: ds / n as f64,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockEmbedder;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Embeds images as (mean of channel 0, mean of channel 1) and text
    /// through a fixed table.
    struct TwoD;

    impl Embedder for TwoD {
        fn dim(&self) -> usize {
            2
        }
        fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
            let n = (img.height() * img.width()) as f64;
            let mut v = vec![0.0; 2];
            for y in 0..img.height() {
                for x in 0..img.width() {
                    v[0] += img.get(y, x, 0) / n;
                    v[1] += img.get(y, x, 1) / n;
                }
            }
            Ok(v)
        }
        fn embed_text(&self, text: &str) -> Vec<f64> {
            match text {
                "after" => vec![1.0, 1.0],
                _ => vec![0.0, 0.0],
            }
        }
        fn image_vjp(&self, _: &Image, _: &[f64]) -> Option<Image> {
            None
        }
    }

    #[test]
    fn directional_similarity_cases() {
        let a = Image::filled(2, 2, 3, 0.0);
        let mut b = a.clone();
        for y in 0..2 {
            for x in 0..2 {
                b.set(y, x, 0, 1.0);
            }
        }
        let s = directional_similarity(&a, &b, "before", "after", &TwoD).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-12);
        let mut c = b.clone();
        for y in 0..2 {
            for x in 0..2 {
                c.set(y, x, 1, 1.0);
            }
        }
        assert!((directional_similarity(&a, &c, "before", "after", &TwoD).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(directional_similarity(&a, &a, "before", "before", &TwoD).unwrap(), 0.0);
    }

    #[test]
    fn mock_recolor_points_along_the_caption() {
        let e = MockEmbedder::new();
        let red = Image::solid(4, 4, &crate::providers::color_table()["red"]);
        let blue = Image::solid(4, 4, &crate::providers::color_table()["blue"]);
        let s = directional_similarity(&red, &blue, "a red square", "a blue square", &e).unwrap();
        assert!(s > 0.99, "{s}");
    }

    fn gaussian_features(n: usize, mean: &[f64], scale: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                mean.iter()
                    .zip(scale)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn frechet_matches_closed_form_for_diagonal_gaussians() {
        let mu_a = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        let mu_b = DVector::from_vec(vec![1.0, 1.0, 0.5]);
        let va = [1.0, 4.0, 0.25];
        let vb = [9.0, 1.0, 0.25];
        let cov_a = DMatrix::from_diagonal(&DVector::from_vec(va.to_vec()));
        let cov_b = DMatrix::from_diagonal(&DVector::from_vec(vb.to_vec()));
        let got = frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b).unwrap();
        let expect = (mu_a.clone() - mu_b.clone()).norm_squared()
            + va.iter().zip(&vb).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn frechet_matches_closed_form_for_commuting_full_covariances() {
        let q = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        let da = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let db = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 3.0]));
        let ca = &q * &da * q.transpose();
        let cb = &q * &db * q.transpose();
        let mu = DVector::from_vec(vec![0.3, -0.2]);
        let got = frechet_from_moments(&mu, &ca, &mu, &cb).unwrap();
        let expect = (2f64.sqrt() - 0.5f64.sqrt()).powi(2) + (0.5f64.sqrt() - 3f64.sqrt()).powi(2);
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn feature_distance_is_zero_on_identical_sets_and_symmetric() {
        let a = gaussian_features(40, &[0.0, 1.0, 2.0], &[1.0, 0.5, 0.2], 1);
        let b = gaussian_features(30, &[0.5, 1.0, 2.5], &[2.0, 0.5, 0.1], 2);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, frechet_distance(&b, &a).unwrap());
    }

    #[test]
    fn singular_covariance_gets_a_ridge() {
        let a = gaussian_features(3, &[0.0; 5], &[1.0; 5], 3);
        let b = gaussian_features(3, &[1.0; 5], &[1.0; 5], 4);
        let d = frechet_distance(&a, &b).unwrap();
        assert!(d.is_finite() && d > 0.0);
        assert!(frechet_distance(&a[..1], &b).is_err());
    }

    proptest! {
        #[test]
        fn cosine_similarity_bounded_and_scale_invariant(
            a in prop::collection::vec(-1.0f64..1.0, 4),
            b in prop::collection::vec(-1.0f64..1.0, 4),
            k in 0.1f64..10.0,
        ) {
            let s = cosine_similarity(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na * k.min(1.0) > 1e-6 {
                prop_assert!((cosine_similarity(&scaled, &b).unwrap() - s).abs() < 1e-9);
            }
        }
    }
}
