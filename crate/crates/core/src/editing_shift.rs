//! Editing-shift vectors and the cosine loss that matches them.
//!
//! The shift of a grid is the averaged embedding difference between each
//! input quadrant and its output quadrant.

use std::sync::Arc;

use crate::autodiff::{cosine_loss, Graph, Var};
use crate::diffusion::{reconstruct_x0_graph, LatentKind, LatentSample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image_grid::{quadrant_origin, Image, ImageGrid};
use crate::providers::Embedder;
use crate::tensor::Tensor;

/// `(e(in0) - e(out0) + e(in1) - e(out1)) / 2` over quadrants in layout order.
pub fn editing_shift(quadrants: &[Image; 4], emb: &dyn Embedder) -> Result<Vec<f64>> {
    let e: Vec<Vec<f64>> = quadrants
        .iter()
        .map(|q| emb.embed_image(q))
        .collect::<Result<_>>()?;
    let d = emb.dim();
    if let Some(bad) = e.iter().find(|v| v.len() != d) {
        return Err(Error::Dimension(format!(
            "embedder declared dimension {d} but returned {}",
            bad.len()
        )));
    }
    Ok((0..d)
        .map(|i| ((e[0][i] - e[1][i]) + (e[2][i] - e[3][i])) / 2.0)
        .collect())
}

/// Shift of a whole grid.
pub fn grid_shift(grid: &ImageGrid, emb: &dyn Embedder) -> Result<Vec<f64>> {
    editing_shift(&crate::image_grid::decompose(grid)?, emb)
}

/// `1 - cos(pseudo, truth)`; 0 when both are directionless, 1 when one is.
pub fn editing_shift_loss(pseudo: &[f64], truth: &[f64]) -> Result<f64> {
    if pseudo.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "shift vectors differ in length: {} vs {}",
            pseudo.len(),
            truth.len()
        )));
    }
    Ok(cosine_loss(pseudo, truth))
}

/// Shift vector of a `[C, 2H, 2W]` grid map on the tape.
pub fn shift_graph(g: &mut Graph, grid: Var, emb: &Arc<dyn Embedder>) -> Result<Var> {
    let (_, h, w) = g.value(grid).chw();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("grid {h}x{w} has odd sides")));
    }
    let mut e = Vec::with_capacity(4);
    for q in 0..4 {
        let (y0, x0) = quadrant_origin(q, h / 2, w / 2);
        let quad = g.crop(grid, y0, x0, h / 2, w / 2);
        e.push(g.embed(quad, Arc::clone(emb))?);
    }
    let a = g.sub(e[0], e[1]);
    let b = g.sub(e[2], e[3]);
    let s = g.add(a, b);
    Ok(g.scale(s, 0.5))
}

/// Shift loss of the pseudo output reconstructed from `eps_hat`, on the tape.
///
/// The pseudo output is clamped to `[0, 1]` before embedding.
pub fn training_shift_loss_graph(
    g: &mut Graph,
    eps_hat: Var,
    x_t: Var,
    t: usize,
    truth_shift: &[f64],
    sched: &NoiseSchedule,
    latent: LatentKind,
    emb: &Arc<dyn Embedder>,
) -> Result<Var> {
    let x0 = reconstruct_x0_graph(g, x_t, eps_hat, t, sched)?;
    let img = latent.decode_graph(g, x0);
    let po = g.clamp01(img);
    let shift = shift_graph(g, po, emb)?;
    if g.value(shift).len() != truth_shift.len() {
        return Err(Error::Dimension(format!(
            "truth shift has {} entries, embedder gives {}",
            truth_shift.len(),
            g.value(shift).len()
        )));
    }
    let truth = g.constant(Tensor::from_vec(truth_shift.to_vec()));
    Ok(g.cosine_loss(shift, truth))
}

/// Loss and gradient with respect to the predicted noise.
pub fn training_shift_loss(
    predicted_eps: &Tensor,
    sample: &LatentSample,
    truth_grid: &ImageGrid,
    sched: &NoiseSchedule,
    latent: LatentKind,
    emb: &Arc<dyn Embedder>,
) -> Result<(f64, Tensor)> {
    predicted_eps.ensure_same_shape(&sample.x_t, "predicted noise")?;
    let truth = grid_shift(truth_grid, emb.as_ref())?;
    let mut g = Graph::new();
    let eps = g.leaf(predicted_eps.clone());
    let x_t = g.constant(sample.x_t.clone());
    let loss = training_shift_loss_graph(&mut g, eps, x_t, sample.t, &truth, sched, latent, emb)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.get_or_zeros(eps, predicted_eps)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::forward_noise;
    use crate::image_grid::compose;
    use crate::providers::MockEmbedder;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mock() -> Arc<dyn Embedder> {
        Arc::new(MockEmbedder::new())
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_chw(&Tensor::uniform(&[3, h, w], 0.45, rng).map(|v| v + 0.5))
    }

    #[test]
    fn identical_pairs_have_zero_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 4, 4);
        let b = random_image(&mut rng, 4, 4);
        let t = editing_shift(&[a.clone(), a, b.clone(), b], mock().as_ref()).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_roles_negates_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 4, 6)).collect();
        let e = mock();
        let t = editing_shift(&[q[0].clone(), q[1].clone(), q[2].clone(), q[3].clone()], e.as_ref()).unwrap();
        let s = editing_shift(&[q[1].clone(), q[0].clone(), q[3].clone(), q[2].clone()], e.as_ref()).unwrap();
        for (a, b) in t.iter().zip(&s) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn constant_pairs_shift_means_by_their_difference() {
        let i = Image::filled(4, 4, 3, 0.8);
        let o = Image::filled(4, 4, 3, 0.2);
        let t = editing_shift(&[i.clone(), o.clone(), i, o], mock().as_ref()).unwrap();
        for q in 0..4 {
            for c in 0..3 {
                assert!((t[q * 6 + c] - 0.6).abs() < 1e-12);
                assert!(t[q * 6 + 3 + c].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_values() {
        assert!((editing_shift_loss(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert_eq!(editing_shift_loss(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert!((editing_shift_loss(&[0.3, -2.0], &[-0.3, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(editing_shift_loss(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(editing_shift_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(editing_shift_loss(&[1.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn loss_is_scale_invariant_and_bounded(
            a in prop::collection::vec(-1.0f64..1.0, 5),
            b in prop::collection::vec(-1.0f64..1.0, 5),
            lambda in 0.01f64..100.0,
        ) {
            let l = editing_shift_loss(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&l));
            let scaled: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm * lambda.min(1.0) > 1e-6 {
                prop_assert!((editing_shift_loss(&scaled, &b).unwrap() - l).abs() < 1e-9);
            }
        }
    }

    fn training_case(seed: u64) -> (ImageGrid, LatentSample, NoiseSchedule) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 4, 4)).collect();
        let grid = compose(&q[0], &q[1], &q[2], &q[3]).unwrap();
        let sched = NoiseSchedule::cosine(50).unwrap();
        let x0 = grid.image().to_chw();
        let eps = Tensor::randn(x0.shape(), &mut rng);
        let t = 3;
        let x_t = forward_noise(&x0, t, &eps, &sched).unwrap();
        (grid, LatentSample { x_t, t, eps }, sched)
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let (grid, sample, sched) = training_case(3);
        let (l, _) =
            training_shift_loss(&sample.eps, &sample, &grid, &sched, LatentKind::Identity, &mock()).unwrap();
        assert!(l.abs() < 1e-9, "{l}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (grid, sample, sched) = training_case(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Tensor::randn(sample.eps.shape(), &mut rng).map(|v| 0.3 * v);
        let eps_hat = sample.eps.zip_map(&noise, |a, b| a + b);
        let e = mock();
        let (l, grad) =
            training_shift_loss(&eps_hat, &sample, &grid, &sched, LatentKind::Identity, &e).unwrap();
        assert!((0.0..=2.0).contains(&l));
        let h = 1e-6;
        let f = |x: &Tensor| training_shift_loss(x, &sample, &grid, &sched, LatentKind::Identity, &e).unwrap().0;
        let mut checked = 0;
        for i in 0..eps_hat.len() {
            let mut p = eps_hat.clone();
            p.data_mut()[i] += h;
            let mut m = eps_hat.clone();
            m.data_mut()[i] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            let ana = grad.data()[i];
            if num.abs().max(ana.abs()) < 1e-7 {
                continue;
            }
            checked += 1;
            assert!((num - ana).abs() / num.abs().max(ana.abs()) < 1e-4, "{i}: {num} vs {ana}");
        }
        assert!(checked > eps_hat.len() / 2);
    }
}
