//! State-space conditioning: a minimal four-direction 2D scan block with a
//! zero-initialised output projection, and the injection block that wraps a
//! frozen block, its trainable copy and two such scan blocks.
//!
//! The injection block computes
//!
//! ```text
//! y = F(x; frozen) + G2(F_c(x + G1(x_vpc)))
//! ```
//!
//! where `G1` and `G2` start with all-zero output projections, so at
//! construction `y == F(x; frozen)` exactly.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, ParamId, ParamStore, ResBlock};
use crate::tensor::Tensor;

/// Traversal order of a 2D map flattened into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowMajor,
    RowMajorReversed,
    ColumnMajor,
    ColumnMajorReversed,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowMajor,
        ScanDirection::RowMajorReversed,
        ScanDirection::ColumnMajor,
        ScanDirection::ColumnMajorReversed,
    ];
}

/// Pixel indices (`y * w + x`) in the order `dir` visits them.
pub fn scan_order(h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    match dir {
        ScanDirection::RowMajor => row,
        ScanDirection::RowMajorReversed => row.into_iter().rev().collect(),
        ScanDirection::ColumnMajor => col,
        ScanDirection::ColumnMajorReversed => col.into_iter().rev().collect(),
    }
}

/// Flatten an `h × w` map (row-major slice) into the four traversal sequences.
pub fn cross_scan(map: &[f64], h: usize, w: usize) -> Result<[Vec<f64>; 4]> {
    if map.len() != h * w {
        return Err(Error::Dimension(format!(
            "map of {} values is not {h}x{w}",
            map.len()
        )));
    }
    Ok(ScanDirection::ALL.map(|d| scan_order(h, w, d).into_iter().map(|i| map[i]).collect()))
}

/// Scatter each sequence back onto the map and average the four results.
pub fn cross_merge(seqs: &[Vec<f64>; 4], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; h * w];
    for (dir, seq) in ScanDirection::ALL.iter().zip(seqs) {
        if seq.len() != h * w {
            return Err(Error::Dimension(format!(
                "sequence of length {} cannot cover {h}x{w}",
                seq.len()
            )));
        }
        for (i, v) in scan_order(h, w, *dir).into_iter().zip(seq) {
            out[i] += 0.25 * v;
        }
    }
    Ok(out)
}

/// Diagonal linear recurrence `h_k = a ⊙ h_{k-1} + b x_k`, `y_k = c · h_k`,
/// with `h_{-1} = 0`. `a`, `b`, `c` all have the state dimension.
pub fn linear_scan(seq: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    let mut state = vec![0.0; a.len()];
    seq.iter()
        .map(|&x| {
            let mut y = 0.0;
            for q in 0..a.len() {
                state[q] = a[q] * state[q] + b[q] * x;
                y += c[q] * state[q];
            }
            y
        })
        .collect()
}

/// Sizes of an [`Ss2dBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ss2dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub inner: usize,
    pub state: usize,
}

/// `out_proj(scan2d(u) + skip ⊙ u)` with `u = silu(in_proj(x))`, and
/// `out_proj` zero at construction.
///
/// Both projections are bias-free, so a zero input always maps to zero.
/// The transition is stored as a logit and squashed into `(0, 1)`. The
/// per-channel `skip` term lets a pixel reach the output without passing
/// through the decaying recurrence.
#[derive(Clone, Copy, Debug)]
pub struct Ss2dBlock {
    pub dims: Ss2dDims,
    pub in_proj: Conv,
    pub a_logit: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub skip: ParamId,
    pub out_proj: Conv,
}

impl Ss2dBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: Ss2dDims,
        rng: &mut R,
    ) -> Self {
        let in_proj = Conv::new_unbiased(
            store,
            &format!("{name}.in_proj"),
            dims.c_in,
            dims.inner,
            1,
            Init::Uniform,
            true,
            rng,
        );
        let shape = [4, dims.inner, dims.state];
        let n: usize = shape.iter().product();
        let a0 = Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(0.5..2.5)).collect(),
        )
        .expect("scan param shape");
        let bound = 1.0 / (dims.state as f64).sqrt();
        let a_logit = store.add(format!("{name}.a_logit"), a0, true);
        let b = store.add(format!("{name}.b"), Tensor::uniform(&shape, bound, rng), true);
        let c = store.add(format!("{name}.c"), Tensor::uniform(&shape, bound, rng), true);
        let skip = store.add(format!("{name}.skip"), Tensor::full(&[dims.inner], 1.0), true);
        let out_proj = Conv::new_unbiased(
            store,
            &format!("{name}.out_proj"),
            dims.inner,
            dims.c_out,
            1,
            Init::Zeros,
            true,
            rng,
        );
        Self {
            dims,
            in_proj,
            a_logit,
            b,
            c,
            skip,
            out_proj,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let u = self.in_proj.forward(g, p, x);
        let u = g.silu(u);
        let a = g.sigmoid(p[self.a_logit]);
        let y = g.scan2d(u, a, p[self.b], p[self.c]);
        let d = g.channel_scale(u, p[self.skip]);
        let y = g.add(y, d);
        self.out_proj.forward(g, p, y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.in_proj.w,
            self.a_logit,
            self.b,
            self.c,
            self.skip,
            self.out_proj.w,
        ]
    }
}

/// Run the condition encoder on a `[C, H, W]` grid latent without a tape
/// kept around for gradients.
pub fn encode_condition(grid_latent: &Tensor, block: &Ss2dBlock, store: &ParamStore) -> Result<Tensor> {
    check_map(grid_latent, block.dims.c_in, "condition latent")?;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.leaf(grid_latent.clone());
    let y = block.forward(&mut g, &p, x);
    Ok(g.value(y).clone())
}

fn check_map(t: &Tensor, channels: usize, what: &str) -> Result<()> {
    if t.shape().len() != 3 || t.shape()[0] != channels {
        return Err(Error::Dimension(format!(
            "{what} must be [{channels}, H, W], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Frozen block, its trainable copy, and the two zero-initialised scan
/// blocks around the copy.
#[derive(Clone, Copy, Debug)]
pub struct InjectionBlock {
    pub frozen: ResBlock,
    pub copy: ResBlock,
    pub g_in: Ss2dBlock,
    pub g_out: Ss2dBlock,
}

impl InjectionBlock {
    /// Copy `frozen` into the `control` namespace and add the two scan blocks.
    pub fn wrap<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        frozen: ResBlock,
        channels: usize,
        cond_channels: usize,
        inner: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let copy = frozen.copy_into(store, &format!("control.{name}"), true);
        let g_in = Ss2dBlock::new(
            store,
            &format!("ssm.{name}.g_in"),
            Ss2dDims {
                c_in: cond_channels,
                c_out: channels,
                inner,
                state,
            },
            rng,
        );
        let g_out = Ss2dBlock::new(
            store,
            &format!("ssm.{name}.g_out"),
            Ss2dDims {
                c_in: channels,
                c_out: channels,
                inner,
                state,
            },
            rng,
        );
        Self {
            frozen,
            copy,
            g_in,
            g_out,
        }
    }

    /// Frozen output plus, when a condition is given, the injected term.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        x_vpc: Option<Var>,
        frozen_bias: Option<Var>,
        copy_bias: Option<Var>,
    ) -> Var {
        let base = self.frozen.forward(g, p, x, frozen_bias);
        let Some(cond) = x_vpc else {
            return base;
        };
        let c = self.g_in.forward(g, p, cond);
        let xin = g.add(x, c);
        let h = self.copy.forward(g, p, xin, copy_bias);
        let inj = self.g_out.forward(g, p, h);
        g.add(base, inj)
    }
}

/// Apply an injection block to concrete arrays.
pub fn inject(x: &Tensor, x_vpc: &Tensor, block: &InjectionBlock, store: &ParamStore) -> Result<Tensor> {
    if x.shape().len() != 3 || x_vpc.shape().len() != 3 || x.shape()[1..] != x_vpc.shape()[1..] {
        return Err(Error::Dimension(format!(
            "injection inputs must share spatial size, got {:?} and {:?}",
            x.shape(),
            x_vpc.shape()
        )));
    }
    check_map(x_vpc, block.g_in.dims.c_in, "injected condition")?;
    check_map(x, block.g_out.dims.c_out, "block input")?;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let cv = g.leaf(x_vpc.clone());
    let y = block.forward(&mut g, &p, xv, Some(cv), None, None);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_scan_two_by_two() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let seqs = cross_scan(&[a, b, c, d], 2, 2).unwrap();
        assert_eq!(seqs[0], vec![a, b, c, d]);
        assert_eq!(seqs[1], vec![d, c, b, a]);
        assert_eq!(seqs[2], vec![a, c, b, d]);
        assert_eq!(seqs[3], vec![d, b, c, a]);
    }

    #[test]
    fn cross_scan_sequences_are_permutations_and_merge_inverts() {
        let (h, w) = (3, 5);
        let map: Vec<f64> = (0..h * w).map(|i| i as f64 * 0.5 - 1.0).collect();
        let seqs = cross_scan(&map, h, w).unwrap();
        let mut sorted_map = map.clone();
        sorted_map.sort_by(f64::total_cmp);
        for s in &seqs {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, sorted_map);
        }
        assert_eq!(cross_merge(&seqs, h, w).unwrap(), map);
    }

    #[test]
    fn scalar_scan_matches_closed_form() {
        let xs = [0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        let (a, b, c) = (0.8, 1.5, -0.6);
        let got = linear_scan(&xs, &[a], &[b], &[c]);
        for k in 0..xs.len() {
            let h: f64 = (0..=k).map(|j| a.powi((k - j) as i32) * b * xs[j]).sum();
            assert!((got[k] - c * h).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_block_encodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dims = Ss2dDims {
            c_in: 3,
            c_out: 3,
            inner: 4,
            state: 2,
        };
        let block = Ss2dBlock::new(&mut store, "ssm.ven", dims, &mut rng);
        let x = Tensor::randn(&[3, 6, 4], &mut rng);
        let y = encode_condition(&x, &block, &store).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));

        *store.get_mut(block.out_proj.w) = Tensor::uniform(&[3, 4, 1, 1], 0.5, &mut rng);
        let y = encode_condition(&x, &block, &store).unwrap();
        assert!(y.data().iter().any(|&v| v.abs() > 1e-6));
    }

    #[test]
    fn injection_is_identity_to_frozen_block_at_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let frozen = ResBlock::new(&mut store, "base.blk", 4, false, &mut rng);
        let block = InjectionBlock::wrap(&mut store, "blk", frozen, 4, 3, 4, 2, &mut rng);
        let x = Tensor::randn(&[4, 4, 4], &mut rng);
        let cond = Tensor::randn(&[3, 4, 4], &mut rng);
        let y = inject(&x, &cond, &block, &store).unwrap();

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let f = frozen.forward(&mut g, &p, xv, None);
        assert_eq!(&y, g.value(f));
    }

    #[test]
    fn inject_gradients_match_finite_differences_and_skip_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let frozen = ResBlock::new(&mut store, "base.blk", 2, false, &mut rng);
        let block = InjectionBlock::wrap(&mut store, "blk", frozen, 2, 2, 2, 2, &mut rng);
        for conv in [block.g_in.out_proj, block.g_out.out_proj] {
            *store.get_mut(conv.w) = Tensor::uniform(&[2, 2, 1, 1], 0.7, &mut rng);
        }
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let cond = Tensor::randn(&[2, 3, 4], &mut rng);
        let target = Tensor::randn(&[2, 3, 4], &mut rng);
        let loss = |store: &ParamStore| -> (f64, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.leaf(x.clone());
            let cv = g.leaf(cond.clone());
            let tv = g.leaf(target.clone());
            let y = block.forward(&mut g, &p, xv, Some(cv), None, None);
            let d = g.sub(y, tv);
            let l = g.sum_sq(d);
            let grads = g.backward(l).unwrap();
            let per: Vec<Option<Tensor>> = store.ids().map(|id| grads.get(p[id]).cloned()).collect();
            (g.value(l).item(), per)
        };
        let (_, analytic) = loss(&store);
        let h = 1e-6;
        for (id, param) in store.clone().iter() {
            let grad = analytic[id.index()].clone().unwrap_or_else(|| Tensor::zeros(param.value.shape()));
            if !param.trainable {
                assert_eq!(param.namespace(), "base");
                continue;
            }
            for i in 0..param.value.len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= h;
                let num = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let ana = grad.data()[i];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                assert!(err < 1e-4, "{} [{i}]: numeric {num} analytic {ana}", param.name);
            }
        }
    }

    #[test]
    fn inject_rejects_spatial_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let frozen = ResBlock::new(&mut store, "base.blk", 4, false, &mut rng);
        let block = InjectionBlock::wrap(&mut store, "blk", frozen, 4, 3, 4, 2, &mut rng);
        let x = Tensor::zeros(&[4, 4, 4]);
        let cond = Tensor::zeros(&[3, 2, 4]);
        assert!(matches!(inject(&x, &cond, &block, &store), Err(Error::Dimension(_))));
    }
}
