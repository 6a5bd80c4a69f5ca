//! Token orderings that serialize an `H x W` grid into a sequence.
//!
//! Each ordering comes in four directions: direction 0 is the base scheme,
//! direction 2 applies the same scheme to the transposed grid, and
//! directions 1 and 3 reverse 0 and 2.

use std::fmt;

use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanKind {
    /// Row-major over the whole grid.
    Raster,
    /// `win x win` tiles visited row-major, row-major inside each tile.
    Window(usize),
    /// Vertical stripes of width `L` visited left to right, row-major
    /// inside each stripe.
    Stripe(usize),
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanKind::Raster => write!(f, "raster"),
            ScanKind::Window(n) => write!(f, "window({n})"),
            ScanKind::Stripe(n) => write!(f, "stripe({n})"),
        }
    }
}

/// A bijection between sequence positions and flat grid indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    h: usize,
    w: usize,
    perm: Vec<usize>,
    inv: Vec<usize>,
    kind: ScanKind,
    direction: u8,
}

impl ScanOrder {
    pub fn new(kind: ScanKind, h: usize, w: usize, direction: u8) -> Result<Self> {
        ensure!(h >= 1 && w >= 1, "scan grid must be non-empty, got {h}x{w}");
        ensure!(direction < 4, "scan direction must be 0..=3, got {direction}");
        let param = match kind {
            ScanKind::Raster => 1,
            ScanKind::Window(n) | ScanKind::Stripe(n) => n,
        };
        ensure!(param >= 1, "{kind} needs a positive size");
        let mut perm = if direction < 2 {
            base_order(kind, h, w)
        } else {
            // Same scheme on the transposed grid, mapped back.
            base_order(kind, w, h)
                .into_iter()
                .map(|t| (t % h) * w + t / h)
                .collect()
        };
        if direction % 2 == 1 {
            perm.reverse();
        }
        let mut inv = vec![0; perm.len()];
        for (seq, &grid) in perm.iter().enumerate() {
            inv[grid] = seq;
        }
        Ok(Self {
            h,
            w,
            perm,
            inv,
            kind,
            direction,
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Flat grid index visited at each sequence position.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Sequence position of each flat grid index.
    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn direction(&self) -> u8 {
        self.direction
    }

    /// Number of consecutive token pairs that are vertical grid neighbors.
    pub fn vertical_transitions(&self) -> usize {
        self.perm
            .windows(2)
            .filter(|p| p[0] % self.w == p[1] % self.w && p[0].abs_diff(p[1]) == self.w)
            .count()
    }

    /// Sequence labels laid out on the grid, one text row per grid row.
    pub fn text_grid(&self) -> String {
        let width = (self.len() - 1).to_string().len();
        self.inv
            .chunks(self.w)
            .map(|row| {
                row.iter()
                    .map(|v| format!("{v:>width$}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn base_order(kind: ScanKind, h: usize, w: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(h * w);
    match kind {
        ScanKind::Raster => perm.extend(0..h * w),
        ScanKind::Stripe(l) => {
            for c0 in (0..w).step_by(l) {
                let c1 = (c0 + l).min(w);
                for r in 0..h {
                    perm.extend(r * w + c0..r * w + c1);
                }
            }
        }
        ScanKind::Window(n) => {
            for r0 in (0..h).step_by(n) {
                for c0 in (0..w).step_by(n) {
                    for r in r0..(r0 + n).min(h) {
                        perm.extend(r * w + c0..r * w + (c0 + n).min(w));
                    }
                }
            }
        }
    }
    perm
}

pub fn stripe_order(h: usize, w: usize, l: usize, direction: u8) -> Result<ScanOrder> {
    ScanOrder::new(ScanKind::Stripe(l), h, w, direction)
}

pub fn raster_order(h: usize, w: usize, direction: u8) -> Result<ScanOrder> {
    ScanOrder::new(ScanKind::Raster, h, w, direction)
}

pub fn window_order(h: usize, w: usize, win: usize, direction: u8) -> Result<ScanOrder> {
    ScanOrder::new(ScanKind::Window(win), h, w, direction)
}

/// The four directional orders of one scheme.
pub fn four_directions(kind: ScanKind, h: usize, w: usize) -> Result<[ScanOrder; 4]> {
    Ok([
        ScanOrder::new(kind, h, w, 0)?,
        ScanOrder::new(kind, h, w, 1)?,
        ScanOrder::new(kind, h, w, 2)?,
        ScanOrder::new(kind, h, w, 3)?,
    ])
}

/// `[C, H, W] -> [C, H*W]` with tokens in scan order.
pub fn gather_tokens<'t, T: Element>(x: Var<'t, T>, order: &ScanOrder) -> Result<Var<'t, T>> {
    let shape = x.shape();
    ensure!(
        shape.len() == 3 && shape[1] == order.h && shape[2] == order.w,
        "cannot gather {:?} with a {}x{} scan order",
        shape,
        order.h,
        order.w
    );
    x.reshape(&[shape[0], order.len()])?.permute_last(&order.perm)
}

/// Inverse of [`gather_tokens`]: `[C, H*W] -> [C, H, W]`.
pub fn scatter_tokens<'t, T: Element>(seq: Var<'t, T>, order: &ScanOrder) -> Result<Var<'t, T>> {
    let shape = seq.shape();
    ensure!(
        shape.len() == 2 && shape[1] == order.len(),
        "cannot scatter {:?} with a {}x{} scan order",
        shape,
        order.h,
        order.w
    );
    seq.permute_last(&order.inv)?
        .reshape(&[shape[0], order.h, order.w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kinds(p: usize) -> [ScanKind; 3] {
        [ScanKind::Raster, ScanKind::Window(p), ScanKind::Stripe(p)]
    }

    #[test]
    fn stripe_hand_enumeration() {
        assert_eq!(stripe_order(2, 4, 2, 0).unwrap().perm(), &[0, 1, 4, 5, 2, 3, 6, 7]);
        assert_eq!(stripe_order(2, 4, 2, 1).unwrap().perm(), &[7, 6, 3, 2, 5, 4, 1, 0]);
        // Horizontal stripe of height 2 covering both rows, column-major inside.
        assert_eq!(stripe_order(2, 4, 2, 2).unwrap().perm(), &[0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn raster_hand_enumeration() {
        assert_eq!(raster_order(2, 2, 0).unwrap().perm(), &[0, 1, 2, 3]);
        assert_eq!(raster_order(2, 2, 2).unwrap().perm(), &[0, 2, 1, 3]);
        assert_eq!(raster_order(2, 3, 2).unwrap().perm(), &[0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn window_hand_enumeration() {
        assert_eq!(
            window_order(4, 4, 2, 0).unwrap().perm(),
            &[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
        // Ragged right column of windows.
        assert_eq!(window_order(2, 3, 2, 0).unwrap().perm(), &[0, 1, 3, 4, 2, 5]);
    }

    #[test]
    fn degenerate_parameters() {
        for h in 1..=6 {
            for w in 1..=6 {
                for dir in 0..4 {
                    let raster = raster_order(h, w, dir).unwrap();
                    assert_eq!(window_order(h, w, 1, dir).unwrap().perm(), raster.perm());
                    assert_eq!(window_order(h, w, h.max(w), dir).unwrap().perm(), raster.perm());
                    assert_eq!(stripe_order(h, w, h.max(w) + 3, dir).unwrap().perm(), raster.perm());
                }
                let col_major: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
                assert_eq!(stripe_order(h, w, 1, 0).unwrap().perm(), col_major.as_slice());
                for dir in [0, 1] {
                    assert_eq!(
                        stripe_order(h, w, w, dir).unwrap().perm(),
                        raster_order(h, w, dir).unwrap().perm()
                    );
                }
            }
        }
    }

    #[test]
    fn exhaustive_bijection_and_reversal() {
        for h in 1..=8 {
            for w in 1..=8 {
                for p in 1..=8 {
                    for kind in kinds(p) {
                        let o = four_directions(kind, h, w).unwrap();
                        for d in &o {
                            let mut seen = vec![false; h * w];
                            for &g in d.perm() {
                                assert!(!seen[g]);
                                seen[g] = true;
                            }
                            for (s, &g) in d.perm().iter().enumerate() {
                                assert_eq!(d.inv()[g], s);
                            }
                        }
                        for (fwd, back) in [(&o[0], &o[1]), (&o[2], &o[3])] {
                            let rev: Vec<usize> = fwd.perm().iter().rev().copied().collect();
                            assert_eq!(back.perm(), rev.as_slice());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn vertical_transitions_distinguish_stripe_from_raster() {
        for h in 2..=8 {
            for w in 1..=8 {
                if w >= 2 {
                    assert_eq!(raster_order(h, w, 0).unwrap().vertical_transitions(), 0);
                }
                for l in 1..w {
                    let total: usize = four_directions(ScanKind::Stripe(l), h, w)
                        .unwrap()
                        .iter()
                        .map(ScanOrder::vertical_transitions)
                        .sum();
                    assert!(total >= 1, "{h}x{w} L={l}");
                }
                // Unit-width stripes are pure vertical walks.
                assert_eq!(
                    stripe_order(h, w, 1, 0).unwrap().vertical_transitions(),
                    w * (h - 1)
                );
            }
        }
    }

    #[test]
    fn text_grid_labels() {
        let o = stripe_order(2, 4, 2, 0).unwrap();
        assert_eq!(o.text_grid(), "0 1 4 5\n2 3 6 7");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(stripe_order(0, 4, 2, 0).is_err());
        assert!(stripe_order(4, 4, 0, 0).is_err());
        assert!(window_order(4, 4, 2, 4).is_err());
    }

    #[test]
    fn large_grid_generation_is_fast() {
        let start = std::time::Instant::now();
        let o = stripe_order(256, 256, 4, 2).unwrap();
        let elapsed = start.elapsed();
        assert_eq!(o.len(), 65536);
        assert!(elapsed.as_millis() < 10, "{elapsed:?}");
    }

    #[test]
    fn gather_scatter_roundtrip_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn(&[3, 5, 6], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let raster = raster_order(5, 6, 0).unwrap();
        assert_eq!(gather_tokens(xv, &raster).unwrap().value().data(), x.data());
        for o in four_directions(ScanKind::Stripe(4), 5, 6).unwrap() {
            let seq = gather_tokens(xv, &o).unwrap();
            assert_eq!(seq.shape(), vec![3, 30]);
            assert_eq!(seq.value().data()[1], x.data()[o.perm()[1]]);
            let back = scatter_tokens(seq, &o).unwrap().value();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn gather_rejects_dim_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(gather_tokens(x, &raster_order(4, 5, 0).unwrap()).is_err());
        let seq = tape.constant(Tensor::zeros(&[2, 15]));
        assert!(scatter_tokens(seq, &raster_order(4, 4, 0).unwrap()).is_err());
    }

    #[test]
    fn gather_gradient_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let o = stripe_order(3, 4, 2, 3).unwrap();
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let g = tape
            .backward(gather_tokens(xv, &o).unwrap().sum_all().unwrap())
            .unwrap();
        assert!(g.get(xv).unwrap().data().iter().all(|&v| v == 1.0));
        let e = grad_check(
            |tp, v| {
                let w = tp.constant(Tensor::from_fn(&[2, 12], |i| 1.0 + 0.5 * (i as f64 * 0.37).sin()));
                gather_tokens(v, &o)?.mul(w)?.sum_all()
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    proptest! {
        #[test]
        fn transposed_direction_matches_transposed_grid(h in 1usize..10, w in 1usize..10, p in 1usize..10, k in 0usize..3) {
            let kind = kinds(p)[k];
            let dir2 = ScanOrder::new(kind, h, w, 2).unwrap();
            let dir0_t = ScanOrder::new(kind, w, h, 0).unwrap();
            for (a, b) in dir2.perm().iter().zip(dir0_t.perm()) {
                let (r, c) = (a / w, a % w);
                prop_assert_eq!(c * h + r, *b);
            }
        }
    }
}
