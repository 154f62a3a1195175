//! Properties of the dense kernels, patch tokenizer and encoder block.

use prato_core::encoder::{attention_map, encode_block, BlockWeights};
use prato_core::numerics::{layer_norm, logistic, matmul, softmax_rows};
use prato_core::tokenizer::{
    embed_tokens, patchify, unpatchify, EmbedderWeights, GridShape, ImageTensor, PositionalMode, TokenGrid,
};
use prato_core::{Matrix, Rng};
use proptest::prelude::*;

fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut acc = 0.0;
        for k in 0..a.cols() {
            acc += a.get(i, k) * b.get(k, j);
        }
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(seed: u64, n in 1usize..9, k in 1usize..9, m in 1usize..9) {
        let mut rng = Rng::new(seed);
        let a = Matrix::gaussian(n, k, 1.0, &mut rng);
        let b = Matrix::gaussian(k, m, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        prop_assert!(c.max_abs_diff(&triple_loop(&a, &b)).unwrap() < 1e-12);
        prop_assert_eq!(c, matmul(&a, &b).unwrap());
    }

    #[test]
    fn matmul_identity_and_zero(seed: u64, n in 1usize..7) {
        let mut rng = Rng::new(seed);
        let m = Matrix::gaussian(n, n, 3.0, &mut rng);
        prop_assert_eq!(matmul(&Matrix::identity(n), &m).unwrap(), m.clone());
        prop_assert_eq!(matmul(&Matrix::zeros(n, n), &m).unwrap(), Matrix::zeros(n, n));
    }

    #[test]
    fn softmax_rows_are_distributions(seed: u64, rows in 1usize..6, cols in 1usize..40, spread in 1.0f64..5000.0) {
        let mut rng = Rng::new(seed);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-spread, spread));
        let s = softmax_rows(&m);
        for row in s.row_iter() {
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_moments(seed: u64, cols in 2usize..50) {
        let mut rng = Rng::new(seed);
        let m = Matrix::gaussian(3, cols, 4.0, &mut rng);
        let out = layer_norm(&m, &vec![1.0; cols], &vec![0.0; cols], 1e-12).unwrap();
        for row in out.row_iter() {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn logistic_is_monotone_and_symmetric(x in -700.0f64..700.0, y in -700.0f64..700.0) {
        if x < y {
            prop_assert!(logistic(x) <= logistic(y));
        }
        if (x - y).abs() > 1e-6 && x.abs() < 30.0 && y.abs() < 30.0 {
            prop_assert!((logistic(x) < logistic(y)) == (x < y));
        }
        prop_assert!((logistic(x) - (1.0 - logistic(-x))).abs() < 1e-15);
    }

    #[test]
    fn matrix_binary_round_trip(seed: u64, r in 0usize..6, c in 0usize..6) {
        let mut rng = Rng::new(seed);
        let m = Matrix::gaussian(r, c, 1e3, &mut rng);
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 12 + 8 * r * c);
        prop_assert_eq!(Matrix::read_binary(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn patchify_round_trip(seed: u64, c in 1usize..4, gh in 1usize..5, gw in 1usize..5, p in 1usize..5) {
        let mut rng = Rng::new(seed);
        let (h, w) = (gh * p, gw * p);
        let img = ImageTensor::from_fn(c, h, w, |_, _, _| rng.uniform()).unwrap();
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.rows(), h * w / (p * p));
        prop_assert_eq!(patches.cols(), c * p * p);
        prop_assert_eq!(unpatchify(&patches, c, h, w, p).unwrap(), img);
    }

    #[test]
    fn token_count_law(gh in 1usize..20, gw in 1usize..20, p in 1usize..17) {
        let shape = GridShape::for_image(gh * p, gw * p, p).unwrap();
        prop_assert_eq!(shape.num_tokens(), gh * gw);
        prop_assert_eq!(shape.num_tokens(), (gh * p) * (gw * p) / (p * p));
        let map = shape.index_map();
        for (i, c) in map.iter().enumerate() {
            prop_assert_eq!(shape.index(*c), i);
        }
        if p > 1 {
            prop_assert!(GridShape::for_image(gh * p + 1, gw * p, p).is_err());
        }
    }

    #[test]
    fn embedding_is_projection_plus_position(seed: u64, p in 1usize..4, c in 1usize..3) {
        let mut rng = Rng::new(seed);
        let img = ImageTensor::from_fn(c, 4 * p, 4 * p, |_, _, _| rng.uniform()).unwrap();
        let shape = GridShape::for_image(4 * p, 4 * p, p).unwrap();
        let w = EmbedderWeights::init(c, shape, 8, PositionalMode::Learned, &mut rng);
        let patches = patchify(&img, p).unwrap();
        let grid = embed_tokens(&patches, &w, shape).unwrap();
        let want = triple_loop(&patches, &w.projection).add(&w.positional).unwrap();
        prop_assert!(grid.tokens().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic(seed: u64, z in 2usize..20) {
        let mut rng = Rng::new(seed);
        let shape = GridShape { grid_h: 1, grid_w: z, patch_size: 1 };
        let grid = TokenGrid::new(Matrix::gaussian(z, 8, 1.0, &mut rng), shape).unwrap();
        let w = BlockWeights::init(8, 2, &mut rng).unwrap();
        for head in 0..2 {
            let a = attention_map(&grid, &w, head).unwrap();
            prop_assert_eq!(a.shape(), (z, z));
            for row in a.row_iter() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        prop_assert!(attention_map(&grid, &w, 2).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed: u64, z in 2usize..16) {
        let mut rng = Rng::new(seed);
        let shape = GridShape { grid_h: 1, grid_w: z, patch_size: 1 };
        let x = Matrix::gaussian(z, 8, 1.0, &mut rng);
        let w = BlockWeights::init(8, 4, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..z).collect();
        for i in (1..z).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let y = encode_block(&TokenGrid::new(x.clone(), shape).unwrap(), &w).unwrap();
        let yp = encode_block(&TokenGrid::new(x.select_rows(&perm), shape).unwrap(), &w).unwrap();
        let expected = y.tokens().select_rows(&perm);
        prop_assert!(yp.tokens().max_abs_diff(&expected).unwrap() < 1e-12);
    }
}

#[test]
fn zero_block_is_residual_only() {
    let mut rng = Rng::new(1);
    let shape = GridShape { grid_h: 3, grid_w: 3, patch_size: 1 };
    let grid = TokenGrid::new(Matrix::gaussian(9, 8, 1.0, &mut rng), shape).unwrap();
    let out = encode_block(&grid, &BlockWeights::zeros(8, 2).unwrap()).unwrap();
    assert_eq!(out.tokens(), grid.tokens());
}

#[test]
fn identical_tokens_attend_uniformly() {
    let mut rng = Rng::new(2);
    let shape = GridShape { grid_h: 2, grid_w: 3, patch_size: 1 };
    let row: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
    let grid = TokenGrid::new(Matrix::from_fn(6, 8, |_, j| row[j]), shape).unwrap();
    let w = BlockWeights::init(8, 2, &mut rng).unwrap();
    let a = attention_map(&grid, &w, 1).unwrap();
    assert!(a.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
}
