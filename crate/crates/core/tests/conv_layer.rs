mod common;

use common::*;
use gradfree::conv_layer::{
    conv_via_patches, extract_patches, pool, solve_kernels, unpool, ResponseMap,
};
use gradfree::linalg::least_squares;
use gradfree::{Activation, ConvShape, ConvUnpoolLayer, Error, Matrix, WeightSampling};
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn map(c: usize, h: usize, w: usize, data: Vec<f64>) -> ResponseMap {
    ResponseMap::new(c, h, w, data).unwrap()
}

fn linear() -> Activation {
    Activation::new(1.0).unwrap()
}

#[test]
fn unpool_examples() {
    let x = map(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]);
    let y = unpool(&x, 2).unwrap();
    assert_eq!((y.channels(), y.height(), y.width()), (1, 2, 2));
    assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0, 4.0]);

    let z = map(3, 2, 2, (0..12).map(f64::from).collect());
    assert_eq!(unpool(&z, 1).unwrap(), z);
    assert_eq!(pool(&z, 1).unwrap(), z);

    let big = map(8, 2, 2, (0..32).map(|v| v as f64 * 0.5).collect());
    let up = unpool(&big, 2).unwrap();
    assert_eq!((up.channels(), up.height(), up.width()), (2, 4, 4));
    assert_eq!(
        up.as_slice(),
        brute_shuffle(big.as_slice(), 8, 2, 2, 2).as_slice()
    );
    assert_eq!(pool(&up, 2).unwrap(), big);
    assert_eq!(unpool(&pool(&up, 2).unwrap(), 2).unwrap(), up);

    assert!(matches!(
        unpool(&map(3, 1, 1, vec![0.0; 3]), 2),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn operator_examples() {
    let s = ConvShape::new(1, 3, 2, 1, 1, 1).unwrap();
    let layer = ConvUnpoolLayer::from_kernels(s, Matrix::from_rows(&[[2.5]]).unwrap()).unwrap();
    assert_eq!(layer.build_operator(), Matrix::identity(6).scale(2.5));

    let s = ConvShape::new(1, 3, 3, 3, 1, 1).unwrap();
    let mut delta = vec![0.0; 9];
    delta[5] = 1.0;
    let layer = ConvUnpoolLayer::from_kernels(s, Matrix::new(1, 9, delta).unwrap()).unwrap();
    let op = layer.build_operator();
    for r in 0..op.rows() {
        let row = op.row(r);
        assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(row.iter().filter(|&&v| v == 1.0).count() <= 1);
    }

    // 3×3 kernel on 2×2 input: 16×4 operator, columns are responses to basis images.
    let s = ConvShape::new(1, 2, 2, 3, 1, 1).unwrap();
    let k = gaussian(&mut rng(30), 1, 9, 1.0);
    let layer = ConvUnpoolLayer::from_kernels(s, k.clone()).unwrap();
    let op = layer.build_operator();
    assert_eq!(op.shape(), (16, 4));
    for col in 0..4 {
        let mut e = vec![0.0; 4];
        e[col] = 1.0;
        assert_eq!(op.column(col), brute_conv(&k, 1, 2, 2, 3, &e));
    }
}

#[test]
fn forward_identity_and_shift() {
    let s = ConvShape::new(1, 4, 4, 1, 1, 1).unwrap();
    let id = ConvUnpoolLayer::from_kernels(s, Matrix::identity(1)).unwrap();
    let x = map(1, 4, 4, gaussian(&mut rng(31), 1, 16, 1.0).into_vec());
    assert_eq!(id.forward_map(&linear(), &x).unwrap(), x);

    // The last tap reads the input unshifted into the top-left corner.
    let s = ConvShape::new(1, 2, 2, 2, 1, 1).unwrap();
    let shift =
        ConvUnpoolLayer::from_kernels(s, Matrix::new(1, 4, vec![0.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
    let y = shift
        .forward_map(&linear(), &map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]))
        .unwrap();
    assert_eq!(y.as_slice(), &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn patch_counts_and_padding() {
    let one = extract_patches(&map(1, 1, 1, vec![7.0]), 1);
    assert_eq!(one.shape(), (1, 1));
    assert_eq!(one[(0, 0)], 7.0);

    let img = map(1, 28, 28, vec![1.0; 784]);
    let p = extract_patches(&img, 7);
    let mut counted = 0;
    for _ in 0..28 + 7 - 1 {
        for _ in 0..28 + 7 - 1 {
            counted += 1;
        }
    }
    assert_eq!(p.rows(), counted);
    assert_eq!(p.rows(), 1156);

    let small = extract_patches(&map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]), 3);
    assert_eq!(small.row(0).iter().filter(|&&v| v != 0.0).count(), 1);
}

#[test]
fn patch_path_equals_operator_path() {
    let mut r = rng(32);
    let s = ConvShape::new(2, 5, 4, 3, 4, 2).unwrap();
    let layer = ConvUnpoolLayer::from_kernels(s, gaussian(&mut r, 4, s.patch_len(), 1.0)).unwrap();
    let x = gaussian(&mut r, 1, s.in_len(), 1.0);
    let via_op = layer
        .build_operator()
        .matmul(&x.transpose())
        .unwrap()
        .column(0);
    let via_patches = conv_via_patches(&layer, &map(2, 5, 4, x.into_vec()));
    for (a, b) in via_op.iter().zip(&via_patches) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn random_layer(seed: u64) -> ConvUnpoolLayer {
    ConvUnpoolLayer::random(ConvShape::new(2, 6, 6, 3, 4, 2).unwrap(), TOL, |a| {
        rng(seed + a as u64)
    })
    .unwrap()
}

#[test]
fn planted_latent_recovery_and_identity() {
    let layer = random_layer(33);
    let act = Activation::default();
    let x = gaussian(&mut rng(34), 5, layer.shape().in_len(), 1.0);
    let y = layer.forward(&act, &x).unwrap();
    let (solved, report) = layer.solve_latents(&act, &y, TOL).unwrap();
    assert!(solved.max_abs_diff(&x) < 1e-8);
    assert!(report.norms().iter().all(|&v| v < 1e-9));

    let s = ConvShape::new(1, 3, 3, 1, 1, 1).unwrap();
    let id = ConvUnpoolLayer::from_kernels(s, Matrix::identity(1)).unwrap();
    let t = uniform(&mut rng(35), 2, 9, -1.0, 1.0);
    assert!(
        id.solve_latents(&linear(), &t, TOL)
            .unwrap()
            .0
            .max_abs_diff(&t)
            < 1e-15
    );
}

#[test]
fn perturbed_target_residual_matches_oracle() {
    let layer = random_layer(36);
    let s = *layer.shape();
    let mut r = rng(37);
    let x = gaussian(&mut r, 1, s.in_len(), 1.0);
    let noise = gaussian(&mut r, 1, s.out_len(), 0.05);
    let clean = layer.forward(&linear(), &x).unwrap();
    let y = Matrix::from_fn(1, s.out_len(), |i, j| clean[(i, j)] + noise[(i, j)]);
    let (_, report) = layer.solve_latents(&linear(), &y, TOL).unwrap();

    // Residual = norm of the pooled noise projected off range(A).
    let op = layer.build_operator();
    let pooled = pool(
        &map(
            s.out_channels(),
            s.out_height(),
            s.out_width(),
            noise.into_vec(),
        ),
        s.unpool,
    )
    .unwrap();
    let b = Matrix::new(s.out_len(), 1, pooled.into_vec()).unwrap();
    let coef = normal_equations(&op, &b.column(0));
    let fit = op
        .matmul(&Matrix::new(coef.len(), 1, coef).unwrap())
        .unwrap();
    let oracle = fit.sub(&b).unwrap().frobenius_norm();
    assert!((report.norms()[0] - oracle).abs() < 1e-9);
    assert!((report.norms()[0] - least_squares(&op, &b).unwrap().residual_norms[0]).abs() < 1e-12);
}

#[test]
fn underdetermined_layers_are_rejected() {
    let s = ConvShape::new(16, 8, 8, 3, 1, 1).unwrap();
    assert!(matches!(
        ConvUnpoolLayer::random(s, TOL, |a| rng(a as u64)),
        Err(Error::DeterminednessViolation { .. })
    ));
}

fn planted_kernel_data(seed: u64, n: usize) -> (ConvUnpoolLayer, Matrix, Matrix) {
    let s = ConvShape::new(1, 8, 8, 3, 4, 2).unwrap();
    let mut r = rng(seed);
    let layer = ConvUnpoolLayer::from_kernels(s, gaussian(&mut r, 4, 9, 1.0)).unwrap();
    let x = gaussian(&mut r, n, s.in_len(), 1.0);
    let y = layer.forward(&Activation::default(), &x).unwrap();
    (layer, x, y)
}

#[test]
fn planted_kernel_recovery() {
    let (layer, x, y) = planted_kernel_data(38, 50);
    let (k, res) = solve_kernels(
        layer.shape(),
        &x,
        &Activation::default(),
        &y,
        WeightSampling::default(),
        &mut rng(0),
        TOL,
    )
    .unwrap();
    assert!(k.max_abs_diff(layer.kernels()) < 1e-6);
    assert!(res.iter().all(|&v| v < 1e-8));
}

#[test]
fn chunk_average_equals_direct_on_consistent_data() {
    let (layer, x, y) = planted_kernel_data(39, 40);
    let act = Activation::default();
    let direct = solve_kernels(
        layer.shape(),
        &x,
        &act,
        &y,
        WeightSampling::default(),
        &mut rng(0),
        TOL,
    )
    .unwrap()
    .0;
    let chunked = WeightSampling {
        sample_size: None,
        chunks: 4,
    };
    let avg = solve_kernels(layer.shape(), &x, &act, &y, chunked, &mut rng(0), TOL)
        .unwrap()
        .0;
    assert!(avg.max_abs_diff(&direct) < 1e-8);
}

#[test]
fn any_sufficient_sample_recovers_planted_kernels() {
    let (layer, x, y) = planted_kernel_data(40, 30);
    for (seed, size) in [(1, 1), (2, 3), (3, 12)] {
        let sampling = WeightSampling {
            sample_size: Some(size),
            chunks: 1,
        };
        let k = solve_kernels(
            layer.shape(),
            &x,
            &Activation::default(),
            &y,
            sampling,
            &mut rng(seed),
            TOL,
        )
        .unwrap()
        .0;
        assert!(k.max_abs_diff(layer.kernels()) < 1e-6);
    }
}

#[test]
fn too_few_patches_is_insufficient_data() {
    // One 1×1 image with a 3×3 kernel over 4 channels: 9 patches, 36 taps.
    let s = ConvShape::new(4, 1, 1, 3, 4, 2).unwrap();
    let x = Matrix::zeros(1, 4);
    let y = Matrix::zeros(1, s.out_len());
    assert!(matches!(
        solve_kernels(
            &s,
            &x,
            &Activation::default(),
            &y,
            WeightSampling::default(),
            &mut rng(0),
            TOL
        ),
        Err(Error::InsufficientData { needed: 36, got: 9 })
    ));
}

proptest! {
    #[test]
    fn operator_equals_brute_force(
        seed in any::<u64>(),
        c_in in 1usize..3,
        h in 1usize..6,
        w in 1usize..6,
        k in 1usize..4,
        u in 1usize..3,
    ) {
        let m = u * u * 2;
        let s = ConvShape::new(c_in, h, w, k, m, u).unwrap();
        let mut r = rng(seed);
        let kernels = gaussian(&mut r, m, s.patch_len(), 1.0);
        let layer = ConvUnpoolLayer::from_kernels(s, kernels.clone()).unwrap();
        let x = gaussian(&mut r, 1, s.in_len(), 1.0);
        let op = layer.build_operator();
        prop_assert!(op.rows() >= op.cols());
        prop_assert_eq!(op.shape(), (s.out_len(), s.in_len()));
        let via_op = op.matmul(&x.transpose()).unwrap().column(0);
        let brute = brute_conv(&kernels, c_in, h, w, k, x.row(0));
        for (a, b) in via_op.iter().zip(&brute) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let fwd = layer.forward(&linear(), &x).unwrap();
        let shuffled = brute_shuffle(&brute, m, s.conv_height(), s.conv_width(), u);
        for (a, b) in fwd.row(0).iter().zip(&shuffled) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_unpool_are_inverse(seed in any::<u64>(), c in 1usize..3, h in 1usize..5, w in 1usize..5, u in 1usize..4) {
        let m = c * u * u;
        let x = map(m, h, w, gaussian(&mut rng(seed), 1, m * h * w, 1.0).into_vec());
        let up = unpool(&x, u).unwrap();
        prop_assert_eq!(&pool(&up, u).unwrap(), &x);
        prop_assert_eq!(unpool(&pool(&up, u).unwrap(), u).unwrap(), up);
    }
}
