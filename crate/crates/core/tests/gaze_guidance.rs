use gazeformer::gaze::{
    alignment_loss_on_tape, apply_gaze_mask_raw, pool_mask, read_gaze_csv, total_loss_on_tape, write_gaze_csv,
};
use gazeformer::pgm::{decode_pgm16, encode_pgm16};
use gazeformer::rng::rng_from_seed;
use gazeformer::*;
use proptest::prelude::*;

fn record(fix: &[(f64, f64, f64)]) -> GazeRecord {
    GazeRecord {
        image_id: "img".into(),
        fixations: fix
            .iter()
            .map(|&(x, y, duration)| Fixation { x, y, duration })
            .collect(),
    }
}

fn mask_from(data: Vec<f64>, h: usize, w: usize) -> GazeMask {
    GazeMask {
        mask: Tensor::new([h, w], data).unwrap(),
    }
}

#[test]
fn empty_record_gives_zero_mask() {
    let m = heatmap_from_fixations(&record(&[]), 4.0, 16, 16).unwrap();
    assert!(m.mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_fixation_peaks_at_one_and_decays() {
    let m = heatmap_from_fixations(&record(&[(8.0, 8.0, 250.0)]), 3.0, 16, 16).unwrap();
    assert_eq!(m.mask.at(&[8, 8]), 1.0);
    for d in 1..7 {
        assert!(m.mask.at(&[8, 8 + d]) < m.mask.at(&[8, 8 + d - 1]));
        assert!(m.mask.at(&[8 - d, 8]) < m.mask.at(&[8 - d + 1, 8]));
    }
    assert!(m.mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn two_fixations_match_direct_formula() {
    let (sigma, h, w) = (2.5, 12, 14);
    let fix = [(3.0, 4.0, 100.0), (9.5, 7.0, 100.0)];
    let m = heatmap_from_fixations(&record(&fix), sigma, h, w).unwrap();
    let mut oracle = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            for &(fx, fy, _) in &fix {
                let d2 = (c as f64 - fx).powi(2) + (r as f64 - fy).powi(2);
                oracle[r * w + c] += (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let peak = oracle.iter().cloned().fold(0.0, f64::max);
    for (a, b) in m.mask.data().iter().zip(&oracle) {
        assert!((a - b / peak).abs() < 1e-10);
    }
}

#[test]
fn heatmap_rejects_bad_sigma_and_clamps_out_of_bounds() {
    assert!(heatmap_from_fixations(&record(&[(1.0, 1.0, 1.0)]), 0.0, 4, 4).is_err());
    let m = heatmap_from_fixations(&record(&[(-5.0, 40.0, 10.0)]), 1.0, 8, 8).unwrap();
    assert_eq!(m.mask.at(&[7, 0]), 1.0);
}

#[test]
fn apply_gaze_mask_examples() {
    let image = Tensor::full([1, 2, 2], 0.5);
    let ones = mask_from(vec![1.0; 4], 2, 2);
    let out = apply_gaze_mask(&image, &ones, 0.4).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    assert_eq!(apply_gaze_mask(&image, &ones, 0.0).unwrap(), image);
    assert_eq!(
        apply_gaze_mask(&image, &mask_from(vec![0.0; 4], 2, 2), 3.0).unwrap(),
        image
    );
    // clipping to the image range
    let bright = Tensor::full([2, 2], 0.9);
    assert!(apply_gaze_mask(&bright, &ones, 1.0)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    assert!(apply_gaze_mask(&image, &mask_from(vec![0.0; 6], 2, 3), 1.0).is_err());
}

#[test]
fn uniform_mask_gives_uniform_token_attention() {
    let m = mask_from(vec![0.3; 64], 8, 8);
    let a = gaze_token_attention(&m, 2).unwrap();
    assert_eq!(a.matrix.shape(), &[16, 16]);
    assert!(a.matrix.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    // an empty mask is uniform too
    let z = gaze_token_attention(&GazeMask::zeros(8, 8), 4).unwrap();
    assert!(z.matrix.data().iter().all(|&v| v == 0.25));
}

#[test]
fn point_mass_in_patch_zero() {
    let mut data = vec![0.0; 64];
    data[0] = 1.0;
    data[9] = 0.5;
    let a = gaze_token_attention(&mask_from(data, 8, 8), 4).unwrap();
    for row in a.matrix.data().chunks(4) {
        assert_eq!(row, &[1.0, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn token_attention_matches_brute_force_pooling() {
    let mut rng = rng_from_seed(3);
    for _ in 0..20 {
        let m = GazeMask {
            mask: Tensor::uniform([12, 12], 0.0, 1.0, &mut rng),
        };
        let a = gaze_token_attention(&m, 3).unwrap();
        let mut g = vec![0.0; 16];
        for ty in 0..4 {
            for tx in 0..4 {
                for py in 0..3 {
                    for px in 0..3 {
                        g[ty * 4 + tx] += m.mask.at(&[ty * 3 + py, tx * 3 + px]);
                    }
                }
            }
        }
        let total: f64 = g.iter().sum();
        for row in a.matrix.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (r, v) in row.iter().zip(&g) {
                assert!(*r >= 0.0 && (r - v / total).abs() < 1e-12);
            }
        }
    }
    assert!(matches!(
        gaze_token_attention(&GazeMask::zeros(10, 10), 4),
        Err(Error::Contract { .. })
    ));
    assert_eq!(pool_mask(&mask_from(vec![1.0; 16], 4, 4), 2).unwrap().data(), &[4.0; 4]);
}

#[test]
fn alignment_loss_examples() {
    let a = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let g = Tensor::full([2, 2], 0.5);
    assert_eq!(alignment_loss(&a, &g).unwrap(), 0.25);
    assert_eq!(alignment_loss(&a, &a).unwrap(), 0.0);
    assert!(alignment_loss(&a, &Tensor::zeros([4])).is_err());

    let mut rng = rng_from_seed(4);
    for _ in 0..20 {
        let n = 5;
        let at = Tensor::uniform([n, n], 0.0, 1.0, &mut rng);
        let ag = Tensor::uniform([n, n], 0.0, 1.0, &mut rng);
        let l = alignment_loss(&at, &ag).unwrap();
        assert!(l >= 0.0);
        assert_eq!(l, alignment_loss(&ag, &at).unwrap());
        let mut tape = Tape::new();
        let v = tape.leaf(at.clone());
        let loss = alignment_loss_on_tape(&mut tape, v, &ag).unwrap();
        assert!((tape.value(loss).item() - l).abs() < 1e-15);
        tape.backward(loss).unwrap();
        let grad = tape.grad(v).unwrap();
        for ((g, a), b) in grad.iter().zip(at.data()).zip(ag.data()) {
            assert!((g - 2.0 * (a - b) / (n * n) as f64).abs() < 1e-10);
        }
    }
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(0.7, 0.2, 0.0), 0.7);
    assert!((total_loss(0.7, 0.2, 0.5) - 0.8).abs() < 1e-15);
    // affine in lambda: three points on one line
    let (l0, l1, l2) = (
        total_loss(0.3, 0.4, 0.0),
        total_loss(0.3, 0.4, 1.0),
        total_loss(0.3, 0.4, 2.0),
    );
    assert!(((l1 - l0) - (l2 - l1)).abs() < 1e-15);
    assert!((l1 - l0 - 0.4).abs() < 1e-15);

    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(0.7));
    let a = tape.constant(Tensor::scalar(0.2));
    let t = total_loss_on_tape(&mut tape, c, a, 0.5).unwrap();
    assert_eq!(tape.value(t).item(), total_loss(0.7, 0.2, 0.5));
}

#[test]
fn gaze_csv_round_trip() {
    let records = vec![
        record(&[(1.5, 2.0, 120.0), (3.0, 4.25, 80.0)]),
        GazeRecord {
            image_id: "other".into(),
            fixations: vec![Fixation {
                x: 0.0,
                y: 31.0,
                duration: 0.0,
            }],
        },
    ];
    let mut buf = Vec::new();
    write_gaze_csv(&mut buf, &records).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("image_id,x,y,duration_ms\n"));
    assert_eq!(read_gaze_csv(&buf[..]).unwrap(), records);
    assert!(read_gaze_csv("a,b\n1,2\n".as_bytes()).is_err());
    assert!(read_gaze_csv("image_id,x,y,duration_ms\ni,1,2,-3\n".as_bytes()).is_err());
}

#[test]
fn pgm_round_trip_is_exact_on_16_bit_levels() {
    let mut rng = rng_from_seed(5);
    let img = Tensor::uniform([7, 9], 0.0, 1.0, &mut rng).map(|v| (v * 65535.0).round() / 65535.0);
    let bytes = encode_pgm16(&img).unwrap();
    assert!(bytes.starts_with(b"P5\n9 7\n65535\n"));
    assert_eq!(decode_pgm16(&bytes).unwrap(), img);
    assert!(decode_pgm16(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_pgm16(b"P2\n1 1\n65535\n\0\0").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_zero_is_identity(data in proptest::collection::vec(0.0f64..1.0, 16), m in proptest::collection::vec(0.0f64..1.0, 16)) {
        let img = Tensor::new([1, 4, 4], data).unwrap();
        let mask = mask_from(m, 4, 4);
        prop_assert_eq!(apply_gaze_mask_raw(&img, &mask, 0.0).unwrap(), img);
    }

    #[test]
    fn enhancement_is_monotone_in_alpha(
        data in proptest::collection::vec(0.0f64..1.0, 16),
        m in proptest::collection::vec(0.0f64..1.0, 16),
        a1 in 0.0f64..3.0,
        gap in 0.0f64..3.0,
    ) {
        let img = Tensor::new([4, 4], data).unwrap();
        let mask = mask_from(m, 4, 4);
        let lo = apply_gaze_mask_raw(&img, &mask, a1).unwrap();
        let hi = apply_gaze_mask_raw(&img, &mask, a1 + gap).unwrap();
        prop_assert!(hi.data().iter().zip(lo.data()).all(|(h, l)| h >= l));
    }

    #[test]
    fn duration_scale_leaves_mask_unchanged(
        fix in proptest::collection::vec((0.0f64..15.0, 0.0f64..15.0, 1.0f64..500.0), 1..5),
        scale in 0.01f64..100.0,
    ) {
        let base = heatmap_from_fixations(&record(&fix), 4.0, 16, 16).unwrap();
        let scaled: Vec<_> = fix.iter().map(|&(x, y, d)| (x, y, d * scale)).collect();
        let other = heatmap_from_fixations(&record(&scaled), 4.0, 16, 16).unwrap();
        prop_assert!(base.mask.max_abs_diff(&other.mask) < 1e-12);
        let peak = base.mask.data().iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(peak, 1.0);
    }

    #[test]
    fn token_attention_rows_are_distributions(m in proptest::collection::vec(0.0f64..1.0, 64)) {
        let a = gaze_token_attention(&mask_from(m, 8, 8), 2).unwrap();
        for row in a.matrix.data().chunks(16) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_loss_is_symmetric_and_zero_on_diagonal(
        a in proptest::collection::vec(0.0f64..1.0, 9),
        b in proptest::collection::vec(0.0f64..1.0, 9),
    ) {
        let (a, b) = (Tensor::new([3, 3], a).unwrap(), Tensor::new([3, 3], b).unwrap());
        prop_assert_eq!(alignment_loss(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(alignment_loss(&a, &b).unwrap(), alignment_loss(&b, &a).unwrap());
    }
}
