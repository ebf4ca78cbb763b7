use connlens::heatmap::{abs_percentile, diverging_color, grid_from_csv, grid_to_csv, Heatmap, NEUTRAL, OUTLINE};
use connlens::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_ppm, write_ppm, GrayImage, RgbImage};
use connlens::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_grid_renders_neutral() {
    let img = Heatmap::new(3, 4, vec![0.0; 12], vec![]).unwrap().render(3);
    assert_eq!((img.width, img.height), (12, 9));
    assert!(img.data.chunks(3).all(|p| p == NEUTRAL));
}

#[test]
fn single_hot_cell_outlined() {
    let mut values = vec![0.0; 9];
    values[4] = 5.0;
    let h = Heatmap::new(3, 3, values, vec![(1, 1)]).unwrap();
    let img = h.render(4);
    // border pixels of the centre cell are the outline, its interior is full red
    for i in 4..8 {
        assert_eq!(img.get(i, 4), OUTLINE);
        assert_eq!(img.get(i, 7), OUTLINE);
        assert_eq!(img.get(4, i), OUTLINE);
        assert_eq!(img.get(7, i), OUTLINE);
    }
    assert_eq!(img.get(5, 5), [255, 0, 0]);
    assert_eq!(img.get(0, 0), NEUTRAL);
}

#[test]
fn color_scale_is_symmetric() {
    for t in [0.1, 0.5, 0.9, 1.0] {
        let pos = diverging_color(t);
        let neg = diverging_color(-t);
        assert_eq!(pos, [255, pos[1], pos[1]]);
        assert_eq!(neg, [pos[1], pos[1], 255]);
    }
    assert_eq!(diverging_color(0.0), NEUTRAL);
    assert_eq!(diverging_color(7.0), diverging_color(1.0));
}

#[test]
fn outliers_are_clipped_at_percentile() {
    let mut values: Vec<f64> = (1..=200).map(|i| i as f64 / 200.0).collect();
    values[0] = 1e6;
    let h = Heatmap::new(10, 20, values.clone(), vec![]).unwrap();
    // 99th percentile by nearest rank over 200 values is the 198th smallest |value|
    let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(h.scale, sorted[197]);
    assert_eq!(abs_percentile(&values, 0.99), sorted[197]);
    assert_eq!(h.cell_color(0, 0), [255, 0, 0]);
    assert_ne!(h.cell_color(0, 1), [255, 0, 0]);
}

#[test]
fn invalid_grids_rejected() {
    assert!(matches!(
        Heatmap::new(2, 2, vec![0.0; 3], vec![]),
        Err(Error::DimMismatch(_))
    ));
    assert!(Heatmap::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0], vec![]).is_err());
    assert!(Heatmap::new(2, 2, vec![0.0; 4], vec![(2, 0)]).is_err());
}

#[test]
fn overlay_blends_and_checks_aspect() {
    let h = Heatmap::new(2, 2, vec![1.0, -1.0, 0.0, 0.0], vec![(1, 1)]).unwrap();
    let bg = RgbImage::new(8, 8, [0, 0, 0]);
    let full = h.overlay(&bg, 1.0).unwrap();
    assert_eq!(full.get(1, 1), [255, 0, 0]);
    assert_eq!(full.get(6, 1), [0, 0, 255]);
    assert_eq!(full.get(4, 4), OUTLINE);
    let none = h.overlay(&bg, 0.0).unwrap();
    assert_eq!(none.get(1, 1), [0, 0, 0]);
    let half = h.overlay(&bg, 0.5).unwrap();
    assert_eq!(half.get(1, 1), [128, 0, 0]);
    assert!(matches!(
        h.overlay(&RgbImage::new(8, 6, [0; 3]), 0.5),
        Err(Error::Image(_))
    ));
}

#[test]
fn grid_csv_round_trips_bitwise() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let values: Vec<f64> = (0..24 * 24)
        .map(|_| r.random_range(-1e3..1e3) * r.random::<f64>())
        .collect();
    let h = Heatmap::new(24, 24, values.clone(), vec![]).unwrap();
    let (m1, m2, back) = grid_from_csv(&h.to_csv()).unwrap();
    assert_eq!((m1, m2), (24, 24));
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&values));
    assert!(grid_from_csv("1,2\n3\n").is_err());
    assert!(grid_from_csv("1,x\n").is_err());
}

#[test]
fn pnm_round_trips() {
    let mut img = RgbImage::new(3, 2, [1, 2, 3]);
    img.put(2, 1, [200, 100, 50]);
    let bytes = encode_ppm(&img);
    assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    assert_eq!(decode_ppm(&bytes).unwrap(), img);
    let gray = GrayImage {
        width: 2,
        height: 2,
        data: vec![0, 64, 128, 255],
    };
    assert_eq!(decode_pgm(&encode_pgm(&gray)).unwrap(), gray);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    write_ppm(&img, &path).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), img);
    assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
}

#[test]
fn pnm_header_comments_are_skipped() {
    let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
    bytes.extend([7, 9]);
    let g = decode_pgm(&bytes).unwrap();
    assert_eq!((g.width, g.height, g.data.clone()), (2, 1, vec![7, 9]));
}

proptest! {
    #[test]
    fn negation_swaps_red_and_blue(values in prop::collection::vec(-10.0f64..10.0, 6)) {
        let neg: Vec<f64> = values.iter().map(|v| -v).collect();
        let a = Heatmap::new(2, 3, values, vec![]).unwrap();
        let b = Heatmap::new(2, 3, neg, vec![]).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let (x, y) = (a.cell_color(r, c), b.cell_color(r, c));
                prop_assert_eq!([x[2], x[1], x[0]], y);
            }
        }
    }

    #[test]
    fn csv_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40), m2 in 1usize..5) {
        let n = values.len() / m2 * m2;
        prop_assume!(n > 0);
        let (m1, got_m2, back) = grid_from_csv(&grid_to_csv(&values[..n], m2)).unwrap();
        prop_assert_eq!((m1 * got_m2, got_m2), (n, m2));
        prop_assert_eq!(back, values[..n].to_vec());
    }
}
