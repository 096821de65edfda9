mod common;

use common::{header, random_dataset, random_values};
use latentscope::model::{CaptureTag, Precision};
use latentscope::store::{
    mean_over, select, unit_normalize, Axis, AxisLabel, CaptureFilter, CaptureLabel, LatentDataset, SampleFilter, Selection,
    SequenceFilter,
};
use latentscope::Error;
use proptest::prelude::*;

#[test]
fn save_load_is_bitwise_for_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    for precision in [Precision::F32, Precision::F16] {
        let h = header(3, 5, 2, 8, precision);
        let values = random_values(h.numel(), 4);
        let ds = LatentDataset::from_values(h, &values).unwrap();
        let path = dir.path().join(format!("{precision:?}.latds"));
        ds.save(&path).unwrap();
        let back = LatentDataset::load(&path).unwrap();
        assert_eq!(back.header(), ds.header());
        assert_eq!(back.payload_bytes(), ds.payload_bytes());
        assert_eq!(std::fs::read(&path).unwrap(), ds.to_bytes().unwrap());
        // re-saving the loaded dataset reproduces the file
        let again = dir.path().join("again.latds");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn f32_values_are_stored_exactly_and_f16_within_half_precision() {
    let h = header(2, 3, 1, 4, Precision::F32);
    let values = random_values(h.numel(), 1);
    let ds = LatentDataset::from_values(h, &values).unwrap();
    let [n, s, c, d] = ds.shape();
    let mut i = 0;
    for a in 0..n {
        for b in 0..s {
            for k in 0..c {
                for (j, v) in ds.vector(a, b, k).iter().enumerate() {
                    assert_eq!(*v, values[i + j] as f64);
                }
                i += d;
            }
        }
    }
    let h = header(2, 3, 1, 4, Precision::F16);
    let ds = LatentDataset::from_values(h, &values).unwrap();
    let got = ds.vector(1, 2, 7);
    let want = &values[values.len() - 4..];
    for (g, w) in got.iter().zip(want) {
        assert!((g - *w as f64).abs() <= 3.0 * 2f64.powi(-11));
    }
}

#[test]
fn corruption_and_bad_files_are_detected() {
    let ds = random_dataset(2, 3, 1, 4, 0);
    let bytes = ds.to_bytes().unwrap();

    let mut flipped = bytes.clone();
    let at = flipped.len() - 20;
    flipped[at] ^= 0x10;
    assert!(matches!(LatentDataset::from_bytes(flipped), Err(Error::Corruption(_))));

    let truncated = bytes[..bytes.len() - 9].to_vec();
    assert!(LatentDataset::from_bytes(truncated).is_err());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(LatentDataset::from_bytes(magic), Err(Error::Format(_))));

    let mut version = bytes;
    version[5] = 99;
    assert!(matches!(LatentDataset::from_bytes(version), Err(Error::Format(_))));
}

#[test]
fn intermediate_block_selection_keeps_seven_blocks() {
    let ds = random_dataset(2, 4, 12, 4, 3);
    let sel = Selection {
        captures: CaptureFilter::block_range(2, 8),
        ..Selection::default()
    };
    let v = select(&ds, &sel).unwrap();
    assert_eq!(v.captures.len(), 7 * 6);
    assert!(v.captures.iter().all(|c| matches!(c, CaptureLabel::Tag(t) if (2..=8).contains(&t.block_index().unwrap()))));
}

#[test]
fn selection_values_come_from_the_right_cells() {
    let ds = random_dataset(5, 6, 2, 3, 7);
    let sel = Selection {
        captures: CaptureFilter {
            points: Some(vec![2, 5]),
            ..CaptureFilter::default()
        },
        sequence: SequenceFilter {
            range: Some((0, 4)),
            exclude_position_0: true,
        },
        samples: SampleFilter::Indices(vec![4, 1]),
    };
    let v = select(&ds, &sel).unwrap();
    assert_eq!(v.shape(), [2, 3, 4, 3]);
    let caps = ds.header().captures.clone();
    // explicit indices keep the caller's order
    assert_eq!(v.samples, vec![AxisLabel::Index(4), AxisLabel::Index(1)]);
    for (i, &s) in [4usize, 1].iter().enumerate() {
        for (j, p) in (1..4).enumerate() {
            for (k, label) in v.captures.iter().enumerate() {
                let CaptureLabel::Tag(t) = label else { panic!() };
                let c = caps.iter().position(|x| x == t).unwrap();
                assert_eq!(v.vector(i, j, k), ds.vector(s, p, c).as_slice());
            }
        }
    }
}

#[test]
fn empty_selection_names_the_filter() {
    let ds = random_dataset(2, 4, 2, 4, 3);
    let sel = Selection {
        captures: CaptureFilter::block_range(5, 6),
        ..Selection::default()
    };
    let e = select(&ds, &sel).unwrap_err().to_string();
    assert!(e.contains("capture"), "{e}");
}

#[test]
fn mean_over_all_axes_matches_direct_average() {
    let ds = random_dataset(3, 4, 1, 5, 12);
    let v = ds.view();
    let m = mean_over(&v, &[Axis::Sample, Axis::Sequence, Axis::Capture]).unwrap();
    assert_eq!(m.shape(), [1, 1, 1, 5]);
    let [n, s, c, d] = ds.shape();
    for j in 0..d {
        let mut total = 0.0;
        for a in 0..n {
            for b in 0..s {
                for k in 0..c {
                    total += ds.vector(a, b, k)[j];
                }
            }
        }
        let want = total / (n * s * c) as f64;
        assert!((m.vector(0, 0, 0)[j] - want).abs() < 1e-12);
    }
}

#[test]
fn padding_is_excluded_from_means_and_rows() {
    let mut h = header(2, 3, 1, 2, Precision::F32);
    h.valid_lengths = vec![3, 1];
    let mut values = vec![0.0f32; h.numel()];
    // sample 0 is all ones, sample 1 position 0 is all threes; the rest is
    // padding and must stay zero
    let per_pos = h.n_captures() * 2;
    values[..3 * per_pos].iter_mut().for_each(|v| *v = 1.0);
    values[3 * per_pos..4 * per_pos].iter_mut().for_each(|v| *v = 3.0);
    let ds = LatentDataset::from_values(h, &values).unwrap();
    let m = mean_over(&ds.view(), &[Axis::Sample, Axis::Sequence]).unwrap();
    assert_eq!(m.vector(0, 0, 0), &[1.5, 1.5]);
    let (rows, _) = ds.view().to_rows();
    assert_eq!(rows.rows(), 4 * 8);
}

fn arb_dataset() -> impl Strategy<Value = LatentDataset> {
    (1usize..4, 1usize..5, 1usize..3, 1usize..6, any::<u64>())
        .prop_map(|(n, s, b, d, seed)| random_dataset(n, s, b, d, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_through_bytes(ds in arb_dataset()) {
        let back = LatentDataset::from_bytes(ds.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), ds.to_bytes().unwrap());
        prop_assert_eq!(back.checksum(), ds.checksum());
    }

    #[test]
    fn unit_normalize_is_idempotent(ds in arb_dataset()) {
        let (once, _) = unit_normalize(&ds.view());
        let (twice, _) = unit_normalize(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let d = once.dim;
        for chunk in once.data.chunks(d) {
            let n: f64 = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_over_commutes(ds in arb_dataset()) {
        let v = ds.view();
        let both = mean_over(&v, &[Axis::Sample, Axis::Capture]).unwrap();
        let swapped = mean_over(&v, &[Axis::Capture, Axis::Sample]).unwrap();
        let chained = mean_over(&mean_over(&v, &[Axis::Capture]).unwrap(), &[Axis::Sample]).unwrap();
        prop_assert_eq!(both.shape(), swapped.shape());
        for ((a, b), c) in both.data.iter().zip(&swapped.data).zip(&chained.data) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_commutes_with_normalisation(ds in arb_dataset(), alpha in 0.01f64..100.0) {
        let mut scaled = ds.view();
        scaled.data.iter_mut().for_each(|v| *v *= alpha);
        let (a, _) = unit_normalize(&ds.view());
        let (b, _) = unit_normalize(&scaled);
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn capture_tags_parse_back_from_names() {
    for t in CaptureTag::enumerate(3) {
        assert_eq!(t.to_string().parse::<CaptureTag>().unwrap(), t);
    }
    assert!("block1.p7.attn".parse::<CaptureTag>().is_err());
    assert!("block1.p2.mlp".parse::<CaptureTag>().is_err());
}
