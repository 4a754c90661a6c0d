use caplab::mcd::*;
use caplab::numerics::Matrix;
use proptest::prelude::*;

// Exhaustive oracle: walk every monotone path, summing the same way a
// left-to-right accumulation would (local cost + (prefix + penalty)).
fn brute_force(a: &Matrix, b: &Matrix, pen: f64) -> f64 {
    fn local(a: &Matrix, b: &Matrix, i: usize, j: usize) -> f64 {
        let mut s = 0.0;
        for (x, y) in a.row(i).iter().zip(b.row(j)) {
            s += (x - y) * (x - y);
        }
        s.sqrt()
    }
    fn walk(a: &Matrix, b: &Matrix, pen: f64, i: usize, j: usize, acc: f64, best: &mut f64) {
        let (n, m) = (a.rows(), b.rows());
        if (i, j) == (n - 1, m - 1) {
            *best = best.min(acc);
            return;
        }
        if i + 1 < n && j + 1 < m {
            walk(a, b, pen, i + 1, j + 1, local(a, b, i + 1, j + 1) + acc, best);
        }
        if i + 1 < n {
            walk(a, b, pen, i + 1, j, local(a, b, i + 1, j) + (acc + pen), best);
        }
        if j + 1 < m {
            walk(a, b, pen, i, j + 1, local(a, b, i, j + 1) + (acc + pen), best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, pen, 0, 0, local(a, b, 0, 0), &mut best);
    best
}

fn frames(max_len: usize, width: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_len).prop_flat_map(move |n| {
        prop::collection::vec(-3.0f64..3.0, n * width).prop_map(move |v| Matrix::from_vec(n, width, v).unwrap())
    })
}

fn pair(max_len: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (1..=4usize).prop_flat_map(move |w| (frames(max_len, w), frames(max_len, w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dp_equals_exhaustive_minimum(a in frames(6, 13), b in frames(6, 13)) {
        let r = dtw(&a, &b, WARP_PENALTY).unwrap();
        prop_assert_eq!(r.total_cost, brute_force(&a, &b, WARP_PENALTY));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dp_matches_oracle_for_any_penalty((a, b) in pair(5), pen in 0.0f64..3.0) {
        let r = dtw(&a, &b, pen).unwrap();
        prop_assert_eq!(r.total_cost, brute_force(&a, &b, pen));
    }

    #[test]
    fn path_is_monotone_and_anchored((a, b) in pair(8)) {
        let r = dtw(&a, &b, 1.0).unwrap();
        prop_assert_eq!(r.path[0], (0, 0));
        prop_assert_eq!(*r.path.last().unwrap(), (a.rows() - 1, b.rows() - 1));
        for w in r.path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            prop_assert!(matches!((di, dj), (1, 1) | (1, 0) | (0, 1)));
        }
        prop_assert_eq!(r.per_frame_cost, r.total_cost / r.path.len() as f64);
    }

    #[test]
    fn symmetric_and_non_negative((a, b) in pair(8)) {
        let o = McdOptions::default();
        let ab = mcd_dtw_frames(&a, &b, &o).unwrap();
        let ba = mcd_dtw_frames(&b, &a, &o).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
    }

    #[test]
    fn self_distance_is_zero(a in frames(10, 5)) {
        let o = McdOptions::default();
        prop_assert_eq!(mcd_dtw_frames(&a, &a, &o).unwrap(), 0.0);
        let scaled = McdOptions { db_scaled: true, normalization: Normalization::MaxLength, ..o };
        prop_assert_eq!(mcd_dtw_frames(&a, &a, &scaled).unwrap(), 0.0);
    }

    #[test]
    fn appending_shared_frames_never_raises_cost((a, b) in pair(6), extra in 1..4usize) {
        let w = a.cols();
        let tail: Vec<f64> = (0..extra * w).map(|k| (k as f64 * 0.37).sin()).collect();
        let grow = |m: &Matrix| {
            let mut v = m.data().to_vec();
            v.extend_from_slice(&tail);
            Matrix::from_vec(m.rows() + extra, w, v).unwrap()
        };
        let before = dtw_with(&a, &b, 1.0, Normalization::MaxLength).unwrap();
        let after = dtw_with(&grow(&a), &grow(&b), 1.0, Normalization::MaxLength).unwrap();
        prop_assert!(after.total_cost <= before.total_cost + 1e-12);
        prop_assert!(after.per_frame_cost <= before.per_frame_cost + 1e-12);
    }
}

#[test]
fn mismatched_widths_and_empty_inputs_are_rejected() {
    let a = Matrix::zeros(3, 2);
    let b = Matrix::zeros(3, 4);
    assert!(dtw(&a, &b, 1.0).is_err());
    assert!(dtw(&Matrix::zeros(0, 2), &a, 1.0).is_err());
}

#[test]
fn db_scaling_is_the_conventional_factor() {
    let a = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let b = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let plain = mcd_dtw_frames(&a, &b, &McdOptions::default()).unwrap();
    let db = mcd_dtw_frames(&a, &b, &McdOptions { db_scaled: true, ..Default::default() }).unwrap();
    let factor = 10.0 * 2f64.sqrt() / 10f64.ln();
    assert!((db - factor * plain).abs() < 1e-12);
    assert_eq!(plain, 0.5);
}
