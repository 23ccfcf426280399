use gradtape::{Matrix, Tape};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let t = Tape::new();
        let y = t.softmax_rows(t.constant(x));
        for row in t.value(y).rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_softmax_normalizes_each_segment(lens in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let total: usize = lens.iter().sum();
        let mut start = 0;
        let segments: Vec<(usize, usize)> = lens.iter().map(|&l| { let s = (start, l); start += l; s }).collect();
        let x = Array2::from_shape_fn((total, 1), |(i, _)| ((i as u64 ^ seed) % 97) as f64 * 0.3 - 10.0);
        let t = Tape::new();
        let y = t.segment_softmax(t.constant(x), &segments);
        let y = t.value(y);
        for &(s, l) in &segments {
            let sum: f64 = (s..s + l).map(|i| y[[i, 0]]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axis(x in matrix(4, 3), b in matrix(1, 3)) {
        let t = Tape::new();
        let xv = t.leaf(x);
        let bv = t.leaf(b);
        let out = t.sum(t.add(xv, bv));
        let g = t.backward(out);
        let gb = g.get_or_zeros(bv, (1, 3));
        prop_assert!(gb.iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn transpose_twice_is_identity(x in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        let t = Tape::new();
        let y = t.transpose(t.transpose(t.constant(x.clone())));
        prop_assert_eq!(&*t.value(y), &x);
    }
}
