use hsisr_nn::{Checkpoint, Graph, Tensor};
use proptest::prelude::*;

fn tensor(n: usize, c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1e3f32..1e3, n * c * h * w).prop_map(move |v| Tensor::from_vec([n, c, h, w], v))
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip(
        a in tensor(1, 3, 2, 2),
        b in tensor(2, 1, 1, 3),
        meta in prop::collection::btree_map("[a-z]{1,6}", "[ -~]{0,12}", 0..6),
    ) {
        let mut ck = Checkpoint::new();
        ck.insert("x.a", a);
        ck.insert("y.b", b);
        for (k, v) in &meta {
            ck.set_meta(k, v);
        }
        let bytes = ck.to_bytes().unwrap();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &ck);
        prop_assert_eq!(ck.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn concat_then_slice_recovers_parts(ca in 1usize..4, cb in 1usize..4, seed in any::<u64>()) {
        let fill = |c: usize, off: u64| Tensor::from_vec([1, c, 2, 3], (0..c * 6).map(|i| ((i as u64 * 31 + seed + off) % 97) as f32).collect());
        let (ta, tb) = (fill(ca, 0), fill(cb, 7));
        let mut g = Graph::inference();
        let (a, b) = (g.constant(ta.clone()), g.constant(tb.clone()));
        let ab = g.concat(a, b).unwrap();
        let left = g.slice_channels(ab, 0, ca).unwrap();
        let right = g.slice_channels(ab, ca, ca + cb).unwrap();
        prop_assert_eq!(g.value(left), &ta);
        prop_assert_eq!(g.value(right), &tb);
    }

    #[test]
    fn disjoint_groups_stack_and_merge_to_identity(widths in prop::collection::vec(1usize..4, 1..4)) {
        let c: usize = widths.iter().sum();
        let mut ranges = Vec::new();
        let mut at = 0;
        for w in &widths {
            ranges.push((at, at + w));
            at += w;
        }
        // stacking needs equal widths; pad each group to the widest
        let wmax = *widths.iter().max().unwrap();
        let ranges: Vec<(usize, usize)> = ranges.iter().map(|&(s, _)| (s.min(c - wmax), s.min(c - wmax) + wmax)).collect();
        let x = Tensor::from_vec([1, c, 2, 2], (0..c * 4).map(|i| i as f32).collect());
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let stacked = g.stack_groups(v, &ranges).unwrap();
        prop_assert_eq!(g.value(stacked).shape()[0], ranges.len());
        let merged = g.merge_groups(stacked, &ranges, c).unwrap();
        // every band keeps its covering group, so averaging copies of it restores x
        prop_assert!(g.value(merged).max_abs_diff(&x) <= 1e-5);
    }
}
