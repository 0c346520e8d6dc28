use hsisr_core::pipeline::PipelineConfig;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn valid_overrides_survive_a_toml_round_trip(
        scale in prop::sample::select(vec![2usize, 3, 4]),
        (n_subs, n_ovls) in (2usize..12).prop_flat_map(|n| (Just(n), 1..n)),
        t in 1usize..500,
        seed in any::<u32>(),
    ) {
        let sets = vec![
            format!("scale={scale}"),
            format!("grouping.n_subs={n_subs}"),
            format!("grouping.n_ovls={n_ovls}"),
            format!("diffusion.T={t}"),
            format!("seed={seed}"),
            "patch.patch_size=24".into(),
            "patch.stride=12".into(),
        ];
        let cfg = PipelineConfig::from_toml_str("", &sets).unwrap();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn overlap_not_below_group_width_is_rejected(n_subs in 1usize..12, extra in 0usize..4) {
        let sets = vec![format!("grouping.n_subs={n_subs}"), format!("grouping.n_ovls={}", n_subs + extra)];
        let err = PipelineConfig::from_toml_str("", &sets).unwrap_err();
        prop_assert_eq!(err.exit_code(), 2);
    }
}
