use dismec::sparse::{
    generate_powerlaw, label_frequency_stats, parse_xmc, train_test_split, write_xmc, CsrMatrix,
    Dataset, LabelMatrix, LoadOptions, PowerLawSpec,
};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = PowerLawSpec> {
    (
        1usize..60,
        1usize..80,
        0.3f64..2.5,
        5usize..200,
        any::<u64>(),
    )
        .prop_map(
            |(n_labels, head_size, beta, n_features, seed)| PowerLawSpec {
                n_labels,
                head_size,
                beta,
                n_features,
                prototype_nnz: 4.min(n_features),
                noise_nnz: 3.min(n_features),
                n_instances: None,
                seed,
            },
        )
}

fn xmc_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_xmc(ds, &mut out).unwrap();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_label_sizes_follow_the_power_law(spec in spec_strategy()) {
        let ds = generate_powerlaw(&spec).unwrap();
        let counts = ds.labels.label_counts();
        // label id r - 1 has rank r
        for (i, &c) in counts.iter().enumerate() {
            prop_assert_eq!(c, spec.label_size(i + 1));
        }
        let ranked = label_frequency_stats(&ds.labels).ranked;
        let sizes: Vec<usize> = ranked.iter().map(|r| r.count).collect();
        prop_assert_eq!(sizes, spec.label_sizes());
        for labels in ds.labels.rows() {
            prop_assert!((1..=3).contains(&labels.len()));
        }
        for r in ds.features.rows() {
            if r.nnz() > 0 {
                prop_assert!((r.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic(spec in spec_strategy()) {
        let a = xmc_bytes(&generate_powerlaw(&spec).unwrap());
        let b = xmc_bytes(&generate_powerlaw(&spec).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn text_round_trip(spec in spec_strategy()) {
        let ds = generate_powerlaw(&spec).unwrap();
        let bytes = xmc_bytes(&ds);
        let (back, _) = parse_xmc(&bytes[..], &LoadOptions { has_header: true, ..Default::default() }).unwrap();
        prop_assert_eq!(&back.features, &ds.features);
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!(xmc_bytes(&back), bytes);
    }

    #[test]
    fn normalized_rows_have_unit_norm(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..20)) {
        let x = CsrMatrix::from_dense(&rows, 6).row_normalize();
        for r in x.rows() {
            if r.nnz() > 0 {
                prop_assert!((r.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fit_recovers_exponent_on_exact_power_law() {
    // 840 / r is an integer for every r <= 8
    let counts: Vec<usize> = (1..=8).map(|r| 840 / r).collect();
    let mut rows = Vec::new();
    for (l, &c) in counts.iter().enumerate() {
        // reverse ids so ranking has to reorder them
        rows.extend(std::iter::repeat(vec![(7 - l) as u32]).take(c));
    }
    let y = LabelMatrix::new(8, &rows).unwrap();
    let f = label_frequency_stats(&y);
    let fit = f.fit.unwrap();
    assert!((fit.beta_hat - 1.0).abs() < 1e-9, "{}", fit.beta_hat);
    assert!((fit.n1_hat - 840.0).abs() < 1e-6);
    assert_eq!(f.ranked[0].label, 7);
    assert_eq!(f.ranked[0].count, 840);
}

#[test]
fn split_is_seeded() {
    let ds = generate_powerlaw(&PowerLawSpec::default()).unwrap();
    let (a_tr, a_te) = train_test_split(&ds, 0.25, 4);
    let (b_tr, b_te) = train_test_split(&ds, 0.25, 4);
    assert_eq!(xmc_bytes(&a_tr), xmc_bytes(&b_tr));
    assert_eq!(xmc_bytes(&a_te), xmc_bytes(&b_te));
    assert_eq!(a_tr.n_rows() + a_te.n_rows(), ds.n_rows());
    let (c_tr, _) = train_test_split(&ds, 0.25, 5);
    assert_ne!(xmc_bytes(&a_tr), xmc_bytes(&c_tr));
}
