use decaf_core::graphdata::Graph;
use decaf_core::inject::{inject, InjectConfig, OutlierKind};
use decaf_core::synthgen::{generate, SynthConfig};
use proptest::prelude::*;

fn base(seed: u64, n: usize) -> Graph {
    generate(&SynthConfig {
        n_nodes: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .factual
}

fn revalidate(g: &Graph) -> bool {
    let adj = g.adjacency();
    let symmetric = (0..g.n_nodes()).all(|u| adj.neighbors(u).iter().all(|&v| v != u && adj.has_edge(v, u)));
    symmetric
        && Graph::new(
            g.features().clone(),
            adj.clone(),
            g.sensitive().to_vec(),
            g.labels().map(<[u8]>::to_vec),
            g.sensitive_col(),
        )
        .is_ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn structural_outliers(seed in 0u64..1000, n in 60usize..250, ratio in 0.04f64..0.2, drop in 0.0f64..0.6) {
        let g = base(seed, n);
        let cfg = InjectConfig { outlier_ratio: ratio, edge_drop_prob: drop, seed, ..InjectConfig::default() };
        let h = inject(&g, OutlierKind::Structural, &cfg).unwrap();
        let y = h.labels().unwrap();
        prop_assert_eq!(y.iter().filter(|&&v| v == 1).count(), (ratio * n as f64 - 1e-9).ceil() as usize);
        prop_assert!(g.adjacency().edges().iter().all(|&(u, v)| h.adjacency().has_edge(u, v)));
        prop_assert_eq!(g.features(), h.features());
        prop_assert!(revalidate(&h));
    }

    #[test]
    fn contextual_outliers(seed in 0u64..1000, n in 60usize..250, ratio in 0.04f64..0.2) {
        let g = base(seed, n);
        let cfg = InjectConfig { outlier_ratio: ratio, contextual_pool_k: 20, seed, ..InjectConfig::default() };
        let h = inject(&g, OutlierKind::Contextual, &cfg).unwrap();
        let y = h.labels().unwrap();
        prop_assert_eq!(y.iter().filter(|&&v| v == 1).count(), (ratio * n as f64 - 1e-9).ceil() as usize);
        prop_assert_eq!(g.adjacency().edges(), h.adjacency().edges());
        prop_assert_eq!(g.sensitive(), h.sensitive());
        prop_assert!(revalidate(&h));
    }
}
