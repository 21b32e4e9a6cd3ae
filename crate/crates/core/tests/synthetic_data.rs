//! The reference synthetic benchmark is separable in raw feature space.

use ccd_core::data::{gen_synthetic, SyntheticSpec};

#[test]
fn nearest_class_mean_fits_the_reference_data() {
    for seed in 0..3 {
        let ds = gen_synthetic(&SyntheticSpec::reference(seed)).unwrap();
        assert_eq!((ds.seen_classes.len(), ds.unseen_classes.len(), ds.n_samples()), (8, 2, 1000));
        let x = &ds.features;
        let means: Vec<Vec<f64>> = (0..ds.n_classes() as u32)
            .map(|c| {
                let rows: Vec<usize> = (0..ds.n_samples()).filter(|&i| ds.labels[i] == c).collect();
                (0..x.cols()).map(|j| rows.iter().map(|&r| x.get(r, j)).sum::<f64>() / rows.len() as f64).collect()
            })
            .collect();
        let hits = (0..ds.n_samples())
            .filter(|&i| {
                let d = |m: &Vec<f64>| x.row(i).iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..means.len()).min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b]))).unwrap();
                best as u32 == ds.labels[i]
            })
            .count();
        let acc = hits as f64 / ds.n_samples() as f64;
        assert!(acc >= 0.95, "seed {seed}: {acc}");
    }
}
