mod common;

use pdml::data::{lap_index, PatchBatch};
use pdml::loss::{
    contrastive_loss, cross_entropy, dist_match_probability, lap_means, mc_sample, pcon_loss,
    variance_lap_loss,
};
use pdml::model::{argmax_class, softmax, CLASS_W, STD_FLOOR};
use pdml::rng::{fill_standard_normal, rng_from_seed};
use proptest::prelude::*;

use common::problem;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(p in 0.0f64..=1.0, d in prop::collection::vec(-5.0f64..5.0, 1..8),
                               beta in 0.01f64..4.0, is_match: bool) {
        prop_assert!(pcon_loss(p, is_match) >= 0.0);
        let zero = vec![0.0; d.len()];
        prop_assert!(contrastive_loss(&d, &zero, is_match, beta) >= 0.0);
    }

    #[test]
    fn matched_loss_shrinks_as_means_approach(seed: u64, scale in 0.05f64..1.0, log_a in -2.0f64..2.0,
                                              b in -3.0f64..3.0, k in 1usize..5) {
        let r = 4;
        let mut m1 = vec![0.0; r];
        fill_standard_normal(&mut rng_from_seed(seed), &mut m1);
        // with wide V the sampled distance is not monotone in the mean gap
        let v = vec![STD_FLOOR; r];
        let m2 = vec![0.0; r];
        let loss_at = |t: f64| {
            let near: Vec<f64> = m1.iter().map(|x| x * t).collect();
            let mut rng = rng_from_seed(seed ^ 1);
            let s1 = mc_sample(&near, &v, k, &mut rng);
            let s2 = mc_sample(&m2, &v, k, &mut rng);
            pcon_loss(dist_match_probability(&s1, &s2, log_a.exp(), b), true)
        };
        prop_assert!(loss_at(scale) <= loss_at(1.0) + 1e-15);
    }

    #[test]
    fn hinged_lap_loss_is_bounded_below(side in (1usize..6).prop_map(|h| 2 * h + 1), seed: u64,
                                        alpha in 0.0f64..1.0) {
        let lap = lap_index(side).unwrap();
        let mut std = vec![0.0f64; lap.pixels() * 3];
        fill_standard_normal(&mut rng_from_seed(seed), &mut std);
        std.iter_mut().for_each(|x| *x = x.abs() + STD_FLOOR);
        prop_assert!(variance_lap_loss(&std, &lap, alpha, true).unwrap() >= 0.0);
        let verbatim = variance_lap_loss(&std, &lap, alpha, false).unwrap();
        let a = lap_means(&std, &lap);
        let expected: f64 = a.windows(2).map(|w| (1.0 + alpha) * w[0] - w[1]).sum();
        prop_assert!((verbatim - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn std_stays_positive_for_any_parameters(seed: u64, gain in 1.0f64..50.0) {
        let mut p = problem(seed % 4, 2, 5, 4);
        for id in 0..p.params.len() {
            p.params.value_mut(id).iter_mut().for_each(|x| *x *= gain);
        }
        let field = p.model.forward(&p.params, &p.batch).unwrap();
        prop_assert!(field.std.data().iter().all(|&v| v > 0.0 && v.is_finite()));
    }
}

#[test]
fn field_covers_every_pixel_for_each_side() {
    for side in [3, 5, 7, 9] {
        let p = problem(1, 2, side, 4);
        let field = p.model.forward(&p.params, &p.batch).unwrap();
        assert_eq!(field.mean.shape(), &[2, side * side, 4]);
        assert_eq!(field.std.shape(), &[2, side * side, 4]);
    }
}

#[test]
fn predict_is_argmax_of_probabilities() {
    let p = problem(2, 6, 5, 6);
    let field = p.model.forward(&p.params, &p.batch).unwrap();
    let logits = p.model.classify_logits(&p.params, &field.mean).unwrap();
    let predicted = p.model.predict_batch(&p.params, &p.batch).unwrap();
    for (i, row) in logits.data().chunks(4).enumerate() {
        let probs = softmax(row);
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |best, (k, &q)| if q > probs[best] { k } else { best });
        assert_eq!(predicted[i] as usize, best + 1);
        assert_eq!(
            p.model.predict(&p.params, p.batch.patch(i)).unwrap(),
            predicted[i]
        );
    }
}

#[test]
fn permuting_the_batch_permutes_outputs() {
    let p = problem(3, 5, 5, 4);
    let order = [3usize, 0, 4, 1, 2];
    let coords: Vec<_> = order.iter().map(|&i| p.batch.coords[i]).collect();
    let mut shuffled = PatchBatch {
        patches: Vec::new(),
        center_labels: order.iter().map(|&i| p.batch.center_labels[i]).collect(),
        coords,
        side: p.batch.side,
        bands: p.batch.bands,
    };
    for &i in &order {
        shuffled.patches.extend_from_slice(p.batch.patch(i));
    }
    let a = p.model.forward(&p.params, &p.batch).unwrap();
    let b = p.model.forward(&p.params, &shuffled).unwrap();
    for (j, &i) in order.iter().enumerate() {
        for t in 0..a.pixels() {
            assert_eq!(a.mean_at(i, t), b.mean_at(j, t));
            assert_eq!(a.std_at(i, t), b.std_at(j, t));
        }
    }
}

#[test]
fn scaling_means_and_inverse_scaling_classifier_keeps_predictions() {
    let p = problem(4, 6, 5, 6);
    let field = p.model.forward(&p.params, &p.batch).unwrap();
    let base = p.model.classify_logits(&p.params, &field.mean).unwrap();
    for c in [0.25, 3.0] {
        let mut mean = field.mean.clone();
        mean.data_mut().iter_mut().for_each(|x| *x *= c);
        let mut params = p.params.clone();
        params.value_mut(CLASS_W).iter_mut().for_each(|w| *w /= c);
        let scaled = p.model.classify_logits(&params, &mean).unwrap();
        for (row, (x, y)) in base
            .data()
            .chunks(4)
            .zip(scaled.data().chunks(4))
            .enumerate()
        {
            assert_eq!(argmax_class(x), argmax_class(y));
            let label = p.batch.center_labels[row];
            assert!((cross_entropy(x, label) - cross_entropy(y, label)).abs() < 1e-9);
        }
    }
}
