use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfed::loss::{
    combined_loss, criterion_loss, criterion_loss_grad, pixelwise_distillation_loss, pixelwise_distillation_loss_grad,
    LossComponent, LossValue, IGNORE_INDEX,
};
use segfed::Tensor;

fn logits(k: usize, pixels: usize, values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[1, k, 1, pixels], values).unwrap()
}

fn norm(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Saturated teacher targets: a margin of 4 on a random class per pixel.
fn saturated_instance() -> (Tensor<f64>, Tensor<f64>) {
    let (k, pixels) = (3, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut teacher = vec![0.0; k * pixels];
    for p in 0..pixels {
        teacher[rng.gen_range(0..k) * pixels + p] = 4.0;
    }
    let student = (0..k * pixels).map(|_| rng.gen_range(-1.7..1.7)).collect();
    (logits(k, pixels, student), logits(k, pixels, teacher))
}

#[test]
fn gradient_norm_is_temperature_stable_for_saturated_targets() {
    let (student, teacher) = saturated_instance();
    let norms: Vec<f64> = [1.0, 5.0, 20.0]
        .iter()
        .map(|&t| norm(&pixelwise_distillation_loss_grad(&student, &teacher, t).unwrap().1))
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(max / min < 2.0, "{norms:?}");
}

#[test]
fn gradients_match_finite_differences_across_temperatures() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (k, pixels) = (4, 20);
    let student = logits(k, pixels, (0..k * pixels).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let teacher = logits(k, pixels, (0..k * pixels).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let labels: Vec<u8> = (0..pixels)
        .map(|p| if p % 7 == 3 { IGNORE_INDEX } else { (p % k) as u8 })
        .collect();
    let h = 1e-6;
    let numeric = |f: &dyn Fn(&Tensor<f64>) -> f64, i: usize| {
        let mut plus = student.clone();
        plus.data_mut()[i] += h;
        let mut minus = student.clone();
        minus.data_mut()[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    };
    for t in [0.5, 1.0, 3.0, 20.0] {
        let (_, g) = pixelwise_distillation_loss_grad(&student, &teacher, t).unwrap();
        let f = |s: &Tensor<f64>| pixelwise_distillation_loss(s, &teacher, t).unwrap().value;
        for i in 0..student.numel() {
            let n = numeric(&f, i);
            let a = g.data()[i];
            assert!(
                (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-9,
                "T={t} i={i}: {a} vs {n}"
            );
        }
    }
    let (_, g) = criterion_loss_grad(&student, &labels).unwrap();
    let f = |s: &Tensor<f64>| criterion_loss(s, &labels).unwrap().value;
    for i in 0..student.numel() {
        let n = numeric(&f, i);
        let a = g.data()[i];
        assert!(
            (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-9,
            "criterion i={i}: {a} vs {n}"
        );
    }
}

#[test]
fn fully_ignored_mask_contributes_nothing() {
    let z = logits(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let (v, g) = criterion_loss_grad(&z, &[IGNORE_INDEX, IGNORE_INDEX]).unwrap();
    assert_eq!(v.value, 0.0);
    assert!(g.data().iter().all(|&x| x == 0.0));
}

fn value(v: f64, component: LossComponent) -> LossValue {
    LossValue { value: v, component }
}

proptest! {
    #[test]
    fn distillation_is_nonnegative(
        s in prop::collection::vec(-20.0f64..20.0, 12),
        t_logits in prop::collection::vec(-20.0f64..20.0, 12),
        t in 0.1f64..30.0,
    ) {
        let v = pixelwise_distillation_loss(&logits(3, 4, s), &logits(3, 4, t_logits), t).unwrap().value;
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn distillation_vanishes_when_distributions_agree(
        s in prop::collection::vec(-20.0f64..20.0, 12),
        shift in prop::collection::vec(-5.0f64..5.0, 4),
        t in 0.1f64..30.0,
    ) {
        // a per-pixel constant shift leaves the softmax unchanged
        let shifted: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + shift[i % 4]).collect();
        let v = pixelwise_distillation_loss(&logits(3, 4, s), &logits(3, 4, shifted), t).unwrap().value;
        prop_assert!(v.abs() < 1e-9, "{}", v);
    }

    #[test]
    fn combined_is_monotone_in_each_part(
        lp in 0.0f64..10.0, lc in 0.0f64..10.0, d in 0.0f64..10.0, alpha in 0.0f64..=1.0,
    ) {
        let base = combined_loss(value(lp, LossComponent::Distillation), value(lc, LossComponent::Criterion), alpha).unwrap().value;
        let more_lp = combined_loss(value(lp + d, LossComponent::Distillation), value(lc, LossComponent::Criterion), alpha).unwrap().value;
        let more_lc = combined_loss(value(lp, LossComponent::Distillation), value(lc + d, LossComponent::Criterion), alpha).unwrap().value;
        prop_assert!(more_lp >= base);
        prop_assert!(more_lc >= base);
    }
}
