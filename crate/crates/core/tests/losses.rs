mod common;

use candle_core::{Device, Tensor};
use common::{gradient_error, grounding, loss_examples, objective, random_instance, record, scalar, Objective};
use rand::Rng;
use tokencompose::grounding::{token_loss, BinaryMask};
use tokencompose::nn::seeded_rng;

#[test]
fn tagged_loss_examples() {
    for (name, got, expected) in loss_examples() {
        assert!((got - expected).abs() < 1e-6, "{name}: {got} vs {expected}");
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = seeded_rng(11, "gradcheck");
    for case in 0..24 {
        let (values, shape, g) = random_instance(&mut rng);
        for kind in [Objective::Token, Objective::Pixel, Objective::Joint] {
            let rel = gradient_error(kind, &values, shape, &g);
            assert!(rel < 1e-4, "case {case} {kind:?}: relative error {rel:e}");
        }
    }
}

#[test]
fn token_loss_depends_only_on_mass_ratio() {
    // Two columns with inside/total = 0.6 but different totals.
    let dev = Device::Cpu;
    let m = BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
    let a = Tensor::new(&[[0.3f64], [0.3], [0.2], [0.2]], &dev).unwrap();
    let b = Tensor::new(&[[0.9f64], [0.3], [0.5], [0.3]], &dev).unwrap();
    let g = [grounding(&[(0, m)])];
    let la = scalar(&token_loss(&record(a, (1, 4)), &g).unwrap());
    let lb = scalar(&token_loss(&record(b, (1, 4)), &g).unwrap());
    assert!((la - 0.16).abs() < 1e-12 && (la - lb).abs() < 1e-12);
}

#[test]
fn moving_mass_inside_never_increases_token_loss() {
    let mut rng = seeded_rng(3, "monotone");
    for _ in 0..50 {
        let (values, shape, g) = random_instance(&mut rng);
        let n = shape.0 * shape.1;
        let map: Vec<f64> = values.iter().map(|v| v.exp()).collect();
        let entry = &g.entries()[0];
        let p = entry.token_position;
        let (inside, outside): (Vec<usize>, Vec<usize>) = (0..n).partition(|&u| entry.mask.data()[u] == 1);
        if outside.is_empty() {
            continue;
        }
        let loss = |m: &[f64]| scalar(&token_loss(&record(Tensor::from_vec(m.to_vec(), (n, 4), &Device::Cpu).unwrap(), shape), std::slice::from_ref(&g)).unwrap());
        let before = loss(&map);
        let mut moved = map.clone();
        let (src, dst) = (outside[0] * 4 + p, inside[0] * 4 + p);
        let amount = moved[src] * rng.random_range(0.0..1.0);
        moved[src] -= amount;
        moved[dst] += amount;
        assert!(loss(&moved) <= before + 1e-12);
    }
}

#[test]
fn losses_stay_finite_and_in_range() {
    let mut rng = seeded_rng(5, "range");
    for _ in 0..50 {
        let (mut values, shape, g) = random_instance(&mut rng);
        for v in values.iter_mut().step_by(3) {
            *v *= 40.0;
        }
        let logits = Tensor::from_vec(values, (shape.0 * shape.1, 4), &Device::Cpu).unwrap();
        let t = scalar(&objective(Objective::Token, &logits, shape, &g));
        let p = scalar(&objective(Objective::Pixel, &logits, shape, &g));
        assert!((0.0..=1.0).contains(&t), "{t}");
        assert!(p.is_finite() && p >= 0.0, "{p}");
    }
}
