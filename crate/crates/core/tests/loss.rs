use objmst::clip_direction::{masked_directional_loss, masked_directional_loss_grad, Direction, LossConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Direct double loop over every (style, text) and (style, input) pair.
fn naive(style: &[Vec<f64>], input: &[Vec<f64>], text: &[f64], lambda: f64) -> f64 {
    let n = style.len() as f64;
    let mut t = 0.0;
    for s in style {
        t += 1.0 - cos(s, text);
    }
    let mut im = 0.0;
    for s in style {
        for i in input {
            im += 1.0 - cos(s, i);
        }
    }
    t / n + lambda * im / (n * n)
}

fn dirs(v: &[Vec<f64>]) -> Vec<Direction> {
    v.iter().map(|x| Direction { values: x.clone() }).collect()
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn cfg(n: usize, lambda: f64) -> LossConfig {
    LossConfig {
        lambda,
        n_crop: n,
        ..Default::default()
    }
}

#[test]
fn matches_naive_oracle_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let start = std::time::Instant::now();
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = [1, 3, 16][case % 3];
        let lambda = [0.0, 0.7, 1.0][(case / 3) % 3];
        let s = random_set(&mut rng, n, 16);
        let i = random_set(&mut rng, n, 16);
        let t = random_set(&mut rng, 1, 16).remove(0);
        let got = masked_directional_loss(&dirs(&s), &dirs(&i), &Direction { values: t.clone() }, &cfg(n, lambda))
            .unwrap()
            .total;
        worst = worst.max((got - naive(&s, &i, &t, lambda)).abs());
    }
    assert!(worst < 1e-6, "max deviation {worst}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn endpoint_values() {
    let t = vec![1.0, 0.0, 0.0];
    let orth = vec![0.0, 1.0, 0.0];
    let opp = vec![-2.0, 0.0, 0.0];
    for lambda in [0.0, 0.7, 1.0] {
        for n in [1, 3] {
            let c = cfg(n, lambda);
            let td = Direction { values: t.clone() };
            let same = vec![t.clone(); n];
            let aligned = masked_directional_loss(&dirs(&same), &dirs(&same), &td, &c).unwrap();
            assert!(aligned.total.abs() < 1e-6);
            let o = masked_directional_loss(&dirs(&vec![orth.clone(); n]), &dirs(&same), &td, &c).unwrap();
            assert!((o.total - (1.0 + lambda)).abs() < 1e-6);
            let r = masked_directional_loss(&dirs(&vec![opp.clone(); n]), &dirs(&same), &td, &c).unwrap();
            assert!((r.total - (2.0 + 2.0 * lambda)).abs() < 1e-6);
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (n, lambda) in [(1, 0.0), (3, 0.7), (16, 1.0)] {
        let s = random_set(&mut rng, n, 16);
        let i = random_set(&mut rng, n, 16);
        let t = Direction {
            values: random_set(&mut rng, 1, 16).remove(0),
        };
        let c = cfg(n, lambda);
        let (_, g) = masked_directional_loss_grad(&dirs(&s), &dirs(&i), &t, &c).unwrap();
        let h = 1e-6;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in 0..n {
            for k in 0..16 {
                let mut p = s.clone();
                let mut m = s.clone();
                p[j][k] += h;
                m[j][k] -= h;
                let lp = masked_directional_loss(&dirs(&p), &dirs(&i), &t, &c).unwrap().total;
                let lm = masked_directional_loss(&dirs(&m), &dirs(&i), &t, &c).unwrap().total;
                numeric.push((lp - lm) / (2.0 * h));
                analytic.push(g[j][k]);
            }
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "n={n} lambda={lambda}: relative error {e}");
    }
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn case_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, f64)> {
    (1usize..6, 0.0f64..2.0).prop_flat_map(|(n, lambda)| {
        (
            prop::collection::vec(vec_strategy(8), n),
            prop::collection::vec(vec_strategy(8), n),
            vec_strategy(8),
            Just(lambda),
        )
    })
}

proptest! {
    #[test]
    fn bounded_by_endpoints((s, i, t, lambda) in case_strategy()) {
        let c = cfg(s.len(), lambda);
        let v = masked_directional_loss(&dirs(&s), &dirs(&i), &Direction { values: t }, &c).unwrap();
        prop_assert!(v.total >= -1e-12 && v.total <= 2.0 + 2.0 * lambda + 1e-12);
        prop_assert!((v.total - (v.text_term + lambda * v.image_term)).abs() < 1e-12);
    }

    #[test]
    fn invariant_to_positive_scaling((s, i, t, lambda) in case_strategy(), scale in 0.01f64..100.0) {
        let c = cfg(s.len(), lambda);
        let td = Direction { values: t };
        let base = masked_directional_loss(&dirs(&s), &dirs(&i), &td, &c).unwrap().total;
        let sd: Vec<Direction> = dirs(&s).iter().map(|d| d.scaled(scale)).collect();
        let id: Vec<Direction> = dirs(&i).iter().map(|d| d.scaled(1.0 / scale)).collect();
        let scaled = masked_directional_loss(&sd, &id, &td.scaled(scale), &c).unwrap().total;
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn invariant_to_crop_order((s, i, t, lambda) in case_strategy()) {
        let c = cfg(s.len(), lambda);
        let td = Direction { values: t };
        let base = masked_directional_loss(&dirs(&s), &dirs(&i), &td, &c).unwrap().total;
        let mut sr = s.clone();
        sr.reverse();
        let mut ir = i.clone();
        ir.rotate_left(1);
        let perm = masked_directional_loss(&dirs(&sr), &dirs(&ir), &td, &c).unwrap().total;
        prop_assert!((base - perm).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_orthogonal_to_each_style_direction((s, i, t, lambda) in case_strategy()) {
        let c = cfg(s.len(), lambda);
        let (_, g) = masked_directional_loss_grad(&dirs(&s), &dirs(&i), &Direction { values: t }, &c).unwrap();
        for (gj, sj) in g.iter().zip(&s) {
            let d: f64 = gj.iter().zip(sj).map(|(a, b)| a * b).sum();
            let scale = gj.iter().map(|x| x * x).sum::<f64>().sqrt() * sj.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(d.abs() <= 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn naive_oracle_agrees((s, i, t, lambda) in case_strategy()) {
        let c = cfg(s.len(), lambda);
        let got = masked_directional_loss(&dirs(&s), &dirs(&i), &Direction { values: t.clone() }, &c).unwrap().total;
        prop_assert!((got - naive(&s, &i, &t, lambda)).abs() < 1e-9);
    }
}
