use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylefield::nerf::{
    composite, distortion, render_rays, render_view, volume_weights, Camera, FieldConfig,
    Intrinsics, RadianceField, RaySamples, SampleOptions,
};
use stylefield::tensor::gradcheck::{central_difference, relative_error};
use stylefield::tensor::{Tape, Tensor, Var};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Central-difference check of `loss` with respect to one input tensor.
fn grad_error(x: &Tensor<f64>, loss: impl for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>) -> f64 {
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    tape.backward(loss(v)).unwrap();
    let analytic = v.grad().unwrap();
    let numeric = central_difference(
        |p| {
            let tape = Tape::new();
            loss(tape.constant(Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap())).item()
        },
        x.data(),
        1e-6,
    );
    relative_error(analytic.data(), &numeric)
}

#[test]
fn volume_rendering_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (r, k) = (3, 8);
    let sigma = uniform(&mut rng, &[r, k], 0.0, 3.0);
    let rgb = uniform(&mut rng, &[r, 3 * k], 0.0, 1.0);
    let delta = uniform(&mut rng, &[r, k], 0.05, 0.4);
    let probe = uniform(&mut rng, &[r, 3], -1.0, 1.0);
    fn render_loss<'t>(s: Var<'t, f64>, c: Var<'t, f64>, delta: &Tensor<f64>, probe: &Tensor<f64>) -> Var<'t, f64> {
        let w = volume_weights(s, delta).unwrap();
        let out = composite(w, c, [0.2, 0.5, 0.9]).unwrap();
        out.mul(&s.tape().constant(probe.clone())).unwrap().sum()
    }
    let e_sigma = grad_error(&sigma, |s| render_loss(s, s.tape().constant(rgb.clone()), &delta, &probe));
    let e_rgb = grad_error(&rgb, |c| render_loss(c.tape().constant(sigma.clone()), c, &delta, &probe));
    assert!(e_sigma < 1e-4 && e_rgb < 1e-4, "sigma {e_sigma} rgb {e_rgb}");

    let weights = uniform(&mut rng, &[r, k], 0.0, 0.2);
    let mids = Tensor::from_fn(vec![r, k], |i| ((i % k) as f64 + 0.5) / k as f64);
    let widths = Tensor::full(vec![r, k], 1.0 / k as f64);
    let e_dist = grad_error(&weights, |w| distortion(w, &mids, &widths).unwrap());
    assert!(e_dist < 1e-4, "distortion {e_dist}");
}

fn tiny_field() -> FieldConfig {
    FieldConfig {
        hidden_width: 8,
        hidden_layers: 2,
        pos_frequencies: 2,
        dir_frequencies: 1,
        scene_bound: 3.0,
    }
}

#[test]
fn field_parameters_receive_correct_gradients() {
    let field = RadianceField::<f64>::new(tiny_field(), 3).unwrap();
    let cam = Camera::look_at(Intrinsics::centered(8.0, 4, 4), [0.0, 0.0, 2.5], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
    let rays = cam.rays(&[(0, 0), (2, 1), (3, 3)]).unwrap();
    let opts = SampleOptions { near: 1.0, far: 4.0, samples: 8, stratified: false };
    for (idx, name) in field.names().iter().enumerate() {
        let err = grad_error(&field.params()[idx], |p| {
            let mut vars = field.bind(p.tape(), false);
            vars[idx] = p;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = render_rays(&field, &vars, &rays, &opts, [0.1, 0.2, 0.3], &mut rng).unwrap();
            out.color.square().sum().add(&out.distortion().unwrap()).unwrap()
        });
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn interval_splitting_is_exact_for_constant_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 6;
    let sigma = uniform(&mut rng, &[1, k], 0.0, 4.0);
    let delta = uniform(&mut rng, &[1, k], 0.05, 0.5);
    let rgb = uniform(&mut rng, &[1, 3 * k], 0.0, 1.0);
    let render = |s: Tensor<f64>, d: Tensor<f64>, c: Tensor<f64>| {
        let tape = Tape::new();
        let w = volume_weights(tape.constant(s), &d).unwrap();
        let out = composite(w, tape.constant(c), [0.0; 3]).unwrap();
        out.value().data().to_vec()
    };
    let base = render(sigma.clone(), delta.clone(), rgb.clone());
    let split = 2;
    let mut s2 = sigma.data().to_vec();
    let mut d2 = delta.data().to_vec();
    let mut c2 = rgb.data().to_vec();
    s2.insert(split, s2[split]);
    let half = d2[split] / 2.0;
    d2[split] = half;
    d2.insert(split, half);
    let col: Vec<f64> = c2[3 * split..3 * split + 3].to_vec();
    for (i, v) in col.into_iter().enumerate() {
        c2.insert(3 * split + i, v);
    }
    let refined = render(
        Tensor::new(vec![1, k + 1], s2).unwrap(),
        Tensor::new(vec![1, k + 1], d2).unwrap(),
        Tensor::new(vec![1, 3 * (k + 1)], c2).unwrap(),
    );
    for (a, b) in base.iter().zip(&refined) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12), "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn weights_are_a_sub_probability(seed in any::<u64>(), k in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = Tensor::from_fn(vec![4, k], |_| {
            let v: f64 = rng.random_range(0.0..1.0);
            v.powi(3) * 1e3
        });
        let delta = uniform(&mut rng, &[4, k], 1e-4, 1.0);
        let tape = Tape::new();
        let w = volume_weights(tape.constant(sigma), &delta).unwrap();
        for row in w.value().data().chunks(k) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!(row.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn fixed_sampling_renders_deterministically() {
    let field = RadianceField::<f32>::new(tiny_field(), 5).unwrap();
    let cam = Camera::look_at(Intrinsics::centered(10.0, 6, 5), [2.0, 0.5, 2.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
    let opts = SampleOptions { near: 0.5, far: 5.0, samples: 16, stratified: true };
    let a = render_view(&field, &cam, &opts, [1.0; 3]).unwrap();
    let b = render_view(&field, &cam, &opts, [1.0; 3]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rgb.shape(), &[3, 5, 6]);
    assert!(a.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.depth.iter().all(|d| (0.5..=5.0).contains(d)));
}

#[test]
fn stratified_draws_follow_the_seed() {
    let opts = SampleOptions { near: 0.5, far: 2.0, samples: 4, stratified: true };
    let a = RaySamples::draw(3, &opts, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = RaySamples::draw(3, &opts, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let c = RaySamples::draw(3, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
