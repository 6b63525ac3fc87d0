use aeotgan::aegan::*;
use aeotgan::extension::{build_rips, select_epsilon, ExtendedMap};
use aeotgan::geometry::PointCloud;
use aeotgan::nn::{Activation, Layer, LayerSpec, Matrix, Mlp};
use aeotgan::rng::RngStream;
use aeotgan::sdot::{solve, SdotProblem, SolverConfig};
use proptest::prelude::*;

fn mixture(per: usize, sigma: f64, seed: u64) -> PointCloud {
    let mut r = RngStream::new(seed, 0);
    let mut flat = Vec::new();
    for c in [[0.25, 0.25], [0.75, 0.25], [0.5, 0.75]] {
        for _ in 0..per {
            flat.push(c[0] + sigma * r.normal());
            flat.push(c[1] + sigma * r.normal());
        }
    }
    PointCloud::from_flat(2, flat).unwrap()
}

fn sampler_for(codes: &PointCloud) -> ExtendedMap {
    let problem = SdotProblem::uniform(codes.clone()).unwrap();
    let report = solve(&problem, &SolverConfig::for_targets(problem.len()), &RngStream::new(4, 0)).unwrap();
    assert!(report.converged);
    let eps = select_epsilon(codes, codes.dim() + 1).unwrap();
    let rips = build_rips(codes, eps).unwrap();
    ExtendedMap::new(problem, report.potential, report.stats, rips, None).unwrap()
}

fn triple(x: &[f64], r: &[f64]) -> PairedTriple {
    PairedTriple { index: 0, x: x.to_vec(), z: vec![0.0], reconstruction: r.to_vec() }
}

fn tanh_net(widths: &[usize], last: Activation, seed: u64) -> Mlp {
    let specs: Vec<LayerSpec> = (0..widths.len() - 1)
        .map(|k| LayerSpec {
            inputs: widths[k],
            outputs: widths[k + 1],
            activation: if k + 2 == widths.len() { last } else { Activation::Tanh },
        })
        .collect();
    Mlp::init(&specs, &RngStream::new(seed, 0)).unwrap()
}

#[test]
fn content_loss_examples() {
    assert_eq!(content_loss(&[triple(&[1.0, 2.0], &[1.0, 2.0])]).unwrap(), 0.0);
    assert_eq!(content_loss(&[triple(&[0.0, 0.0], &[3.0, 4.0])]).unwrap(), 25.0);
    assert!(content_loss(&[]).is_err());
}

proptest! {
    #[test]
    fn content_loss_is_the_mean_of_item_losses(v in prop::collection::vec(-2.0f64..2.0, 4..40)) {
        let n = v.len() / 4;
        let ts: Vec<_> = (0..n).map(|k| triple(&v[4 * k..4 * k + 2], &v[4 * k + 2..4 * k + 4])).collect();
        let mut want = 0.0;
        for t in &ts {
            want += content_loss(std::slice::from_ref(t)).unwrap();
        }
        want /= n as f64;
        prop_assert!((content_loss(&ts).unwrap() - want).abs() <= 1e-12 * (1.0 + want));
    }
}

#[test]
fn feature_loss_vanishes_on_perfect_reconstruction_or_zero_weights() {
    let enc = tanh_net(&[3, 5, 2], Activation::Identity, 1);
    let ts = vec![triple(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]), triple(&[1.0, -1.0, 0.5], &[1.0, -1.0, 0.5])];
    assert_eq!(feature_loss(&ts, &enc, &[0.06, 1.0]).unwrap(), 0.0);
    let off = vec![triple(&[0.1, 0.2, 0.3], &[0.9, 0.2, -0.3])];
    assert_eq!(feature_loss(&off, &enc, &[0.0, 0.0]).unwrap(), 0.0);
    assert!(feature_loss(&off, &enc, &[0.06, 1.0]).unwrap() > 0.0);
    assert!(feature_loss(&off, &enc, &[1.0]).is_err());
}

#[test]
fn feature_loss_matches_a_hand_computed_encoder() {
    // one tanh layer: f(x) = tanh(W x + b)
    let layer = Layer {
        inputs: 2,
        outputs: 2,
        activation: Activation::Tanh,
        weights: vec![0.5, -1.0, 2.0, 0.25],
        bias: vec![0.1, -0.2],
    };
    let enc = Mlp::from_layers(vec![layer]).unwrap();
    let (x, r) = ([0.3, 0.7], [-0.4, 0.2]);
    let f = |v: [f64; 2]| [(0.5 * v[0] - v[1] + 0.1).tanh(), (2.0 * v[0] + 0.25 * v[1] - 0.2).tanh()];
    let (fx, fr) = (f(x), f(r));
    let want = 0.7 * ((fx[0] - fr[0]).powi(2) + (fx[1] - fr[1]).powi(2));
    let got = feature_loss(&[triple(&x, &r)], &enc, &[0.7]).unwrap();
    assert!((got - want).abs() < 1e-15, "{got} {want}");
}

fn constant_disc(bias: f64) -> Mlp {
    Mlp::from_layers(vec![Layer {
        inputs: 2,
        outputs: 1,
        activation: Activation::Sigmoid,
        weights: vec![0.0, 0.0],
        bias: vec![bias],
    }])
    .unwrap()
}

#[test]
fn constant_half_discriminator_losses() {
    let real = Matrix::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let fake = Matrix::new(2, 2, vec![9.0, 9.0, -1.0, 0.0]).unwrap();
    let a = adversarial_losses(&constant_disc(0.0), &real, &fake).unwrap();
    assert!((a.disc_loss - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert!((a.gen_loss - 2f64.ln()).abs() < 1e-15);
    assert_eq!((a.d_real_mean, a.d_fake_mean), (0.5, 0.5));
}

#[test]
fn perfect_discriminator_has_vanishing_loss() {
    // d(x) = σ(k (x₀ − 0.5)); reals at x₀ = 1, fakes at x₀ = 0
    let disc = |k: f64| {
        Mlp::from_layers(vec![Layer {
            inputs: 2,
            outputs: 1,
            activation: Activation::Sigmoid,
            weights: vec![k, 0.0],
            bias: vec![-0.5 * k],
        }])
        .unwrap()
    };
    let real = Matrix::new(2, 2, vec![1.0, 0.0, 1.0, 3.0]).unwrap();
    let fake = Matrix::new(2, 2, vec![0.0, 1.0, 0.0, -2.0]).unwrap();
    let mut last = f64::INFINITY;
    for k in [10.0, 40.0, 80.0] {
        let a = adversarial_losses(&disc(k), &real, &fake).unwrap();
        assert!(a.disc_loss < last);
        last = a.disc_loss;
    }
    assert!(last < 1e-16);
    // saturated beyond the log floor: losses stay finite
    let a = adversarial_losses(&disc(1e4), &real, &fake).unwrap();
    assert!((a.gen_loss - (-(1e-12f64).ln())).abs() < 1e-9);
}

#[test]
fn discriminator_must_end_in_one_sigmoid() {
    let m = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
    let bad = tanh_net(&[2, 1], Activation::Identity, 3);
    assert!(adversarial_losses(&bad, &m, &m).is_err());
}

#[test]
fn batch_composition_follows_the_ratio() {
    let data = mixture(10, 0.05, 1);
    let codes = data.clone();
    let sampler = sampler_for(&codes);
    let gen = tanh_net(&[2, 8, 2], Activation::Identity, 2);
    let mut rng = RngStream::new(5, 5);
    for (batch, q) in [(64, 16), (4, 1), (8, 2)] {
        let b = compose_batches(&data, &codes, &sampler, &gen, batch, FakeRatio::default(), &mut rng).unwrap();
        assert_eq!((b.real.rows(), b.fake.rows(), b.paired()), (batch, batch, q));
        let out = gen.predict(&b.latents).unwrap();
        assert_eq!(out, b.fake);
        for (k, t) in b.triples.iter().enumerate() {
            assert_eq!(b.real.row(k), data.point(t.index));
            assert_eq!(t.x, data.point(t.index));
            assert_eq!(t.z, codes.point(t.index));
            assert_eq!(b.fake.row(k), &t.reconstruction[..]);
        }
        let distinct: std::collections::BTreeSet<usize> = b.triples.iter().map(|t| t.index).collect();
        assert_eq!(distinct.len(), q);
    }
    for bad in [0, 6, 10] {
        assert!(compose_batches(&data, &codes, &sampler, &gen, bad, FakeRatio::default(), &mut rng).is_err());
    }
}

fn param(m: &mut Mlp, l: usize, k: usize) -> &mut f64 {
    let layer = &mut m.layers_mut()[l];
    let nw = layer.weights.len();
    if k < nw {
        &mut layer.weights[k]
    } else {
        &mut layer.bias[k - nw]
    }
}

fn check_generator_gradient(beta: f64, alpha: &[f64]) {
    let data = mixture(8, 0.05, 2);
    let codes = data.clone();
    let sampler = sampler_for(&codes);
    let model = GanModel {
        generator: tanh_net(&[2, 6, 2], Activation::Identity, 10),
        discriminator: tanh_net(&[2, 5, 1], Activation::Sigmoid, 11),
        frozen_encoder: tanh_net(&[2, 4, 2], Activation::Identity, 12),
    };
    let batch =
        compose_batches(&data, &codes, &sampler, &model.generator, 8, FakeRatio::default(), &mut RngStream::new(1, 1))
            .unwrap();
    let (_, grads) = generator_objective(&model, &batch, beta, alpha).unwrap();
    let h = 1e-6;
    for l in 0..model.generator.depth() {
        let count = model.generator.layers()[l].weights.len() + model.generator.layers()[l].bias.len();
        for k in 0..count {
            let nw = model.generator.layers()[l].weights.len();
            let analytic = if k < nw { grads.weights[l][k] } else { grads.biases[l][k - nw] };
            let mut plus = model.clone();
            *param(&mut plus.generator, l, k) += h;
            let mut minus = model.clone();
            *param(&mut minus.generator, l, k) -= h;
            let fp = generator_objective(&plus, &batch, beta, alpha).unwrap().0;
            let fm = generator_objective(&minus, &batch, beta, alpha).unwrap().0;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "layer {l} param {k}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn adversarial_gradient_matches_finite_differences() {
    check_generator_gradient(0.0, &[0.0, 0.0]);
}

#[test]
fn full_generator_gradient_matches_finite_differences() {
    check_generator_gradient(3.0, &[0.06, 0.5]);
}

#[test]
fn repeated_point_is_reconstructed() {
    let data = PointCloud::from_rows(2, &vec![[0.3, -0.6]; 40]).unwrap();
    let arch = AeArchitecture::new(2, 1, vec![16]);
    let sched = AeSchedule { epochs: 200, batch_size: 8, ..AeSchedule::default() };
    let (_, hist) = train_autoencoder(&data, &arch, &sched, &RngStream::new(1, 0)).unwrap();
    assert_eq!(hist.mse.len(), 200);
    assert!(hist.final_mse < 1e-6, "{}", hist.final_mse);
    assert!(hist.below_threshold);
}

#[test]
fn linear_autoencoder_reaches_the_identity() {
    let mut r = RngStream::new(2, 0);
    let data = PointCloud::from_flat(3, (0..300).map(|_| r.normal()).collect()).unwrap();
    let arch = AeArchitecture { activation: Activation::Identity, ..AeArchitecture::new(3, 3, vec![6]) };
    let sched = AeSchedule { epochs: 300, batch_size: 20, lr: 1e-2, mse_threshold: 1e-6 };
    let (_, hist) = train_autoencoder(&data, &arch, &sched, &RngStream::new(1, 0)).unwrap();
    assert!(hist.final_mse < 1e-6, "{}", hist.final_mse);
}

#[test]
fn mixture_autoencoder_reaches_the_baseline() {
    let data = mixture(1000, 0.05, 3);
    let arch = AeArchitecture::new(2, 2, vec![64, 64]);
    let (ae, hist) = train_autoencoder(&data, &arch, &AeSchedule::default(), &RngStream::new(3, 0)).unwrap();
    assert!(hist.final_mse < 1e-3, "{}", hist.final_mse);
    assert!(hist.below_threshold);
    let codes = encode_dataset(&ae, &data).unwrap();
    assert_eq!((codes.len(), codes.dim()), (3000, 2));
    assert_eq!(encode_dataset(&ae, &data).unwrap(), codes);
    // the round trip reproduces the recorded error
    let back = ae.decode(&codes).unwrap();
    let mse: f64 = data
        .iter()
        .zip(back.iter())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum::<f64>()
        / 3000.0;
    assert!((mse - hist.final_mse).abs() <= 1e-15 * mse.max(1.0));
}

#[test]
fn divergence_is_reported() {
    let data = PointCloud::from_rows(1, &[[1e300], [-1e300]]).unwrap();
    let arch = AeArchitecture::new(1, 1, vec![4]);
    let sched = AeSchedule { epochs: 5, ..AeSchedule::default() };
    assert!(matches!(
        train_autoencoder(&data, &arch, &sched, &RngStream::new(1, 0)),
        Err(aeotgan::Error::Diverged { .. })
    ));
}

#[test]
fn schedule_defaults() {
    let s = TrainSchedule::default();
    assert_eq!((s.lr_ratio, s.t_inner, s.beta, s.alpha_hidden, s.batch_size, s.epochs), (15.0, 3, 2000.0, 0.06, 64, 500));
    assert_eq!(s.lr_d(), 2e-5 / 15.0);
    assert_eq!(s.fake_ratio.paired(64).unwrap(), 16);
    let codes = PointCloud::from_rows(2, &[[3.0, 4.0], [0.0, 1.0]]).unwrap();
    // mean code norm (5 + 1)/2 = 3
    assert_eq!(s.alpha(3, &codes).unwrap(), vec![0.06, 0.06, 2.0 / 3.0]);
    for bad in [
        TrainSchedule { lr_ratio: 1.0, ..s.clone() },
        TrainSchedule { t_inner: 0, ..s.clone() },
        TrainSchedule { beta: -1.0, ..s.clone() },
        TrainSchedule { batch_size: 30, ..s.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn small_setup() -> (PointCloud, Autoencoder, ExtendedMap) {
    let data = mixture(40, 0.05, 4);
    let arch = AeArchitecture::new(2, 2, vec![16, 16]);
    let sched = AeSchedule { epochs: 30, batch_size: 16, ..AeSchedule::default() };
    let (ae, _) = train_autoencoder(&data, &arch, &sched, &RngStream::new(4, 0)).unwrap();
    let sampler = sampler_for(&encode_dataset(&ae, &data).unwrap());
    (data, ae, sampler)
}

#[test]
fn warm_start_reproduces_the_decoder() {
    let (data, ae, sampler) = small_setup();
    let sched = TrainSchedule { epochs: 0, batch_size: 16, ..TrainSchedule::default() };
    let (model, hist) = train_gan(&ae, &sampler, &data, &sched, &RngStream::new(1, 0)).unwrap();
    assert!(hist.is_empty());
    assert_eq!(model.generator, ae.decoder);
    let rng = RngStream::new(7, 7);
    let a = generate(&model, &sampler, 500, &rng).unwrap();
    let b = ae.decode(&sampler.sample_latent(500, &rng).unwrap()).unwrap();
    assert_eq!(a.as_flat(), b.as_flat());
    assert!(generate(&model, &sampler, 0, &rng).unwrap().is_empty());
}

#[test]
fn gan_training_is_deterministic_and_keeps_the_encoder() {
    let (data, ae, sampler) = small_setup();
    let sched = TrainSchedule { epochs: 3, batch_size: 16, lr_g: 1e-3, ..TrainSchedule::default() };
    let run = || train_gan(&ae, &sampler, &data, &sched, &RngStream::new(2, 0)).unwrap();
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);
    assert_eq!(h1.len(), 3);
    assert_eq!(h1.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(m1.frozen_encoder, ae.encoder);
    assert_ne!(m1.generator, ae.decoder);
    for r in &h1 {
        assert!(r.l_img >= 0.0 && r.l_feat >= 0.0 && r.l_adv_disc >= 0.0 && r.l_adv_gen >= 0.0);
        assert!(r.d_real_mean > 0.0 && r.d_real_mean < 1.0 && r.d_fake_mean > 0.0 && r.d_fake_mean < 1.0);
    }
    let rng = RngStream::new(3, 3);
    assert_eq!(generate(&m1, &sampler, 100, &rng).unwrap(), generate(&m2, &sampler, 100, &rng).unwrap());
}

#[test]
fn epoch_hook_sees_every_epoch_and_can_abort() {
    let (data, ae, sampler) = small_setup();
    let sched = TrainSchedule { epochs: 4, batch_size: 16, ..TrainSchedule::default() };
    let mut seen = Vec::new();
    let r = train_gan_with(&ae, &sampler, &data, &sched, &RngStream::new(2, 0), |_, row| {
        seen.push(row.epoch);
        if row.epoch == 2 {
            Err(aeotgan::Error::invalid("stop"))
        } else {
            Ok(())
        }
    });
    assert!(r.is_err());
    assert_eq!(seen, vec![0, 1, 2]);
}

#[test]
fn history_csv_round_trips() {
    let rows = vec![
        HistoryRow { epoch: 0, l_img: 0.1, l_feat: 1e-7, l_adv_disc: 1.38, l_adv_gen: 0.69, d_real_mean: 0.5, d_fake_mean: 0.49 },
        HistoryRow { epoch: 1, l_img: 1.0 / 3.0, l_feat: 0.0, l_adv_disc: 1.3, l_adv_gen: 0.7, d_real_mean: 0.51, d_fake_mean: 0.48 },
    ];
    let mut buf = Vec::new();
    write_history_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("epoch,L_img,L_feat,L_adv_disc,L_adv_gen,d_real_mean,d_fake_mean\n"));
    assert_eq!(read_history_csv(&buf[..]).unwrap(), rows);
    assert!(read_history_csv(&b"epoch,x\n"[..]).is_err());
}

#[test]
fn discriminator_gradient_matches_finite_differences() {
    let disc = tanh_net(&[2, 6, 5, 1], Activation::Sigmoid, 21);
    let mut r = RngStream::new(4, 4);
    let real = Matrix::new(7, 2, (0..14).map(|_| r.normal()).collect()).unwrap();
    let fake = Matrix::new(5, 2, (0..10).map(|_| r.normal()).collect()).unwrap();
    let (_, grads) = discriminator_objective(&disc, &real, &fake).unwrap();
    let h = 1e-6;
    for l in 0..disc.depth() {
        let nw = disc.layers()[l].weights.len();
        for k in 0..nw + disc.layers()[l].bias.len() {
            let analytic = if k < nw { grads.weights[l][k] } else { grads.biases[l][k - nw] };
            let (mut plus, mut minus) = (disc.clone(), disc.clone());
            *param(&mut plus, l, k) += h;
            *param(&mut minus, l, k) -= h;
            let numeric = (adversarial_losses(&plus, &real, &fake).unwrap().disc_loss
                - adversarial_losses(&minus, &real, &fake).unwrap().disc_loss)
                / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "layer {l} param {k}: {analytic} vs {numeric}");
        }
    }
}
