use attriflow::attribute_flow::{attribute_project, AttributeCode, SubspaceBank};
use attriflow::config::{ModelConfig, Task, Variant};
use attriflow::deformation::{Mode, Model};
use attriflow::geometry::{chamfer_l1, chamfer_l1_grad, chamfer_l2, chamfer_l2_grad, sample_sphere, Point, PointCloud};
use attriflow::image::Image;
use attriflow::nn::{Init, ParamStore};
use attriflow::synthgen::{generate_shape, make_partial, render_silhouette, AttributeSpec, Family, View};
use attriflow::training::{orthogonality_loss, total_loss, OrthForm};
use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max)
}

fn family_strategy() -> impl Strategy<Value = Family> {
    prop::sample::select(Family::ALL.to_vec())
}

fn tiny(variant: Variant, task: Task, zero_head: bool) -> ModelConfig {
    ModelConfig {
        task,
        variant,
        image_resolution: 32,
        encoder_channels: vec![4, 8],
        feature_dim: 16,
        point_hidden_dim: 8,
        point_feature_dim: 8,
        num_points: 32,
        channels: vec![6, 8, 10],
        code_dim: 4,
        k_neighbors: 4,
        head_hidden: 8,
        zero_init_head: zero_head,
        ..ModelConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, res: usize) -> Image {
    let pixels = (0..res * res).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    Image::new(res, pixels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chamfer_of_a_cloud_with_itself_is_zero(p in cloud_strategy(80)) {
        prop_assert_eq!(chamfer_l1(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(chamfer_l2(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_gradients_match_differences_on_8_points(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Point> {
            (0..8).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
        };
        let (p, q) = (pts(&mut rng), pts(&mut rng));
        // Unique assignments: skip draws whose best and second-best
        // neighbours are nearly tied, where a perturbation could flip them.
        let margin = |a: &[Point], b: &[Point]| {
            a.iter().map(|x| {
                let mut d: Vec<f64> = b.iter().map(|y| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum()).collect();
                d.sort_by(f64::total_cmp);
                d[1] - d[0]
            }).fold(f64::INFINITY, f64::min)
        };
        prop_assume!(margin(&p, &q) > 1e-6 && margin(&q, &p) > 1e-6);
        let h = 1e-7;
        for squared in [false, true] {
            let value = |a: &[Point], b: &[Point]| if squared { chamfer_l2(a, b) } else { chamfer_l1(a, b) }.unwrap();
            let grad = if squared { chamfer_l2_grad(&p, &q) } else { chamfer_l1_grad(&p, &q) }.unwrap();
            for i in 0..8 {
                for a in 0..3 {
                    let mut hi = p.clone();
                    let mut lo = p.clone();
                    hi[i][a] += h;
                    lo[i][a] -= h;
                    let fd = (value(&hi, &q) - value(&lo, &q)) / (2.0 * h);
                    let g = grad.grad_p[i][a];
                    prop_assert!((g - fd).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-4), "{g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn sphere_sampling_is_bit_deterministic(n in 1usize..500, seed in any::<u64>()) {
        let a = sample_sphere(n, seed).unwrap();
        let b = sample_sphere(n, seed).unwrap();
        let bits = |c: &PointCloud| c.to_flat_f64().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        prop_assert!(a.points().iter().all(|p| ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn rendering_ignores_point_order(family in family_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = AttributeSpec::sample(family, &mut rng);
        let cloud = generate_shape(&spec, 512, seed).unwrap();
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut rng);
        let a = render_silhouette(&cloud, View::default(), 32).unwrap();
        let b = render_silhouette(&cloud.permuted(&perm).unwrap(), View::default(), 32).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn partial_clouds_are_subsets(family in family_strategy(), seed in any::<u64>(), keep in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = AttributeSpec::sample(family, &mut rng);
        let cloud = generate_shape(&spec, 256, seed).unwrap();
        let dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3];
        let partial = make_partial(&cloud, dir, keep).unwrap();
        prop_assert!(partial.len() < cloud.len());
        for p in partial.points() {
            prop_assert!(cloud.points().contains(p));
        }
    }

    #[test]
    fn projection_is_affine_with_parseval_energy(seed in any::<u64>(), rows in 4usize..40, channels in 1usize..6, d in 1usize..12) {
        prop_assume!(d <= rows * channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F64, seed);
        let basis = store.create("u", &[rows * channels, d], Init::OrthonormalColumns).unwrap();
        let bias: Vec<f64> = (0..rows * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bank = SubspaceBank::from_tensors(
            basis,
            Tensor::ones(d, DType::F64, &Device::Cpu).unwrap(),
            Tensor::from_vec(bias.clone(), (rows, channels), &Device::Cpu).unwrap(),
        ).unwrap();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = attribute_project(&AttributeCode { stage: 1, values: z.clone() }, &bank).unwrap();
        let energy: f64 = s.values.iter().zip(&bias).map(|(s, b)| (s - b).powi(2)).sum();
        let want: f64 = z.iter().map(|x| x * x).sum();
        prop_assert!((energy - want).abs() <= 1e-5 * want.max(1e-12));
        // The zero code lands on the bias.
        let zero = attribute_project(&AttributeCode { stage: 1, values: vec![0.0; d] }, &bank).unwrap();
        prop_assert_eq!(zero.values, bias);
    }

    #[test]
    fn loss_decomposes_into_chamfer_and_penalty(seed in any::<u64>(), alpha in 0.0f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F64, seed);
        let bank = SubspaceBank::new(&mut store, "b", 16, 3, 5).unwrap();
        let noisy: Vec<f64> = bank.basis().flatten_all().unwrap().to_vec1::<f64>().unwrap().into_iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        store.set("b.basis", &Tensor::from_vec(noisy, (48, 5), &Device::Cpu).unwrap()).unwrap();
        let cloud = |rng: &mut ChaCha8Rng| PointCloud::new((0..20).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
        let (p, q) = (cloud(&mut rng), cloud(&mut rng));
        let banks = [&bank];
        let full = total_loss(&p, &q, &banks, alpha, OrthForm::Frobenius).unwrap();
        let cd = total_loss(&p, &q, &banks, 0.0, OrthForm::Frobenius).unwrap();
        let orth = orthogonality_loss(&banks, OrthForm::Frobenius).unwrap();
        prop_assert_eq!(cd, chamfer_l1(&p, &q).unwrap());
        prop_assert_eq!(full, cd + alpha * orth);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encoders_stay_finite_on_unit_cube_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(tiny(Variant::Full, Task::Reconstruction, false), seed, DType::F32).unwrap();
        let g = model.image_encoder().unwrap().encode(&random_image(&mut rng, 32)).unwrap();
        prop_assert!(g.values.iter().all(|v| v.is_finite()));

        let model = Model::new(tiny(Variant::Full, Task::Completion, false), seed, DType::F32).unwrap();
        let partial = PointCloud::new((0..40).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()).unwrap();
        let (g, f) = model.point_encoder().unwrap().encode(&partial, model.prior()).unwrap();
        prop_assert!(g.values.iter().chain(&f.values).all(|v| v.is_finite()));
        let out = model.forward_complete(&partial, Mode::Eval).unwrap();
        prop_assert!(out.cloud.to_flat_f64().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_head_reproduces_the_prior(seed in any::<u64>(), variant in prop::sample::select(Variant::ALL.to_vec())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(tiny(variant, Task::Reconstruction, true), seed, DType::F32).unwrap();
        let out = model.forward_reconstruct(&random_image(&mut rng, 32), Mode::Eval).unwrap();
        let prior = model.prior().to_flat_f32();
        prop_assert_eq!(out.cloud.to_flat_f32(), prior);
    }
}
