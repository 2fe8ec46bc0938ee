use oopk_core::adapter::{orth_loss, AdaptedLayer, LayerKind, LowRankAdapter};
use oopk_core::checkpoint;
use oopk_core::engine::ema_update;
use oopk_core::exec::Exec;
use oopk_core::masking::{apply_mask, Fill, MaskSpec};
use oopk_core::metrics::ConfusionMatrix;
use oopk_core::nn::{ParamStore, Parameter};
use oopk_core::pnm::{decode_ppm, encode_ppm};
use oopk_core::rng;
use oopk_core::synth::{build_stream, corrupt, default_domains, gen_scene, CorruptionKind, CorruptionSpec, DomainStream};
use oopk_core::tensor::{matmul, resize, softmax_axis, ResizeMode, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn labels(n: usize, k: u8) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..k, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(t in tensor(vec![4, 3, 5]), axis in 0usize..3) {
        let s = softmax_axis(&t, axis).unwrap();
        let shape = t.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..shape[axis]).map(|a| s.data()[(o * shape[axis] + a) * inner + i]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(s.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn nearest_upsample_then_downsample_is_identity(t in tensor(vec![2, 3, 4]), f in 1usize..4) {
        let up = resize(&t, 3 * f, 4 * f, ResizeMode::Nearest).unwrap();
        let down = resize(&up, 3, 4, ResizeMode::Nearest).unwrap();
        prop_assert_eq!(down.data(), t.data());
    }

    #[test]
    fn bilinear_preserves_constants(c in -3.0f64..3.0, h in 2usize..9, w in 2usize..9) {
        let t = Tensor::full(&[1, 4, 6], c);
        let r = resize(&t, h, w, ResizeMode::Bilinear).unwrap();
        prop_assert!(r.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn iou_never_exceeds_accuracy(pred in labels(40, 4), gt in labels(40, 4)) {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&pred, &gt).unwrap();
        for (iou, acc) in cm.per_class_iou().into_iter().zip(cm.per_class_acc()) {
            if let (Some(i), Some(a)) = (iou, acc) {
                prop_assert!(i <= a + 1e-15);
            }
        }
    }

    #[test]
    fn metrics_invariant_under_relabeling(pred in labels(30, 5), gt in labels(30, 5), shift in 1u8..5) {
        let perm = |v: &[u8]| v.iter().map(|&c| (c + shift) % 5).collect::<Vec<u8>>();
        let (mut a, mut b) = (ConfusionMatrix::new(5), ConfusionMatrix::new(5));
        a.update(&pred, &gt).unwrap();
        b.update(&perm(&pred), &perm(&gt)).unwrap();
        prop_assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-12);
        prop_assert!((a.macc().unwrap() - b.macc().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn confusion_matrices_add_over_partitions(pred in labels(50, 3), gt in labels(50, 3), cut in 0usize..50) {
        let mut whole = ConfusionMatrix::new(3);
        whole.update(&pred, &gt).unwrap();
        let (mut l, mut r) = (ConfusionMatrix::new(3), ConfusionMatrix::new(3));
        l.update(&pred[..cut], &gt[..cut]).unwrap();
        r.update(&pred[cut..], &gt[cut..]).unwrap();
        l.merge(&r).unwrap();
        prop_assert_eq!(l, whole);
    }

    #[test]
    fn masks_touch_only_masked_pixels(seed in any::<u64>(), ratio in 0.0f64..=1.0, fill in 0u8..3) {
        let fill = [Fill::Zero, Fill::Max, Fill::Alternate][fill as usize];
        let spec = MaskSpec::new(8, ratio, fill).unwrap();
        let mut r = rng::substream(seed, "prop-mask", &[]);
        let m = spec.draw(16, 24, &mut r).unwrap();
        let x = gen_scene(seed, 16, 24, 3).unwrap().image;
        let v = fill.value_at(seed % 2);
        let y = apply_mask(&x, &m, v).unwrap();
        for c in 0..3 {
            for p in 0..16 * 24 {
                let (a, b) = (x.data()[c * 384 + p], y.data()[c * 384 + p]);
                prop_assert_eq!(b, if m.upscaled[p] == 0 { v } else { a });
            }
        }
        let masked_cells = m.grid.iter().filter(|&&g| g == 0).count();
        prop_assert!((m.masked_fraction() - masked_cells as f64 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn orth_loss_is_nonnegative(b in tensor(vec![5, 2]), a in tensor(vec![2, 3])) {
        let l = orth_loss(&LowRankAdapter { a, b }).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn linear_merge_matches_two_path_forward(
        w in tensor(vec![4, 3]), a in tensor(vec![2, 3]), b in tensor(vec![4, 2]), x in tensor(vec![3])
    ) {
        let mut store = ParamStore::new();
        let mut layer = AdaptedLayer::register(&mut store, "l", LayerKind::Linear, w, None).unwrap();
        let a_id = store.add(Parameter::new("l.lora_a", a, true));
        let b_id = store.add(Parameter::new("l.lora_b", b, true));
        layer.adapter = Some(oopk_core::adapter::AdapterSlot { a: a_id, b: b_id, rank: 2 });
        let y = layer.forward_vec(&store, &x).unwrap();
        let merged = layer.merged_weight(&store).unwrap();
        let ym = matmul(&merged, &x.clone().reshape(vec![3, 1]).unwrap()).unwrap();
        prop_assert!(y.max_abs_diff(&ym.reshape(vec![4]).unwrap()) < 1e-9);
    }

    #[test]
    fn checkpoints_round_trip(t in tensor(vec![3, 2, 2]), name in "[a-z][a-z0-9_.]{0,12}") {
        let back = checkpoint::decode(&checkpoint::encode(&[(name.clone(), t.clone())])).unwrap();
        prop_assert_eq!(&back[0].0, &name);
        prop_assert_eq!(back[0].1.data(), t.data());
    }

    #[test]
    fn ppm_round_trip_within_quantization(seed in any::<u64>()) {
        let x = gen_scene(seed, 16, 20, 4).unwrap().image;
        let y = decode_ppm(&encode_ppm(&x).unwrap()).unwrap();
        prop_assert!(x.max_abs_diff(&y) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn corruptions_stay_in_range(seed in any::<u64>(), kind in 0usize..4, severity in 0.0f64..=1.0) {
        let kind = [CorruptionKind::Fog, CorruptionKind::Dark, CorruptionKind::Noise, CorruptionKind::Blur][kind];
        let x = gen_scene(seed, 16, 16, 3).unwrap().image;
        let y = corrupt(&x, &CorruptionSpec { kind, severity, seed }).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let id = corrupt(&x, &CorruptionSpec { kind, severity: 0.0, seed }).unwrap();
        prop_assert_eq!(id.data(), x.data());
    }

    #[test]
    fn ema_contracts_geometrically(beta in 0.0f64..1.0, n in 1i32..30) {
        let (mut t, mut s) = (ParamStore::new(), ParamStore::new());
        t.add(Parameter::new("p", Tensor::full(&[3], 1.0), true));
        s.add(Parameter::new("p", Tensor::full(&[3], -1.0), true));
        for _ in 0..n {
            ema_update(&mut t, &s, beta).unwrap();
        }
        let d: f64 = t.iter().next().unwrap().1.value.data()[0] + 1.0;
        prop_assert!((d - 2.0 * beta.powi(n)).abs() < 1e-12);
    }
}

#[test]
fn dark_and_noise_are_monotone_in_severity() {
    let x = gen_scene(3, 32, 32, 5).unwrap().image;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
    let mse = |t: &Tensor| t.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64;
    let (mut last_mean, mut last_mse) = (f64::INFINITY, -1.0);
    for i in 0..20 {
        let severity = i as f64 / 19.0;
        let d = corrupt(&x, &CorruptionSpec { kind: CorruptionKind::Dark, severity, seed: 1 }).unwrap();
        assert!(mean(&d) <= last_mean);
        last_mean = mean(&d);
        // averaged over noise draws
        let m = (0..20)
            .map(|s| mse(&corrupt(&x, &CorruptionSpec { kind: CorruptionKind::Noise, severity, seed: s }).unwrap()))
            .sum::<f64>()
            / 20.0;
        assert!(m >= last_mse, "severity {severity}: {m} < {last_mse}");
        last_mse = m;
    }
}

#[test]
fn manifest_round_trips_byte_identically() {
    let s = build_stream(&default_domains(), 3, 2, 42).unwrap();
    let text = s.to_manifest();
    let back = DomainStream::parse_manifest(&text).unwrap();
    assert_eq!(back.to_manifest(), text);
    assert_eq!(back, s);
}

#[test]
fn sequential_and_parallel_agree() {
    let f = |i: usize| gen_scene(i as u64, 16, 16, 3).unwrap().image.data().iter().sum::<f64>();
    assert_eq!(Exec::Sequential.map_range(12, f), Exec::Parallel.map_range(12, f));
}
