use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma};
use proptest::prelude::*;
use serde_json::json;
use slideseg_core::classes::NUM_CLASSES;
use slideseg_core::metrics::{confusion, segmentation_metrics};
use slideseg_core::refiner::BridgeSchedule;
use slideseg_core::tensor_file::{TensorFile, TensorRecord};
use slideseg_core::tiling::{
    assemble_coarse_mask, merge_regions, split_labels_into_regions, LabelMap, PatchGrid, ProbMask,
};

fn labels(w: u32, h: u32, data: &[u8]) -> LabelMap {
    GrayImage::from_fn(w, h, |x, y| {
        Luma([data[(y * w + x) as usize % data.len()] % NUM_CLASSES as u8])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn one_hot_regions_merge_back_to_the_raster(
        w in 1u32..150,
        h in 1u32..150,
        region in prop::sample::select(vec![16usize, 32, 64]),
        data in prop::collection::vec(0u8..7, 1..64),
    ) {
        let raster = labels(w, h, &data);
        let (grid, regions) = split_labels_into_regions(&raster, (region, region)).unwrap();
        prop_assert_eq!(regions.len(), grid.n_regions);
        let masks: Vec<ProbMask> =
            regions.iter().map(|r| ProbMask::one_hot(r, DType::F32, &Device::Cpu).unwrap()).collect();
        let merged = merge_regions(&masks, &grid).unwrap();
        prop_assert_eq!(merged, raster);
    }

    #[test]
    fn coarse_masks_stay_on_the_simplex(
        k in 1usize..4,
        raw in prop::collection::vec(prop::collection::vec(0.01f32..1.0, NUM_CLASSES), 64),
    ) {
        let side = 8 << (k - 1);
        let grid = PatchGrid::new((side, side), (8, 8)).unwrap();
        let probs: Vec<Vec<f32>> = raw
            .iter()
            .take(grid.n_patches)
            .map(|v| {
                let s: f32 = v.iter().sum();
                v.iter().map(|x| x / s).collect()
            })
            .collect();
        prop_assume!(probs.len() == grid.n_patches);
        let mask = assemble_coarse_mask(&probs, &grid).unwrap();
        mask.check_simplex(1e-6).unwrap();
        let am = mask.argmax().unwrap();
        for (p, &(r0, c0)) in probs.iter().zip(&grid.coords) {
            let best = p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b });
            prop_assert_eq!(am.get_pixel(c0 as u32, r0 as u32)[0] as usize, best);
        }
    }

    #[test]
    fn posterior_preserves_the_bridge_marginals(
        steps in 2usize..300,
        s in 0.1f64..3.0,
        a in 0.0f64..=1.0,
        b in 0.0f64..1.0,
    ) {
        let sched = BridgeSchedule::new(steps, s).unwrap();
        let t = 1 + ((steps - 1) as f64 * a) as usize;
        let r = ((t as f64) * b) as usize;
        let r = r.min(t - 1);
        let marg = |u: usize| {
            let m = u as f64 / steps as f64;
            (1.0 - m, m, 2.0 * s * (m - m * m))
        };
        let (at, bt, dt) = marg(t);
        let (ar, br, dr) = marg(r);
        let p = sched.posterior(r, t).unwrap();
        prop_assert!(p.var >= 0.0);
        // Mean weights on x0 and y, then total variance, after composing.
        prop_assert!((p.c_xt * at + p.c_x0 - ar).abs() < 1e-12);
        prop_assert!((p.c_xt * bt + p.c_y - br).abs() < 1e-12);
        prop_assert!((p.c_xt * p.c_xt * dt + p.var - dr).abs() < 1e-12);
        prop_assert!(sched.delta.iter().all(|d| *d >= 0.0));
        prop_assert!(sched.delta_tilde.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn subsequences_descend_from_the_last_step_to_zero(steps in 2usize..400, frac in 0.0f64..1.0) {
        let sched = BridgeSchedule::new(steps, 1.0).unwrap();
        let n = 1 + ((steps - 1) as f64 * frac) as usize;
        let seq = sched.subsequence(n).unwrap();
        prop_assert_eq!(seq.len(), n + 1);
        prop_assert_eq!(seq[0], steps);
        prop_assert_eq!(*seq.last().unwrap(), 0);
        prop_assert!(seq.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn metric_bounds(
        w in 1u32..20,
        h in 1u32..20,
        a in prop::collection::vec(0u8..7, 1..50),
        b in prop::collection::vec(0u8..7, 1..50),
    ) {
        let pred = labels(w, h, &a);
        let gt = labels(w, h, &b);
        let cm = confusion(&pred, &gt).unwrap();
        prop_assert_eq!(cm.total(), (w * h) as u64);
        let m = segmentation_metrics(&cm).unwrap();
        for v in [m.miou, m.precision, m.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let perfect = segmentation_metrics(&confusion(&gt, &gt).unwrap()).unwrap();
        prop_assert_eq!(perfect.miou, 1.0);
        prop_assert_eq!(perfect.precision, 1.0);
        prop_assert_eq!(perfect.recall, 1.0);
    }

    #[test]
    fn tensor_files_round_trip_bit_exactly(
        dims in prop::collection::vec(1usize..5, 1..4),
        vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 64),
        frozen in any::<bool>(),
    ) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| vals[i % vals.len()]).collect();
        let t64 = Tensor::from_vec(data.clone(), dims.clone(), &Device::Cpu).unwrap();
        let t32 = t64.to_dtype(DType::F32).unwrap();
        let mut file = TensorFile::new(json!({ "note": "x" }));
        file.push(TensorRecord::new("a", t64).frozen(frozen));
        file.push(TensorRecord::new("b", t32.clone()).adapter_of("a"));
        let back = TensorFile::from_bytes(&file.to_bytes().unwrap()).unwrap();
        let a: Vec<u64> =
            back.tensor("a").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let b = back.tensor("b").unwrap();
        prop_assert_eq!(b.dims(), dims.as_slice());
        prop_assert_eq!(
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            t32.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        prop_assert_eq!(back.get("a").unwrap().frozen, frozen);
        prop_assert_eq!(back.get("b").unwrap().adapter_of.as_deref(), Some("a"));
        prop_assert_eq!(&back.meta, &file.meta);
    }
}
