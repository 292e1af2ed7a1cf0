use proptest::prelude::*;
use xvol::analyze::{
    alignment_metrics, count_flops, count_params, mann_whitney_exact, mann_whitney_u, REFERENCE_MODELS,
};
use xvol::net::{build_model, ArchitectureSpec, ModelVariant, PLACEMENT_SWEEP};

const WIDEFIELD_DIMS: [usize; 3] = [128, 192, 112];

#[test]
fn base_parameter_totals() {
    let spec = ArchitectureSpec::new(ModelVariant::Base);
    let r = count_params(&spec).unwrap();
    assert_eq!(r.conv_params, 222_080);
    assert_eq!(r.total_params, 222_466);
    let m = build_model::<f32>(&spec, 0).unwrap();
    assert_eq!(m.param_count() as u64, r.total_params);
}

#[test]
fn symbolic_matches_instantiated_for_every_variant_and_placement() {
    for v in [ModelVariant::H, ModelVariant::NA, ModelVariant::HNA] {
        for pl in PLACEMENT_SWEEP {
            let spec = ArchitectureSpec::new(v).with_placement(&pl);
            let sym = count_params(&spec).unwrap().total_params;
            let inst = build_model::<f32>(&spec, 1).unwrap().param_count() as u64;
            assert_eq!(sym, inst, "{v} {pl:?}");
            assert!((230_000..=300_000).contains(&sym), "{v} {pl:?}: {sym}");
        }
    }
}

#[test]
fn totals_are_sums_of_parts() {
    let r = count_flops(&ArchitectureSpec::new(ModelVariant::HNA), WIDEFIELD_DIMS).unwrap();
    assert_eq!(r.total_params, r.layers.iter().map(|l| l.params).sum::<u64>());
    assert_eq!(r.total_flops, r.layers.iter().map(|l| l.flops).sum::<u64>());
}

#[test]
fn zero_layer_spec_counts_nothing() {
    let mut spec = ArchitectureSpec::new(ModelVariant::Base);
    spec.filters.clear();
    spec.kernels.clear();
    spec.strides.clear();
    assert_eq!(count_params(&spec).unwrap().total_params, 0);
}

/// Independent hand formula for the default five-block stack.
fn hand_flops(dims: [usize; 3], attention: &[(usize, u64)]) -> u64 {
    let ks = [7u64, 5, 3, 3, 3];
    let mut d = dims.map(|x| x as u64);
    let mut cin = 1u64;
    let mut total = 0;
    for (i, &k) in ks.iter().enumerate() {
        if i == 0 {
            d = d.map(|x| (x + 2 * (k / 2) - k) / 2 + 1);
        }
        let n = d[0] * d[1] * d[2];
        total += 2 * cin * k * k * k * 32 * n;
        cin = 32;
        if let Some(&(_, per_c2n)) = attention.iter().find(|(at, _)| *at == i + 1) {
            total += per_c2n * 32 * 32 * n;
            d = d.map(|x| x / 2);
        }
    }
    total + 2 * 32 * 2
}

#[test]
fn base_flops_at_widefield_dims() {
    let r = count_flops(&ArchitectureSpec::new(ModelVariant::Base), WIDEFIELD_DIMS).unwrap();
    assert_eq!(r.total_flops, hand_flops(WIDEFIELD_DIMS, &[]));
    assert!((r.gflops() - 152.941).abs() / 152.941 < 0.01, "{}", r.gflops());
}

#[test]
fn attention_variant_flops_at_widefield_dims() {
    // shared projections: 3 convs + 2 attention products + refine = 12 C^2 N
    let h = count_flops(&ArchitectureSpec::new(ModelVariant::H), WIDEFIELD_DIMS).unwrap();
    assert_eq!(h.total_flops, hand_flops(WIDEFIELD_DIMS, &[(2, 12), (4, 12)]));
    assert!((100.0..=112.0).contains(&h.gflops()), "{}", h.gflops());
    let na = count_flops(&ArchitectureSpec::new(ModelVariant::NA), WIDEFIELD_DIMS).unwrap();
    assert_eq!(na.total_flops, h.total_flops);
    // two pairings: 2 * (6 + 4) + 2 = 22 C^2 N
    let hna = count_flops(&ArchitectureSpec::new(ModelVariant::HNA), WIDEFIELD_DIMS).unwrap();
    assert_eq!(hna.total_flops, hand_flops(WIDEFIELD_DIMS, &[(2, 22), (4, 22)]));
}

#[test]
fn unit_volume_is_kernel_dominated() {
    let r = count_flops(&ArchitectureSpec::new(ModelVariant::Base), [1, 1, 1]).unwrap();
    let hand = 2 * 343 * 32 + 2 * 32 * 125 * 32 + 3 * (2 * 32 * 27 * 32) + 128;
    assert_eq!(r.total_flops, hand);
}

#[test]
fn stride_one_flops_scale_with_width() {
    let mut spec = ArchitectureSpec::new(ModelVariant::Base);
    spec.strides = vec![1; 5];
    let conv = |w| {
        count_flops(&spec, [8, 8, w])
            .unwrap()
            .layers
            .iter()
            .filter(|l| l.layer.starts_with("conv"))
            .map(|l| l.flops)
            .sum::<u64>()
    };
    assert_eq!(conv(16), 2 * conv(8));
}

#[test]
fn incompatible_dims_are_reported() {
    assert!(count_flops(&ArchitectureSpec::new(ModelVariant::HNA), [32, 48, 28]).is_err());
}

#[test]
fn csv_has_expected_header_and_total() {
    let r = count_flops(&ArchitectureSpec::new(ModelVariant::Base), WIDEFIELD_DIMS).unwrap();
    let csv = r.to_csv().unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "layer,params,flops");
    assert_eq!(lines.last().unwrap(), &format!("total,222466,{}", r.total_flops));
    assert_eq!(REFERENCE_MODELS.len(), 6);
}

// ---------- alignment ----------

#[test]
fn uniform_heatmap_has_unit_enrichment() {
    let care = vec![0.4; 100];
    let mask: Vec<bool> = (0..100).map(|i| i % 7 == 0).collect();
    let m = alignment_metrics(&care, &mask, 75.0).unwrap();
    assert!((m.enrichment - 1.0).abs() < 1e-12, "{}", m.enrichment);
    // nothing is strictly above a constant threshold
    assert_eq!(m.mask_coverage, 0.0);
}

#[test]
fn hot_region_inside_mask_has_full_care_coverage() {
    let care: Vec<f64> = (0..40).map(|i| if i < 5 { 1.0 } else { (i % 3) as f64 * 0.1 }).collect();
    let mask: Vec<bool> = (0..40).map(|i| i < 12).collect();
    let m = alignment_metrics(&care, &mask, 75.0).unwrap();
    assert_eq!(m.care_coverage, 1.0);
}

#[test]
fn tenfold_enrichment_construction() {
    let care: Vec<f64> = (0..1000).map(|i| if i % 10 == 0 { 1.0 } else { 0.1f32 as f64 }).collect();
    let mask: Vec<bool> = (0..1000).map(|i| i % 10 == 0).collect();
    let m = alignment_metrics(&care, &mask, 75.0).unwrap();
    assert_eq!(m.mask_coverage, 1.0);
    assert_eq!(m.care_coverage, 1.0);
    assert_eq!(m.enrichment, 1.0 / (0.1f32 as f64));
    assert!((m.enrichment - 10.0).abs() < 1e-6);
}

#[test]
fn scaling_care_scales_threshold_only() {
    let care: Vec<f64> = (0..60).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
    let mask: Vec<bool> = (0..60).map(|i| i % 4 == 1).collect();
    let a = alignment_metrics(&care, &mask, 75.0).unwrap();
    let scaled: Vec<f64> = care.iter().map(|c| c * 4.0).collect();
    let b = alignment_metrics(&scaled, &mask, 75.0).unwrap();
    assert_eq!(a.mask_coverage, b.mask_coverage);
    assert_eq!(a.care_coverage, b.care_coverage);
    assert_eq!(b.threshold, 4.0 * a.threshold);
    assert!((a.enrichment - b.enrichment).abs() < 1e-12);
}

#[test]
fn degenerate_masks_are_errors() {
    let care = vec![0.5; 8];
    assert!(alignment_metrics(&care, &[false; 8], 75.0).is_err());
    assert!(alignment_metrics(&care, &[true; 8], 75.0).is_err());
    assert!(alignment_metrics(&care, &[true; 7], 75.0).is_err());
}

// ---------- Mann-Whitney ----------

#[test]
fn separated_triples() {
    let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
    assert_eq!(r.u, 0.0);
    assert!(r.exact);
    assert_eq!(r.p, 0.1);
}

#[test]
fn identical_samples_are_not_separated() {
    let a = [0.8, 0.82, 0.85, 0.9, 0.91];
    let r = mann_whitney_u(&a, &a).unwrap();
    assert!(r.p >= 0.9, "{}", r.p);
    assert_eq!(r.u, 12.5);
}

#[test]
fn large_samples_use_normal_approximation() {
    let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..10).map(|i| i as f64 + 0.5).collect();
    let r = mann_whitney_u(&a, &b).unwrap();
    assert!(!r.exact);
    assert!(r.p > 0.5 && r.p <= 1.0);
}

#[test]
fn empty_sample_is_error() {
    assert!(mann_whitney_u(&[], &[1.0]).is_err());
}

/// Brute-force permutation oracle on raw values with pairwise `U`.
fn brute_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let u = |set: u32| {
        let mut s = 0.0;
        for i in (0..n).filter(|i| set >> i & 1 == 1) {
            for j in (0..n).filter(|j| set >> j & 1 == 0) {
                s += if pooled[i] > pooled[j] {
                    1.0
                } else if pooled[i] == pooled[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s
    };
    let centre = (a.len() * b.len()) as f64 / 2.0;
    let obs = (u((1 << a.len()) - 1) - centre).abs();
    let (mut hit, mut tot) = (0, 0);
    for set in 0u32..(1 << n) {
        if set.count_ones() as usize == a.len() {
            tot += 1;
            if (u(set) - centre).abs() >= obs - 1e-9 {
                hit += 1;
            }
        }
    }
    hit as f64 / tot as f64
}

proptest! {
    #[test]
    fn exact_p_matches_brute_force(a in prop::collection::vec(0u8..6, 1..6), b in prop::collection::vec(0u8..6, 1..6)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let p = mann_whitney_exact(&a, &b);
        prop_assert!((p - brute_p(&a, &b)).abs() < 1e-12);
        let swapped = mann_whitney_u(&b, &a).unwrap();
        prop_assert_eq!(mann_whitney_u(&a, &b).unwrap().p, swapped.p);
    }
}
