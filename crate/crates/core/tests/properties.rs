use nmsq_core::admm::{projection_step, regularizer_grad, regularizer_value};
use nmsq_core::codec::{decode, encode, pack, unpack};
use nmsq_core::quantize::{
    dequantize_value, quant_error, quantize_matrix, quantize_value, solve_scale_dist,
    solve_scale_max,
};
use nmsq_core::search::{
    bits_per_param, compression_ratio, enumerate_configs, flop_reduction, select_config,
};
use nmsq_core::ste::FakeQuantNode;
use nmsq_core::*;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f32>> {
    prop::collection::vec(-4.0f32..4.0, rows * cols)
        .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

/// Matrix with a random shape whose column count is a multiple of `n`.
fn shaped(n: usize) -> impl Strategy<Value = Matrix<f32>> {
    (1usize..6, 1usize..4).prop_flat_map(move |(r, g)| matrix(r, g * n))
}

fn pattern() -> impl Strategy<Value = NxMPattern> {
    prop_oneof![
        Just((4, 2)),
        Just((4, 1)),
        Just((6, 3)),
        Just((8, 4)),
        Just((8, 1))
    ]
    .prop_map(|(n, m)| NxMPattern::new(n, m).unwrap())
}

fn scheme() -> impl Strategy<Value = LayerScheme> {
    prop_oneof![
        Just(LayerScheme::Dense),
        (2u32..=8).prop_map(|bits| LayerScheme::Quant { bits }),
        (2u32..=8, pattern())
            .prop_map(|(bits, pattern)| LayerScheme::SparseQuant { bits, pattern }),
    ]
}

fn search_scheme() -> impl Strategy<Value = LayerScheme> {
    prop::sample::select(LayerScheme::DEFAULT_OPTIONS.to_vec())
}

fn config() -> impl Strategy<Value = EncoderConfig> {
    prop::array::uniform6(search_scheme()).prop_map(|s| EncoderConfig::new(s).unwrap())
}

/// Squared distance of the best support, by enumeration.
fn brute_force_dropped(group: &[f32], m: usize) -> f64 {
    let n = group.len();
    (0u32..1 << n)
        .filter(|b| b.count_ones() as usize == m)
        .map(|b| {
            (0..n)
                .filter(|i| b >> i & 1 == 0)
                .map(|i| (group[i] as f64).powi(2))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn nxm_projection_is_optimal_and_consistent((p, w) in pattern().prop_flat_map(|p| (Just(p), shaped(p.n())))) {
        let (value, mask) = nxm_project(&w, p).unwrap();
        prop_assert_eq!(&apply_mask(&w, &mask).unwrap(), &value);
        prop_assert_eq!(&nxm_project(&value, p).unwrap().0, &value);
        prop_assert!(satisfies(&value, &ConstraintSet::sparse(p)).is_ok());
        for r in 0..w.rows() {
            for g in 0..w.cols() / p.n() {
                let range = g * p.n()..(g + 1) * p.n();
                prop_assert_eq!(range.clone().filter(|&c| mask.get(r, c)).count(), p.m());
                let group = &w.row(r)[range.clone()];
                let dropped: f64 = range.filter(|&c| !mask.get(r, c)).map(|c| (w.get(r, c) as f64).powi(2)).sum();
                prop_assert!((dropped - brute_force_dropped(group, p.m())).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn round_trip_error_is_at_most_half_a_step(x in -100.0f64..100.0, s in 0.01f64..10.0, bits in 2u32..=16) {
        let spec = QuantSpec::new(bits, 0).unwrap();
        let code = quantize_value(x, s, spec).unwrap();
        prop_assert!(code >= spec.qmin() && code <= spec.qmax());
        if (x / s).abs() <= spec.qmax() as f64 {
            prop_assert!((dequantize_value(code, s) - x).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn scale_solvers_are_ordered(group in prop::collection::vec(-3.0f64..3.0, 1..40), bits in 2u32..=8) {
        let spec = QuantSpec::new(bits, 0).unwrap();
        prop_assume!(group.iter().any(|x| *x != 0.0));
        let s_max = solve_scale_max(&group, spec).unwrap();
        let s_dist = solve_scale_dist(&group, spec).unwrap();
        let big = group.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!((s_max * spec.qmax() as f64 - big).abs() <= 1e-12 * big);
        prop_assert!(quant_error(&group, s_dist, spec) <= quant_error(&group, s_max, spec) * (1.0 + 1e-12));
    }

    #[test]
    fn projections_are_feasible_and_max_projection_is_idempotent(
        (p, v) in pattern().prop_flat_map(|p| (Just(p), shaped(p.n()))),
        bits in 2u32..=8,
        group_size in 0usize..4,
        dist in any::<bool>(),
    ) {
        let spec = QuantSpec::new(bits, group_size).unwrap();
        let solver = if dist { ScaleSolver::Dist } else { ScaleSolver::Max };
        for cs in [ConstraintSet::quant(spec, solver), ConstraintSet::fused(p, spec, solver)] {
            let out = euclidean_project(&v, &cs).unwrap();
            prop_assert!(satisfies(&out.value, &cs).is_ok());
        }
        let cs = ConstraintSet::fused(p, spec, ScaleSolver::Max);
        let once = euclidean_project(&v, &cs).unwrap().value;
        prop_assert_eq!(&euclidean_project(&once, &cs).unwrap().value, &once);
    }

    #[test]
    fn ste_gradient_is_the_unclamped_mask((w, up) in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))), bits in 2u32..=8) {
        let spec = QuantSpec::new(bits, 2).unwrap();
        let mut node = FakeQuantNode::new(spec);
        let fq = node.forward(&w);
        prop_assert_eq!(&node.forward_frozen(&fq).unwrap(), &fq);
        // Weights that moved past the cached scales since the forward pass.
        let moved = w.map(|x| x * 3.0);
        let g = node.backward(&up, &moved).unwrap();
        let cols = w.cols();
        for (i, (gi, ui)) in g.as_slice().iter().zip(up.as_slice()).enumerate() {
            let s = node.scales()[i / cols / 2];
            let code = (moved.as_slice()[i] / s).round();
            let inside = code >= spec.qmin() as f32 && code <= spec.qmax() as f32;
            prop_assert_eq!(*gi, if inside { *ui } else { 0.0 });
        }
    }

    #[test]
    fn admm_projection_is_feasible_and_regularizer_has_matching_gradient(
        w in matrix(4, 8), u in matrix(4, 8), rho in 1e-3f64..10.0, bits in 2u32..=8,
    ) {
        let cs = ConstraintSet::fused(NxMPattern::four_two(), QuantSpec::new(bits, 2).unwrap(), ScaleSolver::Dist);
        let (w, u) = (w.cast::<f64>(), u.cast::<f64>());
        let mut s = AdmmLayerState::from_parts(w.clone(), Matrix::zeros(4, 8), u, rho, cs).unwrap();
        projection_step(&mut s).unwrap();
        prop_assert!(satisfies(&s.z, &cs).is_ok());
        let grad = regularizer_grad(&s);
        for i in [0, 13, 31] {
            let x = s.w.as_slice()[i];
            let h = 1e-4 * (1.0 + x.abs());
            s.w.as_mut_slice()[i] = x + h;
            let up = regularizer_value(&s);
            s.w.as_mut_slice()[i] = x - h;
            let down = regularizer_value(&s);
            s.w.as_mut_slice()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.as_slice()[i];
            prop_assert!((numeric - analytic).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-6));
        }
    }

    #[test]
    fn codec_round_trip_is_bit_exact(s in scheme(), rows in 1usize..10, groups in 1usize..4, gs in 0usize..5, seed in any::<u64>()) {
        let n = s.pattern().map_or(4, |p| p.n());
        let mut rng = nmsq_core::Rng::new(seed);
        let v = Matrix::<f32>::from_fn(rows, groups * n, |_, _| rng.normal() as f32);
        let w = match s.constraint(gs, ScaleSolver::Dist).unwrap() {
            Some(cs) => euclidean_project(&v, &cs).unwrap().value,
            None => v,
        };
        let t = pack("w", &w, s, gs).unwrap();
        let bytes = encode(std::slice::from_ref(&t)).unwrap();
        prop_assert_eq!(&encode(std::slice::from_ref(&t)).unwrap(), &bytes);
        let back = decode(&bytes).unwrap();
        let u = unpack(&back[0]).unwrap();
        prop_assert!(u.as_slice().iter().zip(w.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn fewer_bits_never_lower_the_ratio(c in config(), slot in 0usize..6) {
        let mut schemes = *c.schemes();
        let cheaper = match schemes[slot] {
            LayerScheme::Quant { .. } => LayerScheme::Q4,
            LayerScheme::SparseQuant { .. } => LayerScheme::SPARSE_Q4,
            d => d,
        };
        schemes[slot] = cheaper;
        let c2 = EncoderConfig::new(schemes).unwrap();
        for mode in [CostMode::PayloadOnly, CostMode::WithMetadata] {
            prop_assert!(compression_ratio(&c2, mode) >= compression_ratio(&c, mode));
        }
    }

    #[test]
    fn metadata_only_adds_cost(s in scheme(), c in config()) {
        prop_assert!(bits_per_param(s, CostMode::PayloadOnly) <= bits_per_param(s, CostMode::WithMetadata));
        prop_assert!(compression_ratio(&c, CostMode::PayloadOnly) >= compression_ratio(&c, CostMode::WithMetadata));
    }

    #[test]
    fn flop_reduction_ignores_bit_width(c in config()) {
        let widened = c.schemes().map(|s| match s {
            LayerScheme::Quant { .. } => LayerScheme::Q8,
            LayerScheme::SparseQuant { pattern, .. } => LayerScheme::SparseQuant { bits: 8, pattern },
            d => d,
        });
        prop_assert_eq!(flop_reduction(&EncoderConfig::new(widened).unwrap()), flop_reduction(&c));
    }

    #[test]
    fn enumeration_shrinks_as_the_constraint_tightens(a in 0.80f64..0.906, b in 0.80f64..0.95) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let loose = enumerate_configs(&SearchParams { constraint: lo, ..SearchParams::default() }).unwrap();
        match enumerate_configs(&SearchParams { constraint: hi, ..SearchParams::default() }) {
            Ok(tight) => prop_assert!(tight.iter().all(|c| loose.contains(c))),
            Err(Error::UnattainableConstraint(_)) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
        for c in &loose {
            prop_assert!(compression_ratio(c, CostMode::WithMetadata) >= search::Rational::approximate_float(lo).unwrap());
        }
    }

    #[test]
    fn selection_comes_from_the_top_k(hs in prop::collection::vec(0.0f64..1.0, 1..30), k in 1usize..12, seed in any::<u64>()) {
        let all = enumerate_configs(&SearchParams::default()).unwrap();
        let mut rng = nmsq_core::Rng::new(seed);
        let scored: Vec<ScoredConfig> = hs.iter().map(|&h| ScoredConfig::new(all[rng.below(all.len())], h)).collect();
        let p = SearchParams { k, ..SearchParams::default() };
        let chosen = select_config(&p, &scored).unwrap();
        let mut sorted: Vec<f64> = hs.clone();
        sorted.sort_by(f64::total_cmp);
        let cutoff = sorted[k.min(sorted.len()) - 1];
        prop_assert!(chosen.heuristic <= cutoff);
        let top_flops = scored.iter().filter(|s| s.heuristic < cutoff).map(|s| s.flop_reduction).fold(0.0, f64::max);
        prop_assert!(chosen.flop_reduction >= top_flops);
    }

    #[test]
    fn quantized_groups_share_one_scale(w in matrix(6, 4), gs in 0usize..7) {
        let spec = QuantSpec::new(4, gs).unwrap();
        let q = quantize_matrix(&w, spec, ScaleSolver::Max).unwrap();
        prop_assert_eq!(q.groups.len(), spec.num_groups(6));
        for (g, range) in q.groups.iter().zip(spec.row_groups(6)) {
            for (k, &code) in g.codes.iter().enumerate() {
                let (r, c) = (range.start + k / 4, k % 4);
                prop_assert_eq!(q.dequantized.get(r, c), g.scale * code as f32);
            }
        }
    }
}
