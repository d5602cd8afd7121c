//! Fast oracle checks run by `nmsq selftest`.

use std::time::Instant;

use crate::admm::{dual_update, projection_step, AdmmLayerState};
use crate::codec::{decode, encode, pack, unpack};
use crate::matrix::Matrix;
use crate::microformer::{check_gradients, check_ste_gradients, Example, Geometry, MicroModel};
use crate::project::{euclidean_project, satisfies, ConstraintSet};
use crate::quantize::{quant_error, solve_scale_dist, solve_scale_max, QuantSpec, ScaleSolver};
use crate::rng::Rng;
use crate::search::{
    compression_ratio, flop_reduction, CostMode, EncoderConfig, LayerScheme, Rational,
};
use crate::sparsify::{nxm_project, NxMPattern};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&mut Rng) -> std::result::Result<String, String>;

/// Runs every check with a fixed seed.
pub fn run_selftest() -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 7] = [
        ("accounting", accounting),
        ("nxm-projection", nxm_oracle),
        ("scale-solvers", scale_oracle),
        ("fused-projection", fused_projection),
        ("admm-toy", admm_toy),
        ("gradients", gradients),
        ("codec", codec),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let start = Instant::now();
            let (passed, detail) = match f(&mut Rng::new(1000 + i as u64)) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn accounting(_: &mut Rng) -> std::result::Result<String, String> {
    // (schemes, bit sum over 12 d² units, sparse units)
    let rows = [
        ("Q4,Q4,Q4,Q4,Sparse-Q4,Sparse-Q4", 40, 8),
        ("Q4,Q8,Q4,Sparse-Q4,Q4,Sparse-Q4", 47, 5),
        ("Q4,Q8,Q4,Q4,Q4,Sparse-Q4", 48, 4),
        ("Q4,Sparse-Q4,Q4,Q4,Sparse-Q4,Sparse-Q4", 39, 9),
        ("Q4,Sparse-Q4,Q4,Sparse-Q8,Q4,Sparse-Q4", 44, 6),
    ];
    for (text, bits, sparse_units) in rows {
        let c: EncoderConfig = text.parse().map_err(|e| format!("{e}"))?;
        let want = Rational::from_integer(1) - Rational::new(bits, 384);
        ensure(
            compression_ratio(&c, CostMode::WithMetadata) == want,
            || format!("ratio of {text}"),
        )?;
        ensure(
            flop_reduction(&c) == Rational::new(sparse_units, 24),
            || format!("FLOPs of {text}"),
        )?;
    }
    let headline = EncoderConfig::uniform(LayerScheme::SPARSE_Q4).map_err(|e| e.to_string())?;
    ensure(
        compression_ratio(&headline, CostMode::PayloadOnly) == Rational::new(15, 16),
        || "headline ratio".into(),
    )?;
    Ok(format!("{} configurations", rows.len() + 1))
}

fn brute_force_support(group: &[f32], m: usize) -> Vec<bool> {
    let n = group.len();
    let mut best: Option<(f64, u32)> = None;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != m {
            continue;
        }
        let dropped: f64 = (0..n)
            .filter(|i| bits >> i & 1 == 0)
            .map(|i| (group[i] as f64).powi(2))
            .sum();
        // Lexicographically smallest index set wins ties.
        let better = match best {
            None => true,
            Some((d, b)) => dropped < d || (dropped == d && bits.reverse_bits() > b.reverse_bits()),
        };
        if better {
            best = Some((dropped, bits));
        }
    }
    let bits = best.expect("m < n").1;
    (0..n).map(|i| bits >> i & 1 == 1).collect()
}

fn nxm_oracle(rng: &mut Rng) -> std::result::Result<String, String> {
    let mut total = 0;
    for (n, m) in [(4, 2), (4, 1), (8, 4)] {
        let p = NxMPattern::new(n, m).map_err(|e| e.to_string())?;
        for _ in 0..500 {
            let group: Vec<f32> = (0..n).map(|_| (rng.below(7) as f32 - 3.0) * 0.5).collect();
            let w = Matrix::new(1, n, group.clone()).map_err(|e| e.to_string())?;
            let (_, mask) = nxm_project(&w, p).map_err(|e| e.to_string())?;
            ensure(
                mask.as_slice() == brute_force_support(&group, m).as_slice(),
                || format!("{n}:{m} on {group:?}"),
            )?;
            total += 1;
        }
    }
    Ok(format!("{total} groups"))
}

fn scale_oracle(rng: &mut Rng) -> std::result::Result<String, String> {
    let spec = QuantSpec::new(4, 0).map_err(|e| e.to_string())?;
    for _ in 0..50 {
        let group: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let s_max = solve_scale_max(&group, spec).map_err(|e| e.to_string())?;
        let s_dist = solve_scale_dist(&group, spec).map_err(|e| e.to_string())?;
        let (e_max, e_dist) = (
            quant_error(&group, s_max, spec),
            quant_error(&group, s_dist, spec),
        );
        ensure(e_dist <= e_max, || {
            format!("dist {e_dist} above max {e_max}")
        })?;
        let grid = (1..=20_000)
            .map(|i| quant_error(&group, s_max * 2.0 * i as f64 / 20_000.0, spec))
            .fold(f64::INFINITY, f64::min);
        ensure(e_dist <= grid * (1.0 + 1e-4), || {
            format!("dist {e_dist} above grid {grid}")
        })?;
    }
    Ok("50 groups".into())
}

/// N:M selection on already quantized values; ties between equal codes go to
/// the larger original magnitude, then the lower index.
fn sparsify_quantized(v: &Matrix<f32>, q: &Matrix<f32>, p: NxMPattern) -> Matrix<f32> {
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        for g in 0..q.cols() / p.n() {
            let mut idx: Vec<usize> = (g * p.n()..(g + 1) * p.n()).collect();
            idx.sort_by(|&a, &b| {
                q.get(r, b)
                    .abs()
                    .total_cmp(&q.get(r, a).abs())
                    .then(v.get(r, b).abs().total_cmp(&v.get(r, a).abs()))
            });
            for &c in &idx[..p.m()] {
                out.set(r, c, q.get(r, c));
            }
        }
    }
    out
}

fn fused_projection(rng: &mut Rng) -> std::result::Result<String, String> {
    let p = NxMPattern::four_two();
    let spec = QuantSpec::new(4, 4).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        let v = Matrix::<f32>::from_fn(8, 16, |_, _| rng.normal() as f32);
        for solver in [ScaleSolver::Max, ScaleSolver::Dist] {
            let cs = ConstraintSet::fused(p, spec, solver);
            let out = euclidean_project(&v, &cs).map_err(|e| e.to_string())?;
            satisfies(&out.value, &cs).map_err(|e| e.to_string())?;
        }
        let sparse_first = euclidean_project(&v, &ConstraintSet::fused(p, spec, ScaleSolver::Max))
            .map_err(|e| e.to_string())?;
        let q = euclidean_project(&v, &ConstraintSet::quant(spec, ScaleSolver::Max))
            .map_err(|e| e.to_string())?;
        ensure(sparse_first.scales == q.scales, || {
            "max scales depend on the order".into()
        })?;
        ensure(
            sparse_first.value == sparsify_quantized(&v, &q.value, p),
            || "orders disagree under max".into(),
        )?;
    }
    Ok("100 matrices".into())
}

fn admm_toy(rng: &mut Rng) -> std::result::Result<String, String> {
    let a = Matrix::<f64>::from_fn(4, 8, |_, _| rng.normal());
    let cs = ConstraintSet::sparse(NxMPattern::four_two());
    let rho = 2.0;
    let mut s = AdmmLayerState::new(a.clone(), rho, cs).map_err(|e| e.to_string())?;
    for it in 0..500 {
        let v = s.z.sub(&s.u).map_err(|e| e.to_string())?;
        s.w = a
            .zip_map(&v, |a, v| (2.0 * a + rho * v) / (2.0 + rho))
            .map_err(|e| e.to_string())?;
        projection_step(&mut s).map_err(|e| e.to_string())?;
        let r = s.primal_residual();
        dual_update(&mut s);
        if r <= 1e-3 {
            let want = nxm_project(&a, NxMPattern::four_two())
                .map_err(|e| e.to_string())?
                .0;
            let gap = s.z.frobenius_dist(&want).map_err(|e| e.to_string())?;
            ensure(gap <= 1e-3, || format!("limit off by {gap}"))?;
            return Ok(format!("converged in {} iterations", it + 1));
        }
    }
    Err("no convergence in 500 iterations".into())
}

fn gradients(rng: &mut Rng) -> std::result::Result<String, String> {
    let g = Geometry {
        layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 32,
        vocab: 6,
        seq_len: 5,
        classes: 2,
    };
    let init = MicroModel::<f64>::init(g, rng).map_err(|e| e.to_string())?;
    let params = init
        .params()
        .iter()
        .map(|p| Matrix::from_fn(p.rows(), p.cols(), |r, c| p.get(r, c) + 0.3 * rng.normal()))
        .collect();
    let model = MicroModel::from_params(g, params).map_err(|e| e.to_string())?;
    let batch: Vec<Example> = (0..3)
        .map(|_| Example {
            tokens: (0..g.seq_len).map(|_| rng.below(g.vocab)).collect(),
            label: rng.below(2),
        })
        .collect();
    let plain = check_gradients(&model, &batch, 60, 1e-3, rng);
    ensure(plain.passed(), || format!("{:?}", plain.failures.first()))?;
    let ste = check_ste_gradients(
        &model,
        &batch,
        QuantSpec::new(4, 0).map_err(|e| e.to_string())?,
        40,
        1e-3,
        rng,
    );
    ensure(ste.passed(), || format!("{:?}", ste.failures.first()))?;
    Ok(format!(
        "{} coordinates, worst relative error {:.1e}",
        plain.checked + ste.checked,
        plain.worst_relative.max(ste.worst_relative)
    ))
}

fn codec(rng: &mut Rng) -> std::result::Result<String, String> {
    let schemes = [
        LayerScheme::Dense,
        LayerScheme::Q4,
        LayerScheme::Q8,
        LayerScheme::SPARSE_Q4,
        LayerScheme::SPARSE_Q8,
    ];
    for i in 0..100 {
        let scheme = schemes[i % schemes.len()];
        let v = Matrix::<f32>::from_fn(1 + rng.below(8), 8, |_, _| rng.normal() as f32);
        let w = match scheme
            .constraint(2, ScaleSolver::Dist)
            .map_err(|e| e.to_string())?
        {
            Some(cs) => euclidean_project(&v, &cs).map_err(|e| e.to_string())?.value,
            None => v,
        };
        let t = pack("w", &w, scheme, 2).map_err(|e| e.to_string())?;
        let back = decode(&encode(&[t]).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let u = unpack(&back[0]).map_err(|e| e.to_string())?;
        ensure(
            u.as_slice()
                .iter()
                .zip(w.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("{scheme} round trip"),
        )?;
    }
    Ok("100 tensors".into())
}
