//! Gradient verification against central finite differences.

use std::collections::BTreeMap;

use super::{Scalar, Tape, Tensor, Var};
use crate::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Max elementwise relative error, denominator `max(|a|, |b|, 1e-8)`.
    pub max_rel_err: f64,
    /// True when any compared value was non-finite; such comparisons count
    /// as failures and force `max_rel_err` to infinity.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_err < tol
    }
}

/// Compare tape gradients of a scalar-valued function against central
/// differences at `point`, elementwise over all inputs in `points`.
///
/// `build` must record the same computation every call: it is invoked once
/// for the analytic pass and twice per perturbed element.
pub fn grad_check<T: Scalar>(
    build: impl Fn(&mut Tape<T>, &BTreeMap<String, Var>) -> Result<Var>,
    points: &BTreeMap<String, Tensor<T>>,
    step: f64,
) -> Result<GradCheckReport> {
    let eval = |pts: &BTreeMap<String, Tensor<T>>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, tensor) in pts {
            vars.insert(name.clone(), tape.param(name.clone(), tensor.clone()));
        }
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).scalar_value().to_f64())
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, tensor) in points {
        vars.insert(name.clone(), tape.param(name.clone(), tensor.clone()));
    }
    let loss = build(&mut tape, &vars)?;
    let analytic = tape.backward(loss)?.into_param_map();

    let mut max_rel = 0.0_f64;
    let mut non_finite = false;
    for (name, tensor) in points {
        let grad = &analytic[name];
        for i in 0..tensor.numel() {
            let base = tensor.data()[i].to_f64();
            let mut plus = points.clone();
            plus.get_mut(name).unwrap().data_mut()[i] = T::from_f64(base + step);
            let mut minus = points.clone();
            minus.get_mut(name).unwrap().data_mut()[i] = T::from_f64(base - step);
            let fp = eval(&plus)?;
            let fm = eval(&minus)?;
            // The perturbation rounds to the element type; divide by the
            // step that was actually stored, not the nominal one.
            let actual = plus.get(name).unwrap().data()[i].to_f64()
                - minus.get(name).unwrap().data()[i].to_f64();
            let numeric = (fp - fm) / actual;
            let a = grad.data()[i].to_f64();
            if !a.is_finite() || !numeric.is_finite() {
                non_finite = true;
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: if non_finite { f64::INFINITY } else { max_rel },
        non_finite,
    })
}

/// Single-input convenience wrapper: the function sees the point bound as
/// parameter `"x"`.
pub fn grad_check_single<T: Scalar>(
    build: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    point: &Tensor<T>,
    step: f64,
) -> Result<GradCheckReport> {
    let mut points = BTreeMap::new();
    points.insert("x".to_string(), point.clone());
    grad_check(|tape, vars| build(tape, vars["x"]), &points, step)
}

/// Finite-difference check of every differentiable op on randomized inputs
/// at the given seed. Returns (op name, report) pairs.
pub fn op_battery<T: Scalar>(seed: u64, step: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use rand::SeedableRng;
    use std::sync::Arc;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str,
                    points: BTreeMap<String, Tensor<T>>,
                    build: &dyn Fn(&mut Tape<T>, &BTreeMap<String, Var>) -> Result<Var>|
     -> Result<()> {
        let report = grad_check(build, &points, step)?;
        out.push((name.to_string(), report));
        Ok(())
    };
    let pair = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[3, 4], rng));
        p.insert("b".to_string(), Tensor::<T>::randn(&[3, 4], rng));
        p
    };

    push("add", pair(&mut rng), &|t, v| {
        let y = t.add(v["a"], v["b"])?;
        t.mean(y)
    })?;
    push("sub", pair(&mut rng), &|t, v| {
        let y = t.sub(v["a"], v["b"])?;
        let sq = t.mul(y, y)?;
        t.mean(sq)
    })?;
    push("mul", pair(&mut rng), &|t, v| {
        let y = t.mul(v["a"], v["b"])?;
        t.mean(y)
    })?;
    {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[2, 3], &mut rng));
        p.insert("b".to_string(), Tensor::<T>::randn(&[3], &mut rng));
        push("add_broadcast", p, &|t, v| {
            let y = t.add(v["a"], v["b"])?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })?;
    }
    {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[5], &mut rng));
        push("scalar_mul", p, &|t, v| {
            let y = t.scalar_mul(v["a"], -1.7)?;
            t.sum(y)
        })?;
    }
    {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[3, 4], &mut rng));
        p.insert("b".to_string(), Tensor::<T>::randn(&[4, 2], &mut rng));
        push("matmul", p, &|t, v| {
            let y = t.matmul(v["a"], v["b"])?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })?;
    }
    {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[3, 5], &mut rng));
        push("transpose", p, &|t, v| {
            let y = t.transpose(v["a"])?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })?;
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[2, 6], &mut rng));
        push("reshape", p, &|t, v| {
            let y = t.reshape(v["a"], &[3, 4])?;
            let sm = t.softmax(y)?;
            let sq = t.mul(sm, sm)?;
            t.mean(sq)
        })?;
    }
    push("concat_slice", pair(&mut rng), &|t, v| {
        let c = t.concat(&[v["a"], v["b"]], 1)?;
        let s = t.slice(c, 1, 2, 4)?;
        let sq = t.mul(s, s)?;
        t.mean(sq)
    })?;
    {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[7], &mut rng));
        push("sum", p.clone(), &|t, v| {
            let sq = t.mul(v["a"], v["a"])?;
            t.sum(sq)
        })?;
        push("mean", p, &|t, v| {
            let g = t.gelu(v["a"])?;
            t.mean(g)
        })?;
    }
    {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[2, 5], &mut rng));
        push("softmax", p.clone(), &|t, v| {
            let y = t.softmax(v["a"])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        })?;
        push("layer_norm", p, &|t, v| {
            let y = t.layer_norm(v["a"])?;
            let g = t.gelu(y)?;
            t.mean(g)
        })?;
    }
    {
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), Tensor::<T>::randn(&[6], &mut rng));
        push("gelu", p, &|t, v| {
            let y = t.gelu(v["a"])?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })?;
    }
    {
        let mut p = BTreeMap::new();
        p.insert("table".to_string(), Tensor::<T>::randn(&[5, 3], &mut rng));
        let idx = Arc::new(vec![0usize, 2, 2, 4]);
        push("embed", p, &|t, v| {
            let y = t.embed(v["table"], idx.clone())?;
            let sq = t.mul(y, y)?;
            t.mean(sq)
        })?;
    }
    push("mse", pair(&mut rng), &|t, v| t.mse(v["a"], v["b"]))?;
    Ok(out)
}

fn three_layer_points<T: Scalar>(seed: u64) -> (BTreeMap<String, Tensor<T>>, Tensor<T>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scale = T::from_f64(0.5);
    let mut points = BTreeMap::new();
    points.insert("x".to_string(), Tensor::<T>::randn(&[4, 6], &mut rng));
    for l in 0..3 {
        points.insert(
            format!("w{l}"),
            Tensor::<T>::randn(&[6, 6], &mut rng).scale(scale),
        );
        points.insert(format!("b{l}"), Tensor::<T>::randn(&[6], &mut rng).scale(scale));
    }
    let target = Tensor::<T>::randn(&[4, 6], &mut rng);
    (points, target)
}

fn three_layer_loss<T: Scalar>(
    t: &mut Tape<T>,
    v: &BTreeMap<String, Var>,
    target: &Tensor<T>,
) -> Result<Var> {
    let mut h = v["x"];
    for l in 0..3 {
        h = t.matmul(h, v[&format!("w{l}")])?;
        h = t.add(h, v[&format!("b{l}")])?;
        h = t.gelu(h)?;
    }
    let tgt = t.leaf(target.clone());
    t.mse(h, tgt)
}

/// Randomized 3-layer affine–gelu network with an MSE head checked against
/// central differences at 64 bits (step 1e-5, bound 1e-5).
pub fn three_layer_check<T: Scalar>(seed: u64, step: f64) -> Result<GradCheckReport> {
    let (points, target) = three_layer_points::<T>(seed);
    grad_check(move |t, v| three_layer_loss(t, v, &target), &points, step)
}

/// The 32-bit variant: f32 backward gradients against an accurately
/// evaluated central-difference quotient (the same points promoted to f64,
/// step 1e-3). This bounds the backward pass's own rounding, which a pure
/// f32 difference quotient could not resolve.
pub fn three_layer_check_f32(seed: u64) -> Result<GradCheckReport> {
    let (points32, target32) = three_layer_points::<f32>(seed);

    // Analytic f32 gradients.
    let mut tape = Tape::<f32>::new();
    let mut vars = BTreeMap::new();
    for (name, tensor) in &points32 {
        vars.insert(name.clone(), tape.param(name.clone(), tensor.clone()));
    }
    let loss = three_layer_loss(&mut tape, &vars, &target32)?;
    let analytic = tape.backward(loss)?.into_param_map();

    // f64 oracle at the f32-representable points.
    let points64: BTreeMap<String, Tensor<f64>> = points32
        .iter()
        .map(|(k, v)| (k.clone(), v.cast()))
        .collect();
    let target64: Tensor<f64> = target32.cast();
    let eval = |pts: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let mut vs = BTreeMap::new();
        for (name, tensor) in pts {
            vs.insert(name.clone(), t.leaf(tensor.clone()));
        }
        let l = three_layer_loss(&mut t, &vs, &target64)?;
        Ok(t.value(l).scalar_value())
    };
    let step = 1e-3;
    let mut max_rel = 0.0_f64;
    let mut non_finite = false;
    for (name, tensor) in &points64 {
        let grad = &analytic[name];
        for i in 0..tensor.numel() {
            let base = tensor.data()[i];
            let mut plus = points64.clone();
            plus.get_mut(name).unwrap().data_mut()[i] = base + step;
            let mut minus = points64.clone();
            minus.get_mut(name).unwrap().data_mut()[i] = base - step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = grad.data()[i] as f64;
            if !a.is_finite() || !numeric.is_finite() {
                non_finite = true;
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: if non_finite { f64::INFINITY } else { max_rel },
        non_finite,
    })
}

/// A dense 2-layer, 8-wide network exercising every differentiable op in
/// one graph, with healthy gradient scales throughout.
pub fn micro_model_check<T: Scalar>(seed: u64, step: f64) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    use std::sync::Arc;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scale = T::from_f64(0.35);
    let mut points = BTreeMap::new();
    points.insert("x".to_string(), Tensor::<T>::randn(&[4, 8], &mut rng));
    points.insert("w1".to_string(), Tensor::<T>::randn(&[8, 8], &mut rng).scale(scale));
    points.insert("b1".to_string(), Tensor::<T>::randn(&[8], &mut rng).scale(scale));
    points.insert("w2".to_string(), Tensor::<T>::randn(&[8, 8], &mut rng).scale(scale));
    points.insert("table".to_string(), Tensor::<T>::randn(&[5, 8], &mut rng).scale(scale));
    let target = Tensor::<T>::randn(&[8, 4], &mut rng);
    let idx = Arc::new(vec![0usize, 2, 4, 2]);

    grad_check(
        move |t, v| {
            // Layer 1: affine + gelu + layer norm, gated by an embedding.
            let h = t.matmul(v["x"], v["w1"])?;
            let h = t.add(h, v["b1"])?;
            let h = t.gelu(h)?;
            let h = t.layer_norm(h)?;
            let e = t.embed(v["table"], idx.clone())?;
            let h = t.mul(h, e)?;
            // Layer 2: transposed weights, softmax head.
            let w2t = t.transpose(v["w2"])?;
            let h2 = t.matmul(h, w2t)?;
            let s = t.softmax(h2)?;
            // Mix shape ops into the loss path.
            let top = t.slice(h2, 0, 0, 2)?;
            let bottom = t.slice(s, 0, 2, 2)?;
            let joined = t.concat(&[top, bottom], 0)?;
            let reshaped = t.reshape(joined, &[8, 4])?;
            let tgt = t.leaf(target.clone());
            let fit = t.mse(reshaped, tgt)?;
            // Regularizer touches sum, mean, sub, scalar_mul.
            let total = t.sum(h)?;
            let avg = t.mean(h2)?;
            let reg = t.sub(total, avg)?;
            let reg = t.scalar_mul(reg, 0.01)?;
            t.add(fit, reg)
        },
        &points,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let point = Tensor::<f64>::from_f64_slice(&[4], &[0.5, -1.0, 2.0, 0.1]).unwrap();
        let report = grad_check_single(
            |tape, x| {
                let s = tape.scalar_mul(x, 3.0)?;
                tape.sum(s)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn gelu_chain_seed0_under_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let point = Tensor::<f64>::randn(&[6], &mut rng);
        let report = grad_check_single(
            |tape, x| {
                let g = tape.gelu(x)?;
                let h = tape.mul(g, g)?;
                tape.mean(h)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.ok(1e-6), "err {}", report.max_rel_err);
    }
}

#[cfg(test)]
mod battery_tests {
    use super::*;

    #[test]
    fn battery_passes_at_f64() {
        for (name, report) in op_battery::<f64>(0, 1e-5).unwrap() {
            assert!(report.ok(1e-5), "{}: err {}", name, report.max_rel_err);
        }
    }

    #[test]
    fn micro_model_passes_under_1e5() {
        let report = micro_model_check::<f64>(1, 1e-5).unwrap();
        assert!(report.ok(1e-5), "micro model err {}", report.max_rel_err);
    }

    #[test]
    fn three_layer_network_both_precisions() {
        let r64 = three_layer_check::<f64>(6, 1e-5).unwrap();
        assert!(r64.ok(1e-5), "f64 err {}", r64.max_rel_err);
        let r32 = three_layer_check_f32(6).unwrap();
        assert!(r32.ok(1e-3), "f32 err {}", r32.max_rel_err);
    }
}
