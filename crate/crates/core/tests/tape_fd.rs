//! Reverse-mode gradients against central differences, one composite per op.

use std::sync::Arc;

use hywu_core::generator::ParamSet;
use hywu_core::gradcheck::{check_params, Floor};
use hywu_core::rng;
use hywu_core::tensor::RotaryTable;
use hywu_core::{Result, Tape, Tensor, Var};

fn check(inputs: &[&[usize]], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Sync) {
    let mut r = rng::seeded(seed, 0);
    let mut ps = ParamSet::new();
    for (i, s) in inputs.iter().enumerate() {
        ps.insert(format!("x{i}"), Tensor::randn(s, 0.7, &mut r));
    }
    let build = |ps: &ParamSet, trainable: bool| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = ps.load(&mut tape, trainable).vars;
        let out = f(&mut tape, &vars)?;
        Ok((tape, out, vars))
    };
    let (tape, loss, vars) = build(&ps, true).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|v| g.get_or_zeros(&tape, *v)).collect();
    let rep = check_params(&ps, &grads, 1e-5, Floor::Absolute(1e-6), |p| {
        let (t, l, _) = build(p, false)?;
        Ok(t.value(l).item())
    })
    .unwrap();
    assert!(rep.passes(1e-6), "{rep:?}");
}

/// Contracts any tensor to a scalar with fixed, non-uniform weights.
fn probe(t: &mut Tape, x: Var) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(Tensor::from_fn(&shape, |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0));
    let m = t.mul(x, w)?;
    Ok(t.sum(m))
}

#[test]
fn matmul_add_sub_mul() {
    check(&[&[3, 4], &[4, 2], &[3, 2]], 1, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        let q = t.sub(p, v[2])?;
        let r = t.mul(q, p)?;
        let s = t.add(r, v[2])?;
        probe(t, s)
    });
}

#[test]
fn scale_shift_and_squares() {
    check(&[&[2, 5]], 2, |t, v| {
        let a = t.scale(v[0], -1.5);
        let b = t.add_scalar(a, 0.25);
        t.sq_sum_scaled(b, 3.0)
    });
}

#[test]
fn activations() {
    check(&[&[3, 3]], 3, |t, v| {
        let a = t.gelu(v[0]);
        let b = t.tanh(a);
        probe(t, b)
    });
}

#[test]
fn softmax_rows() {
    check(&[&[4, 5]], 4, |t, v| {
        let s = t.softmax_rows(v[0])?;
        probe(t, s)
    });
}

#[test]
fn shape_ops() {
    check(&[&[2, 3, 4]], 5, |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let r = t.reshape(p, &[8, 3])?;
        let tr = t.transpose(r)?;
        let g = t.gather(tr, Arc::new(vec![0, 5, 5, 23, 7, 1]), &[2, 3])?;
        probe(t, g)
    });
}

#[test]
fn linear_bias_and_norm() {
    check(&[&[3, 4], &[4, 6], &[6], &[6]], 6, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let z = t.rms_norm(y, v[3], 1e-6)?;
        let b = t.add_bias(z, v[2])?;
        probe(t, b)
    });
}

#[test]
fn rotary() {
    let angles: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.4).collect();
    let table = Arc::new(RotaryTable::from_angles(3, 2, &angles));
    check(&[&[3, 4]], 7, move |t, v| {
        let r = t.rotary(v[0], table.clone())?;
        probe(t, r)
    });
}

#[test]
fn reused_vars_accumulate() {
    check(&[&[2, 2]], 8, |t, v| {
        let a = t.matmul(v[0], v[0])?;
        let b = t.mul(a, v[0])?;
        let c = t.add(b, v[0])?;
        probe(t, c)
    });
}
