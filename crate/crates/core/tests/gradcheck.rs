//! Central finite differences against backward for every graph primitive (f64),
//! plus dropout statistics and determinism.

use std::rc::Rc;

use npp_core::error::NppError;
use npp_core::rng::{stream, Purpose};
use npp_core::tensor::{Array, Graph, Var};
use rand::Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Array<f64> {
    let mut rng = stream(seed, Purpose::Test, 0);
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum with fixed random weights, so every output element matters.
fn scalarize<'g>(g: &'g Graph<f64>, out: Var<'g, f64>) -> Var<'g, f64> {
    let w = g.constant(random(&out.shape(), 999));
    out.mul(w).unwrap().sum()
}

/// `rel = |a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero entries
/// from turning rounding noise into large ratios.
fn check<F>(name: &str, inputs: &[Array<f64>], f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Array<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.param(x.clone())).collect();
        f(&g, &vars).value().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&g, &vars);
    g.backward(loss).unwrap();
    for (i, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap_or_else(|| Array::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel < TOL,
                "{name}: input {i} elem {j}: backward {a} vs numeric {numeric} (rel {rel:e})"
            );
        }
    }
}

#[test]
fn matmul_family() {
    check("matmul", &[random(&[4, 5], 1), random(&[5, 3], 2)], |g, v| {
        scalarize(g, v[0].matmul(v[1]).unwrap())
    });
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let a = if ta { random(&[5, 4], 3) } else { random(&[4, 5], 3) };
        let b = if tb { random(&[3, 5], 4) } else { random(&[5, 3], 4) };
        check("matmul_t", &[a, b], |g, v| {
            scalarize(g, v[0].matmul_t(v[1], ta, tb).unwrap())
        });
    }
}

#[test]
fn elementwise() {
    let (a, b) = (random(&[3, 4], 5), random(&[3, 4], 6));
    check("add", &[a.clone(), b.clone()], |g, v| {
        scalarize(g, v[0].add(v[1]).unwrap())
    });
    check("sub", &[a.clone(), b.clone()], |g, v| {
        scalarize(g, v[0].sub(v[1]).unwrap())
    });
    check("mul", &[a.clone(), b.clone()], |g, v| {
        scalarize(g, v[0].mul(v[1]).unwrap())
    });
    check("scale", std::slice::from_ref(&a), |g, v| scalarize(g, v[0].scale(-1.7)));
    check("silu", std::slice::from_ref(&a), |g, v| scalarize(g, v[0].silu()));
    check("sum", &[a], |_, v| v[0].sum());
}

#[test]
fn shape_ops() {
    let a = random(&[3, 4], 7);
    check("transpose", std::slice::from_ref(&a), |g, v| {
        scalarize(g, v[0].transpose().unwrap())
    });
    check("reshape", std::slice::from_ref(&a), |g, v| {
        scalarize(g, v[0].reshape(&[2, 6]).unwrap())
    });
    check("slice", std::slice::from_ref(&a), |g, v| {
        scalarize(g, v[0].slice(1..3, 1..4).unwrap())
    });
    let b = random(&[2, 4], 8);
    check("concat0", &[a.clone(), b], |g, v| {
        scalarize(g, Var::concat(&[v[0], v[1]], 0).unwrap())
    });
    let c = random(&[3, 2], 9);
    check("concat1", &[a, c], |g, v| {
        scalarize(g, Var::concat(&[v[0], v[1]], 1).unwrap())
    });
    let cube = random(&[2, 3, 4], 10);
    for axis in 0..3 {
        check("mean_over_axis", std::slice::from_ref(&cube), |g, v| {
            scalarize(g, v[0].mean_over_axis(axis).unwrap())
        });
    }
}

#[test]
fn lookups() {
    let table = random(&[5, 3], 11);
    let ids = [4, 0, 4, 2, 4];
    check("embedding_lookup", std::slice::from_ref(&table), |g, v| {
        scalarize(g, v[0].embedding_lookup(&ids).unwrap())
    });
    check("gather_rows", &[table], |g, v| {
        scalarize(g, v[0].gather_rows(&ids).unwrap())
    });
}

#[test]
fn norms() {
    let x = random(&[3, 6], 12);
    let gain = random(&[6], 13);
    let bias = random(&[6], 14);
    check("rms_norm", &[x.clone(), gain.clone()], |g, v| {
        scalarize(g, v[0].layer_norm_rms(v[1], 1e-5).unwrap())
    });
    check("layer_norm", &[x, gain, bias], |g, v| {
        scalarize(g, v[0].layer_norm(v[1], v[2], 1e-5).unwrap())
    });
}

#[test]
fn attention_pieces() {
    let x = random(&[4, 6], 15);
    check("softmax", std::slice::from_ref(&x), |g, v| {
        scalarize(g, v[0].softmax().unwrap())
    });
    let square = random(&[4, 4], 16);
    for offset in [0, 1] {
        check("causal_mask+softmax", std::slice::from_ref(&square), |g, v| {
            scalarize(g, v[0].causal_mask(offset).unwrap().softmax().unwrap())
        });
    }
    let mut rng = stream(17, Purpose::Test, 0);
    let angles: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let cos = Rc::new(angles.iter().map(|a| a.cos()).collect::<Vec<_>>());
    let sin = Rc::new(angles.iter().map(|a| a.sin()).collect::<Vec<_>>());
    check("rotate_pairs", &[x], |g, v| {
        scalarize(g, v[0].rotate_pairs(Rc::clone(&cos), Rc::clone(&sin)).unwrap())
    });
}

#[test]
fn losses() {
    let logits = random(&[4, 7], 18);
    check("cross_entropy", std::slice::from_ref(&logits), |_, v| {
        v[0].cross_entropy(&[0, 6, 3, 3]).unwrap()
    });
    let labels = [0, 1, 1, 6, 2, 2, 2, 2, 5, 0, 3, 4, 6, 6, 1, 0];
    check("patch_cross_entropy", &[logits], |_, v| {
        v[0].patch_cross_entropy(&labels, 4, 16).unwrap()
    });
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    let x = random(&[5, 8], 19);
    check("dropout", &[x], |g, v| {
        let mut rng = stream(20, Purpose::Dropout, 0);
        scalarize(g, v[0].dropout(0.3, &mut rng).unwrap())
    });
}

#[test]
fn backward_basics() {
    let g = Graph::<f64>::new();
    let x = g.param(random(&[2, 3, 2], 21));
    g.backward(x.sum()).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&d| d == 1.0));

    let g = Graph::<f64>::new();
    let x = g.param(Array::scalar(3.0));
    g.backward(x.mul(x).unwrap()).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);

    let g = Graph::<f64>::new();
    let x = g.param(random(&[2, 2], 22));
    assert!(matches!(g.backward(x), Err(NppError::Contract(_))));
}

#[test]
fn cross_entropy_examples() {
    let g = Graph::<f64>::new();
    let uniform = g.constant(Array::zeros(&[3, 64])).cross_entropy(&[0, 17, 63]).unwrap();
    assert!((uniform.value().item() - 64f64.ln()).abs() < 1e-12);
    let mut peaked = Array::zeros(&[2, 5]);
    peaked.row_mut(0)[3] = 1e4;
    peaked.row_mut(1)[1] = 1e4;
    let sure = g.constant(peaked).cross_entropy(&[3, 1]).unwrap().value().item();
    assert!(sure.abs() < 1e-12);
    let raw = random(&[6, 10], 23);
    let labels = [0, 9, 4, 4, 2, 7];
    let loss = g.constant(raw.clone()).cross_entropy(&labels).unwrap().value().item();
    let oracle: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let z: f64 = raw.row(i).iter().map(|x| x.exp()).sum();
            -(raw.row(i)[l].exp() / z).ln()
        })
        .sum::<f64>()
        / 6.0;
    assert!((loss - oracle).abs() < 1e-10);
    assert!(matches!(
        g.constant(raw).cross_entropy(&[0, 1, 2, 3, 4, 10]),
        Err(NppError::Index(_))
    ));
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let u = g.constant(Array::zeros(&[1, 4])).softmax().unwrap().value();
    assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let big = g
        .constant(Array::new(vec![1, 2], vec![1000.0, 0.0]).unwrap())
        .softmax()
        .unwrap()
        .value();
    assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] >= 0.0 && big.data()[1] < 1e-300);
    let raw = random(&[1, 8], 24);
    let p = g.constant(raw.clone()).softmax().unwrap().value();
    let z: f64 = raw.data().iter().map(|x| x.exp()).sum();
    for (a, x) in p.data().iter().zip(raw.data()) {
        assert!((a - x.exp() / z).abs() < 1e-12);
    }
    let nan = g
        .constant(Array::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap())
        .softmax();
    assert!(matches!(nan, Err(NppError::Numeric(_))));
}

#[test]
fn dropout_statistics() {
    let g = Graph::<f64>::new();
    let n = 100_000;
    let x = g.constant(Array::full(&[100, 1000], 1.0));
    let mut rng = stream(25, Purpose::Dropout, 0);
    let same = x.dropout(0.0, &mut rng).unwrap();
    assert_eq!(same.id(), x.id());
    for rate in [0.1, 0.5] {
        let y = x.dropout(rate, &mut rng).unwrap().value();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!(
            (zeros - n as f64 * rate).abs() < 3.0 * sigma,
            "rate {rate}: {zeros} zeros"
        );
        let kept = 1.0 / (1.0 - rate);
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - kept).abs() < 1e-12));
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let mean_sigma = (rate / (1.0 - rate) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * mean_sigma, "rate {rate}: mean {mean}");
    }
}

#[test]
fn identical_seeds_give_identical_bits() {
    let run = || {
        let g = Graph::<f32>::new();
        let x = g.param(random(&[6, 8], 26).cast());
        let w = g.param(random(&[8, 8], 27).cast());
        let mut rng = stream(28, Purpose::Dropout, 3);
        let h = x.matmul(w).unwrap().silu().dropout(0.2, &mut rng).unwrap();
        let loss = h.softmax().unwrap().cross_entropy(&[0, 1, 2, 3, 4, 5]).unwrap();
        g.backward(loss).unwrap();
        let bits = |a: Array<f32>| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (
            loss.value().item().to_bits(),
            bits(g.grad(x).unwrap()),
            bits(g.grad(w).unwrap()),
        )
    };
    assert_eq!(run(), run());
}
