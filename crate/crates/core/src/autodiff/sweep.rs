//! Finite-difference checks of every opcode, shared by unit tests and the
//! acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference_grad, max_relative_error, Graph, NodeId, Tensor};
use crate::error::Result;

/// Uniform entries in `[lo, hi)`.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), v)
}

/// Max relative error between backward and central differences for
/// `sum(W * build(inputs))` with a fixed random `W`.
pub fn check_grad(build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>, inputs: Vec<Tensor<f64>>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let probe_shape = {
        let mut g = Graph::<f64>::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &ids)?;
        g.shape(y).to_vec()
    };
    let weights = rand_tensor(&mut rng, &probe_shape, -1.0, 1.0);

    let eval = |params: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &ids)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(y, w)?;
        let loss = g.sum(prod)?;
        Ok((g, ids, loss))
    };

    let (g, ids, loss) = eval(&inputs)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|id| grads.get(*id).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();
    let numeric = finite_difference_grad(
        |p| {
            let (g, _, loss) = eval(p)?;
            Ok(g.value(loss).item())
        },
        &inputs,
        1e-6,
    )?;
    let numeric: Vec<f64> = numeric.iter().flat_map(|t| t.data().to_vec()).collect();
    Ok(max_relative_error(&analytic, &numeric))
}

/// Worst relative error per opcode over `seeds` random shapes and inputs.
pub fn opcode_gradient_sweep(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut results = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some((_, e)) => *e = f64::max(*e, err),
        None => results.push((name, err)),
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(1..4usize);
        let c = rng.random_range(2..5usize);
        let k = rng.random_range(2..5usize);
        let b = rng.random_range(1..3usize);
        let mut rt = |shape: &[usize], lo: f64, hi: f64| rand_tensor(&mut rng, shape, lo, hi);

        let (x, y) = (rt(&[r, c], -1.0, 1.0), rt(&[r, c], -1.0, 1.0));
        record("add", check_grad(&|g, i| g.add(i[0], i[1]), vec![x.clone(), y.clone()], seed)?);
        record("add_broadcast", check_grad(&|g, i| g.add(i[0], i[1]), vec![x.clone(), rt(&[c], -1.0, 1.0)], seed)?);
        record("subtract", check_grad(&|g, i| g.sub(i[0], i[1]), vec![x.clone(), y.clone()], seed)?);
        record("multiply", check_grad(&|g, i| g.mul(i[0], i[1]), vec![x.clone(), y.clone()], seed)?);
        record("scale", check_grad(&|g, i| g.scale(i[0], -1.7), vec![x.clone()], seed)?);
        record("matmul", check_grad(&|g, i| g.matmul(i[0], i[1]), vec![x.clone(), rt(&[c, k], -1.0, 1.0)], seed)?);
        record(
            "matmul_batched",
            check_grad(&|g, i| g.matmul(i[0], i[1]), vec![rt(&[b, r, c], -1.0, 1.0), rt(&[b, c, k], -1.0, 1.0)], seed)?,
        );
        record("transpose", check_grad(&|g, i| g.transpose(i[0]), vec![rt(&[b, r, c], -1.0, 1.0)], seed)?);
        record("reshape", check_grad(&|g, i| g.reshape(i[0], &[r * c]), vec![x.clone()], seed)?);
        record("concat", check_grad(&|g, i| g.concat_last(&[i[0], i[1]]), vec![x.clone(), rt(&[r, k], -1.0, 1.0)], seed)?);
        record("slice", check_grad(&|g, i| g.slice(i[0], 1, 1, c), vec![rt(&[b, c, k], -1.0, 1.0)], seed)?);
        let ids: Vec<usize> = (0..b * r).map(|j| (j * 7 + seed as usize) % c).collect();
        record(
            "embedding",
            check_grad(&move |g, i| g.embedding(i[0], &ids, &[b, r]), vec![rt(&[c, k], -1.0, 1.0)], seed)?,
        );
        record("softmax", check_grad(&|g, i| g.softmax(i[0]), vec![rt(&[r, c], -2.0, 2.0)], seed)?);
        record("log_softmax", check_grad(&|g, i| g.log_softmax(i[0]), vec![rt(&[r, c], -2.0, 2.0)], seed)?);
        record("log", check_grad(&|g, i| g.log(i[0]), vec![rt(&[r, c], 0.5, 2.0)], seed)?);
        record("exp", check_grad(&|g, i| g.exp(i[0]), vec![rt(&[r, c], -1.0, 1.0)], seed)?);
        record("gelu", check_grad(&|g, i| g.gelu(i[0]), vec![rt(&[r, c], -3.0, 3.0)], seed)?);
        record(
            "layer_norm",
            check_grad(
                &|g, i| g.layer_norm(i[0], i[1], i[2], 1e-5),
                vec![rt(&[r, c + 1], -1.0, 1.0), rt(&[c + 1], 0.5, 1.5), rt(&[c + 1], -0.5, 0.5)],
                seed,
            )?,
        );
        let t = c;
        let pad: Vec<bool> = (0..b * t).map(|j| j % t == t - 1 && j % 2 == 0).collect();
        record(
            "causal_mask",
            check_grad(
                &move |g, i| {
                    let m = g.causal_mask(i[0], Some(pad.clone()))?;
                    g.softmax(m)
                },
                vec![rt(&[b, t, t], -1.0, 1.0)],
                seed,
            )?,
        );
        record("sum", check_grad(&|g, i| g.sum(i[0]), vec![x.clone()], seed)?);
        record("mean", check_grad(&|g, i| g.mean(i[0]), vec![x.clone()], seed)?);
        let offsets: Vec<usize> = (0..r).map(|j| j * c + (j + seed as usize) % c).collect();
        record("gather", check_grad(&move |g, i| g.gather(i[0], offsets.clone()), vec![x.clone()], seed)?);
        record("log1mexp", check_grad(&|g, i| g.log1mexp(i[0], -1e-6), vec![rt(&[r, c], -3.0, -0.1)], seed)?);
    }
    Ok(results)
}
