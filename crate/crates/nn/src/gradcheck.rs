//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// One differentiable input of a checked function.
pub struct CheckInput {
    pub value: Tensor<f64>,
    pub differentiable: bool,
}

impl CheckInput {
    pub fn wrt(value: Tensor<f64>) -> Self {
        CheckInput { value, differentiable: true }
    }

    pub fn fixed(value: Tensor<f64>) -> Self {
        CheckInput { value, differentiable: false }
    }
}

fn projected_loss<F>(
    g: &mut Graph<f64>,
    inputs: &[Var],
    build: &F,
    seed: u64,
) -> Result<Var, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let y = build(g, inputs)?;
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Largest `|a − n| / max(1, |a|, |n|)` between analytic gradients and
/// central differences of a random projection of `build`'s output.
pub fn grad_check<F>(inputs: &[CheckInput], build: F, seed: u64, h: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new(false);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| if i.differentiable { g.param(i.value.clone()) } else { g.constant(i.value.clone()) })
        .collect();
    let loss = projected_loss(&mut g, &vars, &build, seed)?;
    g.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new(false);
        let vars: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
        let loss = projected_loss(&mut g, &vars, &build, seed)?;
        Ok(g.value(loss).item())
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        if !input.differentiable {
            continue;
        }
        let analytic = g.grad(vars[k])?.to_vec();
        for e in 0..input.value.len() {
            let x = input.value.data()[e];
            values[k].data_mut()[e] = x + h;
            let plus = eval(&values)?;
            values[k].data_mut()[e] = x - h;
            let minus = eval(&values)?;
            values[k].data_mut()[e] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    BatchedMatMul,
    Transpose,
    Reshape,
    Add,
    AddBroadcast,
    Mul,
    Scale,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Relu,
    Gelu,
    Embedding,
    CrossEntropy,
    Dropout,
    CausalMask,
    SplitHeads,
    MergeHeads,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::BatchedMatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::AddBroadcast,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::Dropout,
        OpKind::CausalMask,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::Sum,
    ];
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Grad-checks one op at random small shapes drawn from `seed`.
pub fn check_op(kind: OpKind, seed: u64) -> Result<f64, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (b, m, k, n) = (dim(1, 3), dim(1, 5), dim(1, 5), dim(1, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let h = crate::gradcheck::DEFAULT_STEP;
    match kind {
        OpKind::MatMul => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, k], 1.0)), CheckInput::wrt(random(&mut rng, &[k, n], 1.0))];
            grad_check(&inputs, |g, v| g.matmul(v[0], v[1]), seed, h)
        }
        OpKind::BatchedMatMul => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, k], 1.0)), CheckInput::wrt(random(&mut rng, &[b, k, n], 1.0))];
            grad_check(&inputs, |g, v| g.matmul(v[0], v[1]), seed, h)
        }
        OpKind::Transpose => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, n], 1.0))];
            grad_check(&inputs, |g, v| g.transpose(v[0]), seed, h)
        }
        OpKind::Reshape => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, n], 1.0))];
            grad_check(&inputs, move |g, v| g.reshape(v[0], &[b * m, n]), seed, h)
        }
        OpKind::Add => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[m, n], 1.0)), CheckInput::wrt(random(&mut rng, &[m, n], 1.0))];
            grad_check(&inputs, |g, v| g.add(v[0], v[1]), seed, h)
        }
        OpKind::AddBroadcast => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, n], 1.0)), CheckInput::wrt(random(&mut rng, &[n], 1.0))];
            grad_check(&inputs, |g, v| g.add(v[0], v[1]), seed, h)
        }
        OpKind::Mul => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, n], 1.0)), CheckInput::wrt(random(&mut rng, &[b, n], 1.0))];
            grad_check(&inputs, |g, v| g.mul(v[0], v[1]), seed, h)
        }
        OpKind::Scale => {
            let s = rng.gen_range(-2.0..2.0);
            let inputs = [CheckInput::wrt(random(&mut rng, &[m, n], 1.0))];
            grad_check(&inputs, move |g, v| g.scale(v[0], s), seed, h)
        }
        OpKind::Softmax => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, n + 1], 3.0))];
            grad_check(&inputs, |g, v| g.softmax(v[0]), seed, h)
        }
        OpKind::LogSoftmax => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[m, n + 1], 3.0))];
            grad_check(&inputs, |g, v| g.log_softmax(v[0]), seed, h)
        }
        OpKind::LayerNorm => {
            let d = n + 2;
            let inputs = [
                CheckInput::wrt(random(&mut rng, &[b, m, d], 2.0)),
                CheckInput::wrt(random(&mut rng, &[d], 1.5)),
                CheckInput::wrt(random(&mut rng, &[d], 1.0)),
            ];
            grad_check(&inputs, |g, v| g.layer_norm(v[0], v[1], v[2]), seed, h)
        }
        OpKind::Relu => {
            // Keep inputs well away from the kink.
            let x = Tensor::from_fn(&[m, n], |_| {
                let mag = rng.gen_range(0.01..1.0);
                if rng.gen_bool(0.5) { mag } else { -mag }
            });
            grad_check(&[CheckInput::wrt(x)], |g, v| g.relu(v[0]), seed, h)
        }
        OpKind::Gelu => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, n], 3.0))];
            grad_check(&inputs, |g, v| g.gelu(v[0]), seed, h)
        }
        OpKind::Embedding => {
            let rows = k + 1;
            let ids: Vec<usize> = (0..b * m).map(|_| rng.gen_range(0..rows)).collect();
            let inputs = [CheckInput::wrt(random(&mut rng, &[rows, n], 1.0))];
            grad_check(&inputs, move |g, v| g.embedding(v[0], &ids, &[b, m]), seed, h)
        }
        OpKind::CrossEntropy => {
            let v = n + 1;
            let rows = b * m + 1;
            let mut targets: Vec<Option<usize>> =
                (0..rows).map(|_| if rng.gen_bool(0.25) { None } else { Some(rng.gen_range(0..v)) }).collect();
            targets[0] = Some(rng.gen_range(0..v));
            let inputs = [CheckInput::wrt(random(&mut rng, &[rows, v], 3.0))];
            grad_check(&inputs, move |g, x| g.cross_entropy(x[0], &targets), seed, h)
        }
        OpKind::Dropout => {
            let p = 0.3;
            let mask: Vec<f64> = (0..m * n).map(|_| if rng.gen_bool(p) { 0.0 } else { 1.0 / (1.0 - p) }).collect();
            let inputs = [CheckInput::wrt(random(&mut rng, &[m, n], 1.0))];
            grad_check(&inputs, move |g, v| g.dropout_with_mask(v[0], mask.clone()), seed, h)
        }
        OpKind::CausalMask => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, m], 1.0))];
            grad_check(&inputs, |g, v| g.causal_mask_add(v[0]), seed, h)
        }
        OpKind::SplitHeads => {
            let heads = (seed % 3 + 1) as usize;
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, heads * k], 1.0))];
            grad_check(&inputs, move |g, v| g.split_heads(v[0], heads), seed, h)
        }
        OpKind::MergeHeads => {
            let heads = (seed % 3 + 1) as usize;
            let inputs = [CheckInput::wrt(random(&mut rng, &[b * heads, m, k], 1.0))];
            grad_check(&inputs, move |g, v| g.merge_heads(v[0], heads), seed, h)
        }
        OpKind::Sum => {
            let inputs = [CheckInput::wrt(random(&mut rng, &[b, m, n], 1.0))];
            grad_check(&inputs, |g, v| g.sum(v[0]), seed, h)
        }
    }
}
