//! Central finite-difference checks (float64, eps 1e-4, tolerance 1e-3) for
//! every differentiable primitive and the attack objectives.

use gradleak::attack::{gradient_matching_objective, inversion_objective};
use gradleak::model::{Architecture, Model, ModelSpec};
use gradleak::tensor::gradcheck::{finite_diff_check, GradCheckReport};
use gradleak::tensor::{Graph, Primitive, Result, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(n, seed, -1.0, 1.0)).unwrap()
}

/// `sum(out * c)` for a fixed random `c`, so that every output coordinate
/// contributes with a distinct weight.
fn project(g: &mut Graph<f64>, out: TensorId, seed: u64) -> Result<TensorId> {
    let shape = g.shape(out).to_vec();
    let c = g.constant(&shape, rand_vec(g.value(out).len(), seed, -1.0, 1.0))?;
    let m = g.mul(out, c)?;
    g.sum(m)
}

fn check<F>(name: &str, point: &Tensor<f64>, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, TensorId) -> Result<TensorId>,
{
    let r = finite_diff_check(f, point, EPS).unwrap();
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error <= TOL, "{name}: {r:?}");
    r
}

#[test]
fn matmul_both_operands() {
    let b = rand_t(&[4, 2], 2);
    check("matmul lhs", &rand_t(&[3, 4], 1), |g, x| {
        let w = g.constant(&[4, 2], b.data().to_vec())?;
        let y = g.matmul(x, w)?;
        project(g, y, 9)
    });
    let a = rand_t(&[3, 4], 1);
    check("matmul rhs", &b, |g, w| {
        let x = g.constant(&[3, 4], a.data().to_vec())?;
        let y = g.matmul(x, w)?;
        project(g, y, 9)
    });
}

#[test]
fn transpose() {
    check("transpose", &rand_t(&[3, 5], 3), |g, x| {
        let y = g.transpose(x)?;
        project(g, y, 4)
    });
}

#[test]
fn conv2d_input_and_kernel_with_stride_and_padding() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let w = rand_t(&[3, 2, 3, 3], 5);
        check(
            &format!("conv2d input s{stride} p{pad}"),
            &rand_t(&[2, 2, 5, 6], 6),
            |g, x| {
                let k = g.constant(&[3, 2, 3, 3], w.data().to_vec())?;
                let y = g.conv2d(x, k, stride, pad)?;
                project(g, y, 7)
            },
        );
        let x0 = rand_t(&[2, 2, 5, 6], 6);
        check(&format!("conv2d kernel s{stride} p{pad}"), &w, |g, k| {
            let x = g.constant(&[2, 2, 5, 6], x0.data().to_vec())?;
            let y = g.conv2d(x, k, stride, pad)?;
            project(g, y, 7)
        });
    }
}

#[test]
fn conv2d_adjoints() {
    let w = rand_t(&[3, 2, 3, 3], 10);
    check(
        "conv2d_input_grad upstream",
        &rand_t(&[2, 3, 4, 4], 11),
        |g, gy| {
            let k = g.constant(&[3, 2, 3, 3], w.data().to_vec())?;
            let y = g.conv2d_input_grad(gy, k, (4, 4), 1, 1)?;
            project(g, y, 12)
        },
    );
    let gy0 = rand_t(&[2, 3, 4, 4], 11);
    check("conv2d_input_grad kernel", &w, |g, k| {
        let gy = g.constant(&[2, 3, 4, 4], gy0.data().to_vec())?;
        let y = g.conv2d_input_grad(gy, k, (4, 4), 1, 1)?;
        project(g, y, 12)
    });
    let x0 = rand_t(&[2, 2, 4, 4], 13);
    check("conv2d_weight_grad input", &x0, |g, x| {
        let gy = g.constant(&[2, 3, 4, 4], gy0.data().to_vec())?;
        let y = g.conv2d_weight_grad(x, gy, (3, 3), 1, 1)?;
        project(g, y, 14)
    });
    check("conv2d_weight_grad upstream", &gy0, |g, gy| {
        let x = g.constant(&[2, 2, 4, 4], x0.data().to_vec())?;
        let y = g.conv2d_weight_grad(x, gy, (3, 3), 1, 1)?;
        project(g, y, 14)
    });
}

#[test]
fn elementwise_ops() {
    let other = rand_t(&[2, 3], 21);
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        check(name, &rand_t(&[2, 3], 20), |g, x| {
            let o = g.constant(&[2, 3], other.data().to_vec())?;
            let y = match op {
                0 => g.add(x, o)?,
                1 => g.sub(o, x)?,
                _ => g.mul(x, o)?,
            };
            project(g, y, 22)
        });
    }
    check("scale", &rand_t(&[2, 3], 23), |g, x| {
        let y = g.scale(x, -1.7)?;
        project(g, y, 24)
    });
    check("mul_scalar", &rand_t(&[1], 25), |g, s| {
        let a = g.constant(&[2, 3], other.data().to_vec())?;
        let s = g.reshape(s, &[])?;
        let y = g.mul_scalar(a, s)?;
        project(g, y, 26)
    });
}

#[test]
fn bias_and_channel_reductions() {
    let a0 = rand_t(&[2, 3, 2, 2], 30);
    check("bias_add bias", &rand_t(&[3], 31), |g, b| {
        let a = g.constant(&[2, 3, 2, 2], a0.data().to_vec())?;
        let y = g.bias_add(a, b)?;
        project(g, y, 32)
    });
    check("bias_add input", &a0, |g, a| {
        let b = g.constant(&[3], vec![0.1, -0.2, 0.3])?;
        let y = g.bias_add(a, b)?;
        project(g, y, 32)
    });
    check("channel_sum", &a0, |g, a| {
        let y = g.channel_sum(a)?;
        project(g, y, 33)
    });
    check("sum", &a0, |g, a| {
        let y = g.relu(a)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check("row_sum", &rand_t(&[3, 4], 34), |g, a| {
        let y = g.row_sum(a)?;
        project(g, y, 35)
    });
}

#[test]
fn relu_away_from_kinks() {
    let r = check("relu", &rand_t(&[4, 5], 40), |g, x| {
        let y = g.relu(x)?;
        project(g, y, 41)
    });
    assert!(r.excluded.is_empty());
}

#[test]
fn shape_ops_and_pooling() {
    check("reshape", &rand_t(&[2, 6], 50), |g, x| {
        let y = g.reshape(x, &[3, 4])?;
        project(g, y, 51)
    });
    check("flatten", &rand_t(&[2, 2, 2, 3], 52), |g, x| {
        let y = g.flatten(x)?;
        project(g, y, 53)
    });
    check("avgpool2d", &rand_t(&[2, 2, 5, 4], 54), |g, x| {
        let y = g.avgpool2d(x, 2)?;
        project(g, y, 55)
    });
    check("avgpool2d_adjoint", &rand_t(&[2, 2, 2, 2], 56), |g, x| {
        let y = g.avgpool2d_adjoint(x, 2, (4, 5))?;
        project(g, y, 57)
    });
}

#[test]
fn softmax_and_cross_entropy() {
    check("softmax", &rand_t(&[3, 5], 60), |g, x| {
        let y = g.softmax(x)?;
        project(g, y, 61)
    });
    check("softmax_cross_entropy", &rand_t(&[4, 5], 62), |g, x| {
        g.softmax_cross_entropy(x, &[0, 4, 2, 2])
    });
    check(
        "softmax_cross_entropy single row",
        &rand_t(&[5], 63),
        |g, x| g.softmax_cross_entropy(x, &[3]),
    );
}

#[test]
fn objective_ops() {
    let target = rand_vec(12, 70, -1.0, 1.0);
    check("row_cosine_distance", &rand_t(&[3, 4], 71), |g, x| {
        let y = g.row_cosine_distance(x, &target)?;
        project(g, y, 72)
    });
    let t2 = vec![rand_vec(6, 73, -1.0, 1.0), rand_vec(4, 74, -1.0, 1.0)];
    let b0 = rand_t(&[4], 75);
    check("cosine_distance", &rand_t(&[2, 3], 76), |g, a| {
        let b = g.constant(&[4], b0.data().to_vec())?;
        g.cosine_distance(&[a, b], t2.clone())
    });
    let img = Tensor::new(vec![2, 2, 4, 5], rand_vec(80, 77, 0.0, 1.0)).unwrap();
    check("total_variation", &img, |g, x| {
        let y = g.total_variation(x)?;
        project(g, y, 78)
    });
}

#[test]
fn primitive_dispatch_table() {
    let cases: [(Primitive, Vec<usize>, usize); 8] = [
        (Primitive::MatMul, vec![2, 3], 2),
        (Primitive::Conv2d { stride: 1, pad: 1 }, vec![1, 2, 4, 4], 2),
        (Primitive::Add, vec![2, 3], 2),
        (Primitive::Sub, vec![2, 3], 2),
        (Primitive::Scale(0.3), vec![2, 3], 1),
        (Primitive::Relu, vec![2, 3], 1),
        (Primitive::Flatten, vec![2, 2, 2, 2], 1),
        (Primitive::AvgPool2d { k: 2 }, vec![1, 2, 4, 4], 1),
    ];
    for (i, (prim, shape, arity)) in cases.into_iter().enumerate() {
        let point = rand_t(&shape, 80 + i as u64);
        check(&format!("{prim:?}"), &point, |g, x| {
            let second = match prim {
                Primitive::MatMul => Some(g.constant(&[3, 2], rand_vec(6, 90, -1.0, 1.0))?),
                Primitive::Conv2d { .. } => {
                    Some(g.constant(&[3, 2, 3, 3], rand_vec(54, 91, -1.0, 1.0))?)
                }
                _ if arity == 2 => Some(g.constant(&shape, rand_vec(point.len(), 92, -1.0, 1.0))?),
                _ => None,
            };
            let inputs: Vec<TensorId> = std::iter::once(x).chain(second).collect();
            let y = g.apply(prim, &inputs)?;
            project(g, y, 93)
        });
    }
}

fn small_model(arch: Architecture, shape: [usize; 3], k: usize, seed: u64) -> Model<f64> {
    let spec = ModelSpec::new(arch, shape, k).unwrap();
    Model::<f32>::build(spec, seed).unwrap().cast::<f64>()
}

#[test]
fn small_convnet_loss_wrt_input() {
    let m = small_model(Architecture::ConvSmall, [1, 16, 16], 4, 1);
    let x = Tensor::new(vec![2, 1, 16, 16], rand_vec(512, 100, 0.0, 1.0)).unwrap();
    check("conv-small input", &x, |g, x| {
        let p = m.bind(g, false);
        let a = m.logits(g, &p, x).map_err(model_err)?;
        g.softmax_cross_entropy(a, &[1, 3])
    });
}

#[test]
fn second_order_gradient_norm() {
    let m = small_model(Architecture::MlpSmall, [1, 4, 4], 3, 2);
    let x = Tensor::new(vec![2, 1, 4, 4], rand_vec(32, 101, 0.0, 1.0)).unwrap();
    check("double backward", &x, |g, x| {
        let p = m.bind(g, true);
        let a = m.logits(g, &p, x).map_err(model_err)?;
        let loss = g.softmax_cross_entropy(a, &[0, 2])?;
        let grads = g.gradients(loss, p.ids(), true)?;
        let mut total = None;
        for gr in grads {
            let sq = g.mul(gr, gr)?;
            let s = g.sum(sq)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.expect("model has parameters"))
    });
}

fn model_err(e: gradleak::model::ModelError) -> gradleak::tensor::TensorError {
    match e {
        gradleak::model::ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Checks an objective's returned gradient against central differences of
/// its returned value.
fn check_objective(name: &str, z: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> (f64, Vec<f64>)) {
    let (_, analytic) = f(z);
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = z.clone();
        p.data_mut()[i] += EPS;
        let mut q = z.clone();
        q.data_mut()[i] -= EPS;
        let numeric = (f(&p).0 - f(&q).0) / (2.0 * EPS);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= TOL, "{name}: worst relative error {worst}");
}

#[test]
fn inversion_objective_gradient() {
    let m = small_model(Architecture::MlpSmall, [1, 5, 5], 3, 3);
    let target = rand_vec(128, 110, 0.0, 1.0);
    let z = Tensor::new(vec![2, 1, 5, 5], rand_vec(50, 111, 0.1, 0.9)).unwrap();
    check_objective("inversion objective", &z, |z| {
        let (rows, grad) = inversion_objective(&m, z, &target, 1e-2).unwrap();
        (rows.iter().sum(), grad)
    });
}

#[test]
fn gradient_matching_objective_gradient() {
    let m = small_model(Architecture::MlpSmall, [1, 4, 4], 3, 4);
    let targets: Vec<Vec<f64>> = m
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| rand_vec(p.len(), 120 + i as u64, -1.0, 1.0))
        .collect();
    let z = Tensor::new(vec![2, 1, 4, 4], rand_vec(32, 121, 0.1, 0.9)).unwrap();
    check_objective("gradient matching objective", &z, |z| {
        gradient_matching_objective(&m, &targets, &[0, 2], z, 1e-2).unwrap()
    });
    let conv = small_model(Architecture::ConvSmall, [1, 16, 16], 3, 5);
    let targets: Vec<Vec<f64>> = conv
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| rand_vec(p.len(), 130 + i as u64, -1.0, 1.0))
        .collect();
    let z = Tensor::new(vec![1, 1, 16, 16], rand_vec(256, 131, 0.1, 0.9)).unwrap();
    check_objective("gradient matching objective conv", &z, |z| {
        gradient_matching_objective(&conv, &targets, &[1], z, 1e-2).unwrap()
    });
}
