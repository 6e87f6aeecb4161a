#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riformer::tensor::gradcheck::gradcheck;
use riformer::tensor::kernels::ConvGeometry;
use riformer::tensor::{Tape, Tensor, Var};
use riformer::model::Model;
use riformer::Result;

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

type Body = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct KernelCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub body: Body,
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn case(name: &'static str, shapes: &[&[usize]], body: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> KernelCase {
    KernelCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        body: Box::new(body),
    }
}

const X: &[usize] = &[2, 3, 4, 4];

/// One case per differentiable tape kernel.
pub fn kernel_cases() -> Vec<KernelCase> {
    vec![
        case("add", &[X, X], |t, v| t.add(v[0], v[1])),
        case("sub", &[X, X], |t, v| t.sub(v[0], v[1])),
        case("mul", &[X, X], |t, v| t.mul(v[0], v[1])),
        case("scale", &[X], |t, v| t.scale(v[0], -1.7)),
        case("gelu", &[X], |t, v| t.gelu(v[0])),
        case("channel_mul", &[X, &[3]], |t, v| t.channel_mul(v[0], v[1])),
        case("channel_affine", &[X, &[3], &[3]], |t, v| t.channel_affine(v[0], v[1], v[2])),
        case("group_norm", &[X, &[3], &[3]], |t, v| t.group_norm(v[0], v[1], v[2], 1e-5)),
        case("avg_pool_same", &[&[2, 3, 5, 5]], |t, v| t.avg_pool_same(v[0], 3)),
        case("conv2d", &[&[2, 3, 7, 7], &[4, 3, 3, 3], &[4]], |t, v| {
            t.conv2d(v[0], v[1], v[2], ConvGeometry { kernel: 3, stride: 2, padding: 1 })
        }),
        case("pointwise", &[X, &[5, 3], &[5]], |t, v| t.pointwise(v[0], v[1], v[2])),
        case("linear", &[&[3, 6], &[4, 6], &[4]], |t, v| t.linear(v[0], v[1], v[2])),
        case("spatial_mean", &[X], |t, v| t.spatial_mean(v[0])),
        case("relation_matrix", &[X], |t, v| t.relation_matrix(v[0])),
        case("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
        case("log_softmax", &[&[3, 5]], |t, v| t.log_softmax(v[0])),
        case("sum", &[X], |t, v| t.sum(v[0])),
        case("mean", &[X], |t, v| t.mean(v[0])),
        case("mse", &[X, X], |t, v| t.mse(v[0], v[1])),
        case("kl_div", &[&[3, 5], &[3, 5]], |t, v| t.kl_div(v[0], v[1])),
        case("cross_entropy", &[&[4, 5]], |t, v| t.cross_entropy(v[0], &[0, 3, 4, 1], 0.1)),
    ]
}

/// Worst relative error of each kernel over `seeds` random draws.
pub fn gradient_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    kernel_cases()
        .into_iter()
        .map(|c| {
            let worst = (0..seeds)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let inputs: Vec<Tensor> = c.shapes.iter().map(|s| random(s, &mut rng)).collect();
                    gradcheck(&inputs, FD_STEP, seed, &c.body).map(|r| r.max_rel_err()).unwrap_or(f64::INFINITY)
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}

/// Pushes norm affines, mixer coefficients and layer scales away from their
/// init so that fusion has something to absorb.
pub fn randomize(model: &Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.params.clone();
    params.visit_mut(|name, t| {
        let (lo, hi) = if name.ends_with("mixer.s") || name.contains("norm") && name.ends_with("weight") {
            (0.5, 1.5)
        } else if name.ends_with("mixer.t") || name.contains("norm") && name.ends_with("bias") {
            (-0.5, 0.5)
        } else if name.contains("layer_scale") {
            (0.05, 0.5)
        } else {
            return;
        };
        for v in t.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    });
    Model::from_params(model.spec(), params).expect("same structure")
}
