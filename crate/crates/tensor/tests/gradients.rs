use moe_tensor::gradcheck::{check_inputs, check_params, DEFAULT_EPS};
use moe_tensor::nn::{attention, AttnMask, FeedForward, GruCell, LayerNorm, Linear, Mlp, MultiHeadAttention};
use moe_tensor::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_inputs(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let errs = check_inputs(inputs, DEFAULT_EPS, |g, v| {
        let y = f(g, v)?;
        project(g, y, 99)
    })
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e <= TOL, "{name}: input {i} relative error {e}");
    }
}

fn assert_params(name: &str, store: &mut ParamStore, f: impl Fn(&mut Graph) -> Result<Var>) {
    let ids: Vec<_> = store.ids().collect();
    let checks = check_params(store, &ids, DEFAULT_EPS, |g| {
        let y = f(g)?;
        project(g, y, 98)
    })
    .unwrap();
    for c in checks {
        assert!(c.rel_error <= TOL, "{name}: {} relative error {}", c.name, c.rel_error);
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let pos = random(&mut rng, &[3, 4], 0.5, 2.0);
    let row = random(&mut rng, &[4], 0.5, 2.0);
    let col = random(&mut rng, &[3, 1], 0.5, 2.0);
    for (name, f) in [
        ("add", (|g: &mut Graph, v: &[Var]| g.add(v[0], v[1])) as fn(&mut Graph, &[Var]) -> Result<Var>),
        ("sub", |g, v| g.sub(v[0], v[1])),
        ("mul", |g, v| g.mul(v[0], v[1])),
        ("div", |g, v| g.div(v[0], v[1])),
    ] {
        assert_inputs(name, &[a.clone(), pos.clone()], f);
        assert_inputs(name, &[a.clone(), row.clone()], f);
        assert_inputs(name, &[a.clone(), col.clone()], f);
    }
    let mid3 = random(&mut rng, &[2, 1, 3], 0.5, 2.0);
    let a3 = random(&mut rng, &[2, 4, 3], -2.0, 2.0);
    assert_inputs("mul general broadcast", &[a3, mid3], |g, v| g.mul(v[0], v[1]));
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // keep clear of the kinks of relu/abs and of the domain edges of log/sqrt
    let signed: Vec<f64> = (0..8)
        .map(|i| {
            let m = rng.random_range(0.1..2.0);
            if i % 2 == 0 { m } else { -m }
        })
        .collect();
    let signed = Tensor::new(vec![2, 4], signed).unwrap();
    let pos = random(&mut rng, &[2, 4], 0.3, 2.0);
    assert_inputs("neg", &[signed.clone()], |g, v| Ok(g.neg(v[0])));
    assert_inputs("relu", &[signed.clone()], |g, v| Ok(g.relu(v[0])));
    assert_inputs("sigmoid", &[signed.clone()], |g, v| Ok(g.sigmoid(v[0])));
    assert_inputs("tanh", &[signed.clone()], |g, v| Ok(g.tanh(v[0])));
    assert_inputs("exp", &[signed.clone()], |g, v| Ok(g.exp(v[0])));
    assert_inputs("softplus", &[signed.clone()], |g, v| Ok(g.softplus(v[0])));
    assert_inputs("abs", &[signed.clone()], |g, v| Ok(g.abs(v[0])));
    assert_inputs("square", &[signed.clone()], |g, v| Ok(g.square(v[0])));
    assert_inputs("wrap_angle", &[signed.clone()], |g, v| Ok(g.wrap_angle(v[0])));
    assert_inputs("scale", &[signed.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
    assert_inputs("add_scalar", &[signed], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    assert_inputs("log", &[pos.clone()], |g, v| Ok(g.log(v[0])));
    assert_inputs("sqrt", &[pos.clone()], |g, v| Ok(g.sqrt(v[0])));
    assert_inputs("recip", &[pos], |g, v| Ok(g.recip(v[0])));
}

#[test]
fn matmul_and_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 5], -1.0, 1.0);
    let bb = random(&mut rng, &[2, 4, 5], -1.0, 1.0);
    assert_inputs("matmul", &[a.clone(), b], |g, v| g.matmul(v[0], v[1]));
    assert_inputs("batch matmul", &[a.clone(), bb], |g, v| g.matmul(v[0], v[1]));
    assert_inputs("permute", &[a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    assert_inputs("transpose", &[a.clone()], |g, v| g.transpose(v[0]));
    assert_inputs("reshape", &[a.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    assert_inputs("softmax", &[a.clone()], |g, v| Ok(g.softmax(v[0])));
    assert_inputs("sum_axis", &[a.clone()], |g, v| g.sum_axis(v[0], 1));
    assert_inputs("mean_axis", &[a.clone()], |g, v| g.mean_axis(v[0], 2));
    assert_inputs("sum", &[a.clone()], |g, v| Ok(g.sum(v[0])));
    assert_inputs("mean", &[a.clone()], |g, v| Ok(g.mean(v[0])));
    assert_inputs("slice", &[a.clone()], |g, v| g.slice(v[0], 1, 1, 2));
    assert_inputs("index_select", &[a.clone()], |g, v| g.index_select(v[0], 1, &[2, 0, 2]));
    assert_inputs("pad", &[a.clone()], |g, v| g.pad(v[0], 1, 2, 1));
    assert_inputs("expand", &[a.clone()], |g, v| g.expand(v[0], 3));
    let c = random(&mut rng, &[2, 2, 4], -1.0, 1.0);
    assert_inputs("concat", &[a.clone(), c.clone()], |g, v| g.concat(&[v[0], v[1], v[0]], 1));
    let s = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    assert_inputs("stack", &[a, s], |g, v| g.stack(&[v[0], v[1]], 1));
    let m = random(&mut rng, &[3, 5], -1.0, 1.0);
    assert_inputs("select_cols", &[m.clone()], |g, v| g.select_cols(v[0], &[4, 1, 0, 0, 2, 3], 2));
    assert_inputs("cross_entropy", &[m], |g, v| g.cross_entropy(v[0], &[1, 4, 0]));
    let img = random(&mut rng, &[2, 5, 4, 3], -1.0, 1.0);
    assert_inputs("im2col", &[img], |g, v| g.im2col(v[0], 3, 2, 1));
}

#[test]
fn layer_norm_inputs_and_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 5], -2.0, 2.0);
    let gain = random(&mut rng, &[5], 0.5, 1.5);
    let bias = random(&mut rng, &[5], -0.5, 0.5);
    assert_inputs("layer_norm", &[x, gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn masked_attention_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let k = random(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let v = random(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let mask = AttnMask::key_prefix(3, 5, &[2, 5]).unwrap();
    assert_inputs("attention", &[q, k, v], |g, x| attention(g, x[0], x[1], x[2], Some(&mask)));
}

#[test]
fn parameterized_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[2, 3, 8], -1.0, 1.0);
    let kv = random(&mut rng, &[2, 4, 8], -1.0, 1.0);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 8, 5, &mut rng);
    let xv = x.clone();
    assert_params("linear", &mut store.clone(), move |g| {
        let x = g.constant(xv.clone());
        lin.forward(g, x)
    });

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[8, 6, 6, 3], &mut rng);
    let xv = x.clone();
    assert_params("mlp", &mut store, move |g| {
        let x = g.constant(xv.clone());
        mlp.forward(g, x)
    });

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 8);
    let xv = x.clone();
    assert_params("layer_norm", &mut store, move |g| {
        let x = g.constant(xv.clone());
        ln.forward(g, x)
    });

    let mut store = ParamStore::new();
    let ff = FeedForward::new(&mut store, "ff", 8, 16, &mut rng);
    let xv = x.clone();
    assert_params("feed_forward", &mut store, move |g| {
        let x = g.constant(xv.clone());
        ff.forward(g, x)
    });

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng);
    let mask = AttnMask::key_prefix(3, 4, &[1, 3]).unwrap();
    let (xv, kvv) = (x.clone(), kv.clone());
    assert_params("multi-head attention", &mut store, move |g| {
        let x = g.constant(xv.clone());
        let kv = g.constant(kvv.clone());
        mha.forward(g, x, kv, Some(&mask))
    });

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 8, 4, &mut rng);
    for id in [gru.b_ih, gru.b_hh] {
        *store.get_mut(id) = random(&mut rng, &[12], -0.5, 0.5);
    }
    let h0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let xs = random(&mut rng, &[3, 8], -1.0, 1.0);
    assert_params("gru", &mut store, move |g| {
        let x = g.constant(xs.clone());
        let mut h = g.constant(h0.clone());
        for _ in 0..3 {
            h = gru.forward(g, x, h)?;
        }
        Ok(h)
    });
}
