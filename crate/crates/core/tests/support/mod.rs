//! Test-only oracles. Nothing here calls into the tape; each routine is a
//! direct scalar-loop transcription of the formula it checks.
#![allow(dead_code)]

use hitkit::attention::{AttnMask, FameLayer, OpaCombine, OpaScore};
use hitkit::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.as_matrix_dims();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn param_mat(store: &ParamStore, id: ParamId) -> Mat {
    to_mat(store.value(id))
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b.at(i, j)).abs());
        }
    }
    m
}

/// Multi-head self-attention by explicit loops.
pub fn msa_oracle(store: &ParamStore, l: &FameLayer, x: &Mat, mask: &AttnMask) -> Mat {
    let q = matmul(x, &param_mat(store, l.wq_self));
    let k = matmul(x, &param_mat(store, l.wk_self));
    let v = matmul(x, &param_mat(store, l.wv_self));
    let n = x.len();
    let d = l.cfg.d_model;
    let dh = d / l.cfg.n_heads;
    let mut z = vec![vec![0.0; d]; n];
    for h in 0..l.cfg.n_heads {
        for t in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&i| mask.allows(t, i)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&i| {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[t][c] * k[i][c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            for (w, &i) in a.iter().zip(&keys) {
                for c in h * dh..(h + 1) * dh {
                    z[t][c] += w * v[i][c];
                }
            }
        }
    }
    matmul(&z, &param_mat(store, l.wo_self))
}

/// Outer-product attention by explicit loops.
pub fn opa_oracle(store: &ParamStore, l: &FameLayer, x: &Mat, mask: &AttnMask) -> Mat {
    let q = matmul(x, &param_mat(store, l.wq_outer));
    let k = matmul(x, &param_mat(store, l.wk_outer));
    let v = matmul(x, &param_mat(store, l.wv_outer));
    let n = x.len();
    let d = l.cfg.d_model;
    let mut flat = Vec::with_capacity(n);
    for t in 0..n {
        let mut acc = match l.cfg.opa_combine {
            OpaCombine::TrueOuterProjected => vec![0.0; d * d],
            OpaCombine::Hadamard => vec![0.0; d],
        };
        for i in (0..n).filter(|&i| mask.allows(t, i)) {
            let pre: Vec<f64> = (0..d).map(|a| q[t][a] * k[i][a] / (d as f64).sqrt()).collect();
            let s = match l.cfg.opa_score {
                OpaScore::Tanh => pre.iter().map(|p| p.tanh()).collect(),
                OpaScore::Softmax => softmax(&pre),
            };
            match l.cfg.opa_combine {
                OpaCombine::TrueOuterProjected => {
                    for a in 0..d {
                        for b in 0..d {
                            acc[a * d + b] += s[a] * v[i][b];
                        }
                    }
                }
                OpaCombine::Hadamard => {
                    for a in 0..d {
                        acc[a] += s[a] * v[i][a];
                    }
                }
            }
        }
        flat.push(acc);
    }
    matmul(&flat, &param_mat(store, l.wo_outer))
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn toy_vocab(docs: &[&str]) -> hitkit::data::Vocab {
    let corpus: Vec<Vec<String>> = docs.iter().map(|d| words(d)).collect();
    hitkit::data::Vocab::build(&corpus, 1).unwrap()
}

pub fn example(vocab: &hitkit::data::Vocab, text: &str) -> hitkit::data::EncodedExample {
    hitkit::data::encode_tokens("t", &words(text), vocab, hitkit::data::Limits::default()).unwrap()
}

pub fn tiny_encoder_cfg() -> hitkit::encoders::EncoderConfig {
    hitkit::encoders::EncoderConfig {
        d_model: 8,
        n_heads: 2,
        l_c: 1,
        l_w: 1,
        d_ff: 16,
        dropout: 0.0,
        ..Default::default()
    }
}

pub type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> hitkit::Result<Var>>);

/// One small composite per differentiable primitive, each reduced to a
/// scalar so central differences apply.
pub fn op_gradcheck_cases() -> Vec<OpCase> {
    let mut rng = rng(7);
    let a23 = rand_tensor(&[2, 3], &mut rng);
    let b23 = rand_tensor(&[2, 3], &mut rng);
    let b34 = rand_tensor(&[3, 4], &mut rng);
    let v3 = rand_tensor(&[3], &mut rng);
    let w3 = rand_tensor(&[3], &mut rng);
    let weights = rand_tensor(&[2, 4], &mut rng);

    let wt = weights.clone();
    let w23 = b23.clone();
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![a23.clone(), b34.clone()], Box::new(move |g, x| {
            let z = g.matmul(x[0], x[1])?;
            let w = g.constant(wt.clone());
            let p = g.mul(z, w)?;
            Ok(g.sum(p))
        })),
        ("transpose", vec![a23.clone()], Box::new(move |g, x| {
            let t = g.transpose(x[0])?;
            let w = g.constant(w23.clone());
            let wt = g.transpose(w)?;
            let p = g.mul(t, wt)?;
            Ok(g.sum(p))
        })),
        ("add_sub_mul", vec![a23.clone(), b23.clone()], Box::new(|g, x| {
            let s = g.add(x[0], x[1])?;
            let d = g.sub(s, x[1])?;
            let m = g.mul(d, x[1])?;
            let m2 = g.mul(m, x[0])?;
            Ok(g.sum(m2))
        })),
        ("scale_tanh_relu_sigmoid", vec![a23.clone()], Box::new(|g, x| {
            let s = g.scale(x[0], 1.7);
            let t = g.tanh(s);
            let r = g.relu(x[0]);
            let q = g.sigmoid(x[0]);
            let a = g.mul(t, r)?;
            let b = g.add(a, q)?;
            let b2 = g.mul(b, b)?;
            Ok(g.sum(b2))
        })),
        ("scalar_mul_index", vec![v3.clone(), a23.clone()], Box::new(|g, x| {
            let s = g.index(x[0], 1)?;
            let z = g.scalar_mul(s, x[1])?;
            let z2 = g.mul(z, x[1])?;
            Ok(g.sum(z2))
        })),
        ("softmax_axis0_axis1", vec![a23.clone(), b23.clone()], Box::new(|g, x| {
            let p0 = g.softmax(x[0], 0)?;
            let p1 = g.softmax(x[0], 1)?;
            let a = g.mul(p0, x[1])?;
            let b = g.mul(p1, x[1])?;
            let c = g.add(a, b)?;
            let c2 = g.mul(c, c)?;
            Ok(g.sum(c2))
        })),
        ("layer_norm", vec![a23.clone(), v3.clone(), w3.clone(), b23.clone()], Box::new(|g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            let p = g.mul(y, x[3])?;
            Ok(g.sum(p))
        })),
        ("gather", vec![b34.clone(), rand_tensor(&[3, 4], &mut rng)], Box::new(|g, x| {
            let e = g.gather(x[0], &[2, 0, 2])?;
            let w = g.slice_rows(x[1], 0, 3)?;
            let p = g.mul(e, w)?;
            Ok(g.sum(p))
        })),
        ("outer_product", vec![v3.clone(), w3.clone(), rand_tensor(&[3, 3], &mut rng)], Box::new(|g, x| {
            let o = g.outer_product(x[0], x[1])?;
            let p = g.mul(o, x[2])?;
            Ok(g.sum(p))
        })),
        ("row_vec_ops", vec![a23.clone(), v3.clone(), w3.clone()], Box::new(|g, x| {
            let a = g.add_row_vec(x[0], x[1])?;
            let m = g.mul_row_vec(a, x[2])?;
            let t = g.tanh(m);
            let s = g.sum_rows(t)?;
            let s2 = g.mul(s, s)?;
            Ok(g.sum(s2))
        })),
        ("reshape_slice_concat", vec![a23.clone(), b23.clone()], Box::new(|g, x| {
            let c = g.slice_cols(x[0], 1, 2)?;
            let r = g.slice_rows(x[1], 1, 1)?;
            let rr = g.reshape(r, &[3, 1])?;
            let rc = g.slice_rows(rr, 0, 2)?;
            let cat = g.concat_cols(&[c, rc])?;
            let stack = g.concat_rows(&[cat, x[0]])?;
            let t = g.tanh(stack);
            let t2 = g.mul(t, stack)?;
            Ok(g.sum(t2))
        })),
        ("cross_entropy", vec![rand_tensor(&[3, 4], &mut rng)], Box::new(|g, x| {
            g.cross_entropy(x[0], &[1, -1, 3], Some(-1))
        })),
        ("bce_with_logits", vec![v3.clone()], Box::new(|g, x| {
            g.bce_with_logits(x[0], &[1.0, 0.0, 1.0])
        })),
        ("cosine", vec![v3.clone(), w3.clone()], Box::new(|g, x| {
            let c = g.cosine(x[0], x[1])?;
            let c2 = g.mul(c, c)?;
            let s = g.sum(c2);
            g.add(s, c)
        })),
    ];
    cases
}
