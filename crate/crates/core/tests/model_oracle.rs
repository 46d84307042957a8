//! Independent straight-line reimplementation of the encoder and scoring
//! heads, plus end-to-end gradient and symmetry checks.

use listcon::model::{list_encode, record_full, score, AttentionVariant, FeatureMode, ModelConfig, ModelParams, Ranker};
use listcon::numerics::{finite_diff_grad, max_relative_error, Graph, ParamStore, Tensor, DEFAULT_FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn get(store: &ParamStore, name: &str) -> Tensor {
    store.get(name).unwrap().clone()
}

fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    row.iter().enumerate().map(|(i, x)| (x - mean) * inv * gain[i] + bias[i]).collect()
}

fn allowed(variant: AttentionVariant, r: usize, c: usize) -> bool {
    match variant {
        AttentionVariant::List => r != 0 || c == 0,
        AttentionVariant::Bidirectional => true,
        AttentionVariant::Passage => r == 0 || c == 0 || c == r,
    }
}

fn encode(p: &ParamStore, cfg: &ModelConfig, hq: &[f64], hs: &[Vec<f64>]) -> Mat {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let eq = vecf(&get(p, "e_q"));
    let ep = vecf(&get(p, "e_p"));
    let mut z: Mat = vec![hq.iter().zip(&eq).map(|(a, b)| a + b).collect()];
    for h in hs {
        z.push(h.iter().zip(&ep).map(|(a, b)| a + b).collect());
    }
    let n = z.len();
    for l in 0..cfg.layers {
        let w = |s: &str| get(p, &format!("layers.{l}.{s}"));
        let q = mul(&z, &mat(&w("attn.w_q")));
        let k = mul(&z, &mat(&w("attn.w_k")));
        let v = mul(&z, &mat(&w("attn.w_v")));
        let mut joined = vec![vec![0.0; d]; n];
        for head in 0..cfg.heads {
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if allowed(cfg.attention, i, j) {
                        let mut s = 0.0;
                        for c in head * dh..(head + 1) * dh {
                            s += q[i][c] * k[j][c];
                        }
                        logits[j] = s / (dh as f64).sqrt();
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|x| if x.is_finite() { (x - m).exp() } else { 0.0 }).collect();
                let total: f64 = e.iter().sum();
                for c in head * dh..(head + 1) * dh {
                    joined[i][c] = (0..n).map(|j| e[j] / total * v[j][c]).sum();
                }
            }
        }
        let attn = mul(&joined, &mat(&w("attn.w_o")));
        let (g1, b1) = (vecf(&w("ln1.gain")), vecf(&w("ln1.bias")));
        let z1: Mat = (0..n)
            .map(|i| {
                let r: Vec<f64> = (0..d).map(|c| z[i][c] + attn[i][c]).collect();
                layer_norm(&r, &g1, &b1)
            })
            .collect();
        let fb1 = vecf(&w("ffn.b1"));
        let fb2 = vecf(&w("ffn.b2"));
        let hidden: Mat = mul(&z1, &mat(&w("ffn.w1")))
            .into_iter()
            .map(|r| r.iter().zip(&fb1).map(|(a, b)| gelu(a + b)).collect())
            .collect();
        let ff = mul(&hidden, &mat(&w("ffn.w2")));
        let (g2, b2) = (vecf(&w("ln2.gain")), vecf(&w("ln2.bias")));
        z = (0..n)
            .map(|i| {
                let r: Vec<f64> = (0..d).map(|c| z1[i][c] + ff[i][c] + fb2[c]).collect();
                layer_norm(&r, &g2, &b2)
            })
            .collect();
    }
    z
}

fn mlp(p: &ParamStore, head: &str, x: &[f64]) -> f64 {
    let w1 = mat(&get(p, &format!("{head}.w1")));
    let b1 = vecf(&get(p, &format!("{head}.b1")));
    let w2 = mat(&get(p, &format!("{head}.w2")));
    let b2 = vecf(&get(p, &format!("{head}.b2")))[0];
    let hidden: Vec<f64> = (0..b1.len())
        .map(|j| gelu((0..x.len()).map(|i| x[i] * w1[i][j]).sum::<f64>() + b1[j]))
        .collect();
    (0..hidden.len()).map(|j| hidden[j] * w2[j][0]).sum::<f64>() + b2
}

fn oracle_scores(p: &ParamStore, cfg: &ModelConfig, hq: &[f64], hs: &[Vec<f64>]) -> Vec<(f64, f64, f64)> {
    let z = encode(p, cfg, hq, hs);
    hs.iter()
        .enumerate()
        .map(|(i, h)| {
            let so = mlp(p, "mlp_ori", &[hq, h.as_slice()].concat());
            let sl = mlp(p, "mlp_list", &[z[0].as_slice(), z[i + 1].as_slice()].concat());
            (so, sl, sigmoid(mlp(p, "mlp_fused", &[so, sl])))
        })
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn oracle_config(variant: AttentionVariant) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        ffn_dim: 16,
        attention: variant,
        seed: 2024,
        ..ModelConfig::new(8)
    }
}

#[test]
fn encoder_and_scores_match_straight_line_oracle() {
    for variant in AttentionVariant::ALL {
        let cfg = oracle_config(variant);
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hq = rand_vec(&mut rng, 8);
        let hs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 8)).collect();
        let tq = Tensor::vector(hq.clone());
        let ts: Vec<Tensor> = hs.iter().map(|h| Tensor::vector(h.clone())).collect();

        let (zq, zs) = list_encode(&params, &tq, &ts).unwrap();
        let z = encode(&params.store, &cfg, &hq, &hs);
        for c in 0..8 {
            assert!((zq.data()[c] - z[0][c]).abs() <= 1e-12, "{variant} z_q");
            for i in 0..3 {
                assert!((zs[i].data()[c] - z[i + 1][c]).abs() <= 1e-12, "{variant} z_{i}");
            }
        }

        let got = score(&params, &tq, &ts).unwrap();
        let want = oracle_scores(&params.store, &cfg, &hq, &hs);
        for (g, w) in got.iter().zip(&want) {
            assert!((g.s_origin - w.0).abs() <= 1e-12, "{variant} s_origin");
            assert!((g.s_list - w.1).abs() <= 1e-12, "{variant} s_list");
            assert!((g.s_final - w.2).abs() <= 1e-12, "{variant} s_final");
            assert!(g.s_final > 0.0 && g.s_final < 1.0);
        }
    }
}

#[test]
fn permutation_equivariance_all_variants() {
    for variant in AttentionVariant::ALL {
        let params = ModelParams::init(&oracle_config(variant)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tq = Tensor::vector(rand_vec(&mut rng, 8));
        let ts: Vec<Tensor> = (0..6).map(|_| Tensor::vector(rand_vec(&mut rng, 8))).collect();
        let perm = [4, 0, 5, 2, 1, 3];
        let permuted: Vec<Tensor> = perm.iter().map(|&i| ts[i].clone()).collect();
        let base = score(&params, &tq, &ts).unwrap();
        let other = score(&params, &tq, &permuted).unwrap();
        let (zq, _) = list_encode(&params, &tq, &ts).unwrap();
        let (zq2, _) = list_encode(&params, &tq, &permuted).unwrap();
        assert!(zq.max_abs_diff(&zq2) <= 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            assert!((other[k].s_final - base[i].s_final).abs() <= 1e-12, "{variant}");
        }
    }
}

fn mean_final(cfg: &ModelConfig, store: &ParamStore, q: &Tensor, p: &Tensor) -> (f64, ParamStore) {
    let mut g = Graph::new();
    let sv = record_full(&mut g, cfg, store, q, p).unwrap();
    let n = p.rows();
    let ones = g.constant(Tensor::matrix(1, n, vec![1.0 / n as f64; n]).unwrap());
    let m = g.matmul(ones, sv.final_scores).unwrap();
    let value = g.value(m).data()[0];
    (value, g.backward(m).unwrap().params())
}

#[test]
fn mean_score_gradient_matches_finite_differences() {
    for (seed, mode) in [(1, FeatureMode::Fused), (2, FeatureMode::ListwiseOnly), (3, FeatureMode::OriginalOnly)] {
        let cfg = ModelConfig {
            feature_mode: mode,
            seed,
            ..oracle_config(AttentionVariant::List)
        };
        let mut ranker = Ranker::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        ranker.adapter.weight = Tensor::matrix(8, 8, (0..64).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let q = Tensor::matrix(1, 8, rand_vec(&mut rng, 8)).unwrap();
        let p = Tensor::matrix(4, 8, (0..4).flat_map(|_| rand_vec(&mut rng, 8)).collect()).unwrap();
        let store = ranker.param_store();
        let (_, analytic) = mean_final(&cfg, &store, &q, &p);
        let numeric = finite_diff_grad(|s| Ok(mean_final(&cfg, s, &q, &p).0), &store, DEFAULT_FD_STEP).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "{mode}: {err}");
    }
}
