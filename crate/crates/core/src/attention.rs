//! Positional encoding, windowed multi-head attention and the SRA / SRCA
//! blocks built on it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::tensor::{AttentionGroup, GroupScores, Tape, Tensor, Var};
use crate::windows::WindowPartition;

/// Sinusoidal encoding of integer cell coordinates: the first half of the
/// channels encodes x, the second half y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosEncoding {
    pub d_model: usize,
    pub temperature: f64,
}

impl PosEncoding {
    pub fn new(d_model: usize, temperature: f64) -> Result<Self> {
        if d_model == 0 || !d_model.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "positional encoding needs d_model divisible by 4, got {d_model}"
            )));
        }
        Ok(PosEncoding {
            d_model,
            temperature,
        })
    }

    /// Within each half of width `h = d/2`, channel `2i` holds
    /// `sin(c / T^(2i/h))` and channel `2i+1` the matching cosine.
    pub fn encode(&self, coords: &[[usize; 2]]) -> Tensor {
        let d = self.d_model;
        let half = d / 2;
        let freqs: Vec<f64> = (0..half / 2)
            .map(|i| self.temperature.powf(2.0 * i as f64 / half as f64).recip())
            .collect();
        let mut data = Vec::with_capacity(coords.len() * d);
        for c in coords {
            for &cell in c {
                let v = cell as f64;
                for f in &freqs {
                    let a = v * f;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
        Tensor::new(vec![coords.len(), d], data).expect("shape matches data")
    }
}

/// Tape handles of one attention block: Q/K/V/output projections, the
/// `d → 4d → d` MLP and two layer norms.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlockParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub heads: usize,
    pub ln_eps: f64,
}

const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

impl AttnBlockParams {
    /// Register the block's tensors under `prefix` with Xavier weights,
    /// zero biases and unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
        for p in PROJECTIONS {
            store.insert(format!("{prefix}.attn.w{p}"), xavier_uniform(rng, d, d));
            store.insert(format!("{prefix}.attn.b{p}"), Tensor::zeros(&[d]));
        }
        store.insert(format!("{prefix}.mlp.fc1.w"), xavier_uniform(rng, d, 4 * d));
        store.insert(format!("{prefix}.mlp.fc1.b"), Tensor::zeros(&[4 * d]));
        store.insert(format!("{prefix}.mlp.fc2.w"), xavier_uniform(rng, 4 * d, d));
        store.insert(format!("{prefix}.mlp.fc2.b"), Tensor::zeros(&[d]));
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{prefix}.{ln}.gamma"), Tensor::full(&[d], 1.0));
            store.insert(format!("{prefix}.{ln}.beta"), Tensor::zeros(&[d]));
        }
    }

    pub fn from_bound(bound: &Bound, prefix: &str, heads: usize, ln_eps: f64) -> Result<Self> {
        let g = |name: &str| bound.get(&format!("{prefix}.{name}"));
        Ok(AttnBlockParams {
            wq: g("attn.wq")?,
            bq: g("attn.bq")?,
            wk: g("attn.wk")?,
            bk: g("attn.bk")?,
            wv: g("attn.wv")?,
            bv: g("attn.bv")?,
            wo: g("attn.wo")?,
            bo: g("attn.bo")?,
            fc1_w: g("mlp.fc1.w")?,
            fc1_b: g("mlp.fc1.b")?,
            fc2_w: g("mlp.fc2.w")?,
            fc2_b: g("mlp.fc2.b")?,
            ln1_gamma: g("ln1.gamma")?,
            ln1_beta: g("ln1.beta")?,
            ln2_gamma: g("ln2.gamma")?,
            ln2_beta: g("ln2.beta")?,
            heads,
            ln_eps,
        })
    }
}

/// Multi-head attention restricted to `groups`: per head
/// `softmax(Q W_q (K W_k)ᵀ / sqrt(d/h)) · V W_v`, heads concatenated, then
/// `W_o`. Rows of `q` outside every group carry only the output bias.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    groups: &[AttentionGroup],
    p: &AttnBlockParams,
) -> Result<(Var, Vec<GroupScores>)> {
    let qp = tape.linear(q, p.wq, p.bq)?;
    let kp = tape.linear(k, p.wk, p.bk)?;
    let vp = tape.linear(v, p.wv, p.bv)?;
    let (heads, scores) = tape.grouped_attention(qp, kp, vp, groups, p.heads)?;
    Ok((tape.linear(heads, p.wo, p.bo)?, scores))
}

/// `LN2(MLP(LN1(x)) + x)` with a GELU MLP.
pub fn post_attention(tape: &mut Tape, x: Var, p: &AttnBlockParams) -> Result<Var> {
    let h = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta, p.ln_eps)?;
    let h = tape.linear(h, p.fc1_w, p.fc1_b)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, p.fc2_w, p.fc2_b)?;
    let h = tape.add(h, x)?;
    tape.layer_norm(h, p.ln2_gamma, p.ln2_beta, p.ln_eps)
}

/// Windowed self-attention block over one frame:
/// `x' = x + MCA(x + PE, x + PE, x)`, `out = LN(MLP(LN(x')) + x')`.
/// `partition` must be a self partition of `coords`.
pub fn sra_block(
    tape: &mut Tape,
    x: Var,
    coords: &[[usize; 2]],
    partition: &WindowPartition,
    p: &AttnBlockParams,
    pe: &PosEncoding,
) -> Result<Var> {
    if partition.cur_count() != coords.len() || !partition.keyless_queries().is_empty() {
        return Err(Error::InvalidArgument(
            "sra_block needs a self partition of its own coordinates".into(),
        ));
    }
    let enc = tape.constant(pe.encode(coords));
    let xq = tape.add(x, enc)?;
    let (attn, _) = multi_head_attention(tape, xq, xq, x, &partition.attention_groups(), p)?;
    let x1 = tape.add(x, attn)?;
    post_attention(tape, x1, p)
}

/// Sparse regional cross-attention: cur pillars query prev pillars in the
/// same window. `Q = F_cur + PE`, `K = F_prev + PE`, `V = F_prev`,
/// `F̂ = MCA(Q, K, V)`, `out = LN(MLP(LN(F̂)) + F̂)`. Cur pillars whose
/// window holds no prev pillar use `F̂ = F_cur`.
#[allow(clippy::too_many_arguments)]
pub fn srca_block(
    tape: &mut Tape,
    f_prev: Var,
    coords_prev: &[[usize; 2]],
    f_cur: Var,
    coords_cur: &[[usize; 2]],
    partition: &WindowPartition,
    p: &AttnBlockParams,
    pe: &PosEncoding,
) -> Result<(Var, Vec<GroupScores>)> {
    if partition.cur_count() != coords_cur.len() {
        return Err(Error::InvalidArgument(format!(
            "partition covers {} cur pillars, {} given",
            partition.cur_count(),
            coords_cur.len()
        )));
    }
    let groups = partition.attention_groups();
    let keyless = partition.keyless_queries();
    let (fused, scores) = if groups.is_empty() {
        (f_cur, Vec::new())
    } else {
        let pe_cur = tape.constant(pe.encode(coords_cur));
        let pe_prev = tape.constant(pe.encode(coords_prev));
        let q = tape.add(f_cur, pe_cur)?;
        let k = tape.add(f_prev, pe_prev)?;
        let (attn, scores) = multi_head_attention(tape, q, k, f_prev, &groups, p)?;
        if keyless.is_empty() {
            (attn, scores)
        } else {
            (splice_rows(tape, attn, f_cur, &keyless)?, scores)
        }
    };
    Ok((post_attention(tape, fused, p)?, scores))
}

/// Rows of `base`, except rows listed in `from_other` (ascending), which come
/// from `other`.
fn splice_rows(tape: &mut Tape, base: Var, other: Var, from_other: &[usize]) -> Result<Var> {
    let n = tape.shape(base)[0];
    let mut take = vec![false; n];
    from_other.iter().for_each(|&i| take[i] = true);
    let kept: Vec<usize> = (0..n).filter(|&i| !take[i]).collect();
    let a = tape.gather_rows(base, &kept)?;
    let b = tape.gather_rows(other, from_other)?;
    let stacked = tape.concat_rows(&[a, b])?;
    // position of every original row inside `stacked`
    let mut order = vec![0; n];
    for (pos, &i) in kept.iter().chain(from_other).enumerate() {
        order[i] = pos;
    }
    tape.gather_rows(stacked, &order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windows::{joint_group, self_group};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_coordinate_encodes_sin_cos_pattern() {
        let pe = PosEncoding::new(16, 10000.0).unwrap();
        let t = pe.encode(&[[0, 0]]);
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(PosEncoding::new(6, 10000.0).is_err());
    }

    #[test]
    fn encoding_is_injective_on_a_window() {
        let pe = PosEncoding::new(32, 10000.0).unwrap();
        let cells: Vec<[usize; 2]> = (0..8).flat_map(|x| (0..8).map(move |y| [x, y])).collect();
        let t = pe.encode(&cells);
        let mut min_gap = f64::INFINITY;
        for i in 0..64 {
            for j in 0..i {
                let d2: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                min_gap = min_gap.min(d2.sqrt());
            }
        }
        assert!(min_gap > 0.0);
        assert_eq!(pe.encode(&cells), t);
    }

    fn block(d: usize, seed: u64) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        AttnBlockParams::init(&mut s, "b", d, &mut rng);
        (s, rng)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_collapses_to_value_projection() {
        let d = 8;
        let (store, mut rng) = block(d, 1);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let p = AttnBlockParams::from_bound(&b, "b", 2, 1e-5).unwrap();
        let q = tape.constant(random(&mut rng, 1, d));
        let kv = tape.constant(random(&mut rng, 1, d));
        let groups = [AttentionGroup { queries: vec![0], keys: vec![0] }];
        let (out, scores) = multi_head_attention(&mut tape, q, kv, kv, &groups, &p).unwrap();
        assert!(scores[0].probs.iter().all(|&s| s == 1.0));
        let vp = tape.linear(kv, p.wv, p.bv).unwrap();
        let want = tape.linear(vp, p.wo, p.bo).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(want)) < 1e-14);
    }

    #[test]
    fn identical_keys_average_values() {
        let d = 8;
        let (store, mut rng) = block(d, 2);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let p = AttnBlockParams::from_bound(&b, "b", 2, 1e-5).unwrap();
        let q = tape.constant(random(&mut rng, 1, d));
        let krow = random(&mut rng, 1, d);
        let k = tape.constant(Tensor::from_rows(&[krow.data(), krow.data()]).unwrap());
        let v = tape.constant(random(&mut rng, 2, d));
        let groups = [AttentionGroup { queries: vec![0], keys: vec![0, 1] }];
        let (out, _) = multi_head_attention(&mut tape, q, k, v, &groups, &p).unwrap();
        let vm = tape.value(v).clone();
        let mean: Vec<f64> = (0..d).map(|c| 0.5 * (vm.at(&[0, c]) + vm.at(&[1, c]))).collect();
        let vmean = tape.constant(Tensor::new(vec![1, d], mean).unwrap());
        let vp = tape.linear(vmean, p.wv, p.bv).unwrap();
        let want = tape.linear(vp, p.wo, p.bo).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(want)) < 1e-14);
    }

    #[test]
    fn keyless_fallback_matches_post_stack() {
        let d = 8;
        let (store, mut rng) = block(d, 3);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let p = AttnBlockParams::from_bound(&b, "b", 2, 1e-5).unwrap();
        let pe = PosEncoding::new(d, 10000.0).unwrap();
        let prev_c = [[0, 0]];
        let cur_c = [[1, 1], [20, 20]];
        let part = joint_group(&prev_c, &cur_c, [8, 8], false).unwrap();
        let fp = tape.constant(random(&mut rng, 1, d));
        let fc = tape.constant(random(&mut rng, 2, d));
        let (out, scores) = srca_block(&mut tape, fp, &prev_c, fc, &cur_c, &part, &p, &pe).unwrap();
        assert_eq!(scores.len(), 1);
        let row1 = tape.gather_rows(fc, &[1]).unwrap();
        let want = post_attention(&mut tape, row1, &p).unwrap();
        let got = tape.gather_rows(out, &[1]).unwrap();
        assert!(tape.value(got).max_abs_diff(tape.value(want)) < 1e-14);
    }

    #[test]
    fn zero_prev_gives_query_independent_output() {
        let d = 8;
        let (store, mut rng) = block(d, 4);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let p = AttnBlockParams::from_bound(&b, "b", 2, 1e-5).unwrap();
        let pe = PosEncoding::new(d, 10000.0).unwrap();
        let coords = [[2, 3], [4, 4]];
        let part = joint_group(&coords, &coords, [8, 8], false).unwrap();
        let fp = tape.constant(Tensor::zeros(&[2, d]));
        let fc = tape.constant(random(&mut rng, 2, d));
        let (out, _) = srca_block(&mut tape, fp, &coords, fc, &coords, &part, &p, &pe).unwrap();
        let o = tape.value(out);
        for c in 0..d {
            assert!((o.at(&[0, c]) - o.at(&[1, c])).abs() < 1e-12);
        }
    }

    #[test]
    fn sra_rejects_foreign_partition() {
        let d = 8;
        let (store, mut rng) = block(d, 5);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let p = AttnBlockParams::from_bound(&b, "b", 2, 1e-5).unwrap();
        let pe = PosEncoding::new(d, 10000.0).unwrap();
        let x = tape.constant(random(&mut rng, 2, d));
        let part = self_group(&[[0, 0]], [8, 8], false).unwrap();
        assert!(sra_block(&mut tape, x, &[[0, 0], [1, 1]], &part, &p, &pe).is_err());
    }
}
