//! Fine-grained candidate scoring: reconstruct the masked keywords of a
//! sentence with one candidate as context and rank candidates by how well
//! they did.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attention: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

/// Transformer decoder whose memory is a single candidate feature.
#[derive(Debug, Clone)]
pub struct ReconstructionDecoder {
    layers: Vec<DecoderLayer>,
    output: Linear,
    pub dim: usize,
    pub vocab_size: usize,
    /// Predict token `i + 1` from positions `0..=i` instead of filling masks.
    pub next_token: bool,
}

/// Decoder output for `R` (sentence, candidate) pairs of `T` tokens each.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionOutput {
    /// `f`: `(R*T) x d`
    pub states: Var,
    /// `e = W f + b`: `(R*T) x N_v`
    pub energies: Var,
    pub length: usize,
}

impl ReconstructionDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        vocab_size: usize,
        num_layers: usize,
        num_heads: usize,
        next_token: bool,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| DecoderLayer {
                self_attention: MultiHeadAttention::new(store, &format!("dec.l{l}.self"), dim, num_heads, rng),
                norm1: LayerNorm::new(store, &format!("dec.l{l}.norm1"), dim),
                cross_attention: MultiHeadAttention::new(store, &format!("dec.l{l}.cross"), dim, num_heads, rng),
                norm2: LayerNorm::new(store, &format!("dec.l{l}.norm2"), dim),
                ffn: FeedForward::new(store, &format!("dec.l{l}.ffn"), dim, 2 * dim, rng),
                norm3: LayerNorm::new(store, &format!("dec.l{l}.norm3"), dim),
            })
            .collect();
        Self {
            layers,
            output: Linear::new(store, "dec.output", dim, vocab_size, rng),
            dim,
            vocab_size,
            next_token,
        }
    }

    /// `tokens` holds `R` blocks of `length` token states; block `r` is
    /// decoded against row `r` of `candidates`.
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        candidates: Var,
        length: usize,
    ) -> Result<ReconstructionOutput> {
        let (rows, d) = tape.value(tokens).dim();
        let (pairs, cd) = tape.value(candidates).dim();
        if d != self.dim || cd != self.dim || length == 0 || rows != pairs * length {
            return Err(Error::Shape(format!(
                "decoder dim {}: tokens {rows}x{d}, candidates {pairs}x{cd}, length {length}",
                self.dim
            )));
        }
        let mut x = tokens;
        for layer in &self.layers {
            let a = if self.next_token {
                layer.self_attention.forward_causal(tape, store, x, length)?
            } else {
                layer.self_attention.forward(tape, store, x, x, length, length)?
            };
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, store, r)?;
            let c = layer.cross_attention.forward(tape, store, x, candidates, length, 1)?;
            let r = tape.add(x, c)?;
            x = layer.norm2.forward(tape, store, r)?;
            let f = layer.ffn.forward(tape, store, x)?;
            let r = tape.add(x, f)?;
            x = layer.norm3.forward(tape, store, r)?;
        }
        let energies = self.output.forward(tape, store, x)?;
        Ok(ReconstructionOutput {
            states: x,
            energies,
            length,
        })
    }
}

/// `(position, token)` pairs to predict: the original tokens at the masked positions.
pub fn masked_targets(original: &[usize], positions: &[usize]) -> Result<Vec<(usize, usize)>> {
    positions
        .iter()
        .map(|&p| {
            original
                .get(p)
                .map(|&t| (p, t))
                .ok_or_else(|| Error::OutOfRange(format!("mask position {p} in sentence of {}", original.len())))
        })
        .collect()
}

/// Every position predicts its successor.
pub fn next_token_targets(original: &[usize]) -> Vec<(usize, usize)> {
    original.windows(2).enumerate().map(|(i, w)| (i, w[1])).collect()
}

/// `L_recon^r = -Σ log softmax(e_i)[q_i]` over the targets of pair `r`;
/// returns an `R x 1` column. Pairs without targets contribute 0.
pub fn reconstruction_loss(
    tape: &mut Tape,
    output: &ReconstructionOutput,
    targets: &[Vec<(usize, usize)>],
) -> Result<Var> {
    let (rows, vocab) = tape.value(output.energies).dim();
    let len = output.length;
    if rows != targets.len() * len {
        return Err(Error::Shape(format!(
            "{rows} energy rows for {} pairs of length {len}",
            targets.len()
        )));
    }
    let mut picked = Vec::new();
    let mut tokens = Vec::new();
    let mut owner = Vec::new();
    for (r, t) in targets.iter().enumerate() {
        for &(pos, tok) in t {
            if pos >= len || tok >= vocab {
                return Err(Error::OutOfRange(format!(
                    "target ({pos}, {tok}) for length {len} and vocabulary {vocab}"
                )));
            }
            picked.push(r * len + pos);
            tokens.push(tok);
            owner.push(r);
        }
    }
    if picked.is_empty() {
        return Ok(tape.constant(Array2::zeros((targets.len(), 1))));
    }
    let e = tape.gather_rows(output.energies, &picked)?;
    let nll = tape.cross_entropy_rows(e, &tokens)?;
    let mut group = Array2::zeros((targets.len(), picked.len()));
    for (i, &r) in owner.iter().enumerate() {
        group[[r, i]] = 1.0;
    }
    let group = tape.constant(group);
    tape.matmul(group, nll)
}

/// Rank of each candidate by ascending loss (0 = lowest); ties go to the
/// lower index.
pub fn rank_candidates(losses: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = losses.iter().position(|l| l.is_nan()) {
        return Err(Error::NonFinite(format!("reconstruction loss of candidate {i}")));
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; losses.len()];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank;
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranks() {
        assert_eq!(rank_candidates(&[2.0, 1.0, 3.0]).unwrap(), vec![1, 0, 2]);
        assert_eq!(rank_candidates(&[1.0; 4]).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(rank_candidates(&[12.0, 11.0, 13.0]).unwrap(), vec![1, 0, 2]);
        assert!(rank_candidates(&[1.0, f64::NAN]).is_err());
    }

    fn uniform_output(tape: &mut Tape, pairs: usize, len: usize, vocab: usize) -> ReconstructionOutput {
        let e = tape.leaf(Array2::zeros((pairs * len, vocab)));
        ReconstructionOutput {
            states: e,
            energies: e,
            length: len,
        }
    }

    #[test]
    fn uniform_energies_give_log_vocab() {
        let mut tape = Tape::new();
        let out = uniform_output(&mut tape, 1, 5, 50);
        let l = reconstruction_loss(&mut tape, &out, &[vec![(1, 3), (4, 7)]]).unwrap();
        assert!((tape.value(l)[[0, 0]] - 2.0 * 50f64.ln()).abs() < 1e-12);
        let l = reconstruction_loss(&mut tape, &out, &[vec![]]).unwrap();
        assert_eq!(tape.value(l)[[0, 0]], 0.0);
        assert!(reconstruction_loss(&mut tape, &out, &[vec![(5, 0)]]).is_err());
    }

    #[test]
    fn targets() {
        assert_eq!(masked_targets(&[5, 6, 7], &[2, 0]).unwrap(), vec![(2, 7), (0, 5)]);
        assert!(masked_targets(&[5], &[1]).is_err());
        assert_eq!(next_token_targets(&[5, 6, 7]), vec![(0, 6), (1, 7)]);
    }

    #[test]
    fn identical_candidates_decode_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dec = ReconstructionDecoder::new(&mut store, 8, 11, 2, 2, false, &mut rng);
        let mut tape = Tape::new();
        let tok = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let mut stacked = Array2::zeros((8, 8));
        stacked.slice_mut(ndarray::s![0..4, ..]).assign(&tok);
        stacked.slice_mut(ndarray::s![4..8, ..]).assign(&tok);
        let tokens = tape.leaf(stacked);
        let cands = tape.leaf(Array2::from_elem((2, 8), 0.3));
        let out = dec.reconstruct(&mut tape, &store, tokens, cands, 4).unwrap();
        let e = tape.value(out.energies);
        assert_eq!(e.slice(ndarray::s![0..4, ..]), e.slice(ndarray::s![4..8, ..]));
        assert!(dec.reconstruct(&mut tape, &store, tokens, cands, 3).is_err());
    }
}
