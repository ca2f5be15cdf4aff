use super::config::{Activation, ModelConfig, NormKind, NormPlacement, Positional};
use super::params::EncoderParams;
use super::rope::rope_tables;
use crate::autodiff::{AttentionMask, Gradients, Tape, Var};
use crate::data::{MaskMode, PackedBatch, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: ModelConfig,
    pub params: EncoderParams,
}

/// Tape handles for every parameter, in registry order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in registry order.
    pub fn collect(&self, mut grads: Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter is a grad leaf"))
            .collect()
    }
}

/// Token inputs of one forward pass.
pub struct Inputs<'b> {
    pub token_ids: &'b [u32],
    pub positions: &'b [u32],
    pub mask: AttentionMask,
}

impl<'b> From<&'b PackedBatch> for Inputs<'b> {
    fn from(b: &'b PackedBatch) -> Self {
        Inputs {
            token_ids: &b.token_ids,
            positions: &b.positions,
            mask: b.attention_mask(),
        }
    }
}

impl Encoder {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = EncoderParams::init(&cfg, seed)?;
        Ok(Encoder { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: EncoderParams) -> Self {
        Encoder { cfg, params }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound {
            vars: self.params.iter().map(|(_, t)| tape.param(t)).collect(),
        }
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        Ok(bound.vars[self.params.index_of(name)?])
    }

    fn opt_var(&self, bound: &Bound, name: &str) -> Option<Var> {
        self.params.index_of(name).ok().map(|i| bound.vars[i])
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(bound, weight)?)?;
        match self.opt_var(bound, bias) {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }

    fn norm(&self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(bound, &format!("{prefix}.gain"))?;
        match self.cfg.norm {
            NormKind::RmsNorm => tape.rms_norm(x, gain, self.cfg.norm_eps),
            NormKind::LayerNorm => {
                let bias = self.opt_var(bound, &format!("{prefix}.bias"));
                tape.layer_norm(x, gain, bias, self.cfg.norm_eps)
            }
        }
    }

    fn attention_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        layer: usize,
        rope: Option<&(Vec<f32>, Vec<f32>)>,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let p = format!("layers.{layer}.attn");
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let mut q = self.linear(tape, bound, x, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let mut k = self.linear(tape, bound, x, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = self.linear(tape, bound, x, &format!("{p}.wv"), &format!("{p}.bv"))?;
        if let Some((cos, sin)) = rope {
            q = tape.rope(q, h, dh, cos.clone(), sin.clone())?;
            k = tape.rope(k, h, dh, cos.clone(), sin.clone())?;
        }
        let a = tape.attention(q, k, v, h, dh, 1.0 / (dh as f64).sqrt(), mask)?;
        self.linear(tape, bound, a, &format!("{p}.wo"), &format!("{p}.bo"))
    }

    fn ffn_block(&self, tape: &mut Tape, bound: &Bound, x: Var, layer: usize) -> Result<Var> {
        let p = format!("layers.{layer}.ffn");
        let first = self.linear(tape, bound, x, &format!("{p}.w1"), &format!("{p}.b1"))?;
        let hidden = match self.cfg.activation {
            Activation::Gelu => tape.gelu(first),
            Activation::Swiglu => {
                let gate = tape.silu(first);
                let up = self.linear(tape, bound, x, &format!("{p}.w3"), &format!("{p}.b3"))?;
                tape.mul(gate, up)?
            }
        };
        self.linear(tape, bound, hidden, &format!("{p}.w2"), &format!("{p}.b2"))
    }

    fn check_inputs(&self, inputs: &Inputs) -> Result<()> {
        if inputs.token_ids.len() != inputs.positions.len() {
            return Err(Error::invalid(format!(
                "{} tokens but {} positions",
                inputs.token_ids.len(),
                inputs.positions.len()
            )));
        }
        if inputs.token_ids.is_empty() {
            return Err(Error::invalid("empty input"));
        }
        let limit = self.cfg.position_limit();
        if let Some(&p) = inputs.positions.iter().find(|&&p| p as usize >= limit) {
            return Err(Error::TooLong {
                len: p as usize + 1,
                max: limit,
            });
        }
        Ok(())
    }

    /// Final hidden states, one row per input token.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: &Inputs) -> Result<Var> {
        self.check_inputs(inputs)?;
        let ids: Vec<usize> = inputs.token_ids.iter().map(|&t| t as usize).collect();
        let mut x = tape.gather_rows(self.var(bound, "embed.tokens")?, &ids)?;
        let rope = match self.cfg.positional {
            Positional::AbsoluteLearned => {
                let pos: Vec<usize> = inputs.positions.iter().map(|&p| p as usize).collect();
                let pe = tape.gather_rows(self.var(bound, "embed.positions")?, &pos)?;
                x = tape.add(x, pe)?;
                None
            }
            Positional::Rope => Some(rope_tables(
                inputs.positions,
                self.cfg.head_dim(),
                self.cfg.rope_theta,
                self.cfg.rope_scaling,
            )),
        };
        for l in 0..self.cfg.n_layers {
            let (attn_norm, ffn_norm) = (format!("layers.{l}.attn_norm"), format!("layers.{l}.ffn_norm"));
            match self.cfg.norm_placement {
                NormPlacement::Pre => {
                    let h = self.norm(tape, bound, x, &attn_norm)?;
                    let a = self.attention_block(tape, bound, h, l, rope.as_ref(), &inputs.mask)?;
                    x = tape.add(x, a)?;
                    let h = self.norm(tape, bound, x, &ffn_norm)?;
                    let f = self.ffn_block(tape, bound, h, l)?;
                    x = tape.add(x, f)?;
                }
                NormPlacement::Post => {
                    let a = self.attention_block(tape, bound, x, l, rope.as_ref(), &inputs.mask)?;
                    let s = tape.add(x, a)?;
                    x = self.norm(tape, bound, s, &attn_norm)?;
                    let f = self.ffn_block(tape, bound, x, l)?;
                    let s = tape.add(x, f)?;
                    x = self.norm(tape, bound, s, &ffn_norm)?;
                }
            }
        }
        if self.cfg.norm_placement == NormPlacement::Pre {
            x = self.norm(tape, bound, x, "final_norm")?;
        }
        Ok(x)
    }

    /// Vocabulary logits for the given rows of `hidden` (all rows when `None`).
    pub fn mlm_logits(&self, tape: &mut Tape, bound: &Bound, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => tape.gather_rows(hidden, r)?,
            None => hidden,
        };
        let logits = if self.cfg.tie_mlm_head {
            tape.matmul_bt(h, self.var(bound, "embed.tokens")?)?
        } else {
            tape.matmul(h, self.var(bound, "mlm.weight")?)?
        };
        tape.add_row(logits, self.var(bound, "mlm.bias")?)
    }

    /// Mean cross-entropy over the labeled positions of a batch. The head is
    /// evaluated on labeled rows only.
    pub fn mlm_loss(&self, tape: &mut Tape, bound: &Bound, batch: &PackedBatch) -> Result<Var> {
        let rows: Vec<usize> = (0..batch.len())
            .filter(|&i| batch.mlm_labels[i] != IGNORE_INDEX)
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let targets: Vec<i32> = rows.iter().map(|&i| batch.mlm_labels[i]).collect();
        let hidden = self.forward(tape, bound, &batch.into())?;
        let logits = self.mlm_logits(tape, bound, hidden, Some(&rows))?;
        tape.cross_entropy(logits, &targets, IGNORE_INDEX)
    }

    /// Hidden states without gradient tracking.
    pub fn hidden(&self, inputs: &Inputs) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let h = self.forward(&mut tape, &bound, inputs)?;
        Ok(tape.value(h).clone())
    }

    /// Mean-pooled, unit-normalized embedding of each sequence, computed in
    /// one block-diagonal pass.
    pub fn embed_sequences(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
            return Err(Error::invalid(format!("sequence {i} is empty")));
        }
        let batch = PackedBatch::from_sequences(seqs, MaskMode::PackedBlockDiagonal, u32::MAX);
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let h = self.forward(&mut tape, &bound, &(&batch).into())?;
        let pooled = tape.segment_mean(h, &batch.documents())?;
        let normed = tape.l2_normalize_rows(pooled)?;
        let t = tape.value(normed);
        Ok((0..seqs.len()).map(|i| t.row(i).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pack_sequences;
    use crate::tokenizer::PAD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(layers: usize) -> Encoder {
        let mut cfg = ModelConfig::toy(50);
        cfg.n_layers = layers;
        cfg.init_std = 0.1;
        Encoder::new(cfg, 11).unwrap()
    }

    fn docs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..12);
                (0..len).map(|_| rng.random_range(5..50)).collect()
            })
            .collect()
    }

    #[test]
    fn output_shape() {
        let enc = toy(1);
        let b = PackedBatch::from_sequences(&[vec![5, 6, 7]], MaskMode::Padded, PAD);
        assert_eq!(enc.hidden(&(&b).into()).unwrap().shape(), &[3, 64]);
    }

    #[test]
    fn unknown_token_rejected() {
        let enc = toy(1);
        let b = PackedBatch::from_sequences(&[vec![5, 99]], MaskMode::Padded, PAD);
        assert!(matches!(enc.hidden(&(&b).into()), Err(Error::UnknownToken { .. })));
    }

    #[test]
    fn block_diagonal_matches_padded_rows() {
        let enc = toy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = docs(&mut rng, 6);
        let packed = PackedBatch::concat(&pack_sequences(&ds, 16, MaskMode::PackedBlockDiagonal, PAD)).unwrap();
        let out = enc.hidden(&(&packed).into()).unwrap();
        let groups = packed.documents();
        for (g, rows) in groups.iter().enumerate() {
            let d = &ds[packed.seq_ids[rows[0]] as usize];
            let padded = pack_sequences(std::slice::from_ref(d), 16, MaskMode::Padded, PAD).remove(0);
            let reference = enc.hidden(&(&padded).into()).unwrap();
            for (k, &r) in rows.iter().enumerate() {
                let diff = out
                    .row(r)
                    .iter()
                    .zip(reference.row(k))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(diff < 1e-5, "group {g} token {k}: {diff}");
            }
        }
    }

    #[test]
    fn swapping_packed_sequences_swaps_outputs() {
        let enc = toy(2);
        let a = vec![5u32, 6, 7, 8];
        let b = vec![9u32, 10, 11];
        let ab = PackedBatch::concat(&pack_sequences(&[a.clone(), b.clone()], 16, MaskMode::PackedBlockDiagonal, PAD))
            .unwrap();
        let ba = PackedBatch::concat(&pack_sequences(&[b, a], 16, MaskMode::PackedBlockDiagonal, PAD)).unwrap();
        let (oab, oba) = (enc.hidden(&(&ab).into()).unwrap(), enc.hidden(&(&ba).into()).unwrap());
        for i in 0..4 {
            assert!(oab.row(i).iter().zip(oba.row(3 + i)).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        for i in 0..3 {
            assert!(oab.row(4 + i).iter().zip(oba.row(i)).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn zeroed_output_projections_leave_embeddings() {
        let mut enc = toy(2);
        let names: Vec<String> = enc
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.ends_with("attn.wo") || n.ends_with("ffn.w2"))
            .collect();
        for n in names {
            enc.params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let ids = vec![5u32, 17, 33];
        let b = PackedBatch::from_sequences(std::slice::from_ref(&ids), MaskMode::Padded, PAD);
        let out = enc.hidden(&(&b).into()).unwrap();
        let table = enc.params.get("embed.tokens").unwrap();
        let emb: Vec<f32> = ids.iter().flat_map(|&i| table.row(i as usize).to_vec()).collect();
        let expect = super::super::layers::rms_norm(
            &Tensor::from_vec(&[3, 64], emb),
            enc.params.get("final_norm.gain").unwrap(),
            enc.cfg.norm_eps,
        )
        .unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn mlm_logit_examples() {
        let mut enc = toy(1);
        let table = enc.params.get_mut("embed.tokens").unwrap();
        for r in 0..50 {
            let row = &mut table.data_mut()[r * 64..(r + 1) * 64];
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let row = 17;
        let mut h = enc.params.get("embed.tokens").unwrap().row(row).to_vec();
        h.extend(vec![0.0; 64]);
        let mut tape = Tape::inference();
        let bound = enc.bind(&mut tape);
        let hv = tape.constant(Tensor::from_vec(&[2, 64], h));
        let logits = enc.mlm_logits(&mut tape, &bound, hv, None).unwrap();
        let l = tape.value(logits);
        let best = (0..50).max_by(|&a, &b| l.row(0)[a].total_cmp(&l.row(0)[b])).unwrap();
        assert_eq!(best, row);
        assert!(l.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tied_and_copied_heads_agree() {
        let tied = toy(1);
        let mut cfg = tied.cfg.clone();
        cfg.tie_mlm_head = false;
        let mut map = indexmap::IndexMap::new();
        for (n, t) in tied.params.iter() {
            map.insert(n.to_string(), t.clone());
        }
        map.insert("mlm.weight".into(), tied.params.get("embed.tokens").unwrap().transpose().unwrap());
        let untied = Encoder::from_params(cfg.clone(), EncoderParams::from_tensors(&cfg, map).unwrap());
        let b = PackedBatch::from_sequences(&[vec![5, 6, 7, 8]], MaskMode::Padded, PAD);
        let logits = |e: &Encoder| {
            let mut tape = Tape::inference();
            let bound = e.bind(&mut tape);
            let h = e.forward(&mut tape, &bound, &(&b).into()).unwrap();
            let l = e.mlm_logits(&mut tape, &bound, h, None).unwrap();
            tape.value(l).clone()
        };
        assert!(logits(&tied).max_abs_diff(&logits(&untied)) < 1e-6);
    }

    #[test]
    fn positions_beyond_limit_rejected() {
        let mut cfg = ModelConfig::toy(50);
        cfg.max_positions = 4;
        let enc = Encoder::new(cfg, 0).unwrap();
        let b = PackedBatch::from_sequences(&[vec![5; 5]], MaskMode::Padded, PAD);
        assert!(matches!(enc.hidden(&(&b).into()), Err(Error::TooLong { len: 5, max: 4 })));
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let enc = toy(2);
        let e = enc.embed_sequences(&[vec![5, 6, 7], vec![8, 9]]).unwrap();
        for v in &e {
            let n: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(e, enc.embed_sequences(&[vec![5, 6, 7], vec![8, 9]]).unwrap());
    }
}
