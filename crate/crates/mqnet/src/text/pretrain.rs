//! The three title-pretraining objectives: masked-language modeling,
//! attribute-value prediction, and category prediction, combined by sum.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::text::encoder::{TextEncoder, TextEncoderConfig};
use crate::text::mask::{wwm_mask, MaskStrategy, MaskedSample};
use crate::text::{tokenize, TokenSequence, Vocab};

/// One synthetic corpus line: a title, its attribute map, its category.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusRecord {
    pub title: String,
    pub attributes: BTreeMap<String, String>,
    pub category: String,
}

pub fn write_corpus_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| MqError::Io(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MqError::Data(e.to_string()))?);
    }
    Ok(out)
}

/// The preset label inventories: attribute queries, the pooled attribute
/// value set, and the category set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSets {
    pub queries: Vec<String>,
    pub values: Vec<String>,
    pub categories: Vec<String>,
}

impl LabelSets {
    pub fn query_index(&self, q: &str) -> Option<usize> {
        self.queries.iter().position(|x| x == q)
    }
    pub fn value_index(&self, v: &str) -> Option<usize> {
        self.values.iter().position(|x| x == v)
    }
    pub fn category_index(&self, c: &str) -> Option<usize> {
        self.categories.iter().position(|x| x == c)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub seq: TokenSequence,
    pub masked: MaskedSample,
    pub query_idx: usize,
    pub value_idx: usize,
    pub category_idx: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub samples: Vec<PretrainSample>,
}

impl PretrainBatch {
    /// Tokenizes, masks, and labels corpus records. One attribute query is
    /// drawn per record; gold labels must belong to the preset sets.
    pub fn build(
        records: &[CorpusRecord],
        vocab: &Vocab,
        sets: &LabelSets,
        t_len: usize,
        mask_rate: f64,
        strategy: MaskStrategy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(records.len());
        for rec in records {
            let seq = tokenize(&rec.title, vocab, t_len);
            let masked = wwm_mask(&seq, mask_rate, rng, strategy, vocab.len())?;
            let queries: Vec<&String> = rec.attributes.keys().collect();
            let q = queries
                .choose(rng)
                .ok_or_else(|| MqError::Data(format!("record '{}' has no attributes", rec.title)))?;
            let value = &rec.attributes[*q];
            let query_idx = sets
                .query_index(q)
                .ok_or_else(|| MqError::Data(format!("attribute query '{q}' not in preset set")))?;
            let value_idx = sets
                .value_index(value)
                .ok_or_else(|| MqError::Data(format!("gold value '{value}' not in preset value set")))?;
            let category_idx = sets.category_index(&rec.category).ok_or_else(|| {
                MqError::Data(format!("gold category '{}' not in preset category set", rec.category))
            })?;
            samples.push(PretrainSample {
                seq,
                masked,
                query_idx,
                value_idx,
                category_idx,
            });
        }
        Ok(PretrainBatch { samples })
    }
}

/// Text encoder plus the three pretraining heads.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub encoder: TextEncoder,
    mlm_head: Linear,
    query_embed: usize,
    avp_head: Linear,
    tcp_head: Linear,
    n_values: usize,
    n_categories: usize,
}

impl PretrainModel {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: TextEncoderConfig,
        sets: &LabelSets,
    ) -> Result<Self> {
        let encoder = TextEncoder::new(store, rng, "text", cfg)?;
        let c = cfg.dim;
        // heads start at zero so an untrained model is exactly uniform
        let mlm_head = Linear::new(store, rng, "pretrain.mlm", c, cfg.vocab_size, Init::Zero);
        let query_embed = store.alloc(
            "pretrain.query_embed".to_string(),
            crate::nn::init_tensor(&[sets.queries.len(), c], Init::FanIn { fan_in: c, gain: 1.0 }, rng),
        );
        let avp_head = Linear::new(store, rng, "pretrain.avp", 2 * c, sets.values.len(), Init::Zero);
        let tcp_head = Linear::new(store, rng, "pretrain.tcp", c, sets.categories.len(), Init::Zero);
        Ok(PretrainModel {
            encoder,
            mlm_head,
            query_embed,
            avp_head,
            tcp_head,
            n_values: sets.values.len(),
            n_categories: sets.categories.len(),
        })
    }

    /// Pooled representation: mean over valid positions, or zeros for an
    /// all-PAD title.
    fn pooled<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        seq: &TokenSequence,
    ) -> Result<Var> {
        if seq.valid_count() == 0 {
            return Ok(tape.constant(Tensor::zeros(&[1, self.encoder.cfg.dim])));
        }
        let enc = self.encoder.forward(tape, store, seq)?;
        let rows = tape.gather_rows(enc, seq.valid_indices())?;
        let mean = tape.mean_axis0(rows)?;
        tape.reshape(mean, &[1, self.encoder.cfg.dim])
    }

    /// Mean over every masked position in the batch of −log p(x̂ | X_{/m(x)}).
    pub fn mlm_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        batch: &PretrainBatch,
    ) -> Result<Var> {
        let total_masked: usize = batch
            .samples
            .iter()
            .map(|s| s.masked.masked_positions.len())
            .sum();
        if total_masked == 0 {
            return Err(MqError::InvalidArgument(
                "mlm loss undefined: batch has no masked positions".into(),
            ));
        }
        let mut acc: Option<Var> = None;
        for sample in &batch.samples {
            let n = sample.masked.masked_positions.len();
            if n == 0 {
                continue;
            }
            let corrupted = sample.seq.with_ids(sample.masked.corrupted.clone());
            let enc = self.encoder.forward(tape, store, &corrupted)?;
            let sel = tape.gather_rows(enc, sample.masked.masked_positions.clone())?;
            let logits = self.mlm_head.forward(tape, store, sel)?;
            let targets: Vec<usize> = sample.masked.originals.iter().map(|&i| i as usize).collect();
            let ce = tape.cross_entropy_rows(logits, targets)?;
            let weighted = tape.scale(ce, n as f64)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted)?,
                None => weighted,
            });
        }
        tape.scale(acc.expect("total_masked > 0"), 1.0 / total_masked as f64)
    }

    /// Mean over samples of −log p(value | X, A_Q); the query conditions the
    /// head by concatenation with the pooled title representation.
    pub fn avp_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        batch: &PretrainBatch,
    ) -> Result<Var> {
        if batch.samples.is_empty() {
            return Err(MqError::InvalidArgument("avp loss over empty batch".into()));
        }
        let mut acc: Option<Var> = None;
        for sample in &batch.samples {
            if sample.value_idx >= self.n_values {
                return Err(MqError::Data(format!(
                    "gold value index {} outside preset set of {}",
                    sample.value_idx, self.n_values
                )));
            }
            let pooled = self.pooled(tape, store, &sample.seq)?;
            let qe_table = tape.param(self.query_embed, store.get(self.query_embed));
            let qe = tape.gather_rows(qe_table, vec![sample.query_idx])?;
            let joint = tape.concat_last(&[pooled, qe])?;
            let logits = self.avp_head.forward(tape, store, joint)?;
            let ce = tape.cross_entropy_rows(logits, vec![sample.value_idx])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, ce)?,
                None => ce,
            });
        }
        tape.scale(acc.expect("non-empty"), 1.0 / batch.samples.len() as f64)
    }

    /// Mean over samples of −log p(category | X).
    pub fn tcp_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        batch: &PretrainBatch,
    ) -> Result<Var> {
        if batch.samples.is_empty() {
            return Err(MqError::InvalidArgument("tcp loss over empty batch".into()));
        }
        let mut acc: Option<Var> = None;
        for sample in &batch.samples {
            if sample.category_idx >= self.n_categories {
                return Err(MqError::Data(format!(
                    "gold category index {} outside preset set of {}",
                    sample.category_idx, self.n_categories
                )));
            }
            let pooled = self.pooled(tape, store, &sample.seq)?;
            let logits = self.tcp_head.forward(tape, store, pooled)?;
            let ce = tape.cross_entropy_rows(logits, vec![sample.category_idx])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, ce)?,
                None => ce,
            });
        }
        tape.scale(acc.expect("non-empty"), 1.0 / batch.samples.len() as f64)
    }

    /// L = L_MLM + L_AVP + L_TCP, exactly.
    pub fn pretrain_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        batch: &PretrainBatch,
    ) -> Result<Var> {
        let mlm = self.mlm_loss(tape, store, batch)?;
        let avp = self.avp_loss(tape, store, batch)?;
        let tcp = self.tcp_loss(tape, store, batch)?;
        let ma = tape.add(mlm, avp)?;
        tape.add(ma, tcp)
    }
}
