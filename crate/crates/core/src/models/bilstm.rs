use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::{check_dropout, check_kernels};
use super::{conv_pool, maybe_dropout, Classifier, Dropout, Input, ModelError, ShapeProbe, Side, Tables};
use crate::embeddings::{EmbeddingTable, DEFAULT_MAX_LEN};
use crate::nn::{ParamId, ParamSet, Tape, Tensor, Var};

/// Bidirectional LSTM whose per-step outputs feed parallel convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiLstmConfig {
    /// Units per direction.
    pub recurrent_units: usize,
    pub conv_feature_maps: usize,
    pub kernel_sizes: Vec<usize>,
    pub dense_units: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        BiLstmConfig {
            recurrent_units: 100,
            conv_feature_maps: 200,
            kernel_sizes: vec![3, 4, 5],
            dense_units: 100,
            dropout: 0.2,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
        }
    }
}

impl BiLstmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_kernels(&self.kernel_sizes, self.max_len)?;
        check_dropout(self.dropout)?;
        if self.recurrent_units == 0 || self.conv_feature_maps == 0 || self.dense_units == 0 {
            return Err(ModelError::Config(
                "recurrent_units, conv_feature_maps and dense_units must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct BiLstmNet {
    pub(crate) cfg: BiLstmConfig,
    pub(crate) params: ParamSet,
    pub(crate) tables: Tables,
    fwd: LstmIds,
    bwd: LstmIds,
    convs: Vec<(usize, ParamId, ParamId)>,
    dense: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

fn lookup(params: &ParamSet, name: &str) -> Result<ParamId, ModelError> {
    params
        .id(name)
        .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
}

impl BiLstmNet {
    pub(crate) fn build(cfg: &BiLstmConfig, table: EmbeddingTable) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let (dim, h) = (table.dimension(), cfg.recurrent_units);
        for dir in ["fwd", "bwd"] {
            params.insert(format!("lstm.{dir}.wx"), Tensor::glorot(dim, 4 * h, &mut rng));
            params.insert(format!("lstm.{dir}.wh"), Tensor::glorot(h, 4 * h, &mut rng));
            // gate order i, f, g, o; forget gate starts open
            let mut b = Tensor::zeros(1, 4 * h);
            b.data[h..2 * h].fill(1.0);
            params.insert(format!("lstm.{dir}.b"), b);
        }
        let maps = cfg.conv_feature_maps;
        for (i, &k) in cfg.kernel_sizes.iter().enumerate() {
            params.insert(format!("conv.{i}.weight"), Tensor::glorot(k * 2 * h, maps, &mut rng));
            params.insert(format!("conv.{i}.bias"), Tensor::zeros(1, maps));
        }
        let pooled = maps * cfg.kernel_sizes.len();
        params.insert("dense.weight", Tensor::glorot(pooled, cfg.dense_units, &mut rng));
        params.insert("dense.bias", Tensor::zeros(1, cfg.dense_units));
        params.insert("out.weight", Tensor::glorot(cfg.dense_units, 2, &mut rng));
        params.insert("out.bias", Tensor::zeros(1, 2));
        Self::restore(cfg.clone(), params, Tables::new(table))
    }

    pub(crate) fn restore(cfg: BiLstmConfig, params: ParamSet, tables: Tables) -> Result<Self, ModelError> {
        cfg.validate()?;
        let lstm = |dir: &str| -> Result<LstmIds, ModelError> {
            Ok(LstmIds {
                wx: lookup(&params, &format!("lstm.{dir}.wx"))?,
                wh: lookup(&params, &format!("lstm.{dir}.wh"))?,
                b: lookup(&params, &format!("lstm.{dir}.b"))?,
            })
        };
        let (fwd, bwd) = (lstm("fwd")?, lstm("bwd")?);
        if params.get(fwd.wx).rows != tables.train.dimension() {
            return Err(ModelError::Config(format!(
                "recurrent layer expects {}-dimensional vectors, table has {}",
                params.get(fwd.wx).rows,
                tables.train.dimension()
            )));
        }
        let mut convs = Vec::new();
        for (i, &k) in cfg.kernel_sizes.iter().enumerate() {
            convs.push((
                k,
                lookup(&params, &format!("conv.{i}.weight"))?,
                lookup(&params, &format!("conv.{i}.bias"))?,
            ));
        }
        let dense = (lookup(&params, "dense.weight")?, lookup(&params, "dense.bias")?);
        let out = (lookup(&params, "out.weight")?, lookup(&params, "out.bias")?);
        Ok(BiLstmNet {
            cfg,
            params,
            tables,
            fwd,
            bwd,
            convs,
            dense,
            out,
        })
    }

    pub(crate) fn pooled_width(&self) -> usize {
        self.cfg.conv_feature_maps * self.cfg.kernel_sizes.len()
    }

    /// Run one direction over the first `n` rows of `x`; returns `n x H`
    /// outputs in position order.
    fn run_direction(&self, tape: &mut Tape<'_>, x: Var, n: usize, ids: LstmIds, reverse: bool) -> Var {
        let h_units = self.cfg.recurrent_units;
        let (wx, wh, b) = (tape.param(ids.wx), tape.param(ids.wh), tape.param(ids.b));
        let proj = tape.matmul(x, wx);
        let proj = tape.add_row(proj, b);
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outputs = Vec::with_capacity(n);
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            let mut z = tape.slice_rows(proj, t, 1);
            if let Some(hp) = h {
                let r = tape.matmul(hp, wh);
                z = tape.add(z, r);
            }
            let i = tape.slice_cols(z, 0, h_units);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(z, h_units, h_units);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(z, 2 * h_units, h_units);
            let g = tape.tanh(g);
            let o = tape.slice_cols(z, 3 * h_units, h_units);
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, g);
            let cn = match c {
                Some(cp) => {
                    let fc = tape.mul(f, cp);
                    tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = tape.tanh(cn);
            let hn = tape.mul(o, tc);
            outputs.push(hn);
            h = Some(hn);
            c = Some(cn);
        }
        if reverse {
            outputs.reverse();
        }
        tape.stack_rows(&outputs)
    }
}

impl BiLstmNet {
    /// Zero-padded recurrent outputs and the pooled feature vector.
    fn features(&self, tape: &mut Tape<'_>, input: &Input) -> (Var, Var) {
        let Input::Words(enc, side) = input else {
            panic!("BiLSTM expects word indices");
        };
        let n = enc.true_length;
        let kmax = *self.cfg.kernel_sizes.iter().max().expect("validated");
        let rows = n.max(kmax).min(self.cfg.max_len);
        let width = 2 * self.cfg.recurrent_units;
        // the recurrence only sees real tokens; padding rows stay zero
        let seq = if n > 0 {
            let x = self.tables.lookup(tape, enc, *side, n);
            let f = self.run_direction(tape, x, n, self.fwd, false);
            let b = self.run_direction(tape, x, n, self.bwd, true);
            let both = tape.concat_cols(&[f, b]);
            if rows > n {
                let pad = tape.constant(Tensor::zeros(rows - n, width));
                tape.stack_rows(&[both, pad])
            } else {
                both
            }
        } else {
            tape.constant(Tensor::zeros(rows, width))
        };
        (seq, conv_pool(tape, seq, n, &self.convs))
    }
}

impl Classifier for BiLstmNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn encode(&self, text: &str, side: Side) -> Result<Input, ModelError> {
        Ok(self.tables.encode(text, side, self.cfg.max_len))
    }

    fn probe(&self, input: &Input) -> ShapeProbe {
        let mut tape = Tape::new(&self.params);
        let (seq, pooled) = self.features(&mut tape, input);
        ShapeProbe {
            sequence: Some(tape.value(seq).shape()),
            pooled: tape.value(pooled).cols,
        }
    }

    fn logits<'a>(&'a self, tape: &mut Tape<'a>, input: &Input, dropout: &mut Option<Dropout>) -> Var {
        let (_, pooled) = self.features(tape, input);
        let h = maybe_dropout(tape, pooled, dropout);
        let (w, b) = (tape.param(self.dense.0), tape.param(self.dense.1));
        let z = tape.matmul(h, w);
        let z = tape.add_row(z, b);
        let h = tape.relu(z);
        let (w, b) = (tape.param(self.out.0), tape.param(self.out.1));
        let z = tape.matmul(h, w);
        tape.add_row(z, b)
    }
}
