use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conv_pool, maybe_dropout, Classifier, Dropout, Input, ModelError, ShapeProbe, Side, Tables};
use crate::embeddings::{EmbeddingTable, DEFAULT_MAX_LEN};
use crate::nn::{ParamId, ParamSet, Tape, Tensor, Var};

/// Kim-style sentence CNN over frozen word vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub filter_sizes: Vec<usize>,
    pub filters_per_size: usize,
    /// Hidden dense layer between pooling and softmax; 0 means none.
    pub dense_units: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub frozen_embeddings: bool,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            filter_sizes: vec![3, 4, 5],
            filters_per_size: 100,
            dense_units: 0,
            dropout: 0.5,
            max_len: DEFAULT_MAX_LEN,
            frozen_embeddings: true,
            seed: 0,
        }
    }
}

pub(crate) fn check_kernels(sizes: &[usize], max_len: usize) -> Result<(), ModelError> {
    if sizes.is_empty() {
        return Err(ModelError::Config("kernel size list is empty".into()));
    }
    if max_len == 0 {
        return Err(ModelError::Config("max_len must be at least 1".into()));
    }
    for &k in sizes {
        if k == 0 {
            return Err(ModelError::Config("kernel size 0".into()));
        }
        if k > max_len {
            return Err(ModelError::FilterTooLong { size: k, max_len });
        }
    }
    Ok(())
}

pub(crate) fn check_dropout(rate: f64) -> Result<(), ModelError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ModelError::Config(format!("dropout {rate} outside [0, 1)")));
    }
    Ok(())
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_kernels(&self.filter_sizes, self.max_len)?;
        check_dropout(self.dropout)?;
        if self.filters_per_size == 0 {
            return Err(ModelError::Config("filters_per_size must be positive".into()));
        }
        if !self.frozen_embeddings {
            return Err(ModelError::Config("embeddings must stay frozen".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CnnNet {
    pub(crate) cfg: CnnConfig,
    pub(crate) params: ParamSet,
    pub(crate) tables: Tables,
    convs: Vec<(usize, ParamId, ParamId)>,
    dense: Option<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

fn lookup(params: &ParamSet, name: &str) -> Result<ParamId, ModelError> {
    params
        .id(name)
        .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
}

impl CnnNet {
    pub(crate) fn build(cfg: &CnnConfig, table: EmbeddingTable) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let dim = table.dimension();
        let f = cfg.filters_per_size;
        for (i, &k) in cfg.filter_sizes.iter().enumerate() {
            params.insert(format!("conv.{i}.weight"), Tensor::glorot(k * dim, f, &mut rng));
            params.insert(format!("conv.{i}.bias"), Tensor::zeros(1, f));
        }
        let mut width = f * cfg.filter_sizes.len();
        if cfg.dense_units > 0 {
            params.insert("dense.weight", Tensor::glorot(width, cfg.dense_units, &mut rng));
            params.insert("dense.bias", Tensor::zeros(1, cfg.dense_units));
            width = cfg.dense_units;
        }
        params.insert("out.weight", Tensor::glorot(width, 2, &mut rng));
        params.insert("out.bias", Tensor::zeros(1, 2));
        Self::restore(cfg.clone(), params, Tables::new(table))
    }

    pub(crate) fn restore(cfg: CnnConfig, params: ParamSet, tables: Tables) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut convs = Vec::new();
        for (i, &k) in cfg.filter_sizes.iter().enumerate() {
            convs.push((
                k,
                lookup(&params, &format!("conv.{i}.weight"))?,
                lookup(&params, &format!("conv.{i}.bias"))?,
            ));
        }
        let dense = if cfg.dense_units > 0 {
            Some((lookup(&params, "dense.weight")?, lookup(&params, "dense.bias")?))
        } else {
            None
        };
        let out = (lookup(&params, "out.weight")?, lookup(&params, "out.bias")?);
        let expect = cfg.filter_sizes[0] * tables.train.dimension();
        if params.get(convs[0].1).rows != expect {
            return Err(ModelError::Config(format!(
                "convolution expects {expect} inputs per window, embedding table gives {}",
                params.get(convs[0].1).rows
            )));
        }
        Ok(CnnNet {
            cfg,
            params,
            tables,
            convs,
            dense,
            out,
        })
    }

    pub(crate) fn pooled_width(&self) -> usize {
        self.cfg.filters_per_size * self.cfg.filter_sizes.len()
    }
}

impl CnnNet {
    /// Embedded input rows and the pooled feature vector.
    fn features(&self, tape: &mut Tape<'_>, input: &Input) -> (Var, Var) {
        let Input::Words(enc, side) = input else {
            panic!("CNN expects word indices");
        };
        let kmax = *self.cfg.filter_sizes.iter().max().expect("validated");
        let rows = enc.true_length.max(kmax).min(self.cfg.max_len);
        let x = self.tables.lookup(tape, enc, *side, rows);
        (x, conv_pool(tape, x, enc.true_length, &self.convs))
    }
}

impl Classifier for CnnNet {
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
        let (_, pooled) = self.features(&mut tape, input);
        ShapeProbe {
            sequence: None,
            pooled: tape.value(pooled).cols,
        }
    }

    fn logits<'a>(&'a self, tape: &mut Tape<'a>, input: &Input, dropout: &mut Option<Dropout>) -> Var {
        let (_, pooled) = self.features(tape, input);
        let mut h = maybe_dropout(tape, pooled, dropout);
        if let Some((w, b)) = self.dense {
            let (w, b) = (tape.param(w), tape.param(b));
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = tape.relu(z);
        }
        let (w, b) = (tape.param(self.out.0), tape.param(self.out.1));
        let z = tape.matmul(h, w);
        tape.add_row(z, b)
    }
}
