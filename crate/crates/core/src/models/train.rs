use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, probabilities, Classifier, Dropout, Input, ModelError, Side, TrainedModel};
use crate::corpus::{Dataset, Label};
use crate::evaluation::{evaluate_labels, ReportMeta};
use crate::nn::{Adam, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyperparams {
    pub class_weight_no_hate: f64,
    pub class_weight_hate: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            class_weight_no_hate: 1.0,
            class_weight_hate: 1.0,
            dropout: 0.5,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let w = [self.class_weight_no_hate, self.class_weight_hate];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::Config(format!("class weights must be non-negative, got {w:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Weights indexed by [`Label::index`].
    pub fn class_weights(&self) -> [f64; 2] {
        [self.class_weight_no_hate, self.class_weight_hate]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `train` or `fine_tune`.
    pub stage: String,
    pub dataset: String,
    pub examples: usize,
    pub hyperparams: TrainingHyperparams,
    /// Development macro-F1 after each epoch (empty without a dev set).
    pub dev_macro_f1: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub skipped_batches: usize,
}

/// Sum of `w_y * CE` over the batch divided by the batch weight sum.
/// `None` when every example in the batch has weight zero.
pub(crate) fn batch_loss<'a>(
    clf: &'a dyn Classifier,
    tape: &mut Tape<'a>,
    inputs: &[&Input],
    targets: &[usize],
    class_weights: [f64; 2],
    dropout: &mut Option<Dropout>,
) -> Option<Var> {
    let weights: Vec<f64> = targets.iter().map(|&t| class_weights[t]).collect();
    let norm: f64 = weights.iter().sum();
    if norm <= 0.0 {
        return None;
    }
    let rows: Vec<Var> = inputs
        .iter()
        .map(|input| clf.logits(tape, input, dropout))
        .collect();
    let logits = tape.stack_rows(&rows);
    Some(tape.weighted_xent(logits, targets, &weights, norm))
}

/// Train from the current state. After every epoch the dev macro-F1 is
/// recorded; the parameters of the best epoch (earliest on ties) are kept.
pub fn train(
    model: &TrainedModel,
    data: &Dataset,
    hp: &TrainingHyperparams,
    dev: &Dataset,
) -> Result<TrainedModel, ModelError> {
    hp.validate()?;
    if hp.epochs == 0 {
        return Ok(model.clone());
    }
    if dev.is_empty() {
        return Err(ModelError::EmptyDev);
    }
    run(model, data, hp, Some(dev), "train")
}

/// Resume training on new data and keep the final state.
pub fn fine_tune(model: &TrainedModel, data: &Dataset, hp: &TrainingHyperparams) -> Result<TrainedModel, ModelError> {
    hp.validate()?;
    if hp.epochs == 0 {
        return Ok(model.clone());
    }
    run(model, data, hp, None, "fine_tune")
}

fn encode_all(clf: &dyn Classifier, data: &Dataset, side: Side) -> Result<Vec<Input>, ModelError> {
    data.iter()
        .map(|e| {
            clf.encode(&e.text, side).map_err(|err| ModelError::Encoding {
                id: e.id.clone(),
                message: err.to_string(),
            })
        })
        .collect()
}

fn dev_macro_f1(clf: &dyn Classifier, dev: &[Input], gold: &[Label]) -> Result<f64, ModelError> {
    let pred: Vec<Label> = dev.iter().map(|x| argmax(probabilities(clf, x))).collect();
    let report = evaluate_labels(gold, &pred, ReportMeta::default())?;
    Ok(report.macro_avg.f1)
}

fn diagnostics(params: &ParamSet, last_loss: Option<f64>) -> String {
    let bad: Vec<&str> = params
        .iter()
        .filter(|(_, _, t)| !t.all_finite())
        .map(|(_, name, _)| name)
        .collect();
    format!(
        "last finite loss {}, parameters with non-finite values: [{}]",
        last_loss.map_or("none".to_string(), |l| format!("{l:.6}")),
        bad.join(", ")
    )
}

fn run(
    model: &TrainedModel,
    data: &Dataset,
    hp: &TrainingHyperparams,
    dev: Option<&Dataset>,
    stage: &str,
) -> Result<TrainedModel, ModelError> {
    let mut targets = Vec::with_capacity(data.len());
    for e in data {
        let label = e.label.ok_or_else(|| ModelError::Unlabeled { id: e.id.clone() })?;
        targets.push(label.index());
    }
    let mut out = model.clone();
    if data.is_empty() {
        return Ok(out);
    }
    let inputs = encode_all(out.classifier(), data, Side::Train)?;
    let dev_data = match dev {
        Some(d) => {
            let gold = d
                .iter()
                .map(|e| e.label.ok_or_else(|| ModelError::Unlabeled { id: e.id.clone() }))
                .collect::<Result<Vec<_>, _>>()?;
            Some((encode_all(out.classifier(), d, Side::Predict)?, gold))
        }
        None => None,
    };
    let class_weights = if out.classifier().uses_class_weights() {
        hp.class_weights()
    } else {
        [1.0, 1.0]
    };

    let mut adam = Adam::new(hp.learning_rate, out.parameters().len());
    let mut order_rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut dropout = Some(Dropout::new(hp.dropout, hp.seed ^ 0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut last_loss = None;
    let mut skipped = 0;

    for epoch in 0..hp.epochs {
        order.shuffle(&mut order_rng);
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<&Input> = chunk.iter().map(|&i| &inputs[i]).collect();
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let clf = out.classifier();
            let mut tape = Tape::new(clf.params());
            let Some(loss) = batch_loss(clf, &mut tape, &batch, &batch_targets, class_weights, &mut dropout)
            else {
                skipped += 1;
                continue;
            };
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                    value,
                    diagnostics: diagnostics(clf.params(), last_loss),
                });
            }
            last_loss = Some(value);
            let grads = tape.backward(loss);
            drop(tape);
            adam.step(out.parameters_mut(), &grads);
        }
        if let Some((dev_inputs, gold)) = &dev_data {
            let f1 = dev_macro_f1(out.classifier(), dev_inputs, gold)?;
            log::info!("{stage} epoch {} dev macro-F1 {f1:.2}", epoch + 1);
            history.push(f1);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch + 1, out.parameters().clone()));
            }
        }
    }

    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            *out.parameters_mut() = params;
            epoch
        }
        None => hp.epochs,
    };
    out.provenance.stages.push(StageRecord {
        stage: stage.to_string(),
        dataset: data.name.clone(),
        examples: data.len(),
        hyperparams: hp.clone(),
        dev_macro_f1: history,
        selected_epoch,
        skipped_batches: skipped,
    });
    Ok(out)
}
