//! Activation export from the toy model into an [`ActivationStore`].

use std::collections::BTreeMap;

use serde_json::Value;

use crate::data::ProbeDataset;
use crate::error::{Error, Result};
use crate::store::{ActivationStore, StoreHeader, StoreSample, Unembedding};

use super::model::ToyLm;
use super::train::emitted_answer;

impl ToyLm<f32> {
    /// Short identifier recorded in store headers.
    pub fn model_name(&self) -> String {
        let c = &self.config;
        format!("toy-lm-L{}-d{}-h{}-s{}", c.n_layers, c.d_model, c.n_heads, c.seed)
    }
}

/// Runs every dataset prompt through the model and records the last prompt
/// token's state at each layer. The gold token is the first token the model
/// is trained to emit for the answer, and the unembedding is always included.
pub fn export_activations(model: &ToyLm<f32>, dataset: &ProbeDataset) -> Result<ActivationStore> {
    let mut samples = Vec::with_capacity(dataset.len());
    for (id, item) in dataset.items.iter().enumerate() {
        let tokens = model.vocab.tokenize(&item.problem.prompt)?;
        let (_, states) = model
            .forward_with_states(&tokens)
            .map_err(|e| Error::in_stage(format!("export sample {id}"), e))?;
        let emitted = emitted_answer(&item.problem.answer_text(), model.config.answer_order);
        let first = emitted.chars().next().expect("answers have at least one digit");
        let gold = model.vocab.id_of(first).ok_or(Error::UnknownSymbol { symbol: first, offset: 0 })?;
        samples.push(StoreSample { id: id as u64, label: item.label, gold_token: Some(gold), states: states.states });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), Value::from("toy-lm"));
    metadata.insert("answer_order".to_string(), Value::from(model.config.answer_order.name()));
    metadata.insert("dataset_seed".to_string(), Value::from(dataset.seed));
    metadata.insert("model_template".to_string(), Value::from(model.config.template.name()));
    let store = ActivationStore {
        header: StoreHeader {
            model_name: model.model_name(),
            d_model: model.config.d_model,
            n_layer_states: model.n_layer_states(),
            n_samples: samples.len(),
            template: dataset.template,
            tokenizer_fingerprint: model.vocab.fingerprint(),
            spec: dataset.spec,
            metadata,
        },
        samples,
        unembedding: Some(Unembedding { vocab: model.vocab.listing(), weights: model.unembedding().to_vec() }),
        final_norm: None,
    };
    store.validate()?;
    Ok(store)
}
