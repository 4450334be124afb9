use std::collections::HashMap;
use std::sync::Arc;

use crate::catalog::TokenId;
use crate::seqmodel::{LanguageModel, ModelError};

/// A model given by explicit conditional tables keyed on the tokens
/// generated after the prompt. Mass not assigned in a table is spread evenly
/// over the remaining tokens; unknown contexts are uniform.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: usize,
    tables: HashMap<Vec<TokenId>, Arc<[f64]>>,
    uniform: Arc<[f64]>,
}

#[derive(Debug, Clone)]
pub struct TableState {
    generated: Vec<TokenId>,
    probs: Arc<[f64]>,
}

impl TableModel {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            tables: HashMap::new(),
            uniform: vec![1.0 / vocab as f64; vocab].into(),
        }
    }

    pub fn set(&mut self, context: &[TokenId], entries: &[(TokenId, f64)]) {
        let assigned: f64 = entries.iter().map(|e| e.1).sum();
        let rest = self.vocab - entries.len();
        let fill = if rest == 0 { 0.0 } else { (1.0 - assigned).max(0.0) / rest as f64 };
        let mut p = vec![fill; self.vocab];
        for &(t, v) in entries {
            p[t as usize] = v;
        }
        self.tables.insert(context.to_vec(), p.into());
    }

    fn lookup(&self, generated: &[TokenId]) -> Arc<[f64]> {
        self.tables.get(generated).cloned().unwrap_or_else(|| self.uniform.clone())
    }
}

impl LanguageModel for TableModel {
    type State = TableState;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, prompt: &[TokenId]) -> Result<TableState, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        Ok(TableState {
            generated: Vec::new(),
            probs: self.lookup(&[]),
        })
    }

    fn extend(&self, state: &TableState, token: TokenId) -> Result<TableState, ModelError> {
        if token as usize >= self.vocab {
            return Err(ModelError::UnknownToken { token, vocab: self.vocab });
        }
        let mut generated = state.generated.clone();
        generated.push(token);
        let probs = self.lookup(&generated);
        Ok(TableState { generated, probs })
    }

    fn probs<'a>(&self, state: &'a TableState) -> &'a [f64] {
        &state.probs
    }
}
