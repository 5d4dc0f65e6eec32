//! Vocabulary, tokenization, the text encoder and its two task heads.

pub mod encoder;
pub mod scalar;
pub mod vocab;

pub use encoder::{encode_plain, encode_prompt, predicted_label, EncoderConfig, Head, TextModel, TokenSequence};
pub use vocab::{tokenize, Verbalizer, Vocab};

use crate::diffengine::ParamStore;
use crate::error::{Error, Result};

impl TextModel {
    /// Sets the trainable mask from group selectors.
    ///
    /// A selector is an exact group name (`ff.0.weight`), a group prefix
    /// (`attn`, `ff`, `ff.1`, `cls`, `mlm`), `all`, or `verbalizer`, which
    /// selects only the MLM-head rows and biases of the two label words.
    pub fn set_trainable(&self, params: &mut ParamStore, selectors: &[String]) -> Result<()> {
        let mut mask = vec![false; params.values.len()];
        for sel in selectors {
            let sel = sel.trim();
            if sel == "verbalizer" {
                let l = self.layout();
                let out = l.out_dim;
                for id in self.verbalizer_ids() {
                    let row = l.mlm_w + id as usize * out;
                    mask[row..row + out].iter_mut().for_each(|m| *m = true);
                    mask[l.mlm_b + id as usize] = true;
                }
                continue;
            }
            let mut hit = false;
            for g in &params.groups {
                let matches = sel == "all"
                    || g.name == sel
                    || g.name.strip_prefix(sel).is_some_and(|rest| rest.starts_with('.'));
                if matches {
                    hit = true;
                    mask[g.offset..g.offset + g.len].iter_mut().for_each(|m| *m = true);
                }
            }
            if !hit {
                return Err(Error::Config(format!("selector `{sel}` matches no parameter group")));
            }
        }
        params.set_mask(mask)
    }

    /// True when no embedding or attention coordinate is trainable, so the
    /// prefix output can be cached.
    pub fn prefix_frozen(&self, params: &ParamStore) -> bool {
        !params.mask()[..self.layout().prefix_end].iter().any(|&m| m)
    }
}
