use crate::corpus::LabelSet;
use crate::error::Result;

/// A BIO tag over a label set. Payloads are label indices into the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BioTag {
    Begin(usize),
    Inside(usize),
    Outside,
}

impl BioTag {
    pub fn label(self) -> Option<usize> {
        match self {
            BioTag::Begin(l) | BioTag::Inside(l) => Some(l),
            BioTag::Outside => None,
        }
    }
}

/// The none label maps to `O`; any other label opens a run with `B_x` when
/// the previous label differs and continues it with `I_x` otherwise.
pub fn encode_bio<S: AsRef<str>>(labels: &[S], label_set: &LabelSet) -> Result<Vec<BioTag>> {
    let mut out = Vec::with_capacity(labels.len());
    let mut prev = None;
    for label in labels {
        let idx = label_set.require(label.as_ref())?;
        let tag = if idx == label_set.none_index() {
            BioTag::Outside
        } else if prev == Some(idx) {
            BioTag::Inside(idx)
        } else {
            BioTag::Begin(idx)
        };
        out.push(tag);
        prev = Some(idx);
    }
    Ok(out)
}

/// Inverse of [`encode_bio`]. A stray `I_x` (not following `B_x`/`I_x`) is
/// read as the start of a new `x` run, so the label it yields is still `x`.
pub fn decode_bio(bio: &[BioTag], label_set: &LabelSet) -> Vec<String> {
    bio.iter()
        .map(|tag| match tag.label() {
            Some(l) => label_set.label(l).to_string(),
            None => label_set.none_label().to_string(),
        })
        .collect()
}
