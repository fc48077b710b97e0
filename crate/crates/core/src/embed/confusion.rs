use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Synthetic,
}

impl Label {
    pub fn other(self) -> Self {
        match self {
            Label::Real => Label::Synthetic,
            Label::Synthetic => Label::Real,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub item_id: String,
    pub truth: Label,
    pub answer: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub real_selected_as_real: usize,
    pub real_as_synt: usize,
    pub synt_as_real: usize,
    pub synt_as_synt: usize,
    pub accuracy: f64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.real_selected_as_real + self.real_as_synt + self.synt_as_real + self.synt_as_synt
    }
}

/// Tallies one rater's responses. Each item may be answered once.
pub fn confusion_stats(responses: &[Response]) -> Result<ConfusionMatrix> {
    if responses.is_empty() {
        return Err(Error::Responses("no responses to tally".into()));
    }
    let mut seen = BTreeSet::new();
    let mut m = ConfusionMatrix {
        real_selected_as_real: 0,
        real_as_synt: 0,
        synt_as_real: 0,
        synt_as_synt: 0,
        accuracy: 0.0,
    };
    for r in responses {
        if !seen.insert(r.item_id.as_str()) {
            return Err(Error::Responses(format!("item {} answered twice", r.item_id)));
        }
        match (r.truth, r.answer) {
            (Label::Real, Label::Real) => m.real_selected_as_real += 1,
            (Label::Real, Label::Synthetic) => m.real_as_synt += 1,
            (Label::Synthetic, Label::Real) => m.synt_as_real += 1,
            (Label::Synthetic, Label::Synthetic) => m.synt_as_synt += 1,
        }
    }
    m.accuracy = (m.real_selected_as_real + m.synt_as_synt) as f64 / m.total() as f64;
    Ok(m)
}

/// A response log realizing the given cell counts, real items first.
pub fn responses_from_counts(rr: usize, rs: usize, sr: usize, ss: usize) -> Vec<Response> {
    let cells = [
        (rr, Label::Real, Label::Real),
        (rs, Label::Real, Label::Synthetic),
        (sr, Label::Synthetic, Label::Real),
        (ss, Label::Synthetic, Label::Synthetic),
    ];
    let mut out = Vec::with_capacity(rr + rs + sr + ss);
    for (count, truth, answer) in cells {
        for _ in 0..count {
            out.push(Response {
                item_id: format!("item{:03}", out.len()),
                truth,
                answer,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn tallies_cells() {
        let m = confusion_stats(&responses_from_counts(3, 1, 0, 4)).unwrap();
        assert_eq!((m.real_selected_as_real, m.real_as_synt, m.synt_as_real, m.synt_as_synt), (3, 1, 0, 4));
        assert_eq!(m.accuracy, 7.0 / 8.0);
        assert_eq!(confusion_stats(&responses_from_counts(5, 0, 0, 5)).unwrap().accuracy, 1.0);
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert!(confusion_stats(&[]).is_err());
        let mut r = responses_from_counts(1, 0, 0, 1);
        r[1].item_id = r[0].item_id.clone();
        assert!(confusion_stats(&r).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_symmetry(rr in 0usize..30, rs in 0usize..30, sr in 0usize..30, ss in 0usize..30) {
            prop_assume!(rr + rs + sr + ss > 0);
            let a = confusion_stats(&responses_from_counts(rr, rs, sr, ss)).unwrap();
            let swapped: Vec<Response> = responses_from_counts(rr, rs, sr, ss)
                .into_iter()
                .map(|r| Response { truth: r.truth.other(), answer: r.answer.other(), ..r })
                .collect();
            let b = confusion_stats(&swapped).unwrap();
            prop_assert_eq!((b.real_selected_as_real, b.real_as_synt, b.synt_as_real, b.synt_as_synt), (ss, sr, rs, rr));
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.total(), rr + rs + sr + ss);
        }
    }
}
