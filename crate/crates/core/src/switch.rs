//! One-way switch from the local to the global model for inference, driven
//! by the global model's accuracy/confidence gap on the client's buffer.

use serde::{Deserialize, Serialize};

use crate::buffer::Buffer;
use crate::error::{FedError, Result};
use crate::model::{forward, masked_argmax, masked_softmax, CategoryMask, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchRule {
    /// Switch after two consecutive rounds of shrinking gap.
    TwoConsecutive,
    /// Switch after the first round of shrinking gap.
    SingleDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePolicy {
    /// Local model until the switch fires, global afterwards.
    Adaptive,
    AlwaysGlobal,
    AlwaysLocal,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GapMonitorState {
    pub last_gap: Option<f64>,
    pub last_delta_negative: bool,
    pub switched: bool,
    pub t_switch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReading {
    pub acc: f64,
    pub prob: f64,
    pub gap: f64,
}

/// Accuracy, mean true-label probability and their clamped gap for `model`
/// on the buffer, predictions masked to `seen`.
pub fn evaluate_gap(model: &ModelParams, buffer: &Buffer, seen: &CategoryMask) -> Result<GapReading> {
    if buffer.is_empty() {
        return Err(FedError::UndefinedMetric("gap on an empty buffer".into()));
    }
    let mut correct = 0usize;
    let mut prob = 0.0;
    for s in buffer.samples() {
        let logits = forward(model, &s.features)?;
        if masked_argmax(&logits, seen)? == s.label {
            correct += 1;
        }
        prob += masked_softmax(&logits, seen)?[s.label];
    }
    let n = buffer.len() as f64;
    Ok(reading(correct as f64 / n, prob / n))
}

pub fn reading(acc: f64, prob: f64) -> GapReading {
    GapReading {
        acc,
        prob,
        gap: (acc - prob).max(0.0),
    }
}

impl GapMonitorState {
    /// Folds one round's gap into the state. Frozen once switched.
    pub fn observe(&mut self, round: usize, gap: f64, rule: SwitchRule) {
        if self.switched {
            return;
        }
        let delta_negative = match self.last_gap {
            Some(prev) => gap - prev < 0.0,
            None => false,
        };
        let fire = match rule {
            SwitchRule::TwoConsecutive => delta_negative && self.last_delta_negative,
            SwitchRule::SingleDrop => delta_negative,
        };
        self.last_gap = Some(gap);
        self.last_delta_negative = delta_negative;
        if fire {
            self.switched = true;
            self.t_switch = Some(round);
        }
    }
}

pub fn inference_model<'a>(
    state: &GapMonitorState,
    local: &'a ModelParams,
    global: &'a ModelParams,
    policy: InferencePolicy,
) -> &'a ModelParams {
    match policy {
        InferencePolicy::AlwaysGlobal => global,
        InferencePolicy::AlwaysLocal => local,
        InferencePolicy::Adaptive if state.switched => global,
        InferencePolicy::Adaptive => local,
    }
}

/// Replays a gap sequence (rounds numbered from 1) and returns the switch round.
pub fn replay(gaps: &[f64], rule: SwitchRule) -> Option<usize> {
    let mut s = GapMonitorState::default();
    for (i, g) in gaps.iter().enumerate() {
        s.observe(i + 1, *g, rule);
    }
    s.t_switch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::ScoredItem;
    use crate::data::Sample;
    use proptest::prelude::{prop, prop_assert, proptest};

    #[test]
    fn reading_cases() {
        let r = reading(0.75, 0.60);
        assert!((r.gap - 0.15).abs() < 1e-15);
        assert_eq!(reading(0.4, 0.6).gap, 0.0);
        assert_eq!(reading(1.0, 1.0).gap, 0.0);
    }

    #[test]
    fn evaluate_on_confident_model() {
        let mut m = ModelParams::zeros(1, 1, 3);
        m.w1[(0, 0)] = 1.0;
        m.h[(0, 0)] = 80.0;
        m.h[(1, 0)] = -80.0;
        let seen = CategoryMask::new([0, 1], 3).unwrap();
        let item = |id, x: f64, label| ScoredItem {
            sample: Sample {
                id,
                features: vec![x],
                label,
            },
            g_hat: vec![1.0, 0.0],
            probs: vec![1.0, 0.0],
            p_true: 1.0,
        };
        let buf = Buffer::from_items(4, seen.clone(), vec![item(0, 3.0, 0), item(1, -3.0, 1)]).unwrap();
        let r = evaluate_gap(&m, &buf, &seen).unwrap();
        assert_eq!(r.acc, 1.0);
        assert!((r.prob - 1.0).abs() < 1e-12);
        assert!(r.gap < 1e-12);

        assert!(evaluate_gap(&m, &Buffer::new(3, 3), &seen).is_err());

        let mut four = ModelParams::zeros(1, 1, 3);
        four.bh[2] = 1.0;
        // constant logits: predicts category 2 everywhere
        let all = CategoryMask::new([0, 1, 2], 3).unwrap();
        let items = vec![item(0, 0.0, 0), item(1, 0.0, 2)];
        let b = Buffer::from_items(4, all.clone(), items).unwrap();
        let r = evaluate_gap(&four, &b, &all).unwrap();
        assert_eq!(r.acc, 0.5);
    }

    #[test]
    fn switch_examples() {
        assert_eq!(replay(&[0.30, 0.25, 0.20], SwitchRule::TwoConsecutive), Some(3));
        assert_eq!(replay(&[0.30, 0.35, 0.30, 0.25], SwitchRule::TwoConsecutive), Some(4));
        assert_eq!(replay(&[0.1, 0.2, 0.3, 0.4], SwitchRule::TwoConsecutive), None);
        assert_eq!(replay(&[0.30, 0.25], SwitchRule::SingleDrop), Some(2));
    }

    #[test]
    fn inference_selection() {
        let local = ModelParams::zeros(1, 1, 1);
        let mut global = local.clone();
        global.bh[0] = 1.0;
        let mut s = GapMonitorState::default();
        assert_eq!(inference_model(&s, &local, &global, InferencePolicy::Adaptive), &local);
        assert_eq!(
            inference_model(&s, &local, &global, InferencePolicy::AlwaysGlobal),
            &global
        );
        s.observe(3, 0.3, SwitchRule::TwoConsecutive);
        s.observe(4, 0.2, SwitchRule::TwoConsecutive);
        s.observe(5, 0.1, SwitchRule::TwoConsecutive);
        assert_eq!(s.t_switch, Some(5));
        s.observe(9, 0.9, SwitchRule::TwoConsecutive);
        assert_eq!(inference_model(&s, &local, &global, InferencePolicy::Adaptive), &global);
        assert_eq!(
            inference_model(&s, &local, &global, InferencePolicy::AlwaysLocal),
            &local
        );
    }

    proptest! {
        #[test]
        fn switching_is_one_way(gaps in prop::collection::vec(0.0f64..1.0, 0..40)) {
            let mut s = GapMonitorState::default();
            let mut was = false;
            for (i, g) in gaps.iter().enumerate() {
                s.observe(i + 1, *g, SwitchRule::TwoConsecutive);
                prop_assert!(!was || s.switched);
                was = s.switched;
            }
            if let Some(t) = s.t_switch {
                prop_assert!(t >= 3);
            }
        }
    }
}
