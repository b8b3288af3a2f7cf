use super::{count_params, ModelConfig};
use crate::error::{contract, Result};
use crate::heads::{HeadConfig, HeadKind};

/// Largest allowed relative gap between any two parameter counts of a
/// matched triple.
pub const MATCH_TOLERANCE: f64 = 0.02;

/// Which width absorbs the mixture heads' extra parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityKnob {
    /// Softmax keeps the base `d`; MoC and MoS shrink `d`.
    HeadDim,
    /// All heads keep the base `d`; Softmax grows the encoder hidden size.
    HiddenDim,
}

fn relative_gap(a: usize, b: usize) -> f64 {
    (a as f64 - b as f64).abs() / a.max(b) as f64
}

fn closest(target: usize, candidates: impl Iterator<Item = ModelConfig>) -> Option<ModelConfig> {
    candidates
        .filter(|c| c.validate().is_ok())
        .min_by_key(|c| count_params(c).abs_diff(target))
}

/// `[softmax, moc, mos]` configs derived from `base` whose parameter counts
/// agree within [`MATCH_TOLERANCE`]. Biases, projection and layer count are
/// taken from `base`.
pub fn matched_configs(base: &ModelConfig, k: usize, knob: CapacityKnob) -> Result<[ModelConfig; 3]> {
    base.validate()?;
    contract!(k >= 1, "K must be at least 1");
    let e = base.encoder;
    let rebuild = |kind: HeadKind, d: usize, hidden: usize| {
        let head = HeadConfig {
            kind,
            d,
            k: if kind == HeadKind::Softmax { 1 } else { k },
            ..base.head
        };
        let embed = if base.tied { d } else { e.embed_dim };
        let mut c = ModelConfig::new(e.vocab_size, embed, hidden, e.num_layers, head);
        c.tied = base.tied;
        c
    };
    let (softmax, mos) = match knob {
        CapacityKnob::HeadDim => {
            let softmax = rebuild(HeadKind::Softmax, base.head.d, e.hidden_dim);
            let target = count_params(&softmax);
            let mos = closest(
                target,
                (1..=base.head.d).map(|d| rebuild(HeadKind::Mos, d, e.hidden_dim)),
            );
            (Some(softmax), mos)
        }
        CapacityKnob::HiddenDim => {
            let mos = rebuild(HeadKind::Mos, base.head.d, e.hidden_dim);
            let target = count_params(&mos);
            let softmax = closest(
                target,
                (e.hidden_dim..=4 * e.hidden_dim + 64)
                    .map(|h| rebuild(HeadKind::Softmax, base.head.d, h)),
            );
            (softmax, Some(mos))
        }
    };
    let (Some(softmax), Some(mos)) = (softmax, mos) else {
        return Err(crate::error::Error::Contract(
            "no valid configuration for capacity matching".into(),
        ));
    };
    let moc = ModelConfig {
        head: HeadConfig {
            kind: HeadKind::Moc,
            ..mos.head
        },
        ..mos
    };
    let (a, b) = (count_params(&softmax), count_params(&mos));
    contract!(
        relative_gap(a, b) <= MATCH_TOLERANCE,
        "closest match differs by {:.2}% ({a} vs {b} parameters)",
        100.0 * relative_gap(a, b)
    );
    Ok([softmax, moc, mos])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(tied: bool) -> ModelConfig {
        let mut head = HeadConfig::new(HeadKind::Softmax, 16, 1);
        head.output_bias = false;
        let mut c = ModelConfig::new(200, 16, 64, 1, head);
        if !tied {
            c.encoder.embed_dim = 24;
            c.tied = false;
        }
        c
    }

    #[test]
    fn triples_are_within_tolerance() {
        for knob in [CapacityKnob::HeadDim, CapacityKnob::HiddenDim] {
            for tied in [true, false] {
                let [s, c, m] = matched_configs(&base(tied), 4, knob).unwrap();
                assert_eq!(s.head.kind, HeadKind::Softmax);
                assert_eq!(c.head.kind, HeadKind::Moc);
                assert_eq!(m.head.kind, HeadKind::Mos);
                let counts = [count_params(&s), count_params(&c), count_params(&m)];
                for x in counts {
                    for y in counts {
                        assert!(relative_gap(x, y) <= MATCH_TOLERANCE, "{knob:?} {counts:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn hidden_knob_keeps_head_width() {
        let [s, c, m] = matched_configs(&base(true), 4, CapacityKnob::HiddenDim).unwrap();
        assert!([s, c, m].iter().all(|x| x.head.d == 16));
        assert!(s.encoder.hidden_dim > m.encoder.hidden_dim);
    }
}
