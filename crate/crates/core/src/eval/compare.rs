use serde::{Deserialize, Serialize};

/// Outcome from the first candidate's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Win,
    Lose,
    Tie,
}

impl Verdict {
    pub fn flip(self) -> Self {
        match self {
            Verdict::Win => Verdict::Lose,
            Verdict::Lose => Verdict::Win,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// Closed interval of `σ(r1 − r2)` that counts as a tie.
pub const TIE_BAND: (f64, f64) = (0.45, 0.55);

/// Slack on the band edges so that a difference landing on the edge up to
/// rounding still counts as inside the closed interval.
const EDGE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub r1: f64,
    pub r2: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn compare(pair: RewardPair) -> Verdict {
    let s = sigmoid(pair.r1 - pair.r2);
    if s > TIE_BAND.1 + EDGE_SLACK {
        Verdict::Win
    } else if s < TIE_BAND.0 - EDGE_SLACK {
        Verdict::Lose
    } else {
        Verdict::Tie
    }
}

/// Combines the verdicts from both presentation orders, each already from
/// the candidate's point of view: two wins or a win and a tie is a win, two
/// losses or a loss and a tie is a loss, anything else is a tie.
pub fn aggregate_two_orders(ab: Verdict, ba: Verdict) -> Verdict {
    use Verdict::*;
    match (ab, ba) {
        (Win, Win) | (Win, Tie) | (Tie, Win) => Win,
        (Lose, Lose) | (Lose, Tie) | (Tie, Lose) => Lose,
        (Tie, Tie) | (Win, Lose) | (Lose, Win) => Tie,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(d: f64) -> Verdict {
        compare(RewardPair { r1: d, r2: 0.0 })
    }

    #[test]
    fn examples() {
        assert_eq!(v(0.0), Verdict::Tie);
        assert_eq!(v(0.5), Verdict::Win);
        assert!((sigmoid(0.5) - 0.622_459_331_201_854_6).abs() < 1e-15);
        assert_eq!(v(-1.0), Verdict::Lose);
        assert!((sigmoid(-1.0) - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn band_edges_inclusive() {
        let edge = (0.55f64 / 0.45).ln();
        assert_eq!(v(edge), Verdict::Tie);
        assert_eq!(v(-edge), Verdict::Tie);
        assert_eq!(v(edge + 1e-9), Verdict::Win);
        assert_eq!(v(-edge - 1e-9), Verdict::Lose);
    }

    #[test]
    fn aggregation_table() {
        use Verdict::*;
        let all = [Win, Lose, Tie];
        for a in all {
            for b in all {
                assert_eq!(aggregate_two_orders(a, b), aggregate_two_orders(b, a));
            }
        }
        assert_eq!(aggregate_two_orders(Win, Win), Win);
        assert_eq!(aggregate_two_orders(Win, Tie), Win);
        assert_eq!(aggregate_two_orders(Win, Lose), Tie);
    }

    proptest! {
        #[test]
        fn antisymmetric(r1 in -5.0f64..5.0, r2 in -5.0f64..5.0) {
            let a = compare(RewardPair { r1, r2 });
            let b = compare(RewardPair { r1: r2, r2: r1 });
            prop_assert_eq!(a, b.flip());
        }

        #[test]
        fn translation_invariant(r1 in -1.0f64..1.0, r2 in -1.0f64..1.0, k in -3.0f64..3.0) {
            // away from the edges, where rounding of the shifted difference
            // could cross the band boundary
            let d = r1 - r2;
            let edge = (0.55f64 / 0.45).ln();
            prop_assume!((d.abs() - edge).abs() > 1e-9);
            prop_assert_eq!(compare(RewardPair { r1, r2 }), compare(RewardPair { r1: r1 + k, r2: r2 + k }));
        }
    }
}
