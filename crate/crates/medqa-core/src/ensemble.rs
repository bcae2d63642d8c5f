//! Majority voting over the answer alphabet {أ، ب، ج، د، هـ} with the
//! fixed tie-break priority RFA > AFS > ETA, plus leave-one-out
//! sub-ensembles for ablation.
//!
//! Abstentions (unparseable predictions) are excluded from the tally
//! rather than treated as a pseudo-choice; when every maximal choice is
//! tied, the winner is the vote of the highest-priority system that voted
//! for a tied choice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipelines::SystemId;
use crate::textnorm::CanonicalChoice;

/// One vote per committee system; `None` is an abstention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VoteInput {
    pub rfa: Option<CanonicalChoice>,
    pub afs: Option<CanonicalChoice>,
    pub eta: Option<CanonicalChoice>,
}

impl VoteInput {
    pub fn new(
        rfa: Option<CanonicalChoice>,
        afs: Option<CanonicalChoice>,
        eta: Option<CanonicalChoice>,
    ) -> Self {
        VoteInput { rfa, afs, eta }
    }

    pub fn vote_of(&self, system: SystemId) -> Option<CanonicalChoice> {
        match system {
            SystemId::Rfa => self.rfa,
            SystemId::Afs => self.afs,
            SystemId::Eta => self.eta,
            SystemId::Azs => None,
        }
    }

    /// Votes in descending priority order, skipping `excluded`.
    fn ballots(&self, excluded: Option<SystemId>) -> impl Iterator<Item = (SystemId, CanonicalChoice)> + '_ {
        SystemId::ENSEMBLE
            .into_iter()
            .filter(move |s| Some(*s) != excluded)
            .filter_map(|s| self.vote_of(s).map(|c| (s, c)))
    }
}

/// How the winning choice was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Majority,
    Priority,
}

/// Outcome of one vote: the winner, the full tally, and whether the
/// tie-break was needed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub winner: CanonicalChoice,
    pub tally: BTreeMap<CanonicalChoice, u32>,
    pub decided_by: DecidedBy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("every committee system abstained")]
pub struct AllAbstained;

fn vote_with_exclusion(input: &VoteInput, excluded: Option<SystemId>) -> Result<VoteOutcome, AllAbstained> {
    let mut tally: BTreeMap<CanonicalChoice, u32> = BTreeMap::new();
    for (_, choice) in input.ballots(excluded) {
        *tally.entry(choice).or_insert(0) += 1;
    }
    let top = tally.values().copied().max().ok_or(AllAbstained)?;
    let tied: Vec<CanonicalChoice> = tally
        .iter()
        .filter(|(_, count)| **count == top)
        .map(|(choice, _)| *choice)
        .collect();

    if let [winner] = tied[..] {
        return Ok(VoteOutcome {
            winner,
            tally,
            decided_by: DecidedBy::Majority,
        });
    }
    let winner = input
        .ballots(excluded)
        .find(|(_, choice)| tied.contains(choice))
        .map(|(_, choice)| choice)
        .expect("a tied choice always has a voter");
    Ok(VoteOutcome {
        winner,
        tally,
        decided_by: DecidedBy::Priority,
    })
}

/// Eq.-style majority vote over the three committee systems: the winner
/// maximizes the vote count; tied maxima fall to the highest-priority
/// voter among the tied choices.
pub fn majority_vote(input: &VoteInput) -> Result<VoteOutcome, AllAbstained> {
    vote_with_exclusion(input, None)
}

/// Majority vote with one system removed; a 1–1 tie resolves to the
/// higher-priority remaining system.
pub fn subensemble_vote(
    input: &VoteInput,
    excluded: SystemId,
) -> Result<VoteOutcome, AllAbstained> {
    vote_with_exclusion(input, Some(excluded))
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: CanonicalChoice = CanonicalChoice::Alif;
    const B: CanonicalChoice = CanonicalChoice::Ba;
    const J: CanonicalChoice = CanonicalChoice::Jim;
    const D: CanonicalChoice = CanonicalChoice::Dal;

    /// Straight-line reference vote: count each choice with explicit loops,
    /// take the set of maxima, then walk RFA, AFS, ETA in order for ties.
    /// Kept deliberately independent of the implementation above.
    pub(crate) fn oracle_vote(
        input: &VoteInput,
        excluded: Option<SystemId>,
    ) -> Result<VoteOutcome, AllAbstained> {
        let mut votes: Vec<(SystemId, Option<CanonicalChoice>)> = vec![
            (SystemId::Rfa, input.rfa),
            (SystemId::Afs, input.afs),
            (SystemId::Eta, input.eta),
        ];
        if let Some(excluded) = excluded {
            votes.retain(|(s, _)| *s != excluded);
        }

        let mut counts = [0u32; 5];
        for (_, vote) in &votes {
            if let Some(choice) = vote {
                counts[choice.index()] += 1;
            }
        }
        let mut top = 0;
        for &count in &counts {
            if count > top {
                top = count;
            }
        }
        if top == 0 {
            return Err(AllAbstained);
        }
        let mut tied = Vec::new();
        for (i, &count) in counts.iter().enumerate() {
            if count == top {
                tied.push(CanonicalChoice::from_index(i).unwrap());
            }
        }
        let mut tally = BTreeMap::new();
        for (i, &count) in counts.iter().enumerate() {
            if count > 0 {
                tally.insert(CanonicalChoice::from_index(i).unwrap(), count);
            }
        }
        if tied.len() == 1 {
            return Ok(VoteOutcome {
                winner: tied[0],
                tally,
                decided_by: DecidedBy::Majority,
            });
        }
        for (_, vote) in &votes {
            if let Some(choice) = vote {
                if tied.contains(choice) {
                    return Ok(VoteOutcome {
                        winner: *choice,
                        tally,
                        decided_by: DecidedBy::Priority,
                    });
                }
            }
        }
        unreachable!("some tied choice has a voter");
    }

    /// All 6 ballot states per system: the five letters plus abstain.
    pub(crate) fn all_ballot_states() -> Vec<Option<CanonicalChoice>> {
        let mut states: Vec<Option<CanonicalChoice>> =
            CanonicalChoice::ALL.iter().copied().map(Some).collect();
        states.push(None);
        states
    }

    #[test]
    fn strict_majority_wins() {
        let outcome = majority_vote(&VoteInput::new(Some(A), Some(A), Some(B))).unwrap();
        assert_eq!(outcome.winner, A);
        assert_eq!(outcome.decided_by, DecidedBy::Majority);
        assert_eq!(outcome.tally[&A], 2);
        assert_eq!(outcome.tally[&B], 1);
    }

    #[test]
    fn all_distinct_falls_to_rfa() {
        let outcome = majority_vote(&VoteInput::new(Some(A), Some(B), Some(J))).unwrap();
        assert_eq!(outcome.winner, A);
        assert_eq!(outcome.decided_by, DecidedBy::Priority);
    }

    #[test]
    fn tie_with_rfa_abstaining_falls_to_afs() {
        let outcome = majority_vote(&VoteInput::new(None, Some(B), Some(J))).unwrap();
        assert_eq!(outcome.winner, B);
        assert_eq!(outcome.decided_by, DecidedBy::Priority);
    }

    #[test]
    fn all_abstain_is_an_error() {
        assert_eq!(majority_vote(&VoteInput::default()), Err(AllAbstained));
    }

    #[test]
    fn matches_oracle_on_all_216_assignments() {
        let states = all_ballot_states();
        let mut checked = 0;
        for &rfa in &states {
            for &afs in &states {
                for &eta in &states {
                    let input = VoteInput::new(rfa, afs, eta);
                    assert_eq!(majority_vote(&input), oracle_vote(&input, None), "{input:?}");
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 216);
    }

    #[test]
    fn subensembles_match_oracle_exhaustively() {
        let states = all_ballot_states();
        for excluded in SystemId::ENSEMBLE {
            for &rfa in &states {
                for &afs in &states {
                    for &eta in &states {
                        let input = VoteInput::new(rfa, afs, eta);
                        assert_eq!(
                            subensemble_vote(&input, excluded),
                            oracle_vote(&input, Some(excluded)),
                            "{input:?} without {excluded}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn subensemble_examples() {
        // exclude ETA: unanimous pair
        let outcome =
            subensemble_vote(&VoteInput::new(Some(A), Some(A), Some(D)), SystemId::Eta).unwrap();
        assert_eq!((outcome.winner, outcome.decided_by), (A, DecidedBy::Majority));
        // exclude RFA: AFS outranks ETA on a 1-1 tie
        let outcome =
            subensemble_vote(&VoteInput::new(Some(A), Some(B), Some(J)), SystemId::Rfa).unwrap();
        assert_eq!((outcome.winner, outcome.decided_by), (B, DecidedBy::Priority));
        // exclude AFS: sole voter wins
        let outcome =
            subensemble_vote(&VoteInput::new(None, Some(B), Some(D)), SystemId::Afs).unwrap();
        assert_eq!((outcome.winner, outcome.decided_by), (D, DecidedBy::Majority));
    }

    #[test]
    fn unanimity_and_two_agree_dominance() {
        let states = all_ballot_states();
        for &c in CanonicalChoice::ALL.iter() {
            let outcome = majority_vote(&VoteInput::new(Some(c), Some(c), Some(c))).unwrap();
            assert_eq!(outcome.winner, c);
            // any two agreeing systems dominate the third
            for &third in &states {
                for pair in [
                    VoteInput::new(Some(c), Some(c), third),
                    VoteInput::new(Some(c), third, Some(c)),
                    VoteInput::new(third, Some(c), Some(c)),
                ] {
                    assert_eq!(majority_vote(&pair).unwrap().winner, c, "{pair:?}");
                }
            }
        }
    }

    #[test]
    fn winner_always_has_support_and_tally_sums_votes() {
        let states = all_ballot_states();
        for &rfa in &states {
            for &afs in &states {
                for &eta in &states {
                    let input = VoteInput::new(rfa, afs, eta);
                    let Ok(outcome) = majority_vote(&input) else {
                        continue;
                    };
                    assert!(outcome.tally[&outcome.winner] >= 1);
                    let cast = [rfa, afs, eta].iter().flatten().count() as u32;
                    assert_eq!(outcome.tally.values().sum::<u32>(), cast);
                    // priority soundness: the winner is the highest-priority
                    // voter among tied maxima
                    if outcome.decided_by == DecidedBy::Priority {
                        let top = *outcome.tally.values().max().unwrap();
                        let first_tied = SystemId::ENSEMBLE
                            .into_iter()
                            .filter_map(|s| input.vote_of(s))
                            .find(|c| outcome.tally[c] == top)
                            .unwrap();
                        assert_eq!(outcome.winner, first_tied);
                    }
                }
            }
        }
    }
}
