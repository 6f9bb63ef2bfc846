//! Rank aggregation over several models' rankings of the same labs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::rank::{Ranking, RankingKind};
use crate::{Error, Result};

/// One or more rankings ("voters") over the same lab set.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingProfile {
    rankings: Vec<Ranking>,
}

impl RankingProfile {
    pub fn new(rankings: Vec<Ranking>) -> Result<Self> {
        let first = rankings.first().ok_or_else(|| Error::invalid("profile needs at least one ranking"))?;
        if let Some(r) = rankings.iter().find(|r| r.len() != first.len()) {
            return Err(Error::invalid(format!(
                "rankings cover {} and {} labs",
                first.len(),
                r.len()
            )));
        }
        Ok(RankingProfile { rankings })
    }

    pub fn rankings(&self) -> &[Ranking] {
        &self.rankings
    }

    pub fn lab_count(&self) -> usize {
        self.rankings[0].len()
    }

    /// `positions[v][lab]`, zero-based.
    fn positions(&self) -> Vec<Vec<usize>> {
        self.rankings
            .iter()
            .map(|r| {
                let mut p = vec![0; r.len()];
                for (i, lab) in r.labs().enumerate() {
                    p[lab] = i;
                }
                p
            })
            .collect()
    }
}

/// Mean one-based position of every lab across voters.
pub fn mean_positions(p: &RankingProfile) -> Vec<f64> {
    let pos = p.positions();
    let voters = pos.len() as f64;
    (0..p.lab_count())
        .map(|lab| pos.iter().map(|v| (v[lab] + 1) as f64).sum::<f64>() / voters)
        .collect()
}

/// Labs ordered by ascending mean position; scores are the negated means.
pub fn borda_aggregate(p: &RankingProfile) -> Result<Ranking> {
    let scores: Vec<f64> = mean_positions(p).into_iter().map(|m| -m).collect();
    Ranking::from_scores(RankingKind::EnsembleBorda, &scores)
}

/// Wins minus losses over all pairwise majority contests.
pub fn copeland_scores(p: &RankingProfile) -> Vec<i64> {
    let pos = p.positions();
    let l = p.lab_count();
    let mut scores = vec![0i64; l];
    for a in 0..l {
        for b in (a + 1)..l {
            let a_above = pos.iter().filter(|v| v[a] < v[b]).count();
            let b_above = pos.len() - a_above;
            match a_above.cmp(&b_above) {
                core::cmp::Ordering::Greater => {
                    scores[a] += 1;
                    scores[b] -= 1;
                }
                core::cmp::Ordering::Less => {
                    scores[a] -= 1;
                    scores[b] += 1;
                }
                core::cmp::Ordering::Equal => {}
            }
        }
    }
    scores
}

/// Labs ordered by Copeland score, then mean position, then lab index.
///
/// The reported score is `copeland - mean_position / (L + 1)`. Mean positions
/// lie in `[1, L]`, so this never reorders different Copeland scores and
/// encodes the Borda tie-break in the score itself.
pub fn copeland_aggregate(p: &RankingProfile) -> Result<Ranking> {
    let denom = (p.lab_count() + 1) as f64;
    let scores: Vec<f64> = copeland_scores(p)
        .into_iter()
        .zip(mean_positions(p))
        .map(|(c, m)| c as f64 - m / denom)
        .collect();
    Ranking::from_scores(RankingKind::EnsembleCopeland, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn ranking(order: &[usize]) -> Ranking {
        let entries = order.iter().enumerate().map(|(i, &l)| (l, -(i as f64))).collect();
        Ranking::from_entries(RankingKind::Triplet, entries).unwrap()
    }

    fn order(r: &Ranking) -> Vec<usize> {
        r.labs().collect()
    }

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;

    fn three_voters() -> RankingProfile {
        RankingProfile::new(vec![ranking(&[A, B, C]), ranking(&[B, A, C]), ranking(&[A, C, B])]).unwrap()
    }

    #[test]
    fn borda_hand_example() {
        let p = three_voters();
        let m = mean_positions(&p);
        assert!((m[A] - 4.0 / 3.0).abs() < 1e-12);
        assert!((m[B] - 2.0).abs() < 1e-12);
        assert!((m[C] - 8.0 / 3.0).abs() < 1e-12);
        let r = borda_aggregate(&p).unwrap();
        assert_eq!(order(&r), vec![A, B, C]);
        assert_eq!(r.kind, RankingKind::EnsembleBorda);
    }

    #[test]
    fn copeland_hand_example() {
        let p = three_voters();
        assert_eq!(copeland_scores(&p), vec![2, 0, -2]);
        let r = copeland_aggregate(&p).unwrap();
        assert_eq!(order(&r), vec![A, B, C]);
        assert_eq!(r.kind, RankingKind::EnsembleCopeland);
    }

    #[test]
    fn single_voter_and_unanimity() {
        let one = RankingProfile::new(vec![ranking(&[2, 0, 3, 1])]).unwrap();
        assert_eq!(order(&borda_aggregate(&one).unwrap()), vec![2, 0, 3, 1]);
        assert_eq!(order(&copeland_aggregate(&one).unwrap()), vec![2, 0, 3, 1]);
        let same = RankingProfile::new(vec![ranking(&[3, 1, 0, 2]); 4]).unwrap();
        assert_eq!(order(&borda_aggregate(&same).unwrap()), vec![3, 1, 0, 2]);
        assert_eq!(copeland_scores(&same)[3], 3);
        assert_eq!(order(&copeland_aggregate(&same).unwrap())[0], 3);
    }

    #[test]
    fn copeland_ties_fall_back_to_borda_then_index() {
        // a Condorcet cycle: every lab scores 0 and every mean position is 2
        let p = RankingProfile::new(vec![ranking(&[A, B, C]), ranking(&[B, C, A]), ranking(&[C, A, B])]).unwrap();
        assert_eq!(copeland_scores(&p), vec![0, 0, 0]);
        assert_eq!(order(&copeland_aggregate(&p).unwrap()), vec![A, B, C]);
        // two voters split A/B evenly; C is last for both
        let p = RankingProfile::new(vec![ranking(&[B, A, C]), ranking(&[A, B, C])]).unwrap();
        assert_eq!(order(&copeland_aggregate(&p).unwrap()), vec![A, B, C]);
    }

    #[test]
    fn mismatched_profiles_are_rejected() {
        assert!(RankingProfile::new(vec![]).is_err());
        assert!(RankingProfile::new(vec![ranking(&[0, 1]), ranking(&[0, 1, 2])]).is_err());
    }

    fn random_profile(s: u64, labs: usize, voters: usize) -> RankingProfile {
        let mut rng = seed::rng(s, &[]);
        let rankings = (0..voters)
            .map(|_| {
                let mut o: Vec<usize> = (0..labs).collect();
                o.shuffle(&mut rng);
                ranking(&o)
            })
            .collect();
        RankingProfile::new(rankings).unwrap()
    }

    proptest! {
        #[test]
        fn condorcet_winner_comes_first(s in any::<u64>(), labs in 1usize..=8, voters in 1usize..=5) {
            let p = random_profile(s, labs, voters);
            let pos = p.positions();
            let beats = |a: usize, b: usize| {
                let above = pos.iter().filter(|v| v[a] < v[b]).count();
                2 * above > voters
            };
            let winner = (0..labs).find(|&a| (0..labs).all(|b| a == b || beats(a, b)));
            if let Some(w) = winner {
                prop_assert_eq!(copeland_aggregate(&p).unwrap().top().0, w);
            }
        }

        #[test]
        fn rules_are_anonymous_permutations(s in any::<u64>(), labs in 1usize..=8, voters in 1usize..=5) {
            let p = random_profile(s, labs, voters);
            let mut reversed = p.rankings().to_vec();
            reversed.reverse();
            let q = RankingProfile::new(reversed).unwrap();
            for rule in [borda_aggregate, copeland_aggregate] {
                let a = rule(&p).unwrap();
                prop_assert_eq!(order(&a), order(&rule(&q).unwrap()));
                let mut sorted = order(&a);
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..labs).collect::<Vec<_>>());
            }
        }

        #[test]
        fn borda_matches_a_mean_position_sort(s in any::<u64>(), labs in 1usize..=8, voters in 1usize..=5) {
            let p = random_profile(s, labs, voters);
            let pos = p.positions();
            let mut expected: Vec<usize> = (0..labs).collect();
            let total = |l: usize| pos.iter().map(|v| v[l]).sum::<usize>();
            expected.sort_by_key(|&l| (total(l), l));
            prop_assert_eq!(order(&borda_aggregate(&p).unwrap()), expected);
        }
    }
}
