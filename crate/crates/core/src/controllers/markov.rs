use serde::{Deserialize, Serialize};

use crate::wmn::MealSize;

/// First-order Markov chain over meal sizes with additive smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealMarkovModel {
    pub counts: [[f64; 3]; 3],
    pub alpha: f64,
}

impl MealMarkovModel {
    pub fn new(alpha: f64) -> Self {
        Self {
            counts: [[0.0; 3]; 3],
            alpha,
        }
    }

    pub fn from_history(history: &[MealSize], alpha: f64) -> Self {
        let mut m = Self::new(alpha);
        for w in history.windows(2) {
            m.observe(w[0], w[1]);
        }
        m
    }

    pub fn observe(&mut self, from: MealSize, to: MealSize) {
        self.counts[from.index()][to.index()] += 1.0;
    }

    /// `(counts + alpha) / (row sum + 3 alpha)`; uniform when the row is empty
    /// and unsmoothed.
    pub fn row(&self, from: MealSize) -> [f64; 3] {
        let c = self.counts[from.index()];
        let denom: f64 = c.iter().sum::<f64>() + 3.0 * self.alpha;
        if denom <= 0.0 {
            return [1.0 / 3.0; 3];
        }
        c.map(|v| (v + self.alpha) / denom)
    }

    /// Most likely next size after the last observed one, ties resolved
    /// toward the larger meal.
    pub fn predict(&self, history: &[MealSize]) -> Option<(MealSize, [f64; 3])> {
        let last = *history.last()?;
        let dist = self.row(last);
        let mut best = 0;
        for k in 1..3 {
            if dist[k] >= dist[best] {
                best = k;
            }
        }
        Some((MealSize::from_index(best), dist))
    }
}

/// Free-function form over a fitted model.
pub fn meal_predict(model: &MealMarkovModel, history: &[MealSize]) -> Option<(MealSize, [f64; 3])> {
    model.predict(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use MealSize::*;

    #[test]
    fn dominant_diagonal() {
        let h = [Small; 6];
        let m = MealMarkovModel::from_history(&h, 1.0);
        assert_eq!(m.predict(&h).unwrap().0, Small);
    }

    #[test]
    fn ties_go_large() {
        let mut m = MealMarkovModel::new(0.0);
        for to in MealSize::ALL {
            m.observe(Medium, to);
        }
        assert_eq!(m.predict(&[Medium]).unwrap().0, Large);
        assert_eq!(MealMarkovModel::new(1.0).predict(&[Small]).unwrap().0, Large);
    }

    #[test]
    fn unsmoothed_row() {
        let mut m = MealMarkovModel::new(0.0);
        m.counts[0] = [2.0, 5.0, 3.0];
        let (size, dist) = m.predict(&[Small]).unwrap();
        assert_eq!(size, Medium);
        assert_eq!(dist, [0.2, 0.5, 0.3]);
    }

    #[test]
    fn empty_history() {
        assert!(MealMarkovModel::new(1.0).predict(&[]).is_none());
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(seq in proptest::collection::vec(0usize..3, 0..40), alpha in 0.0f64..3.0) {
            let h: Vec<MealSize> = seq.into_iter().map(MealSize::from_index).collect();
            let m = MealMarkovModel::from_history(&h, alpha);
            for s in MealSize::ALL {
                let r = m.row(s);
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                if alpha > 0.0 {
                    prop_assert!(r.iter().all(|&p| p > 0.0));
                }
            }
        }
    }
}
