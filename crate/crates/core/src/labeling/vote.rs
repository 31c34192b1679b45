use std::collections::BTreeMap;

use super::{CropClass, LabelError, WindowPrediction, N_CLASSES};

/// Result of aggregating one image's windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vote {
    pub votes: [u32; N_CLASSES],
    /// `None` when the image is rejected.
    pub label: Option<CropClass>,
}

impl Vote {
    pub fn is_rejected(&self) -> bool {
        self.label.is_none()
    }
}

/// Strategy turning an image's window predictions into one label.
pub trait VoteRule: Send + Sync {
    fn name(&self) -> &str;
    fn decide(&self, preds: &[WindowPrediction]) -> Result<Vote, LabelError>;
}

/// Mode of high probabilities: a window votes for its top class only when
/// that probability is strictly above `tau`; the image takes the unique
/// most-voted class and is rejected on zero votes or a tie.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mhp {
    tau: f64,
}

impl Mhp {
    pub fn new(tau: f64) -> Result<Self, LabelError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(LabelError::InvalidThreshold(tau));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl VoteRule for Mhp {
    fn name(&self) -> &str {
        "mhp"
    }

    fn decide(&self, preds: &[WindowPrediction]) -> Result<Vote, LabelError> {
        if preds.is_empty() {
            return Err(LabelError::NoWindows);
        }
        let mut votes = [0u32; N_CLASSES];
        for p in preds {
            let (c, prob) = p.top();
            if prob > self.tau {
                votes[c.index()] += 1;
            }
        }
        Ok(Vote {
            votes,
            label: unique_argmax(&votes),
        })
    }
}

fn unique_argmax(votes: &[u32; N_CLASSES]) -> Option<CropClass> {
    let max = *votes.iter().max()?;
    if max == 0 || votes.iter().filter(|&&v| v == max).count() > 1 {
        return None;
    }
    CropClass::from_index(votes.iter().position(|&v| v == max)?)
}

/// Convenience wrapper over [`Mhp`].
pub fn mhp_vote(preds: &[WindowPrediction], tau: f64) -> Result<Vote, LabelError> {
    Mhp::new(tau)?.decide(preds)
}

/// Averages the softmax vectors over all windows and takes the top class,
/// rejecting when its mean probability is not above `tau` or is tied.
/// `votes` reports each window's top class without thresholding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSoftmax {
    tau: f64,
}

impl MeanSoftmax {
    pub fn new(tau: f64) -> Result<Self, LabelError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(LabelError::InvalidThreshold(tau));
        }
        Ok(Self { tau })
    }
}

impl VoteRule for MeanSoftmax {
    fn name(&self) -> &str {
        "mean-softmax"
    }

    fn decide(&self, preds: &[WindowPrediction]) -> Result<Vote, LabelError> {
        if preds.is_empty() {
            return Err(LabelError::NoWindows);
        }
        let mut mean = [0.0; N_CLASSES];
        let mut votes = [0u32; N_CLASSES];
        for p in preds {
            for (m, v) in mean.iter_mut().zip(p.probs) {
                *m += v / preds.len() as f64;
            }
            votes[p.top().0.index()] += 1;
        }
        let max = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tied = mean.iter().filter(|&&m| m == max).count() > 1;
        let label = (!tied && max > self.tau)
            .then(|| mean.iter().position(|&m| m == max).and_then(CropClass::from_index))
            .flatten();
        Ok(Vote { votes, label })
    }
}

type RuleFactory = Box<dyn Fn(f64) -> Result<Box<dyn VoteRule>, LabelError> + Send + Sync>;

/// Vote rules by name, each built from a threshold.
pub struct VoteRegistry {
    rules: BTreeMap<String, RuleFactory>,
}

impl VoteRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self {
            rules: BTreeMap::new(),
        };
        r.register("mhp", |tau| Ok(Box::new(Mhp::new(tau)?)));
        r.register("mean-softmax", |tau| Ok(Box::new(MeanSoftmax::new(tau)?)));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(f64) -> Result<Box<dyn VoteRule>, LabelError> + Send + Sync + 'static,
    {
        self.rules.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, name: &str, tau: f64) -> Result<Box<dyn VoteRule>, LabelError> {
        let f = self
            .rules
            .get(name)
            .ok_or_else(|| LabelError::UnknownRule(name.to_string()))?;
        f(tau)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }
}

impl Default for VoteRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::WindowRect;
    use proptest::prelude::*;

    const RECT: WindowRect = WindowRect { x: 0, y: 0, w: 300, h: 300 };

    fn confident(c: usize, p: f64) -> WindowPrediction {
        let mut probs = [(1.0 - p) / 4.0; N_CLASSES];
        probs[c] = p;
        WindowPrediction::new(RECT, probs).unwrap()
    }

    #[test]
    fn unanimous() {
        let preds = vec![confident(0, 0.95); 3];
        let v = mhp_vote(&preds, 0.9).unwrap();
        assert_eq!(v.label, Some(CropClass::Rice));
        assert_eq!(v.votes, [3, 0, 0, 0, 0]);
    }

    #[test]
    fn below_threshold_rejects() {
        let preds = vec![confident(1, 0.85), confident(2, 0.6), confident(0, 0.9)];
        assert!(mhp_vote(&preds, 0.9).unwrap().is_rejected());
    }

    #[test]
    fn tie_rejects() {
        let preds = vec![confident(0, 0.95), confident(2, 0.97), confident(0, 0.93), confident(2, 0.99)];
        let v = mhp_vote(&preds, 0.9).unwrap();
        assert_eq!(v.votes, [2, 0, 2, 0, 0]);
        assert!(v.is_rejected());
    }

    #[test]
    fn raising_tau_can_break_a_tie() {
        // acceptance per image is not monotone in tau: a tie at a low
        // threshold may resolve once the weaker vote drops out
        let preds = vec![confident(0, 0.95), confident(2, 0.8)];
        assert!(mhp_vote(&preds, 0.7).unwrap().is_rejected());
        assert_eq!(mhp_vote(&preds, 0.9).unwrap().label, Some(CropClass::Rice));
    }

    #[test]
    fn errors() {
        assert!(matches!(mhp_vote(&[], 0.9), Err(LabelError::NoWindows)));
        assert!(matches!(mhp_vote(&[confident(0, 1.0)], 1.5), Err(LabelError::InvalidThreshold(_))));
    }

    #[test]
    fn zero_threshold_never_rejects_distinct_maxima() {
        let preds = vec![confident(3, 0.3), confident(3, 0.4), confident(1, 0.5)];
        assert_eq!(mhp_vote(&preds, 0.0).unwrap().label, Some(CropClass::Sugarcane));
    }

    #[test]
    fn mean_softmax() {
        let preds = vec![confident(0, 0.95), confident(0, 0.85), confident(1, 0.9)];
        let v = MeanSoftmax::new(0.5).unwrap().decide(&preds).unwrap();
        assert_eq!(v.label, Some(CropClass::Rice));
        assert_eq!(v.votes, [2, 1, 0, 0, 0]);
        assert!(MeanSoftmax::new(0.7).unwrap().decide(&preds).unwrap().is_rejected());
    }

    #[test]
    fn registry() {
        let r = VoteRegistry::with_builtins();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["mean-softmax", "mhp"]);
        assert_eq!(r.build("mhp", 0.9).unwrap().name(), "mhp");
        assert!(matches!(r.build("plurality", 0.9), Err(LabelError::UnknownRule(_))));
    }

    fn arb_pred() -> impl Strategy<Value = WindowPrediction> {
        prop::array::uniform5(0.0f64..1.0).prop_filter_map("positive mass", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-3).then(|| {
                let mut probs = raw.map(|v| v / s);
                let fix = 1.0 - probs[..4].iter().sum::<f64>();
                probs[4] = fix.max(0.0);
                WindowPrediction::new(RECT, probs).ok()
            })?
        })
    }

    proptest! {
        #[test]
        fn order_invariant(mut preds in prop::collection::vec(arb_pred(), 1..12), tau in 0.0f64..1.0, seed: u64) {
            let a = mhp_vote(&preds, tau).unwrap();
            let k = (seed as usize) % preds.len();
            preds.rotate_left(k);
            preds.reverse();
            prop_assert_eq!(a, mhp_vote(&preds, tau).unwrap());
        }

        #[test]
        fn raising_tau_never_adds_votes(preds in prop::collection::vec(arb_pred(), 1..12), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = mhp_vote(&preds, lo).unwrap();
            let b = mhp_vote(&preds, hi).unwrap();
            for c in 0..N_CLASSES {
                prop_assert!(b.votes[c] <= a.votes[c]);
            }
        }
    }
}
