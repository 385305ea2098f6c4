//! Deterministic, splittable randomness.
//!
//! Every stochastic component draws from an [`RngStream`], a node in a tree of
//! generators addressed by `(label, index)` paths from a root seed. Child
//! streams are derived by hashing, never by sharing generator state, so:
//!
//! * the same `(seed, path)` always yields the same draw sequence, regardless
//!   of thread scheduling or the order in which sibling streams are consumed;
//! * sibling streams are statistically independent, so a parallel loop can
//!   hand one stream to each work item and produce output identical to the
//!   serial loop.
//!
//! Derivation is SHA-256 over the parent state, the label bytes, and the
//! little-endian index; the digest seeds a ChaCha12 generator. ChaCha12 keeps
//! a comfortable statistical margin while being noticeably cheaper than
//! ChaCha20 in chain-heavy simulations.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Normal, Uniform};
use sha2::{Digest, Sha256};

/// One node in the stream tree. Cheap to clone and copy around; the real
/// generator is materialized on demand by [`RngStream::rng`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    state: [u8; 32],
}

impl RngStream {
    /// Root stream for an experiment seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"stacklab.root");
        hasher.update(seed.to_le_bytes());
        RngStream {
            state: hasher.finalize().into(),
        }
    }

    /// Child stream at `(label, index)`. Distinct labels and distinct indices
    /// both produce unrelated children.
    pub fn derive(&self, label: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.state);
        hasher.update([label.len() as u8]);
        hasher.update(label.as_bytes());
        hasher.update(index.to_le_bytes());
        RngStream {
            state: hasher.finalize().into(),
        }
    }

    /// Child stream keyed by arbitrary bytes, e.g. the bit pattern of a
    /// covariate point. Lets a stochastic evaluation be a pure function of
    /// its input while staying tied to this stream's lineage.
    pub fn derive_bytes(&self, label: &str, bytes: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.state);
        hasher.update([label.len() as u8]);
        hasher.update(label.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
        RngStream {
            state: hasher.finalize().into(),
        }
    }

    /// Materialize the generator for this node. Each call restarts the same
    /// sequence; callers that need fresh draws derive a child per use.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.state)
    }

    /// Single uniform draw on `[lo, hi)` from this node's sequence head.
    pub fn uniform(&self, lo: f64, hi: f64) -> f64 {
        Uniform::new(lo, hi).sample(&mut self.rng())
    }

    /// Fill a vector with i.i.d. normal draws.
    pub fn normal_vec(&self, n: usize, mean: f64, sd: f64) -> Vec<f64> {
        let dist = Normal::new(mean, sd).expect("finite sd");
        let mut rng = self.rng();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Fill a vector with i.i.d. uniform draws on `[lo, hi)`.
    pub fn uniform_vec(&self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let dist = Uniform::new(lo, hi);
        let mut rng = self.rng();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Bernoulli draw with success probability `p` (clamped to [0, 1]).
    pub fn bernoulli(&self, p: f64) -> bool {
        let p = p.clamp(0.0, 1.0);
        self.rng().gen_bool(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_path_same_draws() {
        let a = RngStream::from_seed(42).derive("epoch", 3).derive("sample", 7);
        let b = RngStream::from_seed(42).derive("epoch", 3).derive("sample", 7);
        let draws_a: Vec<u64> = {
            let mut r = a.rng();
            (0..32).map(|_| r.next_u64()).collect()
        };
        let draws_b: Vec<u64> = {
            let mut r = b.rng();
            (0..32).map(|_| r.next_u64()).collect()
        };
        assert_eq!(draws_a, draws_b);
    }

    #[test]
    fn different_seed_or_path_differs() {
        let base = RngStream::from_seed(42);
        assert_ne!(base, RngStream::from_seed(43));
        assert_ne!(base.derive("epoch", 0), base.derive("epoch", 1));
        assert_ne!(base.derive("epoch", 0), base.derive("sample", 0));
        // Label/index boundary must be unambiguous: ("ab", 1) vs ("a", ...).
        assert_ne!(base.derive("ab", 0x61), base.derive("aba", 0));
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        // Pearson correlation between sibling uniform streams stays small
        // over 10_000 draws. Threshold is loose; this guards against gross
        // state sharing, not subtle statistical flaws.
        let root = RngStream::from_seed(7);
        let n = 10_000;
        let xs = root.derive("left", 0).uniform_vec(n, 0.0, 1.0);
        let ys = root.derive("right", 0).uniform_vec(n, 0.0, 1.0);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&xs), mean(&ys));
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..n {
            cov += (xs[i] - mx) * (ys[i] - my);
            vx += (xs[i] - mx).powi(2);
            vy += (ys[i] - my).powi(2);
        }
        let r = cov / (vx.sqrt() * vy.sqrt());
        assert!(r.abs() < 0.05, "|r| = {} too large", r.abs());
    }

    #[test]
    fn consuming_one_stream_leaves_siblings_untouched() {
        let root = RngStream::from_seed(9);
        let sib = root.derive("b", 0);
        let before: u64 = sib.rng().next_u64();
        // Exhaust a different sibling heavily.
        let mut r = root.derive("a", 0).rng();
        for _ in 0..1000 {
            r.next_u64();
        }
        assert_eq!(before, sib.rng().next_u64());
    }
}
