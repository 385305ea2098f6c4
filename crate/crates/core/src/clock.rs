//! Epoch bookkeeping for the simulation loop.

/// Counts engine steps. One tick per epoch: observe, intervene, outcome,
/// refit. The engine owns exactly one clock and advances it once per
/// `run_epoch`, so `epoch` equals the number of completed epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochClock {
    epoch: u64,
    samples_per_epoch: usize,
}

impl EpochClock {
    pub fn new(samples_per_epoch: usize) -> Self {
        EpochClock {
            epoch: 0,
            samples_per_epoch,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn samples_per_epoch(&self) -> usize {
        self.samples_per_epoch
    }

    pub fn advance(&mut self) {
        self.epoch += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advances_by_one() {
        let mut c = EpochClock::new(100);
        assert_eq!(c.epoch(), 0);
        for want in 1..=5 {
            c.advance();
            assert_eq!(c.epoch(), want);
        }
        assert_eq!(c.samples_per_epoch(), 100);
    }
}
