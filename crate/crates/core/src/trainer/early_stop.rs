#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Epoch of the first occurrence of the minimum; only a strictly lower
/// value moves it. Non-finite losses never become the minimum.
pub fn best_epoch(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < history[b]) {
            best = Some(i);
        }
    }
    best
}

/// Stops once the latest epoch is `patience` or more epochs past the best.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    let Some(last) = history.len().checked_sub(1) else {
        return StopDecision::Continue;
    };
    let since = match best_epoch(history) {
        Some(b) => last - b,
        None => history.len(),
    };
    if since >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Incremental form of [`early_stop_check`].
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, epoch: 0 }
    }

    /// Records the next validation loss; returns whether it is a new best and
    /// the stop decision.
    pub fn observe(&mut self, val_loss: f64) -> (bool, StopDecision) {
        let epoch = self.epoch;
        self.epoch += 1;
        let improved = val_loss.is_finite() && self.best.is_none_or(|(_, b)| val_loss < b);
        if improved {
            self.best = Some((epoch, val_loss));
        }
        let since = match self.best {
            Some((b, _)) => epoch - b,
            None => epoch + 1,
        };
        let decision = if since >= self.patience { StopDecision::Stop } else { StopDecision::Continue };
        (improved, decision)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}
