use crate::diffnet::Model;
use crate::ensemble::Checkpoint;
use crate::error::Result;
use crate::trainer::MetricsRecord;

/// Receives the trainer's output stream. `on_checkpoint` for an epoch is
/// always called before `on_epoch` for the same epoch.
pub trait TrainSink {
    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &MetricsRecord, _model: &Model) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}
