//! Recurrent cells and sequence runners for the temporal half of the
//! network: LSTM and GRU steps, forward/backward/bidirectional runs over
//! padded visit sequences, and backpropagation through time.

mod gru;
mod lstm;
mod sequence;

pub use gru::{gru_step, gru_step_backward, GruGrads, GruParams, GruStepCache};
pub use lstm::{lstm_step, lstm_step_backward, LstmGrads, LstmParams, LstmState, LstmStepCache};
pub use sequence::{
    bidirectional, bidirectional_backward, bptt_backward, run_sequence, time_distributed,
    BidirectionalCache, Cell, CellGrads, Direction, ReturnMode, RunCache, SequenceBatch,
};
