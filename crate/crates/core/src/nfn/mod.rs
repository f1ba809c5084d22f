//! Forecast network: a residual LSTM encoder over the lag window followed by
//! batch normalization and heads that emit every JDAN parameter.

mod batchnorm;
mod lstm;
mod model;

pub use batchnorm::{BatchNorm, BatchStats, BnMode, BN_EPS, BN_MOMENTUM};
pub use lstm::{lstm_sequence, lstm_step, LstmLayer, LstmVars};
pub use model::{
    encode, forward, Checkpoint, ForecastModel, Head, LstmBlock, NfnArch, NfnParams, NfnVars,
    WEIGHT_HEAD_BIAS,
};
