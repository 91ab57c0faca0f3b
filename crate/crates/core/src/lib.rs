//! Volumetric sequence deep learning (VSDL): a self-contained toolkit for
//! classifying stacked axial CT slices with three small architectures — a 3D
//! CNN, a CNN-LSTM, and a differential CNN-LSTM that consumes slice-to-slice
//! changes — plus the preprocessing, synthetic-cohort generation,
//! deterministic training, and ROC evaluation around them.

pub mod autodiff;
pub mod datapipe;
pub mod evalkit;
pub mod netblocks;

pub use autodiff::{
    adam_step, Activation, AdamState, Graph, LstmCellParams, LstmGates, Scalar, Tensor, Var,
};
