//! Shift-invariant grouped mixed-effect Gaussian-process models.
//!
//! Each task is a periodic series `y_j(x) = f_s(x - t_j) + g_j(x) + noise`, where
//! `f_s` is the group effect of the task's cluster, `t_j` a circular phase shift
//! and `g_j` an individual GP deviation. Models are fitted by EM ([`em`]) or, with
//! a truncated stick-breaking prior on the clusters, by variational EM ([`dp`]).
//!
//! All times are phases in `[0, 1)`.

pub mod data;
pub mod dp;
pub mod em;
pub mod error;
pub mod gp;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod shift;
pub mod synth;

pub use data::{build_distinct_grid, normalize_series, snap_to_grid, Dataset, DistinctGrid, ShiftGrid, TaskSeries};
pub use dp::{fit_dp, DpConfig, DpState};
pub use em::{fit, EStepState, FitConfig, FitReport, GmtModel, KernelMode};
pub use error::{Error, Result};
pub use inference::{bic_select, class_discovery, classify, predict_task, ClassifierModel};
pub use kernel::{FixedKernel, KernelModel, RbfParams};
pub use shift::{GroupBasis, GroupEffect};
