//! Closure rates, two-sample tests, offer-level logistic regression and reports.

pub mod basic;
pub mod logistic;
pub mod offers;
pub mod report;

pub use basic::{bonferroni, pct_change, round_half_even, welch_t_test, wilson_interval, WelchResult, Z_95};
pub use logistic::{cluster_robust_cov, fit_logistic, Design, FitResult};
pub use offers::{acceptance_design, offer_table, OfferRecord, OfferTable};
pub use report::{build_report, contrasts, deal_closure, summarize, write_report, Closure, Grouping, Report, METRICS};
