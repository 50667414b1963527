//! Condition summaries, Control contrasts and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::basic::{bonferroni, mean, pct_change, round_half_even, stars, std_dev, welch_t_test, wilson_interval, WelchResult, Z_95};
use super::logistic::{fit_logistic, FitResult};
use super::offers::{acceptance_design, offer_table, OfferRecord};
use crate::error::{RunnerError, StatsError};
use crate::metrics::NegotiationMetrics;
use crate::runner::{LoadedRuns, RunRecord};
use crate::temporal::{Treatment, TreatmentConfig};

/// Table-level metrics, in report order.
pub const METRICS: [(&str, fn(&NegotiationMetrics) -> Option<f64>); 8] = [
    ("Utterances per negotiation", |m| Some(m.utterances as f64)),
    ("Words per negotiation", |m| Some(m.words_total as f64)),
    ("Words per utterance", |m| m.words_per_utterance),
    ("Reasoning tokens per utterance", |m| m.reasoning_tokens_per_utterance),
    ("Deal closure rate (%)", |m| Some(if m.closure { 100.0 } else { 0.0 })),
    ("Percentage utterances to agreement", |m| m.pct_utterances_to_agreement),
    ("First offer joint payoff", |m| m.first_offer_joint.map(|p| p as f64)),
    ("Final offer joint payoff", |m| m.final_offer_joint.map(|p| p as f64)),
];

/// Deal count over analyzable runs. Incomplete deals do not count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Closure {
    pub k: u64,
    pub n: u64,
    /// `None` when `n == 0`.
    pub proportion: Option<f64>,
}

pub fn deal_closure<'a>(records: impl IntoIterator<Item = &'a RunRecord>, filter: impl Fn(&RunRecord) -> bool) -> Closure {
    let (mut k, mut n) = (0, 0);
    for r in records.into_iter().filter(|r| r.is_completed() && filter(r)) {
        n += 1;
        k += r.closure().unwrap_or(false) as u64;
    }
    Closure {
        k,
        n,
        proportion: (n > 0).then(|| k as f64 / n as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One row per cell.
    Cell,
    /// Budgets pooled; everything else kept.
    Treatment,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub grouping: Grouping,
    pub scenario: String,
    pub condition: String,
    pub config: TreatmentConfig,
    pub runs: usize,
    pub failed: usize,
    pub closure: Closure,
    pub wilson: Option<(f64, f64)>,
    pub metrics: Vec<MetricSummary>,
}

/// One metric compared between a condition and its Control counterpart.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contrast {
    pub grouping: Grouping,
    pub scenario: String,
    pub control: String,
    pub treated: String,
    pub metric: &'static str,
    pub control_mean: Option<f64>,
    pub treated_mean: Option<f64>,
    pub pct_change: Option<f64>,
    pub test: Option<WelchResult>,
    pub p_bonferroni: Option<f64>,
}

fn group_config(cfg: &TreatmentConfig, grouping: Grouping) -> TreatmentConfig {
    let mut c = cfg.clone();
    if grouping == Grouping::Treatment && c.treatment.is_timed() {
        c.budget_secs = None;
    }
    c
}

/// Per-condition means, SDs and closure for one grouping.
pub fn summarize(records: &[RunRecord], grouping: Grouping) -> Vec<ConditionSummary> {
    let mut groups: BTreeMap<(String, String), (TreatmentConfig, Vec<&RunRecord>)> = BTreeMap::new();
    for r in records {
        let cfg = group_config(&r.treatment, grouping);
        groups
            .entry((r.scenario.clone(), cfg.label()))
            .or_insert_with(|| (cfg, Vec::new()))
            .1
            .push(r);
    }
    groups
        .into_iter()
        .map(|((scenario, condition), (config, rs))| {
            let ok: Vec<&NegotiationMetrics> =
                rs.iter().filter(|r| r.is_completed()).filter_map(|r| r.metrics.as_ref()).collect();
            let closure = deal_closure(rs.iter().copied(), |_| true);
            let metrics = METRICS
                .iter()
                .map(|(name, f)| {
                    let values: Vec<f64> = ok.iter().filter_map(|m| f(m)).collect();
                    MetricSummary {
                        metric: name,
                        n: values.len(),
                        mean: mean(&values),
                        sd: std_dev(&values),
                        values,
                    }
                })
                .collect();
            ConditionSummary {
                grouping,
                scenario,
                condition,
                runs: rs.len(),
                failed: rs.iter().filter(|r| !r.is_completed()).count(),
                wilson: wilson_interval(closure.k, closure.n, Z_95).ok(),
                closure,
                config,
                metrics,
            }
        })
        .collect()
}

/// Compare every TimeAware and Urgency condition with the Control condition
/// that matches it in everything but the treatment. Bonferroni over the
/// metrics of each comparison.
pub fn contrasts(summaries: &[ConditionSummary]) -> Vec<Contrast> {
    let mut out = Vec::new();
    for treated in summaries {
        if !matches!(treated.config.treatment, Treatment::TimeAware | Treatment::Urgency) {
            continue;
        }
        let mut control_cfg = treated.config.clone();
        control_cfg.treatment = Treatment::Control;
        let Some(control) = summaries.iter().find(|s| {
            s.grouping == treated.grouping && s.scenario == treated.scenario && s.config == control_cfg
        }) else {
            continue;
        };
        let mut rows: Vec<Contrast> = control
            .metrics
            .iter()
            .zip(&treated.metrics)
            .map(|(c, t)| Contrast {
                grouping: treated.grouping,
                scenario: treated.scenario.clone(),
                control: control.condition.clone(),
                treated: treated.condition.clone(),
                metric: c.metric,
                control_mean: c.mean,
                treated_mean: t.mean,
                pct_change: c.mean.zip(t.mean).and_then(|(c, t)| pct_change(c, t)),
                test: welch_t_test(&t.values, &c.values).ok(),
                p_bonferroni: None,
            })
            .collect();
        for r in rows.iter_mut() {
            r.p_bonferroni = r
                .test
                .map(|t| bonferroni(&[t.p], METRICS.len()).expect("m covers every metric")[0]);
        }
        out.extend(rows);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub scenario: String,
    pub offers: usize,
    pub fit: FitResult,
}

/// Everything `analyze` writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub conditions: Vec<ConditionSummary>,
    pub contrasts: Vec<Contrast>,
    pub offers: Vec<OfferRecord>,
    pub regressions: Vec<RegressionReport>,
    pub notes: Vec<String>,
}

/// Build the full report from loaded runs, reading transcripts for offers.
pub fn build_report(loaded: &LoadedRuns) -> Result<Report, RunnerError> {
    let mut notes = Vec::new();
    for m in &loaded.mismatches {
        notes.push(format!("run {}: stored metrics disagree with transcript ({})", m.run_id, m.message));
    }
    for b in &loaded.skipped {
        notes.push(format!("skipped corrupt line {}:{}: {}", b.path.display(), b.line, b.message));
    }
    let failed = loaded.records.iter().filter(|r| !r.is_completed()).count();
    if failed > 0 {
        notes.push(format!("{failed} failed run(s) excluded from all statistics"));
    }

    let mut conditions = summarize(&loaded.records, Grouping::Cell);
    conditions.extend(summarize(&loaded.records, Grouping::Treatment));
    let contrasts = contrasts(&conditions);

    let mut transcripts = Vec::new();
    for r in loaded.completed() {
        if let Some(t) = loaded.transcript(&r.run_id) {
            transcripts.push((r.scenario.clone(), t?));
        }
    }
    let table = offer_table(transcripts.iter().map(|(s, t)| (loaded.scenarios[s].as_ref(), t)));
    if table.skipped_incomplete > 0 {
        notes.push(format!(
            "{} offer(s) left out of the offer table: incomplete standing offer",
            table.skipped_incomplete
        ));
    }

    let mut regressions = Vec::new();
    for scenario in loaded.scenarios.keys() {
        let offers: Vec<OfferRecord> = table.offers.iter().filter(|o| &o.scenario == scenario).cloned().collect();
        let fitted = acceptance_design(&offers).and_then(|d| {
            let n = d.n();
            fit_logistic(&d).map(|fit| (n, fit))
        });
        match fitted {
            Ok((n, fit)) => regressions.push(RegressionReport {
                scenario: scenario.clone(),
                offers: n,
                fit,
            }),
            Err(e) => notes.push(format!("regression skipped for {scenario}: {}", skip_reason(&e))),
        }
    }

    Ok(Report {
        conditions,
        contrasts,
        offers: table.offers,
        regressions,
        notes,
    })
}

fn skip_reason(e: &StatsError) -> String {
    match e {
        StatsError::Empty => "no Control/TimeAware offers at 240/300/360 s".into(),
        StatsError::Dimension(m) => format!("offer table does not span both treatments and all deadlines ({m})"),
        other => other.to_string(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn fmt1(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.1}", round_half_even(v, 1)),
        None => "n/a".into(),
    }
}

fn fmt_pct(x: Option<f64>) -> String {
    match x {
        Some(v) => {
            let r = round_half_even(v, 1);
            format!("{}{:.1}%", if r > 0.0 { "+" } else { "" }, r)
        }
        None => "n/a".into(),
    }
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        Some(p) if p < 0.001 => "<0.001".into(),
        Some(p) => format!("{p:.3}"),
        None => "n/a".into(),
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    grouping: Grouping,
    scenario: &'a str,
    condition: &'a str,
    metric: &'a str,
    n: usize,
    mean: String,
    sd: String,
    control: String,
    control_mean: String,
    pct_change: String,
    t: String,
    df: String,
    p: String,
    p_bonferroni: String,
}

#[derive(Serialize)]
struct ClosureRow {
    cell: String,
    k: u64,
    n: u64,
    p_hat: String,
    wilson_lo: String,
    wilson_hi: String,
}

#[derive(Serialize)]
struct RegressionRow<'a> {
    scenario: &'a str,
    term: &'a str,
    coef: f64,
    odds_ratio: f64,
    robust_se: f64,
    z: f64,
    p: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> RunnerError {
    RunnerError::io(path, std::io::Error::other(e))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<(), RunnerError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| RunnerError::io(path, e))
}

/// Write `summary.csv`, `closure_by_cell.csv`, `regression.csv`,
/// `offers.csv` and `summary.md` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<(), RunnerError> {
    std::fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;

    let find = |c: &ConditionSummary, metric: &str| {
        report.contrasts.iter().find(|x| {
            x.grouping == c.grouping && x.scenario == c.scenario && x.treated == c.condition && x.metric == metric
        })
    };
    let mut rows = Vec::new();
    for c in &report.conditions {
        for m in &c.metrics {
            let x = find(c, m.metric);
            rows.push(SummaryRow {
                grouping: c.grouping,
                scenario: &c.scenario,
                condition: &c.condition,
                metric: m.metric,
                n: m.n,
                mean: opt(m.mean),
                sd: opt(m.sd),
                control: x.map(|x| x.control.clone()).unwrap_or_default(),
                control_mean: opt(x.and_then(|x| x.control_mean)),
                pct_change: opt(x.and_then(|x| x.pct_change)),
                t: opt(x.and_then(|x| x.test).map(|t| t.t)),
                df: opt(x.and_then(|x| x.test).map(|t| t.df)),
                p: opt(x.and_then(|x| x.test).map(|t| t.p)),
                p_bonferroni: opt(x.and_then(|x| x.p_bonferroni)),
            });
        }
    }
    write_csv(
        &dir.join("summary.csv"),
        rows,
        &[
            "grouping", "scenario", "condition", "metric", "n", "mean", "sd", "control", "control_mean",
            "pct_change", "t", "df", "p", "p_bonferroni",
        ],
    )?;

    let closure_rows = report.conditions.iter().filter(|c| c.grouping == Grouping::Cell).map(|c| ClosureRow {
        cell: format!("{}__{}", c.scenario, c.condition),
        k: c.closure.k,
        n: c.closure.n,
        p_hat: opt(c.closure.proportion),
        wilson_lo: opt(c.wilson.map(|w| w.0)),
        wilson_hi: opt(c.wilson.map(|w| w.1)),
    });
    write_csv(
        &dir.join("closure_by_cell.csv"),
        closure_rows,
        &["cell", "k", "n", "p_hat", "wilson_lo", "wilson_hi"],
    )?;

    let mut reg_rows = Vec::new();
    for r in &report.regressions {
        let se = r.fit.se();
        let p = r.fit.p_values();
        let or = r.fit.odds_ratios();
        for j in 0..r.fit.beta.len() {
            reg_rows.push(RegressionRow {
                scenario: &r.scenario,
                term: &r.fit.terms[j],
                coef: r.fit.beta[j],
                odds_ratio: or[j],
                robust_se: se[j],
                z: r.fit.beta[j] / se[j],
                p: p[j],
            });
        }
    }
    write_csv(
        &dir.join("regression.csv"),
        reg_rows,
        &["scenario", "term", "coef", "odds_ratio", "robust_se", "z", "p"],
    )?;

    write_csv(
        &dir.join("offers.csv"),
        report.offers.iter().map(|o| {
            (
                &o.run_id,
                &o.scenario,
                o.treatment.slug(),
                o.budget_secs.map(|b| b.to_string()).unwrap_or_default(),
                o.turn,
                &o.proposer,
                &o.recipient,
                o.recipient_payoff,
                o.accepted as u8,
            )
        }),
        &[
            "run_id", "scenario", "treatment", "budget_secs", "turn", "proposer", "recipient",
            "recipient_payoff", "accepted",
        ],
    )?;

    let md = render_markdown(report);
    let path = dir.join("summary.md");
    std::fs::write(&path, md).map_err(|e| RunnerError::io(&path, e))
}

/// The human-readable report.
pub fn render_markdown(report: &Report) -> String {
    let mut s = String::from("# Negotiation outcomes\n\n");
    s.push_str("Means with standard deviations in parentheses. Failed runs are excluded. ");
    s.push_str("Welch t-tests against Control, Bonferroni-corrected over 8 metrics: ");
    s.push_str("\\* p < .05, \\*\\* p < .01, \\*\\*\\* p < .001.\n\n");

    s.push_str("## Deal closure by cell\n\n");
    s.push_str("| Cell | Deals | Runs | Failed | Closure (%) | 95% Wilson CI (%) |\n");
    s.push_str("|---|---:|---:|---:|---:|---|\n");
    for c in report.conditions.iter().filter(|c| c.grouping == Grouping::Cell) {
        let ci = c
            .wilson
            .map(|(lo, hi)| format!("[{}, {}]", fmt1(Some(lo * 100.0)), fmt1(Some(hi * 100.0))))
            .unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            "| {}__{} | {} | {} | {} | {} | {} |",
            c.scenario,
            c.condition,
            c.closure.k,
            c.closure.n,
            c.failed,
            fmt1(c.closure.proportion.map(|p| p * 100.0)),
            ci
        );
    }
    s.push('\n');

    let mut pairs: Vec<(Grouping, &str, &str, &str)> = Vec::new();
    for x in &report.contrasts {
        let key = (x.grouping, x.scenario.as_str(), x.control.as_str(), x.treated.as_str());
        if !pairs.contains(&key) {
            pairs.push(key);
        }
    }
    pairs.sort();
    for (grouping, scenario, control, treated) in pairs {
        let label = match grouping {
            Grouping::Treatment => "budgets pooled",
            Grouping::Cell => "single cell",
        };
        let _ = writeln!(s, "## {scenario}: {control} vs {treated} ({label})\n");
        let find = |cond: &str| {
            report
                .conditions
                .iter()
                .find(|c| c.grouping == grouping && c.scenario == scenario && c.condition == cond)
        };
        let (Some(c), Some(t)) = (find(control), find(treated)) else { continue };
        let _ = writeln!(
            s,
            "| Metric | {control} (n={}) | {treated} (n={}) | % change | p (corrected) |",
            c.closure.n, t.closure.n
        );
        s.push_str("|---|---:|---:|---:|---:|\n");
        for (cm, tm) in c.metrics.iter().zip(&t.metrics) {
            let x = report
                .contrasts
                .iter()
                .find(|x| x.grouping == grouping && x.scenario == scenario && x.treated == treated && x.metric == cm.metric)
                .expect("contrast row");
            let star = x.p_bonferroni.map(stars).unwrap_or("");
            let cell = |m: &MetricSummary| match m.mean {
                Some(_) => format!("{} ({})", fmt1(m.mean), fmt1(m.sd)),
                None => "n/a".into(),
            };
            let _ = writeln!(
                s,
                "| {}{} | {} | {} | {} | {} |",
                cm.metric,
                star.replace('*', "\\*"),
                cell(cm),
                cell(tm),
                fmt_pct(x.pct_change),
                fmt_p(x.p_bonferroni)
            );
        }
        s.push('\n');
    }

    let other: Vec<&ConditionSummary> = report
        .conditions
        .iter()
        .filter(|c| c.grouping == Grouping::Cell && !c.config.treatment.is_timed())
        .collect();
    if !other.is_empty() {
        s.push_str("## Untimed conditions\n\n| Cell |");
        for (name, _) in METRICS {
            let _ = write!(s, " {name} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(METRICS.len()));
        s.push('\n');
        for c in other {
            let _ = write!(s, "| {}__{} |", c.scenario, c.condition);
            for m in &c.metrics {
                let _ = write!(s, " {} ({}) |", fmt1(m.mean), fmt1(m.sd));
            }
            s.push('\n');
        }
        s.push('\n');
    }

    for r in &report.regressions {
        let _ = writeln!(s, "## Offer acceptance: {}\n", r.scenario);
        let _ = writeln!(
            s,
            "Logistic regression, N = {} offers in {} negotiations, cluster-robust SEs. McFadden pseudo R² = {:.4}.\n",
            r.offers,
            r.fit.clusters,
            r.fit.pseudo_r2()
        );
        s.push_str("| Term | Coef. | OR | Robust SE | p |\n|---|---:|---:|---:|---:|\n");
        let (se, p, or) = (r.fit.se(), r.fit.p_values(), r.fit.odds_ratios());
        for j in 0..r.fit.beta.len() {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:.2} | {} |",
                r.fit.terms[j],
                r.fit.beta[j],
                or[j],
                se[j],
                fmt_p(Some(p[j]))
            );
        }
        s.push('\n');
    }

    if !report.notes.is_empty() {
        s.push_str("## Notes\n\n");
        for n in &report.notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}
