use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::analysis::{ModelSuiteResult, PerSettingFit, PooledFit};
use crate::design::{Knob, Setting};
use crate::lmm::{Dimension, LmmFit};

const STAR_NOTE: &str = "** p < .01; *** p < .001.";

/// Two significant figures, plain decimal notation.
pub fn sig2(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.1e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let rounded: f64 = format!("{mantissa}e{exp}").parse().unwrap();
    let decimals = (1 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else {
        ""
    }
}

/// `0.33*** (0.0011)`.
pub fn coefficient_cell(beta: f64, se: f64, p: f64) -> String {
    format!("{}{} ({})", sig2(beta), stars(p), sig2(se))
}

/// Integer part with thousands separators.
pub fn with_commas(x: f64) -> String {
    let r = x.round();
    let digits = format!("{}", r.abs() as u128);
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    if r < 0.0 {
        out.insert(0, '-');
    }
    out
}

fn group_label(d: Dimension) -> &'static str {
    match d {
        Dimension::Race => "Race (Black = 1, White = 0)",
        Dimension::Gender => "Gender (Woman = 1, Man = 0)",
    }
}

fn md_row(out: &mut String, cells: &[String]) {
    out.push('|');
    for c in cells {
        let _ = write!(out, " {c} |");
    }
    out.push('\n');
}

fn fit_rows(fits: &[&LmmFit<f64>], labels: &[String]) -> Vec<Vec<String>> {
    let width = fits.len();
    let blank = |label: &str| {
        let mut r = vec![label.to_string()];
        r.extend(std::iter::repeat_n(String::new(), width));
        r
    };
    let mut rows = vec![blank("**Fixed Effects**")];
    for (i, label) in labels.iter().enumerate() {
        let mut r = vec![label.clone()];
        r.extend(fits.iter().map(|f| coefficient_cell(f.beta[i], f.se[i], f.p_values[i])));
        rows.push(r);
    }
    rows.push(blank("**Random Effects (σ²)**"));
    let mut r = vec!["Pair ID Intercept".to_string()];
    r.extend(fits.iter().map(|f| sig2(f.sigma2_b)));
    rows.push(r);
    let mut r = vec!["Residual".to_string()];
    r.extend(fits.iter().map(|f| sig2(f.sigma2_e)));
    rows.push(r);
    let mut r = vec!["Observations".to_string()];
    r.extend(fits.iter().map(|f| with_commas(f.n_obs as f64)));
    rows.push(r);
    let mut r = vec!["Log likelihood (REML)".to_string()];
    r.extend(fits.iter().map(|f| with_commas(f.reml_loglik)));
    rows.push(r);
    rows
}

fn render_grid(title: &str, header: Vec<String>, rows: Vec<Vec<String>>, notes: &[String]) -> String {
    let mut out = format!("### {title}\n\n");
    md_row(&mut out, &header);
    md_row(&mut out, &vec!["---".to_string(); header.len()]);
    for r in &rows {
        md_row(&mut out, r);
    }
    out.push('\n');
    for n in notes {
        let _ = writeln!(out, "{n}  ");
    }
    out
}

fn per_setting_table(knob: Knob, dimension: Dimension, fits: &[&PerSettingFit]) -> String {
    let mut header = vec![knob.label().to_string()];
    header.extend(fits.iter().map(|f| f.setting.to_string()));
    let labels = vec!["Intercept".to_string(), group_label(dimension).to_string()];
    let inner: Vec<&LmmFit<f64>> = fits.iter().map(|f| &f.fit).collect();
    let mut notes = vec![
        format!("Standardized cosine similarity by {}; one model per {} value.", dimension.as_str().to_lowercase(), knob.label().to_lowercase()),
        format!("Column headings are {} values.", knob.label().to_lowercase()),
        STAR_NOTE.to_string(),
    ];
    if fits.iter().any(|f| !f.fit.converged) {
        notes.push("Some fits stopped at the variance-ratio search bound.".into());
    }
    render_grid(&format!("{dimension} models across {} values", knob.label().to_lowercase()), header, fit_rows(&inner, &labels), &notes)
}

fn pooled_table(knob: Knob, fits: &[&PooledFit]) -> String {
    let mut header = vec![String::new()];
    header.extend(fits.iter().map(|f| f.dimension.to_string()));
    let labels = vec!["Intercept".to_string(), "Group".to_string(), knob.label().to_string(), "Interaction".to_string()];
    let inner: Vec<&LmmFit<f64>> = fits.iter().map(|f| &f.fit).collect();
    let notes = vec![
        format!(
            "Group is Black = 1 in the Race model and Woman = 1 in the Gender model; {} enters as its raw value.",
            knob.label()
        ),
        format!("The Interaction term is the change in the group difference per unit of {}.", knob.label().to_lowercase()),
        STAR_NOTE.to_string(),
    ];
    render_grid(&format!("Group × {} models", knob.label().to_lowercase()), header, fit_rows(&inner, &labels), &notes)
}

/// One full-precision row per fixed effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub knob: Knob,
    pub model: ModelKind,
    pub setting: Option<Setting>,
    pub dimension: Dimension,
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub stars: String,
}

/// One full-precision row per fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub knob: Knob,
    pub model: ModelKind,
    pub setting: Option<Setting>,
    pub dimension: Dimension,
    pub sigma2_b: f64,
    pub sigma2_e: f64,
    pub theta: f64,
    pub reml_loglik: f64,
    pub deviance: f64,
    pub n_obs: u64,
    pub n_clusters: usize,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PerSetting,
    Pooled,
}

/// Rendered tables keyed by file name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderedTables {
    pub files: BTreeMap<String, String>,
}

pub const COEFFICIENTS_CSV: &str = "coefficients.csv";
pub const MODELS_CSV: &str = "models.csv";

fn all_models(result: &ModelSuiteResult) -> Vec<(Knob, ModelKind, Option<Setting>, Dimension, &LmmFit<f64>)> {
    let mut v: Vec<_> = result
        .per_setting
        .iter()
        .map(|f| (f.knob, ModelKind::PerSetting, Some(f.setting), f.dimension, &f.fit))
        .chain(result.pooled.iter().map(|f| (f.knob, ModelKind::Pooled, None, f.dimension, &f.fit)))
        .collect();
    v.sort_by(|a, b| (a.0, a.1, a.2, a.3).cmp(&(b.0, b.1, b.2, b.3)));
    v
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Markdown tables per (knob, dimension) and per knob for the pooled
/// models, plus full-precision CSV of every fit.
pub fn render_tables(result: &ModelSuiteResult) -> Result<RenderedTables, ReportError> {
    let mut files = BTreeMap::new();
    let mut combined = String::from("# Homogeneity model results\n\n");
    for knob in result.knobs() {
        for d in Dimension::ALL {
            let mut fits: Vec<&PerSettingFit> = result.per_setting.iter().filter(|f| f.knob == knob && f.dimension == d).collect();
            if fits.is_empty() {
                continue;
            }
            fits.sort_by_key(|f| f.setting);
            let md = per_setting_table(knob, d, &fits);
            combined.push_str(&md);
            combined.push('\n');
            files.insert(format!("{}_{}.md", knob.as_str(), d.as_str().to_lowercase()), md);
        }
        let mut pooled: Vec<&PooledFit> = result.pooled.iter().filter(|f| f.knob == knob).collect();
        if !pooled.is_empty() {
            pooled.sort_by_key(|f| f.dimension);
            let md = pooled_table(knob, &pooled);
            combined.push_str(&md);
            combined.push('\n');
            files.insert(format!("{}_pooled.md", knob.as_str()), md);
        }
    }
    files.insert("tables.md".into(), combined);

    let models = all_models(result);
    let mut coef_rows = Vec::new();
    let mut model_rows = Vec::new();
    for (knob, model, setting, dimension, fit) in models {
        for i in 0..fit.terms.len() {
            coef_rows.push(CoefficientRow {
                knob,
                model,
                setting,
                dimension,
                term: fit.terms[i].clone(),
                estimate: fit.beta[i],
                se: fit.se[i],
                z: fit.z[i],
                p: fit.p_values[i],
                stars: stars(fit.p_values[i]).to_string(),
            });
        }
        model_rows.push(ModelRow {
            knob,
            model,
            setting,
            dimension,
            sigma2_b: fit.sigma2_b,
            sigma2_e: fit.sigma2_e,
            theta: fit.theta,
            reml_loglik: fit.reml_loglik,
            deviance: fit.deviance,
            n_obs: fit.n_obs,
            n_clusters: fit.n_clusters,
            converged: fit.converged,
            iterations: fit.iterations,
        });
    }
    files.insert(COEFFICIENTS_CSV.into(), to_csv(&coef_rows)?);
    files.insert(MODELS_CSV.into(), to_csv(&model_rows)?);
    Ok(RenderedTables { files })
}

fn from_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, ReportError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| ReportError::Csv(e.to_string()))
}

/// Rebuild the fits from the two full-precision CSVs.
pub fn parse_tables_csv(coefficients: &str, models: &str) -> Result<ModelSuiteResult, ReportError> {
    let coefs: Vec<CoefficientRow> = from_csv(coefficients)?;
    let models: Vec<ModelRow> = from_csv(models)?;
    let mut out = ModelSuiteResult::default();
    for m in models {
        let mine: Vec<&CoefficientRow> = coefs
            .iter()
            .filter(|c| c.knob == m.knob && c.model == m.model && c.setting == m.setting && c.dimension == m.dimension)
            .collect();
        if mine.is_empty() {
            return Err(ReportError::Csv(format!("no coefficients for {} {:?} model", m.knob, m.model)));
        }
        let fit = LmmFit {
            terms: mine.iter().map(|c| c.term.clone()).collect(),
            beta: mine.iter().map(|c| c.estimate).collect(),
            se: mine.iter().map(|c| c.se).collect(),
            z: mine.iter().map(|c| c.z).collect(),
            p_values: mine.iter().map(|c| c.p).collect(),
            sigma2_b: m.sigma2_b,
            sigma2_e: m.sigma2_e,
            theta: m.theta,
            reml_loglik: m.reml_loglik,
            deviance: m.deviance,
            n_obs: m.n_obs,
            n_clusters: m.n_clusters,
            converged: m.converged,
            iterations: m.iterations,
        };
        match (m.model, m.setting) {
            (ModelKind::PerSetting, Some(setting)) => {
                out.per_setting.push(PerSettingFit { knob: m.knob, setting, dimension: m.dimension, fit })
            }
            (ModelKind::Pooled, _) => out.pooled.push(PooledFit { knob: m.knob, dimension: m.dimension, fit }),
            (ModelKind::PerSetting, None) => return Err(ReportError::Csv("per-setting model without a setting".into())),
        }
    }
    Ok(out)
}
