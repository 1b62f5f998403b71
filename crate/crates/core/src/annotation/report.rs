use std::collections::BTreeSet;

use super::stats::{OriginResults, Ratio, ResultsTable};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOptions {
    pub model_label: String,
    pub human_label: String,
    /// Parenthesize the share on which all annotators agreed (either way)
    /// instead of the share that was unanimously positive.
    pub agreement_in_parens: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            model_label: "Model".into(),
            human_label: "Human".into(),
            agreement_in_parens: false,
        }
    }
}

pub fn format_percent(r: Ratio) -> String {
    format!("{}%", r.percent())
}

fn cells(o: &OriginResults, opts: &ReportOptions) -> [String; 3] {
    let (h_paren, i_paren) = if opts.agreement_in_parens {
        (o.humanlike_agreement, o.informative_agreement)
    } else {
        (o.humanlike_unanimous, o.informative_unanimous)
    };
    [
        format!("{} ({})", format_percent(o.humanlike_majority), format_percent(h_paren)),
        format!(
            "{} ({})",
            format_percent(o.informative_majority),
            format_percent(i_paren)
        ),
        format_percent(o.humanlike_and_informative),
    ]
}

/// Plain-text results table: majority share with the unanimous share in
/// parentheses, and the combined row without.
pub fn render_table(results: &ResultsTable, opts: &ReportOptions) -> String {
    let rows = ["Humanlike", "Informative", "Humanlike + informative"];
    let model = cells(&results.model, opts);
    let human = cells(&results.human, opts);
    let w0 = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let w1 = model
        .iter()
        .map(String::len)
        .chain([opts.model_label.len()])
        .max()
        .unwrap_or(0);
    let w2 = human
        .iter()
        .map(String::len)
        .chain([opts.human_label.len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{:w0$}  {:<w1$}  {}\n", "", opts.model_label, opts.human_label);
    for (i, r) in rows.iter().enumerate() {
        out += format!("{r:w0$}  {:<w1$}  {:<w2$}", model[i], human[i]).trim_end();
        out.push('\n');
    }
    out += &format!(
        "\nItems: {} {}, {} {}\n",
        results.model.items, opts.model_label, results.human.items, opts.human_label
    );
    if !results.incomplete_items.is_empty() {
        out += &format!("Incomplete items excluded: {}\n", results.incomplete_items.len());
    }
    out
}

/// Per-forum majority-humanlike shares as CSV, one row per forum.
pub fn plot_data_csv(results: &ResultsTable) -> String {
    let forums: BTreeSet<&String> = results
        .model
        .per_stratum
        .keys()
        .chain(results.human.per_stratum.keys())
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "forum",
        "model_humanlike",
        "model_count",
        "model_total",
        "human_humanlike",
        "human_count",
        "human_total",
    ])
    .expect("in-memory write");
    for f in forums {
        let m = results.model.per_stratum.get(f).copied().unwrap_or_default();
        let h = results.human.per_stratum.get(f).copied().unwrap_or_default();
        w.write_record([
            f.clone(),
            format!("{:.4}", m.fraction()),
            m.count.to_string(),
            m.total.to_string(),
            format!("{:.4}", h.fraction()),
            h.count.to_string(),
            h.total.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("csv is utf-8")
}
