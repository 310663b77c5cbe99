//! Accuracy, replicate aggregation and the head comparison report.

pub mod stats;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::heads::{HeadKind, HeadModel};
use crate::linalg::argmax;
use stats::{friedman_test, holm_adjust, wilcoxon_signed_rank, FriedmanResult, WilcoxonMethod};

pub const NUM_HEADS: usize = HeadKind::ALL.len();

/// Fraction of scenes whose most probable class is the true one.
pub fn accuracy<'a, I>(model: &HeadModel, scenes: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
{
    let mut total = 0usize;
    let mut correct = 0usize;
    for seq in scenes {
        let y = model.predict(&seq.data)?;
        total += 1;
        if argmax(&y) == seq.class_id {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty split is undefined"));
    }
    Ok(correct as f64 / total as f64)
}

/// Accuracy summary in percent, as in the aggregated-accuracy table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single value.
    pub std: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

/// Linear interpolation between order statistics at `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summarises accuracy fractions, reporting percent.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarise an empty list"));
    }
    let pct: Vec<f64> = values.iter().map(|v| v * 100.0).collect();
    let n = pct.len() as f64;
    let mean = pct.iter().sum::<f64>() / n;
    let std = if pct.len() > 1 {
        (pct.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = pct;
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean,
        std,
        p25: percentile(&sorted, 0.25),
        p50: percentile(&sorted, 0.5),
        p75: percentile(&sorted, 0.75),
    })
}

/// `accuracy[model][episode][replicate]`, models in [`HeadKind::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRunMatrix {
    episodes: Vec<String>,
    replicates: usize,
    values: Vec<f64>,
}

impl EpisodeRunMatrix {
    /// Builds a matrix from `cell(model, episode, replicate)`.
    pub fn from_fn<F>(episodes: Vec<String>, replicates: usize, mut cell: F) -> Result<Self>
    where
        F: FnMut(HeadKind, usize, usize) -> f64,
    {
        if episodes.is_empty() || replicates == 0 {
            return Err(Error::invalid("run matrix needs at least one episode and replicate"));
        }
        let mut values = Vec::with_capacity(NUM_HEADS * episodes.len() * replicates);
        for kind in HeadKind::ALL {
            for e in 0..episodes.len() {
                for r in 0..replicates {
                    let v = cell(kind, e, r);
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::invalid(format!("accuracy {v} outside [0, 1]")));
                    }
                    values.push(v);
                }
            }
        }
        Ok(Self {
            episodes,
            replicates,
            values,
        })
    }

    pub fn episodes(&self) -> &[String] {
        &self.episodes
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    pub fn get(&self, kind: HeadKind, episode: usize, replicate: usize) -> f64 {
        let e = self.episodes.len();
        self.values[(kind.index() * e + episode) * self.replicates + replicate]
    }

    pub fn replicate_values(&self, kind: HeadKind, episode: usize) -> &[f64] {
        let start = (kind.index() * self.episodes.len() + episode) * self.replicates;
        &self.values[start..start + self.replicates]
    }

    /// All `E * R` accuracies of one model.
    pub fn model_values(&self, kind: HeadKind) -> &[f64] {
        let len = self.episodes.len() * self.replicates;
        &self.values[kind.index() * len..(kind.index() + 1) * len]
    }

    /// Replicate-mean accuracy per episode, `[model][episode]`.
    pub fn episode_means(&self) -> Vec<Vec<f64>> {
        HeadKind::ALL
            .iter()
            .map(|&k| {
                (0..self.episodes.len())
                    .map(|e| {
                        let v = self.replicate_values(k, e);
                        v.iter().sum::<f64>() / v.len() as f64
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,episode,replicate,accuracy\n");
        for kind in HeadKind::ALL {
            for (e, name) in self.episodes.iter().enumerate() {
                for r in 0..self.replicates {
                    let _ = writeln!(out, "{},{},{},{}", kind.name(), name, r, self.get(kind, e, r));
                }
            }
        }
        out
    }

    /// Parses the CSV interchange format; episodes keep first-appearance
    /// order and every (model, episode, replicate) cell must be present.
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut episodes: Vec<String> = Vec::new();
        let mut cells: HashMap<(HeadKind, usize, usize), f64> = HashMap::new();
        let mut max_rep = 0usize;
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !saw_header {
                if line.replace(' ', "") != "model,episode,replicate,accuracy" {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "expected header `model,episode,replicate,accuracy`".into(),
                    });
                }
                saw_header = true;
                continue;
            }
            let err = |message: String| Error::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let kind: HeadKind = fields[0].parse().map_err(|e: Error| err(e.to_string()))?;
            let episode = match episodes.iter().position(|e| e == fields[1]) {
                Some(p) => p,
                None => {
                    episodes.push(fields[1].to_string());
                    episodes.len() - 1
                }
            };
            let rep: usize = fields[2]
                .parse()
                .map_err(|_| err(format!("bad replicate `{}`", fields[2])))?;
            let acc: f64 = fields[3]
                .parse()
                .map_err(|_| err(format!("bad accuracy `{}`", fields[3])))?;
            if !(0.0..=1.0).contains(&acc) {
                return Err(err(format!("accuracy {acc} outside [0, 1]")));
            }
            if cells.insert((kind, episode, rep), acc).is_some() {
                return Err(err(format!("duplicate cell {kind},{},{rep}", fields[1])));
            }
            max_rep = max_rep.max(rep);
        }
        if cells.is_empty() {
            return Err(Error::invalid("run matrix CSV has no rows"));
        }
        let replicates = max_rep + 1;
        let mut missing = Vec::new();
        for kind in HeadKind::ALL {
            for (e, name) in episodes.iter().enumerate() {
                for r in 0..replicates {
                    if !cells.contains_key(&(kind, e, r)) {
                        missing.push(format!("{kind}/{name}/{r}"));
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Incomplete { missing });
        }
        Self::from_fn(episodes, replicates, |k, e, r| cells[&(k, e, r)])
    }

    /// Box-plot data: one row per model and episode with the replicate
    /// quartiles and raw values (`;`-separated).
    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("model,episode,n,min,p25,p50,p75,max,values\n");
        for kind in HeadKind::ALL {
            for (e, name) in self.episodes.iter().enumerate() {
                let mut v = self.replicate_values(kind, e).to_vec();
                v.sort_by(f64::total_cmp);
                let joined: Vec<String> = self.replicate_values(kind, e).iter().map(f64::to_string).collect();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    kind.name(),
                    name,
                    v.len(),
                    v[0],
                    percentile(&v, 0.25),
                    percentile(&v, 0.5),
                    percentile(&v, 0.75),
                    v[v.len() - 1],
                    joined.join(";")
                );
            }
        }
        out
    }
}

/// Pairwise win and tie counts over episodes, on replicate means.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinMatrix {
    /// `wins[i][j]`: episodes where model `i` strictly beats model `j`.
    pub wins: [[usize; NUM_HEADS]; NUM_HEADS],
    pub ties: [[usize; NUM_HEADS]; NUM_HEADS],
}

impl WinMatrix {
    /// Row sum of wins.
    pub fn summary_score(&self, model: usize) -> usize {
        self.wins[model].iter().sum()
    }
}

pub fn win_matrix(m: &EpisodeRunMatrix) -> WinMatrix {
    let means = m.episode_means();
    let mut wins = [[0; NUM_HEADS]; NUM_HEADS];
    let mut ties = [[0; NUM_HEADS]; NUM_HEADS];
    for i in 0..NUM_HEADS {
        for j in 0..NUM_HEADS {
            if i == j {
                continue;
            }
            for e in 0..m.num_episodes() {
                let (a, b) = (means[i][e], means[j][e]);
                if a > b {
                    wins[i][j] += 1;
                } else if a == b {
                    ties[i][j] += 1;
                }
            }
        }
    }
    WinMatrix { wins, ties }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    Row,
    Column,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub row: HeadKind,
    pub column: HeadKind,
    pub row_wins: usize,
    pub column_wins: usize,
    pub ties: usize,
    pub w_plus: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub exact: bool,
    pub degenerate: bool,
    /// Holm-adjusted rejection at the report's alpha.
    pub significant: bool,
    /// Model with more wins in a significant pair.
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: HeadKind,
    #[serde(flatten)]
    pub summary: Summary,
    pub summary_score: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub episodes: Vec<String>,
    pub replicates: usize,
    pub alpha: f64,
    /// What the Friedman and Wilcoxon tests were run on.
    pub paired_observation: String,
    /// What the summary statistics aggregate.
    pub summary_population: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metadata: ReportMetadata,
    pub friedman: FriedmanResult,
    pub friedman_rejects: bool,
    pub models: Vec<ModelSummary>,
    pub wins: WinMatrix,
    /// The 15 unordered pairs, `row` before `column` in model order.
    pub pairs: Vec<PairComparison>,
}

impl ComparisonReport {
    pub fn pair(&self, a: HeadKind, b: HeadKind) -> Option<&PairComparison> {
        self.pairs
            .iter()
            .find(|p| (p.row == a && p.column == b) || (p.row == b && p.column == a))
    }

    pub fn summary_score(&self, kind: HeadKind) -> usize {
        self.wins.summary_score(kind.index())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Friedman over episode means, all pairwise two-sided Wilcoxon tests,
/// Holm correction, win counts and per-model summaries.
pub fn compare_heads(m: &EpisodeRunMatrix, alpha: f64) -> Result<ComparisonReport> {
    if m.num_episodes() < 2 {
        return Err(Error::invalid("comparing heads needs at least 2 episodes"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie strictly between 0 and 1"));
    }
    let means = m.episode_means();
    let friedman = friedman_test(&means)?;
    let wins = win_matrix(m);

    let mut pairs = Vec::new();
    for i in 0..NUM_HEADS {
        for j in i + 1..NUM_HEADS {
            let w = wilcoxon_signed_rank(&means[i], &means[j], WilcoxonMethod::Auto)?;
            pairs.push(PairComparison {
                row: HeadKind::ALL[i],
                column: HeadKind::ALL[j],
                row_wins: wins.wins[i][j],
                column_wins: wins.wins[j][i],
                ties: wins.ties[i][j],
                w_plus: w.w_plus,
                p_value: w.p_value,
                p_adjusted: w.p_value,
                exact: w.exact,
                degenerate: w.degenerate,
                significant: false,
                winner: Winner::None,
            });
        }
    }
    let raw: Vec<f64> = pairs.iter().map(|p| p.p_value).collect();
    let holm = holm_adjust(&raw, alpha)?;
    for ((pair, adj), rej) in pairs.iter_mut().zip(holm.adjusted).zip(holm.reject) {
        pair.p_adjusted = adj;
        pair.significant = rej;
        pair.winner = match (rej, pair.row_wins.cmp(&pair.column_wins)) {
            (true, std::cmp::Ordering::Greater) => Winner::Row,
            (true, std::cmp::Ordering::Less) => Winner::Column,
            _ => Winner::None,
        };
    }

    let models = HeadKind::ALL
        .iter()
        .map(|&k| {
            Ok(ModelSummary {
                model: k,
                summary: summarize(m.model_values(k))?,
                summary_score: wins.summary_score(k.index()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ComparisonReport {
        metadata: ReportMetadata {
            episodes: m.episodes().to_vec(),
            replicates: m.replicates(),
            alpha,
            paired_observation: "per-episode mean accuracy over replicates".into(),
            summary_population: "all episode x replicate accuracies".into(),
        },
        friedman_rejects: friedman.p_value <= alpha,
        friedman,
        models,
        wins,
        pairs,
    })
}

/// Aligned win-count table. Significant pairs show the larger count as
/// `**n**`; counts of pairs that are not significant are shown as `_n_`.
pub fn render_tests_table(report: &ComparisonReport) -> String {
    let mut header = vec![String::new()];
    header.extend(HeadKind::ALL.iter().map(|k| k.display_name().to_string()));
    header.push("SummaryScore".into());

    let mark: BTreeMap<(usize, usize), &PairComparison> = report
        .pairs
        .iter()
        .flat_map(|p| {
            let (i, j) = (p.row.index(), p.column.index());
            [((i, j), p), ((j, i), p)]
        })
        .collect();

    let mut rows = vec![header];
    for i in 0..NUM_HEADS {
        let mut row = vec![HeadKind::ALL[i].display_name().to_string()];
        for j in 0..NUM_HEADS {
            if i == j {
                row.push("X".into());
                continue;
            }
            let count = report.wins.wins[i][j];
            let pair = mark[&(i, j)];
            let cell = if !pair.significant {
                format!("_{count}_")
            } else if count > report.wins.wins[j][i] {
                format!("**{count}**")
            } else {
                count.to_string()
            };
            row.push(cell);
        }
        row.push(report.wins.summary_score(i).to_string());
        rows.push(row);
    }
    align(&rows)
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let mut line = format!("{:<w$}", row[0], w = widths[0]);
        for (c, cell) in row.iter().enumerate().skip(1) {
            let _ = write!(line, "  {:>w$}", cell, w = widths[c]);
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Aligned `model mean std 25% 50% 75%` table with one decimal.
pub fn render_stats_table(rows: &[(&str, Summary)]) -> String {
    let mut table = vec![["model", "mean", "std", "25%", "50%", "75%"].map(String::from).to_vec()];
    for (name, s) in rows {
        table.push(vec![
            name.to_string(),
            format!("{:.1}", s.mean),
            format!("{:.1}", s.std),
            format!("{:.1}", s.p25),
            format!("{:.1}", s.p50),
            format!("{:.1}", s.p75),
        ]);
    }
    align(&table)
}

/// Both tables plus the Friedman line, as written by the CLI.
pub fn render_report(report: &ComparisonReport) -> String {
    let stats_rows: Vec<(&str, Summary)> = report
        .models
        .iter()
        .map(|m| (m.model.display_name(), m.summary))
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Friedman chi2 = {:.4}, df = {}, p = {:.3e} ({} at alpha = {})",
        report.friedman.statistic,
        report.friedman.treatments - 1,
        report.friedman.p_value,
        if report.friedman_rejects { "rejected" } else { "not rejected" },
        report.metadata.alpha
    );
    let _ = writeln!(
        out,
        "\nWins over {} episodes (row beats column; **n** significant winner, _n_ not significant, Holm-corrected Wilcoxon):\n",
        report.metadata.episodes.len()
    );
    out.push_str(&render_tests_table(report));
    let _ = writeln!(out, "\nAggregated accuracy [%]:\n");
    out.push_str(&render_stats_table(&stats_rows));
    out
}
