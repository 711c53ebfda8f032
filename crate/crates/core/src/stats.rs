//! Agreement statistics: Cohen's kappa, bootstrap intervals, chi-square tests and the
//! positional (primacy) table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{CodeId, Codebook};
use crate::corpus::{Assignment, Corpus, MessageId};
use crate::prompt::{ExampleOrdering, ExampleSlot, PromptVariant};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no pairs to compare")]
    Empty,
    #[error("need at least {needed} pairs, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("expected count is zero at row {row}, column {col}")]
    ZeroExpected { row: usize, col: usize },
    #[error("contingency table is ragged or smaller than 2x2")]
    BadShape,
    #[error("ordering variants missing from runs: {0:?}")]
    MissingOrdering(Vec<String>),
    #[error("human and variant {variant} assignments share no messages")]
    DisjointMessages { variant: String },
}

/// Kappa value or the explicit undefined state (chance agreement equals 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum Kappa {
    Defined { value: f64 },
    Undefined,
}

impl Kappa {
    pub fn value(self) -> Option<f64> {
        match self {
            Kappa::Defined { value } => Some(value),
            Kappa::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Kappa::Defined { .. })
    }
}

/// Square confusion matrix over the sorted union of both coders' labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion<L> {
    pub labels: Vec<L>,
    pub counts: Vec<Vec<u64>>,
}

impl<L: Ord + Clone> Confusion<L> {
    pub fn from_pairs(pairs: &[(L, L)]) -> Self {
        let labels: Vec<L> = pairs
            .iter()
            .flat_map(|(a, b)| [a, b])
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&L, usize> = labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
        let k = labels.len();
        let mut counts = vec![vec![0u64; k]; k];
        for (a, b) in pairs {
            counts[index[a]][index[b]] += 1;
        }
        Confusion { labels, counts }
    }
}

/// Kappa from a square count matrix, computed exactly in integers until the final division.
pub fn kappa_from_counts(counts: &[Vec<u64>]) -> Result<Kappa, StatsError> {
    let k = counts.len();
    let mut n: i128 = 0;
    let mut diag: i128 = 0;
    let mut rows = vec![0i128; k];
    let mut cols = vec![0i128; k];
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let c = c as i128;
            n += c;
            rows[i] += c;
            cols[j] += c;
            if i == j {
                diag += c;
            }
        }
    }
    if n == 0 {
        return Err(StatsError::Empty);
    }
    let chance: i128 = rows.iter().zip(&cols).map(|(r, c)| r * c).sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(Kappa::Undefined);
    }
    Ok(Kappa::Defined { value: (n * diag - chance) as f64 / denom as f64 })
}

pub fn cohen_kappa<L: Ord + Clone>(pairs: &[(L, L)]) -> Result<Kappa, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    kappa_from_counts(&Confusion::from_pairs(pairs).counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for CiConfig {
    fn default() -> Self {
        CiConfig { level: 0.95, resamples: 2000, seed: 0 }
    }
}

/// Percentile bootstrap interval. Resamples with undefined kappa are counted in
/// `degenerate` and left out of the percentiles; if every resample is degenerate the
/// bounds are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaCi {
    pub level: f64,
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub resamples: usize,
    pub degenerate: usize,
}

impl KappaCi {
    pub fn width(&self) -> Option<f64> {
        Some(self.high? - self.low?)
    }
}

pub fn kappa_ci<L: Ord + Clone>(pairs: &[(L, L)], cfg: &CiConfig) -> Result<KappaCi, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: pairs.len() });
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(StatsError::BadLevel(cfg.level));
    }
    let conf = Confusion::from_pairs(pairs);
    let index: BTreeMap<&L, usize> = conf.labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let coded: Vec<(usize, usize)> = pairs.iter().map(|(a, b)| (index[a], index[b])).collect();
    let k = conf.labels.len();
    let n = coded.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = Vec::with_capacity(cfg.resamples);
    let mut degenerate = 0;
    let mut counts = vec![vec![0u64; k]; k];
    for _ in 0..cfg.resamples {
        counts.iter_mut().for_each(|r| r.fill(0));
        for _ in 0..n {
            let (a, b) = coded[rng.random_range(0..n)];
            counts[a][b] += 1;
        }
        match kappa_from_counts(&counts)? {
            Kappa::Defined { value } => values.push(value),
            Kappa::Undefined => degenerate += 1,
        }
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - cfg.level) / 2.0;
    Ok(KappaCi {
        level: cfg.level,
        low: quantile(&values, alpha),
        high: quantile(&values, 1.0 - alpha),
        resamples: cfg.resamples,
        degenerate,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(rows: Vec<String>, cols: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, StatsError> {
        if rows.len() != counts.len() || counts.iter().any(|r| r.len() != cols.len()) {
            return Err(StatsError::BadShape);
        }
        let n = counts.iter().flatten().sum();
        Ok(ContingencyTable { rows, cols, counts, n })
    }

    /// Unlabelled table; rows and columns are numbered.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, StatsError> {
        let r = counts.len();
        let c = counts.first().map_or(0, Vec::len);
        Self::new((0..r).map(|i| i.to_string()).collect(), (0..c).map(|j| j.to_string()).collect(), counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: u32,
    pub p: f64,
    pub n: u64,
}

/// Pearson chi-square test of independence (no continuity correction).
pub fn chi_square_independence(t: &ContingencyTable) -> Result<ChiSquare, StatsError> {
    let r = t.counts.len();
    let c = t.cols.len();
    if r < 2 || c < 2 || t.counts.iter().any(|row| row.len() != c) {
        return Err(StatsError::BadShape);
    }
    let rows: Vec<f64> = t.counts.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..c).map(|j| t.counts.iter().map(|row| row[j]).sum::<u64>() as f64).collect();
    let n: f64 = rows.iter().sum();
    let mut statistic = 0.0;
    for i in 0..r {
        for j in 0..c {
            let expected = rows[i] * cols[j] / n;
            if !(expected > 0.0) {
                return Err(StatsError::ZeroExpected { row: i, col: j });
            }
            let d = t.counts[i][j] as f64 - expected;
            statistic += d * d / expected;
        }
    }
    let df = ((r - 1) * (c - 1)) as u32;
    Ok(ChiSquare { statistic, df, p: chi_square_sf(statistic, df as f64), n: n as u64 })
}

/// Survival function of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(df / 2.0, x / 2.0)
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cf(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

// Modified Lentz evaluation of the continued fraction for Q.
fn gamma_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Emitted-label class relative to the message's target attribution.
pub fn slot_of(code: &CodeId, target: &str, baseline: &CodeId) -> ExampleSlot {
    if code.as_str() == target {
        ExampleSlot::S
    } else if code == baseline {
        ExampleSlot::NS
    } else {
        ExampleSlot::O
    }
}

pub const POSITION_LABELS: [&str; 3] = ["first", "second", "last"];

/// Rows are the position a slot's example held in the prompt, columns the emitted slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalTable {
    pub table: ContingencyTable,
    /// `variants[p][s]`: how many runs put slot `s` at position `p`.
    pub variants: Vec<Vec<u32>>,
    /// Cell count divided by the matching entry of `variants`.
    pub averages: Vec<Vec<f64>>,
}

impl PositionalTable {
    pub fn average(&self, slot: ExampleSlot, position: usize) -> f64 {
        self.averages[position][slot_index(slot)]
    }
}

fn slot_index(slot: ExampleSlot) -> usize {
    ExampleSlot::ALL.iter().position(|s| *s == slot).unwrap()
}

/// Builds the positional table from ordering-variant runs. `targets` maps each message
/// to the attribution that elicited it.
pub fn positional_frequency(
    runs: &BTreeMap<String, Vec<Assignment>>,
    grid: &[PromptVariant],
    targets: &BTreeMap<MessageId, String>,
    baseline: &CodeId,
) -> Result<PositionalTable, StatsError> {
    let ordering_variants: Vec<(&PromptVariant, ExampleOrdering)> = grid
        .iter()
        .filter_map(|v| v.ordering.map(|o| (v, o)))
        .filter(|(v, _)| runs.contains_key(&v.id))
        .collect();
    let covered: BTreeSet<(ExampleOrdering, bool)> = ordering_variants.iter().map(|(v, o)| (*o, v.cot)).collect();
    let missing: Vec<String> = ExampleOrdering::all()
        .into_iter()
        .flat_map(|o| [(o, true), (o, false)])
        .filter(|key| !covered.contains(key))
        .map(|(o, cot)| format!("{o}/{}", if cot { "CoT" } else { "NoCoT" }))
        .collect();
    if !missing.is_empty() {
        return Err(StatsError::MissingOrdering(missing));
    }

    let mut counts = vec![vec![0u64; 3]; 3];
    let mut variants = vec![vec![0u32; 3]; 3];
    for (variant, ordering) in &ordering_variants {
        for slot in ExampleSlot::ALL {
            variants[ordering.position(slot)][slot_index(slot)] += 1;
        }
        for a in &runs[&variant.id] {
            let Some(target) = targets.get(&a.message_id) else { continue };
            let slot = slot_of(&a.code_id, target, baseline);
            counts[ordering.position(slot)][slot_index(slot)] += 1;
        }
    }
    let averages = counts
        .iter()
        .zip(&variants)
        .map(|(row, vs)| row.iter().zip(vs).map(|(c, v)| if *v == 0 { 0.0 } else { *c as f64 / *v as f64 }).collect())
        .collect();
    let table = ContingencyTable::new(
        POSITION_LABELS.iter().map(|s| s.to_string()).collect(),
        ExampleSlot::ALL.iter().map(|s| s.to_string()).collect(),
        counts,
    )?;
    Ok(PositionalTable { table, variants, averages })
}

/// How labels are compared in the agreement matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelView {
    /// Code ids compared as-is.
    #[default]
    Raw,
    /// Both sides reduced to S / NS / O relative to the message's attribution.
    TargetRelative,
}

pub const TOTAL_ROW: &str = "total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementCell {
    pub variant: String,
    pub attribution: String,
    pub n: usize,
    pub kappa: Kappa,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<KappaCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub view: LabelView,
    pub variants: Vec<String>,
    /// Attributions followed by [`TOTAL_ROW`].
    pub rows: Vec<String>,
    pub cells: Vec<AgreementCell>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementOptions {
    pub view: LabelView,
    pub ci: Option<CiConfig>,
}

impl AgreementReport {
    pub fn cell(&self, variant: &str, attribution: &str) -> Option<&AgreementCell> {
        self.cells.iter().find(|c| c.variant == variant && c.attribution == attribution)
    }

    pub fn total(&self, variant: &str) -> Option<Kappa> {
        self.cell(variant, TOTAL_ROW).map(|c| c.kappa)
    }

    pub fn undefined_cells(&self) -> impl Iterator<Item = &AgreementCell> {
        self.cells.iter().filter(|c| !c.kappa.is_defined())
    }

    /// CSV with attributions (then total) as rows and variants as columns.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header = vec!["attribution".to_string()];
        header.extend(self.variants.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut record = vec![row.clone()];
            for v in &self.variants {
                record.push(match self.cell(v, row).map(|c| c.kappa) {
                    Some(Kappa::Defined { value }) => format!("{value:.4}"),
                    Some(Kappa::Undefined) => "undefined".to_string(),
                    None => String::new(),
                });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sort key placing `L2` before `L10`.
pub fn variant_order_key(id: &str) -> (String, u64, String) {
    let digits_at = id.find(|c: char| c.is_ascii_digit()).unwrap_or(id.len());
    let (prefix, rest) = id.split_at(digits_at);
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let number = rest[..end].parse().unwrap_or(0);
    (prefix.to_string(), number, rest[end..].to_string())
}

/// Kappa per (variant, attribution) plus a pooled total row per variant.
pub fn agreement_matrix(
    human: &[Assignment],
    variants: &BTreeMap<String, Vec<Assignment>>,
    corpus: &Corpus,
    cb: &Codebook,
    opts: &AgreementOptions,
) -> Result<AgreementReport, StatsError> {
    let attribution_of: BTreeMap<&str, &str> =
        corpus.messages.iter().map(|m| (m.id.as_str(), m.elicited_by.as_str())).collect();
    let human_codes: BTreeMap<&str, &CodeId> = human.iter().map(|a| (a.message_id.as_str(), &a.code_id)).collect();
    let baseline = cb.non_stigmatizing().map(|c| c.id.clone()).unwrap_or_else(|| CodeId::new("non-stigmatizing"));

    let mut rows: Vec<String> = cb.attributions().map(|c| c.id.to_string()).collect();
    let extra: BTreeSet<&str> =
        attribution_of.values().copied().filter(|a| !rows.iter().any(|r| r == a)).collect();
    rows.extend(extra.into_iter().map(str::to_string));
    rows.push(TOTAL_ROW.to_string());

    let mut variant_ids: Vec<String> = variants.keys().cloned().collect();
    variant_ids.sort_by_key(|id| variant_order_key(id));

    let view_label = |code: &CodeId, target: &str| -> String {
        match opts.view {
            LabelView::Raw => code.to_string(),
            LabelView::TargetRelative => slot_of(code, target, &baseline).to_string(),
        }
    };

    let mut jobs = Vec::new();
    for v in &variant_ids {
        let mut by_row: BTreeMap<&str, Vec<(String, String)>> = BTreeMap::new();
        let mut shared = 0;
        for a in &variants[v] {
            let Some(h) = human_codes.get(a.message_id.as_str()) else { continue };
            let target = attribution_of.get(a.message_id.as_str()).copied().unwrap_or("");
            shared += 1;
            let pair = (view_label(h, target), view_label(&a.code_id, target));
            by_row.entry(target).or_default().push(pair.clone());
            by_row.entry(TOTAL_ROW).or_default().push(pair);
        }
        if shared == 0 {
            return Err(StatsError::DisjointMessages { variant: v.clone() });
        }
        for row in &rows {
            jobs.push((v.clone(), row.clone(), by_row.remove(row.as_str()).unwrap_or_default()));
        }
    }

    let cells = jobs
        .into_par_iter()
        .map(|(variant, attribution, pairs)| {
            let kappa = if pairs.is_empty() { Kappa::Undefined } else { cohen_kappa(&pairs)? };
            let ci = match &opts.ci {
                Some(cfg) if pairs.len() >= 2 => Some(kappa_ci(&pairs, cfg)?),
                _ => None,
            };
            Ok(AgreementCell { variant, attribution, n: pairs.len(), kappa, ci })
        })
        .collect::<Result<Vec<_>, StatsError>>()?;

    Ok(AgreementReport { view: opts.view, variants: variant_ids, rows, cells })
}

/// Kappa between two coders over the messages both coded.
pub fn pairwise_kappa(a: &[Assignment], b: &[Assignment]) -> Result<(Kappa, usize), StatsError> {
    let other: BTreeMap<&str, &CodeId> = b.iter().map(|x| (x.message_id.as_str(), &x.code_id)).collect();
    let pairs: Vec<(&CodeId, &CodeId)> =
        a.iter().filter_map(|x| other.get(x.message_id.as_str()).map(|y| (&x.code_id, *y))).collect();
    Ok((cohen_kappa(&pairs)?, pairs.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs_from_counts(counts: &[Vec<u64>]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                out.extend(std::iter::repeat_n((i, j), c as usize));
            }
        }
        out
    }

    #[test]
    fn kappa_hand_example() {
        let k = cohen_kappa(&pairs_from_counts(&[vec![20, 5], vec![10, 15]])).unwrap();
        // p_o = 35/50, p_e = (25*30 + 25*20)/2500 = 0.5
        let expected = (0.7 - 0.5) / (1.0 - 0.5);
        assert!((k.value().unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn kappa_edges() {
        let perfect: Vec<(u8, u8)> = (0..40).map(|i| (i % 3, i % 3)).collect();
        assert_eq!(cohen_kappa(&perfect).unwrap(), Kappa::Defined { value: 1.0 });
        let opposed: Vec<(u8, u8)> = (0..40).map(|i| (i % 2, 1 - i % 2)).collect();
        assert_eq!(cohen_kappa(&opposed).unwrap(), Kappa::Defined { value: -1.0 });
        let single = vec![("x", "x"); 10];
        assert_eq!(cohen_kappa(&single).unwrap(), Kappa::Undefined);
        assert_eq!(cohen_kappa::<u8>(&[]).unwrap_err(), StatsError::Empty);
    }

    #[test]
    fn ci_perfect_agreement_is_point() {
        let perfect: Vec<(u8, u8)> = (0..200).map(|i| (i % 2, i % 2)).collect();
        let ci = kappa_ci(&perfect, &CiConfig::default()).unwrap();
        assert_eq!((ci.low, ci.high), (Some(1.0), Some(1.0)));
        assert_eq!(ci.degenerate, 0);
    }

    #[test]
    fn ci_flags_degenerate_resamples() {
        let pairs = vec![(0u8, 0u8), (1, 1)];
        let ci = kappa_ci(&pairs, &CiConfig { resamples: 200, ..Default::default() }).unwrap();
        assert!(ci.degenerate > 0);
        assert_eq!(ci.degenerate + 200 - ci.degenerate, ci.resamples);
    }

    #[test]
    fn ci_deterministic_and_narrows_with_n() {
        use rand::Rng;
        let gen = |n: usize| -> Vec<(u8, u8)> {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..n)
                .map(|_| {
                    let a = rng.random_range(0..3u8);
                    let b = if rng.random_bool(0.7) { a } else { rng.random_range(0..3u8) };
                    (a, b)
                })
                .collect()
        };
        let cfg = CiConfig { seed: 5, ..Default::default() };
        let small = gen(20);
        assert_eq!(kappa_ci(&small, &cfg).unwrap(), kappa_ci(&small, &cfg).unwrap());
        let wide = kappa_ci(&small, &cfg).unwrap().width().unwrap();
        let narrow = kappa_ci(&gen(2000), &cfg).unwrap().width().unwrap();
        assert!(wide > narrow, "{wide} vs {narrow}");
        assert!(kappa_ci(&small[..1], &cfg).is_err());
    }

    #[test]
    fn chi_square_two_by_two() {
        let t = ContingencyTable::from_counts(vec![vec![10, 20], vec![20, 10]]).unwrap();
        let r = chi_square_independence(&t).unwrap();
        // n (ad - bc)^2 / (r1 r2 c1 c2)
        let closed = 60.0 * (100.0f64 - 400.0).powi(2) / (30.0 * 30.0 * 30.0 * 30.0);
        assert!((r.statistic - closed).abs() < 1e-9);
        assert_eq!(r.df, 1);
        assert!((r.p - 0.009_823_274_507_519_246).abs() < 1e-12);
    }

    #[test]
    fn chi_square_independent_table() {
        let t = ContingencyTable::from_counts(vec![vec![10, 20, 30], vec![20, 40, 60], vec![5, 10, 15]]).unwrap();
        let r = chi_square_independence(&t).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert_eq!(r.df, 4);
    }

    #[test]
    fn chi_square_zero_expected() {
        let t = ContingencyTable::from_counts(vec![vec![0, 0], vec![3, 4]]).unwrap();
        assert_eq!(chi_square_independence(&t).unwrap_err(), StatsError::ZeroExpected { row: 0, col: 0 });
    }

    #[test]
    fn survival_matches_reference_values() {
        // high-precision reference values of Q(df/2, x/2)
        let cases = [
            (1.0, 0.5, 0.479_500_122_186_953_46),
            (2.0, 10.0, 0.006_737_946_999_085_467),
            (4.0, 85.04, 1.487_604_612_128_990_6e-17),
            (10.0, 10.0, 0.440_493_285_065_212_4),
            (99.0, 120.0, 0.074_243_855_805_966_79),
        ];
        for (df, x, q) in cases {
            let got = chi_square_sf(x, df);
            assert!(((got - q) / q).abs() < 1e-9, "df={df} x={x}: {got} vs {q}");
        }
    }

    #[test]
    fn variant_order() {
        let mut ids = vec!["L10", "L2", "L1", "L23"];
        ids.sort_by_key(|id| variant_order_key(id));
        assert_eq!(ids, vec!["L1", "L2", "L10", "L23"]);
    }

    proptest! {
        #[test]
        fn kappa_symmetric_and_relabel_invariant(
            raw in prop::collection::vec((0u8..5, 0u8..5), 2..200),
            shift in 1u8..5,
        ) {
            let swapped: Vec<(u8, u8)> = raw.iter().map(|(a, b)| (*b, *a)).collect();
            let relabeled: Vec<(u8, u8)> = raw.iter().map(|(a, b)| ((a + shift) % 5, (b + shift) % 5)).collect();
            let k = cohen_kappa(&raw).unwrap();
            prop_assert_eq!(k, cohen_kappa(&swapped).unwrap());
            prop_assert_eq!(k, cohen_kappa(&relabeled).unwrap());
            if let Some(v) = k.value() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn chi_square_permutation_invariant(
            counts in prop::collection::vec(prop::collection::vec(1u64..50, 3), 3),
        ) {
            let t = ContingencyTable::from_counts(counts.clone()).unwrap();
            let mut permuted = counts.clone();
            permuted.reverse();
            for row in permuted.iter_mut() {
                row.swap(0, 2);
            }
            let a = chi_square_independence(&t).unwrap();
            let b = chi_square_independence(&ContingencyTable::from_counts(permuted).unwrap()).unwrap();
            prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
            prop_assert_eq!(a.df, b.df);
        }

        #[test]
        fn ci_bounds_ordered(raw in prop::collection::vec((0u8..3, 0u8..3), 2..60), seed in 0u64..1000) {
            let ci = kappa_ci(&raw, &CiConfig { resamples: 100, seed, ..Default::default() }).unwrap();
            if let (Some(lo), Some(hi)) = (ci.low, ci.high) {
                prop_assert!(lo <= hi);
            }
        }
    }
}
