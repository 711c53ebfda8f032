//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero when a
//! criterion fails that is not listed in `KNOWN_FAILURES`.
//!
//! Run with `cargo test -p qcode-core --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use qcode_core::board::{autonomous_induction, rate_codebook, revalidate};
use qcode_core::fixtures;
use qcode_core::gateway::{Gateway, ModelConfig};
use qcode_core::pipeline::run_demo;
use qcode_core::prompt::{assemble_prompt, enumerate_variants, GridConfig, Scenario};
use qcode_core::stats::{
    chi_square_independence, chi_square_sf, cohen_kappa, gamma_q, pairwise_kappa, positional_frequency, ContingencyTable, Kappa,
};
use qcode_core::triage::{
    directional_analysis, select_disagreements, triage_summary, variant_dispersion, CodeClass, DisagreementSet,
    SelectionRule, TriageState,
};
use qcode_core::{Message, MessageId};

/// Criteria expected to fail, with the reason.
const KNOWN_FAILURES: &[(&str, &str)] = &[(
    "disagreement-share",
    "273 of 4,143 messages is 6.59%; the published 6.50% equals 273 / 4,200, so no fixture can give both the count and the share",
)];

struct Suite {
    results: Vec<(String, bool, String)>,
}

impl Suite {
    fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        let detail = detail.into();
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), pass, detail));
    }
}

fn share_close(count: usize, total: usize, published: f64) -> bool {
    (100.0 * count as f64 / total as f64 - published).abs() < 0.01
}

fn fast_cfg() -> ModelConfig {
    ModelConfig { backoff_ms: 0, ..Default::default() }
}

// Independent route: dense f64 matrix, observed and chance agreement from marginals.
fn oracle_kappa(a: &[usize], b: &[usize], k: usize) -> Option<f64> {
    let n = a.len() as f64;
    let mut m = vec![vec![0f64; k]; k];
    for (x, y) in a.iter().zip(b) {
        m[*x][*y] += 1.0;
    }
    let po: f64 = (0..k).map(|i| m[i][i]).sum::<f64>() / n;
    let pe: f64 = (0..k)
        .map(|i| {
            let row: f64 = m[i].iter().sum();
            let col: f64 = m.iter().map(|r| r[i]).sum();
            row * col
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        None
    } else {
        Some((po - pe) / (1.0 - pe))
    }
}

fn kappa_oracle(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_101);
    let start = Instant::now();
    let mut worst = 0f64;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8usize);
        let n = rng.random_range(1..=5000usize);
        let agree = rng.random_range(0.0..1.0);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let b: Vec<usize> = a.iter().map(|x| if rng.random_bool(agree) { *x } else { rng.random_range(0..k) }).collect();
        let pairs: Vec<(usize, usize)> = a.iter().copied().zip(b.iter().copied()).collect();
        let got = cohen_kappa(&pairs).expect("non-empty");
        match (got, oracle_kappa(&a, &b, k)) {
            (Kappa::Defined { value }, Some(expected)) => worst = worst.max((value - expected).abs()),
            (Kappa::Undefined, None) => {}
            _ => mismatches += 1,
        }
    }
    let elapsed = start.elapsed();
    s.check(
        "kappa-oracle",
        worst <= 1e-9 && mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("1000 labelings, max |diff| = {worst:.2e}, state mismatches = {mismatches}, {:.2}s", elapsed.as_secs_f64()),
    );
}

fn kappa_edges(s: &mut Suite) {
    let perfect: Vec<(u8, u8)> = (0..50).map(|i| (i % 3, i % 3)).collect();
    let opposite: Vec<(u8, u8)> = (0..50).map(|i| if i % 2 == 0 { (0, 1) } else { (1, 0) }).collect();
    let single: Vec<(u8, u8)> = vec![(4, 4); 30];
    let p = cohen_kappa(&perfect).unwrap();
    let o = cohen_kappa(&opposite).unwrap();
    let d = cohen_kappa(&single).unwrap();
    let empty = cohen_kappa::<u8>(&[]);
    let serialized = serde_json::to_string(&d).unwrap();
    let pass = p == Kappa::Defined { value: 1.0 }
        && o == Kappa::Defined { value: -1.0 }
        && d == Kappa::Undefined
        && empty.is_err()
        && !serialized.contains("NaN");
    s.check(
        "kappa-edges",
        pass,
        format!("perfect = {p:?}, total disagreement = {o:?}, single category = {serialized}, empty = {}", empty.is_err()),
    );
}

// Frozen 50-digit references for the chi-square upper tail Q(df, x) = Gamma(df/2, x/2) / Gamma(df/2).
const GAMMA_Q_REFERENCE: &[(f64, f64, f64)] = &[
    (1.0, 0.5, 0.479_500_122_186_953_462_3),
    (1.0, 3.841_458_820_694_124, 0.050_000_000_000_000_057_44),
    (2.0, 1.0, 0.606_530_659_712_633_423_6),
    (2.0, 10.0, 0.006_737_946_999_085_467_097),
    (3.0, 7.814_727_903_251_178, 0.050_000_000_000_000_037_63),
    (4.0, 85.04, 1.487_604_612_128_990_652_4e-17),
    (4.0, 2.0, 0.735_758_882_342_884_643_2),
    (4.0, 9.487_729_036_781_154, 0.050_000_000_000_000_057_24),
    (5.0, 0.1, 0.999_837_683_388_077_385_0),
    (9.0, 30.0, 0.000_438_721_770_979_479_489_0),
    (10.0, 10.0, 0.440_493_285_065_212_411_4),
    (20.0, 15.0, 0.776_407_613_019_714_433_0),
    (25.0, 60.0, 0.000_104_554_861_315_264_726_8),
    (50.0, 49.0, 0.513_495_083_641_290_676_6),
    (99.0, 120.0, 0.074_243_855_805_966_789_87),
];

fn chi_square_oracle(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(4153);
    let mut worst_stat = 0f64;
    let mut worst_p = 0f64;
    let mut bad_df = 0;
    let mut tables = 0;
    while tables < 500 {
        let c: Vec<u64> = (0..4).map(|_| rng.random_range(0..400u64)).collect();
        let (a, b, cc, d) = (c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64);
        let n = a + b + cc + d;
        let margins = (a + b) * (cc + d) * (a + cc) * (b + d);
        if margins == 0.0 {
            continue;
        }
        tables += 1;
        let expected = n * (a * d - b * cc).powi(2) / margins;
        let t = ContingencyTable::from_counts(vec![vec![c[0], c[1]], vec![c[2], c[3]]]).unwrap();
        let got = chi_square_independence(&t).unwrap();
        worst_stat = worst_stat.max((got.statistic - expected).abs() / expected.max(1.0));
        let reference = 1.0 - ChiSquared::new(1.0).unwrap().cdf(expected);
        worst_p = worst_p.max((got.p - reference).abs());
        if got.df != 1 {
            bad_df += 1;
        }
    }
    s.check(
        "chi-square-statistic",
        worst_stat <= 1e-6 && bad_df == 0,
        format!("500 random 2x2 tables, max rel |diff| = {worst_stat:.2e}, wrong df = {bad_df}"),
    );

    let mut worst_q = 0f64;
    for (df, x, q) in GAMMA_Q_REFERENCE {
        worst_q = worst_q.max((chi_square_sf(*x, *df) - q).abs()).max((gamma_q(df / 2.0, x / 2.0) - q).abs());
    }
    let fixed = chi_square_independence(&ContingencyTable::from_counts(vec![vec![10, 20], vec![20, 10]]).unwrap()).unwrap();
    let fixed_err = (fixed.p - 0.009_823_274_507_519_246_358).abs();
    s.check(
        "chi-square-p",
        worst_q <= 1e-6 && fixed_err <= 1e-6 && worst_p <= 1e-6,
        format!(
            "max |Q - reference| = {worst_q:.2e} over {} points, [[10,20],[20,10]] p err = {fixed_err:.2e}, max |p - statrs| = {worst_p:.2e}",
            GAMMA_Q_REFERENCE.len()
        ),
    );

    let fx = fixtures::primacy_fixture();
    let table = positional_frequency(&fx.runs, &fx.grid, &fx.targets, &fx.baseline).unwrap();
    let chi = chi_square_independence(&table.table).unwrap();
    let per_variant = fx.runs.values().map(Vec::len).collect::<std::collections::BTreeSet<_>>();
    let averages = [0, 1, 2].map(|p| table.average(qcode_core::prompt::ExampleSlot::S, p));
    s.check(
        "chi-square-primacy-df",
        chi.df == 4 && per_variant == [4153].into() && averages == [1418.75, 1310.25, 1254.25],
        format!(
            "3x3 table over 12 ordering variants of 4,153 messages: chi2({}) = {:.2}, p = {:.3e}; S averages by position {averages:?}",
            chi.df, chi.statistic, chi.p
        ),
    );
}

fn grid(s: &mut Suite) {
    let variants = enumerate_variants(&GridConfig::default());
    let ordering = variants.iter().filter(|v| v.ordering.is_some()).count();
    let cot_only = variants.iter().filter(|v| v.ordering.is_none() && v.cot).count();
    let ladder = |sc: Scenario| variants.iter().filter(|v| v.ordering.is_none() && !v.cot && v.scenario == sc).count();
    let (all_code, target_code) = (ladder(Scenario::AllCode), ladder(Scenario::TargetCode));
    s.check(
        "grid-count",
        variants.len() == 23 && all_code == 5 && target_code == 5 && cot_only == 1 && ordering == 12,
        format!("{} variants: {all_code} all-code ladder, {target_code} target-code ladder, {cot_only} CoT, {ordering} ordering", variants.len()),
    );

    let cb = fixtures::attribution_codebook();
    let ctx = fixtures::prompt_context();
    let m = fixtures::golden_message();
    let v = fixtures::all_code_full_ladder();
    let rendered = assemble_prompt(&v, &cb, &ctx, &m.elicited_by, &m, ctx.question_for(&m.elicited_by)).unwrap().render();
    let golden = fixtures::GOLDEN_ALL_CODE_FULL;
    let first_diff = rendered.bytes().zip(golden.bytes()).position(|(a, b)| a != b);
    s.check(
        "grid-golden-prompt",
        rendered == golden,
        format!("{} bytes rendered vs {} golden, first difference at {first_diff:?}", rendered.len(), golden.len()),
    );
}

fn disagreement(s: &mut Suite) {
    let fx = fixtures::disagreement_fixture();
    let total = fx.corpus.messages.len();
    let sel = select_disagreements(&fx.human, &fx.variants, SelectionRule::AllDiffer).unwrap();
    let found = sel.records.len();
    let planted_match = sel.records.iter().all(|r| fx.planted.contains_key(&r.message_id));
    s.check(
        "disagreement-count",
        found == 273 && planted_match && total == 4143,
        format!("{found} all-differ records among {total} messages"),
    );
    s.check(
        "disagreement-share",
        share_close(found, total, 6.50),
        format!("{:.2}% of messages against a published 6.50%", 100.0 * found as f64 / total as f64),
    );

    let mut set = DisagreementSet::new(sel.records, fx.coders.clone());
    set.attach_messages(&fx.corpus);
    let ids: Vec<MessageId> = set.records.iter().map(|r| r.message_id.clone()).collect();
    for id in &ids {
        for coder in &fx.coders {
            set.record_triage(id.as_str(), coder, fx.planted[id], None).unwrap();
        }
    }
    let sum = triage_summary(&set.records);
    let shares = [(TriageState::HumanError, 18.68), (TriageState::LlmError, 15.02), (TriageState::NewCode, 66.30)];
    let pass = shares.iter().all(|(st, p)| sum.percent(*st) == *p && share_close(sum.count(*st), sum.total, *p));
    s.check(
        "triage-summary",
        pass,
        format!(
            "human-error {} ({}%), llm-error {} ({}%), new-code {} ({}%)",
            sum.count(TriageState::HumanError),
            sum.percent(TriageState::HumanError),
            sum.count(TriageState::LlmError),
            sum.percent(TriageState::LlmError),
            sum.count(TriageState::NewCode),
            sum.percent(TriageState::NewCode)
        ),
    );

    let dir = directional_analysis(&set.records, &fixtures::attribution_codebook());
    let s_ns = dir.cell(CodeClass::S, CodeClass::NS).count;
    let ns_s = dir.cell(CodeClass::NS, CodeClass::S).count;
    s.check(
        "directional",
        s_ns == 160 && ns_s == 14 && share_close(s_ns, dir.total, 58.60) && share_close(ns_s, dir.total, 5.12),
        format!(
            "human S -> model NS {s_ns} ({:.3}%), human NS -> model S {ns_s} ({:.3}%) of {}",
            100.0 * s_ns as f64 / dir.total as f64,
            100.0 * ns_s as f64 / dir.total as f64,
            dir.total
        ),
    );
}

fn dispersion(s: &mut Suite) {
    let (variants, planted) = fixtures::dispersion_fixture();
    let report = variant_dispersion(&variants);
    let hits = report.at_least(3);
    let exact = report.per_message.iter().filter(|(_, n)| **n >= 3).all(|(m, _)| planted.contains(m));
    s.check(
        "dispersion",
        hits == 599 && exact && report.messages == 4153 && share_close(hits, report.messages, 14.42),
        format!("{hits} of {} messages with 3+ distinct codes ({:.2}%)", report.messages, 100.0 * hits as f64 / report.messages as f64),
    );
}

fn value(k: Kappa) -> f64 {
    k.value().unwrap_or(f64::NAN)
}

fn revalidation(s: &mut Suite) {
    let fx = fixtures::revalidation_fixture();
    let ctx = fixtures::prompt_context();
    let refs: Vec<&Message> = fx.messages.iter().collect();
    let (g1, _) = Gateway::mock(fx.first_pass.clone());
    let (g2, _) = Gateway::mock(fx.second_pass.clone());
    let first = revalidate(&fx.expanded, &refs, &fx.human, &g1, &fast_cfg(), &ctx, &fx.variant).unwrap();
    let second = revalidate(&fx.clarified, &refs, &fx.human, &g2, &fast_cfg(), &ctx, &fx.variant).unwrap();
    let (k1, k2) = (value(first.kappa), value(second.kappa));
    let (t1, t2) = (2024.0 / 8849.0, 41.0 / 158.0);
    let pass = (k1 - t1).abs() <= 0.005
        && (k2 - t2).abs() <= 0.005
        && (k1 - 0.23).abs() <= 0.005
        && (k2 - 0.26).abs() <= 0.005
        && first.failures.is_empty()
        && second.failures.is_empty()
        && first.n == 273;
    s.check(
        "revalidation-model",
        pass,
        format!(
            "n = {}, kappa {k1:.4} -> {k2:.4} (scripted {t1:.4} -> {t2:.4}), codebook v{} -> v{}",
            first.n, first.codebook_version, second.codebook_version
        ),
    );

    let before = fixtures::human_human_fixture(false);
    let after = fixtures::human_human_fixture(true);
    let (h1, n1) = pairwise_kappa(&before.coder_a, &before.coder_b).unwrap();
    let (h2, n2) = pairwise_kappa(&after.coder_a, &after.coder_b).unwrap();
    let (h1, h2) = (value(h1), value(h2));
    let (u1, u2) = (4667.0 / 6967.0, 3037.0 / 3487.0);
    let pass = n1 == 100
        && n2 == 100
        && (h1 - u1).abs() <= 0.005
        && (h2 - u2).abs() <= 0.005
        && (h1 - 0.67).abs() <= 0.005
        && (h2 - 0.87).abs() <= 0.005;
    s.check(
        "revalidation-human",
        pass,
        format!("100-message sample, kappa {h1:.4} -> {h2:.4} (scripted {u1:.4} -> {u2:.4})"),
    );
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(s: &mut Suite) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let first = run_demo(7, a.path());
    let elapsed = start.elapsed();
    let second = run_demo(7, b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let identical = first.is_ok() && second.is_ok() && ta == tb;
    let no_cr = ta.values().all(|bytes| !bytes.contains(&b'\r'));
    s.check(
        "demo-determinism",
        identical && no_cr && elapsed < Duration::from_secs(60),
        format!("{} report files, identical = {identical}, LF only = {no_cr}, one run {:.2}s", ta.len(), elapsed.as_secs_f64()),
    );
}

fn autonomous(s: &mut Suite) {
    let fx = fixtures::revalidation_fixture();
    let refs: Vec<&Message> = fx.messages.iter().take(40).collect();
    let (gateway, _) = Gateway::mock(fixtures::autonomous_baseline_mock());
    let draft = autonomous_induction(&refs, &gateway, &fast_cfg(), 0.7).unwrap();
    let (themes, codes, dups) = (draft.theme_count(), draft.code_count(), draft.duplicate_count());
    s.check(
        "autonomous-baseline",
        themes == 11 && codes == 26 && dups == 16 && share_close(dups, codes, 61.54) && !draft.ratified,
        format!("{themes} themes, {codes} code entries, {dups} duplicates ({:.2}%)", 100.0 * dups as f64 / codes as f64),
    );

    let c = rate_codebook(&fixtures::collaborative_ratings()).unwrap();
    let a = rate_codebook(&fixtures::autonomous_ratings()).unwrap();
    let got = [c.code_clarity, c.mutual_exclusivity, c.ease_of_use, c.exhaustiveness, a.code_clarity, a.mutual_exclusivity, a.ease_of_use, a.exhaustiveness];
    s.check(
        "codebook-ratings",
        got == [4.75, 4.0, 4.0, 4.0, 2.5, 1.75, 3.25, 3.5],
        format!("collaborative clarity/exclusivity/ease/exhaustive {:?}, autonomous {:?}", &got[..4], &got[4..]),
    );
}

fn main() {
    let mut suite = Suite { results: Vec::new() };
    kappa_oracle(&mut suite);
    kappa_edges(&mut suite);
    chi_square_oracle(&mut suite);
    grid(&mut suite);
    disagreement(&mut suite);
    dispersion(&mut suite);
    revalidation(&mut suite);
    determinism(&mut suite);
    autonomous(&mut suite);

    let known: BTreeMap<&str, &str> = KNOWN_FAILURES.iter().copied().collect();
    let mut unexpected = Vec::new();
    for (name, pass, _) in &suite.results {
        match (pass, known.get(name.as_str())) {
            (false, Some(reason)) => println!("known failure {name}: {reason}"),
            (false, None) => unexpected.push(name.clone()),
            (true, Some(_)) => println!("note: {name} is listed as a known failure but passed"),
            (true, None) => {}
        }
    }
    let passed = suite.results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", suite.results.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
