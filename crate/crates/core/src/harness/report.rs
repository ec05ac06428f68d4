//! Aggregate tables shaped like the evaluation figures, and a pass/fail
//! summary of the bundle-level acceptance checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::{
    read_csv, ErrorRow, OptimizationRow, ResultRow, TrainingRow, ERRORS_CSV, OPTIMIZATION_CSV, RESULTS_CSV,
    TRAINING_CSV,
};
use crate::error::Result;
use crate::stats::{median, rank_sum_greater, spearman};

/// Everything `run_experiment` writes that the report reads.
#[derive(Clone, Debug, Default)]
pub struct Bundle {
    pub results: Vec<ResultRow>,
    pub optimization: Vec<OptimizationRow>,
    pub training: Vec<TrainingRow>,
    pub errors: Vec<ErrorRow>,
    /// Files that were absent.
    pub missing: Vec<String>,
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut b = Bundle::default();
        fn get<T: for<'de> serde::Deserialize<'de>>(dir: &Path, name: &str, missing: &mut Vec<String>) -> Result<Vec<T>> {
            let p = dir.join(name);
            if p.exists() {
                read_csv(&p)
            } else {
                missing.push(name.to_string());
                Ok(Vec::new())
            }
        }
        b.results = get(dir, RESULTS_CSV, &mut b.missing)?;
        b.optimization = get(dir, OPTIMIZATION_CSV, &mut b.missing)?;
        b.training = get(dir, TRAINING_CSV, &mut b.missing)?;
        b.errors = get(dir, ERRORS_CSV, &mut b.missing)?;
        Ok(b)
    }

    fn rows<'a>(&'a self, axis: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.results.iter().filter(move |r| r.axis == axis)
    }

    /// Sample-weighted accuracy of a role on an axis, over every matrix.
    pub fn pooled_accuracy(&self, axis: &str, coord: Option<f64>, role: &str) -> Option<f64> {
        let (mut hits, mut n) = (0.0, 0usize);
        for r in self.rows(axis).filter(|r| r.role == role && coord.map_or(true, |c| (r.coord - c).abs() < 1e-9)) {
            if let Some(a) = r.accuracy {
                hits += a * r.n as f64;
                n += r.n;
            }
        }
        (n > 0).then(|| hits / n as f64)
    }
}

/// Outcome of one acceptance check; `passed` is empty when the bundle lacks
/// the rows needed.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub passed: Option<bool>,
    pub detail: String,
}

impl Check {
    fn new(id: u32, name: &'static str, passed: Option<bool>, detail: String) -> Self {
        Self { id, name, passed, detail }
    }

    pub fn line(&self) -> String {
        let verdict = match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "MISSING",
        };
        format!("criterion {:>2} {verdict} {}: {}", self.id, self.name, self.detail)
    }
}

fn f3(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

pub fn check_eavesdropping(b: &Bundle) -> Check {
    let naive = b.pooled_accuracy("attack", Some(1.0), "naive");
    let clean = b.pooled_accuracy("reference", None, "clean");
    let eve_clean = b.pooled_accuracy("reference", None, "eve_clean");
    let passed = match (naive, clean, eve_clean) {
        (Some(n), Some(c), Some(e)) => Some(n < 0.25 && c >= 0.9 && e - n >= 0.6),
        _ => None,
    };
    let red = naive.zip(eve_clean).map(|(n, e)| e - n);
    Check::new(
        4,
        "eavesdropping collapse",
        passed,
        format!("naive {} (< 0.25), clean {} (>= 0.9), reduction {} (>= 0.6)", f3(naive), f3(clean), f3(red)),
    )
}

pub fn check_retention(b: &Bundle) -> Check {
    let bob = b.pooled_accuracy("reference", None, "bob_s");
    let wrong = b.pooled_accuracy("reference", None, "bob_s_wrong_key");
    let drop = bob.zip(wrong).map(|(a, w)| a - w);
    let passed = bob.zip(drop).map(|(a, d)| a >= 0.85 && d >= 0.2);
    Check::new(
        5,
        "legitimate sensing retention",
        passed,
        format!("bob_s {} (>= 0.85), wrong-key drop {} (>= 0.2)", f3(bob), f3(drop)),
    )
}

/// Accuracy per gamma for one role, in increasing gamma.
pub fn gamma_curve(b: &Bundle, role: &str) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> =
        b.rows("gamma").filter(|r| r.role == role).filter_map(|r| r.accuracy.map(|a| (r.coord, a))).collect();
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    v
}

pub fn check_temporal(b: &Bundle) -> Check {
    let eve = b.pooled_accuracy("reference", None, "eve");
    let psi_only = b.pooled_accuracy("reference", None, "eve_psi_only");
    let gain = eve.zip(psi_only).map(|(e, p)| p - e);
    let curve: Vec<(f64, f64)> = gamma_curve(b, "eve").into_iter().filter(|p| p.0 <= 0.5 + 1e-9).collect();
    let monotone = (curve.len() >= 2).then(|| curve.windows(2).all(|w| w[1].1 <= w[0].1 + 0.03));
    let passed = gain.zip(monotone).map(|(g, m)| g >= 0.03 && m);
    let pts: Vec<String> = curve.iter().map(|(g, a)| format!("{g}:{a:.3}")).collect();
    Check::new(
        6,
        "temporal randomization increment",
        passed,
        format!(
            "psi-only {} vs gamma {} (gain {} >= 0.03); eve by gamma [{}] non-increasing within 0.03: {}",
            f3(psi_only),
            f3(eve),
            f3(gain),
            pts.join(" "),
            monotone.map_or("n/a".into(), |m| m.to_string())
        ),
    )
}

/// Spearman correlation of (SDNR, accuracy) over the distance sweep, per
/// matrix with a varying curve, and pooled over those matrices.
pub fn distance_correlations(b: &Bundle) -> (Vec<(String, f64)>, Option<f64>) {
    let mut by_psi: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in b.rows("distance").filter(|r| r.role == "eve_psi_only" && r.psi.starts_with("partial")) {
        if let (Some(s), Some(a)) = (r.sdnr_db, r.accuracy) {
            let e = by_psi.entry(&r.psi).or_default();
            e.0.push(s);
            e.1.push(a);
        }
    }
    let per: Vec<(String, f64)> =
        by_psi.iter().filter_map(|(k, (s, a))| spearman(s, a).ok().map(|rho| (k.to_string(), rho))).collect();
    let (s, a): (Vec<f64>, Vec<f64>) =
        by_psi.values().flat_map(|(s, a)| s.iter().copied().zip(a.iter().copied())).unzip();
    (per, spearman(&s, &a).ok())
}

pub fn check_correlation(b: &Bundle) -> Check {
    let (per, pooled) = distance_correlations(b);
    let min = per.iter().map(|p| p.1).reduce(f64::min);
    let passed = min.map(|m| m > 0.8);
    let txt: Vec<String> = per.iter().map(|(k, r)| format!("{k} {r:.3}")).collect();
    Check::new(
        7,
        "SDNR-accuracy correlation",
        passed,
        format!("spearman per sweep [{}] (each > 0.8), pooled {}", txt.join(", "), f3(pooled)),
    )
}

/// One-sided rank-sum p-values that optimized matrices beat random ones on
/// Bob's communication SNR, Bob's SDNR and Eve's (negated) SDNR, with the
/// medians of both populations.
pub fn dominance(b: &Bundle) -> Option<[(f64, f64, f64); 3]> {
    let pick = |kind: &str, f: fn(&OptimizationRow) -> f64| -> Vec<f64> {
        b.optimization.iter().filter(|r| r.kind == kind).map(f).collect()
    };
    let cols: [fn(&OptimizationRow) -> f64; 3] = [|r| r.eta_c_bob_db, |r| r.eta_sd_bob_db, |r| -r.eta_sd_eve_db];
    let mut out = [(0.0, 0.0, 0.0); 3];
    for (i, f) in cols.iter().enumerate() {
        let (o, r) = (pick("optimized", *f), pick("random", *f));
        out[i] = (rank_sum_greater(&o, &r).ok()?.p_greater, median(&o), median(&r));
    }
    Some(out)
}

pub fn check_dominance(b: &Bundle) -> Check {
    let n_opt = b.optimization.iter().filter(|r| r.kind == "optimized").count();
    let n_rand = b.optimization.iter().filter(|r| r.kind == "random").count();
    let d = dominance(b);
    let passed = d.map(|d| n_opt >= 500 && n_rand >= 500 && d.iter().all(|(p, mo, mr)| *p < 0.01 && mo > mr));
    let names = ["eta_c_bob", "eta_sd_bob", "-eta_sd_eve"];
    let txt = d.map_or("n/a".into(), |d| {
        names
            .iter()
            .zip(d)
            .map(|(n, (p, mo, mr))| format!("{n} p={p:.2e} median {mo:.4} vs {mr:.4} dB"))
            .collect::<Vec<_>>()
            .join("; ")
    });
    Check::new(8, "optimization dominance", passed, format!("{n_opt} optimized vs {n_rand} random: {txt}"))
}

/// Link rows at one payload SNR grouped by modulation and seed:
/// `(plain, keyed, keyless)` BER of the optimized matrix.
pub fn link_table(b: &Bundle, snr_db: f64) -> BTreeMap<(String, String), [Option<f64>; 3]> {
    let mut t: BTreeMap<(String, String), [Option<f64>; 3]> = BTreeMap::new();
    for r in b.rows("link").filter(|r| (r.coord - snr_db).abs() < 1e-9) {
        let parts: Vec<&str> = r.psi.split(':').collect();
        if parts.len() != 3 || !(parts[0] == "optimized" || parts[0] == "none") {
            continue;
        }
        let slot = match r.role.as_str() {
            "bob_c_plain" => 0,
            "bob_c" => 1,
            "bob_c_keyless" => 2,
            _ => continue,
        };
        t.entry((parts[1].to_string(), parts[2].to_string())).or_default()[slot] = r.ber;
    }
    t
}

pub fn check_link(b: &Bundle) -> Check {
    let t = link_table(b, 25.0);
    let mut by_mod: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut ratio_ok = true;
    let mut complete = !t.is_empty();
    for ((m, _), [plain, keyed, keyless]) in &t {
        match (plain, keyed, keyless) {
            (Some(p), Some(k), Some(u)) => {
                by_mod.entry(m).or_default().push(k - p);
                ratio_ok &= *u >= 10.0 * k && *u > 0.0;
            }
            _ => complete = false,
        }
    }
    let penalties: Vec<(String, f64)> = by_mod.iter().map(|(m, v)| (m.to_string(), median(v))).collect();
    let passed = complete.then(|| ratio_ok && penalties.iter().all(|p| p.1 < 1e-4));
    let txt: Vec<String> = penalties.iter().map(|(m, p)| format!("{m} median penalty {p:.2e}")).collect();
    Check::new(
        9,
        "communication protection",
        passed,
        format!("[{}] (< 1e-4); keyless >= 10x keyed on every seed: {ratio_ok}", txt.join(", ")),
    )
}

pub fn check_diversity(b: &Bundle) -> Check {
    let naive = b.pooled_accuracy("attack", Some(1.0), "naive");
    let virt = b.pooled_accuracy("attack", Some(80.0), "virtual_80");
    let diff = naive.zip(virt).map(|(n, v)| v - n);
    Check::new(
        10,
        "diversity futility",
        diff.map(|d| d.abs() <= 0.05),
        format!("virtual_80 {} vs naive {} (|diff| {} <= 0.05)", f3(virt), f3(naive), f3(diff.map(f64::abs))),
    )
}

/// Bundle-level acceptance checks.
pub fn bundle_checks(b: &Bundle) -> Vec<Check> {
    vec![
        check_eavesdropping(b),
        check_retention(b),
        check_temporal(b),
        check_correlation(b),
        check_dominance(b),
        check_link(b),
        check_diversity(b),
    ]
}

#[derive(Clone, Debug)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub checks: Vec<Check>,
}

struct Table {
    header: &'static [&'static str],
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &'static [&'static str]) -> Self {
        Self { header, rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn result_table(rows: impl Iterator<Item = ResultRow>) -> Table {
    let mut t = Table::new(&["coord", "role", "psi", "n", "accuracy", "sdnr_db", "snr_db", "ber", "similarity"]);
    for r in rows {
        t.push(vec![
            r.coord.to_string(),
            r.role,
            r.psi,
            r.n.to_string(),
            opt(r.accuracy),
            opt(r.sdnr_db),
            opt(r.snr_db),
            opt(r.ber),
            opt(r.similarity),
        ]);
    }
    t
}

/// Sections each table needs, for the gap warning.
const EXPECTED_AXES: &[&str] = &["reference", "attack", "distance", "gamma", "link"];

/// Write the figure tables and `summary.txt` for the bundle in `bundle_dir`.
pub fn report(bundle_dir: &Path, out_dir: &Path) -> Result<Report> {
    let b = Bundle::load(bundle_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut warnings = Vec::new();
    if b.results.is_empty() && b.optimization.is_empty() {
        warnings.push("empty bundle: all tables are empty".to_string());
    }
    for m in &b.missing {
        warnings.push(format!("missing file {m}"));
    }
    let gaps: Vec<&str> = EXPECTED_AXES.iter().copied().filter(|a| b.rows(a).next().is_none()).collect();
    if !gaps.is_empty() {
        warnings.push(format!("partial report, no rows for: {}", gaps.join(", ")));
    }
    if b.optimization.is_empty() {
        warnings.push("partial report, no optimization population".to_string());
    }
    for e in &b.errors {
        warnings.push(format!("point {} ({}={}) failed: {}", e.point, e.axis, e.coord, e.error));
    }

    let mut tables: Vec<(&str, Table)> = Vec::new();
    let of = |axis: &str| b.rows(axis).cloned().collect::<Vec<_>>();

    let mut fig05 = Table::new(&["payload_snr_db", "psi", "lts_snr_db"]);
    for r in of("link").into_iter().filter(|r| r.role == "lts") {
        fig05.push(vec![r.coord.to_string(), r.psi, opt(r.snr_db)]);
    }
    tables.push(("fig05_snr.csv", fig05));

    let mut fig06 = Table::new(&["distance_m", "role", "psi", "n", "sdnr_db", "accuracy"]);
    for r in of("distance") {
        fig06.push(vec![r.coord.to_string(), r.role, r.psi, r.n.to_string(), opt(r.sdnr_db), opt(r.accuracy)]);
    }
    tables.push(("fig06_sdnr_accuracy.csv", fig06));

    let mut fig07 = Table::new(&["psi", "n", "psi_only_accuracy", "temporal_accuracy"]);
    let reference = of("reference");
    for r in reference.iter().filter(|r| r.role == "eve_psi_only") {
        let with_t = reference.iter().find(|x| x.role == "eve" && x.psi == r.psi).and_then(|x| x.accuracy);
        fig07.push(vec![r.psi.clone(), r.n.to_string(), opt(r.accuracy), opt(with_t)]);
    }
    tables.push(("fig07_temporal.csv", fig07));

    tables.push(("fig10_sensing.csv", result_table(reference.into_iter())));

    let mut fig12 = Table::new(&["payload_snr_db", "modulation", "role", "psi", "seeds", "median_ber", "max_ber"]);
    let mut link: Vec<(f64, String, String, String, f64)> = of("link")
        .into_iter()
        .filter_map(|r| {
            let mut parts = r.psi.split(':');
            let id = parts.next().unwrap_or("").to_string();
            let m = parts.next().unwrap_or("").to_string();
            r.ber.map(|ber| (r.coord, m, r.role, id, ber))
        })
        .collect();
    link.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| (&a.1, &a.2, &a.3).cmp(&(&b.1, &b.2, &b.3))));
    for group in link.chunk_by(|a, b| a.0 == b.0 && (&a.1, &a.2, &a.3) == (&b.1, &b.2, &b.3)) {
        let v: Vec<f64> = group.iter().map(|g| g.4).collect();
        let (snr, m, role, id, _) = &group[0];
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        fig12.push(vec![
            snr.to_string(),
            m.clone(),
            role.clone(),
            id.clone(),
            v.len().to_string(),
            median(&v).to_string(),
            max.to_string(),
        ]);
    }
    tables.push(("fig12_ber.csv", fig12));

    let mut fig13 = Table::new(&[
        "kind",
        "count",
        "feasible",
        "median_eta_c_bob_db",
        "median_eta_sd_bob_db",
        "median_eta_sd_eve_db",
    ]);
    for kind in ["random", "optimized"] {
        let rows: Vec<&OptimizationRow> = b.optimization.iter().filter(|r| r.kind == kind).collect();
        if rows.is_empty() {
            continue;
        }
        let col = |f: fn(&OptimizationRow) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>()).to_string();
        fig13.push(vec![
            kind.to_string(),
            rows.len().to_string(),
            rows.iter().filter(|r| r.feasible).count().to_string(),
            col(|r| r.eta_c_bob_db),
            col(|r| r.eta_sd_bob_db),
            col(|r| r.eta_sd_eve_db),
        ]);
    }
    tables.push(("fig13_optimization.csv", fig13));

    let mut fig14 = Table::new(&["axis", "coord", "role", "n", "accuracy", "ber"]);
    for r in of("attack").into_iter().chain(of("antennas").into_iter().filter(|r| r.accuracy.is_some())) {
        fig14.push(vec![r.axis, r.coord.to_string(), r.role, r.n.to_string(), opt(r.accuracy), opt(r.ber)]);
    }
    tables.push(("fig14_antennas.csv", fig14));

    let mut fig15 = Table::new(&["model", "epoch", "loss", "eval_accuracy"]);
    for r in &b.training {
        fig15.push(vec![r.model.clone(), r.epoch.to_string(), r.loss.to_string(), opt(r.eval_accuracy)]);
    }
    tables.push(("fig15_training.csv", fig15));

    tables.push(("fig16_gamma.csv", result_table(of("gamma").into_iter())));
    tables.push(("app_packet_rate.csv", result_table(of("packet_rate").into_iter())));
    tables.push(("app_encoders.csv", result_table(of("num_encoders").into_iter())));
    tables.push(("app_antennas.csv", result_table(of("antennas").into_iter())));

    let mut files = Vec::new();
    for (name, t) in &tables {
        let p = out_dir.join(name);
        t.write(&p)?;
        files.push(p);
    }

    let checks = bundle_checks(&b);
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "{}", c.line());
    }
    let _ = writeln!(text, "failed points: {}", b.errors.len());
    for w in &warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    let p = out_dir.join("summary.txt");
    fs::write(&p, text)?;
    files.push(p);
    Ok(Report { files, warnings, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(axis: &str, coord: f64, role: &str, psi: &str, n: usize, acc: f64) -> ResultRow {
        ResultRow {
            axis: axis.into(),
            coord,
            role: role.into(),
            psi: psi.into(),
            n,
            accuracy: Some(acc),
            ..ResultRow::default()
        }
    }

    #[test]
    fn empty_bundle_gives_empty_tables_and_a_warning() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let r = report(src.path(), out.path()).unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("empty bundle")));
        assert!(r.checks.iter().all(|c| c.passed.is_none()));
        let t = fs::read_to_string(out.path().join("fig10_sensing.csv")).unwrap();
        assert_eq!(t.lines().count(), 1);
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let src = tempfile::tempdir().unwrap();
        let rows = vec![
            row("reference", 0.0, "clean", "none", 10, 1.0),
            row("gamma", 0.0, "eve", "family", 10, 0.4),
            row("gamma", 0.5, "eve", "family", 10, 0.2),
        ];
        super::super::run::write_csv(&src.path().join(RESULTS_CSV), &rows, super::super::run::RESULT_HEADER)
            .unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = report(src.path(), a.path()).unwrap();
        report(src.path(), b.path()).unwrap();
        for f in &ra.files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        assert!(ra.warnings.iter().any(|w| w.contains("attack")));
    }

    #[test]
    fn pooled_accuracy_weights_by_sample_count() {
        let b = Bundle {
            results: vec![row("reference", 0.0, "eve", "a", 30, 0.1), row("reference", 0.0, "eve", "b", 10, 0.5)],
            ..Bundle::default()
        };
        assert!((b.pooled_accuracy("reference", None, "eve").unwrap() - 0.2).abs() < 1e-12);
        assert!(b.pooled_accuracy("reference", None, "bob_s").is_none());
    }

    #[test]
    fn gamma_check_tolerates_three_point_noise() {
        let mut b = Bundle {
            results: vec![
                row("reference", 0.0, "eve", "a", 10, 0.20),
                row("reference", 0.0, "eve_psi_only", "a", 10, 0.30),
                row("gamma", 0.0, "eve", "family", 10, 0.30),
                row("gamma", 0.1, "eve", "family", 10, 0.32),
                row("gamma", 0.5, "eve", "family", 10, 0.20),
            ],
            ..Bundle::default()
        };
        assert_eq!(check_temporal(&b).passed, Some(true));
        b.results[3].accuracy = Some(0.34);
        assert_eq!(check_temporal(&b).passed, Some(false));
    }
}
