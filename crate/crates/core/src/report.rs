//! Exact-match tables, stage ordering over probe onsets, and the CSV, SVG
//! and manifest artifacts written for every experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::lens::{histogram_csv, LayerWindow, LensHistogram};
use crate::probe::LayerCurve;

/// One line of an answers file: a model's generated answer next to the
/// canonical one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: u64,
    /// Digit-length group the problem belongs to.
    pub digits: usize,
    pub gold: String,
    pub answer: String,
    /// Set when generation hit its length cap without a terminator.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl AnswerRecord {
    /// String equality after trimming surrounding whitespace; truncated
    /// generations never match.
    pub fn is_exact(&self) -> bool {
        !self.truncated && self.answer.trim() == self.gold.trim()
    }
}

pub fn read_answers(path: &Path) -> Result<Vec<AnswerRecord>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_answers(records: &[AnswerRecord], path: &Path) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub digits: usize,
    pub n_samples: usize,
    pub correct: usize,
    /// `None` for an empty group.
    pub accuracy: Option<f64>,
}

/// Exact-match accuracy per digit length plus overall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactMatchTable {
    pub rows: Vec<LengthRow>,
    pub n_samples: usize,
    pub correct: usize,
    pub overall: f64,
}

impl ExactMatchTable {
    pub fn row(&self, digits: usize) -> Option<&LengthRow> {
        self.rows.iter().find(|r| r.digits == digits)
    }

    /// `digits,n,correct,accuracy_pct` rows, then `overall`; percentages
    /// with two decimals, empty for empty groups.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("digits,n,correct,accuracy_pct\n");
        for r in &self.rows {
            let acc = r.accuracy.map_or(String::new(), |a| format!("{:.2}", 100.0 * a));
            let _ = writeln!(s, "{},{},{},{acc}", r.digits, r.n_samples, r.correct);
        }
        let _ = writeln!(s, "overall,{},{},{:.2}", self.n_samples, self.correct, 100.0 * self.overall);
        s
    }
}

/// Groups records by digit length; lengths 1 to 6 always get a row.
pub fn exact_match_table(records: &[AnswerRecord]) -> Result<ExactMatchTable> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no answers to score".into()));
    }
    let mut groups: BTreeMap<usize, (usize, usize)> = (1..=6).map(|d| (d, (0, 0))).collect();
    for r in records {
        let g = groups.entry(r.digits).or_default();
        g.0 += 1;
        g.1 += usize::from(r.is_exact());
    }
    let rows: Vec<LengthRow> = groups
        .into_iter()
        .map(|(digits, (n, c))| LengthRow {
            digits,
            n_samples: n,
            correct: c,
            accuracy: (n > 0).then(|| c as f64 / n as f64),
        })
        .collect();
    let n_samples = records.len();
    let correct = rows.iter().map(|r| r.correct).sum();
    Ok(ExactMatchTable { rows, n_samples, correct, overall: correct as f64 / n_samples as f64 })
}

/// Aligned answers, canonical answers and digit-length tags.
pub fn exact_match_eval(answers: &[String], gold: &[String], digits: &[usize]) -> Result<ExactMatchTable> {
    if answers.len() != gold.len() || gold.len() != digits.len() {
        return Err(Error::Shape(format!(
            "answers ({}), gold ({}) and digit tags ({}) differ in length",
            answers.len(),
            gold.len(),
            digits.len()
        )));
    }
    let records: Vec<AnswerRecord> = answers
        .iter()
        .zip(gold)
        .zip(digits)
        .enumerate()
        .map(|(i, ((a, g), &d))| AnswerRecord { id: i as u64, digits: d, gold: g.clone(), answer: a.clone(), truncated: false })
        .collect();
    exact_match_table(&records)
}

/// Signal families whose onsets are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Structure,
    Carry,
    SumRange,
    Digit,
    OutputTop1,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Structure, Family::Carry, Family::SumRange, Family::Digit, Family::OutputTop1];

    pub fn name(self) -> &'static str {
        match self {
            Family::Structure => "structure",
            Family::Carry => "carry",
            Family::SumRange => "sum_range",
            Family::Digit => "digit",
            Family::OutputTop1 => "output_top1",
        }
    }

    /// Position in the expected order; carry and sum-range share a rank.
    pub fn rank(self) -> u8 {
        match self {
            Family::Structure => 0,
            Family::Carry | Family::SumRange => 1,
            Family::Digit => 2,
            Family::OutputTop1 => 3,
        }
    }

    /// Probe family of a task; cross-operation and lens datasets have none.
    pub fn of_task(kind: TaskKind) -> Option<Family> {
        match kind {
            TaskKind::Structure3 => Some(Family::Structure),
            TaskKind::SumRange => Some(Family::SumRange),
            TaskKind::CarryPos => Some(Family::Carry),
            TaskKind::DigitPos => Some(Family::Digit),
            TaskKind::CrossopDigit | TaskKind::Logitlens => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyStage {
    pub family: Family,
    /// Onset layer (modal layer for the output family); `None` when a
    /// member curve never reaches its plateau.
    pub layer: Option<usize>,
    /// Curves (or the histogram) the layer was derived from.
    pub sources: Vec<String>,
}

/// Layer ordering of the signal families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Provided families sorted by layer (families without one last).
    pub stages: Vec<FamilyStage>,
    /// Families with no input at all.
    pub missing: Vec<Family>,
    /// True iff every provided family has a layer and layers never
    /// decrease along structure, carry / sum-range, digit, output.
    pub monotone: bool,
    pub plateau_fraction: f64,
    pub chance_margin: f64,
}

impl StageReport {
    pub fn partial(&self) -> bool {
        !self.missing.is_empty()
    }

    pub fn layer_of(&self, family: Family) -> Option<usize> {
        self.stages.iter().find(|s| s.family == family).and_then(|s| s.layer)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for st in &self.stages {
            let layer = st.layer.map_or("none".to_string(), |l| format!("L{l}"));
            let _ = writeln!(s, "{:<12} {:>5}  ({})", st.family.name(), layer, st.sources.join(", "));
        }
        for m in &self.missing {
            let _ = writeln!(s, "{:<12} missing", m.name());
        }
        let _ = writeln!(s, "ordering monotone: {}", self.monotone);
        if self.partial() {
            let _ = writeln!(s, "report is partial");
        }
        s
    }
}

/// A family's onset is the deepest onset among its curves (e.g. the three
/// digit positions), so the family counts as decodable only once all of its
/// members are. The output stage is the histogram's modal layer.
pub fn stage_ordering(
    curves: &[LayerCurve],
    lens: Option<&LensHistogram>,
    plateau_fraction: f64,
    chance_margin: f64,
) -> StageReport {
    let mut by_family: BTreeMap<Family, FamilyStage> = BTreeMap::new();
    for c in curves {
        let Some(family) = Family::of_task(c.spec.task_kind) else { continue };
        let onset = c.onset(plateau_fraction, chance_margin);
        let entry = by_family.entry(family).or_insert(FamilyStage { family, layer: Some(0), sources: Vec::new() });
        entry.layer = match (entry.layer, onset) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        entry.sources.push(c.spec.tag());
    }
    if let Some(h) = lens {
        by_family.insert(
            Family::OutputTop1,
            FamilyStage { family: Family::OutputTop1, layer: h.modal_layer(), sources: vec!["logit lens".into()] },
        );
    }
    let missing: Vec<Family> = Family::ALL.into_iter().filter(|f| !by_family.contains_key(f)).collect();
    let mut stages: Vec<FamilyStage> = by_family.into_values().collect();
    let monotone = stages.iter().all(|s| s.layer.is_some())
        && stages.iter().all(|a| {
            stages.iter().all(|b| a.family.rank() >= b.family.rank() || a.layer <= b.layer)
        });
    stages.sort_by_key(|s| (s.layer.is_none(), s.layer, s.family.rank(), s.family));
    StageReport { stages, missing, monotone, plateau_fraction, chance_margin }
}

/// Everything [`emit_artifacts`] can write.
#[derive(Clone, Debug, Default)]
pub struct ArtifactInputs<'a> {
    pub curves: &'a [LayerCurve],
    /// One histogram per seed or store.
    pub lens: &'a [LensHistogram],
    pub lens_window: Option<LayerWindow>,
    pub table: Option<&'a ExactMatchTable>,
    pub stages: Option<&'a StageReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Index of every file an artifact directory holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub files: Vec<ManifestEntry>,
    pub plots: usize,
}

impl ArtifactManifest {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.files {
            h.update(f.path.as_bytes());
            h.update([0]);
            h.update(f.sha256.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects output files in memory, then writes them with a manifest.
#[derive(Default)]
pub struct ArtifactWriter {
    files: BTreeMap<String, (String, Vec<u8>)>,
}

impl ArtifactWriter {
    pub fn add(&mut self, path: impl Into<String>, kind: &str, bytes: impl Into<Vec<u8>>) {
        self.files.insert(path.into(), (kind.to_string(), bytes.into()));
    }

    pub fn manifest(&self) -> ArtifactManifest {
        let files = self
            .files
            .iter()
            .map(|(path, (kind, bytes))| ManifestEntry {
                path: path.clone(),
                kind: kind.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(bytes)),
            })
            .collect::<Vec<_>>();
        let plots = files.iter().filter(|f| f.kind == "svg").count();
        ArtifactManifest { files, plots }
    }

    pub fn write(&self, out_dir: &Path) -> Result<ArtifactManifest> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for (path, (_, bytes)) in &self.files {
            let full: PathBuf = out_dir.join(path);
            if let Some(parent) = full.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&full, bytes).map_err(|e| Error::io(&full, e))?;
        }
        let manifest = self.manifest();
        let path = out_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Adds the standard report files for `inputs` to `w`.
pub fn collect_artifacts(w: &mut ArtifactWriter, inputs: &ArtifactInputs<'_>) -> Result<()> {
    let mut all = String::from("family,task,layer,mean,ci95,chance,per_seed\n");
    for c in inputs.curves {
        let family = Family::of_task(c.spec.task_kind).map_or("other", Family::name);
        let tag = c.spec.tag();
        for p in &c.points {
            let seeds: Vec<String> = p.per_seed.iter().map(|r| format!("{}:{:.6}", r.seed, r.accuracy)).collect();
            let _ = writeln!(
                all,
                "{family},{tag},{},{},{},{:.6},{}",
                p.layer,
                fmt6(p.mean),
                fmt6(p.ci95),
                c.chance,
                seeds.join(";")
            );
        }
        let stem = c.file_stem();
        w.add(format!("curves/{stem}.csv"), "csv", c.to_csv());
        w.add(format!("curves/{stem}.jsonl"), "jsonl", c.to_jsonl()?);
        w.add(format!("plots/{stem}.svg"), "svg", curve_svg(c));
    }
    w.add("curves.csv", "csv", all);
    if !inputs.lens.is_empty() {
        let window = inputs.lens_window.unwrap_or(LayerWindow::All);
        w.add("lens_hist.csv", "csv", histogram_csv(inputs.lens, window)?);
        w.add("plots/lens_hist.svg", "svg", histogram_svg(inputs.lens, window));
    }
    if let Some(t) = inputs.table {
        w.add("exact_match.csv", "csv", t.to_csv());
    }
    if let Some(s) = inputs.stages {
        let mut json = serde_json::to_string_pretty(s)?;
        json.push('\n');
        w.add("stages.json", "json", json);
        w.add("stages.txt", "txt", s.to_text());
    }
    Ok(())
}

/// Writes the report files and `manifest.json` into `out_dir`.
pub fn emit_artifacts(inputs: &ArtifactInputs<'_>, out_dir: &Path) -> Result<ArtifactManifest> {
    let mut w = ArtifactWriter::default();
    collect_artifacts(&mut w, inputs)?;
    w.write(out_dir)
}

fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".to_string()
    }
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 44.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, xml_escape(title));
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_ticks: &[(f64, String)], y_of: &dyn Fn(f64) -> f64) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#);
    for (v, label) in y_ticks {
        let y = y_of(*v);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 8.0, xml_escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(y_label)
    );
}

/// Mean accuracy per layer with CI whiskers and a dashed chance line.
pub fn curve_svg(curve: &LayerCurve) -> String {
    let n = curve.points.len().max(1);
    let x_of = |l: usize| LEFT + (W - LEFT - RIGHT) * if n > 1 { l as f64 / (n - 1) as f64 } else { 0.5 };
    let y_of = |v: f64| (H - BOTTOM) - (H - BOTTOM - TOP) * v.clamp(0.0, 1.0);
    let mut s = svg_open(&format!("{} probe accuracy", curve.spec.tag()));
    let ticks: Vec<(f64, String)> = (0..=5).map(|i| (i as f64 / 5.0, format!("{:.1}", i as f64 / 5.0))).collect();
    axes(&mut s, "layer state", "accuracy", &ticks, &y_of);
    for p in &curve.points {
        if n <= 12 || p.layer % n.div_ceil(12) == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                x_of(p.layer),
                H - BOTTOM + 14.0,
                p.layer
            );
        }
    }
    let cy = y_of(curve.chance);
    let _ = writeln!(
        s,
        r#"<line class="chance" x1="{LEFT:.2}" y1="{cy:.2}" x2="{:.2}" y2="{cy:.2}" stroke="gray" stroke-dasharray="5,4"/>"#,
        W - RIGHT
    );
    let mut pts = Vec::new();
    for p in curve.points.iter().filter(|p| p.mean.is_finite()) {
        let (x, y) = (x_of(p.layer), y_of(p.mean));
        if p.ci95 > 0.0 {
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="steelblue"/>"#,
                y_of(p.mean - p.ci95),
                y_of(p.mean + p.ci95)
            );
        }
        pts.push(format!("{x:.2},{y:.2}"));
    }
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

/// Bars of mean earliest-top-1 share per layer, with the never bucket last.
pub fn histogram_svg(hists: &[LensHistogram], window: LayerWindow) -> String {
    let layers = hists.first().map_or(0, |h| h.n_layer_states);
    let start = match window {
        LayerWindow::All => 0,
        LayerWindow::Last(n) => layers.saturating_sub(n),
    };
    let k = hists.len().max(1) as f64;
    let share = |f: &dyn Fn(&LensHistogram) -> usize| {
        hists.iter().map(|h| f(h) as f64 / h.n_samples.max(1) as f64).sum::<f64>() / k
    };
    let mut bars: Vec<(String, f64)> = (start..layers).map(|l| (l.to_string(), share(&|h| h.counts[l]))).collect();
    bars.push(("never".into(), share(&|h| h.never)));
    let y_max = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(0.05);
    let y_of = |v: f64| (H - BOTTOM) - (H - BOTTOM - TOP) * (v / y_max).clamp(0.0, 1.0);
    let mut s = svg_open("earliest top-1 layer");
    let ticks: Vec<(f64, String)> = (0..=4).map(|i| (y_max * i as f64 / 4.0, format!("{:.0}%", 100.0 * y_max * i as f64 / 4.0))).collect();
    axes(&mut s, "layer state", "share of samples", &ticks, &y_of);
    let slot = (W - LEFT - RIGHT) / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64;
        let y = y_of(*v);
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x + slot * 0.1,
            slot * 0.8,
            (H - BOTTOM) - y,
            if label == "never" { "gray" } else { "steelblue" }
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, x + slot / 2.0, H - BOTTOM + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
