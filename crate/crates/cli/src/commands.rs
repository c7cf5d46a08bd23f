use std::path::{Path, PathBuf};

use metalwan::disentangle::{self, DisentangledField, FieldReport, WeylCharge};
use metalwan::frames::FrameOptions;
use metalwan::io::MatrixDoc;
use metalwan::model::{self, CrossingSet, KPoint, ModelSpec};
use metalwan::wannier::{self, FrameField, HoppingTensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::failure::{Failure, EXIT_TOPOLOGY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

/// Where results go and in which table format.
pub struct Sink {
    pub dir: PathBuf,
    pub format: Format,
}

impl Sink {
    pub fn new(dir: PathBuf, format: Format) -> Result<Self, Failure> {
        std::fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        Ok(Sink { dir, format })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::invariant(format!("serializing {name}: {e}")))?;
        self.write(name, &(text + "\n"))
    }

    /// Write a table as CSV or as a JSON array of row objects.
    pub fn write_table(&self, stem: &str, table: &Table) -> Result<PathBuf, Failure> {
        let name = format!("{stem}.{}", self.format.ext());
        match self.format {
            Format::Csv => self.write(&name, &table.to_csv()),
            Format::Json => self.write_json(&name, &table.to_rows()),
        }
    }
}

/// A rectangular table of numbers and labels printed losslessly.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(x) => fmt_f64(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::Num(x) => serde_json::Value::from(*x),
            Cell::Int(i) => serde_json::Value::from(*i),
            Cell::Text(s) => serde_json::Value::from(s.clone()),
        }
    }
}

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::csv).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    fn to_rows(&self) -> Vec<serde_json::Map<String, serde_json::Value>> {
        self.rows.iter().map(|r| self.header.iter().cloned().zip(r.iter().map(Cell::json)).collect()).collect()
    }
}

/// A builtin name (`weyl2`, `insulator2`, `trs4`, `weyl4`) or a model JSON
/// file.
pub fn load_model(spec: &str) -> Result<ModelSpec, Failure> {
    let path = Path::new(spec);
    if path.exists() || spec.ends_with(".json") {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        return metalwan::io::parse_model(&text).map_err(|e| Failure::new(crate::failure::EXIT_IO, format!("{}: {e}", path.display())));
    }
    Ok(ModelSpec::by_name(spec)?)
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn genuine_crossings(m: &ModelSpec, band: usize, grid: [usize; 3]) -> Result<CrossingSet, Failure> {
    if band == 0 || band >= m.dim {
        return Ok(CrossingSet::empty(band));
    }
    let tol = model::default_crossing_tol(m, band, grid)?;
    let found = model::detect_crossings(m, band, grid, tol)?;
    Ok(CrossingSet { points: found.points.iter().filter(|x| x.genuine).cloned().collect(), ..found })
}

/// Outcome of a command: lines for stdout.
pub type Summary = Vec<String>;

// ---------------------------------------------------------------------------

pub fn bands(m: &ModelSpec, cfg: &RunConfig, sink: &Sink) -> Result<Summary, Failure> {
    let dim = m.dim;
    let mut header = vec!["t".to_string(), "k1".into(), "k2".into(), "k3".into()];
    header.extend((1..=dim).map(|b| format!("e{b}")));
    header.extend((1..dim).map(|b| format!("gap{b}")));
    let mut path = Table { header: header.clone(), rows: Vec::new() };
    let n = cfg.path_points;
    let mut min_gaps = vec![f64::INFINITY; dim.saturating_sub(1)];
    for i in 0..n {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let k: [f64; 3] = std::array::from_fn(|a| cfg.path_from[a] + t * (cfg.path_to[a] - cfg.path_from[a]));
        let s = model::spectrum_at(m, &KPoint::new(k[0], k[1], k[2]))?;
        let mut row = vec![Cell::Num(t), Cell::Num(k[0]), Cell::Num(k[1]), Cell::Num(k[2])];
        row.extend(s.eigenvalues.iter().map(|&e| Cell::Num(e)));
        for b in 1..dim {
            let g = s.gap(b);
            min_gaps[b - 1] = min_gaps[b - 1].min(g);
            row.push(Cell::Num(g));
        }
        path.rows.push(row);
    }
    let p = sink.write_table("bands", &path)?;

    let mut grid = Table { header: header[1..4].iter().cloned().chain(header[4..4 + dim].iter().cloned()).collect(), rows: Vec::new() };
    grid.header.insert(0, "node".into());
    for (i, k) in model::grid_points(cfg.grid).iter().enumerate() {
        let s = model::spectrum_at(m, k)?;
        let mut row = vec![Cell::Int(i as i64), Cell::Num(k.coords[0]), Cell::Num(k.coords[1]), Cell::Num(k.coords[2])];
        row.extend(s.eigenvalues.iter().map(|&e| Cell::Num(e)));
        grid.rows.push(row);
    }
    let g = sink.write_table("bands_grid", &grid)?;
    let mut out = vec![format!("wrote {} ({n} path points) and {}", p.display(), g.display())];
    if n > 0 {
        for (b, gmin) in min_gaps.iter().enumerate() {
            out.push(format!("min gap between bands {} and {} along path: {}", b + 1, b + 2, fmt_f64(*gmin)));
        }
    }
    Ok(out)
}

fn charges_table(charges: &[WeylCharge]) -> Table {
    let mut t = Table::new(&["k1", "k2", "k3", "charge", "radius", "residual"]);
    for c in charges {
        t.rows.push(vec![
            Cell::Num(c.k.coords[0]),
            Cell::Num(c.k.coords[1]),
            Cell::Num(c.k.coords[2]),
            Cell::Int(c.charge),
            Cell::Num(c.radius),
            Cell::Num(c.residual),
        ]);
    }
    t
}

pub fn charges(m: &ModelSpec, cfg: &RunConfig, sink: &Sink) -> Result<Summary, Failure> {
    let set = genuine_crossings(m, cfg.band + 1, cfg.crossing_grid)?;
    let radius = cfg.radius.unwrap_or_else(|| disentangle::charge_radius(&set));
    let charges = disentangle::charge_report(m, cfg.band, &set, radius)?;
    let p = sink.write_table("charges", &charges_table(&charges))?;
    let total: i64 = charges.iter().map(|c| c.charge).sum();
    let summary = vec![format!("{} crossings of bands {} and {}, total charge {total}; wrote {}", charges.len(), cfg.band + 1, cfg.band + 2, p.display())];
    if total != 0 {
        return Err(Failure::new(EXIT_TOPOLOGY, format!("Weyl charges sum to {total}, not 0 (crossings missed or mesh too coarse)")));
    }
    Ok(summary)
}

/// Exit status for a verification report of a field with band index `n`.
fn judge(field: &DisentangledField, rep: &FieldReport) -> Result<(), Failure> {
    if !rep.projector_ok() {
        let node = rep.worst_node.map_or(String::from("unknown node"), |n| format!("node {n}"));
        return Err(Failure::invariant(format!(
            "projector check failed at {node}: rank deviation {}, idempotency {}, hermiticity {}",
            fmt_f64(rep.rank_deviation),
            fmt_f64(rep.idempotency),
            fmt_f64(rep.hermiticity)
        )));
    }
    if rep.span_residual >= SPAN_TOL {
        let node = rep.span_residuals.iter().enumerate().filter_map(|(i, r)| r.map(|r| (i, r))).max_by(|a, b| a.1.total_cmp(&b.1)).map(|x| x.0);
        return Err(Failure::invariant(format!("span residual {} at node {node:?} exceeds {SPAN_TOL:e}", fmt_f64(rep.span_residual))));
    }
    if let Some(u) = rep.upper_residual {
        if field.assumption2 && u >= SPAN_TOL {
            return Err(Failure::invariant(format!("Ran P leaves Ran P_(N+2): residual {}", fmt_f64(u))));
        }
    }
    if let Some(chain) = &field.chern {
        if !chain.all_zero() {
            return Err(Failure::new(EXIT_TOPOLOGY, format!("boundary Chern numbers not zero: {chain:?}")));
        }
    }
    let slices = wannier::slice_cherns(field.grid, &field.projectors)?;
    if slices != [0; 3] {
        return Err(Failure::new(EXIT_TOPOLOGY, format!("coordinate slice Chern numbers {slices:?}: no global frame exists")));
    }
    Ok(())
}

const SPAN_TOL: f64 = 1e-7;

fn report_lines(rep: &FieldReport) -> Summary {
    let mut out = vec![
        format!("nodes {} rank {}", rep.nodes, rep.rank),
        format!("span residual {}", fmt_f64(rep.span_residual)),
        format!("projector: rank {} idempotency {} hermiticity {}", fmt_f64(rep.rank_deviation), fmt_f64(rep.idempotency), fmt_f64(rep.hermiticity)),
        format!("max neighbour increment {} (P_(N+1): {})", fmt_f64(rep.max_increment), fmt_f64(rep.model_increment)),
    ];
    if let Some(u) = rep.upper_residual {
        out.push(format!("upper residual {}", fmt_f64(u)));
    }
    if let Some(d) = &rep.decay {
        out.push(format!("decay fit: slope {} r2 {}", fmt_f64(d.fit.slope), fmt_f64(d.fit.r2)));
    }
    out
}

fn node_table(field: &DisentangledField, rep: &FieldReport) -> Table {
    let mut t = Table::new(&["node", "k1", "k2", "k3", "tag", "span_residual"]);
    for (i, k) in field.kpoints().iter().enumerate() {
        let tag = serde_json::to_value(field.tags[i]).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let span = rep.span_residuals[i].map_or(Cell::Text(String::new()), Cell::Num);
        t.rows.push(vec![Cell::Int(i as i64), Cell::Num(k.coords[0]), Cell::Num(k.coords[1]), Cell::Num(k.coords[2]), Cell::Text(tag), span]);
    }
    t
}

pub fn disentangle(m: &ModelSpec, cfg: &RunConfig, sink: &Sink) -> Result<Summary, Failure> {
    let (field, charges) = disentangle::disentangle(m, cfg.band, &cfg.glue(), cfg.crossing_grid)?;
    let rep = disentangle::verify_field(&field, m, cfg.band)?;
    let f = sink.write("field.json", &field.to_json()?)?;
    sink.write_json("report.json", &rep)?;
    sink.write_table("charges", &charges_table(&charges))?;
    sink.write_table("nodes", &node_table(&field, &rep))?;
    if let Some(d) = &rep.decay {
        sink.write("decay.csv", &d.to_csv())?;
    }
    let mut out = vec![format!("wrote {} and reports to {}", f.display(), sink.dir.display())];
    if let Some(r) = &field.region {
        out.push(format!("region centre {:?} semi-axes {:?}", r.center, r.semi_axes));
    }
    out.extend(report_lines(&rep));
    judge(&field, &rep)?;
    Ok(out)
}

pub fn verify(m: &ModelSpec, field_path: &Path, sink: &Sink) -> Result<Summary, Failure> {
    let field = DisentangledField::from_json(&read(field_path)?).map_err(|e| Failure::new(crate::failure::EXIT_IO, format!("{}: {e}", field_path.display())))?;
    let rep = disentangle::verify_field(&field, m, field.band_index)?;
    sink.write_json("verify.json", &rep)?;
    let out = report_lines(&rep);
    judge(&field, &rep)?;
    Ok(out)
}

#[derive(Serialize)]
struct FrameDoc {
    grid: [usize; 3],
    rank: usize,
    holonomy: [f64; 3],
    trs: bool,
    frames: Vec<MatrixDoc>,
}

fn frame_doc(f: &FrameField) -> FrameDoc {
    FrameDoc { grid: f.grid, rank: f.rank, holonomy: f.holonomy, trs: f.trs, frames: f.frames.iter().map(MatrixDoc::from_matrix).collect() }
}

pub fn wannierize(m: &ModelSpec, field_path: &Path, cfg: &RunConfig, sink: &Sink) -> Result<Summary, Failure> {
    let field = DisentangledField::from_json(&read(field_path)?).map_err(|e| Failure::new(crate::failure::EXIT_IO, format!("{}: {e}", field_path.display())))?;
    let trs = if cfg.trs {
        Some(m.trs.as_ref().ok_or_else(|| Failure::config("trs requested but the model has no time reversal".into()))?)
    } else {
        None
    };
    let opts = FrameOptions { seed: cfg.seed, ..FrameOptions::default() };
    let frames = wannier::global_frame(&field, trs, &opts)?;
    let residual = frames.frame_residual(&field.projectors);
    if residual >= 1e-8 {
        return Err(Failure::invariant(format!("frames do not span the field: residual {}", fmt_f64(residual))));
    }
    let h = wannier::hoppings(&frames, m)?;
    sink.write_json("frames.json", &frame_doc(&frames))?;
    let hp = sink.write("hoppings.json", &h.to_json()?)?;
    let mut out = vec![
        format!("wrote {} ({} terms, rank {})", hp.display(), h.terms.len(), h.rank),
        format!("frame residual {} max frame increment {}", fmt_f64(residual), fmt_f64(frames.max_increment())),
        format!("hermiticity residual {}", fmt_f64(h.hermiticity_residual())),
    ];
    if let Some(t) = trs {
        out.push(format!("trs frame residual {}", fmt_f64(wannier::trs_frame_residual(&frames, t))));
    }
    match h.decay() {
        Ok(d) => {
            sink.write("decay.csv", &d.to_csv())?;
            out.push(format!("decay fit over shells {:?}: slope {} r2 {} residual {}", d.fit_range, fmt_f64(d.fit.slope), fmt_f64(d.fit.r2), fmt_f64(d.fit.residual)));
        }
        Err(metalwan::Error::InsufficientData(why)) => out.push(format!("decay report skipped: {why}")),
        Err(e) => return Err(e.into()),
    }
    Ok(out)
}

#[derive(Serialize)]
struct InterpSummary {
    bands: usize,
    probes: usize,
    max_interp_error: f64,
    max_baseline_error: f64,
    ratio: f64,
}

pub fn interpolate(m: &ModelSpec, hop_path: &Path, bands: Option<usize>, cfg: &RunConfig, sink: &Sink) -> Result<Summary, Failure> {
    let h = HoppingTensor::from_json(&read(hop_path)?).map_err(|e| Failure::new(crate::failure::EXIT_IO, format!("{}: {e}", hop_path.display())))?;
    let n = bands.unwrap_or(if h.rank > 1 { h.rank - 1 } else { 1 });
    let mut avoid = Vec::new();
    for band in 1..=(n + 1).min(m.dim - 1) {
        avoid.extend(genuine_crossings(m, band, cfg.crossing_grid)?.genuine());
    }
    let probes = wannier::probe_points(cfg.probes, cfg.seed, &avoid, cfg.probe_exclusion);
    let rep = wannier::compare_interpolation(m, &h, n, &probes)?;
    let name = match sink.format {
        Format::Csv => sink.write("interpolation.csv", &rep.to_csv())?,
        Format::Json => sink.write_json("interpolation.json", &rep)?,
    };
    let (a, b) = (rep.max_interp_error(), rep.max_baseline_error());
    sink.write_json("interpolation_summary.json", &InterpSummary { bands: n, probes: probes.len(), max_interp_error: a, max_baseline_error: b, ratio: b / a })?;
    Ok(vec![
        format!("{} probes, lowest {n} bands: interpolation max error {}, direct Fourier {}", probes.len(), fmt_f64(a), fmt_f64(b)),
        format!("wrote {}", name.display()),
    ])
}
