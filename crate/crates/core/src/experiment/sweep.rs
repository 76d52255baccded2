use rayon::prelude::*;

use super::config::parse_pairs;
use super::{load_data, run_with_data, ExperimentConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_CELLS: usize = 256;

/// A base configuration plus the values to try for some of its keys.
///
/// In a spec file, `axis.<key> = v1 | v2 | …` adds an axis, `repeats` and
/// `max_cells` control the grid, and every other line sets the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axes: Vec<(String, Vec<String>)>,
    /// Seeds `base.seed, base.seed + 1, …` averaged per cell.
    pub repeats: usize,
    pub max_cells: usize,
}

impl SweepSpec {
    pub fn new(base: ExperimentConfig) -> Self {
        SweepSpec {
            base,
            axes: Vec::new(),
            repeats: 1,
            max_cells: DEFAULT_MAX_CELLS,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut base_pairs = Vec::new();
        let mut spec = SweepSpec::new(ExperimentConfig::default());
        let mut problems = Vec::new();
        for (k, v) in parse_pairs(text)? {
            if let Some(key) = k.strip_prefix("axis.") {
                spec.add_axis(key, &v);
            } else if k == "repeats" {
                match v.parse() {
                    Ok(r) => spec.repeats = r,
                    Err(_) => problems.push(format!("repeats: cannot parse `{v}`")),
                }
            } else if k == "max_cells" {
                match v.parse() {
                    Ok(r) => spec.max_cells = r,
                    Err(_) => problems.push(format!("max_cells: cannot parse `{v}`")),
                }
            } else {
                base_pairs.push((k, v));
            }
        }
        if let Err(Error::Config(mut p)) = spec.base.apply(&base_pairs) {
            problems.append(&mut p);
        }
        if problems.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Adds an axis from a `|`-separated list of values.
    pub fn add_axis(&mut self, key: &str, values: &str) {
        let values = values.split('|').map(|s| s.trim().to_string()).collect();
        self.axes.push((key.replace('-', "_"), values));
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Every combination of axis values, first axis slowest.
    pub fn cells(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new()];
        for (_, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push(v.clone());
                        next
                    })
                })
                .collect();
        }
        out
    }

    /// Checks the grid size and that every cell yields a valid config.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.repeats == 0 {
            problems.push("repeats: must be positive".to_string());
        }
        let cells = self.cell_count();
        if cells > self.max_cells {
            problems.push(format!("grid has {cells} cells, more than max_cells = {}", self.max_cells));
        }
        for (key, values) in &self.axes {
            if values.is_empty() {
                problems.push(format!("axis.{key}: no values"));
            }
            for v in values {
                let mut probe = self.base.clone();
                if let Err(e) = probe.set(key, v) {
                    problems.push(format!("axis.{e}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn cell_config(&self, values: &[String]) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        let pairs: Vec<(String, String)> = self
            .axes
            .iter()
            .zip(values)
            .map(|((k, _), v)| (k.clone(), v.clone()))
            .collect();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }
}

/// Seed-averaged result of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub values: Vec<String>,
    pub ga: Option<f64>,
    pub la: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(spec: &SweepSpec, values: &[String], base_data: &Option<(LabeledDataset, LabeledDataset)>) -> Result<(f64, f64)> {
    let cfg = spec.cell_config(values)?;
    let loaded;
    let (train, test) = match base_data {
        Some((train, test)) if cfg.data == spec.base.data => (train, test),
        _ => {
            loaded = load_data(&cfg.data)?;
            (&loaded.0, &loaded.1)
        }
    };
    let mut ga = 0.0;
    let mut la = 0.0;
    for r in 0..spec.repeats {
        let mut seeded = cfg.clone();
        seeded.seed = cfg.seed.wrapping_add(r as u64);
        let result = run_with_data(&seeded, train, test, &mut ())?;
        ga += result.final_metrics().ga;
        la += result.final_metrics().la;
    }
    let n = spec.repeats as f64;
    Ok((ga / n, la / n))
}

/// Runs every cell. A failing cell becomes an error row; the rest still run.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    spec.validate()?;
    let base_data = load_data(&spec.base.data).ok();
    let cells = spec.cells();
    Ok(cells
        .into_par_iter()
        .map(|values| match run_cell(spec, &values, &base_data) {
            Ok((ga, la)) => SweepCell { values, ga: Some(ga), la: Some(la), error: None },
            Err(e) => SweepCell { values, ga: None, la: None, error: Some(e.to_string()) },
        })
        .collect())
}

fn clean(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

/// `rank,<axes>,repeats,ga,la,best,error`, sorted by GA descending with failed
/// cells last. `best` is 1 on the top row.
pub fn summary_csv(spec: &SweepSpec, cells: &[SweepCell]) -> String {
    let mut order: Vec<&SweepCell> = cells.iter().collect();
    order.sort_by(|a, b| match (a.ga, b.ga) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let mut out = String::from("rank");
    for (k, _) in &spec.axes {
        out.push(',');
        out.push_str(k);
    }
    out.push_str(",repeats,ga,la,best,error\n");
    for (i, cell) in order.iter().enumerate() {
        out.push_str(&(i + 1).to_string());
        for v in &cell.values {
            out.push(',');
            out.push_str(&v.replace(',', ";"));
        }
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let best = u8::from(i == 0 && cell.ga.is_some());
        out.push_str(&format!(
            ",{},{},{},{},{}\n",
            spec.repeats,
            fmt(cell.ga),
            fmt(cell.la),
            best,
            cell.error.as_deref().map(clean).unwrap_or_default()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::tests::blob_config;

    #[test]
    fn single_cell_matches_a_plain_run() {
        let spec = SweepSpec::new(blob_config());
        let cells = run_sweep(&spec).unwrap();
        assert_eq!(cells.len(), 1);
        let (train, test) = load_data(&spec.base.data).unwrap();
        let run = run_with_data(&spec.base, &train, &test, &mut ()).unwrap();
        assert_eq!(cells[0].ga, Some(run.final_metrics().ga));
        assert_eq!(cells[0].la, Some(run.final_metrics().la));
    }

    #[test]
    fn lr_axis_gives_two_rows() {
        let mut spec = SweepSpec::new(blob_config());
        spec.add_axis("lr", "0.1|0.0001");
        let cells = run_sweep(&spec).unwrap();
        let csv = summary_csv(&spec, &cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "rank,lr,repeats,ga,la,best,error");
        assert_eq!(lines.len(), 3);
        assert!(cells.iter().all(|c| c.ga.unwrap().is_finite()));
        assert!(lines[1].ends_with(",1,"));
    }

    #[test]
    fn failing_cell_is_recorded_not_fatal() {
        let mut spec = SweepSpec::new(blob_config());
        // 500 clients on 160 samples cannot be partitioned.
        spec.add_axis("clients", "2|500");
        let cells = run_sweep(&spec).unwrap();
        assert!(cells[0].ga.is_some());
        assert!(cells[1].error.is_some());
        let csv = summary_csv(&spec, &cells);
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("2,500,1,,,0,"), "{last}");
    }

    #[test]
    fn sorted_by_ga() {
        let spec = SweepSpec { axes: vec![("lr".into(), vec!["a".into(), "b".into(), "c".into()])], ..SweepSpec::new(blob_config()) };
        let cells = vec![
            SweepCell { values: vec!["a".into()], ga: Some(0.2), la: Some(0.1), error: None },
            SweepCell { values: vec!["b".into()], ga: None, la: None, error: Some("boom, bad".into()) },
            SweepCell { values: vec!["c".into()], ga: Some(0.9), la: Some(0.5), error: None },
        ];
        let csv = summary_csv(&spec, &cells);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows, vec!["1,c,1,0.9,0.5,1,", "2,a,1,0.2,0.1,0,", "3,b,1,,,0,boom  bad"]);
    }

    #[test]
    fn spec_file_and_cap() {
        let spec = SweepSpec::parse("dataset=blobs\naxis.lr=0.1|0.01\naxis.epochs=1|2|3\nrepeats=2\n").unwrap();
        assert_eq!(spec.cell_count(), 6);
        assert_eq!(spec.cells()[1], vec!["0.1".to_string(), "2".to_string()]);
        assert_eq!(spec.repeats, 2);
        let capped = SweepSpec { max_cells: 5, ..spec };
        assert!(matches!(capped.validate(), Err(Error::Config(_))));
        assert!(SweepSpec::parse("axis.lr=fast\n").unwrap().validate().is_err());
    }
}
