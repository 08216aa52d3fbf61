use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::seed::derive_seed;

/// Axes of the sensitivity lattice: real minority samples kept (`m_r`) and
/// synthetic samples added (`m_g`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub m_r: Vec<usize>,
    pub m_g: Vec<usize>,
}

/// One train-augment-evaluate job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRequest {
    pub m_r: usize,
    pub m_g: usize,
    pub fold: usize,
    pub seed: u64,
}

/// Produces the minority-class AP for one cell and fold.
pub trait CellPipeline: Sync {
    fn run(&self, req: CellRequest) -> Result<f64, String>;
}

impl<F> CellPipeline for F
where
    F: Fn(CellRequest) -> Result<f64, String> + Sync,
{
    fn run(&self, req: CellRequest) -> Result<f64, String> {
        self(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok { ap: f64, per_fold: Vec<f64> },
    Failed { error: String },
}

impl CellOutcome {
    pub fn ap(&self) -> Option<f64> {
        match self {
            CellOutcome::Ok { ap, .. } => Some(*ap),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub m_r: Vec<usize>,
    pub m_g: Vec<usize>,
    /// Row-major: `cells[i][j]` is `(m_r[i], m_g[j])`.
    pub cells: Vec<Vec<CellOutcome>>,
}

impl ExperimentGrid {
    pub fn cell_count(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Header `m_r\m_g,<m_g...>`, then one row per `m_r`. Failed cells read `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m_r\\m_g");
        for g in &self.m_g {
            s.push_str(&format!(",{g}"));
        }
        s.push('\n');
        for (r, row) in self.m_r.iter().zip(&self.cells) {
            s.push_str(&r.to_string());
            for c in row {
                match c.ap() {
                    Some(ap) => s.push_str(&format!(",{ap:.6}")),
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Static heat-map of the grid.
    pub fn to_svg(&self) -> String {
        let cell = 64;
        let (ox, oy) = (80, 40);
        let w = ox + cell * self.m_g.len() + 20;
        let h = oy + cell * self.m_r.len() + 40;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        s.push_str(&format!("<text x=\"{ox}\" y=\"16\">AP by m_r (rows) and m_g (columns)</text>\n"));
        for (j, g) in self.m_g.iter().enumerate() {
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{g}</text>\n",
                ox + j * cell + cell / 2,
                oy - 6
            ));
        }
        for (i, (r, row)) in self.m_r.iter().zip(&self.cells).enumerate() {
            let y = oy + i * cell;
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{r}</text>\n",
                ox - 8,
                y + cell / 2 + 4
            ));
            for (j, c) in row.iter().enumerate() {
                let x = ox + j * cell;
                let (fill, label) = match c.ap() {
                    Some(ap) => {
                        let v = (ap.clamp(0.0, 1.0) * 255.0).round() as u8;
                        (format!("rgb({},{},{})", 255 - v, 255 - v / 2, 255), format!("{ap:.3}"))
                    }
                    None => ("rgb(200,200,200)".to_string(), "NA".to_string()),
                };
                s.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"white\"/>\n"
                ));
                s.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
                    x + cell / 2,
                    y + cell / 2 + 4
                ));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Runs every `(m_r, m_g)` cell over `folds` folds and averages the AP.
///
/// A failing fold marks its cell as failed; other cells still run. Each
/// cell and fold gets a seed derived from `seed`, its grid position and the
/// fold index, so the schedule does not affect results.
pub fn run_sensitivity(
    spec: &GridSpec,
    pipeline: &dyn CellPipeline,
    folds: usize,
    seed: u64,
) -> Result<ExperimentGrid, EvalError> {
    if spec.m_r.is_empty() || spec.m_g.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if folds == 0 {
        return Err(EvalError::NoFolds);
    }
    let coords: Vec<(usize, usize)> = (0..spec.m_r.len())
        .flat_map(|i| (0..spec.m_g.len()).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<CellOutcome> = coords
        .par_iter()
        .map(|&(i, j)| {
            let cell_index = (i * spec.m_g.len() + j) as u64;
            let mut per_fold = Vec::with_capacity(folds);
            for fold in 0..folds {
                let req = CellRequest {
                    m_r: spec.m_r[i],
                    m_g: spec.m_g[j],
                    fold,
                    seed: derive_seed(seed, "sensitivity/cell", cell_index * 1024 + fold as u64),
                };
                match pipeline.run(req) {
                    Ok(ap) => per_fold.push(ap),
                    Err(error) => {
                        log::warn!("cell m_r={} m_g={} fold {fold} failed: {error}", req.m_r, req.m_g);
                        return CellOutcome::Failed { error };
                    }
                }
            }
            let ap = per_fold.iter().sum::<f64>() / folds as f64;
            CellOutcome::Ok { ap, per_fold }
        })
        .collect();
    let mut it = outcomes.into_iter();
    let cells = (0..spec.m_r.len())
        .map(|_| it.by_ref().take(spec.m_g.len()).collect())
        .collect();
    Ok(ExperimentGrid {
        m_r: spec.m_r.clone(),
        m_g: spec.m_g.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec {
            m_r: vec![50, 100, 150, 200, 250],
            m_g: vec![0, 400, 800, 1200, 1600],
        }
    }

    #[test]
    fn five_by_five_has_25_cells() {
        let pipe = |req: CellRequest| Ok((req.m_r + req.m_g) as f64 / 2000.0);
        let g = run_sensitivity(&spec(), &pipe, 3, 1).unwrap();
        assert_eq!(g.cell_count(), 25);
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(csv.lines().next().unwrap(), "m_r\\m_g,0,400,800,1200,1600");
        assert!(g.to_svg().contains("<svg"));
    }

    #[test]
    fn failures_are_recorded_and_run_continues() {
        let pipe = |req: CellRequest| {
            if req.m_r == 100 && req.m_g == 800 {
                Err("boom".to_string())
            } else {
                Ok(0.5)
            }
        };
        let g = run_sensitivity(&spec(), &pipe, 2, 1).unwrap();
        assert_eq!(g.cells[1][2], CellOutcome::Failed { error: "boom".into() });
        assert_eq!(g.cells.iter().flatten().filter(|c| c.ap().is_some()).count(), 24);
        assert!(g.to_csv().lines().nth(2).unwrap().contains(",NA"));
    }

    #[test]
    fn column_is_deterministic() {
        let s = GridSpec {
            m_r: spec().m_r,
            m_g: vec![400],
        };
        let pipe = |req: CellRequest| Ok((req.seed % 1000) as f64 / 1000.0);
        let a = run_sensitivity(&s, &pipe, 3, 9).unwrap();
        let b = run_sensitivity(&s, &pipe, 3, 9).unwrap();
        assert_eq!(a.cell_count(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_grid_rejected() {
        let pipe = |_: CellRequest| Ok(0.0);
        let s = GridSpec { m_r: vec![], m_g: vec![1] };
        assert!(matches!(run_sensitivity(&s, &pipe, 1, 0), Err(EvalError::EmptyGrid)));
    }
}
