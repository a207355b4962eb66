//! Decision-region comparison of original, unlearned and retrained models on
//! a dense grid over `[-1, 1]^2`.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LO: f64 = -1.0;
pub const HI: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    /// Unlearned and retrained models agree.
    Agree,
    /// Unlearned keeps the original label, retrained differs.
    Under,
    /// Retrained keeps the original label, unlearned differs.
    Over,
    Other,
}

impl RegionClass {
    pub fn classify(original: usize, unlearned: usize, retrained: usize) -> Self {
        if unlearned == retrained {
            RegionClass::Agree
        } else if unlearned == original {
            RegionClass::Under
        } else if retrained == original {
            RegionClass::Over
        } else {
            RegionClass::Other
        }
    }

    fn colour(self) -> &'static str {
        match self {
            RegionClass::Agree => "#f2f2f2",
            RegionClass::Under => "#b2182b",
            RegionClass::Over => "#1b7837",
            RegionClass::Other => "#762a83",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            RegionClass::Agree => "agree",
            RegionClass::Under => "under",
            RegionClass::Over => "over",
            RegionClass::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub resolution: usize,
    /// Row-major, row 0 at `x2 = LO`.
    pub cells: Vec<RegionClass>,
    pub unlearned_labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub agree: usize,
    pub under: usize,
    pub over: usize,
    pub other: usize,
}

/// Centre of grid cell `i` along one axis.
pub fn cell_centre(i: usize, resolution: usize) -> f64 {
    LO + (HI - LO) * (i as f64 + 0.5) / resolution as f64
}

fn grid_labels(model: &ParamModel, resolution: usize) -> Result<Vec<usize>> {
    let mut flat = Vec::with_capacity(resolution * resolution * 2);
    for row in 0..resolution {
        for col in 0..resolution {
            flat.push(cell_centre(col, resolution));
            flat.push(cell_centre(row, resolution));
        }
    }
    model.predict_labels(&Tensor::new(vec![resolution * resolution, 2], flat)?)
}

pub fn region_map(original: &ParamModel, unlearned: &ParamModel, retrained: &ParamModel, resolution: usize) -> Result<RegionMap> {
    if resolution == 0 {
        return Err(Error::InvalidConfig("grid resolution must be positive".into()));
    }
    for m in [original, unlearned, retrained] {
        if m.architecture().input_dim() != 2 {
            return Err(Error::ShapeMismatch("region maps need 2-D inputs".into()));
        }
    }
    let o = grid_labels(original, resolution)?;
    let u = grid_labels(unlearned, resolution)?;
    let r = grid_labels(retrained, resolution)?;
    let cells = (0..o.len()).map(|k| RegionClass::classify(o[k], u[k], r[k])).collect();
    Ok(RegionMap { resolution, cells, unlearned_labels: u })
}

impl RegionMap {
    pub fn counts(&self) -> RegionCounts {
        let mut c = RegionCounts::default();
        for cell in &self.cells {
            match cell {
                RegionClass::Agree => c.agree += 1,
                RegionClass::Under => c.under += 1,
                RegionClass::Over => c.over += 1,
                RegionClass::Other => c.other += 1,
            }
        }
        c
    }

    /// Area of the square where unlearned and retrained models disagree.
    pub fn disagreement_area(&self) -> f64 {
        let c = self.counts();
        let cell_area = ((HI - LO) / self.resolution as f64).powi(2);
        (c.under + c.over + c.other) as f64 * cell_area
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "col", "x1", "x2", "class"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (k, cell) in self.cells.iter().enumerate() {
            let (row, col) = (k / self.resolution, k % self.resolution);
            out.write_record([
                row.to_string(),
                col.to_string(),
                cell_centre(col, self.resolution).to_string(),
                cell_centre(row, self.resolution).to_string(),
                cell.tag().to_string(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Static SVG; runs of equal cells along a row become one rectangle.
    /// `points` are overlaid as `(x1, x2, member)` markers.
    pub fn to_svg(&self, points: &[(f64, f64, bool)]) -> String {
        let size = 600.0;
        let cell = size / self.resolution as f64;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" viewBox="0 0 {size} {}">"#, size + 30.0, size + 30.0);
        for row in 0..self.resolution {
            let y = size - (row + 1) as f64 * cell;
            let mut col = 0;
            while col < self.resolution {
                let class = self.cells[row * self.resolution + col];
                let start = col;
                while col < self.resolution && self.cells[row * self.resolution + col] == class {
                    col += 1;
                }
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{y:.3}" width="{:.3}" height="{cell:.3}" fill="{}" shape-rendering="crispEdges"/>"#,
                    start as f64 * cell,
                    (col - start) as f64 * cell,
                    class.colour()
                );
            }
        }
        let to_px = |v: f64| (v - LO) / (HI - LO) * size;
        for &(x1, x2, member) in points {
            let fill = if member { "#000000" } else { "#ffffff" };
            let _ = writeln!(s, r##"<circle cx="{:.3}" cy="{:.3}" r="3" fill="{fill}" stroke="#000000"/>"##, to_px(x1), size - to_px(x2));
        }
        let mut x = 5.0;
        for class in [RegionClass::Agree, RegionClass::Under, RegionClass::Over, RegionClass::Other] {
            let _ = writeln!(s, r##"<rect x="{x}" y="{}" width="12" height="12" fill="{}" stroke="#000000"/>"##, size + 9.0, class.colour());
            let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif">{}</text>"#, x + 16.0, size + 20.0, class.tag());
            x += 90.0;
        }
        s.push_str("</svg>\n");
        s
    }
}
