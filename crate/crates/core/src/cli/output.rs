//! CSV field dumps and gnuplot-ready `.dat` files.

use std::io::{self, Write};

use crate::action::ActionEstimate;
use crate::solver::VectorField;

/// `x[,y],mode,value` rows, one per node and mode.
pub fn write_field_csv<W: Write>(w: &mut W, field: &VectorField) -> io::Result<()> {
    let grid = field.grid();
    let header = if grid.dim() == 1 { "x,mode,value" } else { "x,y,mode,value" };
    writeln!(w, "{header}")?;
    for i in 0..field.m() {
        for node in 0..grid.len() {
            let x = grid.coords(node);
            let coords: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{},{},{}", coords.join(","), i, field.get(i, node))?;
        }
    }
    Ok(())
}

/// Whitespace-separated columns `x [y] v_0 … v_{M-1}` under a `#` header;
/// 2-D fields leave a blank line between rows for `splot`.
pub fn write_field_dat<W: Write>(w: &mut W, field: &VectorField) -> io::Result<()> {
    let grid = field.grid();
    let mut cols: Vec<String> = if grid.dim() == 1 {
        vec!["x".into()]
    } else {
        vec!["x".into(), "y".into()]
    };
    cols.extend((0..field.m()).map(|i| format!("v_{i}")));
    writeln!(w, "# {}", cols.join(" "))?;
    let n = grid.points_per_axis();
    for node in 0..grid.len() {
        if grid.dim() == 2 && node > 0 && node % n == 0 {
            writeln!(w)?;
        }
        let mut row: Vec<String> = grid.coords(node).iter().map(|c| c.to_string()).collect();
        row.extend(field.at(node).iter().map(|v| v.to_string()));
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

/// `alpha mean stderr` per estimate.
pub fn write_action_series<W: Write>(w: &mut W, series: &[ActionEstimate]) -> io::Result<()> {
    writeln!(w, "# alpha mean stderr")?;
    for e in series {
        writeln!(w, "{} {} {}", e.alpha, e.mean, e.stderr)?;
    }
    Ok(())
}
