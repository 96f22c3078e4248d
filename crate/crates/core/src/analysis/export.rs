use std::fmt::Write;

use super::{IsobarSample, Polyline, Stability, StationaryPoint};

fn tag(s: Stability) -> &'static str {
    match s {
        Stability::Stable => "stable",
        Stability::Unstable => "unstable",
        Stability::Marginal => "marginal",
    }
}

/// `T,x…,stability` rows, 17 significant digits.
pub fn stationary_csv(rows: &[(f64, StationaryPoint)]) -> String {
    let dim = rows.first().map_or(1, |r| r.1.x.len());
    let mut out = String::from("T");
    for i in 0..dim {
        if dim == 1 {
            out.push_str(",x");
        } else {
            let _ = write!(out, ",x{}", i + 1);
        }
    }
    out.push_str(",stability\n");
    for (t, p) in rows {
        let _ = write!(out, "{t:.16e}");
        for v in &p.x {
            let _ = write!(out, ",{v:.16e}");
        }
        let _ = writeln!(out, ",{}", tag(p.stability));
    }
    out
}

/// `line,x,T` rows.
pub fn contour_csv(lines: &[Polyline]) -> String {
    let mut out = String::from("line,x,T\n");
    for (i, l) in lines.iter().enumerate() {
        for (x, t) in &l.points {
            let _ = writeln!(out, "{i},{x:.16e},{t:.16e}");
        }
    }
    out
}

/// `T,V` rows; temperatures without a root are written with an empty `V`.
pub fn isobar_csv(samples: &[IsobarSample]) -> String {
    let mut out = String::from("T,V\n");
    for s in samples {
        match s.v {
            Some(v) => {
                let _ = writeln!(out, "{:.16e},{v:.16e}", s.t);
            }
            None => {
                let _ = writeln!(out, "{:.16e},", s.t);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layouts() {
        let rows = vec![(1.0, StationaryPoint { x: vec![0.5], stability: Stability::Stable, grad_norm: 0.0 })];
        let s = stationary_csv(&rows);
        assert!(s.starts_with("T,x,stability\n1.0000000000000000e0,5.0000000000000000e-1,stable"));
        let c = isobar_csv(&[IsobarSample { t: 2.0, v: None, roots: vec![] }]);
        assert_eq!(c, "T,V\n2.0000000000000000e0,\n");
        let l = contour_csv(&[Polyline { points: vec![(0.0, 2.0)] }]);
        assert_eq!(l.lines().count(), 2);
    }
}
