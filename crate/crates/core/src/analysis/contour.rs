use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CompiledField, ScalarField};
use crate::error::{Error, Result};
use crate::losses::linspace;

/// Ordered `(x, T)` vertices of one contour piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<(f64, f64)>,
}

/// Illinois variant of regula falsi on a bracket with `f(a)·f(b) < 0`.
fn illinois(f: &mut dyn FnMut(f64) -> Result<f64>, mut a: f64, mut fa: f64, mut b: f64, mut fb: f64) -> Result<f64> {
    let mut side = 0i8;
    for _ in 0..60 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c)?;
        if fc == 0.0 || (b - a).abs() < 1e-14 * (1.0 + c.abs()) {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Ok((a * fb - b * fa) / (fb - fa))
}

/// Zero level set of `value(x, y)` sampled on the tensor grid `xs × ys`.
///
/// Crossings on cell edges are refined with Illinois iterations on `value`
/// itself; ambiguous saddle cells are resolved by the cell-centre value.
pub fn marching_squares(
    xs: &[f64],
    ys: &[f64],
    value: &mut dyn FnMut(f64, f64) -> Result<f64>,
) -> Result<Vec<Polyline>> {
    let (nx, ny) = (xs.len(), ys.len());
    let mut grid = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            grid[j * nx + i] = value(xs[i], ys[j])?;
        }
    }
    let at = |i: usize, j: usize| grid[j * nx + i];
    let positive = |v: f64| v > 0.0;

    let mut segments: Vec<((usize, usize, u8), (usize, usize, u8))> = Vec::new();
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx.saturating_sub(1) {
            // corners counter-clockwise from bottom-left; edges bottom, right, top, left
            let c = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            let edges = [(i, j, 0u8), (i + 1, j, 1u8), (i, j + 1, 0u8), (i, j, 1u8)];
            let cut: Vec<usize> = (0..4).filter(|&e| positive(c[e]) != positive(c[(e + 1) % 4])).collect();
            match cut.len() {
                2 => segments.push((edges[cut[0]], edges[cut[1]])),
                4 => {
                    let centre = value(0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]))?;
                    if positive(centre) == positive(c[0]) {
                        segments.push((edges[0], edges[1]));
                        segments.push((edges[2], edges[3]));
                    } else {
                        segments.push((edges[3], edges[0]));
                        segments.push((edges[1], edges[2]));
                    }
                }
                _ => {}
            }
        }
    }

    let mut adj: HashMap<(usize, usize, u8), Vec<usize>> = HashMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        adj.entry(*a).or_default().push(s);
        adj.entry(*b).or_default().push(s);
    }
    // edge key: (i, j, dir) with dir 0 = horizontal (i→i+1), 1 = vertical (j→j+1)
    let mut crossing: HashMap<(usize, usize, u8), (f64, f64)> = HashMap::new();
    let mut edge_point = |i: usize, j: usize, dir: u8| -> Result<(f64, f64)> {
        if let Some(p) = crossing.get(&(i, j, dir)) {
            return Ok(*p);
        }
        let p = if dir == 0 {
            let y = ys[j];
            let x = illinois(&mut |x| value(x, y), xs[i], at(i, j), xs[i + 1], at(i + 1, j))?;
            (x, y)
        } else {
            let x = xs[i];
            let y = illinois(&mut |y| value(x, y), ys[j], at(i, j), ys[j + 1], at(i, j + 1))?;
            (x, y)
        };
        crossing.insert((i, j, dir), p);
        Ok(p)
    };

    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    // start from open ends first so chains are not split
    order.sort_by_key(|&s| {
        let (a, b) = segments[s];
        usize::from(adj[&a].len() != 1 && adj[&b].len() != 1)
    });
    for start in order {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let (first, mut cur) = if adj[&a].len() == 1 { (a, b) } else { (b, a) };
        let mut keys = vec![first, cur];
        loop {
            let next = adj[&cur].iter().copied().find(|&s| !used[s]);
            let Some(s) = next else { break };
            used[s] = true;
            let (p, q) = segments[s];
            cur = if p == cur { q } else { p };
            keys.push(cur);
        }
        let points = keys.into_iter().map(|k| edge_point(k.0, k.1, k.2)).collect::<Result<Vec<_>>>()?;
        lines.push(Polyline { points });
    }
    Ok(lines)
}

/// Zero contour of `∂²F/∂x²` over `x_range × t_range` for a one-dimensional field.
pub fn curvature_zero_contour<F: ScalarField + ?Sized>(
    field: &F,
    x_range: (f64, f64),
    t_range: (f64, f64),
    resolution: usize,
) -> Result<Vec<Polyline>> {
    if resolution < 16 {
        return Err(Error::Contract(format!("contour resolution must be at least 16, got {resolution}")));
    }
    if field.dim() != 1 {
        return Err(Error::Dimension { expected: 1, got: field.dim() });
    }
    if !(x_range.0 < x_range.1 && t_range.0 < t_range.1) || ![x_range.0, x_range.1, t_range.0, t_range.1].iter().all(|v| v.is_finite()) {
        return Err(Error::Contract("contour ranges must be finite and non-empty".into()));
    }
    let compiled = CompiledField::new(field)?;
    let xs = linspace(x_range.0, x_range.1, resolution);
    let ts = linspace(t_range.0, t_range.1, resolution);
    marching_squares(&xs, &ts, &mut |x, t| compiled.curvature(&[x], t, 0))
}
