use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::{Dual, Real};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr(u32);

impl Expr {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Neg(Expr),
    Exp(Expr),
    Ln(Expr),
    Tanh(Expr),
    Pow(Expr, f64),
    Relu(Expr),
    Softplus(Expr),
}

impl Node {
    fn children(&self) -> [Option<Expr>; 2] {
        use Node::*;
        match *self {
            Const(_) | Var(_) => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => [Some(a), Some(b)],
            Neg(a) | Exp(a) | Ln(a) | Tanh(a) | Pow(a, _) | Relu(a) | Softplus(a) => [Some(a), None],
        }
    }
}

/// Append-only computation record.
///
/// Nodes are only ever pushed after their operands, so index order is a
/// topological order. Once built, a graph can be evaluated and differentiated
/// at any number of binding points, over any [`Real`] scalar.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    var_names: Vec<String>,
}

/// Values for the free variables of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings<R = f64> {
    values: HashMap<Expr, R>,
}

impl<R: Real> Bindings<R> {
    pub fn new() -> Self {
        Bindings { values: HashMap::new() }
    }

    pub fn with(mut self, var: Expr, value: R) -> Self {
        self.values.insert(var, value);
        self
    }

    pub fn set(&mut self, var: Expr, value: R) {
        self.values.insert(var, value);
    }

    pub fn get(&self, var: Expr) -> Option<R> {
        self.values.get(&var).copied()
    }
}

impl<R: Real> FromIterator<(Expr, R)> for Bindings<R> {
    fn from_iter<I: IntoIterator<Item = (Expr, R)>>(iter: I) -> Self {
        Bindings { values: iter.into_iter().collect() }
    }
}

/// Value, gradient and (optionally) Hessian of a scalar expression.
#[derive(Clone, Debug)]
pub struct DerivativeReport {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
    /// Largest relative `|H_ij - H_ji|` seen before symmetrization.
    pub asymmetry: f64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Expr {
        let id = u32::try_from(self.nodes.len()).expect("graph exceeds u32 nodes");
        self.nodes.push(node);
        Expr(id)
    }

    pub fn variable(&mut self, name: impl Into<String>) -> Expr {
        let slot = self.var_names.len();
        self.var_names.push(name.into());
        self.push(Node::Var(slot))
    }

    pub fn constant(&mut self, v: f64) -> Expr {
        self.push(Node::Const(v))
    }

    pub fn add(&mut self, a: Expr, b: Expr) -> Expr {
        self.push(Node::Add(a, b))
    }

    pub fn sub(&mut self, a: Expr, b: Expr) -> Expr {
        self.push(Node::Sub(a, b))
    }

    pub fn mul(&mut self, a: Expr, b: Expr) -> Expr {
        self.push(Node::Mul(a, b))
    }

    pub fn div(&mut self, a: Expr, b: Expr) -> Expr {
        self.push(Node::Div(a, b))
    }

    pub fn neg(&mut self, a: Expr) -> Expr {
        self.push(Node::Neg(a))
    }

    pub fn exp(&mut self, a: Expr) -> Expr {
        self.push(Node::Exp(a))
    }

    pub fn ln(&mut self, a: Expr) -> Expr {
        self.push(Node::Ln(a))
    }

    pub fn tanh(&mut self, a: Expr) -> Expr {
        self.push(Node::Tanh(a))
    }

    pub fn powf(&mut self, a: Expr, p: f64) -> Expr {
        self.push(Node::Pow(a, p))
    }

    pub fn relu(&mut self, a: Expr) -> Expr {
        self.push(Node::Relu(a))
    }

    pub fn softplus(&mut self, a: Expr) -> Expr {
        self.push(Node::Softplus(a))
    }

    pub fn square(&mut self, a: Expr) -> Expr {
        self.mul(a, a)
    }

    pub fn add_const(&mut self, a: Expr, c: f64) -> Expr {
        let c = self.constant(c);
        self.add(a, c)
    }

    pub fn scale(&mut self, a: Expr, c: f64) -> Expr {
        let c = self.constant(c);
        self.mul(c, a)
    }

    /// Left-folded sum; the empty sum is the constant zero.
    pub fn sum(&mut self, terms: &[Expr]) -> Expr {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    pub fn var_name(&self, var: Expr) -> Option<&str> {
        match self.nodes.get(var.index())? {
            Node::Var(slot) => Some(&self.var_names[*slot]),
            _ => None,
        }
    }

    fn reachable(&self, root: Expr) -> Vec<bool> {
        let mut mark = vec![false; root.index() + 1];
        mark[root.index()] = true;
        for i in (0..=root.index()).rev() {
            if !mark[i] {
                continue;
            }
            for c in self.nodes[i].children().into_iter().flatten() {
                mark[c.index()] = true;
            }
        }
        mark
    }

    fn forward<R: Real>(&self, root: Expr, bindings: &Bindings<R>, mark: &[bool]) -> Result<Vec<R>> {
        if root.index() >= self.nodes.len() {
            return Err(Error::Contract(format!("expression {} not in graph", root.index())));
        }
        let mut vals = vec![R::zero(); root.index() + 1];
        for i in 0..=root.index() {
            if !mark[i] {
                continue;
            }
            let v = |e: Expr| vals[e.index()];
            let domain = |op, arg: R| Error::Domain { node: i, op, arg: arg.value() };
            let out = match self.nodes[i] {
                Node::Const(c) => R::cst(c),
                Node::Var(slot) => bindings
                    .get(Expr(i as u32))
                    .ok_or_else(|| Error::UnboundVariable(self.var_names[slot].clone()))?,
                Node::Add(a, b) => v(a) + v(b),
                Node::Sub(a, b) => v(a) - v(b),
                Node::Mul(a, b) => v(a) * v(b),
                Node::Div(a, b) => {
                    if v(b).value() == 0.0 {
                        return Err(domain("div", v(b)));
                    }
                    v(a) / v(b)
                }
                Node::Neg(a) => -v(a),
                Node::Exp(a) => v(a).exp(),
                Node::Ln(a) => {
                    if v(a).value() <= 0.0 {
                        return Err(domain("ln", v(a)));
                    }
                    v(a).ln()
                }
                Node::Tanh(a) => v(a).tanh(),
                Node::Pow(a, p) => {
                    let x = v(a).value();
                    if (x < 0.0 && p.fract() != 0.0) || (x == 0.0 && p < 1.0) {
                        return Err(domain("pow", v(a)));
                    }
                    if p.fract() == 0.0 && p.abs() < 64.0 {
                        v(a).powi(p as i32)
                    } else {
                        v(a).powf(p)
                    }
                }
                Node::Relu(a) => v(a).relu(),
                Node::Softplus(a) => v(a).softplus(),
            };
            vals[i] = out;
        }
        Ok(vals)
    }

    /// Evaluates `root` at the given bindings.
    pub fn evaluate<R: Real>(&self, root: Expr, bindings: &Bindings<R>) -> Result<R> {
        let mark = self.reachable(root);
        Ok(self.forward(root, bindings, &mark)?[root.index()])
    }

    /// Reverse sweep: returns the value of `root` and `∂root/∂wrt[i]`.
    ///
    /// Variables in `wrt` that `root` does not depend on get a zero entry.
    pub fn gradient<R: Real>(&self, root: Expr, bindings: &Bindings<R>, wrt: &[Expr]) -> Result<(R, Vec<R>)> {
        let mark = self.reachable(root);
        let vals = self.forward(root, bindings, &mark)?;
        let mut adj = vec![R::zero(); root.index() + 1];
        adj[root.index()] = R::one();
        for i in (0..=root.index()).rev() {
            if !mark[i] {
                continue;
            }
            let g = adj[i];
            if g.is_zero() {
                continue;
            }
            let v = |e: Expr| vals[e.index()];
            match self.nodes[i] {
                Node::Const(_) | Node::Var(_) => {}
                Node::Add(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] += g;
                }
                Node::Sub(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] -= g;
                }
                Node::Mul(a, b) => {
                    let (va, vb) = (v(a), v(b));
                    adj[a.index()] += g * vb;
                    adj[b.index()] += g * va;
                }
                Node::Div(a, b) => {
                    let vb = v(b);
                    adj[a.index()] += g / vb;
                    adj[b.index()] -= g * vals[i] / vb;
                }
                Node::Neg(a) => adj[a.index()] -= g,
                Node::Exp(a) => adj[a.index()] += g * vals[i],
                Node::Ln(a) => {
                    let va = v(a);
                    adj[a.index()] += g / va;
                }
                Node::Tanh(a) => {
                    let t = vals[i];
                    adj[a.index()] += g * (R::one() - t * t);
                }
                Node::Pow(a, p) => {
                    let va = v(a);
                    let d = if p.fract() == 0.0 && p.abs() < 64.0 {
                        R::cst(p) * va.powi(p as i32 - 1)
                    } else {
                        R::cst(p) * va.powf(p - 1.0)
                    };
                    adj[a.index()] += g * d;
                }
                Node::Relu(a) => {
                    if v(a).value() > 0.0 {
                        adj[a.index()] += g;
                    }
                }
                Node::Softplus(a) => {
                    let s = v(a).sigmoid();
                    adj[a.index()] += g * s;
                }
            }
        }
        let grads = wrt
            .iter()
            .map(|w| if w.index() <= root.index() { adj[w.index()] } else { R::zero() })
            .collect();
        Ok((vals[root.index()], grads))
    }

    /// Dense Hessian over `wrt`, one forward-over-reverse sweep per column.
    pub fn hessian(&self, root: Expr, bindings: &Bindings<f64>, wrt: &[Expr]) -> Result<DerivativeReport> {
        let n = wrt.len();
        let (value, grad) = self.gradient(root, bindings, wrt)?;
        let mut h = DMatrix::zeros(n, n);
        for (j, &dir) in wrt.iter().enumerate() {
            let col = self.hessian_column(root, bindings, wrt, dir)?;
            for i in 0..n {
                h[(i, j)] = col[i];
            }
        }
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (h[(i, j)], h[(j, i)]);
                let scale = a.abs().max(b.abs()).max(1.0);
                asym = asym.max((a - b).abs() / scale);
                let m = 0.5 * (a + b);
                h[(i, j)] = m;
                h[(j, i)] = m;
            }
        }
        Ok(DerivativeReport { value, gradient: DVector::from_vec(grad), hessian: Some(h), asymmetry: asym })
    }

    /// `∂/∂dir ∇root` restricted to `wrt`.
    pub fn hessian_column(&self, root: Expr, bindings: &Bindings<f64>, wrt: &[Expr], dir: Expr) -> Result<Vec<f64>> {
        let lifted: Bindings<Dual<f64>> = bindings
            .values
            .iter()
            .map(|(&k, &v)| (k, Dual::new(v, if k == dir { 1.0 } else { 0.0 })))
            .collect();
        let (_, g) = self.gradient(root, &lifted, wrt)?;
        Ok(g.into_iter().map(|d| d.du).collect())
    }

    /// Value and gradient only.
    pub fn derivatives(&self, root: Expr, bindings: &Bindings<f64>, wrt: &[Expr]) -> Result<DerivativeReport> {
        let (value, grad) = self.gradient(root, bindings, wrt)?;
        Ok(DerivativeReport { value, gradient: DVector::from_vec(grad), hessian: None, asymmetry: 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluate_examples() {
        let mut g = Graph::new();
        let x = g.variable("x");
        let sq = g.square(x);
        assert_eq!(g.evaluate(sq, &Bindings::new().with(x, 3.0)).unwrap(), 9.0);

        let zero = g.constant(0.0);
        let e = g.exp(zero);
        assert_eq!(g.evaluate(e, &Bindings::<f64>::new()).unwrap(), 1.0);

        let t = g.tanh(x);
        let v = g.evaluate(t, &Bindings::new().with(x, 0.5)).unwrap();
        // series oracle: x - x^3/3 + 2x^5/15 - 17x^7/315 + 62x^9/2835 - ...
        let series: f64 = 0.5 - 0.5f64.powi(3) / 3.0 + 2.0 * 0.5f64.powi(5) / 15.0 - 17.0 * 0.5f64.powi(7) / 315.0
            + 62.0 * 0.5f64.powi(9) / 2835.0
            - 1382.0 * 0.5f64.powi(11) / 155925.0
            + 21844.0 * 0.5f64.powi(13) / 6081075.0;
        assert!((v - series).abs() < 1e-6);
        assert!((v - 0.462117157).abs() < 1e-9);
    }

    #[test]
    fn unbound_and_domain_errors() {
        let mut g = Graph::new();
        let x = g.variable("x");
        let y = g.variable("y");
        let s = g.add(x, y);
        match g.evaluate(s, &Bindings::new().with(x, 1.0)) {
            Err(Error::UnboundVariable(name)) => assert_eq!(name, "y"),
            other => panic!("expected unbound error, got {other:?}"),
        }
        let l = g.ln(x);
        match g.evaluate(l, &Bindings::new().with(x, -1.0)) {
            Err(Error::Domain { node, op, .. }) => {
                assert_eq!(node, l.index());
                assert_eq!(op, "ln");
            }
            other => panic!("expected domain error, got {other:?}"),
        }
        let zero = g.constant(0.0);
        let d = g.div(x, zero);
        assert!(matches!(g.evaluate(d, &Bindings::new().with(x, 1.0)), Err(Error::Domain { op: "div", .. })));
        // unrelated unbound variables do not matter
        let sq = g.square(x);
        assert_eq!(g.evaluate(sq, &Bindings::new().with(x, 2.0)).unwrap(), 4.0);
    }

    #[test]
    fn gradient_examples() {
        let mut g = Graph::new();
        let x = g.variable("x");
        let y = g.variable("y");
        let sq = g.square(x);
        let (_, d) = g.gradient(sq, &Bindings::new().with(x, 3.0), &[x]).unwrap();
        assert_eq!(d, vec![6.0]);

        let c = g.constant(4.2);
        let (_, d) = g.gradient(c, &Bindings::new().with(x, 3.0), &[x]).unwrap();
        assert_eq!(d, vec![0.0]);

        let x2y = g.mul(sq, y);
        let b = Bindings::new().with(x, 1.0).with(y, 2.0);
        let (v, d) = g.gradient(x2y, &b, &[x, y]).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(d, vec![4.0, 1.0]);
    }

    #[test]
    fn hessian_examples() {
        let mut g = Graph::new();
        let x = g.variable("x");
        let y = g.variable("y");
        let sq = g.square(x);
        let h = g.hessian(sq, &Bindings::new().with(x, -0.7), &[x]).unwrap();
        assert_eq!(h.hessian.unwrap()[(0, 0)], 2.0);

        let x2y = g.mul(sq, y);
        let b = Bindings::new().with(x, 1.0).with(y, 2.0);
        let h = g.hessian(x2y, &b, &[x, y]).unwrap().hessian.unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 0.0]));

        let lin = g.add(x, y);
        let h = g.hessian(lin, &b, &[x, y]).unwrap().hessian.unwrap();
        assert_eq!(h, DMatrix::zeros(2, 2));
    }
}
