//! Deterministic SMILES writer over a molecular graph: depth-first from atom
//! 0, branches in parentheses, ring closures as digits.

use crate::graph2d::MolGraph;

/// Element symbols indexed by the first atom feature.
pub const ELEMENTS: [&str; 10] = ["C", "N", "O", "S", "F", "Cl", "Br", "P", "B", "I"];

fn bond_symbol(t: usize) -> &'static str {
    match t {
        1 => "=",
        2 => "#",
        3 => ":",
        _ => "",
    }
}

struct Writer<'a> {
    adj: Vec<Vec<(usize, usize)>>,
    graph: &'a MolGraph,
    visited: Vec<bool>,
    children: Vec<Vec<(usize, usize)>>,
    closures: Vec<Vec<(usize, usize)>>,
    open: Vec<Option<(usize, usize)>>,
    out: String,
}

impl Writer<'_> {
    fn plan(&mut self, u: usize, parent: Option<usize>) {
        self.visited[u] = true;
        for i in 0..self.adj[u].len() {
            let (v, t) = self.adj[u][i];
            if Some(v) == parent {
                continue;
            }
            if self.visited[v] {
                // each back edge is seen once from its deeper endpoint
                if !self.closures[v].iter().any(|&(w, _)| w == u) {
                    self.closures[u].push((v, t));
                    self.closures[v].push((u, t));
                }
            } else {
                self.children[u].push((v, t));
                self.plan(v, Some(u));
            }
        }
    }

    fn write(&mut self, u: usize) {
        let sym = self.graph.atom_features[u].first().and_then(|&e| ELEMENTS.get(e)).copied().unwrap_or("*");
        self.out.push_str(sym);
        for &(v, t) in &self.closures[u].clone() {
            let existing = self.open.iter().position(|o| *o == Some((v, u)));
            match existing {
                Some(d) => {
                    self.open[d] = None;
                    push_digit(&mut self.out, d + 1);
                }
                None => {
                    let d = self.open.iter().position(Option::is_none).unwrap_or_else(|| {
                        self.open.push(None);
                        self.open.len() - 1
                    });
                    self.open[d] = Some((u, v));
                    self.out.push_str(bond_symbol(t));
                    push_digit(&mut self.out, d + 1);
                }
            }
        }
        let kids = self.children[u].clone();
        for (i, &(v, t)) in kids.iter().enumerate() {
            let branch = i + 1 < kids.len();
            if branch {
                self.out.push('(');
            }
            self.out.push_str(bond_symbol(t));
            self.write(v);
            if branch {
                self.out.push(')');
            }
        }
    }
}

fn push_digit(s: &mut String, d: usize) {
    if d < 10 {
        s.push_str(&d.to_string());
    } else {
        s.push_str(&format!("%{d:02}"));
    }
}

/// SMILES string for `graph`; components are joined with `.`.
pub fn write_smiles(graph: &MolGraph) -> String {
    let n = graph.num_atoms();
    let mut adj = vec![Vec::new(); n];
    for (u, v, t) in graph.bonds() {
        adj[u].push((v, t));
        adj[v].push((u, t));
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    let mut w = Writer {
        adj,
        graph,
        visited: vec![false; n],
        children: vec![Vec::new(); n],
        closures: vec![Vec::new(); n],
        open: Vec::new(),
        out: String::new(),
    };
    for root in 0..n {
        if w.visited[root] {
            continue;
        }
        if root > 0 {
            w.out.push('.');
        }
        w.plan(root, None);
        w.write(root);
    }
    w.out
}
