//! Labelled trees: enumeration, Hamiltonian tree values, subgraph detection
//! and the node/line counting bounds.
//!
//! Trees are stored in canonical form: the children of every node are kept
//! sorted, so structural equality is equivalence of trees. A tree may carry
//! one entering stub, the external entering line of a self-energy structure.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::lindstedt::SolutionSeries;
use crate::model::{c, factorial, ForcingField, Mode, SystemSpec, TrigPoly, I};
use crate::smalldiv::ScaleProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Comp {
    Beta,
    B,
}

impl Comp {
    pub fn index(self) -> usize {
        match self {
            Comp::Beta => 0,
            Comp::B => 1,
        }
    }
}

/// Line component in the Hamiltonian framework; Φ and Γ occur on root lines only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum HamLabel {
    Beta,
    B,
    Phi,
    Gamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum LineLabel {
    Ham(HamLabel),
    Gen { e: Comp, u: Comp },
}

impl LineLabel {
    /// Component seen by the node the line enters.
    pub fn e(self) -> Comp {
        match self {
            LineLabel::Ham(HamLabel::Beta) | LineLabel::Ham(HamLabel::Phi) => Comp::Beta,
            LineLabel::Ham(_) => Comp::B,
            LineLabel::Gen { e, .. } => e,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Framework {
    General,
    Hamiltonian,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tree {
    pub line: LineLabel,
    /// Momentum of the line; on lines above a stub this is the part ν⁰ not
    /// carried by the stub.
    pub momentum: Mode,
    pub mode: Mode,
    pub comp: Comp,
    pub order: u8,
    pub stub: Option<Comp>,
    pub children: Vec<Rc<Tree>>,
}

impl Tree {
    pub fn total_order(&self) -> usize {
        self.order as usize + self.children.iter().map(|c| c.total_order()).sum::<usize>()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.node_count()).sum::<usize>()
    }

    pub fn has_stub(&self) -> bool {
        self.stub.is_some() || self.children.iter().any(|c| c.has_stub())
    }

    /// Entering lines with e-component β and B, stub included.
    pub fn pq(&self) -> (usize, usize) {
        let mut p = 0;
        let mut q = 0;
        for e in self.children.iter().map(|c| c.line.e()).chain(self.stub) {
            match e {
                Comp::Beta => p += 1,
                Comp::B => q += 1,
            }
        }
        (p, q)
    }

    /// Number of orderings of the children collapsed into this class:
    /// p!q! over the factorials of the multiplicities of identical subtrees.
    pub fn weight(&self) -> f64 {
        let (p, q) = self.pq();
        let mut w = factorial(p) * factorial(q);
        let mut i = 0;
        while i < self.children.len() {
            let mut j = i;
            while j < self.children.len() && self.children[j] == self.children[i] {
                j += 1;
            }
            w /= factorial(j - i);
            i = j;
        }
        w
    }

    pub fn encode(&self) -> String {
        let line = match self.line {
            LineLabel::Ham(h) => format!("{h:?}"),
            LineLabel::Gen { e, u } => format!("{e:?}{u:?}"),
        };
        let stub = match self.stub {
            Some(e) => format!("*{e:?}"),
            None => String::new(),
        };
        let kids: Vec<String> = self.children.iter().map(|c| c.encode()).collect();
        format!(
            "[{line}{:?}|{:?}{:?}k{}{stub}({})]",
            self.momentum,
            self.comp,
            self.mode,
            self.order,
            kids.join(",")
        )
    }
}

fn make_tree(
    line: LineLabel,
    momentum: Mode,
    mode: Mode,
    comp: Comp,
    order: u8,
    stub: Option<Comp>,
    mut children: Vec<Rc<Tree>>,
) -> Rc<Tree> {
    children.sort();
    Rc::new(Tree { line, momentum, mode, comp, order, stub, children })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree budget exceeded: more than {cap} trees")]
    Budget { cap: usize },
    #[error("spec has no Hamiltonian table")]
    NotHamiltonian,
    #[error("momentum {nu:?} with |omega.nu| = {value:e} lies below the scale profile")]
    BelowProfile { nu: Mode, value: f64 },
}

#[derive(Clone, Debug)]
pub struct EnumOptions {
    pub framework: Framework,
    /// Forbid nodes with ν_v = 0 and one entering line.
    pub renormalised: bool,
    /// Restrict general-framework lines to e = u.
    pub diagonal: bool,
    /// Require ν⁰ ≠ 0 on lines above a stub.
    pub path_nonzero: bool,
    /// Walk candidate children in reverse order.
    pub reverse: bool,
    pub cap: usize,
}

impl EnumOptions {
    pub fn hamiltonian() -> EnumOptions {
        EnumOptions {
            framework: Framework::Hamiltonian,
            renormalised: false,
            diagonal: false,
            path_nonzero: true,
            reverse: false,
            cap: 5_000_000,
        }
    }

    /// Renormalised trees of the general framework.
    pub fn general() -> EnumOptions {
        EnumOptions {
            framework: Framework::General,
            renormalised: true,
            diagonal: false,
            path_nonzero: false,
            reverse: false,
            cap: 5_000_000,
        }
    }

    /// Plain general-framework expansion with diagonal propagators.
    pub fn general_plain() -> EnumOptions {
        EnumOptions {
            framework: Framework::General,
            renormalised: false,
            diagonal: true,
            path_nonzero: true,
            reverse: false,
            cap: 5_000_000,
        }
    }
}

type Key = (LineLabel, Mode, usize, Option<Comp>, bool);

struct Candidates {
    trees: Vec<Rc<Tree>>,
    orders: Vec<usize>,
    by_order_mode: HashMap<(usize, Mode), Vec<usize>>,
}

struct NodeOpt {
    comp: Comp,
    order: u8,
    modes: Vec<Mode>,
    labels: Vec<LineLabel>,
    min_q: usize,
}

pub struct Enumerator {
    opts: EnumOptions,
    d: usize,
    modes_beta: Vec<Mode>,
    modes_b: Vec<Mode>,
    sums: Vec<Vec<Mode>>,
    memo: HashMap<Key, Rc<Vec<Rc<Tree>>>>,
    cands: HashMap<(Vec<LineLabel>, usize), Rc<Candidates>>,
    count: usize,
}

impl Enumerator {
    /// Node modes are drawn from f (Hamiltonian) or from F and G (general).
    pub fn new(spec: &SystemSpec, opts: EnumOptions) -> Result<Enumerator, TreeError> {
        let (mb, mbb): (Vec<Mode>, Vec<Mode>) = match opts.framework {
            Framework::Hamiltonian => {
                let f = spec.hamiltonian.as_ref().ok_or(TreeError::NotHamiltonian)?;
                let m: Vec<Mode> = f.modes().cloned().collect();
                (m.clone(), m)
            }
            Framework::General => (spec.big_f.modes().cloned().collect(), spec.big_g.modes().cloned().collect()),
        };
        Ok(Enumerator::from_modes(spec.d, mb, mbb, opts))
    }

    pub fn from_modes(d: usize, modes_beta: Vec<Mode>, modes_b: Vec<Mode>, opts: EnumOptions) -> Enumerator {
        let mut all: Vec<Mode> = modes_beta.iter().chain(modes_b.iter()).cloned().collect();
        all.sort();
        all.dedup();
        Enumerator {
            opts,
            d,
            modes_beta,
            modes_b,
            sums: vec![vec![Mode::zero(d)]],
            memo: HashMap::new(),
            cands: HashMap::new(),
            count: 0,
        }
        .with_modes(all)
    }

    fn with_modes(mut self, all: Vec<Mode>) -> Enumerator {
        self.sums.push(all);
        self
    }

    /// Momenta reachable by a subtree of order j.
    fn sums(&mut self, j: usize) -> Vec<Mode> {
        while self.sums.len() <= j {
            let last = self.sums.last().unwrap().clone();
            let one = self.sums[1].clone();
            let mut next: BTreeSet<Mode> = BTreeSet::new();
            for a in &last {
                for b in &one {
                    next.insert(a.add(b));
                }
            }
            self.sums.push(next.into_iter().collect());
        }
        self.sums[j].clone()
    }

    pub fn framework(&self) -> Framework {
        self.opts.framework
    }

    pub fn tree_count(&self) -> usize {
        self.count
    }

    fn all_labels(&self) -> Vec<LineLabel> {
        match self.opts.framework {
            Framework::Hamiltonian => vec![LineLabel::Ham(HamLabel::Beta), LineLabel::Ham(HamLabel::B)],
            Framework::General => {
                let mut v = Vec::new();
                for e in [Comp::Beta, Comp::B] {
                    for u in [Comp::Beta, Comp::B] {
                        if !self.opts.diagonal || e == u {
                            v.push(LineLabel::Gen { e, u });
                        }
                    }
                }
                v
            }
        }
    }

    fn b_labels(&self) -> Vec<LineLabel> {
        self.all_labels().into_iter().filter(|l| l.e() == Comp::B).collect()
    }

    fn node_options(&self, line: LineLabel, nu: &Mode, stub: Option<Comp>) -> Vec<NodeOpt> {
        let zero = vec![Mode::zero(self.d)];
        let beta_nodes = |s: &Self| {
            vec![
                NodeOpt { comp: Comp::Beta, order: 1, modes: s.modes_beta.clone(), labels: s.all_labels(), min_q: 0 },
                NodeOpt { comp: Comp::Beta, order: 0, modes: zero.clone(), labels: s.b_labels(), min_q: 1 },
            ]
        };
        let b_node = |s: &Self| NodeOpt {
            comp: Comp::B,
            order: 1,
            modes: s.modes_b.clone(),
            labels: s.all_labels(),
            min_q: 0,
        };
        match line {
            LineLabel::Ham(HamLabel::Beta) | LineLabel::Ham(HamLabel::Phi) => beta_nodes(self),
            LineLabel::Ham(HamLabel::Gamma) => vec![b_node(self)],
            LineLabel::Ham(HamLabel::B) => {
                let mut v = vec![b_node(self)];
                if nu.is_zero() && stub.is_none() {
                    v.push(NodeOpt { comp: Comp::B, order: 0, modes: zero, labels: self.b_labels(), min_q: 2 });
                }
                v
            }
            LineLabel::Gen { u: Comp::Beta, .. } => beta_nodes(self),
            LineLabel::Gen { u: Comp::B, .. } => vec![b_node(self)],
        }
    }

    fn momentum_allowed(&self, line: LineLabel, nu: &Mode, stub: Option<Comp>, root: bool) -> bool {
        match line {
            LineLabel::Ham(HamLabel::Beta) => !nu.is_zero(),
            LineLabel::Ham(HamLabel::B) => stub.is_none() || !nu.is_zero(),
            LineLabel::Ham(_) => nu.is_zero(),
            LineLabel::Gen { .. } => {
                if root {
                    true
                } else if stub.is_some() {
                    !self.opts.path_nonzero || !nu.is_zero()
                } else {
                    !nu.is_zero()
                }
            }
        }
    }

    /// Trees with the given root line, momentum, order and stub.
    pub fn trees(&mut self, line: LineLabel, nu: &Mode, k: usize, stub: Option<Comp>) -> Result<Rc<Vec<Rc<Tree>>>, TreeError> {
        self.gen(line, nu, k, stub, true)
    }

    /// Self-energy structures with exit component u and entering stub e.
    pub fn self_energy(&mut self, u: Comp, e: Comp, k: usize) -> Result<Rc<Vec<Rc<Tree>>>, TreeError> {
        let line = match self.opts.framework {
            Framework::Hamiltonian => LineLabel::Ham(if u == Comp::Beta { HamLabel::Phi } else { HamLabel::Gamma }),
            Framework::General => LineLabel::Gen { e: u, u },
        };
        let zero = Mode::zero(self.d);
        self.gen(line, &zero, k, Some(e), true)
    }

    fn gen(&mut self, line: LineLabel, nu: &Mode, k: usize, stub: Option<Comp>, root: bool) -> Result<Rc<Vec<Rc<Tree>>>, TreeError> {
        let key: Key = (line, nu.clone(), k, stub, root);
        if let Some(v) = self.memo.get(&key) {
            return Ok(v.clone());
        }
        let mut out: Vec<Rc<Tree>> = Vec::new();
        if self.momentum_allowed(line, nu, stub, root) && (k > 0 || stub.is_some()) {
            for opt in self.node_options(line, nu, stub) {
                if (opt.order as usize) > k {
                    continue;
                }
                let r = k - opt.order as usize;
                for mode in &opt.modes {
                    let mu = nu.sub(mode);
                    let single_ok = opt.min_q < 2 && !(self.opts.renormalised && mode.is_zero());
                    let max_child = if opt.order == 0 && !single_ok { r.saturating_sub(1) } else { r };
                    let mut sets: Vec<(Option<Comp>, Vec<Rc<Tree>>)> = Vec::new();
                    match stub {
                        None => {
                            for s in self.multisets(&opt.labels, r, max_child, &mu)? {
                                sets.push((None, s));
                            }
                        }
                        Some(e) => {
                            if opt.min_q == 0 || e == Comp::B {
                                for s in self.multisets(&opt.labels, r, max_child, &mu)? {
                                    sets.push((Some(e), s));
                                }
                            }
                            let stub_child_max = if opt.order == 0 && !single_ok { r.checked_sub(1) } else { Some(r) };
                            for &lab in &opt.labels {
                                let Some(r1_max) = stub_child_max else { break };
                                for r1 in 0..=r1_max {
                                    for nu1 in self.sums(r1) {
                                        let sub = self.gen(lab, &nu1, r1, Some(e), false)?;
                                        if sub.is_empty() {
                                            continue;
                                        }
                                        let rest = self.multisets(&opt.labels, r - r1, max_child, &mu.sub(&nu1))?;
                                        for t in sub.iter() {
                                            for s in &rest {
                                                let mut ch = s.clone();
                                                ch.push(t.clone());
                                                sets.push((None, ch));
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (own, children) in sets {
                        let t = make_tree(line, nu.clone(), mode.clone(), opt.comp, opt.order, own, children);
                        let (p, q) = t.pq();
                        if q < opt.min_q || (opt.order == 0 && p > 0) {
                            continue;
                        }
                        if self.opts.renormalised && mode.is_zero() && p + q == 1 {
                            continue;
                        }
                        out.push(t);
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        self.count += out.len();
        if self.count > self.opts.cap {
            return Err(TreeError::Budget { cap: self.opts.cap });
        }
        let v = Rc::new(out);
        self.memo.insert(key, v.clone());
        Ok(v)
    }

    fn candidates(&mut self, labels: &[LineLabel], r: usize) -> Result<Rc<Candidates>, TreeError> {
        let key = (labels.to_vec(), r);
        if let Some(c) = self.cands.get(&key) {
            return Ok(c.clone());
        }
        let mut trees: Vec<Rc<Tree>> = Vec::new();
        for k in 1..=r {
            for &lab in labels {
                for nu in self.sums(k) {
                    trees.extend(self.gen(lab, &nu, k, None, false)?.iter().cloned());
                }
            }
        }
        if self.opts.reverse {
            trees.reverse();
        }
        let orders: Vec<usize> = trees.iter().map(|t| t.total_order()).collect();
        let mut by_order_mode: HashMap<(usize, Mode), Vec<usize>> = HashMap::new();
        for (i, t) in trees.iter().enumerate() {
            by_order_mode.entry((orders[i], t.momentum.clone())).or_default().push(i);
        }
        let c = Rc::new(Candidates { trees, orders, by_order_mode });
        self.cands.insert(key, c.clone());
        Ok(c)
    }

    /// Unordered families of stub-free subtrees with total order r and momentum mu.
    fn multisets(&mut self, labels: &[LineLabel], r: usize, max_child: usize, mu: &Mode) -> Result<Vec<Vec<Rc<Tree>>>, TreeError> {
        if r == 0 {
            return Ok(if mu.is_zero() { vec![Vec::new()] } else { Vec::new() });
        }
        if max_child == 0 {
            return Ok(Vec::new());
        }
        let cands = self.candidates(labels, r.min(max_child))?;
        let mut out = Vec::new();
        let mut cur = Vec::new();
        fn dfs(c: &Candidates, start: usize, r: usize, mu: &Mode, cur: &mut Vec<usize>, out: &mut Vec<Vec<Rc<Tree>>>) {
            if let Some(ix) = c.by_order_mode.get(&(r, mu.clone())) {
                for &i in ix.iter().filter(|&&i| i >= start) {
                    let mut v: Vec<Rc<Tree>> = cur.iter().map(|&j| c.trees[j].clone()).collect();
                    v.push(c.trees[i].clone());
                    out.push(v);
                }
            }
            for i in start..c.trees.len() {
                let o = c.orders[i];
                if o < r {
                    cur.push(i);
                    dfs(c, i, r - o, &mu.sub(&c.trees[i].momentum), cur, out);
                    cur.pop();
                }
            }
        }
        dfs(&cands, 0, r, mu, &mut cur, &mut out);
        Ok(out)
    }
}

/// Node factors and scale-summed values of Hamiltonian trees, as functions of β₀.
pub struct HamEvaluator<'a> {
    spec: &'a SystemSpec,
    f: &'a ForcingField,
    factors: HashMap<(Mode, usize, usize, bool), TrigPoly>,
    memo: HashMap<*const Tree, TrigPoly>,
}

impl<'a> HamEvaluator<'a> {
    pub fn new(spec: &'a SystemSpec) -> Result<HamEvaluator<'a>, TreeError> {
        let f = spec.hamiltonian.as_ref().ok_or(TreeError::NotHamiltonian)?;
        Ok(HamEvaluator { spec, f, factors: HashMap::new(), memo: HashMap::new() })
    }

    /// (1/p!q!)∂^p_β∂^{q+1}_B f_ν, or −(1/p!q!)∂^{p+1}_β∂^q_B f_ν when `g_type`, at (β₀, B̄₀).
    pub fn derivative(&mut self, nu: &Mode, p: usize, q: usize, g_type: bool) -> TrigPoly {
        let key = (nu.clone(), p, q, g_type);
        if let Some(v) = self.factors.get(&key) {
            return v.clone();
        }
        let mut poly = self.f.get(nu);
        let (nb, nbeta, sign) = if g_type { (q, p + 1, -1.0) } else { (q + 1, p, 1.0) };
        for _ in 0..nb {
            poly = poly.deriv_b();
        }
        let v = poly.coeff(0).deriv_n(nbeta).scale_re(sign / (factorial(p) * factorial(q)));
        self.factors.insert(key, v.clone());
        v
    }

    /// Whether a B node carries the G-type factor.
    pub fn is_g_type(t: &Tree) -> bool {
        match t.line {
            LineLabel::Ham(HamLabel::B) => !t.momentum.is_zero() || t.has_stub(),
            LineLabel::Ham(HamLabel::Gamma) => true,
            _ => false,
        }
    }

    pub fn node_factor(&mut self, t: &Tree) -> TrigPoly {
        let (p, q) = t.pq();
        if t.order == 0 {
            let a = self.spec.omega0.get(q).copied().unwrap_or(0.0);
            return TrigPoly::constant(c(a, 0.0));
        }
        let g = t.comp == Comp::B && Self::is_g_type(t);
        self.derivative(&t.mode, p, q, g)
    }

    /// Scale-summed propagator of a stub-free line.
    pub fn propagator(&self, t: &Tree) -> Complex64 {
        match t.line {
            LineLabel::Ham(HamLabel::Phi) | LineLabel::Ham(HamLabel::Gamma) => c(1.0, 0.0),
            _ if t.momentum.is_zero() => c(-1.0 / self.spec.omega0_prime(), 0.0),
            _ => 1.0 / (I * self.spec.dot(&t.momentum)),
        }
    }

    /// Value including the root propagator and the class weight.
    pub fn value(&mut self, t: &Rc<Tree>) -> TrigPoly {
        let key = Rc::as_ptr(t);
        if let Some(v) = self.memo.get(&key) {
            return v.clone();
        }
        let mut v = self.node_factor(t).scale(self.propagator(t) * t.weight());
        for ch in &t.children {
            let cv = self.value(ch);
            v = v.mul(&cv);
        }
        self.memo.insert(key, v.clone());
        v
    }
}

pub fn tree_value(spec: &SystemSpec, t: &Rc<Tree>, beta0: f64) -> Result<Complex64, TreeError> {
    Ok(HamEvaluator::new(spec)?.value(t).eval(beta0))
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleEntry {
    pub k: usize,
    pub nu: Mode,
    pub h: HamLabel,
    pub trees: usize,
    pub rel_err: f64,
}

/// Tree sums against the recursion for every order, momentum and root label.
///
/// The error is scaled by the larger of the recursion coefficient and the sum
/// of the absolute tree values.
pub fn oracle_check(spec: &SystemSpec, series: &SolutionSeries, k_max: usize) -> Result<Vec<OracleEntry>, TreeError> {
    let mut en = Enumerator::new(spec, EnumOptions::hamiltonian())?;
    let mut ev = HamEvaluator::new(spec)?;
    let w1 = spec.omega0_prime();
    let zero = Mode::zero(spec.d);
    let mut out = Vec::new();
    for k in 1..=k_max.min(series.k_max) {
        let mut momenta: BTreeSet<Mode> = en.sums(k).into_iter().collect();
        momenta.extend(series.b[k].keys().cloned());
        momenta.extend(series.big_b[k].keys().cloned());
        momenta.insert(zero.clone());
        for nu in momenta {
            let labels: Vec<HamLabel> = if nu.is_zero() {
                vec![HamLabel::B, HamLabel::Phi, HamLabel::Gamma]
            } else {
                vec![HamLabel::Beta, HamLabel::B]
            };
            for h in labels {
                let trees = en.trees(LineLabel::Ham(h), &nu, k, None)?;
                let mut sum = TrigPoly::zero();
                let mut abs = 0.0;
                for t in trees.iter() {
                    let v = ev.value(t);
                    abs += v.max_coeff();
                    sum.add_assign(&v);
                }
                let reference = match h {
                    HamLabel::Beta => series.b_at(k, &nu),
                    HamLabel::B => series.big_b_at(k, &nu),
                    HamLabel::Phi => series.phi0[k].add(&series.b0(k).scale_re(w1)),
                    HamLabel::Gamma => series.gamma0[k].clone(),
                };
                let scale = reference.max_coeff().max(abs);
                let diff = sum.max_diff(&reference);
                let rel_err = if scale > 0.0 { diff / scale } else { diff };
                out.push(OracleEntry { k, nu: nu.clone(), h, trees: trees.len(), rel_err });
            }
        }
    }
    Ok(out)
}

/// Flattened tree; node 0 is the node the root line exits and line ℓ_v is
/// identified with node v.
#[derive(Clone, Debug)]
pub struct FlatTree {
    pub nodes: Vec<FlatNode>,
}

#[derive(Clone, Debug)]
pub struct FlatNode {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub mode: Mode,
    pub comp: Comp,
    pub order: u8,
    pub line: LineLabel,
    pub momentum: Mode,
    pub stub: Option<Comp>,
}

/// Identifier of the stub line in subgraph reports.
pub const STUB: usize = usize::MAX;

impl FlatTree {
    pub fn from_tree(t: &Tree) -> FlatTree {
        let mut nodes = Vec::new();
        fn walk(t: &Tree, parent: Option<usize>, nodes: &mut Vec<FlatNode>) -> usize {
            let id = nodes.len();
            nodes.push(FlatNode {
                parent,
                children: Vec::new(),
                mode: t.mode.clone(),
                comp: t.comp,
                order: t.order,
                line: t.line,
                momentum: t.momentum.clone(),
                stub: t.stub,
            });
            for ch in &t.children {
                let cid = walk(ch, Some(id), nodes);
                nodes[id].children.push(cid);
            }
            id
        }
        walk(t, None, &mut nodes);
        FlatTree { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Entering lines of node v, stub included.
    pub fn s(&self, v: usize) -> usize {
        self.nodes[v].children.len() + usize::from(self.nodes[v].stub.is_some())
    }

    pub fn k(&self, set: &[usize]) -> usize {
        set.iter().map(|&v| self.nodes[v].order as usize).sum()
    }

    pub fn big_k(&self, set: &[usize]) -> i64 {
        set.iter().map(|&v| self.nodes[v].mode.norm()).sum()
    }

    /// Node v together with all its predecessors.
    pub fn subtree(&self, v: usize) -> Vec<usize> {
        let mut out = vec![v];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.nodes[out[i]].children.iter().copied());
            i += 1;
        }
        out.sort();
        out
    }

    /// Momentum of an entering line; the stub carries zero.
    pub fn line_momentum(&self, l: usize) -> Mode {
        if l == STUB {
            Mode::zero(self.nodes[0].mode.dim())
        } else {
            self.nodes[l].momentum.clone()
        }
    }

    fn stub_node(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.stub.is_some())
    }

    /// Re-checks conservation and the label constraints of the framework.
    pub fn validate(&self, framework: Framework) -> Result<(), String> {
        for (v, n) in self.nodes.iter().enumerate() {
            let mut sum = n.mode.clone();
            for &ch in &n.children {
                sum = sum.add(&self.nodes[ch].momentum);
            }
            if sum != n.momentum {
                return Err(format!("conservation fails at node {v}"));
            }
            if !n.mode.is_zero() && n.order == 0 {
                return Err(format!("node {v}: nonzero mode with order 0"));
            }
            let p = n.children.iter().filter(|&&c| self.nodes[c].line.e() == Comp::Beta).count()
                + usize::from(n.stub == Some(Comp::Beta));
            let q = self.s(v) - p;
            match (framework, n.line) {
                (Framework::Hamiltonian, LineLabel::Ham(h)) => {
                    let want = match h {
                        HamLabel::Beta | HamLabel::Phi => Comp::Beta,
                        _ => Comp::B,
                    };
                    if want != n.comp {
                        return Err(format!("node {v}: component mismatch"));
                    }
                    if v != 0 && matches!(h, HamLabel::Phi | HamLabel::Gamma) {
                        return Err(format!("node {v}: Φ/Γ label on an internal line"));
                    }
                    if h == HamLabel::Beta && n.momentum.is_zero() {
                        return Err(format!("node {v}: β line with zero momentum"));
                    }
                    if matches!(h, HamLabel::Phi | HamLabel::Gamma) && !n.momentum.is_zero() {
                        return Err(format!("node {v}: Φ/Γ line with nonzero momentum"));
                    }
                    if n.order == 0 {
                        let ok = p == 0
                            && match n.comp {
                                Comp::Beta => q >= 1,
                                Comp::B => q >= 2 && h == HamLabel::B && n.momentum.is_zero(),
                            };
                        if !ok {
                            return Err(format!("node {v}: order-0 constraint"));
                        }
                    }
                }
                (Framework::General, LineLabel::Gen { u, .. }) => {
                    if u != n.comp {
                        return Err(format!("node {v}: u-component mismatch"));
                    }
                    if n.comp == Comp::B && n.order == 0 {
                        return Err(format!("node {v}: B node of order 0"));
                    }
                    if n.order == 0 && (p != 0 || q < 1) {
                        return Err(format!("node {v}: order-0 constraint"));
                    }
                    if v != 0 && n.momentum.is_zero() && !self.subtree(v).iter().any(|&w| self.nodes[w].stub.is_some()) {
                        return Err(format!("node {v}: internal line with zero momentum"));
                    }
                }
                _ => return Err(format!("node {v}: label of the wrong framework")),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Cluster {
    pub scale: i32,
    pub nodes: Vec<usize>,
    pub lines: Vec<usize>,
    pub entering: Vec<usize>,
    pub exiting: usize,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SelfEnergyCluster {
    pub scale: i32,
    pub nodes: Vec<usize>,
    pub entering: usize,
    pub exiting: usize,
    pub path: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Chain {
    /// Indices into the self-energy list, from the exit end.
    pub clusters: Vec<usize>,
    /// ℓ₀, …, ℓ_p.
    pub lines: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct SubgraphReport {
    pub clusters: Vec<Cluster>,
    pub self_energy: Vec<SelfEnergyCluster>,
    pub resonant_lines: Vec<usize>,
    pub chains: Vec<Chain>,
}

fn uf_find(p: &mut [usize], mut x: usize) -> usize {
    while p[x] != x {
        p[x] = p[p[x]];
        x = p[x];
    }
    x
}

/// Clusters, self-energy clusters, resonant lines and maximal chains for a
/// scale assignment (one scale per line, indexed by node).
pub fn detect_subgraphs(t: &FlatTree, scales: &[i32], framework: Framework) -> SubgraphReport {
    let n = t.len();
    let mut levels: Vec<i32> = (1..n).map(|v| scales[v]).collect();
    levels.sort();
    levels.dedup();
    let mut clusters = Vec::new();
    for &lev in &levels {
        let mut parent: Vec<usize> = (0..n).collect();
        for v in 1..n {
            if scales[v] <= lev {
                let a = uf_find(&mut parent, v);
                let b = uf_find(&mut parent, t.nodes[v].parent.unwrap());
                parent[a] = b;
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..n {
            let r = uf_find(&mut parent, v);
            groups.entry(r).or_default().push(v);
        }
        for nodes in groups.into_values() {
            let set: BTreeSet<usize> = nodes.iter().copied().collect();
            let lines: Vec<usize> = nodes
                .iter()
                .copied()
                .filter(|&v| t.nodes[v].parent.is_some_and(|p| set.contains(&p)))
                .collect();
            if !lines.iter().any(|&l| scales[l] == lev) || (set.contains(&0) && scales[0] <= lev) {
                continue;
            }
            let mut entering: Vec<usize> = Vec::new();
            for &v in &nodes {
                for &ch in &t.nodes[v].children {
                    if !set.contains(&ch) {
                        entering.push(ch);
                    }
                }
                if t.nodes[v].stub.is_some() {
                    entering.push(STUB);
                }
            }
            let exiting = *nodes
                .iter()
                .find(|&&v| t.nodes[v].parent.is_none_or(|p| !set.contains(&p)))
                .unwrap();
            clusters.push(Cluster { scale: lev, nodes, lines, entering, exiting });
        }
    }

    let mut se = Vec::new();
    for (v, node) in t.nodes.iter().enumerate() {
        if node.mode.is_zero() && t.s(v) == 1 {
            let entering = node.children.first().copied().unwrap_or(STUB);
            se.push(SelfEnergyCluster { scale: -1, nodes: vec![v], entering, exiting: v, path: Vec::new() });
        }
    }
    for cl in &clusters {
        if cl.entering.len() != 1 {
            continue;
        }
        let d = t.nodes[0].mode.dim();
        let sum = cl.nodes.iter().fold(Mode::zero(d), |a, &v| a.add(&t.nodes[v].mode));
        if !sum.is_zero() {
            continue;
        }
        let entering = cl.entering[0];
        let mut path = Vec::new();
        let mut w = if entering == STUB { t.stub_node().unwrap() } else { t.nodes[entering].parent.unwrap() };
        while w != cl.exiting {
            path.push(w);
            w = t.nodes[w].parent.unwrap();
        }
        if framework == Framework::Hamiltonian {
            let ok = if cl.scale == -1 {
                path.is_empty()
            } else {
                let base = t.line_momentum(entering);
                path.iter().all(|&l| scales[l] >= 0 && !t.nodes[l].momentum.sub(&base).is_zero())
            };
            if !ok {
                continue;
            }
        }
        se.push(SelfEnergyCluster { scale: cl.scale, nodes: cl.nodes.clone(), entering, exiting: cl.exiting, path });
    }

    let exits: BTreeSet<usize> = se.iter().map(|s| s.exiting).collect();
    let enters: BTreeSet<usize> = se.iter().map(|s| s.entering).collect();
    let resonant: Vec<usize> = exits.intersection(&enters).copied().filter(|&l| l != STUB).collect();
    let is_res = |l: usize| resonant.contains(&l);

    let mut chains = Vec::new();
    fn extend(se: &[SelfEnergyCluster], cur: &mut Vec<usize>, is_res: &dyn Fn(usize) -> bool, out: &mut Vec<Chain>) {
        let last = &se[*cur.last().unwrap()];
        if cur.len() >= 2 && !is_res(last.entering) {
            let mut lines = vec![se[cur[0]].exiting];
            lines.extend(cur.iter().map(|&i| se[i].entering));
            out.push(Chain { clusters: cur.clone(), lines });
        }
        if last.entering == STUB {
            return;
        }
        for (j, s) in se.iter().enumerate() {
            if s.exiting == last.entering && !cur.contains(&j) {
                cur.push(j);
                extend(se, cur, is_res, out);
                cur.pop();
            }
        }
    }
    for (i, s) in se.iter().enumerate() {
        if !is_res(s.exiting) {
            let mut cur = vec![i];
            extend(&se, &mut cur, &is_res, &mut chains);
        }
    }
    SubgraphReport { clusters, self_energy: se, resonant_lines: resonant, chains }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Violation {
    pub lemma: String,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct CountingReport {
    pub trees: usize,
    pub subtrees: usize,
    pub assignments: usize,
    pub renormalised_assignments: usize,
    pub self_energy_checked: usize,
    pub unresolved_lines: usize,
    pub violations: Vec<Violation>,
}

/// Node-count bound over every subtree (a node with all its predecessors):
/// 3k − 1 in the general framework, 4k − 2 in the Hamiltonian one.
pub fn node_bound_violations(t: &FlatTree, framework: Framework) -> (usize, Vec<Violation>) {
    let mut out = Vec::new();
    for v in 0..t.len() {
        let sub = t.subtree(v);
        let k = t.k(&sub) as i64;
        let n = sub.len() as i64;
        let (bound, name) = match framework {
            Framework::General => (3 * k - 1, "node bound 3k-1"),
            Framework::Hamiltonian => (4 * k - 2, "node bound 4k-2"),
        };
        if n > bound {
            out.push(Violation { lemma: name.into(), detail: format!("subtree at node {v}: |N| = {n}, k = {k}") });
        }
    }
    (t.len(), out)
}

/// All admissible scale assignments (one or two scales per line with ν ≠ 0, −1 otherwise).
pub fn admissible_assignments(t: &FlatTree, profile: &ScaleProfile, omega: &[f64]) -> Result<Vec<Vec<i32>>, TreeError> {
    let mut choices: Vec<Vec<i32>> = Vec::with_capacity(t.len());
    for node in &t.nodes {
        if node.momentum.is_zero() {
            choices.push(vec![-1]);
        } else {
            let x = node.momentum.dot(omega);
            let s = profile
                .admissible_scales(x)
                .map_err(|_| TreeError::BelowProfile { nu: node.momentum.clone(), value: x.abs() })?;
            choices.push(s);
        }
    }
    let mut out = vec![Vec::new()];
    for ch in choices {
        let mut next = Vec::with_capacity(out.len() * ch.len());
        for a in &out {
            for &s in &ch {
                let mut b = a.clone();
                b.push(s);
                next.push(b);
            }
        }
        out = next;
    }
    Ok(out)
}

fn pow2(e: i64) -> f64 {
    2f64.powi(e as i32)
}

fn zeta(profile: &ScaleProfile, x: f64) -> Option<i32> {
    profile.admissible_scales(x).ok().and_then(|s| s.first().copied())
}

/// Scale-dependent bounds on one tree for one admissible assignment.
///
/// General framework: line-count bounds for renormalised trees and for
/// self-energy clusters that contain no self-energy cluster. Hamiltonian
/// framework: the same bounds for non-resonant lines counted by minimum scale.
pub fn scale_bound_violations(
    t: &FlatTree,
    scales: &[i32],
    profile: &ScaleProfile,
    omega: &[f64],
    framework: Framework,
    report: &mut CountingReport,
) {
    let rep = detect_subgraphs(t, scales, framework);
    let m = |n: i32| profile.m_seq[n as usize] as i64;
    let top = profile.n_profile as i32;
    let all: Vec<usize> = (0..t.len()).collect();
    match framework {
        Framework::General => {
            if rep.self_energy.is_empty() {
                report.renormalised_assignments += 1;
                let kk = t.big_k(&all) as f64;
                for n in 0..=top {
                    let count = scales.iter().filter(|&&s| s >= n).count() as f64;
                    if count > pow2(2 - m(n)) * kk {
                        report.violations.push(Violation {
                            lemma: "line bound for renormalised trees".into(),
                            detail: format!("n = {n}: {count} lines on scale >= n, K = {kk}"),
                        });
                    }
                }
            }
            for se in &rep.self_energy {
                if se.scale < 0 {
                    continue;
                }
                let inner = rep.self_energy.iter().any(|o| o != se && o.nodes.iter().all(|v| se.nodes.contains(v)));
                if inner {
                    continue;
                }
                report.self_energy_checked += 1;
                let kk = t.big_k(&se.nodes);
                if (kk as f64) <= pow2(m(se.scale) - 1) {
                    report.violations.push(Violation {
                        lemma: "K bound for self-energy clusters".into(),
                        detail: format!("scale {}: K = {kk}", se.scale),
                    });
                }
                let lines: Vec<usize> = se.nodes.iter().copied().filter(|&v| v != se.exiting).collect();
                for p in 0..=se.scale {
                    let count = lines.iter().filter(|&&l| scales[l] >= p).count() as f64;
                    if count > pow2(2 - m(p)) * kk as f64 {
                        report.violations.push(Violation {
                            lemma: "line bound for self-energy clusters".into(),
                            detail: format!("p = {p}: {count} lines, K = {kk}"),
                        });
                    }
                }
            }
        }
        Framework::Hamiltonian => {
            let res: BTreeSet<usize> = rep.resonant_lines.iter().copied().collect();
            let zetas: Vec<Option<i32>> = t
                .nodes
                .iter()
                .map(|n| if n.momentum.is_zero() { None } else { zeta(profile, n.momentum.dot(omega)) })
                .collect();
            let count = |lines: &[usize], n: i32| {
                lines.iter().filter(|&&l| !res.contains(&l) && zetas[l].is_some_and(|z| z >= n)).count() as f64
            };
            let kk = t.big_k(&all) as f64;
            for n in 0..=top {
                let c = count(&all, n);
                if c > pow2(3 - m(n)) * kk {
                    report.violations.push(Violation {
                        lemma: "non-resonant line bound".into(),
                        detail: format!("n = {n}: {c} lines, K = {kk}"),
                    });
                }
            }
            for se in rep.self_energy.iter().filter(|s| s.scale >= 0) {
                report.self_energy_checked += 1;
                let kt = t.big_k(&se.nodes);
                if (kt as f64) <= pow2(m(se.scale) - 1) {
                    report.violations.push(Violation {
                        lemma: "K bound for Hamiltonian self-energy clusters".into(),
                        detail: format!("scale {}: K = {kt}", se.scale),
                    });
                }
                let lines: Vec<usize> = se.nodes.iter().copied().filter(|&v| v != se.exiting).collect();
                for p in 0..=se.scale {
                    let c = count(&lines, p);
                    if c > pow2(3 - m(p)) * kt as f64 {
                        report.violations.push(Violation {
                            lemma: "non-resonant line bound in self-energy clusters".into(),
                            detail: format!("p = {p}: {c} lines, K = {kt}"),
                        });
                    }
                }
            }
        }
    }
}

/// Full counting sweep over every tree of order 1..=k_max with every root label.
pub fn verify_counting(
    spec: &SystemSpec,
    profile: &ScaleProfile,
    k_max: usize,
    framework: Framework,
) -> Result<CountingReport, TreeError> {
    let opts = match framework {
        Framework::General => EnumOptions::general(),
        Framework::Hamiltonian => EnumOptions::hamiltonian(),
    };
    let mut en = Enumerator::new(spec, opts)?;
    let mut report = CountingReport::default();
    let roots: Vec<LineLabel> = match framework {
        Framework::General => vec![LineLabel::Gen { e: Comp::Beta, u: Comp::Beta }, LineLabel::Gen { e: Comp::Beta, u: Comp::B }],
        Framework::Hamiltonian => vec![
            LineLabel::Ham(HamLabel::Beta),
            LineLabel::Ham(HamLabel::B),
            LineLabel::Ham(HamLabel::Phi),
            LineLabel::Ham(HamLabel::Gamma),
        ],
    };
    for k in 1..=k_max {
        let mut momenta = en.sums(k);
        momenta.push(Mode::zero(spec.d));
        momenta.sort();
        momenta.dedup();
        for &root in &roots {
            for nu in &momenta {
                for t in en.trees(root, nu, k, None)?.iter() {
                    let flat = FlatTree::from_tree(t);
                    report.trees += 1;
                    let (n, v) = node_bound_violations(&flat, framework);
                    report.subtrees += n;
                    report.violations.extend(v);
                    match admissible_assignments(&flat, profile, &spec.omega) {
                        Ok(assignments) => {
                            for s in assignments {
                                report.assignments += 1;
                                scale_bound_violations(&flat, &s, profile, &spec.omega, framework, &mut report);
                            }
                        }
                        Err(_) => report.unresolved_lines += 1,
                    }
                }
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct TreeCount {
    pub k: usize,
    pub nu: Mode,
    pub h: HamLabel,
    pub count: usize,
}

pub fn count_trees(spec: &SystemSpec, k_max: usize) -> Result<Vec<TreeCount>, TreeError> {
    let mut en = Enumerator::new(spec, EnumOptions::hamiltonian())?;
    let mut out = Vec::new();
    for k in 1..=k_max {
        let mut momenta = en.sums(k);
        momenta.push(Mode::zero(spec.d));
        momenta.sort();
        momenta.dedup();
        for nu in momenta {
            for h in [HamLabel::Beta, HamLabel::B, HamLabel::Phi, HamLabel::Gamma] {
                let n = en.trees(LineLabel::Ham(h), &nu, k, None)?.len();
                if n > 0 {
                    out.push(TreeCount { k, nu: nu.clone(), h, count: n });
                }
            }
        }
    }
    Ok(out)
}

/// Hamiltonian model with modes {0, ±(3,−2), ±(8,−5)}, whose momenta reach
/// several scales of the golden-ratio profile already at order three.
pub fn near_resonant_model() -> SystemSpec {
    use crate::model::Truncation;
    let mut f = ForcingField::new();
    let z = Mode(vec![0, 0]);
    f.add_term(&z, 1, 0, c(0.5, 0.0));
    f.add_term(&z, -1, 0, c(0.5, 0.0));
    f.add_term(&z, 0, 1, c(0.2, 0.0));
    for (nu, a) in [(Mode(vec![3, -2]), 0.25), (Mode(vec![8, -5]), 0.15)] {
        f.add_term(&nu, 1, 0, c(a, 0.1));
        f.add_term(&nu.neg(), -1, 0, c(a, -0.1));
        f.add_term(&nu, -1, 1, c(0.05, 0.0));
        f.add_term(&nu.neg(), 1, 1, c(0.05, 0.0));
    }
    SystemSpec::from_hamiltonian(
        vec![1.0, (1.0 + 5f64.sqrt()) / 2.0],
        0.0,
        vec![0.0, 1.0, 0.5],
        f,
        Truncation { n_modes: 13, m_beta: 1, d_b: 1 },
    )
    .expect("near-resonant model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindstedt::{compute_series, RecursionOptions};
    use crate::model::sample_model;
    use crate::smalldiv::build_profile;

    fn e1() -> Mode {
        Mode(vec![1, 0])
    }

    #[test]
    fn single_b_tree_at_first_order() {
        let spec = sample_model();
        let mut en = Enumerator::new(&spec, EnumOptions::hamiltonian()).unwrap();
        let t = en.trees(LineLabel::Ham(HamLabel::B), &e1(), 1, None).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].mode, e1());
        assert_eq!(t[0].comp, Comp::B);
        assert!(t[0].children.is_empty());
        let v = HamEvaluator::new(&spec).unwrap().value(&t[0]);
        assert!(v.max_diff(&TrigPoly::sin(1).scale(c(0.0, -0.5))) < 1e-15);
        let g = en.trees(LineLabel::Ham(HamLabel::Gamma), &Mode::zero(2), 1, None).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn order_zero_is_empty() {
        let spec = sample_model();
        let mut en = Enumerator::new(&spec, EnumOptions::hamiltonian()).unwrap();
        for h in [HamLabel::Beta, HamLabel::B, HamLabel::Phi, HamLabel::Gamma] {
            assert!(en.trees(LineLabel::Ham(h), &e1(), 0, None).unwrap().is_empty());
            assert!(en.trees(LineLabel::Ham(h), &Mode::zero(2), 0, None).unwrap().is_empty());
        }
    }

    #[test]
    fn off_support_mode_gives_zero() {
        let spec = sample_model();
        let mut ev = HamEvaluator::new(&spec).unwrap();
        let t = make_tree(LineLabel::Ham(HamLabel::B), Mode(vec![0, 1]), Mode(vec![0, 1]), Comp::B, 1, None, vec![]);
        assert!(ev.value(&t).is_zero());
    }

    /// Plain sums of ordered tuples: the Faà di Bruno count the class weights must reproduce.
    #[test]
    fn weights_match_ordered_count() {
        let spec = sample_model();
        let mut en = Enumerator::new(&spec, EnumOptions::hamiltonian()).unwrap();
        for t in en.trees(LineLabel::Ham(HamLabel::Beta), &Mode(vec![2, 0]), 3, None).unwrap().iter() {
            let (p, q) = t.pq();
            let beta: Vec<&Rc<Tree>> = t.children.iter().filter(|c| c.line.e() == Comp::Beta).collect();
            let bl: Vec<&Rc<Tree>> = t.children.iter().filter(|c| c.line.e() == Comp::B).collect();
            let distinct = |v: &[&Rc<Tree>]| {
                let mut perms = BTreeSet::new();
                let idx: Vec<usize> = (0..v.len()).collect();
                permute(&idx, &mut Vec::new(), &mut vec![false; v.len()], &mut |perm| {
                    perms.insert(perm.iter().map(|&i| v[i].encode()).collect::<Vec<_>>());
                });
                perms.len() as f64
            };
            assert_eq!(t.weight(), distinct(&beta) * distinct(&bl));
            assert_eq!(beta.len() + bl.len(), p + q);
        }
    }

    fn permute(idx: &[usize], cur: &mut Vec<usize>, used: &mut Vec<bool>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == idx.len() {
            f(cur);
            return;
        }
        for i in 0..idx.len() {
            if !used[i] {
                used[i] = true;
                cur.push(idx[i]);
                permute(idx, cur, used, f);
                cur.pop();
                used[i] = false;
            }
        }
    }

    #[test]
    fn oracle_matches_recursion_on_sample() {
        let spec = sample_model();
        let s = compute_series(&spec, 3, &RecursionOptions::default()).unwrap();
        let r = oracle_check(&spec, &s, 3).unwrap();
        assert!(!r.is_empty());
        for e in &r {
            assert!(e.rel_err < 1e-11, "{e:?}");
        }
        let g2 = r.iter().find(|e| e.k == 2 && e.h == HamLabel::Gamma).unwrap();
        assert!(g2.trees > 0);
    }

    #[test]
    fn oracle_matches_recursion_on_near_resonant_model() {
        let spec = near_resonant_model();
        let s = compute_series(&spec, 3, &RecursionOptions::default()).unwrap();
        for e in oracle_check(&spec, &s, 3).unwrap() {
            assert!(e.rel_err < 1e-11, "{e:?}");
        }
    }

    #[test]
    fn enumeration_is_order_independent() {
        let spec = near_resonant_model();
        for (opts, roots) in [
            (EnumOptions::hamiltonian(), vec![LineLabel::Ham(HamLabel::Beta), LineLabel::Ham(HamLabel::Gamma)]),
            (EnumOptions::general(), vec![LineLabel::Gen { e: Comp::B, u: Comp::Beta }]),
        ] {
            let mut rev = opts.clone();
            rev.reverse = true;
            let mut a = Enumerator::new(&spec, opts).unwrap();
            let mut b = Enumerator::new(&spec, rev).unwrap();
            for root in roots {
                for nu in [Mode(vec![0, 0]), Mode(vec![3, -2]), Mode(vec![5, -3])] {
                    for k in 1..=3 {
                        let x = a.trees(root, &nu, k, None).unwrap();
                        let y = b.trees(root, &nu, k, None).unwrap();
                        assert_eq!(x, y);
                        let uniq: BTreeSet<String> = x.iter().map(|t| t.encode()).collect();
                        assert_eq!(uniq.len(), x.len());
                    }
                }
            }
        }
    }

    #[test]
    fn enumerated_trees_validate() {
        let spec = near_resonant_model();
        for (opts, fw, root) in [
            (EnumOptions::hamiltonian(), Framework::Hamiltonian, LineLabel::Ham(HamLabel::B)),
            (EnumOptions::general(), Framework::General, LineLabel::Gen { e: Comp::B, u: Comp::B }),
        ] {
            let mut en = Enumerator::new(&spec, opts).unwrap();
            for k in 1..=3 {
                for nu in en.sums(k) {
                    for t in en.trees(root, &nu, k, None).unwrap().iter() {
                        let f = FlatTree::from_tree(t);
                        f.validate(fw).unwrap();
                        assert_eq!(f.k(&(0..f.len()).collect::<Vec<_>>()), k);
                    }
                }
            }
        }
    }

    fn flat(parents: &[Option<usize>], modes: &[[i32; 2]]) -> FlatTree {
        let mut nodes: Vec<FlatNode> = parents
            .iter()
            .zip(modes)
            .map(|(&p, m)| FlatNode {
                parent: p,
                children: Vec::new(),
                mode: Mode(m.to_vec()),
                comp: Comp::Beta,
                order: 1,
                line: LineLabel::Gen { e: Comp::Beta, u: Comp::Beta },
                momentum: Mode::zero(2),
                stub: None,
            })
            .collect();
        for v in 0..nodes.len() {
            if let Some(p) = nodes[v].parent {
                nodes[p].children.push(v);
            }
        }
        for v in (0..nodes.len()).rev() {
            let mut s = nodes[v].mode.clone();
            for &ch in &nodes[v].children.clone() {
                s = s.add(&nodes[ch].momentum);
            }
            nodes[v].momentum = s;
        }
        FlatTree { nodes }
    }

    #[test]
    fn cluster_nesting_is_maximal() {
        // A 14-node tree with line scales drawn from {0, 2, 4, 6, 9}.
        let parents = [
            None,
            Some(0),
            Some(1),
            Some(1),
            Some(2),
            Some(2),
            Some(3),
            Some(3),
            Some(6),
            Some(6),
            Some(7),
            Some(0),
            Some(11),
            Some(11),
        ];
        let modes = [[1, 0]; 14];
        let t = flat(&parents, &modes);
        let scales = [9, 6, 4, 4, 0, 0, 2, 9, 0, 0, 2, 4, 0, 2];
        let rep = detect_subgraphs(&t, &scales, Framework::General);
        assert!(!rep.clusters.is_empty());
        for cl in &rep.clusters {
            for &l in cl.entering.iter().chain(std::iter::once(&cl.exiting)) {
                assert!(scales[l] > cl.scale, "{cl:?}");
            }
            for &l in &cl.lines {
                assert!(scales[l] <= cl.scale);
            }
        }
        // nested clusters: each cluster on scale n lies inside one on every higher scale present
        for a in &rep.clusters {
            for b in rep.clusters.iter().filter(|b| b.scale > a.scale) {
                let inter = a.nodes.iter().filter(|v| b.nodes.contains(v)).count();
                assert!(inter == 0 || inter == a.nodes.len());
            }
        }
    }

    #[test]
    fn single_zero_mode_node_is_self_energy() {
        let t = flat(&[None, Some(0), Some(1)], &[[1, 0], [0, 0], [1, 0]]);
        let rep = detect_subgraphs(&t, &[0, 0, 0], Framework::General);
        assert!(rep.self_energy.iter().any(|s| s.scale == -1 && s.nodes == vec![1]));
    }

    #[test]
    fn distinct_momenta_give_no_self_energy() {
        let t = flat(&[None, Some(0), Some(1)], &[[1, 0], [0, 1], [1, 1]]);
        for s in [[5, 1, 0], [5, 0, 1], [5, 0, 0]] {
            assert!(detect_subgraphs(&t, &s, Framework::General).self_energy.is_empty());
        }
    }

    #[test]
    fn chain_of_two_self_energies() {
        // root ← a ← b ← c ← d, with a,b ν = ±e₂ pair and c,d another: two
        // self-energy clusters joined by the line ℓ_b.
        let t = flat(
            &[None, Some(0), Some(1), Some(2), Some(3), Some(4)],
            &[[1, 0], [0, 1], [0, -1], [0, 2], [0, -2], [1, 0]],
        );
        let scales = [5, 5, 0, 5, 0, 5];
        let rep = detect_subgraphs(&t, &scales, Framework::General);
        let se: Vec<_> = rep.self_energy.iter().filter(|s| s.scale == 0).collect();
        assert_eq!(se.len(), 2);
        assert_eq!(rep.resonant_lines, vec![3]);
        assert_eq!(rep.chains.len(), 1);
        assert_eq!(rep.chains[0].lines, vec![1, 3, 5]);
    }

    #[test]
    fn counting_bounds_hold() {
        let profile = build_profile(&[1.0, (1.0 + 5f64.sqrt()) / 2.0], 8).unwrap();
        for (spec, resonant) in [(sample_model(), false), (near_resonant_model(), true)] {
            for fw in [Framework::General, Framework::Hamiltonian] {
                let r = verify_counting(&spec, &profile, 3, fw).unwrap();
                assert_eq!(r.self_energy_checked > 0, resonant);
                assert!(r.violations.is_empty(), "{:?}", &r.violations[..r.violations.len().min(5)]);
                assert!(r.trees > 0 && r.assignments >= r.trees);
                assert_eq!(r.unresolved_lines, 0);
            }
        }
    }

    #[test]
    fn literal_subgraph_reading_fails_on_order_zero_nodes() {
        // a lone order-0 node is a connected subgraph with k = 0
        let spec = sample_model();
        let mut en = Enumerator::new(&spec, EnumOptions::hamiltonian()).unwrap();
        let t = en.trees(LineLabel::Ham(HamLabel::Phi), &Mode::zero(2), 1, None).unwrap();
        assert!(t.iter().any(|t| t.order == 0));
    }
}
