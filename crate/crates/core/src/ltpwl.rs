//! Lattice piecewise-linear (max-of-min) expressions built from tangent
//! segments along a trajectory.
//!
//! Given affine segments `l_1..l_N`, each active on a base region `D_i`, the
//! continuous piecewise-linear function they form can be written without any
//! interval case analysis as
//!
//! ```text
//! f(x) = max_i  min_{j ∈ T_i} l_j(x),    T_i = { j : l_j ≥ l_i on all of D_i }
//! ```
//!
//! In one dimension the base regions are intervals delimited by the crossing
//! points of consecutive segments, so `T_i` is decided exactly by checking
//! the affine difference `l_j - l_i` at the interval endpoints (or its slope
//! sign on an unbounded side).
//!
//! Vector maps are handled per component: [`linearize_system`] builds one 1D
//! expression per state component for both `f` and `h`, which requires their
//! Jacobians to be diagonal.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::is_diagonal;
use crate::system::StateSpaceModel;

/// `l(x) = slope·x + intercept`, tangent to some function at `anchor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineSegment {
    pub slope: f64,
    pub intercept: f64,
    pub anchor: f64,
}

impl AffineSegment {
    /// The segment through `(anchor, value)` with the given slope.
    pub fn tangent(anchor: f64, value: f64, slope: f64) -> Self {
        AffineSegment { slope, intercept: value - slope * anchor, anchor }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    fn same_line(&self, other: &AffineSegment) -> bool {
        let scale = 1.0 + self.slope.abs().max(self.intercept.abs());
        (self.slope - other.slope).abs() <= 1e-12 * scale
            && (self.intercept - other.intercept).abs() <= 1e-12 * scale
    }
}

/// First-order Taylor expansion of `f` at `x`.
pub fn linearize_at(f: impl Fn(f64) -> f64, derivative: impl Fn(f64) -> f64, x: f64) -> AffineSegment {
    AffineSegment::tangent(x, f(x), derivative(x))
}

/// A max-of-min expression over affine segments.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeExpr {
    segments: Vec<AffineSegment>,
    /// One index set per base region; `terms[i]` always contains `i`.
    terms: Vec<Vec<usize>>,
    /// Region boundaries; region `i` is `[breakpoints[i-1], breakpoints[i]]`.
    /// Regions may be single points where a chord bridge meets a segment.
    breakpoints: Vec<f64>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct LatticeDump<'a> {
    segments: &'a [AffineSegment],
    terms: &'a [Vec<usize>],
}

fn dominates_on(upper: &AffineSegment, lower: &AffineSegment, lo: f64, hi: f64) -> bool {
    let ds = upper.slope - lower.slope;
    let dc = upper.intercept - lower.intercept;
    let holds_at = |x: f64| {
        let tol = 1e-12 * (1.0 + upper.eval(x).abs() + lower.eval(x).abs());
        ds * x + dc >= -tol
    };
    let lower_ok = if lo == f64::NEG_INFINITY {
        ds < 0.0 || (ds == 0.0 && (hi.is_finite() || dc >= 0.0))
    } else {
        holds_at(lo)
    };
    let upper_ok = if hi == f64::INFINITY {
        ds > 0.0 || (ds == 0.0 && (lo.is_finite() || dc >= 0.0))
    } else {
        holds_at(hi)
    };
    lower_ok && upper_ok
}

/// Builds the lattice expression for segments with distinct anchors.
///
/// Segments are sorted by anchor and consecutive copies of the same line are
/// merged. The boundary between consecutive segments is their crossing
/// point. When they are parallel, or cross outside the interval between
/// their anchors, the gap is bridged by the chord joining the two segments at
/// their anchors, so the result is always continuous. Each bridge is
/// recorded in [`LatticeExpr::warnings`].
pub fn build_ltpwl_1d(segments: &[AffineSegment]) -> Result<LatticeExpr> {
    if segments.is_empty() {
        return Err(Error::Lattice("at least one segment is required".into()));
    }
    if segments.iter().any(|s| !(s.slope.is_finite() && s.intercept.is_finite() && s.anchor.is_finite())) {
        return Err(Error::Lattice("segments must be finite".into()));
    }
    let mut sorted = segments.to_vec();
    sorted.sort_by(|a, b| a.anchor.total_cmp(&b.anchor));
    let mut kept: Vec<AffineSegment> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match kept.last() {
            Some(prev) if prev.same_line(&s) => continue,
            Some(prev) if prev.anchor == s.anchor => {
                return Err(Error::Lattice(format!(
                    "two different segments share the anchor {}",
                    s.anchor
                )))
            }
            _ => kept.push(s),
        }
    }

    let mut warnings = Vec::new();
    let mut pieces = vec![kept[0]];
    let mut breakpoints = Vec::new();
    for (i, r) in kept.iter().enumerate().skip(1) {
        let l = kept[i - 1];
        let cross = (l.slope != r.slope).then(|| (r.intercept - l.intercept) / (l.slope - r.slope));
        match cross.filter(|c| (l.anchor..=r.anchor).contains(c)) {
            Some(c) => breakpoints.push(c),
            None => {
                let (yl, yr) = (l.eval(l.anchor), r.eval(r.anchor));
                let slope = (yr - yl) / (r.anchor - l.anchor);
                warnings.push(format!(
                    "segments {} and {i} do not cross inside [{}, {}]; bridged with a chord",
                    i - 1,
                    l.anchor,
                    r.anchor
                ));
                pieces.push(AffineSegment {
                    slope,
                    intercept: yl - slope * l.anchor,
                    anchor: 0.5 * (l.anchor + r.anchor),
                });
                breakpoints.extend([l.anchor, r.anchor]);
            }
        }
        pieces.push(*r);
    }
    for w in &warnings {
        log::debug!("lattice construction: {w}");
    }
    let kept = pieces;

    let n = kept.len();
    let terms = (0..n)
        .map(|i| {
            let lo = if i == 0 { f64::NEG_INFINITY } else { breakpoints[i - 1] };
            let hi = if i + 1 == n { f64::INFINITY } else { breakpoints[i] };
            (0..n).filter(|&j| j == i || dominates_on(&kept[j], &kept[i], lo, hi)).collect()
        })
        .collect();

    Ok(LatticeExpr { segments: kept, terms, breakpoints, warnings })
}

impl LatticeExpr {
    pub fn segments(&self) -> &[AffineSegment] {
        &self.segments
    }

    /// One index set per base region.
    pub fn terms(&self) -> &[Vec<usize>] {
        &self.terms
    }

    /// The index sets with repeated terms removed, in first-seen order.
    pub fn distinct_terms(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for t in &self.terms {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn term_value(&self, term: &[usize], x: f64) -> f64 {
        term.iter().map(|&j| self.segments[j].eval(x)).fold(f64::INFINITY, f64::min)
    }

    /// `max_i min_{j ∈ T_i} l_j(x)`, valid for every real `x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.terms.iter().map(|t| self.term_value(t, x)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// The conventional piecewise evaluation: find the region containing `x`
    /// and evaluate its segment.
    pub fn eval_piecewise(&self, x: f64) -> f64 {
        let region = self.breakpoints.partition_point(|&b| b < x);
        self.segments[region].eval(x)
    }

    /// Index of the segment realizing the expression at `x`: the winning
    /// term, then its smallest literal. Ties go to the smallest index.
    pub fn active_segment(&self, x: f64) -> usize {
        let mut best_term = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (i, t) in self.terms.iter().enumerate() {
            let v = self.term_value(t, x);
            if v > best_value {
                best_value = v;
                best_term = i;
            }
        }
        let mut best = usize::MAX;
        let mut low = f64::INFINITY;
        for &j in &self.terms[best_term] {
            let v = self.segments[j].eval(x);
            if v < low || (v == low && j < best) {
                low = v;
                best = j;
            }
        }
        best
    }

    /// Debug dump: `{"segments": [{"slope", "intercept", "anchor"}], "terms": [[..]]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&LatticeDump { segments: &self.segments, terms: &self.terms })
            .expect("lattice serialization cannot fail")
    }
}

/// Per-component lattice approximations of a model's `f` and `h`.
#[derive(Debug, Clone)]
pub struct LtpwlSystem {
    pub transition: Vec<LatticeExpr>,
    pub observation: Vec<LatticeExpr>,
}

impl LtpwlSystem {
    pub fn eval_transition(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| self.transition[i].eval(x[i]))
    }

    pub fn eval_observation(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| self.observation[i].eval(x[i]))
    }

    pub fn to_json(&self) -> String {
        let dump = |exprs: &[LatticeExpr]| -> Vec<serde_json::Value> {
            exprs.iter().map(|e| serde_json::from_str(&e.to_json()).unwrap()).collect()
        };
        serde_json::json!({
            "transition": dump(&self.transition),
            "observation": dump(&self.observation),
        })
        .to_string()
    }
}

/// Tangent segments of every component of `f` and `h` at each point, merged
/// into one lattice expression per component. Points whose component values
/// lie within `1e-9` of an earlier one are skipped.
pub fn linearize_system(model: &dyn StateSpaceModel, points: &[DVector<f64>]) -> Result<LtpwlSystem> {
    if points.is_empty() {
        return Err(Error::Lattice("at least one linearization point is required".into()));
    }
    let m = model.state_dim();
    if model.obs_dim() != m {
        return Err(Error::Lattice(format!(
            "componentwise linearization needs obs_dim == state_dim, got {} and {m}",
            model.obs_dim()
        )));
    }
    let mut f_segs = vec![Vec::new(); m];
    let mut h_segs = vec![Vec::new(); m];
    for p in points {
        if p.len() != m {
            return Err(Error::Dimension(format!("linearization point of size {}", p.len())));
        }
        let jf = model.transition_jacobian(p);
        let jh = model.observation_jacobian(p);
        let tol = 1e-12 * (1.0 + jf.amax().max(jh.amax()));
        if !is_diagonal(&jf, tol) || !is_diagonal(&jh, tol) {
            return Err(Error::Lattice(
                "componentwise lattice linearization requires diagonal Jacobians of f and h".into(),
            ));
        }
        let fx = model.transition(p);
        let hx = model.observe(p);
        for c in 0..m {
            if f_segs[c].iter().any(|s: &AffineSegment| (s.anchor - p[c]).abs() <= 1e-9) {
                continue;
            }
            f_segs[c].push(AffineSegment::tangent(p[c], fx[c], jf[(c, c)]));
            h_segs[c].push(AffineSegment::tangent(p[c], hx[c], jh[(c, c)]));
        }
    }
    Ok(LtpwlSystem {
        transition: f_segs.iter().map(|s| build_ltpwl_1d(s)).collect::<Result<_>>()?,
        observation: h_segs.iter().map(|s| build_ltpwl_1d(s)).collect::<Result<_>>()?,
    })
}
