//! Maximum-likelihood fitting of error models to profiling traces and
//! selection of the best-fitting family.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::device::{ErrorTrace, OperatingPoint};
use crate::dram::{DramGeometry, ErrorModel};
use crate::error::{Error, Result};

/// Score difference (nats) under which two fits count as equally likely.
pub const TIE_EPSILON: f64 = 2.0;
/// Maximum spread of per-line flip probabilities for an EM0 demotion.
pub const F_SPREAD_LIMIT: f64 = 0.05;
/// Maximum spread of per-line weak fractions, relative to their mean.
pub const P_RELATIVE_SPREAD_LIMIT: f64 = 0.05;

const MAX_ITERATIONS: u32 = 200;
const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: u8,
    pub model: ErrorModel,
    pub log_likelihood: f64,
    /// Free parameters actually estimated from data.
    pub n_params: usize,
    pub n_cells: u64,
    /// Set when a parameter clamped at 1 (every weak read flipped).
    pub degenerate: bool,
    pub iterations: u32,
}

impl FitResult {
    /// Log-likelihood penalized by `n_params / 2 · ln(n_cells)`.
    pub fn score(&self) -> f64 {
        if self.n_cells <= 1 {
            return self.log_likelihood;
        }
        self.log_likelihood - 0.5 * self.n_params as f64 * (self.n_cells as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub family: u8,
    pub model: ErrorModel,
    /// Family that won before any EM0 demotion.
    pub winner: u8,
    pub demoted: bool,
}

/// Observations of one group of cells sharing parameters.
#[derive(Debug, Default, Clone)]
struct Group {
    /// `(n0, n1, k0, k1)` of cells with at least one flip.
    flipped: Vec<(u32, u32, u32, u32)>,
    /// `(n0, n1, count)` of cells without flips.
    clean: Vec<(u32, u32, u64)>,
}

impl Group {
    fn cells(&self) -> u64 {
        self.flipped.len() as u64 + self.clean.iter().map(|c| c.2).sum::<u64>()
    }

    fn add_clean(&mut self, n0: u32, n1: u32, count: u64) {
        if count == 0 {
            return;
        }
        if let Some(c) = self.clean.iter_mut().find(|c| c.0 == n0 && c.1 == n1) {
            c.2 += count;
        } else {
            self.clean.push((n0, n1, count));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Params {
    p: f64,
    f0: f64,
    f1: f64,
}

#[inline]
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn log_likelihood(g: &Group, q: Params) -> f64 {
    let mut ll = 0.0;
    for &(n0, n1, k0, k1) in &g.flipped {
        let (n0, n1, k0, k1) = (f64::from(n0), f64::from(n1), f64::from(k0), f64::from(k1));
        ll += q.p.ln() + xlogy(k0, q.f0) + xlogy(n0 - k0, 1.0 - q.f0) + xlogy(k1, q.f1) + xlogy(n1 - k1, 1.0 - q.f1);
    }
    for &(n0, n1, c) in &g.clean {
        let stay = (1.0 - q.f0).powi(n0 as i32) * (1.0 - q.f1).powi(n1 as i32);
        ll += c as f64 * (q.p * stay + 1.0 - q.p).ln();
    }
    ll
}

/// Expectation-maximization over the latent weak indicator. With `split`
/// the two stored values get separate flip probabilities.
fn em(g: &Group, split: bool, init: Params) -> (Params, f64, u32) {
    let n = g.cells() as f64;
    let (mut k0, mut k1, mut fn0, mut fn1) = (0.0, 0.0, 0.0, 0.0);
    for &(a, b, c, d) in &g.flipped {
        fn0 += f64::from(a);
        fn1 += f64::from(b);
        k0 += f64::from(c);
        k1 += f64::from(d);
    }
    if n == 0.0 || k0 + k1 == 0.0 {
        return (Params { p: 0.0, f0: 0.0, f1: 0.0 }, 0.0, 0);
    }
    let nf = g.flipped.len() as f64;
    let mut q = init;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (mut w, mut wn0, mut wn1) = (0.0, 0.0, 0.0);
        for &(n0, n1, c) in &g.clean {
            let stay = q.p * (1.0 - q.f0).powi(n0 as i32) * (1.0 - q.f1).powi(n1 as i32);
            let post = if stay > 0.0 { stay / (stay + 1.0 - q.p) } else { 0.0 };
            let m = post * c as f64;
            w += m;
            wn0 += m * f64::from(n0);
            wn1 += m * f64::from(n1);
        }
        let p = ((nf + w) / n).min(1.0);
        let next = if split {
            let f0 = if fn0 + wn0 > 0.0 { k0 / (fn0 + wn0) } else { 0.0 };
            let f1 = if fn1 + wn1 > 0.0 { k1 / (fn1 + wn1) } else { 0.0 };
            Params { p, f0: f0.min(1.0), f1: f1.min(1.0) }
        } else {
            let f = ((k0 + k1) / (fn0 + fn1 + wn0 + wn1)).min(1.0);
            Params { p, f0: f, f1: f }
        };
        let change = (next.p - q.p).abs().max((next.f0 - q.f0).abs()).max((next.f1 - q.f1).abs());
        q = next;
        if change < TOLERANCE {
            break;
        }
    }
    (q, log_likelihood(g, q), iterations)
}

/// P = fraction of cells with a flip, F = mean flip rate among them.
fn default_init(g: &Group, split: bool) -> Params {
    let n = g.cells() as f64;
    let nf = g.flipped.len() as f64;
    let (mut r0, mut r1, mut r) = (0.0, 0.0, 0.0);
    for &(n0, n1, k0, k1) in &g.flipped {
        r += f64::from(k0 + k1) / f64::from(n0 + n1);
        r0 += if n0 > 0 { f64::from(k0) / f64::from(n0) } else { 0.0 };
        r1 += if n1 > 0 { f64::from(k1) / f64::from(n1) } else { 0.0 };
    }
    let nf = nf.max(1.0);
    let clamp = |x: f64| x.clamp(1e-9, 1.0 - 1e-9);
    let p = if n > 0.0 { g.flipped.len() as f64 / n } else { 0.0 };
    if split {
        Params { p, f0: clamp(r0 / nf), f1: clamp(r1 / nf) }
    } else {
        Params { p, f0: clamp(r / nf), f1: clamp(r / nf) }
    }
}

/// Shared-F start from the first two moments of per-cell flip rates:
/// `E[r] = P·F`, `E[r²] − E[r]/n = P·F²·(1 − 1/n)`.
fn moment_init(g: &Group) -> Params {
    let n = g.cells() as f64;
    let fallback = default_init(g, false);
    if n == 0.0 {
        return fallback;
    }
    let (mut m1, mut m2, mut reads) = (0.0, 0.0, 0.0);
    for &(n0, n1, k0, k1) in &g.flipped {
        let r = f64::from(k0 + k1) / f64::from(n0 + n1);
        m1 += r;
        m2 += r * r;
        reads += f64::from(n0 + n1);
    }
    for &(n0, n1, c) in &g.clean {
        reads += c as f64 * f64::from(n0 + n1);
    }
    let (m1, m2, reads) = (m1 / n, m2 / n, reads / n);
    if m1 <= 0.0 || reads <= 1.0 {
        return fallback;
    }
    let f = (m2 - m1 / reads) / (m1 * (1.0 - 1.0 / reads));
    if !(f.is_finite() && f > 0.0 && f <= 1.0) {
        return fallback;
    }
    let f = f.clamp(1e-9, 1.0 - 1e-9);
    Params { p: (m1 / f).min(1.0 - 1e-9), f0: f, f1: f }
}

fn region_group(trace: &ErrorTrace) -> Group {
    let mut g = Group::default();
    let mut flipped_per_class: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for r in trace.records() {
        let (n0, n1) = trace.reads(r.cell);
        g.flipped.push((n0, n1, r.flips_zero, r.flips_one));
        *flipped_per_class.entry((n0, n1)).or_default() += 1;
    }
    for ((n0, n1), count) in trace.read_classes() {
        let f = flipped_per_class.get(&(n0, n1)).copied().unwrap_or(0);
        g.add_clean(n0, n1, count - f);
    }
    g
}

/// Splits a trace's cells into per-line groups (bitlines or wordlines).
fn line_groups(trace: &ErrorTrace, bitlines: bool) -> Vec<Group> {
    let geom = &trace.geometry;
    let lines = if bitlines { geom.bits_per_row } else { geom.rows_per_bank } as usize;
    let line_of = |cell: u64| if bitlines { geom.bitline_of(cell) } else { geom.row_of(cell) } as usize;
    // Cells per (line, round-0 stored value).
    let mut counts = vec![[0u64; 2]; lines];
    for cell in trace.region.clone() {
        let c = geom.coord(cell);
        counts[line_of(cell)][usize::from(trace.pattern.base_bit(c.row, c.bit))] += 1;
    }
    let mut groups = vec![Group::default(); lines];
    for r in trace.records() {
        let c = geom.coord(r.cell);
        let l = line_of(r.cell);
        let (n0, n1) = trace.reads(r.cell);
        groups[l].flipped.push((n0, n1, r.flips_zero, r.flips_one));
        counts[l][usize::from(trace.pattern.base_bit(c.row, c.bit))] -= 1;
    }
    let half = trace.rounds / 2;
    let odd = trace.rounds % 2;
    for (g, c) in groups.iter_mut().zip(&counts) {
        g.add_clean(half + odd, half, c[0]);
        g.add_clean(half, half + odd, c[1]);
    }
    groups
}

fn is_degenerate(q: &Params) -> bool {
    q.p >= 1.0 - 1e-12 || q.f0 >= 1.0 - 1e-12 || q.f1 >= 1.0 - 1e-12
}

/// Fits one error-model family to a trace by maximum likelihood.
///
/// Families 0 and 3 are two- and three-parameter weak mixtures solved by
/// expectation-maximization. Families 1 and 2 fit every bitline or
/// wordline separately, started from moment estimates; lines without any
/// observed cell take the pooled family-0 estimate.
pub fn fit_params(trace: &ErrorTrace, family: u8) -> Result<FitResult> {
    if trace.cell_count() == 0 || trace.rounds == 0 {
        return Err(Error::EmptyTrace);
    }
    let n_cells = trace.cell_count();
    match family {
        0 | 3 => {
            let g = region_group(trace);
            let split = family == 3;
            let (q, ll, iterations) = em(&g, split, default_init(&g, split));
            let model = if split {
                ErrorModel::DataDependent { p: q.p, f_v0: q.f0, f_v1: q.f1 }
            } else {
                ErrorModel::Uniform { p: q.p, f_a: q.f0 }
            };
            Ok(FitResult {
                family,
                model,
                log_likelihood: ll,
                n_params: if split { 3 } else { 2 },
                n_cells,
                degenerate: is_degenerate(&q),
                iterations,
            })
        }
        1 | 2 => {
            let bitlines = family == 1;
            let groups = line_groups(trace, bitlines);
            let region = region_group(trace);
            let pooled = em(&region, false, default_init(&region, false)).0;
            let fits: Vec<(Params, f64, u32, bool)> = groups
                .par_iter()
                .map(|g| {
                    if g.cells() == 0 {
                        (pooled, 0.0, 0, false)
                    } else {
                        let (q, ll, it) = em(g, false, moment_init(g));
                        (q, ll, it, true)
                    }
                })
                .collect();
            let observed = fits.iter().filter(|f| f.3).count();
            let p: Vec<f64> = fits.iter().map(|f| f.0.p).collect();
            let f: Vec<f64> = fits.iter().map(|f| f.0.f0).collect();
            let model = if bitlines {
                ErrorModel::Bitline { p_b: p, f_b: f }
            } else {
                ErrorModel::Wordline { p_w: p, f_w: f }
            };
            Ok(FitResult {
                family,
                model,
                log_likelihood: fits.iter().map(|f| f.1).sum(),
                n_params: 2 * observed,
                n_cells,
                degenerate: fits.iter().any(|f| f.3 && is_degenerate(&f.0)),
                iterations: fits.iter().map(|f| f.2).max().unwrap_or(0),
            })
        }
        _ => Err(Error::InvalidArgument(format!("unknown error-model family {family}"))),
    }
}

/// Fits all four families, in family order.
pub fn fit_all(trace: &ErrorTrace) -> Result<Vec<FitResult>> {
    (0..4u8).into_par_iter().map(|f| fit_params(trace, f)).collect()
}

fn spread(xs: &[f64]) -> f64 {
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Whether a per-line model is close enough to uniform to be replaced by
/// its family-0 approximation.
pub fn is_near_uniform(model: &ErrorModel) -> bool {
    match model {
        ErrorModel::Bitline { p_b: p, f_b: f } | ErrorModel::Wordline { p_w: p, f_w: f } => {
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            spread(f) < F_SPREAD_LIMIT && spread(p) < P_RELATIVE_SPREAD_LIMIT * mean
        }
        _ => false,
    }
}

/// Picks the best family by penalized log-likelihood.
///
/// Ties within [`TIE_EPSILON`] between the top two fits go to family 0 when
/// either of them is family 0; exact ties go to the lower family number. A
/// winning per-line model that is nearly uniform is demoted to family 0.
pub fn select_model(fits: &[FitResult]) -> Result<Selection> {
    if fits.is_empty() {
        return Err(Error::InvalidArgument("model selection needs at least one fit".into()));
    }
    let mut order: Vec<&FitResult> = fits.iter().collect();
    order.sort_by(|a, b| b.score().total_cmp(&a.score()).then(a.family.cmp(&b.family)));
    let mut best = order[0];
    if let Some(second) = order.get(1) {
        if best.score() - second.score() <= TIE_EPSILON && second.family == 0 {
            best = second;
        }
    }
    if is_near_uniform(&best.model) {
        return Ok(Selection { family: 0, model: best.model.uniform_approximation(), winner: best.family, demoted: true });
    }
    Ok(Selection { family: best.family, model: best.model.clone(), winner: best.family, demoted: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFit {
    pub family: u8,
    pub params: Value,
    pub log_likelihood: f64,
    pub score: f64,
    pub n_params: usize,
    pub degenerate: bool,
    pub iterations: u32,
}

/// Per-family fits and the selected model of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub geometry: DramGeometry,
    pub region: [u64; 2],
    pub rounds: u32,
    pub trace_seed: u64,
    pub op: Option<OperatingPoint>,
    pub fits: Vec<FamilyFit>,
    pub chosen_family: u8,
    pub winner_family: u8,
    pub demoted: bool,
    pub chosen_params: Value,
}

impl FitReport {
    pub fn new(trace: &ErrorTrace, fits: &[FitResult], selection: &Selection) -> Self {
        Self {
            geometry: trace.geometry,
            region: [trace.region.start, trace.region.end],
            rounds: trace.rounds,
            trace_seed: trace.seed,
            op: trace.op,
            fits: fits
                .iter()
                .map(|f| FamilyFit {
                    family: f.family,
                    params: f.model.params_json(),
                    log_likelihood: f.log_likelihood,
                    score: f.score(),
                    n_params: f.n_params,
                    degenerate: f.degenerate,
                    iterations: f.iterations,
                })
                .collect(),
            chosen_family: selection.family,
            winner_family: selection.winner,
            demoted: selection.demoted,
            chosen_params: selection.model.params_json(),
        }
    }

    pub fn chosen_model(&self) -> Result<ErrorModel> {
        ErrorModel::from_params(self.chosen_family, self.chosen_params.clone())
    }
}

/// Fits every family to `trace` and selects one.
pub fn fit_and_select(trace: &ErrorTrace) -> Result<FitReport> {
    let fits = fit_all(trace)?;
    let selection = select_model(&fits)?;
    Ok(FitReport::new(trace, &fits, &selection))
}
