//! AND/OR interaction spectra, universal-matching reconstruction, salient
//! approximations and the Shapley re-allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    full_mask, moebius_in_place, order_of, reverse_table, zeta_in_place, LatticeArray,
    SubsetMask,
};

/// Which logical relationship an interaction encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    And,
    Or,
}

impl InteractionKind {
    pub const BOTH: [InteractionKind; 2] = [InteractionKind::And, InteractionKind::Or];

    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::And => "and",
            InteractionKind::Or => "or",
        }
    }
}

impl std::fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InteractionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(InteractionKind::And),
            "or" => Ok(InteractionKind::Or),
            other => Err(Error::Domain(format!("unknown interaction kind `{other}`"))),
        }
    }
}

/// Paired AND and OR effects over all `2^n` subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpectrum {
    and_effects: LatticeArray,
    or_effects: LatticeArray,
}

impl InteractionSpectrum {
    pub fn new(and_effects: LatticeArray, or_effects: LatticeArray) -> Result<Self> {
        if and_effects.n() != or_effects.n() {
            return Err(Error::Dimension {
                expected: and_effects.len(),
                found: or_effects.len(),
            });
        }
        Ok(Self {
            and_effects,
            or_effects,
        })
    }

    /// Extracts both families from an already split pair of value tables.
    pub fn from_split(v_and: &LatticeArray, v_or: &LatticeArray) -> Result<Self> {
        Self::new(and_interactions(v_and), or_interactions(v_or))
    }

    /// Explains `v` with AND interactions only (`v_or ≡ 0`).
    pub fn pure_and(v: &LatticeArray) -> Self {
        let or_effects = LatticeArray::from_raw(v.n(), vec![0.0; v.len()]);
        Self {
            and_effects: and_interactions(v),
            or_effects,
        }
    }

    pub fn n(&self) -> usize {
        self.and_effects.n()
    }

    pub fn and_effects(&self) -> &LatticeArray {
        &self.and_effects
    }

    pub fn or_effects(&self) -> &LatticeArray {
        &self.or_effects
    }

    pub fn effects(&self, kind: InteractionKind) -> &LatticeArray {
        match kind {
            InteractionKind::And => &self.and_effects,
            InteractionKind::Or => &self.or_effects,
        }
    }

    pub fn effect(&self, kind: InteractionKind, mask: usize) -> f64 {
        self.effects(kind)[mask]
    }

    /// All non-empty interactions as `(mask, kind, effect)`, AND family first.
    pub fn entries(&self) -> impl Iterator<Item = (usize, InteractionKind, f64)> + '_ {
        InteractionKind::BOTH.into_iter().flat_map(move |kind| {
            self.effects(kind)
                .iter()
                .enumerate()
                .skip(1)
                .map(move |(mask, &e)| (mask, kind, e))
        })
    }

    /// Largest `|I(S)|` over non-empty `S` across both families.
    pub fn max_abs_effect(&self) -> f64 {
        self.entries().map(|(_, _, e)| e.abs()).fold(0.0, f64::max)
    }

    /// `Σ_{S≠∅} |I_and(S)| + |I_or(S)|`.
    pub fn l1_mass(&self) -> f64 {
        self.entries().map(|(_, _, e)| e.abs()).sum()
    }

    /// Multiplies every effect, including the empty-set entries, by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            and_effects: self.and_effects.map(|e| e * factor),
            or_effects: self.or_effects.map(|e| e * factor),
        }
    }

    /// `Σ_S I_and(S) + Σ_{S≠∅} I_or(S)`, which equals the (denoised) output
    /// on the unmasked input.
    pub fn efficiency_total(&self) -> f64 {
        self.and_effects.iter().sum::<f64>() + self.or_effects.iter().skip(1).sum::<f64>()
    }

    /// Reconstructed output for every mask at once, in O(n·2^n).
    pub fn reconstruct_all(&self) -> LatticeArray {
        let n = self.n();
        let mut and_part = self.and_effects.as_slice().to_vec();
        zeta_in_place(&mut and_part);

        // Σ_{S∩T≠∅} I_or(S) = Σ_{S≠∅} I_or(S) − Σ_{∅≠S⊆N\T} I_or(S)
        let mut or_part = self.or_effects.as_slice().to_vec();
        or_part[0] = 0.0;
        zeta_in_place(&mut or_part);
        let full = full_mask(n);
        let total = or_part[full];
        let values = and_part
            .iter()
            .enumerate()
            .map(|(t, a)| a + total - or_part[full ^ t])
            .collect();
        LatticeArray::from_raw(n, values)
    }
}

/// `I_and(S) = Σ_{T⊆S} (-1)^{|S|-|T|} v_and(T)`.
pub fn and_interactions(v_and: &LatticeArray) -> LatticeArray {
    crate::lattice::moebius_transform(v_and)
}

/// `I_or(S) = -Σ_{T⊆S} (-1)^{|S|-|T|} v_or(N\T)` for `S ≠ ∅`. The empty
/// entry carries `v_or(∅)`, which a valid decomposition pins to zero.
pub fn or_interactions(v_or: &LatticeArray) -> LatticeArray {
    let mut out = reverse_table(v_or).into_vec();
    moebius_in_place(&mut out);
    for e in out.iter_mut() {
        *e = -*e;
    }
    out[0] = v_or.at_empty();
    LatticeArray::from_raw(v_or.n(), out)
}

/// `Σ_{S⊆T} I_and(S) + Σ_{S∩T≠∅} I_or(S)`, enumerated directly.
pub fn reconstruct(spectrum: &InteractionSpectrum, t: SubsetMask) -> f64 {
    let t = t.index();
    let and = spectrum.and_effects.as_slice();
    let or = spectrum.or_effects.as_slice();
    let mut total = 0.0;
    for s in 0..and.len() {
        if s & !t == 0 {
            total += and[s];
        }
        if s & t != 0 {
            total += or[s];
        }
    }
    total
}

/// One interaction kept by [`sparse_match`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedInteraction {
    pub mask: usize,
    pub kind: InteractionKind,
    pub effect: f64,
}

/// A spectrum truncated to its salient interactions, with the per-mask
/// reconstruction error that truncation causes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseApproximation {
    /// Non-empty interactions with `|effect| > threshold`. The empty-set
    /// terms are always kept and are not listed.
    pub retained: Vec<RetainedInteraction>,
    pub threshold: f64,
    /// `|full(T) − retained(T)|` per mask.
    pub errors: LatticeArray,
    pub max_error: f64,
    pub mean_error: f64,
}

/// Keeps effects with `|effect| > tau` (strict) and measures the matching
/// error over all masks.
pub fn sparse_match(spectrum: &InteractionSpectrum, tau: f64) -> Result<SparseApproximation> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Domain(format!("threshold must be >= 0, got {tau}")));
    }
    let n = spectrum.n();
    let mut retained = Vec::new();
    let mut dropped_and = spectrum.and_effects.as_slice().to_vec();
    let mut dropped_or = spectrum.or_effects.as_slice().to_vec();
    dropped_and[0] = 0.0;
    dropped_or[0] = 0.0;
    for (mask, kind, effect) in spectrum.entries() {
        if effect.abs() > tau {
            retained.push(RetainedInteraction { mask, kind, effect });
            match kind {
                InteractionKind::And => dropped_and[mask] = 0.0,
                InteractionKind::Or => dropped_or[mask] = 0.0,
            }
        }
    }
    let dropped = InteractionSpectrum {
        and_effects: LatticeArray::from_raw(n, dropped_and),
        or_effects: LatticeArray::from_raw(n, dropped_or),
    };
    let errors = dropped.reconstruct_all().map(f64::abs);
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(SparseApproximation {
        retained,
        threshold: tau,
        errors,
        max_error,
        mean_error,
    })
}

/// Shapley values obtained by splitting each interaction's effect evenly
/// among its participants.
pub fn shapley_values(spectrum: &InteractionSpectrum) -> Vec<f64> {
    let n = spectrum.n();
    let mut phi = vec![0.0; n];
    for (mask, _, effect) in spectrum.entries() {
        if effect == 0.0 {
            continue;
        }
        let share = effect / order_of(mask) as f64;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask & (1 << i) != 0 {
                *p += share;
            }
        }
    }
    phi
}

/// Largest variable count accepted by [`shapley_direct`].
pub const SHAPLEY_DIRECT_MAX_VARIABLES: usize = 14;

/// Exact Shapley values by weighted enumeration of marginal contributions,
/// `φ_i = Σ_{S⊆N\{i}} |S|!(n−|S|−1)!/n! · (v(S∪{i}) − v(S))`.
pub fn shapley_direct(v: &LatticeArray) -> Result<Vec<f64>> {
    let n = v.n();
    if n > SHAPLEY_DIRECT_MAX_VARIABLES {
        return Err(Error::Domain(format!(
            "direct Shapley enumeration is limited to n <= {SHAPLEY_DIRECT_MAX_VARIABLES}, got {n}"
        )));
    }
    // weight[k] = k!(n-k-1)!/n!, built as 1 / (n · C(n-1, k))
    let mut weights = Vec::with_capacity(n);
    let mut binom = 1.0f64;
    for k in 0..n {
        weights.push(1.0 / (n as f64 * binom));
        binom = binom * (n - 1 - k) as f64 / (k + 1) as f64;
    }
    let values = v.as_slice();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        *p = (0..values.len())
            .filter(|s| s & bit == 0)
            .map(|s| weights[order_of(s)] * (values[s | bit] - values[s]))
            .sum();
    }
    Ok(phi)
}

/// Folds every singleton OR effect into the matching AND effect. A single
/// variable is both "all of S present" and "any of S present", so this does
/// not change any reconstruction.
pub fn merge_first_order(spectrum: &InteractionSpectrum) -> InteractionSpectrum {
    let mut merged = spectrum.clone();
    for i in 0..spectrum.n() {
        let s = 1usize << i;
        merged.and_effects.as_mut_slice()[s] += spectrum.or_effects[s];
        merged.or_effects.as_mut_slice()[s] = 0.0;
    }
    merged
}
