//! Interaction kernels and external drift fields.
//!
//! The interaction between particles `i` and `j` is a pair kernel
//! `K_ij(x, y)`. The built-in catalog is assembled from radial profiles
//! `F` applied to the separation `x - y`, optionally signed by per-particle
//! charges or selected per species pair. Each built-in documents its sup
//! bound so configurations can be checked against the boundedness the
//! analysis assumes.

/// Symmetry of a radial profile under `r -> -r`. The pairwise force
/// accumulator uses this to reuse one evaluation per unordered pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Odd,
    Even,
}

/// A smooth profile of the separation vector `r = x - y`.
#[derive(Debug, Clone, PartialEq)]
pub enum RadialKernel {
    /// `F(r) = gain * r`. Unbounded on all of space; bounded on any bounded
    /// configuration domain. Mainly useful for hand-checkable tests.
    Linear { gain: f64 },
    /// Gaussian envelope `F(r) = amp * r * exp(-|r|^2 / width^2)`.
    /// Bounded: `|F(r)| <= |amp| * width / sqrt(2e)`, smooth with bounded
    /// derivatives of all orders.
    Gaussian { amp: f64, width: f64 },
    /// Componentwise `F(r)_c = amp * cos(freq * r_c)`.
    /// Bounded: `|F(r)_c| <= |amp|`, all derivatives bounded.
    Cosine { amp: f64, freq: f64 },
    /// `F(r)_c = value` in every component.
    Constant { value: f64 },
}

impl RadialKernel {
    /// Writes `F(r)` into `out`. Both slices have the spatial dimension.
    #[inline]
    pub fn eval_into(&self, r: &[f64], out: &mut [f64]) {
        match *self {
            RadialKernel::Linear { gain } => {
                for (o, &rc) in out.iter_mut().zip(r) {
                    *o = gain * rc;
                }
            }
            RadialKernel::Gaussian { amp, width } => {
                let mut r2 = 0.0;
                for &rc in r {
                    r2 += rc * rc;
                }
                let w = amp * (-r2 / (width * width)).exp();
                for (o, &rc) in out.iter_mut().zip(r) {
                    *o = w * rc;
                }
            }
            RadialKernel::Cosine { amp, freq } => {
                for (o, &rc) in out.iter_mut().zip(r) {
                    *o = amp * (freq * rc).cos();
                }
            }
            RadialKernel::Constant { value } => out.fill(value),
        }
    }

    pub fn parity(&self) -> Parity {
        match self {
            RadialKernel::Linear { .. } | RadialKernel::Gaussian { .. } => Parity::Odd,
            RadialKernel::Cosine { .. } | RadialKernel::Constant { .. } => Parity::Even,
        }
    }

    /// Documented sup bound of `|F|` per component on all of space;
    /// infinity for the unbounded `Linear` profile.
    pub fn sup_bound(&self) -> f64 {
        match *self {
            RadialKernel::Linear { .. } => f64::INFINITY,
            RadialKernel::Gaussian { amp, width } => {
                amp.abs() * width.abs() / (2.0 * std::f64::consts::E).sqrt()
            }
            RadialKernel::Cosine { amp, .. } => amp.abs(),
            RadialKernel::Constant { value } => value.abs(),
        }
    }
}

/// One row of a per-species-pair kernel table.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub a: u32,
    pub b: u32,
    pub f: RadialKernel,
}

/// Kernel selected by the (ordered) species-label pair:
/// `K_ij(x, y) = T[label_i, label_j](x - y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    entries: Vec<PairEntry>,
}

impl PairTable {
    pub fn new(entries: Vec<PairEntry>) -> Self {
        PairTable { entries }
    }

    pub fn get(&self, a: u32, b: u32) -> Option<&RadialKernel> {
        self.entries
            .iter()
            .find(|e| e.a == a && e.b == b)
            .map(|e| &e.f)
    }

    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }
}

/// The pair interaction `K_ij`.
#[derive(Debug, Clone, PartialEq)]
pub enum InteractionKernel {
    /// No interaction.
    Zero,
    /// `K_ij(x, y) = F(x - y)`, identical for all pairs.
    RadialSmooth(RadialKernel),
    /// `K_ij(x, y) = z_i * z_j * F(x - y)` with charges `z in {-1, +1}`.
    Charged(RadialKernel),
    /// `K_ij(x, y) = T[label_i, label_j](x - y)`.
    PairwiseTable(PairTable),
}

/// External drift field `b`.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftField {
    Zero,
    /// `b(x) = gain * x`; one-sided Lipschitz with `beta = gain`.
    Linear { gain: f64 },
}

impl DriftField {
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            DriftField::Zero => out.fill(0.0),
            DriftField::Linear { gain } => {
                for (o, &xc) in out.iter_mut().zip(x) {
                    *o = gain * xc;
                }
            }
        }
    }

    /// Adds `b(x)` to `out` instead of overwriting.
    #[inline]
    pub fn add_into(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            DriftField::Zero => {}
            DriftField::Linear { gain } => {
                for (o, &xc) in out.iter_mut().zip(x) {
                    *o += gain * xc;
                }
            }
        }
    }

    /// Default one-sided Lipschitz constant for the built-in field.
    pub fn default_beta(&self) -> f64 {
        match *self {
            DriftField::Zero => 0.0,
            DriftField::Linear { gain } => gain,
        }
    }
}

/// Full interaction specification: pair kernel, external drift, and the
/// regularity metadata (declared, not inferred).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub interaction: InteractionKernel,
    pub drift: DriftField,
    /// Declared one-sided Lipschitz constant of the drift.
    pub one_sided_beta: f64,
    /// Declared polynomial growth exponent of the drift and its gradient.
    pub growth_exponent: u32,
}

impl KernelSpec {
    pub fn new(interaction: InteractionKernel, drift: DriftField) -> Self {
        let beta = drift.default_beta();
        KernelSpec {
            interaction,
            drift,
            one_sided_beta: beta,
            growth_exponent: 1,
        }
    }

    pub fn with_metadata(mut self, one_sided_beta: f64, growth_exponent: u32) -> Self {
        self.one_sided_beta = one_sided_beta;
        self.growth_exponent = growth_exponent;
        self
    }

    pub fn zero() -> Self {
        KernelSpec::new(InteractionKernel::Zero, DriftField::Zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_matches_closed_form() {
        let k = RadialKernel::Gaussian {
            amp: 1.0,
            width: 1.0,
        };
        let mut out = [0.0];
        k.eval_into(&[1.0], &mut out);
        assert!((out[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_sup_bound_holds_on_grid() {
        let k = RadialKernel::Gaussian {
            amp: 2.0,
            width: 0.7,
        };
        let bound = k.sup_bound();
        let mut out = [0.0];
        for step in -400..=400 {
            let r = step as f64 * 0.01;
            k.eval_into(&[r], &mut out);
            assert!(out[0].abs() <= bound + 1e-12, "r={r} F={} bound={bound}", out[0]);
        }
    }

    #[test]
    fn parity_is_consistent_with_evaluation() {
        let kernels = [
            RadialKernel::Linear { gain: 1.3 },
            RadialKernel::Gaussian {
                amp: 0.8,
                width: 1.1,
            },
            RadialKernel::Cosine {
                amp: 0.5,
                freq: 2.0,
            },
            RadialKernel::Constant { value: 0.4 },
        ];
        let mut fwd = [0.0, 0.0];
        let mut bwd = [0.0, 0.0];
        let r = [0.37, -1.42];
        let neg_r = [-0.37, 1.42];
        for k in kernels {
            k.eval_into(&r, &mut fwd);
            k.eval_into(&neg_r, &mut bwd);
            let sign = match k.parity() {
                Parity::Odd => -1.0,
                Parity::Even => 1.0,
            };
            for c in 0..2 {
                assert!((bwd[c] - sign * fwd[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn drift_linear_is_scaled_identity() {
        let b = DriftField::Linear { gain: -1.0 };
        let mut out = [0.0];
        b.eval_into(&[2.0], &mut out);
        assert_eq!(out[0], -2.0);
    }
}
