//! Exact and random-batch force evaluation.
//!
//! The per-particle operations (`force_full`, `force_batch`, `chi`,
//! `lambda_i`) iterate neighbors in ascending index order, so a single-batch
//! division reproduces the full force bit for bit. The whole-system
//! accumulators used by the integrator additionally exploit the parity of
//! radial profiles to evaluate each unordered pair once; they agree with the
//! per-particle operations to rounding.

use super::kernel::{InteractionKernel, Parity, RadialKernel};
use super::{ParticleState, SystemModel};
use crate::batching::BatchPartition;
use crate::error::{RbmError, Result};

impl SystemModel {
    /// Evaluates the pair kernel `K_ij(xi, xj)` for distinct particles.
    pub fn kernel_eval(&self, i: usize, j: usize, xi: &[f64], xj: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_particles();
        if i >= n || j >= n {
            return Err(RbmError::invalid_argument(format!(
                "particle index out of range: ({i}, {j}) with N = {n}"
            )));
        }
        if i == j {
            return Err(RbmError::invalid_argument(
                "kernel_eval requires distinct particle indices",
            ));
        }
        let d = self.dim();
        if xi.len() != d || xj.len() != d {
            return Err(RbmError::invalid_argument(format!(
                "position vectors must have dimension {d}"
            )));
        }
        if !xi.iter().chain(xj).all(|c| c.is_finite()) {
            return Err(RbmError::numeric("kernel_eval received non-finite input"));
        }
        let mut rbuf = vec![0.0; d];
        let mut out = vec![0.0; d];
        self.kernel_pair_into(i, j, xi, xj, &mut rbuf, &mut out);
        Ok(out)
    }

    /// `K_ij(xi, xj)` without argument validation; `rbuf` and `out` must
    /// have length `d`.
    #[inline]
    pub(crate) fn kernel_pair_into(
        &self,
        i: usize,
        j: usize,
        xi: &[f64],
        xj: &[f64],
        rbuf: &mut [f64],
        out: &mut [f64],
    ) {
        match &self.kernel().interaction {
            InteractionKernel::Zero => out.fill(0.0),
            InteractionKernel::RadialSmooth(f) => {
                separation(xi, xj, rbuf);
                f.eval_into(rbuf, out);
            }
            InteractionKernel::Charged(f) => {
                separation(xi, xj, rbuf);
                f.eval_into(rbuf, out);
                let z = self.species().charges().expect("validated at build");
                let s = (z[i] as i32 * z[j] as i32) as f64;
                for o in out.iter_mut() {
                    *o *= s;
                }
            }
            InteractionKernel::PairwiseTable(table) => {
                separation(xi, xj, rbuf);
                let labels = self.species().labels();
                let f = table
                    .get(labels[i], labels[j])
                    .expect("validated at build");
                f.eval_into(rbuf, out);
            }
        }
    }

    /// The exact force on particle `i`:
    /// `b(x_i) + (1/(N-1)) sum_{j != i} m_j K_ij(x_i, x_j)`.
    /// Costs O(N) kernel evaluations.
    pub fn force_full(&self, i: usize, state: &ParticleState) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let n = self.n_particles();
        if n < 2 {
            return Err(RbmError::invalid_model(
                "full force needs at least 2 particles",
            ));
        }
        if i >= n {
            return Err(RbmError::invalid_argument(format!(
                "particle index {i} out of range for N = {n}"
            )));
        }
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut scratch = ForceScratch::new(d);
        self.interaction_sum_all(i, state.positions(), &mut scratch, &mut out);
        let scale = 1.0 / (n as f64 - 1.0);
        for o in out.iter_mut() {
            *o *= scale;
        }
        self.kernel().drift.add_into(state.position(i), &mut out);
        Ok(out)
    }

    /// The random-batch force on particle `i` under a fixed division:
    /// `b(x_i) + (1/(p-1)) sum_{j in batch(i), j != i} m_j K_ij(x_i, x_j)`.
    /// Costs O(p) kernel evaluations.
    pub fn force_batch(
        &self,
        i: usize,
        state: &ParticleState,
        partition: &BatchPartition,
    ) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.check_partition(partition)?;
        let p = self.batch_size();
        if p < 2 {
            return Err(RbmError::invalid_model(
                "batch force needs batch size at least 2",
            ));
        }
        let n = self.n_particles();
        if i >= n {
            return Err(RbmError::invalid_argument(format!(
                "particle index {i} out of range for N = {n}"
            )));
        }
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut scratch = ForceScratch::new(d);
        self.interaction_sum_batch(i, state.positions(), partition, &mut scratch, &mut out);
        let scale = 1.0 / (p as f64 - 1.0);
        for o in out.iter_mut() {
            *o *= scale;
        }
        self.kernel().drift.add_into(state.position(i), &mut out);
        Ok(out)
    }

    /// The per-particle random force error
    /// `chi_i = (1/(p-1)) sum_{batch} m_j K_ij - (1/(N-1)) sum_{all} m_j K_ij`,
    /// computed from the two interaction sums directly so the external drift
    /// never enters.
    pub fn chi(
        &self,
        i: usize,
        state: &ParticleState,
        partition: &BatchPartition,
    ) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.check_partition(partition)?;
        let n = self.n_particles();
        let p = self.batch_size();
        if n < 2 {
            return Err(RbmError::invalid_model("chi needs at least 2 particles"));
        }
        if p < 2 {
            return Err(RbmError::invalid_model("chi needs batch size at least 2"));
        }
        if i >= n {
            return Err(RbmError::invalid_argument(format!(
                "particle index {i} out of range for N = {n}"
            )));
        }
        let d = self.dim();
        let x = state.positions();
        let mut scratch = ForceScratch::new(d);
        let mut batch_sum = vec![0.0; d];
        self.interaction_sum_batch(i, x, partition, &mut scratch, &mut batch_sum);
        let mut full_sum = vec![0.0; d];
        self.interaction_sum_all(i, x, &mut scratch, &mut full_sum);
        let batch_scale = 1.0 / (p as f64 - 1.0);
        let full_scale = 1.0 / (n as f64 - 1.0);
        Ok(batch_sum
            .iter()
            .zip(&full_sum)
            .map(|(&b, &f)| batch_scale * b - full_scale * f)
            .collect())
    }

    /// The variance functional
    /// `Lambda_i = (1/(N-2)) sum_{j != i} |m_j K_ij - mean_l m_l K_il|^2`
    /// where the mean is `(1/(N-1)) sum_{l != i} m_l K_il`.
    pub fn lambda_i(&self, i: usize, state: &ParticleState) -> Result<f64> {
        self.check_state(state)?;
        let n = self.n_particles();
        if n < 3 {
            return Err(RbmError::invalid_model(
                "Lambda_i needs at least 3 particles",
            ));
        }
        if i >= n {
            return Err(RbmError::invalid_argument(format!(
                "particle index {i} out of range for N = {n}"
            )));
        }
        let d = self.dim();
        let x = state.positions();
        let xi = &x[i * d..(i + 1) * d];
        let m = self.weights().masses();
        let mut rbuf = vec![0.0; d];
        let mut kbuf = vec![0.0; d];
        // First pass: per-neighbor contributions and their mean.
        let mut terms = vec![0.0; n * d];
        let mut mean = vec![0.0; d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &x[j * d..(j + 1) * d];
            self.kernel_pair_into(i, j, xi, xj, &mut rbuf, &mut kbuf);
            for c in 0..d {
                let t = m[j] * kbuf[c];
                terms[j * d + c] = t;
                mean[c] += t;
            }
        }
        let inv = 1.0 / (n as f64 - 1.0);
        for c in mean.iter_mut() {
            *c *= inv;
        }
        // Second pass: squared deviation from the mean.
        let mut total = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            for c in 0..d {
                let dev = terms[j * d + c] - mean[c];
                total += dev * dev;
            }
        }
        Ok(total / (n as f64 - 2.0))
    }

    /// Unscaled interaction sum over all neighbors, ascending index order.
    fn interaction_sum_all(&self, i: usize, x: &[f64], scratch: &mut ForceScratch, out: &mut [f64]) {
        let d = self.dim();
        let n = self.n_particles();
        let m = self.weights().masses();
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &x[j * d..(j + 1) * d];
            self.kernel_pair_into(i, j, xi, xj, &mut scratch.rbuf, &mut scratch.kbuf);
            for (o, &k) in out.iter_mut().zip(&scratch.kbuf) {
                *o += m[j] * k;
            }
        }
    }

    /// Unscaled interaction sum over the batch containing `i`; members are
    /// stored ascending, so evaluation order matches `interaction_sum_all`
    /// when the batch is the whole system.
    fn interaction_sum_batch(
        &self,
        i: usize,
        x: &[f64],
        partition: &BatchPartition,
        scratch: &mut ForceScratch,
        out: &mut [f64],
    ) {
        let d = self.dim();
        let m = self.weights().masses();
        let xi = &x[i * d..(i + 1) * d];
        for &j in partition.batch_containing(i) {
            let j = j as usize;
            if j == i {
                continue;
            }
            let xj = &x[j * d..(j + 1) * d];
            self.kernel_pair_into(i, j, xi, xj, &mut scratch.rbuf, &mut scratch.kbuf);
            for (o, &k) in out.iter_mut().zip(&scratch.kbuf) {
                *o += m[j] * k;
            }
        }
    }

    /// Forces on every particle under full interaction, written to `out`
    /// (length `N*d`). Radial and charged kernels are accumulated pairwise
    /// (one kernel evaluation per unordered pair); table kernels fall back
    /// to the per-particle loop.
    pub(crate) fn forces_full_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n_particles();
        if n < 2 {
            return Err(RbmError::invalid_model(
                "full force needs at least 2 particles",
            ));
        }
        out.fill(0.0);
        match &self.kernel().interaction {
            InteractionKernel::Zero => {}
            InteractionKernel::RadialSmooth(f) => {
                self.pairwise_all(x, f, None, out);
            }
            InteractionKernel::Charged(f) => {
                let z = self.species().charges().expect("validated at build");
                self.pairwise_all(x, f, Some(z), out);
            }
            InteractionKernel::PairwiseTable(_) => {
                let mut scratch = ForceScratch::new(self.dim());
                let d = self.dim();
                let mut row = vec![0.0; d];
                for i in 0..n {
                    row.fill(0.0);
                    self.interaction_sum_all(i, x, &mut scratch, &mut row);
                    out[i * d..(i + 1) * d].copy_from_slice(&row);
                }
            }
        }
        self.finish_forces(x, 1.0 / (n as f64 - 1.0), out);
        Ok(())
    }

    /// Forces on every particle under batch interaction, written to `out`.
    pub(crate) fn forces_batch_into(
        &self,
        x: &[f64],
        partition: &BatchPartition,
        out: &mut [f64],
    ) -> Result<()> {
        let p = self.batch_size();
        if p < 2 {
            return Err(RbmError::invalid_model(
                "batch force needs batch size at least 2",
            ));
        }
        self.check_partition(partition)?;
        out.fill(0.0);
        match &self.kernel().interaction {
            InteractionKernel::Zero => {}
            InteractionKernel::RadialSmooth(f) => {
                self.pairwise_batches(x, partition, f, None, out);
            }
            InteractionKernel::Charged(f) => {
                let z = self.species().charges().expect("validated at build");
                self.pairwise_batches(x, partition, f, Some(z), out);
            }
            InteractionKernel::PairwiseTable(_) => {
                let mut scratch = ForceScratch::new(self.dim());
                let d = self.dim();
                let mut row = vec![0.0; d];
                for i in 0..self.n_particles() {
                    row.fill(0.0);
                    self.interaction_sum_batch(i, x, partition, &mut scratch, &mut row);
                    out[i * d..(i + 1) * d].copy_from_slice(&row);
                }
            }
        }
        self.finish_forces(x, 1.0 / (p as f64 - 1.0), out);
        Ok(())
    }

    /// Scales accumulated interaction sums and adds the external drift.
    fn finish_forces(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.dim();
        for o in out.iter_mut() {
            *o *= scale;
        }
        for i in 0..self.n_particles() {
            self.kernel()
                .drift
                .add_into(&x[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
    }

    fn pairwise_all(&self, x: &[f64], f: &RadialKernel, charges: Option<&[i8]>, acc: &mut [f64]) {
        let d = self.dim();
        let m = self.weights().masses();
        let mirror = match f.parity() {
            Parity::Odd => -1.0,
            Parity::Even => 1.0,
        };
        // The scalar 1d loop is the hot path for sweeps and benches; keep
        // the kernel math statically dispatched so it inlines.
        if d == 1 {
            match *f {
                RadialKernel::Linear { gain } => {
                    pair_loop_all_1d(x, m, charges, mirror, acc, move |r| gain * r)
                }
                RadialKernel::Gaussian { amp, width } => {
                    let inv_w2 = 1.0 / (width * width);
                    pair_loop_all_1d(x, m, charges, mirror, acc, move |r| {
                        amp * r * (-r * r * inv_w2).exp()
                    })
                }
                RadialKernel::Cosine { amp, freq } => {
                    pair_loop_all_1d(x, m, charges, mirror, acc, move |r| amp * (freq * r).cos())
                }
                RadialKernel::Constant { value } => {
                    pair_loop_all_1d(x, m, charges, mirror, acc, move |_| value)
                }
            }
        } else {
            match *f {
                RadialKernel::Linear { gain } => {
                    pair_loop_all_nd(d, x, m, charges, mirror, acc, move |r, out| {
                        for (o, &rc) in out.iter_mut().zip(r) {
                            *o = gain * rc;
                        }
                    })
                }
                RadialKernel::Gaussian { amp, width } => {
                    let inv_w2 = 1.0 / (width * width);
                    pair_loop_all_nd(d, x, m, charges, mirror, acc, move |r, out| {
                        let mut r2 = 0.0;
                        for &rc in r {
                            r2 += rc * rc;
                        }
                        let w = amp * (-r2 * inv_w2).exp();
                        for (o, &rc) in out.iter_mut().zip(r) {
                            *o = w * rc;
                        }
                    })
                }
                RadialKernel::Cosine { amp, freq } => {
                    pair_loop_all_nd(d, x, m, charges, mirror, acc, move |r, out| {
                        for (o, &rc) in out.iter_mut().zip(r) {
                            *o = amp * (freq * rc).cos();
                        }
                    })
                }
                RadialKernel::Constant { value } => {
                    pair_loop_all_nd(d, x, m, charges, mirror, acc, move |_, out| out.fill(value))
                }
            }
        }
    }

    fn pairwise_batches(
        &self,
        x: &[f64],
        partition: &BatchPartition,
        f: &RadialKernel,
        charges: Option<&[i8]>,
        acc: &mut [f64],
    ) {
        let d = self.dim();
        let m = self.weights().masses();
        let mirror = match f.parity() {
            Parity::Odd => -1.0,
            Parity::Even => 1.0,
        };
        if d == 1 {
            match *f {
                RadialKernel::Linear { gain } => {
                    pair_loop_batches_1d(x, m, charges, mirror, acc, partition, move |r| gain * r)
                }
                RadialKernel::Gaussian { amp, width } => {
                    let inv_w2 = 1.0 / (width * width);
                    pair_loop_batches_1d(x, m, charges, mirror, acc, partition, move |r| {
                        amp * r * (-r * r * inv_w2).exp()
                    })
                }
                RadialKernel::Cosine { amp, freq } => pair_loop_batches_1d(
                    x,
                    m,
                    charges,
                    mirror,
                    acc,
                    partition,
                    move |r| amp * (freq * r).cos(),
                ),
                RadialKernel::Constant { value } => {
                    pair_loop_batches_1d(x, m, charges, mirror, acc, partition, move |_| value)
                }
            }
        } else {
            match *f {
                RadialKernel::Linear { gain } => {
                    pair_loop_batches_nd(d, x, m, charges, mirror, acc, partition, move |r, out| {
                        for (o, &rc) in out.iter_mut().zip(r) {
                            *o = gain * rc;
                        }
                    })
                }
                RadialKernel::Gaussian { amp, width } => {
                    let inv_w2 = 1.0 / (width * width);
                    pair_loop_batches_nd(d, x, m, charges, mirror, acc, partition, move |r, out| {
                        let mut r2 = 0.0;
                        for &rc in r {
                            r2 += rc * rc;
                        }
                        let w = amp * (-r2 * inv_w2).exp();
                        for (o, &rc) in out.iter_mut().zip(r) {
                            *o = w * rc;
                        }
                    })
                }
                RadialKernel::Cosine { amp, freq } => {
                    pair_loop_batches_nd(d, x, m, charges, mirror, acc, partition, move |r, out| {
                        for (o, &rc) in out.iter_mut().zip(r) {
                            *o = amp * (freq * rc).cos();
                        }
                    })
                }
                RadialKernel::Constant { value } => pair_loop_batches_nd(
                    d,
                    x,
                    m,
                    charges,
                    mirror,
                    acc,
                    partition,
                    move |_, out| out.fill(value),
                ),
            }
        }
    }

    pub(crate) fn check_state(&self, state: &ParticleState) -> Result<()> {
        if state.dim() != self.dim() || state.n_particles() != self.n_particles() {
            return Err(RbmError::invalid_argument(format!(
                "state shape ({} x {}) does not match model ({} x {})",
                state.n_particles(),
                state.dim(),
                self.n_particles(),
                self.dim()
            )));
        }
        if state.velocities().is_some() != self.has_velocities() {
            return Err(RbmError::invalid_argument(
                "state velocity presence does not match dynamics order",
            ));
        }
        state.check_finite()
    }

    pub(crate) fn check_partition(&self, partition: &BatchPartition) -> Result<()> {
        if partition.n_particles() != self.n_particles()
            || partition.batch_size() != self.batch_size()
        {
            return Err(RbmError::invalid_argument(format!(
                "partition shape (N = {}, p = {}) does not match model (N = {}, p = {})",
                partition.n_particles(),
                partition.batch_size(),
                self.n_particles(),
                self.batch_size()
            )));
        }
        Ok(())
    }
}

#[inline]
fn pair_sign(charges: Option<&[i8]>, i: usize, j: usize) -> f64 {
    match charges {
        Some(z) => (z[i] as i32 * z[j] as i32) as f64,
        None => 1.0,
    }
}

#[inline]
fn separation(xi: &[f64], xj: &[f64], out: &mut [f64]) {
    for ((o, &a), &b) in out.iter_mut().zip(xi).zip(xj) {
        *o = a - b;
    }
}

#[inline]
fn pair_loop_all_1d<K: Fn(f64) -> f64>(
    x: &[f64],
    m: &[f64],
    charges: Option<&[i8]>,
    mirror: f64,
    acc: &mut [f64],
    eval: K,
) {
    let n = x.len();
    match charges {
        None => {
            for i in 0..n {
                let xi = x[i];
                let mi_mirror = m[i] * mirror;
                let (_, acc_tail) = acc.split_at_mut(i + 1);
                let mut acc_i = 0.0;
                for ((&xj, &mj), aj) in x[i + 1..].iter().zip(&m[i + 1..]).zip(acc_tail) {
                    let fv = eval(xi - xj);
                    acc_i += mj * fv;
                    *aj += mi_mirror * fv;
                }
                acc[i] += acc_i;
            }
        }
        Some(z) => {
            for i in 0..n {
                let xi = x[i];
                let mi_mirror = m[i] * mirror;
                let zi = z[i] as i32;
                let (_, acc_tail) = acc.split_at_mut(i + 1);
                let mut acc_i = 0.0;
                for (((&xj, &mj), &zj), aj) in x[i + 1..]
                    .iter()
                    .zip(&m[i + 1..])
                    .zip(&z[i + 1..])
                    .zip(acc_tail)
                {
                    let s = (zi * zj as i32) as f64;
                    let fv = s * eval(xi - xj);
                    acc_i += mj * fv;
                    *aj += mi_mirror * fv;
                }
                acc[i] += acc_i;
            }
        }
    }
}

#[inline]
fn pair_loop_batches_1d<K: Fn(f64) -> f64>(
    x: &[f64],
    m: &[f64],
    charges: Option<&[i8]>,
    mirror: f64,
    acc: &mut [f64],
    partition: &BatchPartition,
    eval: K,
) {
    for batch in partition.batches() {
        for (pos, &iu) in batch.iter().enumerate() {
            let i = iu as usize;
            let xi = x[i];
            let mi = m[i];
            let mut acc_i = 0.0;
            for &ju in &batch[pos + 1..] {
                let j = ju as usize;
                let fv = pair_sign(charges, i, j) * eval(xi - x[j]);
                acc_i += m[j] * fv;
                acc[j] += mi * mirror * fv;
            }
            acc[i] += acc_i;
        }
    }
}

#[inline]
fn pair_loop_all_nd<K: Fn(&[f64], &mut [f64])>(
    d: usize,
    x: &[f64],
    m: &[f64],
    charges: Option<&[i8]>,
    mirror: f64,
    acc: &mut [f64],
    eval: K,
) {
    let n = x.len() / d;
    let mut rbuf = vec![0.0; d];
    let mut fbuf = vec![0.0; d];
    for i in 0..n {
        for j in (i + 1)..n {
            for c in 0..d {
                rbuf[c] = x[i * d + c] - x[j * d + c];
            }
            eval(&rbuf, &mut fbuf);
            let s = pair_sign(charges, i, j);
            for c in 0..d {
                let fc = s * fbuf[c];
                acc[i * d + c] += m[j] * fc;
                acc[j * d + c] += m[i] * mirror * fc;
            }
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn pair_loop_batches_nd<K: Fn(&[f64], &mut [f64])>(
    d: usize,
    x: &[f64],
    m: &[f64],
    charges: Option<&[i8]>,
    mirror: f64,
    acc: &mut [f64],
    partition: &BatchPartition,
    eval: K,
) {
    let mut rbuf = vec![0.0; d];
    let mut fbuf = vec![0.0; d];
    for batch in partition.batches() {
        for (pos, &iu) in batch.iter().enumerate() {
            let i = iu as usize;
            for &ju in &batch[pos + 1..] {
                let j = ju as usize;
                for c in 0..d {
                    rbuf[c] = x[i * d + c] - x[j * d + c];
                }
                eval(&rbuf, &mut fbuf);
                let s = pair_sign(charges, i, j);
                for c in 0..d {
                    let fc = s * fbuf[c];
                    acc[i * d + c] += m[j] * fc;
                    acc[j * d + c] += m[i] * mirror * fc;
                }
            }
        }
    }
}

struct ForceScratch {
    rbuf: Vec<f64>,
    kbuf: Vec<f64>,
}

impl ForceScratch {
    fn new(d: usize) -> Self {
        ForceScratch {
            rbuf: vec![0.0; d],
            kbuf: vec![0.0; d],
        }
    }
}
