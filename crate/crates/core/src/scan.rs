//! Linear recurrences `h_t = a_t ⊙ h_{t-1} + b_t` and the selective-scan
//! kernel built on top of them.
//!
//! The blocked evaluation splits the sequence into chunks, scans each chunk
//! from a zero state while tracking the running product of `a`, then
//! propagates chunk-boundary carries. Chunks are independent in the first
//! and last pass and run on the rayon pool for long sequences.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BLOCK: usize = 64;

/// Sequences shorter than this many scalar updates stay on one thread.
const PAR_SCAN_WORK: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanStrategy {
    Sequential,
    Blocked { block: usize },
}

impl Default for ScanStrategy {
    fn default() -> Self {
        ScanStrategy::Blocked { block: DEFAULT_BLOCK }
    }
}

fn check_lengths<T>(a: &[T], b: &[T], len: usize, width: usize) -> Result<()> {
    if a.len() != len * width || b.len() != len * width {
        return Err(Error::dim(format!(
            "recurrence over {len}x{width} given a of {} and b of {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Step-by-step evaluation from `h_0 = 0`. Rows of `a`/`b` are time steps.
pub fn linear_recurrence_sequential<T: Real>(a: &[T], b: &[T], len: usize, width: usize) -> Result<Vec<T>> {
    check_lengths(a, b, len, width)?;
    let mut h = vec![T::zero(); len * width];
    let mut prev = vec![T::zero(); width];
    for t in 0..len {
        let row = t * width;
        for w in 0..width {
            let v = a[row + w] * prev[w] + b[row + w];
            prev[w] = v;
            h[row + w] = v;
        }
    }
    Ok(h)
}

pub fn linear_recurrence<T: Real>(a: &[T], b: &[T], len: usize, width: usize) -> Result<Vec<T>> {
    linear_recurrence_with(a, b, len, width, ScanStrategy::default())
}

pub fn linear_recurrence_with<T: Real>(
    a: &[T],
    b: &[T],
    len: usize,
    width: usize,
    strategy: ScanStrategy,
) -> Result<Vec<T>> {
    match strategy {
        ScanStrategy::Sequential => linear_recurrence_sequential(a, b, len, width),
        ScanStrategy::Blocked { block } => {
            if block == 0 {
                return Err(Error::Contract("scan block size must be positive".into()));
            }
            check_lengths(a, b, len, width)?;
            Ok(blocked(a, b, len, width, block))
        }
    }
}

fn blocked<T: Real>(a: &[T], b: &[T], len: usize, width: usize, block: usize) -> Vec<T> {
    let mut h = vec![T::zero(); len * width];
    let mut prod = vec![T::one(); len * width];
    let chunk = block * width;
    let parallel = len * width >= PAR_SCAN_WORK;

    let local = |(k, (hc, pc)): (usize, (&mut [T], &mut [T]))| {
        let start = k * chunk;
        let steps = hc.len() / width;
        for s in 0..steps {
            let row = s * width;
            for w in 0..width {
                let av = a[start + row + w];
                let (hp, pp) = if s == 0 {
                    (T::zero(), T::one())
                } else {
                    (hc[row - width + w], pc[row - width + w])
                };
                hc[row + w] = av * hp + b[start + row + w];
                pc[row + w] = av * pp;
            }
        }
    };
    if parallel {
        h.par_chunks_mut(chunk)
            .zip(prod.par_chunks_mut(chunk))
            .enumerate()
            .for_each(local);
    } else {
        h.chunks_mut(chunk).zip(prod.chunks_mut(chunk)).enumerate().for_each(local);
    }

    // carries[k] = true state entering chunk k
    let n_chunks = len.div_ceil(block);
    let mut carries = vec![vec![T::zero(); width]; n_chunks];
    for k in 1..n_chunks {
        let end = (k * block - 1) * width;
        let next: Vec<T> = (0..width)
            .map(|w| h[end + w] + prod[end + w] * carries[k - 1][w])
            .collect();
        carries[k] = next;
    }

    let fix = |(k, (hc, pc)): (usize, (&mut [T], &[T]))| {
        if k == 0 {
            return;
        }
        let carry = &carries[k];
        for (i, (hv, &pv)) in hc.iter_mut().zip(pc.iter()).enumerate() {
            *hv += pv * carry[i % width];
        }
    };
    if parallel {
        h.par_chunks_mut(chunk)
            .zip(prod.par_chunks(chunk))
            .enumerate()
            .for_each(fix);
    } else {
        h.chunks_mut(chunk).zip(prod.chunks(chunk)).enumerate().for_each(fix);
    }
    h
}

/// Shapes of one selective-scan call; the batch holds `batch` independent
/// sequences of `len` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

/// Inputs of the fused selective-scan kernel, all row-major:
/// `x`, `delta`: `[batch, len, d_inner]`; `a`: `[d_inner, d_state]`;
/// `b`, `c`: `[batch, len, d_state]`; `d`: `[d_inner]`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
}

impl<T> ScanInputs<'_, T> {
    fn check(&self, dims: ScanDims) -> Result<()> {
        let ScanDims {
            batch,
            len,
            d_inner,
            d_state,
        } = dims;
        let ok = self.x.len() == batch * len * d_inner
            && self.delta.len() == batch * len * d_inner
            && self.a.len() == d_inner * d_state
            && self.b.len() == batch * len * d_state
            && self.c.len() == batch * len * d_state
            && self.d.len() == d_inner;
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!("selective scan inputs inconsistent with {dims:?}")))
        }
    }
}

/// Discretized transition and input for one sequence, each
/// `[len, d_inner * d_state]`.
fn discretize<T: Real>(inp: &ScanInputs<'_, T>, dims: ScanDims, item: usize) -> (Vec<T>, Vec<T>) {
    let ScanDims {
        len,
        d_inner,
        d_state,
        ..
    } = dims;
    let width = d_inner * d_state;
    let mut abar = vec![T::zero(); len * width];
    let mut bx = vec![T::zero(); len * width];
    for t in 0..len {
        let row_i = (item * len + t) * d_inner;
        let row_s = (item * len + t) * d_state;
        for i in 0..d_inner {
            let dt = inp.delta[row_i + i];
            let dx = dt * inp.x[row_i + i];
            for n in 0..d_state {
                let k = t * width + i * d_state + n;
                abar[k] = (dt * inp.a[i * d_state + n]).exp();
                bx[k] = dx * inp.b[row_s + n];
            }
        }
    }
    (abar, bx)
}

/// `y_t = h_t · c_t + d ⊙ x_t` for every sequence in the batch.
pub fn selective_scan_forward<T: Real>(
    inp: &ScanInputs<'_, T>,
    dims: ScanDims,
    strategy: ScanStrategy,
) -> Result<Vec<T>> {
    inp.check(dims)?;
    let ScanDims {
        batch,
        len,
        d_inner,
        d_state,
    } = dims;
    let width = d_inner * d_state;
    let mut y = vec![T::zero(); batch * len * d_inner];
    for item in 0..batch {
        let (abar, bx) = discretize(inp, dims, item);
        let h = linear_recurrence_with(&abar, &bx, len, width, strategy)?;
        for t in 0..len {
            let row_i = (item * len + t) * d_inner;
            let row_s = (item * len + t) * d_state;
            for i in 0..d_inner {
                let hs = &h[t * width + i * d_state..t * width + (i + 1) * d_state];
                let read: T = hs.iter().zip(&inp.c[row_s..row_s + d_state]).map(|(&h, &c)| h * c).sum();
                y[row_i + i] = read + inp.d[i] * inp.x[row_i + i];
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("selective scan produced a non-finite value".into()));
    }
    Ok(y)
}

/// Gradients of the fused kernel with respect to each input, in the order
/// `x, delta, a, b, c, d`. States are recomputed rather than stored.
pub fn selective_scan_backward<T: Real>(
    inp: &ScanInputs<'_, T>,
    dims: ScanDims,
    dy: &[T],
    strategy: ScanStrategy,
) -> Result<[Vec<T>; 6]> {
    inp.check(dims)?;
    let ScanDims {
        batch,
        len,
        d_inner,
        d_state,
    } = dims;
    let width = d_inner * d_state;
    let mut gx = vec![T::zero(); inp.x.len()];
    let mut gdelta = vec![T::zero(); inp.delta.len()];
    let mut ga = vec![T::zero(); inp.a.len()];
    let mut gb = vec![T::zero(); inp.b.len()];
    let mut gc = vec![T::zero(); inp.c.len()];
    let mut gd = vec![T::zero(); inp.d.len()];

    for item in 0..batch {
        let (abar, bx) = discretize(inp, dims, item);
        let h = linear_recurrence_with(&abar, &bx, len, width, strategy)?;

        // Adjoint recurrence run back to front:
        // lam_t = dy_t c_t + abar_{t+1} ⊙ lam_{t+1}.
        let mut coef = vec![T::zero(); len * width];
        let mut src = vec![T::zero(); len * width];
        for s in 0..len {
            let t = len - 1 - s;
            let row_i = (item * len + t) * d_inner;
            let row_s = (item * len + t) * d_state;
            for i in 0..d_inner {
                let g = dy[row_i + i];
                for n in 0..d_state {
                    let k = i * d_state + n;
                    src[s * width + k] = g * inp.c[row_s + n];
                    if s > 0 {
                        coef[s * width + k] = abar[(t + 1) * width + k];
                    }
                }
            }
        }
        let lam_rev = linear_recurrence_with(&coef, &src, len, width, strategy)?;

        for t in 0..len {
            let lam = &lam_rev[(len - 1 - t) * width..(len - t) * width];
            let row_i = (item * len + t) * d_inner;
            let row_s = (item * len + t) * d_state;
            for i in 0..d_inner {
                let xv = inp.x[row_i + i];
                let dt = inp.delta[row_i + i];
                let g = dy[row_i + i];
                gd[i] += g * xv;
                let mut gxi = g * inp.d[i];
                let mut gdt = T::zero();
                for n in 0..d_state {
                    let k = i * d_state + n;
                    let bn = inp.b[row_s + n];
                    let l = lam[k];
                    gc[row_s + n] += g * h[t * width + k];
                    // input path: bx = dt * x * b
                    gdt += l * xv * bn;
                    gxi += l * dt * bn;
                    gb[row_s + n] += l * dt * xv;
                    // transition path: abar = exp(dt * a), multiplies h_{t-1}
                    if t > 0 {
                        let dab = l * h[(t - 1) * width + k] * abar[t * width + k];
                        gdt += dab * inp.a[k];
                        ga[k] += dab * dt;
                    }
                }
                gx[row_i + i] += gxi;
                gdelta[row_i + i] += gdt;
            }
        }
    }
    Ok([gx, gdelta, ga, gb, gc, gd])
}

/// Differentiable wrapper around the fused kernel.
///
/// `x`, `delta`: `[batch, len, d_inner]`; `a`: `[d_inner, d_state]`;
/// `b`, `c`: `[batch, len, d_state]`; `d`: `[d_inner]`.
pub fn selective_scan_op<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    strategy: ScanStrategy,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || a.rank() != 2 {
        return Err(Error::dim("selective scan expects x [batch, len, d_inner] and a [d_inner, d_state]"));
    }
    let dims = ScanDims {
        batch: x.dim(0),
        len: x.dim(1),
        d_inner: x.dim(2),
        d_state: a.dim(1),
    };
    let saved: [Vec<T>; 6] = [x.to_vec(), delta.to_vec(), a.to_vec(), b.to_vec(), c.to_vec(), d.to_vec()];
    let inputs = ScanInputs {
        x: &saved[0],
        delta: &saved[1],
        a: &saved[2],
        b: &saved[3],
        c: &saved[4],
        d: &saved[5],
    };
    let y = selective_scan_forward(&inputs, dims, strategy)?;
    Ok(Tensor::from_op(
        y,
        x.shape().to_vec(),
        "selective_scan",
        vec![x.clone(), delta.clone(), a.clone(), b.clone(), c.clone(), d.clone()],
        Box::new(move |g| {
            let inputs = ScanInputs {
                x: &saved[0],
                delta: &saved[1],
                a: &saved[2],
                b: &saved[3],
                c: &saved[4],
                d: &saved[5],
            };
            let grads = selective_scan_backward(&inputs, dims, g, strategy)
                .expect("shapes validated in forward");
            grads.into_iter().map(Some).collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_decay_passes_input_through() {
        let a = vec![0.0f64; 6];
        let b: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(linear_recurrence(&a, &b, 3, 2).unwrap(), b);
    }

    #[test]
    fn unit_decay_is_prefix_sum() {
        let a = vec![1.0f64; 5];
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let h = linear_recurrence_with(&a, &b, 5, 1, ScanStrategy::Blocked { block: 2 }).unwrap();
        assert_eq!(h, vec![1.0, 3.0, 6.0, 10.0, 15.0]);
    }

    #[test]
    fn length_mismatch() {
        let r = linear_recurrence(&[1.0f64; 4], &[1.0f64; 3], 4, 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn blocked_matches_sequential_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (len, width) = (64, 3);
        let a: Vec<f64> = (0..len * width).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..len * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seq = linear_recurrence_sequential(&a, &b, len, width).unwrap();
        for block in [1, 5, 16, 64, 100] {
            let blk = linear_recurrence_with(&a, &b, len, width, ScanStrategy::Blocked { block }).unwrap();
            let diff = seq.iter().zip(&blk).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "block {block}: {diff}");
        }
    }

    #[test]
    fn zero_readout_is_pure_skip() {
        let dims = ScanDims {
            batch: 1,
            len: 3,
            d_inner: 2,
            d_state: 2,
        };
        let x = [1.0, -2.0, 0.5, 3.0, 2.0, 1.0];
        let delta = [0.1; 6];
        let a = [-1.0, -2.0, -1.0, -2.0];
        let b = [1.0; 6];
        let c = [0.0; 6];
        let d = [2.0, 0.5];
        let inp = ScanInputs {
            x: &x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &d,
        };
        let y = selective_scan_forward(&inp, dims, ScanStrategy::default()).unwrap();
        assert_eq!(y, vec![2.0, -1.0, 1.0, 1.5, 4.0, 0.5]);
    }
}
