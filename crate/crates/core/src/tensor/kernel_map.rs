use super::kernels::rows_mut;
use super::Real;
use crate::error::{Error, Result};
use crate::par;

/// Sparse input→output row correspondence for a convolution with a
/// discrete kernel.
///
/// Each entry `(input, output, k, coeff)` contributes
/// `coeff · x[input] · W[k]` to `y[output]`, where `W` has shape
/// `(volume × c_in × c_out)`. Sparse voxel convolution uses coefficients of
/// one; kernel-point convolution uses the kernel-point influence.
#[derive(Clone, Debug)]
pub struct KernelMap {
    n_in: usize,
    n_out: usize,
    volume: usize,
    out_ptr: Vec<usize>,
    entries: Vec<(u32, u16, f64)>,
    in_ptr: Vec<usize>,
    in_entries: Vec<(u32, u16, f64)>,
    /// Per kernel index: `(output row, first entry, end entry)` runs.
    by_kernel: Vec<Vec<(u32, u32, u32)>>,
}

impl KernelMap {
    pub fn new(
        n_in: usize,
        n_out: usize,
        volume: usize,
        mut triplets: Vec<(usize, usize, usize, f64)>,
    ) -> Result<Self> {
        if n_in > u32::MAX as usize || n_out > u32::MAX as usize || volume > u16::MAX as usize {
            return Err(Error::InvalidArgument("kernel map too large".into()));
        }
        for &(i, o, k, c) in &triplets {
            if i >= n_in || o >= n_out || k >= volume || !c.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "kernel map entry ({i}, {o}, {k}, {c}) out of range"
                )));
            }
        }
        triplets.sort_by(|a, b| (a.1, a.2, a.0).cmp(&(b.1, b.2, b.0)));
        let mut out_ptr = vec![0usize; n_out + 1];
        for &(_, o, _, _) in &triplets {
            out_ptr[o + 1] += 1;
        }
        for i in 0..n_out {
            out_ptr[i + 1] += out_ptr[i];
        }
        let entries: Vec<(u32, u16, f64)> = triplets
            .iter()
            .map(|&(i, _, k, c)| (i as u32, k as u16, c))
            .collect();

        let mut by_kernel = vec![Vec::new(); volume];
        for o in 0..n_out {
            let (mut s, end) = (out_ptr[o], out_ptr[o + 1]);
            while s < end {
                let k = entries[s].1;
                let mut e = s + 1;
                while e < end && entries[e].1 == k {
                    e += 1;
                }
                by_kernel[k as usize].push((o as u32, s as u32, e as u32));
                s = e;
            }
        }

        triplets.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        let mut in_ptr = vec![0usize; n_in + 1];
        for &(i, _, _, _) in &triplets {
            in_ptr[i + 1] += 1;
        }
        for i in 0..n_in {
            in_ptr[i + 1] += in_ptr[i];
        }
        let in_entries = triplets
            .iter()
            .map(|&(_, o, k, c)| (o as u32, k as u16, c))
            .collect();

        Ok(Self {
            n_in,
            n_out,
            volume,
            out_ptr,
            entries,
            in_ptr,
            in_entries,
            by_kernel,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(input, k, coeff)` entries feeding output row `o`, sorted by `k`.
    pub fn row(&self, o: usize) -> &[(u32, u16, f64)] {
        &self.entries[self.out_ptr[o]..self.out_ptr[o + 1]]
    }

    pub(crate) fn forward<T: Real>(&self, x: &[T], w: &[T], c_in: usize, c_out: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_out * c_out];
        let work = self.entries.len() * c_in * c_out;
        rows_mut(&mut out, c_out, work, |o, row| {
            let mut acc = vec![T::zero(); c_in];
            let ents = self.row(o);
            let mut s = 0;
            while s < ents.len() {
                let k = ents[s].1;
                acc.iter_mut().for_each(|a| *a = T::zero());
                while s < ents.len() && ents[s].1 == k {
                    let (i, _, c) = ents[s];
                    let c = T::of(c);
                    let xr = &x[i as usize * c_in..(i as usize + 1) * c_in];
                    for (a, &xv) in acc.iter_mut().zip(xr) {
                        *a += c * xv;
                    }
                    s += 1;
                }
                let wk = &w[k as usize * c_in * c_out..(k as usize + 1) * c_in * c_out];
                for (ci, &a) in acc.iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    let wr = &wk[ci * c_out..(ci + 1) * c_out];
                    for (y, &wv) in row.iter_mut().zip(wr) {
                        *y += a * wv;
                    }
                }
            }
        });
        out
    }

    /// Gradient with respect to the input rows.
    pub(crate) fn backward_input<T: Real>(
        &self,
        dy: &[T],
        w: &[T],
        c_in: usize,
        c_out: usize,
    ) -> Vec<T> {
        let mut dx = vec![T::zero(); self.n_in * c_in];
        let work = self.entries.len() * c_in * c_out;
        rows_mut(&mut dx, c_in, work, |i, row| {
            for &(o, k, c) in &self.in_entries[self.in_ptr[i]..self.in_ptr[i + 1]] {
                let c = T::of(c);
                let dyr = &dy[o as usize * c_out..(o as usize + 1) * c_out];
                let wk = &w[k as usize * c_in * c_out..(k as usize + 1) * c_in * c_out];
                for (ci, d) in row.iter_mut().enumerate() {
                    let wr = &wk[ci * c_out..(ci + 1) * c_out];
                    let dot: T = wr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                    *d += c * dot;
                }
            }
        });
        dx
    }

    /// Gradient with respect to the `(volume × c_in × c_out)` weights.
    pub(crate) fn backward_weight<T: Real>(
        &self,
        x: &[T],
        dy: &[T],
        c_in: usize,
        c_out: usize,
    ) -> Vec<T> {
        let blocks = par::map_range(self.volume, |k| {
            let mut dw = vec![T::zero(); c_in * c_out];
            let mut acc = vec![T::zero(); c_in];
            for &(o, s, e) in &self.by_kernel[k] {
                acc.iter_mut().for_each(|a| *a = T::zero());
                for &(i, _, c) in &self.entries[s as usize..e as usize] {
                    let c = T::of(c);
                    let xr = &x[i as usize * c_in..(i as usize + 1) * c_in];
                    for (a, &xv) in acc.iter_mut().zip(xr) {
                        *a += c * xv;
                    }
                }
                let dyr = &dy[o as usize * c_out..(o as usize + 1) * c_out];
                for (ci, &a) in acc.iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    let dwr = &mut dw[ci * c_out..(ci + 1) * c_out];
                    for (d, &g) in dwr.iter_mut().zip(dyr) {
                        *d += a * g;
                    }
                }
            }
            dw
        });
        blocks.concat()
    }
}
