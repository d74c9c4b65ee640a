//! Inner loops of the fused edge-to-node op over all `(i, j)` pairs of one
//! window and filter. Every loop is an elementwise update along one side with
//! the other side's entry held fixed, so the compiler vectorizes it without
//! reassociating any sum; wider instruction sets are picked at runtime and all
//! paths give bit-identical results.

/// Rows processed together so their accumulators stay in registers.
const BLOCK: usize = 32;

#[inline(always)]
fn phi(z: f64, s: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        s * z
    }
}

#[inline(always)]
fn dphi(z: f64, s: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        s
    }
}

/// `out[i] = sum_j g[j] phi(a[i] + b[j])`, summed in order of `j`.
#[inline(always)]
fn forward_body(a: &[f64], b: &[f64], g: &[f64], s: f64, out: &mut [f64]) {
    for (oc, ac) in out.chunks_mut(BLOCK).zip(a.chunks(BLOCK)) {
        let mut acc = [0.0; BLOCK];
        let mut ab = [0.0; BLOCK];
        ab[..ac.len()].copy_from_slice(ac);
        for (&bj, &gj) in b.iter().zip(g) {
            for (o, &ai) in acc.iter_mut().zip(&ab) {
                *o += gj * phi(ai + bj, s);
            }
        }
        oc.copy_from_slice(&acc[..oc.len()]);
    }
}

/// Adjoints of `forward_body` given `du = dL/dout`; `da` is overwritten, `db`
/// and `dg` accumulate.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_body(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    du: &[f64],
    s: f64,
    da: &mut [f64],
    db: &mut [f64],
    dg: &mut [f64],
) {
    for (dc, ac) in da.chunks_mut(BLOCK).zip(a.chunks(BLOCK)) {
        let mut acc = [0.0; BLOCK];
        let mut ab = [0.0; BLOCK];
        ab[..ac.len()].copy_from_slice(ac);
        for (&bj, &gj) in b.iter().zip(g) {
            for (d, &ai) in acc.iter_mut().zip(&ab) {
                *d += gj * dphi(ai + bj, s);
            }
        }
        dc.copy_from_slice(&acc[..dc.len()]);
    }
    for (d, &di) in da.iter_mut().zip(du) {
        *d *= di;
    }
    let chunks = db
        .chunks_mut(BLOCK)
        .zip(dg.chunks_mut(BLOCK))
        .zip(b.chunks(BLOCK).zip(g.chunks(BLOCK)));
    for ((dbc, dgc), (bc, gc)) in chunks {
        let (mut sb, mut sg) = ([0.0; BLOCK], [0.0; BLOCK]);
        let (mut bb, mut gb) = ([0.0; BLOCK], [0.0; BLOCK]);
        bb[..bc.len()].copy_from_slice(bc);
        gb[..gc.len()].copy_from_slice(gc);
        for (&ai, &di) in a.iter().zip(du) {
            for l in 0..BLOCK {
                let z = ai + bb[l];
                sb[l] += di * dphi(z, s);
                sg[l] += di * phi(z, s);
            }
        }
        for l in 0..bc.len() {
            dbc[l] += gb[l] * sb[l];
            dgc[l] += sg[l];
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn forward_avx512(a: &[f64], b: &[f64], g: &[f64], s: f64, out: &mut [f64]) {
        super::forward_body(a, b, g, s, out)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn forward_avx2(a: &[f64], b: &[f64], g: &[f64], s: f64, out: &mut [f64]) {
        super::forward_body(a, b, g, s, out)
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn backward_avx512(
        a: &[f64],
        b: &[f64],
        g: &[f64],
        du: &[f64],
        s: f64,
        da: &mut [f64],
        db: &mut [f64],
        dg: &mut [f64],
    ) {
        super::backward_body(a, b, g, du, s, da, db, dg)
    }

    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn backward_avx2(
        a: &[f64],
        b: &[f64],
        g: &[f64],
        du: &[f64],
        s: f64,
        da: &mut [f64],
        db: &mut [f64],
        dg: &mut [f64],
    ) {
        super::backward_body(a, b, g, du, s, da, db, dg)
    }
}

pub(super) fn pair_forward(a: &[f64], b: &[f64], g: &[f64], s: f64, out: &mut [f64]) {
    debug_assert!(b.len() == g.len() && a.len() == out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the required instruction set was detected at runtime.
            return unsafe { simd::forward_avx512(a, b, g, s, out) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { simd::forward_avx2(a, b, g, s, out) };
        }
    }
    forward_body(a, b, g, s, out)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn pair_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    du: &[f64],
    s: f64,
    da: &mut [f64],
    db: &mut [f64],
    dg: &mut [f64],
) {
    debug_assert!(b.len() == g.len() && b.len() == db.len() && b.len() == dg.len());
    debug_assert!(a.len() == du.len() && a.len() == da.len());
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the required instruction set was detected at runtime.
            return unsafe { simd::backward_avx512(a, b, g, du, s, da, db, dg) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { simd::backward_avx2(a, b, g, du, s, da, db, dg) };
        }
    }
    backward_body(a, b, g, du, s, da, db, dg)
}
