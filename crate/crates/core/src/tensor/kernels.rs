//! Same-padded 2-D convolution kernels.
//!
//! Each sample is processed on zero-padded planes whose rows are rounded up
//! to a whole number of vector lanes, so the inner loops never branch on
//! image borders. Filters are repacked as `[in][kh][kw][out]` so one
//! register tile covers several output channels for a single input row.
//!
//! Accumulation order is fixed by the loop structure, which keeps results
//! bitwise reproducible for a given instruction set.

use std::sync::OnceLock;

use super::simd::{Portable, Simd};
use super::Scalar;

/// Instruction set used by the convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Isa {
    Avx512,
    Avx2,
    Portable,
}

impl Isa {
    /// Best instruction set available for `f32` on this machine.
    pub fn detect() -> Isa {
        static ISA: OnceLock<Isa> = OnceLock::new();
        *ISA.get_or_init(|| {
            #[cfg(target_arch = "x86_64")]
            {
                if std::env::var_os("ANCINET_PORTABLE_KERNELS").is_some() {
                    return Isa::Portable;
                }
                if is_x86_feature_detected!("avx512f") {
                    return Isa::Avx512;
                }
                if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                    return Isa::Avx2;
                }
            }
            Isa::Portable
        })
    }

    pub(crate) fn lanes(self) -> usize {
        match self {
            Isa::Avx512 => 16,
            Isa::Avx2 => 8,
            Isa::Portable => super::simd::PORTABLE_LANES,
        }
    }

    /// Output channels per forward register tile.
    pub(crate) fn out_block(self) -> usize {
        match self {
            Isa::Avx512 => 8,
            Isa::Avx2 | Isa::Portable => 4,
        }
    }
}

/// Largest output-channel block used by any weight-gradient tile.
const GRAD_BLOCK: usize = 8;

/// Convolution shape: `out_ch` filters of `in_ch x kh x kw` over `h x w` planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    /// Geometry of the input-gradient pass, which is itself a same-padded
    /// convolution with channel roles swapped.
    pub(crate) fn transposed(&self) -> ConvGeom {
        ConvGeom {
            in_ch: self.out_ch,
            out_ch: self.in_ch,
            ..*self
        }
    }
}

/// Raw loop bounds shared by the kernels.
#[derive(Clone, Copy, Debug)]
pub struct Dims {
    k: usize,
    kh: usize,
    kw: usize,
    h: usize,
    hp: usize,
    /// Padded row stride of the input planes.
    ws: usize,
    /// Row width rounded up to whole vectors.
    wr: usize,
    /// Output channels rounded up to the tile block.
    fpad: usize,
}

impl Dims {
    fn new(g: &ConvGeom, lanes: usize, fpad: usize) -> Self {
        let wr = g.w.div_ceil(lanes) * lanes;
        Dims {
            k: g.in_ch,
            kh: g.kh,
            kw: g.kw,
            h: g.h,
            hp: g.h + g.kh - 1,
            ws: wr + g.kw - 1,
            wr,
            fpad,
        }
    }
}

/// Filters repacked as `[in][kh][kw][out_padded]`.
#[derive(Clone, Debug)]
pub(crate) struct PackedFilters<T> {
    data: Vec<T>,
    fpad: usize,
}

/// Packs `get(out, in, dy, dx)` for the forward tiles of `isa`.
pub(crate) fn pack_filters<T: Scalar>(
    g: &ConvGeom,
    isa: Isa,
    get: impl Fn(usize, usize, usize, usize) -> T,
) -> PackedFilters<T> {
    let ob = isa.out_block();
    let fpad = g.out_ch.div_ceil(ob) * ob;
    let mut data = vec![T::zero(); g.in_ch * g.kh * g.kw * fpad];
    for c in 0..g.in_ch {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let base = ((c * g.kh + dy) * g.kw + dx) * fpad;
                for o in 0..g.out_ch {
                    data[base + o] = get(o, c, dy, dx);
                }
            }
        }
    }
    PackedFilters { data, fpad }
}

/// Copies `ch` planes of `h x w` into zero-padded planes of `hp x ws`.
fn pad_planes<T: Scalar>(src: &[T], ch: usize, g: &ConvGeom, d: &Dims) -> Vec<T> {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut buf = vec![T::zero(); ch * d.hp * d.ws];
    for c in 0..ch {
        for y in 0..g.h {
            let s = &src[(c * g.h + y) * g.w..][..g.w];
            let dst = (c * d.hp + y + ph) * d.ws + pw;
            buf[dst..dst + g.w].copy_from_slice(s);
        }
    }
    buf
}

/// One sample of `out[o] = bias[o] + sum_c in[c] (*) filter[o][c]`.
///
/// `input` is `[in_ch][h][w]`, `out` is `[out_ch][h][w]`.
pub(crate) fn forward_sample<T: Scalar>(
    g: &ConvGeom,
    isa: Isa,
    filters: &PackedFilters<T>,
    bias: Option<&[T]>,
    input: &[T],
    out: &mut [T],
) {
    let d = Dims::new(g, isa.lanes(), filters.fpad);
    assert_eq!(input.len(), g.in_ch * g.h * g.w);
    assert_eq!(out.len(), g.out_ch * g.h * g.w);
    assert_eq!(filters.data.len(), g.in_ch * g.kh * g.kw * d.fpad);
    assert!(g.kh % 2 == 1 && g.kw % 2 == 1);

    let padded = pad_planes(input, g.in_ch, g, &d);
    let mut tile = vec![T::zero(); d.fpad * d.h * d.wr];
    // SAFETY: buffer sizes were checked above against the same `Dims`
    // used by the kernel to compute every offset.
    unsafe {
        T::conv_forward(isa, &d, padded.as_ptr(), filters.data.as_ptr(), tile.as_mut_ptr());
    }
    for o in 0..g.out_ch {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for y in 0..g.h {
            let src = &tile[(o * d.h + y) * d.wr..][..g.w];
            let dst = &mut out[(o * g.h + y) * g.w..][..g.w];
            for (t, &s) in dst.iter_mut().zip(src) {
                *t = s + b;
            }
        }
    }
}

/// Accumulates one sample's filter gradient into `dw` (`[out][in][kh][kw]`).
///
/// `grad` is the upstream gradient `[out_ch][h][w]`.
pub(crate) fn weight_grad_sample<T: Scalar>(
    g: &ConvGeom,
    isa: Isa,
    input: &[T],
    grad: &[T],
    dw: &mut [T],
) {
    let lanes = isa.lanes();
    let gpad = g.out_ch.div_ceil(GRAD_BLOCK) * GRAD_BLOCK;
    let d = Dims::new(g, lanes, gpad);
    assert_eq!(input.len(), g.in_ch * g.h * g.w);
    assert_eq!(grad.len(), g.out_ch * g.h * g.w);
    assert_eq!(dw.len(), g.out_ch * g.in_ch * g.kh * g.kw);

    let padded = pad_planes(input, g.in_ch, g, &d);
    let mut gbuf = vec![T::zero(); gpad * d.h * d.wr];
    for o in 0..g.out_ch {
        for y in 0..g.h {
            let src = &grad[(o * g.h + y) * g.w..][..g.w];
            gbuf[(o * d.h + y) * d.wr..][..g.w].copy_from_slice(src);
        }
    }
    // SAFETY: as in `forward_sample`; `gbuf` holds `gpad` zero-padded
    // channels so every output block read stays in bounds.
    unsafe {
        T::conv_weight_grad(isa, &d, padded.as_ptr(), gbuf.as_ptr(), dw.as_mut_ptr(), g.out_ch);
    }
}

#[inline(always)]
unsafe fn fwd_tile<S: Simd, const OB: usize, const NX: usize, const MW: usize>(
    d: &Dims,
    inp: *const S::T,
    w: *const S::T,
    o0: usize,
    y: usize,
    xt: usize,
    out: *mut S::T,
) {
    let mw = if MW == 0 { d.kw } else { MW };
    let mut acc = [[S::zero(); NX]; OB];
    for c in 0..d.k {
        for dy in 0..d.kh {
            let row = inp.add((c * d.hp + y + dy) * d.ws + xt);
            let wrow = w.add((c * d.kh + dy) * mw * d.fpad + o0);
            for dx in 0..mw {
                let mut s = [S::zero(); NX];
                for (t, v) in s.iter_mut().enumerate() {
                    *v = S::load(row.add(dx + t * S::LANES));
                }
                let wp = wrow.add(dx * d.fpad);
                for (j, accj) in acc.iter_mut().enumerate() {
                    let wj = S::splat(*wp.add(j));
                    for t in 0..NX {
                        accj[t] = S::mul_add(wj, s[t], accj[t]);
                    }
                }
            }
        }
    }
    for (j, accj) in acc.iter().enumerate() {
        for (t, &v) in accj.iter().enumerate() {
            S::store(out.add(((o0 + j) * d.h + y) * d.wr + xt + t * S::LANES), v);
        }
    }
}

#[inline(always)]
unsafe fn fwd_loop<S: Simd, const OB: usize, const NX: usize, const MW: usize>(
    d: &Dims,
    inp: *const S::T,
    w: *const S::T,
    out: *mut S::T,
) {
    let step = S::LANES * NX;
    let mut o0 = 0;
    while o0 < d.fpad {
        for y in 0..d.h {
            let mut xt = 0;
            while xt + step <= d.wr {
                fwd_tile::<S, OB, NX, MW>(d, inp, w, o0, y, xt, out);
                xt += step;
            }
            while xt < d.wr {
                fwd_tile::<S, OB, 1, MW>(d, inp, w, o0, y, xt, out);
                xt += S::LANES;
            }
        }
        o0 += OB;
    }
}

#[inline(always)]
unsafe fn fwd_dispatch<S: Simd, const OB: usize, const NX: usize>(
    d: &Dims,
    inp: *const S::T,
    w: *const S::T,
    out: *mut S::T,
) {
    match d.kw {
        1 => fwd_loop::<S, OB, NX, 1>(d, inp, w, out),
        3 => fwd_loop::<S, OB, NX, 3>(d, inp, w, out),
        5 => fwd_loop::<S, OB, NX, 5>(d, inp, w, out),
        7 => fwd_loop::<S, OB, NX, 7>(d, inp, w, out),
        _ => fwd_loop::<S, OB, NX, 0>(d, inp, w, out),
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
unsafe fn wgrad_tile<S: Simd, const OB: usize, const MW: usize>(
    d: &Dims,
    inp: *const S::T,
    grad: *const S::T,
    c: usize,
    dy: usize,
    o0: usize,
    dx0: usize,
    dw: *mut S::T,
    f: usize,
) {
    let mut acc = [[S::zero(); MW]; OB];
    for y in 0..d.h {
        let row = inp.add((c * d.hp + y + dy) * d.ws + dx0);
        let mut xt = 0;
        while xt < d.wr {
            let mut gv = [S::zero(); OB];
            for (j, v) in gv.iter_mut().enumerate() {
                *v = S::load(grad.add(((o0 + j) * d.h + y) * d.wr + xt));
            }
            for dx in 0..MW {
                let s = S::load(row.add(xt + dx));
                for j in 0..OB {
                    acc[j][dx] = S::mul_add(gv[j], s, acc[j][dx]);
                }
            }
            xt += S::LANES;
        }
    }
    for (j, accj) in acc.iter().enumerate() {
        if o0 + j >= f {
            break;
        }
        for (dx, &v) in accj.iter().enumerate() {
            let p = dw.add((((o0 + j) * d.k + c) * d.kh + dy) * d.kw + dx0 + dx);
            *p = *p + S::reduce(v);
        }
    }
}

#[inline(always)]
unsafe fn wgrad_loop<S: Simd, const OB: usize, const MW: usize>(
    d: &Dims,
    inp: *const S::T,
    grad: *const S::T,
    dw: *mut S::T,
    f: usize,
) {
    debug_assert!(d.kw.is_multiple_of(MW));
    for c in 0..d.k {
        for dy in 0..d.kh {
            let mut o0 = 0;
            while o0 < f {
                let mut dx0 = 0;
                while dx0 < d.kw {
                    wgrad_tile::<S, OB, MW>(d, inp, grad, c, dy, o0, dx0, dw, f);
                    dx0 += MW;
                }
                o0 += OB;
            }
        }
    }
}

/// Weight-gradient tiles keep `OB * MW` accumulators live; the block sizes
/// below fit that in each register file.
#[inline(always)]
unsafe fn wgrad_dispatch_wide<S: Simd>(
    d: &Dims,
    inp: *const S::T,
    grad: *const S::T,
    dw: *mut S::T,
    f: usize,
) {
    match d.kw {
        1 => wgrad_loop::<S, 8, 1>(d, inp, grad, dw, f),
        3 => wgrad_loop::<S, 4, 3>(d, inp, grad, dw, f),
        5 => wgrad_loop::<S, 2, 5>(d, inp, grad, dw, f),
        7 => wgrad_loop::<S, 2, 7>(d, inp, grad, dw, f),
        _ => wgrad_loop::<S, 4, 1>(d, inp, grad, dw, f),
    }
}

#[inline(always)]
unsafe fn wgrad_dispatch_narrow<S: Simd>(
    d: &Dims,
    inp: *const S::T,
    grad: *const S::T,
    dw: *mut S::T,
    f: usize,
) {
    match d.kw {
        1 => wgrad_loop::<S, 4, 1>(d, inp, grad, dw, f),
        3 => wgrad_loop::<S, 2, 3>(d, inp, grad, dw, f),
        5 => wgrad_loop::<S, 2, 5>(d, inp, grad, dw, f),
        7 => wgrad_loop::<S, 1, 7>(d, inp, grad, dw, f),
        _ => wgrad_loop::<S, 2, 1>(d, inp, grad, dw, f),
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::super::simd::{Avx2, Avx512};
    use super::*;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn fwd_avx512(d: &Dims, inp: *const f32, w: *const f32, out: *mut f32) {
        fwd_dispatch::<Avx512, 8, 2>(d, inp, w, out)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn fwd_avx2(d: &Dims, inp: *const f32, w: *const f32, out: *mut f32) {
        fwd_dispatch::<Avx2, 4, 2>(d, inp, w, out)
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn wgrad_avx512(
        d: &Dims,
        inp: *const f32,
        grad: *const f32,
        dw: *mut f32,
        f: usize,
    ) {
        wgrad_dispatch_wide::<Avx512>(d, inp, grad, dw, f)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn wgrad_avx2(
        d: &Dims,
        inp: *const f32,
        grad: *const f32,
        dw: *mut f32,
        f: usize,
    ) {
        wgrad_dispatch_narrow::<Avx2>(d, inp, grad, dw, f)
    }
}

pub(crate) mod sealed {
    use super::*;

    /// Per-type kernel selection. Only `f32` has vectorized paths; every
    /// other scalar type runs the portable kernels.
    pub trait ConvKernels: Sized + Copy {
        /// # Safety
        /// Buffers must match the extents described by `d`.
        unsafe fn conv_forward(isa: Isa, d: &Dims, inp: *const Self, w: *const Self, out: *mut Self);

        /// # Safety
        /// Buffers must match the extents described by `d`.
        unsafe fn conv_weight_grad(
            isa: Isa,
            d: &Dims,
            inp: *const Self,
            grad: *const Self,
            dw: *mut Self,
            f: usize,
        );

        /// Instruction set the convolution kernels use for this type.
        fn conv_isa() -> Isa {
            Isa::Portable
        }
    }

    impl ConvKernels for f64 {
        unsafe fn conv_forward(_: Isa, d: &Dims, inp: *const f64, w: *const f64, out: *mut f64) {
            fwd_dispatch::<Portable<f64>, 4, 2>(d, inp, w, out)
        }

        unsafe fn conv_weight_grad(
            _: Isa,
            d: &Dims,
            inp: *const f64,
            grad: *const f64,
            dw: *mut f64,
            f: usize,
        ) {
            wgrad_dispatch_narrow::<Portable<f64>>(d, inp, grad, dw, f)
        }
    }

    impl ConvKernels for f32 {
        unsafe fn conv_forward(isa: Isa, d: &Dims, inp: *const f32, w: *const f32, out: *mut f32) {
            match isa {
                #[cfg(target_arch = "x86_64")]
                Isa::Avx512 => x86::fwd_avx512(d, inp, w, out),
                #[cfg(target_arch = "x86_64")]
                Isa::Avx2 => x86::fwd_avx2(d, inp, w, out),
                _ => fwd_dispatch::<Portable<f32>, 4, 2>(d, inp, w, out),
            }
        }

        unsafe fn conv_weight_grad(
            isa: Isa,
            d: &Dims,
            inp: *const f32,
            grad: *const f32,
            dw: *mut f32,
            f: usize,
        ) {
            match isa {
                #[cfg(target_arch = "x86_64")]
                Isa::Avx512 => x86::wgrad_avx512(d, inp, grad, dw, f),
                #[cfg(target_arch = "x86_64")]
                Isa::Avx2 => x86::wgrad_avx2(d, inp, grad, dw, f),
                _ => wgrad_dispatch_narrow::<Portable<f32>>(d, inp, grad, dw, f),
            }
        }

        fn conv_isa() -> Isa {
            Isa::detect()
        }
    }
}
