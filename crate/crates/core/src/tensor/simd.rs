//! Minimal vector abstraction used by the convolution kernels.
//!
//! Each implementation maps the same handful of operations onto one
//! instruction set. The kernels are written once, generically, and
//! instantiated inside `#[target_feature]` entry points so that the
//! intrinsics inline into feature-enabled code.

use super::Scalar;

pub(crate) trait Simd: Copy {
    type T: Scalar;
    type V: Copy;
    const LANES: usize;

    unsafe fn zero() -> Self::V;
    unsafe fn splat(x: Self::T) -> Self::V;
    unsafe fn load(p: *const Self::T) -> Self::V;
    unsafe fn store(p: *mut Self::T, v: Self::V);
    /// `a * b + acc`
    unsafe fn mul_add(a: Self::V, b: Self::V, acc: Self::V) -> Self::V;
    /// Horizontal sum in a fixed order.
    unsafe fn reduce(v: Self::V) -> Self::T;
}

pub(crate) const PORTABLE_LANES: usize = 8;

/// Plain arrays; the compiler is free to vectorize the element loops.
#[derive(Clone, Copy)]
pub(crate) struct Portable<T>(std::marker::PhantomData<T>);

impl<T: Scalar> Simd for Portable<T> {
    type T = T;
    type V = [T; PORTABLE_LANES];
    const LANES: usize = PORTABLE_LANES;

    #[inline(always)]
    unsafe fn zero() -> Self::V {
        [T::zero(); PORTABLE_LANES]
    }

    #[inline(always)]
    unsafe fn splat(x: T) -> Self::V {
        [x; PORTABLE_LANES]
    }

    #[inline(always)]
    unsafe fn load(p: *const T) -> Self::V {
        std::ptr::read_unaligned(p as *const [T; PORTABLE_LANES])
    }

    #[inline(always)]
    unsafe fn store(p: *mut T, v: Self::V) {
        std::ptr::write_unaligned(p as *mut [T; PORTABLE_LANES], v)
    }

    #[inline(always)]
    unsafe fn mul_add(a: Self::V, b: Self::V, acc: Self::V) -> Self::V {
        let mut out = acc;
        for i in 0..PORTABLE_LANES {
            out[i] = a[i] * b[i] + acc[i];
        }
        out
    }

    #[inline(always)]
    unsafe fn reduce(v: Self::V) -> T {
        v.iter().fold(T::zero(), |s, &x| s + x)
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) use x86::{Avx2, Avx512};

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::Simd;
    use std::arch::x86_64::*;

    #[derive(Clone, Copy)]
    pub(crate) struct Avx512;

    impl Simd for Avx512 {
        type T = f32;
        type V = __m512;
        const LANES: usize = 16;

        #[inline(always)]
        unsafe fn zero() -> __m512 {
            _mm512_setzero_ps()
        }

        #[inline(always)]
        unsafe fn splat(x: f32) -> __m512 {
            _mm512_set1_ps(x)
        }

        #[inline(always)]
        unsafe fn load(p: *const f32) -> __m512 {
            _mm512_loadu_ps(p)
        }

        #[inline(always)]
        unsafe fn store(p: *mut f32, v: __m512) {
            _mm512_storeu_ps(p, v)
        }

        #[inline(always)]
        unsafe fn mul_add(a: __m512, b: __m512, acc: __m512) -> __m512 {
            _mm512_fmadd_ps(a, b, acc)
        }

        #[inline(always)]
        unsafe fn reduce(v: __m512) -> f32 {
            _mm512_reduce_add_ps(v)
        }
    }

    #[derive(Clone, Copy)]
    pub(crate) struct Avx2;

    impl Simd for Avx2 {
        type T = f32;
        type V = __m256;
        const LANES: usize = 8;

        #[inline(always)]
        unsafe fn zero() -> __m256 {
            _mm256_setzero_ps()
        }

        #[inline(always)]
        unsafe fn splat(x: f32) -> __m256 {
            _mm256_set1_ps(x)
        }

        #[inline(always)]
        unsafe fn load(p: *const f32) -> __m256 {
            _mm256_loadu_ps(p)
        }

        #[inline(always)]
        unsafe fn store(p: *mut f32, v: __m256) {
            _mm256_storeu_ps(p, v)
        }

        #[inline(always)]
        unsafe fn mul_add(a: __m256, b: __m256, acc: __m256) -> __m256 {
            _mm256_fmadd_ps(a, b, acc)
        }

        #[inline(always)]
        unsafe fn reduce(v: __m256) -> f32 {
            let hi = _mm256_extractf128_ps(v, 1);
            let lo = _mm256_castps256_ps128(v);
            let s = _mm_add_ps(lo, hi);
            let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
            let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 0x55));
            _mm_cvtss_f32(s)
        }
    }
}
