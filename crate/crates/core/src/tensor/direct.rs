//! Direct stride-1 convolution on a zero-padded, row-extended layout.
//!
//! Each input plane is padded to `Hp x Wp`. An output plane is computed in a
//! "wide" layout with row pitch `Wp`, so the contribution of tap `(ki, kj)`
//! is a single contiguous axpy from the padded plane at offset
//! `ki * Wp + kj`. The last `Wp - Wo` columns of every wide row are scratch.

use super::lowering::Window;
use super::Element;

/// Output channels accumulated together in registers.
const ROWS: usize = 4;
/// Output positions per register block.
const CHUNK: usize = 16;
const LANES: usize = 8;

pub(crate) struct Plan {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub pad: usize,
    pub hp: usize,
    pub wp: usize,
    pub ho: usize,
    pub wo: usize,
    /// Length of a wide output plane that stays inside the padded input.
    pub span: usize,
}

impl Plan {
    pub fn new(g: &Window, c_out: usize) -> Option<Self> {
        if g.stride != 1 || g.k == 1 {
            return None;
        }
        let (hp, wp) = (g.height + 2 * g.pad, g.width + 2 * g.pad);
        Some(Plan {
            c_in: g.channels,
            c_out,
            k: g.k,
            h: g.height,
            w: g.width,
            pad: g.pad,
            hp,
            wp,
            ho: g.out_h,
            wo: g.out_w,
            span: (g.out_h - 1) * wp + g.out_w,
        })
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }

    /// Largest tap offset.
    fn reach(&self) -> usize {
        (self.k - 1) * (self.wp + 1)
    }

    /// Pitch of padded input planes, with slack for block overrun.
    fn in_pitch(&self) -> usize {
        self.plane() + CHUNK
    }

    /// Pitch of the front-padded gradient planes used for the input gradient.
    fn grad_pitch(&self) -> usize {
        self.reach() + self.plane() + 2 * CHUNK
    }

    fn taps(&self) -> Vec<usize> {
        (0..self.k).flat_map(|ki| (0..self.k).map(move |kj| ki * self.wp + kj)).collect()
    }

    /// Copies the interior only; borders of `out` must already be zero.
    fn pad_image<T: Element>(&self, img: &[T], out: &mut [T]) {
        let pitch = self.in_pitch();
        for c in 0..self.c_in {
            for y in 0..self.h {
                let src = &img[(c * self.h + y) * self.w..][..self.w];
                out[c * pitch + (y + self.pad) * self.wp + self.pad..][..self.w].copy_from_slice(src);
            }
        }
    }
}

/// `rows[r][j] = sum_c sum_t wpack[c][t][r] * src[c * pitch + taps[t] + j]`
/// for `j` in `0..len` rounded up to whole blocks. Each row of `rows` is
/// `row_pitch` long; `src` must hold `CHUNK` elements of slack past the last
/// read of a full-length row.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gather<T: Element>(src: &[T], pitch: usize, channels: usize, taps: &[usize], wpack: &[T], rows: &mut [T], row_pitch: usize, len: usize) {
    let nt = taps.len();
    let n = len.div_ceil(CHUNK) * CHUNK;
    let reach = taps.iter().copied().max().unwrap_or(0);
    assert!(channels == 0 || (channels - 1) * pitch + reach + n <= src.len());
    assert!(wpack.len() >= channels * nt * ROWS && rows.len() >= (ROWS - 1) * row_pitch + n);
    for base in (0..n).step_by(CHUNK) {
        let mut acc = [[T::zero(); CHUNK]; ROWS];
        for c in 0..channels {
            let plane = c * pitch + base;
            let wc = c * nt * ROWS;
            for (t, &off) in taps.iter().enumerate() {
                // SAFETY: bounded by the asserts above.
                let x = unsafe { src.get_unchecked(plane + off..plane + off + CHUNK) };
                let w = unsafe { wpack.get_unchecked(wc + t * ROWS..wc + t * ROWS + ROWS) };
                for r in 0..ROWS {
                    for l in 0..CHUNK {
                        acc[r][l] = w[r].mul_add(x[l], acc[r][l]);
                    }
                }
            }
        }
        for (r, a) in acc.iter().enumerate() {
            rows[r * row_pitch + base..][..CHUNK].copy_from_slice(a);
        }
    }
}

/// `out[t] += sum_j g[j] * x[taps[t] + j]` over `j` in `0..len` rounded up
/// to whole lanes; `g` must be zero past `len`.
#[inline(always)]
fn tap_dots<T: Element, const K: usize>(g: &[T], x: &[T], taps: &[usize; K], len: usize, out: &mut [T]) {
    const W: usize = 4 * LANES;
    let n = len.div_ceil(W) * W;
    let g = &g[..n];
    for t in 0..K {
        let xs = &x[taps[t]..taps[t] + n];
        let mut acc = [T::zero(); W];
        for (gv, xv) in g.chunks_exact(W).zip(xs.chunks_exact(W)) {
            for l in 0..W {
                acc[l] = gv[l].mul_add(xv[l], acc[l]);
            }
        }
        out[t] += acc.iter().fold(T::zero(), |s, &v| s + v);
    }
}

#[inline(always)]
fn forward_image_impl<T: Element>(p: &Plan, wpacks: &[Vec<T>], img: &[T], out: &mut [T], xpad: &mut [T], wide: &mut [T]) {
    let (pitch, row_pitch, taps) = (p.in_pitch(), p.plane() + CHUNK, p.taps());
    p.pad_image(img, xpad);
    for (blk, wpack) in wpacks.iter().enumerate() {
        let co0 = blk * ROWS;
        gather(xpad, pitch, p.c_in, &taps, wpack, wide, row_pitch, p.span);
        for r in 0..ROWS.min(p.c_out - co0) {
            let row = &wide[r * row_pitch..];
            let o = &mut out[(co0 + r) * p.ho * p.wo..][..p.ho * p.wo];
            for y in 0..p.ho {
                o[y * p.wo..(y + 1) * p.wo].copy_from_slice(&row[y * p.wp..y * p.wp + p.wo]);
            }
        }
    }
}

struct BackwardScratch<T> {
    xpad: Vec<T>,
    gpad: Vec<T>,
    rows: Vec<T>,
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_image_impl<T: Element>(
    p: &Plan,
    wpacks_t: &[Vec<T>],
    img: &[T],
    dy: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
    s: &mut BackwardScratch<T>,
) {
    let (plane, kk, reach) = (p.plane(), p.k * p.k, p.reach());
    let (in_pitch, g_pitch) = (p.in_pitch(), p.grad_pitch());
    p.pad_image(img, &mut s.xpad);
    // Gradient planes in wide layout, preceded by `reach` zeros. Only the valid
    // columns are ever written, so the zero borders survive across images.
    for co in 0..p.c_out {
        for y in 0..p.ho {
            s.gpad[co * g_pitch + reach + y * p.wp..][..p.wo].copy_from_slice(&dy[(co * p.ho + y) * p.wo..][..p.wo]);
        }
    }
    let taps = p.taps();
    for co in 0..p.c_out {
        let g = &s.gpad[co * g_pitch + reach..];
        for ci in 0..p.c_in {
            let x = &s.xpad[ci * in_pitch..];
            let out = &mut dw[(co * p.c_in + ci) * kk..][..kk];
            if p.k == 3 {
                let t: &[usize; 9] = taps[..].try_into().unwrap();
                tap_dots::<T, 9>(g, x, t, p.span, out);
            } else {
                for (ti, &off) in taps.iter().enumerate() {
                    tap_dots::<T, 1>(g, x, &[off], p.span, &mut out[ti..ti + 1]);
                }
            }
        }
    }
    let Some(dx) = dx else { return };
    let back_taps: Vec<usize> = taps.iter().map(|&off| reach - off).collect();
    let row_pitch = plane + CHUNK;
    let (y0, y1) = (p.pad * p.wp, (p.pad + p.h) * p.wp);
    for (blk, wpack) in wpacks_t.iter().enumerate() {
        let ci0 = blk * ROWS;
        gather(&s.gpad[y0..], g_pitch, p.c_out, &back_taps, wpack, &mut s.rows, row_pitch, y1 - y0);
        for r in 0..ROWS.min(p.c_in - ci0) {
            let row = &s.rows[r * row_pitch..];
            for y in 0..p.h {
                let src = &row[y * p.wp + p.pad..][..p.w];
                dx[((ci0 + r) * p.h + y) * p.w..][..p.w].copy_from_slice(src);
            }
        }
    }
}

/// Weights regrouped per block of `ROWS` destination rows as
/// `[src_channel][tap][row]`, zero-filled past the last row.
fn pack<T: Element>(dst: usize, src: usize, kk: usize, weight: impl Fn(usize, usize, usize) -> T) -> Vec<Vec<T>> {
    (0..dst.div_ceil(ROWS))
        .map(|blk| {
            let mut v = vec![T::zero(); src * kk * ROWS];
            for c in 0..src {
                for t in 0..kk {
                    for r in 0..ROWS.min(dst - blk * ROWS) {
                        v[(c * kk + t) * ROWS + r] = weight(blk * ROWS + r, c, t);
                    }
                }
            }
            v
        })
        .collect()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_image_avx2<T: Element>(p: &Plan, wpacks: &[Vec<T>], img: &[T], out: &mut [T], xpad: &mut [T], wide: &mut [T]) {
    forward_image_impl(p, wpacks, img, out, xpad, wide)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn backward_image_avx2<T: Element>(
    p: &Plan,
    wpacks_t: &[Vec<T>],
    img: &[T],
    dy: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
    s: &mut BackwardScratch<T>,
) {
    backward_image_impl(p, wpacks_t, img, dy, dw, dx, s)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Forward over a batch; `out` is `[N, C_out, Ho, Wo]`.
pub(crate) fn forward<T: Element>(p: &Plan, weight: &[T], x: &[T], out: &mut [T]) {
    let kk = p.k * p.k;
    let wpacks = pack(p.c_out, p.c_in, kk, |co, ci, t| weight[(co * p.c_in + ci) * kk + t]);
    let mut xpad = vec![T::zero(); p.c_in * p.in_pitch() + p.reach() + CHUNK];
    let mut wide = vec![T::zero(); ROWS * (p.plane() + CHUNK)];
    let avx2 = has_avx2();
    let (img_len, out_len) = (p.c_in * p.h * p.w, p.c_out * p.ho * p.wo);
    for (img, o) in x.chunks(img_len).zip(out.chunks_mut(out_len)) {
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: the CPU supports AVX2 and FMA, checked above.
            unsafe { forward_image_avx2(p, &wpacks, img, o, &mut xpad, &mut wide) };
            continue;
        }
        let _ = avx2;
        forward_image_impl(p, &wpacks, img, o, &mut xpad, &mut wide);
    }
}

/// Backward over a batch: accumulates into `dw`, overwrites `dx` if given.
pub(crate) fn backward<T: Element>(p: &Plan, weight: &[T], x: &[T], dy: &[T], dw: &mut [T], mut dx: Option<&mut [T]>) {
    let kk = p.k * p.k;
    let wpacks_t = pack(p.c_in, p.c_out, kk, |ci, co, t| weight[(co * p.c_in + ci) * kk + t]);
    let mut s = BackwardScratch {
        xpad: vec![T::zero(); p.c_in * p.in_pitch() + p.reach() + CHUNK],
        gpad: vec![T::zero(); p.c_out * p.grad_pitch() + CHUNK],
        rows: vec![T::zero(); ROWS * (p.plane() + CHUNK)],
    };
    let avx2 = has_avx2();
    let (img_len, out_len) = (p.c_in * p.h * p.w, p.c_out * p.ho * p.wo);
    for (i, (img, g)) in x.chunks(img_len).zip(dy.chunks(out_len)).enumerate() {
        let dx_n = dx.as_deref_mut().map(|d| &mut d[i * img_len..(i + 1) * img_len]);
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: the CPU supports AVX2 and FMA, checked above.
            unsafe { backward_image_avx2(p, &wpacks_t, img, g, dw, dx_n, &mut s) };
            continue;
        }
        let _ = avx2;
        backward_image_impl(p, &wpacks_t, img, g, dw, dx_n, &mut s);
    }
}
